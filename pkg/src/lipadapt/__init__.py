"""Speaker-adaptive lip reading toolkit: a small conv+attention lip reading
network, parameter-efficient speaker adaptation (padding prompts, LoRA,
input prompt tuning), a synthetic multi-speaker corpus generator and the
dataset-construction pipeline, all sized to run on a CPU."""

__version__ = "0.1.0"
