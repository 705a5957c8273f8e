"""The three experiment tables: method comparison, adaptation-duration
sweep, and the LoRA target/rank ablation grid.

An ExperimentSession owns the trained baseline plus caches so the tables
share work: the sweep reuses the comparison's vision adapters, "both" rows
reuse the vision stage, and every run seed is derived from
(session seed, speaker, stage, budget), which makes separately invoked
tables agree and full reruns reproduce bit-identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import torch

from .adapters import AdapterSet, LoRAConfig
from .checkpoint import load_checkpoint
from .evaluation import evaluate
from .model import LipReadingModel, component_parameter_counts
from .seeding import derive_seed
from .speakersim import budget_subset, corpus_spec, corpus_vocab, load_manifest, split_rows
from .training import (AdaptationPlan, ClipDataset, CosineSchedule, adapt_language,
                       adapt_vision, combine_adapters, run_decoder_training, run_training)

# The paper-published schedule values assume a much wider model; at desk
# scale the same 300-step/70-update budgets need larger steps to move the
# adapters, so the experiment tables default to this re-tuned plan (the
# `adapt` CLI keeps the published defaults).
DESK_PLAN = AdaptationPlan(
    vision_schedule=CosineSchedule(base_lr=3e-4, min_lr=3e-5, warmup_steps=0,
                                   period_steps=5000),
    language_schedule=CosineSchedule(base_lr=1e-2, min_lr=1e-3, warmup_steps=0,
                                     period_steps=5000),
)

ABLATION_GRID = (
    (("wc",), 8), (("wq",), 8), (("wk",), 8), (("wv",), 8),
    (("wq", "wk", "wv"), 8), (("wc", "wq", "wk", "wv"), 8),
    (("wc", "wq", "wk", "wv"), 4), (("wc", "wq", "wk", "wv"), 2),
)


def format_params(n: int | None, total: bool = False, plus: bool = True) -> str:
    if n is None:
        return "-"
    if n >= 100_000:
        text = f"{n / 1e6:.1f}M"
    elif n >= 10_000:
        text = f"{n / 1e6:.2f}M"  # the 0.04M-style decoder column
    elif n >= 1000:
        text = f"{n / 1e3:.1f}K"
    else:
        text = str(n)
    if total:
        return text + "*"
    return ("+" + text) if plus else text


class ExperimentSession:
    def __init__(self, corpus_dir: str, checkpoint_dir: str, seed: int = 0,
                 plan: AdaptationPlan | None = None):
        self.corpus_dir = corpus_dir
        self.checkpoint_dir = checkpoint_dir
        self.seed = seed
        self.model, self.config = load_checkpoint(checkpoint_dir)
        self.spec = corpus_spec(corpus_dir)
        self.vocab = corpus_vocab(corpus_dir)
        self.manifest = load_manifest(os.path.join(corpus_dir, "manifest.jsonl"))
        self.speakers = sorted({r["speaker_id"] for r in self.manifest
                                if r["speaker_id"].startswith("S")})
        self.base_plan = plan or DESK_PLAN
        self.max_budget = self.spec.budget_ladder[-1]
        self._train_data: dict[str, ClipDataset] = {}
        self._budget_len: dict[tuple[str, float], int] = {}
        self._vision: dict[tuple, AdapterSet] = {}
        self._wer: dict[tuple, float] = {}

    # -- data ---------------------------------------------------------------

    def train_dataset(self, speaker: str, budget: float) -> ClipDataset:
        if speaker not in self._train_data:
            rows = split_rows(self.manifest, "train", speaker)
            self._train_data[speaker] = ClipDataset.from_rows(
                self.corpus_dir, rows, self.vocab, self.spec.frame_rate)
        full = self._train_data[speaker]
        key = (speaker, budget)
        if key not in self._budget_len:
            rows = split_rows(self.manifest, "train", speaker)
            self._budget_len[key] = len(budget_subset(rows, budget, self.spec.unit_seconds))
        return ClipDataset(full.samples[:self._budget_len[key]])

    # -- adaptation stages (cached) -------------------------------------------

    def _lora_key(self, lora: LoRAConfig | None) -> tuple:
        return () if lora is None else (lora.rank, lora.alpha, lora.targets)

    def vision_adapters(self, speaker: str, budget: float, lora: LoRAConfig | None,
                        padding: bool) -> AdapterSet:
        key = (speaker, budget, self._lora_key(lora), padding)
        if key not in self._vision:
            seed = derive_seed(self.seed, "vision", speaker, budget,
                               self._lora_key(lora), padding)
            plan = replace(self.base_plan, lora=lora, use_padding_prompts=padding, seed=seed)
            self._vision[key] = adapt_vision(self.model, self.train_dataset(speaker, budget),
                                             plan)
        return self._vision[key]

    def language_prompt(self, speaker: str, budget: float,
                        vision: AdapterSet | None, tag: str) -> torch.nn.Parameter:
        seed = derive_seed(self.seed, "language", speaker, budget, tag)
        plan = replace(self.base_plan, seed=seed)
        return adapt_language(self.model, vision, self.train_dataset(speaker, budget), plan)

    def language_lora(self, speaker: str, budget: float) -> AdapterSet:
        lora = self.base_plan.lora or LoRAConfig()
        adapters = AdapterSet.init_language_lora(
            self.config, lora,
            generator=_gen(self.seed, "l-lora-init", speaker, budget))
        run_decoder_training(
            self.model, adapters, list(adapters.parameters()),
            self.train_dataset(speaker, budget), self.base_plan.language_schedule,
            self.base_plan.language_updates, self.base_plan.batch_size,
            self.base_plan.grad_accum,
            seed=derive_seed(self.seed, "l-lora-data", speaker, budget),
            fuse_accumulation=self.base_plan.fuse_accumulation)
        return adapters

    def finetuned_model(self, speaker: str, budget: float, parts: str) -> LipReadingModel:
        """Full fine-tuning comparator; parts is 'F', 'B' or 'FB'."""
        model, _ = load_checkpoint(self.checkpoint_dir)
        trainable: list[torch.nn.Parameter] = []
        if "F" in parts:
            trainable += list(model.frontend.parameters())
        if "B" in parts:
            trainable += list(model.backend_blocks.parameters())
            trainable += list(model.backend_ln.parameters())
        run_training(model, trainable, self.train_dataset(speaker, budget),
                     self.base_plan.vision_schedule, self.base_plan.vision_steps,
                     self.base_plan.batch_size, self.base_plan.grad_accum,
                     seed=derive_seed(self.seed, "finetune", parts, speaker, budget),
                     fuse_accumulation=self.base_plan.fuse_accumulation)
        return model

    # -- evaluation -----------------------------------------------------------

    def speaker_wer(self, speaker: str, tag: tuple, adapters: AdapterSet | None,
                    model: LipReadingModel | None = None) -> float:
        key = (speaker, tag)
        if key not in self._wer:
            report = evaluate(model or self.model, adapters, self.corpus_dir,
                              split="test", speakers=[speaker], manifest=self.manifest)
            self._wer[key] = report.per_speaker[speaker]
        return self._wer[key]

    def baseline_wer(self, speaker: str) -> float:
        return self.speaker_wer(speaker, ("baseline",), None)


def _gen(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


# --------------------------------------------------------------------------- #
# tables                                                                      #
# --------------------------------------------------------------------------- #


@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": self.columns, "rows": self.rows,
                "metadata": self.metadata}

    def save(self, json_path: str, tsv_path: str | None = None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        if tsv_path:
            with open(tsv_path, "w") as fh:
                fh.write(self.tsv())

    def tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(str(row.get(c, "")) for c in self.columns))
        return "\n".join(lines) + "\n"


def method_comparison(session: ExperimentSession, budget: float | None = None) -> Table:
    """Speaker-adaptive training strategies side by side (Table 3 layout):
    WER plus trainable-parameter columns for encoder and decoder."""
    budget = budget if budget is not None else session.max_budget
    base_counts = component_parameter_counts(session.model)
    prompt_params = session.base_plan.prompt_len * session.config.decoder_dim
    lora = session.base_plan.lora or LoRAConfig()
    rows: list[dict] = []

    def add_row(section, method, enc, dec, wers, enc_total=False, dec_total=False):
        rows.append({
            "section": section, "method": method,
            "encoder_trainable": enc, "decoder_trainable": dec,
            "encoder_display": format_params(enc, total=enc_total),
            "decoder_display": format_params(dec, total=dec_total),
            "per_speaker": {s: round(w, 1) for s, w in wers.items()},
            "wer_mean": round(_mean(list(wers.values())), 1),
        })

    baseline = {s: session.baseline_wer(s) for s in session.speakers}
    add_row("", "Baseline", base_counts["encoder"], base_counts["decoder"], baseline,
            enc_total=True, dec_total=True)

    # vision level
    specs = [
        ("V LoRA", lora, False),
        ("Padding Prompt", None, True),
    ]
    for method, lcfg, pad in specs:
        wers = {}
        for s in session.speakers:
            ad = session.vision_adapters(s, budget, lcfg, pad)
            wers[s] = session.speaker_wer(s, ("vision", method, budget), ad)
        counts = session.vision_adapters(session.speakers[0], budget, lcfg, pad).count_trainable()
        add_row("Vision-Level Adaptation", method, counts["encoder"], None, wers)

    finetuned: dict[tuple[str, str], LipReadingModel] = {}
    for parts, label, count in (("F", "Finetune-F", base_counts["frontend"]),
                                ("B", "Finetune-B", base_counts["backend"]),
                                ("FB", "Finetune-F&B", base_counts["encoder"])):
        wers = {}
        for s in session.speakers:
            model = session.finetuned_model(s, budget, parts)
            finetuned[(parts, s)] = model
            wers[s] = session.speaker_wer(s, ("finetune", parts, budget), None, model)
        add_row("Vision-Level Adaptation", label, count, None, wers, enc_total=False)

    ours_vision = {}
    for s in session.speakers:
        ad = session.vision_adapters(s, budget, lora, True)
        ours_vision[s] = session.speaker_wer(s, ("vision", "ours", budget), ad)
    vision_counts = session.vision_adapters(
        session.speakers[0], budget, lora, True).count_trainable()
    add_row("Vision-Level Adaptation", "Ours", vision_counts["encoder"], None, ours_vision)

    # language level
    wers = {}
    llora_counts = None
    for s in session.speakers:
        ad = session.language_lora(s, budget)
        llora_counts = ad.count_trainable()
        wers[s] = session.speaker_wer(s, ("language", "lora", budget), ad)
    add_row("Language-Level Adaptation", "L LoRA", None, llora_counts["decoder"], wers)

    wers = {}
    for s in session.speakers:
        prompt = session.language_prompt(s, budget, None, "language-only")
        ad = combine_adapters(session.config, None, prompt)
        wers[s] = session.speaker_wer(s, ("language", "ours", budget), ad)
    add_row("Language-Level Adaptation", "Ours", None, prompt_params, wers)

    # vision and language
    wers = {}
    for s in session.speakers:
        model = finetuned[("FB", s)]
        seed = derive_seed(session.seed, "language", s, budget, "after-ftfb")
        plan = replace(session.base_plan, seed=seed)
        prompt = adapt_language(model, None, session.train_dataset(s, budget), plan)
        ad = combine_adapters(session.config, None, prompt)
        wers[s] = session.speaker_wer(s, ("ftfb+prompt", budget), ad, model)
    add_row("Vision-and-Language-Level Adaptation", "Finetune-F&B",
            base_counts["encoder"], prompt_params, wers)

    wers = {}
    for s in session.speakers:
        vision = session.vision_adapters(s, budget, lora, True)
        prompt = session.language_prompt(s, budget, vision, "after-vision")
        ad = combine_adapters(session.config, vision, prompt)
        wers[s] = session.speaker_wer(s, ("both", "ours", budget), ad)
    add_row("Vision-and-Language-Level Adaptation", "Ours",
            vision_counts["encoder"], prompt_params, wers)

    table = Table(
        title="Speaker-adaptive training strategy comparison",
        columns=["section", "method", "encoder_display", "decoder_display", "wer_mean"],
        rows=rows,
        metadata={"budget_units": budget, "seed": session.seed,
                  "speakers": session.speakers},
    )
    return table


def duration_sweep(session: ExperimentSession,
                   budgets: tuple[float, ...] | None = None) -> Table:
    """Full two-level adaptation across duration budgets (Table 4 layout):
    per-speaker WER and the unweighted mean, budgets nested by construction."""
    budgets = budgets if budgets is not None else session.spec.budget_ladder
    lora = session.base_plan.lora or LoRAConfig()
    rows = []
    baseline = {s: session.baseline_wer(s) for s in session.speakers}
    rows.append({"budget": "Baseline",
                 "per_speaker": {s: round(w, 1) for s, w in baseline.items()},
                 "wer_mean": round(_mean(list(baseline.values())), 1)})
    for budget in budgets:
        wers = {}
        for s in session.speakers:
            vision = session.vision_adapters(s, budget, lora, True)
            prompt = session.language_prompt(s, budget, vision, "after-vision")
            ad = combine_adapters(session.config, vision, prompt)
            wers[s] = session.speaker_wer(s, ("both", "ours", budget), ad)
        rows.append({"budget": budget,
                     "per_speaker": {s: round(w, 1) for s, w in wers.items()},
                     "wer_mean": round(_mean(list(wers.values())), 1)})
    return Table(
        title="WER across adaptation durations",
        columns=["budget", "wer_mean"],
        rows=rows,
        metadata={"budgets": list(budgets), "seed": session.seed,
                  "speakers": session.speakers,
                  "unit_seconds": session.spec.unit_seconds},
    )


def lora_ablation(session: ExperimentSession, speaker: str | None = None,
                  budget: float | None = None,
                  grid: tuple = ABLATION_GRID) -> Table:
    """LoRA weight-type and rank grid for vision-level adaptation (Table 5
    layout), LoRA only so parameter counts scale exactly linearly in rank."""
    speaker = speaker or session.speakers[0]
    budget = budget if budget is not None else session.max_budget
    alpha = (session.base_plan.lora or LoRAConfig()).alpha
    rows = [{
        "weight_type": "Baseline", "rank": "-", "params": 0, "params_display": "-",
        "wer": round(session.baseline_wer(speaker), 1),
    }]
    for targets, rank in grid:
        lcfg = LoRAConfig(rank=rank, alpha=alpha, targets=tuple(targets))
        adapters = session.vision_adapters(speaker, budget, lcfg, False)
        counts = adapters.count_trainable()
        wer = session.speaker_wer(speaker, ("ablate", targets, rank, budget), adapters)
        rows.append({
            "weight_type": ", ".join(t.replace("w", "W_") for t in targets),
            "rank": rank,
            "params": counts["lora"],
            "params_display": format_params(counts["lora"]),
            "wer": round(wer, 1),
        })
    return Table(
        title="LoRA weight configurations and ranks in vision-level adaptation",
        columns=["weight_type", "rank", "params_display", "wer"],
        rows=rows,
        metadata={"speaker": speaker, "budget_units": budget, "seed": session.seed},
    )
