"""Baseline training and the two-level speaker adaptation procedures.

The training loop draws its sample indices statelessly from (seed, step),
so runs are bit-reproducible and resuming at step k replays exactly the
batches a continuous run would have seen. Loss aggregation is mean over
clips of the per-clip token mean ("mean of means"), which makes gradient
accumulation with batch 1 equal larger batches up to float roundoff; when
``fuse_accumulation`` is on, an accumulation window is executed as one
batched forward computing the identical quantity.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .adapters import AdapterSet, LoRAConfig
from .checkpoint import save_checkpoint
from .clips import read_clip
from .config import ModelConfig, PAD_ID
from .model import LipReadingModel, batch_ce_loss, build_model
from .seeding import derive_seed, rng_for
from .speakersim import corpus_spec, corpus_vocab, load_manifest, split_rows
from .vocab import Vocabulary


# --------------------------------------------------------------------------- #
# learning-rate schedules                                                     #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TriStageSchedule:
    """Linear warmup from floor*peak to peak, hold, linear decay back."""

    peak_lr: float = 1e-3
    warmup_steps: int = 10_000
    decay_steps: int = 20_000
    total_steps: int = 30_000
    floor: float = 0.01

    def __post_init__(self) -> None:
        if self.warmup_steps + self.decay_steps > self.total_steps:
            raise ValueError("warmup + decay exceed total steps")

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.peak_lr * (self.floor + (1.0 - self.floor) * frac)
        hold_end = self.total_steps - self.decay_steps
        if step < hold_end:
            return self.peak_lr
        if step < self.total_steps:
            frac = (step - hold_end) / self.decay_steps
            return self.peak_lr * (1.0 - (1.0 - self.floor) * frac)
        return self.peak_lr * self.floor


@dataclass(frozen=True)
class CosineSchedule:
    """Optional linear warmup to base_lr, cosine to min_lr over period_steps,
    then flat at min_lr."""

    base_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_steps: int = 0
    period_steps: int = 5000

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        t = min(1.0, (step - self.warmup_steps) / self.period_steps)
        return self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def lr_at(schedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return schedule.lr_at(step)


VISION_SCHEDULE = CosineSchedule(base_lr=1e-4, min_lr=1e-5, warmup_steps=0, period_steps=5000)
# The input prompt is zero-initialized and has 70 updates to become useful;
# it needs a far larger step size than the LoRA path.
LANGUAGE_SCHEDULE = CosineSchedule(base_lr=1e-2, min_lr=1e-3, warmup_steps=0, period_steps=5000)


# --------------------------------------------------------------------------- #
# data                                                                        #
# --------------------------------------------------------------------------- #


@dataclass
class ClipSample:
    clip_id: str
    speaker_id: str
    frames: np.ndarray      # (T, H, W, C) uint8
    tokens: list[int]       # BOS ... EOS
    transcript: str


class ClipDataset:
    """In-memory clip collection with padded batch assembly."""

    def __init__(self, samples: list[ClipSample]):
        if not samples:
            raise ValueError("dataset is empty")
        self.samples = samples

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_rows(cls, corpus_dir: str, rows: list[dict], vocab: Vocabulary,
                  frame_rate: float = 12.5) -> "ClipDataset":
        samples = []
        for row in rows:
            clip = read_clip(os.path.join(corpus_dir, row["path"]), frame_rate)
            samples.append(ClipSample(
                clip_id=row["id"], speaker_id=row["speaker_id"], frames=clip.frames,
                tokens=vocab.target_tokens(row["transcript"]), transcript=row["transcript"],
            ))
        return cls(samples)

    def batch(self, indices: list[int] | np.ndarray, dtype: torch.dtype
              ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(frames, frame_mask, tokens) padded to the longest clip/sentence."""
        chosen = [self.samples[int(i)] for i in indices]
        t_max = max(s.frames.shape[0] for s in chosen)
        l_max = max(len(s.tokens) for s in chosen)
        b = len(chosen)
        _, h, w, c = chosen[0].frames.shape
        frames = torch.zeros(b, t_max, c, h, w, dtype=dtype)
        mask = torch.zeros(b, t_max, dtype=torch.bool)
        tokens = torch.full((b, l_max), PAD_ID, dtype=torch.long)
        for i, s in enumerate(chosen):
            t = s.frames.shape[0]
            arr = torch.from_numpy(np.ascontiguousarray(s.frames)).permute(0, 3, 1, 2)
            frames[i, :t] = arr.to(dtype) / 255.0
            mask[i, :t] = True
            tokens[i, :len(s.tokens)] = torch.tensor(s.tokens, dtype=torch.long)
        return frames, mask, tokens


def load_split(corpus_dir: str, split: str, speaker_id: str | None = None,
               rows: list[dict] | None = None) -> ClipDataset:
    manifest = rows if rows is not None else load_manifest(
        os.path.join(corpus_dir, "manifest.jsonl"))
    spec = corpus_spec(corpus_dir)
    vocab = corpus_vocab(corpus_dir)
    selected = split_rows(manifest, split, speaker_id)
    return ClipDataset.from_rows(corpus_dir, selected, vocab, spec.frame_rate)


# --------------------------------------------------------------------------- #
# core loop                                                                   #
# --------------------------------------------------------------------------- #


def freeze_base(model: LipReadingModel) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


def mark_trainable(params: list[torch.nn.Parameter]) -> None:
    for p in params:
        p.requires_grad_(True)


def batch_indices(seed: int, step: int, n: int, count: int) -> np.ndarray:
    """Stateless sample draw for one optimizer step."""
    return rng_for(seed, "batch", step).integers(0, n, size=count)


def run_training(model: LipReadingModel, trainable: list[torch.nn.Parameter],
                 dataset: ClipDataset, schedule, steps: int,
                 batch_size: int = 1, grad_accum: int = 1, seed: int = 0,
                 adapters: AdapterSet | None = None, weight_decay: float = 0.0,
                 fuse_accumulation: bool = True, start_step: int = 0,
                 log_path: str | None = None) -> list[dict]:
    """Teacher-forced CE training for exactly ``steps - start_step`` optimizer
    steps; returns the run log rows {step, lr, loss, wall_ms}."""
    if not trainable:
        raise ValueError("no trainable parameters")
    freeze_base(model)
    if adapters is not None:
        for p in adapters.parameters():
            p.requires_grad_(False)
    mark_trainable(trainable)
    opt = torch.optim.AdamW(trainable, lr=1.0, betas=(0.9, 0.98),
                            weight_decay=weight_decay)
    window = batch_size * grad_accum
    log: list[dict] = []
    model.train()
    for step in range(start_step, steps):
        t0 = time.perf_counter()
        idx = batch_indices(seed, step, len(dataset), window)
        if fuse_accumulation:
            frames, mask, tokens = dataset.batch(idx, model.dtype)
            logits = model.teacher_logits(frames, mask, tokens, adapters)
            loss = batch_ce_loss(logits, tokens[:, 1:])
            loss.backward()
            loss_value = float(loss.detach())
        else:
            micro_losses = []
            for m in range(grad_accum):
                sub = idx[m * batch_size:(m + 1) * batch_size]
                frames, mask, tokens = dataset.batch(sub, model.dtype)
                logits = model.teacher_logits(frames, mask, tokens, adapters)
                loss = batch_ce_loss(logits, tokens[:, 1:])
                (loss / grad_accum).backward()
                micro_losses.append(float(loss.detach()))
            loss_value = sum(micro_losses) / len(micro_losses)
        if not math.isfinite(loss_value):
            raise RuntimeError(f"training diverged at step {step}: loss={loss_value}")
        lr = lr_at(schedule, step)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.step()
        opt.zero_grad(set_to_none=True)
        log.append({"step": step, "lr": lr, "loss": loss_value,
                    "wall_ms": (time.perf_counter() - t0) * 1000.0})
    model.eval()
    if log_path:
        with open(log_path, "w") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
    return log


# --------------------------------------------------------------------------- #
# baseline training                                                           #
# --------------------------------------------------------------------------- #


def train_baseline(corpus_dir: str, out_dir: str, config: ModelConfig | None = None,
                   schedule: TriStageSchedule | None = None, steps: int = 3000,
                   batch_size: int = 8, grad_accum: int = 1, seed: int = 0,
                   dataset: ClipDataset | None = None) -> str:
    """Train every parameter on the corpus baseline split; returns the
    checkpoint directory."""
    vocab = corpus_vocab(corpus_dir)
    spec = corpus_spec(corpus_dir)
    if config is None:
        config = ModelConfig(vocab_size=vocab.size, frame_height=spec.frame_height,
                             frame_width=spec.frame_width)
    if schedule is None:
        schedule = TriStageSchedule(peak_lr=1e-3, warmup_steps=max(1, steps // 10),
                                    decay_steps=max(1, steps // 3), total_steps=steps)
    if dataset is None:
        dataset = load_split(corpus_dir, "baseline")
    model = build_model(config, seed=derive_seed(seed, "baseline-init"))
    trainable = list(model.parameters())
    os.makedirs(out_dir, exist_ok=True)
    run_training(model, trainable, dataset, schedule, steps,
                 batch_size=batch_size, grad_accum=grad_accum,
                 seed=derive_seed(seed, "baseline-data"), weight_decay=0.01,
                 log_path=os.path.join(out_dir, "train_log.jsonl"))
    save_checkpoint(out_dir, model, config,
                    extra={"trained_on": corpus_dir, "steps": steps, "seed": seed})
    return out_dir


# --------------------------------------------------------------------------- #
# adaptation                                                                  #
# --------------------------------------------------------------------------- #


@dataclass
class AdaptationPlan:
    level: str = "both"                 # vision | language | both
    vision_steps: int = 300
    language_updates: int = 70
    batch_size: int = 1
    grad_accum: int = 8
    lora: LoRAConfig | None = field(default_factory=LoRAConfig)
    use_padding_prompts: bool = True
    prompt_len: int = 10
    seed: int = 0
    joint: bool = False
    vision_schedule: CosineSchedule = VISION_SCHEDULE
    language_schedule: CosineSchedule = LANGUAGE_SCHEDULE
    fuse_accumulation: bool = True

    def with_seed(self, seed: int) -> "AdaptationPlan":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "vision_steps": self.vision_steps,
            "language_updates": self.language_updates,
            "batch_size": self.batch_size,
            "grad_accum": self.grad_accum,
            "lora": None if self.lora is None else self.lora.to_dict(),
            "use_padding_prompts": self.use_padding_prompts,
            "prompt_len": self.prompt_len,
            "seed": self.seed,
            "joint": self.joint,
            "vision_schedule": self.vision_schedule.__dict__,
            "language_schedule": self.language_schedule.__dict__,
            "fuse_accumulation": self.fuse_accumulation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationPlan":
        d = dict(d)
        if d.get("lora") is not None:
            d["lora"] = LoRAConfig.from_dict(d["lora"])
        if "vision_schedule" in d:
            d["vision_schedule"] = CosineSchedule(**d["vision_schedule"])
        if "language_schedule" in d:
            d["language_schedule"] = CosineSchedule(**d["language_schedule"])
        return cls(**d)


def adapt_vision(model: LipReadingModel, speaker_data: ClipDataset,
                 plan: AdaptationPlan, log_path: str | None = None) -> AdapterSet:
    """Vision-level adaptation: padding prompts + LoRA on the configured
    encoder targets; decoder, projector and all base weights stay frozen."""
    if len(speaker_data) == 0:
        raise ValueError("speaker adaptation data is empty")
    adapters = AdapterSet.init_vision(
        model.config, plan.lora, plan.use_padding_prompts,
        generator=_torch_gen(plan.seed, "vision-init"))
    if not list(adapters.parameters()):
        raise ValueError("vision plan has no trainable adapters "
                         "(no LoRA targets and padding prompts disabled)")
    adapters.run_log = run_training(
        model, list(adapters.parameters()), speaker_data, plan.vision_schedule,
        plan.vision_steps, plan.batch_size, plan.grad_accum,
        seed=derive_seed(plan.seed, "vision-data"), adapters=adapters,
        fuse_accumulation=plan.fuse_accumulation, log_path=log_path)
    return adapters


def adapt_language(model: LipReadingModel, vision_adapters: AdapterSet | None,
                   speaker_data: ClipDataset, plan: AdaptationPlan,
                   log_path: str | None = None) -> torch.nn.Parameter:
    """Language-level adaptation: trains only the input prompt (N_p x D_L)
    in front of the frozen decoder; any supplied vision adapters are applied
    but frozen."""
    if plan.prompt_len < 1:
        raise ValueError("language-level adaptation requires prompt_len >= 1")
    if len(speaker_data) == 0:
        raise ValueError("speaker adaptation data is empty")
    work = combine_adapters(model.config, vision_adapters, None)
    work.add_input_prompt(plan.prompt_len)
    prompt = work.input_prompt
    prompt.run_log = run_decoder_training(
        model, work, [prompt], speaker_data, plan.language_schedule,
        plan.language_updates, plan.batch_size, plan.grad_accum,
        seed=derive_seed(plan.seed, "language-data"),
        fuse_accumulation=plan.fuse_accumulation, log_path=log_path)
    return prompt


def run_decoder_training(model: LipReadingModel, adapters: AdapterSet,
                         trainable: list[torch.nn.Parameter], dataset: ClipDataset,
                         schedule, steps: int, batch_size: int = 1, grad_accum: int = 8,
                         seed: int = 0, fuse_accumulation: bool = True,
                         log_path: str | None = None) -> list[dict]:
    """Decoder-side training against cached encoder outputs.

    Valid whenever the trainable parameters cannot influence the encoder
    (input prompt, decoder LoRA): the frozen encoder makes each clip's
    aligned features constant, so encoding once and training against the
    decoder is the same computation at a fraction of the cost.
    """
    freeze_base(model)
    for p in adapters.parameters():
        p.requires_grad_(False)
    mark_trainable(trainable)

    cached: list[tuple[torch.Tensor, torch.Tensor]] = []
    with torch.no_grad():
        for i in range(len(dataset)):
            frames, mask, _ = dataset.batch([i], model.dtype)
            aligned = model.encode_batch(frames, mask, adapters)
            cached.append((aligned[0], torch.tensor(dataset.samples[i].tokens)))

    opt = torch.optim.AdamW(trainable, lr=1.0, betas=(0.9, 0.98), weight_decay=0.0)
    window = batch_size * grad_accum
    log: list[dict] = []
    model.eval()

    def window_loss(sub: np.ndarray) -> torch.Tensor:
        feats = [cached[int(i)][0] for i in sub]
        toks = [cached[int(i)][1] for i in sub]
        t_max = max(f.shape[0] for f in feats)
        l_max = max(t.shape[0] for t in toks)
        aligned = feats[0].new_zeros(len(sub), t_max, feats[0].shape[1])
        mask = torch.zeros(len(sub), t_max, dtype=torch.bool)
        tokens = torch.full((len(sub), l_max), PAD_ID, dtype=torch.long)
        for j, (f, t) in enumerate(zip(feats, toks)):
            aligned[j, :f.shape[0]] = f
            mask[j, :f.shape[0]] = True
            tokens[j, :t.shape[0]] = t
        logits = model.decoder_teacher_logits(aligned, mask, tokens, adapters)
        return batch_ce_loss(logits, tokens[:, 1:])

    for step in range(steps):
        t0 = time.perf_counter()
        idx = batch_indices(seed, step, len(dataset), window)
        if fuse_accumulation:
            loss = window_loss(idx)
            loss.backward()
            loss_value = float(loss.detach())
        else:
            vals = []
            for m in range(grad_accum):
                loss = window_loss(idx[m * batch_size:(m + 1) * batch_size])
                (loss / grad_accum).backward()
                vals.append(float(loss.detach()))
            loss_value = sum(vals) / len(vals)
        if not math.isfinite(loss_value):
            raise RuntimeError(f"decoder-side adaptation diverged at step {step}")
        lr = lr_at(schedule, step)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.step()
        opt.zero_grad(set_to_none=True)
        log.append({"step": step, "lr": lr, "loss": loss_value,
                    "wall_ms": (time.perf_counter() - t0) * 1000.0})
    if log_path:
        with open(log_path, "w") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
    return log


def adapt_both(model: LipReadingModel, speaker_data: ClipDataset,
               plan: AdaptationPlan, log_dir: str | None = None) -> AdapterSet:
    """Sequential vision -> language adaptation by default; with
    ``plan.joint`` all adapters train together on the vision schedule."""
    if plan.joint:
        adapters = AdapterSet.init_vision(
            model.config, plan.lora, plan.use_padding_prompts,
            generator=_torch_gen(plan.seed, "vision-init"))
        adapters.add_input_prompt(plan.prompt_len)
        adapters.run_log = run_training(
            model, list(adapters.parameters()), speaker_data, plan.vision_schedule,
            plan.vision_steps, plan.batch_size, plan.grad_accum,
            seed=derive_seed(plan.seed, "joint-data"), adapters=adapters,
            fuse_accumulation=plan.fuse_accumulation,
            log_path=_log(log_dir, "joint"))
        return adapters
    vision = adapt_vision(model, speaker_data, plan, log_path=_log(log_dir, "vision"))
    prompt = adapt_language(model, vision, speaker_data, plan,
                            log_path=_log(log_dir, "language"))
    return combine_adapters(model.config, vision, prompt)


def combine_adapters(config: ModelConfig, vision: AdapterSet | None,
                     prompt: torch.nn.Parameter | None) -> AdapterSet:
    """AdapterSet sharing the given components (no copies)."""
    out = AdapterSet(config, vision.lora_cfg if vision is not None else None)
    if vision is not None:
        out.padding_prompts = vision.padding_prompts
        out.lora = vision.lora
    if prompt is not None:
        out.input_prompt = prompt
    return out


def _torch_gen(seed: int, tag: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, tag))
    return g


def _log(log_dir: str | None, stage: str) -> str | None:
    return None if log_dir is None else os.path.join(log_dir, f"adapt_{stage}_log.jsonl")
