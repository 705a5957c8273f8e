"""WER metric and per-speaker evaluation reports.

WER here is corpus-level per speaker (total word edits / total reference
words) and the table "Mean" column is the unweighted mean over speakers;
every report states this definition in its header. Text is normalized
(lowercase, punctuation stripped, whitespace collapsed) identically on
both sides before scoring.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .speakersim import corpus_spec, corpus_vocab, load_manifest, split_rows
from .vocab import normalize_text

WER_DEFINITION = ("per speaker: total word edit distance / total reference words; "
                  "mean: unweighted over speakers")


def edit_distance(ref: list[str], hyp: list[str]) -> int:
    """Word-level Levenshtein distance (substitution/insertion/deletion = 1)."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(reference: str | list[str], hypothesis: str | list[str]) -> float:
    """Word error rate; raises on an empty reference."""
    ref = normalize_text(reference).split() if isinstance(reference, str) else list(reference)
    hyp = normalize_text(hypothesis).split() if isinstance(hypothesis, str) else list(hypothesis)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


@dataclass
class EvalReport:
    per_speaker: dict[str, float]            # WER percent
    mean_wer: float                          # percent
    utterances: list[dict]                   # per-clip counts for recomputation
    trainable: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "wer_definition": WER_DEFINITION,
            "per_speaker": self.per_speaker,
            "mean_wer": self.mean_wer,
            "trainable": self.trainable,
            "metadata": self.metadata,
            "missing": self.missing,
            "utterances": self.utterances,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def manifest_hash(corpus_dir: str) -> str:
    with open(os.path.join(corpus_dir, "manifest.jsonl"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def speaker_wer_from_counts(utterances: list[dict]) -> dict[str, float]:
    """Recompute per-speaker corpus-level WER percent from utterance counts."""
    edits: dict[str, int] = {}
    words: dict[str, int] = {}
    for u in utterances:
        edits[u["speaker_id"]] = edits.get(u["speaker_id"], 0) + u["edits"]
        words[u["speaker_id"]] = words.get(u["speaker_id"], 0) + u["ref_words"]
    return {s: 100.0 * edits[s] / words[s] for s in edits}


def evaluate(model, adapters, corpus_dir: str, split: str = "test",
             speakers: list[str] | None = None, manifest: list[dict] | None = None,
             decode_fn=None, metadata: dict | None = None,
             chunk_size: int = 16) -> EvalReport:
    """Greedy-decode every clip of the split and score per speaker.

    ``decode_fn(model, frames, frame_mask, adapters) -> list[list[int]]``
    defaults to the model's batched greedy decoder; injecting an oracle here
    is how the report arithmetic is tested independently of the model.
    """
    from .clips import read_clip

    rows = manifest if manifest is not None else load_manifest(
        os.path.join(corpus_dir, "manifest.jsonl"))
    spec = corpus_spec(corpus_dir)
    vocab = corpus_vocab(corpus_dir)
    decode = decode_fn or (lambda m, f, k, a: m.decode_batch(f, k, a))

    selected = [r for r in split_rows(rows, split)
                if speakers is None or r["speaker_id"] in speakers]
    if not selected:
        raise ValueError(f"no rows in split {split!r} for the requested speakers")

    utterances: list[dict] = []
    missing: list[str] = []
    by_speaker: dict[str, list[dict]] = {}
    for r in selected:
        by_speaker.setdefault(r["speaker_id"], []).append(r)

    for speaker in sorted(by_speaker):
        srows = by_speaker[speaker]
        clips, kept = [], []
        for r in srows:
            path = os.path.join(corpus_dir, r["path"])
            if not os.path.exists(path):
                missing.append(r["id"])
                continue
            clips.append(read_clip(path, spec.frame_rate))
            kept.append(r)
        for start in range(0, len(clips), chunk_size):
            chunk = clips[start:start + chunk_size]
            crows = kept[start:start + chunk_size]
            t_max = max(c.num_frames for c in chunk)
            b = len(chunk)
            _, h, w, ch = chunk[0].frames.shape
            frames = torch.zeros(b, t_max, ch, h, w, dtype=model.dtype)
            mask = torch.zeros(b, t_max, dtype=torch.bool)
            for i, c in enumerate(chunk):
                arr = torch.from_numpy(np.ascontiguousarray(c.frames)).permute(0, 3, 1, 2)
                frames[i, :c.num_frames] = arr.to(model.dtype) / 255.0
                mask[i, :c.num_frames] = True
            hyp_ids = decode(model, frames, mask, adapters)
            for r, ids in zip(crows, hyp_ids):
                ref = normalize_text(r["transcript"]).split()
                hyp = normalize_text(vocab.decode(ids)).split()
                utterances.append({
                    "clip_id": r["id"], "speaker_id": r["speaker_id"],
                    "reference": " ".join(ref), "hypothesis": " ".join(hyp),
                    "edits": edit_distance(ref, hyp), "ref_words": len(ref),
                })

    per_speaker = speaker_wer_from_counts(utterances)
    mean = sum(per_speaker.values()) / len(per_speaker)
    meta = {"split": split, "corpus_hash": manifest_hash(corpus_dir),
            "wer_definition": WER_DEFINITION}
    if metadata:
        meta.update(metadata)
    trainable = adapters.count_trainable() if adapters is not None else {}
    return EvalReport(per_speaker=per_speaker, mean_wer=mean, utterances=utterances,
                      trainable=trainable, metadata=meta, missing=missing)
