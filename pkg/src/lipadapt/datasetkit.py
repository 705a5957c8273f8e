"""Dataset-construction pipeline: pseudo-labeling through a pluggable
transcriber, 3-segment face-embedding speaker identification, cross-corpus
identity overlap, duration-budget split building and per-speaker statistics.

Real face recognition and ASR stay behind function-valued contracts; the
synthetic providers here exercise the pipeline end to end.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .seeding import rng_for

UNIT_TOL = 1e-6  # embeddings must be unit norm within this


@dataclass
class VideoRecord:
    id: str
    source: str = ""
    duration_s: float = 0.0
    speaker_id: str | None = None
    transcript: str | None = None
    pseudo_label: bool = False
    cluster_id: int | None = None

    def __post_init__(self) -> None:
        if self.duration_s <= 0:
            raise ValueError(f"record {self.id}: duration_s must be positive")

    @classmethod
    def from_manifest_row(cls, row: dict, source: str = "") -> "VideoRecord":
        return cls(id=row["id"], source=source or row.get("source", ""),
                   duration_s=row["duration_s"], speaker_id=row.get("speaker_id"),
                   transcript=row.get("transcript"))


def segment_frames(t_frames: int) -> tuple[list[int], bool]:
    """Midpoint frame of each third of the video.

    Returns (indices, fallback): clips shorter than 3 frames fall back to
    frame 0 three times, flagged.
    """
    if t_frames < 3:
        return [0, 0, 0], True
    return [int((2 * i + 1) * t_frames / 6) for i in range(3)], False


# EmbeddingProviderContract: face image (H, W, C) uint8 -> unit-norm vector.
EmbeddingProvider = Callable[[np.ndarray], np.ndarray]


def segment_embeddings(frames: np.ndarray, provider: EmbeddingProvider
                       ) -> tuple[np.ndarray, bool]:
    """One embedding per video third: (3, d) array plus the fallback flag."""
    indices, fallback = segment_frames(frames.shape[0])
    vecs = np.stack([np.asarray(provider(frames[i]), dtype=np.float64) for i in indices])
    _check_unit(vecs, "segment embedding")
    return vecs, fallback


def _check_unit(vectors: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(vectors, axis=-1)
    bad = np.abs(norms - 1.0) > UNIT_TOL
    if bad.any():
        raise ValueError(f"{what} is not unit-norm (|v|={norms[bad].flat[0]:.6f})")


def synthetic_identity_vectors(n_identities: int, dim: int, seed: int) -> np.ndarray:
    rng = rng_for(seed, "identities")
    vecs = rng.normal(size=(n_identities, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def make_synthetic_provider(identities: np.ndarray, noise_sigma: float, seed: int,
                            id_of_image: Callable[[np.ndarray], int] | None = None
                            ) -> EmbeddingProvider:
    """Image-level provider: ground-truth identity vector plus Gaussian noise,
    renormalized. By default the identity index is read from the image's
    top-left pixel (the synthetic face encoding used in tests)."""
    rng = rng_for(seed, "provider-noise")
    read_id = id_of_image or (lambda img: int(np.asarray(img).reshape(-1)[0]))

    def provider(image: np.ndarray) -> np.ndarray:
        vec = identities[read_id(image)] + rng.normal(0.0, noise_sigma, identities.shape[1])
        return vec / np.linalg.norm(vec)

    return provider


def synthetic_record_embeddings(records: list[VideoRecord], identities: np.ndarray,
                                speaker_index: dict[str, int], noise_sigma: float,
                                seed: int) -> dict[str, np.ndarray]:
    """(3, d) noisy ground-truth embeddings per record, keyed by record id.

    Noise draws are derived per record id, so the result is independent of
    record order and safe to parallelize.
    """
    out: dict[str, np.ndarray] = {}
    dim = identities.shape[1]
    for rec in records:
        rng = rng_for(seed, "record-emb", rec.id)
        base = identities[speaker_index[rec.speaker_id]]
        vecs = base + rng.normal(0.0, noise_sigma, (3, dim))
        out[rec.id] = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    return out


def save_embedding_cache(path: str, embeddings: dict[str, np.ndarray],
                         provider_tag: str) -> None:
    """Per-record little-endian float32 blobs plus a {dim, provider_tag}
    JSON sidecar."""
    import os

    os.makedirs(path, exist_ok=True)
    dim = None
    for rec_id, vecs in embeddings.items():
        arr = np.asarray(vecs, dtype="<f4")
        dim = arr.shape[-1]
        arr.tofile(os.path.join(path, f"{rec_id}.emb"))
    with open(os.path.join(path, "cache.json"), "w") as fh:
        json.dump({"dim": dim, "provider_tag": provider_tag}, fh)


def load_embedding_cache(path: str) -> tuple[dict[str, np.ndarray], dict]:
    import os

    with open(os.path.join(path, "cache.json")) as fh:
        meta = json.load(fh)
    out: dict[str, np.ndarray] = {}
    for name in sorted(os.listdir(path)):
        if not name.endswith(".emb"):
            continue
        raw = np.fromfile(os.path.join(path, name), dtype="<f4")
        out[name[:-4]] = raw.reshape(-1, meta["dim"]).astype(np.float64)
    return out, meta


@dataclass
class IdentityIndex:
    clusters: dict[int, list[str]] = field(default_factory=dict)
    centroids: dict[int, np.ndarray] = field(default_factory=dict)
    video_identity: dict[str, np.ndarray] = field(default_factory=dict)
    _sums: dict[int, np.ndarray] = field(default_factory=dict)

    def assignment(self) -> dict[str, int]:
        return {vid: cid for cid, vids in self.clusters.items() for vid in vids}


def identity_cluster(embeddings: dict[str, np.ndarray], threshold: float = 0.7
                     ) -> IdentityIndex:
    """Greedy agglomerative clustering of per-video identity vectors.

    Each video's identity is the renormalized mean of its 3 segment
    embeddings; a video joins the best existing cluster with centroid cosine
    >= threshold, else opens a new cluster. Centroids update incrementally.
    """
    index = IdentityIndex()
    for vid, segs in embeddings.items():
        segs = np.asarray(segs, dtype=np.float64)
        if segs.shape[0] != 3:
            raise ValueError(f"video {vid}: expected 3 segment embeddings, got {segs.shape[0]}")
        _check_unit(segs, f"embedding for video {vid}")
        ident = segs.mean(axis=0)
        ident = ident / np.linalg.norm(ident)
        index.video_identity[vid] = ident

        best_cid, best_sim = None, threshold
        for cid, centroid in index.centroids.items():
            sim = float(ident @ centroid)
            if sim >= best_sim:
                best_cid, best_sim = cid, sim
        if best_cid is None:
            cid = len(index.clusters)
            index.clusters[cid] = [vid]
            index._sums[cid] = ident.copy()
        else:
            index.clusters[best_cid].append(vid)
            index._sums[best_cid] += ident
        touched = best_cid if best_cid is not None else len(index.clusters) - 1
        index.centroids[touched] = index._sums[touched] / np.linalg.norm(index._sums[touched])
    return index


def cross_corpus_overlap(index_a: IdentityIndex, index_b: IdentityIndex,
                         threshold: float = 0.7) -> list[tuple[int, int, float]]:
    """Centroid pairs with cosine >= threshold; each identity matched at most
    once, best match first. Returns (cluster_a, cluster_b, similarity)."""
    candidates = []
    for ca, va in index_a.centroids.items():
        for cb, vb in index_b.centroids.items():
            sim = float(va @ vb)
            if sim >= threshold:
                candidates.append((sim, ca, cb))
    candidates.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = []
    for sim, ca, cb in candidates:
        if ca in used_a or cb in used_b:
            continue
        used_a.add(ca)
        used_b.add(cb)
        matches.append((ca, cb, sim))
    return matches


# --------------------------------------------------------------------------- #
# pseudo labels                                                               #
# --------------------------------------------------------------------------- #

Transcriber = Callable[[VideoRecord], str]


def make_synthetic_transcriber(truth: dict[str, str], vocab_words: list[str],
                               corruption_rate: float, seed: int) -> Transcriber:
    """Returns the ground-truth sentence with each word independently
    substituted at the given rate by a different random vocab word."""
    if not 0.0 <= corruption_rate <= 1.0:
        raise ValueError("corruption rate must be in [0, 1]")

    def transcriber(record: VideoRecord) -> str:
        sentence = truth[record.id].split()
        rng = rng_for(seed, "transcribe", record.id)
        out = []
        for word in sentence:
            if rng.random() < corruption_rate:
                choices = [w for w in vocab_words if w != word]
                out.append(choices[int(rng.integers(0, len(choices)))])
            else:
                out.append(word)
        return " ".join(out)

    return transcriber


def pseudo_label(record: VideoRecord, transcriber: Transcriber) -> VideoRecord:
    """Attach an automatic transcript; transcriber failures carry the record id."""
    try:
        text = transcriber(record)
    except Exception as exc:
        raise RuntimeError(f"transcriber failed for record {record.id}: {exc}") from exc
    record.transcript = text
    record.pseudo_label = True
    return record


# --------------------------------------------------------------------------- #
# splits and statistics                                                       #
# --------------------------------------------------------------------------- #


@dataclass
class SplitResult:
    rows: list[dict]
    excluded: dict[str, str]  # speaker -> reason


def build_splits(records: list[VideoRecord], budgets: dict[str, float],
                 unit_seconds: float = 60.0, min_total_units: float = 50.0,
                 tolerance: float = 0.05) -> SplitResult:
    """Greedy longest-first packing per speaker into the budgeted splits.

    Budgets are minute units per split. Speakers whose total footage does
    not exceed ``min_total_units`` are excluded, as are speakers whose
    records cannot meet every budget within the +-tolerance band.
    """
    by_speaker: dict[str, list[VideoRecord]] = defaultdict(list)
    for rec in records:
        if rec.speaker_id is None:
            raise ValueError(f"record {rec.id} has no speaker id; run identification first")
        by_speaker[rec.speaker_id].append(rec)

    result = SplitResult(rows=[], excluded={})
    for speaker in sorted(by_speaker):
        recs = sorted(by_speaker[speaker], key=lambda r: (-r.duration_s, r.id))
        total = sum(r.duration_s for r in recs)
        if total <= min_total_units * unit_seconds:
            result.excluded[speaker] = (
                f"total footage {total / unit_seconds:.2f} units <= minimum {min_total_units}"
            )
            continue
        remaining = recs
        packed: dict[str, list[VideoRecord]] = {}
        feasible = True
        for split, units in budgets.items():
            target = units * unit_seconds
            chosen, rest, acc = [], [], 0.0
            for rec in remaining:
                if acc < target and acc + rec.duration_s <= target * (1.0 + tolerance):
                    chosen.append(rec)
                    acc += rec.duration_s
                else:
                    rest.append(rec)
            if not (target * (1.0 - tolerance) <= acc <= target * (1.0 + tolerance)):
                result.excluded[speaker] = (
                    f"budget infeasible for split {split}: packed {acc / unit_seconds:.2f} "
                    f"units of {units}"
                )
                feasible = False
                break
            packed[split] = chosen
            remaining = rest
        if not feasible:
            continue
        for split, chosen in packed.items():
            for rec in chosen:
                result.rows.append({
                    "id": rec.id,
                    "speaker_id": speaker,
                    "path": "",
                    "duration_s": rec.duration_s,
                    "transcript": rec.transcript or "",
                    "split": split,
                    "source": rec.source,
                    "pseudo_label": rec.pseudo_label,
                    "cluster_id": rec.cluster_id,
                })
    return result


def overlap_ratio(split_vocab: set[str], train_vocab: set[str]) -> float:
    """Fraction of the split's distinct words that also occur in the
    speaker's train split; 0 for an empty split vocabulary."""
    if not split_vocab:
        return 0.0
    return len(split_vocab & train_vocab) / len(split_vocab)


def stats_report(manifest_rows: list[dict]) -> dict:
    """Per-speaker, per-split table: #videos, duration minutes, #distinct
    words, and overlap ratio against that speaker's train split."""
    speakers = sorted({r["speaker_id"] for r in manifest_rows})
    splits = sorted({r["split"] for r in manifest_rows})
    table: dict[str, dict[str, dict]] = {}
    for speaker in speakers:
        rows_by_split = {
            s: [r for r in manifest_rows if r["speaker_id"] == speaker and r["split"] == s]
            for s in splits
        }
        train_vocab = {w for r in rows_by_split.get("train", [])
                       for w in r["transcript"].split()}
        table[speaker] = {}
        for split, rows in rows_by_split.items():
            if not rows:
                continue
            vocab = {w for r in rows for w in r["transcript"].split()}
            table[speaker][split] = {
                "n_videos": len(rows),
                "duration_min": sum(r["duration_s"] for r in rows) / 60.0,
                "n_words": len(vocab),
                "overlap_ratio": overlap_ratio(vocab, train_vocab),
            }
    return {
        "overlap_ratio_definition": "|split vocab & train vocab| / |split vocab|",
        "columns": ["n_videos", "duration_min", "n_words", "overlap_ratio"],
        "speakers": table,
    }


def stats_report_tsv(report: dict) -> str:
    lines = ["speaker\tsplit\tn_videos\tduration_min\tn_words\toverlap_ratio"]
    for speaker, splits in report["speakers"].items():
        for split, row in splits.items():
            lines.append(f"{speaker}\t{split}\t{row['n_videos']}\t"
                         f"{row['duration_min']:.2f}\t{row['n_words']}\t"
                         f"{row['overlap_ratio']:.2f}")
    return "\n".join(lines) + "\n"


def write_stats_report(report: dict, json_path: str, tsv_path: str) -> None:
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    with open(tsv_path, "w") as fh:
        fh.write(stats_report_tsv(report))
