"""Synthetic multi-speaker talking-glyph corpus.

Stands in for a real speaker-adaptation corpus: every speaker has a visual
style (stroke thickness, translation, contrast, sensor noise), a speaking
speed that stretches per-word frame counts, and a lexical bias over a
shared vocabulary. Words are rendered as animated stroke glyphs; words in
the same glyph group share most of their stroke, so they are visually
confusable and language context genuinely matters.

Budgets are expressed in "minute units" of ``unit_seconds`` real seconds
(60 by default) so the same budget ladder runs at desk scale. Train splits
are generated segment-by-segment along the ladder, which makes the budget
subsets exact nested prefixes of the manifest.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .clips import VideoClip, write_clip
from .seeding import derive_seed, rng_for
from .vocab import Vocabulary

WORDS_120 = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "red", "green", "blue", "white", "black", "brown", "grey", "pink", "gold", "silver",
    "place", "move", "take", "bring", "set", "lay", "put", "keep", "hold", "drop",
    "open", "close", "start", "stop", "go", "come", "look", "watch", "speak", "tell",
    "read", "write", "walk", "run", "turn", "give", "show", "play", "work", "help",
    "bin", "boat", "car", "tree", "house", "door", "table", "chair", "glass", "plate",
    "spoon", "paper", "letter", "book", "phone", "light", "water", "bread", "apple", "dog",
    "cat", "bird", "fish", "hand", "face", "mouth", "eye", "voice", "sound", "word",
    "story", "road", "town", "field", "river", "stone", "cloud", "rain", "wind", "snow",
    "sun", "moon", "star", "night", "day", "week", "year", "time", "big", "small",
    "old", "new", "good", "bad", "fast", "slow", "soft", "hard", "cold", "warm",
    "dark", "bright", "quiet", "loud", "again", "soon", "now", "then", "here", "there",
]

DEFAULT_LADDER = (1, 5, 15, 30, 45)


@dataclass
class SpeakerProfile:
    """Synthetic speaker identity; fields clamp to their documented ranges."""

    speaker_id: str
    thickness: int          # stroke thickness in pixels, 1..3
    dx: int                 # translation offset, |dx| <= 3
    dy: int
    contrast: float         # 0.6 .. 1.4
    noise_sigma: float
    speed: float            # 0.6 .. 1.5
    word_bias: np.ndarray   # per-word log-weights over the shared vocabulary
    bigram_bias: np.ndarray  # (V, V) affinity added to transition logits
    favorites: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.thickness = int(min(3, max(1, self.thickness)))
        self.dx = int(min(3, max(-3, self.dx)))
        self.dy = int(min(3, max(-3, self.dy)))
        self.contrast = float(min(1.4, max(0.6, self.contrast)))
        self.noise_sigma = float(max(0.0, self.noise_sigma))
        self.speed = float(min(1.5, max(0.6, self.speed)))


@dataclass
class BaseLM:
    """Shared bigram language model in logit space."""

    start_logits: np.ndarray   # (V,)
    trans_logits: np.ndarray   # (V, V) row = previous word


def build_base_lm(n_words: int, seed: int) -> BaseLM:
    rng = rng_for(seed, "base-lm")
    start = rng.normal(0.0, 1.0, n_words)
    trans = rng.normal(0.0, 1.0, (n_words, n_words))
    return BaseLM(start_logits=start, trans_logits=trans)


@dataclass
class CorpusSpec:
    num_speakers: int = 10            # adaptation speakers (S01..)
    baseline_speakers: int = 12       # baseline-part speakers (B00..)
    minutes: dict = field(default_factory=lambda: {"train": 45.0, "valid": 4.0, "test": 4.0})
    baseline_minutes: float = 30.0
    unit_seconds: float = 60.0
    words: list[str] = field(default_factory=lambda: list(WORDS_120))
    seed: int = 0
    frame_rate: float = 12.5
    frame_height: int = 24
    frame_width: int = 24
    sentence_words: tuple[int, int] = (3, 6)
    base_frames_per_word: int = 6
    glyph_groups: int = 40
    distinctiveness: float = 0.25
    favorite_words: int = 15
    favorite_boost: float = 2.5

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["sentence_words"] = list(self.sentence_words)
        d["minutes"] = dict(self.minutes)
        d["words"] = list(self.words)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        d["sentence_words"] = tuple(d["sentence_words"])
        return cls(**d)

    @property
    def budget_ladder(self) -> tuple[float, ...]:
        train = float(self.minutes["train"])
        ladder = [b for b in DEFAULT_LADDER if b < train]
        return (*ladder, train)


def build_profile(spec: CorpusSpec, index: int) -> SpeakerProfile:
    """Profile for global speaker ``index``; indices below
    ``baseline_speakers`` draw from the narrow baseline pool, later indices
    from the wider adaptation pool with a strong lexical bias."""
    rng = rng_for(spec.seed, "profile", index)
    v = len(spec.words)
    is_baseline = index < spec.baseline_speakers
    if is_baseline:
        speaker_id = f"B{index:02d}"
        thickness = int(rng.integers(1, 3))
        dx, dy = int(rng.integers(-1, 2)), int(rng.integers(-1, 2))
        contrast = float(rng.uniform(0.8, 1.2))
        noise = float(rng.uniform(0.02, 0.06))
        speed = float(rng.uniform(0.7, 1.4))
        word_bias = rng.normal(0.0, 0.3, v)
        bigram = np.zeros((v, v))
        favorites: list[str] = []
    else:
        speaker_id = f"S{index - spec.baseline_speakers + 1:02d}"
        thickness = int(rng.integers(2, 4))
        dx, dy = int(rng.choice([-2, -1, 1, 2])), int(rng.integers(-2, 3))
        contrast = float(rng.choice([rng.uniform(0.7, 0.85), rng.uniform(1.15, 1.3)]))
        noise = float(rng.uniform(0.04, 0.08))
        speed = float(rng.uniform(0.68, 1.30))
        word_bias = rng.normal(0.0, 0.3, v)
        fav_idx = rng.choice(v, size=min(spec.favorite_words, v), replace=False)
        word_bias[fav_idx] += spec.favorite_boost
        bigram = np.zeros((v, v))
        pairs = rng.integers(0, v, size=(20, 2))
        bigram[pairs[:, 0], pairs[:, 1]] += 2.0
        favorites = [spec.words[i] for i in sorted(fav_idx.tolist())]
    return SpeakerProfile(speaker_id, thickness, dx, dy, contrast, noise, speed,
                          word_bias, bigram, favorites)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def next_word_distribution(profile: SpeakerProfile, base_lm: BaseLM,
                           prev: int | None) -> np.ndarray:
    """Sampling distribution softmax(base logit + speaker bias)."""
    if prev is None:
        logits = base_lm.start_logits + profile.word_bias
    else:
        logits = base_lm.trans_logits[prev] + profile.word_bias + profile.bigram_bias[prev]
    return _softmax(logits)


def sample_sentence(profile: SpeakerProfile, base_lm: BaseLM,
                    length_range: tuple[int, int], rng: np.random.Generator,
                    words: list[str]) -> list[str]:
    """Sentence from the base bigram LM reweighted by the speaker's bias."""
    if not words:
        raise ValueError("vocabulary is empty")
    lo, hi = length_range
    n = int(rng.integers(lo, hi + 1))
    return _sample_n_words(profile, base_lm, n, rng, words)


def _sample_n_words(profile: SpeakerProfile, base_lm: BaseLM, n: int,
                    rng: np.random.Generator, words: list[str]) -> list[str]:
    out: list[int] = []
    prev: int | None = None
    for _ in range(n):
        p = next_word_distribution(profile, base_lm, prev)
        prev = int(rng.choice(len(words), p=p))
        out.append(prev)
    return [words[i] for i in out]


class GlyphSet:
    """Deterministic stroke-walk glyphs; words in a group share the leading
    walk and differ only in a short tail scaled by ``distinctiveness``."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        self.word_index = {w: i for i, w in enumerate(spec.words)}
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def group_of(self, word_idx: int) -> int:
        return word_idx % self.spec.glyph_groups

    def _walk(self, rng: np.random.Generator, start: np.ndarray, steps: int) -> np.ndarray:
        h, w = self.spec.frame_height, self.spec.frame_width
        dirs = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1),
                         (0, 1), (1, -1), (1, 0), (1, 1)])
        pos = start.copy()
        heading = int(rng.integers(0, 8))
        coords = [pos.copy()]
        for _ in range(steps):
            if rng.random() < 0.35:
                heading = (heading + int(rng.choice([-1, 1]))) % 8
            pos = pos + dirs[heading]
            pos[0] = min(h - 3, max(2, pos[0]))
            pos[1] = min(w - 3, max(2, pos[1]))
            coords.append(pos.copy())
        arr = np.array(coords)
        return arr

    def walk(self, word: str) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) stroke pixel coordinates in reveal order."""
        idx = self.word_index.get(word)
        if idx is None:
            raise KeyError(f"word not in corpus vocabulary: {word!r}")
        cached = self._cache.get(idx)
        if cached is not None:
            return cached
        spec = self.spec
        group = self.group_of(idx)
        g_rng = rng_for(spec.seed, "glyph-group", group)
        h, w = spec.frame_height, spec.frame_width
        start = np.array([g_rng.integers(h // 4, 3 * h // 4),
                          g_rng.integers(w // 4, 3 * w // 4)])
        shared = self._walk(g_rng, start, 40)
        tail_steps = max(1, int(round(40 * spec.distinctiveness)))
        w_rng = rng_for(spec.seed, "glyph-word", idx)
        tail = self._walk(w_rng, shared[-1], tail_steps)
        full = np.concatenate([shared, tail[1:]])
        out = (full[:, 0].astype(np.intp), full[:, 1].astype(np.intp))
        self._cache[idx] = out
        return out


def word_frame_count(spec: CorpusSpec, profile: SpeakerProfile) -> int:
    """Frames per rendered word: round(base / speed), at least 2."""
    return max(2, int(round(spec.base_frames_per_word / profile.speed)))


def render_clip(sentence: list[str], profile: SpeakerProfile, spec: CorpusSpec,
                clip_seed: int, glyphs: GlyphSet | None = None) -> VideoClip:
    """Deterministic glyph animation for a sentence under a speaker style."""
    glyphs = glyphs or GlyphSet(spec)
    h, w = spec.frame_height, spec.frame_width
    n_f = word_frame_count(spec, profile)
    rng = np.random.default_rng(clip_seed)
    amplitude = 0.45 * profile.contrast
    frames = np.empty((len(sentence) * n_f, h, w, 1), dtype=np.uint8)
    t = 0
    for word in sentence:
        rows, cols = glyphs.walk(word)
        k = rows.shape[0]
        for f in range(n_f):
            envelope = np.sin(np.pi * (f + 0.5) / n_f)
            reveal = max(1, int(np.ceil(envelope * k)))
            img = np.zeros((h, w))
            img[rows[:reveal], cols[:reveal]] = 1.0
            if profile.thickness > 1:
                img = maximum_filter(img, size=profile.thickness)
            img = np.roll(img, (profile.dy, profile.dx), axis=(0, 1))
            img = 0.2 + amplitude * img
            img = img + rng.normal(0.0, profile.noise_sigma, size=(h, w))
            frames[t, :, :, 0] = np.clip(img * 255.0, 0, 255).round().astype(np.uint8)
            t += 1
    return VideoClip(frames=frames, frame_rate=spec.frame_rate)


# --------------------------------------------------------------------------- #
# corpus assembly                                                             #
# --------------------------------------------------------------------------- #


def _pack_segment(profile: SpeakerProfile, base_lm: BaseLM, spec: CorpusSpec,
                  target_s: float, rng: np.random.Generator,
                  forbidden: set[tuple[str, ...]] | None = None) -> list[list[str]]:
    """Sentences whose rendered duration sums to target_s within half a word.

    ``forbidden`` sentences (from the speaker's other splits) are resampled
    so splits stay disjoint per speaker.
    """
    n_f = word_frame_count(spec, profile)
    target_frames = target_s * spec.frame_rate
    lo, hi = spec.sentence_words
    forbidden = forbidden if forbidden is not None else set()
    sentences: list[list[str]] = []
    acc = 0

    def draw(n: int) -> list[str]:
        for _ in range(50):
            cand = _sample_n_words(profile, base_lm, n, rng, spec.words)
            if tuple(cand) not in forbidden:
                return cand
        return cand  # vanishingly unlikely; budget exactness wins

    while True:
        remaining_words = (target_frames - acc) / n_f
        if remaining_words < 0.5:
            break
        if remaining_words <= hi:
            sentences.append(draw(max(1, int(round(remaining_words)))))
            break
        sentences.append(draw(int(rng.integers(lo, hi + 1))))
        acc += len(sentences[-1]) * n_f
    return sentences


def _patch_vocab_coverage(baseline_sentences: list[list[str]], words: list[str]) -> None:
    """Substitute words in place so every vocab word appears at least once.

    Word counts are unchanged, so rendered durations stay exact.
    """
    from collections import Counter

    counts = Counter(w for s in baseline_sentences for w in s)
    missing = sorted(set(words) - set(counts))
    if not missing or not baseline_sentences:
        return
    # deterministic walk over (sentence, position) slots, only displacing
    # words that occur elsewhere too; if the split is too small to hold the
    # whole vocabulary the leftover words stay missing
    slots = ((i, j) for j in range(max(len(s) for s in baseline_sentences))
             for i, s in enumerate(baseline_sentences) if j < len(s))
    for word in missing:
        for i, j in slots:
            old = baseline_sentences[i][j]
            if counts[old] > 1:
                counts[old] -= 1
                counts[word] += 1
                baseline_sentences[i][j] = word
                break
        else:
            break


def build_corpus(spec: CorpusSpec, out_dir: str, workers: int = 1) -> str:
    """Generate clips + manifest; returns the manifest path.

    Layout: out_dir/corpus.json, out_dir/manifest.jsonl,
    out_dir/clips/<speaker>/<clip id>.lvb
    """
    os.makedirs(out_dir, exist_ok=True)
    vocab = Vocabulary(spec.words)
    base_lm = build_base_lm(len(spec.words), spec.seed)
    glyphs = GlyphSet(spec)

    total = spec.baseline_speakers + spec.num_speakers
    profiles = [build_profile(spec, i) for i in range(total)]

    # plan all sentences first so baseline vocabulary coverage can be patched
    plan: list[tuple[SpeakerProfile, str, list[list[str]]]] = []
    baseline_sentences: list[list[str]] = []
    for profile in profiles:
        is_baseline = profile.speaker_id.startswith("B")
        if is_baseline:
            rng = rng_for(spec.seed, "sentences", profile.speaker_id, "baseline")
            sents = _pack_segment(profile, base_lm, spec,
                                  spec.baseline_minutes * spec.unit_seconds, rng)
            plan.append((profile, "baseline", sents))
            baseline_sentences.extend(sents)
        else:
            rng = rng_for(spec.seed, "sentences", profile.speaker_id, "train")
            segments: list[list[str]] = []
            prev = 0.0
            for bound in spec.budget_ladder:
                seg = _pack_segment(profile, base_lm, spec,
                                    (bound - prev) * spec.unit_seconds, rng)
                segments.extend(seg)
                prev = bound
            plan.append((profile, "train", segments))
            used = {tuple(s) for s in segments}
            for split in ("valid", "test"):
                rng = rng_for(spec.seed, "sentences", profile.speaker_id, split)
                sents = _pack_segment(profile, base_lm, spec,
                                      spec.minutes[split] * spec.unit_seconds, rng,
                                      forbidden=used)
                used.update(tuple(s) for s in sents)
                plan.append((profile, split, sents))
    _patch_vocab_coverage(baseline_sentences, spec.words)

    jobs = []
    for profile, split, sentences in plan:
        for idx, sentence in enumerate(sentences):
            clip_id = f"{profile.speaker_id}-{split}-{idx:04d}"
            rel = os.path.join("clips", profile.speaker_id, f"{clip_id}.lvb")
            seed = derive_seed(spec.seed, "clip", profile.speaker_id, split, idx)
            jobs.append((profile, split, sentence, clip_id, rel, seed))

    def render_job(job):
        profile, split, sentence, clip_id, rel, seed = job
        clip = render_clip(sentence, profile, spec, seed, glyphs)
        path = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        write_clip(path, clip)
        return {
            "id": clip_id,
            "speaker_id": profile.speaker_id,
            "path": rel,
            "duration_s": clip.duration_s,
            "transcript": " ".join(sentence),
            "split": split,
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(render_job, jobs))
    else:
        rows = [render_job(j) for j in jobs]

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "corpus.json"), "w") as fh:
        json.dump({
            "spec": spec.to_dict(),
            "vocab": vocab.to_dict(),
            "budget_ladder": list(spec.budget_ladder),
            "speakers": {
                "baseline": [p.speaker_id for p in profiles if p.speaker_id.startswith("B")],
                "adaptation": [p.speaker_id for p in profiles if p.speaker_id.startswith("S")],
            },
        }, fh, indent=1, sort_keys=True)
    return manifest_path


# --------------------------------------------------------------------------- #
# corpus access                                                               #
# --------------------------------------------------------------------------- #


def load_manifest(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def corpus_meta(corpus_dir: str) -> dict:
    with open(os.path.join(corpus_dir, "corpus.json")) as fh:
        return json.load(fh)


def corpus_spec(corpus_dir: str) -> CorpusSpec:
    return CorpusSpec.from_dict(corpus_meta(corpus_dir)["spec"])


def corpus_vocab(corpus_dir: str) -> Vocabulary:
    return Vocabulary.from_dict(corpus_meta(corpus_dir)["vocab"])


def split_rows(manifest: list[dict], split: str, speaker_id: str | None = None) -> list[dict]:
    return [r for r in manifest if r["split"] == split
            and (speaker_id is None or r["speaker_id"] == speaker_id)]


def budget_subset(train_rows: list[dict], minutes: float, unit_seconds: float) -> list[dict]:
    """Prefix of a speaker's train rows closest to the requested budget.

    Train splits are generated as ladder segments, so standard budgets come
    back exact and budgets nest: subset(1) is a prefix of subset(5), etc.
    """
    target = minutes * unit_seconds
    best_k, best_err = 0, abs(target)
    acc = 0.0
    for k, row in enumerate(train_rows, start=1):
        acc += row["duration_s"]
        err = abs(acc - target)
        if err < best_err:
            best_k, best_err = k, err
    return train_rows[:best_k]
