import hashlib
import os

import numpy as np
import pytest

from lipadapt.clips import read_clip, write_clip, VideoClip
from lipadapt.seeding import rng_for
from lipadapt.speakersim import (CorpusSpec, GlyphSet, WORDS_120, budget_subset,
                                 build_base_lm, build_corpus, build_profile,
                                 corpus_meta, corpus_spec, load_manifest,
                                 next_word_distribution, render_clip, sample_sentence,
                                 split_rows, word_frame_count, SpeakerProfile)


def small_spec(**kw):
    base = dict(num_speakers=2, baseline_speakers=2,
                minutes={"train": 2.0, "valid": 1.0, "test": 1.0},
                baseline_minutes=2.0, unit_seconds=10.0, seed=7,
                frame_height=12, frame_width=12)
    base.update(kw)
    return CorpusSpec(**base)


def flat_profile(spec, **kw):
    v = len(spec.words)
    base = dict(thickness=1, dx=0, dy=0, contrast=1.0, noise_sigma=0.0, speed=1.0,
                word_bias=np.zeros(v), bigram_bias=np.zeros((v, v)))
    base.update(kw)
    return SpeakerProfile("P00", base["thickness"], base["dx"], base["dy"],
                          base["contrast"], base["noise_sigma"], base["speed"],
                          base["word_bias"], base["bigram_bias"])


class TestVocabulary:
    def test_word_list(self):
        assert len(WORDS_120) == 120
        assert len(set(WORDS_120)) == 120


class TestSampling:
    def test_zero_bias_matches_base_lm_exactly(self):
        spec = small_spec()
        lm = build_base_lm(len(spec.words), spec.seed)
        prof = flat_profile(spec)
        for prev in [None, 0, 17]:
            base_logits = lm.start_logits if prev is None else lm.trans_logits[prev]
            expected = np.exp(base_logits - base_logits.max())
            expected /= expected.sum()
            got = next_word_distribution(prof, lm, prev)
            assert np.allclose(got, expected, atol=1e-12)

    def test_positive_bias_raises_empirical_frequency(self):
        spec = small_spec()
        lm = build_base_lm(len(spec.words), spec.seed)
        idx = spec.words.index("seven")
        bias = np.zeros(len(spec.words))
        bias[idx] = 5.0
        biased = flat_profile(spec, word_bias=bias)
        plain = flat_profile(spec)
        rng_b, rng_p = rng_for(1, "b"), rng_for(1, "p")
        count = lambda prof, rng: sum(
            w == "seven"
            for _ in range(2500)
            for w in sample_sentence(prof, lm, (3, 5), rng, spec.words))
        assert count(biased, rng_b) > 2 * count(plain, rng_p) > 0

    def test_two_speakers_have_positive_unigram_kl(self):
        spec = small_spec()
        lm = build_base_lm(len(spec.words), spec.seed)
        p1 = build_profile(spec, 2)  # adaptation speakers carry strong biases
        p2 = build_profile(spec, 3)
        counts = []
        for i, prof in enumerate([p1, p2]):
            rng = rng_for(9, i)
            c = np.zeros(len(spec.words))
            for _ in range(2500):
                for w in sample_sentence(prof, lm, (3, 5), rng, spec.words):
                    c[spec.words.index(w)] += 1
            counts.append((c + 1.0) / (c.sum() + len(c)))
        kl = float(np.sum(counts[0] * np.log(counts[0] / counts[1])))
        assert kl > 0.0

    def test_empty_vocab_rejected(self):
        spec = small_spec()
        lm = build_base_lm(len(spec.words), spec.seed)
        with pytest.raises(ValueError, match="empty"):
            sample_sentence(flat_profile(spec), lm, (3, 5), rng_for(0), [])


class TestRenderClip:
    def test_frame_count_base8(self):
        spec = small_spec(base_frames_per_word=8)
        prof = flat_profile(spec, speed=1.0)
        clip = render_clip(["red", "blue", "go"], prof, spec, clip_seed=42)
        assert clip.num_frames == 24

    def test_speed_clamped_by_profile_invariant(self):
        spec = small_spec(base_frames_per_word=8)
        prof = flat_profile(spec, speed=2.0)  # clamps to 1.5
        assert prof.speed == 1.5
        assert word_frame_count(spec, prof) == 5  # round(8 / 1.5)

    def test_minimum_two_frames_per_word(self):
        spec = small_spec(base_frames_per_word=2)
        prof = flat_profile(spec, speed=1.5)
        assert word_frame_count(spec, prof) == 2

    def test_bitwise_deterministic(self):
        spec = small_spec()
        prof = build_profile(spec, 0)
        c1 = render_clip(["red", "blue"], prof, spec, clip_seed=5)
        c2 = render_clip(["red", "blue"], prof, spec, clip_seed=5)
        assert np.array_equal(c1.frames, c2.frames)

    def test_unknown_word(self):
        spec = small_spec()
        with pytest.raises(KeyError, match="not in corpus vocabulary"):
            render_clip(["nonword"], flat_profile(spec), spec, clip_seed=0)

    def test_group_sharing_makes_confusable_words_close(self):
        spec = small_spec(distinctiveness=0.1)
        glyphs = GlyphSet(spec)
        prof = flat_profile(spec)
        # words 0 and 40 share glyph group (40 groups); words 0 and 1 do not
        w0, w_same, w_diff = spec.words[0], spec.words[40], spec.words[1]
        f0 = render_clip([w0], prof, spec, 1, glyphs).frames.astype(float)
        fs = render_clip([w_same], prof, spec, 1, glyphs).frames.astype(float)
        fd = render_clip([w_diff], prof, spec, 1, glyphs).frames.astype(float)
        assert np.abs(f0 - fs).mean() < np.abs(f0 - fd).mean()


class TestLVB1:
    def test_round_trip(self, tmp_path, rng):
        frames = rng.integers(0, 256, size=(5, 12, 12, 1)).astype(np.uint8)
        clip = VideoClip(frames=frames, frame_rate=12.5)
        path = str(tmp_path / "clip.lvb")
        write_clip(path, clip)
        loaded = read_clip(path, 12.5)
        assert np.array_equal(loaded.frames, frames)
        assert loaded.duration_s == clip.duration_s

    def test_magic_bytes(self, tmp_path, rng):
        frames = rng.integers(0, 256, size=(2, 4, 4, 1)).astype(np.uint8)
        path = str(tmp_path / "clip.lvb")
        write_clip(path, VideoClip(frames=frames, frame_rate=10.0))
        with open(path, "rb") as fh:
            assert fh.read(4) == b"LVB1"
        bad = tmp_path / "bad.lvb"
        bad.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(ValueError, match="not an LVB1"):
            read_clip(str(bad))


class TestBuildCorpus:
    def test_budget_within_five_percent(self, tiny_corpus):
        spec = corpus_spec(tiny_corpus)
        manifest = load_manifest(os.path.join(tiny_corpus, "manifest.jsonl"))
        for speaker in ("S01", "S02"):
            for split, minutes in spec.minutes.items():
                rows = split_rows(manifest, split, speaker)
                total = sum(r["duration_s"] for r in rows)
                target = minutes * spec.unit_seconds
                assert abs(total - target) / target <= 0.05, (speaker, split, total)

    def test_one_minute_budget_at_default_unit(self, tmp_path):
        # 2 speakers x 1 minute train -> 60 s +- 3 s per speaker
        spec = CorpusSpec(num_speakers=2, baseline_speakers=1,
                          minutes={"train": 1.0, "valid": 0.5, "test": 0.5},
                          baseline_minutes=0.5, seed=3,
                          frame_height=12, frame_width=12)
        build_corpus(spec, str(tmp_path / "c"))
        manifest = load_manifest(str(tmp_path / "c" / "manifest.jsonl"))
        for speaker in ("S01", "S02"):
            total = sum(r["duration_s"] for r in split_rows(manifest, "train", speaker))
            assert abs(total - 60.0) <= 3.0

    def test_budget_ladder_subsets_nest(self, tmp_path):
        spec = CorpusSpec(num_speakers=1, baseline_speakers=1,
                          minutes={"train": 15.0, "valid": 1.0, "test": 1.0},
                          baseline_minutes=1.0, unit_seconds=4.0, seed=5,
                          frame_height=12, frame_width=12)
        build_corpus(spec, str(tmp_path / "c"))
        manifest = load_manifest(str(tmp_path / "c" / "manifest.jsonl"))
        rows = split_rows(manifest, "train", "S01")
        subsets = [budget_subset(rows, b, spec.unit_seconds) for b in (1, 5, 15)]
        assert len(subsets[0]) < len(subsets[1]) < len(subsets[2])
        for small, large in zip(subsets, subsets[1:]):
            assert small == large[:len(small)]
        for b, subset in zip((1, 5, 15), subsets):
            total = sum(r["duration_s"] for r in subset)
            assert abs(total - b * spec.unit_seconds) / (b * spec.unit_seconds) <= 0.05

    def test_regeneration_is_byte_identical(self, tiny_corpus, tmp_path):
        spec = corpus_spec(tiny_corpus)
        build_corpus(spec, str(tmp_path / "again"))
        h1 = hashlib.sha256(open(os.path.join(tiny_corpus, "manifest.jsonl"), "rb").read())
        h2 = hashlib.sha256(open(str(tmp_path / "again" / "manifest.jsonl"), "rb").read())
        assert h1.hexdigest() == h2.hexdigest()
        row = load_manifest(os.path.join(tiny_corpus, "manifest.jsonl"))[0]
        c1 = open(os.path.join(tiny_corpus, row["path"]), "rb").read()
        c2 = open(str(tmp_path / "again" / row["path"]), "rb").read()
        assert c1 == c2

    def test_parallel_workers_match_sequential(self, tiny_corpus, tmp_path):
        spec = corpus_spec(tiny_corpus)
        build_corpus(spec, str(tmp_path / "par"), workers=4)
        seq = open(os.path.join(tiny_corpus, "manifest.jsonl"), "rb").read()
        par = open(str(tmp_path / "par" / "manifest.jsonl"), "rb").read()
        assert seq == par

    def test_vocab_coverage_in_baseline_split(self, tmp_path):
        # a baseline split with enough word slots carries every vocab word
        spec = CorpusSpec(num_speakers=1, baseline_speakers=2,
                          minutes={"train": 1.0, "valid": 0.5, "test": 0.5},
                          baseline_minutes=12.0, unit_seconds=10.0, seed=2,
                          frame_height=12, frame_width=12)
        build_corpus(spec, str(tmp_path / "c"))
        manifest = load_manifest(str(tmp_path / "c" / "manifest.jsonl"))
        used = {w for r in split_rows(manifest, "baseline") for w in r["transcript"].split()}
        assert used == set(spec.words)

    def test_speaker_separability(self, tiny_corpus):
        manifest = load_manifest(os.path.join(tiny_corpus, "manifest.jsonl"))
        means = {}
        for speaker in ("S01", "S02"):
            rows = split_rows(manifest, "train", speaker)[:6]
            frames = [read_clip(os.path.join(tiny_corpus, r["path"])).frames
                      for r in rows]
            means[speaker] = [f.astype(float).mean(axis=0) for f in frames]
        def dist(a, b):
            return float(np.linalg.norm(a - b))
        within = np.mean([dist(a, b) for m in means.values()
                          for i, a in enumerate(m) for b in m[i + 1:]])
        across = np.mean([dist(a, b) for a in means["S01"] for b in means["S02"]])
        assert across > within

    def test_transcripts_use_vocab_words(self, tiny_corpus):
        spec = corpus_spec(tiny_corpus)
        manifest = load_manifest(os.path.join(tiny_corpus, "manifest.jsonl"))
        words = set(spec.words)
        assert all(w in words for r in manifest for w in r["transcript"].split())

    def test_corpus_meta_round_trip(self, tiny_corpus):
        meta = corpus_meta(tiny_corpus)
        assert meta["speakers"]["adaptation"] == ["S01", "S02"]
        spec = CorpusSpec.from_dict(meta["spec"])
        assert spec.budget_ladder == (1, 2.0)
