import numpy as np
import pytest
import torch

from lipadapt.config import ModelConfig
from lipadapt.model import build_model
from lipadapt.speakersim import CorpusSpec, build_corpus


@pytest.fixture(scope="session")
def tiny_config():
    # 2-block desk model at reduced geometry; conv channels stay 8 so the
    # default rank-8 LoRA remains valid (rank <= min(d_out, d_in))
    return ModelConfig(vocab_size=16, embed_dim=16, decoder_dim=24,
                       encoder_blocks=2, heads=2, ff_dim=32,
                       decoder_blocks=2, decoder_heads=2, decoder_ff_dim=48,
                       max_frames=64, frame_height=12, frame_width=12,
                       conv_channels=(8, 8))


@pytest.fixture()
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two baseline + two adaptation speakers, ~10s budgets, 12x12 frames."""
    out = tmp_path_factory.mktemp("tiny-corpus")
    spec = CorpusSpec(num_speakers=2, baseline_speakers=2,
                      minutes={"train": 2.0, "valid": 1.0, "test": 1.0},
                      baseline_minutes=2.0, unit_seconds=10.0, seed=7,
                      frame_height=12, frame_width=12)
    build_corpus(spec, str(out))
    return str(out)


def random_clip(rng: np.random.Generator, t: int, h: int, w: int, c: int = 1) -> np.ndarray:
    return rng.integers(0, 256, size=(t, h, w, c)).astype(np.uint8)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)
