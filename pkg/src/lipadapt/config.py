"""Model configuration and reserved vocabulary indices."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

BOS_ID = 0
EOS_ID = 1
PAD_ID = 2
NUM_RESERVED = 3


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the lip reading network.

    ``embed_dim`` is the visual encoder width, ``decoder_dim`` the decoder
    embedding width the projector maps into. Frame geometry is the expected
    clip layout after preprocessing (height, width, channels).
    """

    vocab_size: int
    embed_dim: int = 64
    decoder_dim: int = 128
    encoder_blocks: int = 2
    heads: int = 4
    ff_dim: int = 128
    decoder_blocks: int = 2
    decoder_heads: int = 4
    decoder_ff_dim: int = 256
    max_frames: int = 256
    frame_height: int = 24
    frame_width: int = 24
    frame_channels: int = 1
    conv_channels: tuple[int, ...] = (8, 8)
    max_decode_len: int = 64

    def __post_init__(self) -> None:
        if self.vocab_size <= NUM_RESERVED:
            raise ValueError("vocab_size must exceed the reserved token count")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ValueError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}"
            )
        if not self.conv_channels:
            raise ValueError("at least one conv layer is required")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", (8, 8)))
        return cls(**d)

    def config_hash(self) -> str:
        """Stable hash of the canonical JSON form, used to bind adapters to a base model."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
