"""VideoClip container and the LVB1 on-disk clip format.

LVB1 layout: magic bytes "LVB1", four unsigned 32-bit little-endian ints
(T, H, W, C), then T*H*W*C unsigned bytes, row-major frame by frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"LVB1"
_HEADER = struct.Struct("<4sIIII")


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) uint8
    frame_rate: float

    def __post_init__(self) -> None:
        if self.frames.ndim != 4:
            raise ValueError(f"clip frames must be (T, H, W, C), got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"clip frames must be uint8, got {self.frames.dtype}")
        if self.frames.shape[0] < 1:
            raise ValueError("clip must contain at least one frame")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.frame_rate


def write_clip(path: str, clip: VideoClip) -> None:
    t, h, w, c = clip.frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, t, h, w, c))
        fh.write(np.ascontiguousarray(clip.frames).tobytes())


def read_clip(path: str, frame_rate: float = 12.5) -> VideoClip:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"truncated LVB1 header in {path}")
        magic, t, h, w, c = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"not an LVB1 file: {path}")
        raw = fh.read(t * h * w * c)
    if len(raw) != t * h * w * c:
        raise ValueError(f"truncated LVB1 payload in {path}")
    frames = np.frombuffer(raw, dtype=np.uint8).reshape(t, h, w, c).copy()
    return VideoClip(frames=frames, frame_rate=frame_rate)
