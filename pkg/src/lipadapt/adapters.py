"""Trainable speaker-adaptation parameters and how they attach to the model.

Three adapter kinds live here: padding prompts (learnable values replacing a
conv layer's zero padding), LoRA pairs for conv kernels and attention
projections, and the input prompt prepended to the decoder sequence. Base
weights are never written; every adapter is built so that a freshly
initialized set leaves model outputs unchanged.

Adapter sites are named with "/" separators ("frontend/conv0",
"backend/block1/wq", "decoder/block0/wv"); the site tables derived from a
ModelConfig are the single source of truth for shapes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig

VALID_TARGETS = ("wc", "wq", "wk", "wv")
ATTN_TARGETS = ("wq", "wk", "wv")

LORA_A_STD = 0.02
CONV_PAD = 1  # all front-end convs are 3x3, stride 1, pad 1


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = VALID_TARGETS

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("LoRA rank must be positive")
        if self.alpha <= 0:
            raise ValueError("LoRA alpha must be positive")
        if not self.targets:
            raise ValueError("LoRA target set is empty")
        bad = [t for t in self.targets if t not in VALID_TARGETS]
        if bad:
            raise ValueError(f"unknown LoRA targets: {bad}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoRAConfig":
        return cls(rank=d["rank"], alpha=d["alpha"], targets=tuple(d["targets"]))


class LoRAPair(nn.Module):
    """Low-rank decomposition bound to one target matrix.

    A is (rank, d_in) Gaussian-initialized, B is (d_out, rank) zeros, so the
    delta (alpha/rank) * B @ A vanishes at initialization.
    """

    def __init__(self, site: str, d_out: int, d_in: int, rank: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        if rank > min(d_in, d_out):
            raise ValueError(
                f"LoRA rank {rank} exceeds min(d_in, d_out)={min(d_in, d_out)} at site {site}"
            )
        self.site = site
        self.d_out = d_out
        self.d_in = d_in
        self.rank = rank
        a = torch.empty(rank, d_in)
        a.normal_(0.0, LORA_A_STD, generator=generator)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    def delta(self, scaling: float) -> torch.Tensor:
        return scaling * (self.B @ self.A)

    def extra_repr(self) -> str:
        return f"site={self.site}, d_out={self.d_out}, d_in={self.d_in}, rank={self.rank}"


def apply_lora(weight: torch.Tensor, pair: LoRAPair, cfg: LoRAConfig) -> torch.Tensor:
    """Effective matrix W + (alpha/rank) * B @ A; the base tensor is not written."""
    if weight.shape != (pair.d_out, pair.d_in):
        raise ValueError(
            f"weight shape {tuple(weight.shape)} does not match LoRA pair "
            f"({pair.d_out}, {pair.d_in}) at site {pair.site}"
        )
    if pair.rank != cfg.rank:
        raise ValueError(f"pair rank {pair.rank} does not match config rank {cfg.rank}")
    return weight + pair.delta(cfg.scaling)


def lora_linear_delta(x: torch.Tensor, pair: LoRAPair, scaling: float) -> torch.Tensor:
    """Side-path contribution scaling * (x @ A^T) @ B^T for a linear layer."""
    return (x @ pair.A.transpose(0, 1)) @ pair.B.transpose(0, 1) * scaling


def conv_as_matrix(kernel: torch.Tensor) -> torch.Tensor:
    """Flatten a (out, in, kh, kw) conv kernel to (out, in*kh*kw)."""
    if kernel.dim() != 4:
        raise ValueError(f"expected a 4-axis conv kernel, got {kernel.dim()} axes")
    return kernel.reshape(kernel.shape[0], -1)


def matrix_as_conv(matrix: torch.Tensor, in_shape: tuple[int, int, int]) -> torch.Tensor:
    """Inverse of conv_as_matrix given the (in, kh, kw) tail shape."""
    return matrix.reshape(matrix.shape[0], *in_shape)


def n_border_cells(h: int, w: int, pad_h: int, pad_w: int) -> int:
    return (h + 2 * pad_h) * (w + 2 * pad_w) - h * w


def border_flat_indices(h: int, w: int, pad_h: int, pad_w: int) -> torch.Tensor:
    """Flat indices of the padded border region in row-major scan order."""
    hp, wp = h + 2 * pad_h, w + 2 * pad_w
    rows = torch.arange(hp).view(-1, 1).expand(hp, wp)
    cols = torch.arange(wp).view(1, -1).expand(hp, wp)
    border = (rows < pad_h) | (rows >= pad_h + h) | (cols < pad_w) | (cols >= pad_w + w)
    return border.reshape(-1).nonzero(as_tuple=False).squeeze(1)


def pad_with_prompt(x: torch.Tensor, pad: tuple[int, int],
                    prompt: torch.Tensor | None) -> torch.Tensor:
    """Pad (N, C, H, W) input; border cells take prompt values instead of zeros.

    ``prompt`` has shape (C, n_border) in border scan order, or None for
    plain zero padding. The interior is never touched.
    """
    ph, pw = pad
    padded = F.pad(x, (pw, pw, ph, ph))
    if prompt is None:
        return padded
    n, c, h, w = x.shape
    nb = n_border_cells(h, w, ph, pw)
    if prompt.shape != (c, nb):
        raise ValueError(
            f"padding prompt shape {tuple(prompt.shape)} does not match "
            f"expected ({c}, {nb}) for input {h}x{w} pad ({ph},{pw})"
        )
    hp, wp = h + 2 * ph, w + 2 * pw
    idx = border_flat_indices(h, w, ph, pw).to(x.device)
    canvas = x.new_zeros(c, hp * wp)
    canvas[:, idx] = prompt.to(x.dtype)
    return padded + canvas.view(1, c, hp, wp)


def frontend_conv_shapes(config: ModelConfig) -> dict[str, tuple[int, int, int, int]]:
    """Conv kernel shapes (out, in, 3, 3) keyed by site name."""
    shapes: dict[str, tuple[int, int, int, int]] = {}
    c_in = config.frame_channels
    for i, c_out in enumerate(config.conv_channels):
        shapes[f"frontend/conv{i}"] = (c_out, c_in, 3, 3)
        c_in = c_out
    return shapes


def padding_prompt_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Expected (channels, border cells) per front-end conv layer."""
    nb = n_border_cells(config.frame_height, config.frame_width, CONV_PAD, CONV_PAD)
    return {
        site: (kshape[1], nb)
        for site, kshape in frontend_conv_shapes(config).items()
    }


def lora_site_shapes(config: ModelConfig) -> dict[str, tuple[str, int, int]]:
    """All LoRA-adaptable matrices: site -> (target kind, d_out, d_in)."""
    sites: dict[str, tuple[str, int, int]] = {}
    for site, (c_out, c_in, kh, kw) in frontend_conv_shapes(config).items():
        sites[site] = ("wc", c_out, c_in * kh * kw)
    for b in range(config.encoder_blocks):
        for t in ATTN_TARGETS:
            sites[f"backend/block{b}/{t}"] = (t, config.embed_dim, config.embed_dim)
    for b in range(config.decoder_blocks):
        for t in ATTN_TARGETS:
            sites[f"decoder/block{b}/{t}"] = (t, config.decoder_dim, config.decoder_dim)
    return sites


class AdapterSet(nn.Module):
    """The complete collection of trainable adaptation parameters.

    Base parameters are frozen elsewhere (see training.freeze_base); this
    module owns only adapter parameters, so ``parameters()`` enumerates
    exactly the trainable set.
    """

    def __init__(self, config: ModelConfig, lora_cfg: LoRAConfig | None = None):
        super().__init__()
        self.model_config = config
        self.lora_cfg = lora_cfg
        self.base_config_hash = config.config_hash()
        self.padding_prompts = nn.ParameterDict()
        self.lora = nn.ModuleDict()
        self.input_prompt: nn.Parameter | None = None

    # -- construction -----------------------------------------------------

    @classmethod
    def init_vision(cls, config: ModelConfig, lora_cfg: LoRAConfig | None,
                    use_padding_prompts: bool = True,
                    generator: torch.Generator | None = None) -> "AdapterSet":
        """Vision-level set: padding prompts on front-end convs plus LoRA on
        the configured encoder targets (wc on convs; wq/wk/wv on back-end)."""
        adapters = cls(config, lora_cfg)
        if use_padding_prompts:
            for site, (c, nb) in padding_prompt_shapes(config).items():
                adapters.padding_prompts[_key(site)] = nn.Parameter(torch.zeros(c, nb))
        if lora_cfg is not None:
            for site, (kind, d_out, d_in) in lora_site_shapes(config).items():
                if site.startswith("decoder/") or kind not in lora_cfg.targets:
                    continue
                adapters.lora[_key(site)] = LoRAPair(site, d_out, d_in, lora_cfg.rank, generator)
        return adapters

    @classmethod
    def init_language_lora(cls, config: ModelConfig, lora_cfg: LoRAConfig,
                           generator: torch.Generator | None = None) -> "AdapterSet":
        """LoRA on the decoder attention projections (the L-LoRA comparator)."""
        adapters = cls(config, lora_cfg)
        for site, (kind, d_out, d_in) in lora_site_shapes(config).items():
            if not site.startswith("decoder/") or kind not in lora_cfg.targets:
                continue
            adapters.lora[_key(site)] = LoRAPair(site, d_out, d_in, lora_cfg.rank, generator)
        return adapters

    @classmethod
    def init_empty(cls, config: ModelConfig) -> "AdapterSet":
        return cls(config, None)

    def add_input_prompt(self, n_p: int) -> "AdapterSet":
        if n_p < 1:
            raise ValueError("input prompt length must be >= 1")
        self.input_prompt = nn.Parameter(torch.zeros(n_p, self.model_config.decoder_dim))
        return self

    # -- lookup used by the model forward ----------------------------------

    def lora_pair(self, site: str) -> LoRAPair | None:
        key = _key(site)
        return self.lora[key] if key in self.lora else None

    def padding_prompt(self, site: str) -> torch.Tensor | None:
        key = _key(site)
        return self.padding_prompts[key] if key in self.padding_prompts else None

    @property
    def prompt_len(self) -> int:
        return 0 if self.input_prompt is None else self.input_prompt.shape[0]

    # -- accounting ---------------------------------------------------------

    def count_trainable(self) -> dict[str, int]:
        """Exact per-component element counts from the defining formulas."""
        pad_count = sum(c * nb for c, nb in
                        ((p.shape[0], p.shape[1]) for p in self.padding_prompts.values()))
        lora_count = sum(p.rank * (p.d_in + p.d_out) for p in self.lora.values())
        prompt_count = (0 if self.input_prompt is None
                        else self.prompt_len * self.model_config.decoder_dim)
        encoder = pad_count + sum(p.rank * (p.d_in + p.d_out) for p in self.lora.values()
                                  if not p.site.startswith("decoder/"))
        decoder = prompt_count + sum(p.rank * (p.d_in + p.d_out) for p in self.lora.values()
                                     if p.site.startswith("decoder/"))
        return {
            "padding_prompts": pad_count,
            "lora": lora_count,
            "input_prompt": prompt_count,
            "encoder": encoder,
            "decoder": decoder,
            "total": pad_count + lora_count + prompt_count,
        }

    # -- serialization ------------------------------------------------------

    def named_blobs(self) -> list[tuple[str, torch.Tensor]]:
        items: list[tuple[str, torch.Tensor]] = []
        for key in sorted(self.padding_prompts.keys()):
            items.append((f"padding_prompt:{_site(key)}", self.padding_prompts[key].data))
        for key in sorted(self.lora.keys()):
            pair = self.lora[key]
            items.append((f"lora_a:{_site(key)}", pair.A.data))
            items.append((f"lora_b:{_site(key)}", pair.B.data))
        if self.input_prompt is not None:
            items.append(("input_prompt", self.input_prompt.data))
        return items


def _key(site: str) -> str:
    return site.replace("/", "|")


def _site(key: str) -> str:
    return key.replace("|", "/")


def count_trainable(adapters: AdapterSet) -> dict[str, int]:
    return adapters.count_trainable()


def save_adapters(adapters: AdapterSet, path: str) -> None:
    """Write the adapter container: JSON header, manifest, one f32 blob."""
    from .checkpoint import write_manifest_and_blob

    os.makedirs(path, exist_ok=True)
    header = {
        "format": "lipadapt-adapters-v1",
        "lora": None if adapters.lora_cfg is None else adapters.lora_cfg.to_dict(),
        "input_prompt_len": adapters.prompt_len,
        "base_config_hash": adapters.base_config_hash,
        "use_padding_prompts": len(adapters.padding_prompts) > 0,
    }
    with open(os.path.join(path, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    write_manifest_and_blob(path, "adapter", adapters.named_blobs())


def load_adapters(path: str, config: ModelConfig) -> AdapterSet:
    """Load and validate an adapter container against a model config.

    Raises ValueError naming the first offending parameter when shapes do
    not fit the supplied config.
    """
    from .checkpoint import read_manifest_and_blob

    with open(os.path.join(path, "header.json")) as fh:
        header = json.load(fh)
    if header.get("base_config_hash") not in (None, config.config_hash()):
        raise ValueError(
            "adapter container was trained against a different base config "
            f"(hash {header['base_config_hash'][:12]}... != {config.config_hash()[:12]}...)"
        )
    lora_cfg = None if header["lora"] is None else LoRAConfig.from_dict(header["lora"])
    tensors = dict(read_manifest_and_blob(path, "adapter"))

    adapters = AdapterSet(config, lora_cfg)
    pad_shapes = padding_prompt_shapes(config)
    site_shapes = lora_site_shapes(config)
    for name, value in tensors.items():
        if name.startswith("padding_prompt:"):
            site = name.split(":", 1)[1]
            expected = pad_shapes.get(site)
            if expected is None or tuple(value.shape) != expected:
                raise ValueError(f"shape mismatch for {name}: got {tuple(value.shape)}, "
                                 f"expected {expected}")
            adapters.padding_prompts[_key(site)] = nn.Parameter(value)
        elif name.startswith("lora_a:"):
            site = name.split(":", 1)[1]
            if site not in site_shapes:
                raise ValueError(f"unknown LoRA site in container: {site}")
            _, d_out, d_in = site_shapes[site]
            rank = value.shape[0]
            if tuple(value.shape) != (rank, d_in):
                raise ValueError(f"shape mismatch for {name}: got {tuple(value.shape)}, "
                                 f"expected ({rank}, {d_in})")
            b = tensors.get(f"lora_b:{site}")
            if b is None or tuple(b.shape) != (d_out, rank):
                raise ValueError(f"shape mismatch for lora_b:{site}: got "
                                 f"{None if b is None else tuple(b.shape)}, expected ({d_out}, {rank})")
            pair = LoRAPair(site, d_out, d_in, rank)
            with torch.no_grad():
                pair.A.copy_(value)
                pair.B.copy_(b)
            adapters.lora[_key(site)] = pair
        elif name == "input_prompt":
            n_p = header.get("input_prompt_len", value.shape[0])
            if value.shape != (n_p, config.decoder_dim):
                raise ValueError(
                    f"shape mismatch for input_prompt: got {tuple(value.shape)}, "
                    f"expected ({n_p}, {config.decoder_dim})"
                )
            adapters.input_prompt = nn.Parameter(value)
    return adapters


def concat_prompt(prompt: torch.Tensor | None, features: torch.Tensor) -> torch.Tensor:
    """Prepend prompt rows to aligned features along the temporal axis."""
    if prompt is None or prompt.shape[0] == 0:
        return features
    if prompt.shape[-1] != features.shape[-1]:
        raise ValueError(
            f"prompt width {prompt.shape[-1]} does not match feature width {features.shape[-1]}"
        )
    if features.dim() == 3:  # batched (B, T, D)
        return torch.cat([prompt.unsqueeze(0).expand(features.shape[0], -1, -1), features], dim=1)
    return torch.cat([prompt, features], dim=0)


def randomize_adapters(adapters: AdapterSet, std: float = LORA_A_STD,
                       generator: torch.Generator | None = None) -> AdapterSet:
    """Fill every adapter parameter with small Gaussian noise (gradient-check
    helper; zero-initialized adapters have degenerate zero gradients)."""
    with torch.no_grad():
        for p in adapters.parameters():
            noise = torch.empty_like(p)
            noise.normal_(0.0, std, generator=generator)
            p.copy_(noise)
    return adapters
