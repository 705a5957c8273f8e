"""Desk-scale lip reading network: conv front-end, self-attention back-end,
projector, and an autoregressive decoder that is frozen during adaptation.

Shape chain per clip: (T, H, W, C) uint8 -> (T, D) spatial -> (T, D)
temporal -> (T, D_L) aligned -> decoder logits over the vocabulary.

All forwards take an optional AdapterSet. Two properties drive the less
obvious design choices here:

* Freshly initialized adapters must be exact no-ops. LoRA B and padding
  prompts are zero-initialized, which is enough for the encoder. For the
  decoder input prompt this forces more: prompt rows enter the decoder as
  *static memory* rather than sequence slots. Every decoder attention
  projects the raw (un-normalized, bias-free) prompt rows to extra
  keys/values whose exp-scores reuse the softmax normalizer of the
  regular keys instead of entering it. An all-zero prompt then
  contributes exactly zero (the values are exactly zero), its influence
  scales smoothly with its magnitude (no LayerNorm rescaling cliff), and
  its values receive gradients from step one. Prompt rows take no
  positional encoding; feature/text positions are indexed as if the
  prompt were absent.
* Batched forwards over padded clips must equal per-clip forwards, so
  masks exclude padded rows everywhere and every attention row keeps at
  least one allowed key (its own slot) to avoid NaN softmax rows.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import AdapterSet, CONV_PAD, lora_linear_delta, matrix_as_conv, pad_with_prompt
from .config import BOS_ID, EOS_ID, PAD_ID, ModelConfig

_EXP_CLAMP = 30.0  # caps unnormalized prompt-attention weights at e^30


def sinusoidal_table(n_positions: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim - dim // 2])
    return table.to(torch.float32)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, s, d = x.shape
    return x.view(b, s, heads, d // heads).transpose(1, 2)


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int,
               norm_mask: torch.Tensor,
               extra_kv: tuple[torch.Tensor, torch.Tensor] | None = None) -> torch.Tensor:
    """Masked softmax attention with an optional unnormalized side block.

    ``norm_mask`` broadcasts as (B, 1, Sq, Sk) and must leave every query at
    least one allowed key. ``extra_kv`` keys are visible to every query but
    contribute weights exp(score - logZ) outside the softmax normalizer, so
    all-zero extra values add exactly nothing (see module docstring).
    """
    b, sq, d = q.shape
    dh = d // heads
    qh = _split_heads(q, heads)
    scores = qh @ _split_heads(k, heads).transpose(-2, -1) / math.sqrt(dh)
    masked = scores.masked_fill(~norm_mask, float("-inf"))
    log_z = masked.logsumexp(dim=-1, keepdim=True)
    out = (masked - log_z).exp() @ _split_heads(v, heads)
    if extra_kv is not None:
        ke, ve = extra_kv
        se = qh @ _split_heads(ke, heads).transpose(-2, -1) / math.sqrt(dh)
        out = out + (se - log_z).clamp(max=_EXP_CLAMP).exp() @ _split_heads(ve, heads)
    return out.transpose(1, 2).reshape(b, sq, d)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, site_prefix: str, bias: bool):
        super().__init__()
        self.heads = heads
        self.site_prefix = site_prefix
        self.wq = nn.Linear(dim, dim, bias=bias)
        self.wk = nn.Linear(dim, dim, bias=bias)
        self.wv = nn.Linear(dim, dim, bias=bias)
        self.wo = nn.Linear(dim, dim, bias=bias)

    def _proj(self, x: torch.Tensor, name: str, layer: nn.Linear,
              adapters: AdapterSet | None, bias: bool = True) -> torch.Tensor:
        y = F.linear(x, layer.weight, layer.bias if bias else None)
        if adapters is not None and adapters.lora_cfg is not None:
            pair = adapters.lora_pair(f"{self.site_prefix}/{name}")
            if pair is not None:
                y = y + lora_linear_delta(x, pair, adapters.lora_cfg.scaling)
        return y

    def forward(self, x: torch.Tensor, norm_mask: torch.Tensor,
                adapters: AdapterSet | None = None,
                prompt: torch.Tensor | None = None) -> torch.Tensor:
        """``prompt`` (N_p, D) rows act as static memory: every layer projects
        the raw prompt to extra keys/values visible to all queries through
        the unnormalized side block. The prompt skips LayerNorm and the
        projection biases, so its influence scales smoothly with its
        magnitude and an all-zero prompt contributes exactly nothing."""
        q = self._proj(x, "wq", self.wq, adapters)
        k = self._proj(x, "wk", self.wk, adapters)
        v = self._proj(x, "wv", self.wv, adapters)
        extra_kv = None
        if prompt is not None and prompt.shape[0] > 0:
            rows = prompt.unsqueeze(0).expand(x.shape[0], -1, -1).to(x.dtype)
            extra_kv = (self._proj(rows, "wk", self.wk, adapters, bias=False),
                        self._proj(rows, "wv", self.wv, adapters, bias=False))
        return self.wo(_attention(q, k, v, self.heads, norm_mask, extra_kv))


class EncoderBlock(nn.Module):
    """Pre-LN self-attention block for the temporal back-end."""

    def __init__(self, dim: int, heads: int, ff_dim: int, site_prefix: str):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, site_prefix, bias=True)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x, norm_mask, adapters=None):
        x = x + self.attn(self.ln1(x), norm_mask, adapters)
        return x + self.ff(self.ln2(x))


class DecoderBlock(nn.Module):
    """Pre-LN block whose attention also reads the static prompt memory."""

    def __init__(self, dim: int, heads: int, ff_dim: int, site_prefix: str):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, site_prefix, bias=True)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(),
                                nn.Linear(ff_dim, dim))

    def forward(self, x, norm_mask, adapters=None, prompt=None):
        x = x + self.attn(self.ln1(x), norm_mask, adapters, prompt)
        return x + self.ff(self.ln2(x))


class FrontEnd(nn.Module):
    """Per-frame spatial encoder: 3x3 convs (stride 1, pad 1) + flatten + affine."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        convs = []
        c_in = config.frame_channels
        for c_out in config.conv_channels:
            convs.append(nn.Conv2d(c_in, c_out, 3, stride=1, padding=0))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.fc = nn.Linear(c_in * config.frame_height * config.frame_width, config.embed_dim)
        self.config = config

    def forward(self, frames: torch.Tensor, adapters: AdapterSet | None = None) -> torch.Tensor:
        """frames: (B, T, C, H, W) float in [0, 1] -> (B, T, D)."""
        b, t, c, h, w = frames.shape
        cfg = self.config
        if (c, h, w) != (cfg.frame_channels, cfg.frame_height, cfg.frame_width):
            raise ValueError(
                f"frontend/conv0 expected frames {cfg.frame_channels}x{cfg.frame_height}"
                f"x{cfg.frame_width} (CxHxW), got {c}x{h}x{w}"
            )
        x = frames.reshape(b * t, c, h, w)
        scaling = adapters.lora_cfg.scaling if adapters is not None and adapters.lora_cfg else 0.0
        for i, conv in enumerate(self.convs):
            site = f"frontend/conv{i}"
            prompt = adapters.padding_prompt(site) if adapters is not None else None
            x = pad_with_prompt(x, (CONV_PAD, CONV_PAD), prompt)
            weight = conv.weight
            pair = adapters.lora_pair(site) if adapters is not None else None
            if pair is not None:
                weight = weight + matrix_as_conv(pair.delta(scaling), weight.shape[1:])
            x = F.relu(F.conv2d(x, weight, conv.bias, padding=0))
        return self.fc(x.reshape(b * t, -1)).view(b, t, -1)


class LipReadingModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frontend = FrontEnd(config)
        self.backend_blocks = nn.ModuleList([
            EncoderBlock(config.embed_dim, config.heads, config.ff_dim, f"backend/block{i}")
            for i in range(config.encoder_blocks)
        ])
        self.backend_ln = nn.LayerNorm(config.embed_dim)
        self.projector = nn.Linear(config.embed_dim, config.decoder_dim)
        self.tok_embed = nn.Embedding(config.vocab_size, config.decoder_dim)
        nn.init.normal_(self.tok_embed.weight, std=0.02)
        self.decoder_blocks = nn.ModuleList([
            DecoderBlock(config.decoder_dim, config.decoder_heads, config.decoder_ff_dim,
                         f"decoder/block{i}")
            for i in range(config.decoder_blocks)
        ])
        self.decoder_ln = nn.LayerNorm(config.decoder_dim)
        self.head = nn.Linear(config.decoder_dim, config.vocab_size)
        n_pos = config.max_frames + config.max_decode_len + 8
        self.register_buffer("pe_enc", sinusoidal_table(n_pos, config.embed_dim),
                             persistent=False)
        self.register_buffer("pe_dec", sinusoidal_table(n_pos, config.decoder_dim),
                             persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.projector.weight.dtype

    # ------------------------------------------------------------------ #
    # encoder side                                                       #
    # ------------------------------------------------------------------ #

    def frames_to_tensor(self, frames: np.ndarray) -> torch.Tensor:
        """(T, H, W, C) uint8 -> (1, T, C, H, W) float in [0, 1]."""
        if frames.ndim != 4:
            raise ValueError(f"expected (T, H, W, C) frames, got shape {frames.shape}")
        t = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
        return (t.to(self.dtype) / 255.0).unsqueeze(0)

    def frontend_forward(self, frames: np.ndarray | torch.Tensor,
                         adapters: AdapterSet | None = None) -> torch.Tensor:
        """Spatial features (T, D) for one clip."""
        x = self.frames_to_tensor(frames) if isinstance(frames, np.ndarray) else frames
        if x.dim() == 4:
            x = x.unsqueeze(0)
        return self.frontend(x, adapters).squeeze(0)

    def backend_forward(self, f_s: torch.Tensor, adapters: AdapterSet | None = None,
                        frame_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Temporally contextualized features, same (.., T, D) shape as input."""
        squeeze = f_s.dim() == 2
        x = f_s.unsqueeze(0) if squeeze else f_s
        b, t, d = x.shape
        if d != self.config.embed_dim:
            raise ValueError(f"backend expected width {self.config.embed_dim}, got {d}")
        if frame_mask is None:
            frame_mask = torch.ones(b, t, dtype=torch.bool, device=x.device)
        x = x + self.pe_enc[:t].to(x.dtype)
        # bidirectional over valid frames; padded queries keep their own slot
        norm_mask = frame_mask.view(b, 1, 1, t) | torch.eye(t, dtype=torch.bool,
                                                            device=x.device).view(1, 1, t, t)
        for block in self.backend_blocks:
            x = block(x, norm_mask, adapters)
        x = self.backend_ln(x)
        return x.squeeze(0) if squeeze else x

    def project(self, f_v: torch.Tensor) -> torch.Tensor:
        if f_v.shape[-1] != self.config.embed_dim:
            raise ValueError(f"projector expected width {self.config.embed_dim}, "
                             f"got {f_v.shape[-1]}")
        return self.projector(f_v)

    def encode_batch(self, frames: torch.Tensor, frame_mask: torch.Tensor,
                     adapters: AdapterSet | None = None) -> torch.Tensor:
        """(B, T, C, H, W) float -> aligned features (B, T, D_L)."""
        f_s = self.frontend(frames, adapters)
        f_v = self.backend_forward(f_s, adapters, frame_mask)
        return self.project(f_v)

    # ------------------------------------------------------------------ #
    # decoder side                                                       #
    # ------------------------------------------------------------------ #

    def _decoder_core(self, rows: torch.Tensor, valid: torch.Tensor,
                      positions: torch.Tensor, prompt: torch.Tensor | None,
                      adapters: AdapterSet | None) -> torch.Tensor:
        """Shared decoder stack over slot layout [features | text].

        ``positions`` are gapless per-sample indices. The optional prompt is
        static memory passed to every block's attention; it occupies no
        sequence slot and carries no positional encoding. Causality is over
        slot order.
        """
        b, s = valid.shape
        device = rows.device
        x = rows + self.pe_dec[positions].to(rows.dtype)
        slot = torch.arange(s, device=device)
        causal = (slot.view(1, s) <= slot.view(s, 1)).view(1, s, s)  # [q, k]: k <= q
        eye = torch.eye(s, dtype=torch.bool, device=device).view(1, s, s)
        norm_mask = ((valid.view(b, 1, s) & causal) | eye).unsqueeze(1)
        for block in self.decoder_blocks:
            x = block(x, norm_mask, adapters, prompt)
        return self.decoder_ln(x)

    def _assemble(self, aligned: torch.Tensor, frame_mask: torch.Tensor,
                  tokens_in: torch.Tensor, adapters: AdapterSet | None
                  ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor | None]:
        """Build padded decoder rows [aligned | embed(tokens_in)] plus the
        static prompt memory (if any)."""
        b, t, _ = aligned.shape
        l = tokens_in.shape[1]
        device = aligned.device
        prompt = adapters.input_prompt if adapters is not None else None
        rows = torch.cat([aligned, self.tok_embed(tokens_in)], dim=1)
        valid = torch.cat([frame_mask, tokens_in != PAD_ID], dim=1)
        t_len = frame_mask.sum(dim=1, keepdim=True)  # true frame count per sample
        feat_pos = torch.arange(t, device=device).view(1, t).expand(b, t)
        text_pos = t_len + torch.arange(l, device=device).view(1, l)
        positions = torch.cat([feat_pos, text_pos], dim=1)
        return rows, valid, positions, prompt

    def decoder_forward(self, prefix: torch.Tensor, targets: list[int] | torch.Tensor,
                        n_prompt: int = 0, adapters: AdapterSet | None = None) -> torch.Tensor:
        """Teacher-forced logits for one sample.

        ``prefix`` is (P, D_L) = optional prompt rows then aligned features;
        ``targets`` is the full token sequence starting with BOS (and
        normally ending with EOS). Returns (len(targets) - 1, vocab) logits
        where row i predicts targets[i + 1]. Prefix positions receive no
        logits and no loss.
        """
        if prefix.dim() != 2 or prefix.shape[1] != self.config.decoder_dim:
            raise ValueError(f"decoder prefix must be (rows, {self.config.decoder_dim}), "
                             f"got {tuple(prefix.shape)}")
        tok = torch.as_tensor(targets, dtype=torch.long, device=prefix.device)
        if tok.numel() < 2 or tok[0] != BOS_ID:
            raise ValueError("targets must begin with BOS and contain at least one more token")
        tokens_in = tok[:-1].unsqueeze(0)
        prompt = prefix[:n_prompt] if n_prompt else None
        features = prefix[n_prompt:]
        t = features.shape[0]
        l = tokens_in.shape[1]
        rows = torch.cat([features.unsqueeze(0), self.tok_embed(tokens_in)], dim=1)
        valid = torch.ones(1, t + l, dtype=torch.bool, device=prefix.device)
        positions = torch.arange(t + l, device=prefix.device).unsqueeze(0)
        hidden = self._decoder_core(rows, valid, positions, prompt, adapters)
        return self.head(hidden[0, t:])

    def decoder_teacher_logits(self, aligned: torch.Tensor, frame_mask: torch.Tensor,
                               tokens: torch.Tensor, adapters: AdapterSet | None = None
                               ) -> torch.Tensor:
        """Decoder-only teacher forcing over precomputed aligned features."""
        tokens_in = tokens[:, :-1]
        rows, valid, positions, prompt = self._assemble(aligned, frame_mask, tokens_in,
                                                        adapters)
        hidden = self._decoder_core(rows, valid, positions, prompt, adapters)
        return self.head(hidden[:, aligned.shape[1]:])

    def teacher_logits(self, frames: torch.Tensor, frame_mask: torch.Tensor,
                       tokens: torch.Tensor, adapters: AdapterSet | None = None
                       ) -> torch.Tensor:
        """Batched teacher forcing. ``tokens`` (B, L+1) are full target rows
        (BOS ... EOS, PAD-padded); returns (B, L, V) predicting tokens[:, 1:]."""
        aligned = self.encode_batch(frames, frame_mask, adapters)
        return self.decoder_teacher_logits(aligned, frame_mask, tokens, adapters)

    @torch.no_grad()
    def greedy_decode(self, prefix: torch.Tensor, n_prompt: int = 0,
                      adapters: AdapterSet | None = None) -> list[int]:
        """Argmax decoding from BOS; stops at EOS or max_decode_len."""
        device = prefix.device
        tokens = [BOS_ID]
        for _ in range(self.config.max_decode_len):
            logits = self.decoder_forward(prefix, [*tokens, EOS_ID], n_prompt, adapters)
            nxt = int(logits[len(tokens) - 1].argmax())
            if nxt == EOS_ID:
                break
            tokens.append(nxt)
        return tokens[1:]

    @torch.no_grad()
    def decode_batch(self, frames: torch.Tensor, frame_mask: torch.Tensor,
                     adapters: AdapterSet | None = None) -> list[list[int]]:
        """Batched greedy decoding; returns per-clip token ids (no BOS/EOS)."""
        b = frames.shape[0]
        aligned = self.encode_batch(frames, frame_mask, adapters)
        tokens_in = torch.full((b, 1), BOS_ID, dtype=torch.long, device=frames.device)
        done = torch.zeros(b, dtype=torch.bool, device=frames.device)
        for _ in range(self.config.max_decode_len):
            rows, valid, positions, prompt = self._assemble(aligned, frame_mask, tokens_in,
                                                            adapters)
            hidden = self._decoder_core(rows, valid, positions, prompt, adapters)
            logits = self.head(hidden[:, -1])
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
            done = done | (nxt == EOS_ID)
            tokens_in = torch.cat([tokens_in, nxt.unsqueeze(1)], dim=1)
            if bool(done.all()):
                break
        out: list[list[int]] = []
        for row in tokens_in[:, 1:].tolist():
            ids = []
            for t in row:
                if t in (EOS_ID, PAD_ID):
                    break
                ids.append(t)
            out.append(ids)
        return out

    def clip_prefix(self, frames: np.ndarray, adapters: AdapterSet | None = None
                    ) -> tuple[torch.Tensor, int]:
        """Full encoder pass for one clip plus prompt concat; returns
        (prefix rows, n_prompt) ready for decoder_forward/greedy_decode."""
        f_s = self.frontend_forward(frames, adapters)
        f_v = self.backend_forward(f_s, adapters)
        aligned = self.project(f_v)
        prompt = adapters.input_prompt if adapters is not None else None
        if prompt is None:
            return aligned, 0
        return torch.cat([prompt.to(aligned.dtype), aligned], dim=0), prompt.shape[0]


def ce_loss(logits: torch.Tensor, targets: torch.Tensor | list[int]) -> torch.Tensor:
    """Mean negative log-likelihood over non-PAD target tokens (one sequence)."""
    tgt = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    if logits.shape[0] != tgt.shape[0]:
        raise ValueError(f"logits length {logits.shape[0]} != targets length {tgt.shape[0]}")
    logp = F.log_softmax(logits, dim=-1)
    mask = tgt != PAD_ID
    nll = -logp.gather(-1, tgt.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return (nll * mask).sum() / mask.sum()


def batch_ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over sequences of the per-sequence non-PAD token mean.

    This clip-weighted (not token-weighted) aggregation is what makes
    gradient accumulation with batch 1 equal larger batches exactly.
    """
    if logits.shape[:2] != targets.shape[:2]:
        raise ValueError("batched logits/targets length mismatch")
    logp = F.log_softmax(logits, dim=-1)
    mask = (targets != PAD_ID).to(logits.dtype)
    nll = -logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    per_seq = (nll * mask).sum(dim=1) / mask.sum(dim=1)
    return per_seq.mean()


def build_model(config: ModelConfig, seed: int = 0) -> LipReadingModel:
    torch.manual_seed(seed)
    model = LipReadingModel(config)
    model.eval()
    return model


def component_parameter_counts(model: LipReadingModel) -> dict[str, int]:
    """Base parameter counts per architectural part (for comparator tables)."""
    def count(module: nn.Module) -> int:
        return sum(p.numel() for p in module.parameters())

    frontend = count(model.frontend)
    backend = count(model.backend_blocks) + count(model.backend_ln)
    decoder = (count(model.decoder_blocks) + count(model.decoder_ln)
               + count(model.tok_embed) + count(model.head))
    return {
        "frontend": frontend,
        "backend": backend,
        "encoder": frontend + backend,
        "projector": count(model.projector),
        "decoder": decoder,
        "total": count(model),
    }


def merge_lora(model: LipReadingModel, adapters: AdapterSet
               ) -> tuple[LipReadingModel, AdapterSet]:
    """Inference-speed parity helper: fold LoRA deltas into a copy of the
    base weights; prompts stay in the returned residual adapter set."""
    import copy

    merged = copy.deepcopy(model)
    cfg = adapters.lora_cfg
    if cfg is not None:
        with torch.no_grad():
            for key in adapters.lora.keys():
                pair = adapters.lora[key]
                site = pair.site
                if site.startswith("frontend/conv"):
                    idx = int(site.removeprefix("frontend/conv"))
                    w = merged.frontend.convs[idx].weight
                    w += matrix_as_conv(pair.delta(cfg.scaling), w.shape[1:])
                else:
                    part, block, name = site.split("/")
                    blocks = merged.backend_blocks if part == "backend" else merged.decoder_blocks
                    layer = getattr(blocks[int(block.removeprefix("block"))].attn, name)
                    layer.weight += pair.delta(cfg.scaling)
    residual = AdapterSet(adapters.model_config, None)
    residual.padding_prompts = adapters.padding_prompts
    residual.input_prompt = adapters.input_prompt
    return merged, residual
