"""A small history-conditioned diffusion transformer with 3-axis rotary attention.

History tokens (clean frames and warped pseudo-history) enter through a
history patch embedding and carry no noise; noisy target tokens enter
through the target embedding plus a timestep embedding. All tokens attend
to each other; velocities are read out on target tokens only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..packing import ROLE_CLEAN, ROLE_TARGET, ROLE_WARP, PackedSequence


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    heads: int = 4
    blocks: int = 6
    patch: tuple = (8, 8)
    rope_base: float = 10000.0
    rope_split: tuple = (0.5, 0.25, 0.25)
    target_frames: int = 8
    max_history_frames: int = 8
    sample_steps: int = 6
    image_size: tuple = (64, 64)
    ffn_mult: int = 4
    time_bins: int = 64
    max_tokens: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(x) for x in self.patch))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))
        object.__setattr__(self, "rope_split", tuple(float(x) for x in self.rope_split))
        if self.dim % (2 * self.heads):
            raise ValueError(f"dim {self.dim} must be divisible by 2*heads={2 * self.heads}")
        if abs(sum(self.rope_split) - 1.0) > 1e-9:
            raise ValueError(f"rope_split must sum to 1, got {self.rope_split}")
        if self.image_size[0] % self.patch[0] or self.image_size[1] % self.patch[1]:
            raise ValueError("image size must be divisible by the patch size")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch[0] * self.patch[1] * 3

    @property
    def grid_hw(self) -> tuple:
        return (self.image_size[0] // self.patch[0], self.image_size[1] // self.patch[1])

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_hw[0] * self.grid_hw[1]

    def rope_pairs(self) -> tuple:
        """Channel pairs per head assigned to the (t, r, c) axes."""
        pairs = self.head_dim // 2
        n_t = int(round(pairs * self.rope_split[0]))
        n_r = int(round(pairs * self.rope_split[1]))
        return n_t, n_r, pairs - n_t - n_r

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = set(cls.__dataclass_fields__)
        missing = names - set(d)
        if missing:
            raise ValueError(f"model config is missing fields {sorted(missing)}")
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        return cls(**d)


def rope_frequencies(cfg: ModelConfig) -> tuple:
    """Per-pair (axis, frequency) with theta_k = base^(-2k / d_axis)."""
    axes, freqs = [], []
    for axis, n in enumerate(cfg.rope_pairs()):
        d_axis = 2 * n
        for k in range(n):
            axes.append(axis)
            freqs.append(cfg.rope_base ** (-2.0 * k / d_axis))
    return np.array(axes, dtype=np.int64), np.array(freqs, dtype=np.float64)


def rope_angles(rope_index, cfg: ModelConfig, dtype=torch.float32):
    """cos/sin tables of shape (N, head_dim // 2) for integer (t, r, c) indices."""
    axes, freqs = rope_frequencies(cfg)
    idx = torch.as_tensor(np.asarray(rope_index), dtype=torch.float64)
    pos = idx[:, torch.as_tensor(axes)]
    ang = pos * torch.as_tensor(freqs)
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent channel pairs of ``x`` (..., N, head_dim)."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    return torch.stack([r1, r2], dim=-1).flatten(-2)


def rope_rotate(vector, rope_index, cfg: ModelConfig) -> np.ndarray:
    """Rotate one per-head vector by its (t, r, c) index."""
    v = torch.as_tensor(np.asarray(vector, dtype=np.float64))
    if v.shape[-1] != cfg.head_dim:
        raise ValueError(f"vector has dim {v.shape[-1]}, per-head dim is {cfg.head_dim}")
    cos, sin = rope_angles(np.asarray(rope_index).reshape(1, 3), cfg, torch.float64)
    return apply_rope(v.reshape(1, -1), cos, sin).reshape(v.shape).numpy()


class LoraLinear(nn.Module):
    """Linear projection with an optional low-rank update ``W x + (alpha / r) B (A x)``.

    Adapter matrices are held by reference, not registered, so the model's
    own state dict never contains them.
    """

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self._lora = None
        self.scaling = 0.0

    @property
    def mounted(self) -> bool:
        return self._lora is not None

    @property
    def lora_A(self):
        return None if self._lora is None else self._lora[0]

    @property
    def lora_B(self):
        return None if self._lora is None else self._lora[1]

    def mount(self, A: torch.Tensor, B: torch.Tensor, alpha: float) -> None:
        r = A.shape[0]
        if r < 1 or A.shape != (r, self.base.in_features) or B.shape != (self.base.out_features, r):
            raise ValueError(
                f"adapter shapes A{tuple(A.shape)} B{tuple(B.shape)} do not fit "
                f"{self.base.out_features}x{self.base.in_features} projection")
        self._lora = (A, B)
        self.scaling = alpha / r

    def unmount(self) -> None:
        self._lora = None
        self.scaling = 0.0

    def forward(self, x):
        y = self.base(x)
        if self._lora is not None:
            A, B = self._lora
            y = y + self.scaling * ((x @ A.t()) @ B.t())
        return y


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.q = LoraLinear(cfg.dim, cfg.dim)
        self.k = LoraLinear(cfg.dim, cfg.dim)
        self.v = LoraLinear(cfg.dim, cfg.dim)
        self.o = LoraLinear(cfg.dim, cfg.dim)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ff1 = nn.Linear(cfg.dim, cfg.ffn_mult * cfg.dim)
        self.ff2 = nn.Linear(cfg.ffn_mult * cfg.dim, cfg.dim)

    def forward(self, x, cos, sin):
        B, N, D = x.shape
        h = self.norm1(x)
        hd = D // self.heads

        def split(t):
            return t.view(B, N, self.heads, hd).transpose(1, 2)

        q = apply_rope(split(self.q(h)), cos, sin)
        k = apply_rope(split(self.k(h)), cos, sin)
        v = split(self.v(h))
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.o(a.transpose(1, 2).reshape(B, N, D))
        x = x + self.ff2(F.gelu(self.ff1(self.norm2(x))))
        return x


class ToyModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        P = cfg.patch_dim
        self.hist_embed = nn.Linear(P, cfg.dim)
        self.target_embed = nn.Linear(P, cfg.dim)
        # channel-fusion baseline input; zero so the pretrained model ignores it
        self.fusion_embed = nn.Linear(P, cfg.dim)
        self.time_table = nn.Parameter(torch.zeros(cfg.time_bins, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(cfg.dim)
        self.readout = nn.Linear(cfg.dim, P)
        self.n_evals = 0
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.time_table, std=0.02)
        nn.init.zeros_(self.fusion_embed.weight)
        nn.init.zeros_(self.fusion_embed.bias)

    def lora_layers(self) -> dict:
        out = {}
        for i, b in enumerate(self.blocks):
            for name in ("q", "k", "v", "o"):
                out[f"blocks.{i}.{name}"] = getattr(b, name)
        return out

    def time_embedding(self, tau: torch.Tensor) -> torch.Tensor:
        """Linear interpolation into the learned table; tau in [0, 1]."""
        pos = tau.clamp(0, 1) * (self.cfg.time_bins - 1)
        lo = pos.floor().long().clamp(max=self.cfg.time_bins - 2)
        w = (pos - lo.to(pos.dtype)).unsqueeze(-1)
        return self.time_table[lo] * (1 - w) + self.time_table[lo + 1] * w

    def run(self, x_hist, rope_hist, x_tgt, rope_tgt, tau, x_fuse=None, x_cond=None, rope_cond=None):
        """Batched forward on tensors.

        ``x_hist`` (B, Nh, P) and ``x_cond``/``x_fuse`` are pixel-space [0, 1]
        patches; ``x_tgt`` (B, Nt, P) is the model-space noisy state. Returns
        velocity predictions (B, Nt, P).
        """
        self.n_evals += 1
        n_total = x_hist.shape[1] + x_tgt.shape[1] + (0 if x_cond is None else x_cond.shape[1])
        if n_total > self.cfg.max_tokens:
            raise ValueError(f"sequence of {n_total} tokens exceeds the configured maximum {self.cfg.max_tokens}")
        temb = self.time_embedding(tau).unsqueeze(1)
        parts = []
        ropes = []
        if x_hist.shape[1]:
            parts.append(self.hist_embed(x_hist * 2 - 1))
            ropes.append(np.asarray(rope_hist))
        t = self.target_embed(x_tgt) + temb
        if x_fuse is not None:
            t = t + self.fusion_embed(x_fuse * 2 - 1)
        parts.append(t)
        ropes.append(np.asarray(rope_tgt))
        if x_cond is not None and x_cond.shape[1]:
            parts.append(self.target_embed(x_cond * 2 - 1) + temb)
            ropes.append(np.asarray(rope_cond))
        x = torch.cat(parts, dim=1)
        cos, sin = rope_angles(np.concatenate(ropes), self.cfg, x.dtype)
        for b in self.blocks:
            x = b(x, cos, sin)
        nh = x_hist.shape[1]
        return self.readout(self.norm_out(x[:, nh:nh + x_tgt.shape[1]]))

    def forward(self, packed: PackedSequence, noise_level: float):
        """Velocity for each noisy target token of a packed sequence (numpy in, numpy out)."""
        x_hist, rope_hist, x_tgt, rope_tgt, x_fuse, x_cond, rope_cond = split_packed(packed)
        dt = next(self.parameters()).dtype
        tensors = [None if a is None else torch.as_tensor(a, dtype=dt).unsqueeze(0)
                   for a in (x_hist, x_tgt, x_fuse, x_cond)]
        tau = torch.full((1,), float(noise_level), dtype=dt)
        out = self.run(tensors[0], rope_hist, tensors[1], rope_tgt, tau, tensors[2], tensors[3], rope_cond)
        return out[0]


def split_packed(packed: PackedSequence):
    """Route packed tokens onto the model's history and target paths.

    Warp tokens use the history path except in ``seqconcat`` mode, where they
    follow the targets as target-path condition tokens.
    """
    P = packed.patch_dim
    roles = packed.roles
    if packed.mode == "seqconcat":
        hist = np.flatnonzero(roles == ROLE_CLEAN)
        cond = np.flatnonzero(roles == ROLE_WARP)
    else:
        hist = np.flatnonzero((roles == ROLE_CLEAN) | (roles == ROLE_WARP))
        cond = np.zeros(0, dtype=np.int64)
    tgt = np.flatnonzero(roles == ROLE_TARGET)
    x_fuse = packed.tokens[tgt, P:2 * P] if packed.mode == "chfusion" else None
    x_cond = packed.tokens[cond, :P] if len(cond) else None
    return (packed.tokens[hist, :P], packed.rope_index[hist], packed.tokens[tgt, :P], packed.rope_index[tgt],
            x_fuse, x_cond, packed.rope_index[cond] if len(cond) else None)


def parameter_checksum(module: nn.Module, names=None) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        if names is not None and name not in names:
            continue
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
