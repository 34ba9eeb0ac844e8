"""Token grids, visible-token selection, rotary index assignment and stream packing.

A packed sequence is always laid out as::

    [clean history | warp history | noisy targets]

except for ``seqconcat``, where the warp tokens follow the targets on the
denoising path, and ``chfusion``, where warp patches are concatenated onto
the target tokens feature-wise and the sequence carries no warp tokens.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ROLE_CLEAN, ROLE_WARP, ROLE_TARGET = 0, 1, 2
ROLE_NAMES = ("clean_history", "warp_history", "noisy_target")
MODES = ("full", "noalign", "novisdrop", "seqconcat", "chfusion", "text_only")
DEFAULT_TAU = 0.5


class PackingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TokenGrid:
    tokens: np.ndarray  # (N, ph*pw*3)
    coords: np.ndarray  # (N, 3) int64: frame order, patch row, patch col
    support: np.ndarray  # (N,) fraction of valid pixels
    grid_hw: tuple  # patches per frame (rows, cols)
    patch: tuple  # (ph, pw)

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def take(self, index: np.ndarray) -> "TokenGrid":
        return TokenGrid(self.tokens[index], self.coords[index], self.support[index], self.grid_hw, self.patch)


def patchify(frames: np.ndarray, patch_h: int, patch_w: int, frame_orders=None, dtype=np.float32) -> TokenGrid:
    """Split (F, H, W, C) frames into raster-ordered patch tokens."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    F, H, W, C = frames.shape
    if H % patch_h or W % patch_w:
        raise PackingError(f"frame size {H}x{W} not divisible by patch {patch_h}x{patch_w}")
    nh, nw = H // patch_h, W // patch_w
    x = frames.reshape(F, nh, patch_h, nw, patch_w, C).transpose(0, 1, 3, 2, 4, 5)
    tokens = x.reshape(F * nh * nw, patch_h * patch_w * C).astype(dtype)
    orders = np.arange(F) if frame_orders is None else np.asarray(frame_orders, dtype=np.int64)
    if len(orders) != F:
        raise PackingError("frame_orders length differs from frame count")
    f, r, c = np.meshgrid(orders, np.arange(nh), np.arange(nw), indexing="ij")
    coords = np.stack([f.ravel(), r.ravel(), c.ravel()], axis=1).astype(np.int64)
    return TokenGrid(tokens, coords, np.ones(len(tokens)), (nh, nw), (patch_h, patch_w))


def unpatchify(tokens: np.ndarray, frames: int, grid_hw, patch, channels: int = 3) -> np.ndarray:
    nh, nw = grid_hw
    ph, pw = patch
    x = np.asarray(tokens).reshape(frames, nh, nw, ph, pw, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(frames, nh * ph, nw * pw, channels)


def mask_to_support(mask: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """Per-token mean validity over each patch footprint, raster order."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None]
    F, H, W = mask.shape
    if H % patch_h or W % patch_w:
        raise PackingError(f"mask size {H}x{W} not divisible by patch {patch_h}x{patch_w}")
    x = mask.reshape(F, H // patch_h, patch_h, W // patch_w, patch_w)
    return x.mean(axis=(2, 4)).reshape(-1)


def warp_grid(rgb: np.ndarray, valid: np.ndarray, patch_h: int, patch_w: int) -> TokenGrid:
    """History construction for a warp video: patchify, then attach mask support."""
    g = patchify(rgb, patch_h, patch_w)
    sup = mask_to_support(valid, patch_h, patch_w)
    if sup.shape[0] != len(g):
        raise PackingError("mask shape does not match frames")
    return replace(g, support=sup)


def select_visible_tokens(grid: TokenGrid, tau: float = DEFAULT_TAU):
    """Keep exactly the tokens with support >= tau; returns (grid, kept indices)."""
    if not 0.0 <= tau <= 1.0:
        raise PackingError(f"threshold {tau} outside [0, 1]")
    kept = np.flatnonzero(grid.support >= tau)
    return grid.take(kept), kept


def assign_rope_indices(grid: TokenGrid, mode: str, history_offset: int = 0, target_start: int | None = None):
    """Rotary (t, r, c) indices for history tokens.

    ``ordinary_history`` places frame order f at ``history_offset + f``;
    ``target_aligned`` gives it the index of the noisy target frame with the
    same order, ``target_start + f``. Spatial indices are never changed.
    """
    idx = grid.coords.copy()
    if mode == "ordinary_history":
        if history_offset < 0:
            raise PackingError("history_offset must be non-negative")
        idx[:, 0] = history_offset + grid.coords[:, 0]
    elif mode == "target_aligned":
        if target_start is None:
            raise PackingError("target_aligned indices need the target start index")
        idx[:, 0] = target_start + grid.coords[:, 0]
    else:
        raise PackingError(f"unknown index mode {mode!r}")
    return idx


@dataclass(frozen=True, eq=False)
class PackedSequence:
    tokens: np.ndarray  # (N, Dmax) float32, zero padded beyond widths
    widths: np.ndarray  # (N,) token dimension
    roles: np.ndarray  # (N,) int8
    rope_index: np.ndarray  # (N, 3) int64
    kept_mask: np.ndarray  # over the warp grid before selection (empty without warp)
    mode: str
    grid_hw: tuple
    patch: tuple
    n_target_frames: int
    tau: float | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.tokens.shape[0]

    def role_slice(self, role: int) -> np.ndarray:
        return np.flatnonzero(self.roles == role)

    @property
    def target_positions(self) -> np.ndarray:
        return self.role_slice(ROLE_TARGET)

    @property
    def patch_dim(self) -> int:
        return self.patch[0] * self.patch[1] * 3

    def token(self, i: int) -> np.ndarray:
        return self.tokens[i, : self.widths[i]]

    def target_tokens(self) -> np.ndarray:
        """Noisy target contents (without any fused warp channels)."""
        return self.tokens[self.target_positions, : self.patch_dim]

    def with_targets(self, targets: np.ndarray) -> "PackedSequence":
        """Copy with the target token contents replaced (fused warp channels kept)."""
        pos = self.target_positions
        targets = np.asarray(targets, dtype=np.float32)
        if targets.shape != (len(pos), self.patch_dim):
            raise PackingError(f"targets must have shape {(len(pos), self.patch_dim)}, got {targets.shape}")
        tok = self.tokens.copy()
        tok[pos, : self.patch_dim] = targets
        return replace(self, tokens=tok)

    def to_manifest(self) -> dict:
        return {
            "format": "warphist-packed/1",
            "mode": self.mode,
            "tau": self.tau,
            "patch": list(self.patch),
            "grid_hw": list(self.grid_hw),
            "n_target_frames": self.n_target_frames,
            "kept_mask": "".join("1" if k else "0" for k in self.kept_mask),
            "tokens": [
                {"role": ROLE_NAMES[int(r)], "t_idx": int(t), "r": int(y), "c": int(x), "width": int(w)}
                for r, (t, y, x), w in zip(self.roles, self.rope_index, self.widths)
            ],
        }


def pack_condition_stream(clean_history: TokenGrid | None, warp: TokenGrid | None, targets: TokenGrid,
                          mode: str, tau: float = DEFAULT_TAU) -> PackedSequence:
    """Assemble the conditioning stream for one chunk.

    Clean-history frame orders are used as their temporal indices; target
    frame j sits at ``n_history_frames + j`` where the history span is the
    largest clean-history frame order plus one.
    """
    if mode not in MODES:
        raise PackingError(f"unknown packing mode {mode!r}; expected one of {MODES}")
    if mode == "text_only" and warp is not None:
        raise PackingError("text_only mode takes no warp history")
    if mode != "text_only" and warp is None:
        raise PackingError(f"mode {mode!r} needs a warp history")
    K = int(targets.coords[:, 0].max()) + 1 if len(targets) else 0
    grid_hw, patch = targets.grid_hw, targets.patch
    D = targets.dim
    for g in (clean_history, warp):
        if g is not None and (g.grid_hw != grid_hw or g.patch != patch or g.dim != D):
            raise PackingError("history and target grids have inconsistent shapes")
    if warp is not None and int(warp.coords[:, 0].max()) + 1 != K:
        raise PackingError(f"warp has {int(warp.coords[:, 0].max()) + 1} frames but there are {K} targets")

    h_span = 0 if clean_history is None or len(clean_history) == 0 else int(clean_history.coords[:, 0].max()) + 1
    blocks = []  # (tokens, roles, rope)
    if clean_history is not None and len(clean_history):
        blocks.append((clean_history.tokens, ROLE_CLEAN, assign_rope_indices(clean_history, "ordinary_history", 0)))

    kept_mask = np.zeros(0, dtype=bool)
    target_start = h_span
    warp_block = None
    fused = None
    if mode in ("full", "noalign", "seqconcat"):
        sel, kept = select_visible_tokens(warp, tau)
        kept_mask = np.zeros(len(warp), dtype=bool)
        kept_mask[kept] = True
    elif mode in ("novisdrop", "chfusion"):
        sel = warp
        kept_mask = np.ones(len(warp), dtype=bool)

    if mode in ("full", "novisdrop"):
        warp_block = (sel.tokens, ROLE_WARP, assign_rope_indices(sel, "target_aligned", target_start=target_start))
    elif mode == "noalign":
        warp_block = (sel.tokens, ROLE_WARP, assign_rope_indices(sel, "ordinary_history", history_offset=h_span))
        target_start = h_span + K
    elif mode == "chfusion":
        if not np.array_equal(warp.coords, targets.coords):
            raise PackingError("chfusion needs a warp grid matching the targets token by token")
        fused = warp.tokens

    if warp_block is not None and mode != "seqconcat":
        blocks.append(warp_block)
    t_rope = targets.coords.copy()
    t_rope[:, 0] = target_start + targets.coords[:, 0]
    t_tokens = targets.tokens if fused is None else np.concatenate([targets.tokens, fused], axis=1)
    blocks.append((t_tokens, ROLE_TARGET, t_rope))
    if mode == "seqconcat":
        # reserved band above the targets: collides with neither history nor targets
        blocks.append((sel.tokens, ROLE_WARP, assign_rope_indices(sel, "ordinary_history", history_offset=target_start + K)))

    n = sum(len(b[0]) for b in blocks)
    dmax = max(b[0].shape[1] for b in blocks)
    tokens = np.zeros((n, dmax), dtype=np.float32)
    widths = np.empty(n, dtype=np.int64)
    roles = np.empty(n, dtype=np.int8)
    rope = np.empty((n, 3), dtype=np.int64)
    i = 0
    for tok, role, idx in blocks:
        m = len(tok)
        tokens[i:i + m, : tok.shape[1]] = tok
        widths[i:i + m] = tok.shape[1]
        roles[i:i + m] = role
        rope[i:i + m] = idx
        i += m
    return PackedSequence(tokens, widths, roles, rope, kept_mask, mode, grid_hw, patch, K,
                          tau if mode in ("full", "noalign", "seqconcat") else None)


@dataclass(frozen=True)
class HistoryCorruption:
    policy: str = "none"  # none | drop_frames | mask_patches
    rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.policy not in ("none", "drop_frames", "mask_patches"):
            raise ValueError(f"unknown corruption policy {self.policy!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"corruption rate {self.rate} outside [0, 1]")


def corrupt_history(frames: np.ndarray, c: HistoryCorruption, patch=(8, 8)):
    """Apply history corruption; returns ``(frames, kept frame indices)``.

    ``drop_frames`` removes ceil(rate * T) frames; ``mask_patches`` zeroes
    round(rate * n_patches) patches. Kept indices let callers preserve the
    surviving frames' temporal positions.
    """
    frames = np.asarray(frames)
    T = frames.shape[0]
    kept = np.arange(T)
    if c.policy == "none" or c.rate == 0.0 or T == 0:
        return frames.copy(), kept
    rng = np.random.default_rng(c.seed)
    if c.policy == "drop_frames":
        n_drop = min(T, math.ceil(c.rate * T))
        drop = rng.choice(T, size=n_drop, replace=False)
        kept = np.setdiff1d(kept, drop)
        return frames[kept].copy(), kept
    ph, pw = patch
    H, W = frames.shape[1:3]
    nh, nw = H // ph, W // pw
    n_total = T * nh * nw
    n_mask = int(round(c.rate * n_total))
    out = frames.copy()
    for flat in rng.choice(n_total, size=n_mask, replace=False):
        f, rem = divmod(int(flat), nh * nw)
        r, col = divmod(rem, nw)
        out[f, r * ph:(r + 1) * ph, col * pw:(col + 1) * pw] = 0
    return out, kept


def sequence_length_report(packed: PackedSequence) -> dict:
    counts = {name: int((packed.roles == i).sum()) for i, name in enumerate(ROLE_NAMES)}
    counts["total"] = len(packed)
    counts["warp_kept"] = int(packed.kept_mask.sum())
    counts["warp_candidates"] = int(len(packed.kept_mask))
    return counts


def save_packed(packed: PackedSequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "packed.json").write_text(json.dumps(packed.to_manifest(), indent=1) + "\n", encoding="utf-8")
    with open(d / "tokens.f32", "wb") as f:
        for i in range(len(packed)):
            f.write(np.asarray(packed.token(i), dtype="<f4").tobytes())
    return d


def load_packed(directory) -> PackedSequence:
    d = Path(directory)
    man = json.loads((d / "packed.json").read_text(encoding="utf-8"))
    recs = man["tokens"]
    widths = np.array([r["width"] for r in recs], dtype=np.int64)
    raw = np.frombuffer((d / "tokens.f32").read_bytes(), dtype="<f4")
    if raw.size != widths.sum():
        raise PackingError(f"payload holds {raw.size} floats, manifest expects {int(widths.sum())}")
    tokens = np.zeros((len(recs), int(widths.max()) if len(recs) else 0), dtype=np.float32)
    off = 0
    for i, w in enumerate(widths):
        tokens[i, :w] = raw[off:off + w]
        off += w
    roles = np.array([ROLE_NAMES.index(r["role"]) for r in recs], dtype=np.int8)
    rope = np.array([[r["t_idx"], r["r"], r["c"]] for r in recs], dtype=np.int64).reshape(-1, 3)
    kept = np.array([ch == "1" for ch in man["kept_mask"]], dtype=bool)
    return PackedSequence(tokens, widths, roles, rope, kept, man["mode"], tuple(man["grid_hw"]),
                          tuple(man["patch"]), man["n_target_frames"], man["tau"])
