"""Flow-matching pretraining, Euler chunk sampling and adapter finetuning."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..packing import (HistoryCorruption, PackedSequence, corrupt_history, pack_condition_stream, patchify,
                       warp_grid)
from .lora import LoraAdapter, lora_mount
from .model import ToyModel, parameter_checksum, split_packed


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 3000
    batch: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    warmup: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    max_stride: int = 4
    corruption_prob: float = 0.5
    mask_rate_max: float = 0.5
    drop_rate_max: float = 0.5
    log_every: int = 0


def _lr_at(it: int, cfg: TrainConfig) -> float:
    if it < cfg.warmup:
        return cfg.lr * (it + 1) / cfg.warmup
    p = (it - cfg.warmup) / max(1, cfg.iters - cfg.warmup)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * min(1.0, p)))


def flow_pair(x0: torch.Tensor, eps: torch.Tensor, tau: torch.Tensor):
    """Interpolant ``(1 - tau) eps + tau x0`` and its velocity ``x0 - eps``."""
    t = tau.view(-1, *([1] * (x0.dim() - 1)))
    return (1 - t) * eps + t * x0, x0 - eps


def flow_loss(model: ToyModel, x_hist, rope_hist, x0, rope_tgt, tau, eps, x_fuse=None):
    """Mean squared velocity error over target tokens only."""
    xt, v = flow_pair(x0, eps, tau)
    pred = model.run(x_hist, rope_hist, xt, rope_tgt, tau, x_fuse)
    return ((pred - v) ** 2).mean()


def _window_options(n_frames: int, h: int, K: int, max_stride: int):
    out = []
    for s in range(1, max_stride + 1):
        span = (h + K - 1) * s + 1
        for start in range(0, n_frames - span + 1):
            out.append((s, start))
    return out


class PretrainSampler:
    """Draws clean-history continuation batches from a list of clips.

    History length is shared within a batch so sequences stack; each sample
    picks its own clip, stride and start. History frames are corrupted by
    dropping frames or zeroing patches.
    """

    def __init__(self, clips, model_cfg, train_cfg: TrainConfig):
        if not clips:
            raise ValueError("training needs at least one clip")
        self.clips = list(clips)
        self.mc = model_cfg
        self.tc = train_cfg
        self.K = model_cfg.target_frames
        n = min(len(c) for c in self.clips)
        self.hist_choices = [h for h in range(1, model_cfg.max_history_frames + 1)
                             if _window_options(n, h, self.K, train_cfg.max_stride)]
        if not self.hist_choices:
            raise ValueError(f"clips of {n} frames are too short for {self.K} targets")

    def batch(self, rng: np.random.Generator):
        ph, pw = self.mc.patch
        h = int(rng.choice(self.hist_choices))
        policy, rate = "none", 0.0
        if h > 1 and rng.random() < self.tc.corruption_prob:
            if rng.random() < 0.5:
                policy, rate = "drop_frames", float(rng.uniform(0, self.tc.drop_rate_max))
            else:
                policy, rate = "mask_patches", float(rng.uniform(0, self.tc.mask_rate_max))
        elif h == 1 and rng.random() < self.tc.corruption_prob * 0.5:
            policy, rate = "mask_patches", float(rng.uniform(0, self.tc.mask_rate_max))
        hist, hrope, tgt = [], None, []
        for _ in range(self.tc.batch):
            clip = self.clips[int(rng.integers(len(self.clips)))]
            opts = _window_options(len(clip), h, self.K, self.tc.max_stride)
            s, start = opts[int(rng.integers(len(opts)))]
            idx = start + s * np.arange(h + self.K)
            frames, kept = corrupt_history(clip.frames[idx[:h]], HistoryCorruption(policy, rate, int(rng.integers(2**31))),
                                           (ph, pw))
            g = patchify(frames, ph, pw, frame_orders=kept)
            t = patchify(clip.frames[idx[h:]], ph, pw)
            hist.append(g.tokens)
            tgt.append(t.tokens)
            hrope = g.coords
            trope = t.coords.copy()
            trope[:, 0] += h
        x_hist = torch.from_numpy(np.stack(hist))
        x0 = torch.from_numpy(np.stack(tgt)) * 2 - 1
        return x_hist, hrope, x0, trope


def train(model: ToyModel, clips, cfg: TrainConfig, sampler=None, progress=None):
    """Pretrain on clean-history continuation; returns the per-iteration loss curve."""
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = sampler or PretrainSampler(clips, model.cfg, cfg)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    curve = []
    for it in range(cfg.iters):
        x_hist, hrope, x0, trope = sampler.batch(rng)
        tau = torch.rand(x0.shape[0], generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        loss = flow_loss(model, x_hist, hrope, x0, trope, tau, eps)
        val = loss.item()
        if not math.isfinite(val):
            raise DivergenceError(it + 1, val)
        for g in opt.param_groups:
            g["lr"] = _lr_at(it, cfg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        curve.append(val)
        if progress is not None and cfg.log_every and (it + 1) % cfg.log_every == 0:
            progress(it + 1, float(np.mean(curve[-cfg.log_every:])))
    model.eval()
    return curve


def _condition_tensors(packed: PackedSequence, dtype=torch.float32):
    x_hist, rope_hist, x_tgt, rope_tgt, x_fuse, x_cond, rope_cond = split_packed(packed)
    as_t = (lambda a: None if a is None else torch.as_tensor(a, dtype=dtype).unsqueeze(0))
    return dict(x_hist=as_t(x_hist), rope_hist=rope_hist, rope_tgt=rope_tgt, x_fuse=as_t(x_fuse),
                x_cond=as_t(x_cond), rope_cond=rope_cond, n_target=x_tgt.shape[0], patch_dim=x_tgt.shape[1])


@torch.no_grad()
def sample_chunk(model: ToyModel, packed: PackedSequence, steps: int | None = None, seed: int = 0) -> np.ndarray:
    """Generate the K target frames of ``packed`` by Euler integration from noise.

    Exactly ``steps`` model evaluations; target token contents of ``packed``
    are ignored. Returns (K, H, W, 3) frames in [0, 1].
    """
    steps = model.cfg.sample_steps if steps is None else int(steps)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    torch.set_num_threads(1)
    model.eval()
    c = _condition_tensors(packed)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((1, c["n_target"], c["patch_dim"]), generator=gen)
    dt = 1.0 / steps
    for i in range(steps):
        tau = torch.full((1,), i * dt)
        v = model.run(c["x_hist"], c["rope_hist"], x, c["rope_tgt"], tau, c["x_fuse"], c["x_cond"], c["rope_cond"])
        x = x + dt * v
    frames = (x[0].numpy().astype(np.float64) + 1) / 2
    from ..packing import unpatchify

    out = unpatchify(frames, packed.n_target_frames, packed.grid_hw, packed.patch)
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class FinetuneConfig:
    iters: int = 1000
    rank: int = 32
    alpha: float = 32.0
    lr: float = 1e-3
    batch: int = 4
    seed: int = 0
    window_stride: int = 4
    target_stride: int = 4
    mode: str = "full"
    tau: float = 0.5
    grad_clip: float = 1.0


def oneshot_windows(clip, K: int, window_stride: int = 4, target_stride: int = 4):
    """Overlapping (history frame, target frames) windows over one clip."""
    span = K * target_stride
    starts = list(range(0, len(clip) - span, window_stride))
    if not starts:
        raise ValueError(f"clip of {len(clip)} frames is too short for one {K}-frame window")
    return [(s, [s + target_stride * (j + 1) for j in range(K)]) for s in starts]


def build_condition(clip, history_index: int, target_indices, warp_video, mode: str, patch, tau: float = 0.5):
    """Pack one chunk: one clean history frame, its warp into the target cameras, and the targets."""
    ph, pw = patch
    hist = patchify(clip.frames[history_index], ph, pw) if history_index is not None else None
    tg = patchify(clip.frames[list(target_indices)], ph, pw)
    wg = None
    if mode != "text_only":
        wg = warp_grid(warp_video.rgb, warp_video.valid, ph, pw)
    return pack_condition_stream(hist, wg, tg, mode, tau)


def _packed_batch(packed: PackedSequence, B: int):
    c = _condition_tensors(packed)
    rep = (lambda t: None if t is None else t.expand(B, -1, -1))
    x0 = torch.as_tensor(split_packed(packed)[2]).unsqueeze(0).expand(B, -1, -1) * 2 - 1
    return c, rep, x0


def lora_finetune(model: ToyModel, sequences, cfg: FinetuneConfig, adapter: LoraAdapter | None = None,
                  progress=None) -> tuple:
    """Train only adapter matrices on the given packed sequences (targets hold clean frames).

    Returns ``(adapter, loss curve)``. Base weights are frozen; their checksum
    is verified unchanged on exit.
    """
    if not sequences:
        raise ValueError("finetuning needs at least one packed sequence")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    adapter = adapter or LoraAdapter.for_model(model, cfg.rank, cfg.alpha, seed=cfg.seed)
    tune_fusion = all(s.mode == "chfusion" for s in sequences)
    frozen = [n for n in model.state_dict() if not (tune_fusion and n.startswith("fusion_embed."))]
    before = parameter_checksum(model, frozen)
    for p in model.parameters():
        p.requires_grad_(False)
    extra = []
    if tune_fusion:
        # the channel-fusion input has no pretrained pathway; it learns alongside the adapter
        extra = list(model.fusion_embed.parameters())
        for p in extra:
            p.requires_grad_(True)
    lora_mount(model, adapter)
    opt = torch.optim.AdamW(list(adapter.parameters()) + extra, lr=cfg.lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(cfg.seed)
    prepared = [_packed_batch(s, cfg.batch) for s in sequences]
    model.train()
    curve = []
    try:
        for it in range(cfg.iters):
            c, rep, x0 = prepared[it % len(prepared)]
            tau = torch.rand(cfg.batch, generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            xt, v = flow_pair(x0, eps, tau)
            pred = model.run(rep(c["x_hist"]), c["rope_hist"], xt, c["rope_tgt"], tau, rep(c["x_fuse"]),
                             rep(c["x_cond"]), c["rope_cond"])
            loss = ((pred - v) ** 2).mean()
            val = loss.item()
            if not math.isfinite(val):
                raise DivergenceError(it + 1, val)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(list(adapter.parameters()) + extra, cfg.grad_clip)
            opt.step()
            curve.append(val)
            if progress is not None and (it + 1) % 100 == 0:
                progress(it + 1, float(np.mean(curve[-100:])))
    finally:
        model.eval()
        for p in extra:
            p.requires_grad_(False)
    if parameter_checksum(model, frozen) != before:
        raise RuntimeError("base weights changed during adapter finetuning")
    return adapter, curve
