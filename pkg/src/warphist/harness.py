"""Experiment plans and runners: pretraining, interface ablation, one-shot
adaptation, source sweep and runtime profile.

Every random choice derives from the plan seed through :func:`derive_seed`,
so result tables depend only on (plan, checkpoints), never on ``jobs``.
"""
from __future__ import annotations

import hashlib
import json
import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import (FinetuneConfig, LoraAdapter, ModelConfig, ToyModel, TrainConfig, build_condition,
                       lora_finetune, lora_mount, lora_unmount, oneshot_windows, sample_chunk, train)
from .backbone.checkpoint import load_adapter, load_model, save_adapter, save_model
from .backbone.train import PretrainSampler
from .camera import (PRIMITIVE_KINDS, Intrinsics, Trajectory, blend_trajectories, make_primitive_trajectory,
                     static_trajectory)
from .formats import write_ppm
from .metrics import REPORT_COLUMNS, RuntimeProfile, evaluate_chunk, profile_chunk, to_json, write_csv
from .packing import MODES, sequence_length_report
from .synth import ClipRecord, generate_scene, make_clip
from .warp import DIAGNOSTIC_COLUMNS, build_warp_video, source_diagnostics, write_warp_video

SCHEMA_VERSION = 1
REGIMES = ("zero_shot", "one_shot")


class PlanError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from named parts (plan seed, stage, clip id, ...)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


@dataclass(frozen=True)
class ClipSpec:
    clip_id: str
    scene_seed: int
    kinds: tuple
    magnitudes: tuple
    frames: int = 33
    sprite: bool | None = None
    sprite_motion: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in self.magnitudes))
        if len(self.kinds) != len(self.magnitudes):
            raise PlanError(f"clip {self.clip_id}: kinds and magnitudes differ in length")
        for k in self.kinds:
            if k not in PRIMITIVE_KINDS and k != "static":
                raise PlanError(f"clip {self.clip_id}: unknown trajectory kind {k!r}")

    def trajectory(self, intrinsics: Intrinsics) -> Trajectory:
        parts = [static_trajectory(self.frames, intrinsics) if k == "static"
                 else make_primitive_trajectory(k, self.frames, m, intrinsics)
                 for k, m in zip(self.kinds, self.magnitudes)]
        return parts[0] if len(parts) == 1 else blend_trajectories(parts)

    def scene(self):
        return generate_scene(self.scene_seed, self.sprite, self.sprite_motion)

    def make(self, intrinsics: Intrinsics) -> ClipRecord:
        return make_clip(self.scene(), self.trajectory(intrinsics), self.clip_id)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipSpec":
        return cls(**d)


DEFAULT_MAGNITUDES = {
    "pan_left": (8.0, 25.0), "pan_right": (8.0, 25.0), "tilt_up": (6.0, 18.0), "tilt_down": (6.0, 18.0),
    "orbit": (8.0, 25.0), "dolly_in": (0.5, 1.5), "dolly_out": (0.5, 1.5),
    "truck_left": (0.3, 1.0), "truck_right": (0.3, 1.0),
}


@dataclass
class ExperimentPlan:
    seed: int = 0
    image_size: tuple = (64, 64)
    fov_deg: float = 53.13
    clip_frames: int = 33
    train_kinds: tuple = ("pan_left", "tilt_up", "dolly_in", "truck_left", "orbit")
    heldout_kinds: tuple = ("pan_right", "tilt_down", "dolly_out", "truck_right")
    # every held-out clip contains one of these; a purely translational clip
    # leaves R-Err near zero for any output, even a frozen frame
    heldout_required_kinds: tuple = ("pan_right", "tilt_down")
    n_train: int = 160
    n_heldout: int = 20
    train_seed_base: int = 1000
    heldout_seed_base: int = 90000
    max_kinds_per_clip: int = 2
    magnitudes: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_MAGNITUDES.items()})
    oneshot_source: dict = field(default_factory=lambda: asdict(ClipSpec(
        "oneshot_src", 50000, ("pan_left", "truck_left"), (20.0, 0.5), 45, True, True)))
    sweep_sources: list = field(default_factory=lambda: [asdict(s) for s in DEFAULT_SWEEP])
    regimes: list = field(default_factory=lambda: [[m, "zero_shot"] for m in ("text_only", "full", "noalign")]
                          + [["full", "one_shot"]])
    model: dict = field(default_factory=lambda: asdict(ModelConfig()))
    train: dict = field(default_factory=lambda: asdict(TrainConfig()))
    finetune: dict = field(default_factory=lambda: asdict(FinetuneConfig()))
    tau: float = 0.5
    profile_fractions: tuple = (0.86, 0.47)
    profile_runs: int = 5
    schema_version: int = SCHEMA_VERSION

    # --- construction -------------------------------------------------------

    def __post_init__(self):
        self.image_size = tuple(int(x) for x in self.image_size)
        self.train_kinds = tuple(self.train_kinds)
        self.heldout_kinds = tuple(self.heldout_kinds)
        self.heldout_required_kinds = tuple(self.heldout_required_kinds)
        if not set(self.heldout_required_kinds) <= set(self.heldout_kinds):
            raise PlanError("heldout_required_kinds must be a subset of heldout_kinds")
        self.profile_fractions = tuple(float(x) for x in self.profile_fractions)
        # nested fields hold plain JSON values so a saved plan loads back equal
        for name in ("magnitudes", "oneshot_source", "sweep_sources", "regimes", "model", "train", "finetune"):
            setattr(self, name, json.loads(json.dumps(getattr(self, name))))
        if self.schema_version != SCHEMA_VERSION:
            raise PlanError(f"plan schema version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        for mode, regime in self.regimes:
            if mode not in MODES or regime not in REGIMES:
                raise PlanError(f"unknown regime cell ({mode}, {regime})")
        mc = self.model_config()
        if tuple(mc.image_size) != self.image_size:
            raise PlanError(f"model image size {mc.image_size} differs from plan image size {self.image_size}")
        if (self.clip_frames - 1) % mc.target_frames:
            raise PlanError(f"{self.clip_frames}-frame clips cannot hold {mc.target_frames} evenly spaced targets")
        self.train_config()
        self.finetune_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(dict(self.model))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(**self.finetune)

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.image_size[1], self.image_size[0], self.fov_deg)

    @property
    def target_stride(self) -> int:
        return (self.clip_frames - 1) // self.model_config().target_frames

    @property
    def target_indices(self) -> list:
        s = self.target_stride
        return [s * (j + 1) for j in range(self.model_config().target_frames)]

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise PlanError(f"unknown plan fields {sorted(unknown)}")
        if "schema_version" not in d:
            raise PlanError("plan has no schema_version")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    # --- datasets -------------------------------------------------------------

    def _random_specs(self, split: str, n: int, kinds: tuple, seed_base: int, required: tuple = ()) -> list:
        out = []
        for i in range(n):
            rng = np.random.default_rng(derive_seed(self.seed, split, i))
            k = min(int(rng.integers(1, self.max_kinds_per_clip + 1)), len(kinds))
            if required:
                first = str(rng.choice(required))
                rest = [x for x in kinds if x != first]
                chosen = (first,) + tuple(str(x) for x in rng.choice(rest, size=min(k - 1, len(rest)), replace=False))
            else:
                chosen = tuple(str(x) for x in rng.choice(kinds, size=k, replace=False))
            mags = tuple(float(rng.uniform(*self.magnitudes[c])) for c in chosen)
            out.append(ClipSpec(f"{split}_{i:04d}", seed_base + i, chosen, mags, self.clip_frames))
        return out

    def train_specs(self) -> list:
        return self._random_specs("train", self.n_train, self.train_kinds, self.train_seed_base)

    def heldout_specs(self) -> list:
        return self._random_specs("heldout", self.n_heldout, self.heldout_kinds, self.heldout_seed_base,
                                  self.heldout_required_kinds)

    def oneshot_spec(self) -> ClipSpec:
        return ClipSpec.from_dict(self.oneshot_source)

    def sweep_specs(self) -> list:
        return [ClipSpec.from_dict(s) for s in self.sweep_sources]

    def check_split(self) -> dict:
        """Assert train, one-shot sources and held-out clips share no scene, clip id or (held-out) kind."""
        train, held = self.train_specs(), self.heldout_specs()
        sources = [self.oneshot_spec()] + self.sweep_specs()
        groups = {"train": train, "heldout": held, "oneshot": sources}
        for a in groups:
            for b in groups:
                if a >= b:
                    continue
                sa = {s.scene_seed for s in groups[a]}
                sb = {s.scene_seed for s in groups[b]}
                if sa & sb:
                    raise PlanError(f"{a} and {b} share scene seeds {sorted(sa & sb)[:5]}")
                ia = {s.clip_id for s in groups[a]}
                ib = {s.clip_id for s in groups[b]}
                if ia & ib:
                    raise PlanError(f"{a} and {b} share clip ids {sorted(ia & ib)[:5]}")
        seen = {k for s in train for k in s.kinds}
        shared = seen & {k for s in held for k in s.kinds}
        if shared:
            raise PlanError(f"held-out trajectory kinds {sorted(shared)} also appear in training")
        return {k: len(v) for k, v in groups.items()}


DEFAULT_SWEEP = (
    ClipSpec("src_static", 60000, ("static",), (0.0,), 45, True, True),
    ClipSpec("src_pan", 60001, ("pan_left",), (20.0,), 45, True, False),
    ClipSpec("src_parallax", 60002, ("truck_left", "tilt_up"), (0.8, 10.0), 45, True, True),
    ClipSpec("src_orbit", 60003, ("orbit",), (25.0,), 45, False, False),
)


def desk_plan(**overrides) -> ExperimentPlan:
    """Reduced configuration that trains on one CPU core in minutes."""
    mc = ModelConfig(dim=96, heads=4, blocks=4, patch=(4, 4), rope_base=100.0, image_size=(16, 16),
                     target_frames=8, max_history_frames=4)
    tc = TrainConfig(iters=4000, batch=16, lr=1e-3)
    fc = FinetuneConfig(iters=1000, rank=32, alpha=32.0, lr=1e-3, batch=4)
    base = dict(image_size=(16, 16), model=asdict(mc), train=asdict(tc), finetune=asdict(fc))
    base.update(overrides)
    return ExperimentPlan(**base)


# --- model transport between processes ------------------------------------

def model_bytes(model: ToyModel) -> bytes:
    from .backbone.checkpoint import MODEL_MAGIC, _encode

    return _encode(MODEL_MAGIC, asdict(model.cfg), model.state_dict())


def _model_from_bytes(raw: bytes) -> ToyModel:
    from .backbone.checkpoint import MODEL_MAGIC, _decode

    config, tensors = _decode(raw, MODEL_MAGIC, "<memory>")
    m = ToyModel(ModelConfig.from_dict(config))
    m.load_state_dict(tensors)
    m.eval()
    return m


def _adapter_bytes(adapter: LoraAdapter) -> bytes:
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".wahl") as f:
        save_adapter(adapter, f.name)
        return Path(f.name).read_bytes()


def _adapter_from_bytes(raw: bytes) -> LoraAdapter:
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".wahl") as f:
        Path(f.name).write_bytes(raw)
        return load_adapter(f.name)


# --- pretraining ------------------------------------------------------------

class _AuditingSampler(PretrainSampler):
    """Pretraining sampler that tallies the token roles it emits."""

    def __init__(self, *a, **k):
        super().__init__(*a, **k)
        self.audit = {"clean_history": 0, "warp_history": 0, "noisy_target": 0}

    def batch(self, rng):
        x_hist, hrope, x0, trope = super().batch(rng)
        self.audit["clean_history"] += x_hist.shape[0] * x_hist.shape[1]
        self.audit["noisy_target"] += x0.shape[0] * x0.shape[1]
        return x_hist, hrope, x0, trope


def run_pretrain(plan: ExperimentPlan, out_dir=None, progress=None):
    """Train on clean-history continuation of the training split; returns (model, loss curve, audit)."""
    plan.check_split()
    mc, tc = plan.model_config(), plan.train_config()
    tc = replace(tc, seed=derive_seed(plan.seed, "pretrain") % 2**31)
    K = plan.intrinsics
    clips = [s.make(K) for s in plan.train_specs()]
    torch.manual_seed(tc.seed)
    model = ToyModel(mc)
    sampler = _AuditingSampler(clips, mc, tc)
    curve = train(model, clips, tc, sampler=sampler, progress=progress)
    audit = dict(sampler.audit)
    if audit["warp_history"] != 0:
        raise RuntimeError("pretraining emitted warp tokens")
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_model(model, d / "model.wahm")
        write_csv(d / "loss_curve.csv", [{"iteration": i + 1, "loss": v} for i, v in enumerate(curve)],
                  ("iteration", "loss"))
        (d / "pretrain_audit.json").write_text(to_json(audit) + "\n")
        plan.save(d / "resolved_plan.json")
    return model, curve, audit


# --- one-shot adaptation ------------------------------------------------------

def oneshot_sequences(plan: ExperimentPlan, clip: ClipRecord, mode: str):
    """Packed training chunks from overlapping windows of one source clip."""
    mc, fc = plan.model_config(), plan.finetune_config()
    seqs = []
    for start, tids in oneshot_windows(clip, mc.target_frames, fc.window_stride, plan.target_stride):
        wv = build_warp_video(clip, clip.trajectory.subset(tids), start)
        seqs.append(build_condition(clip, start, tids, wv, mode, mc.patch, plan.tau))
    return seqs


def run_oneshot(plan: ExperimentPlan, model: ToyModel, spec: ClipSpec | None = None, mode: str = "full",
                progress=None):
    """Finetune one adapter on one source clip; returns (adapter, loss curve)."""
    spec = spec or plan.oneshot_spec()
    if spec.clip_id in {s.clip_id for s in plan.heldout_specs()} or \
            spec.scene_seed in {s.scene_seed for s in plan.heldout_specs() + plan.train_specs()}:
        raise PlanError(f"one-shot source {spec.clip_id} overlaps the train or held-out split")
    fc = replace(plan.finetune_config(), seed=derive_seed(plan.seed, "finetune", spec.clip_id, mode) % 2**31,
                 mode=mode)
    seqs = oneshot_sequences(plan, spec.make(plan.intrinsics), mode)
    adapter, curve = lora_finetune(model, seqs, fc, progress=progress)
    lora_unmount(model)
    return adapter, curve


# --- evaluation cells -----------------------------------------------------------

_WORKER: dict = {}


def _init_worker(model_raw: bytes, adapter_raw: dict):
    torch.set_num_threads(1)
    _WORKER["model"] = _model_from_bytes(model_raw)
    _WORKER["adapters"] = {k: _adapter_from_bytes(v) for k, v in adapter_raw.items()}


def evaluate_cell(plan: ExperimentPlan, model: ToyModel, spec: ClipSpec, mode: str, regime: str,
                  adapter: LoraAdapter | None = None, cell_dir=None) -> dict:
    """Warp, pack, sample and score one (regime, held-out clip) cell."""
    mc = model.cfg
    K = plan.intrinsics
    clip = spec.make(K)
    tids = plan.target_indices
    sub = clip.trajectory.subset(tids)
    wv = build_warp_video(clip, sub, 0)
    packed = build_condition(clip, 0, tids, wv, mode, mc.patch, plan.tau)
    seed = derive_seed(plan.seed, "sample", mode, regime, spec.clip_id) % 2**31
    if adapter is not None:
        lora_mount(model, adapter)
    try:
        n0 = model.n_evals
        out = sample_chunk(model, packed, mc.sample_steps, seed)
        evals = model.n_evals - n0
    finally:
        lora_unmount(model)
    if evals != mc.sample_steps:
        raise RuntimeError(f"sampler ran {evals} model evaluations, expected {mc.sample_steps}")
    rep = evaluate_chunk(out, clip.frames[tids], wv.valid, sub, spec.scene(), tids, clip.trajectory[0])
    counts = sequence_length_report(packed)
    if cell_dir is not None:
        d = Path(cell_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, f in enumerate(out):
            write_ppm(d / f"generated_{i:04d}.ppm", f)
        write_warp_video(wv, d / "warp")
        (d / "packed.json").write_text(json.dumps(packed.to_manifest()) + "\n")
        (d / "metrics.json").write_text(to_json(asdict(rep)) + "\n")
    row = {"mode": mode, "regime": regime, "clip_id": spec.clip_id, "status": "ok",
           "model_evals": evals, "tokens": counts["total"], "warp_tokens": counts["warp_history"]}
    row.update(rep.row())
    row["pose_unconverged"] = rep.flags.get("pose_unconverged", 0)
    return row


def _cell_task(args):
    plan_json, spec_d, mode, regime, cell_dir = args
    plan = ExperimentPlan.from_json(plan_json)
    spec = ClipSpec.from_dict(spec_d)
    adapter = _WORKER["adapters"].get(mode) if regime == "one_shot" else None
    try:
        if regime == "one_shot" and adapter is None:
            raise PlanError(f"no one-shot adapter for mode {mode}")
        return evaluate_cell(plan, _WORKER["model"], spec, mode, regime, adapter, cell_dir)
    except Exception as exc:  # recorded per cell; the run continues
        row = {"mode": mode, "regime": regime, "clip_id": spec.clip_id, "status": f"failed: {exc}"}
        row.update({c: None for c in REPORT_COLUMNS})
        return row


def _run_cells(plan, model, tasks, adapters: dict, jobs: int):
    model_raw = model_bytes(model)
    adapter_raw = {k: _adapter_bytes(v) for k, v in adapters.items()}
    if jobs <= 1:
        saved = dict(_WORKER)
        _init_worker(model_raw, adapter_raw)
        try:
            return [_cell_task(t) for t in tasks]
        finally:
            _WORKER.clear()
            _WORKER.update(saved)
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_init_worker,
                             initargs=(model_raw, adapter_raw)) as pool:
        return list(pool.map(_cell_task, tasks))


RESULT_COLUMNS = ("mode", "regime", "clip_id", "status") + REPORT_COLUMNS + (
    "tokens", "warp_tokens", "model_evals", "pose_unconverged")


@dataclass
class ResultTable:
    rows: list
    columns: tuple = RESULT_COLUMNS
    group_keys: tuple = ("mode", "regime")

    def groups(self) -> dict:
        out = {}
        for r in self.rows:
            out.setdefault(tuple(r[k] for k in self.group_keys), []).append(r)
        return out

    def values(self, metric: str, **where) -> np.ndarray:
        return np.array([r[metric] for r in self.rows
                         if all(r.get(k) == v for k, v in where.items()) and r.get(metric) is not None],
                        dtype=np.float64)

    def median(self, metric: str, **where) -> float:
        v = self.values(metric, **where)
        return float(np.median(v)) if len(v) else float("nan")

    def aggregates(self, metrics=REPORT_COLUMNS) -> list:
        out = []
        for key, rows in sorted(self.groups().items()):
            agg = dict(zip(self.group_keys, key))
            agg["n_ok"] = sum(r.get("status") == "ok" for r in rows)
            agg["n_failed"] = len(rows) - agg["n_ok"]
            for m in metrics:
                v = [r[m] for r in rows if r.get(m) is not None]
                agg[f"{m}_median"] = float(np.median(v)) if v else None
                agg[f"{m}_mean"] = float(np.mean(v)) if v else None
            out.append(agg)
        return out

    def win_rate(self, metric: str, a: dict, b: dict, lower_is_better: bool = True) -> float:
        """Fraction of clips where ``a`` beats ``b`` on ``metric``."""
        ra = {r["clip_id"]: r[metric] for r in self.rows if all(r.get(k) == v for k, v in a.items())}
        rb = {r["clip_id"]: r[metric] for r in self.rows if all(r.get(k) == v for k, v in b.items())}
        common = [c for c in ra if c in rb and ra[c] is not None and rb[c] is not None]
        if not common:
            return float("nan")
        wins = [(ra[c] < rb[c]) if lower_is_better else (ra[c] > rb[c]) for c in common]
        return float(np.mean(wins))

    def write(self, out_dir, name: str) -> None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_csv(d / f"{name}.csv", self.rows, self.columns)
        aggs = self.aggregates()
        if aggs:
            write_csv(d / f"{name}_summary.csv", aggs, tuple(aggs[0]))
        (d / f"{name}.json").write_text(to_json({"rows": self.rows, "aggregates": aggs}) + "\n")


def run_ablation(plan: ExperimentPlan, model: ToyModel, adapters: dict | None = None, jobs: int = 1,
                 out_dir=None, progress=None) -> ResultTable:
    """Every planned (mode, regime) cell on every held-out clip.

    ``adapters`` maps packing mode to a one-shot adapter; missing adapters
    for planned one-shot cells are trained on the plan's one-shot source.
    """
    plan.check_split()
    adapters = dict(adapters or {})
    for mode, regime in plan.regimes:
        if regime == "one_shot" and mode not in adapters:
            adapters[mode], _ = run_oneshot(plan, model, mode=mode, progress=progress)
            if out_dir is not None:
                (Path(out_dir) / "adapters").mkdir(parents=True, exist_ok=True)
                save_adapter(adapters[mode], Path(out_dir) / "adapters" / f"{mode}.wahl")
    pj = plan.to_json()
    tasks = []
    for mode, regime in plan.regimes:
        for spec in plan.heldout_specs():
            cell_dir = None if out_dir is None else str(Path(out_dir) / "cells" / f"{mode}_{regime}" / spec.clip_id)
            tasks.append((pj, asdict(spec), mode, regime, cell_dir))
    rows = _run_cells(plan, model, tasks, adapters, jobs)
    table = ResultTable(rows)
    if out_dir is not None:
        table.write(out_dir, "ablation")
    return table


SWEEP_COLUMNS = ("source_id",) + tuple(f"src_{c}" for c in DIAGNOSTIC_COLUMNS) + (
    "r_err_deg_median", "t_err_median", "vis_psnr_db_median", "psnr_db_median", "n_ok", "adapter_sha256")


def run_oneshot_sweep(plan: ExperimentPlan, model: ToyModel, source_ids=None, jobs: int = 1, out_dir=None,
                      progress=None) -> ResultTable:
    """One adapter per candidate source with an identical recipe; downstream metrics joined with source diagnostics."""
    specs = plan.sweep_specs()
    if source_ids is not None:
        specs = [s for s in specs if s.clip_id in set(source_ids)]
    if len(specs) < 2:
        raise PlanError("a source sweep needs at least 2 candidate sources")
    plan.check_split()
    pj = plan.to_json()
    rows, cell_rows = [], []
    for spec in specs:
        row = {"source_id": spec.clip_id}
        try:
            diag = source_diagnostics(spec.make(plan.intrinsics))
            row.update({f"src_{k}": v for k, v in diag.as_row().items()})
            adapter, _ = run_oneshot(plan, model, spec, "full", progress=progress)
            row["adapter_sha256"] = hashlib.sha256(_adapter_bytes(adapter)).hexdigest()
            if out_dir is not None:
                (Path(out_dir) / "adapters").mkdir(parents=True, exist_ok=True)
                save_adapter(adapter, Path(out_dir) / "adapters" / f"{spec.clip_id}.wahl")
            tasks = [(pj, asdict(h), "full", "one_shot", None) for h in plan.heldout_specs()]
            cells = _run_cells(plan, model, tasks, {"full": adapter}, jobs)
            for c in cells:
                c["source_id"] = spec.clip_id
            cell_rows.extend(cells)
            t = ResultTable(cells)
            row["n_ok"] = sum(c["status"] == "ok" for c in cells)
            for m in ("r_err_deg", "t_err", "vis_psnr_db", "psnr_db"):
                row[f"{m}_median"] = t.median(m)
        except Exception as exc:  # per-source isolation
            row["status"] = f"failed: {exc}"
        rows.append(row)
    table = ResultTable(rows, SWEEP_COLUMNS, ("source_id",))
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_csv(d / "sweep.csv", rows, SWEEP_COLUMNS)
        write_csv(d / "sweep_cells.csv", cell_rows, ("source_id",) + RESULT_COLUMNS)
        (d / "sweep.json").write_text(to_json({"rows": rows}) + "\n")
    return table


PROFILE_SPEC = ClipSpec("profile_clip", 70000, ("pan_right",), (6.0,), 33, False, False)


def run_profile(plan: ExperimentPlan, model: ToyModel, runs: int | None = None, out_dir=None) -> list:
    """Baseline and warp-conditioned chunk generation under the planned visible-token fractions.

    Each regime is timed ``runs`` times; stage times are per-stage medians.
    """
    runs = plan.profile_runs if runs is None else runs
    clip = PROFILE_SPEC.make(plan.intrinsics)
    tids = plan.target_indices
    regimes = [("baseline", None)] + [(f"visible_{round(100 * f)}", f) for f in plan.profile_fractions]
    out = []
    for name, frac in regimes:
        samples = [profile_chunk(model, clip, tids, frac, plan.tau,
                                 seed=derive_seed(plan.seed, "profile", name) % 2**31, regime=name)
                   for _ in range(runs)]
        secs = {k: float(np.median([s.seconds[k] for s in samples])) for k in samples[0].seconds}
        prof = RuntimeProfile(name, secs, samples[0].tokens, samples[0].visible_fraction)
        for s in samples[1:]:
            if s.tokens != prof.tokens:
                raise RuntimeError("token counts differ between identical profiling runs")
        out.append(prof)
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        rows = [p.row() for p in out]
        write_csv(d / "profile.csv", rows, tuple(rows[-1]))
    return out
