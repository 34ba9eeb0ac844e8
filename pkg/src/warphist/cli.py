"""Command-line entry point: ``warphist <subcommand> ...``.

Exit status: 0 success, 1 domain error (message printed verbatim), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

log = logging.getLogger("warphist")

HELP_WIDTH = 100


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except absent (None) ones; fixed width so help text is stable."""

    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=32)

    def _get_help_string(self, action):
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


_formatter = _HelpFormatter


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list:
    return [x.strip() for x in text.split(",") if x.strip()]


# --- shared helpers -----------------------------------------------------------

def _load_plan(args):
    from .harness import ExperimentPlan, desk_plan

    plan = ExperimentPlan.load(args.plan) if args.plan else (desk_plan() if args.preset == "desk" else ExperimentPlan())
    if args.seed is not None:
        plan.seed = args.seed
    return plan


def _log_config(args, out: Path | None, extra: dict | None = None) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        resolved.update(extra)
    text = json.dumps(resolved, indent=1, sort_keys=True, default=str)
    log.info("resolved config:\n%s", text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(text + "\n", encoding="utf-8")


def _default_targets(n_frames: int, K: int) -> list:
    s = (n_frames - 1) // K
    if s < 1:
        raise ValueError(f"clip of {n_frames} frames cannot hold {K} targets after frame 0")
    return [s * (j + 1) for j in range(K)]


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    from .camera import PRIMITIVE_KINDS, Intrinsics
    from .harness import DEFAULT_MAGNITUDES, ClipSpec, derive_seed
    from .synth import write_clip

    out = Path(args.out)
    _log_config(args, out)
    kinds = args.kinds or list(PRIMITIVE_KINDS)
    for k in kinds:
        if k not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown trajectory kind {k!r}; expected one of {PRIMITIVE_KINDS}")
    K = Intrinsics.from_fov(args.size, args.size)
    for i in range(args.clips):
        rng = np.random.default_rng(derive_seed(args.seed, "synth", i))
        n = int(rng.integers(1, min(2, len(kinds)) + 1))
        chosen = tuple(str(x) for x in rng.choice(kinds, size=n, replace=False))
        mags = tuple(float(rng.uniform(*DEFAULT_MAGNITUDES[c])) for c in chosen)
        spec = ClipSpec(f"clip_{i:04d}", derive_seed(args.seed, "scene", i) % 2**31, chosen, mags, args.frames)
        write_clip(spec.make(K), out / spec.clip_id)
    print(f"wrote {args.clips} clips to {out}")
    return 0


def cmd_warp(args) -> int:
    from .synth import read_clip
    from .trajectory_io import read_trajectory
    from .warp import build_warp_video, write_warp_video

    out = Path(args.out)
    _log_config(args, out)
    clip = read_clip(args.clip)
    H, W = clip.shape
    traj = read_trajectory(args.trajectory, W, H) if args.trajectory else clip.trajectory
    if args.targets:
        traj = traj.subset(args.targets)
    wv = build_warp_video(clip, traj, args.source_frame, args.footprint, args.jobs)
    write_warp_video(wv, out)
    print(f"wrote {len(wv)} warped frames to {out}")
    return 0


def cmd_pack(args) -> int:
    from .backbone import build_condition
    from .packing import save_packed, sequence_length_report
    from .synth import read_clip
    from .warp import read_warp_video

    out = Path(args.out)
    _log_config(args, out)
    clip = read_clip(args.clip)
    wv = read_warp_video(args.warp) if args.warp else None
    if wv is None and args.mode != "text_only":
        raise ValueError(f"mode {args.mode} needs --warp")
    K = len(wv) if wv is not None else args.target_frames
    targets = args.targets or _default_targets(len(clip), K)
    packed = build_condition(clip, args.history_frame, targets, wv if args.mode != "text_only" else None,
                             args.mode, (args.patch, args.patch), args.tau)
    save_packed(packed, out)
    print(json.dumps(sequence_length_report(packed), sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    from .harness import run_pretrain

    out = Path(args.out)
    plan = _load_plan(args)
    if args.iters is not None:
        plan.train = dict(plan.train, iters=args.iters)
    _log_config(args, out, {"plan": json.loads(plan.to_json())})
    _, curve, audit = run_pretrain(plan, out, progress=lambda i, l: log.info("iter %d loss %.5f", i, l))
    print(f"final loss {np.mean(curve[-50:]):.5f} (initial {curve[0]:.5f}); warp tokens seen: {audit['warp_history']}")
    return 0


def cmd_finetune(args) -> int:
    from .backbone import lora_finetune, lora_unmount
    from .backbone.checkpoint import load_model, save_adapter
    from .harness import derive_seed, oneshot_sequences
    from .synth import read_clip

    plan = _load_plan(args)
    plan.finetune = dict(plan.finetune, rank=args.rank, alpha=args.alpha, iters=args.iters, lr=args.lr,
                         mode=args.mode)
    out = Path(args.out)
    _log_config(args, out.parent, {"plan": json.loads(plan.to_json())})
    model = load_model(args.checkpoint)
    if args.source:
        clip = read_clip(args.source)
    else:
        clip = plan.oneshot_spec().make(plan.intrinsics)
    seqs = oneshot_sequences(plan, clip, args.mode)
    fc = replace(plan.finetune_config(), seed=derive_seed(plan.seed, "finetune", clip.clip_id, args.mode) % 2**31)
    adapter, curve = lora_finetune(model, seqs, fc, progress=lambda i, l: log.info("iter %d loss %.5f", i, l))
    lora_unmount(model)
    save_adapter(adapter, out)
    print(f"wrote adapter to {out} (rank {adapter.rank}, alpha {adapter.alpha:g}, final loss {np.mean(curve[-50:]):.5f})")
    return 0


def cmd_sample(args) -> int:
    from .backbone import lora_mount, sample_chunk
    from .backbone.checkpoint import load_adapter, load_model
    from .formats import write_ppm
    from .packing import load_packed

    out = Path(args.out)
    _log_config(args, out)
    model = load_model(args.checkpoint)
    if args.adapter:
        lora_mount(model, load_adapter(args.adapter))
    packed = load_packed(args.packed)
    frames = sample_chunk(model, packed, args.steps, args.seed)
    for i, f in enumerate(frames):
        write_ppm(out / f"generated_{i:04d}.ppm", f)
    print(f"wrote {len(frames)} frames to {out} ({model.n_evals} model evaluations)")
    return 0


def cmd_eval(args) -> int:
    from dataclasses import asdict as _asdict

    from .formats import read_ppm
    from .metrics import REPORT_COLUMNS, evaluate_chunk, to_json, write_csv
    from .synth import generate_scene, read_clip
    from .warp import read_warp_video

    out = Path(args.out)
    _log_config(args, out)
    clip = read_clip(args.clip)
    files = sorted(Path(args.generated).glob("generated_*.ppm"))
    if not files:
        raise ValueError(f"no generated_*.ppm frames in {args.generated}")
    gen = np.stack([read_ppm(f) for f in files])
    targets = args.targets or _default_targets(len(clip), len(gen))
    if len(targets) != len(gen):
        raise ValueError(f"{len(gen)} generated frames but {len(targets)} target indices")
    valid = read_warp_video(args.warp).valid if args.warp else None
    scene = generate_scene(clip.scene_seed)
    rep = evaluate_chunk(gen, clip.frames[targets], valid, clip.trajectory.subset(targets), scene, targets,
                         clip.trajectory[args.history_frame], estimate_pose=not args.no_pose)
    (out / "metrics.json").write_text(to_json(_asdict(rep)) + "\n")
    write_csv(out / "metrics.csv", [rep.row()], REPORT_COLUMNS)
    print(json.dumps(rep.row(), sort_keys=True))
    return 0


def _load_model_arg(args):
    from .backbone.checkpoint import load_model

    return load_model(args.checkpoint)


def cmd_ablate(args) -> int:
    from .backbone.checkpoint import load_adapter
    from .harness import run_ablation

    plan = _load_plan(args)
    out = Path(args.out)
    _log_config(args, out, {"plan": json.loads(plan.to_json())})
    adapters = {}
    if args.adapter_dir:
        for p in sorted(Path(args.adapter_dir).glob("*.wahl")):
            adapters[p.stem] = load_adapter(p)
    table = run_ablation(plan, _load_model_arg(args), adapters, args.jobs, out,
                         progress=lambda i, l: log.info("finetune iter %d loss %.5f", i, l))
    for agg in table.aggregates():
        print(f"{agg['mode']:>10} {agg['regime']:>9}  r_err median {agg['r_err_deg_median']}  "
              f"vis_psnr median {agg['vis_psnr_db_median']}  failed {agg['n_failed']}")
    return 0


def cmd_sweep(args) -> int:
    from .harness import run_oneshot_sweep

    plan = _load_plan(args)
    out = Path(args.out)
    _log_config(args, out, {"plan": json.loads(plan.to_json())})
    table = run_oneshot_sweep(plan, _load_model_arg(args), args.sources, args.jobs, out,
                              progress=lambda i, l: log.info("finetune iter %d loss %.5f", i, l))
    for r in table.rows:
        print(f"{r['source_id']:>14}  inv_mean {r.get('src_inv_mean')}  rot_mean {r.get('src_rot_mean_deg')}  "
              f"r_err median {r.get('r_err_deg_median')}")
    return 0


def cmd_profile(args) -> int:
    from .harness import run_profile

    plan = _load_plan(args)
    out = Path(args.out)
    _log_config(args, out, {"plan": json.loads(plan.to_json())})
    rows = run_profile(plan, _load_model_arg(args), args.runs, out)
    for p in rows:
        print(f"{p.regime:>12}  tokens {p.tokens['total']}  transformer {p.seconds['transformer']:.4f}s  "
              f"end_to_end {p.seconds['end_to_end']:.4f}s")
    return 0


def cmd_report(args) -> int:
    from .metrics import read_csv, write_csv
    from .report import bar_chart, line_chart, write_svg

    src, out = Path(args.results), Path(args.out)
    _log_config(args, out)
    made = []

    def num(v):
        try:
            return float(v)
        except (TypeError, ValueError):
            return None

    if (src / "ablation_summary.csv").exists():
        rows = read_csv(src / "ablation_summary.csv")
        labels = [f"{r['mode']}/{r['regime']}" for r in rows]
        for metric in ("r_err_deg", "vis_psnr_db", "psnr_db"):
            write_svg(out / f"ablation_{metric}.svg",
                      bar_chart(labels, [num(r[f"{metric}_median"]) for r in rows], f"median {metric} per regime",
                                metric))
            made.append(f"ablation_{metric}.svg")
        write_csv(out / "ablation_table.csv", rows, tuple(rows[0]))
    if (src / "sweep.csv").exists():
        rows = read_csv(src / "sweep.csv")
        write_svg(out / "sweep_r_err.svg", bar_chart([r["source_id"] for r in rows],
                                                    [num(r["r_err_deg_median"]) for r in rows],
                                                    "one-shot source sweep: median r_err", "r_err_deg"))
        made.append("sweep_r_err.svg")
        write_csv(out / "sweep_table.csv", rows, tuple(rows[0]))
    if (src / "profile.csv").exists():
        rows = read_csv(src / "profile.csv")
        write_svg(out / "profile_transformer.svg", bar_chart([r["regime"] for r in rows],
                                                            [num(r["transformer_s"]) for r in rows],
                                                            "transformer/sampling time", "seconds"))
        write_svg(out / "profile_tokens.svg", bar_chart([r["regime"] for r in rows],
                                                       [num(r["tokens_total"]) for r in rows],
                                                       "sequence length", "tokens"))
        made += ["profile_transformer.svg", "profile_tokens.svg"]
    if (src / "loss_curve.csv").exists():
        rows = read_csv(src / "loss_curve.csv")
        write_svg(out / "loss_curve.svg", line_chart([r["iteration"] for r in rows], [r["loss"] for r in rows],
                                                     "pretraining loss", "loss"))
        made.append("loss_curve.svg")
    if not made:
        raise ValueError(f"no result tables found in {src}")
    print("\n".join(made))
    return 0


# --- parser -----------------------------------------------------------------

def _add_plan_args(p):
    p.add_argument("--plan", help="experiment plan JSON file (overrides --preset)")
    p.add_argument("--preset", choices=("default", "desk"), default="desk", help="built-in plan when --plan is absent")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warphist", description="Toy camera control through warped history.",
                                     formatter_class=_formatter)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug)")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", required=True)

    def add(name, func, help_text, plan=False):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_formatter)
        p.set_defaults(func=func)
        if plan:
            p.add_argument("--seed", type=int, default=None, help="root seed (plan seed when omitted)")
            _add_plan_args(p)
        else:
            p.add_argument("--seed", type=int, default=0, help="random seed")
        return p

    p = add("synth", cmd_synth, "render synthetic clips with random primitive camera motions")
    p.add_argument("--clips", type=int, default=1, help="number of clips")
    p.add_argument("--frames", type=int, default=33, help="frames per clip")
    p.add_argument("--size", type=int, default=64, help="frame width and height in pixels")
    p.add_argument("--kinds", type=_str_list, default=None, help="comma-separated trajectory kinds; all kinds when omitted")
    p.add_argument("--out", required=True, help="output directory")

    p = add("warp", cmd_warp, "warp one clip frame into a camera trajectory")
    p.add_argument("--clip", required=True, help="clip directory")
    p.add_argument("--trajectory", default=None, help="camera file (default: the clip's own cameras)")
    p.add_argument("--targets", type=_int_list, default=None, help="comma-separated trajectory indices to keep")
    p.add_argument("--source-frame", type=int, default=0, help="observed frame to lift")
    p.add_argument("--footprint", type=int, choices=(1, 2), default=1, help="splat footprint in pixels")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pack", cmd_pack, "pack history, warp and target tokens into one sequence")
    p.add_argument("--clip", required=True, help="clip directory")
    p.add_argument("--warp", default=None, help="warp directory (omit for text_only)")
    p.add_argument("--mode", default="full",
                   choices=("full", "noalign", "novisdrop", "seqconcat", "chfusion", "text_only"),
                   help="packing mode")
    p.add_argument("--tau", type=float, default=0.5, help="visible-token support threshold")
    p.add_argument("--patch", type=int, default=8, help="square patch size")
    p.add_argument("--history-frame", type=int, default=0, help="clean history frame index")
    p.add_argument("--targets", type=_int_list, default=None, help="target frame indices (default: evenly spaced)")
    p.add_argument("--target-frames", type=int, default=8, help="target count when no warp is given")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pretrain", cmd_pretrain, "pretrain the backbone on clean-history continuation", plan=True)
    p.add_argument("--iters", type=int, default=None, help="override the plan's iteration count")
    p.add_argument("--out", required=True, help="output directory")

    p = add("finetune", cmd_finetune, "train a low-rank adapter on one source clip", plan=True)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.wahm)")
    p.add_argument("--source", default=None, help="source clip directory (default: the plan's one-shot source)")
    p.add_argument("--mode", default="full", choices=("full", "noalign", "novisdrop", "seqconcat", "chfusion"),
                   help="packing mode used for training chunks")
    p.add_argument("--rank", type=int, default=32, help="adapter rank")
    p.add_argument("--alpha", type=float, default=32.0, help="adapter scaling numerator")
    p.add_argument("--iters", type=int, default=1000, help="optimisation steps")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--out", required=True, help="adapter file (.wahl)")

    p = add("sample", cmd_sample, "generate the target frames of a packed sequence")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.wahm)")
    p.add_argument("--adapter", default=None, help="adapter file (.wahl)")
    p.add_argument("--packed", required=True, help="packed sequence directory")
    p.add_argument("--steps", type=int, default=6, help="Euler steps")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "score generated frames against a synthetic clip")
    p.add_argument("--generated", required=True, help="directory of generated_*.ppm frames")
    p.add_argument("--clip", required=True, help="ground-truth clip directory")
    p.add_argument("--warp", default=None, help="warp directory providing validity masks")
    p.add_argument("--targets", type=_int_list, default=None, help="target frame indices (default: evenly spaced)")
    p.add_argument("--history-frame", type=int, default=0, help="history frame whose camera anchors the trajectory")
    p.add_argument("--no-pose", action="store_true", help="skip photometric pose estimation")
    p.add_argument("--out", required=True, help="output directory")

    p = add("ablate", cmd_ablate, "run every planned (mode, regime) cell on the held-out clips", plan=True)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.wahm)")
    p.add_argument("--adapter-dir", default=None, help="directory of <mode>.wahl adapters for one-shot cells")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", required=True, help="output directory")

    p = add("sweep", cmd_sweep, "one-shot adapters from several candidate sources", plan=True)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.wahm)")
    p.add_argument("--sources", type=_str_list, default=None, help="comma-separated source ids (default: all)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", required=True, help="output directory")

    p = add("profile", cmd_profile, "time chunk generation under visible-token regimes", plan=True)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.wahm)")
    p.add_argument("--runs", type=int, default=5, help="repetitions per regime")
    p.add_argument("--out", required=True, help="output directory")

    p = add("report", cmd_report, "render result tables as CSV and SVG charts")
    p.add_argument("--results", required=True, help="directory holding result CSVs")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    from .camera import PoseError
    from .formats import FormatError

    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, FormatError, PoseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
