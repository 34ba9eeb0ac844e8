import contextlib
import io
import json
from pathlib import Path

import pytest
from conftest import tiny_plan

from warphist.cli import build_parser, main

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["synth", "warp", "pack", "pretrain", "finetune", "sample", "eval", "ablate", "sweep", "profile",
            "report"]


def _help(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf), pytest.raises(SystemExit) as exc:
        build_parser().parse_args(argv + ["--help"])
    assert exc.value.code == 0
    return buf.getvalue()


@pytest.mark.parametrize("name", [None] + COMMANDS)
def test_help_matches_golden(name):
    text = _help([name] if name else [])
    assert text == (GOLDEN / f"help_{name or 'main'}.txt").read_text()


def test_usage_errors_exit_2(capsys):
    for argv in ([], ["nosuch"], ["synth"], ["synth", "--out", "x", "--clips", "many"],
                 ["warp", "--clip", "c", "--out", "o", "--targets", "1,a"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2, argv
    capsys.readouterr()


def test_domain_errors_exit_1(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--kinds", "spin"]) == 1
    assert "unknown trajectory kind" in capsys.readouterr().err
    assert main(["warp", "--clip", str(tmp_path / "missing"), "--out", str(tmp_path / "w")]) == 1
    assert capsys.readouterr().err.startswith("error: ")
    assert main(["report", "--results", str(tmp_path), "--out", str(tmp_path / "r")]) == 1
    assert "no result tables" in capsys.readouterr().err
    bad = tmp_path / "plan.json"
    bad.write_text(json.dumps({"schema_version": 1, "colour": "red"}))
    assert main(["pretrain", "--plan", str(bad), "--out", str(tmp_path / "p")]) == 1
    assert "unknown plan fields" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, capsys):
    t = tmp_path
    plan = tiny_plan(n_heldout=1, regimes=[["full", "zero_shot"]])
    plan.save(t / "plan.json")
    targets = ",".join(str(i) for i in plan.target_indices)

    assert main(["synth", "--seed", "4", "--clips", "2", "--frames", "9", "--size", "16",
                 "--kinds", "pan_right,truck_right", "--out", str(t / "data")]) == 0
    clip = t / "data" / "clip_0000"
    assert (clip / "clip.manifest").exists() and (t / "data" / "clip_0001").is_dir()
    assert (t / "data" / "resolved_config.json").exists()

    assert main(["warp", "--clip", str(clip), "--targets", targets, "--out", str(t / "warp")]) == 0
    assert main(["pack", "--clip", str(clip), "--warp", str(t / "warp"), "--patch", "4", "--targets", targets,
                 "--out", str(t / "packed")]) == 0
    counts = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert counts["warp_history"] > 0 and counts["noisy_target"] == 4 * 16

    assert main(["pretrain", "--plan", str(t / "plan.json"), "--out", str(t / "pre")]) == 0
    ckpt = str(t / "pre" / "model.wahm")
    assert main(["finetune", "--plan", str(t / "plan.json"), "--checkpoint", ckpt, "--rank", "2",
                 "--alpha", "2", "--iters", "2", "--out", str(t / "ad" / "full.wahl")]) == 0
    assert main(["sample", "--checkpoint", ckpt, "--adapter", str(t / "ad" / "full.wahl"),
                 "--packed", str(t / "packed"), "--out", str(t / "gen")]) == 0
    assert len(list((t / "gen").glob("generated_*.ppm"))) == 4

    capsys.readouterr()
    assert main(["eval", "--generated", str(t / "gen"), "--clip", str(clip), "--warp", str(t / "warp"),
                 "--targets", targets, "--no-pose", "--out", str(t / "ev")]) == 0
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 < row["psnr_db"] < 100
    assert (t / "ev" / "metrics.csv").exists()

    assert main(["ablate", "--plan", str(t / "plan.json"), "--checkpoint", ckpt, "--out", str(t / "abl")]) == 0
    assert (t / "abl" / "ablation_summary.csv").exists()
    assert main(["report", "--results", str(t / "abl"), "--out", str(t / "rep")]) == 0
    assert main(["report", "--results", str(t / "pre"), "--out", str(t / "rep")]) == 0
    for name in ("ablation_r_err_deg.svg", "ablation_table.csv", "loss_curve.svg"):
        assert (t / "rep" / name).exists()
    svg = (t / "rep" / "ablation_r_err_deg.svg").read_text()
    assert svg.startswith("<svg") and "full/zero_shot" in svg


def test_sample_is_seeded(tmp_path, tiny_model, small_clip):
    from warphist.backbone import build_condition
    from warphist.backbone.checkpoint import save_model
    from warphist.packing import save_packed
    from warphist.warp import build_warp_video

    tids = [2, 4, 6, 8]
    wv = build_warp_video(small_clip, small_clip.trajectory.subset(tids), 0)
    save_packed(build_condition(small_clip, 0, tids, wv, "full", (4, 4), 0.5), tmp_path / "packed")
    save_model(tiny_model, tmp_path / "m.wahm")
    outs = []
    for name, seed in (("a", "3"), ("b", "3"), ("c", "4")):
        assert main(["sample", "--checkpoint", str(tmp_path / "m.wahm"), "--packed", str(tmp_path / "packed"),
                     "--seed", seed, "--steps", "2", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "generated_0000.ppm").read_bytes())
    assert outs[0] == outs[1] != outs[2]
