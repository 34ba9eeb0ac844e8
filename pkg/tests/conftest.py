import numpy as np
import pytest

from warphist.camera import Intrinsics, make_primitive_trajectory
from warphist.synth import generate_scene, make_clip


@pytest.fixture
def k16():
    return Intrinsics.from_fov(16, 16)


@pytest.fixture
def k32():
    return Intrinsics.from_fov(32, 32)


@pytest.fixture(scope="session")
def small_clip():
    K = Intrinsics.from_fov(16, 16)
    tr = make_primitive_trajectory("pan_right", 9, 10.0, K)
    return make_clip(generate_scene(3), tr, "small")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_plan(**overrides):
    """A plan small enough to pretrain, finetune and evaluate in seconds."""
    from dataclasses import asdict

    from warphist.backbone import FinetuneConfig, ModelConfig, TrainConfig
    from warphist.harness import ExperimentPlan

    mc = ModelConfig(dim=16, heads=2, blocks=1, patch=(4, 4), rope_base=100.0, image_size=(16, 16),
                     target_frames=4, max_history_frames=2, sample_steps=2)
    base = dict(image_size=(16, 16), clip_frames=9, n_train=6, n_heldout=3, model=asdict(mc),
                train=asdict(TrainConfig(iters=4, batch=2, warmup=1)),
                finetune=asdict(FinetuneConfig(iters=3, rank=2, alpha=2.0, batch=2)),
                regimes=[["text_only", "zero_shot"], ["full", "zero_shot"], ["noalign", "zero_shot"],
                         ["full", "one_shot"]],
                profile_runs=1)
    base.update(overrides)
    return ExperimentPlan(**base)


@pytest.fixture(scope="session")
def tiny():
    return tiny_plan()


@pytest.fixture(scope="session")
def tiny_model(tiny):
    from warphist.harness import run_pretrain

    model, _, _ = run_pretrain(tiny)
    return model


# --- acceptance criterion reporting ------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = m.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= rep.passed
    entry["notes"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
