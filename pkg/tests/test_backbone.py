import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from warphist.backbone import (
    FinetuneConfig, LoraAdapter, ModelConfig, ToyModel, TrainConfig, build_condition, lora_finetune,
    lora_mount, lora_unmount, merge_into, merged_weight, oneshot_windows, parameter_checksum, rope_rotate,
    sample_chunk, train,
)
from warphist.backbone.checkpoint import load_adapter, load_model, save_adapter, save_model
from warphist.backbone.model import rope_frequencies
from warphist.backbone.train import PretrainSampler, flow_pair
from warphist.formats import FormatError
from warphist.warp import build_warp_video

MICRO = dict(dim=16, heads=2, blocks=2, patch=(4, 4), image_size=(8, 8), target_frames=2,
             max_history_frames=2, rope_base=100.0)


def micro_model(seed=0, **kw):
    torch.manual_seed(seed)
    return ToyModel(ModelConfig(**{**MICRO, **kw}))


# --- RoPE -------------------------------------------------------------------

CFG = ModelConfig(dim=96, heads=4, rope_base=100.0)
idx3 = st.tuples(*[st.integers(-50, 50)] * 3)


def test_rope_frequencies_oracle():
    axes, freqs = rope_frequencies(CFG)
    n_t, n_r, n_c = CFG.rope_pairs()
    assert (n_t, n_r, n_c) == (6, 3, 3)
    want = [100.0 ** (-2.0 * k / (2 * n)) for n in (n_t, n_r, n_c) for k in range(n)]
    assert np.array_equal(freqs, np.array(want))
    assert axes.tolist() == [0] * 6 + [1] * 3 + [2] * 3


def test_rope_pair_rotation_oracle():
    v = np.arange(1, CFG.head_dim + 1, dtype=np.float64)
    out = rope_rotate(v, (3, 0, 0), CFG)
    th = 3.0  # first t pair has frequency 1
    assert out[0] == pytest.approx(v[0] * math.cos(th) - v[1] * math.sin(th), abs=1e-12)
    assert out[1] == pytest.approx(v[0] * math.sin(th) + v[1] * math.cos(th), abs=1e-12)
    # r/c indices leave t pairs alone
    assert np.allclose(rope_rotate(v, (0, 5, 7), CFG)[:12], v[:12], atol=0)
    with pytest.raises(ValueError):
        rope_rotate(v[:4], (0, 0, 0), CFG)


@given(st.integers(0, 10**6), idx3)
def test_rope_isometry(seed, i):
    v = np.random.default_rng(seed).normal(size=CFG.head_dim)
    assert abs(np.linalg.norm(rope_rotate(v, i, CFG)) - np.linalg.norm(v)) <= 1e-6


@given(st.integers(0, 10**6), idx3, idx3, st.integers(0, 2), st.integers(-40, 40))
@settings(max_examples=200)
def test_rope_relative_shift_invariance(seed, i, j, axis, s):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(2, CFG.head_dim))
    base = rope_rotate(q, i, CFG) @ rope_rotate(k, j, CFG)
    i2, j2 = list(i), list(j)
    i2[axis] += s
    j2[axis] += s
    shifted = rope_rotate(q, i2, CFG) @ rope_rotate(k, j2, CFG)
    assert abs(shifted - base) <= 1e-5


def test_model_output_invariant_to_global_index_shift():
    m = micro_model().double()
    g = torch.Generator().manual_seed(0)
    xh = torch.rand(1, 8, 48, dtype=torch.float64, generator=g)
    xt = torch.randn(1, 8, 48, dtype=torch.float64, generator=g)
    rh = np.array([[f, r, c] for f in range(2) for r in range(2) for c in range(2)])
    rt = rh + [2, 0, 0]
    tau = torch.full((1,), 0.3, dtype=torch.float64)
    a = m.run(xh, rh, xt, rt, tau)
    for shift in ([5, 0, 0], [0, 3, 0], [0, 0, -4]):
        b = m.run(xh, rh + shift, xt, rt + shift, tau)
        assert torch.allclose(a, b, atol=1e-10)


# --- LoRA -------------------------------------------------------------------

def _inputs(m, seed=1):
    g = torch.Generator().manual_seed(seed)
    xh = torch.rand(2, 8, 48, generator=g)
    xt = torch.randn(2, 8, 48, generator=g)
    rh = np.array([[f, r, c] for f in range(2) for r in range(2) for c in range(2)])
    return xh, rh, xt, rh + [2, 0, 0], torch.tensor([0.2, 0.7])


def test_zero_init_adapter_is_identity_bit_exact():
    m = micro_model()
    args = _inputs(m)
    with torch.no_grad():
        ref = m.run(*args)
        ad = LoraAdapter.for_model(m, rank=32, alpha=32.0, seed=5)
        assert all(not b.any() for b in ad.B.values())
        lora_mount(m, ad)
        out = m.run(*args)
    assert torch.equal(ref, out)


def test_adapter_config_and_shapes():
    m = micro_model()
    ad = LoraAdapter.for_model(m)
    assert ad.rank == 32 and ad.alpha == 32.0 and ad.scaling == 1.0
    assert len(ad.names) == 4 * m.cfg.blocks
    A, B = ad.pair("blocks.0.q")
    assert A.shape == (32, 16) and B.shape == (16, 32)
    with pytest.raises(ValueError):
        LoraAdapter({"x": (4, 4)}, rank=0)
    with pytest.raises(ValueError):
        lora_mount(m, LoraAdapter({"x": (4, 4)}))
    with pytest.raises(ValueError):
        m.lora_layers()["blocks.0.q"].mount(torch.zeros(2, 3), torch.zeros(16, 2), 1.0)


def _randomize(ad, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for b in ad.B.values():
            b.copy_(torch.randn(b.shape, generator=g) * 0.05)


@pytest.mark.parametrize("rank,alpha", [(32, 32.0), (4, 8.0), (1, 0.5)])
def test_merge_equivalence(rank, alpha):
    m = micro_model()
    args = _inputs(m)
    ad = LoraAdapter.for_model(m, rank, alpha, seed=2)
    _randomize(ad, 3)
    lora_mount(m, ad)
    with torch.no_grad():
        mounted = m.run(*args)
        layer = m.lora_layers()["blocks.1.v"]
        want = layer.base.weight + (alpha / rank) * layer.lora_B @ layer.lora_A
        assert torch.allclose(merged_weight(layer), want, atol=1e-7)
        merge_into(m)
        assert not any(l.mounted for l in m.lora_layers().values())
        merged = m.run(*args)
    assert (mounted - merged).abs().max().item() <= 1e-5


def test_finite_difference_gradients():
    m = micro_model().double()
    for p in m.parameters():
        p.requires_grad_(False)
    ad = LoraAdapter.for_model(m, rank=4, alpha=8.0, seed=4).double()
    _randomize(ad, 5)
    lora_mount(m, ad)
    xh, rh, xt, rt, tau = _inputs(m)
    xh, xt, tau = xh.double(), xt.double(), tau.double()
    target = torch.randn(xt.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)

    def loss():
        return ((m.run(xh, rh, xt, rt, tau) - target) ** 2).mean()

    l0 = loss()
    l0.backward()
    rng = np.random.default_rng(0)
    checked = 0
    for name in ("blocks_0_q", "blocks_1_o", "blocks_0_v"):
        for P in (ad.A[name], ad.B[name]):
            for _ in range(4):
                i = tuple(int(rng.integers(n)) for n in P.shape)
                h = 1e-6
                with torch.no_grad():
                    old = P[i].item()
                    P[i] = old + h
                    lp = loss().item()
                    P[i] = old - h
                    lm = loss().item()
                    P[i] = old
                fd = (lp - lm) / (2 * h)
                an = P.grad[i].item()
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8), (name, i, fd, an)
                checked += 1
    assert checked == 24


def test_unmounted_model_ignores_adapter():
    m = micro_model()
    args = _inputs(m)
    ad = LoraAdapter.for_model(m, seed=1)
    _randomize(ad, 1)
    with torch.no_grad():
        ref = m.run(*args)
        lora_mount(m, ad)
        assert not torch.equal(m.run(*args), ref)
        lora_unmount(m)
        assert torch.equal(m.run(*args), ref)


def test_adapter_not_in_model_state_dict():
    m = micro_model()
    before = parameter_checksum(m)
    keys = set(m.state_dict())
    lora_mount(m, LoraAdapter.for_model(m))
    assert set(m.state_dict()) == keys
    assert parameter_checksum(m) == before


@pytest.fixture(scope="module")
def micro_clip():
    from warphist.camera import Intrinsics, make_primitive_trajectory
    from warphist.synth import generate_scene, make_clip

    k = Intrinsics.from_fov(8, 8)
    return make_clip(generate_scene(2), make_primitive_trajectory("pan_left", 13, 8.0, k))


def _sequences(clip, mode):
    seqs = []
    for start, tids in oneshot_windows(clip, 2, 2, 4):
        wv = build_warp_video(clip, clip.trajectory.subset(tids), start)
        seqs.append(build_condition(clip, start, tids, wv, mode, (4, 4)))
    return seqs


@pytest.mark.parametrize("mode", ["full", "seqconcat", "chfusion"])
def test_finetune_keeps_base_frozen(micro_clip, mode):
    m = micro_model()
    frozen = [n for n in m.state_dict() if not n.startswith("fusion_embed.")]
    before = parameter_checksum(m, frozen)
    full_before = parameter_checksum(m)
    ad, curve = lora_finetune(m, _sequences(micro_clip, mode), FinetuneConfig(iters=6, batch=2, mode=mode))
    lora_unmount(m)
    assert len(curve) == 6 and all(math.isfinite(v) for v in curve)
    assert parameter_checksum(m, frozen) == before
    assert (parameter_checksum(m) == full_before) == (mode != "chfusion")
    assert any(b.abs().sum() > 0 for b in ad.B.values())
    assert all(p.requires_grad is False for p in m.parameters())


def test_finetune_is_deterministic(micro_clip):
    outs = []
    for _ in range(2):
        m = micro_model()
        ad, curve = lora_finetune(m, _sequences(micro_clip, "full"), FinetuneConfig(iters=5, batch=2, seed=3))
        outs.append((curve, [b.detach().clone() for b in ad.B.values()]))
    assert outs[0][0] == outs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(outs[0][1], outs[1][1]))


def test_finetune_needs_sequences():
    with pytest.raises(ValueError):
        lora_finetune(micro_model(), [], FinetuneConfig())


def test_oneshot_windows(micro_clip):
    w = oneshot_windows(micro_clip, 2, 2, 4)
    assert w == [(0, [4, 8]), (2, [6, 10]), (4, [8, 12])]
    with pytest.raises(ValueError):
        oneshot_windows(micro_clip, 8, 2, 4)


# --- flow matching and sampling ----------------------------------------------

def test_flow_pair_endpoints():
    x0 = torch.randn(3, 4, 5)
    eps = torch.randn(3, 4, 5)
    xt, v = flow_pair(x0, eps, torch.tensor([0.0, 1.0, 0.25]))
    assert torch.equal(xt[0], eps[0]) and torch.equal(xt[1], x0[1])
    assert torch.allclose(xt[2], 0.75 * eps[2] + 0.25 * x0[2])
    assert torch.equal(v, x0 - eps)
    # integrating the exact velocity from noise lands on the data
    assert torch.allclose(eps + v, x0)


def test_sampler_exact_eval_count_and_range(micro_clip):
    m = micro_model()
    packed = _sequences(micro_clip, "full")[0]
    n0 = m.n_evals
    out = sample_chunk(m, packed, steps=4, seed=1)
    assert m.n_evals - n0 == 4
    assert out.shape == (2, 8, 8, 3) and out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, sample_chunk(m, packed, steps=4, seed=1))
    with pytest.raises(ValueError):
        sample_chunk(m, packed, steps=0)


def test_sample_ignores_target_contents(micro_clip):
    m = micro_model()
    packed = _sequences(micro_clip, "noalign")[0]
    other = packed.with_targets(np.zeros_like(packed.target_tokens()))
    assert np.array_equal(sample_chunk(m, packed, 3, 0), sample_chunk(m, other, 3, 0))


def test_max_tokens_enforced():
    m = micro_model(max_tokens=10)
    xh, rh, xt, rt, tau = _inputs(m)
    with pytest.raises(ValueError, match="exceeds"):
        m.run(xh, rh, xt, rt, tau)


def test_pretrain_sampler_shapes(micro_clip):
    mc = ModelConfig(**MICRO)
    s = PretrainSampler([micro_clip], mc, TrainConfig(batch=3))
    xh, hrope, x0, trope = s.batch(np.random.default_rng(0))
    assert x0.shape == (3, 8, 48) and float(x0.min()) >= -1 and float(x0.max()) <= 1
    h = xh.shape[1] // 4 if xh.shape[1] else 0
    assert trope[:, 0].min() >= 1
    assert xh.shape[0] == 3 and hrope.shape[0] == xh.shape[1]
    assert h <= mc.max_history_frames


def test_train_reduces_loss_and_is_deterministic(micro_clip):
    curves = []
    for _ in range(2):
        torch.manual_seed(0)
        m = ToyModel(ModelConfig(**MICRO))
        curves.append(train(m, [micro_clip], TrainConfig(iters=60, batch=4, warmup=5, lr=3e-3)))
    assert curves[0] == curves[1]
    assert np.mean(curves[0][-10:]) < np.mean(curves[0][:10])


# --- checkpoints ----------------------------------------------------------------

def test_model_checkpoint_roundtrip(tmp_path):
    m = micro_model(3)
    save_model(m, tmp_path / "m.wahm")
    back = load_model(tmp_path / "m.wahm")
    assert back.cfg == m.cfg
    assert parameter_checksum(back) == parameter_checksum(m)


def test_adapter_checkpoint_roundtrip(tmp_path):
    m = micro_model()
    ad = LoraAdapter.for_model(m, 4, 8.0, seed=1)
    _randomize(ad, 2)
    save_adapter(ad, tmp_path / "a.wahl")
    back = load_adapter(tmp_path / "a.wahl")
    assert back.rank == 4 and back.alpha == 8.0 and back.names == ad.names
    for k in ad.A:
        assert torch.equal(back.A[k], ad.A[k]) and torch.equal(back.B[k], ad.B[k])


def test_checkpoint_errors(tmp_path):
    m = micro_model()
    save_model(m, tmp_path / "m.wahm")
    raw = (tmp_path / "m.wahm").read_bytes()
    for name, data, msg in (("magic", b"XXXX" + raw[4:], "magic"), ("trunc", raw[:-3], "needs"),
                            ("trail", raw + b"\0", "trailing"), ("head", raw[:10], "truncated")):
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError, match=msg):
            load_model(tmp_path / name)
    with pytest.raises(FormatError, match="magic"):
        load_adapter(tmp_path / "m.wahm")


def test_model_config_strict():
    d = ModelConfig().__dict__.copy()
    d.pop("dim")
    with pytest.raises(ValueError, match="missing"):
        ModelConfig.from_dict(d)
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({**ModelConfig().__dict__, "extra": 1})
