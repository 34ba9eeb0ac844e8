import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warphist.backbone.train import build_condition
from warphist.packing import (
    MODES, ROLE_CLEAN, ROLE_TARGET, ROLE_WARP, HistoryCorruption, PackingError, TokenGrid, assign_rope_indices,
    corrupt_history, load_packed, mask_to_support, pack_condition_stream, patchify, save_packed,
    select_visible_tokens, sequence_length_report, unpatchify, warp_grid,
)
from warphist.warp import build_warp_video

PATCH = (2, 2)


def _grids(seed, K=3, H=6, W=8, hist=2):
    rng = np.random.default_rng(seed)
    tg = patchify(rng.uniform(size=(K, H, W, 3)), *PATCH)
    valid = rng.uniform(size=(K, H, W)) < rng.uniform(0.2, 0.9)
    wg = warp_grid(rng.uniform(size=(K, H, W, 3)), valid, *PATCH)
    hg = patchify(rng.uniform(size=(hist, H, W, 3)), *PATCH) if hist else None
    return hg, wg, tg


def test_patchify_roundtrip(rng):
    x = rng.uniform(size=(3, 8, 12, 3))
    g = patchify(x, 4, 4)
    assert len(g) == 3 * 2 * 3 and g.dim == 48
    assert np.array_equal(unpatchify(g.tokens, 3, g.grid_hw, g.patch), x.astype(np.float32))
    assert g.coords[5].tolist() == [0, 1, 2]
    with pytest.raises(PackingError):
        patchify(x, 5, 4)


def test_mask_support_exact():
    m = np.zeros((1, 4, 4), bool)
    m[0, :2, :1] = True
    m[0, 3, 3] = True
    assert mask_to_support(m, 2, 2).tolist() == [0.5, 0.0, 0.0, 0.25]


@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
@settings(max_examples=60)
def test_selection_threshold_equivalence(seed, tau):
    _, wg, _ = _grids(seed)
    sel, kept = select_visible_tokens(wg, tau)
    want = [i for i in range(len(wg)) if wg.support[i] >= tau]
    assert kept.tolist() == want
    assert np.array_equal(sel.tokens, wg.tokens[want])


@given(st.integers(0, 10**6), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=60)
def test_tau_monotonic_nesting(seed, a, b):
    lo, hi = min(a, b), max(a, b)
    _, wg, tg = _grids(seed)
    k_lo = pack_condition_stream(None, wg, tg, "full", lo).kept_mask
    k_hi = pack_condition_stream(None, wg, tg, "full", hi).kept_mask
    assert not (k_hi & ~k_lo).any()


def test_select_rejects_bad_tau():
    _, wg, _ = _grids(0)
    with pytest.raises(PackingError):
        select_visible_tokens(wg, 1.5)


def _warp_target_pairs(p):
    t = {tuple(r) for r in p.rope_index[p.roles == ROLE_TARGET]}
    w = [tuple(r) for r in p.rope_index[p.roles == ROLE_WARP]]
    return t, w


# exhaustive over small grids: every K, history length, valid pattern seed and mode
@pytest.mark.parametrize("K", [1, 2, 4])
@pytest.mark.parametrize("hist", [0, 1, 3])
@pytest.mark.parametrize("seed", range(6))
def test_alignment_invariant(K, hist, seed):
    hg, wg, tg = _grids(seed, K=K, hist=hist)
    h_span = hist
    for mode in ("full", "novisdrop"):
        p = pack_condition_stream(hg, wg, tg, mode)
        t, w = _warp_target_pairs(p)
        src = wg if mode == "novisdrop" else wg.take(np.flatnonzero(wg.support >= 0.5))
        # each kept warp token carries exactly its target token's (t, r, c)
        assert w == [(h_span + f, r, c) for f, r, c in src.coords]
        assert set(w) <= t
    for mode in ("noalign", "seqconcat"):
        p = pack_condition_stream(hg, wg, tg, mode)
        t_idx = set(p.rope_index[p.roles == ROLE_TARGET][:, 0])
        w_idx = set(p.rope_index[p.roles == ROLE_WARP][:, 0])
        c_idx = set(p.rope_index[p.roles == ROLE_CLEAN][:, 0])
        assert not (t_idx & w_idx)
        assert not (c_idx & w_idx) and not (c_idx & t_idx)
    # clean history never moves between modes
    ps = [pack_condition_stream(hg, None if m == "text_only" else wg, tg, m) for m in MODES]
    for p in ps:
        assert np.array_equal(p.rope_index[p.roles == ROLE_CLEAN][:, 0],
                              np.repeat(np.arange(hist), np.prod(tg.grid_hw)))


def test_chfusion_doubles_target_width():
    hg, wg, tg = _grids(1)
    p = pack_condition_stream(hg, wg, tg, "chfusion")
    tgt = p.roles == ROLE_TARGET
    assert (p.widths[tgt] == 2 * tg.dim).all()
    assert (p.widths[~tgt] == tg.dim).all()
    assert not (p.roles == ROLE_WARP).any()
    assert np.array_equal(p.tokens[tgt, tg.dim:], wg.tokens)
    assert np.array_equal(p.target_tokens(), tg.tokens)


def test_mode_errors():
    hg, wg, tg = _grids(2)
    with pytest.raises(PackingError):
        pack_condition_stream(hg, wg, tg, "bogus")
    with pytest.raises(PackingError):
        pack_condition_stream(hg, wg, tg, "text_only")
    with pytest.raises(PackingError):
        pack_condition_stream(hg, None, tg, "full")
    with pytest.raises(PackingError):
        assign_rope_indices(wg, "target_aligned")
    with pytest.raises(PackingError):
        assign_rope_indices(wg, "ordinary_history", -1)
    other = TokenGrid(wg.tokens[:, :6], wg.coords, wg.support, wg.grid_hw, (1, 2))
    with pytest.raises(PackingError):
        pack_condition_stream(hg, other, tg, "full")


def test_text_only_has_no_warp():
    hg, _, tg = _grids(3)
    p = pack_condition_stream(hg, None, tg, "text_only")
    r = sequence_length_report(p)
    assert r["warp_history"] == 0 and r["total"] == len(hg) + len(tg)


def test_with_targets_keeps_fusion():
    hg, wg, tg = _grids(4)
    p = pack_condition_stream(hg, wg, tg, "chfusion")
    new = np.zeros_like(p.target_tokens())
    q = p.with_targets(new)
    assert not q.target_tokens().any()
    assert np.array_equal(q.tokens[q.roles == ROLE_TARGET, tg.dim:], wg.tokens)
    with pytest.raises(PackingError):
        p.with_targets(new[:, :3])


@pytest.mark.parametrize("mode", MODES)
def test_save_load_roundtrip(tmp_path, mode):
    hg, wg, tg = _grids(5)
    p = pack_condition_stream(hg, None if mode == "text_only" else wg, tg, mode)
    q = load_packed(save_packed(p, tmp_path / mode))
    assert np.array_equal(q.tokens, p.tokens) and np.array_equal(q.roles, p.roles)
    assert np.array_equal(q.rope_index, p.rope_index) and np.array_equal(q.kept_mask, p.kept_mask)
    assert q.to_manifest() == p.to_manifest()


def test_manifest_full_vs_noalign_differ_only_in_index(small_clip):
    tids = [2, 4, 6, 8]
    wv = build_warp_video(small_clip, small_clip.trajectory.subset(tids), 0)
    a = build_condition(small_clip, 0, tids, wv, "full", (4, 4)).to_manifest()
    b = build_condition(small_clip, 0, tids, wv, "noalign", (4, 4)).to_manifest()
    assert {k for k in a if a[k] != b[k]} == {"mode", "tokens"}
    assert len(a["tokens"]) == len(b["tokens"])
    diff = set()
    for x, y in zip(a["tokens"], b["tokens"]):
        diff |= {k for k in x if x[k] != y[k]}
    assert diff == {"t_idx"}
    json.dumps(a)


def test_corrupt_history_drop_and_mask(rng):
    x = rng.uniform(size=(5, 8, 8, 3))
    out, kept = corrupt_history(x, HistoryCorruption("drop_frames", 0.4, 1))
    assert len(kept) == 3 and np.array_equal(out, x[kept])
    out, kept = corrupt_history(x, HistoryCorruption("mask_patches", 0.25, 1), patch=(4, 4))
    assert kept.tolist() == list(range(5))
    zero_patches = (out.reshape(5, 2, 4, 2, 4, 3) == 0).all(axis=(2, 4, 5)).sum()
    assert zero_patches == 5
    out, _ = corrupt_history(x, HistoryCorruption())
    assert np.array_equal(out, x)
    with pytest.raises(ValueError):
        HistoryCorruption("blur")
    with pytest.raises(ValueError):
        HistoryCorruption("drop_frames", 2.0)
