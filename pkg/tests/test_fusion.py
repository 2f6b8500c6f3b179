import math

import numpy as np
import pytest

from stare import nn_core as nn
from stare.fusion import (
    AlignmentError,
    FusionConfig,
    FusionError,
    co_attention,
    combine_and_pool,
    cross_attention,
    fuse,
    fuse_backward,
    fuse_binocular,
    init_fusion,
    n_blocks,
    pool,
)

D = 6


def _inputs(rng, K=2, B=3, L=5):
    H = rng.normal(size=(K, B, L, D))
    mask = np.ones((B, L), bool)
    mask[0, 3:] = False
    mask[2, 1:] = False
    return H, mask


def _identity_params(prefixes):
    return {p + w: np.eye(D) for p in prefixes for w in ("wq", "wk", "wv")}


def softmax_oracle(Q, K, V, mask, scale):
    """Independent reference: per-query python softmax over valid keys."""
    out = np.zeros((Q.shape[0], V.shape[1]))
    valid = [j for j in range(K.shape[0]) if mask[j]]
    for i in range(Q.shape[0]):
        s = [float(Q[i] @ K[j]) * scale for j in valid]
        top = max(s)
        w = [math.exp(v - top) for v in s]
        for wj, j in zip(w, valid):
            out[i] += wj / sum(w) * V[j]
    return out


@pytest.mark.parametrize("mode,blocks", [("none", 2), ("cross_only", 1), ("co_only", 2), ("cross_and_co", 3)])
def test_dimension_accounting_xy(rng, mode, blocks):
    cfg = FusionConfig(mode=mode)
    H, mask = _inputs(rng)
    Z, _ = fuse(init_fusion(cfg, D, rng), H, mask, cfg)
    assert n_blocks(cfg, 2) == blocks and Z.shape == (3, blocks * D)


def test_dimension_accounting_binocular(rng):
    cfg = FusionConfig(channel_grouping="left_right_eyes")
    H, mask = _inputs(rng, K=4)
    Z, _ = fuse_binocular(init_fusion(cfg, D, rng), H, mask, cfg)
    assert Z.shape == (3, 6 * D)


def test_parameter_nesting(rng):
    count = {m: sum(v.size for v in init_fusion(FusionConfig(mode=m), D, rng).values())
             for m in ("none", "cross_only", "co_only", "cross_and_co")}
    assert count["none"] == 0
    assert count["cross_and_co"] == count["cross_only"] + count["co_only"] == 9 * D * D


def test_mode_none_is_pooled_channels(rng):
    cfg = FusionConfig(mode="none")
    H, mask = _inputs(rng)
    Z, _ = fuse({}, H, mask, cfg)
    m = mask[..., None]
    expected = np.concatenate([(H[k] * m).sum(1) / m.sum(1) for k in range(2)], axis=-1)
    assert np.allclose(Z, expected)


def test_single_step_co_attention_returns_partner_value():
    cfg = FusionConfig()
    rng = np.random.default_rng(0)
    Ha, Hb = rng.normal(size=(1, 1, D)), rng.normal(size=(1, 1, D))
    (za, zb), _ = co_attention(_identity_params(["c.a.", "c.b."]), "c.", Ha, Hb, np.ones((1, 1), bool), cfg)
    assert np.allclose(za, Hb) and np.allclose(zb, Ha)


def test_co_attention_swap_symmetry(rng):
    cfg = FusionConfig()
    p = init_fusion(cfg, D, rng)
    H, mask = _inputs(rng)
    (za, zb), _ = co_attention(p, "fus.co.0.", H[0], H[1], mask, cfg)
    swapped = {"fus.co.0.a." + w: p["fus.co.0.b." + w] for w in ("wq", "wk", "wv")}
    swapped.update({"fus.co.0.b." + w: p["fus.co.0.a." + w] for w in ("wq", "wk", "wv")})
    (sa, sb), _ = co_attention(swapped, "fus.co.0.", H[1], H[0], mask, cfg)
    assert np.allclose(sa, zb) and np.allclose(sb, za)


def test_co_attention_matches_oracle(rng):
    cfg = FusionConfig()
    p = init_fusion(cfg, D, rng)
    H, mask = _inputs(rng)
    (za, _), _ = co_attention(p, "fus.co.0.", H[0], H[1], mask, cfg)
    pre = "fus.co.0.a."
    for b in range(3):
        ref = softmax_oracle(H[0, b] @ p[pre + "wq"], H[1, b] @ p[pre + "wk"], H[1, b] @ p[pre + "wv"],
                             mask[b], 1 / math.sqrt(D))
        assert np.allclose(za[b], ref, atol=1e-12)


def test_cross_attention_constant_keys(rng):
    cfg = FusionConfig()
    p = init_fusion(cfg, D, rng)
    v = rng.normal(size=D)
    Hq = rng.normal(size=(2, 4, D))
    Hkv = np.broadcast_to(v, (2, 4, D)).copy()
    z, _ = cross_attention(p, "fus.cross.0.", Hq, Hkv, np.ones((2, 4), bool), cfg)
    assert np.allclose(z, v @ p["fus.cross.0.wv"])


def test_direction_flip_mirrors(rng):
    H, mask = _inputs(rng)
    fwd = FusionConfig(mode="cross_only", direction="ch1_queries_ch2")
    back = FusionConfig(mode="cross_only", direction="ch2_queries_ch1")
    p = init_fusion(fwd, D, rng)
    Z1, _ = fuse(p, H, mask, fwd)
    Z2, _ = fuse(p, H[::-1].copy(), mask, back)
    assert np.allclose(Z1, Z2)
    Z3, _ = fuse(p, H, mask, back)
    assert not np.allclose(Z1, Z3)


def test_default_directions():
    assert FusionConfig().resolved_direction == "ch1_queries_ch2"
    assert FusionConfig(channel_grouping="left_right_eyes").resolved_direction == "ch2_queries_ch1"


def test_binocular_identical_eyes_equal_outputs(rng):
    cfg = FusionConfig(mode="co_only", channel_grouping="left_right_eyes")
    p = init_fusion(cfg, D, rng)
    for i in range(2):
        for w in ("wq", "wk", "wv"):
            p[f"fus.co.{i}.b.{w}"] = p[f"fus.co.{i}.a.{w}"].copy()
    H, mask = _inputs(rng, K=2)
    H4 = np.stack([H[0], H[1], H[0], H[1]])
    Z, _ = fuse(p, H4, mask, cfg)
    blocks = np.split(Z, 4, axis=-1)
    assert np.allclose(blocks[0], blocks[1]) and np.allclose(blocks[2], blocks[3])


def test_binocular_dominant_eye_matters(rng):
    H, mask = _inputs(rng, K=4)
    right = FusionConfig(channel_grouping="left_right_eyes", direction="ch2_queries_ch1")
    left = FusionConfig(channel_grouping="left_right_eyes", direction="ch1_queries_ch2")
    p = init_fusion(right, D, rng)
    assert not np.allclose(fuse(p, H, mask, right)[0], fuse(p, H, mask, left)[0])


def test_grouping_errors(rng):
    H, mask = _inputs(rng)
    with pytest.raises(FusionError):
        fuse_binocular({}, H, mask, FusionConfig(channel_grouping="left_right_eyes"))
    with pytest.raises(FusionError):
        fuse({}, H[:1], mask, FusionConfig(mode="none"))
    with pytest.raises(FusionError):
        FusionConfig(mode="gated").validate()
    with pytest.raises(FusionError):
        init_fusion(FusionConfig(n_heads=4), D, rng)


def test_constant_in_time_mean_pool():
    c = np.arange(D, dtype=float)
    X = np.broadcast_to(c, (2, 5, D)).copy()
    mask = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1]], bool)
    Z, _ = pool(X, mask)
    assert np.allclose(Z, c)


def test_last_pool_picks_final_valid_step(rng):
    X = rng.normal(size=(2, 5, D))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    Z, _ = pool(X, mask, "last")
    assert np.array_equal(Z, X[[0, 1], [2, 4]])


def test_alignment_error(rng):
    with pytest.raises(AlignmentError):
        combine_and_pool([rng.normal(size=(2, 4, D)), rng.normal(size=(2, 5, D))], np.ones((2, 4), bool))
    with pytest.raises(AlignmentError):
        combine_and_pool([rng.normal(size=(2, 4, D))], np.ones((2, 5), bool))


def test_pad_positions_have_zero_weight(rng):
    cfg = FusionConfig()
    p = init_fusion(cfg, D, rng)
    H, mask = _inputs(rng)
    Z1, _ = fuse(p, H, mask, cfg)
    H2 = H.copy()
    H2[:, ~mask] = rng.normal(size=H2[:, ~mask].shape) * 100
    Z2, _ = fuse(p, H2, mask, cfg)
    assert np.allclose(Z1, Z2, atol=1e-12)


@pytest.mark.parametrize("cfg", [
    FusionConfig(mode="cross_and_co"),
    FusionConfig(mode="cross_and_co", n_heads=2, pooling="last"),
    FusionConfig(mode="co_only", co_style="self"),
    FusionConfig(mode="none"),
    FusionConfig(mode="cross_and_co", channel_grouping="left_right_eyes"),
], ids=["xy", "heads-last", "self", "none", "binocular"])
def test_fusion_gradients(cfg):
    rng = np.random.default_rng(3)
    K = 4 if cfg.channel_grouping == "left_right_eyes" else 2
    H0, mask = _inputs(rng, K=K)
    p = init_fusion(cfg, D, rng)
    p["H"] = H0
    target = rng.normal(size=(3, n_blocks(cfg, K) * D))

    def f():
        Z, cache = fuse(p, p["H"], mask, cfg)
        loss, dZ = nn.mse_with_grad(Z, target)
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["H"] = fuse_backward(p, cache, dZ, grads, p["H"].shape, cfg)
        return loss, grads

    assert nn.grad_check(f, p, n_coords=150) < 1e-4
