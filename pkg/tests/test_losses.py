import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgai import losses as L
from fedgai.autodiff import ShapeError, Tensor
from fedgai.models import Discriminator


def _levels(rng, n=2, chans=(2, 3), size=4):
    return [Tensor(rng.normal(size=(n, c, size >> i, size >> i))) for i, c in enumerate(chans)]


def loop_gram(f):
    n, c, h, w = f.shape
    out = np.zeros((n, c, c))
    for i in range(n):
        for a in range(c):
            for b in range(c):
                out[i, a, b] = sum(f[i, a, y, x] * f[i, b, y, x] for y in range(h) for x in range(w)) / (c * h * w)
    return out


def test_gram_zero_and_hand_value():
    assert np.all(L.gram(Tensor(np.zeros((1, 3, 2, 2)))).data == 0)
    g = L.gram(Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1))).data[0]
    np.testing.assert_allclose(g, [[0.5, 1.0], [1.0, 2.0]])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gram_symmetric_psd(seed):
    f = np.random.default_rng(seed).normal(size=(2, 3, 2, 3))
    g = L.gram(Tensor(f)).data
    np.testing.assert_allclose(g, np.swapaxes(g, 1, 2))
    assert np.all(np.linalg.eigvalsh(g) >= -1e-12)


def test_gram_loss_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = _levels(rng), _levels(rng)
    expected = sum(np.mean((loop_gram(x.data) - loop_gram(y.data)) ** 2) for x, y in zip(a, b))
    np.testing.assert_allclose(L.gram_loss(a, b).item(), expected, rtol=1e-12)


def test_gram_loss_identity_and_positive():
    rng = np.random.default_rng(1)
    a = _levels(rng)
    assert L.gram_loss(a, a).item() == 0.0
    b = [a[0], Tensor(a[1].data + 0.1)]
    assert L.gram_loss(a, b).item() > 0


def test_gram_loss_level_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(ShapeError):
        L.gram_loss(_levels(rng), _levels(rng)[:1])


class ConstantD:
    def __init__(self, p):
        self.p = p

    def __call__(self, g):
        return Tensor(np.full((g.shape[0], 1), self.p))


def _feats(rng, n=3):
    return [Tensor(rng.normal(size=(n, c, 2, 2))) for c in (2, 2, 2, 3)]


def test_disc_loss_half_is_two_ln2():
    rng = np.random.default_rng(3)
    l_d = L.discriminator_loss(ConstantD(0.5), _feats(rng), _feats(rng)).item()
    assert math.isclose(l_d, 2 * math.log(2), rel_tol=1e-12)
    assert math.isclose(L.student_disc_loss(ConstantD(0.5), _feats(rng), _feats(rng)).item(), 2 * math.log(2))


def test_perfect_discriminator_hits_clamp_floor():
    loss = L.disc_loss_from_probs(Tensor([[1.0], [1.0]]), Tensor([[0.0], [0.0]])).item()
    assert 0 < loss < 1e-6
    worst = L.disc_loss_from_probs(Tensor([[0.0]]), Tensor([[1.0]])).item()
    assert math.isfinite(worst) and math.isclose(worst, -2 * math.log(1e-7), rel_tol=1e-6)


def test_adversarial_losses_match_straight_line_oracle():
    rng = np.random.default_rng(4)
    d = Discriminator(seed=4, channels=3, hidden=(5, 4))
    f_s, f_g, f_m = _feats(rng), _feats(rng), _feats(rng)

    def d_np(f):
        n, c = f.shape[:2]
        flat = f.reshape(n, c, -1)
        h = (flat @ flat.transpose(0, 2, 1) / flat[0].size).reshape(n, -1)
        for k, layer in enumerate(d.layers):
            h = h @ layer.weight.data.T + layer.bias.data
            if k + 1 < len(d.layers):
                h = np.where(h > 0, h, 0.2 * h)
        return np.clip(1 / (1 + np.exp(-h)), 1e-7, 1 - 1e-7)

    p_s, p_g = d_np(f_s[3].data), d_np(f_g[3].data)
    want_d = -np.mean(np.log(p_s)) - np.mean(np.log(1 - p_g))
    recon = sum(np.mean((a.data - b.data) ** 2) for a, b in zip(f_g, f_m))
    want_g = -np.mean(np.log(p_g)) + recon
    l_d, l_g, total = L.adversarial_losses(d, f_s, f_g, f_m)
    np.testing.assert_allclose([l_d.item(), l_g.item(), total.item()], [want_d, want_g, want_d + want_g], rtol=1e-10)


def test_reconstruction_zero_when_equal():
    f = _feats(np.random.default_rng(5))
    assert L.feature_distance(f, f).item() == 0.0


def test_clip_loss_cases():
    rng = np.random.default_rng(6)
    v = Tensor(rng.normal(size=(2, 4)))
    m = Tensor(rng.normal(size=(2, 4, 2, 2)))
    assert abs(L.clip_loss(v, v, m, m).item()) < 1e-12
    assert math.isclose(L.clip_loss(v, Tensor(-v.data), m, m).item(), 2.0, rel_tol=1e-12)


def test_clip_loss_matches_direct_formula():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    m1, m2 = rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(3, 2, 2, 2))
    cos = np.mean(np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)))
    want = 1 - cos + np.mean((m1 - m2) ** 2)
    got = L.clip_loss(Tensor(a), Tensor(b), Tensor(m1), Tensor(m2)).item()
    assert math.isclose(got, want, rel_tol=1e-12)


def test_clip_loss_zero_norm_is_maximal_dissimilarity(caplog):
    m = Tensor(np.zeros((1, 1, 2, 2)))
    with caplog.at_level(logging.WARNING):
        got = L.clip_loss(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))), m, m).item()
    assert got == 1.0
    assert "zero-norm" in caplog.text


def test_total_gan_loss_weights():
    assert L.total_gan_loss(1.0, 1.0, 1.0) == 76.0
    assert L.total_gan_loss(0.0, 3.5, 0.0) == 3.5
    t = L.total_gan_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0))
    assert t.item() == 76.0


@settings(max_examples=30)
@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_total_gan_loss_linear(v):
    a, b = v[:3], v[3:]
    lhs = L.total_gan_loss(*(x + y for x, y in zip(a, b)))
    rhs = L.total_gan_loss(*a) + L.total_gan_loss(*b)
    assert math.isclose(lhs, rhs, rel_tol=1e-9, abs_tol=1e-6)


def _inter(rng):
    return {n: Tensor(rng.normal(size=(2, c, 2, 2))) for n, c in zip(("f_C4", "f_C3", "f_C2", "f_C1"), (4, 3, 2, 2))}


def test_distill_local_cases():
    rng = np.random.default_rng(8)
    t = _inter(rng)
    assert L.distill_local(t, dict(t)).item() == 0.0
    s = dict(t)
    s["f_C2"] = Tensor(t["f_C2"].data + 0.3)
    assert math.isclose(L.distill_local(t, s).item(), 0.09, rel_tol=1e-12)
    s = _inter(rng)
    want = sum(np.mean((t[k].data - s[k].data) ** 2) for k in t)
    assert math.isclose(L.distill_local(t, s).item(), want, rel_tol=1e-12)


def test_distill_local_shape_mismatch():
    rng = np.random.default_rng(9)
    t, s = _inter(rng), _inter(rng)
    s["f_C1"] = Tensor(np.zeros((2, 5, 2, 2)))
    with pytest.raises(ShapeError, match="f_C1"):
        L.distill_local(t, s)


def test_distill_global_cases():
    rng = np.random.default_rng(10)
    a, b = _feats(rng), _feats(rng)
    assert L.distill_global(a, a).item() == 0.0
    shifted = [a[0], a[1], Tensor(a[2].data - 0.5), a[3]]
    assert math.isclose(L.distill_global(shifted, a).item(), 0.25, rel_tol=1e-12)
    want = sum(np.mean((x.data - y.data) ** 2) for x, y in zip(a, b))
    assert math.isclose(L.distill_global(a, b).item(), want, rel_tol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_distances_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = _levels(rng), _levels(rng)
    assert L.gram_loss(a, b).item() == pytest.approx(L.gram_loss(b, a).item(), rel=1e-12)
    assert L.distill_global(a, b).item() == pytest.approx(L.distill_global(b, a).item(), rel=1e-12)
    ta, tb = _inter(rng), _inter(rng)
    assert L.distill_local(ta, tb).item() == pytest.approx(L.distill_local(tb, ta).item(), rel=1e-12)


def test_kd_total():
    assert L.kd_total(1, 2, 3) == 6
    assert L.kd_total(0, 0, 0) == 0
    x = np.random.default_rng(11).random(3)
    assert L.kd_total(*x) == pytest.approx(x.sum())


def decorr_oracle(f):
    cm = np.corrcoef(f, rowvar=False)
    return np.sum(cm**2) / f.shape[1] ** 2


def test_feddecorr_identity_is_one_over_d():
    # Walsh patterns: zero-mean, unit-variance, mutually uncorrelated columns
    h = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], float)
    f = np.vstack([h, -h])
    assert math.isclose(L.feddecorr(Tensor(f)).item(), 0.25, rel_tol=1e-9)


def test_feddecorr_rank_one_is_one():
    col = np.random.default_rng(12).normal(size=(7, 1))
    assert math.isclose(L.feddecorr(Tensor(np.repeat(col, 5, axis=1))).item(), 1.0, rel_tol=1e-9)


def test_feddecorr_matches_correlation_oracle():
    f = np.random.default_rng(13).normal(size=(8, 4))
    assert math.isclose(L.feddecorr(Tensor(f)).item(), decorr_oracle(f), rel_tol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 12), d=st.integers(1, 8))
def test_feddecorr_bounds(seed, n, d):
    f = np.random.default_rng(seed).normal(size=(n, d))
    v = L.feddecorr(Tensor(f)).item()
    assert 1 / d - 1e-9 <= v <= 1 + 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_feddecorr_affine_invariant(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(6, 3))
    g = f * rng.uniform(0.1, 10, size=3) + rng.normal(size=3) * 5
    assert abs(L.feddecorr(Tensor(f)).item() - L.feddecorr(Tensor(g)).item()) < 1e-9


def test_feddecorr_needs_two_rows():
    with pytest.raises(ValueError, match="insufficient batch for decorrelation"):
        L.feddecorr(Tensor(np.ones((1, 4))))


def test_fed_total():
    assert L.fed_total(3.0, 7.0, 0.0) == 3.0
    assert L.fed_total(1.0, 2.0, 0.5) == 2.0
    assert L.fed_total(1.0, 2.0, 0.3) - 1.0 == pytest.approx(2 * (L.fed_total(1.0, 2.0, 0.15) - 1.0))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(1e-3, 1e3))
def test_losses_finite(seed, scale):
    rng = np.random.default_rng(seed)
    d = Discriminator(seed=seed % 1000, channels=3, hidden=(4,))
    f_s = [Tensor(x.data * scale) for x in _feats(rng)]
    f_g = [Tensor(x.data * scale) for x in _feats(rng)]
    for v in L.adversarial_losses(d, f_s, f_g, f_s):
        assert math.isfinite(v.item())


def test_loss_weights_nonnegative():
    with pytest.raises(ValueError):
        L.LossWeights(gamma_gram=-1)
    w = L.LossWeights()
    assert (w.gamma_gram, w.gamma_adv, w.gamma_clip, w.beta) == (50.0, 1.0, 25.0, 0.1)
