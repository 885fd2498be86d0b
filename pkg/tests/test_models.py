import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgai import autodiff as ad
from fedgai.autodiff import ShapeError, Tensor
from fedgai.losses import gram
from fedgai.metrics import count_macs
from fedgai.models import (
    Discriminator,
    Generator,
    PerceptualEncoder,
    StyleStats,
    adain_sd,
    compute_style_stats,
    discriminate,
    generate,
)
from fedgai.params import export_params


@pytest.fixture(scope="module")
def encoder():
    return PerceptualEncoder(seed=0)


def test_level_shapes(encoder):
    feats = encoder.encode(Tensor(np.random.default_rng(0).random((2, 3, 32, 32))))
    assert [f.shape for f in feats] == [(2, 8, 32, 32), (2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4)]


def test_zero_image_gives_zero_features(encoder):
    for f in encoder.encode(Tensor(np.zeros((1, 3, 16, 16)))):
        assert np.all(f.data == 0)


def test_grayscale_is_replicated(encoder):
    g = np.random.default_rng(1).random((2, 1, 16, 16))
    a = encoder.encode(Tensor(g))
    b = encoder.encode(Tensor(np.repeat(g, 3, axis=1)))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_encode_deterministic_and_seeded():
    x = Tensor(np.random.default_rng(2).random((1, 3, 16, 16)))
    a = PerceptualEncoder(seed=5).encode(x)
    b = PerceptualEncoder(seed=5).encode(x)
    c = PerceptualEncoder(seed=6).encode(x)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.data, fb.data)
    assert not np.array_equal(a[0].data, c[0].data)


def test_encode_rejects_indivisible_size(encoder):
    with pytest.raises(ShapeError, match="divisible by 8"):
        encoder.encode(Tensor(np.zeros((1, 3, 12, 12))))


def test_encoder_params_frozen(encoder):
    assert all(not t.requires_grad for _, _, t in encoder.named_params())


def test_style_stats_two_values():
    levels = [np.array([0.0, 2.0]).reshape(2, 1, 1, 1)]
    stats = compute_style_stats(None, levels)
    np.testing.assert_allclose(stats.means[0], [1.0])
    np.testing.assert_allclose(stats.stds[0], [1.0])


def test_style_stats_constant_is_eps_floored():
    stats = compute_style_stats(None, [np.full((3, 2, 2, 2), 4.0)], eps=1e-8)
    np.testing.assert_allclose(stats.means[0], 4.0)
    np.testing.assert_allclose(stats.stds[0], 1e-8)


def test_style_stats_permutation_invariant(encoder):
    sk = np.random.default_rng(3).random((6, 1, 16, 16)) * 2 - 1
    a = compute_style_stats(encoder, sk)
    b = compute_style_stats(encoder, sk[::-1].copy())
    for x, y in zip(a.means + a.stds, b.means + b.stds):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)


def test_style_stats_empty_set(encoder):
    with pytest.raises(ValueError, match="no sketches"):
        compute_style_stats(encoder, np.zeros((0, 1, 16, 16)))


def _stats(mu, sd):
    return StyleStats(means=[np.asarray(mu, float)], stds=[np.asarray(sd, float)])


def test_adain_standardized_content_to_target():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 2, 3, 3))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = adain_sd([Tensor(x)], _stats([2.0, 2.0], [3.0, 3.0]))[0].data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 2.0, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 3.0, atol=1e-6)


def test_adain_own_stats_is_identity():
    x = np.random.default_rng(5).normal(size=(3, 2, 4, 4)) * 2 + 1
    stats = compute_style_stats(None, [x])
    out = adain_sd([Tensor(x)], stats)[0].data
    assert np.all(np.abs(out - x) <= 1e-6 * (1 + np.abs(x)))


def test_adain_hand_table():
    # one sample, one channel, 2x2 values [1, 3, 5, 7]: mean 4, population std sqrt(5)
    x = np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 1, 2, 2)
    eps = 1e-8
    out = adain_sd([Tensor(x)], _stats([10.0], [2.0]), eps=eps)[0].data.reshape(-1)
    z = np.array([-3.0, -1.0, 1.0, 3.0]) / (np.sqrt(5.0) + eps)
    np.testing.assert_allclose(out, 2.0 * z + 10.0, rtol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_adain_idempotent(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 2, 3, 3)) * rng.uniform(0.5, 5) + rng.normal()
    stats = _stats(rng.normal(size=2), rng.uniform(0.2, 3, size=2))
    once = adain_sd([Tensor(x)], stats)[0].data
    twice = adain_sd([Tensor(once)], stats)[0].data
    assert np.max(np.abs(twice - once)) < 1e-6 * np.max(np.abs(once))


def test_adain_channel_mismatch():
    with pytest.raises(ShapeError):
        adain_sd([Tensor(np.zeros((1, 3, 2, 2)))], _stats([0.0, 0.0], [1.0, 1.0]))


def _mixed(rng, n=2, res=16):
    return [Tensor(rng.normal(size=(n, c, res >> i, res >> i))) for i, c in enumerate((8, 16, 32, 64))]


def test_generator_output_range_and_shape():
    rng = np.random.default_rng(6)
    sketch, _ = generate(Generator(seed=0), [Tensor(m.data * 20) for m in _mixed(rng)], training=True)
    assert sketch.shape == (2, 1, 16, 16)
    assert np.max(np.abs(sketch.data)) <= 1.0


def test_teacher_student_intermediate_parity():
    mixed = _mixed(np.random.default_rng(7))
    _, t = generate(Generator(seed=0), mixed)
    _, s = generate(Generator(seed=0, student=True), mixed)
    assert list(t) == list(s) == list(Generator.INTERMEDIATES)
    assert {k: v.shape for k, v in t.items()} == {k: v.shape for k, v in s.items()}


def test_student_macs_below_sixty_percent():
    teacher, student = count_macs(Generator(seed=0), 32), count_macs(Generator(seed=0, student=True), 32)
    assert student <= 0.6 * teacher


def test_generator_rejects_wrong_channel_plan():
    mixed = _mixed(np.random.default_rng(8))
    mixed[2] = Tensor(np.zeros((2, 5, 4, 4)))
    with pytest.raises(ShapeError):
        generate(Generator(seed=0), mixed)


def test_discriminator_output_in_unit_interval():
    d = Discriminator(seed=0)
    rng = np.random.default_rng(9)
    feats = Tensor(np.abs(rng.normal(size=(4, 64, 4, 4))))
    p = discriminate(d, gram(feats)).data
    assert p.shape == (4, 1)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_array_equal(p, discriminate(d, gram(feats)).data)
    # sanity band only
    assert np.all(np.abs(p - 0.5) <= 0.4)


def test_discriminator_extreme_inputs_stay_open_interval():
    d = Discriminator(seed=1, channels=2, hidden=(3,))
    p = d(Tensor(np.full((2, 2, 2), 1e3))).data
    assert np.all(np.isfinite(p)) and np.all(p >= 0) and np.all(p <= 1)


def test_discriminator_rejects_wrong_gram():
    with pytest.raises(ShapeError):
        discriminate(Discriminator(seed=0), Tensor(np.zeros((1, 32, 32))))


def test_discriminator_architecture():
    d = Discriminator(seed=0)
    assert d.dense_specs() == [("disc.fc1", 4096, 256), ("disc.fc2", 256, 64), ("disc.fc3", 64, 1)]
    assert len(d.named_params()) == 6


@pytest.mark.parametrize("cls, kw", [(Generator, {}), (Generator, {"student": True}), (Discriminator, {})])
def test_seed_determinism_bit_identical(cls, kw):
    a = export_params([cls(seed=3, **kw)]).to_bytes()
    b = export_params([cls(seed=3, **kw)]).to_bytes()
    assert a == b


def test_generator_and_discriminator_params_disjoint():
    g, d = Generator(seed=0), Discriminator(seed=0)
    g_ids = {id(t) for _, _, t in g.named_params()}
    d_ids = {id(t) for _, _, t in d.named_params()}
    assert not g_ids & d_ids
    g_names = {n for n, _, _ in g.named_params()}
    assert not g_names & {n for n, _, _ in d.named_params()}


def test_eval_mode_generation_is_deterministic():
    g = Generator(seed=0)
    mixed = _mixed(np.random.default_rng(10))
    with ad.no_grad():
        a, _ = generate(g, mixed)
        b, _ = generate(g, mixed)
    np.testing.assert_array_equal(a.data, b.data)
