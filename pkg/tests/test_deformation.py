import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deformtomo import diff_core as dc
from deformtomo.deformation import (DeformationParams, ElasticFieldConfig, bilinear_sample, deform_image,
                                    jacobian_sup_norm, rotate_2d, sample_elastic_field, sample_random_deformations,
                                    stacked_gamma, warp_batch, warp_coords)
from deformtomo.diff_core import forward_backward, finite_difference_grad
from deformtomo.geometry import pixel_grid
from deformtomo.neural_field import WarpNetSpec

points = arrays(np.float64, (6, 2), elements=st.floats(-1, 1))


def identity(m=2, **kw):
    return DeformationParams.identity(m, WarpNetSpec.create(K=4, width=8, **kw), seed=0)


@settings(max_examples=40, deadline=None)
@given(points)
def test_identity_warp_is_exact(x):
    for anchors in (0, 8):
        w = warp_coords(identity(anchor_grid=anchors), 1, x)
        assert np.array_equal(w, x)


def test_pure_shift():
    phi = identity().with_globals([0.0, 0.0], [[0.1, 0.0], [0.0, 0.0]])
    x = pixel_grid(8)
    np.testing.assert_allclose(warp_coords(phi, 0, x), x + [0.1, 0.0], atol=1e-15)


def test_pure_rotation():
    phi = identity().with_globals([90.0, 0.0], np.zeros((2, 2)))
    np.testing.assert_allclose(warp_coords(phi, 0, np.array([1.0, 0.0])), [0.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(rotate_2d(np.array([1.0, 0.0]), 90.0), [0.0, -1.0], atol=1e-15)


def _random_params(m, seed, anchors=8):
    rng = np.random.default_rng(seed)
    d = DeformationParams.identity(m, WarpNetSpec.create(K=3, width=6, anchor_grid=anchors), seed=seed)
    return DeformationParams(
        d.spec,
        [a.replace(rng.normal(size=1) * 0.2) for a in d.alpha],
        [t.replace(rng.normal(size=2) * 0.1) for t in d.tau],
        [[g.replace(rng.normal(size=g.size) * 0.3) for g in gs] for gs in d.gamma],
    )


@pytest.mark.parametrize("anchors", [0, 8])
def test_batched_warp_matches_pointwise(anchors):
    d = _random_params(3, 1, anchors)
    rng = np.random.default_rng(2)
    tilt = np.sort(rng.integers(0, 3, 20))
    x = rng.uniform(-1, 1, size=(20, 2))
    alpha = np.array([a.values[0] for a in d.alpha])
    w = warp_batch(x, tilt, d.spec, alpha, d.tau_array, stacked_gamma(d)).value
    ref = np.stack([warp_coords(d, t, p) for t, p in zip(tilt, x)])
    np.testing.assert_allclose(w, ref, atol=1e-13)


def test_centered_local_field_has_no_mean_or_rotation():
    d = _random_params(2, 4)
    a = d.spec.anchors()
    loc = d.local_displacement(1, a)
    np.testing.assert_allclose(loc.mean(axis=0), 0.0, atol=1e-14)
    assert abs(np.sum(-a[:, 1] * loc[:, 0] + a[:, 0] * loc[:, 1])) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_warp_gradients_match_fd(seed):
    d = _random_params(2, seed)
    rng = np.random.default_rng(seed)
    tilt = np.sort(rng.integers(0, 2, 10))
    x = rng.uniform(-1, 1, size=(10, 2))
    target = rng.normal(size=(10, 2))
    n_layers = len(d.gamma[0])
    params = list(d.alpha) + list(d.tau) + [g for gs in d.gamma for g in gs]

    def loss(*leaves):
        alpha = dc.stack(leaves[:2]).reshape(2)
        tau = dc.stack(leaves[2:4])
        flat = leaves[4:]
        gamma = [dc.stack(flat[k::n_layers]) for k in range(n_layers)]
        w = warp_batch(x, tilt, d.spec, alpha, tau, gamma)
        return dc.tsum(dc.square(w - target))

    _, grads = forward_backward(loss, params)
    fd = finite_difference_grad(loss, params)
    scale = max(np.max(np.abs(f)) for f in fd)
    for p, g, f in zip(params, grads, fd):
        # the last bias is a null direction of the centered field: compare against the overall scale
        floor = 1e-6 * scale
        assert np.max(np.abs(g - f)) / max(np.max(np.abs(f)), floor) < 1e-4, p.tag


def test_bilinear_identity_reproduces_image():
    img = np.random.default_rng(0).normal(size=(10, 10))
    np.testing.assert_allclose(bilinear_sample(img, pixel_grid(10)), img, atol=1e-14)
    np.testing.assert_allclose(deform_image(img, lambda p: p), img, atol=1e-14)


def test_one_pixel_shift_is_exact():
    n = 12
    img = np.random.default_rng(1).normal(size=(n, n))
    out = bilinear_sample(img, pixel_grid(n) + [2.0 / n, 0.0])
    assert np.array_equal(out[:, :-1], img[:, 1:])


def test_rotation_round_trip_on_smooth_image():
    n = 48
    g = pixel_grid(n)
    img = np.exp(-np.sum(g**2, axis=-1) / 0.15) * (1 + 0.3 * np.cos(3 * g[..., 0]))
    fwd = bilinear_sample(img, rotate_2d(g, 7.0))
    back = bilinear_sample(fwd, rotate_2d(g, -7.0))
    assert np.linalg.norm(back - img) / np.linalg.norm(img) < 0.02


def test_deform_image_is_linear():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 9, 9))
    warp = rotate_2d(pixel_grid(9) + 0.05, 4.0)
    np.testing.assert_allclose(deform_image(2 * a - b, warp), 2 * deform_image(a, warp) - deform_image(b, warp),
                               atol=1e-12)


def test_elastic_zero_amplitude():
    assert np.all(sample_elastic_field(ElasticFieldConfig(amax=0.0), 16) == 0)


def test_elastic_deterministic():
    cfg = ElasticFieldConfig(seed=3)
    assert np.array_equal(sample_elastic_field(cfg, 32), sample_elastic_field(cfg, 32))


def test_elastic_defaults_are_invertible_and_scaled():
    fld = sample_elastic_field(ElasticFieldConfig(seed=0), 64)
    assert jacobian_sup_norm(fld) < 1.0
    assert np.max(np.linalg.norm(fld, axis=-1)) == pytest.approx(3.0)


def test_elastic_config_validation():
    with pytest.raises(ValueError):
        ElasticFieldConfig(grid=1)
    with pytest.raises(ValueError):
        ElasticFieldConfig(amax=-1.0)


def test_random_deformations_bounds_and_distinct():
    gt = sample_random_deformations(3, 32, seed=4)
    assert np.max(np.abs(gt.tau)) <= 0.2 and np.max(np.abs(gt.alpha_deg)) <= 10
    assert not np.array_equal(gt.fields[0], gt.fields[1]) and not np.array_equal(gt.fields[1], gt.fields[2])


def test_rotation_draws_are_centered():
    gt = sample_random_deformations(10_000, 4, ElasticFieldConfig(grid=2), seed=0)
    assert abs(gt.alpha_deg.mean()) < 0.3


def test_detector_center_stays_bounded():
    gt = sample_random_deformations(200, 32, seed=1)
    centers = np.stack([gt.warp_grid(m)[15:17, 15:17].reshape(-1, 2) for m in range(gt.m)])
    assert np.max(np.abs(centers)) <= 1.3


def test_identity_ground_truth_warp_is_grid():
    from deformtomo.deformation import GroundTruthDeformations

    gt = GroundTruthDeformations.identity(2, 8)
    assert np.array_equal(gt.warp_grid(1), pixel_grid(8))
