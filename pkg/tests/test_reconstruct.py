import numpy as np
import pytest

from deformtomo import diff_core as dc
from deformtomo.deformation import DeformationParams, GroundTruthDeformations, sample_random_deformations
from deformtomo.geometry import TiltGeometry, sample_volume, voxel_centers
from deformtomo.metrics import mean_image_snr
from deformtomo.neural_field import NeuralVolume
from deformtomo.reconstruct import (ModelConfig, Renderer, TrainConfig, TrainingAborted, TrainState, _batch_problem,
                                    band_weights, init_state, loss_batch, make_batch, render_projections, train,
                                    voxelize)
from deformtomo.simulator import NoiseModel, generate_phantom, synthesize_tilt_series

SMALL = ModelConfig(ff_k=8, ff_sigma=1.5, width=8, depth=2, warp_k=3, warp_width=6)


def _perturbed_state(m, seed=0, model=SMALL):
    rng = np.random.default_rng(seed)
    st = init_state(m, model, seed)
    d = st.deform
    st.deform = DeformationParams(
        d.spec,
        [a.replace(rng.normal(size=1) * 0.1) for a in d.alpha],
        [t.replace(rng.normal(size=2) * 0.05) for t in d.tau],
        [[g.replace(rng.normal(size=g.size) * 0.3) for g in gs] for gs in d.gamma],
    )
    # zero biases put every sample whose previous layer is all off exactly on a
    # relu kink, where no derivative exists; move them to a generic point
    st.volume.weights = [w.replace(rng.normal(size=w.size) * 0.1) if w.tag.startswith("psi.b") else w
                         for w in st.volume.weights]
    return st


def _random_batch(rng, m, n, size):
    return make_batch(rng.integers(0, m, size), rng.integers(0, n, size), rng.integers(0, n, size), n)


def _check_gradients(closure, params):
    _, grads = dc.forward_backward(closure, params)
    fd = dc.finite_difference_grad(closure, params, refine=2)
    scale = max(np.max(np.abs(f)) for f in fd)
    worst = 0.0
    for g, f in zip(grads, fd):
        worst = max(worst, np.max(np.abs(g - f)) / max(np.max(np.abs(f)), 1e-6 * scale))
    return worst


@pytest.mark.parametrize("mode", ["est", "est-wo"])
def test_full_loss_gradients(mode):
    n, m = 8, 3
    st = _perturbed_state(m)
    geom = TiltGeometry.uniform(m, n)
    rng = np.random.default_rng(1)
    obs = rng.normal(size=(m, n, n))
    closure, params = _batch_problem(st, Renderer(st.volume, geom), _random_batch(rng, m, n, 16), obs, mode)
    assert _check_gradients(closure, params) < 1e-4


def test_gradients_with_frozen_fields():
    n, m = 8, 3
    st = _perturbed_state(m, 2)
    geom = TiltGeometry.uniform(m, n)
    rng = np.random.default_rng(3)
    fields = sample_random_deformations(m, n, seed=0).fields
    closure, params = _batch_problem(st, Renderer(st.volume, geom), _random_batch(rng, m, n, 16),
                                     rng.normal(size=(m, n, n)), "est", local_fields=fields)
    assert not any(p.tag.startswith("gamma") for p in params)
    assert _check_gradients(closure, params) < 1e-4


def test_self_rendered_observations_give_zero_loss():
    n, m = 8, 3
    st = _perturbed_state(m, 4)
    geom = TiltGeometry.uniform(m, n)
    obs = render_projections(st, geom)
    batch = _random_batch(np.random.default_rng(0), m, n, 40)
    assert loss_batch(st, batch, obs, geom, "est") < 1e-28


def test_single_pixel_and_mean_of_pixels():
    n, m = 8, 3
    st = _perturbed_state(m, 5)
    geom = TiltGeometry.uniform(m, n)
    rng = np.random.default_rng(1)
    obs = rng.normal(size=(m, n, n))
    pred = render_projections(st, geom)
    tilt, iy, ix = np.array([2, 0, 1, 1]), np.array([3, 7, 0, 5]), np.array([1, 2, 6, 6])
    singles = []
    for t, y, x in zip(tilt, iy, ix):
        one = loss_batch(st, make_batch([t], [y], [x], n), obs, geom)
        assert one == pytest.approx((obs[t, y, x] - pred[t, y, x]) ** 2, rel=1e-12)
        singles.append(one)
    assert loss_batch(st, make_batch(tilt, iy, ix, n), obs, geom) == pytest.approx(np.mean(singles), rel=1e-12)


def test_batch_validation():
    st = init_state(2, SMALL)
    geom = TiltGeometry.uniform(2, 8)
    with pytest.raises(IndexError):
        loss_batch(st, make_batch([5], [0], [0], 8), np.zeros((2, 8, 8)), geom)
    with pytest.raises(ValueError):
        loss_batch(st, make_batch([], [], [], 8), np.zeros((2, 8, 8)), geom)


def test_zero_iterations_leave_state_unchanged():
    geom = TiltGeometry.uniform(3, 8)
    st = init_state(3, SMALL, 0)
    out = train(TrainConfig(iterations=0), np.zeros((3, 8, 8)), geom, state=st)
    assert all(np.array_equal(a.values, b.values) for a, b in zip(st.volume.weights, out.volume.weights))
    assert np.array_equal(out.deform.tau_array, st.deform.tau_array)


def test_est_wo_equals_est_with_frozen_deformations():
    n, m = 8, 4
    geom = TiltGeometry.uniform(m, n)
    obs = np.random.default_rng(0).uniform(0, 1, size=(m, n, n))
    base = dict(iterations=30, batch_pixels=24, log_every=10, seed=3)
    a = train(TrainConfig(mode="est-wo", **base), obs, geom, model=SMALL)
    b = train(TrainConfig(mode="est", lr_global=0.0, lr_local=0.0, **base), obs, geom, model=SMALL)
    for wa, wb in zip(a.volume.weights, b.volume.weights):
        assert wa.values.tobytes() == wb.values.tobytes()
    assert a.loss_history == b.loss_history


def test_training_is_deterministic():
    geom = TiltGeometry.uniform(3, 8)
    obs = np.random.default_rng(1).uniform(0, 1, size=(3, 8, 8))
    cfg = TrainConfig(iterations=20, batch_pixels=16, log_every=10, seed=9)
    a, b = train(cfg, obs, geom, model=SMALL), train(cfg, obs, geom, model=SMALL)
    assert a.loss_history == b.loss_history
    assert a.deform.tau_array.tobytes() == b.deform.tau_array.tobytes()


def test_divergence_guard_aborts_with_last_good_state():
    geom = TiltGeometry.uniform(3, 8)
    obs = np.random.default_rng(2).uniform(0, 1, size=(3, 8, 8))
    cfg = TrainConfig(iterations=60, batch_pixels=16, log_every=10, lr_volume=5.0, divergence_factor=1.0001)
    with pytest.raises(TrainingAborted) as err:
        train(cfg, obs, geom, model=SMALL)
    assert err.value.last_good is not None and err.value.iteration < 60


def test_fresh_zero_last_layer_field_voxelizes_to_softplus_zero():
    vol = NeuralVolume.create(K=8, scale=2.0, width=8, depth=2, seed=0, scheme="zero-last-layer")
    grid = voxelize(vol, 6)
    np.testing.assert_allclose(grid.data, np.log(2.0), rtol=0, atol=0)


def test_voxelize_reproduced_at_lattice_points():
    vol = NeuralVolume.create(K=8, scale=2.0, width=8, depth=2, seed=1)
    grid = voxelize(vol, 6)
    c = voxel_centers(6)
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    np.testing.assert_allclose(sample_volume(grid, pts), grid.data.ravel(), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(sample_volume(vol, pts), grid.data.ravel(), rtol=1e-12, atol=1e-12)


def _two_resolution_error(vol, n):
    coarse = voxelize(vol, n).data
    fine = voxelize(vol, 2 * n).data.reshape(n, 2, n, 2, n, 2).mean(axis=(1, 3, 5))
    return np.linalg.norm(fine - coarse) / np.linalg.norm(coarse)


@pytest.mark.xfail(strict=True, reason="8 cycles/unit relu field has content above the N=32 grid band; "
                                       "measured 8-16% (see ledger)")
def test_two_resolution_consistency_default_bandwidth():
    assert _two_resolution_error(NeuralVolume.create(seed=2), 32) < 0.05


def test_two_resolution_error_tracks_bandwidth():
    # averaging two samples h/4 either side of a centre scales a frequency-f
    # component by cos(pi f h / 2), so the mismatch must grow with sigma_ff
    errs = [_two_resolution_error(NeuralVolume.create(K=64, scale=s, width=64, depth=3, seed=0), 16)
            for s in (1.0, 2.0, 4.0)]
    assert errs[0] < errs[1] < errs[2]
    assert _two_resolution_error(NeuralVolume.create(K=64, scale=2.0, width=64, depth=3, seed=0), 32) < 0.05


def test_identity_deformations_render_the_same_both_ways():
    geom = TiltGeometry.uniform(3, 8)
    st = init_state(3, SMALL, 1)
    assert np.array_equal(render_projections(st, geom, True), render_projections(st, geom, False))


def test_zero_field_renders_constant_images():
    geom = TiltGeometry.uniform(2, 8)
    vol = NeuralVolume.create(K=8, scale=2.0, width=8, depth=2, scheme="zero-last-layer")
    st = TrainState(vol, DeformationParams.identity(2))
    # tilted rays leave the cube at the corners, so compare at zero tilt
    img = render_projections(st, TiltGeometry(np.array([0.0, 0.0]), 8))
    np.testing.assert_allclose(img, 2.0 * np.log(2.0), rtol=1e-12)


def _undeformed(n, m, snr=float("inf")):
    vol = generate_phantom(n, seed=0)
    geom = TiltGeometry.uniform(m, n)
    gt = GroundTruthDeformations.identity(m, n)
    return synthesize_tilt_series(vol, geom, gt, NoiseModel(snr, seed=1))


def test_est_wo_converges_on_clean_data():
    series = _undeformed(32, 21)
    geom = TiltGeometry(series.geometry.angles, 32, 32)
    model = ModelConfig(ff_k=32, ff_sigma=1.5, width=32, depth=3)
    cfg = TrainConfig(iterations=2000, batch_pixels=128, mode="est-wo", log_every=100, lr_volume=3e-3)
    st = train(cfg, series.images, geom, model=model)
    first, last = st.trace[0][1], st.trace[-1][1]
    assert last < 0.01 * first


def test_full_frame_rendering_reproduces_training_loss():
    series = _undeformed(16, 7)
    geom = TiltGeometry(series.geometry.angles, 16, 16)
    model = ModelConfig(ff_k=16, ff_sigma=1.5, width=16, depth=3)
    cfg = TrainConfig(iterations=600, batch_pixels=128, mode="est", log_every=100, lr_volume=3e-3)
    st = train(cfg, series.images, geom, model=model)
    full = np.mean((render_projections(st, geom) - series.images) ** 2)
    recent = np.mean(st.loss_history[-100:])
    assert full == pytest.approx(recent, rel=0.05) or abs(full - recent) < 0.05 * np.var(series.images)


def test_oracle_deformations_beat_ignoring_them():
    n, m = 16, 11
    vol = generate_phantom(n, seed=0)
    geom = TiltGeometry(np.linspace(-70, 70, m), n, n)
    gt = sample_random_deformations(m, n, seed=2)
    series = synthesize_tilt_series(vol, geom, gt, NoiseModel(float("inf")))
    model = ModelConfig(ff_k=16, ff_sigma=1.5, width=16, depth=3)
    base = dict(iterations=800, batch_pixels=128, log_every=100, lr_volume=3e-3, seed=1)
    wo = train(TrainConfig(mode="est-wo", **base), series.images, geom, model=model)
    st0 = init_state(m, model, 1)
    st0.deform = st0.deform.with_globals(gt.alpha_deg, gt.tau)
    oracle = train(TrainConfig(mode="est", lr_global=0.0, **base), series.images, geom, state=st0,
                   local_fields=gt.fields)
    snr_wo = mean_image_snr(render_projections(wo, geom, False), series.clean)
    snr_oracle = mean_image_snr(render_projections(oracle, geom, False), series.clean)
    assert snr_oracle >= snr_wo


def test_band_weights_schedule():
    B = np.random.default_rng(0).normal(size=(20, 3)) * 4.0
    assert band_weights(B, 1.0) is None
    assert np.all(band_weights(B, 0.0) == 0.0)
    ws = [band_weights(B, p) for p in (0.2, 0.5, 0.8)]
    assert all(np.all(a <= b) for a, b in zip(ws, ws[1:]))
    order = np.argsort(np.linalg.norm(B, axis=1))
    assert np.all(np.diff(ws[1][:20][order]) <= 0)  # lower frequencies come in first
    assert np.array_equal(ws[1][:20], ws[1][20:])


def test_gradients_with_partial_band():
    n, m = 8, 3
    st = _perturbed_state(m, 0)
    geom = TiltGeometry.uniform(m, n)
    rng = np.random.default_rng(4)
    renderer = Renderer(st.volume, geom)
    renderer.band = band_weights(st.volume.encoding.B, 0.6)
    closure, params = _batch_problem(st, renderer, _random_batch(rng, m, n, 16), rng.normal(size=(m, n, n)), "est")
    assert _check_gradients(closure, params) < 1e-4


def test_coarse_to_fine_ends_on_the_full_field():
    geom = TiltGeometry.uniform(3, 8)
    obs = np.random.default_rng(5).uniform(0, 1, size=(3, 8, 8))
    cfg = TrainConfig(iterations=20, batch_pixels=16, log_every=10, c2f_iterations=10)
    st = train(cfg, obs, geom, model=SMALL)
    assert st.iteration == 20 and np.isfinite(st.loss_history).all()
    with pytest.raises(ValueError):
        TrainConfig(c2f_iterations=-1)
