import numpy as np

from dvae_umot import tracker, vkf
from dvae_umot.tracker import SceneData, TrackerConfig


def _state(mean, var=0.01):
    mean = np.atleast_2d(np.asarray(mean, float))
    N = mean.shape[0]
    return vkf.LinearState(mean, np.stack([np.eye(8) * var] * N), np.full((N, 8), 1e-3))


def test_predict_zero_velocity_keeps_box():
    box = [0.1, 0.9, 0.2, 0.7]
    g = vkf.vkf_predict(_state(box + [0, 0, 0, 0]))
    np.testing.assert_array_equal(g.mean.data[0], box)


def test_predict_translates_with_velocity():
    d = 0.03
    g = vkf.vkf_predict(_state([0.1, 0.9, 0.2, 0.7, d, 0, d, 0]))
    np.testing.assert_allclose(g.mean.data[0], [0.1 + d, 0.9, 0.2 + d, 0.7], rtol=1e-15)


def test_predict_covariance_grows(rng):
    for _ in range(50):
        L = rng.standard_normal((8, 8))
        st = vkf.LinearState(rng.uniform(size=(1, 8)), (L @ L.T)[None], rng.uniform(1e-4, 1e-2, size=(1, 8)))
        var = vkf.vkf_predict(st).var[0]
        propagated = np.diag(vkf.A_CV @ st.cov[0] @ vkf.A_CV.T)[:4]
        assert np.all(var >= propagated + st.lam[0, :4] - 1e-12)
    # with no position/velocity correlation the box variance itself grows
    st = _state([0.1, 0.9, 0.2, 0.7, 0, 0, 0, 0])
    assert np.all(vkf.vkf_predict(st).var[0] >= 0.01 + 1e-3)


def _cv_scene(T=25, vel=(0.01, -0.005), noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    start = np.array([0.2, 0.8, 0.3, 0.6])
    v = np.array([vel[0], vel[1], vel[0], vel[1]])
    gt = (start + np.arange(T)[:, None] * v)[:, None, :]
    dets = [g + noise * rng.standard_normal(g.shape) for g in gt]
    return SceneData(dets, labels=[np.zeros(1, int)] * T, gt=gt)


def test_single_object_matches_textbook_kalman():
    sc = _cv_scene(T=25, noise=0.004, seed=3)
    cfg = TrackerConfig(I=5, r_phi=0.04)
    res = vkf.vkf_track(sc, cfg)
    phi = tracker.fixed_phi(sc, cfg.r_phi)[0][0]
    lam = np.concatenate([phi, phi])
    ms, Vs = vkf.kalman_filter(np.stack([d[0] for d in sc.detections]), sc.detections[0][0],
                               np.diag(lam), np.diag(phi), np.diag(lam))
    assert all(np.all(e == 1.0) for e in res.eta)
    np.testing.assert_allclose(res.m[:, 0], ms, atol=1e-6)
    np.testing.assert_allclose(res.V[:, 0], np.diagonal(Vs, axis1=1, axis2=2), atol=1e-6)


def test_noise_free_constant_velocity_scene():
    sc = _cv_scene(T=40)
    res = vkf.vkf_track(sc, TrackerConfig(I=10))
    assert np.abs(res.m[5:] - sc.gt[5:]).max() < 1e-2


def test_two_objects_deterministic_and_valid():
    a = _cv_scene(T=20)
    b = _cv_scene(T=20, vel=(-0.01, 0.0))
    gt = np.concatenate([a.gt, b.gt + np.array([0.5, -0.3, 0.5, -0.3])], axis=1)
    sc = SceneData([g.copy() for g in gt], labels=[np.arange(2)] * 20, gt=gt)
    r1 = vkf.vkf_track(sc, TrackerConfig(I=5))
    r2 = vkf.vkf_track(sc, TrackerConfig(I=5))
    assert np.array_equal(r1.m, r2.m)
    for e in r1.eta:
        assert np.all(np.abs(e.sum(1) - 1) < 1e-9)
    assert np.all(r1.V > 0)
    assert np.abs(r1.m - gt).max() < 1e-2


def test_initial_state_layout():
    m1 = np.array([[0.1, 0.9, 0.2, 0.7]])
    phi = np.array([[1e-4, 4e-4, 1e-4, 4e-4]])
    st = vkf.initial_state(m1, phi)
    np.testing.assert_array_equal(st.mean[0], [0.1, 0.9, 0.2, 0.7, 0, 0, 0, 0])
    np.testing.assert_array_equal(np.diag(st.cov[0]), np.concatenate([phi[0], phi[0]]))


def test_update_with_vanishing_weight_stays_finite():
    st = _state([0.1, 0.9, 0.2, 0.7, 0.01, 0, 0.01, 0])
    o = np.array([[0.5, 0.5, 0.6, 0.4]])
    phi = np.full((1, 4), 1e-4)
    for w in (1e-300, 1e-200, 1e-20):
        out = vkf.kalman_update(st, np.array([[w]]), o, phi)
        assert np.all(np.isfinite(out.mean)) and np.all(np.isfinite(out.cov))
        np.testing.assert_allclose(out.mean, st.mean, atol=1e-12)
    full = vkf.kalman_update(st, np.array([[1e-300]]), o, np.stack([np.diag(phi[0])]))
    np.testing.assert_allclose(full.mean, st.mean, atol=1e-12)
