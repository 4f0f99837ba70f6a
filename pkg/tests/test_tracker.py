import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvae_umot import autodiff as ad
from dvae_umot import srnn, tracker
from dvae_umot.tracker import SceneData, TrackerConfig


def box(x, y, w=0.05, h=0.15):
    return np.array([x, y, x + w, y - h])


def static_scene(T=20, xs=(0.1, 0.5, 0.8)):
    gt = np.stack([np.stack([box(x, 0.7) for x in xs])] * T)
    return SceneData([g.copy() for g in gt], labels=[np.arange(len(xs))] * T, gt=gt)


# ---------------------------------------------------------------- Φ

def test_fixed_phi_formula():
    sc = SceneData([np.array([[0.0, 20.0, 10.0, 0.0]]), np.array([[1.0, 21.0, 11.0, 1.0]])])
    phi = tracker.fixed_phi(sc, 0.04)
    np.testing.assert_allclose(phi[0][0], [0.16, 0.64, 0.16, 0.64], rtol=1e-12)
    assert np.array_equal(phi[0], phi[1])
    with pytest.raises(ValueError):
        tracker.fixed_phi(sc, 0.0)
    with pytest.raises(ValueError):
        TrackerConfig(r_phi=0.0)


def test_fixed_phi_extra_slots_use_own_size():
    sc = SceneData([np.array([box(0.1, 0.9)]), np.array([box(0.1, 0.9), [0, 1, 0.5, 0.0]])])
    phi = tracker.fixed_phi(sc, 0.1)
    np.testing.assert_allclose(phi[1][1], 0.01 * np.array([0.25, 1.0, 0.25, 1.0]))


# --------------------------------------------------------------- E-W

def _random_case(rng, T=3, N=3, K=4):
    dets = [rng.uniform(0, 1, size=(K, 4)) for _ in range(T)]
    m = rng.uniform(0, 1, size=(T, N, 4))
    V = rng.uniform(0.001, 0.01, size=(T, N, 4))
    phi = [rng.uniform(0.01, 0.05, size=(K, 4)) for _ in range(T)]
    return dets, m, V, phi


def test_eta_rows_sum_to_one_and_match_direct(rng):
    for _ in range(50):
        dets, m, V, phi = _random_case(rng)
        eta, under = tracker.e_w_step(dets, m, V, phi)
        direct, _ = tracker.e_w_direct(dets, m, V, phi)
        assert under == 0
        for e, d in zip(eta, direct):
            assert np.all(np.abs(e.sum(axis=1) - 1) < 1e-9) and np.all((e >= 0) & (e <= 1))
            np.testing.assert_allclose(e, d, rtol=1e-9, atol=0)


def test_eta_simple_cases(rng):
    dets, m, V, phi = _random_case(rng, N=1)
    eta, _ = tracker.e_w_step(dets, m, V, phi)
    assert all(np.all(e == 1.0) for e in eta)
    m2 = np.repeat(m, 2, axis=1)
    V2 = np.repeat(V, 2, axis=1)
    eta, _ = tracker.e_w_step(dets, m2, V2, phi)
    assert all(np.allclose(e, 0.5, atol=0) for e in eta)


def test_beta_trivial_case():
    o = np.array([[0.3, 0.6, 0.4, 0.2]])
    m = np.array([[[0.3, 0.6, 0.4, 0.2], [0.9, 0.9, 1.0, 0.5]]])
    V = np.zeros((1, 2, 4))
    _, betas = tracker.e_w_direct([o], m, V, [np.ones((1, 4))])
    assert abs(betas[0][0, 0] - (2 * math.pi) ** -2) < 1e-12
    lb = tracker.log_beta_frame(o, m[0], V[0], np.ones((1, 4)))
    assert abs(math.exp(lb[0, 0]) - 0.0253302959105844) < 1e-12


def test_full_and_diagonal_log_beta_agree(rng):
    dets, m, V, phi = _random_case(rng)
    diag = tracker.log_beta_frame(dets[0], m[0], V[0], phi[0])
    full = tracker.log_beta_frame(dets[0], m[0], np.stack([np.diag(v) for v in V[0]]),
                                  np.stack([np.diag(p) for p in phi[0]]))
    np.testing.assert_allclose(diag, full, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_eta_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    dets, m, V, phi = _random_case(rng, T=1)
    e1, _ = tracker.e_w_step(dets, m, V, phi)
    e2, _ = tracker.e_w_step([d * c for d in dets], m * c, V * c * c, [p * c * c for p in phi])
    np.testing.assert_allclose(e1[0], e2[0], rtol=1e-8, atol=1e-12)


def test_underflow_is_counted_and_finite():
    o = np.array([[100.0, 100.0, 100.1, 99.9]])
    m = np.zeros((1, 2, 4))
    m[0, 1] = 0.01
    V = np.full((1, 2, 4), 1e-4)
    phi = [np.full((1, 4), 1e-4)]
    eta, under = tracker.e_w_step([o], m, V, phi)
    assert under == 1 and np.all(np.isfinite(eta[0]))
    eta, _ = tracker.e_w_step([o], m, V, phi, underflow_uniform=True)
    np.testing.assert_array_equal(eta[0], [[0.5, 0.5]])


def test_empty_frame_gives_empty_eta():
    eta, _ = tracker.e_w_step([np.zeros((0, 4))], np.zeros((1, 2, 4)), np.ones((1, 2, 4)),
                              [np.zeros((0, 4))])
    assert eta[0].shape == (0, 2)


# ------------------------------------------------------------- fusion

def _oracle(eta_t, o, phi, mu, v):
    """Product of Gaussians, one coordinate at a time, in natural parameters."""
    K, N = eta_t.shape
    m_out, V_out = np.empty((N, 4)), np.empty((N, 4))
    for n in range(N):
        for d in range(4):
            lam, h = 1.0 / v[n, d], mu[n, d] / v[n, d]
            for k in range(K):
                lam += eta_t[k, n] / phi[k, d]
                h += eta_t[k, n] * o[k, d] / phi[k, d]
            V_out[n, d] = 1.0 / lam
            m_out[n, d] = h / lam
    return m_out, V_out


def test_fusion_matches_oracle_1000_cases(rng):
    for _ in range(1000):
        K, N = rng.integers(1, 5), rng.integers(1, 4)
        eta = rng.dirichlet(np.ones(N), size=K)
        o = rng.uniform(0, 1, size=(K, 4))
        phi = rng.uniform(1e-4, 1e-2, size=(K, 4))
        mu = rng.uniform(0, 1, size=(N, 4))
        v = rng.uniform(1e-4, 1e-2, size=(N, 4))
        m, V = tracker.fuse(eta, o, phi, mu, v)
        mo, Vo = _oracle(eta, o, phi, mu, v)
        np.testing.assert_allclose(m, mo, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(V, Vo, rtol=1e-10, atol=1e-14)


def test_fusion_examples(rng):
    mu, v = rng.uniform(size=(1, 4)), rng.uniform(0.01, 0.1, size=(1, 4))
    m, V = tracker.fuse(np.zeros((0, 1)), np.zeros((0, 4)), np.zeros((0, 4)), mu, v)
    np.testing.assert_allclose(m, mu, rtol=1e-14)
    np.testing.assert_allclose(V, v, rtol=1e-14)
    o = rng.uniform(size=(1, 4))
    m, V = tracker.fuse(np.ones((1, 1)), o, np.full((1, 4), 0.16), mu, np.full((1, 4), 0.04))
    np.testing.assert_allclose(V, 0.032, rtol=1e-14)
    np.testing.assert_allclose(m, 0.2 * o + 0.8 * mu, rtol=1e-14)


def test_one_hot_fusion_is_two_gaussian_product(rng):
    o = rng.uniform(size=(3, 4))
    phi = rng.uniform(0.01, 0.05, size=(3, 4))
    mu, v = rng.uniform(size=(2, 4)), rng.uniform(0.01, 0.05, size=(2, 4))
    eta = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    m, V = tracker.fuse(eta, o, phi, mu, v)
    Vexp = 1 / (1 / phi[0] + 1 / v[0])
    assert np.array_equal(V[0], Vexp)
    np.testing.assert_allclose(m[0], Vexp * (o[0] / phi[0] + mu[0] / v[0]), rtol=1e-15)


def test_fusion_convexity_and_variance_bound(rng):
    for _ in range(200):
        K, N = 3, 2
        eta = rng.dirichlet(np.ones(N), size=K)
        o = rng.uniform(size=(K, 4))
        phi = rng.uniform(1e-3, 1e-2, size=(K, 4))
        mu, v = rng.uniform(size=(N, 4)), rng.uniform(1e-3, 1e-2, size=(N, 4))
        m, V = tracker.fuse(eta, o, phi, mu, v)
        for n in range(N):
            pts = np.vstack([o[eta[:, n] > 0], mu[n]])
            assert np.all(m[n] >= pts.min(0) - 1e-12) and np.all(m[n] <= pts.max(0) + 1e-12)
            assert np.all(V[n] > 0) and np.all(V[n] <= v[n])


def test_full_fusion_matches_diagonal(rng):
    eta = rng.dirichlet(np.ones(2), size=3)
    o = rng.uniform(size=(3, 4))
    phi = rng.uniform(1e-3, 1e-2, size=(3, 4))
    mu, v = rng.uniform(size=(2, 4)), rng.uniform(1e-3, 1e-2, size=(2, 4))
    m, V = tracker.fuse(eta, o, phi, mu, v)
    mf, Vf = tracker.fuse(eta, o, np.stack([np.diag(p) for p in phi]), mu, v)
    np.testing.assert_allclose(mf, m, rtol=1e-10)
    np.testing.assert_allclose(np.diagonal(Vf, axis1=1, axis2=2), V, rtol=1e-10)


# ------------------------------------------------------------ E-S sweep

@pytest.mark.parametrize("decoder_input", ["sample", "mean"])
def test_sweep_sampling_order(random_params, monkeypatch, decoder_input):
    """The encoder reads s^{(i-1)}; the decoder's LSTM is fed the new samples s^{(i)}
    (or the fused means with ``decoder_input='mean'``)."""
    T, N = 4, 1
    prev = np.random.default_rng(0).uniform(size=(T, N, 4))
    feeds = []
    real = srnn.lstm_step

    def spy(P, s_prev, h, c):
        feeds.append(np.array(ad.as_tensor(s_prev).data, copy=True))
        return real(P, s_prev, h, c)

    monkeypatch.setattr(srnn, "lstm_step", spy)
    dets = [np.zeros((0, 4))] * T
    phi = [np.zeros((0, 4))] * T
    eta = [np.zeros((0, N))] * T
    dyn = tracker.DvaeDynamics(random_params, decoder_input)
    m, V, s, extra = dyn.sweep(eta, dets, phi, prev, np.random.default_rng(1))
    fed_b = s if decoder_input == "sample" else m
    assert not np.array_equal(s, m)
    # feeds alternate: chain A (previous samples) then chain B (current samples or means)
    for t in range(1, T):
        np.testing.assert_array_equal(feeds[2 * t], prev[t - 1])
        np.testing.assert_array_equal(feeds[2 * t + 1], fed_b[t - 1])
    # no detections: m = decoder mean, V = decoder variance
    assert np.all(V > 0)


def test_e_s_step_functional(random_params, rng):
    sc = static_scene(T=5)
    phi = tracker.fixed_phi(sc, 0.04)
    eta = [np.eye(3)] * 5
    prev = np.stack(sc.detections)
    m, V, s, z = tracker.e_s_step(sc.detections, eta, phi, random_params, prev, rng)
    assert m.shape == (5, 3, 4) and z.shape == (5, 3, 4) and np.all(V > 0)


# ------------------------------------------------------------- M step

def test_m_step_examples(rng):
    o = rng.uniform(size=(1, 4))
    m = rng.uniform(size=(1, 1, 4))
    phi = tracker.m_step_phi([o], [np.ones((1, 1))], m, np.zeros((1, 1, 4)))
    d = o[0] - m[0, 0]
    np.testing.assert_allclose(phi[0][0], np.outer(d, d) + 0, atol=1e-7)
    Vd = rng.uniform(0.01, 0.02, size=4)
    m2 = np.repeat(o[None], 2, axis=1)
    phi = tracker.m_step_phi([o], [np.array([[0.3, 0.7]])], m2, np.tile(Vd, (1, 2, 1)))
    np.testing.assert_allclose(phi[0][0], np.diag(Vd), atol=1e-15)
    assert np.all(np.linalg.eigvalsh(phi[0][0]) > 0)


# ------------------------------------------------------- fine-tuning

def test_finetune_disabled_is_identity(random_params):
    out = tracker.e_z_finetune(None, None, None, None, random_params, TrackerConfig())
    assert out is random_params


def test_finetune_gradient(random_params):
    rng = np.random.default_rng(4)
    T, N = 4, 2
    prev, cur = rng.uniform(size=(T, N, 4)), rng.uniform(size=(T, N, 4))
    eps = rng.standard_normal((T, N, 4))

    def obj(arrays):
        tape = ad.Tape()
        P = srnn.SrnnParams(dict(arrays)).on_tape(tape)
        return tape, P, tracker.finetune_objective(P, prev, cur, eps)

    tape, P, o = obj(random_params.arrays)
    g = ad.backward(tape, o)
    grads = {k: g[P[k].id] for k in P}
    err = ad.finite_diff_check(lambda a: float(obj(a)[2].data), grads, random_params.arrays,
                               max_entries=6, rng=np.random.default_rng(0))
    assert err < 1e-3


def test_finetune_step_changes_params(random_params):
    rng = np.random.default_rng(4)
    prev, cur = rng.uniform(size=(3, 1, 4)), rng.uniform(size=(3, 1, 4))
    tuner = tracker.FineTuner(1e-4)
    new = tuner.step(random_params, prev, cur, rng.standard_normal((3, 1, 4)))
    diff = max(np.abs(new.arrays[k] - random_params.arrays[k]).max() for k in new.arrays)
    assert 0 < diff <= 1.1e-4


# ------------------------------------------------------------ cascade

class _Recorder:
    """Dynamics stub echoing its initial samples, to observe the cascade."""

    name = "stub"
    params = None

    def __init__(self):
        self.inits = []

    def sweep(self, eta, dets, phi, s_prev_iter, rng, window_state=None):
        self.inits.append(s_prev_iter.copy())
        V = np.ones_like(s_prev_iter) * 1e-3
        return s_prev_iter + 0.001, V, s_prev_iter + 0.001, {}

    def window_init(self, prev, T_next):
        return np.repeat(prev["m"][-1][None], T_next, axis=0), None


def test_cascade_structure():
    sc = static_scene(T=60)
    dyn = _Recorder()
    cfg = TrackerConfig(J=30, I0=2)
    m0, V0 = tracker.cascade_init(sc, dyn, cfg, np.random.default_rng(0))
    assert len(dyn.inits) == 2                       # only window 1 is run
    np.testing.assert_array_equal(m0[:30], np.repeat(sc.detections[0][None], 30, axis=0))
    np.testing.assert_allclose(m0[30:], np.repeat((sc.detections[0] + 0.002)[None], 30, axis=0))
    phi = tracker.fixed_phi(sc, cfg.r_phi)
    np.testing.assert_array_equal(V0[10], phi[0])


def test_cascade_single_window():
    sc = static_scene(T=12)
    dyn = _Recorder()
    m0, _ = tracker.cascade_init(sc, dyn, TrackerConfig(J=30), np.random.default_rng(0))
    assert dyn.inits == []
    np.testing.assert_array_equal(m0, np.repeat(sc.detections[0][None], 12, axis=0))


def test_cascade_static_scene_is_exact(random_params):
    sc = static_scene(T=40)
    m0, _ = tracker.cascade_init(sc, tracker.DvaeDynamics(random_params), TrackerConfig(I0=3),
                                 np.random.default_rng(0))
    assert np.abs(m0 - sc.gt).max() < 0.05


# -------------------------------------------------------------- track

def test_track_static_single_object(random_params):
    sc = static_scene(T=15, xs=(0.4,))
    res = tracker.track(sc, random_params, TrackerConfig(I=30, I0=5))
    assert np.abs(res.m - sc.gt).max() < 1e-2
    assert all(np.all(e == 1.0) for e in res.eta)


def test_track_deterministic_and_diagnostics(random_params):
    sc = static_scene(T=12)
    cfg = TrackerConfig(I=4, I0=2, seed=3)
    a = tracker.track(sc, random_params, cfg)
    b = tracker.track(sc, random_params, cfg)
    assert np.array_equal(a.m, b.m) and np.array_equal(a.V, b.V)
    assert len(a.diagnostics["entropy"]) == 4 and len(a.diagnostics["movement"]) == 4
    for e in a.eta:
        assert np.all(np.abs(e.sum(1) - 1) < 1e-9)
    assert np.all(a.V > 0)


def test_track_separated_scene_assignments(random_params):
    from dvae_umot import dataio
    cfg = dataio.SuiteConfig(scenarios=("separated",), scenes_per_scenario=1, T=30, noise=0.02)
    sc = dataio.synth_benchmark(cfg)[0]
    res = tracker.track(sc, srnn.load_checkpoint(srnn.default_checkpoint_path()), TrackerConfig(I=20))
    # map object index -> generating label using frame 1
    obj_label = {int(res.assignments[0][k]): int(sc.labels[0][k]) for k in range(sc.K1)}
    hits = total = 0
    for a, lab in zip(res.assignments, sc.labels):
        hits += sum(obj_label.get(int(x)) == int(l) for x, l in zip(a, lab))
        total += len(lab)
    assert hits / total >= 0.99


def test_track_errors(random_params):
    with pytest.raises(ValueError, match="K_1"):
        tracker.track(SceneData([np.zeros((0, 4))]), random_params)
    with pytest.raises(ValueError, match="checkpoint"):
        tracker.track(static_scene(), None)
    with pytest.raises(ValueError):
        SceneData([np.array([[0.5, 0.1, 0.4, 0.2]])])
    with pytest.raises(ValueError, match="exceeds"):
        tracker.track(static_scene(), random_params, TrackerConfig(n_objects=5))
    with pytest.raises(ValueError, match="decoder_input"):
        TrackerConfig(decoder_input="median")


def test_track_with_m_step_and_finetune(random_params):
    sc = static_scene(T=8)
    res = tracker.track(sc, random_params, TrackerConfig(I=3, I0=2, m_step_phi=True, fine_tune=True))
    assert res.V.shape == (8, 3, 4, 4)
    for V in res.V.reshape(-1, 4, 4):
        assert np.all(np.linalg.eigvalsh(V) > 0)
    assert res.params is not None and res.params is not random_params
