"""Acceptance criteria 1-12 of the specification.

Each test records one ``[PASS]``/``[FAIL]`` line (printed in pytest's
terminal summary by ``conftest.py``) before asserting.  Criteria 8-10 train a
model or run the tracking suite and take several minutes; criterion 12 needs
user-supplied MOT17 files (``DVAE_UMOT_MOT17=<dir with gt.txt and det.txt>``)
and is skipped otherwise.

Run just this file with ``pytest -v -s tests/test_acceptance.py``.
"""

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dvae_umot import autodiff as ad
from dvae_umot import bench, cli, dataio, metrics, pretrain, srnn, synth, tracker, vkf
from dvae_umot.dataio import SceneConfig, SuiteConfig
from dvae_umot.srnn import SrnnParams
from dvae_umot.tracker import SceneData, TrackerConfig

RESULTS: list[str] = []


def record(criterion: int, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:>2}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_params():
    path = srnn.default_checkpoint_path()
    if not path.is_file():
        pytest.fail(f"bundled checkpoint missing at {path}; run `dvae-umot pretrain`")
    return srnn.load_checkpoint(path)


# ------------------------------------------------------------------ 1

def _primitive_fd(rng) -> float:
    """Worst relative FD error over every primitive op (elementary and fused)."""
    def check(build, inputs):
        weights = {}

        def f(arrs):
            tape = ad.Tape()
            leaves = [tape.leaf(arrs[f"x{i}"]) for i in range(len(inputs))]
            out = build(*leaves)
            if "w" not in weights:
                weights["w"] = rng.normal(size=out.shape)
            loss = ad.sum(ad.mul(out, ad.Tensor(weights["w"]))) if out.shape else out
            return tape, leaves, loss

        params = {f"x{i}": a for i, a in enumerate(inputs)}
        tape, leaves, loss = f(params)
        g = ad.backward(tape, loss)
        grads = {f"x{i}": g[l.id] for i, l in enumerate(leaves)}
        return ad.finite_diff_check(lambda p: float(f(p)[2].data), grads, params)

    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    xc = x[np.abs(np.abs(x) - 0.5) > 1e-3][:8].reshape(2, 4)
    H = 3
    cases = {
        "tanh": (ad.tanh, [x]), "sigmoid": (ad.sigmoid, [x]), "exp": (ad.exp, [x]),
        "log": (ad.log, [pos]), "neg": (ad.neg, [x]), "scale": (lambda a: ad.scale(a, -1.7), [x]),
        "slice": (lambda a: ad.slice(a, 1, 3, axis=1), [x]), "clip": (lambda a: ad.clip(a, -0.5, 0.5), [xc]),
        "sum": (ad.sum, [x]), "add": (ad.add, [x, y]), "sub": (ad.sub, [x, y]), "mul": (ad.mul, [x, y]),
        "matmul": (ad.matmul, [x, rng.normal(size=(4, 2))]),
        "concat": (lambda p, q: ad.concat([p, q], axis=1), [x, y]),
        "affine": (ad.affine, [x, rng.normal(size=(4, 2)), rng.normal(size=(1, 2))]),
        "lstm_cell": (ad.lstm_cell, [rng.normal(size=(2, 4)), rng.normal(size=(2, H)), rng.normal(size=(2, H)),
                                     rng.normal(size=(4, 4 * H)), rng.normal(size=(H, 4 * H)),
                                     rng.normal(size=(1, 4 * H))]),
        "reparam": (ad.reparam, [x, 0.3 * y, rng.normal(size=(3, 4))]),
        "gaussian_nll": (ad.gaussian_nll, [x, y, 0.5 * rng.normal(size=(3, 4))]),
        "kl_gauss": (ad.kl_gauss, [x, 0.5 * y, rng.normal(size=(3, 4)), 0.5 * rng.normal(size=(3, 4))]),
    }
    return max(check(fn, args) for fn, args in cases.values())


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    prim = _primitive_fd(rng)
    params = SrnnParams.init(seed=11)
    T = 5
    s = rng.uniform(0.0, 1.0, size=(T, 3, 4))
    noise = rng.standard_normal((T, 3, srnn.Z_DIM))   # frozen reparameterisation noise

    def loss_of(arrays):
        tape = ad.Tape()
        P = SrnnParams(dict(arrays)).on_tape(tape)
        return tape, P, srnn.sequence_elbo(P, s, noise=noise)

    tape, P, loss = loss_of(params.arrays)
    g = ad.backward(tape, loss)
    grads = {k: g[P[k].id] for k in P}
    elbo = ad.finite_diff_check(lambda a: float(loss_of(a)[2].data), grads, params.arrays)
    dt = time.perf_counter() - t0
    n = sum(a.size for a in params.arrays.values())
    record(1, elbo < 1e-3 and prim < 1e-6 and dt < 60,
           f"ELBO FD max rel err {elbo:.2e} over all {n} parameters (< 1e-3); "
           f"primitives {prim:.2e} (< 1e-6); {dt:.1f} s (< 60 s)")


# ------------------------------------------------------------------ 2

def _product_of_gaussians(eta_t, o, phi, mu, v):
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


def test_criterion_02_fusion_oracle(monkeypatch):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        K, N = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        eta = rng.dirichlet(np.ones(N), size=K)
        o = rng.uniform(0, 1, size=(K, 4))
        phi = rng.uniform(1e-4, 1e-2, size=(K, 4))
        mu = rng.uniform(0, 1, size=(N, 4))
        v = rng.uniform(1e-4, 1e-2, size=(N, 4))
        m, V = tracker.fuse(eta, o, phi, mu, v)
        mo, Vo = _product_of_gaussians(eta, o, phi, mu, v)
        worst = max(worst, float(np.max(np.abs(m - mo) / np.abs(mo))), float(np.max(np.abs(V - Vo) / Vo)))
    # e_s_step wires the decoder Gaussian into exactly this fusion
    params = SrnnParams.init(seed=5)
    decoded = []
    real = srnn.decode_s

    def spy(P, h, z):
        out = real(P, h, z)
        decoded.append((out.mean.data.copy(), out.var.copy()))
        return out

    monkeypatch.setattr(srnn, "decode_s", spy)
    T, N, K = 4, 2, 3
    dets = [rng.uniform(size=(K, 4)) for _ in range(T)]
    eta = [rng.dirichlet(np.ones(N), size=K) for _ in range(T)]
    phi = [rng.uniform(1e-4, 1e-2, size=(K, 4)) for _ in range(T)]
    m, V, _, _ = tracker.e_s_step(dets, eta, phi, params, rng.uniform(size=(T, N, 4)), rng)
    wired = 0.0
    for t in range(T):
        mo, Vo = _product_of_gaussians(eta[t], dets[t], phi[t], *decoded[t])
        wired = max(wired, float(np.max(np.abs(m[t] - mo) / np.abs(mo))), float(np.max(np.abs(V[t] - Vo) / Vo)))
    # one-hot η: exactly the closed-form product of two Gaussians
    onehot = True
    for _ in range(100):
        o = rng.uniform(size=(1, 4))
        phi1 = rng.uniform(1e-3, 1e-1, size=(1, 4))
        mu = rng.uniform(size=(1, 4))
        v = rng.uniform(1e-3, 1e-1, size=(1, 4))
        m1, V1 = tracker.fuse(np.ones((1, 1)), o, phi1, mu, v)
        onehot &= bool(np.all(V1 == 1.0 / (1.0 / phi1 + 1.0 / v)))
        onehot &= bool(np.allclose(m1, (o * v + mu * phi1) / (phi1 + v), rtol=1e-15, atol=0))
    record(2, worst < 1e-10 and wired < 1e-10 and onehot,
           f"1000 random cases max rel err {worst:.1e}; e_s_step wiring {wired:.1e} (< 1e-10); one-hot exact: {onehot}")


# ------------------------------------------------------------------ 3

def test_criterion_03_assignment():
    rng = np.random.default_rng(3)
    row_err = rel = 0.0
    for _ in range(200):
        T, N, K = 3, int(rng.integers(1, 5)), int(rng.integers(1, 5))
        dets = [rng.uniform(0, 1, size=(K, 4)) for _ in range(T)]
        m = rng.uniform(0, 1, size=(T, N, 4))
        V = rng.uniform(0.001, 0.01, size=(T, N, 4))
        phi = [rng.uniform(0.01, 0.05, size=(K, 4)) for _ in range(T)]
        eta, _ = tracker.e_w_step(dets, m, V, phi)
        direct, _ = tracker.e_w_direct(dets, m, V, phi)
        for e, d in zip(eta, direct):
            row_err = max(row_err, float(np.max(np.abs(e.sum(axis=1) - 1))))
            rel = max(rel, float(np.max(np.abs(e - d) / np.maximum(np.abs(d), 1e-300))))
    o = np.array([[0.3, 0.6, 0.4, 0.2]])
    _, betas = tracker.e_w_direct([o], o[None], np.zeros((1, 1, 4)), [np.ones((1, 4))])
    lb = tracker.log_beta_frame(o, o, np.zeros((1, 4)), np.ones((1, 4)))
    triv = max(abs(betas[0][0, 0] - (2 * math.pi) ** -2), abs(math.exp(lb[0, 0]) - (2 * math.pi) ** -2))
    record(3, row_err < 1e-9 and rel < 1e-9 and triv < 1e-12,
           f"row-sum err {row_err:.1e}; log-domain vs direct rel err {rel:.1e} (< 1e-9); "
           f"trivial beta err {triv:.1e} (< 1e-12)")


# ------------------------------------------------------------------ 4

def test_criterion_04_hungarian():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n, m = (int(v) for v in rng.integers(1, 7, size=2))
        C = rng.integers(0, 50, size=(n, m)).astype(float)
        _, total = metrics.hungarian(C)
        if n <= m:
            brute = min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
        else:
            brute = min(sum(C[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))
        mismatches += total != brute
    record(4, mismatches == 0, f"{mismatches} mismatches vs exhaustive search on 1000 matrices up to 6x6")


# ------------------------------------------------------------------ 5

def test_criterion_05_kalman_consistency():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        T = 30
        start = np.array([0.2, 0.8, 0.28, 0.6]) + rng.uniform(-0.1, 0.1)
        vel = rng.uniform(-0.01, 0.01, size=2)
        gt = (start + np.arange(T)[:, None] * np.array([vel[0], vel[1], vel[0], vel[1]]))[:, None, :]
        dets = [g + 0.003 * rng.standard_normal(g.shape) for g in gt]
        sc = SceneData(dets, labels=[np.zeros(1, int)] * T, gt=gt)
        cfg = TrackerConfig(I=5, r_phi=0.04)
        res = vkf.vkf_track(sc, cfg)
        phi = tracker.fixed_phi(sc, cfg.r_phi)[0][0]
        lam = np.concatenate([phi, phi])
        ms, Vs = vkf.kalman_filter(np.stack([d[0] for d in dets]), dets[0][0], np.diag(lam), np.diag(phi),
                                   np.diag(lam))
        worst = max(worst, float(np.abs(res.m[:, 0] - ms).max()),
                    float(np.abs(res.V[:, 0] - np.diagonal(Vs, axis1=1, axis2=2)).max()))
    record(5, worst < 1e-6, f"VKF (N=1) vs textbook Kalman filter: max |diff| {worst:.1e} (< 1e-6) over 5 scenes")


# ------------------------------------------------------------------ 6

def _box(x, y, w=0.05, h=0.15):
    return np.array([x, y, x + w, y - h])


def _rows(tracks):
    return np.array([[f, i, *b] for i, fr in tracks.items() for f, b in fr.items()], dtype=float)


def test_criterion_06_metric_arithmetic():
    gt = {i: {f: _box(0.3 * (i - 1), 0.9) for f in range(1, 11)} for i in range(1, 4)}
    hyp = {i: dict(v) for i, v in gt.items()}
    del hyp[1][4], hyp[1][5]                                  # 2 FN
    hyp[9] = {7: _box(0.9, 0.2)}                              # 1 FP
    hyp[3] = {f: b for f, b in gt[3].items() if f < 6}
    hyp[4] = {f: b for f, b in gt[3].items() if f >= 6}       # 1 IDS
    rep = metrics.evaluate(_rows(gt), _rows(hyp))
    perfect = metrics.evaluate(_rows(gt), _rows(gt))
    ok = ((rep.num_gt, rep.fn, rep.fp, rep.ids) == (30, 2, 1, 1) and abs(rep.mota - 0.86667) < 1e-5
          and abs(rep.mota - (1 - 4 / 30)) < 1e-9
          and perfect.mota == perfect.motp == perfect.idf1 == 1.0)
    record(6, ok, f"GT 30 / FN {rep.fn} / FP {rep.fp} / IDS {rep.ids} -> MOTA {rep.mota:.5f}; perfect -> "
                  f"MOTA {perfect.mota} MOTP {perfect.motp} IDF1 {perfect.idf1}")


# ------------------------------------------------------------------ 7

def test_criterion_07_m_step_recovery():
    rng = np.random.default_rng(7)
    L = np.array([[2.0, 0, 0, 0], [0.5, 1.5, 0, 0], [0.2, -0.3, 1.8, 0], [0.1, 0.4, -0.2, 1.2]]) * 1e-3
    sigma = L @ L.T
    T, K = 2500, 4                                             # 10^4 frame-detections
    m = rng.uniform(0.1, 0.9, size=(T, K, 4))
    dets = [m[t] + rng.standard_normal((K, 4)) @ L.T for t in range(T)]
    eta = [np.eye(K)] * T                                      # ground-truth assignments
    phi = tracker.m_step_phi(dets, eta, m, np.zeros((T, K, 4)))
    avg = np.mean([p for frame in phi for p in frame], axis=0)
    err = float(np.linalg.norm(avg - sigma) / np.linalg.norm(sigma))
    record(7, err < 0.2, f"averaged Eq. (34) Phi vs true covariance: relative Frobenius error {err:.3f} (< 0.20)")


# ------------------------------------------------------------------ 8

def test_criterion_08_training_sanity(tmp_path):
    t0 = time.perf_counter()
    cfg = synth.TrajectoryConfig(seed=0)
    synth.gen_dataset(cfg, 2000, 500, tmp_path / "data")
    tr = synth.read_sequences(tmp_path / "data" / "train.txt")
    va = synth.read_sequences(tmp_path / "data" / "val.txt")
    res = pretrain.train(tr, va, pretrain.TrainConfig(max_epochs=400, seed=0), out_checkpoint=tmp_path / "m.ckpt")
    elapsed = time.perf_counter() - t0
    model = pretrain.one_step_rmse(res.params, va, burn_in=1)
    cp = pretrain.constant_position_rmse(va, burn_in=1)
    model_all = pretrain.one_step_rmse(res.params, va)
    cp_all = pretrain.constant_position_rmse(va)
    # early stopping on a constructed plateau: improves for 10 epochs, then flat
    small = tr[:16]
    plateau = pretrain.train(small, va[:8], pretrain.TrainConfig(max_epochs=500, batch_size=8, seed=0),
                             val_loss_fn=lambda p, e: 1.0 / (e + 1) if e < 10 else 0.1)
    fired = plateau.stopped_early and plateau.epochs_run == 60 and plateau.best_epoch == 10
    record(8, elapsed < 900 and model < cp and fired,
           f"2000/500 split, {res.epochs_run} epochs in {elapsed / 60:.1f} min (< 15); one-step val RMSE "
           f"(targets s_3..s_T) {model:.4f} vs constant-position {cp:.4f} "
           f"[all targets incl. s_2: {model_all:.4f} vs {cp_all:.4f}]; "
           f"plateau stop after {plateau.epochs_run} epochs (best {plateau.best_epoch}, patience 50)")


# ------------------------------------------------------------------ 9

SCENES_9 = 8


def test_criterion_09_end_to_end(default_params):
    t0 = time.perf_counter()
    cfg = TrackerConfig()
    out = {}
    for scen, noise in (("separated", 0.0), ("sinusoidal", 0.02), ("crossing+dropout", 0.02)):
        scenes = dataio.synth_benchmark(SuiteConfig(scenarios=(scen,), scenes_per_scenario=SCENES_9, noise=noise))
        out[scen] = bench.run_suite(scenes, default_params, cfg, curves=False)["table"][scen]
    elapsed = time.perf_counter() - t0
    a = out["separated"]["dvae"]["mota"]
    b_d, b_v = out["sinusoidal"]["dvae"]["mota"], out["sinusoidal"]["vkf"]["mota"]
    c_d, c_v = out["crossing+dropout"]["dvae"]["ids"], out["crossing+dropout"]["vkf"]["ids"]
    lines = [f"(a) separated, sigma=0: DVAE MOTA {a:.4f} (>= 0.99)",
             f"(b) sinusoidal, sigma=2%: DVAE MOTA {b_d:.4f} vs VKF {b_v:.4f}",
             f"(c) crossing+dropout: DVAE IDS {c_d} vs VKF IDS {c_v} "
             f"(MOTA {out['crossing+dropout']['dvae']['mota']:.4f} vs {out['crossing+dropout']['vkf']['mota']:.4f})",
             f"{3 * SCENES_9} scenes in {elapsed / 60:.1f} min (< 30)"]
    record(9, a >= 0.99 and b_d >= b_v and c_d <= c_v and elapsed < 1800, "; ".join(lines))


# ------------------------------------------------------------------ 10

R_PHI_GRID = (0.01, 0.04, 0.08)


def test_criterion_10_r_phi_sweep(default_params):
    # detection noise matched to the middle of the grid ("around the matched noise ratio")
    scenes = dataio.synth_benchmark(SuiteConfig(scenes_per_scenario=4, noise=R_PHI_GRID[1]))
    sweep = bench.r_phi_sweep(scenes, default_params, TrackerConfig(), values=R_PHI_GRID)
    mota = sweep["mota"]
    table = ", ".join(f"r={r}: {m:.4f}" for r, m in zip(sweep["r_phi"], mota))
    record(10, mota[1] >= max(mota[0], mota[2]),
           f"MOTA over {len(scenes)} scenes with noise {R_PHI_GRID[1]}: {table} (maximum not only at an extreme)")


# ------------------------------------------------------------------ 11

def _bytes_of(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".log.csv") and p.name != "manifest.json"
            and not p.name.endswith(".manifest.json")}


def test_criterion_11_determinism(tmp_path):
    def pipeline(root: Path):
        steps = [
            ["synth-data", "--out", str(root / "data"), "--train", "24", "--val", "8", "--length", "20"],
            ["pretrain", "--data", str(root / "data"), "--out", str(root / "m.ckpt"), "--max-epochs", "3",
             "--batch", "8"],
            ["synth-benchmark", "--out", str(root / "scenes"), "--scenes", "1", "--length", "20"],
            ["track", "--detections", str(root / "scenes" / "scene_0002" / "det.txt"), "--out",
             str(root / "track"), "--ckpt", str(root / "m.ckpt"), "--iters", "4", "--init-iters", "2",
             "--init-window", "8"],
            ["evaluate", "--gt", str(root / "scenes" / "scene_0002" / "gt.txt"), "--results",
             str(root / "track" / "results.txt"), "--out", str(root / "eval.json")],
            ["benchmark", "--ckpt", str(root / "m.ckpt"), "--scenarios", "separated,crossing+dropout",
             "--scenes", "1", "--length", "20", "--iters", "3", "--init-iters", "2", "--init-window", "8",
             "--out", str(root / "bench")],
        ]
        for argv in steps:
            assert cli.main(argv) == 0, argv
        return _bytes_of(root)

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    diff = sorted(k for k in a if a.get(k) != b.get(k))
    manifests = sorted((tmp_path / "a").rglob("*manifest.json"))
    replays = [cli.replay(mp, tmp_path / "replay" / f"{i}") for i, mp in enumerate(manifests)]
    replay_ok = bool(manifests) and all(r["identical"] for r in replays)
    bad = [str(mp.relative_to(tmp_path)) for mp, r in zip(manifests, replays) if not r["identical"]]
    record(11, same and replay_ok,
           f"two seeded pipeline runs bit-identical over {len(a)} artifacts (differing: {diff or 'none'}); "
           f"{len(manifests)} manifests replayed, mismatches: {bad or 'none'}")


# ------------------------------------------------------------------ 12

def test_criterion_12_mot17_optional(tmp_path, default_params):
    root = os.environ.get("DVAE_UMOT_MOT17")
    if not root:
        RESULTS.append("[SKIP] criterion 12: set DVAE_UMOT_MOT17 to a directory with gt.txt and det.txt")
        pytest.skip("optional real-data path: DVAE_UMOT_MOT17 not set")
    root = Path(root)
    scenes, stats = dataio.build_benchmark(root / "gt.txt", root / "det.txt", SceneConfig(), T=60,
                                           out_dir=tmp_path / "scenes")
    rep = bench.run_suite(scenes, default_params, TrackerConfig(), curves=False)
    table = rep["table"]["all"]
    ok = len(scenes) > 0 and all(v is not None for row in table.values() for v in row.values())
    (tmp_path / "report.json").write_text(json.dumps(bench.strip_arrays(rep), default=float))
    record(12, ok, f"{len(scenes)} MOT17 scenes; DVAE MOTA {table['dvae']['mota']:.4f}, "
                   f"VKF MOTA {table['vkf']['mota']:.4f}; {stats}")
