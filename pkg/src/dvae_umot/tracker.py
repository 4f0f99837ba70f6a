"""DVAE-UMOT variational-EM tracker (Algorithm 1 of the paper).

One iteration runs, in order:

* E-W: assignment posterior ``eta[t][k, n]`` (Eqs. 31-32), in the log domain;
* E-Z / E-S: per-object sweep over ``t`` in the §V-B sampling order, fusing
  the dynamical prediction with the soft-assigned detections (Eqs. 27-28);
* optional DVAE fine-tuning (Eq. 33) and optional Φ update (Eq. 34).

Shapes: ``m`` and ``V`` are ``(T, N, 4)`` (``V`` holds the diagonal) or, in the
full-covariance path enabled by the Eq.-34 flag, ``V`` is ``(T, N, 4, 4)``.
Detections and Φ are ragged lists indexed by frame: ``dets[t]`` is
``(K_t, 4)`` and ``phi[t]`` is ``(K_t, 4)`` (diagonal) or ``(K_t, 4, 4)``.
All boxes are normalised ``(l, t, r, b)`` with y pointing up.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import srnn
from .srnn import SrnnParams, Tensor

LOG2PI = math.log(2.0 * math.pi)
UNDERFLOW_LOG = -700.0
PHI_FLOOR = 1e-8


# ------------------------------------------------------------------ types

@dataclass
class SceneData:
    """Per-frame detections of one scene, plus optional ground truth.

    ``labels[t][k]`` is the generating object of detection ``k`` (or -1);
    ``gt`` is a ``(T, N_gt, 4)`` array with NaN rows where an object is absent.
    """

    detections: list
    labels: list | None = None
    gt: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dets = []
        for t, d in enumerate(self.detections):
            a = np.asarray(d, dtype=np.float64).reshape(-1, 4)
            if a.size and not np.isfinite(a).all():
                raise ValueError(f"frame {t + 1}: non-finite detection")
            if a.size and (np.any(a[:, 2] <= a[:, 0]) or np.any(a[:, 1] <= a[:, 3])):
                raise ValueError(f"frame {t + 1}: invalid box (need r > l and t > b)")
            dets.append(a)
        self.detections = dets
        if self.labels is not None:
            self.labels = [np.asarray(l, dtype=int).reshape(-1) for l in self.labels]
            for t, (l, d) in enumerate(zip(self.labels, dets)):
                if l.shape[0] != d.shape[0]:
                    raise ValueError(f"frame {t + 1}: {l.shape[0]} labels for {d.shape[0]} detections")

    @property
    def T(self) -> int:
        return len(self.detections)

    @property
    def K1(self) -> int:
        return self.detections[0].shape[0] if self.detections else 0

    def validate(self):
        if self.T < 1:
            raise ValueError("scene has no frames")
        if self.K1 < 1:
            raise ValueError("scene has no detections at frame 1 (K_1 = 0)")

    def window(self, a: int, b: int) -> "SceneData":
        return SceneData(self.detections[a:b])


@dataclass
class TrackerConfig:
    r_phi: float = 0.04
    J: int = 30
    I0: int = 20
    I: int = 70
    fine_tune: bool = False
    fine_tune_lr: float = 1e-4
    m_step_phi: bool = False
    dynamics: str = "dvae"
    seed: int = 0
    n_objects: int | None = None
    record_history: bool = False
    underflow_uniform: bool = False   # spec fallback: uniform η when every log β < -700
    decoder_input: str = "mean"       # chain-B LSTM input: fused "mean" (default) or "sample" (§V-B literal)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (0.0 < self.r_phi < 1.0):
            raise ValueError(f"r_phi must lie in (0, 1), got {self.r_phi}")
        if self.J < 2:
            raise ValueError("J must be >= 2")
        if self.I < 1 or self.I0 < 1:
            raise ValueError("I and I0 must be >= 1")
        if self.dynamics not in ("dvae", "linear"):
            raise ValueError(f"dynamics must be 'dvae' or 'linear', got {self.dynamics!r}")
        if self.decoder_input not in ("sample", "mean"):
            raise ValueError(f"decoder_input must be 'sample' or 'mean', got {self.decoder_input!r}")
        if not self.fine_tune_lr > 0:
            raise ValueError("fine_tune_lr must be > 0")
        if self.n_objects is not None and self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")

    @classmethod
    def from_mapping(cls, m: dict) -> "TrackerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown tracker config keys: {sorted(unknown)}")
        return cls(**m)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrackResult:
    m: np.ndarray                 # (T, N, 4) position estimates
    V: np.ndarray                 # (T, N, 4) or (T, N, 4, 4)
    eta: list                     # per frame (K_t, N)
    assignments: list             # per frame (K_t,) argmax_n eta
    s_sample: np.ndarray
    z_sample: np.ndarray | None
    phi: list
    init_m: np.ndarray
    diagnostics: dict
    params: SrnnParams | None = None


# --------------------------------------------------------------- Φ

def _box_size(b):
    return b[..., 2] - b[..., 0], b[..., 1] - b[..., 3]


def fixed_phi(scene: SceneData, r_phi: float) -> list:
    """Diagonal Φ per (t, k) from frame-1 box sizes (§V-C).

    Slot ``k < K_1`` uses frame-1 detection ``k``; slots beyond ``K_1``
    (frames with more detections than frame 1) use the detection's own size.
    """
    if not (0.0 < r_phi < 1.0):
        raise ValueError(f"r_phi must lie in (0, 1), got {r_phi}")
    scene.validate()
    first = scene.detections[0]
    w1, h1 = _box_size(first)
    if np.any(w1 <= 0) or np.any(h1 <= 0):
        raise ValueError("degenerate frame-1 box (non-positive width or height)")
    base = r_phi**2 * np.stack([w1**2, h1**2, w1**2, h1**2], axis=1)
    out = []
    for d in scene.detections:
        K = d.shape[0]
        ph = np.empty((K, 4))
        n = min(K, base.shape[0])
        ph[:n] = base[:n]
        if K > n:
            w, h = _box_size(d[n:])
            ph[n:] = r_phi**2 * np.stack([w**2, h**2, w**2, h**2], axis=1)
        out.append(ph)
    return out


# -------------------------------------------------------------- E-W step

def _full(phi_t):
    return phi_t.ndim == 3


def log_beta_frame(o, m, V, phi):
    """``log β[k, n]`` for one frame (Eq. 32) in the log domain."""
    K, N = o.shape[0], m.shape[0]
    if K == 0:
        return np.zeros((0, N))
    if not _full(phi) and V.ndim == 2:
        diff = o[:, None, :] - m[None, :, :]                       # (K, N, 4)
        inv = 1.0 / phi[:, None, :]
        quad = np.sum(diff * diff * inv, axis=2)
        logdet = np.sum(np.log(phi), axis=1)[:, None]
        tr = np.sum(V[None, :, :] * inv, axis=2)
        return -0.5 * (4 * LOG2PI + logdet + quad) - 0.5 * tr
    Phi = phi if _full(phi) else np.stack([np.diag(p) for p in phi])
    Vf = V if V.ndim == 3 else np.stack([np.diag(v) for v in V])
    out = np.empty((K, N))
    for k in range(K):
        L = np.linalg.cholesky(Phi[k])
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        Pinv = np.linalg.inv(Phi[k])
        for n in range(N):
            d = o[k] - m[n]
            quad = float(d @ Pinv @ d)
            tr = float(np.trace(Pinv @ Vf[n]))
            out[k, n] = -0.5 * (4 * LOG2PI + logdet + quad) - 0.5 * tr
    return out


def e_w_step(dets: list, m: np.ndarray, V: np.ndarray, phi: list, underflow_uniform: bool = False):
    """Assignment posterior; returns ``(eta, n_underflow)``.

    Each row is normalised after subtracting its max log β, so it is finite
    for any distance.  Rows whose log β are all below -700 (where a direct
    evaluation of β would underflow) are counted; with ``underflow_uniform``
    they are replaced by the uniform distribution instead of keeping the
    relative weights.
    """
    eta, under = [], 0
    N = m.shape[1]
    for t, o in enumerate(dets):
        lb = log_beta_frame(o, m[t], V[t], phi[t])
        if lb.shape[0] == 0:
            eta.append(lb)
            continue
        rowmax = lb.max(axis=1, keepdims=True)
        e = np.exp(lb - rowmax)
        e /= e.sum(axis=1, keepdims=True)
        bad = rowmax[:, 0] < UNDERFLOW_LOG
        if bad.any():
            under += int(bad.sum())
            if underflow_uniform:
                e[bad] = 1.0 / N
        eta.append(e)
    return eta, under


def e_w_direct(dets: list, m: np.ndarray, V: np.ndarray, phi: list):
    """Reference Eqs. (31)-(32) evaluated without logs (diagonal path only)."""
    eta, betas = [], []
    for t, o in enumerate(dets):
        K, N = o.shape[0], m.shape[1]
        beta = np.empty((K, N))
        for k in range(K):
            for n in range(N):
                var = phi[t][k]
                d = o[k] - m[t, n]
                dens = np.prod(np.exp(-0.5 * d * d / var) / np.sqrt(2 * np.pi * var))
                beta[k, n] = dens * np.exp(-0.5 * np.sum(V[t, n] / var))
        betas.append(beta)
        eta.append(beta / beta.sum(axis=1, keepdims=True) if K else beta)
    return eta, betas


def assignment_entropy(eta: list) -> float:
    rows = [e for e in eta if e.shape[0]]
    if not rows:
        return 0.0
    E = np.concatenate(rows, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(E > 0, E * np.log(E), 0.0).sum(axis=1)
    return float(h.mean())


# ------------------------------------------------------------- fusion

def fuse(eta_t, o_t, phi_t, mu, v):
    """Eqs. (27)-(28) for one frame and all objects.

    ``eta_t`` (K, N), ``o_t`` (K, 4), ``phi_t`` (K, 4) or (K, 4, 4), prior
    mean ``mu`` (N, 4) and diagonal variance ``v`` (N, 4).  Returns ``(m, V)``
    with ``V`` diagonal (N, 4) in the diagonal path, (N, 4, 4) otherwise.
    """
    if not _full(phi_t):
        inv = 1.0 / phi_t                                          # (K, 4)
        prec = eta_t.T @ inv + 1.0 / v                             # (N, 4)
        info = eta_t.T @ (inv * o_t) + mu / v
        V = 1.0 / prec
        return V * info, V
    N = mu.shape[0]
    Pinv = np.linalg.inv(phi_t)                                    # (K, 4, 4)
    m = np.empty((N, 4))
    V = np.empty((N, 4, 4))
    for n in range(N):
        prec = np.diag(1.0 / v[n])
        info = mu[n] / v[n]
        for k in range(o_t.shape[0]):
            prec = prec + eta_t[k, n] * Pinv[k]
            info = info + eta_t[k, n] * (Pinv[k] @ o_t[k])
        Vn = np.linalg.inv(prec)
        V[n] = 0.5 * (Vn + Vn.T)
        m[n] = V[n] @ info
    return m, V


def sample_gaussian(m, V, eps):
    """``m + sqrt(V) eps`` (diagonal) or ``m + chol(V) eps`` (full)."""
    if V.ndim == m.ndim:
        return m + np.sqrt(V) * eps
    L = np.linalg.cholesky(V)
    return m + np.einsum("nij,nj->ni", L, eps)


# ------------------------------------------------------------ E-S step

class DvaeDynamics:
    """SRNN-driven E-Z/E-S sweep following the §V-B sampling order."""

    name = "dvae"

    def __init__(self, params: SrnnParams, decoder_input: str = "sample"):
        self.params = params
        self.P = params.constants()
        self.decoder_input = decoder_input

    def set_params(self, params: SrnnParams):
        self.params = params
        self.P = params.constants()

    def sweep(self, eta, dets, phi, s_prev_iter, rng, window_state=None):
        """One E-Z/E-S pass over a (window of a) sequence.

        For each t: the encoder reads ``h`` computed from the previous
        iteration's samples together with ``s^{(i-1)}_t`` and the current
        ``z^{(i)}_{t-1}``; the decoder reads ``h`` computed from the current
        samples ``s^{(i)}_{1:t-1}`` and ``z^{(i)}_t``; the decoded Gaussian is
        fused with the detections and ``s^{(i)}_t`` is sampled from the result.
        With ``decoder_input == "mean"`` the decoder-side LSTM reads the fused
        means ``m^{(i)}_{1:t-1}`` instead of the samples (the encoder side and
        the returned samples are unchanged).
        """
        P = self.P
        T, N, _ = s_prev_iter.shape
        st = srnn.SrnnState.zeros(N)
        hA, cA = st.h, st.c              # LSTM over s^{(i-1)}
        hB, cB = st.h, st.c              # LSTM over s^{(i)}
        z_prev = st.z_prev
        sA_prev = np.zeros((N, srnn.X_DIM))
        sB_prev = np.zeros((N, srnn.X_DIM))
        full = _full(phi[0]) if phi and phi[0].size else False
        m = np.empty((T, N, 4))
        V = np.empty((T, N, 4, 4)) if full else np.empty((T, N, 4))
        s_out = np.empty((T, N, 4))
        z_out = np.empty((T, N, srnn.Z_DIM))
        eps_z = rng.standard_normal((T, N, srnn.Z_DIM))
        eps_s = rng.standard_normal((T, N, 4))
        for t in range(T):
            hA, cA = srnn.lstm_step(P, sA_prev, hA, cA)
            q = srnn.encode_z(P, hA, s_prev_iter[t], z_prev)
            z = srnn.reparam_sample(q, eps=eps_z[t])
            hB, cB = srnn.lstm_step(P, sB_prev, hB, cB)
            dec = srnn.decode_s(P, hB, z)
            mu, v = dec.mean.data, dec.var
            m[t], V[t] = fuse(eta[t], dets[t], phi[t], mu, v)
            s_out[t] = sample_gaussian(m[t], V[t], eps_s[t])
            z_out[t] = z.data
            z_prev = z
            sA_prev = s_prev_iter[t]
            sB_prev = s_out[t] if self.decoder_input == "sample" else m[t]
        return m, V, s_out, {"z": z_out, "eps_z": eps_z}

    def window_init(self, prev_result, T_next):
        """Constant initialisation for the next cascade window: previous final m."""
        last = prev_result["m"][-1]
        return np.repeat(last[None], T_next, axis=0), None


def e_s_step(dets, eta, phi, params: SrnnParams, s_prev_iter, rng):
    """Functional wrapper around :meth:`DvaeDynamics.sweep`; returns ``(m, V, s, z)``."""
    m, V, s, extra = DvaeDynamics(params).sweep(eta, dets, phi, np.asarray(s_prev_iter, float), rng)
    return m, V, s, extra["z"]


# --------------------------------------------------------- E-Z fine-tune

def finetune_objective(P, s_prev_iter, s_cur, eps_z) -> Tensor:
    """Eq. (33) summed over objects: Σ_t log p_θs(s_t|·) − Σ_t KL(q_φz ‖ p_θz).

    ``s_prev_iter`` and ``s_cur`` are ``(T, N, 4)``; ``eps_z`` freezes the
    reparameterisation noise so ``z^{(i)}`` is recomputed on the tape.
    """
    T, N, _ = s_cur.shape
    st = srnn.SrnnState.zeros(N)
    hA, cA = st.h, st.c
    hB, cB = st.h, st.c
    z_prev = st.z_prev
    sA_prev = np.zeros((N, srnn.X_DIM))
    sB_prev = np.zeros((N, srnn.X_DIM))
    total = None
    for t in range(T):
        hA, cA = srnn.lstm_step(P, sA_prev, hA, cA)
        q = srnn.encode_z(P, hA, s_prev_iter[t], z_prev)
        z = srnn.reparam_sample(q, eps=eps_z[t])
        hB, cB = srnn.lstm_step(P, sB_prev, hB, cB)
        p = srnn.prior_z(P, hB, z_prev)
        dec = srnn.decode_s(P, hB, z)
        term = ad.sub(srnn.gaussian_logpdf(s_cur[t], dec), srnn.kl_diag(q, p))
        total = term if total is None else ad.add(total, term)
        z_prev = z
        sA_prev = s_prev_iter[t]
        sB_prev = s_cur[t]
    return total


class FineTuner:
    """Adam ascent on Eq. (33); keeps its optimizer state across iterations."""

    def __init__(self, lr: float):
        from .pretrain import TrainConfig  # local import: pretrain imports nothing from here
        self.cfg = TrainConfig(lr=lr)
        self.state = None
        self.skipped = 0

    def step(self, params: SrnnParams, s_prev_iter, s_cur, eps_z) -> SrnnParams:
        from .pretrain import AdamState, adam_step
        tape = ad.Tape()
        P = params.on_tape(tape)
        try:
            obj = finetune_objective(P, s_prev_iter, s_cur, eps_z)
            loss = ad.neg(obj)
            g = ad.backward(tape, loss)
            grads = {k: g[P[k].id] for k in P}
            if self.state is None:
                self.state = AdamState.zeros_like(params.arrays)
            arrays, self.state = adam_step(params.arrays, grads, self.state, self.cfg)
        except FloatingPointError:
            self.skipped += 1
            return params
        return SrnnParams(arrays, dict(params.meta))


def e_z_finetune(dets, s_prev_iter, s_cur, eps_z, params: SrnnParams, cfg: TrackerConfig,
                 tuner: FineTuner | None = None) -> SrnnParams:
    """One fine-tuning step on the current samples; identity when disabled."""
    if not cfg.fine_tune:
        return params
    tuner = tuner or FineTuner(cfg.fine_tune_lr)
    return tuner.step(params, s_prev_iter, s_cur, eps_z)


# ------------------------------------------------------------- M step

def m_step_phi(dets, eta, m, V) -> list:
    """Eq. (34): ``Φ_tk = Σ_n η_tkn ((o−m)(o−m)ᵀ + V_tn)`` as full matrices, floored to PD."""
    out = []
    for t, o in enumerate(dets):
        K, N = o.shape[0], m.shape[1]
        ph = np.zeros((K, 4, 4))
        Vf = V[t] if V[t].ndim == 3 else np.stack([np.diag(v) for v in V[t]])
        for k in range(K):
            acc = np.zeros((4, 4))
            for n in range(N):
                d = o[k] - m[t, n]
                acc += eta[t][k, n] * (np.outer(d, d) + Vf[n])
            acc = 0.5 * (acc + acc.T)
            lo = np.linalg.eigvalsh(acc)[0]
            if lo < PHI_FLOOR:
                acc = acc + (PHI_FLOOR - lo) * np.eye(4)
            ph[k] = acc
        out.append(ph)
    return out


# ------------------------------------------------------------- EM loop

def _run_em(dyn, dets, phi, m, V, s, n_iter, rng, cfg, diag, tuner=None, history=None,
            window_state=None):
    """``n_iter`` EM iterations on one (sub)sequence; returns the final state."""
    eta = None
    extra = {}
    if window_state is None and hasattr(dyn, "start_state"):
        # the linear prior at the first frame is pinned to the initial estimate
        window_state = dyn.start_state(m[0], phi, m.shape[1])
    for _ in range(n_iter):
        eta, under = e_w_step(dets, m, V, phi, cfg.underflow_uniform)
        diag["underflow_events"] += under
        m_new, V_new, s_new, extra = dyn.sweep(eta, dets, phi, s, rng, window_state=window_state)
        if cfg.fine_tune and dyn.name == "dvae":
            dyn.set_params(e_z_finetune(dets, s, s_new, extra["eps_z"], dyn.params, cfg, tuner))
        if cfg.m_step_phi:
            phi = m_step_phi(dets, eta, m_new, V_new)
        if history is not None:
            diag["entropy"].append(assignment_entropy(eta))
            diag["movement"].append(float(np.mean(np.abs(m_new - m))))
            if cfg.record_history:
                history.append(m_new.copy())
        m, V, s = m_new, V_new, s_new
    return {"m": m, "V": V, "s": s, "eta": eta, "phi": phi, "extra": extra}


def _initial_V(phi, N, T):
    base = phi[0][:N]
    if base.ndim == 3:
        base = np.stack([np.diag(b) for b in base])
    return np.repeat(base[None], T, axis=0).copy()


def cascade_init(scene: SceneData, dyn, cfg: TrackerConfig, rng, phi=None, diag=None):
    """Algorithm 2: piece-wise constant initialisation of ``m`` (and ``s``).

    Window 1 starts from the frame-1 detections repeated (object ``n`` ←
    detection ``n``); each window is refined with ``I0`` iterations and the
    next window starts constant at the dynamics' hand-over value (final
    ``m`` for the DVAE, the linear prediction for the VKF).  The last window
    does not need to be run.  Returns ``(m0, V0)``.
    """
    scene.validate()
    phi = fixed_phi(scene, cfg.r_phi) if phi is None else phi
    diag = diag if diag is not None else _new_diag()
    N = _n_objects(scene, cfg)
    T = scene.T
    bounds = list(range(0, T, cfg.J)) + [T]
    m0 = np.empty((T, N, 4))
    init = np.repeat(scene.detections[0][:N][None], bounds[1] - bounds[0], axis=0)
    window_state = None
    for w in range(len(bounds) - 1):
        a, b = bounds[w], bounds[w + 1]
        m0[a:b] = init
        if w == len(bounds) - 2:
            break
        dets_w, phi_w = scene.detections[a:b], phi[a:b]
        V_w = _initial_V(phi, N, b - a)
        res = _run_em(dyn, dets_w, phi_w, init.copy(), V_w, init.copy(), cfg.I0, rng, cfg, diag,
                      window_state=window_state)
        init, window_state = dyn.window_init(res, bounds[w + 2] - b)
    V0 = _initial_V(phi, N, T)
    return m0, V0


def _n_objects(scene, cfg):
    N = scene.K1 if cfg.n_objects is None else cfg.n_objects
    if N > scene.K1:
        raise ValueError(f"n_objects={N} exceeds the {scene.K1} frame-1 detections")
    return N


def _new_diag():
    return {"entropy": [], "movement": [], "underflow_events": 0}


def _make_dynamics(cfg, params):
    if cfg.dynamics == "dvae":
        if params is None:
            raise ValueError("DVAE dynamics need SRNN parameters (checkpoint)")
        return DvaeDynamics(params, cfg.decoder_input)
    from .vkf import LinearDynamics
    return LinearDynamics()


def track(scene: SceneData, params: SrnnParams | None, cfg: TrackerConfig | None = None) -> TrackResult:
    """Full DVAE-UMOT (or VKF with ``dynamics='linear'``) run on one scene."""
    cfg = cfg or TrackerConfig()
    scene.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EAC]))
    dyn = _make_dynamics(cfg, params)
    phi = fixed_phi(scene, cfg.r_phi)
    diag = _new_diag()
    m0, V0 = cascade_init(scene, dyn, cfg, rng, phi=phi, diag=diag)
    # the cascade's own iterations are not part of the reported diagnostics
    diag = {"entropy": [], "movement": [], "underflow_events": diag["underflow_events"],
            "init_underflow_events": diag["underflow_events"]}
    history = []
    tuner = FineTuner(cfg.fine_tune_lr) if cfg.fine_tune else None
    res = _run_em(dyn, scene.detections, phi, m0.copy(), V0, m0.copy(), cfg.I, rng, cfg, diag,
                  tuner=tuner, history=history)
    eta = res["eta"]
    assign = [np.argmax(e, axis=1) if e.shape[0] else np.zeros(0, dtype=int) for e in eta]
    diag["config"] = cfg.to_dict()
    diag["fine_tune_skipped"] = tuner.skipped if tuner else 0
    if cfg.record_history:
        diag["m_history"] = history
    return TrackResult(
        m=res["m"], V=res["V"], eta=eta, assignments=assign, s_sample=res["s"],
        z_sample=res["extra"].get("z"), phi=res["phi"], init_m=m0, diagnostics=diag,
        params=dyn.params if cfg.dynamics == "dvae" else None,
    )
