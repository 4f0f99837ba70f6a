"""Linear-dynamics (VKF-style) baseline.

The E-W step and the Gaussian fusion are shared with the DVAE tracker; only
the prediction differs.  Each object carries an 8-d state ``[box, velocity]``
under the constant-velocity transition ``A = [[I, I], [0, I]]`` with fixed
diagonal process noise ``Λ``.  The prior at frame 1 is ``[m_1, 0]`` with
covariance ``diag(Φ_n, Λ_vel)``; after fusing the η-weighted detections
(Eqs. 27-28 with the linear prediction as the prior) the velocity is updated
by exact Kalman conditioning on the box.  This is a reconstruction: the
original VKF equations live in the cited external work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tracker as trk
from .autodiff import Tensor
from .srnn import GaussianDiag

A_CV = np.block([[np.eye(4), np.eye(4)], [np.zeros((4, 4)), np.eye(4)]])
H_BOX = np.hstack([np.eye(4), np.zeros((4, 4))])


@dataclass
class LinearState:
    """Batched filtered state: ``mean`` (N, 8), ``cov`` (N, 8, 8), process noise ``lam`` (N, 8)."""

    mean: np.ndarray
    cov: np.ndarray
    lam: np.ndarray

    def copy(self) -> "LinearState":
        return LinearState(self.mean.copy(), self.cov.copy(), self.lam.copy())


def predict_state(state: LinearState) -> LinearState:
    mean = state.mean @ A_CV.T
    cov = np.einsum("ij,njk,lk->nil", A_CV, state.cov, A_CV) + np.stack([np.diag(l) for l in state.lam])
    return LinearState(mean, 0.5 * (cov + np.transpose(cov, (0, 2, 1))), state.lam)


def box_marginal(state: LinearState) -> GaussianDiag:
    mean = state.mean[:, :4]
    var = np.stack([np.diag(c)[:4] for c in state.cov])
    return GaussianDiag(Tensor(mean), Tensor(np.log(var)))


def vkf_predict(state: LinearState) -> GaussianDiag:
    """Predicted box Gaussian ``H (A μ)``, ``diag(H (A Σ Aᵀ + Λ) Hᵀ)``."""
    return box_marginal(predict_state(state))


def kalman_update(pred: LinearState, eta_t, o_t, phi_t) -> LinearState:
    """Condition the predicted state on the η-weighted detections of one frame.

    The weighted detections are summarised as one observation with precision
    ``Σ_k η Φ⁻¹`` and information ``Σ_k η Φ⁻¹ o``; objects that receive no
    weight keep their prediction.
    """
    N = pred.mean.shape[0]
    mean, cov = pred.mean.copy(), pred.cov.copy()
    full = phi_t.ndim == 3
    for n in range(N):
        if o_t.shape[0] == 0:
            continue
        w = eta_t[:, n]
        if full:
            Pinv = np.linalg.inv(phi_t)
            prec = np.einsum("k,kij->ij", w, Pinv)
            info = np.einsum("k,kij,kj->i", w, Pinv, o_t)
        else:
            prec = np.diag(w @ (1.0 / phi_t))
            info = w @ (o_t / phi_t)
        if not np.any(prec):
            continue
        # Information form of the gain: with R = prec⁻¹, S⁻¹ = (I + prec HPHᵀ)⁻¹ prec,
        # which never inverts prec (η weights can be as small as 1e-300).
        G = np.linalg.solve(np.eye(4) + prec @ H_BOX @ cov[n] @ H_BOX.T, np.eye(4))
        PHt = cov[n] @ H_BOX.T
        mean[n] = mean[n] + PHt @ (G @ (info - prec @ (H_BOX @ mean[n])))
        c = cov[n] - PHt @ (G @ prec) @ PHt.T
        cov[n] = 0.5 * (c + c.T)
    return LinearState(mean, cov, pred.lam)


def initial_state(m1: np.ndarray, phi_slots: np.ndarray) -> LinearState:
    """Prior at a sequence start: mean ``[m_1, 0]``, covariance ``diag(Φ_n, Λ_vel)`` with ``Λ = [Φ_n, Φ_n]``."""
    N = m1.shape[0]
    lam = np.concatenate([phi_slots, phi_slots], axis=1)
    mean = np.concatenate([m1, np.zeros((N, 4))], axis=1)
    cov = np.stack([np.diag(l) for l in lam])
    return LinearState(mean, cov, lam)


class LinearDynamics:
    """Constant-velocity dynamics plugged into the shared EM loop."""

    name = "linear"
    params = None

    def start_state(self, m1, phi, N):
        ph = phi[0][:N]
        if ph.ndim == 3:
            ph = np.stack([np.diag(p) for p in ph])
        return initial_state(np.asarray(m1, float), ph)

    def sweep(self, eta, dets, phi, s_prev_iter, rng, window_state=None):
        T, N, _ = s_prev_iter.shape
        if window_state is None:
            window_state = self.start_state(s_prev_iter[0], phi, N)
        full = bool(phi and phi[0].ndim == 3)
        m = np.empty((T, N, 4))
        V = np.empty((T, N, 4, 4)) if full else np.empty((T, N, 4))
        state = window_state
        states = []
        for t in range(T):
            pred = state if t == 0 else predict_state(state)
            state = kalman_update(pred, eta[t], dets[t], phi[t])
            states.append(state)
            m[t] = state.mean[:, :4]
            box_cov = state.cov[:, :4, :4]
            V[t] = box_cov if full else np.diagonal(box_cov, axis1=1, axis2=2)
        return m, V, m.copy(), {"states": states, "final_state": state}

    def window_init(self, prev_result, T_next):
        """Next window starts constant at the one-step linear prediction from the last frame."""
        nxt = predict_state(prev_result["extra"]["final_state"])
        return np.repeat(nxt.mean[None, :, :4], T_next, axis=0), nxt


def vkf_track(scene: "trk.SceneData", cfg: "trk.TrackerConfig | None" = None) -> "trk.TrackResult":
    """VKF baseline: :func:`tracker.track` with linear dynamics."""
    cfg = cfg or trk.TrackerConfig()
    d = cfg.to_dict()
    d["dynamics"] = "linear"
    d["fine_tune"] = False
    return trk.track(scene, None, trk.TrackerConfig(**d))


def kalman_filter(obs: np.ndarray, m1: np.ndarray, P0: np.ndarray, R: np.ndarray, Q: np.ndarray):
    """Textbook Kalman filter for a single object with one detection per frame.

    ``obs`` (T, 4); state ``[box, velocity]`` with prior ``(m1 ⊕ 0, P0)`` at
    frame 1 (no prediction before the first update), observation matrix
    ``[I 0]``, noise ``R`` (4, 4) and ``Q`` (8, 8).  Returns filtered box
    means (T, 4) and box covariances (T, 4, 4).
    """
    x = np.concatenate([m1, np.zeros(4)])
    P = P0.copy()
    ms, Vs = [], []
    for t, z in enumerate(obs):
        if t > 0:
            x = A_CV @ x
            P = A_CV @ P @ A_CV.T + Q
        S = H_BOX @ P @ H_BOX.T + R
        K = P @ H_BOX.T @ np.linalg.inv(S)
        x = x + K @ (z - H_BOX @ x)
        P = (np.eye(8) - K @ H_BOX) @ P
        ms.append(x[:4].copy())
        Vs.append(P[:4, :4].copy())
    return np.array(ms), np.array(Vs)
