"""Unsupervised SRNN pre-training: Adam on the teacher-forced negative ELBO
with per-epoch shuffling and patience-based early stopping (§VI-B2)."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import srnn
from .srnn import SrnnParams


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    patience: int = 50
    max_epochs: int = 2000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_seed: int | None = None   # weight init seed; defaults to ``seed``
    val_noise_seed: int = 12345    # frozen reparameterisation noise for validation

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @classmethod
    def from_mapping(cls, m: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**m)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, arrays: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, lr: float | None = None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are left untouched.  Non-finite gradients raise before anything
    is updated.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ValueError(f"{k}: grad shape {grads[k].shape} != param shape {params[k].shape}")
        if not np.isfinite(grads[k]).all():
            raise DivergenceError(f"non-finite gradient for {k}; step aborted")
    lr = cfg.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


# --------------------------------------------------------- early stopping

class EarlyStopping:
    """Stop once ``patience`` epochs have passed without a new best value."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, value: float) -> bool:
        """Record one epoch's validation loss; returns True when training should stop."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# ------------------------------------------------------------- losses

def loss_and_grads(params: SrnnParams, batch: np.ndarray, noise: np.ndarray):
    """Mean per-frame negative ELBO of a ``(B, T, 4)`` batch and its gradients."""
    tape = ad.Tape()
    P = params.on_tape(tape)
    s = np.ascontiguousarray(np.transpose(batch, (1, 0, 2)))
    B, T = batch.shape[0], batch.shape[1]
    loss = ad.scale(srnn.sequence_elbo(P, s, noise=noise), 1.0 / (B * T))
    g = ad.backward(tape, loss)
    return float(loss.data), {k: g[P[k].id] for k in P}


def evaluate_loss(params: SrnnParams, data: np.ndarray, noise_seed: int, batch_size: int = 1024) -> float:
    """Mean per-frame negative ELBO over ``data`` with frozen noise."""
    rng = np.random.default_rng(noise_seed)
    n, T = data.shape[0], data.shape[1]
    noise = rng.standard_normal((T, n, srnn.Z_DIM))
    P = params.constants()
    total = 0.0
    for a in range(0, n, batch_size):
        b = min(n, a + batch_size)
        s = np.transpose(data[a:b], (1, 0, 2))
        total += float(srnn.sequence_elbo(P, s, noise=noise[:, a:b]).data)
    return total / (n * T)


def one_step_predictions(params: SrnnParams, data: np.ndarray) -> np.ndarray:
    """Teacher-forced one-step predictions of ``s_t`` for ``t >= 2``.

    ``h_t`` is computed from the true ``s_{1:t-1}``; the latent is carried as
    the encoder mean up to ``t-1`` and set to the prior mean at ``t``, so
    ``s_t`` itself is never seen by the prediction.  Returns ``(n, T-1, 4)``.
    """
    P = params.constants()
    s = np.transpose(np.asarray(data, dtype=np.float64), (1, 0, 2))
    T, n, _ = s.shape
    st = srnn.SrnnState.zeros(n)
    h, c, z_prev = st.h, st.c, st.z_prev
    s_prev = np.zeros((n, srnn.X_DIM))
    preds = np.empty((T - 1, n, srnn.X_DIM))
    for t in range(T):
        h, c = srnn.lstm_step(P, s_prev, h, c)
        if t >= 1:
            z_pred = srnn.prior_z(P, h, z_prev).mean
            preds[t - 1] = srnn.decode_s(P, h, z_pred).mean.data
        z_prev = srnn.encode_z(P, h, s[t], z_prev).mean
        s_prev = s[t]
    return np.transpose(preds, (1, 0, 2))


def one_step_rmse(params: SrnnParams, data: np.ndarray, burn_in: int = 0) -> float:
    """RMSE of the one-step predictions of ``s_{2+burn_in} .. s_T``.

    ``burn_in = 1`` drops the prediction of ``s_2``, the only one made from a
    single observed frame (the model then still sees the ``s_0 = 0`` start).
    """
    pred = one_step_predictions(params, data)
    return float(np.sqrt(np.mean((pred[:, burn_in:] - data[:, 1 + burn_in:]) ** 2)))


def constant_position_rmse(data: np.ndarray, burn_in: int = 0) -> float:
    """RMSE of predicting ``s_t = s_{t-1}`` over the same targets as :func:`one_step_rmse`."""
    data = np.asarray(data)
    return float(np.sqrt(np.mean((data[:, 1 + burn_in:] - data[:, burn_in:-1]) ** 2)))


# ------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: SrnnParams           # best-validation parameters
    best_epoch: int
    best_val: float
    epochs_run: int
    stopped_early: bool
    diverged: bool
    log: list                    # per-epoch dicts


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "elapsed_s")


def train(
    train_data: np.ndarray,
    val_data: np.ndarray,
    cfg: TrainConfig,
    out_checkpoint=None,
    log_path=None,
    init_params: SrnnParams | None = None,
    progress=None,
    val_loss_fn=None,
) -> TrainResult:
    """Train the SRNN; the best-validation parameters are saved to ``out_checkpoint``.

    ``val_loss_fn(params, epoch)`` overrides the validation loss (used to
    exercise the stopping rule on a constructed plateau).  On divergence the
    run stops and the best checkpoint so far is retained.
    """
    train_data = np.asarray(train_data, dtype=np.float64)
    val_data = np.asarray(val_data, dtype=np.float64)
    if train_data.ndim != 3 or train_data.shape[0] == 0:
        raise ValueError("training set is empty or malformed")
    if val_data.ndim != 3 or val_data.shape[0] == 0:
        raise ValueError("validation set is empty or malformed")
    params = init_params.copy() if init_params is not None else SrnnParams.init(
        cfg.seed if cfg.init_seed is None else cfg.init_seed)
    arrays = params.arrays
    opt = AdamState.zeros_like(arrays)
    stopper = EarlyStopping(cfg.patience)
    best = params.copy()
    log = []
    n, T = train_data.shape[0], train_data.shape[1]
    diverged = stopped = False
    t0 = time.perf_counter()
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_FIELDS)
    try:
        for epoch in range(cfg.max_epochs):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
            order = rng.permutation(n)   # Fisher-Yates under the hood
            total, count = 0.0, 0
            try:
                for a in range(0, n, cfg.batch_size):
                    idx = order[a : a + cfg.batch_size]
                    noise = rng.standard_normal((T, idx.size, srnn.Z_DIM))
                    loss, grads = loss_and_grads(SrnnParams(arrays), train_data[idx], noise)
                    arrays, opt = adam_step(arrays, grads, opt, cfg)
                    total += loss * idx.size
                    count += idx.size
                cur = SrnnParams(arrays)
                if val_loss_fn is not None:
                    val = float(val_loss_fn(cur, epoch))
                else:
                    val = evaluate_loss(cur, val_data, cfg.val_noise_seed)
                if not np.isfinite(val):
                    raise DivergenceError(f"non-finite validation loss at epoch {epoch + 1}")
            except (ad.NonFiniteError, DivergenceError, FloatingPointError):
                diverged = True
                break
            stop = stopper.update(val)
            row = {
                "epoch": epoch + 1,
                "train_loss": total / count,
                "val_loss": val,
                "lr": cfg.lr,
                "elapsed_s": round(time.perf_counter() - t0, 3),
            }
            log.append(row)
            if log_file is not None:
                writer.writerow([row[k] if k in ("epoch", "lr", "elapsed_s") else repr(row[k]) for k in LOG_FIELDS])
                log_file.flush()
            if stopper.improved:
                best = SrnnParams({k: v.copy() for k, v in arrays.items()})
                if out_checkpoint is not None:
                    _save(best, out_checkpoint, epoch + 1, cfg, val)
            if progress is not None:
                progress(row)
            if stop:
                stopped = True
                break
    finally:
        if log_file is not None:
            log_file.close()
    if out_checkpoint is not None and stopper.best_epoch < 0:
        # nothing improved (diverged in epoch 1): keep the initial weights on disk
        _save(best, out_checkpoint, 0, cfg, None)
    best.meta = {"best_epoch": stopper.best_epoch + 1, "best_val": stopper.best, "train_config": cfg.to_dict()}
    return TrainResult(best, stopper.best_epoch + 1, float(stopper.best), len(log), stopped, diverged, log)


def _save(params, path, epoch, cfg, val):
    srnn.save_checkpoint(
        params, path, epoch=epoch, seed=cfg.seed,
        extra={"train_config": cfg.to_dict(), "val_loss": val},
    )
