"""SRNN dynamical VAE over 4-d bounding boxes.

Generative side::

    h_t         = LSTM(s_{t-1}, h_{t-1})
    p(z_t | .)  = N(dz(h_t, z_{t-1}))
    p(s_t | .)  = N(ds(h_t, z_t))

Causal inference side, sharing the same ``h_t``::

    q(z_t | .)  = N(ez(h_t, s_t, z_{t-1}))

Every head emits ``[mean, logvar]`` with logvar clamped to ``[-12, 4]``.
All functions here take batched inputs of shape ``(B, dim)`` and operate on
:class:`~dvae_umot.autodiff.Tensor` values, so the same code serves training
(on a tape) and inference (constants only).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

X_DIM = 4
Z_DIM = 4
H_DIM = 8
LOGVAR_MIN = -12.0
LOGVAR_MAX = 4.0
LOG2PI = float(np.log(2.0 * np.pi))

CHECKPOINT_MAGIC = b"DVAESRNN"
CHECKPOINT_VERSION = 1

# (name, fan_in, fan_out) for every dense layer, in storage order
_DENSE = [
    ("dz.0", H_DIM + Z_DIM, 8),
    ("dz.1", 8, 8),
    ("dz.2", 8, 2 * Z_DIM),
    ("ds.0", H_DIM + Z_DIM, 16),
    ("ds.1", 16, 2 * X_DIM),
    ("ez.0", H_DIM + X_DIM + Z_DIM, 16),
    ("ez.1", 16, 8),
    ("ez.2", 8, 2 * Z_DIM),
]
_HEAD_DEPTH = {"dz": 3, "ds": 2, "ez": 3}


def param_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {
        "lstm.w_ih": (X_DIM, 4 * H_DIM),
        "lstm.w_hh": (H_DIM, 4 * H_DIM),
        "lstm.b": (1, 4 * H_DIM),
    }
    for name, fin, fout in _DENSE:
        shapes[f"{name}.w"] = (fin, fout)
        shapes[f"{name}.b"] = (1, fout)
    return shapes


PARAM_SHAPES = param_shapes()
N_PARAMS = int(sum(np.prod(s) for s in PARAM_SHAPES.values()))


@dataclass
class SrnnParams:
    """Named float64 weight arrays of the SRNN."""

    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(PARAM_SHAPES) - set(self.arrays)
        extra = set(self.arrays) - set(PARAM_SHAPES)
        if missing or extra:
            raise ValueError(f"bad parameter set: missing={sorted(missing)} extra={sorted(extra)}")
        for k, shp in PARAM_SHAPES.items():
            a = np.asarray(self.arrays[k], dtype=np.float64)
            if a.shape != shp:
                raise ValueError(f"{k}: expected shape {shp}, got {a.shape}")
            self.arrays[k] = a

    @classmethod
    def init(cls, seed: int = 0) -> "SrnnParams":
        """Uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for k, shp in PARAM_SHAPES.items():
            if k.endswith(".b"):
                arrays[k] = np.zeros(shp)
            else:
                # LSTM blocks follow the usual 1/sqrt(hidden) convention
                fan_in = H_DIM if k.startswith("lstm.") else shp[0]
                bound = 1.0 / np.sqrt(fan_in)
                arrays[k] = rng.uniform(-bound, bound, size=shp)
        return cls(arrays, meta={"init_seed": seed})

    @classmethod
    def zeros(cls) -> "SrnnParams":
        return cls({k: np.zeros(s) for k, s in PARAM_SHAPES.items()})

    def copy(self) -> "SrnnParams":
        return SrnnParams({k: v.copy() for k, v in self.arrays.items()}, dict(self.meta))

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.arrays.items()}

    def on_tape(self, tape: ad.Tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v, name=k) for k, v in self.arrays.items()}

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


@dataclass
class GaussianDiag:
    mean: Tensor
    logvar: Tensor

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)


@dataclass
class SrnnState:
    """Recurrent state for a batch: LSTM ``h``/``c`` plus previous ``z`` and ``s``."""

    h: Tensor
    c: Tensor
    z_prev: Tensor
    s_prev: Tensor

    @classmethod
    def zeros(cls, batch: int = 1) -> "SrnnState":
        return cls(
            Tensor(np.zeros((batch, H_DIM))),
            Tensor(np.zeros((batch, H_DIM))),
            Tensor(np.zeros((batch, Z_DIM))),
            Tensor(np.zeros((batch, X_DIM))),
        )


_ONES: dict[int, Tensor] = {}


def _ones(batch: int) -> Tensor:
    t = _ONES.get(batch)
    if t is None:
        t = _ONES[batch] = Tensor(np.ones((batch, 1)))
    return t


def dense(P, name: str, x: Tensor) -> Tensor:
    return ad.affine(x, P[f"{name}.w"], P[f"{name}.b"])


def _head(P, prefix: str, x: Tensor) -> GaussianDiag:
    depth = _HEAD_DEPTH[prefix]
    for i in range(depth - 1):
        x = ad.tanh(dense(P, f"{prefix}.{i}", x))
    out = dense(P, f"{prefix}.{depth - 1}", x)
    half = out.shape[1] // 2
    mean = ad.slice(out, 0, half, axis=1)
    logvar = ad.clip(ad.slice(out, half, 2 * half, axis=1), LOGVAR_MIN, LOGVAR_MAX)
    return GaussianDiag(mean, logvar)


def lstm_step(P, s_prev: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; gate blocks ordered input, forget, cell, output."""
    hc = ad.lstm_cell(s_prev, h, c, P["lstm.w_ih"], P["lstm.w_hh"], P["lstm.b"])
    return ad.slice(hc, 0, H_DIM, axis=1), ad.slice(hc, H_DIM, 2 * H_DIM, axis=1)


def advance(P, state: SrnnState, s_prev) -> SrnnState:
    """Feed ``s_prev`` into the LSTM, returning a state whose ``h`` is ``h_t``."""
    s_prev = ad.as_tensor(s_prev)
    h, c = lstm_step(P, s_prev, state.h, state.c)
    return SrnnState(h, c, state.z_prev, s_prev)


def prior_z(P, h: Tensor, z_prev) -> GaussianDiag:
    return _head(P, "dz", ad.concat([h, ad.as_tensor(z_prev)], axis=1))


def decode_s(P, h: Tensor, z) -> GaussianDiag:
    return _head(P, "ds", ad.concat([h, ad.as_tensor(z)], axis=1))


def encode_z(P, h: Tensor, s, z_prev) -> GaussianDiag:
    return _head(P, "ez", ad.concat([h, ad.as_tensor(s), ad.as_tensor(z_prev)], axis=1))


def reparam_sample(g: GaussianDiag, rng: np.random.Generator | None = None, eps=None) -> Tensor:
    """``mean + exp(logvar / 2) * eps``; pass ``eps`` to freeze the noise."""
    if eps is None:
        eps = rng.standard_normal(g.mean.shape)
    return ad.reparam(g.mean, g.logvar, eps)


def gaussian_logpdf(x, g: GaussianDiag) -> Tensor:
    """Diagonal Gaussian log density, summed over every element (dims and batch)."""
    return ad.neg(ad.gaussian_nll(x, g.mean, g.logvar))


def kl_diag(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over every element."""
    return ad.kl_gauss(q.mean, q.logvar, p.mean, p.logvar)


def _as_batch_seq(s_seq) -> np.ndarray:
    s = np.asarray(s_seq, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, None, :]
    if s.ndim != 3 or s.shape[2] != X_DIM:
        raise ValueError(f"expected (T, 4) or (T, B, 4) sequence, got {s.shape}")
    return s


def sequence_elbo(
    P,
    s_seq,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    mode: str = "teacher_forced",
) -> Tensor:
    """Negative ELBO of teacher-forced sequences, summed over time and batch.

    ``s_seq`` is ``(T, 4)`` or ``(T, B, 4)``.  One reparameterised sample of
    ``z_t`` per step; ``noise`` of shape ``(T, B, 4)`` freezes it.
    """
    if mode != "teacher_forced":
        raise ValueError(f"unsupported mode {mode!r}")
    s = _as_batch_seq(s_seq)
    T, B, _ = s.shape
    if T < 2:
        raise ValueError("sequence_elbo needs T >= 2")
    if noise is None:
        noise = rng.standard_normal((T, B, Z_DIM))
    state = SrnnState.zeros(B)
    h, c, z_prev = state.h, state.c, state.z_prev
    s_prev = np.zeros((B, X_DIM))
    terms = []
    for t in range(T):
        h, c = lstm_step(P, s_prev, h, c)
        q = encode_z(P, h, s[t], z_prev)
        z = reparam_sample(q, eps=noise[t])
        p = prior_z(P, h, z_prev)
        d = decode_s(P, h, z)
        try:
            terms.append(ad.add(kl_diag(q, p), ad.gaussian_nll(s[t], d.mean, d.logvar)))
        except ad.NonFiniteError as e:
            raise ad.NonFiniteError(f"elbo at t={t + 1}", e.index) from e
        z_prev = z
        s_prev = s[t]
    loss = terms[0]
    for term in terms[1:]:
        loss = ad.add(loss, term)
    return loss


def generate(params: SrnnParams, s_seed, T: int, rng: np.random.Generator) -> np.ndarray:
    """Roll the generative model forward ``T`` steps after ``s_seed``.

    The seed box is absorbed as the first observation (with ``z_1`` drawn
    from the encoder), then each step samples ``z`` from the prior and feeds
    back the decoder mean.
    """
    P = params.constants()
    seed = np.asarray(s_seed, dtype=np.float64).reshape(1, X_DIM)
    st = SrnnState.zeros(1)
    h, c = lstm_step(P, st.s_prev, st.h, st.c)
    z = reparam_sample(encode_z(P, h, seed, st.z_prev), rng)
    s_prev = Tensor(seed)
    out = np.empty((T, X_DIM))
    for t in range(T):
        h, c = lstm_step(P, s_prev, h, c)
        z = reparam_sample(prior_z(P, h, z), rng)
        s_prev = decode_s(P, h, z).mean
        out[t] = s_prev.data[0]
    return out


# -------------------------------------------------------------- checkpoints

def save_checkpoint(params: SrnnParams, path, epoch: int = 0, seed: int | None = None, extra=None):
    """Write params to the versioned binary container (see docs/checkpoint_format.md)."""
    names = list(PARAM_SHAPES)
    table, offset = [], 0
    for k in names:
        n = int(np.prod(PARAM_SHAPES[k]))
        table.append({"name": k, "shape": list(PARAM_SHAPES[k]), "offset": offset, "count": n})
        offset += n
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dims": {"x": X_DIM, "z": Z_DIM, "h": H_DIM},
        "n_params": N_PARAMS,
        "epoch": int(epoch),
        "seed": seed,
        "arrays": table,
        "meta": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for k in names:
        buf.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> SrnnParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SRNN checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("n_params") != N_PARAMS:
        raise ValueError(f"{path}: parameter count {header.get('n_params')} != {N_PARAMS}")
    payload = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    if payload.size != N_PARAMS:
        raise ValueError(f"{path}: payload holds {payload.size} values, expected {N_PARAMS}")
    arrays = {}
    for entry in header["arrays"]:
        a = payload[entry["offset"] : entry["offset"] + entry["count"]]
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    meta = dict(header.get("meta", {}))
    meta.update(epoch=header.get("epoch"), seed=header.get("seed"))
    return SrnnParams(arrays, meta)


def default_checkpoint_path() -> Path:
    return Path(__file__).parent / "data" / "srnn_default.ckpt"
