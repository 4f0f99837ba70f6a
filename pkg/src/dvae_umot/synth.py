"""Piecewise-elementary synthetic bounding-box trajectories.

Each of ``x`` (left), ``y`` (top) and ``w`` (width) is a chain of segments,
each segment one of: static, constant velocity, constant acceleration or
sinusoidal.  Free constants are solved so every segment starts where the
previous one would have been at the boundary frame.  The height is
``w * r_hw`` with ``r_hw`` drawn once per track, and boxes are stored as
``(l, t, r, b) = (x, y, x + w, y - h)`` in a y-up frame.

Distribution defaults are plausible pedestrian-like magnitudes in normalised
image units; they are stand-ins, not values measured on any real dataset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

SEGMENT_KINDS = ("static", "velocity", "acceleration", "sinusoidal")
MIN_SIZE = 1e-4


@dataclass
class TrajectoryConfig:
    T: int = 60
    s_max: int = 3
    seg_type_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    min_segment: int = 5
    a1: tuple = (0.0, 0.005)          # (mu, sigma) per frame
    a2: tuple = (0.0, 2e-4)           # per frame^2
    omega: tuple = (0.1, 0.05)        # rad / frame
    phi0: tuple = (0.0, float(np.pi))
    w0: tuple = (float(np.log(0.08)), 0.5)    # log-normal (mu, sigma) of log w0
    r_hw: tuple = (float(np.log(2.5)), 0.3)   # log-normal (mu, sigma) of log(h/w)
    sin_min_abs: float = 1e-6
    max_amplitude_ratio: float = 2.0   # cap on |amplitude / start value| of sinusoids
    sin_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        self.seg_type_probs = tuple(float(p) for p in self.seg_type_probs)
        for name in ("a1", "a2", "omega", "phi0", "w0", "r_hw"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        p = np.asarray(self.seg_type_probs)
        if p.shape != (4,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"seg_type_probs must be a 4-simplex, got {self.seg_type_probs}")
        for name in ("a1", "a2", "omega", "phi0", "w0", "r_hw"):
            if getattr(self, name)[1] < 0:
                raise ValueError(f"{name}: sigma must be >= 0")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        if self.min_segment < 1:
            raise ValueError("min_segment must be >= 1")
        if self.max_amplitude_ratio < 1.0:
            raise ValueError("max_amplitude_ratio must be >= 1")

    @classmethod
    def from_mapping(cls, m: dict) -> "TrajectoryConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown trajectory config keys: {sorted(unknown)}")
        return cls(**m)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_params(cfg: TrajectoryConfig, rng: np.random.Generator) -> dict:
    return {
        "a1": rng.normal(*cfg.a1),
        "a2": rng.normal(*cfg.a2),
        "omega": rng.normal(*cfg.omega),
        "phi0": rng.normal(*cfg.phi0),
    }


def gen_segment(kind: str, params: dict, start_value: float, t_range) -> np.ndarray:
    """Evaluate one elementary segment at frames ``t_range``.

    Time is measured from ``t_range[0]``, where the result equals
    ``start_value``.  ``a2`` is the per-frame² acceleration (the second
    difference), so the quadratic coefficient is ``a2 / 2``.  For the sinusoid the amplitude is solved from the
    phase; a phase whose sine is (near) zero raises ``ValueError`` unless the
    start value is zero as well.
    """
    t = np.asarray(t_range, dtype=np.float64)
    tau = t - t[0]
    if kind == "static":
        return np.full(t.shape, float(start_value))
    if kind == "velocity":
        return params["a1"] * tau + start_value
    if kind == "acceleration":
        return 0.5 * params["a2"] * tau**2 + params["a1"] * tau + start_value
    if kind == "sinusoidal":
        sin0 = np.sin(params["phi0"])
        if start_value == 0.0:
            amp = params.get("amplitude", 0.0)
        elif abs(sin0) < params.get("sin_min_abs", 1e-6):
            raise ValueError("sinusoid phase too close to a zero crossing")
        else:
            amp = start_value / sin0
        return amp * np.sin(params["omega"] * tau + params["phi0"])
    raise ValueError(f"unknown segment kind {kind!r}")


def _sinusoid_params(cfg, rng, start):
    """Resample the phase until the solved amplitude is acceptable, else None."""
    for _ in range(cfg.sin_retries):
        p = sample_params(cfg, rng)
        s0 = np.sin(p["phi0"])
        if abs(s0) < cfg.sin_min_abs:
            continue
        if abs(1.0 / s0) > cfg.max_amplitude_ratio:
            continue
        p["sin_min_abs"] = cfg.sin_min_abs
        return p
    return None


def sample_splits(cfg: TrajectoryConfig, rng: np.random.Generator) -> list[int]:
    """Segment start frames (0-based, first is always 0)."""
    n_seg = int(rng.integers(1, cfg.s_max + 1))
    n_seg = max(1, min(n_seg, cfg.T // cfg.min_segment))
    slack = cfg.T - n_seg * cfg.min_segment
    # uniform composition of the slack over the segments
    cuts = np.sort(rng.integers(0, slack + 1, size=n_seg - 1))
    lengths = np.diff(np.concatenate([[0], cuts, [slack]])) + cfg.min_segment
    return [0] + list(np.cumsum(lengths)[:-1].astype(int))


def gen_sequence(
    cfg: TrajectoryConfig,
    rng: np.random.Generator,
    start: float | None = None,
    splits: list[int] | None = None,
    kinds: list[str] | None = None,
) -> np.ndarray:
    """One coordinate sequence of length ``T`` chained from random segments."""
    if start is None:
        start = rng.uniform(0.0, 1.0)
    if splits is None:
        splits = sample_splits(cfg, rng)
    bounds = list(splits) + [cfg.T]
    out = np.empty(cfg.T)
    value = float(start)
    probs = np.asarray(cfg.seg_type_probs)
    for i in range(len(splits)):
        a, b = bounds[i], bounds[i + 1]
        kind = kinds[i] if kinds is not None else SEGMENT_KINDS[rng.choice(4, p=probs)]
        if kind == "sinusoidal":
            params = _sinusoid_params(cfg, rng, value)
            if params is None:
                kind, params = "static", {}
        else:
            params = sample_params(cfg, rng)
        # evaluate one frame past the segment end: that value seeds the next segment
        seg = gen_segment(kind, params, value, np.arange(a, b + 1))
        out[a:b] = seg[:-1]
        value = float(seg[-1])
    return out


@dataclass
class Track:
    boxes: np.ndarray          # (T, 4) l, t, r, b
    r_hw: float
    splits: list = field(default_factory=list)


def gen_bbox_track(cfg: TrajectoryConfig, rng: np.random.Generator, kinds=None) -> Track:
    """A ``(T, 4)`` box track; x, y and w share one set of split points."""
    x0, y0 = rng.uniform(0.0, 1.0, size=2)
    w0 = float(np.exp(rng.normal(*cfg.w0)))
    r_hw = float(np.exp(rng.normal(*cfg.r_hw)))
    splits = sample_splits(cfg, rng) if kinds is None else _even_splits(cfg, len(kinds))
    x = gen_sequence(cfg, rng, x0, splits, kinds)
    y = gen_sequence(cfg, rng, y0, splits, kinds)
    w = gen_sequence(cfg, rng, w0, splits, kinds)
    w = np.maximum(w, MIN_SIZE)
    h = np.maximum(w * r_hw, MIN_SIZE)
    boxes = np.stack([x, y, x + w, y - h], axis=1)
    return Track(boxes, r_hw, splits)


def _even_splits(cfg, n):
    return [int(round(i * cfg.T / n)) for i in range(n)]


def sequence_rng(seed: int, split: int, index: int) -> np.random.Generator:
    """Independent stream per (split, sequence index) so output does not depend on work order."""
    return np.random.default_rng(np.random.SeedSequence([seed, split, index]))


def average_speed(boxes: np.ndarray) -> float:
    centre = np.stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2], axis=1)
    return float(np.linalg.norm(np.diff(centre, axis=0), axis=1).mean())


def write_sequences(path, seqs) -> None:
    """Text dataset: header ``T count``, one ``l t r b`` line per frame, blank line between sequences."""
    seqs = list(seqs)
    T = seqs[0].shape[0] if seqs else 0
    lines = [f"{T} {len(seqs)}"]
    for s in seqs:
        lines.append("")
        lines.extend(" ".join(f"{v:.9g}" for v in row) for row in s)
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequences(path) -> np.ndarray:
    """Inverse of :func:`write_sequences`; returns ``(count, T, 4)``."""
    text = Path(path).read_text().strip("\n").split("\n")
    if not text or not text[0].strip():
        raise ValueError(f"{path}: empty dataset file")
    try:
        T, count = (int(v) for v in text[0].split())
    except ValueError:
        raise ValueError(f"{path}: bad header line {text[0]!r}") from None
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 values, got {len(vals)}")
        rows.append([float(v) for v in vals])
    data = np.asarray(rows, dtype=np.float64)
    if data.shape[0] != T * count:
        raise ValueError(f"{path}: expected {T * count} frames, found {data.shape[0]}")
    return data.reshape(count, T, 4)


def gen_dataset(cfg: TrajectoryConfig, n_train: int, n_val: int, out_path, bins: int = 20) -> dict:
    """Write ``train.txt``, ``val.txt`` and ``stats.json`` into ``out_path``."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": (0, n_train), "val": (1, n_val)}
    speeds = []
    for name, (split_id, n) in splits.items():
        seqs = [gen_bbox_track(cfg, sequence_rng(cfg.seed, split_id, i)).boxes for i in range(n)]
        speeds.extend(average_speed(s) for s in seqs)
        write_sequences(out / f"{name}.txt", seqs)
    speeds = np.asarray(speeds)
    counts, edges = np.histogram(speeds, bins=bins) if speeds.size else (np.zeros(bins), np.zeros(bins + 1))
    stats = {
        "n_train": n_train,
        "n_val": n_val,
        "T": cfg.T,
        "config": cfg.to_dict(),
        "average_speed": {
            "mean": float(speeds.mean()) if speeds.size else None,
            "histogram_counts": [int(c) for c in counts],
            "histogram_edges": [float(e) for e in edges],
        },
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats
