"""MOTChallenge ingestion, coordinate conversion, benchmark-scene builders,
key=value configs and report emission.

Coordinates: files use MOTChallenge pixels ``(left, top, width, height)``
with y pointing down.  Internally boxes are normalised ``(l, t, r, b)`` with
y pointing up::

    l = left / W        r = (left + w) / W
    t = 1 - top / H     b = 1 - (top + h) / H
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics, synth
from .tracker import SceneData

log = logging.getLogger(__name__)

SYNTH_IMAGE_SIZE = 1000


class DataError(ValueError):
    """Malformed or missing input data (CLI exit code 2)."""


# ------------------------------------------------------------ coordinates

def normalize_box(left, top, w, h, W, H) -> np.ndarray:
    left, top, w, h = (np.asarray(v, dtype=np.float64) for v in (left, top, w, h))
    return np.stack([left / W, 1.0 - top / H, (left + w) / W, 1.0 - (top + h) / H], axis=-1)


def denormalize_box(box, W, H) -> np.ndarray:
    """Inverse of :func:`normalize_box`: ``(..., 4)`` → ``(left, top, w, h)`` pixels."""
    b = np.asarray(box, dtype=np.float64)
    left = b[..., 0] * W
    top = (1.0 - b[..., 1]) * H
    w = (b[..., 2] - b[..., 0]) * W
    h = (b[..., 1] - b[..., 3]) * H
    return np.stack([left, top, w, h], axis=-1)


@dataclass
class SceneConfig:
    img_width: float = 1920.0
    img_height: float = 1080.0
    first_frame: int | None = None
    last_frame: int | None = None
    track_count: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (self.img_width > 0 and self.img_height > 0):
            raise ValueError("image dimensions must be positive")
        if self.track_count < 1:
            raise ValueError("track_count must be >= 1")


# ------------------------------------------------------------ MOT files

def read_mot_rows(path, min_cols: int = 6) -> np.ndarray:
    """Raw MOTChallenge rows as floats; malformed rows raise with the line number."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: file not found")
    rows = []
    width = None
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [x.strip() for x in line.split(",")]
        if len(parts) < min_cols:
            raise DataError(f"{p}:{lineno}: expected at least {min_cols} comma-separated values")
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise DataError(f"{p}:{lineno}: non-numeric value in {line!r}") from None
        if not all(math.isfinite(v) for v in vals[:6]):
            raise DataError(f"{p}:{lineno}: non-finite value")
        if vals[0] < 1 or vals[0] != int(vals[0]):
            raise DataError(f"{p}:{lineno}: frame must be an integer >= 1")
        width = len(vals) if width is None else min(width, len(vals))
        rows.append(vals)
    if not rows:
        return np.zeros((0, 7))
    width = max(width, 7)
    out = np.full((len(rows), width), -1.0)
    for i, r in enumerate(rows):
        r = r[:width]
        out[i, : len(r)] = r
        if len(r) < 7:
            out[i, 6] = 1.0     # default confidence
    return out


def _valid_size(rows, path):
    ok = (rows[:, 4] > 0) & (rows[:, 5] > 0)
    if (~ok).any():
        log.warning("%s: skipped %d rows with non-positive size", path, int((~ok).sum()))
    return rows[ok]


def mot_rows_to_tracks(rows: np.ndarray, W, H) -> np.ndarray:
    """``(frame, id, l, t, r, b)`` normalised track-set rows from MOT rows."""
    if rows.shape[0] == 0:
        return np.zeros((0, 6))
    boxes = normalize_box(rows[:, 2], rows[:, 3], rows[:, 4], rows[:, 5], W, H)
    return np.column_stack([rows[:, 0], rows[:, 1], boxes])


def read_tracks(path, W, H, gt_filter: bool = False) -> np.ndarray:
    """Read a gt.txt / results file into normalised track-set rows.

    With ``gt_filter`` rows with confidence 0 (MOT17 'ignore') and, when a
    class column is present, non-pedestrian classes are dropped.
    """
    rows = _valid_size(read_mot_rows(path), path)
    if gt_filter and rows.shape[0]:
        keep = rows[:, 6] != 0
        if rows.shape[1] >= 8:
            keep &= (rows[:, 7] == 1) | (rows[:, 7] == -1)
        rows = rows[keep]
    return mot_rows_to_tracks(rows, W, H)


def parse_detections(path, scene_cfg: SceneConfig):
    """Per-frame normalised detections over the configured frame range.

    Returns ``(frames, dets, ids)`` where ``dets[i]`` is ``(K, 4)`` for frame
    ``frames[i]`` and ``ids[i]`` the id column (usually -1).
    """
    rows = _valid_size(read_mot_rows(path), path)
    if rows.shape[0] == 0:
        return [], [], []
    first = scene_cfg.first_frame or 1
    last = scene_cfg.last_frame or int(rows[:, 0].max())
    frames = list(range(first, last + 1))
    tracks = mot_rows_to_tracks(rows, scene_cfg.img_width, scene_cfg.img_height)
    dets, ids = [], []
    for f in frames:
        sel = tracks[tracks[:, 0] == f]
        dets.append(sel[:, 2:6].copy())
        ids.append(sel[:, 1].astype(int))
    return frames, dets, ids


def load_scene(det_path, scene_cfg: SceneConfig) -> SceneData:
    frames, dets, _ = parse_detections(det_path, scene_cfg)
    if not dets:
        raise DataError(f"{det_path}: no detections")
    scene = SceneData(dets, meta={"first_frame": frames[0]})
    try:
        scene.validate()
    except ValueError as e:
        raise DataError(f"{det_path}: {e}") from None
    return scene


def format_mot_rows(track_rows, W, H, det: bool = False) -> str:
    """MOTChallenge text for normalised track-set rows.

    Results use ``frame,id,left,top,w,h,1,-1,-1,-1``; with ``det`` the id
    column is kept as given (``-1`` for anonymous detections).
    """
    out = io.StringIO()
    rows = np.asarray(track_rows, dtype=np.float64).reshape(-1, 6)
    px = denormalize_box(rows[:, 2:6], W, H) if rows.shape[0] else np.zeros((0, 4))
    for r, b in zip(rows, px):
        out.write(f"{int(r[0])},{int(r[1])},{b[0]:.6f},{b[1]:.6f},{b[2]:.6f},{b[3]:.6f},1,-1,-1,-1\n")
    return out.getvalue()


def write_mot(path, track_rows, W, H):
    Path(path).write_text(format_mot_rows(track_rows, W, H))


# -------------------------------------------------------- scene folders

def write_scene(dirpath, scene: SceneData, W=SYNTH_IMAGE_SIZE, H=SYNTH_IMAGE_SIZE, extra_meta=None):
    """``scene_NNNN/{det.txt, gt.txt, meta.json}``; det ids are -1, labels go to meta."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    det_rows, labels = [], []
    for t, boxes in enumerate(scene.detections):
        for k, b in enumerate(boxes):
            det_rows.append([t + 1, -1, *b])
            labels.append(int(scene.labels[t][k]) if scene.labels is not None else -1)
    write_mot(d / "det.txt", np.asarray(det_rows).reshape(-1, 6), W, H)
    if scene.gt is not None:
        write_mot(d / "gt.txt", metrics.rows_from_estimates(scene.gt), W, H)
    meta = dict(scene.meta)
    meta.update(img_width=W, img_height=H, T=scene.T, det_labels=labels)
    if extra_meta:
        meta.update(extra_meta)
    (d / "meta.json").write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")


def read_scene(dirpath) -> SceneData:
    d = Path(dirpath)
    mp = d / "meta.json"
    if not mp.is_file():
        raise DataError(f"{mp}: file not found")
    meta = json.loads(mp.read_text())
    W, H, T = meta["img_width"], meta["img_height"], int(meta["T"])
    cfg = SceneConfig(W, H, 1, T)
    frames, dets, _ = parse_detections(d / "det.txt", cfg)
    if not dets:
        raise DataError(f"{d / 'det.txt'}: no detections")
    labels = None
    if meta.get("det_labels"):
        flat = list(meta["det_labels"])
        labels, i = [], 0
        for boxes in dets:
            labels.append(flat[i : i + boxes.shape[0]])
            i += boxes.shape[0]
    gt = None
    if (d / "gt.txt").is_file():
        rows = read_tracks(d / "gt.txt", W, H)
        ids = sorted({int(i) for i in rows[:, 1]})
        gt = np.full((T, len(ids), 4), np.nan)
        for r in rows:
            gt[int(r[0]) - 1, ids.index(int(r[1]))] = r[2:6]
    return SceneData(dets, labels=labels, gt=gt, meta=meta)


def scene_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: directory not found")
    return sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("scene_"))


# ------------------------------------------------------ build_benchmark

def match_detections(gt_frame, det_frame, threshold: float = 0.5):
    """Hungarian on ``1 - IoU``; returns ``[(gt_index, det_index)]`` with IoU ≥ threshold."""
    if len(gt_frame) == 0 or len(det_frame) == 0:
        return []
    M = metrics.iou_matrix(gt_frame, det_frame)
    cost = np.where(M >= threshold, 1.0 - M, np.inf)
    pairs, _ = metrics.hungarian(cost)
    return pairs


def build_benchmark(gt_file, det_file, scene_cfg: SceneConfig, T: int, out_dir=None,
                    iou_threshold: float = 0.5):
    """MOT17-3T-style scenes (§VI-C1).

    Detections are matched to GT per frame (Hungarian on 1-IoU, accepted at
    IoU ≥ 0.5); unmatched detections are discarded.  The frame range is cut
    into consecutive length-``T`` windows; in each, GT tracks present in
    every frame *and* detected at the window's first frame are eligible, and
    ``track_count`` of them are drawn at random.  Returns
    ``(scenes, stats)``.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    W, H = scene_cfg.img_width, scene_cfg.img_height
    gt = read_tracks(gt_file, W, H, gt_filter=True)
    det = read_tracks(det_file, W, H)
    if gt.shape[0] == 0:
        raise DataError(f"{gt_file}: no ground-truth rows")
    first = scene_cfg.first_frame or int(min(gt[:, 0].min(), det[:, 0].min() if det.size else np.inf))
    last = scene_cfg.last_frame or int(max(gt[:, 0].max(), det[:, 0].max() if det.size else 0))
    if det.size and (det[:, 0].max() < first or det[:, 0].min() > last):
        raise DataError("ground truth and detections do not overlap in time")
    # per-frame matching: gt id -> matched detection box
    matched: dict[int, dict[int, np.ndarray]] = {}
    gt_by: dict[int, dict[int, np.ndarray]] = {}
    n_det = n_kept = 0
    for f in range(first, last + 1):
        g = gt[gt[:, 0] == f]
        d = det[det[:, 0] == f]
        n_det += d.shape[0]
        gt_by[f] = {int(r[1]): r[2:6] for r in g}
        pairs = match_detections(g[:, 2:6], d[:, 2:6], iou_threshold)
        n_kept += len(pairs)
        matched[f] = {int(g[i, 1]): d[j, 2:6] for i, j in pairs}
    scenes, skipped = [], 0
    windows = [(a, a + T) for a in range(first, last + 2 - T, T)]
    for wi, (a, b) in enumerate(windows):
        frames = range(a, b)
        ids = set(gt_by[a])
        for f in frames:
            ids &= set(gt_by[f])
        ids = sorted(i for i in ids if i in matched[a])
        if len(ids) < scene_cfg.track_count:
            skipped += 1
            continue
        rng = np.random.default_rng(np.random.SeedSequence([scene_cfg.seed, wi]))
        chosen = sorted(int(i) for i in rng.choice(ids, size=scene_cfg.track_count, replace=False))
        dets, labels = [], []
        gt_arr = np.empty((T, len(chosen), 4))
        for t, f in enumerate(frames):
            boxes, lab = [], []
            for n, i in enumerate(chosen):
                gt_arr[t, n] = gt_by[f][i]
                if i in matched[f]:
                    boxes.append(matched[f][i])
                    lab.append(n)
            dets.append(np.asarray(boxes).reshape(-1, 4))
            labels.append(lab)
        meta = {"source_first_frame": a, "track_ids": chosen, "window": wi, "seed": scene_cfg.seed}
        scenes.append(SceneData(dets, labels=labels, gt=gt_arr, meta=meta))
    stats = {"windows": len(windows), "skipped_windows": skipped, "scenes": len(scenes),
             "detections_total": n_det, "detections_matched": n_kept}
    if out_dir is not None:
        out = Path(out_dir)
        for i, sc in enumerate(scenes):
            write_scene(out / f"scene_{i:04d}", sc, W, H)
    return scenes, stats


# ------------------------------------------------------ synth_benchmark

SCENARIOS = ("separated", "crossing", "dropout", "crossing+dropout", "sinusoidal")


@dataclass
class SuiteConfig:
    scenarios: tuple = ("separated", "crossing", "dropout", "crossing+dropout", "sinusoidal")
    scenes_per_scenario: int = 4
    T: int = 60
    noise: float = 0.02                 # detection noise std as a fraction of box size
    dropout: tuple = (2, 20)            # 1-based inclusive frames for the "dropout" scenario
    crossing_dropout: int = 5           # half-width of the absence around the crossing frame
    seed: int = 0
    size_mu: float = float(np.log(0.06))
    size_sigma: float = 0.15
    speed: float = 0.003                # std of per-frame velocity components
    accel: float = 2e-5                 # std of per-frame^2 acceleration components
    sin_amplitude: tuple = (0.03, 0.08)
    sin_omega: tuple = (0.08, 0.2)

    def __post_init__(self):
        if isinstance(self.scenarios, str):
            self.scenarios = tuple(s.strip() for s in self.scenarios.split(",") if s.strip())
        self.scenarios = tuple(self.scenarios)
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}; choose from {SCENARIOS}")
        self.dropout = tuple(int(v) for v in self.dropout)
        self.sin_amplitude = tuple(float(v) for v in self.sin_amplitude)
        self.sin_omega = tuple(float(v) for v in self.sin_omega)
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.scenes_per_scenario < 0:
            raise ValueError("scenes_per_scenario must be >= 0")
        a, b = self.dropout
        if 2 <= a <= self.T < b:
            # short suites keep the default window, truncated at the last frame
            b = self.T
            self.dropout = (a, b)
        if not (2 <= a <= b <= self.T):
            raise ValueError("dropout window must satisfy 2 <= start <= end <= T")

    @classmethod
    def from_mapping(cls, m: dict) -> "SuiteConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(m) - known
        if unknown:
            raise ValueError(f"unknown suite config keys: {sorted(unknown)}")
        return cls(**m)

    def to_dict(self) -> dict:
        return asdict(self)


def _size(rng, cfg):
    w = float(np.exp(rng.normal(cfg.size_mu, cfg.size_sigma)))
    return w, w * float(np.exp(rng.normal(np.log(2.5), 0.1)))


def _boxes(x, y, w, h):
    return np.stack([x, y, x + w, y - h], axis=-1)


def _centre(b):
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2], axis=-1)


def _separated(gt, margin=0.5) -> bool:
    """No two boxes, each enlarged by ``margin`` of its size, ever overlap."""
    T, N, _ = gt.shape
    w = gt[..., 2] - gt[..., 0]
    h = gt[..., 1] - gt[..., 3]
    big = np.stack([gt[..., 0] - margin * w, gt[..., 1] + margin * h,
                    gt[..., 2] + margin * w, gt[..., 3] - margin * h], axis=-1)
    for t in range(T):
        M = metrics.iou_matrix(big[t], big[t])
        if (M - np.eye(N) > 0).any():
            return False
    return True


_BANDS = (0.8, 0.5, 0.2)   # top-edge y of the three lanes (y-up)


def _piecewise_track(rng, cfg, y_top, w, h):
    """Algorithm-3-style chained segments (no sinusoid) with gentle magnitudes."""
    tc = synth.TrajectoryConfig(
        T=cfg.T, s_max=3, seg_type_probs=(1 / 3, 1 / 3, 1 / 3, 0.0),
        a1=(0.0, cfg.speed), a2=(0.0, cfg.accel),
    )
    splits = synth.sample_splits(tc, rng)
    x = synth.gen_sequence(tc, rng, rng.uniform(0.2, 0.8 - w), splits)
    y = synth.gen_sequence(tc, rng, y_top, splits)
    return _boxes(x, y, np.full(cfg.T, w), np.full(cfg.T, h))


def _sinusoidal_track(rng, cfg, y_top, w, h):
    t = np.arange(cfg.T, dtype=np.float64)
    ax, ay = rng.uniform(*cfg.sin_amplitude, size=2)
    ay *= 0.5
    wx, wy = rng.uniform(*cfg.sin_omega, size=2)
    px, py = rng.uniform(0, 2 * np.pi, size=2)
    x0 = rng.uniform(0.25, 0.75 - w)
    x = x0 + ax * (np.sin(wx * t + px) - np.sin(px))
    y = y_top + ay * (np.sin(wy * t + py) - np.sin(py))
    return _boxes(x, y, np.full(cfg.T, w), np.full(cfg.T, h))


def _synth_offset(rng, cfg, tc):
    """A gentle [synth] piecewise track, shifted to pass through 0 at frame ``tc``."""
    tcfg = synth.TrajectoryConfig(
        T=cfg.T, s_max=3, seg_type_probs=(1 / 3, 1 / 3, 1 / 3, 0.0),
        a1=(0.0, cfg.speed), a2=(0.0, cfg.accel),
    )
    seq = synth.gen_sequence(tcfg, rng, 0.0, synth.sample_splits(tcfg, rng))
    return seq - seq[tc]


def _crossing_pair(rng, cfg, y_top, w, h):
    """Two objects moving head-on, meeting near mid-sequence.

    Each centre is a head-on drift plus its own [synth] piecewise track
    (static / velocity / acceleration segments) anchored at the crossing
    frame, so the pair still meets at ``tc`` but neither moves linearly.
    """
    T = cfg.T
    tc = int(rng.integers(T // 3, 2 * T // 3 + 1))
    speed = rng.uniform(0.006, 0.012)
    xc = rng.uniform(0.35, 0.65 - w)
    dy = rng.uniform(-0.15, 0.15) * h
    t = np.arange(T, dtype=np.float64)
    x1 = xc + speed * (t - tc) + _synth_offset(rng, cfg, tc)
    x2 = xc - speed * (t - tc) + _synth_offset(rng, cfg, tc)
    y1 = y_top + dy / 2 + _synth_offset(rng, cfg, tc)
    y2 = y_top - dy / 2 + _synth_offset(rng, cfg, tc)
    ww = np.full(T, w)
    hh = np.full(T, h)
    return _boxes(x1, y1, ww, hh), _boxes(x2, y2, ww, hh), tc


def _make_gt(kind, rng, cfg, max_tries=200):
    base = "crossing" if kind.startswith("crossing") else kind
    for _ in range(max_tries):
        sizes = [_size(rng, cfg) for _ in range(3)]
        info = {}
        if base == "crossing":
            a, b, tc = _crossing_pair(rng, cfg, _BANDS[1], *sizes[0])
            c = _piecewise_track(rng, cfg, _BANDS[0], *sizes[2])
            gt = np.stack([a, b, c], axis=1)
            info["crossing_frame"] = tc + 1
            if _separated(gt[:, [0, 2]]) and _separated(gt[:, [1, 2]]):
                return gt, info
        else:
            maker = _sinusoidal_track if base == "sinusoidal" else _piecewise_track
            gt = np.stack([maker(rng, cfg, _BANDS[n], *sizes[n]) for n in range(3)], axis=1)
            if _separated(gt):
                return gt, info
    raise RuntimeError(f"could not draw a valid {kind} scene in {max_tries} tries")


def make_synth_scene(kind: str, cfg: SuiteConfig, rng: np.random.Generator) -> SceneData:
    """One 3-object scene with noisy detections, scripted absences and labels."""
    gt, info = _make_gt(kind, rng, cfg)
    T, N, _ = gt.shape
    absent = np.zeros((T, N), dtype=bool)
    if kind == "dropout":
        a, b = cfg.dropout
        absent[a - 1 : b, 2] = True
    elif kind == "crossing+dropout":
        tc = info["crossing_frame"] - 1
        absent[max(1, tc - cfg.crossing_dropout) : tc + cfg.crossing_dropout + 1, 0] = True
    size = np.stack([gt[..., 2] - gt[..., 0], gt[..., 1] - gt[..., 3]] * 2, axis=-1)
    noisy = gt + cfg.noise * size * rng.standard_normal(gt.shape)
    dets, labels = [], []
    for t in range(T):
        ks = [n for n in range(N) if not absent[t, n]]
        order = rng.permutation(len(ks))
        ks = [ks[i] for i in order]
        boxes = noisy[t, ks]
        # keep boxes valid under noise
        boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0] + 1e-4)
        boxes[:, 3] = np.minimum(boxes[:, 3], boxes[:, 1] - 1e-4)
        dets.append(boxes.reshape(-1, 4))
        labels.append(ks)
    meta = {"scenario": kind, "noise": cfg.noise, **info}
    return SceneData(dets, labels=labels, gt=gt, meta=meta)


def synth_benchmark(cfg: SuiteConfig, out_dir=None) -> list[SceneData]:
    """Scenes for every scenario; scene ``i`` of scenario ``s`` uses its own RNG stream."""
    scenes = []
    for si, kind in enumerate(cfg.scenarios):
        for i in range(cfg.scenes_per_scenario):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, SCENARIOS.index(kind), i]))
            sc = make_synth_scene(kind, cfg, rng)
            sc.meta["index"] = i
            scenes.append(sc)
    if out_dir is not None:
        out = Path(out_dir)
        for j, sc in enumerate(scenes):
            write_scene(out / f"scene_{j:04d}", sc, extra_meta={"suite": cfg.to_dict()})
    return scenes


# ------------------------------------------------------------- config

def _coerce(v: str):
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for f in (int, float):
        try:
            return f(v)
        except ValueError:
            pass
    if "," in v:
        return [_coerce(x.strip()) for x in v.split(",") if x.strip()]
    return v


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        k = k.strip().replace("-", "_")
        if not k:
            raise DataError(f"{source}:{lineno}: empty key")
        out[k] = _coerce(v.strip())
    return out


def parse_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: config file not found")
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


# ------------------------------------------------------------- reports

def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else None
    if isinstance(o, Path):
        return str(o)
    return o


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


def write_csv(path, rows: list[dict], columns: list[str]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "dvae-umot"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_curves(path, series: dict, xlabel: str, ylabel: str, title: str = ""):
    """Line plot of ``{label: (x, y)}`` to SVG (e.g. MOTA vs iteration)."""
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        x, y = series[label]
        ax.plot(x, y, label=label, marker="o", markersize=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_trajectories(path, scene: SceneData, estimates: dict, title: str = ""):
    """Box-centre trajectories: detections (dots), GT (dashed) and each method's estimate."""
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(5, 5))
    pts = [d for d in scene.detections if d.size]
    if pts:
        c = _centre(np.concatenate(pts))
        ax.scatter(c[:, 0], c[:, 1], s=4, c="0.6", label="detections")
    if scene.gt is not None:
        for n in range(scene.gt.shape[1]):
            c = _centre(scene.gt[:, n])
            ax.plot(c[:, 0], c[:, 1], "k--", lw=1, label="ground truth" if n == 0 else None)
    styles = ["-", ":", "-."]
    for j, name in enumerate(sorted(estimates)):
        m = estimates[name]
        for n in range(m.shape[1]):
            c = _centre(m[:, n])
            ax.plot(c[:, 0], c[:, 1], styles[j % 3], lw=1.2, label=f"{name} #{n + 1}")
    ax.set_xlabel("x (normalised)")
    ax.set_ylabel("y (normalised, up)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=6)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_bars(path, table: dict, metric: str, title: str = ""):
    """Grouped bars ``{scenario: {method: value}}`` for one metric."""
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(7, 4))
    groups = list(table)
    methods = sorted({m for g in table.values() for m in g})
    width = 0.8 / max(1, len(methods))
    for j, meth in enumerate(methods):
        xs = [i + j * width for i in range(len(groups))]
        ax.bar(xs, [table[g].get(meth, 0.0) for g in groups], width, label=meth)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(groups))])
    ax.set_xticklabels(groups, rotation=15, fontsize=8)
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
