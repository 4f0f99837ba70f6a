"""IoU, Hungarian assignment and CLEAR-MOT / identity metrics.

Track sets are ``(n, 6)`` arrays of rows ``(frame, id, l, t, r, b)`` with boxes
in the y-up convention used throughout the package (any consistent box
coordinates work, IoU only needs ``r > l`` and ``t > b``).

CLEAR matching per frame: previous-frame correspondences are kept while
their IoU stays at or above the threshold; the remaining objects are matched
by Hungarian assignment on ``1 - IoU`` with pairs below the threshold
forbidden.  An identity switch is counted when a ground-truth object is
matched to a hypothesis id different from the one it was last matched to.

IDF1 follows the identity-measure definition: a global one-to-one matching
between ground-truth ids and hypothesis ids maximising the number of frames
where the pair overlaps with IoU ≥ threshold (IDTP), then
``IDF1 = 2 IDTP / (#gt detections + #hyp detections)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


# ---------------------------------------------------------------- IoU

def iou(a, b) -> float:
    """IoU of two ``(l, t, r, b)`` boxes (y-up)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(iou_matrix(a[None], b[None])[0, 0])


def _area(x):
    return np.maximum(x[..., 2] - x[..., 0], 0.0) * np.maximum(x[..., 1] - x[..., 3], 0.0)


def iou_matrix(A, B) -> np.ndarray:
    """Pairwise IoU between ``A`` (n, 4) and ``B`` (m, 4)."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 4)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    l = np.maximum(A[:, None, 0], B[None, :, 0])
    r = np.minimum(A[:, None, 2], B[None, :, 2])
    t = np.minimum(A[:, None, 1], B[None, :, 1])
    b = np.maximum(A[:, None, 3], B[None, :, 3])
    inter = np.maximum(r - l, 0.0) * np.maximum(t - b, 0.0)
    union = _area(A)[:, None] + _area(B)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------- Hungarian

def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` pairs.

    ``inf`` marks forbidden pairs.  They are replaced by a cost larger than
    any achievable finite total, so the solver first maximises the number of
    allowed pairs and then minimises cost; forbidden pairs are then dropped,
    leaving those rows/columns unassigned.  Returns ``(pairs, total_cost)``.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {C.shape}")
    if C.size == 0:
        return [], 0.0
    if np.isnan(C).any():
        raise ValueError("cost matrix contains NaN")
    forbidden = ~np.isfinite(C)
    if forbidden.all():
        return [], 0.0
    work = C.copy()
    if forbidden.any():
        finite = C[~forbidden]
        span = float(np.abs(finite).max()) + 1.0
        work[forbidden] = span * (min(C.shape) + 1) * 2.0
    rows, cols = linear_sum_assignment(work)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if not forbidden[i, j]]
    total = float(sum(C[i, j] for i, j in pairs))
    return pairs, total


# ------------------------------------------------------------ reports

@dataclass
class MetricReport:
    mota: float
    motp: float
    idf1: float
    ids: int
    fp: int
    fn: int
    mt: int
    ml: int
    num_gt: int
    num_hyp: int
    num_matches: int
    idtp: int
    n_gt_tracks: int
    iou_sum: float

    @property
    def fp_pct(self) -> float:
        return 100.0 * self.fp / self.num_gt

    @property
    def fn_pct(self) -> float:
        return 100.0 * self.fn / self.num_gt

    @property
    def ids_pct(self) -> float:
        return 100.0 * self.ids / self.num_gt

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(fp_pct=self.fp_pct, fn_pct=self.fn_pct, ids_pct=self.ids_pct)
        return d


def _report(fn, fp, ids, num_gt, num_hyp, matches, iou_sum, idtp, mt, ml, n_tracks):
    if num_gt == 0:
        raise ValueError("empty ground truth: MOTA is undefined")
    return MetricReport(
        mota=1.0 - (fn + fp + ids) / num_gt,
        motp=iou_sum / matches if matches else 0.0,
        idf1=2.0 * idtp / (num_gt + num_hyp),
        ids=int(ids), fp=int(fp), fn=int(fn), mt=int(mt), ml=int(ml),
        num_gt=int(num_gt), num_hyp=int(num_hyp), num_matches=int(matches),
        idtp=int(idtp), n_gt_tracks=int(n_tracks), iou_sum=float(iou_sum),
    )


def combine(reports) -> MetricReport:
    """Aggregate per-sequence reports by summing counts (Eq. 37 over all frames)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to combine")
    s = lambda k: sum(getattr(r, k) for r in reports)
    return _report(s("fn"), s("fp"), s("ids"), s("num_gt"), s("num_hyp"), s("num_matches"),
                   s("iou_sum"), s("idtp"), s("mt"), s("ml"), s("n_gt_tracks"))


# --------------------------------------------------------- evaluation

def _by_frame(rows):
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    out = {}
    for r in rows:
        out.setdefault(int(r[0]), []).append((int(r[1]), r[2:6]))
    return out


def _check_unique(frames, what):
    for f, items in frames.items():
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{what}: duplicate id in frame {f}")


@dataclass
class FrameMatch:
    frame: int
    matches: dict          # gt id -> hyp id
    fn: list               # unmatched gt ids
    fp: list               # unmatched hyp ids
    switches: list         # gt ids whose hypothesis changed


def clear_match(gt_rows, hyp_rows, iou_threshold: float = 0.5) -> list[FrameMatch]:
    gtf, hyf = _by_frame(gt_rows), _by_frame(hyp_rows)
    _check_unique(gtf, "ground truth")
    _check_unique(hyf, "hypotheses")
    prev: dict[int, int] = {}
    last: dict[int, int] = {}
    out = []
    for f in sorted(set(gtf) | set(hyf)):
        g_items, h_items = gtf.get(f, []), hyf.get(f, [])
        g_ids = [i for i, _ in g_items]
        h_ids = [i for i, _ in h_items]
        G = np.array([b for _, b in g_items]).reshape(-1, 4)
        Hb = np.array([b for _, b in h_items]).reshape(-1, 4)
        M = iou_matrix(G, Hb)
        h_index = {h: j for j, h in enumerate(h_ids)}
        matches = {}
        used_h = set()
        for gi, g in enumerate(g_ids):
            h = prev.get(g)
            if h is not None and h in h_index and h not in used_h and M[gi, h_index[h]] >= iou_threshold:
                matches[g] = h
                used_h.add(h)
        rest_g = [gi for gi, g in enumerate(g_ids) if g not in matches]
        rest_h = [j for j, h in enumerate(h_ids) if h not in used_h]
        if rest_g and rest_h:
            sub = M[np.ix_(rest_g, rest_h)]
            cost = np.where(sub >= iou_threshold, 1.0 - sub, np.inf)
            pairs, _ = hungarian(cost)
            for a, b in pairs:
                matches[g_ids[rest_g[a]]] = h_ids[rest_h[b]]
        switches = [g for g, h in matches.items() if g in last and last[g] != h]
        for g, h in matches.items():
            last[g] = h
        prev = dict(matches)
        out.append(FrameMatch(
            frame=f, matches=matches,
            fn=[g for g in g_ids if g not in matches],
            fp=[h for h in h_ids if h not in set(matches.values())],
            switches=switches,
        ))
    return out


def evaluate(gt_rows, hyp_rows, iou_threshold: float = 0.5) -> MetricReport:
    """CLEAR-MOT metrics (Eq. 37), MOTP as mean matched IoU, MT/ML and IDF1."""
    gt_rows = np.asarray(gt_rows, dtype=np.float64).reshape(-1, 6)
    hyp_rows = np.asarray(hyp_rows, dtype=np.float64).reshape(-1, 6)
    if gt_rows.shape[0] == 0:
        raise ValueError("empty ground truth: MOTA is undefined")
    frames = clear_match(gt_rows, hyp_rows, iou_threshold)
    gtf, hyf = _by_frame(gt_rows), _by_frame(hyp_rows)
    fn = fp = ids = matches = 0
    iou_sum = 0.0
    covered: dict[int, int] = {}
    for fm in frames:
        fn += len(fm.fn)
        fp += len(fm.fp)
        ids += len(fm.switches)
        matches += len(fm.matches)
        g_box = dict(gtf.get(fm.frame, []))
        h_box = dict(hyf.get(fm.frame, []))
        for g, h in fm.matches.items():
            iou_sum += iou(g_box[g], h_box[h])
            covered[g] = covered.get(g, 0) + 1
    lengths: dict[int, int] = {}
    for r in gt_rows:
        lengths[int(r[1])] = lengths.get(int(r[1]), 0) + 1
    mt = sum(1 for g, n in lengths.items() if covered.get(g, 0) / n >= 0.8)
    ml = sum(1 for g, n in lengths.items() if covered.get(g, 0) / n <= 0.2)
    idtp = _idtp(gtf, hyf, iou_threshold)
    return _report(fn, fp, ids, gt_rows.shape[0], hyp_rows.shape[0], matches, iou_sum, idtp,
                   mt, ml, len(lengths))


def _idtp(gtf, hyf, thr) -> int:
    g_ids = sorted({i for items in gtf.values() for i, _ in items})
    h_ids = sorted({i for items in hyf.values() for i, _ in items})
    if not g_ids or not h_ids:
        return 0
    gi = {g: i for i, g in enumerate(g_ids)}
    hi = {h: j for j, h in enumerate(h_ids)}
    counts = np.zeros((len(g_ids), len(h_ids)))
    for f, g_items in gtf.items():
        h_items = hyf.get(f, [])
        if not h_items:
            continue
        M = iou_matrix(np.array([b for _, b in g_items]), np.array([b for _, b in h_items]))
        for a, (g, _) in enumerate(g_items):
            for b, (h, _) in enumerate(h_items):
                if M[a, b] >= thr:
                    counts[gi[g], hi[h]] += 1
    rows, cols = linear_sum_assignment(-counts)
    return int(counts[rows, cols].sum())


def rows_from_estimates(m: np.ndarray, first_frame: int = 1, ids=None) -> np.ndarray:
    """Track-set rows from a ``(T, N, 4)`` estimate (id ``n + 1`` unless ``ids`` given)."""
    T, N, _ = m.shape
    ids = list(range(1, N + 1)) if ids is None else list(ids)
    out = []
    for t in range(T):
        for n in range(N):
            if np.all(np.isfinite(m[t, n])):
                out.append([t + first_frame, ids[n], *m[t, n]])
    return np.asarray(out, dtype=np.float64).reshape(-1, 6)
