"""Per-pixel F1 / MCC, optimal-threshold sweeps and CSV reports."""

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .postprocess import hole_fill

DEFAULT_GRID = tuple(round(0.01 * i, 2) for i in range(1, 100))
PER_IMAGE = "per-image"
PER_DATASET = "per-dataset"
CSV_HEADER = ["image_id", "t_surface", "t_edge", "f1", "mcc"]


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(out, gt):
    out = np.asarray(out).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if out.shape != gt.shape:
        raise ValueError(f"output mask {out.shape} and ground truth {gt.shape} differ in size")
    tp = int(np.count_nonzero(out & gt))
    n_out = int(np.count_nonzero(out))
    n_gt = int(np.count_nonzero(gt))
    fp = n_out - tp
    fn = n_gt - tp
    return ConfusionCounts(tp, fp, out.size - tp - fp - fn, fn)


def _f1(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.int64) for v in (tp, fp, fn))
    den = 2 * tp + fn + fp
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (2 * tp) / den
    return np.where(den == 0, 1.0, score)


def _mcc(tp, fp, tn, fn):
    tp, fp, tn, fn = (np.asarray(v, dtype=np.int64) for v in (tp, fp, tn, fn))
    a = (tp + fp).astype(np.float64)
    b = (tp + fn).astype(np.float64)
    c = (tn + fp).astype(np.float64)
    d = (tn + fn).astype(np.float64)
    num = tp.astype(np.float64) * tn - fp.astype(np.float64) * fn
    den = np.sqrt((a * b) * (c * d))
    with np.errstate(divide="ignore", invalid="ignore"):
        score = num / den
    degenerate = (a == 0) | (b == 0) | (c == 0) | (d == 0)
    perfect = (fp == 0) & (fn == 0)
    return np.where(degenerate, np.where(perfect, 1.0, 0.0), score)


def f1(c):
    """2TP / (2TP + FN + FP); 1.0 when both masks are empty."""
    return float(_f1(c.tp, c.fp, c.fn))


def mcc(c):
    """Matthews correlation; 0.0 on a zero denominator factor unless the match is perfect."""
    return float(_mcc(c.tp, c.fp, c.tn, c.fn))


METRICS = {"f1": f1, "mcc": mcc}


def _check_grid(grid):
    g = np.unique(np.asarray(grid, dtype=np.float64))
    if g.size == 0:
        raise ValueError("threshold grid is empty")
    if g[0] < 0 or g[-1] > 1:
        raise ValueError("thresholds must lie in [0, 1]")
    return g


def _scores_from_masks(outs, gt, metric):
    """Metric for a stack of output masks (k, h, w) against one gt."""
    gt = np.asarray(gt).astype(bool)
    flat = outs.reshape(outs.shape[0], -1)
    g = gt.reshape(-1)
    tp = np.count_nonzero(flat & g, axis=1)
    n_out = np.count_nonzero(flat, axis=1)
    n_gt = int(np.count_nonzero(g))
    fp = n_out - tp
    fn = n_gt - tp
    tn = g.size - tp - fp - fn
    if metric == "f1":
        return _f1(tp, fp, fn)
    if metric == "mcc":
        return _mcc(tp, fp, tn, fn)
    raise ValueError(f"metric must be 'f1' or 'mcc', got {metric!r}")


def grid_scores(surface, gt, grid=DEFAULT_GRID, metric="f1", edge=None):
    """Score at every grid point.

    Returns shape (len(grid),) for plain thresholding or
    (len(grid), len(grid)) indexed [t_surface, t_edge] in edge-enhanced mode.
    """
    g = _check_grid(grid)
    surface = np.asarray(surface)
    if surface.shape != np.asarray(gt).shape:
        raise ValueError(f"map {surface.shape} and ground truth {np.asarray(gt).shape} differ in size")
    stack = surface[None] >= g[:, None, None]
    if edge is None:
        return _scores_from_masks(stack, gt, metric)
    edge = np.asarray(edge)
    if edge.shape != surface.shape:
        raise ValueError(f"surface map {surface.shape} and edge map {edge.shape} differ in size")
    out = np.empty((g.size, g.size))
    for j, te in enumerate(g):
        filled = hole_fill(edge >= te).astype(bool)
        out[:, j] = _scores_from_masks(stack & filled, gt, metric)
    return out


@dataclass
class SweepResult:
    thresholds: list          # per image: (t_surface, t_edge or None)
    scores: list              # per image metric at its chosen thresholds
    mode: str
    metric: str

    @property
    def mean(self):
        return float(np.mean(self.scores))


def _first_argmax(a):
    return np.unravel_index(int(np.argmax(a)), a.shape)


def optimal_threshold_sweep(surface_maps, gts, metric="f1", grid=DEFAULT_GRID, mode=PER_IMAGE, edge_maps=None):
    """Pick the metric-maximizing threshold(s) over ``grid``.

    ``per-image`` optimizes each image independently; ``per-dataset`` uses
    one threshold (pair) maximizing the dataset mean. With ``edge_maps``
    the sweep runs over (t_surface, t_edge) pairs. Ties resolve to the
    smallest t_surface, then the smallest t_edge.
    """
    if mode not in (PER_IMAGE, PER_DATASET):
        raise ValueError(f"mode must be {PER_IMAGE!r} or {PER_DATASET!r}, got {mode!r}")
    g = _check_grid(grid)
    surface_maps = list(surface_maps)
    gts = list(gts)
    if len(surface_maps) != len(gts) or not gts:
        raise ValueError("need one ground truth per map and at least one image")
    if edge_maps is not None:
        edge_maps = list(edge_maps)
        if len(edge_maps) != len(gts):
            raise ValueError("need one edge map per surface map")
    tables = [
        grid_scores(s, gt, g, metric, None if edge_maps is None else edge_maps[i])
        for i, (s, gt) in enumerate(zip(surface_maps, gts))
    ]

    def as_pair(idx):
        if edge_maps is None:
            return (float(g[idx[0]]), None)
        return (float(g[idx[0]]), float(g[idx[1]]))

    if mode == PER_IMAGE:
        picks = [_first_argmax(t) for t in tables]
    else:
        mean = np.mean(np.stack(tables), axis=0)
        best = _first_argmax(mean)
        picks = [best] * len(tables)
    return SweepResult(
        thresholds=[as_pair(p) for p in picks],
        scores=[float(t[p]) for t, p in zip(tables, picks)],
        mode=mode,
        metric=metric,
    )


@dataclass
class EvalRow:
    image_id: str
    t_surface: Optional[float]
    t_edge: Optional[float]
    f1: float
    mcc: float


@dataclass
class EvalReport:
    rows: list
    mean_f1: float
    mean_mcc: float
    sweep_mode: str = PER_IMAGE
    meta: dict = field(default_factory=dict)


def _fmt(v):
    return "" if v is None else repr(float(v))


def aggregate_and_emit(rows, path=None, sweep_mode=PER_IMAGE, meta=None):
    """Average per-image scores; optionally write the CSV report to ``path``."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to aggregate")
    report = EvalReport(
        rows=rows,
        mean_f1=float(np.mean([r.f1 for r in rows])),
        mean_mcc=float(np.mean([r.mcc for r in rows])),
        sweep_mode=sweep_mode,
        meta=dict(meta or {}),
    )
    if path is not None:
        write_report_csv(report, path)
    return report


def write_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r.image_id, _fmt(r.t_surface), _fmt(r.t_edge), _fmt(r.f1), _fmt(r.mcc)])
        w.writerow(["AVERAGE", "", "", _fmt(report.mean_f1), _fmt(report.mean_mcc)])


def read_report_csv(path):
    def opt(s):
        return float(s) if s != "" else None

    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected report header {header}")
        rows, avg = [], None
        for rec in rd:
            if rec[0] == "AVERAGE":
                avg = (float(rec[3]), float(rec[4]))
            else:
                rows.append(EvalRow(rec[0], opt(rec[1]), opt(rec[2]), float(rec[3]), float(rec[4])))
    if avg is None:
        raise ValueError(f"{path}: missing AVERAGE row")
    return EvalReport(rows=rows, mean_f1=avg[0], mean_mcc=avg[1])
