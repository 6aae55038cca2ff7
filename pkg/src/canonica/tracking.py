"""Mask-propagated tracks, tracking accuracy and pseudo-depth metrics."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .fields import SceneModel
from .renderer import Camera, render_correspondence, render_depth_map
from .scenedata import VideoClip, temporal_subsample
from .training import TrainConfig, train

DELTA_THRESHOLD = 1.25


@dataclass
class TrackSet:
    """Tracks of the pixels of one mask, ``K`` tracks over ``T`` frames."""

    start_frame: int
    sources: np.ndarray       # (K, 2) row, col in the start frame
    positions: np.ndarray     # (T, K, 2) predicted row, col
    points: np.ndarray        # (T, K, 3) expected scene point
    in_bounds: np.ndarray     # (T, K)
    valid_ray: np.ndarray     # (T, K) ray had non-zero opacity

    def __len__(self) -> int:
        return self.sources.shape[0]

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_positions(cls, start_frame: int, positions: np.ndarray,
                       height: int, width: int) -> "TrackSet":
        positions = np.asarray(positions, dtype=np.float64)
        T, K = positions.shape[:2]
        return cls(start_frame, positions[start_frame].copy(), positions,
                   np.zeros((T, K, 3)), inside_image(positions, height, width),
                   np.ones((T, K), dtype=bool))


def inside_image(positions: np.ndarray, height: int, width: int) -> np.ndarray:
    """True where a sub-pixel position rounds to a pixel of the image."""
    r, c = positions[..., 0], positions[..., 1]
    return (r >= -0.5) & (r < height - 0.5) & (c >= -0.5) & (c < width - 0.5)


def track_from_mask(model: SceneModel, clip: VideoClip, label: str, start_frame: int = 0,
                    n_samples: int = 32, chunk: int = 1024) -> TrackSet:
    """Render the correspondence of every start-mask pixel into every frame."""
    mask = clip.mask(label, start_frame)
    if mask is None:
        available = sorted(clip.masks)
        raise KeyError(f"no {label!r} mask at frame {start_frame}; labels with masks: {available}")
    rows, cols = np.nonzero(mask)
    sources = np.stack([rows, cols], axis=-1).astype(np.float64)
    T, K = clip.n_frames, len(sources)
    positions = np.zeros((T, K, 2))
    points = np.zeros((T, K, 3))
    valid = np.ones((T, K), dtype=bool)
    for j in range(T):
        for s in range(0, K, chunk):
            xj, pj, _, v = render_correspondence(model, sources[s:s + chunk], start_frame, j, n_samples)
            positions[j, s:s + chunk] = pj
            points[j, s:s + chunk] = xj
            valid[j, s:s + chunk] = v
    return TrackSet(start_frame, sources, positions, points,
                    inside_image(positions, clip.height, clip.width), valid)


@dataclass
class AccuracyReport:
    per_frame: dict[int, float]
    mean: float


def tracking_accuracy(tracks: TrackSet, clip: VideoClip, label: str) -> AccuracyReport:
    """Fraction of in-image predictions landing inside each frame's mask.

    Frames without a mask and the start frame are skipped; out-of-image
    predictions are left out of that frame's denominator.
    """
    per_frame = {}
    for j in range(tracks.n_frames):
        if j == tracks.start_frame:
            continue
        mask = clip.mask(label, j)
        if mask is None:
            continue
        inside = tracks.in_bounds[j]
        if not inside.any():
            continue
        px = np.rint(tracks.positions[j, inside]).astype(np.int64)
        per_frame[j] = float(mask[px[:, 0], px[:, 1]].mean())
    if not per_frame:
        raise ValueError("no evaluable predictions")
    return AccuracyReport(per_frame, float(np.mean(list(per_frame.values()))))


def aggregate_accuracy(video_means) -> tuple[float, float]:
    """Mean and population std of per-video mean accuracies."""
    v = np.asarray(list(video_means), dtype=np.float64)
    return float(v.mean()), float(v.std())


# --- depth -------------------------------------------------------------

def align_scale_shift(pred, gt, valid=None) -> tuple[float, float]:
    """Least-squares ``(s, t)`` minimizing ``sum (s * pred + t - gt)^2`` over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    p, g = pred[valid], gt[valid]
    if p.size < 2:
        raise ValueError("need at least two valid pixels")
    pm, gm = p.mean(), g.mean()
    dp = p - pm
    sxx = float(dp @ dp)
    if sxx <= p.size * (np.finfo(float).eps * max(1.0, np.abs(p).max())) ** 2:
        raise ValueError("constant prediction: scale/shift system is singular")
    s = float(dp @ (g - gm)) / sxx
    return s, float(gm - s * pm)


@dataclass
class DepthReport:
    mae: float
    absrel: float      # percent
    delta: float       # percent of pixels with max ratio < 1.25
    scale: float = 1.0
    shift: float = 0.0


def depth_metrics(pred, gt, valid=None, align: bool = True) -> DepthReport:
    """MAE, AbsRel (%) and delta<1.25 (%) after optional scale-and-shift alignment."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    g = gt[valid]
    if np.any(g <= 0):
        raise ValueError("ground-truth depth must be strictly positive on valid pixels")
    s, t = align_scale_shift(pred, gt, valid) if align else (1.0, 0.0)
    p = s * pred[valid] + t
    err = np.abs(p - g)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    good = (p > 0) & (ratio < DELTA_THRESHOLD)
    return DepthReport(float(err.mean()), float(100.0 * np.mean(err / g)),
                       float(100.0 * good.mean()), s, t)


def evaluate_depth(model: SceneModel, clip: VideoClip, n_samples: int = 32,
                   frames=None) -> tuple[list[DepthReport], np.ndarray]:
    """Per-frame reports for rendered depth against ``clip.gt_depth``, plus the rendered maps."""
    if clip.gt_depth is None:
        raise ValueError("clip has no ground-truth depth")
    frames = range(clip.n_frames) if frames is None else frames
    reports, maps = [], []
    for t in frames:
        d, valid = render_depth_map(model, t, n_samples)
        reports.append(depth_metrics(d, clip.gt_depth[t], valid))
        maps.append(d)
    return reports, np.stack(maps)


def mean_report(reports: list[DepthReport]) -> DepthReport:
    return DepthReport(float(np.mean([r.mae for r in reports])),
                       float(np.mean([r.absrel for r in reports])),
                       float(np.mean([r.delta for r in reports])),
                       float("nan"), float("nan"))


# --- sweeps and tables --------------------------------------------------

TRACKING_COLUMNS = ("video", "label", "w_class", "fraction", "mean_acc", "std")
DEPTH_COLUMNS = ("video", "frame", "MAE", "AbsRel", "delta125", "s", "t")


def _cell(args):
    clip, cfg, arch, fraction, w_class, labels, n_samples = args
    sub = temporal_subsample(clip, fraction)
    model, _ = train(sub, replace(cfg, w_class=w_class), arch=arch)
    out = {}
    for label in labels:
        if sub.mask(label, 0) is None:
            continue
        tracks = track_from_mask(model, sub, label, 0, n_samples)
        try:
            out[label] = tracking_accuracy(tracks, sub, label).mean
        except ValueError:
            out[label] = float("nan")
    return sub.n_frames, out


def worker_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("CANONICA_THREADS", default)))
    except ValueError:
        return default


def run_ablation(clip: VideoClip, cfg: TrainConfig, fractions=(1.0,), w_class_values=(1.0,),
                 labels=None, arch: dict | None = None, n_samples: int | None = None,
                 workers: int | None = None) -> list[dict]:
    """Train one model per (fraction, w_class) cell and score each label's tracks.

    Every cell in a row of equal fraction shares the seed ``cfg.seed + row``,
    so w_class columns differ only in the weighting.
    """
    labels = list(labels) if labels is not None else list(clip.labels)
    n_samples = n_samples or cfg.n_samples
    jobs, keys = [], []
    for row, fraction in enumerate(fractions):
        for w in w_class_values:
            jobs.append((clip, replace(cfg, seed=cfg.seed + row), arch, fraction, w, labels, n_samples))
            keys.append((fraction, w))
    workers = workers or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    rows = []
    for (fraction, w), (n_frames, accs) in zip(keys, results):
        for label in labels:
            if label in accs:
                rows.append({"video": clip.name, "label": label, "w_class": w,
                             "fraction": fraction, "mean_acc": 100.0 * accs[label],
                             "std": 0.0, "n_frames": n_frames})
    return rows


def pivot_table(rows: list[dict], fraction: float = 1.0) -> tuple[list[float], dict[str, dict]]:
    """Label-by-w_class table of mean accuracies at one temporal fraction."""
    sel = [r for r in rows if r["fraction"] == fraction]
    columns = sorted({r["w_class"] for r in sel})
    table: dict[str, dict] = {}
    for r in sel:
        table.setdefault(r["label"], {})[r["w_class"]] = r["mean_acc"]
    return columns, table


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_tracking_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACKING_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in TRACKING_COLUMNS])


def write_pivot_csv(rows: list[dict], path, fraction: float = 1.0) -> None:
    columns, table = pivot_table(rows, fraction)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"w_class={_fmt(c)}" for c in columns])
        for label, cells in table.items():
            w.writerow([label] + [_fmt(cells[c]) if c in cells else "" for c in columns])


def write_depth_csv(video: str, reports: list[DepthReport], path, frames=None) -> None:
    frames = list(range(len(reports))) if frames is None else list(frames)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEPTH_COLUMNS)
        for t, r in zip(frames, reports):
            w.writerow([video, t] + [_fmt(v) for v in (r.mae, r.absrel, r.delta, r.scale, r.shift)])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
