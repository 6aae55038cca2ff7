"""In-memory video clips and their directory layout.

Directory layout::

    clip.txt                      key = value metadata (name, fps, labels, ...)
    frames/00000.ppm              RGB frames, consecutive indices from 0
    masks/<label>/00000.pgm       optional, any subset of frames per label
    flows/00000_00003.flo2        optional, flow from frame 0 to frame 3
    depth/00000.f32               optional ground-truth depth
    tracks/gt.trk                 optional ground-truth trajectories
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import formats

_FLOW_NAME = re.compile(r"^(\d+)_(\d+)\.flo2$")
_FRAME_NAME = re.compile(r"^(\d+)\.ppm$")


class ClipError(ValueError):
    """Malformed or inconsistent clip data."""


@dataclass
class VideoClip:
    """Frames plus optional supervision and ground truth.

    ``flows[(i, j)]`` is ``(flow, valid)`` where ``flow[r, c] = (drow, dcol)``
    moves pixel ``(r, c)`` of frame ``i`` to frame ``j``.  ``masks[label]`` maps
    frame index to a boolean mask; a frame without an entry has no annotation.
    ``gt_tracks`` is ``(positions (T, H, W, 2), visible (T, H, W))`` for the
    pixels of frame ``tracks_start``.
    """

    frames: np.ndarray
    masks: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    flows: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    gt_depth: np.ndarray | None = None
    gt_tracks: tuple[np.ndarray, np.ndarray] | None = None
    tracks_start: int = 0
    fps: float = 25.0
    labels: tuple[str, ...] = ()
    instrument_labels: tuple[str, ...] = ()
    name: str = "clip"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ClipError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if not self.labels:
            self.labels = tuple(sorted(self.masks))
        for label in self.masks:
            if label not in self.labels:
                raise ClipError(f"mask label {label!r} not in declared labels {self.labels}")
        for label in self.instrument_labels:
            if label not in self.labels:
                raise ClipError(f"instrument label {label!r} not in declared labels")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def has_flows(self) -> bool:
        return bool(self.flows)

    def flow_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.flows)

    def mask(self, label: str, frame: int) -> np.ndarray | None:
        return self.masks.get(label, {}).get(frame)

    def instrument_mask(self, frame: int) -> np.ndarray | None:
        """Union of instrument-label masks for a frame, None if none annotated."""
        out = None
        for label in self.instrument_labels:
            m = self.mask(label, frame)
            if m is not None:
                out = m.copy() if out is None else out | m
        return out


# --- metadata -------------------------------------------------------------

def _write_meta(path: Path, clip: VideoClip) -> None:
    lines = [
        f"name = {clip.name}",
        f"fps = {clip.fps!r}",
        f"n_frames = {clip.n_frames}",
        f"height = {clip.height}",
        f"width = {clip.width}",
        f"labels = {','.join(clip.labels)}",
        f"instrument_labels = {','.join(clip.instrument_labels)}",
        f"tracks_start = {clip.tracks_start}",
    ]
    path.write_text("\n".join(lines) + "\n")


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    if not path.exists():
        return meta
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def _split_list(s: str | None) -> tuple[str, ...]:
    if not s:
        return ()
    return tuple(x.strip() for x in s.split(",") if x.strip())


# --- save / load -------------------------------------------------------------

def save_clip(clip: VideoClip, directory) -> Path:
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    _write_meta(root / "clip.txt", clip)
    for t, frame in enumerate(clip.frames):
        formats.write_ppm(root / "frames" / f"{t:05d}.ppm", frame)
    for label, per_frame in clip.masks.items():
        d = root / "masks" / label
        d.mkdir(parents=True, exist_ok=True)
        for t, m in sorted(per_frame.items()):
            formats.write_pgm(d / f"{t:05d}.pgm", np.where(m, 255, 0))
    if clip.flows:
        (root / "flows").mkdir(exist_ok=True)
        for (i, j), (flow, valid) in sorted(clip.flows.items()):
            formats.write_flow(root / "flows" / f"{i:05d}_{j:05d}.flo2", flow, valid)
    if clip.gt_depth is not None:
        (root / "depth").mkdir(exist_ok=True)
        for t, d in enumerate(clip.gt_depth):
            formats.write_depth(root / "depth" / f"{t:05d}.f32", d)
    if clip.gt_tracks is not None:
        (root / "tracks").mkdir(exist_ok=True)
        pos, vis = clip.gt_tracks
        formats.write_tracks(root / "tracks" / "gt.trk", pos, vis, clip.tracks_start)
    return root


def _center_crop_box(h: int, w: int) -> tuple[int, int, int]:
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side


def _resize_index(side: int, size: int) -> np.ndarray:
    # nearest source pixel for each destination pixel center
    src = (np.arange(size) + 0.5) * (side / size) - 0.5
    return np.clip(np.rint(src), 0, side - 1).astype(np.int64)


def _frame_indices(directory: Path, sub: str, pattern: re.Pattern) -> dict[int, Path]:
    d = directory / sub
    if not d.is_dir():
        return {}
    out = {}
    for p in d.iterdir():
        m = pattern.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return out


def load_clip(directory, size: int | None = None) -> VideoClip:
    """Read a clip directory as stored, or center-cropped and resized to ``size`` x ``size``.

    Frames must be numbered consecutively from 0.  Missing optional
    subdirectories leave the corresponding fields empty.
    """
    root = Path(directory)
    if not root.is_dir():
        raise ClipError(f"{root}: not a directory")
    frame_files = _frame_indices(root, "frames", _FRAME_NAME)
    if not frame_files:
        raise ClipError(f"{root}: no frames/NNNNN.ppm files")
    idx = sorted(frame_files)
    if idx != list(range(len(idx))):
        raise ClipError(f"{root}: frame indices are not consecutive from 0")
    try:
        frames = [formats.read_ppm(frame_files[i]) for i in idx]
    except (OSError, formats.FormatError) as exc:
        raise ClipError(f"unreadable frame: {exc}") from exc
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ClipError(f"{root}: inconsistent frame sizes {sorted(shapes)}")
    h, w = frames[0].shape[:2]
    if size is None:
        r0, c0, scale = 0, 0, 1.0
        ri, ci = np.arange(h), np.arange(w)
    else:
        r0, c0, side = _center_crop_box(h, w)
        ri = r0 + _resize_index(side, int(size))
        ci = c0 + _resize_index(side, int(size))
        scale = int(size) / side

    def geom(a):
        return a[np.ix_(ri, ci)] if a.ndim == 2 else a[ri][:, ci]

    meta = _read_meta(root / "clip.txt")
    T = len(frames)
    clip_frames = np.stack([geom(f) for f in frames])

    masks: dict[str, dict[int, np.ndarray]] = {}
    mask_root = root / "masks"
    if mask_root.is_dir():
        for label_dir in sorted(p for p in mask_root.iterdir() if p.is_dir()):
            per = {}
            for t, p in _frame_indices(mask_root, label_dir.name, re.compile(r"^(\d+)\.pgm$")).items():
                try:
                    m = formats.read_pgm(p)
                except (OSError, formats.FormatError) as exc:
                    raise ClipError(f"unreadable mask: {exc}") from exc
                if m.shape != (h, w):
                    raise ClipError(f"{p}: mask shape {m.shape} does not match frames {(h, w)}")
                if t >= T:
                    raise ClipError(f"{p}: mask for nonexistent frame {t}")
                per[t] = geom(m) > 127
            masks[label_dir.name] = per

    flows = {}
    flow_dir = root / "flows"
    if flow_dir.is_dir():
        for p in sorted(flow_dir.iterdir()):
            m = _FLOW_NAME.match(p.name)
            if not m:
                continue
            i, j = int(m.group(1)), int(m.group(2))
            if i >= T or j >= T:
                raise ClipError(f"{p}: flow references frame beyond {T - 1}")
            try:
                flow, valid = formats.read_flow(p)
            except (OSError, formats.FormatError) as exc:
                raise ClipError(f"unreadable flow: {exc}") from exc
            if flow.shape[:2] != (h, w):
                raise ClipError(f"{p}: flow shape {flow.shape[:2]} does not match frames {(h, w)}")
            if scale != 1.0:
                flow = (geom(flow) * scale).astype(np.float32)
                valid = geom(valid)
            else:
                flow, valid = geom(flow), geom(valid)
            flows[(i, j)] = (flow, valid)

    gt_depth = None
    depth_files = _frame_indices(root, "depth", re.compile(r"^(\d+)\.f32$"))
    if depth_files:
        if sorted(depth_files) != idx:
            raise ClipError(f"{root}: depth must be given for every frame")
        ds = []
        for t in idx:
            try:
                d = formats.read_depth(depth_files[t])
            except (OSError, formats.FormatError) as exc:
                raise ClipError(f"unreadable depth: {exc}") from exc
            if d.shape != (h, w):
                raise ClipError(f"{depth_files[t]}: depth shape {d.shape} does not match frames")
            ds.append(geom(d))
        gt_depth = np.stack(ds)

    gt_tracks = None
    tracks_start = int(meta.get("tracks_start", 0))
    trk = root / "tracks" / "gt.trk"
    if trk.exists():
        pos, vis, tracks_start = formats.read_tracks(trk)
        if pos.shape[:3] != (T, h, w):
            raise ClipError(f"{trk}: track shape {pos.shape[:3]} does not match clip")
        pos = geom(pos.transpose(1, 2, 0, 3)).transpose(2, 0, 1, 3)
        vis = geom(vis.transpose(1, 2, 0)).transpose(2, 0, 1)
        if scale != 1.0 or r0 or c0:
            pos = (pos - np.array([r0, c0]) + 0.5) * scale - 0.5
        gt_tracks = (pos, vis)

    labels = _split_list(meta.get("labels")) or tuple(sorted(masks))
    return VideoClip(
        frames=clip_frames,
        masks=masks,
        flows=flows,
        gt_depth=gt_depth,
        gt_tracks=gt_tracks,
        tracks_start=tracks_start,
        fps=float(meta.get("fps", 25.0)),
        labels=labels,
        instrument_labels=_split_list(meta.get("instrument_labels")),
        name=meta.get("name", root.name),
    )


def temporal_subsample(clip: VideoClip, keep_fraction: float) -> VideoClip:
    """Keep every ``1 / keep_fraction``-th frame starting at frame 0."""
    if keep_fraction <= 0 or keep_fraction > 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    stride = int(round(1.0 / keep_fraction))
    if abs(stride * keep_fraction - 1.0) > 1e-9:
        raise ValueError(f"keep_fraction {keep_fraction} is not 1/k for an integer k")
    if stride == 1:
        return clip
    keep = list(range(0, clip.n_frames, stride))
    if len(keep) < 2:
        raise ValueError(f"subsampling {clip.n_frames} frames at {keep_fraction} leaves < 2 frames")
    remap = {old: new for new, old in enumerate(keep)}
    masks = {label: {remap[t]: m for t, m in per.items() if t in remap}
             for label, per in clip.masks.items()}
    flows = {(remap[i], remap[j]): v for (i, j), v in clip.flows.items()
             if i in remap and j in remap}
    gt_depth = None if clip.gt_depth is None else clip.gt_depth[keep]
    gt_tracks = None
    if clip.gt_tracks is not None and clip.tracks_start in remap:
        gt_tracks = (clip.gt_tracks[0][keep], clip.gt_tracks[1][keep])
    return replace(
        clip,
        frames=clip.frames[keep],
        masks=masks,
        flows=flows,
        gt_depth=gt_depth,
        gt_tracks=gt_tracks,
        tracks_start=remap.get(clip.tracks_start, 0),
        fps=clip.fps * keep_fraction,
    )
