"""Losses, correspondence batching and the optimization loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .fields import ModelConfig, SceneModel, load_checkpoint, save_checkpoint
from .renderer import Camera, RenderOutput, cast_rays, render_rays
from .scenedata import VideoClip

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, checkpoint: Path | None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        where = f"; last good checkpoint {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at iteration {iteration}{where}")


@dataclass
class TrainConfig:
    batch_correspondences: int = 256
    pairs_per_batch: int = 8
    n_samples: int = 32
    lr_color: float = 3e-4
    lr_flow: float = 1e-4
    color_weight: float = 1.0
    w_class: float = 1.0
    iterations: int = 10000
    seed: int = 0
    smooth_weight: float = 1e-3
    entropy_weight: float = 1e-3
    smooth_rays: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("batch_correspondences", "pairs_per_batch", "n_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr_color <= 0 or self.lr_flow <= 0:
            raise ValueError("learning rates must be positive")
        if self.w_class < 1:
            raise ValueError("w_class must be >= 1")

    @property
    def flow_scale(self) -> float:
        """Flow-loss multiplier standing in for the separate flow learning rate."""
        return self.lr_flow / self.lr_color


@dataclass
class CorrespondenceBatch:
    frames_i: np.ndarray      # (B,)
    frames_j: np.ndarray      # (B,)
    pixels: np.ndarray        # (B, 2) row, col in frame i
    flows: np.ndarray         # (B, 2) supervision drow, dcol
    colors: np.ndarray        # (B, 3) observed color of frame i at pixels
    instrument: np.ndarray    # (B,) class label, True = instrument

    def __len__(self) -> int:
        return len(self.frames_i)

    def class_weights(self, w_class: float) -> np.ndarray:
        return np.where(self.instrument, w_class, 1.0)

    def subset(self, idx) -> "CorrespondenceBatch":
        return CorrespondenceBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


def sample_batch(clip: VideoClip, cfg: TrainConfig, rng: np.random.Generator) -> CorrespondenceBatch:
    """Pick ``pairs_per_batch`` frame pairs, then valid-flow pixels evenly across them."""
    pairs = clip.flow_pairs()
    if clip.n_frames < 2 or not pairs:
        raise ValueError("clip without flows: supply flows/ or generate a synthetic clip")
    n_pairs = cfg.pairs_per_batch
    replace = len(pairs) < n_pairs
    chosen = rng.choice(len(pairs), size=n_pairs, replace=replace)
    counts = np.full(n_pairs, cfg.batch_correspondences // n_pairs)
    counts[: cfg.batch_correspondences % n_pairs] += 1
    cols = {k: [] for k in ("i", "j", "pix", "flow", "color", "inst")}
    for pair_idx, n in zip(chosen, counts):
        if n == 0:
            continue
        i, j = pairs[pair_idx]
        flow, valid = clip.flows[(i, j)]
        candidates = np.flatnonzero(valid)
        if candidates.size == 0:
            candidates = np.arange(valid.size)
        pick = candidates[rng.integers(0, candidates.size, size=n)]
        r, c = np.unravel_index(pick, valid.shape)
        inst = clip.instrument_mask(i)
        cols["i"].append(np.full(n, i))
        cols["j"].append(np.full(n, j))
        cols["pix"].append(np.stack([r, c], axis=-1).astype(np.float64))
        cols["flow"].append(flow[r, c].astype(np.float64))
        cols["color"].append(clip.frames[i, r, c])
        cols["inst"].append(np.zeros(n, bool) if inst is None else inst[r, c])
    return CorrespondenceBatch(
        frames_i=np.concatenate(cols["i"]),
        frames_j=np.concatenate(cols["j"]),
        pixels=np.concatenate(cols["pix"]),
        flows=np.concatenate(cols["flow"]),
        colors=np.concatenate(cols["color"]),
        instrument=np.concatenate(cols["inst"]),
    )


def render_batch(batch: CorrespondenceBatch, model: SceneModel, n_samples: int = 32,
                 rng: np.random.Generator | None = None) -> RenderOutput:
    rays = cast_rays(batch.pixels, Camera.from_config(model.cfg), n_samples, rng)
    return render_rays(model, rays, batch.frames_i, batch.frames_j)


def _flow_terms(batch, out: RenderOutput) -> Node:
    err = ad.abs_(out.flow - batch.flows).sum(axis=1)
    return err * out.valid.astype(np.float64)


def _color_terms(batch, out: RenderOutput) -> Node:
    return ad.square(out.color - batch.colors).sum(axis=1)


def loss_flow(batch: CorrespondenceBatch, model: SceneModel, out: RenderOutput | None = None,
              n_samples: int = 32) -> Node:
    """Mean L1 distance between rendered and supervision flow; flagged rays count as 0."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    out = out or render_batch(batch, model, n_samples)
    return ad.mean(_flow_terms(batch, out))


def loss_color(batch: CorrespondenceBatch, model: SceneModel, out: RenderOutput | None = None,
               n_samples: int = 32) -> Node:
    """Mean squared RGB error."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    out = out or render_batch(batch, model, n_samples)
    return ad.mean(_color_terms(batch, out))


def regularizer_other(model: SceneModel, batch: CorrespondenceBatch, out: RenderOutput,
                      cfg: TrainConfig, rng: np.random.Generator | None = None) -> Node:
    """Weighted temporal-smoothness and weight-entropy penalties.

    Smoothness carries the batch's frame-i samples into frames i-1 and i+1
    and penalizes ``|x_{i+1} + x_{i-1} - 2 x_i|^2`` (zero for identical or
    uniformly moving maps).  Entropy is taken over each valid ray's
    normalized compositing weights.
    """
    total = ad.constant(0.0)
    if cfg.smooth_weight > 0:
        interior = np.flatnonzero((batch.frames_i > 0) & (batch.frames_i < model.n_frames - 1))
        if interior.size:
            if interior.size > cfg.smooth_rays:
                interior = interior[:cfg.smooth_rays] if rng is None else \
                    np.sort(rng.choice(interior, cfg.smooth_rays, replace=False))
            u = out.canonical[interior]
            x = out.samples[interior]
            fi = batch.frames_i[interior]
            prev = model.mapping.inverse(u, fi - 1)
            nxt = model.mapping.inverse(u, fi + 1)
            accel = prev + nxt - 2.0 * x
            total = total + cfg.smooth_weight * ad.mean(ad.square(accel).sum(axis=-1))
    if cfg.entropy_weight > 0:
        valid = out.valid.astype(np.float64)
        if valid.any():
            guard = 1.0 - valid
            p = out.weights / (out.opacity + guard).reshape(-1, 1)
            ent = -(p * ad.log(p + 1e-10)).sum(axis=1)
            total = total + cfg.entropy_weight * (ent * valid).sum() * (1.0 / valid.sum())
    return total


@dataclass
class LossTerms:
    total: Node
    flow: float
    color: float
    other: float

    def row(self, iteration: int) -> dict:
        return {"iteration": iteration, "L_flow": self.flow, "L_color": self.color,
                "L_other": self.other, "total": float(self.total.value)}


def total_loss(batch: CorrespondenceBatch, model: SceneModel, cfg: TrainConfig,
               out: RenderOutput | None = None, rng: np.random.Generator | None = None) -> LossTerms:
    """Class-weighted data term plus regularizers.

    Each entry contributes ``w * (flow_scale * flow + color_weight * color)``
    with ``w = w_class`` for instrument pixels and 1 otherwise; the data term
    is the mean over the batch.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    out = out or render_batch(batch, model, cfg.n_samples)
    flow_e = _flow_terms(batch, out)
    color_e = _color_terms(batch, out)
    per_entry = flow_e * cfg.flow_scale + color_e * cfg.color_weight
    data = ad.mean(per_entry * batch.class_weights(cfg.w_class))
    other = regularizer_other(model, batch, out, cfg, rng)
    total = data + other
    return LossTerms(total, float(flow_e.value.mean()), float(color_e.value.mean()),
                     float(other.value))


# --- loop ---------------------------------------------------------------

LOSS_COLUMNS = ("iteration", "L_flow", "L_color", "L_other", "total")


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]])


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def build_model(clip: VideoClip, cfg: TrainConfig, arch: dict | None = None) -> SceneModel:
    mcfg = ModelConfig(n_frames=clip.n_frames, height=clip.height, width=clip.width, **(arch or {}))
    return SceneModel(mcfg, seed=cfg.seed)


def _save(model, path, iteration, rng, history, cfg):
    save_checkpoint(model, path, extra={"iteration": iteration,
                                        "train_config": asdict(cfg),
                                        "rng_state": rng.bit_generator.state,
                                        "history": history})


def train(clip: VideoClip, cfg: TrainConfig, model: SceneModel | None = None,
          arch: dict | None = None, checkpoint_path=None,
          resume: bool = False) -> tuple[SceneModel, list[dict]]:
    """Optimize a scene model on a clip; returns the model and per-iteration losses.

    With ``checkpoint_path`` the state is written every ``checkpoint_every``
    iterations and at the end.  ``resume`` continues from that file.
    """
    if not clip.has_flows:
        raise ValueError("clip without flows: supply flows/ or generate a synthetic clip")
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    start = 0
    ckpt = Path(checkpoint_path) if checkpoint_path else None
    if resume and ckpt is not None and ckpt.exists():
        model, extra = load_checkpoint(ckpt)
        start = int(extra["iteration"])
        rng.bit_generator.state = extra["rng_state"]
        history = list(extra.get("history", []))
    elif model is None:
        model = build_model(clip, cfg, arch)
    if (model.n_frames, model.cfg.height, model.cfg.width) != (clip.n_frames, clip.height, clip.width):
        raise ValueError("model and clip dimensions differ")
    last_good = None
    for it in range(start, cfg.iterations):
        batch = sample_batch(clip, cfg, rng)
        out = render_batch(batch, model, cfg.n_samples, rng)
        terms = total_loss(batch, model, cfg, out, rng)
        if not np.isfinite(terms.total.value):
            raise NonFiniteLossError(it, last_good)
        history.append(terms.row(it))
        ad.backward(terms.total)
        ad.adam_step(model.params, cfg.lr_color, cfg.beta1, cfg.beta2, cfg.eps)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d  flow %.4f  color %.5f  other %.5f  total %.5f",
                     it, terms.flow, terms.color, terms.other, float(terms.total.value))
        if ckpt is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            _save(model, ckpt, it + 1, rng, history, cfg)
            last_good = ckpt
    if ckpt is not None:
        _save(model, ckpt, max(cfg.iterations, start), rng, history, cfg)
    return model, history
