"""Learnable scene representation.

A :class:`SceneModel` bundles three things that share one :class:`ParamStore`:

* :class:`CanonicalField`: MLP from an encoded canonical point to density and color.
* :class:`MappingNetwork`: per-frame bijections between frame space and the
  canonical volume, built from affine coupling layers conditioned on a learned
  latent code per frame.
* the camera description used by the renderer.

Points are handled as ``(B, N, 3)`` graphs (``B`` rays, ``N`` samples), and each
ray carries one frame index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore

SCALE_BOUND = 3.0
CKPT_MAGIC = b"CNCKPT01"


def positional_encode(x, bands: int):
    """Raw point followed by ``sin(2^l pi x), cos(2^l pi x)`` for ``l < bands``.

    Works on ndarrays and on graph nodes; the last axis must be the coordinate
    axis.  Output length along that axis is ``D + 2 * D * bands``.
    """
    if bands < 0:
        raise ValueError("band count must be non-negative")
    if not isinstance(x, Node):
        x = np.asarray(x, dtype=np.float64)
        if bands == 0:
            return x.copy()
        freqs = (2.0 ** np.arange(bands)) * np.pi
        ang = x[..., None, :] * freqs[:, None]
        feats = np.stack([np.sin(ang), np.cos(ang)], axis=-2)
        feats = feats.reshape(*x.shape[:-1], 2 * bands * x.shape[-1])
        return np.concatenate([x, feats], axis=-1)
    if bands == 0:
        return x
    lead = x.shape[:-1]
    d = x.shape[-1]
    freqs = ((2.0 ** np.arange(bands)) * np.pi)[:, None]
    ang = x.reshape(*lead, 1, d) * freqs
    feats = ad.concat([ad.sin(ang), ad.cos(ang)], axis=-1)  # (..., L, 2d)
    return ad.concat([x, feats.reshape(*lead, 2 * bands * d)], axis=-1)


def _init_linear(rng, fan_in, fan_out, zero=False):
    if zero:
        return np.zeros((fan_in, fan_out)), np.zeros(fan_out)
    bound = 1.0 / np.sqrt(fan_in)
    return (rng.uniform(-bound, bound, (fan_in, fan_out)),
            rng.uniform(-bound, bound, fan_out))


def _flat(x: Node) -> Node:
    return x.reshape(-1, x.shape[-1])


@dataclass
class ModelConfig:
    n_frames: int
    height: int
    width: int
    field_layers: int = 6
    field_width: int = 128
    field_bands: int = 6
    coupling_layers: int = 6
    coupling_width: int = 64
    coupling_bands: int = 4
    latent_dim: int = 32
    latent_std: float = 1.0
    fov_deg: float = 60.0
    near: float = 0.5
    far: float = 1.5

    def __post_init__(self):
        if self.n_frames < 1 or self.height < 1 or self.width < 1:
            raise ValueError("frame count and image size must be positive")
        if self.field_layers < 2 or self.coupling_layers < 0:
            raise ValueError("bad layer counts")
        if not 0.0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def scene_center(self) -> float:
        """Depth of the camera-space point mapped to the box origin."""
        return 0.5 * (self.near + self.far)


class CanonicalField:
    """Density and color of the canonical volume."""

    def __init__(self, params: ParamStore, cfg: ModelConfig, rng, zero_output=True):
        self.params = params
        self.bands = cfg.field_bands
        in_dim = 3 + 6 * cfg.field_bands
        dims = [in_dim] + [cfg.field_width] * (cfg.field_layers - 1) + [4]
        self.n_linear = len(dims) - 1
        for k in range(self.n_linear):
            last = k == self.n_linear - 1
            w, b = _init_linear(rng, dims[k], dims[k + 1], zero=last and zero_output)
            params.add(f"field.W{k}", w)
            params.add(f"field.b{k}", b)

    def raw(self, u: Node) -> Node:
        h = _flat(positional_encode(u, self.bands))
        for k in range(self.n_linear):
            h = h @ self.params[f"field.W{k}"] + self.params[f"field.b{k}"]
            if k < self.n_linear - 1:
                h = ad.tanh(h)
        return h

    def query(self, u) -> tuple[Node, Node]:
        """Return ``(sigma, color)`` shaped ``u.shape[:-1]`` and ``u.shape[:-1] + (3,)``."""
        if not isinstance(u, Node):
            u = ad.constant(u)
        lead = u.shape[:-1]
        raw = self.raw(u)
        sigma = ad.softplus(raw[:, 0]).reshape(lead)
        color = ad.sigmoid(raw[:, 1:4]).reshape(*lead, 3)
        return sigma, color


class MappingNetwork:
    """Stack of affine coupling layers, one latent code per frame.

    Layer ``k`` rescales and shifts coordinate ``k % 3`` using an MLP of the
    two remaining coordinates and the frame latent, so every layer and
    therefore the whole stack is exactly invertible.
    """

    def __init__(self, params: ParamStore, cfg: ModelConfig, rng):
        self.params = params
        self.n_frames = cfg.n_frames
        self.n_layers = cfg.coupling_layers
        self.bands = cfg.coupling_bands
        self.latent_dim = cfg.latent_dim
        params.add("map.latent", rng.normal(0.0, cfg.latent_std, (cfg.n_frames, cfg.latent_dim)))
        cond_dim = 2 + 4 * cfg.coupling_bands
        hid = cfg.coupling_width
        for k in range(self.n_layers):
            w, b = _init_linear(rng, cond_dim + cfg.latent_dim, hid)
            params.add(f"map{k}.Wx", w[:cond_dim])
            params.add(f"map{k}.Wz", w[cond_dim:])
            params.add(f"map{k}.b0", b)
            w, b = _init_linear(rng, hid, hid)
            params.add(f"map{k}.W1", w)
            params.add(f"map{k}.b1", b)
            # zero output layer: every coupling starts as the identity
            w, b = _init_linear(rng, hid, 2, zero=True)
            params.add(f"map{k}.W2", w)
            params.add(f"map{k}.b2", b)

    def _check_frames(self, frames) -> np.ndarray:
        frames = np.atleast_1d(np.asarray(frames))
        if frames.size and (frames.min() < 0 or frames.max() >= self.n_frames):
            raise IndexError(f"frame index out of range [0, {self.n_frames})")
        return frames.astype(np.int64)

    def _latent(self, frames: np.ndarray) -> Node:
        return self.params["map.latent"][frames]

    def _scale_shift(self, k: int, cond: list[Node], latent: Node, lead: tuple):
        p = self.params
        c = ad.concat(cond, axis=-1)  # (B, N, 2)
        feats = _flat(positional_encode(c, self.bands))
        h = feats @ p[f"map{k}.Wx"]
        z = latent @ p[f"map{k}.Wz"] + p[f"map{k}.b0"]  # (B, H)
        h = (h.reshape(*lead, -1) + z.reshape(lead[0], 1, -1)).reshape(h.shape)
        h = ad.tanh(h)
        h = ad.tanh(h @ p[f"map{k}.W1"] + p[f"map{k}.b1"])
        out = h @ p[f"map{k}.W2"] + p[f"map{k}.b2"]
        s = ad.tanh(out[:, 0:1]) * SCALE_BOUND
        t = out[:, 1:2]
        return s.reshape(*lead, 1), t.reshape(*lead, 1)

    def _columns(self, x: Node) -> list[Node]:
        return [x[..., a:a + 1] for a in range(3)]

    def forward(self, x: Node, frames) -> Node:
        """Frame-space points ``(B, N, 3)`` of frame ``frames[b]`` to canonical."""
        frames = self._check_frames(frames)
        if self.n_layers == 0:
            return x
        lead = x.shape[:-1]
        latent = self._latent(frames)
        cols = self._columns(x)
        for k in range(self.n_layers):
            a = k % 3
            cond = [cols[(a + 1) % 3], cols[(a + 2) % 3]]
            s, t = self._scale_shift(k, cond, latent, lead)
            cols[a] = cols[a] * ad.exp(s) + t
        return ad.concat(cols, axis=-1)

    def inverse(self, u: Node, frames) -> Node:
        """Exact inverse of :meth:`forward` for the same frames."""
        frames = self._check_frames(frames)
        if self.n_layers == 0:
            return u
        lead = u.shape[:-1]
        latent = self._latent(frames)
        cols = self._columns(u)
        for k in reversed(range(self.n_layers)):
            a = k % 3
            cond = [cols[(a + 1) % 3], cols[(a + 2) % 3]]
            s, t = self._scale_shift(k, cond, latent, lead)
            cols[a] = (cols[a] - t) * ad.exp(-s)
        return ad.concat(cols, axis=-1)


class SceneModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        self.field = CanonicalField(self.params, cfg, rng)
        self.mapping = MappingNetwork(self.params, cfg, rng)

    @property
    def n_frames(self) -> int:
        return self.cfg.n_frames

    def copy(self) -> "SceneModel":
        other = SceneModel.__new__(SceneModel)
        other.cfg = self.cfg
        other.seed = self.seed
        other.params = ParamStore()
        for name, node in self.params.items():
            other.params.add(name, node.value.copy())
            other.params.m[name] = self.params.m[name].copy()
            other.params.v[name] = self.params.v[name].copy()
        other.params.step = self.params.step
        other.field = CanonicalField.__new__(CanonicalField)
        other.field.__dict__.update(self.field.__dict__, params=other.params)
        other.mapping = MappingNetwork.__new__(MappingNetwork)
        other.mapping.__dict__.update(self.mapping.__dict__, params=other.params)
        return other


def _as_points(x) -> tuple[Node, tuple, bool]:
    is_node = isinstance(x, Node)
    arr_shape = x.shape if is_node else np.shape(x)
    node = x if is_node else ad.constant(x)
    return node.reshape(1, -1, 3), arr_shape, is_node  # one frame: a single batch row


def query_canonical(model: SceneModel, u):
    """Density and color at canonical points ``u`` (shape ``(..., 3)``)."""
    sigma, color = model.field.query(u)
    if isinstance(u, Node):
        return sigma, color
    return sigma.value, color.value


def map_to_canonical(model: SceneModel, x, i: int):
    """``u = T_i(x)`` for points shaped ``(..., 3)`` of frame ``i``."""
    pts, shape, is_node = _as_points(x)
    u = model.mapping.forward(pts, np.full(pts.shape[0], i))
    u = u.reshape(shape)
    return u if is_node else u.value


def map_from_canonical(model: SceneModel, u, j: int):
    """``x = T_j^{-1}(u)``."""
    pts, shape, is_node = _as_points(u)
    x = model.mapping.inverse(pts, np.full(pts.shape[0], j))
    x = x.reshape(shape)
    return x if is_node else x.value


# --- checkpoints -----------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic "CNCKPT01"
#   uint64    header length H
#   H bytes   UTF-8 JSON header (sorted keys): config, seed, adam step,
#             extra metadata, and an ordered list of {name, shape}
#   payload   each listed array as little-endian float64, row-major, in order

def save_checkpoint(model: SceneModel, path, extra: dict | None = None,
                    include_optimizer: bool = True) -> None:
    arrays = [(name, node.value) for name, node in model.params.items()]
    if include_optimizer:
        arrays += [(f"adam.m/{n}", model.params.m[n]) for n in model.params]
        arrays += [(f"adam.v/{n}", model.params.v[n]) for n in model.params]
    header = {
        "config": asdict(model.cfg),
        "seed": model.seed,
        "adam_step": model.params.step,
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SceneModel, dict]:
    """Return the model and the ``extra`` metadata stored with it."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["config"].items() if k in known})
    model = SceneModel(cfg, seed=header["seed"])
    offset = 16 + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        name = entry["name"]
        if name.startswith("adam.m/"):
            model.params.m[name[7:]] = arr.astype(np.float64)
        elif name.startswith("adam.v/"):
            model.params.v[name[7:]] = arr.astype(np.float64)
        else:
            if name not in model.params:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            model.params[name].assign(arr.astype(np.float64))
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model.params.step = header["adam_step"]
    return model, header["extra"]
