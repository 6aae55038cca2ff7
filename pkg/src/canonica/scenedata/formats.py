"""Readers and writers for the on-disk clip formats.

All multi-byte integers and floats are little-endian.

* ``.ppm``  binary P6, maxval 255, RGB.
* ``.pgm``  binary P5, maxval 255, used for masks (0 / 255).
* ``.flo2`` ``b"FLO2"``, uint32 H, uint32 W, then H*W*2 float32 (drow, dcol)
  row-major, then H*W uint8 validity (1 = valid).
* ``.f32``  ``b"DPF1"``, uint32 H, uint32 W, float32 scale, then H*W float32;
  depth = stored value * scale.
* ``.trk``  ``b"TRK1"``, uint32 T, H, W, uint32 start frame, then T*H*W*2
  float64 (row, col), then T*H*W uint8 visibility.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLOW_MAGIC = b"FLO2"
DEPTH_MAGIC = b"DPF1"
TRACK_MAGIC = b"TRK1"


class FormatError(ValueError):
    pass


def _read_pnm(path, magic: bytes) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    return np.frombuffer(data, dtype=np.uint8, offset=pos + 1), h, w


def read_ppm(path) -> np.ndarray:
    """RGB image as float64 in [0, 1], shape (H, W, 3)."""
    raw, h, w = _read_pnm(path, b"P6")
    if raw.size != h * w * 3:
        raise FormatError(f"{path}: expected {h * w * 3} bytes of pixels, got {raw.size}")
    return raw.reshape(h, w, 3) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Grayscale image as uint8, shape (H, W)."""
    raw, h, w = _read_pnm(path, b"P5")
    if raw.size != h * w:
        raise FormatError(f"{path}: expected {h * w} bytes of pixels, got {raw.size}")
    return raw.reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_flow(path, flow: np.ndarray, valid: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    h, w = flow.shape[:2]
    if flow.shape != (h, w, 2) or np.shape(valid) != (h, w):
        raise FormatError("flow must be (H, W, 2) with an (H, W) validity mask")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC + struct.pack("<II", h, w))
        fh.write(flow.tobytes())
        fh.write(np.asarray(valid, dtype=np.uint8).tobytes())


def read_flow(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(flow float32 (H, W, 2), valid bool (H, W))``."""
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad flow magic {data[:4]!r}")
    h, w = struct.unpack("<II", data[4:12])
    expected = 12 + h * w * 8 + h * w
    if len(data) != expected:
        raise FormatError(f"{path}: flow file is {len(data)} bytes, expected {expected} for {h}x{w}")
    flow = np.frombuffer(data, dtype="<f4", count=h * w * 2, offset=12).reshape(h, w, 2)
    valid = np.frombuffer(data, dtype=np.uint8, offset=12 + h * w * 8).reshape(h, w)
    return flow.astype(np.float32), valid.astype(bool)


def write_depth(path, depth: np.ndarray, scale: float = 1.0) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    raw = (depth / scale).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<IIf", h, w, scale))
        fh.write(raw.tobytes())


def read_depth(path) -> np.ndarray:
    """Depth raster (float32) with the header scale applied."""
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad depth magic {data[:4]!r}")
    h, w, scale = struct.unpack("<IIf", data[4:16])
    if len(data) != 16 + 4 * h * w:
        raise FormatError(f"{path}: depth payload does not match {h}x{w}")
    raw = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w)
    return (raw * np.float32(scale)).astype(np.float32)


def write_tracks(path, positions: np.ndarray, visible: np.ndarray, start: int = 0) -> None:
    t, h, w = visible.shape
    with open(path, "wb") as fh:
        fh.write(TRACK_MAGIC + struct.pack("<IIII", t, h, w, start))
        fh.write(np.asarray(positions, dtype="<f8").tobytes())
        fh.write(np.asarray(visible, dtype=np.uint8).tobytes())


def read_tracks(path) -> tuple[np.ndarray, np.ndarray, int]:
    data = Path(path).read_bytes()
    if data[:4] != TRACK_MAGIC:
        raise FormatError(f"{path}: bad track magic {data[:4]!r}")
    t, h, w, start = struct.unpack("<IIII", data[4:20])
    n = t * h * w
    if len(data) != 20 + 16 * n + n:
        raise FormatError(f"{path}: track payload does not match {t}x{h}x{w}")
    pos = np.frombuffer(data, dtype="<f8", count=2 * n, offset=20).reshape(t, h, w, 2)
    vis = np.frombuffer(data, dtype=np.uint8, offset=20 + 16 * n).reshape(t, h, w)
    return pos.astype(np.float64), vis.astype(bool), start
