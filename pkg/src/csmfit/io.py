"""File formats.

Binary layouts (all little-endian, row-major):

* grid file: ASCII header line ``ACSM-GRID 1 <w> <h>\\n`` then ``w*h``
  float32 values.
* canonical map: ASCII header line ``ACSM-CSM 1 <w> <h>\\n`` then ``w*h``
  pairs of float32 ``(u1, u2)``; background pixels hold two NaNs.
* masks: 8-bit grayscale PNG, value >= 128 is foreground.
* part labels: 8-bit grayscale PNG holding the part id, 255 on background.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .raster import CsmMap

GRID_MAGIC = "ACSM-GRID 1"
CSM_MAGIC = "ACSM-CSM 1"


def _write_header_blob(path, magic, w, h, arr):
    header = f"{magic} {w} {h}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_header_blob(path, magic, per_pixel):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    want = magic.split()
    if parts[:len(want)] != want or len(parts) != len(want) + 2:
        raise FormatError(f"{path}: expected header '{magic} <w> <h>'")
    try:
        w, h = int(parts[-2]), int(parts[-1])
    except ValueError:
        raise FormatError(f"{path}: bad image size in header") from None
    body = raw[nl + 1:]
    if len(body) != 4 * w * h * per_pixel:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {4 * w * h * per_pixel}")
    arr = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return w, h, arr


def write_grid(path, grid):
    grid = np.asarray(grid)
    h, w = grid.shape
    _write_header_blob(path, GRID_MAGIC, w, h, grid)


def read_grid(path):
    w, h, arr = _read_header_blob(path, GRID_MAGIC, 1)
    return arr.reshape(h, w)


def write_csm(path, csm):
    u = np.asarray(csm.u, dtype="<f4").copy()
    # float32 rounding must not push a coordinate onto 1.0
    u1 = u[..., 0]
    u1[u1 >= 1.0] = 0.0
    u[..., 1] = np.minimum(u[..., 1], np.nextafter(np.float32(1), np.float32(0)))
    _write_header_blob(path, CSM_MAGIC, csm.width, csm.height, u)


def read_csm(path):
    w, h, arr = _read_header_blob(path, CSM_MAGIC, 2)
    u = arr.reshape(h, w, 2)
    try:
        return CsmMap(w, h, u)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_mask(path, mask):
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path):
    try:
        img = Image.open(path).convert("L")
    except OSError as exc:
        raise FormatError(f"{path}: cannot read mask ({exc})") from None
    return np.asarray(img) >= 128


def write_labels(path, labels):
    labels = np.asarray(labels)
    if labels.max(initial=-1) >= 255:
        raise FormatError("part labels PNG supports at most 255 parts")
    Image.fromarray(np.where(labels < 0, 255, labels).astype(np.uint8)).save(path)


def read_labels(path):
    arr = np.asarray(Image.open(path).convert("L")).astype(np.int64)
    return np.where(arr == 255, -1, arr)


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read JSON ({exc})") from None


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
