"""Binary depth rasters (DPR1) and TUM trajectory text files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingDepthFile
from .lie import Pose

DPR1_MAGIC = b"DPR1"


def write_depth(path, depth) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError("depth raster must be 2-D")
    H, W = depth.shape
    with open(path, "wb") as f:
        f.write(DPR1_MAGIC)
        f.write(struct.pack("<II", H, W))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingDepthFile(str(path))
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != DPR1_MAGIC:
        raise FormatError(f"{path}: not a DPR1 depth raster")
    H, W = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * H * W:
        raise FormatError(f"{path}: expected {H}x{W} floats, got {len(data) - 12} bytes")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(H, W).astype(np.float64)


def write_tum(path, rows, comment=None) -> None:
    """``rows`` are (timestamp, Pose) with the pose in TUM convention
    (camera-to-world)."""
    with open(path, "w") as f:
        if comment:
            f.write(f"# {comment}\n")
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in rows:
            w, x, y, z = pose.q
            tx, ty, tz = pose.t
            f.write(f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def read_tum(path):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
        rows.append((ts, Pose([qw, qx, qy, qz], [tx, ty, tz])))
    return rows
