"""Point-cloud file I/O: LAS 1.2 through 1.4 reading, LAS 1.2 writing, and a
plain XYZ CSV fallback. Only x, y, z are used; every other point attribute is
ignored on read and zeroed on write."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .lidar import PointCloud

_LAS_SIGNATURE = b"LASF"
# minimum point-record length per point data format id (0-10)
_MIN_RECORD_LEN = {0: 20, 1: 28, 2: 26, 3: 34, 4: 57, 5: 63, 6: 30, 7: 36, 8: 38, 9: 59, 10: 67}


def read_las(path: str | Path) -> PointCloud:
    """Read x, y, z from an uncompressed LAS 1.2-1.4 file."""
    buf = Path(path).read_bytes()
    if len(buf) < 227:
        raise DataError(f"{path}: file shorter than a LAS header")
    if buf[:4] != _LAS_SIGNATURE:
        raise DataError(f"{path}: not a LAS file (signature {buf[:4]!r})")
    major, minor = buf[24], buf[25]
    if major != 1 or minor not in (0, 1, 2, 3, 4):
        raise DataError(f"{path}: unsupported LAS version {major}.{minor}")
    header_size, point_offset = struct.unpack_from("<HI", buf, 94)
    fmt_id = buf[104]
    if fmt_id & 0x80:
        raise DataError(f"{path}: compressed (LAZ) input is not supported; decompress first")
    record_len = struct.unpack_from("<H", buf, 105)[0]
    (legacy_count,) = struct.unpack_from("<I", buf, 107)
    count = legacy_count
    if minor == 4 and header_size >= 255:
        (count64,) = struct.unpack_from("<Q", buf, 247)
        if count64:
            count = count64
    min_len = _MIN_RECORD_LEN.get(fmt_id)
    if min_len is None:
        raise DataError(f"{path}: unknown point data format {fmt_id}")
    if record_len < min_len:
        raise DataError(f"{path}: record length {record_len} below format {fmt_id} minimum")
    sx, sy, sz, ox, oy, oz = struct.unpack_from("<6d", buf, 131)

    need = point_offset + count * record_len
    if len(buf) < need:
        raise DataError(f"{path}: point data truncated ({len(buf)} < {need} bytes)")
    if count == 0:
        return PointCloud(np.empty((0, 3)))
    records = np.frombuffer(
        buf, dtype=np.uint8, count=count * record_len, offset=point_offset
    ).reshape(count, record_len)
    ints = np.ascontiguousarray(records[:, :12]).view("<i4").reshape(count, 3)
    xyz = ints.astype(np.float64) * np.array([sx, sy, sz]) + np.array([ox, oy, oz])
    return PointCloud(xyz)


def write_las(path: str | Path, cloud: PointCloud, scale: float = 0.001) -> None:
    """Write a minimal LAS 1.2 file with point data format 0.

    Coordinates are quantized to the given scale (default 1 mm in map units),
    so reading back reproduces them only to scale/2.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be > 0, got {scale}")
    n = len(cloud)
    if n:
        offsets = np.floor(cloud.points.min(axis=0))
        ints = np.round((cloud.points - offsets) / scale)
        if np.abs(ints).max() > 2**31 - 1:
            raise DataError("coordinates overflow the LAS integer range at this scale")
        ints = ints.astype("<i4")
        mins = cloud.points.min(axis=0)
        maxs = cloud.points.max(axis=0)
    else:
        offsets = np.zeros(3)
        ints = np.empty((0, 3), dtype="<i4")
        mins = maxs = np.zeros(3)

    header = bytearray(227)
    header[0:4] = _LAS_SIGNATURE
    header[24] = 1
    header[25] = 2
    header[26:58] = b"canopymap".ljust(32, b"\0")
    header[58:90] = b"canopymap".ljust(32, b"\0")
    struct.pack_into("<HH", header, 90, 1, 2019)  # creation day/year
    struct.pack_into("<HI", header, 94, 227, 227)
    struct.pack_into("<I", header, 100, 0)  # no VLRs
    header[104] = 0
    struct.pack_into("<H", header, 105, 20)
    struct.pack_into("<I", header, 107, n)
    struct.pack_into("<5I", header, 111, n, 0, 0, 0, 0)
    struct.pack_into("<6d", header, 131, scale, scale, scale, *offsets)
    struct.pack_into(
        "<6d", header, 179, maxs[0], mins[0], maxs[1], mins[1], maxs[2], mins[2]
    )

    records = np.zeros((n, 20), dtype=np.uint8)
    records[:, :12] = ints.view(np.uint8).reshape(n, 12)
    records[:, 14] = 0x09  # return 1 of 1
    with open(path, "wb") as f:
        f.write(bytes(header))
        f.write(records.tobytes())


# ---------------------------------------------------------------------------
# XYZ CSV fallback
# ---------------------------------------------------------------------------

def read_xyz_csv(path: str | Path) -> PointCloud:
    """Read a CSV whose header row must name the columns x, y, z."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [c.strip().lower() for c in lines[0].split(",")]
    if header[:3] != ["x", "y", "z"]:
        raise DataError(f"{path}: first line must be the header 'x,y,z', got {lines[0]!r}")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 3:
            raise DataError(f"{path}:{ln}: expected 3 columns, got {len(parts)}")
        try:
            rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
        except ValueError as exc:
            raise DataError(f"{path}:{ln}: non-numeric value ({exc})") from exc
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_xyz_csv(path: str | Path, cloud: PointCloud) -> None:
    lines = ["x,y,z"]
    for x, y, z in cloud.points:
        lines.append(f"{float(x)!r},{float(y)!r},{float(z)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_points(path: str | Path) -> PointCloud:
    """Dispatch on extension: .las, or .csv/.xyz/.txt for the CSV fallback."""
    suffix = Path(path).suffix.lower()
    if suffix == ".las":
        return read_las(path)
    if suffix == ".laz":
        raise DataError(f"{path}: compressed (LAZ) input is not supported; decompress first")
    if suffix in (".csv", ".xyz", ".txt"):
        return read_xyz_csv(path)
    raise ConfigError(f"unknown point-cloud extension {suffix!r} (use .las or .csv)")


def write_points(path: str | Path, cloud: PointCloud) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".las":
        write_las(path, cloud)
    elif suffix in (".csv", ".xyz", ".txt"):
        write_xyz_csv(path, cloud)
    else:
        raise ConfigError(f"unknown point-cloud extension {suffix!r} (use .las or .csv)")
