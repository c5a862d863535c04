"""Raster and patch-container file I/O.

Rasters are stored as single-IFD uncompressed GeoTIFFs (32-bit float or 8-bit
byte samples) with georeferencing in the ModelPixelScale / ModelTiepoint tags,
the CRS tag string in GeoAsciiParams, and the nodata sentinel in the GDAL
nodata tag. A plain-text ESRI ASCII Grid fallback covers tools that cannot
read TIFF. Training patches use a purpose-built binary container (magic
"CNPY1"). All multi-byte integers in the patch container are little-endian;
TIFFs are written little-endian but read in either byte order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .geo import BandStats
from .grid import (
    NODATA_BYTE,
    NODATA_FLOAT,
    GridGeometry,
    PatchSet,
    Raster,
    RasterStack,
    default_roles,
)

# ---------------------------------------------------------------------------
# GeoTIFF
# ---------------------------------------------------------------------------

_TAG_WIDTH = 256
_TAG_HEIGHT = 257
_TAG_BITS = 258
_TAG_COMPRESSION = 259
_TAG_PHOTOMETRIC = 262
_TAG_DESCRIPTION = 270
_TAG_STRIP_OFFSETS = 273
_TAG_SAMPLES = 277
_TAG_ROWS_PER_STRIP = 278
_TAG_STRIP_COUNTS = 279
_TAG_PLANAR = 284
_TAG_SAMPLE_FORMAT = 339
_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_GEO_ASCII = 34737
_TAG_NODATA = 42113

_TYPE_BYTE = 1
_TYPE_ASCII = 2
_TYPE_SHORT = 3
_TYPE_LONG = 4
_TYPE_FLOAT = 11
_TYPE_DOUBLE = 12

_TYPE_SIZE = {_TYPE_BYTE: 1, _TYPE_ASCII: 1, _TYPE_SHORT: 2, _TYPE_LONG: 4,
              _TYPE_FLOAT: 4, _TYPE_DOUBLE: 8}
_TYPE_FMT = {_TYPE_BYTE: "B", _TYPE_SHORT: "H", _TYPE_LONG: "I",
             _TYPE_FLOAT: "f", _TYPE_DOUBLE: "d"}


def write_geotiff(path: str | Path, raster: Raster) -> None:
    """Write a raster as an uncompressed little-endian GeoTIFF.

    float32 data is stored as IEEE floats, uint8 as unsigned bytes; any other
    dtype is rejected. Multi-band data is interleaved by pixel in one strip.
    Band roles, when the raster is a stack carrying them, go into the
    ImageDescription tag separated by ";".
    """
    values = raster.values
    if values.dtype == np.float32:
        bits, fmt = 32, 3
    elif values.dtype == np.uint8:
        bits, fmt = 8, 1
    else:
        raise ConfigError(f"unsupported raster dtype {values.dtype} (use float32 or uint8)")
    g = raster.geometry
    nb = raster.band_count
    pixel_data = np.ascontiguousarray(np.transpose(values, (1, 2, 0)), dtype=values.dtype)
    strip = pixel_data.astype("<" + values.dtype.str[1:]).tobytes()

    entries: list[tuple[int, int, bytes]] = []  # (tag, type, packed values)

    def add(tag: int, typ: int, vals) -> None:
        if typ == _TYPE_ASCII:
            entries.append((tag, typ, vals))
        else:
            entries.append((tag, typ, struct.pack("<" + _TYPE_FMT[typ] * len(vals), *vals)))

    add(_TAG_WIDTH, _TYPE_LONG, [g.width])
    add(_TAG_HEIGHT, _TYPE_LONG, [g.height])
    add(_TAG_BITS, _TYPE_SHORT, [bits] * nb)
    add(_TAG_COMPRESSION, _TYPE_SHORT, [1])
    add(_TAG_PHOTOMETRIC, _TYPE_SHORT, [1])
    roles = getattr(raster, "band_roles", ())
    if roles:
        add(_TAG_DESCRIPTION, _TYPE_ASCII, ";".join(roles).encode("ascii") + b"\0")
    add(_TAG_STRIP_OFFSETS, _TYPE_LONG, [0])  # patched below
    add(_TAG_SAMPLES, _TYPE_SHORT, [nb])
    add(_TAG_ROWS_PER_STRIP, _TYPE_LONG, [g.height])
    add(_TAG_STRIP_COUNTS, _TYPE_LONG, [len(strip)])
    add(_TAG_PLANAR, _TYPE_SHORT, [1])
    add(_TAG_SAMPLE_FORMAT, _TYPE_SHORT, [fmt] * nb)
    add(_TAG_PIXEL_SCALE, _TYPE_DOUBLE, [g.pixel_size, g.pixel_size, 0.0])
    add(_TAG_TIEPOINT, _TYPE_DOUBLE, [0.0, 0.0, 0.0, g.origin_x, g.origin_y, 0.0])
    if g.crs_tag:
        add(_TAG_GEO_ASCII, _TYPE_ASCII, (g.crs_tag + "|").encode("ascii") + b"\0")
    add(_TAG_NODATA, _TYPE_ASCII, repr(float(raster.nodata)).encode("ascii") + b"\0")

    entries.sort(key=lambda e: e[0])
    ifd_offset = 8
    ifd_size = 2 + 12 * len(entries) + 4
    extra_offset = ifd_offset + ifd_size
    extra = bytearray()
    packed = bytearray()
    packed += struct.pack("<H", len(entries))
    for tag, typ, payload in entries:
        count = len(payload) // _TYPE_SIZE[typ]
        if len(payload) <= 4:
            inline = payload + b"\0" * (4 - len(payload))
            packed += struct.pack("<HHI", tag, typ, count) + inline
        else:
            at = extra_offset + len(extra)
            if at % 2:  # tiff offsets must be even
                extra += b"\0"
                at += 1
            packed += struct.pack("<HHI", tag, typ, count) + struct.pack("<I", at)
            extra += payload
    packed += struct.pack("<I", 0)

    data_offset = extra_offset + len(extra)
    if data_offset % 2:
        extra += b"\0"
        data_offset += 1
    # patch the strip offset now that the layout is fixed
    blob = bytearray(struct.pack("<2sHI", b"II", 42, ifd_offset)) + packed + extra
    for i, (tag, _, _) in enumerate(entries):
        if tag == _TAG_STRIP_OFFSETS:
            pos = 8 + 2 + 12 * i + 8
            blob[pos : pos + 4] = struct.pack("<I", data_offset)
    blob += strip
    Path(path).write_bytes(bytes(blob))


def _read_tag_values(buf: bytes, bo: str, typ: int, count: int, inline: bytes):
    size = _TYPE_SIZE.get(typ)
    if size is None:
        return None
    total = size * count
    raw = inline[:total] if total <= 4 else None
    if raw is None:
        (offset,) = struct.unpack(bo + "I", inline)
        raw = buf[offset : offset + total]
        if len(raw) < total:
            raise DataError("tiff tag value runs past end of file")
    if typ == _TYPE_ASCII:
        return raw.split(b"\0", 1)[0].decode("ascii", errors="replace")
    return list(struct.unpack(bo + _TYPE_FMT[typ] * count, raw))


def read_geotiff(path: str | Path) -> RasterStack:
    """Read an uncompressed striped TIFF with the georeferencing tags this
    package writes. Both byte orders and both planar layouts are accepted;
    compressed or tiled files are not."""
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise DataError(f"{path}: not a tiff (too short)")
    if buf[:2] == b"II":
        bo = "<"
    elif buf[:2] == b"MM":
        bo = ">"
    else:
        raise DataError(f"{path}: not a tiff (bad byte-order mark)")
    magic, ifd_offset = struct.unpack_from(bo + "HI", buf, 2)
    if magic != 42:
        raise DataError(f"{path}: not a classic tiff (magic {magic})")

    (n_entries,) = struct.unpack_from(bo + "H", buf, ifd_offset)
    tags: dict[int, list] = {}
    for i in range(n_entries):
        base = ifd_offset + 2 + 12 * i
        tag, typ, count = struct.unpack_from(bo + "HHI", buf, base)
        vals = _read_tag_values(buf, bo, typ, count, buf[base + 8 : base + 12])
        if vals is not None:
            tags[tag] = vals

    def req(tag: int, name: str):
        if tag not in tags:
            raise DataError(f"{path}: missing required tiff tag {name}")
        return tags[tag]

    width = int(req(_TAG_WIDTH, "ImageWidth")[0])
    height = int(req(_TAG_HEIGHT, "ImageLength")[0])
    if int(tags.get(_TAG_COMPRESSION, [1])[0]) != 1:
        raise DataError(f"{path}: compressed tiffs are not supported")
    nb = int(tags.get(_TAG_SAMPLES, [1])[0])
    bits = tags.get(_TAG_BITS, [8] * nb)
    fmts = tags.get(_TAG_SAMPLE_FORMAT, [1] * nb)
    if len(set(bits)) != 1 or len(set(fmts)) != 1:
        raise DataError(f"{path}: mixed per-band sample types are not supported")
    key = (int(bits[0]), int(fmts[0]))
    dtype_map = {(32, 3): "f4", (8, 1): "u1", (16, 1): "u2", (32, 1): "u4"}
    if key not in dtype_map:
        raise DataError(f"{path}: unsupported sample type bits={key[0]} format={key[1]}")
    dtype = np.dtype(bo + dtype_map[key])
    planar = int(tags.get(_TAG_PLANAR, [1])[0])

    offsets = [int(v) for v in req(_TAG_STRIP_OFFSETS, "StripOffsets")]
    counts = [int(v) for v in req(_TAG_STRIP_COUNTS, "StripByteCounts")]
    if len(offsets) != len(counts):
        raise DataError(f"{path}: strip offset/count length mismatch")
    raw = b"".join(buf[o : o + c] for o, c in zip(offsets, counts))
    expect = width * height * nb * dtype.itemsize
    if len(raw) < expect:
        raise DataError(f"{path}: pixel data truncated ({len(raw)} < {expect} bytes)")
    flat = np.frombuffer(raw[:expect], dtype=dtype)
    if planar == 2:
        values = flat.reshape(nb, height, width)
    elif planar == 1:
        values = np.transpose(flat.reshape(height, width, nb), (2, 0, 1))
    else:
        raise DataError(f"{path}: unsupported planar configuration {planar}")
    values = np.ascontiguousarray(values.astype(dtype.newbyteorder("=")))

    scale = req(_TAG_PIXEL_SCALE, "ModelPixelScale")
    tie = req(_TAG_TIEPOINT, "ModelTiepoint")
    sx, sy = float(scale[0]), float(scale[1])
    if sy != 0 and abs(sx - sy) > 1e-9 * max(abs(sx), abs(sy)):
        raise DataError(f"{path}: non-square pixels ({sx} x {sy}) are not supported")
    origin_x = float(tie[3]) - float(tie[0]) * sx
    origin_y = float(tie[4]) + float(tie[1]) * sx
    crs_tag = str(tags.get(_TAG_GEO_ASCII, "")).rstrip("|")
    geometry = GridGeometry(origin_x, origin_y, sx, width, height, crs_tag)

    if _TAG_NODATA in tags:
        nodata = float(tags[_TAG_NODATA])
    else:
        nodata = float(NODATA_BYTE) if dtype.kind == "u" else NODATA_FLOAT
    if dtype.kind == "u":
        nodata = int(nodata)
    desc = str(tags.get(_TAG_DESCRIPTION, ""))
    roles = tuple(desc.split(";")) if desc else default_roles(nb)
    return RasterStack(geometry, values, nodata, roles)


# ---------------------------------------------------------------------------
# ESRI ASCII Grid fallback (single band, loses the crs tag)
# ---------------------------------------------------------------------------

def write_ascii_grid(path: str | Path, raster: Raster) -> None:
    if raster.band_count != 1:
        raise ConfigError("ascii grid holds a single band")
    g = raster.geometry
    lines = [
        f"ncols {g.width}",
        f"nrows {g.height}",
        f"xllcorner {g.origin_x!r}",
        f"yllcorner {(g.origin_y - g.height * g.pixel_size)!r}",
        f"cellsize {g.pixel_size!r}",
        f"NODATA_value {float(raster.nodata)!r}",
    ]
    for row in raster.values[0]:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ascii_grid(path: str | Path) -> Raster:
    text = Path(path).read_text(encoding="ascii").split("\n")
    header: dict[str, float] = {}
    i = 0
    while i < len(text):
        parts = text[i].split()
        if len(parts) == 2 and parts[0].lower() in (
            "ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"
        ):
            header[parts[0].lower()] = float(parts[1])
            i += 1
        else:
            break
    for k in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if k not in header:
            raise DataError(f"{path}: ascii grid header missing {k}")
    width = int(header["ncols"])
    height = int(header["nrows"])
    body = " ".join(text[i:])
    try:
        flat = np.array([float(t) for t in body.split()], dtype=np.float32)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell value ({exc})") from exc
    if flat.size != width * height:
        raise DataError(f"{path}: expected {width * height} cells, found {flat.size}")
    ps = header["cellsize"]
    geometry = GridGeometry(
        header["xllcorner"], header["yllcorner"] + height * ps, ps, width, height, ""
    )
    nodata = float(header.get("nodata_value", NODATA_FLOAT))
    return Raster(geometry, flat.reshape(1, height, width), nodata)


def write_raster(path: str | Path, raster: Raster) -> None:
    """Dispatch on extension: .tif/.tiff or .asc."""
    suffix = Path(path).suffix.lower()
    if suffix in (".tif", ".tiff"):
        write_geotiff(path, raster)
    elif suffix == ".asc":
        write_ascii_grid(path, raster)
    else:
        raise ConfigError(f"unknown raster extension {suffix!r} (use .tif or .asc)")


def read_raster(path: str | Path) -> Raster:
    suffix = Path(path).suffix.lower()
    if suffix in (".tif", ".tiff"):
        return read_geotiff(path)
    if suffix == ".asc":
        return read_ascii_grid(path)
    raise ConfigError(f"unknown raster extension {suffix!r} (use .tif or .asc)")


# ---------------------------------------------------------------------------
# Patch container
# ---------------------------------------------------------------------------

_PATCH_MAGIC = b"CNPY1"


def write_patch_file(path: str | Path, patches: PatchSet) -> None:
    """Serialize a patch set: magic "CNPY1", little-endian u32 header
    (sample count, H, W, input bands), then per sample the input bands, tree
    mask, height, and aux mask as float32 little-endian arrays."""
    n = len(patches)
    h, w = patches.patch_size, patches.patch_size
    with open(path, "wb") as f:
        f.write(_PATCH_MAGIC)
        f.write(struct.pack("<IIII", n, h, w, patches.in_bands))
        for i in range(n):
            f.write(patches.inputs[i].astype("<f4").tobytes())
            f.write(patches.tree_mask[i].astype("<f4").tobytes())
            f.write(patches.height[i].astype("<f4").tobytes())
            f.write(patches.aux_mask[i].astype("<f4").tobytes())


def read_patch_file(path: str | Path, band_roles: tuple[str, ...] | None = None) -> PatchSet:
    buf = Path(path).read_bytes()
    if buf[:5] != _PATCH_MAGIC:
        raise DataError(f"{path}: bad patch container magic {buf[:5]!r}")
    if len(buf) < 21:
        raise DataError(f"{path}: patch container header truncated")
    n, h, w, c = struct.unpack_from("<IIII", buf, 5)
    per_sample = (c * h * w + 3 * h * w) * 4
    expect = 21 + n * per_sample
    if len(buf) != expect:
        raise DataError(f"{path}: expected {expect} bytes, found {len(buf)}")
    flat = np.frombuffer(buf, dtype="<f4", offset=21).reshape(n, c * h * w + 3 * h * w)
    inputs = flat[:, : c * h * w].reshape(n, c, h, w).astype(np.float32)
    rest = flat[:, c * h * w :].reshape(n, 3, h, w)
    roles = band_roles if band_roles is not None else default_roles(c)
    return PatchSet(
        inputs,
        rest[:, 0].astype(np.float32),
        rest[:, 1].astype(np.float32),
        rest[:, 2].astype(np.float32),
        tuple(roles),
    )


# ---------------------------------------------------------------------------
# Normalization stats sidecar
# ---------------------------------------------------------------------------

def write_band_stats(path: str | Path, stats: BandStats, band_roles: tuple[str, ...]) -> None:
    doc = {
        "band_roles": list(band_roles),
        "minima": list(stats.minima),
        "maxima": list(stats.maxima),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="ascii")


def read_band_stats(path: str | Path) -> tuple[BandStats, tuple[str, ...]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="ascii"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid stats json ({exc})") from exc
    try:
        stats = BandStats(tuple(doc["minima"]), tuple(doc["maxima"]))
        roles = tuple(doc["band_roles"])
    except KeyError as exc:
        raise DataError(f"{path}: stats json missing key {exc}") from exc
    return stats, roles
