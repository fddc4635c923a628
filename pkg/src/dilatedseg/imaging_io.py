"""MetaImage volumes, PPM slice snapshots and ``key = value`` config files."""
import logging
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .volume import ARRAY_AXIS, Volume

log = logging.getLogger(__name__)

ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("u1"),
    "MET_SHORT": np.dtype("i2"),
    "MET_USHORT": np.dtype("u2"),
    "MET_FLOAT": np.dtype("f4"),
}
HEADER_ORDER = ("ObjectType", "NDims", "DimSize", "ElementSpacing", "ElementType",
                "ElementByteOrderMSB", "ElementDataFile")
# standard MetaImage keys that carry nothing this package uses
_IGNORED_KEYS = {"Offset", "Origin", "Position", "TransformMatrix", "Rotation", "Orientation",
                 "CenterOfRotation", "AnatomicalOrientation", "BinaryData", "HeaderSize",
                 "ElementNumberOfChannels", "Comment", "ObjectSubType", "Name", "ElementSize"}


def _parse_bool(text):
    return text.strip().lower() in ("true", "1", "yes")


def _split_header(raw: bytes, path):
    """Key/value pairs up to ElementDataFile and the byte offset after it."""
    fields = {}
    pos = 0
    n = len(raw)
    while pos < n:
        end = raw.find(b"\n", pos)
        end = n if end < 0 else end
        line = raw[pos:end].decode("latin-1").rstrip("\r")
        pos = min(n, end + 1)
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        fields[key] = value
        if key == "ElementDataFile":
            break
    return fields, pos


def read_volume(path, kind=None) -> Volume:
    """Read a ``.mhd`` header and its raw payload.

    ``kind`` defaults to ``"label"`` for MET_UCHAR data and ``"intensity"``
    otherwise.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    fields, data_start = _split_header(raw, path)

    known = set(HEADER_ORDER) | {"BinaryDataByteOrderMSB", "CompressedData", "CompressedDataSize"}
    for key in fields:
        if key not in known and key not in _IGNORED_KEYS:
            log.warning("%s: ignoring unknown header key %r", path, key)
    for key in ("DimSize", "ElementType", "ElementDataFile"):
        if key not in fields:
            raise FormatError(f"{path}: missing mandatory key {key}")
    if fields.get("ObjectType", "Image") != "Image":
        raise FormatError(f"{path}: ObjectType must be Image, got {fields['ObjectType']!r}")
    if _parse_bool(fields.get("CompressedData", "False")):
        raise FormatError(f"{path}: compressed MetaImage data is not supported")
    try:
        dims = [int(t) for t in fields["DimSize"].split()]
        ndims = int(fields.get("NDims", len(dims)))
        spacing = [float(t) for t in fields.get("ElementSpacing", "1 1 1").split()]
    except ValueError as exc:
        raise FormatError(f"{path}: unparsable header value ({exc})") from None
    if ndims != 3 or len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"{path}: expected 3 positive dimensions, got NDims={ndims} DimSize={dims}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise FormatError(f"{path}: ElementSpacing must be three positive values, got {spacing}")
    etype = fields["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise FormatError(f"{path}: unsupported ElementType {etype!r}")
    msb = _parse_bool(fields.get("ElementByteOrderMSB", fields.get("BinaryDataByteOrderMSB", "False")))
    dtype = ELEMENT_TYPES[etype].newbyteorder(">" if msb else "<")

    datafile = fields["ElementDataFile"]
    if datafile == "LOCAL":
        payload = raw[data_start:]
    else:
        try:
            payload = (path.parent / datafile).read_bytes()
        except OSError as exc:
            raise FormatError(f"{path}: cannot read data file {datafile}: {exc}") from exc
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: raw size mismatch, expected {expected} bytes for {dims} {etype}, got {len(payload)}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims[::-1]).astype(dtype.newbyteorder("="))
    if kind is None:
        kind = "label" if etype == "MET_UCHAR" else "intensity"
    return Volume(data, tuple(spacing), kind)


def write_volume(v: Volume, path, element_type=None):
    """Write ``path`` (``.mhd``) plus a little-endian ``.raw`` beside it.

    Returns the pair of paths written.
    """
    path = Path(path)
    if element_type is None:
        element_type = "MET_UCHAR" if v.kind == "label" else "MET_FLOAT"
    if element_type not in ELEMENT_TYPES:
        raise ValueError(f"unsupported element type {element_type!r}")
    raw_path = path.with_suffix(".raw")
    header = {
        "ObjectType": "Image",
        "NDims": "3",
        "DimSize": " ".join(str(d) for d in v.dims),
        "ElementSpacing": " ".join(repr(float(s)) for s in v.spacing),
        "ElementType": element_type,
        "ElementByteOrderMSB": "False",
        "ElementDataFile": raw_path.name,
    }
    text = "".join(f"{k} = {header[k]}\n" for k in HEADER_ORDER)
    payload = np.ascontiguousarray(v.data, dtype=ELEMENT_TYPES[element_type].newbyteorder("<"))
    try:
        path.write_text(text)
        raw_path.write_bytes(payload.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc
    return path, raw_path


def _slice(data, axis, index):
    k = ARRAY_AXIS[axis]
    if not 0 <= index < data.shape[k]:
        raise IndexError(f"slice index {index} outside 0..{data.shape[k] - 1} along {axis}")
    return np.take(data, index, axis=k)


OVERLAY_COLORS = {1: (0, 255, 0), 2: (0, 0, 255)}


def render_slice(v: Volume, axis, index, overlay: Volume = None):
    """RGB ``uint8`` image of one slice, min-max windowed, optionally tinted."""
    s = _slice(v.data, axis, index).astype(np.float64)
    lo, hi = s.min(), s.max()
    if hi > lo:
        gray = np.floor((s - lo) / (hi - lo) * 255 + 0.5)
    else:
        gray = np.full(s.shape, 128.0)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if overlay is not None:
        if overlay.dims != v.dims:
            raise ValueError(f"overlay dims {overlay.dims} != volume dims {v.dims}")
        lab = _slice(overlay.data, axis, index)
        for cls, color in OVERLAY_COLORS.items():
            sel = lab == cls
            rgb[sel] = np.floor(0.5 * rgb[sel] + 0.5 * np.asarray(color, float) + 0.5)
    return rgb.astype(np.uint8)


def export_slice_pixmap(v: Volume, axis, index, path, overlay: Volume = None):
    """Write a slice as a binary PPM (P6); returns the RGB array."""
    rgb = render_slice(v, axis, index, overlay)
    h, w = rgb.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(rgb.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc
    return rgb


def read_pixmap(path):
    """Read a binary PPM written by :func:`export_slice_pixmap`."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise FormatError(f"{path}: truncated pixmap header")
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # exactly one whitespace byte precedes the pixels
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = raw[pos:pos + w * h * 3]
    if len(pixels) != w * h * 3:
        raise FormatError(f"{path}: pixmap payload too short")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def read_config_entries(path):
    """``(key, value, lineno)`` triples from a ``key = value`` file.

    Blank lines and ``#`` comments are skipped.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=path) from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, path)
        entries.append((key, value, lineno))
    return entries


def write_config(entries, path, comment=None):
    lines = [f"# {comment}"] if comment else []
    lines += [f"{k} = {v}" for k, v in dict(entries).items()]
    Path(path).write_text("\n".join(lines) + "\n")
