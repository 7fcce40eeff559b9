"""On-disk formats: volumes, particle files, SSM models, configs and CSV logs.

Volume layout::

    b"SVOL0001" | uint32 LE header length | ASCII header | raw LE voxels

The header has one ``key value...`` pair per line: ``dims`` (3 ints),
``spacing`` and ``origin`` (3 reals each), ``dtype`` (``f32`` or ``u8``) and
``order`` (always ``x-fastest``).
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .rbfshape import ControlPointSet
from .ssm import SsmModel
from .volume import SdfVolume, Segmentation

MAGIC = b"SVOL0001"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
LOG_FIELDS = ("epoch", "surface", "normal", "sampling", "correspondence", "total")


def _fmt(x):
    return repr(float(x))


def write_volume(path, vol):
    """Write a :class:`Segmentation` (as ``u8``) or :class:`SdfVolume` (as ``f32``)."""
    if isinstance(vol, Segmentation):
        dtype, data = "u8", vol.labels.astype(np.uint8)
    else:
        dtype, data = "f32", vol.values.astype("<f4")
    header = "\n".join([
        "dims " + " ".join(str(int(n)) for n in vol.dims),
        "spacing " + " ".join(_fmt(s) for s in vol.spacing),
        "origin " + " ".join(_fmt(o) for o in vol.origin),
        f"dtype {dtype}",
        "order x-fastest",
    ]).encode("ascii") + b"\n"
    payload = np.ascontiguousarray(data.ravel(order="F")).astype(_DTYPES[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def read_volume(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ParseError("not an SVOL0001 volume (bad magic)", path)
    if len(raw) < 12:
        raise ParseError("truncated header length", path)
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ParseError("truncated header", path)
    try:
        text = raw[12:12 + hlen].decode("ascii")
    except UnicodeDecodeError:
        raise ParseError("header is not ASCII", path) from None
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        fields[parts[0]] = (parts[1:], lineno)
    try:
        dims = tuple(int(v) for v in fields["dims"][0])
        spacing = tuple(float(v) for v in fields["spacing"][0])
        origin = tuple(float(v) for v in fields["origin"][0])
        dtype = fields["dtype"][0][0]
        order = fields["order"][0][0]
    except KeyError as exc:
        raise ParseError(f"header is missing {exc.args[0]!r}", path) from None
    except (ValueError, IndexError) as exc:
        raise ParseError(f"bad header value: {exc}", path) from None
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or min(dims) < 1:
        raise ParseError("dims, spacing and origin need 3 values each", path)
    if dtype not in _DTYPES:
        raise ParseError(f"unsupported dtype {dtype!r}", path)
    if order != "x-fastest":
        raise ParseError(f"unsupported voxel order {order!r}", path)
    body = raw[12 + hlen:]
    n = int(np.prod(dims))
    if len(body) != n * _DTYPES[dtype].itemsize:
        raise ParseError(f"expected {n} voxels of {dtype}, found {len(body)} bytes", path)
    data = np.frombuffer(body, dtype=_DTYPES[dtype]).reshape(dims, order="F")
    try:
        if dtype == "u8":
            if data.max(initial=0) > 1:
                raise ParseError("u8 volumes must hold 0/1 labels", path)
            return Segmentation(data.astype(bool), spacing, origin)
        return SdfVolume(data.astype(np.float64), spacing, origin)
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc), path) from None


def write_particles(path, cps: ControlPointSet):
    with open(path, "w", newline="\n") as fh:
        for p, n in zip(cps.points, cps.normals):
            fh.write(" ".join(f"{v:.17g}" for v in (*p, *n)) + "\n")


def read_particles(path) -> ControlPointSet:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(f"expected 6 values, got {len(parts)}", path, lineno)
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    if not rows:
        raise ParseError("particle file is empty", path)
    arr = np.array(rows)
    return ControlPointSet(arr[:, :3], arr[:, 3:])


def write_model(path, model: SsmModel):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def read_model(path) -> SsmModel:
    try:
        with open(path) as fh:
            return SsmModel.from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad SSM model file: {exc}", path) from None


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for epoch, rec in enumerate(history, 1):
            w.writerow([epoch] + [_fmt(getattr(rec, f)) for f in LOG_FIELDS[1:]])


def read_log(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_FIELDS:
            raise ParseError(f"unexpected log header {reader.fieldnames}", path)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
