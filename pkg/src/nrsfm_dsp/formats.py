"""NRSM1 matrix files: an ASCII header line then little-endian float64 row-major data.

Header: ``NRSM1 <kind> <F-or-Q> <N>\\n``. Kinds:

* ``W``   measurements, ``2F x N``
* ``S``   shapes, ``3F x N``
* ``R``   poses, ``F`` stacked 3x3 rotations (``N`` is written as 3)
* ``DSP`` ``Q`` states of ``3 x N`` followed by ``Q`` norms
"""

from __future__ import annotations

import io

import numpy as np

from .dspbuild import DynamicShapePrior
from .errors import CorruptStream, InvalidInput
from .geomcore import CameraPose, MeasurementMatrix, ShapeSequence, as_rotation

MAGIC = "NRSM1"
ROWS = {"W": 2, "S": 3, "R": 3}
_LE = np.dtype("<f8")


def _header(kind, count, n):
    return f"{MAGIC} {kind} {count} {n}\n".encode("ascii")


def encode_matrix(kind: str, data) -> bytes:
    """Bytes for a ``W``, ``S`` or ``R`` payload (``R`` accepts a pose list)."""
    if kind == "R":
        arr = np.stack([as_rotation(p) for p in data]) if len(data) else np.empty((0, 3, 3))
        return _header("R", arr.shape[0], 3) + arr.astype(_LE).tobytes()
    if kind not in ROWS:
        raise InvalidInput(f"unknown matrix kind {kind!r}")
    arr = np.asarray(data, dtype=float)
    rows = ROWS[kind]
    if arr.ndim != 2 or arr.shape[0] % rows:
        raise InvalidInput(f"{kind} payload must have a multiple of {rows} rows")
    return _header(kind, arr.shape[0] // rows, arr.shape[1]) + arr.astype(_LE).tobytes()


def encode_dsp(dsp: DynamicShapePrior) -> bytes:
    return (_header("DSP", dsp.size, dsp.points) + dsp.states.astype(_LE).tobytes()
            + dsp.norms.astype(_LE).tobytes())


def _parse_header(buf: bytes, offset: int = 0):
    end = buf.find(b"\n", offset, offset + 128)
    if end < 0:
        raise CorruptStream("missing NRSM1 header line")
    try:
        magic, kind, count, n = buf[offset:end].decode("ascii").split()
        count, n = int(count), int(n)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptStream(f"malformed NRSM1 header: {exc}") from None
    if magic != MAGIC:
        raise CorruptStream(f"bad magic {magic!r}")
    if count < 0 or n < 0:
        raise CorruptStream("negative dimensions in header")
    return kind, count, n, end + 1


def _payload_len(kind, count, n):
    if kind == "DSP":
        return 8 * (3 * count * n + count)
    if kind == "R":
        return 8 * 9 * count
    if kind in ROWS:
        return 8 * ROWS[kind] * count * n
    raise CorruptStream(f"unknown kind {kind!r}")


def decode(buf: bytes, offset: int = 0):
    """Parse one record. Returns ``(kind, value, next_offset)``.

    ``value`` is a MeasurementMatrix, ShapeSequence, list of CameraPose or
    DynamicShapePrior depending on the kind.
    """
    kind, count, n, start = _parse_header(buf, offset)
    size = _payload_len(kind, count, n)
    if len(buf) - start < size:
        raise CorruptStream(f"{kind} payload truncated: need {size} bytes, have {len(buf) - start}")
    raw = np.frombuffer(buf, dtype=_LE, count=size // 8, offset=start).astype(float)
    end = start + size
    if kind == "W":
        if count == 0 or n == 0:
            raise InvalidInput("measurement file is empty")
        return kind, MeasurementMatrix(raw.reshape(2 * count, n)), end
    if kind == "S":
        if count == 0 or n == 0:
            raise InvalidInput("shape file is empty")
        return kind, ShapeSequence(raw.reshape(3 * count, n)), end
    if kind == "R":
        return kind, [CameraPose(r) for r in raw.reshape(count, 3, 3)], end
    states = raw[:3 * count * n].reshape(count, 3, n)
    norms = raw[3 * count * n:]
    return kind, DynamicShapePrior(states, norms, np.full(count, -1), float("nan")), end


def write(path, kind: str, value) -> None:
    data = encode_dsp(value) if kind == "DSP" else encode_matrix(kind, value)
    with open(path, "wb") as fh:
        fh.write(data)


def read(path, expect: str | None = None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf:
        raise InvalidInput(f"{path}: file is empty")
    kind, value, end = decode(buf)
    if expect is not None and kind != expect:
        raise InvalidInput(f"{path}: expected a {expect} file, found {kind}")
    if end != len(buf):
        raise CorruptStream(f"{path}: {len(buf) - end} trailing bytes")
    return value


def write_tsv(path_or_buf, header, rows) -> None:
    """Tab-separated table with a header row."""
    out = io.StringIO()
    out.write("\t".join(header) + "\n")
    for row in rows:
        out.write("\t".join(_fmt(v) for v in row) + "\n")
    text = out.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
