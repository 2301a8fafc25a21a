"""Model serialization, float16 quantization and raw/zipped size accounting.

Byte layout (all integers little-endian)::

    magic        4s   b"PRNK"
    version      u16  1
    precision    u8   0 = float32, 1 = float16
    reserved     u8   0
    spec_len     u32
    spec         spec_len bytes of UTF-8 JSON (sorted keys)
    n_arrays     u32
    shapes       per array: ndim u8, then ndim x u32
    payload_len  u32
    payload_crc  u32  CRC-32 of the payload
    header_crc   u32  CRC-32 of every preceding header byte
    payload      raw arrays in declared precision

Arrays appear layer by layer: weight (row-major), bias, then for batch-norm
layers gamma, beta, running_mean, running_var.  Masked parameters are simply
stored as 0.0; no mask bitmap is written.
"""
from __future__ import annotations

import io
import json
import logging
import struct
import warnings
import zipfile
import zlib
from dataclasses import dataclass

import numpy as np

from prunekit.nn import BatchNorm, DenseLayer, Model, ModelSpec

log = logging.getLogger(__name__)

MAGIC = b"PRNK"
VERSION = 1
PRECISIONS = {"f32": (0, np.dtype("<f4")), "f16": (1, np.dtype("<f2"))}
ZIP_LEVEL = 6
F16_MAX = float(np.finfo(np.float16).max)


class FormatError(ValueError):
    """Bad magic, version, checksum, or truncated data."""


@dataclass
class SizeReport:
    raw_bytes: int
    zip_bytes: int
    precision: str
    param_count: int  # stored values, batch-norm statistics included
    nonzero_param_count: int
    payload_bytes: int = 0
    overflow_count: int = 0


def _arrays(model: Model) -> list[np.ndarray]:
    out = []
    for layer in model.layers:
        out.append(layer.effective_weight())
        out.append(layer.effective_bias())
        if layer.bn is not None:
            out.extend(layer.bn.arrays())
    return out


def _encode(model: Model, precision: str):
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
    code, dt = PRECISIONS[precision]
    arrays = _arrays(model)
    overflow = 0
    chunks = []
    for a in arrays:
        with np.errstate(over="ignore"):
            c = np.ascontiguousarray(a, dtype=dt)
        overflow += int(np.count_nonzero(np.isinf(c) & np.isfinite(a)))
        chunks.append(c.tobytes())
    payload = b"".join(chunks)
    spec = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    head = bytearray()
    head += struct.pack("<4sHBBI", MAGIC, VERSION, code, 0, len(spec))
    head += spec
    head += struct.pack("<I", len(arrays))
    for a in arrays:
        head += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    head += struct.pack("<II", len(payload), zlib.crc32(payload))
    head += struct.pack("<I", zlib.crc32(bytes(head)))
    return bytes(head) + payload, overflow, len(payload)


def serialize(model: Model, precision: str = "f32") -> bytes:
    """Deterministic byte stream; float16 uses IEEE round-to-nearest-even.

    Values beyond the float16 range become signed infinities; see
    :func:`quantization_overflow` for the count.
    """
    data, overflow, _ = _encode(model, precision)
    if overflow:
        log.warning("%d parameters overflowed to infinity at %s", overflow, precision)
    return data


def quantization_overflow(model: Model, precision: str = "f16") -> int:
    return _encode(model, precision)[1]


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated header")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("truncated header")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b


def deserialize(data: bytes, dtype=np.float32) -> Model:
    """Inverse of :func:`serialize`; float16 payloads are widened to ``dtype``."""
    r = _Reader(bytes(data))
    magic, version, code, _, spec_len = r.take("<4sHBBI")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    by_code = {c: (name, dt) for name, (c, dt) in PRECISIONS.items()}
    if code not in by_code:
        raise FormatError(f"unknown precision code {code}")
    _, dt = by_code[code]
    spec_raw = r.raw(spec_len)
    (n_arrays,) = r.take("<I")
    if n_arrays > 10_000:
        raise FormatError("implausible array count")
    shapes = []
    for _ in range(n_arrays):
        (ndim,) = r.take("<B")
        shapes.append(r.take(f"<{ndim}I"))
    payload_len, payload_crc = r.take("<II")
    header_end = r.pos
    (header_crc,) = r.take("<I")
    if zlib.crc32(bytes(data[:header_end])) != header_crc:
        raise FormatError("header checksum mismatch")
    payload = bytes(data[r.pos:])
    if len(payload) != payload_len:
        raise FormatError(f"payload is {len(payload)} bytes, header declares {payload_len}")
    if zlib.crc32(payload) != payload_crc:
        raise FormatError("payload checksum mismatch")
    try:
        spec = ModelSpec.from_dict(json.loads(spec_raw.decode()))
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"invalid spec in header: {e}") from e

    arrays, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * dt.itemsize
        if pos + nbytes > len(payload):
            raise FormatError("truncated payload")
        arrays.append(np.frombuffer(payload, dtype=dt, count=n, offset=pos).reshape(shape).astype(dtype))
        pos += nbytes
    if pos != len(payload):
        raise FormatError("payload length does not match declared shapes")

    layers, it = [], iter(arrays)
    try:
        for h in spec.hidden_layers:
            w, b = next(it), next(it)
            bn = BatchNorm(*(next(it) for _ in range(4))) if h.has_batchnorm else None
            layers.append(DenseLayer(w, b, h.activation, bn, h.dropout_rate))
        w, b = next(it), next(it)
        layers.append(DenseLayer(w, b, spec.output_activation))
    except StopIteration:
        raise FormatError("array count does not match spec") from None
    if next(it, None) is not None:
        raise FormatError("array count does not match spec")
    _check_chain(spec, layers)
    return Model(spec, layers)


def _check_chain(spec, layers):
    fan_in = spec.input_dim
    for i, l in enumerate(layers):
        if l.weight.ndim != 2 or l.weight.shape[1] != fan_in or l.bias.shape != (l.weight.shape[0],):
            raise FormatError(f"layer {i} shapes do not chain")
        fan_in = l.weight.shape[0]
    if spec.widths != tuple(l.weight.shape[0] for l in layers[:-1]):
        raise FormatError("layer widths disagree with spec")


def quantize(model: Model, precision: str = "f16") -> Model:
    """Round-trip every stored value through ``precision``; compute stays in the model's dtype."""
    q = deserialize(serialize(model, precision), dtype=model.dtype)
    for src, dst in zip(model.layers, q.layers):
        dst.weight_mask = None if src.weight_mask is None else src.weight_mask.copy()
        dst.bias_mask = None if src.bias_mask is None else src.bias_mask.copy()
    return q


def zip_size(data: bytes, name="model.prk") -> int:
    """Size of ``data`` stored in a zip container with DEFLATE level 6."""
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(info, data, compress_type=zipfile.ZIP_DEFLATED, compresslevel=ZIP_LEVEL)
    return len(buf.getvalue())


def write_zip(data: bytes, path, name="model.prk"):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(info, data, compress_type=zipfile.ZIP_DEFLATED, compresslevel=ZIP_LEVEL)


def measure_sizes(model: Model, precision: str = "f32") -> SizeReport:
    data, overflow, payload_len = _encode(model, precision)
    arrays = _arrays(model)
    return SizeReport(
        raw_bytes=len(data),
        zip_bytes=zip_size(data),
        precision=precision,
        param_count=sum(a.size for a in arrays),
        nonzero_param_count=sum(int(np.count_nonzero(a)) for a in arrays),
        payload_bytes=payload_len,
        overflow_count=overflow,
    )


def evaluate_quantized(model: Model, eval_set, precision: str = "f16"):
    """Metrics of ``model`` after passing every parameter through ``precision`` storage."""
    from prunekit.metrics import evaluate_model

    overflow = quantization_overflow(model, precision)
    if overflow:
        warnings.warn(f"{overflow} parameters overflow to infinity in {precision}", RuntimeWarning)
    return evaluate_model(quantize(model, precision), eval_set)
