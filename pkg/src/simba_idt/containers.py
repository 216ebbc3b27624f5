"""Bit-exact binary containers and the trace CSV writer.

One little-endian container layout serves three formats distinguished by
magic: measurements (``IDTM``), transfer functions (``IDTF``), and CNN
weights (``DNWT``).  Layout::

    magic           4 bytes
    format version  uint32
    endian marker   uint32 (0x01020304 as stored; reads wrong if byteswapped)
    descriptor count uint32
    per descriptor: name (uint16 length + utf-8), dtype string
                    (uint16 length + utf-8, numpy little-endian spec),
                    ndim uint16, shape uint64 each,
                    absolute byte offset uint64, byte length uint64
    payload bytes at the stated offsets

Metadata rides as a JSON payload named ``__metadata__``.  Writes are
atomic (temp file + rename); reads validate magic, version, and payload
extents with distinct errors for each failure mode.
"""

from __future__ import annotations

import json
import os
import struct
import numpy as np

from simba_idt.denoisers import CnnWeights
from simba_idt.errors import (
    BadMagicError,
    ContainerVersionError,
    DataError,
    TruncatedPayloadError,
)
from simba_idt.forward import (
    ContrastVolume,
    MeasurementSet,
    TransferFunctionStack,
)

FORMAT_VERSION = 1
ENDIAN_MARK = 0x01020304
MAGIC_MEASUREMENTS = b"IDTM"
MAGIC_TRANSFER = b"IDTF"
MAGIC_WEIGHTS = b"DNWT"
METADATA_NAME = "__metadata__"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"name too long for container: {s[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def write_container(path, arrays: dict, metadata: dict, magic: bytes):
    """Atomically write named arrays plus JSON metadata."""
    if len(magic) != 4:
        raise DataError(f"magic must be 4 bytes, got {magic!r}")
    payloads = {}
    for name, a in arrays.items():
        a = np.ascontiguousarray(a)
        dt = a.dtype.newbyteorder("<")
        payloads[name] = (dt.str, a.shape, a.astype(dt, copy=False).tobytes())
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    payloads[METADATA_NAME] = ("|u1", (len(meta_bytes),), meta_bytes)

    toc = []
    for name, (dtype_str, shape, raw) in payloads.items():
        entry = _pack_str(name) + _pack_str(dtype_str)
        entry += struct.pack("<H", len(shape))
        entry += b"".join(struct.pack("<Q", int(s)) for s in shape)
        toc.append([name, entry, len(raw)])

    # header size must be known before offsets can be laid down
    fixed = 4 + 4 + 4 + 4
    header_len = fixed + sum(len(e) + 16 for _, e, _ in toc)
    offset = header_len
    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", ENDIAN_MARK)
    blob += struct.pack("<I", len(toc))
    for name, entry, nbytes in toc:
        blob += entry + struct.pack("<QQ", offset, nbytes)
        offset += nbytes
    for name, (_, _, raw) in payloads.items():
        blob += raw

    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as handle:
        handle.write(bytes(blob))
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)


def read_container(path, magic: bytes):
    """Read back (arrays, metadata); inverse of :func:`write_container`."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 16:
        raise BadMagicError(f"{path}: too short to be a container")
    if blob[:4] != magic:
        raise BadMagicError(
            f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    version, mark, count = struct.unpack_from("<III", blob, 4)
    if mark != ENDIAN_MARK:
        raise ContainerVersionError(
            f"{path}: endianness marker 0x{mark:08x} is not little-endian")
    if version != FORMAT_VERSION:
        raise ContainerVersionError(
            f"{path}: format version {version}, this reader supports {FORMAT_VERSION}")

    pos = 16
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (dlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            dtype_str = blob[pos:pos + dlen].decode("utf-8")
            pos += dlen
            (ndim,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos) if ndim else ()
            pos += 8 * ndim
            offset, nbytes = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            entries.append((name, dtype_str, shape, offset, nbytes))
    except struct.error as exc:
        raise TruncatedPayloadError(f"{path}: descriptor table cut short") from exc

    arrays = {}
    metadata = {}
    for name, dtype_str, shape, offset, nbytes in entries:
        if offset + nbytes > len(blob):
            raise TruncatedPayloadError(
                f"{path}: payload {name!r} claims bytes [{offset}, {offset + nbytes}) "
                f"but the file has {len(blob)}")
        raw = blob[offset:offset + nbytes]
        if name == METADATA_NAME:
            metadata = json.loads(raw.decode("utf-8"))
            continue
        dt = np.dtype(dtype_str)
        expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        if nbytes != expect:
            raise TruncatedPayloadError(
                f"{path}: payload {name!r} has {nbytes} bytes, shape {shape} "
                f"of {dtype_str} needs {expect}")
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return arrays, metadata


# ---------------------------------------------------------------------------
# measurements (.idtm)
# ---------------------------------------------------------------------------


def write_measurements(path, m: MeasurementSet):
    arrays = {"y": m.y}
    if m.ground_truth is not None:
        arrays["ground_truth_re"] = m.ground_truth.re
        arrays["ground_truth_im"] = m.ground_truth.im
    write_container(path, arrays, dict(m.metadata), MAGIC_MEASUREMENTS)


def read_measurements(path) -> MeasurementSet:
    arrays, metadata = read_container(path, MAGIC_MEASUREMENTS)
    if "y" not in arrays:
        raise DataError(f"{path}: measurement container lacks the y payload")
    truth = None
    if "ground_truth_re" in arrays:
        truth = ContrastVolume(arrays["ground_truth_re"], arrays["ground_truth_im"])
    return MeasurementSet(y=arrays["y"], ground_truth=truth, metadata=metadata)


# ---------------------------------------------------------------------------
# contrast volumes, stored with the same magic for tool interop
# ---------------------------------------------------------------------------


def write_volume(path, x: ContrastVolume, metadata: dict | None = None):
    meta = dict(metadata or {})
    meta["content"] = "contrast_volume"
    write_container(path, {"re": x.re, "im": x.im}, meta, MAGIC_MEASUREMENTS)


def read_volume(path) -> tuple[ContrastVolume, dict]:
    arrays, metadata = read_container(path, MAGIC_MEASUREMENTS)
    if "re" in arrays and "im" in arrays:
        return ContrastVolume(arrays["re"], arrays["im"]), metadata
    if "ground_truth_re" in arrays:
        truth = ContrastVolume(arrays["ground_truth_re"], arrays["ground_truth_im"])
        return truth, metadata
    raise DataError(f"{path}: container holds neither a volume nor a ground truth")


# ---------------------------------------------------------------------------
# transfer functions (.idtf)
# ---------------------------------------------------------------------------


def write_tf(path, tf: TransferFunctionStack):
    meta = dict(tf.metadata)
    meta.update({
        "slice_spacing_um": tf.slice_spacing_um,
        "freq_diagonal": tf.freq_diagonal,
        "convention": tf.convention,
    })
    write_container(path, {"h_re": tf.h_re, "h_im": tf.h_im}, meta, MAGIC_TRANSFER)


def read_tf(path) -> TransferFunctionStack:
    arrays, metadata = read_container(path, MAGIC_TRANSFER)
    for need in ("h_re", "h_im"):
        if need not in arrays:
            raise DataError(f"{path}: transfer-function container lacks {need!r}")
    meta = dict(metadata)
    spacing = float(meta.pop("slice_spacing_um", 1.0))
    freq_diagonal = bool(meta.pop("freq_diagonal", False))
    convention = str(meta.pop("convention", "re_kept"))
    return TransferFunctionStack(h_re=arrays["h_re"], h_im=arrays["h_im"],
                                 slice_spacing_um=spacing, metadata=meta,
                                 freq_diagonal=freq_diagonal,
                                 convention=convention)


# ---------------------------------------------------------------------------
# CNN weights (.dnw)
# ---------------------------------------------------------------------------


def write_cnn_weights(path, w: CnnWeights):
    """Kernels and biases are stored float32 row-major (the training
    precision); reading back and re-writing is byte-identical."""
    arrays = {}
    for l, (k, b) in enumerate(zip(w.kernels, w.biases)):
        arrays[f"kernel_{l}"] = k.astype(np.float32)
        arrays[f"bias_{l}"] = b.astype(np.float32)
    if w.spectral_norms is not None:
        arrays["spectral_norms"] = np.asarray(w.spectral_norms, dtype=np.float64)
    meta = dict(w.metadata)
    meta.update({
        "layer_count": w.layer_count,
        "residual": bool(w.residual),
        "sigma": meta.get("sigma"),
        "hidden_channels": w.hidden_channels,
    })
    write_container(path, arrays, meta, MAGIC_WEIGHTS)


def read_cnn_weights(path) -> CnnWeights:
    arrays, metadata = read_container(path, MAGIC_WEIGHTS)
    count = int(metadata.get("layer_count", 0))
    if count < 1:
        raise DataError(f"{path}: weight container declares no layers")
    kernels, biases = [], []
    for l in range(count):
        if f"kernel_{l}" not in arrays or f"bias_{l}" not in arrays:
            raise DataError(f"{path}: weight container lacks layer {l} payloads")
        kernels.append(np.asarray(arrays[f"kernel_{l}"], dtype=np.float64))
        biases.append(np.asarray(arrays[f"bias_{l}"], dtype=np.float64))
    norms = arrays.get("spectral_norms")
    return CnnWeights(kernels=tuple(kernels), biases=tuple(biases),
                      residual=bool(metadata.get("residual", True)),
                      spectral_norms=None if norms is None else tuple(norms),
                      metadata=metadata)


# ---------------------------------------------------------------------------
# trace CSV
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("iter", "ghat_sq_norm", "g_sq_norm", "fidelity",
                 "snr_db", "wall_seconds", "batch_indices")


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class CsvTraceWriter:
    """Streams solver trace rows so long runs are observable midway.

    Writes the header on construction and flushes after every row.  Cell
    formatting uses shortest round-trip float repr, so equal quantities
    always serialize to equal bytes.
    """

    def __init__(self, path_or_handle, columns=TRACE_COLUMNS):
        self.columns = tuple(columns)
        if hasattr(path_or_handle, "write"):
            self._handle = path_or_handle
            self._owns = False
        else:
            self._handle = open(path_or_handle, "w", newline="")
            self._owns = True
        self._handle.write(",".join(self.columns) + "\n")
        self._handle.flush()

    def write_row(self, row: dict):
        self._handle.write(",".join(_format_cell(row.get(c)) for c in self.columns)
                           + "\n")
        self._handle.flush()

    def close(self):
        if self._owns:
            self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_trace_csv(path, trace):
    """Write a completed IterateTrace in the streaming schema."""
    with CsvTraceWriter(path) as writer:
        for k in range(1, len(trace) + 1):
            writer.write_row(trace.row(k))


def read_trace_csv(path) -> dict:
    """Parse a trace CSV into column arrays (floats, NaN for blanks)."""
    import csv

    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        rows = list(reader)
    if not rows:
        return {c: [] for c in TRACE_COLUMNS}
    out = {}
    for col in rows[0].keys():
        if col == "batch_indices":
            out[col] = [r[col] for r in rows]
        else:
            out[col] = np.array([float(r[col]) if r[col] != "" else np.nan
                                 for r in rows])
    return out
