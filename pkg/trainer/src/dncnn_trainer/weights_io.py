"""Self-contained .dnw weight-file writer and reader.

The reconstruction package consumes these files; the byte layout is the
whole contract between the two packages, so it is implemented here from
the format description rather than imported.  Little-endian container::

    magic "DNWT"     4 bytes
    format version   uint32 (1)
    endian marker    uint32 (0x01020304 as stored)
    descriptor count uint32
    per descriptor:  name (uint16 length + utf-8),
                     dtype string (uint16 length + utf-8, numpy spec),
                     ndim uint16, shape uint64 each,
                     absolute byte offset uint64, byte length uint64
    payloads at the stated offsets

Payloads are ``kernel_l`` / ``bias_l`` per layer (float32 row-major, the
training precision), an optional float64 ``spectral_norms`` vector, and
JSON metadata as a ``__metadata__`` payload (sorted keys).  Writes are
atomic so a crashed export never leaves a half-written file behind.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from dncnn_trainer.errors import FormatError

FORMAT_VERSION = 1
ENDIAN_MARK = 0x01020304
MAGIC = b"DNWT"
METADATA_NAME = "__metadata__"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _validate_architecture(kernels, biases):
    if len(kernels) < 1 or len(kernels) != len(biases):
        raise FormatError(f"need matching kernel/bias lists, "
                          f"got {len(kernels)} and {len(biases)}")
    for l, (k, b) in enumerate(zip(kernels, biases)):
        if k.ndim != 4 or k.shape[2:] != (3, 3):
            raise FormatError(f"layer {l}: kernels must be (out, in, 3, 3), got {k.shape}")
        if b.shape != (k.shape[0],):
            raise FormatError(f"layer {l}: bias shape {b.shape} does not match "
                              f"{k.shape[0]} output channels")
    if kernels[0].shape[1] != 1:
        raise FormatError(f"first layer must take 1 channel, takes {kernels[0].shape[1]}")
    if kernels[-1].shape[0] != 1:
        raise FormatError(f"last layer must emit 1 channel, emits {kernels[-1].shape[0]}")
    for l in range(len(kernels) - 1):
        if kernels[l].shape[0] != kernels[l + 1].shape[1]:
            raise FormatError(f"channel chain broken between layers {l} and {l + 1}")


def write_dnw(path, kernels, biases, metadata: dict | None = None, *,
              residual: bool = True, spectral_norms=None) -> str:
    """Write weights; payload order and metadata keys match the reader side
    bit for bit, so read-and-rewrite over there is byte-identical."""
    kernels = [np.ascontiguousarray(k, dtype=np.float32) for k in kernels]
    biases = [np.ascontiguousarray(b, dtype=np.float32) for b in biases]
    _validate_architecture(kernels, biases)

    arrays = {}
    for l, (k, b) in enumerate(zip(kernels, biases)):
        arrays[f"kernel_{l}"] = k
        arrays[f"bias_{l}"] = b
    if spectral_norms is not None:
        norms = np.asarray(spectral_norms, dtype=np.float64)
        if norms.shape != (len(kernels),):
            raise FormatError(f"one spectral norm per layer required, "
                              f"got shape {norms.shape} for {len(kernels)} layers")
        arrays["spectral_norms"] = norms

    hidden = kernels[0].shape[0] if len(kernels) > 1 else 1
    meta = dict(metadata or {})
    meta.update({
        "layer_count": len(kernels),
        "residual": bool(residual),
        "sigma": meta.get("sigma"),
        "hidden_channels": hidden,
    })
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    payloads = [(name, a.dtype.newbyteorder("<").str, a.shape, a.tobytes())
                for name, a in arrays.items()]
    payloads.append((METADATA_NAME, "|u1", (len(meta_bytes),), meta_bytes))

    toc = []
    for name, dtype_str, shape, raw in payloads:
        entry = _pack_str(name) + _pack_str(dtype_str)
        entry += struct.pack("<H", len(shape))
        entry += b"".join(struct.pack("<Q", int(s)) for s in shape)
        toc.append((entry, len(raw)))

    header_len = 16 + sum(len(entry) + 16 for entry, _ in toc)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", ENDIAN_MARK)
    blob += struct.pack("<I", len(toc))
    offset = header_len
    for entry, nbytes in toc:
        blob += entry + struct.pack("<QQ", offset, nbytes)
        offset += nbytes
    for _, _, _, raw in payloads:
        blob += raw

    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as handle:
        handle.write(bytes(blob))
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)
    return str(path)


def read_dnw(path):
    """Read back (kernels, biases, metadata, spectral_norms or None).

    Kernels and biases come back float32 exactly as stored.
    """
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a .dnw weight container")
    version, mark, count = struct.unpack_from("<III", blob, 4)
    if mark != ENDIAN_MARK:
        raise FormatError(f"{path}: endianness marker 0x{mark:08x} is not little-endian")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, "
                          f"this reader supports {FORMAT_VERSION}")

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
        raise FormatError(f"{path}: descriptor table cut short") from exc

    arrays = {}
    metadata = {}
    for name, dtype_str, shape, offset, nbytes in entries:
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: payload {name!r} extends past end of file")
        raw = blob[offset:offset + nbytes]
        if name == METADATA_NAME:
            metadata = json.loads(raw.decode("utf-8"))
            continue
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(dtype_str)).reshape(shape).copy()

    layer_count = int(metadata.get("layer_count", 0))
    if layer_count < 1:
        raise FormatError(f"{path}: weight container declares no layers")
    kernels, biases = [], []
    for l in range(layer_count):
        if f"kernel_{l}" not in arrays or f"bias_{l}" not in arrays:
            raise FormatError(f"{path}: weight container lacks layer {l} payloads")
        kernels.append(arrays[f"kernel_{l}"])
        biases.append(arrays[f"bias_{l}"])
    _validate_architecture(kernels, biases)
    norms = arrays.get("spectral_norms")
    return kernels, biases, metadata, norms
