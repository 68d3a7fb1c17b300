"""Binary file formats.

Patch tensors and kernels use a fixed 40-byte header (8-byte magic plus
four 8-byte fields) followed by little-endian float64 data::

    patch tensor:  b"ZNPTENS1"  N:u64  k:u64  d:u64  r0:f64   data[N*k*d]
    kernel:        b"ZNKERNL1"  k:u64  d_in:u64  d_out:u64  s:u64
                   base[k*d_in*d_out]  bias[d_out]

Everything else (patch sets, checkpoints) goes into a named-array archive::

    b"ZNARCH01"  version:u32  manifest_len:u64  manifest(JSON)  payload

The JSON manifest lists each array's name, dtype, shape and byte offset
together with free-form metadata and the payload SHA-256.
"""

import hashlib
import json
from pathlib import Path
import struct

import numpy as np

from .conv import KernelBank
from .decomposition import PatchTensor
from .errors import BundleFormatError, CorruptionError

PATCH_MAGIC = b"ZNPTENS1"
KERNEL_MAGIC = b"ZNKERNL1"
ARCHIVE_MAGIC = b"ZNARCH01"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<8sQQQ8s")
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _read_exact(path):
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CorruptionError(f"{path}: file too short")
    return data


def _check_magic(data, magic, path):
    if data[:8] != magic:
        raise BundleFormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")


def write_patch_tensor(tensor, path):
    N, k, d = tensor.shape
    header = _HEADER.pack(PATCH_MAGIC, N, k, d, struct.pack("<d", tensor.r0))
    Path(path).write_bytes(header + np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def read_patch_tensor(path):
    data = _read_exact(path)
    _check_magic(data, PATCH_MAGIC, path)
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, N, k, d, r0 = _HEADER.unpack_from(data)
    body = data[_HEADER.size:]
    if len(body) != 8 * N * k * d:
        raise CorruptionError(f"{path}: expected {8 * N * k * d} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f8").reshape(N, k, d).astype(float)
    return PatchTensor(arr, struct.unpack("<d", r0)[0])


def export_patch_tensor_csv(tensor, path):
    """Debug dump, one row per (vertex, basis): ``vertex_id,basis_j,c0,...``."""
    N, k, d = tensor.shape
    with open(path, "w") as fh:
        fh.write(",".join(["vertex_id", "basis_j"] + [f"c{c}" for c in range(d)]) + "\n")
        for p in range(N):
            for i in range(k):
                fh.write(f"{p},{i + 1}," + ",".join(repr(float(v)) for v in tensor.data[p, i]) + "\n")


def write_kernel(bank, path):
    k, d_in, d_out = bank.base.shape
    header = _HEADER.pack(KERNEL_MAGIC, k, d_in, d_out, struct.pack("<Q", bank.s))
    payload = np.concatenate([bank.base.ravel(), bank.bias.ravel()]).astype("<f8").tobytes()
    Path(path).write_bytes(header + payload)


def read_kernel(path):
    data = _read_exact(path)
    _check_magic(data, KERNEL_MAGIC, path)
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, k, d_in, d_out, s = _HEADER.unpack_from(data)
    s = struct.unpack("<Q", s)[0]
    n_base = k * d_in * d_out
    if len(data) != _HEADER.size + 8 * (n_base + d_out):
        raise CorruptionError(f"{path}: kernel payload has wrong length")
    body = np.frombuffer(data[_HEADER.size:], dtype="<f8")
    return KernelBank(body[:n_base].reshape(k, d_in, d_out).copy(), int(s), body[n_base:].copy())


def write_archive(path, arrays, meta=None):
    """Write named arrays (float64 or int64) plus JSON metadata."""
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        value = np.asarray(value)
        code = "i8" if np.issubdtype(value.dtype, np.integer) or value.dtype == bool else "f8"
        raw = np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(value.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"arrays": entries, "meta": meta or {},
                "payload_sha256": hashlib.sha256(payload).hexdigest()}
    blob = json.dumps(manifest, sort_keys=True).encode()
    header = ARCHIVE_MAGIC + struct.pack("<IQ", ARCHIVE_VERSION, len(blob))
    Path(path).write_bytes(header + blob + payload)


def read_archive(path):
    """Inverse of :func:`write_archive`; returns ``(arrays, meta)``."""
    data = _read_exact(path)
    _check_magic(data, ARCHIVE_MAGIC, path)
    if len(data) < 20:
        raise CorruptionError(f"{path}: truncated header")
    version, mlen = struct.unpack_from("<IQ", data, 8)
    if version != ARCHIVE_VERSION:
        raise BundleFormatError(f"{path}: archive version {version}, expected {ARCHIVE_VERSION}")
    try:
        manifest = json.loads(data[20:20 + mlen])
    except (ValueError, UnicodeDecodeError):
        raise CorruptionError(f"{path}: unreadable manifest") from None
    payload = data[20 + mlen:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CorruptionError(f"{path}: payload hash mismatch")
    arrays = {}
    for e in manifest["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
