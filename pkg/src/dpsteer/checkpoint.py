"""Binary parameter container: JSON header + raw little-endian float64 blobs.

Layout:
    bytes 0..7    magic  b"DPSTCK01"
    bytes 8..11   format version, uint32 LE
    bytes 12..19  header length in bytes, uint64 LE
    header        UTF-8 JSON: {"spec": {...}, "params": [{"name", "shape"}, ...]}
    blobs         float64 LE arrays, concatenated in header declaration order
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"DPSTCK01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_id(spec: dict, named_arrays) -> str:
    """Stable content hash of a spec + parameter set."""
    h = hashlib.sha256()
    h.update(_canonical_json(spec))
    for name, arr in named_arrays:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path, spec: dict, named_arrays) -> None:
    named_arrays = [(name, np.asarray(arr, dtype=np.float64))
                    for name, arr in named_arrays]
    header = {
        "spec": spec,
        "params": [{"name": name, "shape": list(arr.shape)}
                   for name, arr in named_arrays],
    }
    header_bytes = _canonical_json(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in named_arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expect_spec: dict | None = None):
    """Read (spec, {name: array}). ``expect_spec`` entries must match the
    stored spec exactly; a mismatch is an error, as is any truncation or
    garbage (reported with the byte offset where reading failed)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header at byte offset {len(raw)}")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (want {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack_from("<Q", raw, 12)
    header_end = 20 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header at byte offset {len(raw)}")
    try:
        header = json.loads(raw[20:header_end].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header at byte offset 20: {e}") from None

    spec = header["spec"]
    if expect_spec is not None:
        for key, want in expect_spec.items():
            got = spec.get(key)
            if got != want:
                raise CheckpointError(
                    f"{path}: spec mismatch on {key!r}: file has {got!r}, "
                    f"expected {want!r}"
                )

    arrays: dict[str, np.ndarray] = {}
    offset = header_end
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if offset + nbytes > len(raw):
            raise CheckpointError(
                f"{path}: parameter data for {entry['name']!r} ends at byte "
                f"offset {len(raw)}, expected {offset + nbytes}"
            )
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=nbytes // 8, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(
            f"{path}: {len(raw) - offset} unexpected trailing bytes at byte "
            f"offset {offset}"
        )
    return spec, arrays
