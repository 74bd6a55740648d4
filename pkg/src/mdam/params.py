"""Flat path-keyed parameter store and the binary checkpoint format.

Checkpoint layout (format version 1, little-endian):
    magic b"MDCK" | u32 version | u32 header_len | header JSON (utf-8)
    u32 n_params, then per parameter sorted by path:
        u16 path_len | path utf-8 | u8 ndim | u32 dims... | f64 payload
The header JSON carries the variant spec, the vocabulary token list and any
extra metadata. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from mdam.autodiff import Tensor, parameter
from mdam.config import VariantSpec

MAGIC = b"MDCK"
FORMAT_VERSION = 1


class ModelParams:
    """Learnable tensors keyed by a stable dotted path.

    ``row_mask`` (optional, per path) marks which rows may be updated; it is
    how a frozen padding row coexists with a trainable embedding table.
    Tensors with requires_grad=False are never updated at all.
    """

    def __init__(self):
        self._store: dict[str, Tensor] = {}
        self.row_masks: dict[str, np.ndarray] = {}

    def add(self, path, tensor, row_mask=None):
        if path in self._store:
            raise KeyError(f"duplicate parameter path {path!r}")
        self._store[path] = tensor
        if row_mask is not None:
            self.row_masks[path] = np.asarray(row_mask, dtype=bool)
        return tensor

    def __getitem__(self, path):
        return self._store[path]

    def __contains__(self, path):
        return path in self._store

    def __len__(self):
        return len(self._store)

    def paths(self):
        return sorted(self._store)

    def items(self):
        return [(p, self._store[p]) for p in self.paths()]

    def trainable_items(self):
        return [(p, t) for p, t in self.items() if t.requires_grad]

    def zero_grads(self):
        for t in self._store.values():
            t.grad = None

    def count_values(self, prefix=None):
        total = 0
        for p, t in self._store.items():
            if prefix is None or p.startswith(prefix):
                total += t.size
        return total

    def clone_arrays(self):
        return {p: t.data.copy() for p, t in self._store.items()}

    def load_arrays(self, arrays):
        for p, t in self._store.items():
            src = arrays[p]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {p!r}: {src.shape} vs {t.data.shape}")
            t.data[...] = src


def xavier_uniform(shape, rng):
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def save_checkpoint(path, params, spec, vocab_tokens=None, extra=None):
    header = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "vocab": list(vocab_tokens) if vocab_tokens is not None else None,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    items = params.items() if isinstance(params, ModelParams) else sorted(params.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(struct.pack("<I", len(items)))
        for p, t in items:
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            pb = p.encode("utf-8")
            f.write(struct.pack("<H", len(pb)))
            f.write(pb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (arrays dict, VariantSpec, header dict)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        (n,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n):
            (plen,) = struct.unpack("<H", f.read(2))
            p = f.read(plen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(f.read(8 * count), dtype="<f8").astype(np.float64)
            arrays[p] = arr.reshape(shape)
    spec = VariantSpec.from_dict(header["spec"])
    return arrays, spec, header


def params_equal(a, b):
    """Bitwise equality of two path->array mappings."""
    if sorted(a) != sorted(b):
        return False
    return all(a[p].shape == b[p].shape and (a[p] == b[p]).all() for p in a)
