"""On-disk formats: pooled sparse feature vectors and model checkpoints.

Sparse vector file (little-endian)::

    8s   magic  b"ASDSPV\\x00\\x01"
    u32  format version (1)
    u32  subject id length, then UTF-8 bytes
    u32  n_nodes
    u32  feat_dim
    f64  pooling ratio
    u64  number of stored entries
    then per entry: u64 position, f64 value

Checkpoint file (little-endian)::

    8s   magic  b"ASDCKPT\\x01"
    u32  format version (1)
    u32  config JSON length, then UTF-8 bytes
    u64  optimizer step
    u32  tensor count
    per tensor (sorted by name):
        u32 name length, name bytes, u32 ndim, ndim x u64 shape,
        parameter, Adam first moment, Adam second moment (f64 each)
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .nn import ModelState
from .pooling import SparseFeatureVector

SPV_MAGIC = b"ASDSPV\x00\x01"
CKPT_MAGIC = b"ASDCKPT\x01"
FORMAT_VERSION = 1

_ENTRY = np.dtype([("pos", "<u8"), ("val", "<f8")])


class FormatError(ValueError):
    pass


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated file")
    return buf


def _unpack(fh, fmt):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def encode_sparse_vector(vec: SparseFeatureVector, subject_id: str, n_nodes: int, feat_dim: int, ratio: float) -> bytes:
    if vec.total_len != n_nodes * feat_dim:
        raise ValueError("vector length does not match n_nodes * feat_dim")
    sid = subject_id.encode("utf-8")
    out = io.BytesIO()
    out.write(SPV_MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(sid)))
    out.write(sid)
    out.write(struct.pack("<IIdQ", n_nodes, feat_dim, float(ratio), len(vec.positions)))
    entries = np.empty(len(vec.positions), dtype=_ENTRY)
    entries["pos"] = vec.positions
    entries["val"] = vec.values
    out.write(entries.tobytes())
    return out.getvalue()


def write_sparse_vector(path, vec, subject_id, n_nodes, feat_dim, ratio) -> None:
    Path(path).write_bytes(encode_sparse_vector(vec, subject_id, n_nodes, feat_dim, ratio))


def read_sparse_vector(path):
    """Returns (header dict, SparseFeatureVector)."""
    with Path(path).open("rb") as fh:
        if _read_exact(fh, 8) != SPV_MAGIC:
            raise FormatError(f"{path}: not a sparse feature vector file")
        version, id_len = _unpack(fh, "<II")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        sid = _read_exact(fh, id_len).decode("utf-8")
        n_nodes, feat_dim, ratio, nnz = _unpack(fh, "<IIdQ")
        entries = np.frombuffer(_read_exact(fh, nnz * _ENTRY.itemsize), dtype=_ENTRY)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    header = {"subject_id": sid, "n_nodes": n_nodes, "feat_dim": feat_dim, "ratio": ratio}
    vec = SparseFeatureVector(
        n_nodes * feat_dim, entries["pos"].astype(np.int64), entries["val"].astype(np.float64)
    )
    return header, vec


def write_sparse_vector_csv(path, vec, subject_id, n_nodes, feat_dim, ratio) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "n_nodes", "feat_dim", "ratio"])
        w.writerow([subject_id, n_nodes, feat_dim, repr(float(ratio))])
        w.writerow(["position", "value"])
        for p, v in zip(vec.positions, vec.values):
            w.writerow([int(p), repr(float(v))])


def encode_checkpoint(state: ModelState) -> bytes:
    cfg = json.dumps(state.config, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<QI", state.step, len(state.params)))
    for name in sorted(state.params):
        p = state.params[name]
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", p.ndim))
        out.write(struct.pack(f"<{p.ndim}Q", *p.shape))
        for arr in (p, state.m[name], state.v[name]):
            out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def decode_checkpoint(data: bytes) -> ModelState:
    fh = io.BytesIO(data)
    if _read_exact(fh, 8) != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, cfg_len = _unpack(fh, "<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = json.loads(_read_exact(fh, cfg_len).decode("utf-8"))
    step, count = _unpack(fh, "<QI")
    params, m, v = {}, {}, {}
    for _ in range(count):
        (name_len,) = _unpack(fh, "<I")
        name = _read_exact(fh, name_len).decode("utf-8")
        (ndim,) = _unpack(fh, "<I")
        shape = _unpack(fh, f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        blocks = [
            np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").astype(np.float64).reshape(shape)
            for _ in range(3)
        ]
        params[name], m[name], v[name] = blocks
    if fh.read(1):
        raise FormatError("trailing bytes in checkpoint")
    return ModelState(params, m, v, step, config)


def save_checkpoint(path, state: ModelState, metadata: dict | None = None) -> None:
    """Write the binary checkpoint plus a ``.json`` sidecar next to it."""
    path = Path(path)
    path.write_bytes(encode_checkpoint(state))
    side = {
        "format_version": FORMAT_VERSION,
        "kind": state.config.get("kind"),
        "step": state.step,
        "tensors": {k: list(v.shape) for k, v in sorted(state.params.items())},
        "config": state.config,
        **(metadata or {}),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelState:
    return decode_checkpoint(Path(path).read_bytes())
