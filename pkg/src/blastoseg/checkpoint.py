"""Self-describing checkpoint files.

Layout (all text lines are UTF-8, newline terminated):

    BLASTOSEG-CKPT v1
    meta <nbytes>
    <nbytes of JSON: architecture description plus training metadata>
    tensors <count>
    <name> <ndim> <dim...> <byte offset>     (one line per tensor)
    payload <total bytes>
    <raw little-endian float32 data>

The embedded architecture description is enough to rebuild the model, so
loading never needs the original build arguments; when the caller does pass
expectations (model name, base_filters) they are verified against the file.
"""

import io
import json

import numpy as np

from .errors import CheckpointError
from .models import ModelGraph

MAGIC = b"BLASTOSEG-CKPT v1\n"


def save_checkpoint(path, model, extra=None):
    """Write the model's architecture, parameters and buffers to ``path``.

    ``extra`` is a JSON-serializable dict merged into the metadata (e.g.
    validation Jaccard for ensemble weighting). Output bytes are a pure
    function of the model state and ``extra``.
    """
    meta = {"arch": model.describe(), "extra": dict(extra or {})}
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()

    state = model.state_arrays()
    manifest = io.StringIO()
    payload = io.BytesIO()
    offset = 0
    for name, arr in state.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        dims = " ".join(str(d) for d in arr.shape) if arr.ndim else ""
        line = f"{name} {arr.ndim}" + (f" {dims}" if dims else "") + f" {offset}\n"
        manifest.write(line)
        payload.write(data)
        offset += len(data)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"meta {len(meta_blob)}\n".encode())
        fh.write(meta_blob)
        fh.write(b"\n")
        fh.write(f"tensors {len(state)}\n".encode())
        fh.write(manifest.getvalue().encode())
        fh.write(f"payload {offset}\n".encode())
        fh.write(payload.getvalue())
    return path


def read_checkpoint(path):
    """Parse a checkpoint file into (meta dict, name -> float32 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a recognized checkpoint file")
    rest = blob[len(MAGIC):]

    def take_line(buf):
        idx = buf.index(b"\n")
        return buf[:idx].decode(), buf[idx + 1:]

    try:
        line, rest = take_line(rest)
        tag, nbytes = line.split()
        if tag != "meta":
            raise ValueError("missing meta header")
        nbytes = int(nbytes)
        meta = json.loads(rest[:nbytes].decode())
        rest = rest[nbytes + 1:]  # skip the newline after the JSON blob

        line, rest = take_line(rest)
        tag, count = line.split()
        if tag != "tensors":
            raise ValueError("missing tensors header")
        entries = []
        for _ in range(int(count)):
            line, rest = take_line(rest)
            parts = line.split()
            name, ndim = parts[0], int(parts[1])
            dims = tuple(int(d) for d in parts[2:2 + ndim])
            offset = int(parts[2 + ndim])
            entries.append((name, dims, offset))

        line, rest = take_line(rest)
        tag, total = line.split()
        if tag != "payload":
            raise ValueError("missing payload header")
        total = int(total)
        if len(rest) < total:
            raise ValueError(f"payload truncated: expected {total} bytes, got {len(rest)}")
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc

    tensors = {}
    for name, dims, offset in entries:
        n_items = int(np.prod(dims)) if dims else 1
        flat = np.frombuffer(rest, dtype="<f4", count=n_items, offset=offset)
        tensors[name] = flat.reshape(dims).copy()
    return meta, tensors


def load_model(path, *, expect_model=None, expect_base_filters=None):
    """Rebuild the stored architecture and load its weights.

    Returns (model, meta). Raises CheckpointError when the file does not
    match the expectations or the stored architecture.
    """
    meta, tensors = read_checkpoint(path)
    arch = meta.get("arch")
    if not arch:
        raise CheckpointError(f"{path}: checkpoint has no architecture description")
    if expect_model is not None and arch.get("model") != expect_model:
        raise CheckpointError(
            f"{path}: checkpoint holds a {arch.get('model')!r} model, "
            f"but {expect_model!r} was requested")
    if expect_base_filters is not None and arch.get("base_filters") != expect_base_filters:
        raise CheckpointError(
            f"{path}: checkpoint was built with base_filters "
            f"{arch.get('base_filters')}, not {expect_base_filters}")

    model = ModelGraph(
        arch["model"],
        arch["base_filters"],
        tuple(arch["input_shape"]),
        seed=arch.get("seed", 0),
        dropout_rate=arch.get("dropout_rate", 0.05),
    )
    state = model.state_arrays()
    if set(state) != set(tensors):
        missing = sorted(set(state) - set(tensors))[:3]
        surplus = sorted(set(tensors) - set(state))[:3]
        raise CheckpointError(
            f"{path}: tensor names do not match the architecture "
            f"(missing {missing}, unexpected {surplus})")
    for name, arr in state.items():
        stored = tensors[name]
        if stored.shape != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {stored.shape}, "
                f"expected {arr.shape}")
        arr[...] = stored.astype(arr.dtype)
    return model, meta
