"""Binary checkpoint format.

Layout (little endian):
    magic "EFAC" | u32 version | u64 step
    u32 config_len | config echo (UTF-8, the flat key=value serialization)
    u32 n_tensors | n_tensors * record
    u8 has_optimizer [| u32 n_opt | n_opt * record]
record = u32 name_len | name UTF-8 | u32 rank | rank * u32 extents
         | float32 payload

Parameters and batch-norm running stats are both stored as named tensors;
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .model import EFANet

MAGIC = b"EFAC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_record(f, name, array):
    data = np.ascontiguousarray(array, dtype="<f4")
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack("<%dI" % data.ndim, *data.shape))
    f.write(data.tobytes())


def _read_record(f):
    (name_len,) = struct.unpack("<I", f.read(4))
    name = f.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack("<%dI" % rank, f.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise CheckpointError(f"truncated payload for tensor {name!r}")
    return name, np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_checkpoint(path, model: EFANet, cfg: RunConfig, step=0, optimizer=None):
    echo = serialize_config(cfg).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, step))
        f.write(struct.pack("<I", len(echo)))
        f.write(echo)
        tensors = list(model.named_parameters())
        buffers = list(model.named_buffers())
        f.write(struct.pack("<I", len(tensors) + len(buffers)))
        for name, p in tensors:
            _write_record(f, name, p.data)
        for name, b in buffers:
            _write_record(f, name, b)
        if optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            state = optimizer.state_tensors()
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<I", len(state)))
            for name in state:
                _write_record(f, name, state[name])


def load_checkpoint(path, expect_cfg: RunConfig | None = None):
    """Load a checkpoint, rebuilding the model from the embedded config.

    If `expect_cfg` is given, its model section must match the stored one;
    mismatching fields are reported in the error.
    Returns (model, cfg, step, optimizer_state or None).
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, step = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        cfg = parse_config(f.read(cfg_len).decode("utf-8"))
        if expect_cfg is not None:
            _check_config_match(expect_cfg, cfg, path)
        model = EFANet(cfg.model, seed=cfg.train.seed, dtype=cfg.np_dtype())
        (n_tensors,) = struct.unpack("<I", f.read(4))
        stored = {}
        for _ in range(n_tensors):
            name, arr = _read_record(f)
            stored[name] = arr
        (has_opt,) = struct.unpack("<B", f.read(1))
        opt_state = None
        if has_opt:
            (n_opt,) = struct.unpack("<I", f.read(4))
            opt_state = dict(_read_record(f) for _ in range(n_opt))

    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {name: p.data.shape for name, p in params.items()}
    expected.update({name: b.shape for name, b in buffers.items()})
    diffs = []
    for name in sorted(set(expected) | set(stored)):
        if name not in stored:
            diffs.append(f"missing tensor {name}")
        elif name not in expected:
            diffs.append(f"unexpected tensor {name}")
        elif stored[name].shape != tuple(expected[name]):
            diffs.append(f"{name}: stored shape {stored[name].shape}, "
                         f"model expects {tuple(expected[name])}")
    if diffs:
        raise CheckpointError(f"{path}: checkpoint/model mismatch:\n  " +
                              "\n  ".join(diffs))
    for name, p in params.items():
        p.data = stored[name].astype(p.dtype)
    for name, b in buffers.items():
        b[...] = stored[name]
    return model, cfg, step, opt_state


def _check_config_match(expect: RunConfig, got: RunConfig, path):
    exp = {}
    act = {}
    for tag, cfg, out in (("expected", expect, exp), ("stored", got, act)):
        for line in serialize_config(cfg).splitlines():
            key, _, value = line.partition(" = ")
            if key.startswith(("model.", "backbone.")):
                out[key] = value
    diffs = [f"{k}: expected {exp[k]}, checkpoint has {act[k]}"
             for k in sorted(exp) if exp[k] != act[k]]
    if diffs:
        raise CheckpointError(f"{path}: model config mismatch:\n  " +
                              "\n  ".join(diffs))
