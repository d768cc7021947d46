"""Checkpoints: named-tensor state with bitwise round-trip fidelity.

Format ``TZKC`` (little-endian): magic, u8 version, u32 header length, JSON
header (config snapshot, step counter, RNG state, optimizer scalars, and the
ordered tensor manifest), then one TZKT record per manifest entry. Raw
little-endian float payloads and a canonical JSON encoding make identical
states serialize to identical bytes.

Integer buffers (shuffle permutations) and boolean flags (actnorm
initialization) ride along as float64 tensors; they are exact well past any
realistic extent.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FormatError
from .tensor import Tensor, read_tensor, write_tensor

_TZKC_MAGIC = b"TZKC"
_TZKC_VERSION = 1


@dataclass
class Checkpoint:
    """Deserialized checkpoint state."""

    kind: str
    config: dict
    step: int
    rng_state: Optional[dict]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: Optional[int] = None
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)


def collect_state(model, prefix: str = "") -> tuple[dict, dict]:
    """Named parameter tensors and named float buffers for a model.

    Works for a flat joint model or a two-level hierarchy (state nests under
    ``parent.`` / ``child.``).
    """
    if hasattr(model, "parent") and hasattr(model, "child"):
        p1, b1 = collect_state(model.parent, f"{prefix}parent.")
        p2, b2 = collect_state(model.child, f"{prefix}child.")
        return {**p1, **p2}, {**b1, **b2}
    params = {f"{prefix}{n}": p for n, p in model.named_parameters()}
    buffers = {f"{prefix}{n}": np.asarray(b, dtype=np.float64)
               for n, b in model.named_buffers()}
    buffers[f"{prefix}tflow.actnorm_initialized"] = np.asarray(
        1.0 if model.tflow.actnorm_initialized else 0.0, dtype=np.float64)
    return params, buffers


def restore_state(model, params: dict[str, np.ndarray],
                  buffers: dict[str, np.ndarray], prefix: str = "") -> None:
    """Overwrite a freshly built model's state from checkpoint arrays."""
    if hasattr(model, "parent") and hasattr(model, "child"):
        restore_state(model.parent,
                      _scoped(params, f"{prefix}parent."),
                      _scoped(buffers, f"{prefix}parent."))
        restore_state(model.child,
                      _scoped(params, f"{prefix}child."),
                      _scoped(buffers, f"{prefix}child."))
        return
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        extra = sorted(set(params) - set(own))[:3]
        raise FormatError(
            f"checkpoint parameter names disagree with the model "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, p in own.items():
        p.assign_(np.asarray(params[name], dtype=p.data.dtype))
    for name, val in buffers.items():
        if name == "tflow.actnorm_initialized":
            if float(np.asarray(val).reshape(())) >= 0.5:
                _mark_initialized(model.tflow)
        elif name.startswith("tflow."):
            model.tflow.load_buffer(name[len("tflow."):], val)
        elif name.startswith("head."):
            hid, rest = name[len("head."):].split(".", 1)
            if not rest.startswith("cflow."):
                raise FormatError(f"unknown head buffer {name!r}")
            model.heads[hid].c_flow.load_buffer(rest[len("cflow."):], val)
        else:
            raise FormatError(f"unknown buffer {name!r}")


def _scoped(table: dict, prefix: str) -> dict:
    return {n[len(prefix):]: v for n, v in table.items() if n.startswith(prefix)}


def _mark_initialized(flow) -> None:
    from .flows import ActNorm

    for e in flow.entries:
        if isinstance(e.step, ActNorm):
            e.step.initialized = True


def rng_state_to_json(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state, default=int))


def rng_from_json(state: dict) -> np.random.Generator:
    bitgen_cls = getattr(np.random, state["bit_generator"])
    bitgen = bitgen_cls()
    bitgen.state = state
    return np.random.Generator(bitgen)


def save_checkpoint(path, model, config: dict, step: int,
                    rng: Optional[np.random.Generator] = None,
                    opt=None, kind: str = "tzk") -> None:
    params, buffers = collect_state(model)
    header: dict = {
        "kind": kind,
        "config": config,
        "step": int(step),
        "rng_state": rng_state_to_json(rng) if rng is not None else None,
        "params": sorted(params),
        "buffers": sorted(buffers),
        "opt": None,
    }
    records: list[np.ndarray] = [params[n].data for n in header["params"]]
    records += [buffers[n] for n in header["buffers"]]
    if opt is not None:
        opt_names = sorted(opt.m)
        header["opt"] = {"step_count": int(opt.step_count), "names": opt_names}
        records += [opt.m[n] for n in opt_names]
        records += [opt.v[n] for n in opt_names]

    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_TZKC_MAGIC)
    buf.write(struct.pack("<BI", _TZKC_VERSION, len(blob)))
    buf.write(blob)
    for arr in records:
        arr = np.asarray(arr)
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
        write_tensor(buf, Tensor(arr, dtype=dtype))
    with open(path, "wb") as fp:
        fp.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fp:
        raw = fp.read()
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != _TZKC_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version, blob_len = struct.unpack("<BI", buf.read(5))
    if version != _TZKC_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(blob_len).decode())
    ckpt = Checkpoint(kind=header["kind"], config=header["config"],
                      step=header["step"], rng_state=header["rng_state"])
    for name in header["params"]:
        ckpt.params[name] = read_tensor(buf).data
    for name in header["buffers"]:
        ckpt.buffers[name] = read_tensor(buf).data
    if header["opt"] is not None:
        ckpt.opt_step = header["opt"]["step_count"]
        for name in header["opt"]["names"]:
            ckpt.opt_m[name] = read_tensor(buf).data.astype(np.float64)
        for name in header["opt"]["names"]:
            ckpt.opt_v[name] = read_tensor(buf).data.astype(np.float64)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint records")
    return ckpt


def restore_optimizer(opt, ckpt: Checkpoint) -> None:
    if ckpt.opt_step is None:
        raise FormatError("checkpoint carries no optimizer state")
    if set(opt.m) != set(ckpt.opt_m):
        raise FormatError("optimizer parameter names disagree with checkpoint")
    opt.step_count = int(ckpt.opt_step)
    for name in opt.m:
        opt.m[name] = ckpt.opt_m[name].reshape(opt.m[name].shape).copy()
        opt.v[name] = ckpt.opt_v[name].reshape(opt.v[name].shape).copy()
