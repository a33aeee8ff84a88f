"""Binary checkpoints for hypernetwork ("RGFL") and MDN ("RGMD") models.

Layout (all little-endian): 4-byte magic, uint32 version, a model-specific
header, the fixed standardizer vectors as float64, a uint64 parameter count
and the flat parameter vector as float64. A sibling ``<file>.meta.txt``
repeats the header fields as ``key=value`` lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .flow import FlowConfig
from .hypernet import HyperNetwork, Standardizer
from .mdn import MdnModel

FORMAT_VERSION = 1
MAGIC_FLOW = b"RGFL"
MAGIC_MDN = b"RGMD"


class CheckpointError(ValueError):
    pass


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.txt")


def _u32s(values) -> bytes:
    values = list(values)
    return struct.pack(f"<I{len(values)}I", len(values), *values)


def _header(model) -> tuple[bytes, dict]:
    st = model.standardizer
    if isinstance(model, HyperNetwork):
        fc = model.flow_config
        head = MAGIC_FLOW + struct.pack("<III", FORMAT_VERSION, model.cond_dim, fc.target_dim)
        head += _u32s(model.hidden_widths) + _u32s(fc.hidden_widths)
        head += struct.pack("<Iddd", fc.rk4_steps, fc.t0, fc.t1, model.output_scale)
        meta = {
            "magic": "RGFL",
            "version": FORMAT_VERSION,
            "cond_dim": model.cond_dim,
            "target_dim": fc.target_dim,
            "hyper_widths": ",".join(map(str, model.hidden_widths)),
            "flow_widths": ",".join(map(str, fc.hidden_widths)),
            "rk4_steps": fc.rk4_steps,
            "t0": repr(fc.t0),
            "t1": repr(fc.t1),
            "output_scale": repr(model.output_scale),
        }
    elif isinstance(model, MdnModel):
        head = MAGIC_MDN + struct.pack("<IIII", FORMAT_VERSION, model.cond_dim, model.target_dim, model.k)
        head += _u32s(model.hidden_widths)
        meta = {
            "magic": "RGMD",
            "version": FORMAT_VERSION,
            "cond_dim": model.cond_dim,
            "target_dim": model.target_dim,
            "k": model.k,
            "hidden_widths": ",".join(map(str, model.hidden_widths)),
            "head_width": model.sizes[-1],
        }
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    for name in ("x_shift", "x_scale", "y_shift", "y_scale"):
        vec = getattr(st, name)
        head += vec.astype("<f8").tobytes()
        meta[name] = ",".join(format(v, ".17g") for v in vec)
    return head, meta


def save_checkpoint(model, path, extra: dict | None = None) -> Path:
    path = Path(path)
    head, meta = _header(model)
    psi = np.ascontiguousarray(model.psi.data, dtype="<f8")
    meta["n_params"] = psi.size
    if extra:
        meta.update(extra)
    path.write_bytes(head + struct.pack("<Q", psi.size) + psi.tobytes())
    meta_path(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def u32s(self) -> tuple[int, ...]:
        (n,) = self.take("<I")
        return self.take(f"<{n}I")

    def f64s(self, n: int) -> np.ndarray:
        return np.array(self.take(f"<{n}d"), dtype=np.float64)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    (magic,) = r.take("<4s")
    (version,) = r.take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if magic == MAGIC_FLOW:
        c, d = r.take("<II")
        hyper_w, flow_w = r.u32s(), r.u32s()
        steps, t0, t1, scale = r.take("<Iddd")
        st = Standardizer(r.f64s(c), r.f64s(c), r.f64s(d), r.f64s(d))
        fc = FlowConfig(target_dim=d, hidden_widths=flow_w, t0=t0, t1=t1, rk4_steps=steps)
        model = HyperNetwork(c, fc, hidden_widths=hyper_w, output_scale=scale, standardizer=st)
    elif magic == MAGIC_MDN:
        c, d, k = r.take("<III")
        widths = r.u32s()
        st = Standardizer(r.f64s(c), r.f64s(c), r.f64s(d), r.f64s(d))
        model = MdnModel(c, d, k, hidden_widths=widths, standardizer=st)
    else:
        raise CheckpointError(f"unknown checkpoint magic {magic!r}")
    (n,) = r.take("<Q")
    if n != model.n_params:
        raise CheckpointError(f"checkpoint holds {n} parameters, architecture needs {model.n_params}")
    model.psi.data[...] = r.f64s(n)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after parameter block")
    return model
