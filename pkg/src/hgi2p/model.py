"""Learnable-parameter container and its binary file format.

File layout: magic b"HGI2P\\0", u32 version, u32 length + UTF-8 JSON
metadata (sizes and hyperparameters), u32 matrix count, then per matrix a
u32 name length, the name, u32 ndim, u32 dims, and the row-major data as
little-endian float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import SceneParseError
from .headapting import DEFAULT_BETA, HeParams
from .hetgraph import DEFAULT_ALPHA
from .matchprune import DEFAULT_TOP_K
from .mpmining import DEFAULT_TAU_2D, MpParams

MAGIC = b"HGI2P\x00"
VERSION = 1

HARD_CAP = 64  # scenes beyond this many regions per side are rejected outright

_MP_FIELDS = ("w_mix", "w_query", "w_key", "w_value")
_HE_FIELDS = (
    "w_msg_img", "w_msg_cld",
    "w_query_img", "w_key_img", "w_value_img",
    "w_query_cld", "w_key_cld", "w_value_cld",
)


@dataclass
class Model:
    """Everything learned plus the sizing and hyperparameters it is tied to."""

    mp: MpParams
    he: HeParams
    m_max: int
    n_max: int
    channels: int
    alpha: float = DEFAULT_ALPHA
    tau_2d: float = DEFAULT_TAU_2D
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if not (1 <= self.m_max <= HARD_CAP and 1 <= self.n_max <= HARD_CAP):
            raise ValueError(f"region capacity must lie in 1..{HARD_CAP}")

    @classmethod
    def identity_init(cls, m_max: int, n_max: int, channels: int,
                      alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                      tau_2d: float = DEFAULT_TAU_2D, top_k: int = DEFAULT_TOP_K) -> "Model":
        return cls(
            mp=MpParams.identity_init(m_max, n_max),
            he=HeParams.identity_init(channels, beta=beta),
            m_max=m_max,
            n_max=n_max,
            channels=channels,
            alpha=alpha,
            tau_2d=tau_2d,
            top_k=top_k,
        )

    def param_dict(self) -> dict:
        """Learnable matrices keyed by qualified name (beta is a
        hyperparameter, not a learnable entry)."""
        out = {}
        for f in _MP_FIELDS:
            out[f"mp.{f}"] = getattr(self.mp, f)
        for f in _HE_FIELDS:
            out[f"he.{f}"] = getattr(self.he, f)
        return out

    def with_params(self, params: dict) -> "Model":
        """Same configuration, new parameter values (arrays or tape vars)."""
        mp = MpParams(
            *(params[f"mp.{f}"] for f in _MP_FIELDS),
            m_max=self.m_max, n_max=self.n_max,
        )
        he = HeParams(
            *(params[f"he.{f}"] for f in _HE_FIELDS),
            beta=self.he.beta,
        )
        return replace(self, mp=mp, he=he)


def save_model(model: Model, path) -> None:
    meta = {
        "alpha": model.alpha,
        "beta": model.he.beta,
        "channels": model.channels,
        "m_max": model.m_max,
        "n_max": model.n_max,
        "tau_2d": model.tau_2d,
        "top_k": model.top_k,
        "version": VERSION,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = model.param_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=float)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_model(path) -> Model:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise SceneParseError(f"cannot read model file {path}: {exc}") from exc
    off = 0
    try:
        if blob[: len(MAGIC)] != MAGIC:
            raise ValueError("bad magic")
        off = len(MAGIC)
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != VERSION:
            raise ValueError(f"unsupported version {version}")
        (meta_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            params[name] = arr.astype(float)
        base = Model.identity_init(
            m_max=int(meta["m_max"]), n_max=int(meta["n_max"]),
            channels=int(meta["channels"]), alpha=float(meta["alpha"]),
            beta=float(meta["beta"]), tau_2d=float(meta["tau_2d"]),
            top_k=int(meta["top_k"]),
        )
        return base.with_params(params)
    except SceneParseError:
        raise
    except Exception as exc:
        raise SceneParseError(f"corrupt model file {path} at byte {off}: {exc}") from exc
