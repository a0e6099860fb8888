"""Small convolutional embedding network with hand-derived gradients.

The default architecture maps a 32x32 grayscale crop to a unit-norm
128-dim embedding: three 3x3 same-padded conv + ReLU + 2x2 maxpool blocks
(16/32/64 channels), a dense layer, and L2 normalization. Parameters are
stored as float32 (the on-disk format) while every forward/backward pass
accumulates in float64, which keeps finite-difference checks tight.

Inputs are inverted on entry (ink becomes the positive signal) so blank
background activates nothing and zero-padding at borders is neutral.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FormatError, GrayImage, IncompatibleModel, ShapeError

NORM_GUARD = 1e-8
_HEADER_STRUCT = struct.Struct("<I")


@dataclass(frozen=True)
class Architecture:
    """Layer plan; the fingerprint pins weight files and indexes to it."""

    input_hw: tuple[int, int] = (32, 32)
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    pool: int = 2
    out_dim: int = 128
    l2_normalize: bool = True

    def __post_init__(self):
        h, w = self.input_hw
        side = h
        if h != w:
            raise ShapeError("inputs must be square")
        for _ in self.conv_channels:
            if side % self.pool != 0:
                raise ShapeError("spatial size must stay divisible by the pool factor")
            side //= self.pool
        if side < 1:
            raise ShapeError("too many pooling stages for the input size")

    @property
    def final_spatial(self) -> int:
        side = self.input_hw[0]
        for _ in self.conv_channels:
            side //= self.pool
        return side

    @property
    def fc_in(self) -> int:
        return self.conv_channels[-1] * self.final_spatial**2

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        prev = 1
        for i, ch in enumerate(self.conv_channels, start=1):
            shapes[f"conv{i}_w"] = (ch, prev, self.kernel, self.kernel)
            shapes[f"conv{i}_b"] = (ch,)
            prev = ch
        shapes["fc_w"] = (self.fc_in, self.out_dim)
        shapes["fc_b"] = (self.out_dim,)
        return shapes

    def describe(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "pool": self.pool,
            "out_dim": self.out_dim,
            "l2_normalize": self.l2_normalize,
        }

    @classmethod
    def from_description(cls, desc: dict) -> "Architecture":
        return cls(
            input_hw=tuple(desc["input_hw"]),
            conv_channels=tuple(desc["conv_channels"]),
            kernel=int(desc["kernel"]),
            pool=int(desc["pool"]),
            out_dim=int(desc["out_dim"]),
            l2_normalize=bool(desc["l2_normalize"]),
        )

    @property
    def fingerprint(self) -> str:
        payload = json.dumps(self.describe(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


DEFAULT_ARCHITECTURE = Architecture()


@dataclass
class EncoderParams:
    """All tensors of the network, stored float32."""

    arch: Architecture
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.arch.tensor_shapes()
        if set(self.tensors) != set(expected):
            raise ShapeError(
                f"tensor names {sorted(self.tensors)} != expected {sorted(expected)}"
            )
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ShapeError(f"{name}: shape {t.shape} != expected {shape}")
            if t.dtype != np.float32:
                raise ShapeError(f"{name}: dtype must be float32")
            if not np.isfinite(t).all():
                raise ValueError(f"{name}: contains non-finite values")

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def weights_digest(self) -> str:
        """Identifies the exact model (architecture plus weight bytes)."""
        h = hashlib.sha256(self.arch.fingerprint.encode("ascii"))
        for name in sorted(self.tensors):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return h.hexdigest()


def init(seed: int, arch: Architecture = DEFAULT_ARCHITECTURE) -> EncoderParams:
    """He-uniform weights, zero biases; deterministic in the seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in arch.tensor_shapes().items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        if name.startswith("conv"):
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in = shape[0]
        limit = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return EncoderParams(arch, tensors)


@dataclass
class ForwardCache:
    """Intermediate values needed for an exact backward pass."""

    arch: Architecture
    x_padded: list[np.ndarray] = field(default_factory=list)
    relu_mask: list[np.ndarray] = field(default_factory=list)
    pool_index: list[np.ndarray] = field(default_factory=list)
    pool_in_shape: list[tuple[int, ...]] = field(default_factory=list)
    fc_input: np.ndarray | None = None
    prenorm: np.ndarray | None = None
    norms: np.ndarray | None = None
    denoms: np.ndarray | None = None
    weights64: dict[str, np.ndarray] = field(default_factory=dict)


def _stack_batch(batch, input_hw: tuple[int, int]) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        arr = np.asarray(batch, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    else:
        items = []
        for item in batch:
            items.append(item.array if isinstance(item, GrayImage) else np.asarray(item))
        if not items:
            raise ShapeError("empty batch")
        arr = np.stack(items).astype(np.float64)
    if arr.ndim != 3 or arr.shape[1:] != input_hw:
        raise ShapeError(f"expected crops of shape {input_hw}, got {arr.shape[1:]}")
    return arr


def _conv_windows(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, out_h, out_w, k, k), strides=(sn, sc, sh, sw, sh, sw)
    )


def forward(params: EncoderParams, batch) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch of crops.

    Returns (embeddings, cache); embeddings are float64, unit-norm when the
    architecture normalizes (up to the degenerate-input guard).
    """
    arch = params.arch
    x = 1.0 - _stack_batch(batch, arch.input_hw)  # ink-positive signal
    n = x.shape[0]
    k, pool = arch.kernel, arch.pool
    pad = k // 2
    cache = ForwardCache(arch=arch)
    cache.weights64 = {name: t.astype(np.float64) for name, t in params.tensors.items()}

    feat = x[:, None, :, :]  # (n, 1, h, w)
    for i in range(1, len(arch.conv_channels) + 1):
        w = cache.weights64[f"conv{i}_w"]
        b = cache.weights64[f"conv{i}_b"]
        xp = np.pad(feat, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        h_out, w_out = feat.shape[2], feat.shape[3]
        windows = _conv_windows(xp, k, h_out, w_out)
        pre = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])) + b  # (n,h,w,f)
        pre = pre.transpose(0, 3, 1, 2)
        mask = pre > 0.0
        act = pre * mask
        # 2x2 max pooling with remembered argmax for the backward pass
        nh, nw = h_out // pool, w_out // pool
        grouped = (
            act.reshape(n, act.shape[1], nh, pool, nw, pool)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, act.shape[1], nh, nw, pool * pool)
        )
        idx = grouped.argmax(axis=-1)
        pooled = np.take_along_axis(grouped, idx[..., None], axis=-1)[..., 0]
        cache.x_padded.append(xp)
        cache.relu_mask.append(mask)
        cache.pool_index.append(idx)
        cache.pool_in_shape.append(act.shape)
        feat = pooled

    flat = feat.reshape(n, -1)
    cache.fc_input = flat
    v = flat @ cache.weights64["fc_w"] + cache.weights64["fc_b"]
    if not arch.l2_normalize:
        cache.prenorm = v
        return v, cache
    norms = np.linalg.norm(v, axis=1)
    denoms = np.where(norms < NORM_GUARD, norms + NORM_GUARD, norms)
    z = v / denoms[:, None]
    cache.prenorm = v
    cache.norms = norms
    cache.denoms = denoms
    return z, cache


def backward(params: EncoderParams, cache: ForwardCache, grad_embeddings) -> dict[str, np.ndarray]:
    """Exact gradients of forward composed with the upstream gradient.

    Returns float64 gradient arrays shaped like the parameter tensors. The
    gradient with respect to the input image is not materialized.
    """
    arch = cache.arch
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if cache.prenorm is None or g.shape != cache.prenorm.shape:
        raise ShapeError(
            f"upstream gradient shape {g.shape} != embeddings shape "
            f"{None if cache.prenorm is None else cache.prenorm.shape}"
        )
    grads: dict[str, np.ndarray] = {}
    if arch.l2_normalize:
        v, norms, denoms = cache.prenorm, cache.norms, cache.denoms
        guard = norms < NORM_GUARD
        # d(v/d)/dv = I/d - v v^T / (d^2 n); with the guard active d is
        # treated as constant (subgradient of the clamped denominator).
        gv = np.einsum("nd,nd->n", g, v)
        dv = g / denoms[:, None]
        scale = np.where(guard, 0.0, gv / (denoms**2 * np.where(guard, 1.0, norms)))
        dv -= v * scale[:, None]
    else:
        dv = g

    grads["fc_w"] = cache.fc_input.T @ dv
    grads["fc_b"] = dv.sum(axis=0)
    dflat = dv @ cache.weights64["fc_w"].T

    n = dflat.shape[0]
    pool, k = arch.pool, arch.kernel
    pad = k // 2
    dfeat = dflat.reshape(n, arch.conv_channels[-1], arch.final_spatial, arch.final_spatial)
    for i in range(len(arch.conv_channels), 0, -1):
        xp = cache.x_padded[i - 1]
        mask = cache.relu_mask[i - 1]
        idx = cache.pool_index[i - 1]
        act_shape = cache.pool_in_shape[i - 1]
        _, f, h_out, w_out = act_shape
        nh, nw = h_out // pool, w_out // pool
        # un-pool: route gradient to the remembered argmax per window
        dgrouped = np.zeros((n, f, nh, nw, pool * pool), dtype=np.float64)
        np.put_along_axis(dgrouped, idx[..., None], dfeat[..., None], axis=-1)
        dact = (
            dgrouped.reshape(n, f, nh, nw, pool, pool)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(act_shape)
        )
        dpre = dact * mask
        w64 = cache.weights64[f"conv{i}_w"]
        windows = _conv_windows(xp, k, h_out, w_out)
        dpre_nhwf = dpre.transpose(0, 2, 3, 1)
        grads[f"conv{i}_w"] = np.tensordot(dpre_nhwf, windows, axes=([0, 1, 2], [0, 2, 3]))
        grads[f"conv{i}_b"] = dpre_nhwf.sum(axis=(0, 1, 2))
        if i > 1:
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    contrib = np.tensordot(dpre_nhwf, w64[:, :, ki, kj], axes=([3], [0]))
                    dxp[:, :, ki : ki + h_out, kj : kj + w_out] += contrib.transpose(0, 3, 1, 2)
            dfeat = dxp[:, :, pad:-pad, pad:-pad] if pad else dxp
    return grads


def embed_crops(params: EncoderParams, crops, chunk: int = 128) -> np.ndarray:
    """Embed many crops without keeping caches; returns (n, out_dim) float64."""
    outputs = []
    items = list(crops)
    for start in range(0, len(items), chunk):
        z, _ = forward(params, items[start : start + chunk])
        outputs.append(z)
    if not outputs:
        return np.zeros((0, params.arch.out_dim), dtype=np.float64)
    return np.concatenate(outputs, axis=0)


FORMAT_VERSION = 1


def save_weights(params: EncoderParams, path) -> None:
    """JSON header plus little-endian float32 tensor blocks."""
    names = sorted(params.tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": params.arch.describe(),
        "arch_fingerprint": params.arch.fingerprint,
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER_STRUCT.pack(len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())


def load_weights(path, arch: Architecture | None = None) -> EncoderParams:
    """Read a weight file; bit-exact inverse of save_weights.

    Raises IncompatibleModel when the stored fingerprint disagrees with the
    stored architecture (a tampered header) or with an explicitly expected
    architecture; raises FormatError on truncated or malformed files.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER_STRUCT.size:
        raise FormatError("file too short for a header")
    (header_len,) = _HEADER_STRUCT.unpack_from(data)
    if len(data) < _HEADER_STRUCT.size + header_len:
        raise FormatError("truncated header")
    try:
        header = json.loads(data[_HEADER_STRUCT.size : _HEADER_STRUCT.size + header_len])
        version = header["format_version"]
        file_arch = Architecture.from_description(header["architecture"])
        declared = header["arch_fingerprint"]
        tensor_list = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed weight header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if declared != file_arch.fingerprint:
        raise IncompatibleModel("architecture fingerprint mismatch in weight file")
    if arch is not None and arch.fingerprint != file_arch.fingerprint:
        raise IncompatibleModel("weight file was written for a different architecture")
    offset = _HEADER_STRUCT.size + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in tensor_list:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape))
        nbytes = count * 4
        if offset + nbytes > len(data):
            raise FormatError(f"truncated tensor block for {entry['name']}")
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = flat.reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise FormatError("trailing bytes after tensor blocks")
    try:
        return EncoderParams(file_arch, tensors)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"inconsistent tensor blocks: {exc}") from exc
