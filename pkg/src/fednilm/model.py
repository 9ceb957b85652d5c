"""Seq2point network: a fixed stack of valid 1-D convolutions followed by dense
layers, mapping one window of aggregate load to a single midpoint value.

Everything here is a pure function over NumPy arrays.  Activations are kept in
``(batch, length, channels)`` layout so convolutions reduce to one matmul over
an im2col view.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArchitectureError, DimensionError, SpecHashMismatch

REGRESSION = "regression-linear"
CLASSIFICATION = "classification-sigmoid"
HEAD_MODES = (REGRESSION, CLASSIFICATION)
ACTIVATIONS = ("relu", "linear", "sigmoid")

PROB_CLIP = 1e-7

CHECKPOINT_MAGIC = b"FNLMPRM1"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class Conv1d:
    in_channels: int
    out_channels: int
    kernel_len: int
    stride: int = 1
    activation: str = "relu"

    def out_len(self, in_len: int) -> int:
        return (in_len - self.kernel_len) // self.stride + 1

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_len)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_len

    def to_dict(self) -> dict:
        return {
            "type": "conv1d",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_len": self.kernel_len,
            "stride": self.stride,
            "activation": self.activation,
        }


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    @property
    def fan_in(self) -> int:
        return self.in_dim

    def to_dict(self) -> dict:
        return {
            "type": "dense",
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "activation": self.activation,
        }


Layer = Union[Conv1d, Dense]


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type", None)
    try:
        if kind == "conv1d":
            return Conv1d(**d)
        if kind == "dense":
            return Dense(**d)
    except TypeError as exc:
        raise ArchitectureError(f"bad layer descriptor {d!r}: {exc}") from None
    raise ArchitectureError(f"unknown layer type {kind!r}")


@dataclass(frozen=True)
class ArchitectureSpec:
    window_len: int
    layers: tuple[Layer, ...]
    head_mode: str = REGRESSION
    spec_hash: int = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self._validate()
        object.__setattr__(self, "spec_hash", fnv1a64(self.canonical_json().encode("utf-8")))

    def _validate(self) -> None:
        W = self.window_len
        if not isinstance(W, (int, np.integer)) or W <= 0:
            raise ArchitectureError(f"window_len must be a positive integer, got {W!r}")
        if W % 2 == 0:
            raise ArchitectureError(f"window_len must be odd, got {W}")
        if self.head_mode not in HEAD_MODES:
            raise ArchitectureError(f"unknown head_mode {self.head_mode!r}")
        if not self.layers:
            raise ArchitectureError("architecture has no layers")

        length, channels = W, 1
        flat = None  # set once a dense layer has been seen
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ArchitectureError(f"layer {i}: unknown activation {layer.activation!r}")
            if isinstance(layer, Conv1d):
                if flat is not None:
                    raise ArchitectureError(f"layer {i}: conv1d after dense is unsupported")
                if min(layer.in_channels, layer.out_channels, layer.kernel_len, layer.stride) < 1:
                    raise ArchitectureError(f"layer {i}: non-positive conv dimension")
                if layer.in_channels != channels:
                    raise ArchitectureError(
                        f"layer {i}: in_channels {layer.in_channels} != previous output {channels}"
                    )
                if layer.kernel_len > length:
                    raise ArchitectureError(
                        f"layer {i}: kernel {layer.kernel_len} exceeds input length {length}"
                    )
                length, channels = layer.out_len(length), layer.out_channels
            elif isinstance(layer, Dense):
                if flat is None:
                    flat = length * channels
                if min(layer.in_dim, layer.out_dim) < 1:
                    raise ArchitectureError(f"layer {i}: non-positive dense dimension")
                if layer.in_dim != flat:
                    raise ArchitectureError(f"layer {i}: in_dim {layer.in_dim} != previous output {flat}")
                flat = layer.out_dim
            else:
                raise ArchitectureError(f"layer {i}: unsupported layer {layer!r}")

        out = flat if flat is not None else length * channels
        if out != 1:
            raise ArchitectureError(f"final output dimension must be 1, got {out}")
        last = self.layers[-1]
        want = "linear" if self.head_mode == REGRESSION else "sigmoid"
        if last.activation != want:
            raise ArchitectureError(
                f"head_mode {self.head_mode} requires a {want} final activation, got {last.activation}"
            )
        for i, layer in enumerate(self.layers[:-1]):
            if layer.activation == "sigmoid":
                raise ArchitectureError(f"layer {i}: sigmoid is only allowed on the output layer")

    def to_dict(self) -> dict:
        return {
            "window_len": int(self.window_len),
            "layers": [layer.to_dict() for layer in self.layers],
            "head_mode": self.head_mode,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        unknown = set(d) - {"window_len", "layers", "head_mode", "spec_hash"}
        if unknown:
            raise ArchitectureError(f"unknown architecture keys: {sorted(unknown)}")
        spec = cls(
            window_len=d["window_len"],
            layers=tuple(layer_from_dict(x) for x in d["layers"]),
            head_mode=d.get("head_mode", REGRESSION),
        )
        if "spec_hash" in d and int(d["spec_hash"]) != spec.spec_hash:
            raise SpecHashMismatch("stored spec_hash does not match canonical JSON")
        return spec

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(l.weight_shape)) + l.weight_shape[0] for l in self.layers)

    def with_head(self, head_mode: str) -> "ArchitectureSpec":
        """Same trunk with the output activation switched to match ``head_mode``."""
        act = "linear" if head_mode == REGRESSION else "sigmoid"
        last = self.layers[-1]
        if isinstance(last, Dense):
            last = Dense(last.in_dim, last.out_dim, act)
        else:
            last = Conv1d(last.in_channels, last.out_channels, last.kernel_len, last.stride, act)
        return ArchitectureSpec(self.window_len, self.layers[:-1] + (last,), head_mode)


def default_architecture(W: int, head_mode: str = REGRESSION) -> ArchitectureSpec:
    """The canonical seq2point stack for a window of ``W`` samples.

    Five ReLU convolutions (30x10, 30x8, 40x6, 50x5, 50x5, stride 1) then a
    1024-unit dense layer and the single-unit output head.
    """
    if W % 2 == 0:
        raise ArchitectureError(f"window_len must be odd, got {W}")
    if W < 31:
        raise ArchitectureError(f"window_len must be >= 31 for the default stack, got {W}")
    convs = [(1, 30, 10), (30, 30, 8), (30, 40, 6), (40, 50, 5), (50, 50, 5)]
    layers: list[Layer] = [Conv1d(i, o, k) for i, o, k in convs]
    length = W
    for _, _, k in convs:
        length = length - k + 1
    head = "linear" if head_mode == REGRESSION else "sigmoid"
    layers += [Dense(50 * length, 1024, "relu"), Dense(1024, 1, head)]
    return ArchitectureSpec(W, tuple(layers), head_mode)


def small_architecture(W: int, head_mode: str = REGRESSION) -> ArchitectureSpec:
    """A narrow seq2point-shaped stack used by the desk-scale presets."""
    layers: list[Layer] = [Conv1d(1, 8, 9, 2), Conv1d(8, 8, 5, 1)]
    length = W
    for l in layers:
        length = l.out_len(length)
    head = "linear" if head_mode == REGRESSION else "sigmoid"
    layers += [Dense(8 * length, 32, "relu"), Dense(32, 1, head)]
    return ArchitectureSpec(W, tuple(layers), head_mode)


@dataclass(frozen=True)
class ParameterVector:
    values: np.ndarray
    spec_hash: int

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 1 or values.dtype not in (np.float32, np.float64):
            raise DimensionError("parameter values must be a flat float32/float64 array")
        if values.flags.writeable:
            values = values.copy()
            values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return int(self.values.shape[0])

    @property
    def dtype(self):
        return self.values.dtype

    def digest(self) -> int:
        from .fedavg import params_digest

        return params_digest(self)


def check_params(spec: ArchitectureSpec, params: ParameterVector) -> None:
    if params.spec_hash != spec.spec_hash:
        raise SpecHashMismatch(
            f"parameter spec_hash {params.spec_hash:#018x} != architecture {spec.spec_hash:#018x}"
        )
    if params.count != spec.param_count:
        raise DimensionError(f"parameter count {params.count} != architecture {spec.param_count}")


def unflatten(spec: ArchitectureSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(weight, bias)`` views (weights first)."""
    out, pos = [], 0
    for layer in spec.layers:
        shape = layer.weight_shape
        n_w = int(np.prod(shape))
        w = flat[pos : pos + n_w].reshape(shape)
        pos += n_w
        b = flat[pos : pos + shape[0]]
        pos += shape[0]
        out.append((w, b))
    if pos != flat.shape[0]:
        raise DimensionError(f"flat vector has {flat.shape[0]} entries, architecture needs {pos}")
    return out


def flatten(tensors: Sequence[tuple[np.ndarray, np.ndarray]], dtype=None) -> np.ndarray:
    parts = []
    for w, b in tensors:
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    flat = np.concatenate(parts)
    return flat.astype(dtype) if dtype is not None else flat


def init_params(spec: ArchitectureSpec, seed: int, dtype=np.float32) -> ParameterVector:
    """Uniform(-a, a) weights with ``a = sqrt(1/fan_in)`` per layer, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = []
    for layer in spec.layers:
        a = np.sqrt(1.0 / layer.fan_in)
        w = rng.uniform(-a, a, size=layer.weight_shape)
        b = np.zeros(layer.weight_shape[0])
        tensors.append((w, b))
    return ParameterVector(flatten(tensors, dtype), spec.spec_hash)


def zeros_params(spec: ArchitectureSpec, dtype=np.float32) -> ParameterVector:
    return ParameterVector(np.zeros(spec.param_count, dtype=dtype), spec.spec_hash)


# --- forward / backward --------------------------------------------------------


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _conv_cols(x: np.ndarray, layer: Conv1d) -> np.ndarray:
    # x: (B, L, C) -> (B, L_out, C * k)
    windows = sliding_window_view(x, layer.kernel_len, axis=1)[:, :: layer.stride]
    B, L_out = windows.shape[:2]
    return windows.reshape(B, L_out, layer.in_channels * layer.kernel_len)


def _check_inputs(spec: ArchitectureSpec, inputs) -> np.ndarray:
    x = np.asarray(inputs)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.window_len:
        raise DimensionError(f"inputs must have shape (N, {spec.window_len}), got {np.shape(inputs)}")
    return x


def _run(spec: ArchitectureSpec, params: ParameterVector, x: np.ndarray, keep: bool):
    tensors = unflatten(spec, params.values)
    h = x.astype(params.dtype, copy=False)[:, :, None]  # (B, W, 1)
    cache = []
    for layer, (w, b) in zip(spec.layers, tensors):
        if isinstance(layer, Conv1d):
            cols = _conv_cols(h, layer)
            z = cols @ w.reshape(layer.out_channels, -1).T + b
            if keep:
                cache.append((cols, z, h.shape))
        else:
            if h.ndim == 3:
                h = h.reshape(h.shape[0], -1)
            z = h @ w.T + b
            if keep:
                cache.append((h, z, h.shape))
        h = _activate(z, layer.activation)
    out = h.reshape(h.shape[0])
    return out, cache, tensors


def forward(spec: ArchitectureSpec, params: ParameterVector, inputs) -> np.ndarray:
    """Predict one midpoint value per input row.

    Classification heads return probabilities clipped to ``[1e-7, 1 - 1e-7]``.
    """
    check_params(spec, params)
    x = _check_inputs(spec, inputs)
    out, _, _ = _run(spec, params, x, keep=False)
    if spec.head_mode == CLASSIFICATION:
        out = np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)
    return out


def predict(spec: ArchitectureSpec, params: ParameterVector, inputs, chunk: int = 4096) -> np.ndarray:
    x = _check_inputs(spec, inputs)
    if x.shape[0] <= chunk:
        return forward(spec, params, x)
    return np.concatenate([forward(spec, params, x[i : i + chunk]) for i in range(0, x.shape[0], chunk)])


def loss(predictions, targets, mode: str) -> float:
    """Mean squared error (regression) or binary cross-entropy (classification)."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"predictions {p.shape} and targets {t.shape} differ in length")
    if p.size == 0:
        raise DimensionError("empty batch")
    if mode == REGRESSION:
        return float(np.mean((p - t) ** 2))
    if mode == CLASSIFICATION:
        p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
        return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))
    raise ArchitectureError(f"unknown head mode {mode!r}")


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if np.ndim(self.inputs) != 2 or np.ndim(self.targets) != 1:
            raise DimensionError("batch inputs must be 2-D and targets 1-D")
        if np.shape(self.inputs)[0] != np.shape(self.targets)[0]:
            raise DimensionError("batch inputs and targets differ in row count")


def backward(spec: ArchitectureSpec, params: ParameterVector, batch: Batch, mode: str | None = None):
    """Loss and analytic gradient of the mean batch loss.

    Returns ``(loss, gradient)`` with the gradient packed as a ParameterVector
    of the same dtype and spec_hash as ``params``.
    """
    mode = mode or spec.head_mode
    if mode != spec.head_mode:
        raise ArchitectureError(f"mode {mode} does not match architecture head {spec.head_mode}")
    check_params(spec, params)
    x = _check_inputs(spec, batch.inputs)
    if x.shape[0] == 0:
        raise DimensionError("empty batch")
    dtype = params.dtype
    t = np.asarray(batch.targets).astype(dtype, copy=False)
    out, cache, tensors = _run(spec, params, x, keep=True)
    B = x.shape[0]

    if mode == REGRESSION:
        resid = out - t
        value = float(np.mean(resid.astype(np.float64) ** 2))
        delta = (2.0 / B) * resid  # d loss / d z, linear head
    else:
        p = np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)
        value = float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))
        inside = (out > PROB_CLIP) & (out < 1.0 - PROB_CLIP)
        delta = np.where(inside, (out - t) / B, 0.0).astype(dtype)

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(spec.layers)  # type: ignore[list-item]
    dz = delta.reshape(B, 1)
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        w, _ = tensors[idx]
        inp, z, in_shape = cache[idx]
        if idx != len(spec.layers) - 1 and layer.activation == "relu":
            dz = dz * (z > 0)
        if isinstance(layer, Dense):
            gw = dz.T @ inp
            gb = dz.sum(axis=0)
            grads[idx] = (gw, gb)
            if idx == 0:
                break
            dh = dz @ w
            if isinstance(spec.layers[idx - 1], Conv1d):
                prev_z = cache[idx - 1][1]
                dh = dh.reshape(prev_z.shape)
            dz = dh
        else:
            O = layer.out_channels
            dz2 = dz.reshape(-1, O)
            gw = (dz2.T @ inp.reshape(dz2.shape[0], -1)).reshape(layer.weight_shape)
            gb = dz2.sum(axis=0)
            grads[idx] = (gw, gb)
            if idx == 0:
                break
            Bn, L_in, C = in_shape
            L_out = dz.shape[1]
            dcols = (dz2 @ w.reshape(O, -1)).reshape(Bn, L_out, C, layer.kernel_len)
            dh = np.zeros(in_shape, dtype=dtype)
            span = layer.stride * (L_out - 1) + 1
            for j in range(layer.kernel_len):
                dh[:, j : j + span : layer.stride, :] += dcols[:, :, :, j]
            dz = dh

    gvec = flatten(grads, dtype)
    return value, ParameterVector(gvec, params.spec_hash)


# --- checkpoints ------------------------------------------------------------------


def encode_params_body(params: ParameterVector) -> bytes:
    """``spec_hash | count | float32 LE values`` (the checkpoint body after its magic)."""
    vals = np.asarray(params.values, dtype="<f4")
    return struct.pack("<QQ", params.spec_hash, params.count) + vals.tobytes()


def decode_params_body(buf: bytes, offset: int = 0) -> tuple[ParameterVector, int]:
    if len(buf) - offset < 16:
        raise DimensionError("parameter body shorter than its header")
    spec_hash, count = struct.unpack_from("<QQ", buf, offset)
    start = offset + 16
    end = start + 4 * count
    if end > len(buf):
        raise DimensionError(f"parameter body declares {count} floats but only {len(buf) - start} bytes follow")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=start).astype(np.float32)
    return ParameterVector(values, spec_hash), end


def save_checkpoint(path, spec: ArchitectureSpec, params: ParameterVector) -> Path:
    check_params(spec, params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + encode_params_body(params))
    path.with_suffix(path.suffix + ".json").write_text(spec.canonical_json(), encoding="utf-8")
    return path


def load_checkpoint(path, spec: ArchitectureSpec | None = None) -> tuple[ArchitectureSpec, ParameterVector]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DimensionError(f"{path}: not a parameter checkpoint")
    params, end = decode_params_body(raw, 8)
    if end != len(raw):
        raise DimensionError(f"{path}: {len(raw) - end} trailing bytes")
    if spec is None:
        spec = ArchitectureSpec.from_dict(json.loads(path.with_suffix(path.suffix + ".json").read_text()))
    check_params(spec, params)
    return spec, params
