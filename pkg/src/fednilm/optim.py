"""Local update rules: plain SGD, Adam, and the per-round learning-rate decay."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, SpecHashMismatch
from .model import ParameterVector

SGD = "sgd"
ADAM = "adam"

STATE_MAGIC = b"FNLMOPT1"
_KIND_CODES = {SGD: 0, ADAM: 1}


@dataclass(frozen=True)
class OptimizerHyper:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    decay_gamma: float = 0.98

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps_stab > 0:
            raise ConfigError("eps_stab must be > 0")
        if not 0 < self.decay_gamma <= 1:
            raise ConfigError("decay_gamma must lie in (0, 1]")


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    hyper: OptimizerHyper = field(default_factory=OptimizerHyper)
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    @classmethod
    def fresh(cls, kind: str, hyper: OptimizerHyper, count: int, dtype=np.float32) -> "OptimizerState":
        if kind == ADAM:
            return cls(kind, hyper, 0, np.zeros(count, dtype=dtype), np.zeros(count, dtype=dtype))
        if kind == SGD:
            return cls(kind, hyper)
        raise ConfigError(f"unknown optimizer kind {kind!r}")

    def reset(self) -> "OptimizerState":
        count = 0 if self.m is None else self.m.shape[0]
        dtype = np.float32 if self.m is None else self.m.dtype
        return OptimizerState.fresh(self.kind, self.hyper, count, dtype)


def lr_schedule(round: int, hyper: OptimizerHyper) -> float:
    """``lr0 * decay_gamma ** round``; constant within a round."""
    if round < 0:
        raise ConfigError(f"round must be >= 0, got {round}")
    return float(hyper.lr0 * hyper.decay_gamma ** round)


def _check_pair(params: ParameterVector, grad: ParameterVector) -> None:
    if params.spec_hash != grad.spec_hash:
        raise SpecHashMismatch("gradient and parameters have different spec_hash")
    if params.count != grad.count:
        raise DimensionError(f"gradient count {grad.count} != parameter count {params.count}")


def sgd_step(params: ParameterVector, grad: ParameterVector, lr: float) -> ParameterVector:
    _check_pair(params, grad)
    if lr < 0 or not np.isfinite(lr):
        raise ConfigError(f"learning rate must be finite and non-negative, got {lr}")
    # lr == 0 is allowed so that "frozen" runs stay bitwise equal to their start
    if lr == 0:
        return params
    dt = params.dtype
    new = params.values - dt.type(lr) * grad.values.astype(dt, copy=False)
    return ParameterVector(new, params.spec_hash)


def adam_step(
    state: OptimizerState, params: ParameterVector, grad: ParameterVector, lr: float | None = None
) -> tuple[OptimizerState, ParameterVector]:
    """One bias-corrected Adam update.

    ``lr`` is the current scheduled rate; it defaults to ``hyper.lr0``.
    """
    if state.kind != ADAM:
        raise ConfigError(f"adam_step called with a {state.kind} state")
    _check_pair(params, grad)
    if state.m is None or state.m.shape[0] != params.count:
        raise DimensionError("optimizer moments do not match the parameter count")
    h = state.hyper
    lr = h.lr0 if lr is None else lr
    dt = params.dtype
    g = grad.values.astype(dt, copy=False)
    t = state.step_count + 1
    m = dt.type(h.beta1) * state.m + dt.type(1.0 - h.beta1) * g
    v = dt.type(h.beta2) * state.v + dt.type(1.0 - h.beta2) * (g * g)
    m_hat = m / dt.type(1.0 - h.beta1 ** t)
    v_hat = v / dt.type(1.0 - h.beta2 ** t)
    new = params.values - dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(h.eps_stab))
    return replace(state, step_count=t, m=m, v=v), ParameterVector(new, params.spec_hash)


def step(state: OptimizerState, params: ParameterVector, grad: ParameterVector, lr: float):
    if state.kind == SGD:
        return replace(state, step_count=state.step_count + 1), sgd_step(params, grad, lr)
    return adam_step(state, params, grad, lr)


def encode_state(state: OptimizerState) -> bytes:
    """Kind byte, step count, hyperparameters, then the moments as LE float32."""
    h = state.hyper
    count = 0 if state.m is None else state.m.shape[0]
    head = STATE_MAGIC + struct.pack(
        "<BQdddddQ",
        _KIND_CODES[state.kind],
        state.step_count,
        h.lr0,
        h.beta1,
        h.beta2,
        h.eps_stab,
        h.decay_gamma,
        count,
    )
    if state.kind == SGD:
        return head
    return head + np.asarray(state.m, "<f4").tobytes() + np.asarray(state.v, "<f4").tobytes()


def decode_state(buf: bytes) -> OptimizerState:
    if buf[:8] != STATE_MAGIC:
        raise DimensionError("not an optimizer state blob")
    kind_code, step_count, lr0, b1, b2, eps, gamma, count = struct.unpack_from("<BQdddddQ", buf, 8)
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise DimensionError(f"unknown optimizer kind code {kind_code}")
    hyper = OptimizerHyper(lr0, b1, b2, eps, gamma)
    off = 8 + struct.calcsize("<BQdddddQ")
    if kinds[kind_code] == SGD:
        return OptimizerState(SGD, hyper, step_count)
    if len(buf) != off + 8 * count:
        raise DimensionError("optimizer state length does not match its count")
    m = np.frombuffer(buf, "<f4", count, off).astype(np.float32)
    v = np.frombuffer(buf, "<f4", count, off + 4 * count).astype(np.float32)
    return OptimizerState(ADAM, hyper, step_count, m, v)
