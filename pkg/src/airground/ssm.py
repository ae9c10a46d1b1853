"""Linear state-space kernels: zero-order-hold discretization, recurrent scan
and the equivalent causal convolution kernel.

The continuous system is ``h'(t) = A h(t) + B x(t)``, ``y(t) = C h(t)`` (no
feed-through term).  After discretization with step ``delta`` the recurrence is
``h_t = A_bar h_{t-1} + B_bar x_t`` and ``y_t = C h_t``.  For a time-invariant
system the same map can be written as a convolution with taps
``(C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import InvalidParameterError

# below this norm of delta*A the phi_1 Taylor series is used directly
PHI1_SERIES_THRESHOLD = 1e-4


def _as_matrix(value, shape_hint: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError(f"{shape_hint} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ContinuousSsm:
    a_matrix: np.ndarray
    b_matrix: np.ndarray
    c_matrix: np.ndarray

    def __post_init__(self):
        a = _as_matrix(self.a_matrix, "A")
        b = _as_matrix(self.b_matrix, "B")
        c = _as_matrix(self.c_matrix, "C")
        n = a.shape[0]
        if b.shape == (1, n) and n > 1:
            b = b.T
        if a.shape != (n, n) or b.shape != (n, 1) or c.shape != (1, n):
            raise InvalidParameterError(
                f"inconsistent shapes A{a.shape} B{b.shape} C{c.shape}")
        for name, arr in (("a_matrix", a), ("b_matrix", b), ("c_matrix", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def state_dim(self) -> int:
        return self.a_matrix.shape[0]


@dataclass(frozen=True)
class DiscreteSsm:
    a_bar: np.ndarray
    b_bar: np.ndarray
    c_matrix: np.ndarray
    delta: float
    source: Optional[ContinuousSsm] = None

    @property
    def state_dim(self) -> int:
        return self.a_bar.shape[0]


@dataclass(frozen=True)
class ConvKernel:
    taps: np.ndarray

    @property
    def length(self) -> int:
        return len(self.taps)


def phi1(x: np.ndarray) -> np.ndarray:
    """``x^{-1} (exp(x) - I)``, defined for singular ``x`` as well.

    Small arguments use the truncated Taylor series; otherwise the top-right
    block of ``expm([[x, I], [0, 0]])`` gives the value without inverting ``x``.
    """
    n = x.shape[0]
    eye = np.eye(n)
    if np.linalg.norm(x, 1) < PHI1_SERIES_THRESHOLD:
        x2 = x @ x
        return eye + x / 2.0 + x2 / 6.0 + x2 @ x / 24.0
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = x
    aug[:n, n:] = eye
    return expm(aug)[:n, n:]


def discretize(sys: ContinuousSsm, delta: float) -> DiscreteSsm:
    """Zero-order-hold discretization of ``sys`` with step ``delta``."""
    delta = float(delta)
    if not np.isfinite(delta) or delta <= 0.0:
        raise InvalidParameterError(f"delta must be positive and finite, got {delta}")
    da = delta * sys.a_matrix
    n = sys.state_dim
    if n == 1:
        a_bar = np.exp(da)
    elif np.count_nonzero(da - np.diag(np.diagonal(da))) == 0:
        a_bar = np.diag(np.exp(np.diagonal(da)))
    else:
        a_bar = expm(da)
    b_bar = phi1(da) @ (delta * sys.b_matrix)
    return DiscreteSsm(a_bar=a_bar, b_bar=b_bar, c_matrix=sys.c_matrix,
                       delta=delta, source=sys)


def scan(sys: DiscreteSsm, inputs: Sequence[float], h0=None,
         deltas: Optional[Sequence[float]] = None) -> np.ndarray:
    """Run the recurrence over ``inputs`` and return ``y_t = C h_t``.

    ``deltas`` gives a per-step time scale (selective mode); each step is then
    rediscretized from the continuous source system.
    """
    x = np.asarray(inputs, dtype=np.float64).ravel()
    if x.size < 1:
        raise InvalidParameterError("scan needs at least one input sample")
    n = sys.state_dim
    h = np.zeros(n) if h0 is None else np.asarray(h0, dtype=np.float64).reshape(n).copy()
    c = sys.c_matrix[0]
    y = np.empty(x.size)
    if deltas is None:
        a_bar, b_bar = sys.a_bar, sys.b_bar[:, 0]
        for t, xt in enumerate(x):
            h = a_bar @ h + b_bar * xt
            y[t] = c @ h
        return y

    deltas = np.asarray(deltas, dtype=np.float64).ravel()
    if deltas.size != x.size:
        raise InvalidParameterError(
            f"{deltas.size} step overrides for {x.size} inputs")
    if sys.source is None:
        raise InvalidParameterError("per-step deltas need the continuous source system")
    for t, (xt, dt) in enumerate(zip(x, deltas)):
        step = discretize(sys.source, dt)
        h = step.a_bar @ h + step.b_bar[:, 0] * xt
        y[t] = c @ h
    return y


def conv_kernel(sys: DiscreteSsm, length: int) -> ConvKernel:
    """Taps ``C A_bar^k B_bar`` for ``k = 0..length-1`` (fixed delta only)."""
    length = int(length)
    if length < 1:
        raise InvalidParameterError("kernel length must be >= 1")
    taps = np.empty(length)
    v = sys.b_bar[:, 0].copy()
    c = sys.c_matrix[0]
    for k in range(length):
        taps[k] = c @ v
        v = sys.a_bar @ v
    return ConvKernel(taps=taps)


def conv_apply(kernel: ConvKernel, inputs: Sequence[float]) -> np.ndarray:
    """Causal convolution ``y_t = sum_{k<=t} taps[k] x[t-k]``."""
    x = np.asarray(inputs, dtype=np.float64).ravel()
    if x.size != kernel.length:
        raise InvalidParameterError(
            f"kernel length {kernel.length} != input length {x.size}")
    return np.convolve(x, kernel.taps)[: x.size]
