"""Selective state space scan with zero-order-hold discretization.

The state matrix is diagonal per channel, ``A = -exp(A_log)`` with shape
``(D, N)``.  For input ``x`` of shape ``(batch, L, D)`` the per-step
quantities are

    delta_t = softplus(x_t W_delta + b_delta)          (batch, L, D)
    B_t = x_t W_B,  C_t = x_t W_C                      (batch, L, N)
    A_bar = exp(delta A)
    B_bar = (delta A)^-1 (exp(delta A) - 1) delta B
    h_t = A_bar_t * h_{t-1} + B_bar_t * x_t,   h_0 = 0
    y_t = sum_n C_t[n] h_t[:, n]

Discretization and recurrence are fused into one differentiable op,
:func:`selective_scan`, whose adjoint runs the recurrence in reverse.
"""

from __future__ import annotations

import numpy as np

from cagmamba import engine
from cagmamba.engine import Tensor
from cagmamba.layers import Module

SMALL_ARG = 1e-8


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the limit 1 at z = 0."""
    small = np.abs(z) < SMALL_ARG
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def _dphi(z: np.ndarray) -> np.ndarray:
    """Derivative of :func:`_phi`; Taylor series near zero avoids cancellation."""
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    return np.where(small, series, exact)


def discretize(A, B, delta, exact: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal system.

    Arguments broadcast against each other.  With ``exact=False`` the common
    simplification ``B_bar = delta * B`` is used instead.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("discretize: step size delta must be positive")
    dA = delta * A
    A_bar = np.exp(dA)
    B_bar = (_phi(dA) if exact else 1.0) * delta * B
    return A_bar, B_bar


def _recurrence_sequential(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h_t = a_t h_{t-1} + u_t along axis 1, h_0 = 0."""
    h = np.empty_like(u)
    prev = np.zeros_like(u[:, 0])
    for t in range(u.shape[1]):
        prev = a[:, t] * prev + u[:, t]
        h[:, t] = prev
    return h


def _recurrence_parallel(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Same recurrence as an inclusive Hillis-Steele scan over affine maps.

    Pairs combine as (a1, u1) then (a2, u2) -> (a2 a1, a2 u1 + u2); after
    ceil(log2 L) doubling rounds every prefix has been folded.
    """
    a = a.copy()
    h = u.copy()
    L = u.shape[1]
    step = 1
    while step < L:
        a_prev = a[:, :-step]
        h_prev = h[:, :-step]
        h_new = h.copy()
        a_new = a.copy()
        h_new[:, step:] = a[:, step:] * h_prev + h[:, step:]
        a_new[:, step:] = a[:, step:] * a_prev
        a, h = a_new, h_new
        step *= 2
    return h


RECURRENCES = {"sequential": _recurrence_sequential, "parallel": _recurrence_parallel}


def selective_scan(
    x,
    delta,
    A,
    B,
    C,
    exact: bool = True,
    method: str = "sequential",
) -> Tensor:
    """Fused discretize-and-scan.

    Shapes: ``x, delta`` (batch, L, D); ``A`` (D, N); ``B, C`` (batch, L, N).
    Returns ``y`` with shape (batch, L, D).
    """
    x, delta, A, B, C = (engine.as_tensor(t) for t in (x, delta, A, B, C))
    if x.ndim != 3 or delta.shape != x.shape:
        raise engine.ShapeError(f"selective_scan: incompatible shapes {x.shape} and {delta.shape}")
    bsz, L, D = x.shape
    if A.ndim != 2 or A.shape[0] != D:
        raise engine.ShapeError(f"selective_scan: incompatible shapes {x.shape} and {A.shape}")
    N = A.shape[1]
    for t in (B, C):
        if t.shape != (bsz, L, N):
            raise engine.ShapeError(f"selective_scan: incompatible shapes {x.shape} and {t.shape}")
    if method not in RECURRENCES:
        raise ValueError(f"selective_scan: unknown method {method!r}")

    d4 = delta.data[..., None]  # (b, L, D, 1)
    dA = d4 * A.data  # (b, L, D, N)
    a_bar = np.exp(dA)
    phi = _phi(dA) if exact else None
    Bx = B.data[:, :, None, :]
    b_bar = (phi * d4 * Bx) if exact else d4 * Bx
    xs = x.data[..., None]
    u = b_bar * xs
    h = RECURRENCES[method](a_bar, u)
    Cx = C.data[:, :, None, :]
    y = np.einsum("bldn,bln->bld", h, C.data)
    # state update (a*h + u) and readout (C . h) are one MAC each per (d, n)
    engine.add_macs(2 * bsz * L * D * N)

    def bw(gy):
        gh_direct = gy[..., None] * Cx  # (b, L, D, N)
        gh = np.empty_like(h)
        carry = np.zeros_like(h[:, 0])
        for t in range(L - 1, -1, -1):
            carry = gh_direct[:, t] + carry
            gh[:, t] = carry
            carry = a_bar[:, t] * carry
        gC = np.einsum("bld,bldn->bln", gy, h)
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        g_abar = gh * h_prev
        gx = np.sum(gh * b_bar, axis=-1)
        g_bbar = gh * xs
        # dA path through exp
        g_dA = g_abar * a_bar
        if exact:
            dphi = _dphi(dA)
            g_dA = g_dA + g_bbar * d4 * Bx * dphi
            g_delta_direct = g_bbar * phi * Bx
            gB = np.sum(g_bbar * phi * d4, axis=2)
        else:
            g_delta_direct = g_bbar * Bx
            gB = np.sum(g_bbar * d4, axis=2)
        gdelta = np.sum(g_dA * A.data + g_delta_direct, axis=-1)
        gA = np.sum(g_dA * d4, axis=(0, 1))
        return gx, gdelta, gA, gB, gC

    return Tensor._make(y, (x, delta, A, B, C), bw, "selective_scan")


class SsmParams(Module):
    """Parameters of one selective SSM over ``D`` channels with state size ``N``.

    ``A_log`` is initialised so that row ``d`` of ``A`` is ``-1, ..., -N``.
    ``B`` and ``C`` projections carry no bias; the step-size projection does,
    and its bias is set so that initial step sizes are log-uniform in
    ``dt_range``.
    """

    def __init__(
        self,
        D: int,
        N: int = 16,
        rng: np.random.Generator | None = None,
        exact: bool = True,
        dt_range: tuple[float, float] = (1e-2, 1.0),
        skip: bool = False,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(D)
        self.D, self.N, self.exact = D, N, exact
        self.A_log = engine.parameter(np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1))))
        self.W_B = engine.parameter(rng.uniform(-bound, bound, (D, N)))
        self.W_C = engine.parameter(rng.uniform(-bound, bound, (D, N)))
        self.W_delta = engine.parameter(rng.uniform(-bound, bound, (D, D)))
        lo, hi = np.log(dt_range[0]), np.log(dt_range[1])
        dt = np.exp(rng.uniform(lo, hi, D))
        self.b_delta = engine.parameter(dt + np.log(-np.expm1(-dt)))  # softplus^-1
        self.D_skip = engine.parameter(np.ones(D)) if skip else None

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)

    def __call__(self, x, method: str = "sequential") -> Tensor:
        x = engine.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.D:
            raise engine.ShapeError(f"ssm: incompatible shapes {x.shape} and ({self.D},)")
        delta = engine.softplus(engine.linear(x, self.W_delta, self.b_delta))
        B = engine.matmul(x, self.W_B)
        C = engine.matmul(x, self.W_C)
        A = -engine.exp(self.A_log)
        y = selective_scan(x, delta, A, B, C, exact=self.exact, method=method)
        return y if self.D_skip is None else y + x * self.D_skip


def scan_sequential(params: SsmParams, Z) -> Tensor:
    return params(Z, method="sequential")


def scan_parallel(params: SsmParams, Z) -> Tensor:
    return params(Z, method="parallel")


def ssm_params(D: int, N: int, skip: bool = False) -> int:
    """A_log, W_B, W_C are D x N; the step projection is D x D plus bias."""
    return 3 * D * N + D * D + D + (D if skip else 0)


def scan_macs(batch: int, L: int, D: int, N: int) -> int:
    """MACs of one :class:`SsmParams` forward: projections plus scan."""
    return batch * L * (D * D + 2 * D * N) + 2 * batch * L * D * N
