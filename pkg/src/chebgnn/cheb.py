"""Chebyshev polynomial filters on a scaled Laplacian.

A filter with coefficients ``theta[0..k]`` maps a signal ``h`` to
``sum_i theta[i] * T_i(L) h`` where the ``T_i(L) h`` are generated by the
three-term recursion ``T_0 = h``, ``T_1 = L h``, ``T_i = 2 L T_{i-1} - T_{i-2}``.
Only ``k`` sparse products are needed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .graph import GraphError, ScaledLaplacian, spmm


def _operator(lap):
    return lap.matrix if isinstance(lap, ScaledLaplacian) else lap


def chebyshev_basis(lap, x: np.ndarray, order: int) -> List[np.ndarray]:
    """Return ``[T_0(L) x, ..., T_order(L) x]``."""
    m = _operator(lap)
    if x.shape[0] != m.shape[0]:
        raise GraphError(f"dimension mismatch: operator {m.shape} vs signal {x.shape}")
    terms = [x]
    if order >= 1:
        terms.append(spmm(m, x))
    for _ in range(2, order + 1):
        terms.append(2.0 * spmm(m, terms[-1]) - terms[-2])
    return terms


def chebyshev_adjoint(lap, grads: Sequence[np.ndarray]) -> np.ndarray:
    """Pull gradients w.r.t. each ``T_i(L) x`` back to ``x``.

    Reverse sweep of the recursion; ``L`` must be symmetric.
    """
    m = _operator(lap)
    g = [np.array(gi, dtype=np.float64, copy=True) for gi in grads]
    for i in range(len(g) - 1, 1, -1):
        g[i - 1] += 2.0 * spmm(m, g[i])
        g[i - 2] -= g[i]
    if len(g) > 1:
        g[0] += spmm(m, g[1])
    return g[0]


@dataclass(eq=False)
class ChebTape:
    """Polynomial terms retained by a forward pass for the backward pass."""

    terms: List[np.ndarray]
    laplacian: object
    theta: np.ndarray


def _coeffs(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).ravel()
    if theta.size < 1:
        raise ValueError("need at least one Chebyshev coefficient")
    if not np.all(np.isfinite(theta)):
        raise ValueError("Chebyshev coefficients must be finite")
    return theta


def cheb_apply(lap, theta, h: np.ndarray):
    """Apply the filter ``sum_i theta[i] T_i(L)`` to ``h``; returns ``(out, tape)``."""
    theta = _coeffs(theta)
    h = np.asarray(h, dtype=np.float64)
    terms = chebyshev_basis(lap, h, theta.size - 1)
    out = np.zeros_like(h)
    for c, t in zip(theta, terms):
        out += c * t
    return out, ChebTape(terms, lap, theta.copy())


def cheb_backward(tape: ChebTape, lap, theta, grad_out: np.ndarray):
    """Gradients of ``<grad_out, cheb_apply(lap, theta, h)>`` w.r.t. ``theta`` and ``h``."""
    theta = _coeffs(theta)
    if tape.laplacian is not lap or not np.array_equal(tape.theta, theta):
        raise ValueError("tape does not belong to this (laplacian, theta) pair")
    if grad_out.shape != tape.terms[0].shape:
        raise GraphError(f"grad_out shape {grad_out.shape} != output shape {tape.terms[0].shape}")
    grad_theta = np.array([np.vdot(grad_out, t) for t in tape.terms])
    grad_h = chebyshev_adjoint(lap, [c * grad_out for c in theta])
    return grad_theta, grad_h


def chebyshev_scalar(x: np.ndarray, order: int) -> np.ndarray:
    """``T_0(x) .. T_order(x)`` stacked along a new first axis."""
    x = np.asarray(x, dtype=np.float64)
    out = [np.ones_like(x)]
    if order >= 1:
        out.append(x.copy())
    for _ in range(2, order + 1):
        out.append(2.0 * x * out[-1] - out[-2])
    return np.stack(out)


def dense_spectral_oracle(lap_dense: np.ndarray, theta, h: np.ndarray) -> np.ndarray:
    """Evaluate the filter in the eigenbasis of a dense symmetric operator.

    Reference implementation for tests; cost is cubic in ``n``.
    """
    a = np.asarray(lap_dense, dtype=np.float64)
    if not np.allclose(a, a.T, rtol=0, atol=1e-12):
        raise np.linalg.LinAlgError("operator is not symmetric")
    theta = _coeffs(theta)
    lam, u = np.linalg.eigh(a)
    response = theta @ chebyshev_scalar(lam, theta.size - 1)
    h = np.asarray(h, dtype=np.float64)
    flat = h.reshape(len(a), -1)
    return (u @ (response[:, None] * (u.T @ flat))).reshape(h.shape)
