"""Small dense LMI solver: log-det barrier with damped Newton steps.

An LMI block is an affine symmetric matrix function
``F(z) = F0 + sum_i z_i F_i``, stored as an array of shape ``(d + 1, k, k)``
with ``F0`` first. Problem sizes here are a few dozen variables and blocks of
order ~20, so every Newton system is assembled densely.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg


class SdpFailure(RuntimeError):
    pass


def evaluate(block: np.ndarray, z: np.ndarray) -> np.ndarray:
    return block[0] + np.tensordot(z, block[1:], axes=1)


def min_eig(blocks, z) -> float:
    return min(np.linalg.eigvalsh(evaluate(B, z)).min() for B in blocks)


def _chol(F):
    try:
        return linalg.cholesky(F, lower=True)
    except linalg.LinAlgError:
        return None


def _barrier(blocks, weights, c, t, z):
    """Value, gradient and Hessian of ``t c^T z - sum_k w_k logdet F_k(z)``; None if infeasible."""
    d = z.size
    val = t * (c @ z)
    g = t * c.copy()
    H = np.zeros((d, d))
    for B, w in zip(blocks, weights):
        L = _chol(evaluate(B, z))
        if L is None:
            return None
        val -= w * 2.0 * np.log(np.diag(L)).sum()
        Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
        Gh = Linv @ B[1:] @ Linv.T
        g -= w * np.trace(Gh, axis1=1, axis2=2)
        flat = Gh.reshape(d, -1)
        H += w * flat @ flat.T
    return val, g, H


def _newton(blocks, weights, c, t, z, max_iter=100, tol=1e-10):
    cur = _barrier(blocks, weights, c, t, z)
    if cur is None:
        raise SdpFailure("Newton iterate left the feasible region")
    for _ in range(max_iter):
        val, g, H = cur
        H = H + 1e-14 * np.trace(H) / H.shape[0] * np.eye(H.shape[0])
        try:
            dz = -linalg.solve(H, g, assume_a="pos")
        except linalg.LinAlgError:
            dz = -np.linalg.lstsq(H, g, rcond=None)[0]
        dec2 = -(g @ dz)
        if dec2 / 2.0 <= tol:
            break
        step = 1.0
        while step > 1e-12:
            cand = z + step * dz
            nxt = _barrier(blocks, weights, c, t, cand)
            if nxt is not None and nxt[0] <= val - 0.25 * step * dec2:
                z, cur = cand, nxt
                break
            step *= 0.5
        else:
            break
    return z


def find_feasible(blocks, z0, margin: float, t0: float = 1.0, mu: float = 10.0,
                  max_outer: int = 60, s_cap: float = None):
    """Phase I: maximize ``s`` with ``F_k(z) >= s I``; stops once ``s > 2 * margin``.

    Returns ``(z, s)``; the caller decides whether ``s`` is good enough.
    ``s_cap`` bounds ``s`` from above to keep the problem bounded.
    """
    d = z0.size
    aug = []
    for B in blocks:
        k = B.shape[1]
        A = np.zeros((d + 2, k, k))
        A[: d + 1] = B
        A[d + 1] = -np.eye(k)
        aug.append(A)
    s0 = min_eig(blocks, z0) - 1.0
    if s_cap is not None:
        cap = np.zeros((d + 2, 1, 1))
        cap[0, 0, 0] = s_cap
        cap[d + 1, 0, 0] = -1.0
        aug.append(cap)
        s0 = min(s0, s_cap - 1.0)
    x = np.append(z0, s0)
    c = np.zeros(d + 1)
    c[-1] = -1.0
    weights = [1.0] * len(aug)
    t = t0
    for _ in range(max_outer):
        x = _newton(aug, weights, c, t, x)
        if x[-1] > 2.0 * margin:
            break
        t *= mu
    return x[:d], float(x[-1])


def maximize_logdet(blocks, objective_block, z0, t_final: float = 1e7, mu: float = 20.0):
    """Phase II: maximize ``logdet G(z)`` subject to ``F_k(z) > 0``, from strictly feasible ``z0``."""
    allb = list(blocks) + [objective_block]
    c = np.zeros(z0.size)
    z = z0
    t = 1.0
    while t <= t_final:
        weights = [1.0] * len(blocks) + [t]
        z = _newton(allb, weights, c, 1.0, z)
        t *= mu
    return z
