"""Dense tensor algebra: unfolding, mode products, truncated SVD and HOOI.

Unfoldings follow the Kolda-Bader column order: in the mode-``n`` unfolding
the remaining indices ``k != n`` vary with stride ``prod(I_m for m < k, m != n)``,
i.e. the lowest remaining mode varies fastest.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "TuckerFactors",
    "fold",
    "hooi",
    "hosvd",
    "mode_product",
    "multi_mode_product",
    "reconstruct",
    "relative_error",
    "truncated_svd",
    "unfold",
]


def _check_finite(a: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite values in {what}")


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for order-{ndim} tensor")


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(I_mode, prod of the other extents)``."""
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t.ndim, mode)
    # Fortran-order reshape makes the lowest remaining index vary fastest.
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1:]
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (shape[mode], int(np.prod(rest, dtype=np.int64))):
        raise ValueError(f"matrix of shape {m.shape} cannot fold into {shape} at mode {mode}")
    return np.ascontiguousarray(np.moveaxis(np.reshape(m, (shape[mode],) + rest, order="F"), 0, mode))


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """``t x_mode m``: multiply every mode-``mode`` fiber of ``t`` by ``m``."""
    t = np.asarray(t, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    _check_mode(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ValueError(
            f"matrix {m.shape} does not match extent {t.shape[mode]} of mode {mode}")
    out = np.tensordot(m, t, axes=([1], [mode]))
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def multi_mode_product(t: np.ndarray, mats: Sequence[np.ndarray | None],
                       transpose: bool = False, skip: int | None = None) -> np.ndarray:
    """Apply ``mats[k]`` (or its transpose) at every mode ``k``; ``None`` entries are identity."""
    out = np.asarray(t, dtype=np.float64)
    for k, m in enumerate(mats):
        if m is None or k == skip:
            continue
        out = mode_product(out, m.T if transpose else m, k)
    return out


def _sign_fix(u: np.ndarray, vt: np.ndarray | None = None):
    # largest-magnitude entry of each left singular vector made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    if vt is not None:
        vt = vt * signs[:, None]
    return u, vt


def _complete_basis(u: np.ndarray, n_cols: int) -> np.ndarray:
    """Extend orthonormal columns ``u`` with an orthonormal complement up to ``n_cols``."""
    rows, have = u.shape
    if have >= n_cols:
        return u
    # project the identity away from span(u) and keep the strongest directions
    resid = np.eye(rows) - u @ u.T
    q, r = np.linalg.qr(resid)
    order = np.argsort(-np.abs(np.diag(r)), kind="stable")
    extra = q[:, order[: n_cols - have]]
    return np.concatenate([u, extra], axis=1)


def truncated_svd(m: np.ndarray, r: int):
    """Rank-``r`` SVD via the eigendecomposition of the smaller Gram matrix.

    Returns ``(U, S, Vt)`` with ``U`` of shape ``(rows, r)``, ``S`` non-increasing
    and ``Vt`` of shape ``(r, cols)``.  Each column of ``U`` has its
    largest-magnitude entry positive.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("truncated_svd expects a matrix")
    rows, cols = m.shape
    if not 1 <= r <= min(rows, cols):
        raise ValueError(f"rank {r} outside [1, {min(rows, cols)}]")
    _check_finite(m)

    if rows <= cols:
        evals, evecs = np.linalg.eigh(m @ m.T)
        order = np.argsort(evals, kind="stable")[::-1][:r]
        s = np.sqrt(np.clip(evals[order], 0.0, None))
        u = evecs[:, order]
        vt = u.T @ m
        nz = s > 0
        vt[nz] /= s[nz, None]
        vt[~nz] = 0.0
    else:
        evals, evecs = np.linalg.eigh(m.T @ m)
        order = np.argsort(evals, kind="stable")[::-1][:r]
        s = np.sqrt(np.clip(evals[order], 0.0, None))
        v = evecs[:, order]
        tol = max(rows, cols) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        good = s > tol
        u = np.zeros((rows, r))
        u[:, good] = (m @ v[:, good]) / s[good]
        # re-orthonormalize the well-conditioned block, then complete the basis
        if good.any():
            q, rr = np.linalg.qr(u[:, good])
            q = q * np.sign(np.where(np.diag(rr) == 0, 1.0, np.diag(rr)))
            u[:, good] = q
        n_good = int(good.sum())
        if n_good < r:
            basis = _complete_basis(u[:, good], r)
            u[:, ~good] = basis[:, n_good:]
            s = np.where(good, s, 0.0)
        vt = v.T
    u, vt = _sign_fix(u, vt)
    return u, s, vt


def _leading_basis(m: np.ndarray, r: int) -> np.ndarray:
    """``r`` leading left singular vectors; beyond the matrix rank the basis is
    completed with orthonormal directions (their core slices come out zero)."""
    k = min(m.shape)
    if r <= k:
        return truncated_svd(m, r)[0]
    return _complete_basis(truncated_svd(m, k)[0], r)


@dataclass
class TuckerFactors:
    """Core tensor plus one factor per mode (``None`` marks an untouched mode).

    ``factors[k]`` has shape ``(I_k, R_k)`` for each decomposed mode ``k``.
    """

    core: np.ndarray
    factors: list
    errors: list = field(default_factory=list)

    @property
    def decomposed_modes(self) -> tuple:
        return tuple(k for k, f in enumerate(self.factors) if f is not None)

    @property
    def ranks(self) -> tuple:
        return tuple(self.core.shape)

    @property
    def full_shape(self) -> tuple:
        return tuple(f.shape[0] if f is not None else self.core.shape[k]
                     for k, f in enumerate(self.factors))


def reconstruct(f: TuckerFactors) -> np.ndarray:
    """Full tensor ``core x_1 U1 x_2 U2 ...`` (identity on untouched modes)."""
    if len(f.factors) != f.core.ndim:
        raise ValueError("one factor slot per core mode is required")
    for k, u in enumerate(f.factors):
        if u is not None and u.shape[1] != f.core.shape[k]:
            raise ValueError(f"factor {k} has {u.shape[1]} columns, core extent is {f.core.shape[k]}")
    return multi_mode_product(f.core, f.factors)


def relative_error(t: np.ndarray, f: TuckerFactors) -> float:
    norm = np.linalg.norm(t)
    diff = np.linalg.norm(t - reconstruct(f))
    return float(diff / norm) if norm > 0 else float(diff)


def _normalize_ranks(shape, ranks, modes):
    if modes is None:
        modes = tuple(range(len(shape)))
    modes = tuple(sorted(set(int(m) for m in modes)))
    for m in modes:
        _check_mode(len(shape), m)
    if isinstance(ranks, dict):
        ranks = {int(k): int(v) for k, v in ranks.items()}
    else:
        ranks = list(ranks)
        if len(ranks) == len(modes):
            ranks = dict(zip(modes, (int(r) for r in ranks)))
        elif len(ranks) == len(shape):
            ranks = {m: int(ranks[m]) for m in modes}
        else:
            raise ValueError("ranks must list one value per decomposed mode or per tensor mode")
    for m in modes:
        r = ranks.get(m)
        if r is None or not 1 <= r <= shape[m]:
            raise ValueError(f"rank {r} for mode {m} outside [1, {shape[m]}]")
    return modes, ranks


def hosvd(t: np.ndarray, ranks, modes=None) -> TuckerFactors:
    """Truncated HOSVD: one truncated SVD per mode of the raw tensor."""
    t = np.asarray(t, dtype=np.float64)
    _check_finite(t)
    modes, ranks = _normalize_ranks(t.shape, ranks, modes)
    factors = [None] * t.ndim
    for m in modes:
        factors[m] = _leading_basis(unfold(t, m), ranks[m])
    core = multi_mode_product(t, factors, transpose=True)
    return TuckerFactors(core, factors)


def hooi(t: np.ndarray, ranks, modes=None, max_iters: int = 50, tol: float = 1e-6) -> TuckerFactors:
    """Higher-order orthogonal iteration, initialized with the truncated HOSVD.

    ``errors`` on the result holds the relative reconstruction error of the
    initialization followed by one entry per completed sweep.  Iteration stops
    when the error improves by less than ``tol`` or after ``max_iters`` sweeps.
    The core is recomputed from the final factors by contraction.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    t = np.asarray(t, dtype=np.float64)
    init = hosvd(t, ranks, modes)
    modes = init.decomposed_modes
    factors = list(init.factors)
    rank_of = {m: init.core.shape[m] for m in modes}
    errors = [relative_error(t, init)]
    for _ in range(max_iters):
        for n in modes:
            b = multi_mode_product(t, factors, transpose=True, skip=n)
            factors[n] = _leading_basis(unfold(b, n), rank_of[n])
        core = multi_mode_product(t, factors, transpose=True)
        err = relative_error(t, TuckerFactors(core, factors))
        prev = errors[-1]
        errors.append(err)
        if prev - err < tol:
            break
    core = multi_mode_product(t, factors, transpose=True)
    return TuckerFactors(core, factors, errors)
