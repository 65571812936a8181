"""Least-squares regression on simulated paths."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

RCOND = 1e-10


class ClampWarning(UserWarning):
    """Regression points far outside the basis box were clamped."""


@dataclass(frozen=True)
class BasisSpec:
    """Basis family and the box used to normalize coordinates to [-1, 1].

    kind: ``polynomial`` (total degree ``degree``), ``piecewise_constant_bins``
    (``n_bins`` per coordinate, tensor product) or ``radial`` (Gaussian bumps
    on ``n_centers`` nodes per coordinate plus a constant).
    """

    kind: str = "polynomial"
    degree: int = 2
    n_bins: int = 10
    n_centers: int = 5
    lo: tuple | None = None
    hi: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise_constant_bins", "radial"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.n_bins < 1 or self.n_centers < 1:
            raise ValueError("basis size parameters must be positive")
        if (self.lo is None) != (self.hi is None):
            raise ValueError("basis box needs both lo and hi")
        if self.lo is not None and np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("basis box has lo > hi")

    def size(self, d: int) -> int:
        if self.kind == "polynomial":
            return len(_exponents(d, self.degree))
        if self.kind == "piecewise_constant_bins":
            return self.n_bins ** d
        return self.n_centers ** d + 1

    def with_box(self, points) -> "BasisSpec":
        """Copy whose box is the bounding box of ``points``."""
        pts = np.asarray(points, dtype=float).reshape(len(points), -1)
        return replace(self, lo=tuple(pts.min(axis=0)), hi=tuple(pts.max(axis=0)))

    def _center_scale(self, d):
        if self.lo is None:
            return np.zeros(d), np.ones(d)
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        half = 0.5 * (hi - lo)
        return 0.5 * (hi + lo), np.where(half > 0, half, 1.0)


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    condition_estimate: float
    n_samples: int


def _exponents(d, degree):
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), total):
            e = [0] * d
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


def design_matrix(basis: BasisSpec, points) -> np.ndarray:
    """Rows of basis functions evaluated at ``points`` (shape (n, d) or (n,))."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n, d = pts.shape
    if n < 1:
        raise ValueError("design_matrix needs at least one point")
    center, scale = basis._center_scale(d)
    z = (pts - center) / scale
    outside = np.abs(z) > 10.0
    if outside.any():
        warnings.warn(f"{int(outside.any(axis=1).sum())} points outside 10x the basis box "
                      "were clamped", ClampWarning, stacklevel=2)
        z = np.clip(z, -10.0, 10.0)

    if basis.kind == "polynomial":
        cols = []
        for e in _exponents(d, basis.degree):
            col = np.ones(n)
            for i, p in enumerate(e):
                if p:
                    col = col * z[:, i] ** p
            cols.append(col)
        return np.column_stack(cols)

    if basis.kind == "piecewise_constant_bins":
        nb = basis.n_bins
        idx = np.clip(np.floor((z + 1.0) * 0.5 * nb).astype(np.int64), 0, nb - 1)
        flat = np.ravel_multi_index(tuple(idx.T), (nb,) * d)
        out = np.zeros((n, nb ** d))
        out[np.arange(n), flat] = 1.0
        return out

    nc = basis.n_centers
    nodes = np.linspace(-1.0, 1.0, nc) if nc > 1 else np.zeros(1)
    width = 2.0 / (nc - 1) if nc > 1 else 1.0
    centers = np.array(list(itertools.product(nodes, repeat=d)))
    r2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.column_stack([np.ones(n), np.exp(-0.5 * r2 / width ** 2)])


def ls_fit(design, targets, ridge: float = 0.0) -> FitResult:
    """Minimize ``|D c - y|^2 + ridge |c|^2``.

    With ``ridge == 0`` a rank-deficient design gets the minimum-norm
    solution (complete orthogonal decomposition, LAPACK gelsy).
    """
    y = np.asarray(targets, dtype=float)
    if y.ndim != 1:
        raise ValueError("targets must be one-dimensional")
    return ls_fit_many(design, y[:, None], ridge)[0]


def ls_fit_many(design, targets, ridge: float = 0.0) -> list[FitResult]:
    """``ls_fit`` for each column of ``targets`` with one factorization of ``design``."""
    D = np.asarray(design, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if D.ndim != 2 or Y.ndim != 2 or Y.shape[0] != D.shape[0]:
        raise ValueError("design must be (n, B) and targets (n, r)")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    n, B = D.shape
    if not np.any(D):
        raise ValueError("design matrix is identically zero")
    if ridge > 0:
        D = np.vstack([D, np.sqrt(ridge) * np.eye(B)])
        Y = np.vstack([Y, np.zeros((B, Y.shape[1]))])
    coef, _, _, _ = scipy.linalg.lstsq(D, Y, cond=RCOND, lapack_driver="gelsy",
                                       check_finite=False)
    if not np.all(np.isfinite(coef)):
        raise FloatingPointError("regression produced non-finite coefficients")
    eig = np.linalg.eigvalsh(D.T @ D)
    eig = eig[eig > eig[-1] * 1e-13]
    cond = max(float(np.sqrt(eig[-1] / eig[0])), 1.0) if eig.size else 1.0
    return [FitResult(coef[:, i].copy(), cond, n) for i in range(coef.shape[1])]


def predict(fit: FitResult, basis: BasisSpec, points) -> np.ndarray:
    D = design_matrix(basis, points)
    if D.shape[1] != fit.coefficients.shape[0]:
        raise ValueError(f"basis has {D.shape[1]} functions but fit has "
                         f"{fit.coefficients.shape[0]} coefficients")
    return D @ fit.coefficients
