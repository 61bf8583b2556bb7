"""Dimensionality reduction of gradient differences: SVD basis and feature hashing."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .. import binio


class DegenerateError(ValueError):
    pass


def select_k(singular_values, nu: float) -> int:
    """Smallest k whose leading squared singular values reach a fraction ``nu`` of the total."""
    if not 0.0 < nu <= 1.0:
        raise ValueError("nu must be in (0, 1]")
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    acc = np.cumsum(s2)
    # compare against the cumsum's own total so nu = 1 always reaches the last index
    total = acc[-1] if len(acc) else 0.0
    if total <= 0:
        raise DegenerateError("degenerate gradient differences")
    return int(np.argmax(acc / total >= nu)) + 1


def explained_ratio(singular_values, k: int) -> float:
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    return float(s2[:k].sum() / s2.sum())


@dataclass(frozen=True)
class ProjectionBasis:
    """Row mean, leading right singular vectors (d x k, float32) and the full singular spectrum."""

    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    nu: float
    m: int
    center: bool = True
    layout_id: str = ""

    @property
    def k(self) -> int:
        return self.components.shape[1]

    @property
    def d(self) -> int:
        return self.components.shape[0]

    @property
    def out_dim(self) -> int:
        return self.k

    def project(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None]
        if rows.shape[1] != self.d:
            raise ValueError(f"rows have dimension {rows.shape[1]}, basis expects {self.d}")
        if self.center:
            rows = rows - self.mean.astype(np.float64)
        return (rows @ self.components.astype(np.float64)).astype(np.float32)

    def lift(self, coords) -> np.ndarray:
        """Map k-dim coordinates back to d-dim rows (inverse of ``project`` on the fitted subspace)."""
        out = np.asarray(coords, dtype=np.float64) @ self.components.astype(np.float64).T
        if self.center:
            out = out + self.mean.astype(np.float64)
        return out

    def describe(self) -> dict:
        return {"kind": "svd", "k": self.k, "d": self.d, "m": self.m, "nu": self.nu, "center": self.center,
                "explained": explained_ratio(self.singular_values, self.k)}


def _spectrum_gram(centered: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin SVD through the m x m Gram matrix; cheaper than a full SVD when m << d."""
    gram = centered @ centered.T
    evals, evecs = np.linalg.eigh(gram)
    evals = evals[::-1].copy()
    evecs = np.ascontiguousarray(evecs[:, ::-1])
    tol = max(evals[0], 0.0) * max(centered.shape) * np.finfo(np.float64).eps
    evals = np.where(evals > tol, evals, 0.0)
    sigma = np.sqrt(evals)
    return sigma, evecs


def fit_projection(matrix, nu: float = 0.95, center: bool = True, method: str = "auto",
                   layout_id: str = "") -> ProjectionBasis:
    """Fit the SVD basis of the centered gradient-difference matrix and keep
    the smallest number of components explaining at least ``nu`` of the variance.

    ``center`` only controls how new rows are projected; the basis itself
    is always fitted on centered rows.
    """
    rows = getattr(matrix, "rows", matrix)
    layout_id = layout_id or getattr(matrix, "layout_id", "")
    rows = np.asarray(rows, dtype=np.float64)
    m, d = rows.shape
    if m < 2:
        raise ValueError("need at least two rows to fit a basis")
    if not 0.0 < nu <= 1.0:
        raise ValueError("nu must be in (0, 1]")
    mean = rows.mean(axis=0).astype(np.float32)
    centered = rows - mean.astype(np.float64)

    if method == "auto":
        method = "gram" if m < d else "svd"
    if method == "gram":
        sigma, left = _spectrum_gram(centered)
        if sigma[0] == 0.0:
            raise DegenerateError("degenerate gradient differences")
        k = select_k(sigma, nu)
        comps = (centered.T @ left[:, :k]) / sigma[:k]
    elif method == "svd":
        _, sigma, vt = np.linalg.svd(centered, full_matrices=False)
        tol = sigma[0] * max(m, d) * np.finfo(np.float64).eps if len(sigma) else 0.0
        sigma = np.where(sigma > tol, sigma, 0.0)
        if not len(sigma) or sigma[0] == 0.0:
            raise DegenerateError("degenerate gradient differences")
        k = select_k(sigma, nu)
        comps = vt[:k].T
    else:
        raise ValueError(f"unknown method {method!r}")
    # fix the sign convention so the basis is a deterministic function of the data
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    return ProjectionBasis(mean, comps.astype(np.float32), sigma, float(nu), m, center, layout_id)


def project(basis, rows) -> np.ndarray:
    return basis.project(rows)


@dataclass(frozen=True)
class HashProjector:
    """Feature hashing: every input coordinate is added into one seeded output bucket."""

    d: int
    out_dim: int
    seed: int = 0

    def __post_init__(self):
        if self.out_dim < 1:
            raise ValueError("output dimension must be >= 1")

    @property
    def buckets(self) -> np.ndarray:
        return np.random.default_rng(self.seed).integers(0, self.out_dim, size=self.d)

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((np.ones(self.d), (np.arange(self.d), self.buckets)), shape=(self.d, self.out_dim))

    def project(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None]
        if rows.shape[1] != self.d:
            raise ValueError(f"rows have dimension {rows.shape[1]}, projector expects {self.d}")
        return np.asarray(rows @ self.matrix())

    def describe(self) -> dict:
        return {"kind": "hash", "d": self.d, "out_dim": self.out_dim, "seed": self.seed}


def default_hash_dim(d: int) -> int:
    return d // 2


def hash_project(rows, out_dim: int | None = None, seed: int = 0) -> np.ndarray:
    rows = np.asarray(rows)
    d = rows.shape[-1]
    return HashProjector(d, out_dim or default_hash_dim(d), seed).project(rows)


def save_basis(path: str | Path, basis: ProjectionBasis, meta: dict | None = None) -> Path:
    """Header, then the mean (d floats), then the components column-major (k columns of d)."""
    header = {
        "d": basis.d,
        "k": basis.k,
        "nu": basis.nu,
        "m": basis.m,
        "center": basis.center,
        "layout": basis.layout_id,
        "singular_values": [float(s) for s in basis.singular_values],
        "meta": meta or {},
    }
    payload = np.concatenate([basis.mean.ravel(), basis.components.T.ravel()])
    return binio.write(path, binio.MAGIC_BASIS, header, payload)


def load_basis(path: str | Path) -> ProjectionBasis:
    header, payload = binio.read(path, binio.MAGIC_BASIS)
    d, k = header["d"], header["k"]
    if payload.size != d * (k + 1):
        raise binio.FormatError(f"{path}: expected {d * (k + 1)} values, found {payload.size}")
    mean = payload[:d].copy()
    comps = np.ascontiguousarray(payload[d:].reshape(k, d).T)
    return ProjectionBasis(mean, comps, np.asarray(header["singular_values"]), header["nu"], header["m"],
                           header["center"], header["layout"])
