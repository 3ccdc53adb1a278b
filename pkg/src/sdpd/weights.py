"""k-nearest-neighbour row-stochastic weights and resolvent algebra.

The kernels handled here all have the form ``a*I - b*W``.  They are
factorized once with sparse LU and cached per ``(a, b)``; the log-determinant
can alternatively be evaluated from the eigenvalues of ``W``, which is the
cheap path when the likelihood is profiled over many values of rho.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg as dla
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .errors import SingularResolventError, ValidationError

RHO_BOUND = 0.999
EIGEN_MAX_N = 1000
_DIAG_BLOCK = 256


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    """Row-stochastic ``n x n`` matrix with exactly ``k`` neighbours per row.

    ``neighbors[i]`` lists the column indices of row ``i`` (nearest first)
    and ``values[i]`` the matching weights.
    """

    neighbors: np.ndarray
    values: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def __post_init__(self):
        nb = np.array(self.neighbors, dtype=np.int64)
        vals = np.array(self.values, dtype=float)
        if nb.ndim != 2 or nb.shape != vals.shape:
            raise ValidationError("neighbors and values must be matching (n, k) arrays")
        n = nb.shape[0]
        if nb.size and (nb.min() < 0 or nb.max() >= n):
            raise ValidationError("neighbor index out of range")
        if np.any(nb == np.arange(n)[:, None]):
            raise ValidationError("a unit cannot be its own neighbour")
        nb.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def sparse(self) -> sparse.csr_matrix:
        return self._cached("csr", self._build_csr)

    def _build_csr(self):
        n, k = self.neighbors.shape
        indptr = np.arange(0, n * k + 1, k)
        m = sparse.csr_matrix(
            (self.values.ravel().copy(), self.neighbors.ravel().copy(), indptr), shape=(n, n)
        )
        m.sort_indices()
        return m

    def dense(self) -> np.ndarray:
        return self.sparse.toarray()

    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``W`` (complex in general; k-NN is not symmetric)."""
        return self._cached("eig", lambda: dla.eigvals(self.dense()))

    def _cached(self, key, make):
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = make()
        with self._lock:
            return self._cache.setdefault(key, value)

    def kernel(self, a: float, b: float) -> "Kernel":
        """Factorized ``a*I - b*W``, cached per ``(a, b)``."""
        key = ("kernel", float(a), float(b))
        with self._lock:
            kern = self._cache.get(key)
            if kern is None:
                kern = self._cache[key] = Kernel(self, float(a), float(b))
                # keep the cache bounded during likelihood searches
                kernels = [k for k in self._cache if k[0] == "kernel"]
                for old in kernels[:-64]:
                    del self._cache[old]
        return kern

    def to_frame(self) -> pd.DataFrame:
        n, k = self.neighbors.shape
        return pd.DataFrame(
            {
                "i": np.repeat(np.arange(n), k),
                "j": self.neighbors.ravel(),
                "w": self.values.ravel(),
            }
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format=lambda x: repr(float(x)))

    @classmethod
    def from_csv(cls, path) -> "SpatialWeights":
        df = pd.read_csv(path)
        if list(df.columns) != ["i", "j", "w"]:
            raise ValidationError(f"{path}: expected columns i,j,w")
        counts = df.groupby("i").size()
        n = int(df["i"].max()) + 1
        if len(counts) != n or counts.nunique() != 1:
            raise ValidationError(f"{path}: every row must hold the same number of neighbours")
        df = df.sort_values("i", kind="stable")
        k = int(counts.iloc[0])
        return cls(df["j"].to_numpy().reshape(n, k), df["w"].to_numpy().reshape(n, k))


def _planar(coords):
    return np.asarray(coords, dtype=float)


def _unit_sphere(coords):
    # chord length on the unit sphere is monotone in great-circle distance
    lon, lat = np.radians(coords[:, 0]), np.radians(coords[:, 1])
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def build_knn_weights(centroids, k: int, distance: str = "euclidean") -> SpatialWeights:
    """Row-stochastic k-NN weights from centroid distances.

    Ties at the k-th distance go to the lowest unit index.  ``distance`` is
    ``"euclidean"`` on the coordinates as given, or ``"great_circle"`` for
    ``(lon, lat)`` in degrees.
    """
    coords = np.asarray(centroids, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValidationError("centroids must be an (n, 2) array")
    n = coords.shape[0]
    k = int(k)
    if k < 1:
        raise ValidationError("k must be at least 1")
    if k >= n:
        raise ValidationError(f"k={k} must be smaller than the number of units n={n}")
    if not np.isfinite(coords).all():
        raise ValidationError("centroids must be finite")
    if distance == "euclidean":
        pts = _planar(coords)
    elif distance == "great_circle":
        pts = _unit_sphere(coords)
    else:
        raise ValidationError(f"unknown distance {distance!r}")

    tree = cKDTree(pts)
    d_first, _ = tree.query(pts, k=k + 1)
    kth = d_first[:, -1]
    neighbors = np.empty((n, k), dtype=np.int64)
    n_dupes = 0
    for i in range(n):
        # every point within the (k+1)-th distance is a candidate, so ties are complete
        cand = np.array(tree.query_ball_point(pts[i], kth[i] * (1 + 1e-12) + 1e-300), dtype=np.int64)
        cand = cand[cand != i]
        dist = np.sqrt(((pts[cand] - pts[i]) ** 2).sum(axis=1))
        order = np.lexsort((cand, dist))
        chosen = cand[order[:k]]
        n_dupes += int(np.count_nonzero(dist == 0.0))
        neighbors[i] = chosen
    if n_dupes:
        warnings.warn(
            f"{n_dupes // 2 or 1} pair(s) of identical centroids; ties broken by unit index",
            stacklevel=2,
        )
    values = np.full((n, k), 1.0 / k)
    return SpatialWeights(neighbors, values)


def spatial_lag(W: SpatialWeights, v) -> np.ndarray:
    """``W @ v`` for an n-vector or an ``(n, T)`` matrix."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != W.n:
        raise ValidationError(f"dimension mismatch: W is {W.n}x{W.n}, v has {v.shape[0]} rows")
    return W.sparse @ v


def check_rho(rho: float) -> float:
    rho = float(rho)
    if not -1.0 < rho < 1.0:
        raise SingularResolventError(
            f"rho={rho} outside the admissible interval (-1, 1) for row-stochastic W"
        )
    return rho


class Kernel:
    """Sparse LU of ``a*I - b*W`` with solve, log-determinant and diagonals."""

    def __init__(self, W: SpatialWeights, a: float, b: float):
        self.W, self.a, self.b = W, a, b
        n = W.n
        mat = (a * sparse.identity(n, format="csc") - b * W.sparse.tocsc()).tocsc()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sparse.linalg.MatrixRankWarning)
                self.lu = splu(mat)
        except (RuntimeError, sparse.linalg.MatrixRankWarning) as exc:
            raise SingularResolventError(f"{a}*I - {b}*W is singular") from exc
        udiag = self.lu.U.diagonal()
        if not np.all(np.isfinite(udiag)) or np.min(np.abs(udiag)) <= 1e-13 * np.max(np.abs(udiag)):
            raise SingularResolventError(f"{a}*I - {b}*W is numerically singular")
        self._udiag = udiag
        self._diag_cache = {}
        self._lock = threading.Lock()

    @property
    def logdet(self) -> float:
        # L has a unit diagonal; permutations only flip the sign
        return float(np.sum(np.log(np.abs(self._udiag))))

    def solve(self, B) -> np.ndarray:
        B = np.asarray(B, dtype=float)
        if B.shape[0] != self.W.n:
            raise ValidationError(f"dimension mismatch: kernel is {self.W.n}, B has {B.shape[0]} rows")
        return self.lu.solve(B)

    def diag_of_solve(self, M=None, key=None) -> np.ndarray:
        """Diagonal of ``K^{-1} M`` (``M`` sparse, identity when omitted).

        Computed blockwise from solves against columns of ``M``; results for
        a given ``key`` are cached.
        """
        if key is not None:
            with self._lock:
                if key in self._diag_cache:
                    return self._diag_cache[key]
        n = self.W.n
        M = sparse.identity(n, format="csc") if M is None else sparse.csc_matrix(M)
        out = np.empty(n)
        for start in range(0, n, _DIAG_BLOCK):
            stop = min(start + _DIAG_BLOCK, n)
            X = self.lu.solve(M[:, start:stop].toarray())
            out[start:stop] = X[np.arange(start, stop), np.arange(stop - start)]
        if key is not None:
            with self._lock:
                self._diag_cache[key] = out
        return out

    def inverse_diagonal(self) -> np.ndarray:
        return self.diag_of_solve(key="identity")


def log_det_resolvent(W: SpatialWeights, rho: float, method: str = "lu") -> float:
    """``ln|det(I - rho*W)|`` by sparse LU or from the eigenvalues of ``W``."""
    rho = check_rho(rho)
    if rho == 0.0:
        return 0.0
    if method == "lu":
        return W.kernel(1.0, rho).logdet
    if method == "eigen":
        lam = W.eigenvalues()
        terms = np.abs(1.0 - rho * lam)
        if np.min(terms) <= 1e-13:
            raise SingularResolventError(f"I - {rho}*W is singular")
        return float(np.sum(np.log(terms)))
    raise ValidationError(f"unknown log-determinant method {method!r}")


def solve_resolvent(W: SpatialWeights, rho: float, B) -> np.ndarray:
    """Solve ``(I - rho*W) X = B``."""
    rho = check_rho(rho)
    B = np.asarray(B, dtype=float)
    if rho == 0.0:
        if B.shape[0] != W.n:
            raise ValidationError(f"dimension mismatch: W is {W.n}x{W.n}, B has {B.shape[0]} rows")
        return B.copy()
    return W.kernel(1.0, rho).solve(B)


class LogDet:
    """``ln|I - rho*W|`` and its first two rho-derivatives for the likelihood.

    Uses the eigenvalue path when ``n <= EIGEN_MAX_N`` (or when forced), and
    sparse LU with central differences for the derivatives otherwise.
    """

    def __init__(self, W: SpatialWeights, method: str = "auto"):
        if method == "auto":
            method = "eigen" if W.n <= EIGEN_MAX_N else "lu"
        if method not in ("eigen", "lu"):
            raise ValidationError(f"unknown log-determinant method {method!r}")
        self.W, self.method = W, method
        self.lam = W.eigenvalues() if method == "eigen" else None

    def __call__(self, rho: float) -> float:
        if self.method == "eigen":
            check_rho(rho)
            return float(np.sum(np.log(np.abs(1.0 - rho * self.lam))))
        return log_det_resolvent(self.W, rho, "lu")

    def d1(self, rho: float) -> float:
        if self.method == "eigen":
            return float(np.real(np.sum(-self.lam / (1.0 - rho * self.lam))))
        h = 1e-5
        return (self(rho + h) - self(rho - h)) / (2 * h)

    def d2(self, rho: float) -> float:
        if self.method == "eigen":
            return float(np.real(np.sum(-(self.lam**2) / (1.0 - rho * self.lam) ** 2)))
        h = 1e-4
        return (self(rho + h) - 2 * self(rho) + self(rho - h)) / h**2
