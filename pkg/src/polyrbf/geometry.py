"""RBF centres on the sphere, tapered Gaussian kernels and the folded design matrix.

The angular part of the model uses ``2N`` centres arranged in antipodal
pairs (``c[i] == -c[i + N]``) whose coefficients are tied, so the two
kernels of a pair collapse into a single design column.  Each of the
``K`` polynomial orders in b reuses the same ``N`` folded columns, which
gives an ``M x (N*K)`` design with column index ``(k - 1) * N + l``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .gradients import B0_THRESHOLD, GradientScheme

logger = logging.getLogger(__name__)

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
DEFAULT_N = 10
DEFAULT_K = 4
DEFAULT_TAPER = 3.0
_NUDGE = 1e-4
_UNIT_TOL = 1e-12


def _lattice_point(i: int, n: int, extra_azimuth: float = 0.0) -> np.ndarray:
    z = 1.0 - (2.0 * i + 1.0) / n
    az = 2.0 * math.pi * i / GOLDEN_RATIO**2 + extra_azimuth
    r = math.sqrt(max(0.0, 1.0 - z * z))
    return np.array([r * math.cos(az), r * math.sin(az), z])


def _collides(points: np.ndarray, j: int) -> bool:
    dots = points[:j] @ points[j]
    return bool(np.any(dots >= 1.0) or np.any(dots <= -1.0))


def fibonacci_centers(N: int) -> np.ndarray:
    """Return ``N`` unit vectors from the offset spherical Fibonacci lattice.

    Point ``i`` sits at height ``1 - (2i + 1)/N`` with golden-angle azimuth.
    A point whose dot product with an earlier one (or its antipode) reaches
    +-1 is nudged in azimuth by 1e-4 rad until the set is unique.
    """
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise InvalidArgumentError(f"N must be a positive integer, got {N!r}")
    N = int(N)
    pts = np.empty((N, 3))
    for i in range(N):
        pts[i] = _lattice_point(i, N)
        nudges = 0
        while _collides(pts, i):
            nudges += 1
            logger.warning("Fibonacci centre %d collides; nudging azimuth (attempt %d)", i, nudges)
            pts[i] = _lattice_point(i, N, nudges * _NUDGE)
    return pts


def mirror_centers(centers) -> np.ndarray:
    """Stack ``centers`` on top of their antipodes (``2N x 3``)."""
    c = np.asarray(centers, dtype=np.float64)
    return np.concatenate([c, -c], axis=0)


def chord_sq(p, c) -> np.ndarray:
    """Squared chord distance between unit vectors via ``2 (1 - p.c)``."""
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    pe = p[..., None, :] if p.ndim > 1 and c.ndim > 1 else p
    ce = c
    # elementwise dot (no BLAS) so a row never depends on how many rows are batched
    dot = pe[..., 0] * ce[..., 0] + pe[..., 1] * ce[..., 1] + pe[..., 2] * ce[..., 2]
    return np.maximum(2.0 * (1.0 - dot), 0.0)


def kernel(p, center, h: float, taper_mult: float = DEFAULT_TAPER):
    """Tapered Gaussian kernel ``exp(-d^2 / 2h^2) * [d < taper_mult * h]``.

    ``p`` and ``center`` may be single vectors or stacks; broadcasting
    follows ``chord_sq`` (rows of ``p`` against rows of ``center``).
    """
    if not h > 0:
        raise InvalidArgumentError(f"bandwidth must be positive, got {h}")
    d2 = chord_sq(p, center)
    d = np.sqrt(d2)
    out = np.where(d < taper_mult * h, np.exp(-d2 / (2.0 * h * h)), 0.0)
    return out[()] if out.ndim == 0 else out


def default_bandwidth(centers) -> float:
    """Mean of ``sqrt(2) * |c_i - c_j|`` over ordered pairs with nonzero distance."""
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 2:
        raise InvalidArgumentError("default_bandwidth needs at least two centres")
    a = math.sqrt(2.0) * np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    nz = a != 0
    if not nz.any():
        raise InvalidArgumentError("default_bandwidth needs at least two distinct centres")
    return float(a[nz].sum() / nz.sum())


@dataclass(frozen=True, eq=False)
class BasisConfig:
    """Hyper-parameters of a Poly-RBF(K, N) basis.

    ``centers`` holds all ``2N`` centres, the second half being the
    antipodes of the first.  ``b_scale`` divides b-values before they are
    raised to powers ``1..K``; it is usually the largest training b-value.
    ``ridge_d`` of ``None`` means the scale-aware default used by
    :func:`polyrbf.estimator.build_projector`.
    """

    N: int
    K: int
    centers: np.ndarray
    h: float
    b_scale: float
    taper_mult: float = DEFAULT_TAPER
    ridge_d: float | None = None

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64)
        if self.N < 1 or self.K < 1:
            raise InvalidArgumentError(f"need N >= 1 and K >= 1, got N={self.N}, K={self.K}")
        if c.shape != (2 * self.N, 3):
            raise InvalidArgumentError(f"centers must have shape ({2 * self.N}, 3), got {c.shape}")
        if np.any(np.abs(np.linalg.norm(c, axis=1) - 1.0) > _UNIT_TOL):
            raise InvalidArgumentError("centres must be unit vectors")
        if not np.array_equal(c[self.N:], -c[: self.N]):
            raise InvalidArgumentError("centres must satisfy c[i] == -c[i + N]")
        if self.N > 1:
            g = c[: self.N] @ c[: self.N].T
            off = g[~np.eye(self.N, dtype=bool)]
            if np.any(np.abs(off) >= 1.0 - _UNIT_TOL):
                raise InvalidArgumentError("centres are not unique up to antipodes")
        if not self.h > 0:
            raise InvalidArgumentError(f"bandwidth must be positive, got {self.h}")
        if not self.b_scale > 0:
            raise InvalidArgumentError(f"b_scale must be positive, got {self.b_scale}")
        if not self.taper_mult > 0:
            raise InvalidArgumentError(f"taper_mult must be positive, got {self.taper_mult}")
        if self.ridge_d is not None and not self.ridge_d >= 0:
            raise InvalidArgumentError(f"ridge_d must be nonnegative, got {self.ridge_d}")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "b_scale", float(self.b_scale))
        object.__setattr__(self, "taper_mult", float(self.taper_mult))

    @classmethod
    def create(cls, N=DEFAULT_N, K=DEFAULT_K, *, b_scale=1.0, h=None,
               taper_mult=DEFAULT_TAPER, ridge_d=None) -> "BasisConfig":
        """Fibonacci centres and the mean-pairwise-distance bandwidth."""
        centers = mirror_centers(fibonacci_centers(N))
        if h is None:
            h = default_bandwidth(centers)
        return cls(N=N, K=K, centers=centers, h=h, b_scale=b_scale,
                   taper_mult=taper_mult, ridge_d=ridge_d)

    @classmethod
    def for_scheme(cls, scheme: GradientScheme, N=DEFAULT_N, K=DEFAULT_K, **kw) -> "BasisConfig":
        return cls.create(N, K, b_scale=scheme.max_b, **kw)

    @property
    def n_coef(self) -> int:
        return self.N * self.K

    def replace(self, **changes) -> "BasisConfig":
        fields = dict(N=self.N, K=self.K, centers=self.centers, h=self.h,
                      b_scale=self.b_scale, taper_mult=self.taper_mult, ridge_d=self.ridge_d)
        fields.update(changes)
        return BasisConfig(**fields)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "K": self.K,
            "centers": self.centers.tolist(),
            "h": self.h,
            "b_scale": self.b_scale,
            "taper_mult": self.taper_mult,
            "ridge_d": self.ridge_d,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisConfig":
        return cls(N=d["N"], K=d["K"], centers=np.asarray(d["centers"]), h=d["h"],
                   b_scale=d["b_scale"], taper_mult=d.get("taper_mult", DEFAULT_TAPER),
                   ridge_d=d.get("ridge_d"))

    def fingerprint(self) -> str:
        payload = json.dumps({k: v for k, v in self.to_dict().items() if k != "centers"},
                             sort_keys=True).encode()
        h = hashlib.sha256(payload)
        h.update(np.ascontiguousarray(self.centers, dtype="<f8").tobytes())
        return h.hexdigest()


def folded_kernels(p, cfg: BasisConfig) -> np.ndarray:
    """``G(l, p) + G(l + N, p)`` for every centre pair; shape ``(..., N)``."""
    g = kernel(np.atleast_2d(p), cfg.centers, cfg.h, cfg.taper_mult)
    return g[:, : cfg.N] + g[:, cfg.N:]


def design_rows(bvals, bvecs, cfg: BasisConfig) -> np.ndarray:
    """Vectorised :func:`design_row` for ``M`` targets; returns ``(M, N*K)``."""
    b = np.atleast_1d(np.asarray(bvals, dtype=np.float64))
    p = np.atleast_2d(np.asarray(bvecs, dtype=np.float64))
    if np.any(b < 0):
        raise InvalidArgumentError(f"negative b-values at {np.flatnonzero(b < 0).tolist()}")
    if p.shape != (b.size, 3):
        raise InvalidArgumentError(f"expected {b.size} directions, got shape {p.shape}")
    b0 = b <= B0_THRESHOLD
    # b0 frames may carry a zero vector; their row is zero regardless.
    safe = np.where(b0[:, None], cfg.centers[0], p)
    f = folded_kernels(safe, cfg)
    bs = b / cfg.b_scale
    powers = bs[:, None] ** np.arange(1, cfg.K + 1)[None, :]
    X = (powers[:, :, None] * f[:, None, :]).reshape(b.size, cfg.n_coef)
    X[b0] = 0.0
    return X


def design_row(b: float, p, cfg: BasisConfig) -> np.ndarray:
    """Folded row ``x`` with ``x[(k-1)*N + l] = (b/b_scale)^k * (G(l,p) + G(l+N,p))``."""
    return design_rows([b], [p], cfg)[0]


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    X: np.ndarray
    fingerprint: str

    @property
    def shape(self):
        return self.X.shape


def design_fingerprint(scheme: GradientScheme, cfg: BasisConfig) -> str:
    return hashlib.sha256((scheme.fingerprint() + cfg.fingerprint()).encode()).hexdigest()


def design_matrix(scheme: GradientScheme, cfg: BasisConfig) -> DesignMatrix:
    X = design_rows(scheme.bvals, scheme.bvecs, cfg)
    X.setflags(write=False)
    return DesignMatrix(X=X, fingerprint=design_fingerprint(scheme, cfg))
