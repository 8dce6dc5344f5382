"""Ridge least-squares fitting of the Poly-RBF model in log-signal space.

A single projector ``(X^T X + d I)^-1 X^T`` is built per (scheme, basis)
pair and applied to every voxel.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidArgumentError, ProtocolMismatchError, RankDeficiencyError
from .geometry import BasisConfig, DesignMatrix, design_fingerprint, design_matrix
from .gradients import GradientScheme

logger = logging.getLogger(__name__)

DEFAULT_RIDGE_REL = 1e-8
CHUNK = 2048


def default_ridge(X, rel: float = DEFAULT_RIDGE_REL) -> float:
    """``rel * mean(diag(X^T X))``, i.e. relative to the mean squared column norm."""
    X = X.X if isinstance(X, DesignMatrix) else np.asarray(X)
    return float(rel * np.mean(np.sum(X * X, axis=0)))


@dataclass(frozen=True, eq=False)
class Projector:
    P: np.ndarray
    X: np.ndarray
    ridge_d: float
    fingerprint: str
    cfg: BasisConfig | None = None

    @property
    def n_coef(self) -> int:
        return self.P.shape[0]

    @property
    def n_obs(self) -> int:
        return self.P.shape[1]


def build_projector(X, d: float | None = None, cfg: BasisConfig | None = None) -> Projector:
    """Factor ``X^T X + d I`` once (Cholesky) and return the solve operator.

    ``d=None`` uses :func:`default_ridge`.  With ``d == 0`` the design must
    have full column rank.
    """
    if isinstance(X, DesignMatrix):
        Xa, fp = X.X, X.fingerprint
    else:
        Xa, fp = np.asarray(X, dtype=np.float64), ""
    if Xa.ndim != 2 or Xa.shape[0] < 1:
        raise InvalidArgumentError(f"design must be a non-empty 2-D matrix, got shape {Xa.shape}")
    if d is None:
        d = default_ridge(Xa)
    if not d >= 0:
        raise InvalidArgumentError(f"ridge d must be nonnegative, got {d}")
    ncol = Xa.shape[1]
    if d == 0:
        rank = np.linalg.matrix_rank(Xa)
        if rank < ncol:
            raise RankDeficiencyError(
                f"design has rank {rank} < {ncol} columns ({ncol - rank} deficient "
                f"dimensions); use a positive ridge d",
                deficiency=ncol - rank,
            )
    A = Xa.T @ Xa + d * np.eye(ncol)
    try:
        cf = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError:
        s = np.linalg.svd(A, compute_uv=False)
        deficient = int(np.sum(s <= s[0] * ncol * np.finfo(float).eps))
        raise RankDeficiencyError(
            f"normal equations not positive definite ({deficient} deficient dimensions)",
            deficiency=deficient,
        ) from None
    P = linalg.cho_solve(cf, Xa.T)
    if not np.all(np.isfinite(P)):
        raise RankDeficiencyError("projector has non-finite entries")
    P.setflags(write=False)
    Xc = np.array(Xa)
    Xc.setflags(write=False)
    return Projector(P=P, X=Xc, ridge_d=float(d), fingerprint=fp, cfg=cfg)


def projector_for(scheme: GradientScheme, cfg: BasisConfig) -> Projector:
    return build_projector(design_matrix(scheme, cfg), cfg.ridge_d, cfg=cfg)


class VoxelFit(NamedTuple):
    beta: np.ndarray
    residual_variance: float
    n_obs: int


def _apply(A: np.ndarray, Y: np.ndarray) -> np.ndarray:
    # einsum without BLAS: a voxel's result must not depend on batch size
    return np.einsum("vm,km->vk", Y, A, optimize=False)


def _check_signal(Y: np.ndarray, M: int):
    if Y.shape[-1] != M:
        raise InvalidArgumentError(f"signal has {Y.shape[-1]} frames, projector expects {M}")
    bad = ~np.isfinite(Y)
    if bad.any():
        frames = np.flatnonzero(bad.reshape(-1, M).any(axis=0)).tolist()
        raise InvalidArgumentError(f"non-finite log-signal at frame indices {frames}")


def fit_batch(proj: Projector, Y) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients and residual variances for a ``(V, M)`` block of log-signals."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    _check_signal(Y, proj.n_obs)
    beta = _apply(proj.P, Y)
    resid = Y - _apply(proj.X, beta)
    dof = max(proj.n_obs - proj.n_coef, 1)
    return beta, np.einsum("vm,vm->v", resid, resid, optimize=False) / dof


def fit_voxel(proj: Projector, log_signal) -> VoxelFit:
    y = np.asarray(log_signal, dtype=np.float64)
    if y.ndim != 1:
        raise InvalidArgumentError("fit_voxel expects a 1-D log-signal")
    beta, rv = fit_batch(proj, y[None, :])
    return VoxelFit(beta=beta[0], residual_variance=float(rv[0]), n_obs=y.size)


@dataclass(eq=False)
class FitVolume:
    """Per-voxel coefficients for every masked voxel of a grid.

    ``betas[i]`` belongs to the ``i``-th True entry of ``mask`` in C order.
    """

    dims: tuple
    mask: np.ndarray
    betas: np.ndarray
    residual_variance: np.ndarray
    cfg: BasisConfig
    scheme: GradientScheme
    fingerprint: str
    info: dict = field(default_factory=dict)

    @property
    def n_voxels(self) -> int:
        return self.betas.shape[0]

    def voxel(self, i: int) -> VoxelFit:
        return VoxelFit(self.betas[i], float(self.residual_variance[i]), len(self.scheme))


def map_chunks(func, n: int, threads: int = 1, chunk: int = CHUNK):
    """Run ``func(start, stop)`` over fixed chunks of ``range(n)``, results in order.

    Chunk boundaries do not depend on ``threads``.
    """
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads <= 1 or len(bounds) <= 1:
        return [func(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda ab: func(*ab), bounds))


def fit_volume(proj: Projector, volume, mask=None, threads: int = 1) -> FitVolume:
    """Fit every masked voxel of a b0-normalised volume with a shared projector.

    The projector must come from :func:`projector_for` on the volume's own
    scheme; otherwise a :class:`ProtocolMismatchError` is raised.
    """
    if not volume.normalized:
        raise InvalidArgumentError("fit_volume needs a b0-normalised volume")
    if volume.scheme is None or proj.cfg is None:
        raise ProtocolMismatchError("volume or projector carries no scheme/basis information")
    if proj.fingerprint != design_fingerprint(volume.scheme, proj.cfg):
        raise ProtocolMismatchError(
            "volume frames do not match the projector's scheme/basis fingerprint")
    if mask is None:
        mask = volume.mask if volume.mask is not None else np.ones(volume.shape3, bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.shape3:
        raise InvalidArgumentError(f"mask shape {mask.shape} does not match volume {volume.shape3}")
    Y = np.log(volume.data[mask].astype(np.float64))
    parts = map_chunks(lambda a, b: fit_batch(proj, Y[a:b]), Y.shape[0], threads)
    if parts:
        betas = np.concatenate([p[0] for p in parts])
        rv = np.concatenate([p[1] for p in parts])
    else:
        betas, rv = np.zeros((0, proj.n_coef)), np.zeros(0)
    return FitVolume(dims=volume.shape3, mask=mask, betas=betas, residual_variance=rv,
                     cfg=proj.cfg, scheme=volume.scheme, fingerprint=proj.fingerprint)


def fit_signal_volume(volume, cfg: BasisConfig, mask=None, threads: int = 1) -> FitVolume:
    """Build the projector for ``volume.scheme`` and fit all masked voxels."""
    return fit_volume(projector_for(volume.scheme, cfg), volume, mask=mask, threads=threads)


# ---------------------------------------------------------------------------
# model selection


class ICValue(NamedTuple):
    value: float
    perfect_fit: bool


def information_criterion(fit: VoxelFit, M: int | None = None, which: str = "AIC") -> ICValue:
    """Gaussian-likelihood AIC/BIC: ``M ln(RSS/M) + penalty * N*K``."""
    M = fit.n_obs if M is None else int(M)
    p = len(fit.beta)
    rss = fit.residual_variance * max(M - p, 1)
    which = which.upper()
    if which == "AIC":
        penalty = 2.0 * p
    elif which == "BIC":
        penalty = math.log(M) * p
    else:
        raise InvalidArgumentError(f"unknown criterion {which!r}; use AIC or BIC")
    if rss <= 0:
        return ICValue(-math.inf, True)
    return ICValue(M * math.log(rss / M) + penalty, False)


@dataclass
class OrderSelection:
    K: int
    cv_loss: dict
    skipped: list
    folds: np.ndarray


def shell_folds(scheme: GradientScheme, n_folds: int, seed: int) -> np.ndarray:
    """Assign every diffusion-weighted frame to a fold, stratified by shell.

    b0 frames get fold ``-1``.
    """
    rng = np.random.default_rng(seed)
    folds = np.full(len(scheme), -1, dtype=np.int64)
    rounded = np.round(scheme.bvals)
    for b in scheme.shells():
        idx = np.flatnonzero((rounded == b) & ~scheme.b0_mask)
        perm = rng.permutation(idx)
        folds[perm] = np.arange(perm.size) % n_folds
    return folds


def select_order(scheme: GradientScheme, signals, K_candidates: Sequence[int] = (1, 2, 3, 4),
                 folds: int = 5, seed: int = 0, N: int = 10, ridge_d: float | None = None,
                 **cfg_kw) -> OrderSelection:
    """Choose the polynomial order by shell-stratified cross-validation.

    ``signals`` are b0-normalised intensities of shape ``(M,)`` or
    ``(V, M)`` aligned with ``scheme``; b0 frames are ignored.  The loss is
    held-out MSE of the log-signal pooled over voxels and frames, averaged
    over folds.  Ties go to the smaller order.
    """
    if folds < 2:
        raise InvalidArgumentError("select_order needs at least 2 folds")
    S = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if S.shape[1] != len(scheme):
        raise InvalidArgumentError(f"signals have {S.shape[1]} frames, scheme has {len(scheme)}")
    dw = scheme.dw_indices
    if dw.size == 0:
        raise InvalidArgumentError("scheme has no diffusion-weighted frames")
    sub = scheme.subset(dw)
    Y = np.log(S[:, dw])
    n_shells = sub.shells().size
    admissible, skipped = [], []
    for K in sorted(set(int(k) for k in K_candidates)):
        # no intercept: b, ..., b^K is identifiable on K distinct shells
        (admissible if 1 <= K <= n_shells else skipped).append(K)
    if skipped:
        warnings.warn(f"orders {skipped} exceed the {n_shells} distinct nonzero b-values "
                      "and were skipped", stacklevel=2)
    if not admissible:
        raise InvalidArgumentError("no admissible polynomial order among the candidates")
    fold_of = shell_folds(sub, folds, seed)
    losses = {}
    for K in admissible:
        cfg = BasisConfig.for_scheme(sub, N=N, K=K, ridge_d=ridge_d, **cfg_kw)
        X = design_matrix(sub, cfg).X
        fold_losses = []
        for f in range(folds):
            test = fold_of == f
            if not test.any():
                continue
            train = ~test
            if K >= 2 and np.unique(np.round(sub.bvals[train])).size < 2:
                raise InvalidArgumentError(f"fold {f} training part spans fewer than 2 b-values")
            proj = build_projector(X[train], ridge_d)
            beta = _apply(proj.P, Y[:, train])
            pred = _apply(X[test], beta)
            fold_losses.append(float(np.mean((Y[:, test] - pred) ** 2)))
        losses[K] = float(np.mean(fold_losses))
    best = min(admissible, key=lambda k: (losses[k], k))
    return OrderSelection(K=best, cv_loss=losses, skipped=skipped, folds=fold_of)
