"""Diffusion-tensor features (FA, MD) from normalised signals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UnidentifiableTensorError
from .gradients import GradientScheme
from .volume import CLAMP_EPS

# unique tensor elements in the order Dxx, Dyy, Dzz, Dxy, Dxz, Dyz
_IDX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class DiffusionTensor:
    components: np.ndarray
    log_s0: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return components_to_matrix(self.components)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)[::-1]

    @property
    def has_negative_eigenvalues(self) -> bool:
        return bool(self.eigenvalues.min() < 0)


def components_to_matrix(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    D = np.empty(c.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(_IDX):
        D[..., i, j] = c[..., k]
        D[..., j, i] = c[..., k]
    return D


def tensor_design(scheme: GradientScheme) -> np.ndarray:
    """Rows ``[1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz]``."""
    b = scheme.bvals
    g = scheme.bvecs
    cols = [np.ones_like(b)]
    for i, j in _IDX:
        f = 1.0 if i == j else 2.0
        cols.append(-f * b * g[:, i] * g[:, j])
    return np.stack(cols, axis=1)


def _check_identifiable(A: np.ndarray):
    rank = np.linalg.matrix_rank(A)
    if A.shape[0] < 7 or rank < 7:
        raise UnidentifiableTensorError(
            f"tensor design has rank {rank} with {A.shape[0]} frames; need 6 non-coplanar "
            "directions plus an intercept degree of freedom")


def fit_tensors(scheme: GradientScheme, signals) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass WLLS for a ``(V, M)`` block; returns components ``(V, 6)`` and log-S0 ``(V,)``.

    Pass one is ordinary least squares on ``ln S``; pass two weights each
    frame by the squared pass-one prediction.
    """
    A = tensor_design(scheme)
    _check_identifiable(A)
    S = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if S.shape[1] != len(scheme):
        raise InvalidArgumentError(f"signals have {S.shape[1]} frames, scheme has {len(scheme)}")
    y = np.log(np.maximum(S, CLAMP_EPS))
    coef0 = np.linalg.lstsq(A, y.T, rcond=None)[0].T
    w = np.exp(2.0 * coef0 @ A.T)
    AtWA = np.einsum("mi,vm,mj->vij", A, w, A)
    AtWy = np.einsum("mi,vm,vm->vi", A, w, y)
    try:
        coef = np.linalg.solve(AtWA, AtWy[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise UnidentifiableTensorError(f"weighted normal equations are singular: {exc}") from None
    return coef[:, 1:], coef[:, 0]


def fit_tensor_wlls(scheme: GradientScheme, normalized_signal) -> DiffusionTensor:
    sig = np.asarray(normalized_signal, dtype=np.float64)
    if sig.ndim != 1:
        raise InvalidArgumentError("fit_tensor_wlls expects one voxel; use fit_tensors for blocks")
    comps, ls0 = fit_tensors(scheme, sig[None, :])
    return DiffusionTensor(components=comps[0], log_s0=float(ls0[0]))


def _eigs(D) -> np.ndarray:
    if isinstance(D, DiffusionTensor):
        return D.eigenvalues
    D = np.asarray(D, dtype=np.float64)
    if D.shape[-2:] == (3, 3):
        return np.linalg.eigvalsh(D)[..., ::-1]
    if D.shape[-1] == 6:
        return np.linalg.eigvalsh(components_to_matrix(D))[..., ::-1]
    if D.shape[-1] == 3:
        return D
    raise InvalidArgumentError(f"cannot interpret array of shape {D.shape} as tensors")


def md(D):
    """Mean diffusivity: mean eigenvalue."""
    lam = _eigs(D)
    out = lam.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def fa(D):
    """Fractional anisotropy from eigenvalues; 0 for the zero tensor.

    Accepts a tensor, a ``3x3`` matrix, six components or the eigenvalues
    themselves (any leading batch shape).  Negative eigenvalues are used
    as they are; see :func:`negative_eigenvalue_flags`.
    """
    lam = _eigs(D)
    mean = lam.mean(axis=-1, keepdims=True)
    num = np.sum((lam - mean) ** 2, axis=-1)
    den = np.sum(lam**2, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, np.sqrt(1.5 * num / np.where(den > 0, den, 1.0)), 0.0)
    return float(out) if np.ndim(out) == 0 else out


def negative_eigenvalue_flags(D) -> np.ndarray:
    return _eigs(D).min(axis=-1) < 0
