"""Evaluate fitted Poly-RBF models at arbitrary (b-value, b-vector) targets."""

from __future__ import annotations

import logging
import warnings

import numpy as np

from .errors import ExtrapolationError, InvalidArgumentError
from .estimator import FitVolume, VoxelFit, _apply, map_chunks
from .geometry import BasisConfig, design_rows
from .gradients import B0_THRESHOLD, GradientScheme
from .volume import SignalVolume

logger = logging.getLogger(__name__)

_EXTRAP_RTOL = 1e-9


def _beta(fit):
    return fit.beta if isinstance(fit, VoxelFit) else np.asarray(fit, dtype=np.float64)


def predict_log(fit, cfg: BasisConfig, b, p):
    """Predicted log-signal; scalar for a single target, array for a stack."""
    scalar = np.ndim(b) == 0
    X = design_rows(np.atleast_1d(b), np.atleast_2d(p), cfg)
    beta = _beta(fit)
    if beta.shape[-1] != cfg.n_coef:
        raise InvalidArgumentError(f"coefficient vector has length {beta.shape[-1]}, "
                                   f"basis expects {cfg.n_coef}")
    out = _apply(X, np.atleast_2d(beta))
    if beta.ndim == 1:
        out = out[0]
        return float(out[0]) if scalar else out
    return out[:, 0] if scalar else out


def predict_signal(fit, cfg: BasisConfig, b, p):
    """Predicted normalised signal ``exp(predict_log)``; always positive."""
    return np.exp(predict_log(fit, cfg, b, p))


def check_extrapolation(train_max_b: float, target: GradientScheme,
                        allow: bool = False) -> list[int]:
    """Indices of target frames beyond the training b-range.

    Raises :class:`ExtrapolationError` unless ``allow`` is set, in which
    case a warning is issued instead.
    """
    limit = train_max_b * (1.0 + _EXTRAP_RTOL)
    beyond = np.flatnonzero(target.bvals > limit).tolist()
    if beyond:
        msg = (f"{len(beyond)} target frames exceed the training maximum b={train_max_b:g} "
               f"(max target b={target.max_b:g}); frames {beyond[:10]}"
               + ("..." if len(beyond) > 10 else ""))
        if not allow:
            raise ExtrapolationError(msg + "; pass allow_extrapolation to override")
        warnings.warn(msg, stacklevel=3)
    return beyond


def resample_volume(fits: FitVolume, target: GradientScheme, allow_extrapolation: bool = False,
                    threads: int = 1) -> tuple[SignalVolume, dict]:
    """Predict every masked voxel on ``target``.

    Returns a normalised volume over all target frames (b0 frames equal 1,
    voxels outside the mask are 0) and a report naming extrapolated frames.
    """
    if len(target) == 0:
        raise InvalidArgumentError("target scheme is empty")
    beyond = check_extrapolation(fits.scheme.max_b, target, allow_extrapolation)
    X = design_rows(target.bvals, target.bvecs, fits.cfg)
    parts = map_chunks(lambda a, b: np.exp(_apply(X, fits.betas[a:b])),
                       fits.n_voxels, threads)
    out = np.zeros(fits.dims + (len(target),))
    if parts:
        out[fits.mask] = np.concatenate(parts)
    report = {
        "n_frames": len(target),
        "training_max_b": fits.scheme.max_b,
        "target_max_b": target.max_b,
        "extrapolated_frames": beyond,
    }
    return SignalVolume(data=out, mask=fits.mask.copy(), normalized=True, scheme=target), report


def baseline_indices(scheme: GradientScheme, bvals, bvecs) -> np.ndarray:
    """Training frame chosen by the shell-wise antipodal nearest neighbour.

    For each query the nearest training shell in b is found, then the frame
    on that shell maximising ``|p . p_train|``; ties go to the lowest index.
    """
    if len(scheme) == 0:
        raise InvalidArgumentError("baseline needs a non-empty training set")
    qb = np.atleast_1d(np.asarray(bvals, dtype=np.float64))
    qp = np.atleast_2d(np.asarray(bvecs, dtype=np.float64))
    tb = np.round(scheme.bvals, 6)
    shells = np.unique(tb)
    out = np.empty(qb.size, dtype=np.intp)
    for i, (b, p) in enumerate(zip(qb, qp)):
        shell = shells[np.argmin(np.abs(shells - b))]
        cand = np.flatnonzero(tb == shell)
        if shell <= B0_THRESHOLD:
            out[i] = cand[0]
            continue
        score = np.abs(scheme.bvecs[cand] @ p)
        out[i] = cand[int(np.argmax(score))]
    return out


def baseline_predict(scheme: GradientScheme, signals, b, p):
    """Nearest-neighbour comparator: copy the closest training measurement."""
    S = np.asarray(signals, dtype=np.float64)
    if S.shape[-1] != len(scheme):
        raise InvalidArgumentError(f"signals have {S.shape[-1]} frames, scheme has {len(scheme)}")
    idx = baseline_indices(scheme, b, p)
    out = S[..., idx]
    return out[..., 0] if np.ndim(b) == 0 else out
