"""ComBat location/scale batch-effect removal with parametric empirical Bayes.

Features are standardised by a grand mean and pooled variance (after an
optional linear covariate model), per-batch location ``gamma`` and scale
``delta^2`` are estimated, shrunk towards normal / inverse-gamma priors
pooled across features, and removed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

EB_TOL = 1e-6
EB_MAXITER = 200


@dataclass(eq=False)
class CombatModel:
    batches: list
    gamma_star: np.ndarray
    delta_star: np.ndarray
    grand_mean: np.ndarray
    var_pooled: np.ndarray
    covariate_coef: np.ndarray | None = None
    passthrough: np.ndarray | None = None
    noop: bool = False
    info: dict = field(default_factory=dict)


def _batch_index(batches, known=None):
    labels = list(batches)
    levels = list(known) if known is not None else sorted(set(labels), key=str)
    pos = {b: i for i, b in enumerate(levels)}
    unseen = [b for b in labels if b not in pos]
    if unseen:
        raise InvalidArgumentError(f"unseen batch labels {sorted(set(map(str, unseen)))}")
    return levels, np.array([pos[b] for b in labels], dtype=np.intp)


def _aprior(d):
    m, s2 = d.mean(), d.var(ddof=1)
    return (2.0 * s2 + m**2) / s2


def _bprior(d):
    m, s2 = d.mean(), d.var(ddof=1)
    return (m * s2 + m**3) / s2


def _postmean(g_hat, g_bar, n, d_star, t2):
    return (t2 * n * g_hat + d_star * g_bar) / (t2 * n + d_star)


def _postvar(sum2, n, a, b):
    return (0.5 * sum2 + b) / (n / 2.0 + a - 1.0)


def _eb_batch(sdat, g_hat, d_hat, g_bar, t2, a, b):
    n = np.sum(~np.isnan(sdat), axis=0)
    g_old, d_old = g_hat.copy(), d_hat.copy()
    for it in range(1, EB_MAXITER + 1):
        g_new = _postmean(g_hat, g_bar, n, d_old, t2)
        sum2 = np.sum((sdat - g_new) ** 2, axis=0)
        d_new = _postvar(sum2, n, a, b)
        change = max(np.max(np.abs(g_new - g_old) / np.maximum(np.abs(g_old), 1e-8)),
                     np.max(np.abs(d_new - d_old) / d_old))
        g_old, d_old = g_new, d_new
        if change < EB_TOL:
            return g_new, d_new, it
    logger.warning("empirical Bayes did not converge in %d iterations", EB_MAXITER)
    return g_old, d_old, EB_MAXITER


def fit_combat(features, batches, covariates=None, eb: bool = True,
               mean_only: bool = False) -> CombatModel:
    """Estimate ComBat parameters for a ``(samples, features)`` matrix.

    Parameters
    ----------
    features : (n, p) array
    batches : length-n sequence of hashable labels
    covariates : (n, q) array, optional
        Effects to preserve; they are regressed out jointly with batch and
        added back on adjustment.
    eb : bool
        Shrink batch parameters with parametric empirical Bayes.
    mean_only : bool
        Adjust locations only (scales fixed at 1).
    """
    Y = np.asarray(features, dtype=np.float64)
    if Y.ndim != 2:
        raise InvalidArgumentError("features must be a (samples, features) matrix")
    n, p = Y.shape
    levels, bidx = _batch_index(batches)
    if bidx.size != n:
        raise InvalidArgumentError(f"{bidx.size} batch labels for {n} samples")
    counts = np.bincount(bidx, minlength=len(levels))
    if len(levels) < 2:
        warnings.warn("only one batch present; ComBat is a no-op", stacklevel=2)
        return CombatModel(batches=levels, gamma_star=np.zeros((1, p)), delta_star=np.ones((1, p)),
                           grand_mean=Y.mean(axis=0), var_pooled=np.ones(p), noop=True)
    if np.any(counts < 2):
        small = [levels[i] for i in np.flatnonzero(counts < 2)]
        raise InvalidArgumentError(f"batches {small} have fewer than 2 samples")

    B = len(levels)
    batch_design = np.zeros((n, B))
    batch_design[np.arange(n), bidx] = 1.0
    cov = None
    if covariates is not None:
        cov = np.asarray(covariates, dtype=np.float64).reshape(n, -1)
    design = batch_design if cov is None else np.hstack([batch_design, cov])
    coef = np.linalg.lstsq(design, Y, rcond=None)[0]
    grand_mean = (counts / n) @ coef[:B]
    resid = Y - design @ coef
    var_pooled = np.mean(resid**2, axis=0)
    # relative test: a constant feature leaves round-off residuals from lstsq
    passthrough = var_pooled <= 1e-24 * np.mean(Y**2, axis=0)
    if passthrough.any():
        logger.warning("%d features have zero pooled variance and pass through unchanged",
                       int(passthrough.sum()))
    vp = np.where(passthrough, 1.0, var_pooled)
    stand_mean = grand_mean[None, :]
    if cov is not None:
        stand_mean = stand_mean + cov @ coef[B:]
    sdat = (Y - stand_mean) / np.sqrt(vp)

    gamma_hat = np.stack([sdat[bidx == i].mean(axis=0) for i in range(B)])
    if mean_only:
        delta_hat = np.ones((B, p))
    else:
        delta_hat = np.stack([sdat[bidx == i].var(axis=0, ddof=1) for i in range(B)])
    delta_hat = np.where(delta_hat > 0, delta_hat, 1.0)

    iters = []
    if eb and p >= 2:
        g_bar = gamma_hat.mean(axis=1)
        t2 = gamma_hat.var(axis=1, ddof=1)
        gamma_star = np.empty_like(gamma_hat)
        delta_star = np.empty_like(delta_hat)
        for i in range(B):
            sd = sdat[bidx == i]
            if mean_only:
                gamma_star[i] = _postmean(gamma_hat[i], g_bar[i], counts[i], 1.0, t2[i])
                delta_star[i] = 1.0
                continue
            if delta_hat[i].var(ddof=1) <= 0:
                gamma_star[i] = _postmean(gamma_hat[i], g_bar[i], counts[i], delta_hat[i], t2[i])
                delta_star[i] = delta_hat[i]
                continue
            a, b = _aprior(delta_hat[i]), _bprior(delta_hat[i])
            gamma_star[i], delta_star[i], it = _eb_batch(sd, gamma_hat[i], delta_hat[i],
                                                         g_bar[i], t2[i], a, b)
            iters.append(it)
    else:
        if eb:
            logger.warning("empirical Bayes needs at least 2 features; using plain estimates")
        gamma_star, delta_star = gamma_hat, delta_hat
    return CombatModel(batches=levels, gamma_star=gamma_star, delta_star=delta_star,
                       grand_mean=grand_mean, var_pooled=var_pooled,
                       covariate_coef=None if cov is None else coef[B:],
                       passthrough=passthrough, info={"eb": eb, "mean_only": mean_only,
                                                      "eb_iterations": iters})


def apply_combat(model: CombatModel, features, batches, covariates=None) -> np.ndarray:
    """Remove the fitted batch effects from ``features``."""
    Y = np.asarray(features, dtype=np.float64)
    if model.noop:
        _batch_index(batches, model.batches)
        return Y.copy()
    _, bidx = _batch_index(batches, model.batches)
    if bidx.size != Y.shape[0]:
        raise InvalidArgumentError(f"{bidx.size} batch labels for {Y.shape[0]} samples")
    stand_mean = np.broadcast_to(model.grand_mean, Y.shape)
    if model.covariate_coef is not None:
        if covariates is None:
            raise InvalidArgumentError("model was fitted with covariates; supply them")
        cov = np.asarray(covariates, dtype=np.float64).reshape(Y.shape[0], -1)
        stand_mean = stand_mean + cov @ model.covariate_coef
    vp = np.where(model.passthrough, 1.0, model.var_pooled)
    sdat = (Y - stand_mean) / np.sqrt(vp)
    adj = (sdat - model.gamma_star[bidx]) / np.sqrt(model.delta_star[bidx])
    out = adj * np.sqrt(vp) + stand_mean
    if model.passthrough is not None and model.passthrough.any():
        out[:, model.passthrough] = Y[:, model.passthrough]
    return out


def combat(features, batches, covariates=None, **kw) -> np.ndarray:
    model = fit_combat(features, batches, covariates, **kw)
    return apply_combat(model, features, batches, covariates)
