"""Cross-protocol harmonisation: fit, resample onto a dense target, extract features, ComBat.

Per dataset the pipeline normalises to b0, fits Poly-RBF, predicts on the
target scheme and fits diffusion tensors to both the original and the
predicted signals.  Features from all datasets are then pooled over the
common mask and, optionally, batch-corrected with ComBat.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .combat import apply_combat, fit_combat
from .errors import InvalidArgumentError, PolyRBFError, StageError
from .estimator import fit_signal_volume, map_chunks
from .geometry import DEFAULT_K, DEFAULT_N, DEFAULT_TAPER, BasisConfig
from .gradients import GradientScheme
from .microstructure import components_to_matrix, fa, fit_tensors, md
from .predictor import resample_volume
from .protocols import hcp_scheme
from .volume import SignalVolume, normalize_b0

logger = logging.getLogger(__name__)

FEATURES = ("FA", "MD")


@dataclass(eq=False)
class Dataset:
    name: str
    volume: SignalVolume
    batch: str
    mask: np.ndarray | None = None
    subject: str | None = None


@dataclass
class PipelineConfig:
    N: int = DEFAULT_N
    K: int = DEFAULT_K
    taper_mult: float = DEFAULT_TAPER
    ridge_d: float | None = None
    feature: str = "FA"
    combat: bool = True
    eb: bool = True
    allow_extrapolation: bool = False
    threads: int = 1

    def basis_for(self, scheme: GradientScheme) -> BasisConfig:
        return BasisConfig.for_scheme(scheme, N=self.N, K=self.K, taper_mult=self.taper_mult,
                                      ridge_d=self.ridge_d)


@dataclass(eq=False)
class HarmonizationResult:
    """Feature maps keyed by dataset name.

    ``maps[name]`` holds 3-D arrays under ``original`` and ``harmonized``
    and, with ComBat on, ``original_combat`` and ``harmonized_combat``.
    """

    maps: dict
    mask: np.ndarray
    feature: str
    reports: dict = field(default_factory=dict)

    def stack(self, key: str, names=None) -> np.ndarray:
        """``(datasets, V)`` matrix of one feature set over the common mask."""
        names = list(self.maps) if names is None else names
        return np.stack([self.maps[n][key][self.mask] for n in names])


def tensor_features(scheme: GradientScheme, signals, feature: str = "FA",
                    threads: int = 1) -> tuple[np.ndarray, int]:
    """Feature per voxel for a ``(V, M)`` block, plus the negative-eigenvalue count."""
    feature = feature.upper()
    if feature not in FEATURES:
        raise InvalidArgumentError(f"unknown feature {feature!r}; choose from {FEATURES}")
    S = np.asarray(signals, dtype=np.float64)

    def work(a, b):
        comps, _ = fit_tensors(scheme, S[a:b])
        lam = np.linalg.eigvalsh(components_to_matrix(comps))[..., ::-1]
        vals = fa(lam) if feature == "FA" else md(lam)
        return np.atleast_1d(vals), int(np.sum(lam.min(axis=-1) < 0))

    parts = map_chunks(work, S.shape[0], threads)
    if not parts:
        return np.zeros(0), 0
    return np.concatenate([p[0] for p in parts]), sum(p[1] for p in parts)


def with_unit_b0(scheme: GradientScheme, signals) -> tuple[GradientScheme, np.ndarray]:
    """Prepend one b0 frame of value 1 to normalised diffusion-weighted data."""
    S = np.asarray(signals, dtype=np.float64)
    sch = GradientScheme(np.r_[0.0, scheme.bvals], np.vstack([[0.0, 0.0, 0.0], scheme.bvecs]))
    return sch, np.hstack([np.ones((S.shape[0], 1)), S])


def _stage(name, ds, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PolyRBFError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, ds, exc) from exc
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise StageError(name, ds, exc) from exc


def process_dataset(ds: Dataset, target: GradientScheme, cfg: PipelineConfig) -> dict:
    """Stages 1-4 for one dataset; returns masked feature vectors and a report."""
    norm, nrep = _stage("normalize", ds.name, normalize_b0, ds.volume, ds.volume.scheme, ds.mask)
    basis = cfg.basis_for(norm.scheme)
    fits = _stage("fit", ds.name, fit_signal_volume, norm, basis, threads=cfg.threads)
    pred, prep = _stage("resample", ds.name, resample_volume, fits, target,
                        allow_extrapolation=cfg.allow_extrapolation, threads=cfg.threads)
    sch0, orig_sig = with_unit_b0(norm.scheme, norm.voxels())
    f_orig, neg_o = _stage("features", ds.name, tensor_features, sch0, orig_sig, cfg.feature,
                           cfg.threads)
    f_harm, neg_h = _stage("features", ds.name, tensor_features, target, pred.voxels(),
                           cfg.feature, cfg.threads)
    return {
        "mask": norm.mask,
        "original": f_orig,
        "harmonized": f_harm,
        "report": {"normalization": nrep.to_dict() | {"kept_frames": len(nrep.kept_frames)},
                   "resample": prep, "basis": {"N": basis.N, "K": basis.K, "h": basis.h,
                                               "b_scale": basis.b_scale},
                   "negative_eigenvalues": {"original": neg_o, "harmonized": neg_h},
                   "fit_mean_residual_variance": float(np.mean(fits.residual_variance))
                   if fits.n_voxels else None},
    }


def harmonize_pipeline(datasets, target: GradientScheme | None = None,
                       cfg: PipelineConfig | None = None) -> HarmonizationResult:
    """Run the five-step harmonisation over ``datasets``.

    All datasets must share one voxel grid; features are compared over
    the intersection of their masks.
    """
    cfg = cfg or PipelineConfig()
    target = target if target is not None else hcp_scheme()
    datasets = list(datasets)
    if not datasets:
        raise InvalidArgumentError("no datasets given")
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise InvalidArgumentError("dataset names must be unique")
    grid = datasets[0].volume.shape3
    for d in datasets:
        if d.volume.shape3 != grid:
            raise InvalidArgumentError(f"dataset {d.name!r} grid {d.volume.shape3} differs from {grid}")

    per = {d.name: process_dataset(d, target, cfg) for d in datasets}
    common = np.logical_and.reduce([per[n]["mask"] for n in names])
    maps = {}
    for n in names:
        m = per[n]["mask"]
        entry = {}
        for key in ("original", "harmonized"):
            full = np.zeros(grid)
            full[m] = per[n][key]
            entry[key] = full
        maps[n] = entry
    reports = {n: per[n]["report"] for n in names}

    if cfg.combat:
        batches = [d.batch for d in datasets]
        for key in ("original", "harmonized"):
            X = np.stack([maps[n][key][common] for n in names])
            try:
                model = fit_combat(X, batches, eb=cfg.eb)
                adj = apply_combat(model, X, batches)
            except PolyRBFError as exc:
                raise StageError("combat", key, exc) from exc
            for i, n in enumerate(names):
                full = np.zeros(grid)
                full[common] = adj[i]
                maps[n][key + "_combat"] = full
        reports["_combat"] = {"batches": sorted(set(map(str, batches))), "eb": cfg.eb}
    return HarmonizationResult(maps=maps, mask=common, feature=cfg.feature.upper(),
                               reports=reports)
