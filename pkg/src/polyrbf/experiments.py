"""Phantom-scale experiments: prediction benchmark and harmonisation studies.

All randomness derives from one integer seed through named substreams so
every function here is reproducible bit for bit.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import fit_signal_volume
from .geometry import BasisConfig, design_rows
from .gradients import GradientScheme
from .harmonize import Dataset, PipelineConfig, harmonize_pipeline
from .metrics import icc_difference_map, mse_log, neglogp_threshold_counts, paired_t_test_map
from .phantom import PhantomSpec, add_rician_noise, default_phantom_spec, generate_phantom
from .predictor import baseline_predict
from .protocols import SUBSAMPLED_PROTOCOLS, hcp_scheme, subsample_protocol, train_test_split
from .volume import CLAMP_EPS, SignalVolume, normalize_b0

logger = logging.getLogger(__name__)

# named substreams of the master seed
STREAM_SPLIT = 11
STREAM_SUBJECT = 12
STREAM_ACQ = 13

TAU_DEFAULT = (3.0, 5.0, 10.0, 15.0)


def substream(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), *map(int, keys)])


def acquisition_seed(seed: int, *keys: int) -> int:
    """Deterministic noise seed for one simulated acquisition."""
    return int(substream(seed, STREAM_ACQ, *keys).integers(0, 2**31 - 1))


def subset_volume(vol: SignalVolume, idx) -> SignalVolume:
    idx = np.asarray(idx)
    return SignalVolume(data=vol.data[..., idx], mask=vol.mask, scheme=vol.scheme.subset(idx),
                        pixdim=vol.pixdim, affine=vol.affine)


# ---------------------------------------------------------------------------
# prediction benchmark


@dataclass
class BenchmarkRow:
    protocol: int
    replication: int
    n_train: int
    n_test: int
    polyrbf: float
    baseline: float

    def as_dict(self) -> dict:
        return {"protocol": self.protocol, "replication": self.replication,
                "n_train": self.n_train, "n_test": self.n_test,
                "polyrbf_mse": self.polyrbf, "baseline_mse": self.baseline}


def benchmark_volume(raw: SignalVolume, protocols=None, replications: int = 5, seed: int = 0,
                     N: int = 10, K: int = 4, threads: int = 1) -> list[BenchmarkRow]:
    """Held-out log-MSE of Poly-RBF and the nearest-frame baseline per protocol.

    Each replication draws a fresh shell-stratified 75:25 split of the
    diffusion-weighted frames of ``raw`` and, per protocol, a training
    subsample with the protocol's per-shell counts.  All b0 frames are kept
    for normalisation.
    """
    protocols = SUBSAMPLED_PROTOCOLS if protocols is None else protocols
    sch = raw.scheme
    b0 = sch.b0_indices
    mask = raw.mask if raw.mask is not None else np.ones(raw.shape3, bool)
    R = raw.data[mask]
    s0 = R[:, b0].mean(axis=1)
    keep = s0 > 0
    rows = []
    for rep in range(replications):
        rng = substream(seed, STREAM_SPLIT, rep)
        train, test = train_test_split(sch, rng)
        obs = np.maximum(R[keep][:, test] / s0[keep, None], CLAMP_EPS)
        for prot in sorted(protocols):
            sub = subsample_protocol(sch, train, protocols[prot], rng)
            vol = subset_volume(raw, np.sort(np.r_[b0, sub]))
            norm, _ = normalize_b0(vol, mask=mask)
            fit = fit_signal_volume(norm, BasisConfig.for_scheme(norm.scheme, N=N, K=K),
                                    threads=threads)
            Xt = design_rows(sch.bvals[test], sch.bvecs[test], fit.cfg)
            pred = np.exp(fit.betas @ Xt.T)
            base = baseline_predict(norm.scheme, norm.voxels(), sch.bvals[test], sch.bvecs[test])
            sel = norm.mask[mask][keep]
            rows.append(BenchmarkRow(prot, rep, int(sub.size), int(test.size),
                                     mse_log(pred, obs[sel]), mse_log(base, obs[sel])))
    return rows


def run_benchmark(spec: PhantomSpec | None = None, scheme: GradientScheme | None = None,
                  **kw) -> list[BenchmarkRow]:
    """Simulate ``spec`` on ``scheme`` (HCP-like by default) and benchmark it."""
    spec = spec if spec is not None else default_phantom_spec()
    scheme = scheme if scheme is not None else hcp_scheme()
    raw, _ = generate_phantom(spec, scheme)
    return benchmark_volume(raw, **kw)


# ---------------------------------------------------------------------------
# subjects and acquisitions


def subject_spec(subject: int, seed: int = 0, dims=(8, 8, 8), sigma_rel: float = 0.02,
                 spread: float = 0.15) -> PhantomSpec:
    """Phantom for one subject: the default layout with subject-specific diffusivities.

    Every compartment's eigenvalues are scaled by one factor per subject and
    the radial ones by a second, so features vary between subjects as well
    as between voxels.
    """
    rng = substream(seed, STREAM_SUBJECT, subject)
    scale, radial = np.exp(spread * rng.standard_normal(2))
    spec = default_phantom_spec(dims, sigma_rel=sigma_rel, seed=acquisition_seed(seed, subject))
    spec = copy.deepcopy(spec)
    for region in spec.regions:
        for c in region.compartments:
            ev = np.asarray(c["eigenvalues"], dtype=np.float64) * scale
            if ev[0] != ev[1] or ev[0] != ev[2]:
                ev[1:] = ev[1:] * radial
            c["eigenvalues"] = [float(x) for x in ev]
    return spec


def acquire(spec: PhantomSpec, scheme: GradientScheme, sigma_rel: float,
            noise_seed: int) -> SignalVolume:
    """Noisy acquisition of ``spec`` on ``scheme`` with its own noise level and seed.

    Voxel jitter stays tied to ``spec.seed``; only the noise stream changes.
    """
    clean_spec = copy.copy(spec)
    clean_spec.sigma = 0.0
    clean, gt = generate_phantom(clean_spec, scheme)
    M = len(scheme)
    ids = np.flatnonzero(gt.mask.reshape(-1))
    data = np.zeros_like(clean.data)
    data.reshape(-1, M)[ids] = add_rician_noise(clean.data.reshape(-1, M)[ids],
                                                sigma_rel * spec.S0, seed=noise_seed, voxel_ids=ids)
    return SignalVolume(data=data, mask=clean.mask, scheme=scheme)


def protocol_frames(scheme: GradientScheme, protocol: int, rng: np.random.Generator) -> np.ndarray:
    """b0 frames plus a subsample for one of the standard protocols drawn from all diffusion-weighted frames."""
    sub = subsample_protocol(scheme, scheme.dw_indices, SUBSAMPLED_PROTOCOLS[protocol], rng)
    return np.sort(np.r_[scheme.b0_indices, sub])


# ---------------------------------------------------------------------------
# paired protocol comparison (same acquisition, two subsamples)


@dataclass(eq=False)
class PairedStudy:
    counts: dict
    p_original: np.ndarray
    p_harmonized: np.ndarray
    mask: np.ndarray
    taus: tuple
    info: dict = field(default_factory=dict)

    def passed(self) -> bool:
        return all(h <= o for o, h in zip(self.counts["original"], self.counts["harmonized"]))


def paired_protocol_study(n_subjects: int = 8, protocols=(1, 3), seed: int = 0, dims=(8, 8, 8),
                          sigma_rel: float = 0.02, feature: str = "FA", taus=TAU_DEFAULT,
                          threads: int = 1) -> PairedStudy:
    """Paired t-tests between two protocol subsamples of the same acquisitions.

    Each subject is scanned once on the HCP-like scheme; the two protocols
    are subsampled from that scan.  Features from the original subsamples
    and from their Poly-RBF predictions on the full scheme are compared
    voxel-wise across subjects.  ComBat is off.
    """
    target = hcp_scheme()
    datasets = []
    for s in range(n_subjects):
        spec = subject_spec(s, seed, dims, sigma_rel)
        raw, _ = generate_phantom(spec, target)
        rng = substream(seed, STREAM_SPLIT, s)
        for prot in protocols:
            datasets.append(Dataset(name=f"s{s}_p{prot}", batch=f"p{prot}", subject=f"s{s}",
                                    volume=subset_volume(raw, protocol_frames(target, prot, rng))))
    res = harmonize_pipeline(datasets, target, PipelineConfig(feature=feature, combat=False,
                                                              threads=threads))
    a = [f"s{s}_p{protocols[0]}" for s in range(n_subjects)]
    b = [f"s{s}_p{protocols[1]}" for s in range(n_subjects)]
    counts, pmaps = {}, {}
    for key in ("original", "harmonized"):
        _, p, _ = paired_t_test_map(res.stack(key, a), res.stack(key, b))
        pmaps[key] = p
        counts[key] = neglogp_threshold_counts(p, taus)
    return PairedStudy(counts=counts, p_original=pmaps["original"],
                       p_harmonized=pmaps["harmonized"], mask=res.mask, taus=tuple(taus),
                       info={"n_subjects": n_subjects, "protocols": list(protocols),
                             "n_voxels": int(res.mask.sum())})


# ---------------------------------------------------------------------------
# cross-scanner reproducibility


@dataclass(eq=False)
class ReproducibilityStudy:
    improved: dict
    summaries: dict
    icc: dict
    mask: np.ndarray
    labels: np.ndarray
    info: dict = field(default_factory=dict)


DEFAULT_SCANNERS = ((1, 0.02), (1, 0.04), (4, 0.02), (4, 0.04))


def reproducibility_study(n_subjects: int = 6, scanners=DEFAULT_SCANNERS, seed: int = 0,
                          dims=(8, 8, 8), feature: str = "FA", threads: int = 1
                          ) -> ReproducibilityStudy:
    """ICC of features across simulated scanners, before and after harmonisation.

    A scanner is a (subsampled protocol, relative noise level) pair; every
    subject is scanned once per scanner with an independent noise draw.
    ICC maps are computed for original and harmonised features, each with
    and without ComBat (batch = scanner), and the fraction of voxels where
    harmonisation raises the ICC is reported for both ComBat settings.
    """
    target = hcp_scheme()
    datasets = []
    for s in range(n_subjects):
        spec = subject_spec(s, seed, dims, 0.0)
        for j, (prot, sig) in enumerate(scanners):
            raw = acquire(spec, target, sig, acquisition_seed(seed, s, j + 1))
            rng = substream(seed, STREAM_SPLIT, s, j + 1)
            datasets.append(Dataset(name=f"s{s}_c{j}", batch=f"c{j}", subject=f"s{s}",
                                    volume=subset_volume(raw, protocol_frames(target, prot, rng))))
    res = harmonize_pipeline(datasets, target, PipelineConfig(feature=feature, combat=True,
                                                              threads=threads))
    labels = default_phantom_spec(dims).labels()[res.mask]
    names = [[f"s{s}_c{j}" for j in range(len(scanners))] for s in range(n_subjects)]

    def cube(key):
        return np.stack([res.stack(key, row) for row in names])

    icc, improved, summaries = {}, {}, {}
    for suffix in ("", "_combat"):
        d = icc_difference_map(cube("original" + suffix), cube("harmonized" + suffix), labels)
        tag = "combat" if suffix else "plain"
        icc[tag] = d
        summaries[tag] = {"all": d["summary"], "regions": d["regions"]}
        improved[tag] = d["summary"]["improved_fraction"]
    return ReproducibilityStudy(improved=improved, summaries=summaries, icc=icc, mask=res.mask,
                                labels=labels,
                                info={"n_subjects": n_subjects,
                                      "scanners": [list(s) for s in scanners],
                                      "n_voxels": int(res.mask.sum())})


def nan_to_none(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x
