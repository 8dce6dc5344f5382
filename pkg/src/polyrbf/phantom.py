"""Multi-tensor phantoms with Rician noise.

Random draws come from Philox streams keyed by ``(seed, purpose)`` whose
counter is offset by the flat voxel index, so each voxel gets the same
numbers however the work is split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidArgumentError
from .gradients import GradientScheme
from .volume import SignalVolume

STREAM_NOISE = 0
STREAM_JITTER = 1
DEFAULT_S0 = 1000.0
_U64 = (1 << 64) - 1


def voxel_rng(seed: int, stream: int, voxel: int) -> np.random.Generator:
    """Independent generator for one voxel of one purpose (``stream``)."""
    bitgen = np.random.Philox(key=np.array([seed & _U64, stream & _U64], dtype=np.uint64),
                              counter=np.array([0, 0, 0, voxel], dtype=np.uint64))
    return np.random.Generator(bitgen)


def euler_to_matrix(angles) -> np.ndarray:
    """Rotation for intrinsic ZYZ Euler angles in radians."""
    return Rotation.from_euler("ZYZ", angles).as_matrix()


def tensor_from_eig(eigenvalues, rotation=None) -> np.ndarray:
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    return R @ np.diag(np.asarray(eigenvalues, dtype=np.float64)) @ R.T


@dataclass(frozen=True, eq=False)
class TensorCompartment:
    weight: float
    D: np.ndarray

    def __post_init__(self):
        D = np.array(self.D, dtype=np.float64)
        if D.shape != (3, 3):
            raise InvalidArgumentError(f"diffusion tensor must be 3x3, got {D.shape}")
        if not np.allclose(D, D.T, rtol=0, atol=1e-15):
            raise InvalidArgumentError("diffusion tensor must be symmetric")
        D = 0.5 * (D + D.T)
        if np.linalg.eigvalsh(D).min() <= 0:
            raise InvalidArgumentError("diffusion tensor must be positive definite")
        if not 0 < self.weight <= 1:
            raise InvalidArgumentError(f"compartment weight must be in (0, 1], got {self.weight}")
        object.__setattr__(self, "D", D)

    @classmethod
    def from_eig(cls, weight, eigenvalues, euler=(0.0, 0.0, 0.0)):
        return cls(weight, tensor_from_eig(eigenvalues, euler_to_matrix(euler)))


def multi_tensor_signal(compartments, b, p):
    """``sum_f w_f exp(-b p^T D_f p)`` for scalar or stacked targets."""
    comps = list(compartments)
    if not comps:
        raise InvalidArgumentError("at least one compartment is required")
    w = np.array([c.weight for c in comps])
    if abs(w.sum() - 1.0) > 1e-9:
        raise InvalidArgumentError(f"compartment weights must sum to 1, got {w.sum()}")
    bb = np.asarray(b, dtype=np.float64)
    if np.any(bb < 0):
        raise InvalidArgumentError("b must be nonnegative")
    pp = np.asarray(p, dtype=np.float64)
    out = 0.0
    for c in comps:
        q = np.einsum("...i,ij,...j->...", pp, c.D, pp)
        out = out + c.weight * np.exp(-bb * q)
    return float(out) if np.ndim(out) == 0 else out


def add_rician_noise(S, sigma: float, seed: int = 0, voxel_ids=None) -> np.ndarray:
    """Magnitude noise ``sqrt((S + e1)^2 + e2^2)`` with ``e1, e2 ~ N(0, sigma^2)``.

    ``S`` is ``(V, M)`` (or ``(M,)`` for one voxel).  Voxel ``v`` draws from
    the stream of ``voxel_ids[v]`` (default ``v``); frame order is fixed.
    """
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be nonnegative, got {sigma}")
    S = np.asarray(S, dtype=np.float64)
    if sigma == 0:
        return S.copy()
    S2 = np.atleast_2d(S)
    ids = np.arange(S2.shape[0]) if voxel_ids is None else np.asarray(voxel_ids)
    if ids.shape != (S2.shape[0],):
        raise InvalidArgumentError("voxel_ids must give one id per voxel row")
    out = np.empty_like(S2)
    M = S2.shape[1]
    for row, vid in enumerate(ids):
        e = voxel_rng(seed, STREAM_NOISE, int(vid)).standard_normal(2 * M) * sigma
        out[row] = np.hypot(S2[row] + e[:M], e[M:])
    return out.reshape(S.shape)


# ---------------------------------------------------------------------------
# phantom specification


@dataclass
class Region:
    """Axis-aligned box ``[lo, hi)`` per axis with a compartment model."""

    name: str
    bounds: tuple
    compartments: list
    eigenvalue_jitter: float = 0.0
    angle_jitter: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        comps = [dict(weight=float(c["weight"]), eigenvalues=[float(x) for x in c["eigenvalues"]],
                      euler=[float(x) for x in c.get("euler", (0.0, 0.0, 0.0))])
                 for c in d["compartments"]]
        jit = d.get("jitter", {})
        return cls(name=d.get("name", ""), bounds=tuple(tuple(int(v) for v in b) for b in d["bounds"]),
                   compartments=comps, eigenvalue_jitter=float(jit.get("eigenvalue_rel", 0.0)),
                   angle_jitter=float(jit.get("angle", 0.0)))

    def to_dict(self) -> dict:
        return {"name": self.name, "bounds": [list(b) for b in self.bounds],
                "compartments": self.compartments,
                "jitter": {"eigenvalue_rel": self.eigenvalue_jitter, "angle": self.angle_jitter}}


@dataclass
class PhantomSpec:
    dims: tuple
    regions: list
    sigma: float = 0.0
    seed: int = 0
    S0: float = DEFAULT_S0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidArgumentError(f"dims must be three positive integers, got {self.dims}")
        if self.sigma < 0:
            raise InvalidArgumentError("sigma must be nonnegative")
        if not self.regions:
            raise InvalidArgumentError("phantom needs at least one region")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(dims=d["dims"], regions=[Region.from_dict(r) for r in d["regions"]],
                   sigma=float(d.get("sigma", 0.0)), seed=int(d.get("seed", 0)),
                   S0=float(d.get("S0", DEFAULT_S0)))

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "regions": [r.to_dict() for r in self.regions],
                "sigma": self.sigma, "seed": self.seed, "S0": self.S0}

    def labels(self) -> np.ndarray:
        """Region index + 1 per voxel, 0 outside every region."""
        lab = np.zeros(self.dims, dtype=np.int16)
        for i, r in enumerate(self.regions, start=1):
            sl = tuple(slice(lo, hi) for lo, hi in r.bounds)
            if np.any(lab[sl] != 0):
                raise InvalidArgumentError(f"region {r.name or i} overlaps an earlier region")
            lab[sl] = i
        return lab


def default_phantom_spec(dims=(16, 16, 16), sigma_rel: float = 0.02, seed: int = 0,
                         S0: float = DEFAULT_S0) -> PhantomSpec:
    """Four quadrants: single fibre, 90-degree crossing, fibre + free water, isotropic."""
    nx, ny, nz = dims
    hx, hy = nx // 2, ny // 2
    jitter = {"eigenvalue_rel": 0.05, "angle": 0.15}
    regions = [
        {"name": "single", "bounds": [[0, hx], [0, hy], [0, nz]], "jitter": jitter,
         "compartments": [{"weight": 1.0, "eigenvalues": [1.7e-3, 0.3e-3, 0.3e-3],
                           "euler": [0.3, 1.2, 0.0]}]},
        {"name": "crossing", "bounds": [[hx, nx], [0, hy], [0, nz]], "jitter": jitter,
         "compartments": [{"weight": 0.5, "eigenvalues": [1.7e-3, 0.3e-3, 0.3e-3],
                           "euler": [0.0, 1.5707963267948966, 0.0]},
                          {"weight": 0.5, "eigenvalues": [1.7e-3, 0.3e-3, 0.3e-3],
                           "euler": [1.5707963267948966, 1.5707963267948966, 0.0]}]},
        {"name": "fibre_water", "bounds": [[0, hx], [hy, ny], [0, nz]], "jitter": jitter,
         "compartments": [{"weight": 0.8, "eigenvalues": [1.5e-3, 0.35e-3, 0.35e-3],
                           "euler": [0.0, 0.0, 0.0]},
                          {"weight": 0.2, "eigenvalues": [3.0e-3, 3.0e-3, 3.0e-3]}]},
        {"name": "isotropic", "bounds": [[hx, nx], [hy, ny], [0, nz]], "jitter": jitter,
         "compartments": [{"weight": 1.0, "eigenvalues": [0.8e-3, 0.7e-3, 0.6e-3],
                           "euler": [0.5, 0.5, 0.5]}]},
    ]
    return PhantomSpec.from_dict({"dims": list(dims), "regions": regions,
                                  "sigma": sigma_rel * S0, "seed": seed, "S0": S0})


@dataclass(eq=False)
class GroundTruth:
    """Noise-free normalised signal plus the per-voxel compartments behind it."""

    signal: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    tensors: np.ndarray
    spec: PhantomSpec
    info: dict = field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        return self.labels > 0

    def to_sidecar(self) -> dict:
        return {"spec": self.spec.to_dict(),
                "regions": {i + 1: r.name for i, r in enumerate(self.spec.regions)},
                "n_voxels": int(self.mask.sum()), **self.info}


def _voxel_compartments(spec: PhantomSpec, labels: np.ndarray):
    """Stack per-voxel weights ``(V, F)`` and tensors ``(V, F, 3, 3)`` for masked voxels."""
    flat_ids = np.flatnonzero(labels.reshape(-1) > 0)
    F = max(len(r.compartments) for r in spec.regions)
    V = flat_ids.size
    W = np.zeros((V, F))
    D = np.tile(np.eye(3) * 1e-3, (V, F, 1, 1))
    lab_flat = labels.reshape(-1)[flat_ids]
    for v, (vid, lab) in enumerate(zip(flat_ids, lab_flat)):
        region = spec.regions[lab - 1]
        rng = None
        if region.eigenvalue_jitter > 0 or region.angle_jitter > 0:
            rng = voxel_rng(spec.seed, STREAM_JITTER, int(vid))
        for f, c in enumerate(region.compartments):
            evals = np.asarray(c["eigenvalues"], dtype=np.float64)
            R = euler_to_matrix(c["euler"])
            if rng is not None:
                scale = 1.0 + region.eigenvalue_jitter * rng.standard_normal(3)
                evals = evals * np.clip(scale, 0.1, None)
                R = Rotation.from_rotvec(region.angle_jitter * rng.standard_normal(3)).as_matrix() @ R
            W[v, f] = c["weight"]
            D[v, f] = tensor_from_eig(evals, R)
    return flat_ids, W, D


def tensors_signal(W, D, bvals, bvecs) -> np.ndarray:
    """Noise-free multi-tensor signal ``(V, M)`` for stacked compartments."""
    q = np.einsum("mi,vfij,mj->vfm", bvecs, D, bvecs)
    return np.einsum("vf,vfm->vm", W, np.exp(-bvals[None, None, :] * q))


def generate_phantom(spec: PhantomSpec, scheme: GradientScheme) -> tuple[SignalVolume, GroundTruth]:
    """Raw phantom volume (``S0`` scaled, noisy) and its noise-free ground truth."""
    labels = spec.labels()
    mask = labels > 0
    flat_ids, W, D = _voxel_compartments(spec, labels)
    for v in range(W.shape[0]):
        if abs(W[v].sum() - 1.0) > 1e-9:
            raise InvalidArgumentError("compartment weights in every region must sum to 1")
    S = tensors_signal(W, D, scheme.bvals, scheme.bvecs)
    raw = add_rician_noise(spec.S0 * S, spec.sigma, seed=spec.seed, voxel_ids=flat_ids)
    M = len(scheme)
    vol = np.zeros(spec.dims + (M,))
    vol.reshape(-1, M)[flat_ids] = raw
    truth = np.zeros(spec.dims + (M,))
    truth.reshape(-1, M)[flat_ids] = S
    gt = GroundTruth(signal=truth, labels=labels, weights=W, tensors=D, spec=spec,
                     info={"S0": spec.S0, "sigma": spec.sigma, "seed": spec.seed})
    return SignalVolume(data=vol, mask=mask, scheme=scheme), gt
