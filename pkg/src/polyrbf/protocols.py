"""Acquisition protocols used by the benchmark and harmonisation experiments."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidArgumentError
from .geometry import fibonacci_centers
from .gradients import GradientScheme

HCP_SHELLS = (1000.0, 2000.0, 3000.0)
HCP_DIRS = 90
HCP_B0 = 18

#: Directions per shell (b=1000, 2000, 3000) of the six subsampled protocols.
SUBSAMPLED_PROTOCOLS = {
    1: (60, 30, 15),
    2: (60, 15, 30),
    3: (30, 60, 15),
    4: (30, 15, 60),
    5: (15, 30, 60),
    6: (15, 60, 30),
}
DEFAULT_REPLICATIONS = 50
TRAIN_FRACTION = 0.75


def shell_directions(n: int, seed: int) -> np.ndarray:
    """``n`` well-spread unit vectors, rigidly rotated by a seeded rotation."""
    R = Rotation.random(random_state=np.random.default_rng(seed)).as_matrix()
    return fibonacci_centers(n) @ R.T


def multishell_scheme(shells, dirs_per_shell, n_b0: int, seed: int = 0,
                      b0_every: int | None = None) -> GradientScheme:
    """Shell blocks of directions with ``n_b0`` b0 frames interspersed evenly."""
    if np.isscalar(dirs_per_shell):
        dirs_per_shell = [int(dirs_per_shell)] * len(shells)
    bvals, bvecs = [], []
    for i, (b, n) in enumerate(zip(shells, dirs_per_shell)):
        bvals.extend([float(b)] * n)
        bvecs.append(shell_directions(n, seed * 1000 + i))
    bvals = np.asarray(bvals)
    bvecs = np.concatenate(bvecs) if bvecs else np.zeros((0, 3))
    n_dw = bvals.size
    if n_b0 > 0:
        step = b0_every or max(1, n_dw // n_b0)
        pos = [min(i * step, n_dw) for i in range(n_b0)]
        bvals = np.insert(bvals, pos, 0.0)
        bvecs = np.insert(bvecs, pos, 0.0, axis=0)
    return GradientScheme(bvals, bvecs)


def hcp_scheme(seed: int = 0) -> GradientScheme:
    """HCP-like target: 3 shells x 90 directions plus 18 b0 frames (288 rows)."""
    return multishell_scheme(HCP_SHELLS, HCP_DIRS, HCP_B0, seed=seed)


def mushac_scheme(kind: str, seed: int = 0) -> GradientScheme:
    """ST (30 dirs) or SA (60 dirs) at b=1200 and 3000, with interspersed b0s."""
    kind = kind.upper()
    if kind == "ST":
        return multishell_scheme((1200.0, 3000.0), 30, 6, seed=seed)
    if kind == "SA":
        return multishell_scheme((1200.0, 3000.0), 60, 9, seed=seed)
    raise InvalidArgumentError(f"unknown MUSHAC protocol {kind!r}")


def train_test_split(scheme: GradientScheme, rng: np.random.Generator,
                     train_fraction: float = TRAIN_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Shell-stratified split of diffusion-weighted frames; b0 frames excluded.

    Each shell keeps ``round(train_fraction * n_shell)`` training frames.
    """
    train, test = [], []
    rounded = np.round(scheme.bvals)
    for b in scheme.shells():
        idx = np.flatnonzero((rounded == b) & ~scheme.b0_mask)
        perm = rng.permutation(idx)
        k = int(round(train_fraction * idx.size))
        train.append(perm[:k])
        test.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def subsample_protocol(scheme: GradientScheme, train_idx, counts, rng: np.random.Generator,
                       shells=HCP_SHELLS) -> np.ndarray:
    """Draw ``counts[i]`` training frames from shell ``shells[i]`` without replacement."""
    train_idx = np.asarray(train_idx)
    rounded = np.round(scheme.bvals[train_idx])
    picks = []
    for b, n in zip(shells, counts):
        pool = train_idx[rounded == round(b)]
        if pool.size < n:
            raise InvalidArgumentError(
                f"shell b={b:g} has only {pool.size} training frames, protocol needs {n}")
        picks.append(rng.choice(pool, size=n, replace=False))
    return np.sort(np.concatenate(picks))
