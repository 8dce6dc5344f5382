"""Acquisition schemes and FSL ``bvals``/``bvecs`` text I/O."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

#: b-values at or below this are treated as unweighted (b0) frames.
B0_THRESHOLD = 1e-6
_UNIT_TOL = 1e-3


@dataclass(frozen=True, eq=False)
class GradientScheme:
    """Paired b-values (s/mm^2) and b-vectors for ``M`` frames.

    Directions of diffusion-weighted frames are renormalised to unit
    length on construction; b0 frames may carry a zero vector.
    """

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.array(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.array(self.bvecs, dtype=np.float64)
        if bvecs.ndim != 2 or bvecs.shape[1] != 3:
            raise InvalidArgumentError(f"bvecs must have shape (M, 3), got {bvecs.shape}")
        if bvals.size == 0:
            raise InvalidArgumentError("a gradient scheme needs at least one frame")
        if bvecs.shape[0] != bvals.size:
            raise InvalidArgumentError(
                f"length mismatch: {bvals.size} b-values but {bvecs.shape[0]} b-vectors"
            )
        if not (np.all(np.isfinite(bvals)) and np.all(np.isfinite(bvecs))):
            raise InvalidArgumentError("gradient scheme contains non-finite values")
        if np.any(bvals < 0):
            bad = np.flatnonzero(bvals < 0).tolist()
            raise InvalidArgumentError(f"negative b-values at frames {bad}")
        norms = np.linalg.norm(bvecs, axis=1)
        dw = bvals > B0_THRESHOLD
        zero = dw & (norms == 0)
        if np.any(zero):
            raise InvalidArgumentError(
                f"zero b-vector on diffusion-weighted frames {np.flatnonzero(zero).tolist()}"
            )
        off = dw & (np.abs(norms - 1.0) > _UNIT_TOL)
        if np.any(off):
            raise InvalidArgumentError(
                f"b-vectors not unit norm (tolerance {_UNIT_TOL}) at frames "
                f"{np.flatnonzero(off).tolist()}"
            )
        # leave unit vectors alone so that renormalising is idempotent
        fix = (norms > 0) & (np.abs(norms - 1.0) > 8 * np.finfo(np.float64).eps)
        bvecs[fix] /= norms[fix, None]
        bvals.setflags(write=False)
        bvecs.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.size

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals <= B0_THRESHOLD

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.b0_mask)

    @property
    def dw_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.b0_mask)

    @property
    def max_b(self) -> float:
        return float(self.bvals.max())

    def shells(self, decimals: int = 0) -> np.ndarray:
        """Distinct nonzero b-values, rounded to ``decimals``."""
        return np.unique(np.round(self.bvals[~self.b0_mask], decimals))

    def subset(self, indices) -> "GradientScheme":
        idx = np.asarray(indices, dtype=np.intp)
        return GradientScheme(self.bvals[idx], self.bvecs[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.bvals, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.bvecs, dtype="<f8").tobytes())
        return h.hexdigest()

    def rotated(self, R) -> "GradientScheme":
        return GradientScheme(self.bvals, self.bvecs @ np.asarray(R, dtype=np.float64).T)


def _parse_rows(text: str, what: str) -> list[list[float]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        row = []
        for col, tok in enumerate(tokens, start=1):
            try:
                row.append(float(tok))
            except ValueError:
                raise InvalidArgumentError(
                    f"{what}: non-numeric token {tok!r} at line {lineno}, column {col}"
                ) from None
        rows.append(row)
    return rows


def parse_bvals(text: str) -> np.ndarray:
    """Parse FSL bvals written either as one row or as one column."""
    rows = _parse_rows(text, "bvals")
    if not rows:
        raise InvalidArgumentError("bvals: no values found")
    if len(rows) == 1:
        vals = rows[0]
    elif all(len(r) == 1 for r in rows):
        vals = [r[0] for r in rows]
    else:
        raise InvalidArgumentError("bvals: expected a single row or a single column")
    return np.asarray(vals, dtype=np.float64)


def parse_bvecs(text: str) -> np.ndarray:
    """Parse FSL bvecs (3 rows x M columns); returns an ``(M, 3)`` array.

    The transposed ``M x 3`` layout is accepted too when unambiguous.
    """
    rows = _parse_rows(text, "bvecs")
    widths = {len(r) for r in rows}
    if len(rows) == 3 and len(widths) == 1:
        return np.asarray(rows, dtype=np.float64).T
    if rows and widths == {3}:
        return np.asarray(rows, dtype=np.float64)
    raise InvalidArgumentError(
        f"bvecs: expected 3 rows of equal length, got {len(rows)} rows with widths {sorted(widths)}"
    )


def scheme_from_text(bvals_text: str, bvecs_text: str) -> GradientScheme:
    return GradientScheme(parse_bvals(bvals_text), parse_bvecs(bvecs_text))


def read_scheme(bvals_path, bvecs_path) -> GradientScheme:
    bvals_text = Path(bvals_path).read_text()
    bvecs_text = Path(bvecs_path).read_text()
    return scheme_from_text(bvals_text, bvecs_text)


def format_bvals(scheme: GradientScheme) -> str:
    return " ".join(f"{b:.17g}" for b in scheme.bvals) + "\n"


def format_bvecs(scheme: GradientScheme) -> str:
    return "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in scheme.bvecs.T)


def write_scheme(scheme: GradientScheme, bvals_path, bvecs_path) -> None:
    Path(bvals_path).write_text(format_bvals(scheme))
    Path(bvecs_path).write_text(format_bvecs(scheme))
