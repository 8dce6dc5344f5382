"""Signal volumes, NIfTI loading/saving and b0 normalisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .gradients import GradientScheme
from .nifti import NiftiImage, read_nifti_image, write_nifti_image

CLAMP_EPS = 1e-6


@dataclass(eq=False)
class SignalVolume:
    """A 4-D ``(nx, ny, nz, M)`` stack of frames (or a 3-D scalar map).

    ``normalized`` marks data divided by the voxel-wise mean b0; such
    volumes carry the scheme of their diffusion-weighted frames only.
    """

    data: np.ndarray
    mask: np.ndarray | None = None
    normalized: bool = False
    scheme: GradientScheme | None = None
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4):
            raise InvalidArgumentError(f"volume data must be 3-D or 4-D, got {self.data.ndim}-D")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.shape3:
                raise InvalidArgumentError(
                    f"mask shape {self.mask.shape} does not match volume grid {self.shape3}")
        if self.scheme is not None and self.n_frames != len(self.scheme):
            raise InvalidArgumentError(
                f"volume has {self.n_frames} frames but scheme has {len(self.scheme)}")

    @property
    def shape3(self) -> tuple:
        return tuple(self.data.shape[:3])

    @property
    def n_frames(self) -> int:
        return self.data.shape[3] if self.data.ndim == 4 else 1

    def voxels(self, mask=None) -> np.ndarray:
        """``(V, M)`` matrix of the masked voxels, C order."""
        m = self.mask if mask is None else np.asarray(mask, bool)
        if m is None:
            m = np.ones(self.shape3, bool)
        return self.data.reshape(self.shape3 + (self.n_frames,))[m]


def read_nifti(path, scheme: GradientScheme | None = None) -> SignalVolume:
    img = read_nifti_image(path)
    data = img.data
    if data.ndim == 5 and data.shape[3] == 1:
        data = data[:, :, :, 0, :]
    if data.ndim < 3:
        data = data.reshape(data.shape + (1,) * (3 - data.ndim))
    return SignalVolume(data=data, scheme=scheme, pixdim=img.pixdim, affine=img.affine)


def write_nifti(volume: SignalVolume, path) -> None:
    write_nifti_image(NiftiImage(data=volume.data, pixdim=volume.pixdim, affine=volume.affine), path)


def read_mask(path) -> np.ndarray:
    data = read_nifti_image(path).data
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    return data != 0


def write_map(data, path, like: SignalVolume | None = None) -> None:
    """Write a scalar 3-D map as float32 on the grid of ``like``."""
    pix = like.pixdim if like is not None else (1.0, 1.0, 1.0, 1.0)
    aff = like.affine if like is not None else None
    write_nifti_image(NiftiImage(data=np.asarray(data, dtype=np.float32), pixdim=pix, affine=aff), path)


@dataclass
class NormalizationReport:
    clamped: int = 0
    degenerate_voxels: int = 0
    dropped_frames: list = field(default_factory=list)
    kept_frames: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "clamped_values": self.clamped,
            "degenerate_voxels": self.degenerate_voxels,
            "dropped_frames": self.dropped_frames,
            "kept_frames": self.kept_frames,
        }


def normalize_b0(volume: SignalVolume, scheme: GradientScheme | None = None,
                 mask=None) -> tuple[SignalVolume, NormalizationReport]:
    """Divide diffusion-weighted frames by the voxel-wise mean b0 intensity.

    b0 frames are dropped.  Quotients below ``CLAMP_EPS`` (including
    nonpositive ones) are clamped to it and counted; voxels whose mean b0
    is not positive leave the mask.
    """
    scheme = scheme if scheme is not None else volume.scheme
    if scheme is None:
        raise InvalidArgumentError("normalize_b0 needs a gradient scheme")
    if volume.data.ndim != 4 or volume.n_frames != len(scheme):
        raise InvalidArgumentError(
            f"volume has {volume.n_frames} frames but scheme has {len(scheme)}")
    b0 = scheme.b0_indices
    dw = scheme.dw_indices
    if b0.size == 0:
        raise InvalidArgumentError("scheme has no b0 frames to normalise against")
    if mask is None:
        mask = volume.mask if volume.mask is not None else np.ones(volume.shape3, bool)
    mask = np.asarray(mask, dtype=bool)
    data = np.asarray(volume.data, dtype=np.float64)
    s0 = data[..., b0].mean(axis=-1)
    ok = s0 > 0
    report = NormalizationReport(dropped_frames=b0.tolist(), kept_frames=dw.tolist())
    report.degenerate_voxels = int(np.sum(mask & ~ok))
    new_mask = mask & ok
    out = np.ones(volume.shape3 + (dw.size,))
    ratio = data[new_mask][:, dw] / s0[new_mask][:, None]
    low = ratio < CLAMP_EPS
    report.clamped = int(np.sum(low))
    ratio[low] = CLAMP_EPS
    out[new_mask] = ratio
    return (
        SignalVolume(data=out, mask=new_mask, normalized=True, scheme=scheme.subset(dw),
                     pixdim=volume.pixdim, affine=volume.affine),
        report,
    )
