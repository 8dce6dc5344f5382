"""Binary container for fitted Poly-RBF volumes.

Layout (all integers little-endian)::

    magic    8 bytes   b"PRBFFIT\\0"
    version  uint32
    hlen     uint32    length of the JSON header in bytes
    header   hlen      UTF-8 JSON, keys sorted, padded with spaces to 8 bytes
    betas    V*NK      float64 little-endian, voxel-major
    resvar   V         float64 little-endian

The header holds the basis configuration, the training scheme, the grid,
the mask (as flat C-order indices), fingerprints and a SHA-256 of the
coefficient blocks.  It carries no timestamps, so identical fits give
identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError
from .estimator import FitVolume
from .geometry import BasisConfig, design_fingerprint
from .gradients import GradientScheme

MAGIC = b"PRBFFIT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def _payload(fit: FitVolume) -> bytes:
    betas = np.ascontiguousarray(fit.betas, dtype="<f8")
    rv = np.ascontiguousarray(fit.residual_variance, dtype="<f8")
    return betas.tobytes() + rv.tobytes()


def encode_fit(fit: FitVolume, extra: dict | None = None) -> bytes:
    """Serialise ``fit``; ``extra`` is stored verbatim under ``"extra"``."""
    payload = _payload(fit)
    header = {
        "format": "polyrbf-fit",
        "version": VERSION,
        "basis": fit.cfg.to_dict(),
        "basis_fingerprint": fit.cfg.fingerprint(),
        "design_fingerprint": fit.fingerprint,
        "scheme": {"bvals": fit.scheme.bvals.tolist(), "bvecs": fit.scheme.bvecs.tolist()},
        "scheme_fingerprint": fit.scheme.fingerprint(),
        "dims": list(fit.dims),
        "mask_indices": np.flatnonzero(fit.mask.reshape(-1)).tolist(),
        "n_voxels": int(fit.n_voxels),
        "n_coef": int(fit.cfg.n_coef),
        "data_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    text += b" " * (-(len(text) + _PREFIX.size) % 8)
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + payload


def decode_fit(raw: bytes) -> tuple[FitVolume, dict]:
    """Inverse of :func:`encode_fit`; returns the fit and its header."""
    if len(raw) < _PREFIX.size:
        raise ArtifactError("file too short to be a fit artifact")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ArtifactError("not a polyrbf fit artifact (bad magic)")
    if version != VERSION:
        raise ArtifactError(f"unsupported artifact version {version}; expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise ArtifactError("truncated artifact header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt artifact header: {exc}") from None
    V, P = header["n_voxels"], header["n_coef"]
    payload = raw[start:]
    if len(payload) != 8 * V * (P + 1):
        raise ArtifactError(f"artifact data has {len(payload)} bytes, expected {8 * V * (P + 1)}")
    if hashlib.sha256(payload).hexdigest() != header["data_sha256"]:
        raise ArtifactError("artifact data checksum mismatch")
    betas = np.frombuffer(payload, dtype="<f8", count=V * P).reshape(V, P).astype(np.float64)
    rv = np.frombuffer(payload, dtype="<f8", offset=8 * V * P, count=V).astype(np.float64)
    cfg = BasisConfig.from_dict(header["basis"])
    scheme = GradientScheme(np.asarray(header["scheme"]["bvals"]),
                            np.asarray(header["scheme"]["bvecs"]))
    dims = tuple(header["dims"])
    mask = np.zeros(int(np.prod(dims)), dtype=bool)
    mask[np.asarray(header["mask_indices"], dtype=np.intp)] = True
    mask = mask.reshape(dims)
    fp = design_fingerprint(scheme, cfg)
    if fp != header["design_fingerprint"]:
        raise ArtifactError("artifact fingerprint does not match its stored scheme and basis")
    return FitVolume(dims=dims, mask=mask, betas=betas, residual_variance=rv, cfg=cfg,
                     scheme=scheme, fingerprint=fp), header


def write_fit(fit: FitVolume, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_fit(fit, extra))


def read_fit(path) -> tuple[FitVolume, dict]:
    return decode_fit(Path(path).read_bytes())
