"""Command-line interface: fit, predict, harmonize, simulate, evaluate, benchmark.

Exit codes: 0 success, 1 internal error, 2 invalid input, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .artifact import read_fit, write_fit
from .errors import PolyRBFError, StageError
from .estimator import fit_signal_volume, select_order
from .experiments import benchmark_volume
from .geometry import DEFAULT_K, DEFAULT_N, DEFAULT_TAPER, BasisConfig
from .gradients import GradientScheme, read_scheme, write_scheme
from .harmonize import Dataset, PipelineConfig, harmonize_pipeline
from .metrics import mse_log
from .phantom import PhantomSpec, default_phantom_spec, generate_phantom
from .predictor import resample_volume
from .protocols import SUBSAMPLED_PROTOCOLS, DEFAULT_REPLICATIONS, hcp_scheme
from .volume import CLAMP_EPS, SignalVolume, normalize_b0, read_mask, read_nifti, write_map, write_nifti

logger = logging.getLogger("polyrbf")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID, EXIT_IO = 0, 1, 2, 3


class UsageError(PolyRBFError, ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"file not found: {path}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _scheme(bvals, bvecs) -> GradientScheme:
    for p in (bvals, bvecs):
        if not Path(p).exists():
            raise FileNotFoundError(f"file not found: {p}")
    return read_scheme(bvals, bvecs)


def _volume(dwi, scheme, mask_path=None) -> SignalVolume:
    if not Path(dwi).exists():
        raise FileNotFoundError(f"file not found: {dwi}")
    vol = read_nifti(dwi, scheme)
    if mask_path is not None:
        if not Path(mask_path).exists():
            raise FileNotFoundError(f"file not found: {mask_path}")
        vol.mask = read_mask(mask_path)
        if vol.mask.shape != vol.shape3:
            raise UsageError(f"mask {mask_path} has shape {vol.mask.shape}, "
                             f"volume {dwi} has {vol.shape3}")
    return vol


def _basis_options(cfg: dict) -> dict:
    known = {"N", "K", "ridge_d", "taper_mult", "K_candidates", "folds"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; allowed {sorted(known)}")
    out = {"N": int(cfg.get("N", DEFAULT_N)), "K": cfg.get("K", DEFAULT_K),
           "ridge_d": cfg.get("ridge_d"), "taper_mult": float(cfg.get("taper_mult", DEFAULT_TAPER))}
    if out["K"] != "auto":
        out["K"] = int(out["K"])
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    scheme = _scheme(args.bvals, args.bvecs)
    vol = _volume(args.dwi, scheme, args.mask)
    cfg_in = _load_json(args.config) if args.config else {}
    opts = _basis_options(cfg_in)
    norm, nrep = normalize_b0(vol)
    selection = None
    if opts["K"] == "auto":
        cands = tuple(cfg_in.get("K_candidates", (1, 2, 3, 4)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sel = select_order(norm.scheme, norm.voxels(), K_candidates=cands,
                               folds=int(cfg_in.get("folds", 5)), seed=args.seed, N=opts["N"],
                               ridge_d=opts["ridge_d"], taper_mult=opts["taper_mult"])
        opts["K"] = sel.K
        selection = {"K": sel.K, "cv_loss": {str(k): v for k, v in sel.cv_loss.items()},
                     "skipped": sel.skipped}
    basis = BasisConfig.for_scheme(norm.scheme, N=opts["N"], K=opts["K"],
                                   taper_mult=opts["taper_mult"], ridge_d=opts["ridge_d"])
    fit = fit_signal_volume(norm, basis, threads=args.threads)
    grid = {"pixdim": [float(x) for x in vol.pixdim],
            "affine": None if vol.affine is None else np.asarray(vol.affine).tolist()}
    write_fit(fit, args.out, extra={"grid": grid, "order_selection": selection})
    M, P = len(norm.scheme), basis.n_coef
    rss = fit.residual_variance * max(M - P, 1)
    report = {
        "artifact": str(args.out),
        "n_voxels": fit.n_voxels,
        "basis": {"N": basis.N, "K": basis.K, "h": basis.h, "b_scale": basis.b_scale,
                  "taper_mult": basis.taper_mult, "ridge_d": basis.ridge_d},
        "in_sample_log_mse": float(rss.sum() / (M * max(fit.n_voxels, 1))),
        "normalization": nrep.to_dict(),
        "order_selection": selection,
        "seed": args.seed,
        "timing_seconds": round(time.perf_counter() - t0, 3),
    }
    _dump_json(report, args.report or str(args.out) + ".json")
    logger.info("fitted %d voxels with N=%d K=%d", fit.n_voxels, basis.N, basis.K)
    return EXIT_OK


def cmd_predict(args) -> int:
    if not Path(args.fit).exists():
        raise FileNotFoundError(f"file not found: {args.fit}")
    fit, header = read_fit(args.fit)
    target = _scheme(args.bvals, args.bvecs)
    pred, rep = resample_volume(fit, target, allow_extrapolation=args.allow_extrapolation,
                                threads=args.threads)
    grid = header.get("extra", {}).get("grid") or {}
    pred.pixdim = tuple(grid.get("pixdim", (1.0, 1.0, 1.0, 1.0)))
    pred.affine = None if grid.get("affine") is None else np.asarray(grid["affine"])
    pred.data = pred.data.astype(np.float32)
    write_nifti(pred, args.out)
    if args.report:
        _dump_json(rep, args.report)
    return EXIT_OK


def _on_off(v: str) -> bool:
    v = v.lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {v!r}")


def cmd_harmonize(args) -> int:
    manifest = _load_json(args.manifest)
    base = Path(args.manifest).parent
    entries = manifest.get("datasets")
    if not entries:
        raise UsageError(f"{args.manifest}: manifest lists no datasets")

    def rel(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    if "target" in manifest:
        target = _scheme(rel(manifest["target"]["bvals"]), rel(manifest["target"]["bvecs"]))
    else:
        target = hcp_scheme(seed=args.seed)
    opts = _basis_options(manifest.get("config", {}))
    if opts["K"] == "auto":
        raise UsageError("harmonize needs a fixed K")
    datasets, inputs = [], []
    for i, e in enumerate(entries):
        missing = [k for k in ("name", "dwi", "bvals", "bvecs", "batch") if k not in e]
        if missing:
            raise UsageError(f"{args.manifest}: dataset {i} lacks keys {missing}")
        sch = _scheme(rel(e["bvals"]), rel(e["bvecs"]))
        vol = _volume(rel(e["dwi"]), sch, rel(e["mask"]) if e.get("mask") else None)
        datasets.append(Dataset(name=str(e["name"]), volume=vol, batch=str(e["batch"]),
                                subject=e.get("subject")))
        inputs.append({"name": e["name"], "dwi_sha256": _file_sha256(rel(e["dwi"])),
                       "scheme_fingerprint": sch.fingerprint(), "batch": e["batch"]})
    cfg = PipelineConfig(N=opts["N"], K=opts["K"], taper_mult=opts["taper_mult"],
                         ridge_d=opts["ridge_d"], feature=args.feature, combat=args.combat,
                         allow_extrapolation=args.allow_extrapolation, threads=args.threads)
    res = harmonize_pipeline(datasets, target, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    like = datasets[0].volume
    written = []
    for name, maps in res.maps.items():
        for key, arr in sorted(maps.items()):
            fn = f"{name}_{res.feature}_{key}.nii"
            write_map(arr, out / fn, like)
            written.append(fn)
    write_map(res.mask.astype(np.float32), out / "common_mask.nii", like)
    _dump_json({"version": __version__, "seed": args.seed, "feature": res.feature,
                "combat": cfg.combat, "target_fingerprint": target.fingerprint(),
                "basis": {"N": cfg.N, "K": cfg.K, "taper_mult": cfg.taper_mult,
                          "ridge_d": cfg.ridge_d},
                "inputs": inputs, "outputs": written, "reports": res.reports},
               out / "provenance.json")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.spec:
        d = _load_json(args.spec)
        d.setdefault("seed", args.seed)
        spec = PhantomSpec.from_dict(d)
    else:
        spec = default_phantom_spec(tuple(args.dims), sigma_rel=args.sigma_rel, seed=args.seed)
    scheme = _scheme(args.bvals, args.bvecs) if args.bvals else hcp_scheme(seed=args.seed)
    raw, gt = generate_phantom(spec, scheme)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw.data = raw.data.astype(np.float32)
    write_nifti(raw, out / "dwi.nii")
    write_nifti(SignalVolume(data=gt.signal.astype(np.float32)), out / "truth.nii")
    write_map(gt.labels.astype(np.float32), out / "labels.nii")
    write_scheme(scheme, out / "dwi.bval", out / "dwi.bvec")
    _dump_json(gt.to_sidecar(), out / "sidecar.json")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = _volume(args.pred, None)
    truth = _volume(args.truth, None, args.mask)
    if pred.data.shape != truth.data.shape:
        raise UsageError(f"{args.pred} shape {pred.data.shape} differs from "
                         f"{args.truth} shape {truth.data.shape}")
    mask = truth.mask if truth.mask is not None else np.any(truth.data.reshape(
        truth.shape3 + (-1,)) > 0, axis=-1)
    frames = np.arange(pred.n_frames)
    if args.bvals:
        frames = _scheme(args.bvals, args.bvecs).dw_indices
    P = pred.voxels(mask)[:, frames].astype(np.float64)
    T = truth.voxels(mask)[:, frames].astype(np.float64)
    clamped = int(np.sum(P < CLAMP_EPS) + np.sum(T < CLAMP_EPS))
    P, T = np.maximum(P, CLAMP_EPS), np.maximum(T, CLAMP_EPS)
    per_voxel = np.mean((np.log(P) - np.log(T)) ** 2, axis=1)
    report = {"mse_log": mse_log(P, T), "n_voxels": int(P.shape[0]), "n_frames": int(frames.size),
              "clamped_values": clamped,
              "per_voxel_quantiles": {str(q): float(np.quantile(per_voxel, q))
                                      for q in (0.5, 0.9, 0.99)} if per_voxel.size else {}}
    if args.out:
        _dump_json(report, args.out)
    else:
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _parse_protocols(text: str) -> dict:
    if text == "table1":
        return dict(SUBSAMPLED_PROTOCOLS)
    try:
        ids = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--protocols must be 'table1' or a comma list of 1-6, got {text!r}") from None
    bad = [i for i in ids if i not in SUBSAMPLED_PROTOCOLS]
    if bad or not ids:
        raise UsageError(f"unknown protocol ids {bad or text!r}")
    return {i: SUBSAMPLED_PROTOCOLS[i] for i in ids}


def cmd_benchmark(args) -> int:
    protocols = _parse_protocols(args.protocols)
    if args.dwi:
        scheme = _scheme(args.bvals, args.bvecs)
        raw = _volume(args.dwi, scheme, args.mask)
    else:
        if args.spec:
            d = _load_json(args.spec)
            d.setdefault("seed", args.seed)
            spec = PhantomSpec.from_dict(d)
        else:
            spec = default_phantom_spec(tuple(args.dims), sigma_rel=args.sigma_rel, seed=args.seed)
        raw, _ = generate_phantom(spec, hcp_scheme(seed=args.seed))
    rows = benchmark_volume(raw, protocols, replications=args.replications, seed=args.seed,
                            threads=args.threads)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protocol", "replication", "n_train", "n_test", "polyrbf_mse", "baseline_mse"])
    for r in rows:
        w.writerow([r.protocol, r.replication, r.n_train, r.n_test, repr(r.polyrbf),
                    repr(r.baseline)])
    for prot in sorted(protocols):
        sel = [r for r in rows if r.protocol == prot]
        w.writerow([prot, "mean", sel[0].n_train, sel[0].n_test,
                    repr(float(np.mean([r.polyrbf for r in sel]))),
                    repr(float(np.mean([r.baseline for r in sel])))])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (output unchanged)")
    common.add_argument("--verbose", "-v", action="count", default=0)

    p = argparse.ArgumentParser(prog="polyrbf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit Poly-RBF to a DWI volume")
    f.add_argument("--dwi", required=True)
    f.add_argument("--bvals", required=True)
    f.add_argument("--bvecs", required=True)
    f.add_argument("--mask")
    f.add_argument("--config", help="JSON with N, K (or \"auto\"), ridge_d, taper_mult")
    f.add_argument("--out", required=True, help="fit artifact path")
    f.add_argument("--report", help="JSON report path (default: <out>.json)")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", parents=[common], help="predict signals on a new scheme")
    pr.add_argument("--fit", required=True)
    pr.add_argument("--bvals", required=True)
    pr.add_argument("--bvecs", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--report")
    pr.add_argument("--allow-extrapolation", action="store_true")
    pr.set_defaults(func=cmd_predict)

    h = sub.add_parser("harmonize", parents=[common], help="run the harmonisation pipeline")
    h.add_argument("--manifest", required=True)
    h.add_argument("--out-dir", required=True)
    h.add_argument("--combat", type=_on_off, default=True, metavar="on|off")
    h.add_argument("--feature", choices=("FA", "MD"), default="FA")
    h.add_argument("--allow-extrapolation", action="store_true")
    h.set_defaults(func=cmd_harmonize)

    s = sub.add_parser("simulate", parents=[common], help="generate a multi-tensor phantom")
    s.add_argument("--spec", help="phantom JSON (default: four-region phantom)")
    s.add_argument("--dims", type=int, nargs=3, default=(16, 16, 16))
    s.add_argument("--sigma-rel", type=float, default=0.02)
    s.add_argument("--bvals")
    s.add_argument("--bvecs")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", parents=[common], help="log-MSE of a prediction")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--mask")
    e.add_argument("--bvals")
    e.add_argument("--bvecs")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", parents=[common], help="held-out prediction benchmark")
    b.add_argument("--protocols", default="table1")
    b.add_argument("--replications", type=int, default=DEFAULT_REPLICATIONS)
    b.add_argument("--spec")
    b.add_argument("--dims", type=int, nargs=3, default=(16, 16, 16))
    b.add_argument("--sigma-rel", type=float, default=0.02)
    b.add_argument("--dwi")
    b.add_argument("--bvals")
    b.add_argument("--bvecs")
    b.add_argument("--mask")
    b.add_argument("--out")
    b.set_defaults(func=cmd_benchmark)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return EXIT_INVALID
    return EXIT_INTERNAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code == EXIT_INTERNAL:
            logger.exception("internal error")
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
