"""Command-line pipeline: model building, phantom synthesis, fitting, scoring,
fan reconstruction, and the leave-one-out harness.

Exit codes: 0 success, 1 degenerate/numerical failure, 2 usage or file errors.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dataio, metrics
from .cpd import CpdConfig, establish_correspondence
from .errors import (
    DegenerateInputError,
    FileFormatError,
    InvalidArgumentError,
    MeshTopologyError,
    RegistrationError,
    SsmsegError,
)
from .fitter import FitConfig, FitParams, fit
from .geometry import RigidTransform, Volume3D, VolumeKind
from .metrics import RegionalScore, regional_jaccard
from .ssm import build_model

_AXES = {"x": 0, "y": 1, "z": 2}


# ---------------------------------------------------------------------------
# Config file: JSON with sections cpd / ssm / fit / phantom / metrics
# ---------------------------------------------------------------------------

_SECTIONS = ("cpd", "ssm", "fit", "phantom", "metrics")


def load_config(path: str | Path | None) -> dict:
    """Parse the run configuration; every section is optional."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise InvalidArgumentError(f"unknown config sections: {sorted(unknown)}")

    out = {"raw": raw}
    cpd_sec = dict(raw.get("cpd", {}))
    if "lambda" in cpd_sec:
        cpd_sec["lam"] = cpd_sec.pop("lambda")
    fit_sec = dict(raw.get("fit", {}))
    if fit_sec.get("bounds") is not None:
        fit_sec["bounds"] = np.asarray(fit_sec["bounds"], np.float64)
    phantom_sec = dict(raw.get("phantom", {}))
    model_file = phantom_sec.pop("model_file", None)
    if model_file is not None:
        phantom_sec["model"] = dataio.read_model(model_file)
    try:
        out["cpd"] = CpdConfig(**cpd_sec)
        out["fit"] = FitConfig(**fit_sec)
        out["phantom"] = dataio.PhantomSpec(**phantom_sec)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad config field: {exc}") from exc
    ssm_sec = raw.get("ssm", {})
    out["variance_target"] = float(ssm_sec.get("variance_target", 0.90))
    met = raw.get("metrics", {})
    out["axis"] = _parse_axis(met.get("axis", "z"))
    out["apex_low"] = bool(met.get("apex_low", True))
    return out


def _parse_axis(axis) -> int:
    try:
        return _AXES[axis] if isinstance(axis, str) else int(axis)
    except (KeyError, ValueError) as exc:
        raise InvalidArgumentError(f"axis must be x, y, z, or 0-2, got {axis!r}") from exc


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, inputs: list[Path], seed, config_raw, timings):
    manifest = {
        "tool": "ssmseg",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config_raw,
        "inputs": {str(p): _digest(p) for p in inputs if p is not None and p.exists()},
        "timings_s": timings,
    }
    dataio.atomic_write_bytes(
        out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode()
    )
    return manifest


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_ssm(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    cloud_dir = Path(args.clouds)
    files = sorted(cloud_dir.glob("*.csv"))
    if len(files) < 3:
        raise InvalidArgumentError(f"{cloud_dir}: need at least 3 cloud files, found {len(files)}")
    ref_path = Path(args.reference)
    if not ref_path.exists():
        raise FileNotFoundError(f"reference cloud not found: {ref_path}")

    reference = dataio.read_cloud(ref_path)
    failures = []
    population = []
    for f in files:
        try:
            population.append(dataio.read_cloud(f))
        except SsmsegError as exc:
            failures.append(f"{f}: {exc}")
    if failures:
        raise FileFormatError("cloud files failed to load:\n" + "\n".join(failures))

    t1 = time.perf_counter()
    corresponded = establish_correspondence(reference, population, cfg["cpd"])
    t2 = time.perf_counter()
    model = build_model(corresponded, args.variance)
    t3 = time.perf_counter()

    out = Path(args.out)
    dataio.write_model(model, out)
    report = {
        "reference": str(ref_path),
        "members": [str(f) for f in files],
        "n_points": model.n_points,
        "population": model.population,
        "n_modes": model.n_modes,
        "explained_fraction": model.explained_fraction,
    }
    dataio.atomic_write_bytes(
        out.with_suffix(".correspondence.json"),
        json.dumps(report, indent=2, sort_keys=True).encode(),
    )
    write_manifest(
        out.parent,
        "build-ssm",
        [ref_path, *files],
        None,
        cfg["raw"],
        {"load": t1 - t0, "correspondence": t2 - t1, "pca": t3 - t2},
    )
    print(
        f"model: {model.population} instances, {model.n_points} points, "
        f"{model.n_modes} modes ({model.explained_fraction:.1%} variance) -> {out}"
    )
    return 0


def _params_json(params: FitParams, extra: dict) -> bytes:
    doc = {
        "w": [float(v) for v in params.w],
        "t": [float(v) for v in params.pose.t],
        "theta": [float(v) for v in params.pose.theta],
        **extra,
    }
    return json.dumps(doc, indent=2, sort_keys=True).encode()


def _load_params(path: Path) -> FitParams:
    doc = json.loads(path.read_text())
    return FitParams(np.asarray(doc["w"]), RigidTransform(np.asarray(doc["t"]), np.asarray(doc["theta"])))


def write_overlays(out_dir: Path, prob_map: Volume3D, pred: Volume3D, truth: Volume3D | None):
    """Per-slice PGM images: map as background, prediction boundary white,
    truth boundary black."""
    from scipy.ndimage import binary_erosion

    out_dir.mkdir(parents=True, exist_ok=True)
    base = (prob_map.data * 170.0 + 40.0).astype(np.uint8)
    pred_edge = pred.as_bool() & ~binary_erosion(pred.as_bool())
    truth_edge = None
    if truth is not None:
        truth_edge = truth.as_bool() & ~binary_erosion(truth.as_bool())
    for iz in range(prob_map.dims[2]):
        img = base[:, :, iz].copy()
        img[pred_edge[:, :, iz]] = 255
        if truth_edge is not None:
            img[truth_edge[:, :, iz]] = 0
        header = f"P5\n{img.shape[0]} {img.shape[1]}\n255\n".encode()
        dataio.atomic_write_bytes(out_dir / f"slice_{iz:03d}.pgm", header + img.T.tobytes())


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    model_path = Path(args.model)
    map_path = Path(args.map)
    for p in (model_path, map_path):
        if not p.exists():
            raise FileNotFoundError(f"input file not found: {p}")
    model = dataio.read_model(model_path)
    prob_map = dataio.read_volume(map_path)
    fit_cfg = cfg["fit"]
    if args.seed is not None:
        fit_cfg = replace(fit_cfg, seed=args.seed)

    t1 = time.perf_counter()
    result = fit(model, prob_map, fit_cfg)
    t2 = time.perf_counter()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_volume(result.mask, out / "mask.sfv")
    dataio.atomic_write_bytes(
        out / "params.json",
        _params_json(
            result.params,
            {
                "utility": result.utility,
                "evaluations": result.evaluations,
                "converged": result.converged,
            },
        ),
    )
    trace_lines = ["iteration,best_utility"] + [
        f"{i},{v:.17g}" for i, v in enumerate(result.trace)
    ]
    dataio.atomic_write_bytes(out / "trace.csv", ("\n".join(trace_lines) + "\n").encode())

    summary = {
        "utility": result.utility,
        "evaluations": result.evaluations,
        "converged": result.converged,
        "mask_voxels": int(result.mask.data.sum()),
    }
    truth = None
    if args.truth:
        truth = dataio.read_volume(Path(args.truth))
        score = regional_jaccard(result.mask, truth, cfg["axis"], cfg["apex_low"])
        summary["jsc"] = score.as_tuple()
    dataio.atomic_write_bytes(
        out / "summary.json", json.dumps(summary, indent=2, sort_keys=True).encode()
    )
    if args.overlay:
        write_overlays(out / "overlays", prob_map, result.mask, truth)
    write_manifest(
        out,
        "fit",
        [model_path, map_path] + ([Path(args.truth)] if args.truth else []),
        fit_cfg.seed,
        cfg["raw"],
        {"load": t1 - t0, "fit": t2 - t1},
    )
    msg = f"utility {result.utility:.3f} after {result.evaluations} evaluations -> {out}"
    if "jsc" in summary:
        msg += f" | overall JSC {summary['jsc'][0]:.2f}"
    print(msg)
    return 0


def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    spec = load_config(args.spec)["phantom"] if args.spec else dataio.PhantomSpec()
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    (out / "params").mkdir(parents=True, exist_ok=True)
    base_seed = args.seed if args.seed is not None else spec.seed
    for i in range(args.n):
        case = replace(spec, seed=base_seed + i)
        truth, prob_map, params = dataio.make_phantom(case)
        name = f"p{i:03d}"
        dataio.write_volume(prob_map, out / "maps" / f"{name}.sfv")
        dataio.write_volume(truth, out / "truth" / f"{name}.sfv")
        dataio.atomic_write_bytes(
            out / "params" / f"{name}.json", _params_json(params, {"seed": case.seed})
        )
    write_manifest(
        out,
        "synth",
        [Path(args.spec)] if args.spec else [],
        base_seed,
        {"n": args.n},
        {"synth": time.perf_counter() - t0},
    )
    print(f"wrote {args.n} phantoms -> {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    truth_dir = Path(args.truth)
    axis = _parse_axis(args.axis)
    preds = sorted(pred_dir.glob("*.sfv"))
    if not preds:
        raise FileNotFoundError(f"no .sfv predictions in {pred_dir}")
    results: list[tuple[str, RegionalScore]] = []
    for p in preds:
        q = truth_dir / p.name
        if not q.exists():
            raise FileNotFoundError(f"missing truth volume for {p.name}: {q}")
        score = regional_jaccard(dataio.read_volume(p), dataio.read_volume(q), axis)
        results.append((p.stem, score))
    rows = metrics.tabulate(results)
    out = Path(args.out)
    dataio.atomic_write_bytes(out, metrics.scores_csv(results).encode())
    summary_path = out.with_name(out.stem + "_summary" + out.suffix)
    dataio.atomic_write_bytes(summary_path, metrics.render_csv(rows).encode())
    sys.stdout.write(metrics.render_text(rows))
    return 0


def cmd_recon(args) -> int:
    frames_dir = Path(args.frames)
    frame_files = sorted(
        [p for p in frames_dir.iterdir() if p.suffix in (".npy", ".csv")]
    ) if frames_dir.exists() else []
    if not frame_files:
        raise FileNotFoundError(f"no .npy/.csv frames in {frames_dir}")
    frames = []
    for p in frame_files:
        frames.append(np.load(p) if p.suffix == ".npy" else np.loadtxt(p, delimiter=",", ndmin=2))
    angle_lines = Path(args.angles).read_text().strip().splitlines()
    if not angle_lines or angle_lines[0].strip().lower() != "angle_deg":
        raise FileFormatError(f"{args.angles}: expected header 'angle_deg'")
    angles = np.array([float(v) for v in angle_lines[1:]], np.float64)
    if angles.size != len(frames):
        raise InvalidArgumentError(
            f"{angles.size} angles for {len(frames)} frames; counts must match"
        )
    sp_r, sp_c = (float(v) for v in args.pixel_spacing.split(","))
    acq = dataio.FanAcquisition(
        np.stack(frames), angles, (sp_r, sp_c), args.radial_offset, args.axial_start
    )
    vol = dataio.reconstruct_volume(acq, args.spacing)
    dataio.write_volume(vol, args.out)
    if args.valid_out:
        valid = Volume3D(
            vol.dims, vol.spacing, vol.origin,
            vol.meta["fan_valid"].astype(np.float32), VolumeKind.MASK,
        )
        dataio.write_volume(valid, args.valid_out)
    print(f"reconstructed {vol.dims} volume at {args.spacing} mm -> {args.out}")
    return 0


def _loo_one_case(case_dir: str, case_names: list[str], cases_root: str, cfg_path, out_root: str):
    """Worker: build the model excluding this case, fit all of its maps."""
    cfg = load_config(cfg_path)
    case = Path(case_dir)
    root = Path(cases_root)
    others = [root / n for n in case_names if n != case.name]
    reference = dataio.read_cloud(others[0] / "cloud.csv")
    population = [dataio.read_cloud(d / "cloud.csv") for d in others]
    corresponded = establish_correspondence(reference, population, cfg["cpd"])
    model = build_model(corresponded, cfg["variance_target"])

    out_dir = Path(out_root) / case.name
    out_dir.mkdir(parents=True, exist_ok=True)
    dataio.write_model(model, out_dir / "model.ssm")
    scores = []
    for i, map_path in enumerate(sorted((case / "maps").glob("*.sfv"))):
        prob_map = dataio.read_volume(map_path)
        fit_cfg = replace(cfg["fit"], seed=cfg["fit"].seed + i)
        result = fit(model, prob_map, fit_cfg)
        dataio.write_volume(result.mask, out_dir / f"{map_path.stem}_mask.sfv")
        truth_path = case / "truth" / map_path.name
        if truth_path.exists():
            truth = dataio.read_volume(truth_path)
            score = regional_jaccard(result.mask, truth, cfg["axis"], cfg["apex_low"])
            scores.append((map_path.stem, score.as_tuple()))
    info = {
        "case": case.name,
        "model_population": model.population,
        "excluded": case.name,
        "n_maps": len(scores),
    }
    dataio.atomic_write_bytes(
        out_dir / "case.json", json.dumps(info, indent=2, sort_keys=True).encode()
    )
    return case.name, scores, None


def cmd_loo(args) -> int:
    t0 = time.perf_counter()
    root = Path(args.cases)
    case_dirs = sorted([d for d in root.iterdir() if d.is_dir()]) if root.exists() else []
    if len(case_dirs) < 2:
        raise InvalidArgumentError(
            f"{root}: leave-one-out needs at least 2 case directories, found {len(case_dirs)}"
        )
    names = [d.name for d in case_dirs]
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    work = [(str(d), names, str(root), args.config, str(out_root)) for d in case_dirs]
    outcomes = []
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(_loo_one_case, *w): w[0] for w in work}
            for fut in concurrent.futures.as_completed(futures):
                case_name = Path(futures[fut]).name
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # per-case isolation
                    outcomes.append((case_name, [], f"{type(exc).__name__}: {exc}"))
    else:
        for w in work:
            case_name = Path(w[0]).name
            try:
                outcomes.append(_loo_one_case(*w))
            except Exception as exc:
                outcomes.append((case_name, [], f"{type(exc).__name__}: {exc}"))

    outcomes.sort(key=lambda o: o[0])
    results = []
    errors = {}
    for case_name, scores, err in outcomes:
        if err:
            errors[case_name] = err
            continue
        for _, tup in scores:
            results.append((case_name, RegionalScore(*tup)))
    if results:
        rows = metrics.tabulate(results)
        dataio.atomic_write_bytes(out_root / "report.csv", metrics.render_csv(rows).encode())
        dataio.atomic_write_bytes(
            out_root / "scores.csv", metrics.scores_csv(results).encode()
        )
        sys.stdout.write(metrics.render_text(rows))
    if errors:
        dataio.atomic_write_bytes(
            out_root / "errors.json", json.dumps(errors, indent=2, sort_keys=True).encode()
        )
        for name, err in errors.items():
            print(f"case {name} failed: {err}", file=sys.stderr)
    write_manifest(
        out_root,
        "loo",
        [Path(args.config)] if args.config else [],
        None,
        load_config(args.config)["raw"],
        {"total": time.perf_counter() - t0},
    )
    return 0 if not errors else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ssmseg",
        description="Statistical shape model segmentation of 3D probability maps",
    )
    ap.add_argument("--version", action="version", version=f"ssmseg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-ssm", help="correspond clouds and fit the PCA shape model")
    p.add_argument("--clouds", required=True, help="directory of point-cloud CSV files")
    p.add_argument("--reference", required=True, help="reference cloud CSV")
    p.add_argument("--variance", type=float, default=0.90)
    p.add_argument("--out", required=True, help="output .ssm path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_build_ssm)

    p = sub.add_parser("fit", help="fit the model to a probability map")
    p.add_argument("--model", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--truth", default=None, help="optional truth mask for scoring")
    p.add_argument("--overlay", action="store_true", help="write per-slice PGM overlays")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", help="generate synthetic phantoms")
    p.add_argument("--spec", default=None, help="config JSON with a phantom section")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score predicted masks against truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--axis", default="z")
    p.add_argument("--out", required=True, help="per-volume CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recon", help="fan-to-Cartesian volume reconstruction")
    p.add_argument("--frames", required=True, help="directory of .npy/.csv frames")
    p.add_argument("--angles", required=True, help="CSV with header angle_deg")
    p.add_argument("--spacing", type=float, required=True, help="isotropic voxel size, mm")
    p.add_argument("--pixel-spacing", default="0.5,0.5", help="radial,axial mm per pixel")
    p.add_argument("--radial-offset", type=float, default=0.0)
    p.add_argument("--axial-start", type=float, default=0.0)
    p.add_argument("--valid-out", default=None, help="optional validity mask .sfv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("loo", help="leave-one-out study over case directories")
    p.add_argument("--cases", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loo)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, FileFormatError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DegenerateInputError, RegistrationError, MeshTopologyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
