"""Command line entry point: ``rbfssm <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O or
parse error. Every command validates its inputs before writing anything.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .errors import BadModeCount, ConfigError, RbfSsmError
from .optimize import FitConfig, fit_cohort
from .rbfshape import KERNELS, ControlPointSet
from .recon import read_mesh, reconstruct_mesh, surface_to_surface_distance, write_mesh
from .ssm import compactness, compute_pca, generalization, specificity
from .volume import Segmentation, ShapeSpec, sdf_from_segmentation, synth_segmentation

log = logging.getLogger("rbfssm")

SYNTH_KEYS = {"dims", "spacing", "origin", "shapes", "sweep", "seed", "output_dir"}
SWEEP_KEYS = {"kind", "count", "center", "axes_min", "axes_max", "radius", "jitter"}
FIT_EXTRA_KEYS = {"inputs", "output_dir"}


def _check_keys(d, allowed, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown {what} keys {sorted(extra)}")


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def _prepare_output_dir(path):
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- synth --------------------------------------------------------------------

def sweep_specs(sweep, seed):
    """Ellipsoids (or spheres) whose axes are swept linearly across ``count`` shapes.

    ``jitter`` adds seeded uniform noise in ``[-jitter, jitter]`` to every axis.
    """
    _check_keys(sweep, SWEEP_KEYS, "sweep")
    try:
        return _sweep(sweep, seed)
    except KeyError as exc:
        raise ConfigError(f"sweep needs {exc.args[0]!r}") from None


def _sweep(sweep, seed):
    kind = sweep.get("kind", "ellipsoid")
    count = int(sweep.get("count", 10))
    if count < 1:
        raise ConfigError("sweep count must be >= 1")
    center = np.asarray(sweep["center"], dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    jitter = float(sweep.get("jitter", 0.0))
    t = np.linspace(0.0, 1.0, count) if count > 1 else np.zeros(1)
    specs = []
    if kind == "ellipsoid":
        lo = np.asarray(sweep["axes_min"], dtype=float)
        hi = np.asarray(sweep["axes_max"], dtype=float)
        for ti in t:
            axes = lo + ti * (hi - lo) + rng.uniform(-jitter, jitter, 3)
            specs.append(ShapeSpec("ellipsoid", tuple(center.tolist()), axes=tuple(axes.tolist())))
    elif kind == "sphere":
        r0, r1 = (float(v) for v in np.broadcast_to(sweep["radius"], 2))
        for ti in t:
            r = r0 + ti * (r1 - r0) + float(rng.uniform(-jitter, jitter))
            specs.append(ShapeSpec("sphere", tuple(center.tolist()), radius=r))
    else:
        raise ConfigError(f"sweeps support ellipsoid or sphere, not {kind!r}")
    return specs


def cmd_synth(config_path, output_dir=None):
    cfg = io.read_json(config_path)
    _check_keys(cfg, SYNTH_KEYS, "synth config")
    try:
        dims = tuple(int(v) for v in cfg["dims"])
    except KeyError:
        raise ConfigError("synth config needs 'dims'") from None
    spacing = tuple(cfg.get("spacing", (1.0, 1.0, 1.0)))
    origin = tuple(cfg.get("origin", (0.0, 0.0, 0.0)))
    seed = int(cfg.get("seed", 0))
    if ("shapes" in cfg) == ("sweep" in cfg):
        raise ConfigError("synth config needs exactly one of 'shapes' or 'sweep'")
    if "shapes" in cfg:
        specs = []
        for i, d in enumerate(cfg["shapes"]):
            try:
                specs.append(ShapeSpec.from_dict(d))
            except ConfigError as exc:
                raise ConfigError(f"shape {i}: {exc}") from None
    else:
        specs = sweep_specs(cfg["sweep"], seed)

    segs = []
    for i, spec in enumerate(specs):
        try:
            segs.append(synth_segmentation(spec, dims, spacing, origin))
        except ConfigError as exc:
            raise type(exc)(f"shape {i}: {exc}") from None
    sdfs = [sdf_from_segmentation(s) for s in segs]

    out = _prepare_output_dir(output_dir or _resolve(Path(config_path).parent, cfg.get("output_dir", ".")))
    paths = []
    for i, (seg, sdf) in enumerate(zip(segs, sdfs)):
        io.write_volume(out / f"shape_{i:03d}_seg.svol", seg)
        io.write_volume(out / f"shape_{i:03d}_sdf.svol", sdf)
        paths.append(out / f"shape_{i:03d}_sdf.svol")
    io.write_json(out / "shapes.json", {"dims": list(dims), "spacing": list(spacing), "origin": list(origin),
                                        "seed": seed, "shapes": [s.to_dict() for s in specs]})
    return paths


# --- sdf ----------------------------------------------------------------------

def cmd_sdf(seg_path, out_path):
    seg = io.read_volume(seg_path)
    if not isinstance(seg, Segmentation):
        raise ConfigError(f"{seg_path} is not a u8 segmentation")
    sdf = sdf_from_segmentation(seg)
    io.write_volume(out_path, sdf)
    return sdf


# --- fit ----------------------------------------------------------------------

def load_fit_config(config_path, workers=None):
    cfg = io.read_json(config_path)
    _check_keys(cfg, set(FitConfig.__dataclass_fields__) | FIT_EXTRA_KEYS, "fit config")
    inputs = cfg.get("inputs")
    if not isinstance(inputs, list) or len(inputs) < 2:
        raise ConfigError("fit config needs 'inputs': a list of at least 2 volume files")
    base = Path(config_path).parent
    paths = [_resolve(base, p) for p in inputs]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"missing input volumes: {', '.join(missing)}")
    fit = FitConfig.from_dict({k: v for k, v in cfg.items() if k not in FIT_EXTRA_KEYS})
    if workers is not None:
        fit = replace(fit, workers=int(workers))
    out = _resolve(base, cfg.get("output_dir", "fit_output"))
    return paths, fit, out


def _load_sdf(path):
    vol = io.read_volume(path)
    return sdf_from_segmentation(vol) if isinstance(vol, Segmentation) else vol


def cmd_fit(config_path, workers=None, output_dir=None):
    paths, fit, out = load_fit_config(config_path, workers)
    if output_dir is not None:
        out = Path(output_dir)
    volumes = [_load_sdf(p) for p in paths]
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")

    result = fit_cohort(volumes, fit)

    out = _prepare_output_dir(out)
    for i, cps in enumerate(result.particle_sets):
        io.write_particles(out / f"shape_{i:03d}.particles", cps)
    io.write_log(out / "fit_log.csv", result.loss_history)
    echo = fit.to_dict()
    echo["band_halfwidth"] = fit.halfwidth_for(volumes)
    echo["inputs"] = [str(p) for p in paths]
    echo["output_dir"] = str(out)
    io.write_json(out / "config_resolved.json", echo)
    return result


# --- stats and modes ------------------------------------------------------------

def _parse_range(text, upper):
    if text is None:
        return list(range(1, upper + 1))
    try:
        if ":" in text:
            a, b = text.split(":")
            return list(range(int(a), int(b) + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad mode range {text!r}; use 'a:b' or 'a,b,c'") from None


def cmd_stats(particle_paths, out_path, modes=None, num_samples=1000, seed=0, model_path=None):
    sets = [io.read_particles(p) for p in particle_paths]
    model = compute_pca(sets)
    ms = _parse_range(modes, model.num_modes)
    for m in ms:
        if not 1 <= m <= model.num_modes:
            raise ConfigError(f"mode count {m} outside [1, {model.num_modes}]")
    rows = []
    for m in ms:
        try:
            gen = generalization(sets, m)
        except (BadModeCount, ConfigError):
            gen = float("nan")  # held-out models have one mode fewer, or too few shapes
        rows.append((m, compactness(model, m), gen, specificity(model, sets, m, num_samples, seed)))
    io.write_csv(out_path, ("m", "compactness", "generalization", "specificity"), rows)
    if model_path is not None:
        io.write_model(model_path, model)
    return rows


def _unit_rows(n):
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norms > 0, norms, 1.0)


def mode_shapes(sets, mode_index, stddevs):
    """Control point sets walked along one PCA mode.

    Points follow the mode. Normals are the mean normals plus the least-squares
    linear trend of the training normals against the mode coordinate, then
    renormalized, so ``0`` gives the mean set and ``+/-t`` are mirror images.
    """
    model = compute_pca(sets)
    if not 0 <= mode_index < model.num_modes:
        raise ConfigError(f"mode {mode_index} outside [0, {model.num_modes})")
    normals = np.stack([s.normals for s in sets])
    mean_n = normals.mean(axis=0)
    x = np.stack([s.points.ravel() for s in sets])
    coord = (x - model.mean) @ model.modes[mode_index]
    denom = float(coord @ coord)
    trend = np.tensordot(coord, normals - mean_n, axes=1) / denom if denom > 0 else np.zeros_like(mean_n)
    sd = float(np.sqrt(model.eigenvalues[mode_index]))
    out = []
    for t in stddevs:
        b = t * sd
        pts = model.mean + b * model.modes[mode_index]
        out.append(ControlPointSet(pts.reshape(-1, 3), _unit_rows(mean_n + b * trend)))
    return out


def auto_grid(points, offset, spacing=(1.0, 1.0, 1.0), pad_voxels=3):
    spacing = np.asarray(spacing, dtype=float)
    pad = offset + pad_voxels * spacing
    lo = np.floor((points.min(axis=0) - pad) / spacing) * spacing
    hi = points.max(axis=0) + pad
    dims = np.ceil((hi - lo) / spacing).astype(int) + 1
    return tuple(int(d) for d in dims), tuple(spacing.tolist()), tuple(lo.tolist())


def cmd_modes(particle_paths, out_dir, mode=0, stddevs=(-2.0, 0.0, 2.0), offset=2.0, kernel="biharmonic",
              grid=None, meshes=True):
    sets = [io.read_particles(p) for p in particle_paths]
    shapes = mode_shapes(sets, mode, stddevs)
    mesh_list = []
    if meshes:
        for cps in shapes:
            g = grid or auto_grid(np.vstack([s.points for s in shapes]), offset)
            mesh_list.append(reconstruct_mesh(cps, offset, kernel, *g))
    out = _prepare_output_dir(out_dir)
    for k, (t, cps) in enumerate(zip(stddevs, shapes)):
        stem = f"mode{mode}_step{k:02d}_{t:+g}sd"
        io.write_particles(out / f"{stem}.particles", cps)
        if meshes:
            write_mesh(out / f"{stem}.obj", mesh_list[k])
    return shapes, mesh_list


# --- reconstruct and distance ---------------------------------------------------

def cmd_reconstruct(particles_path, out_path, offset=2.0, kernel="biharmonic", grid=None):
    cps = io.read_particles(particles_path)
    g = grid or auto_grid(cps.points, offset)
    mesh = reconstruct_mesh(cps, offset, kernel, *g)
    write_mesh(out_path, mesh)
    return mesh


def cmd_distance(mesh_a, mesh_b, per_vertex_path=None):
    a, b = read_mesh(mesh_a), read_mesh(mesh_b)
    mean, mx, per_vertex = surface_to_surface_distance(a, b)
    if per_vertex_path is not None:
        io.write_csv(per_vertex_path, ("vertex", "distance"),
                     [(i, float(d)) for i, d in enumerate(per_vertex)])
    return mean, mx, per_vertex


# --- argument parsing -----------------------------------------------------------

def _grid_args(p):
    p.add_argument("--offset", type=float, default=2.0, help="dipole offset s (physical units)")
    p.add_argument("--kernel", choices=KERNELS, default="biharmonic")
    p.add_argument("--dims", type=int, nargs=3, default=None, help="grid size; default: fit the points")
    p.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--origin", type=float, nargs=3, default=(0.0, 0.0, 0.0))


def build_parser():
    parser = argparse.ArgumentParser(prog="rbfssm", description="RBF shape models from segmentations")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cohort of segmentations and SDFs")
    p.add_argument("config")
    p.add_argument("-o", "--output-dir")

    p = sub.add_parser("sdf", help="signed distance field of a segmentation")
    p.add_argument("segmentation")
    p.add_argument("output")

    p = sub.add_parser("fit", help="optimize control points across a cohort")
    p.add_argument("config")
    p.add_argument("-o", "--output-dir")
    p.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")

    p = sub.add_parser("stats", help="compactness, generalization and specificity")
    p.add_argument("particles", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--modes", help="'a:b' or 'a,b,c' (default: every mode)")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", help="also write the SSM model here")

    p = sub.add_parser("modes", help="walk along a PCA mode")
    p.add_argument("particles", nargs="+")
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--mode", type=int, default=0, help="0-based mode index")
    p.add_argument("--stddevs", type=float, nargs="+", default=[-2.0, 0.0, 2.0])
    p.add_argument("--no-meshes", action="store_true")
    _grid_args(p)

    p = sub.add_parser("reconstruct", help="mesh the implicit surface of a particle file")
    p.add_argument("particles")
    p.add_argument("-o", "--output", required=True)
    _grid_args(p)

    p = sub.add_parser("distance", help="symmetric surface-to-surface distance")
    p.add_argument("mesh_a")
    p.add_argument("mesh_b")
    p.add_argument("--per-vertex", help="CSV of distances from the vertices of mesh_a")
    return parser


def run(args):
    if args.command == "synth":
        for path in cmd_synth(args.config, args.output_dir):
            print(path)
    elif args.command == "sdf":
        cmd_sdf(args.segmentation, args.output)
    elif args.command == "fit":
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        result = cmd_fit(args.config, args.threads, args.output_dir)
        print(f"total {result.loss_history[-1].total!r}")
    elif args.command == "stats":
        for row in cmd_stats(args.particles, args.output, args.modes, args.samples, args.seed, args.model):
            print(",".join(str(v) for v in row))
    elif args.command == "modes":
        grid = None if args.dims is None else (tuple(args.dims), tuple(args.spacing), tuple(args.origin))
        cmd_modes(args.particles, args.output_dir, args.mode, args.stddevs, args.offset, args.kernel,
                  grid, not args.no_meshes)
    elif args.command == "reconstruct":
        grid = None if args.dims is None else (tuple(args.dims), tuple(args.spacing), tuple(args.origin))
        cmd_reconstruct(args.particles, args.output, args.offset, args.kernel, grid)
    elif args.command == "distance":
        mean, mx, _ = cmd_distance(args.mesh_a, args.mesh_b, args.per_vertex)
        print(f"mean {mean!r}")
        print(f"max {mx!r}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args)
    except RbfSsmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
