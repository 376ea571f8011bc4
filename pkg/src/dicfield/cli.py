"""Command-line entry point wiring every analysis stage.

One executable, two-level subcommands::

    dicfield speckle {gen,qa,subset-size}
    dicfield setup distance
    dicfield synth deform
    dicfield dic2d {run,strain}
    dicfield dic3d run
    dicfield fracture {ctod,sif,jint,efpz,crackmap,paris}
    dicfield dvc run

Every run writes a ``manifest.json`` into the output directory — tool
version, the fully resolved configuration, SHA-256 hashes of the
inputs, per-stage timings, captured warnings, and the error when the
run fails. Exit codes: 0 success, 1 configuration/validation error,
2 runtime analysis error.

File conventions (all diff-able): structured configuration and results
are JSON; field data is CSV with a fixed column order and shortest
round-trip float formatting, so identical configurations and inputs
produce byte-identical CSVs. Field CSVs travel with a ``grid.json``
sidecar describing the measurement lattice.

The worker count for the parallel engines is taken from the
``DICFIELD_WORKERS`` environment variable (default 1); it deliberately
has no flag, since results are bit-identical across worker counts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dvc as dvc_mod
from . import mechanics, render, speckle, stereo
from .errors import DicError
from .image import AnalyticWarp, GrayImage, load_image, save_image, synth_deform
from .rgdic import DisplacementField, RgdicOptions, ROIGrid, SeedPoint, rgdic
from .strain import StrainField, strain_field


class _ValidationError(Exception):
    """Configuration/input problem; maps to exit code 1."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved invocation: subcommand, options, inputs, outputs."""

    command: str
    options: Dict[str, object]
    inputs: Dict[str, Path]
    out_dir: Path
    output_names: Tuple[str, ...]

    def __post_init__(self):
        out = self.out_dir.resolve()
        for name in self.output_names + ("manifest.json",):
            target = out / name
            for label, src in self.inputs.items():
                if target == src.resolve():
                    raise _ValidationError(
                        f"output {name} would overwrite input "
                        f"{label} ({src})")


@dataclass
class RunManifest:
    """Run metadata; emitted for every run, success or failure."""

    tool: str
    version: str
    command: str
    config: Dict[str, object]
    input_hashes: Dict[str, str]
    timings_s: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    status: str = "ok"
    error: Optional[Dict[str, str]] = None

    def to_json(self) -> str:
        body = {
            "tool": self.tool,
            "version": self.version,
            "command": self.command,
            "config": self.config,
            "input_hashes": self.input_hashes,
            "timings_s": self.timings_s,
            "warnings": self.warnings,
            "status": self.status,
            "error": self.error,
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


class _RunContext:
    """Output directory, stage timing, and guarded file writing."""

    def __init__(self, cfg: RunConfig, manifest: RunManifest):
        self.cfg = cfg
        self.manifest = manifest

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.manifest.timings_s[name] = round(
                time.perf_counter() - t0, 6)

    def path(self, name: str) -> Path:
        return self.cfg.out_dir / name

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_text(text)

    def write_json(self, name: str, obj) -> None:
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_bytes(self, name: str, data: bytes) -> None:
        self.path(name).write_bytes(data)


# ----------------------------------------------------------------------
# small parsing / formatting helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _fmt(v: float) -> str:
    """Shortest round-trip decimal form; deterministic across platforms."""
    return repr(float(v))


def _pair(text: str, what: str) -> Tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise _ValidationError(f"{what} must be 'x,y', got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise _ValidationError(f"{what} must be numeric, got {text!r}") \
            from None


def _floats(text: str, n: int, what: str) -> Tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise _ValidationError(
            f"{what} needs {n} comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise _ValidationError(f"{what} must be numeric, got {text!r}") \
            from None


def _workers() -> int:
    raw = os.environ.get("DICFIELD_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise _ValidationError(
            f"DICFIELD_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise _ValidationError(f"DICFIELD_WORKERS must be >= 1, got {n}")
    return n


def _domain(build, what: str):
    """Construct a validated domain object; bad values are config errors.

    Range limits enforced by the library at construction time (either as
    ``ValueError`` or as a ``DicError`` subclass) are reported as flag
    validation failures, not runtime errors.
    """
    try:
        return build()
    except (ValueError, DicError) as e:
        raise _ValidationError(f"{what}: {e}") from e


def _version() -> str:
    from dicfield import __version__

    return __version__


# ----------------------------------------------------------------------
# field CSV / sidecar round trip


def _grid_meta(grid: ROIGrid) -> dict:
    return {
        "x_min": float(grid.px[0, 0]),
        "y_min": float(grid.py[0, 0]),
        "spacing": int(grid.spacing),
        "rows": int(grid.shape[0]),
        "cols": int(grid.shape[1]),
        "mask": grid.mask.astype(int).tolist(),
    }


def _grid_from_meta(meta: dict) -> ROIGrid:
    rows, cols, s = meta["rows"], meta["cols"], meta["spacing"]
    return ROIGrid.rect(
        meta["x_min"], meta["y_min"],
        meta["x_min"] + (cols - 1) * s, meta["y_min"] + (rows - 1) * s,
        s, mask=np.asarray(meta["mask"], dtype=bool))


def _displacement_csv(disp: DisplacementField) -> str:
    lines = ["x,y,u,v,zncc,valid"]
    rows, cols = disp.grid.shape
    for r in range(rows):
        for c in range(cols):
            lines.append(",".join([
                _fmt(disp.grid.px[r, c]), _fmt(disp.grid.py[r, c]),
                _fmt(disp.u[r, c]), _fmt(disp.v[r, c]),
                _fmt(disp.zncc[r, c]), str(int(disp.valid[r, c]))]))
    return "\n".join(lines) + "\n"


def _strain_csv(st: StrainField) -> str:
    lines = ["x,y,e_xx,e_yy,e_xy,valid"]
    rows, cols = st.grid.shape
    for r in range(rows):
        for c in range(cols):
            lines.append(",".join([
                _fmt(st.grid.px[r, c]), _fmt(st.grid.py[r, c]),
                _fmt(st.e_xx[r, c]), _fmt(st.e_yy[r, c]),
                _fmt(st.e_xy[r, c]), str(int(st.valid[r, c]))]))
    return "\n".join(lines) + "\n"


def _read_csv_columns(path: Path, header: str) -> np.ndarray:
    try:
        text = path.read_text()
    except OSError as e:
        raise _ValidationError(f"cannot read {path}: {e}") from e
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != header:
        raise _ValidationError(
            f"{path} must start with header {header!r}")
    try:
        return np.array([[float(v) for v in ln.split(",")]
                         for ln in lines[1:]])
    except ValueError as e:
        raise _ValidationError(f"{path} holds non-numeric data: {e}") from e


def _load_grid_meta(field_dir: Path) -> ROIGrid:
    meta_path = field_dir / "grid.json"
    try:
        meta = json.loads(meta_path.read_text())
        return _grid_from_meta(meta)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise _ValidationError(
            f"cannot read field grid {meta_path}: {e}") from e


def _load_displacement(field_dir: Path) -> DisplacementField:
    grid = _load_grid_meta(field_dir)
    data = _read_csv_columns(field_dir / "displacement.csv",
                             "x,y,u,v,zncc,valid")
    rows, cols = grid.shape
    if data.shape != (rows * cols, 6):
        raise _ValidationError(
            f"displacement.csv has {data.shape[0]} rows, grid implies "
            f"{rows * cols}")
    return DisplacementField(
        grid=grid,
        u=data[:, 2].reshape(rows, cols),
        v=data[:, 3].reshape(rows, cols),
        zncc=data[:, 4].reshape(rows, cols),
        valid=data[:, 5].reshape(rows, cols).astype(bool),
        params=None)


def _load_strain(field_dir: Path) -> StrainField:
    grid = _load_grid_meta(field_dir)
    data = _read_csv_columns(field_dir / "strain.csv",
                             "x,y,e_xx,e_yy,e_xy,valid")
    rows, cols = grid.shape
    if data.shape != (rows * cols, 6):
        raise _ValidationError(
            f"strain.csv has {data.shape[0]} rows, grid implies "
            f"{rows * cols}")
    meta_path = field_dir / "strain_meta.json"
    try:
        window_radius = int(json.loads(meta_path.read_text())["window_radius"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise _ValidationError(
            f"cannot read strain metadata {meta_path}: {e}") from e
    return StrainField(
        grid=grid,
        e_xx=data[:, 2].reshape(rows, cols),
        e_yy=data[:, 3].reshape(rows, cols),
        e_xy=data[:, 4].reshape(rows, cols),
        valid=data[:, 5].reshape(rows, cols).astype(bool),
        window_radius=window_radius)


def _render_field(ctx: _RunContext, name: str, values: np.ndarray,
                  valid: np.ndarray, palette: str,
                  v_range: Optional[Tuple[float, float]] = None) -> None:
    ctx.write_bytes(name, render.render_map(
        values, v_range=v_range, palette=palette, valid=valid))


def _material_from_json(path: Path) -> mechanics.MaterialElastic:
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise _ValidationError(f"cannot read material file {path}: {e}") \
            from e
    if "nu" not in raw:
        raise _ValidationError(f"material file {path} must define 'nu'")
    kwargs = {"nu": raw["nu"], "plane": raw.get("plane", "strain")}
    if "mu" in raw:
        kwargs["mu"] = raw["mu"]
    if "E" in raw:
        kwargs["E"] = raw["E"]
    return _domain(lambda: mechanics.MaterialElastic(**kwargs),
                   f"material file {path}")


def _crack_inputs(args) -> Tuple[DisplacementField, Tuple[float, float]]:
    disp = _load_displacement(args.field)
    axis = _pair(args.axis, "--axis")
    return disp, axis


def _resolve_tip(args, disp: DisplacementField,
                 axis: Tuple[float, float]) -> mechanics.CrackTip:
    if args.tip is not None:
        return _domain(
            lambda: mechanics.CrackTip(position=_pair(args.tip, "--tip"),
                                       axis=axis), "--tip")
    return mechanics.locate_crack_tip(disp, axis)


# ----------------------------------------------------------------------
# subcommand handlers (analysis phase; _ValidationError still means
# a configuration problem found once files were opened)


def _cmd_speckle_gen(args, ctx: _RunContext) -> None:
    params = _domain(lambda: speckle.SpeckleParams(
        density=args.density, granule_radius=args.granule_radius,
        contrast=args.contrast, rng_seed=args.seed,
        blur_sigma=args.blur_sigma), "speckle parameters")
    with ctx.stage("generate"):
        img = speckle.gen_speckle(params, args.width, args.height)
    with ctx.stage("assess"):
        report = {
            "mig": speckle.mig(img),
            "mean_granule_diameter_px": speckle.mean_granule_diameter(img),
        }
    with ctx.stage("write"):
        save_image(img, ctx.path("pattern.png"), bit_depth=args.bit_depth)
        ctx.write_json("speckle.json", report)


def _default_probes(img: GrayImage) -> List[Tuple[int, int]]:
    xs = [round(img.width * f) for f in (0.25, 0.5, 0.75)]
    ys = [round(img.height * f) for f in (0.25, 0.5, 0.75)]
    return [(x, y) for y in ys for x in xs]


def _parse_probes(text: Optional[str], img: GrayImage
                  ) -> List[Tuple[int, int]]:
    if text is None:
        return _default_probes(img)
    probes = []
    for part in text.split(";"):
        x, y = _pair(part, "--probes entry")
        probes.append((int(round(x)), int(round(y))))
    return probes


def _cmd_speckle_qa(args, ctx: _RunContext) -> None:
    with ctx.stage("load"):
        img = load_image(args.input)
    probes = _parse_probes(args.probes, img)
    with ctx.stage("assess"):
        report = speckle.quality_report(img, probes, M=args.subset_m)
    body = report.to_dict()
    body["probes"] = [list(p) for p in probes]
    body["subset_m"] = args.subset_m
    with ctx.stage("write"):
        ctx.write_json("quality.json", body)


def _cmd_speckle_subset_size(args, ctx: _RunContext) -> None:
    with ctx.stage("load"):
        img = load_image(args.input)
    probes = _parse_probes(args.probes, img)
    with ctx.stage("select"):
        m = speckle.select_subset_size(img, probes, args.threshold,
                                       args.m_min, args.m_max)
    with ctx.stage("write"):
        ctx.write_json("subset_size.json", {
            "M": m, "subset_px": 2 * m + 1, "threshold": args.threshold,
            "probes": [list(p) for p in probes]})


def _cmd_setup_distance(args, ctx: _RunContext) -> None:
    geom = _domain(lambda: speckle.SetupGeometry(
        object_dim=args.object_dim, focal_length=args.focal_length,
        sensor_pixels=args.sensor_pixels, pixel_pitch=args.pixel_pitch),
        "setup geometry")
    with ctx.stage("compute"):
        d = speckle.optimal_distance(geom)
    with ctx.stage("write"):
        ctx.write_json("distance.json", {
            "distance_mm": d,
            "object_dim_mm": args.object_dim,
            "focal_length_mm": args.focal_length,
            "sensor_pixels": args.sensor_pixels,
            "pixel_pitch_mm": args.pixel_pitch})


def _cmd_synth_deform(args, ctx: _RunContext) -> None:
    with ctx.stage("load"):
        img = load_image(args.input)
    if args.warp == "translation":
        warp = AnalyticWarp.translation(args.u, args.v)
    elif args.warp == "rotation":
        cx, cy = ((img.width - 1) / 2.0, (img.height - 1) / 2.0) \
            if args.center is None else _pair(args.center, "--center")
        warp = _domain(
            lambda: AnalyticWarp.rotation(args.theta_deg, (cx, cy)),
            "--theta-deg")
    else:
        cx, cy = (0.0, 0.0) if args.center is None \
            else _pair(args.center, "--center")
        warp = _domain(lambda: AnalyticWarp.affine(
            args.u, args.v, args.ux, args.uy, args.vx, args.vy,
            center=(cx, cy)), "affine warp")
    with ctx.stage("deform"):
        result = synth_deform(img, warp, noise_std=args.noise_std,
                              noise_seed=args.noise_seed)
    with ctx.stage("write"):
        save_image(result.image, ctx.path("deformed.png"),
                   bit_depth=args.bit_depth)
        save_image(GrayImage(result.valid.astype(np.float64)),
                   ctx.path("valid.png"), bit_depth=8)
        ctx.write_json("synth.json", {
            "warp": warp.kind,
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in warp.params.items()},
            "noise_std": args.noise_std,
            "noise_seed": args.noise_seed,
            "valid_fraction": float(result.valid.mean())})


def _build_roi(args, for_image: GrayImage) -> ROIGrid:
    x0, y0, x1, y1 = _floats(args.roi, 4, "--roi")
    mask = None
    if args.mask is not None:
        mask_img = load_image(args.mask)
        xs = np.arange(x0, x1 + 1e-9, args.spacing)
        ys = np.arange(y0, y1 + 1e-9, args.spacing)
        if (len(xs) == 0 or len(ys) == 0
                or mask_img.shape != for_image.shape):
            raise _ValidationError(
                "mask image must match the input image dimensions")
        mask = mask_img.intensities[np.ix_(
            ys.astype(int), xs.astype(int))] > 0.5
    try:
        return ROIGrid.rect(x0, y0, x1, y1, args.spacing, mask=mask)
    except (ValueError, DicError) as e:
        raise _ValidationError(f"--roi: {e}") from e


def _parse_seeds(args, grid: ROIGrid) -> List[SeedPoint]:
    seeds = [SeedPoint(location=_pair(s, "--seed")) for s in args.seed]
    # every labeled partition must hold a seed; name the offender
    seeded = set()
    for sp in seeds:
        r, c = grid.node_at(*sp.location)
        if not grid.mask[r, c]:
            raise _ValidationError(
                f"seed {sp.location} snaps to an excluded node")
        seeded.add(int(grid.partition_labels[r, c]))
    for label in sorted(set(np.unique(grid.partition_labels[grid.mask]))):
        if int(label) not in seeded:
            raise _ValidationError(
                f"partition {int(label)} has no seed point")
    return seeds


def _rgdic_options(args) -> RgdicOptions:
    return _domain(lambda: RgdicOptions(
        subset_m=args.subset_m, order=args.order, tol=args.tol,
        max_iter=args.max_iter, zncc_floor=args.zncc_floor,
        search_radius=args.search_radius, n_workers=_workers(),
        prefilter_sigma=args.prefilter_sigma), "matching options")


def _cmd_dic2d_run(args, ctx: _RunContext) -> None:
    with ctx.stage("load"):
        ref = load_image(args.ref)
        deformed = load_image(args.deformed)
    grid = _build_roi(args, ref)
    seeds = _parse_seeds(args, grid)
    opts = _rgdic_options(args)
    with ctx.stage("match"):
        disp = rgdic(ref, deformed, grid, seeds, opts)
    with ctx.stage("write"):
        ctx.write_text("displacement.csv", _displacement_csv(disp))
        ctx.write_json("grid.json", _grid_meta(grid))
        ctx.write_json("field.json", {
            "valid_fraction": disp.valid_fraction(),
            "n_nodes": int(grid.mask.sum())})
        _render_field(ctx, "u.png", disp.u, disp.valid, args.palette)
        _render_field(ctx, "v.png", disp.v, disp.valid, args.palette)
        _render_field(ctx, "zncc.png", disp.zncc, disp.valid, args.palette,
                      v_range=(0.0, 1.0))


def _cmd_dic2d_strain(args, ctx: _RunContext) -> None:
    with ctx.stage("load"):
        disp = _load_displacement(args.field)
    with ctx.stage("strain"):
        st = strain_field(disp, window_radius=args.window_radius)
    with ctx.stage("write"):
        ctx.write_text("strain.csv", _strain_csv(st))
        ctx.write_json("strain_meta.json",
                       {"window_radius": args.window_radius})
        src = (args.field / "grid.json").resolve()
        if src != ctx.path("grid.json").resolve():
            shutil.copyfile(src, ctx.path("grid.json"))
        for comp, arr in (("e_xx", st.e_xx), ("e_yy", st.e_yy),
                          ("e_xy", st.e_xy)):
            _render_field(ctx, f"{comp}.png", arr, st.valid, args.palette)


def _rig_from_json(path: Path) -> stereo.StereoRig:
    try:
        raw = json.loads(path.read_text())
        left = raw["left"]
        right = raw["right"]
        rot = raw["R"]
        trans = raw["t"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise _ValidationError(f"cannot read calibration {path}: {e}") from e

    def intrinsics(block: dict, side: str) -> stereo.Intrinsics:
        keys = {"f1", "f2", "c1", "c2", "skew", "k1", "k2", "k3", "p1", "p2"}
        unknown = set(block) - keys
        if unknown:
            raise _ValidationError(
                f"calibration {side} camera has unknown keys {sorted(unknown)}")
        return _domain(lambda: stereo.Intrinsics(**block),
                       f"calibration {side} camera")

    return _domain(lambda: stereo.StereoRig(
        left=intrinsics(left, "left"), right=intrinsics(right, "right"),
        R=np.asarray(rot, dtype=float), t=np.asarray(trans, dtype=float)),
        f"calibration {path}")


def _cmd_dic3d_run(args, ctx: _RunContext) -> None:
    rig = _rig_from_json(args.calib)
    if len(args.left_def) != len(args.right_def):
        raise _ValidationError(
            f"{len(args.left_def)} left deformed frames vs "
            f"{len(args.right_def)} right; counts must match")
    with ctx.stage("load"):
        left_seq = [load_image(args.left_ref)] \
            + [load_image(p) for p in args.left_def]
        right_seq = [load_image(args.right_ref)] \
            + [load_image(p) for p in args.right_def]
    grid = _build_roi(args, left_seq[0])
    seeds = _parse_seeds(args, grid)
    opts = _rgdic_options(args)
    with ctx.stage("match"):
        frames = stereo.stereo_track(left_seq, right_seq, grid, seeds,
                                     temporal_opts=opts)
    with ctx.stage("triangulate"):
        motion = stereo.surface_kinematics(frames, rig)
    with ctx.stage("write"):
        lines = ["frame,x_px,y_px,X,Y,Z,dX,dY,dZ,valid"]
        n_frames = motion.points.shape[0]
        px = grid.px.ravel()
        py = grid.py.ravel()
        for t in range(n_frames):
            for i in range(px.size):
                lines.append(",".join(
                    [str(t), _fmt(px[i]), _fmt(py[i])]
                    + [_fmt(motion.points[t, i, k]) for k in range(3)]
                    + [_fmt(motion.displacement[t, i, k]) for k in range(3)]
                    + [str(int(motion.valid[t, i]))]))
        ctx.write_text("points3d.csv", "\n".join(lines) + "\n")
        ctx.write_json("grid.json", _grid_meta(grid))
        ctx.write_json("reconstruction.json", {
            "n_frames": int(n_frames),
            "valid_fraction_per_frame": [
                float(motion.valid[t].mean()) for t in range(n_frames)]})
        z0 = motion.points[0, :, 2].reshape(grid.shape)
        _render_field(ctx, "z.png", z0,
                      motion.valid[0].reshape(grid.shape), args.palette)


def _cmd_fracture_ctod(args, ctx: _RunContext) -> None:
    disp, axis = _crack_inputs(args)
    tip = _resolve_tip(args, disp, axis)
    with ctx.stage("ctod"):
        delta, pair = mechanics.ctod(
            disp, tip, cross_offset=args.cross_offset,
            plateau_fraction=args.plateau_fraction)
    with ctx.stage("write"):
        ctx.write_json("ctod.json", {
            "ctod_px": delta,
            "tip": [tip.position[0], tip.position[1]],
            "axis": [tip.axis[0], tip.axis[1]],
            "pair": [[float(pair[0][0]), float(pair[0][1])],
                     [float(pair[1][0]), float(pair[1][1])]]})


def _cmd_fracture_sif(args, ctx: _RunContext) -> None:
    disp, axis = _crack_inputs(args)
    mat = _material_from_json(args.material)
    tip = _resolve_tip(args, disp, axis)
    annulus = _floats(args.annulus, 2, "--annulus")
    with ctx.stage("fit"):
        k1, ux0, uy0, theta0 = mechanics.sif_fit(disp, tip, mat,
                                                 annulus=annulus)
    with ctx.stage("write"):
        ctx.write_json("sif.json", {
            "K_I": k1, "u_x0": ux0, "u_y0": uy0, "theta_0": theta0,
            "tip": [tip.position[0], tip.position[1]],
            "annulus_spacings": list(annulus)})


def _cmd_fracture_jint(args, ctx: _RunContext) -> None:
    disp, axis = _crack_inputs(args)
    st = _load_strain(args.field)
    mat = _material_from_json(args.material)
    tip = _resolve_tip(args, disp, axis)
    r_in, r_out = _floats(args.rings, 2, "--rings")
    domain = _domain(
        lambda: mechanics.JIntegralDomain.build(disp.grid, tip, r_in, r_out),
        "--rings")
    with ctx.stage("integrate"):
        j = mechanics.j_integral(disp, st, mat, domain)
    with ctx.stage("write"):
        ctx.write_json("jint.json", {
            "J": j, "tip": [tip.position[0], tip.position[1]],
            "rings_px": [r_in, r_out]})


def _cmd_fracture_efpz(args, ctx: _RunContext) -> None:
    st = _load_strain(args.field)
    threshold = {"warm": mechanics.EFPZ_THRESHOLD_WARM_UE,
                 "cold": mechanics.EFPZ_THRESHOLD_COLD_UE}[args.regime] \
        if args.threshold_ue is None else args.threshold_ue
    with ctx.stage("threshold"):
        mask, area = mechanics.efpz(st, threshold_ue=threshold)
    with ctx.stage("write"):
        ctx.write_json("efpz.json", {
            "threshold_ue": threshold,
            "area_px2": area,
            "node_count": int(mask.sum())})
        _render_field(ctx, "efpz.png", mask.astype(float), st.valid,
                      args.palette, v_range=(0.0, 1.0))


def _cmd_fracture_crackmap(args, ctx: _RunContext) -> None:
    st = _load_strain(args.field)
    with ctx.stage("threshold"):
        flags = mechanics.crack_map_threshold(st, tx_ue=args.tx_ue,
                                              ty_ue=args.ty_ue)
    with ctx.stage("write"):
        lines = ["x,y,flag"]
        rows, cols = st.grid.shape
        for r in range(rows):
            for c in range(cols):
                lines.append(",".join([
                    _fmt(st.grid.px[r, c]), _fmt(st.grid.py[r, c]),
                    str(int(flags[r, c]))]))
        ctx.write_text("crackmap.csv", "\n".join(lines) + "\n")
        ctx.write_json("crackmap.json", {
            "tx_ue": args.tx_ue, "ty_ue": args.ty_ue,
            "counts": {str(k): int((flags == k).sum()) for k in range(4)}})
        _render_field(ctx, "crackmap.png", flags.astype(float), st.valid,
                      args.palette, v_range=(0.0, 3.0))


def _cmd_fracture_paris(args, ctx: _RunContext) -> None:
    data = _read_csv_columns(args.input, "N,a,dK")
    if data.shape[0] < 3:
        raise _ValidationError(
            f"{args.input} needs at least 3 rows, got {data.shape[0]}")
    with ctx.stage("fit"):
        fit = mechanics.paris_fit(data[:, 1], data[:, 0], data[:, 2])
    with ctx.stage("write"):
        ctx.write_json("paris.json", {"A": fit.A, "n": fit.n, "r2": fit.r2})


def _cmd_dvc_run(args, ctx: _RunContext) -> None:
    with ctx.stage("load"):
        ref = dvc_mod.load_volume(args.ref)
        deformed = dvc_mod.load_volume(args.deformed)
    x0, y0, z0, x1, y1, z1 = _floats(args.grid, 6, "--grid")
    grid = _domain(lambda: dvc_mod.VolGrid.box(
        x0, y0, z0, x1, y1, z1, args.spacing), "--grid")
    opts = _domain(lambda: dvc_mod.DvcOptions(
        subvol_m=args.subvol_m, tol=args.tol, max_iter=args.max_iter,
        search_radius=args.search_radius, n_workers=_workers(),
        prefilter_sigma=args.prefilter_sigma), "matching options")
    with ctx.stage("match"):
        disp = dvc_mod.dvc_match(ref, deformed, grid,
                                 criterion=args.criterion, opts=opts)
    with ctx.stage("write"):
        lines = ["x,y,z,u,v,w,cost,valid"]
        for idx in np.ndindex(grid.shape):
            lines.append(",".join([
                _fmt(grid.px[idx]), _fmt(grid.py[idx]), _fmt(grid.pz[idx]),
                _fmt(disp.u[idx]), _fmt(disp.v[idx]), _fmt(disp.w[idx]),
                _fmt(disp.cost[idx]), str(int(disp.valid[idx]))]))
        ctx.write_text("displacement3d.csv", "\n".join(lines) + "\n")
        ctx.write_json("dvc.json", {
            "criterion": args.criterion,
            "valid_fraction": disp.valid_fraction(),
            "grid_shape": list(grid.shape)})


# ----------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage problems as validation errors."""

    def error(self, message):
        raise _ValidationError(message)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") \
            from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") \
            from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") \
            from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") \
            from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _add_out(p: _Parser) -> None:
    p.add_argument("--out", type=Path, required=True,
                   help="output directory (created if missing)")


def _add_match_flags(p: _Parser) -> None:
    p.add_argument("--roi", required=True,
                   help="measurement rectangle x0,y0,x1,y1 (px)")
    p.add_argument("--spacing", type=_positive_int, required=True,
                   help="grid pitch (px)")
    p.add_argument("--seed", action="append", default=[], metavar="X,Y",
                   help="seed point (px); repeat once per partition")
    p.add_argument("--mask", type=Path,
                   help="PNG mask; bright pixels mark the ROI")
    p.add_argument("--subset-m", type=_positive_int, default=10,
                   help="subset half-width (px)")
    p.add_argument("--order", choices=("first", "second"), default="first",
                   help="shape-function order")
    p.add_argument("--tol", type=_positive_float, default=1e-3,
                   help="update-norm convergence tolerance (px)")
    p.add_argument("--max-iter", type=_positive_int, default=50,
                   help="refinement iteration cap")
    p.add_argument("--zncc-floor", type=float, default=0.5,
                   help="minimum acceptable match quality in [-1, 1]")
    p.add_argument("--search-radius", type=_positive_int, default=10,
                   help="integer-search half-window (px)")
    p.add_argument("--prefilter-sigma", type=_nonneg_float, default=0.8,
                   help="Gaussian prefilter sigma (px); 0 disables")
    p.add_argument("--palette", default="thermal",
                   choices=sorted(render._PALETTE_ANCHORS),
                   help="false-color palette for rendered maps")


def _add_field_input(p: _Parser) -> None:
    p.add_argument("--field", type=Path, required=True,
                   help="directory holding field CSVs plus grid.json")


def _add_crack_flags(p: _Parser) -> None:
    _add_field_input(p)
    p.add_argument("--axis", default="1,0",
                   help="crack direction ax,ay (axis-aligned)")
    p.add_argument("--tip", metavar="X,Y",
                   help="crack-tip position (px); located from the "
                        "opening profiles when omitted")


def build_parser() -> _Parser:
    top = _Parser(prog="dicfield",
                  description="Full-field deformation measurement toolkit")
    groups = top.add_subparsers(dest="group", required=True)

    sp = groups.add_parser("speckle", help="pattern synthesis and QA")
    sp_sub = sp.add_subparsers(dest="sub", required=True)
    g = sp_sub.add_parser("gen", help="generate a speckle pattern")
    _add_out(g)
    g.add_argument("--width", type=_positive_int, required=True)
    g.add_argument("--height", type=_positive_int, required=True)
    g.add_argument("--density", type=float, default=0.5,
                   help="granule area fraction in [0, 0.9]")
    g.add_argument("--granule-radius", type=_positive_float, default=2.0,
                   help="nominal granule radius (px)")
    g.add_argument("--contrast", type=float, default=0.8,
                   help="basecoat-minus-granule intensity in [0, 1]")
    g.add_argument("--blur-sigma", type=_nonneg_float, default=0.65,
                   help="defocus blur sigma (px)")
    g.add_argument("--seed", type=_nonneg_int, default=0,
                   help="placement RNG seed")
    g.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    q = sp_sub.add_parser("qa", help="pattern quality report")
    _add_out(q)
    q.add_argument("--input", type=Path, required=True, help="image to assess")
    q.add_argument("--subset-m", type=_positive_int, default=10,
                   help="probe subset half-width (px)")
    q.add_argument("--probes", help="probe centers 'x,y;x,y;...' "
                                    "(default: 3x3 interior lattice)")
    ss = sp_sub.add_parser("subset-size",
                           help="smallest adequate subset half-width")
    _add_out(ss)
    ss.add_argument("--input", type=Path, required=True)
    ss.add_argument("--threshold", type=_positive_float, required=True,
                    help="worst-probe SSSIG floor (8-bit scale)")
    ss.add_argument("--m-min", type=_positive_int, default=5)
    ss.add_argument("--m-max", type=_positive_int, default=30)
    ss.add_argument("--probes", help="probe centers 'x,y;x,y;...'")

    st = groups.add_parser("setup", help="imaging geometry aids")
    st_sub = st.add_subparsers(dest="sub", required=True)
    d = st_sub.add_parser("distance", help="stand-off distance for a lens")
    _add_out(d)
    d.add_argument("--object-dim", type=_positive_float, required=True,
                   help="object field of view (mm)")
    d.add_argument("--focal-length", type=_positive_float, required=True,
                   help="lens focal length (mm)")
    d.add_argument("--sensor-pixels", type=_positive_int, required=True,
                   help="sensor width (px)")
    d.add_argument("--pixel-pitch", type=_positive_float, required=True,
                   help="pixel pitch (mm)")

    sy = groups.add_parser("synth", help="synthetic deformation")
    sy_sub = sy.add_subparsers(dest="sub", required=True)
    sd = sy_sub.add_parser("deform", help="warp an image analytically")
    _add_out(sd)
    sd.add_argument("--input", type=Path, required=True)
    sd.add_argument("--warp", choices=("translation", "rotation", "affine"),
                    default="translation")
    sd.add_argument("--u", type=float, default=0.0,
                    help="x-translation (px)")
    sd.add_argument("--v", type=float, default=0.0,
                    help="y-translation (px)")
    sd.add_argument("--theta-deg", type=float, default=0.0,
                    help="rotation angle (deg), |theta| <= 10")
    sd.add_argument("--center", metavar="X,Y",
                    help="warp center (px); image center by default")
    sd.add_argument("--ux", type=float, default=0.0, help="du/dx")
    sd.add_argument("--uy", type=float, default=0.0, help="du/dy")
    sd.add_argument("--vx", type=float, default=0.0, help="dv/dx")
    sd.add_argument("--vy", type=float, default=0.0, help="dv/dy")
    sd.add_argument("--noise-std", type=_nonneg_float, default=0.0,
                    help="additive Gaussian noise std (intensity)")
    sd.add_argument("--noise-seed", type=_nonneg_int, default=0)
    sd.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)

    d2 = groups.add_parser("dic2d", help="planar image correlation")
    d2_sub = d2.add_subparsers(dest="sub", required=True)
    r2 = d2_sub.add_parser("run", help="full-field displacement")
    _add_out(r2)
    r2.add_argument("--ref", type=Path, required=True,
                    help="reference image")
    r2.add_argument("--def", dest="deformed", type=Path, required=True,
                    help="deformed image")
    _add_match_flags(r2)
    s2 = d2_sub.add_parser("strain", help="strain from a displacement run")
    _add_out(s2)
    _add_field_input(s2)
    s2.add_argument("--window-radius", type=_positive_int, default=7,
                    help="strain window half-width (grid points)")
    s2.add_argument("--palette", default="thermal",
                    choices=sorted(render._PALETTE_ANCHORS))

    d3 = groups.add_parser("dic3d", help="stereo surface measurement")
    d3_sub = d3.add_subparsers(dest="sub", required=True)
    r3 = d3_sub.add_parser("run", help="reconstruct and track a surface")
    _add_out(r3)
    r3.add_argument("--calib", type=Path, required=True,
                    help="stereo calibration JSON")
    r3.add_argument("--left-ref", type=Path, required=True)
    r3.add_argument("--right-ref", type=Path, required=True)
    r3.add_argument("--left-def",
                    "--left-deformed", type=Path, action="append",
                    default=[], help="left frame at a later load step")
    r3.add_argument("--right-def",
                    "--right-deformed", type=Path, action="append",
                    default=[], help="right frame at a later load step")
    _add_match_flags(r3)

    fr = groups.add_parser("fracture", help="fracture post-processing")
    fr_sub = fr.add_subparsers(dest="sub", required=True)
    ct = fr_sub.add_parser("ctod", help="crack-tip opening displacement")
    _add_out(ct)
    _add_crack_flags(ct)
    ct.add_argument("--cross-offset", type=_positive_float, default=2.0,
                    help="half-separation of the pair rows (grid spacings)")
    ct.add_argument("--plateau-fraction", type=_positive_float, default=0.05,
                    help="slope fraction treated as plateau")
    sf = fr_sub.add_parser("sif", help="mode-I stress intensity factor")
    _add_out(sf)
    _add_crack_flags(sf)
    sf.add_argument("--material", type=Path, required=True,
                    help="elastic constants JSON {E or mu, nu, plane}")
    sf.add_argument("--annulus", default="5,20",
                    help="fit annulus r_in,r_out (grid spacings)")
    ji = fr_sub.add_parser("jint", help="domain J-integral")
    _add_out(ji)
    _add_crack_flags(ji)
    ji.add_argument("--material", type=Path, required=True,
                    help="elastic constants JSON {E or mu, nu, plane}")
    ji.add_argument("--rings", required=True,
                    help="weight-ramp half-widths r_in,r_out (px)")
    ef = fr_sub.add_parser("efpz", help="process-zone extent")
    _add_out(ef)
    _add_field_input(ef)
    ef.add_argument("--threshold-ue", type=_positive_float,
                    help="principal-strain threshold (microstrain)")
    ef.add_argument("--regime", choices=("warm", "cold"), default="warm",
                    help="named threshold preset when --threshold-ue "
                         "is omitted")
    ef.add_argument("--palette", default="thermal",
                    choices=sorted(render._PALETTE_ANCHORS))
    cm = fr_sub.add_parser("crackmap", help="strain-threshold crack map")
    _add_out(cm)
    _add_field_input(cm)
    cm.add_argument("--tx-ue", type=_positive_float,
                    default=mechanics.CRACK_XX_THRESHOLD_UE,
                    help="e_xx threshold (microstrain)")
    cm.add_argument("--ty-ue", type=_positive_float,
                    default=mechanics.CRACK_YY_THRESHOLD_UE,
                    help="e_yy threshold (microstrain)")
    cm.add_argument("--palette", default="thermal",
                    choices=sorted(render._PALETTE_ANCHORS))
    pa = fr_sub.add_parser("paris", help="fatigue growth-law fit")
    _add_out(pa)
    pa.add_argument("--input", type=Path, required=True,
                    help="CSV with header N,a,dK")

    dv = groups.add_parser("dvc", help="volume correlation")
    dv_sub = dv.add_subparsers(dest="sub", required=True)
    rv = dv_sub.add_parser("run", help="full-field volume displacement")
    _add_out(rv)
    rv.add_argument("--ref", type=Path, required=True,
                    help="reference volume header JSON")
    rv.add_argument("--def", dest="deformed", type=Path, required=True,
                    help="deformed volume header JSON")
    rv.add_argument("--grid", required=True,
                    help="measurement box x0,y0,z0,x1,y1,z1 (voxels)")
    rv.add_argument("--spacing", type=_positive_int, required=True,
                    help="grid pitch (voxels)")
    rv.add_argument("--subvol-m", type=_positive_int, default=10,
                    help="subvolume half-width (voxels)")
    rv.add_argument("--search-radius", type=_positive_int, default=5,
                    help="integer-search half-window (voxels)")
    rv.add_argument("--criterion", choices=("SSCC", "NCCC"),
                    default="SSCC")
    rv.add_argument("--tol", type=_positive_float, default=1e-3,
                    help="update-norm convergence tolerance (voxels)")
    rv.add_argument("--max-iter", type=_positive_int, default=50)
    rv.add_argument("--prefilter-sigma", type=_nonneg_float, default=0.8,
                    help="Gaussian prefilter sigma (voxels); 0 disables")
    return top


# handler table: (group, sub) -> (function, input flag names, output files)
_HANDLERS = {
    ("speckle", "gen"): (_cmd_speckle_gen, (),
                         ("pattern.png", "speckle.json")),
    ("speckle", "qa"): (_cmd_speckle_qa, ("input",), ("quality.json",)),
    ("speckle", "subset-size"): (_cmd_speckle_subset_size, ("input",),
                                 ("subset_size.json",)),
    ("setup", "distance"): (_cmd_setup_distance, (), ("distance.json",)),
    ("synth", "deform"): (_cmd_synth_deform, ("input",),
                          ("deformed.png", "valid.png", "synth.json")),
    ("dic2d", "run"): (_cmd_dic2d_run, ("ref", "deformed", "mask"),
                       ("displacement.csv", "grid.json", "field.json",
                        "u.png", "v.png", "zncc.png")),
    ("dic2d", "strain"): (_cmd_dic2d_strain, ("field",),
                          ("strain.csv", "strain_meta.json", "grid.json",
                           "e_xx.png", "e_yy.png", "e_xy.png")),
    ("dic3d", "run"): (_cmd_dic3d_run,
                       ("calib", "left_ref", "right_ref", "left_def",
                        "right_def", "mask"),
                       ("points3d.csv", "grid.json", "reconstruction.json",
                        "z.png")),
    ("fracture", "ctod"): (_cmd_fracture_ctod, ("field",), ("ctod.json",)),
    ("fracture", "sif"): (_cmd_fracture_sif, ("field", "material"),
                          ("sif.json",)),
    ("fracture", "jint"): (_cmd_fracture_jint, ("field", "material"),
                           ("jint.json",)),
    ("fracture", "efpz"): (_cmd_fracture_efpz, ("field",),
                           ("efpz.json", "efpz.png")),
    ("fracture", "crackmap"): (_cmd_fracture_crackmap, ("field",),
                               ("crackmap.csv", "crackmap.json",
                                "crackmap.png")),
    ("fracture", "paris"): (_cmd_fracture_paris, ("input",),
                            ("paris.json",)),
    ("dvc", "run"): (_cmd_dvc_run, ("ref", "deformed"),
                     ("displacement3d.csv", "dvc.json")),
}


def _collect_inputs(args, flag_names: Sequence[str]) -> Dict[str, Path]:
    inputs: Dict[str, Path] = {}
    for name in flag_names:
        value = getattr(args, name, None)
        if value is None:
            continue
        if isinstance(value, list):
            for k, p in enumerate(value):
                inputs[f"{name}[{k}]"] = Path(p)
        else:
            inputs[name] = Path(value)
    return inputs


def _hash_inputs(inputs: Dict[str, Path]) -> Dict[str, str]:
    hashes = {}
    for name, path in inputs.items():
        target = path
        if path.is_dir():
            # field directories hash their grid + data files
            parts = []
            for child in sorted(path.iterdir()):
                if child.is_file():
                    parts.append(f"{child.name}={_sha256(child)}")
            hashes[name] = "dir:" + ";".join(parts)
            continue
        if not target.is_file():
            raise _ValidationError(f"input {name} not found: {path}")
        hashes[name] = _sha256(target)
    return hashes


def _echo_config(args) -> Dict[str, object]:
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in ("group", "sub"):
            continue
        if isinstance(value, Path):
            config[key] = str(value)
        elif isinstance(value, list):
            config[key] = [str(v) if isinstance(v, Path) else v
                           for v in value]
        else:
            config[key] = value
    return config


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run the selected analysis.

    Returns the process exit code: 0 success, 1 validation error,
    2 runtime analysis error. A manifest is written to the output
    directory whenever the run got far enough to have one.
    """
    parser = build_parser()
    manifest: Optional[RunManifest] = None
    out_dir: Optional[Path] = None
    try:
        args = parser.parse_args(argv)
        command = f"{args.group} {args.sub}"
        handler, input_flags, output_names = _HANDLERS[(args.group, args.sub)]
        inputs = _collect_inputs(args, input_flags)
        out_dir = Path(args.out)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise _ValidationError(
                f"cannot create output directory {out_dir}: {e}") from e
        cfg = RunConfig(command=command, options=_echo_config(args),
                        inputs=inputs, out_dir=out_dir,
                        output_names=output_names)
        manifest = RunManifest(
            tool="dicfield", version=_version(), command=command,
            config=dict(cfg.options), input_hashes=_hash_inputs(inputs))
        ctx = _RunContext(cfg, manifest)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            handler(args, ctx)
        manifest.warnings = [str(w.message) for w in caught]
        return 0
    except _ValidationError as e:
        print(f"dicfield: error: validation: {e}", file=sys.stderr)
        if manifest is not None:
            manifest.status = "error"
            manifest.error = {"type": "validation", "message": str(e)}
        return 1
    except DicError as e:
        print(f"dicfield: error: {type(e).__name__}: {e}", file=sys.stderr)
        if manifest is not None:
            manifest.status = "error"
            manifest.error = {"type": type(e).__name__, "message": str(e)}
        return 2
    except Exception as e:  # never panic: report and fail cleanly
        print(f"dicfield: error: {type(e).__name__}: {e}", file=sys.stderr)
        if manifest is not None:
            manifest.status = "error"
            manifest.error = {"type": type(e).__name__, "message": str(e)}
        return 2
    finally:
        if manifest is not None and out_dir is not None and out_dir.is_dir():
            (out_dir / "manifest.json").write_text(manifest.to_json())


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
