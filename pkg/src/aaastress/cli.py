"""Command-line pipeline: labeled CT volume → cleaned masks → surfaces →
layered quadratic mesh → wall stress → statistics, plus run comparison.

Each stage is its own subcommand reading the previous stage's artifacts from
the run directory; `pipeline` chains them in memory.  A JSON config with all
defaults pre-filled drives everything; a minimal config needs only `input`,
`map_pressure`, and (optionally) `roi_z_range`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
import warnings

import numpy as np

from . import __version__, meshing, metrics, solver, surface, volume

_STAGES = ("clean", "surfaces", "mesh", "solve", "stats")


@dataclasses.dataclass
class PipelineConfig:
    input: str
    map_pressure: float                      # kPa
    output: str = "run"
    roi_z_range: tuple[int, int] | None = None
    # mask cleaning
    smooth_kernel_radius_mm: float = 1.5
    smooth_threshold: float = 0.5
    opening_radius_mm: float = 2.0
    gaussian_sigma: float = 0.2              # mm, final mask polish (0 disables)
    connectivity: int = 26
    # surface extraction and smoothing
    min_edge_fraction: float = 0.3           # of voxel spacing; 0 disables welding
    smooth_iterations: int = 20
    smooth_lambda: float = 0.5
    # layered meshing
    wall_thickness: float = 1.5              # mm
    wall_layers: int = 2
    ilt_layers: int = 4
    sliver_min: float = 0.05                 # mm
    # material and load
    wall_modulus: float = 1.0e9              # Pa
    compliance_ratio: float = 20.0
    poisson: float = 0.49
    include_ilt: bool = True
    # reporting
    stats_field: str = "ush"                 # 'ush' | 'raw'
    threads: int | None = None

    def __post_init__(self):
        if self.map_pressure <= 0:
            raise ValueError(f"map_pressure must be > 0 kPa, got {self.map_pressure}")
        if not 5.0 <= self.map_pressure <= 25.0:
            warnings.warn(
                f"map_pressure {self.map_pressure} kPa is outside the plausible "
                f"mean-arterial range [5, 25] kPa", stacklevel=2)
        if self.stats_field not in ("ush", "raw"):
            raise ValueError(f"stats_field must be 'ush' or 'raw', got {self.stats_field}")
        if not 0.0 <= self.min_edge_fraction < 1.0:
            raise ValueError(f"min_edge_fraction must lie in [0, 1), "
                             f"got {self.min_edge_fraction}")
        if self.roi_z_range is not None:
            self.roi_z_range = (int(self.roi_z_range[0]), int(self.roi_z_range[1]))

    @classmethod
    def from_json(cls, path: str) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["roi_z_range"] is not None:
            d["roi_z_range"] = list(d["roi_z_range"])
        return d

    def cleaning_config(self) -> volume.CleaningConfig:
        return volume.CleaningConfig(
            roi_z_range=self.roi_z_range,
            smooth_kernel_radius_mm=self.smooth_kernel_radius_mm,
            smooth_threshold=self.smooth_threshold,
            opening_radius_mm=self.opening_radius_mm,
            gaussian_sigma=self.gaussian_sigma,
            connectivity=self.connectivity)

    def material(self) -> solver.MaterialSpec:
        return solver.MaterialSpec(wall_modulus=self.wall_modulus,
                                   compliance_ratio=self.compliance_ratio,
                                   poisson=self.poisson)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def _versions() -> dict:
    import platform

    import pyamg
    import scipy
    import skimage

    return {"aaastress": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-image": skimage.__version__, "pyamg": pyamg.__version__}


def _manifest_path(outdir: str) -> str:
    return os.path.join(outdir, "manifest.json")


def _load_manifest(outdir: str) -> dict:
    path = _manifest_path(outdir)
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {"stages": {}}


def _update_manifest(outdir: str, cfg: PipelineConfig | None, stage: str,
                     seconds: float, **info) -> None:
    man = _load_manifest(outdir)
    if cfg is not None:
        man["config"] = cfg.to_dict()
    man["versions"] = _versions()
    entry = {"seconds": round(seconds, 3)}
    entry.update(info)
    man.setdefault("stages", {})[stage] = entry
    with open(_manifest_path(outdir), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_clean(cfg: PipelineConfig, outdir: str):
    vol = volume.load_volume(cfg.input)
    aaa, lumen = volume.clean_pipeline(vol, cfg.cleaning_config())
    if cfg.gaussian_sigma > 0:
        aaa = volume.gaussian_smooth_binary(aaa, cfg.gaussian_sigma)
        lumen = volume.gaussian_smooth_binary(lumen, cfg.gaussian_sigma)
        lumen = volume.BinaryMask(values=lumen.values & aaa.values,
                                  spacing=lumen.spacing, origin=lumen.origin)
    volume.save_volume(os.path.join(outdir, "aaa_mask.nrrd"), aaa)
    volume.save_volume(os.path.join(outdir, "lumen_mask.nrrd"), lumen)
    return aaa, lumen


def _pinned_smooth(cfg: PipelineConfig, surf: surface.TriSurface) -> surface.TriSurface:
    """Laplacian smoothing with any flat end caps pinned in place."""
    try:
        top, bottom = surface.identify_end_rings(surf)
        fixed = np.concatenate([top, bottom])
    except ValueError:
        fixed = None
    return surface.laplacian_smooth(surf, cfg.smooth_iterations,
                                    cfg.smooth_lambda, fixed=fixed)


def stage_surfaces(cfg: PipelineConfig, outdir: str, masks=None):
    if masks is None:
        aaa = volume.load_mask(os.path.join(outdir, "aaa_mask.nrrd"))
        lumen = volume.load_mask(os.path.join(outdir, "lumen_mask.nrrd"))
    else:
        aaa, lumen = masks
    def _extract(mask):
        # smoothing first: it contracts marching-cubes sliver clusters, so the
        # short edges worth welding only exist afterwards
        surf = _pinned_smooth(cfg, surface.extract_isosurface(mask))
        if cfg.min_edge_fraction > 0:
            surf = surface.collapse_short_edges(
                surf, cfg.min_edge_fraction * min(mask.spacing))
        return surf

    wall_s = _extract(aaa)
    lumen_s = _extract(lumen)
    surface.write_vtk_polydata(os.path.join(outdir, "wall_surface.vtk"), wall_s)
    surface.write_vtk_polydata(os.path.join(outdir, "lumen_surface.vtk"), lumen_s)
    return wall_s, lumen_s


def stage_mesh(cfg: PipelineConfig, outdir: str, surfaces=None):
    if surfaces is None:
        wall_s = surface.read_vtk_polydata(os.path.join(outdir, "wall_surface.vtk"))
        lumen_s = surface.read_vtk_polydata(os.path.join(outdir, "lumen_surface.vtk"))
    else:
        wall_s, lumen_s = surfaces
    mesh = meshing.build_layered_mesh(wall_s, lumen_s, cfg.wall_thickness,
                                      wall_layers=cfg.wall_layers,
                                      ilt_layers=cfg.ilt_layers,
                                      sliver_min=cfg.sliver_min)
    report = meshing.quality_check(mesh)
    meshing.export_mesh(mesh, os.path.join(outdir, "mesh.vtk"))
    meshing.write_solver_deck(os.path.join(outdir, "model.inp"), mesh)
    mesh.columns.save(os.path.join(outdir, "columns.npz"))
    return mesh, report


def stage_solve(cfg: PipelineConfig, outdir: str, mesh=None, include_ilt=None):
    if mesh is None:
        mesh = meshing.import_mesh(os.path.join(outdir, "mesh.vtk"))
        columns_path = os.path.join(outdir, "columns.npz")
        if os.path.exists(columns_path):
            mesh.columns = meshing.MeshColumns.load(columns_path)
    if include_ilt is None:
        include_ilt = cfg.include_ilt
    load = solver.LoadCase(map_pressure=cfg.map_pressure, include_ilt=include_ilt)
    result = solver.run_case(mesh, cfg.material(), load, detailed=True)
    meshing.write_vtk_ugrid(
        os.path.join(outdir, "stress.vtk"), result.mesh,
        point_data={"max_principal_raw": result.raw_stress.max_principal,
                    "max_principal_ush": result.ush_stress.max_principal})
    return result


def _scalar_field(values: np.ndarray, kind: str) -> solver.StressField:
    tensors = values[:, None, None] * np.eye(3)
    return solver.StressField(tensors=tensors, max_principal=values.copy(), kind=kind)


def stage_stats(cfg: PipelineConfig, outdir: str, case_name: str, result=None):
    if result is None:
        mesh, pdata = meshing.read_vtk_ugrid(os.path.join(outdir, "stress.vtk"))
        key = "max_principal_ush" if cfg.stats_field == "ush" else "max_principal_raw"
        field = _scalar_field(pdata[key], cfg.stats_field)
    else:
        mesh = result.mesh
        field = result.ush_stress if cfg.stats_field == "ush" else result.raw_stress
    stats = metrics.percentile_curve(field, mesh, region=meshing.WALL)
    metrics.write_stats_csv(os.path.join(outdir, "stats.csv"),
                            [(case_name, stats.peak, stats.p99)])
    metrics.write_percentile_csv(os.path.join(outdir, "percentile_curve.csv"),
                                 stats.percentile_curve)
    return stats


def _mesh_info(mesh, report) -> dict:
    return {"nodes": int(mesh.n_nodes),
            "wall_elements": mesh.element_count(meshing.WALL),
            "ilt_elements": mesh.element_count(meshing.ILT),
            "min_scaled_jacobian": report.min_scaled_jacobian,
            "max_aspect_ratio": report.max_aspect_ratio}


def _solve_info(result) -> dict:
    f = result.applied_load
    r = result.reactions
    total = f.reshape(-1, 3).sum(axis=0)
    react = r.reshape(-1, 3).sum(axis=0)
    denom = max(float(np.linalg.norm(f)), 1e-300)
    return {"total_load_n": [float(v) for v in total],
            "reaction_sum_n": [float(v) for v in react],
            "equilibrium_rel_error": float(np.linalg.norm(total + react) / denom),
            "include_ilt_effective": bool(result.mesh.element_count(meshing.ILT) > 0)}


# ---------------------------------------------------------------------------
# comparison of two runs (or two masks)
# ---------------------------------------------------------------------------

def _read_stats_csv(path: str) -> tuple[str, float, float]:
    with open(path, "r", encoding="ascii") as fh:
        next(fh)
        case, peak, p99 = next(fh).strip().split(",")
    return case, float(peak), float(p99)


def _read_curve_csv(path: str) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows


def _curve_lookup(curve: np.ndarray, p: float) -> float:
    """Nearest-rank lookup on a saved (percentile, value) staircase."""
    idx = int(np.searchsorted(curve[:, 0], p, side="left"))
    return float(curve[min(idx, len(curve) - 1), 1])


def compare_runs(dir_a: str, dir_b: str, outdir: str) -> dict:
    os.makedirs(outdir, exist_ok=True)
    rows: list[tuple[str, float, float]] = []
    _, peak_a, p99_a = _read_stats_csv(os.path.join(dir_a, "stats.csv"))
    _, peak_b, p99_b = _read_stats_csv(os.path.join(dir_b, "stats.csv"))
    rows.append(("peak_mpa", peak_a, peak_b))
    rows.append(("p99_mpa", p99_a, p99_b))
    for man_key in ("nodes", "wall_elements", "ilt_elements"):
        try:
            a = _load_manifest(dir_a)["stages"]["mesh"][man_key]
            b = _load_manifest(dir_b)["stages"]["mesh"][man_key]
        except KeyError:
            continue
        rows.append((man_key, float(a), float(b)))

    # run A is the reference: differences are "B relative to A"
    with open(os.path.join(outdir, "comparison.csv"), "w", encoding="ascii",
              newline="\n") as fh:
        fh.write("metric,run_a,run_b,relative_difference_pct\n")
        summary = {}
        for name, va, vb in rows:
            if va == 0:
                fh.write(f"{name},{va:.17g},{vb:.17g},\n")
                continue
            rd = metrics.relative_difference(vb, va)
            fh.write(f"{name},{va:.17g},{vb:.17g},{rd:.17g}\n")
            summary[name] = rd

    curve_a = _read_curve_csv(os.path.join(dir_a, "percentile_curve.csv"))
    curve_b = _read_curve_csv(os.path.join(dir_b, "percentile_curve.csv"))
    with open(os.path.join(outdir, "percentile_overlay.csv"), "w",
              encoding="ascii", newline="\n") as fh:
        fh.write("percentile,a_mpa,b_mpa\n")
        for p in range(1, 101):
            fh.write(f"{p},{_curve_lookup(curve_a, p):.17g},"
                     f"{_curve_lookup(curve_b, p):.17g}\n")

    mask_a_path = os.path.join(dir_a, "lumen_mask.nrrd")
    mask_b_path = os.path.join(dir_b, "lumen_mask.nrrd")
    if os.path.exists(mask_a_path) and os.path.exists(mask_b_path):
        profile = metrics.slice_hd_profile(volume.load_mask(mask_a_path),
                                           volume.load_mask(mask_b_path))
        metrics.write_hd_profile_csv(os.path.join(outdir, "hd_profile.csv"), profile)
        summary["hd_mean_mm"] = profile.mean_mm
        summary["hd_convention"] = profile.convention
    return summary


def compare_masks(path_a: str, path_b: str, outdir: str) -> dict:
    os.makedirs(outdir, exist_ok=True)
    profile = metrics.slice_hd_profile(volume.load_mask(path_a),
                                       volume.load_mask(path_b))
    metrics.write_hd_profile_csv(os.path.join(outdir, "hd_profile.csv"), profile)
    return {"hd_mean_mm": profile.mean_mm, "hd_convention": profile.convention}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aaastress",
        description="Aneurysm wall-stress pipeline: clean, mesh, solve, compare.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*_STAGES, "pipeline"):
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="JSON pipeline config")
        p.add_argument("--output", help="run directory (overrides config)")
        p.add_argument("--no-ilt", action="store_true",
                       help="exclude the thrombus and load the wall's inner faces")
        p.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap")
    pc = sub.add_parser("compare", help="compare two runs or two masks")
    pc.add_argument("run_a")
    pc.add_argument("run_b")
    pc.add_argument("--output", required=True, help="comparison output directory")
    pc.add_argument("--threads", type=int)
    return parser


def _limit_threads(n: int | None):
    if n is None:
        return None
    try:
        import threadpoolctl

        return threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
        return None


def _run_stage(cfg: PipelineConfig, outdir: str, stage: str, include_ilt: bool,
               carry: dict) -> None:
    t0 = time.perf_counter()
    info: dict = {}
    if stage == "clean":
        carry["masks"] = stage_clean(cfg, outdir)
        info = {"voxels_aaa": carry["masks"][0].count,
                "voxels_lumen": carry["masks"][1].count}
    elif stage == "surfaces":
        carry["surfaces"] = stage_surfaces(cfg, outdir, carry.get("masks"))
        info = {"wall_vertices": carry["surfaces"][0].n_vertices,
                "lumen_vertices": carry["surfaces"][1].n_vertices}
    elif stage == "mesh":
        mesh, report = stage_mesh(cfg, outdir, carry.get("surfaces"))
        carry["mesh"] = mesh
        info = _mesh_info(mesh, report)
    elif stage == "solve":
        result = stage_solve(cfg, outdir, carry.get("mesh"), include_ilt)
        carry["result"] = result
        info = _solve_info(result)
    elif stage == "stats":
        stats = stage_stats(cfg, outdir, os.path.basename(os.path.normpath(outdir)),
                            carry.get("result"))
        info = {"peak_mpa": stats.peak, "p99_mpa": stats.p99,
                "field": cfg.stats_field}
    _update_manifest(outdir, cfg, stage, time.perf_counter() - t0, **info)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    stage = "startup"
    try:
        if args.command == "compare":
            _limit_threads(args.threads)
            stage = "compare"
            if os.path.isdir(args.run_a):
                summary = compare_runs(args.run_a, args.run_b, args.output)
            else:
                summary = compare_masks(args.run_a, args.run_b, args.output)
            print(json.dumps(summary, indent=2, sort_keys=True))
            return 0

        stage = "config"
        cfg = PipelineConfig.from_json(args.config)
        if args.output:
            cfg.output = args.output
        if args.threads is not None:
            cfg.threads = args.threads
        _limit_threads(cfg.threads)
        include_ilt = cfg.include_ilt and not args.no_ilt
        outdir = cfg.output
        os.makedirs(outdir, exist_ok=True)

        carry: dict = {}
        stages = _STAGES if args.command == "pipeline" else (args.command,)
        for stage in stages:
            _run_stage(cfg, outdir, stage, include_ilt, carry)
        print(f"completed: {', '.join(stages)} -> {outdir}")
        return 0
    except Exception as exc:  # pragma: no cover - exercised via subprocess tests
        print(f"error at stage {stage}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
