"""Experiment configuration, orchestration, error norms and field export."""

import hashlib
import json
import time as _time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import cem, estimator, fem, fields, spectral
from .errors import ConfigurationError, RasterIOError
from .fine_solver import NewtonConfig, TimeGrid, solve_transient
from .grid import (build_coarse_partition, build_fine_grid,
                   build_partition_of_unity)

DAY = 86400.0


# ---------------------------------------------------------------------------
# configuration

def load_config(source):
    """Load an experiment config from a YAML path, preset name, or dict."""
    if isinstance(source, dict):
        return ExperimentConfig(source)
    path = Path(source)
    if not path.exists():
        preset = resources.files("cemflow.configs") / (str(source) + ".yaml")
        if preset.is_file():
            return ExperimentConfig(yaml.safe_load(preset.read_text()))
        raise ConfigurationError("config %r not found" % (source,))
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError("cannot parse %s: %s" % (path, exc)) from exc
    return ExperimentConfig(data)


def list_presets():
    root = resources.files("cemflow.configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


class ExperimentConfig:
    """Validated experiment description; see the bundled configs for the schema."""

    _REQUIRED = ("grid", "fluid", "time", "method")

    def __init__(self, data):
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a mapping")
        for key in self._REQUIRED:
            if key not in data:
                raise ConfigurationError("config misses section %r" % key)
        self.data = data
        self.name = str(data.get("name", "experiment"))
        self.seed = int(data.get("seed", 0))
        # fail early on the pieces that are cheap to check
        self.build_grid()
        self.fluid_props()
        self.time_grid()
        self.newton_config()

    def canonical(self):
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    # -- builders ----------------------------------------------------------

    def build_grid(self):
        g = self.data["grid"]
        try:
            grid = build_fine_grid(g["dims"], g["spacing"], g.get("boundary"))
            partition = build_coarse_partition(grid, g["coarse_factor"])
        except KeyError as exc:
            raise ConfigurationError("grid section misses %s" % exc) from exc
        return grid, partition

    def fluid_props(self):
        f = self.data["fluid"]
        try:
            return fields.FluidProps(
                rho_ref=float(f["rho_ref"]), p_ref=float(f["p_ref"]),
                c=float(f["c"]), mu=float(f["mu"]), phi=float(f["phi"]),
            )
        except KeyError as exc:
            raise ConfigurationError("fluid section misses %s" % exc) from exc

    def build_field(self, grid):
        spec = self.data.get("field", {"type": "uniform", "value": 1.0e5})
        kind = spec.get("type", "uniform")
        dims = grid.dims
        if kind == "uniform":
            return fields.PermeabilityField(
                np.full(grid.cell_count, float(spec.get("value", 1.0e5))))
        if kind == "inclusions":
            boxes = spec.get("boxes", [])
            if not isinstance(boxes, int):
                boxes = [(b["lo"], b["hi"]) for b in boxes]
            return fields.gen_inclusions(dims, spec["background"],
                                         spec["inclusion"], boxes, self.seed)
        if kind == "fractures":
            geom = fields.FractureGeometry(
                matrix_value=float(spec["matrix"]),
                fractures=[(f["lo"], f["hi"], float(f["value"]))
                           for f in spec.get("list", [])],
            )
            return fields.rasterize_fractures(geom, dims)
        if kind == "raster":
            return fields.load_raster_field(spec["path"], dims)
        raise ConfigurationError("unknown field type %r" % kind)

    def initial_pressure(self, grid):
        spec = self.data.get("initial", {"type": "constant", "value": 2.0e7})
        kind = spec.get("type", "constant")
        if kind == "constant":
            return np.full(grid.node_count, float(spec["value"]))
        if kind == "linear_x":
            x = grid.node_coords()[:, 0]
            length = grid.dims[0] * grid.spacing[0]
            lo, hi = float(spec["from"]), float(spec["to"])
            return lo + (hi - lo) * x / length
        raise ConfigurationError("unknown initial type %r" % kind)

    def build_source(self, grid):
        spec = self.data.get("source")
        if not spec:
            return None
        rates = np.zeros(grid.cell_count)
        strides = np.concatenate(([1], np.cumprod(grid.dims[:-1])))

        def column_cells(ix, iy):
            if grid.ndim == 2:
                return [np.array([ix, iy]) @ strides]
            return [np.array([ix, iy, iz]) @ strides for iz in range(grid.dims[2])]

        if "corners_rate" in spec:
            rate = float(spec["corners_rate"])
            nx, ny = grid.dims[0], grid.dims[1]
            for ix, iy in ((0, 0), (nx - 1, 0), (0, ny - 1), (nx - 1, ny - 1)):
                for c in column_cells(ix, iy):
                    rates[c] += rate
        if "center_rate" in spec:
            center = grid.dims // 2
            rates[center @ strides] += float(spec["center_rate"])
        for entry in spec.get("cells", []):
            idx = np.asarray(entry["index"], dtype=np.int64)
            if np.any(idx < 0) or np.any(idx >= grid.dims):
                raise ConfigurationError("source cell %r outside grid" % (entry,))
            rates[idx @ strides] += float(entry["rate"])
        return rates

    def boundary_values(self):
        return {k: float(v) for k, v in self.data.get("bc_values", {}).items()}

    def time_grid(self):
        t = self.data["time"]
        if "dt_days" in t:
            dt = float(t["dt_days"]) * DAY
        else:
            dt = float(t["dt_seconds"])
        return TimeGrid.uniform(dt, int(t["steps"]))

    def newton_config(self):
        m = self.data["method"]
        return NewtonConfig(tol=float(m.get("newton_tol", 1e-6)),
                            max_iters=int(m.get("max_iters", 12)))

    def method_params(self, partition):
        m = self.data["method"]
        L = int(m.get("basis_per_element", 4))
        layers = m.get("oversampling_layers", "auto")
        if layers == "auto":
            layers = default_oversampling(partition.factor)
        return L, int(layers)


def default_oversampling(factor):
    """Layer count paired to the coarsening factor (4, 8, 16 -> 3, 4, 5)."""
    return int(np.ceil(np.log2(factor))) + 1


# ---------------------------------------------------------------------------
# error norms

def error_norms(fine_snaps, coarse_snaps, grid, kappa_cells, props, p0):
    """Time-aggregated error norms (eps0, eps1, eps1_energy).

    eps0 is the relative L2 error. eps1 puts the energy numerator, with
    stiffness coefficient (kappa/mu) rho(p0), over the same L2 denominator;
    eps1_energy divides by the energy norm of the reference instead, which
    is the dimensionless variant to read when units matter.
    """
    fine_snaps = np.asarray(fine_snaps, dtype=float)
    coarse_snaps = np.asarray(coarse_snaps, dtype=float)
    if fine_snaps.shape != coarse_snaps.shape:
        raise ConfigurationError("solution snapshot shapes differ")
    M = fem.assemble_weighted_mass(grid, 1.0)
    rho_q = fields.density(fem.qpoint_values(grid, np.asarray(p0, dtype=float)), props)
    A = fem.assemble_stiffness(
        grid, np.asarray(kappa_cells, dtype=float)[:, None] / props.mu * rho_q)

    num0 = num1 = den0 = den1 = 0.0
    for n in range(1, fine_snaps.shape[0]):
        e = fine_snaps[n] - coarse_snaps[n]
        ph = fine_snaps[n]
        num0 += float(e @ (M @ e))
        num1 += float(e @ (A @ e))
        den0 += float(ph @ (M @ ph))
        den1 += float(ph @ (A @ ph))
    if den0 == 0.0:
        raise ConfigurationError("zero reference solution in error norms")
    eps0 = float(np.sqrt(num0 / den0))
    eps1 = float(np.sqrt(num1 / den0))
    eps1_energy = float(np.sqrt(num1 / den1)) if den1 > 0 else 0.0
    return eps0, eps1, eps1_energy


# ---------------------------------------------------------------------------
# field export

def export_field(values, grid, path, fmt="legacy-vtk"):
    """Write a nodal field as legacy VTK structured points or CSV.

    Values are formatted with 17 significant digits so files are bit-exact
    reproducible across platforms.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.node_count,):
        raise ConfigurationError("field length does not match grid")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "legacy-vtk":
        nd = list(grid.node_dims) + [1] * (3 - grid.ndim)
        sp = list(grid.spacing) + [1.0] * (3 - grid.ndim)
        lines = [
            "# vtk DataFile Version 3.0",
            "cemflow nodal field",
            "ASCII",
            "DATASET STRUCTURED_POINTS",
            "DIMENSIONS %d %d %d" % tuple(nd),
            "ORIGIN 0 0 0",
            "SPACING %.17g %.17g %.17g" % tuple(sp),
            "POINT_DATA %d" % grid.node_count,
            "SCALARS pressure double 1",
            "LOOKUP_TABLE default",
        ]
        lines.extend("%.17g" % v for v in values)
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "csv":
        coords = grid.node_coords()
        if grid.ndim == 2:
            coords = np.column_stack([coords, np.zeros(grid.node_count)])
        lines = ["node,x,y,z,value"]
        for n in range(grid.node_count):
            lines.append("%d,%.17g,%.17g,%.17g,%.17g"
                         % (n, coords[n, 0], coords[n, 1], coords[n, 2], values[n]))
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ConfigurationError("unknown export format %r" % fmt)
    return path


def import_csv_field(path):
    """Read back a CSV written by :func:`export_field`."""
    rows = Path(path).read_text().strip().splitlines()[1:]
    return np.array([float(r.split(",")[4]) for r in rows])


# ---------------------------------------------------------------------------
# experiment driver

@dataclass
class ErrorReport:
    """Results of one experiment run; ``timings`` is excluded from the
    deterministic serialization so reports are byte-reproducible."""

    name: str
    config_hash: str
    epsilon0: float
    epsilon1: float
    epsilon1_energy: float
    lambda_min: float
    n_fine_dofs: int
    n_coarse_dofs: int
    fine_newton_iters: list
    coarse_newton_iters: list
    indicator_global_total: float = None
    indicator_per_step: list = None
    enrichment: list = None
    timings: dict = field(default_factory=dict)

    def deterministic_dict(self):
        d = {
            "name": self.name,
            "config_hash": self.config_hash,
            "epsilon0": self.epsilon0,
            "epsilon1": self.epsilon1,
            "epsilon1_energy": self.epsilon1_energy,
            "lambda_min": self.lambda_min,
            "n_fine_dofs": self.n_fine_dofs,
            "n_coarse_dofs": self.n_coarse_dofs,
            "fine_newton_iters": list(self.fine_newton_iters),
            "coarse_newton_iters": list(self.coarse_newton_iters),
        }
        if self.indicator_global_total is not None:
            d["indicator_global_total"] = self.indicator_global_total
            d["indicator_per_step"] = list(self.indicator_per_step)
        if self.enrichment is not None:
            d["enrichment"] = self.enrichment
        return d

    def to_json(self):
        return json.dumps(self.deterministic_dict(), sort_keys=True, indent=2) + "\n"


class _Stopwatch:
    def __init__(self):
        self.timings = {}

    def stage(self, name):
        return _StageTimer(self.timings, name)


class _StageTimer:
    def __init__(self, timings, name):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.t0 = _time.perf_counter()

    def __exit__(self, *exc):
        self.timings[self.name] = _time.perf_counter() - self.t0


def run_experiment(config, output_dir=None):
    """Fine solve, spectral stage, basis stage, coarse solve, norms and
    indicators, with artifacts written under the output directory."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    out = Path(output_dir or config.data.get("output", {}).get("dir", "out")) / config.name
    out.mkdir(parents=True, exist_ok=True)

    watch = _Stopwatch()
    grid, partition = config.build_grid()
    props = config.fluid_props()
    perm = config.build_field(grid)
    kappa = perm.si_values()
    p0 = config.initial_pressure(grid)
    q = config.build_source(grid)
    bcs = config.boundary_values()
    time_grid = config.time_grid()
    newton = config.newton_config()
    L, m = config.method_params(partition)

    with watch.stage("fine_solve"):
        fine = solve_transient(grid, kappa, props, q, bcs, p0, time_grid, newton)

    pou = build_partition_of_unity(grid, partition)
    with watch.stage("eigen"):
        aux = spectral.build_auxiliary_space(grid, partition, kappa, props, p0,
                                             pou, L)
    with watch.stage("basis"):
        basis = cem.build_cem_basis(aux, m, grid, kappa, props, p0)
    with watch.stage("coarse_solve"):
        coarse = cem.solve_transient_coarse(basis, grid, kappa, props, q, bcs,
                                            p0, time_grid, newton, pou=pou)

    coarse_snaps = coarse.reconstructed_snapshots()
    with watch.stage("norms"):
        eps0, eps1, eps1e = error_norms(fine.snapshots, coarse_snaps, grid,
                                        kappa, props, p0)

    method = config.data["method"]
    report = ErrorReport(
        name=config.name,
        config_hash=config.config_hash(),
        epsilon0=eps0, epsilon1=eps1, epsilon1_energy=eps1e,
        lambda_min=aux.Lambda,
        n_fine_dofs=grid.node_count,
        n_coarse_dofs=basis.n_columns,
        fine_newton_iters=fine.newton_iters,
        coarse_newton_iters=coarse.newton_iters,
        timings=watch.timings,
    )

    indicators = None
    if method.get("indicators"):
        with watch.stage("indicators"):
            indicators = estimator.compute_indicators(
                coarse_snaps, time_grid, q, grid, partition, pou, kappa, props)
        report.indicator_global_total = indicators.global_total
        report.indicator_per_step = [float(v) for v in indicators.per_step_totals]
        _write_indicator_csv(out / "indicators.csv", indicators)

    enr = method.get("enrichment")
    if enr:
        if indicators is None:
            with watch.stage("indicators"):
                indicators = estimator.compute_indicators(
                    coarse_snaps, time_grid, q, grid, partition, pou, kappa, props)
        rounds = []
        counts = aux.counts
        for _ in range(int(enr.get("rounds", 1))):
            counts = estimator.enrich(aux, indicators, float(enr["theta"]))
            with watch.stage("enrich_round_%d" % len(rounds)):
                aux = spectral.build_auxiliary_space(grid, partition, kappa,
                                                     props, p0, pou, counts)
                basis = cem.build_cem_basis(aux, m, grid, kappa, props, p0)
                coarse = cem.solve_transient_coarse(basis, grid, kappa, props,
                                                    q, bcs, p0, time_grid,
                                                    newton, pou=pou)
                coarse_snaps = coarse.reconstructed_snapshots()
                e0, e1, e1e = error_norms(fine.snapshots, coarse_snaps, grid,
                                          kappa, props, p0)
                indicators = estimator.compute_indicators(
                    coarse_snaps, time_grid, q, grid, partition, pou, kappa, props)
            rounds.append({
                "epsilon0_before": eps0, "epsilon1_before": eps1,
                "epsilon1_energy_before": eps1e,
                "epsilon0_after": e0, "epsilon1_after": e1,
                "epsilon1_energy_after": e1e,
                "n_coarse_dofs": basis.n_columns,
                "counts": [int(c) for c in counts],
            })
            eps0, eps1, eps1e = e0, e1, e1e
        report.enrichment = rounds
        report.epsilon0, report.epsilon1, report.epsilon1_energy = eps0, eps1, eps1e
        report.n_coarse_dofs = basis.n_columns
        report.coarse_newton_iters = coarse.newton_iters

    _write_artifacts(out, config, grid, fine, coarse_snaps, report)
    return report


def _write_indicator_csv(path, indicators):
    lines = ["step,neighborhood,indicator"]
    for n in range(indicators.values.shape[0]):
        for i in range(indicators.values.shape[1]):
            lines.append("%d,%d,%.17g" % (n + 1, i, indicators.values[n, i]))
    path.write_text("\n".join(lines) + "\n")


def _write_artifacts(out, config, grid, fine, coarse_snaps, report):
    (out / "fine").mkdir(exist_ok=True)
    (out / "coarse").mkdir(exist_ok=True)
    for n in range(fine.snapshots.shape[0]):
        np.save(out / "fine" / ("snapshot_%04d.npy" % n), fine.snapshots[n])
        np.save(out / "coarse" / ("snapshot_%04d.npy" % n), coarse_snaps[n])
    ospec = config.data.get("output", {})
    formats = ospec.get("formats", [])
    for step in ospec.get("snapshot_steps", []):
        if not (0 <= step < fine.snapshots.shape[0]):
            raise ConfigurationError("snapshot step %d out of range" % step)
        if "vtk" in formats:
            export_field(fine.snapshots[step], grid,
                         out / ("fine_%04d.vtk" % step), "legacy-vtk")
            export_field(coarse_snaps[step], grid,
                         out / ("coarse_%04d.vtk" % step), "legacy-vtk")
        if "csv" in formats:
            export_field(fine.snapshots[step], grid,
                         out / ("fine_%04d.csv" % step), "csv")
            export_field(coarse_snaps[step], grid,
                         out / ("coarse_%04d.csv" % step), "csv")
    (out / "report.json").write_text(report.to_json())
    (out / "timings.json").write_text(
        json.dumps(report.timings, sort_keys=True, indent=2) + "\n")


def norms_from_directories(config, fine_dir, coarse_dir):
    """Recompute (eps0, eps1, eps1_energy) from exported snapshot directories."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    grid, _ = config.build_grid()
    props = config.fluid_props()
    kappa = config.build_field(grid).si_values()
    p0 = config.initial_pressure(grid)

    def load_dir(d):
        files = sorted(Path(d).glob("snapshot_*.npy"))
        if not files:
            raise RasterIOError("no snapshot_*.npy files in %s" % d)
        return np.stack([np.load(f) for f in files])

    return error_norms(load_dir(fine_dir), load_dir(coarse_dir), grid, kappa,
                       props, p0)
