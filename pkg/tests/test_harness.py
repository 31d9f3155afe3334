"""Experiment configuration, error norms, export and the CLI."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cemflow import cli, fields, fine_solver, grid as cg, harness
from cemflow.errors import ConfigurationError

PROPS = fields.FluidProps(rho_ref=850.0, p_ref=2.0e7, c=1.0e-8, mu=5.0e-3, phi=500.0)


def tiny_config(tmp_path=None, **overrides):
    data = {
        "name": "tiny",
        "seed": 1,
        "grid": {"dims": [8, 8], "spacing": 10.0, "coarse_factor": 4,
                 "boundary": {"xmin": "dirichlet", "xmax": "dirichlet"}},
        "field": {"type": "uniform", "value": 1.0e2},
        "fluid": {"rho_ref": 850.0, "p_ref": 2.0e7, "c": 1.0e-8,
                  "mu": 5.0e-3, "phi": 500.0},
        "bc_values": {"xmin": 2.05e7, "xmax": 2.0e7},
        "initial": {"type": "constant", "value": 2.0e7},
        "time": {"dt_days": 1.0, "steps": 2},
        "method": {"basis_per_element": 2, "oversampling_layers": 2},
    }
    data.update(overrides)
    return data


# -- config loading ---------------------------------------------------------

def test_load_config_dict_and_yaml(tmp_path):
    cfg = harness.load_config(tiny_config())
    assert cfg.name == "tiny"
    import yaml

    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(tiny_config()))
    cfg2 = harness.load_config(str(path))
    assert cfg2.config_hash() == cfg.config_hash()


def test_load_config_missing_section():
    bad = tiny_config()
    del bad["fluid"]
    with pytest.raises(ConfigurationError):
        harness.load_config(bad)


def test_load_config_unknown_name():
    with pytest.raises(ConfigurationError):
        harness.load_config("no-such-preset")


def test_config_hash_sensitive_to_values():
    a = harness.load_config(tiny_config())
    b = harness.load_config(tiny_config(seed=2))
    assert a.config_hash() != b.config_hash()
    assert a.config_hash() == harness.load_config(tiny_config()).config_hash()


def test_presets_available():
    names = harness.list_presets()
    for want in ("example1-desk", "example2-desk", "example3-desk",
                 "example1-paper"):
        assert want in names
    for name in names:
        cfg = harness.load_config(name)
        grid, part = cfg.build_grid()
        assert grid.cell_count > 0 and part.n_elements > 0


def test_default_oversampling_pairing():
    assert [harness.default_oversampling(f) for f in (4, 8, 16)] == [3, 4, 5]


def test_source_builder():
    cfg = harness.load_config(tiny_config(
        source={"corners_rate": 2.0, "center_rate": -8.0,
                "cells": [{"index": [1, 1], "rate": 0.5}]}))
    grid, _ = cfg.build_grid()
    q = cfg.build_source(grid)
    qv = q.reshape(8, 8, order="F")
    assert qv[0, 0] == qv[7, 0] == qv[0, 7] == qv[7, 7] == 2.0
    assert qv[4, 4] == -8.0
    assert qv[1, 1] == 0.5
    assert np.isclose(q.sum(), 4 * 2.0 - 8.0 + 0.5)
    with pytest.raises(ConfigurationError):
        bad = harness.load_config(tiny_config(
            source={"cells": [{"index": [99, 0], "rate": 1.0}]}))
        bad.build_source(grid)


def test_initial_linear_x():
    cfg = harness.load_config(tiny_config(
        initial={"type": "linear_x", "from": 3.0, "to": 1.0}))
    grid, _ = cfg.build_grid()
    p0 = cfg.initial_pressure(grid)
    x = grid.node_coords()[:, 0]
    assert np.allclose(p0, 3.0 - 2.0 * x / 80.0)


# -- error norms ------------------------------------------------------------

def norms_setup():
    g = cg.build_fine_grid((6, 6), 10.0)
    rng = np.random.default_rng(3)
    kappa = rng.uniform(1.0, 10.0, g.cell_count)
    p0 = np.full(g.node_count, 2.0e7)
    fine = 2.0e7 + rng.normal(scale=1e4, size=(4, g.node_count))
    return g, kappa, p0, fine


def test_error_norms_identical_is_zero():
    g, kappa, p0, fine = norms_setup()
    eps0, eps1, eps1e = harness.error_norms(fine, fine.copy(), g, kappa, PROPS, p0)
    assert eps0 == eps1 == eps1e == 0.0


def test_error_norms_homogeneity():
    # scaling both fields scales nothing: the norms are relative
    g, kappa, p0, fine = norms_setup()
    rng = np.random.default_rng(4)
    coarse = fine + rng.normal(scale=1e2, size=fine.shape)
    a = harness.error_norms(fine, coarse, g, kappa, PROPS, p0)
    b = harness.error_norms(3.0 * fine, 3.0 * coarse, g, kappa, PROPS, p0)
    assert np.allclose(a, b, rtol=1e-12)
    assert all(v > 0 for v in a)


def test_error_norms_energy_variant_dimensionless():
    # multiplying kappa by a constant leaves eps0 and eps1_energy unchanged
    # while eps1 (energy over L2) picks up the square root of the factor
    g, kappa, p0, fine = norms_setup()
    rng = np.random.default_rng(5)
    coarse = fine + rng.normal(scale=1e2, size=fine.shape)
    a = harness.error_norms(fine, coarse, g, kappa, PROPS, p0)
    b = harness.error_norms(fine, coarse, g, 4.0 * kappa, PROPS, p0)
    assert np.isclose(a[0], b[0], rtol=1e-12)
    assert np.isclose(a[2], b[2], rtol=1e-12)
    assert np.isclose(b[1], 2.0 * a[1], rtol=1e-12)


def test_error_norms_shape_mismatch():
    g, kappa, p0, fine = norms_setup()
    with pytest.raises(ConfigurationError):
        harness.error_norms(fine, fine[:-1], g, kappa, PROPS, p0)


def test_error_norms_ignore_initial_snapshot():
    g, kappa, p0, fine = norms_setup()
    coarse = fine.copy()
    coarse[0] += 1e6  # only the shared initial condition differs
    eps0, eps1, eps1e = harness.error_norms(fine, coarse, g, kappa, PROPS, p0)
    assert eps0 == eps1 == eps1e == 0.0


# -- export -----------------------------------------------------------------

def test_vtk_export(tmp_path):
    g = cg.build_fine_grid((2, 2), 1.5)
    vals = np.arange(g.node_count, dtype=float)
    path = harness.export_field(vals, g, tmp_path / "f.vtk")
    text = path.read_text().splitlines()
    assert text[3] == "DATASET STRUCTURED_POINTS"
    assert text[4] == "DIMENSIONS 3 3 1"
    assert text[7] == "POINT_DATA 9"
    data = [float(v) for v in text[10:]]
    assert data == vals.tolist()


def test_csv_roundtrip(tmp_path):
    g = cg.build_fine_grid((3, 2), 1.0)
    rng = np.random.default_rng(6)
    vals = rng.normal(size=g.node_count)
    path = harness.export_field(vals, g, tmp_path / "f.csv", "csv")
    back = harness.import_csv_field(path)
    assert np.array_equal(back, vals)


def test_export_validates(tmp_path):
    g = cg.build_fine_grid((2, 2), 1.0)
    with pytest.raises(ConfigurationError):
        harness.export_field(np.zeros(3), g, tmp_path / "f.vtk")
    with pytest.raises(ConfigurationError):
        harness.export_field(np.zeros(g.node_count), g, tmp_path / "f.x", "xml")


# -- experiment driver ------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(method={"basis_per_element": 2, "oversampling_layers": 2,
                              "indicators": True},
                      output={"snapshot_steps": [1], "formats": ["vtk", "csv"]})
    report = harness.run_experiment(cfg, output_dir=out)
    return cfg, out, report


def test_run_experiment_report(tiny_run):
    cfg, out, report = tiny_run
    assert report.name == "tiny"
    assert report.n_fine_dofs == 81
    assert report.n_coarse_dofs == 4 * 2
    assert 0.0 <= report.epsilon0 < 1.0
    assert report.epsilon1_energy < 1.0
    assert report.lambda_min > 0.0
    assert report.indicator_global_total >= 0.0
    assert len(report.indicator_per_step) == 2
    assert "fine_solve" in report.timings


def test_run_experiment_artifacts(tiny_run):
    cfg, out, report = tiny_run
    base = out / "tiny"
    assert (base / "report.json").is_file()
    assert (base / "timings.json").is_file()
    assert (base / "indicators.csv").is_file()
    assert (base / "fine_0001.vtk").is_file()
    assert (base / "coarse_0001.csv").is_file()
    snaps = sorted((base / "fine").glob("snapshot_*.npy"))
    assert len(snaps) == 3
    on_disk = json.loads((base / "report.json").read_text())
    assert on_disk["epsilon0"] == report.epsilon0
    assert "timings" not in on_disk


def test_norms_from_directories(tiny_run):
    cfg, out, report = tiny_run
    base = out / "tiny"
    eps0, eps1, eps1e = harness.norms_from_directories(
        cfg, base / "fine", base / "coarse")
    assert np.isclose(eps0, report.epsilon0, rtol=1e-12)
    assert np.isclose(eps1e, report.epsilon1_energy, rtol=1e-12)


def test_report_json_deterministic(tmp_path):
    cfg = tiny_config()
    r1 = harness.run_experiment(cfg, output_dir=tmp_path / "a")
    r2 = harness.run_experiment(cfg, output_dir=tmp_path / "b")
    assert r1.to_json() == r2.to_json()
    assert (tmp_path / "a" / "tiny" / "report.json").read_bytes() == \
           (tmp_path / "b" / "tiny" / "report.json").read_bytes()


def test_run_with_enrichment(tmp_path):
    cfg = tiny_config(method={"basis_per_element": 2, "oversampling_layers": 2,
                              "enrichment": {"theta": 0.5, "rounds": 1}})
    report = harness.run_experiment(cfg, output_dir=tmp_path)
    assert len(report.enrichment) == 1
    rnd = report.enrichment[0]
    assert rnd["n_coarse_dofs"] >= 8
    assert rnd["epsilon1_energy_after"] <= rnd["epsilon1_energy_before"] * (1 + 1e-9)


# -- CLI --------------------------------------------------------------------

def test_cli_run_and_outputs(tmp_path, capsys):
    import yaml

    path = tmp_path / "exp.yaml"
    yaml.safe_dump(tiny_config(), path.open("w"))
    rc = cli.main(["run", str(path), "--output", str(tmp_path / "out")])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["name"] == "tiny"


def test_cli_presets(capsys):
    assert cli.main(["presets"]) == 0
    out = capsys.readouterr().out.split()
    assert "example2-desk" in out


def test_cli_exit_codes(tmp_path, capsys):
    import yaml

    # configuration error
    bad = tiny_config()
    bad["grid"]["coarse_factor"] = 3
    path = tmp_path / "bad.yaml"
    yaml.safe_dump(bad, path.open("w"))
    assert cli.main(["run", str(path)]) == 2

    # solver error: absurd source with a tight iteration budget
    diverge = tiny_config(source={"center_rate": 1.0e3},
                          method={"basis_per_element": 2,
                                  "oversampling_layers": 2, "max_iters": 2})
    path2 = tmp_path / "diverge.yaml"
    yaml.safe_dump(diverge, path2.open("w"))
    assert cli.main(["run", str(path2), "--output", str(tmp_path / "o")]) == 3

    # I/O error: raster field file missing
    noio = tiny_config(field={"type": "raster", "path": str(tmp_path / "no.raw")})
    path3 = tmp_path / "noio.yaml"
    yaml.safe_dump(noio, path3.open("w"))
    assert cli.main(["run", str(path3), "--output", str(tmp_path / "o2")]) == 4
    capsys.readouterr()


def test_cli_norms_and_export(tmp_path, capsys):
    import yaml

    cfg = tiny_config()
    path = tmp_path / "exp.yaml"
    yaml.safe_dump(cfg, path.open("w"))
    assert cli.main(["run", str(path), "--output", str(tmp_path / "out")]) == 0
    capsys.readouterr()
    base = tmp_path / "out" / "tiny"
    rc = cli.main(["norms", str(path), str(base / "fine"), str(base / "coarse")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "epsilon0" in out and "epsilon1_energy" in out

    field_file = sorted((base / "fine").glob("snapshot_*.npy"))[-1]
    rc = cli.main(["export", str(field_file), str(path),
                   str(tmp_path / "field.csv"), "--format", "csv"])
    assert rc == 0
    vals = harness.import_csv_field(tmp_path / "field.csv")
    assert len(vals) == 81


def test_cli_entry_point_subprocess():
    env = dict(os.environ)
    proc = subprocess.run(
        [sys.executable, "-m", "cemflow.cli", "presets"],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0
    assert "example3-desk" in proc.stdout
