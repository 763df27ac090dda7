import json

import numpy as np
import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from bilab import fieldio, schemas
from bilab.cli import main
from bilab.scenario import ScenarioError, load_scenario, parse_scenario

REGISTRY = Registry().with_resources(
    (f"bilab/{n}.schema.json", Resource.from_contents(schemas.load(n))) for n in schemas.NAMES
)


def validate(doc, name):
    Draft202012Validator(schemas.load(name), registry=REGISTRY).validate(doc)


BOX = """
name = "{name}"
seed = 3
[grid]
kind = "box"
lower = [-1.0, -1.0]
upper = [1.0, 1.0]
resolution = 17
[boundary]
kind = "affine"
slope = [{slope}, 0.0]
[source]
kind = "density"
expression = "exp(-8*r**2)"
[solver]
max_iter = {max_iter}
[[diagnostics]]
op = "integrals"
region = {{ kind = "box", lower = [-0.5, -0.5], upper = [0.5, 0.5] }}
[[diagnostics]]
op = "light_segments"
[[diagnostics]]
op = "sff"
[[diagnostics]]
op = "growth"
count = 5
[[diagnostics]]
op = "lorentzian"
center = [0.0, 0.0]
R = 0.3
[[diagnostics]]
op = "energy_density"
csv = true
[output]
csv = true
"""


def write(tmp_path, name="box", slope=0.3, max_iter=20000):
    path = tmp_path / f"{name}.toml"
    path.write_text(BOX.format(name=name, slope=slope, max_iter=max_iter))
    return path


def test_zero_builtin(tmp_path, capsys):
    assert main(["solve", "zero", "--output-dir", str(tmp_path)]) == 0
    out = tmp_path / "zero"
    u = fieldio.read_field(out / "solution.bin")
    assert np.abs(u.values).max() <= 1e-12
    validate(json.loads((out / "report.json").read_text()), "solve_report")
    assert (out / "solution.csv").exists() and "converged" in (out / "summary.txt").read_text()


def test_radial_builtin_has_oracle_block(tmp_path):
    assert main(["solve", "radial-2d", "--output-dir", str(tmp_path)]) == 0
    out = tmp_path / "radial-2d"
    doc = json.loads((out / "report.json").read_text())
    validate(doc, "solve_report")
    assert doc["oracle"]["relative_linf_error"] < 0.05
    validate(json.loads((out / "integrals.json").read_text()), "integrals")
    growth = json.loads((out / "growth.json").read_text())
    validate(growth, "growth")
    assert min(c["margin"] for c in growth["checks"]) >= -5 * growth["h"]


def test_full_diagnostics_and_schemas(tmp_path):
    path = write(tmp_path)
    assert main(["solve", str(path), "--output-dir", str(tmp_path / "o")]) == 0
    out = tmp_path / "o" / "box"
    validate(json.loads((out / "report.json").read_text()), "solve_report")
    validate(json.loads((out / "integrals.json").read_text()), "integrals")
    validate(json.loads((out / "light_segments.json").read_text()), "light_segments")
    validate(json.loads((out / "growth.json").read_text()), "growth")
    for f in ("sff.bin", "lorentzian_distance.bin", "energy_density.csv", "light_segments.csv"):
        assert (out / f).exists()


def test_missing_grid_names_key(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('name = "bad"\n')
    assert main(["solve", str(path), "--output-dir", str(tmp_path)]) == 1
    assert "'grid'" in capsys.readouterr().err


def test_parse_error_reports_position():
    with pytest.raises(ScenarioError, match=r"line 2, column"):
        parse_scenario('name = "x"\n[grid\n')


@pytest.mark.parametrize(
    "text,needle",
    [
        ('[grid]\nkind = "torus"\nresolution = 9\n', "torus"),
        ('[grid]\nkind = "box"\nlower = [0, 0]\nupper = [1, 1, 1]\nresolution = 9\n', "grid.upper"),
        ('[grid]\nkind = "ball"\ncenter = [0, 0]\nradius = 1\nresolution = 9\n[source]\nkind = "density"\n', "'expression'"),
        ('[grid]\nkind = "ball"\ncenter = [0, 0]\nradius = 1\nresolution = 9\n[solver]\nfoo = 1\n', "foo"),
        ('[grid]\nkind = "ball"\ncenter = [0, 0]\nradius = 1\nresolution = 9\n[boundary]\nkind = "file"\npath = "none.bin"\n', "none.bin"),
        ('[grid]\nkind = "ball"\ncenter = [0, 0]\nradius = 1\nresolution = 9\n[[diagnostics]]\nop = "plot"\n', "plot"),
        ('[grid]\nkind = "ball"\ncenter = [0, 0]\nradius = 1\nresolution = 9\n[source]\nkind = "density"\nexpression = "sin(x1)"\n', "expression"),
    ],
)
def test_scenario_validation(tmp_path, text, needle):
    with pytest.raises(ScenarioError, match=needle):
        parse_scenario(text, tmp_path)


def test_field_file_sources(tmp_path):
    sc = load_scenario("zero")
    from bilab.scenario import build_problem

    grid, _, _ = build_problem(sc)
    fieldio.write_field(tmp_path / "rho.bin", grid.zeros())
    text = (
        '[grid]\nkind = "box"\nlower = [-1.0, -1.0]\nupper = [1.0, 1.0]\nresolution = 33\n'
        '[source]\nkind = "file"\npath = "rho.bin"\n[boundary]\nkind = "file"\npath = "rho.bin"\n'
    )
    sc2 = parse_scenario(text, tmp_path)
    g2, phi, src = build_problem(sc2)
    assert np.all(src.density.values == 0) and np.all(phi.values == 0)


def test_marginal_boundary(tmp_path):
    path = write(tmp_path, "marg", slope=1.2, max_iter=50)
    assert main(["solve", str(path), "--output-dir", str(tmp_path)]) == 1
    assert not (tmp_path / "marg").exists()
    assert main(["solve", str(path), "--allow-marginal", "--output-dir", str(tmp_path)]) in (0, 2)
    doc = json.loads((tmp_path / "marg" / "report.json").read_text())
    validate(doc, "solve_report")
    # a timelike datum has no Lorentzian distance; the failure is recorded
    assert "error" in next(d for d in doc["diagnostics"] if d["op"] == "lorentzian")


def test_not_converged_exit_2(tmp_path):
    path = write(tmp_path, "slow", max_iter=2)
    assert main(["solve", str(path), "--output-dir", str(tmp_path)]) == 2
    assert not json.loads((tmp_path / "slow" / "report.json").read_text())["converged"]


def test_deterministic_bitwise(tmp_path):
    path = write(tmp_path, "det")
    blobs = []
    for k in range(2):
        assert main(["solve", str(path), "--deterministic", "--output-dir", str(tmp_path / str(k))]) == 0
        blobs.append((tmp_path / str(k) / "det" / "solution.bin").read_bytes())
    assert blobs[0] == blobs[1]


def test_parallel_jobs_and_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv("BILAB_OUTPUT_ROOT", str(tmp_path / "env"))
    a, b = write(tmp_path, "a"), write(tmp_path, "b", slope=0.1)
    assert main(["solve", str(a), str(b), "--jobs", "2"]) == 0
    assert (tmp_path / "env" / "a" / "solution.bin").exists()
    assert (tmp_path / "env" / "b" / "solution.bin").exists()


def test_unknown_suite_and_command(capsys):
    assert main(["suite", "nope"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_quanticharges_suite(tmp_path):
    assert main(["suite", "quanticharges", "--output-dir", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "suite-quanticharges" / "suite.json").read_text())
    validate(doc, "suite")
    assert doc["passed"]


@pytest.mark.parametrize("kind", ["radial", "counterexample"])
def test_oracle_tables(tmp_path, capsys, kind):
    csv_path = tmp_path / "t.csv"
    assert main(["oracle", kind, "--points", "5", "--csv", str(csv_path)]) == 0
    out = capsys.readouterr().out
    assert len(out.strip().splitlines()) == 7
    assert len(csv_path.read_text().splitlines()) == 6
