import json
import math
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from statmanifold import cli
from statmanifold import family as F
from statmanifold.errors import FamilyConstructionError
from statmanifold.specfile import family_from_spec, load_family, model_from_spec

GAUSS = {"schema": 1, "kind": "gaussian"}
BROKEN_MIXTURE = {"schema": 1, "kind": "mixture_family", "carrier": "1", "statistics": ["x - 0.5"],
                  "support": {"type": "interval", "lo": 0, "hi": 1}, "domain": [[-5, 5]]}
POISSON_MODEL = {"schema": 1, "ambient": {"kind": "poisson"}, "embedding": ["u"], "u_domain": [[-3, 3]]}


@pytest.fixture
def spec_dir(tmp_path):
    def write(name, obj):
        p = tmp_path / name
        p.write_text(json.dumps(obj))
        return str(p)
    write("gauss.json", GAUSS)
    write("known.json", {"schema": 1, "kind": "gaussian", "sigma": 1.0})
    write("broken.json", BROKEN_MIXTURE)
    write("poisson_model.json", POISSON_MODEL)
    write("expfam.json", {"schema": 1, "kind": "exponential_family", "carrier": "-lgamma(x + 1)",
                          "statistics": ["x"], "support": {"type": "integers", "lo": 0, "hi": "infinity"},
                          "domain": [[-3, 3]]})
    (tmp_path / "bad.json").write_text("{not json")
    return tmp_path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# specfile


def test_builtin_specs():
    assert family_from_spec(GAUSS).name == "gaussian"
    assert family_from_spec({"kind": "gaussian", "sigma": 2.0}).name == "gaussian_known_sigma"
    assert family_from_spec({"kind": "gaussian", "parametrization": "natural"}).name == "gaussian_natural"
    assert family_from_spec({"kind": "categorical", "k": 4}).dim == 3
    assert family_from_spec({"kind": "mixture_family"}).dim == 1


def test_domain_restriction():
    fam = family_from_spec({"kind": "poisson", "domain": [[-1, 1]]})
    assert fam.domain.contains([0.5]) and not fam.domain.contains([2.0])
    with pytest.raises(FamilyConstructionError):
        family_from_spec({"kind": "bernoulli", "domain": [[-1, 0.5]]})


@pytest.mark.parametrize("obj", [
    {"kind": "weibull"},
    {"schema": 2, "kind": "gaussian"},
    {"kind": "gaussian", "dim": 3},
    {"kind": "gaussian", "sigma": -1},
    {"kind": "exponential_family", "statistics": ["x"]},
    [1, 2],
])
def test_malformed_specs(obj):
    with pytest.raises(FamilyConstructionError):
        family_from_spec(obj)


def test_custom_exponential_family_matches_poisson(spec_dir):
    custom = load_family(spec_dir / "expfam.json")
    ref = F.poisson()
    from statmanifold.metric import fisher_matrix
    for th in (-1.0, 0.0, 1.5):
        assert_allclose(fisher_matrix(custom, [th]).entries, fisher_matrix(ref, [th]).entries, rtol=1e-8)


def test_bad_json_is_a_spec_error(spec_dir):
    with pytest.raises(FamilyConstructionError):
        load_family(spec_dir / "bad.json")


def test_model_spec():
    model, h = model_from_spec({**POISSON_MODEL, "embedding": ["2*u1"], "jacobian": [["2"]]})
    assert h is None
    assert_allclose(model.xi([0.3]), [0.6])
    assert_allclose(model.tangent([0.3]), [[2.0]])
    model, h = model_from_spec({"ambient": {"kind": "gaussian", "parametrization": "natural"},
                                "embedding": ["u1", "-1 - pow(u2, 2)"], "u_domain": [[-1, 1], [-1, 1]],
                                "h_m_a": np.zeros((2, 2, 2)).tolist()})
    assert model.m == 2 and h.shape == (2, 2, 2)
    with pytest.raises(FamilyConstructionError):
        model_from_spec({**POISSON_MODEL, "embedding": ["u", "u"]})


# CLI


def test_fisher_command(spec_dir, capsys):
    code, out, _ = run(["fisher", "--family", spec_dir / "gauss.json", "--at", "0,1"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["schema"] == 1 and doc["engine"] == "statmanifold" and doc["config"]["seed"] == 0
    assert_allclose(doc["report"]["entries"], [[1, 0], [0, 2]], atol=1e-8)


def test_hessian_form(spec_dir, capsys):
    code, out, _ = run(["fisher", "--family", spec_dir / "gauss.json", "--at", "0.5,2", "--form", "hessian"],
                       capsys)
    assert code == 0
    assert_allclose(json.loads(out)["report"]["entries"], [[0.25, 0], [0, 0.5]], atol=1e-6)


def test_validate_broken_mixture(spec_dir, capsys):
    code, out, err = run(["validate", "--family", spec_dir / "broken.json", "--at", "3"], capsys)
    assert code == 1 and "error" in err
    rec = json.loads(out)["error"]
    assert rec["type"] == "FamilyConstructionError"
    assert "x" in rec and len(rec["xi"]) == 1


def test_validate_good_family(spec_dir, capsys):
    code, out, _ = run(["validate", "--family", spec_dir / "gauss.json"], capsys)
    assert code == 0
    assert json.loads(out)["report"]["family"] == "gaussian"


def test_connection_and_curvature(spec_dir, capsys):
    code, out, _ = run(["connection", "--family", spec_dir / "gauss.json", "--at", "0,1", "--alpha", "1"],
                       capsys)
    assert code == 0
    G = np.array(json.loads(out)["report"]["gamma_first_kind"])
    assert_allclose(G[0, 1, 0], -2.0, atol=1e-6)
    code, out, _ = run(["curvature", "--family", spec_dir / "gauss.json", "--at", "0,1"], capsys)
    assert code == 0
    assert_allclose(json.loads(out)["report"]["sectional"], -0.5, atol=1e-3)


def test_geodesic_csv(spec_dir, capsys):
    code, out, _ = run(["geodesic", "--family", spec_dir / "gauss.json", "--from", "0,1",
                        "--velocity", "0,1", "--dt", "0.01"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# json ")
    assert json.loads(lines[0][7:])["report"]["status"] == "completed"
    assert lines[1] == "t,xi_1,xi_2,v_1,v_2"
    last = [float(v) for v in lines[-1].split(",")]
    assert_allclose(last[:3], [1.0, 0.0, math.e], atol=1e-7)


def test_cramer_rao_command(spec_dir, capsys):
    code, out, _ = run(["cramer-rao", "--family", spec_dir / "known.json", "--estimator", "median",
                        "--at=0", "--n", "101", "--trials", "20000", "--seed", "3"], capsys)
    assert code == 0
    v = json.loads(out)["report"]["verdict"]
    assert v["verdict"] == "PASS" and not v["near_equality"]
    code, out, _ = run(["cramer-rao", "--family", spec_dir / "known.json", "--estimator", "custom-expr",
                        "--expr", "x + 1", "--at=0", "--n", "10", "--trials", "2000"], capsys)
    assert code == 0 and json.loads(out)["report"]["verdict"]["verdict"] == "INAPPLICABLE"


def test_mse_expansion_command(spec_dir, capsys):
    code, out, _ = run(["mse-expansion", "--model", spec_dir / "poisson_model.json", "--at", "0.5",
                        "--n-list", "10,100", "--trials", "5000"], capsys)
    assert code == 0
    lines = out.splitlines()
    head = json.loads(lines[0][7:])
    assert head["report"]["flags"]["ancillary_assumed_m_flat"]
    assert_allclose(head["report"]["K_ab"], [[math.exp(-1)]], rtol=1e-6)
    assert lines[1].split(",")[:4] == ["N", "mse_11", "pred1_11", "pred2_11"]
    assert len(lines) == 4


def test_csv_not_available_for_matrices(spec_dir, capsys):
    code, _, err = run(["fisher", "--family", spec_dir / "gauss.json", "--at", "0,1", "--format", "csv"], capsys)
    assert code == 1 and "no tabular output" in err


@pytest.mark.parametrize("argv", [
    ["fisher", "--family", "{d}/gauss.json", "--at", "0,-1"],
    ["fisher", "--family", "{d}/gauss.json", "--at", "0"],
    ["fisher", "--family", "{d}/bad.json", "--at", "0"],
    ["fisher", "--family", "{d}/gauss.json"],
    ["frobnicate"],
])
def test_exit_one(spec_dir, capsys, argv):
    code, _, err = run([a.format(d=spec_dir) for a in argv], capsys)
    assert code == 1 and err


def test_exit_two_on_nonconvergence(spec_dir, capsys):
    code, out, err = run(["fisher", "--family", spec_dir / "gauss.json", "--at", "0,1", "--tol", "1e-300"], capsys)
    assert code == 2 and "did not converge" in err
    assert json.loads(out)["report"]["converged"] is False


def test_exit_three_on_io_error(spec_dir, capsys):
    code, _, err = run(["fisher", "--family", spec_dir / "missing.json", "--at", "0,1"], capsys)
    assert code == 3 and "I/O" in err
    code, _, _ = run(["fisher", "--family", spec_dir / "gauss.json", "--at", "0,1",
                      "--output", spec_dir / "no" / "such" / "dir.json"], capsys)
    assert code == 3


def test_output_file_is_byte_identical(spec_dir, capsys):
    out = spec_dir / "out.json"
    runs = []
    for _ in range(2):
        assert cli.main(["cramer-rao", "--family", str(spec_dir / "known.json"), "--estimator", "mean",
                         "--at=0", "--n", "20", "--trials", "5000", "--seed", "9", "--output", str(out)]) == 0
        runs.append(out.read_bytes())
    assert runs[0] == runs[1]


def test_console_module_entry(spec_dir):
    res = subprocess.run([sys.executable, "-m", "statmanifold", "fisher", "--family",
                          str(spec_dir / "gauss.json"), "--at", "0,2"], capture_output=True, text=True)
    assert res.returncode == 0
    assert_allclose(json.loads(res.stdout)["report"]["entries"], [[0.25, 0], [0, 0.5]], atol=1e-8)


def test_circle_model_spec_matches_closed_form():
    model, _ = model_from_spec({"ambient": {"kind": "gaussian", "parametrization": "natural"},
                                "embedding": ["3*cos(u)", "3*sin(u) - 4.8"], "u_domain": [[-1.5, 1.5]]})
    assert_allclose(model.xi([0.4]), [3 * math.cos(0.4), 3 * math.sin(0.4) - 4.8], rtol=1e-15)
    assert_allclose(model.tangent([0.4]), [[-3 * math.sin(0.4)], [3 * math.cos(0.4)]], atol=1e-8)
