import csv
import json
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from herglotz import cli, value
from herglotz.model import Registry

DISCOUNTED_REF = 0.29098835343466295


def write(tmp_path, body, name="exp.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body))
    return str(p)


MINIMIZE = """
task = "minimize"
[model]
name = "quadratic-free"
[geometry]
x0 = 0.0
x1 = 1.0
t = 1.0
u0 = 0.0
[numerics]
N = 64
[output]
formats = ["csv", "json", "plotdata"]
"""


def run(tmp_path, body, out="out", **kw):
    cfg = write(tmp_path, body)
    outdir = str(tmp_path / out)
    code = cli.run(cfg, output=outdir, **kw)
    man = None
    if os.path.exists(os.path.join(outdir, "manifest.json")):
        with open(os.path.join(outdir, "manifest.json")) as fp:
            man = json.load(fp)
    return code, man, outdir


def test_minimize_quadratic(tmp_path):
    code, man, _ = run(tmp_path, MINIMIZE)
    assert code == 0
    assert abs(man["metrics"]["action"] - 0.5) <= 1e-9
    assert all(man["invariants"].values())


def test_compare_discounted(tmp_path):
    body = """
    task = "compare"
    [model]
    name = "discounted"
    params = { lam = 1.0 }
    [geometry]
    x0 = 0.0
    x1 = 1.0
    t = 1.0
    u0 = 0.0
    """
    code, man, _ = run(tmp_path, body)
    assert code == 0
    vals = man["metrics"]["values"]
    assert set(vals) == {"direct", "characteristics", "oracle"}
    for v in vals.values():
        assert abs(v - DISCOUNTED_REF) <= 1e-5


def test_missing_key_exit_2(tmp_path, capsys):
    body = MINIMIZE.replace("t = 1.0\n", "")
    code, man, _ = run(tmp_path, body)
    assert code == 2
    assert "geometry.t" in capsys.readouterr().err


@pytest.mark.parametrize(
    "edit, needle",
    [
        (("N = 64", "N = 64\nfoo = 1"), "numerics.foo"),
        (("[model]", "[modle]"), "modle"),
        (("N = 64", "N = \"many\""), "numerics.N"),
        (('task = "minimize"', 'task = "solve"'), "task"),
        (("x1 = 1.0", "x1 = [1.0, 2.0]"), "geometry.x1"),
        (('name = "quadratic-free"', 'name = "nope"'), "nope"),
        (("[geometry]", "[geometry"), "line"),
    ],
)
def test_config_errors(tmp_path, capsys, edit, needle):
    code, _, _ = run(tmp_path, MINIMIZE.replace(*edit))
    assert code == 2
    assert needle in capsys.readouterr().err


def test_manifests_byte_identical(tmp_path):
    cfg = write(tmp_path, MINIMIZE.replace("N = 64", "N = 32\nmultistart = true"))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.run(cfg, output=a, seed=3) == 0
    assert cli.run(cfg, output=b, seed=3) == 0
    for name in ("manifest.json", "path.csv", "path_u.dat"):
        with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read()
    man = json.load(open(os.path.join(a, "manifest.json")))
    assert man["config"]["numerics"]["seed"] == 3
    assert "wall_time_s" in json.load(open(os.path.join(a, "timing.json")))


def _parse(path, fmt):
    if fmt == "json":
        with open(path) as fp:
            return json.load(fp)
    if fmt == "csv":
        with open(path, newline="") as fp:
            rows = list(csv.reader(fp))
        assert len(rows) >= 2 and all(len(r) == len(rows[0]) for r in rows)
        return rows
    rows = np.loadtxt(path, ndmin=2)
    assert rows.shape[1] == 2
    return rows


@pytest.mark.parametrize("task", ["minimize", "shoot", "invariants", "compare"])
def test_files_roundtrip(tmp_path, task):
    body = MINIMIZE.replace('task = "minimize"', f'task = "{task}"').replace("N = 64", "N = 32\nsteps = 64")
    code, man, outdir = run(tmp_path, body)
    assert code == 0, man
    assert man["files"]
    for f in man["files"]:
        _parse(os.path.join(outdir, f["path"]), f["format"])


def test_table_task(tmp_path):
    body = """
    task = "table"
    [model]
    name = "quadratic-free"
    [geometry]
    x0 = 0.0
    u0 = 0.0
    t_grid = { start = 1.0, stop = 2.0, num = 5 }
    x_grid = [-0.5, -0.25, 0.0, 0.25, 0.5]
    [numerics]
    N = 16
    [output]
    formats = ["csv", "json", "plotdata"]
    """
    code, man, outdir = run(tmp_path, body, jobs=1)
    assert code == 0
    assert man["metrics"]["cells"] == 25 and man["metrics"]["converged_cells"] == 25
    assert man["metrics"]["hj_residual_max"] <= 1e-2
    tab = value.load_table(os.path.join(outdir, "table.json"))
    exact = tab.x_axes[0][None] ** 2 / (2 * tab.t_grid[:, None])
    np.testing.assert_allclose(tab.h, exact, atol=1e-12)
    for f in man["files"]:
        _parse(os.path.join(outdir, f["path"]), f["format"])


def test_jobs_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("HERGLOTZ_JOBS", "2")
    code, _, outdir = run(tmp_path, MINIMIZE)
    assert code == 0
    assert json.load(open(os.path.join(outdir, "timing.json")))["jobs"] == 2
    monkeypatch.setenv("HERGLOTZ_JOBS", "lots")
    code, _, _ = run(tmp_path, MINIMIZE, out="o2")
    assert code == 2


def test_numeric_failure_writes_manifest(tmp_path):
    body = """
    task = "shoot"
    [model]
    name = "mechanical"
    params = { amplitude = 40.0 }
    [geometry]
    x0 = 0.0
    x1 = 30.0
    t = 6.0
    u0 = 0.0
    [numerics]
    steps = 8
    hamiltonian = "closed-form"
    """
    code, man, _ = run(tmp_path, body)
    assert code == 1
    assert man["status"] == "numeric-failure" and "Shooting" in man["error"]


REGISTER = """
task = "minimize"
[[register]]
name = "slow-discount"
base = "discounted"
params = { lam = 0.1 }
[model]
name = "slow-discount"
[geometry]
x0 = 0.0
x1 = 1.0
t = 1.0
u0 = 0.0
[numerics]
N = 32
"""


def test_registered_model_runs_and_lists(tmp_path, capsys):
    code, man, _ = run(tmp_path, REGISTER)
    assert code == 0
    assert man["config"]["model"]["params"]["lam"] == 0.1
    cfg = write(tmp_path, REGISTER, "reg.toml")
    assert cli.main(["models", "--config", cfg]) == 0
    out = capsys.readouterr().out
    for name in ("quadratic-free", "discounted", "mechanical", "bounded-contact", "slow-discount"):
        assert name in out


def test_register_factory(tmp_path):
    body = REGISTER.replace('base = "discounted"\nparams = { lam = 0.1 }', 'factory = "herglotz.model:mechanical"\nparams = { amplitude = 0.5 }')
    # the Erdmann certificate needs a fine grid for potentials
    body = body.replace("N = 32", "N = 128")
    code, man, _ = run(tmp_path, body)
    assert code == 0
    bad = REGISTER.replace('base = "discounted"', 'factory = "no.such:thing"')
    code, _, _ = run(tmp_path, bad, out="bad")
    assert code == 2


def test_models_listing_and_empty_registry(capsys):
    assert cli.main(["models"]) == 0
    out = capsys.readouterr().out
    assert "L1 L2 L3" in out and "bounded-contact" in out
    assert cli.list_models(Registry({})) == "(no models registered)"
    text = cli.list_models(check=True)
    assert "L1:pass" in text


def test_console_script(tmp_path):
    cfg = write(tmp_path, MINIMIZE)
    out = str(tmp_path / "console")
    proc = subprocess.run(
        [sys.executable, "-m", "herglotz.cli", "run", "--config", cfg, "--output", out, "--jobs", "1"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert os.path.exists(os.path.join(out, "manifest.json"))
