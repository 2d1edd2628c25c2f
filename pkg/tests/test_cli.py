import json

import pytest

from noise_transport.cli import PRESETS, load_preset, main


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_run_fcn7_preset(tmp_path, capsys):
    assert main(["run", "--preset", "fcn7", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "p_sink(300) = 0.166667" in out
    assert "coherence" in out
    header = (tmp_path / "fcn7_trajectory.csv").read_text().splitlines()[0]
    assert header == "t,p0,p1,p2,p3,p4,p5,p6,p7,p_sink,p_sink_integral,re_c12,im_c12"
    assert (tmp_path / "fcn7_trajectory.json").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = write(tmp_path, "small.json", {
        "network": {"fcn": {"n": 4, "j": 1.0, "disorder_seed": 3}},
        "noise": {"sink": {"site": 4, "rate": 1.0}, "dephasing": {"mode": "local", "rates": 0.5}},
        "integrator": {"dt": 0.01, "t_final": 5.0},
        "observables": {"hybrid_pair": [1, 2]},
    })
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", cfg, "--out", str(a)]) == 0
    assert main(["run", cfg, "--out", str(b)]) == 0
    for suffix in ("csv", "json"):
        f = f"small_trajectory.{suffix}"
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert "p_plus,p_minus" in (a / "small_trajectory.csv").read_text().splitlines()[0]


def test_fmo_preset_summary(tmp_path, capsys):
    cfg = write(tmp_path, "fmo_short.json", {"integrator": {"record_stride": 1000}})
    assert main(["run", cfg, "--preset", "fmo", "--out", str(tmp_path)]) == 0
    assert "p_sink(5) = 0.5700" in capsys.readouterr().out


def test_invariant_commands(tmp_path, capsys):
    assert main(["invariant", "--preset", "fcn7", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fcn7_invariant.json").read_text())
    assert doc["dimension"] == 5 and abs(doc["asymptotic_sink"] - 1 / 6) < 1e-10
    assert main(["invariant", "--preset", "fcn7_disorder", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fcn7_disorder_invariant.json").read_text())
    assert doc["dimension"] == 0 and abs(doc["asymptotic_sink"] - 1) < 1e-10


def test_single_point_sweep(tmp_path):
    cfg = write(tmp_path, "one.json", {"sweep": {"parameter": "gamma", "grid": [1.0], "t": 50.0}})
    assert main(["sweep", cfg, "--preset", "fcn7", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "one_sweep.csv").read_text().splitlines()
    assert rows[0] == "gamma,p_sink" and len(rows) == 2
    assert float(rows[1].split(",")[1]) > 0.9


def test_small_optimize(tmp_path):
    cfg = write(tmp_path, "opt.json", {
        "network": {"fcn": {"n": 3, "j": 1.0}}, "noise": {"sink": {"site": 3, "rate": 1.0}},
        "integrator": {"dt": 0.01},
        "optimize": {"free": "local", "target_time": 5.0, "restarts": 2, "budget": 15,
                     "robustness": True},
    })
    assert main(["optimize", cfg, "--out", str(tmp_path), "--threads", "2"]) == 0
    doc = json.loads((tmp_path / "opt_optimization.json").read_text())
    assert set(doc) >= {"parameters", "objective", "restarts", "seed", "budget", "robustness"}
    assert len(doc["restarts"]) == 2


def test_mode_subset_run(tmp_path, capsys):
    cfg = write(tmp_path, "modes.json", {"integrator": {"t_final": 0.1, "dt": 0.005}})
    code = main(["run", cfg, "--preset", "fmo_modes", "--modes-subset", "1,2",
                 "--out", str(tmp_path)])
    assert code == 0
    assert "max mode excitation" in capsys.readouterr().out


@pytest.mark.parametrize("doc", [
    {"network": {"fcn": {"n": 3}, "builtin": "fmo"}},
    {"network": {"builtin": "nope"}},
    {"network": {"fcn": {"n": 3}}, "initial": {"site": 9}},
    {"network": {"fcn": {"n": 3}}, "integrator": {"dt": 0.3, "t_final": 1.0}},
    {"network": {"fcn": {"n": 3}}, "noise": {"dephasing": {"mode": "correlated",
                                                           "matrix": [[1, 2, 0], [2, 1, 0], [0, 0, 1]]}}},
])
def test_config_errors_exit_2(tmp_path, doc):
    assert main(["run", write(tmp_path, "bad.json", doc), "--out", str(tmp_path)]) == 2


def test_malformed_json_and_missing_file(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{")
    assert main(["run", str(p), "--out", str(tmp_path)]) == 2
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert main(["run"]) == 2


def test_numerical_failure_exit_3(tmp_path):
    cfg = write(tmp_path, "unstable.json", {
        "network": {"fcn": {"n": 3}}, "noise": {"sink": {"site": 3, "rate": 1.0}},
        "integrator": {"dt": 2.5, "t_final": 500.0},
    })
    assert main(["run", cfg, "--out", str(tmp_path)]) == 3


def test_all_presets_parse():
    for name in PRESETS:
        assert "network" in load_preset(name)
