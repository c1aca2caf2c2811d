import csv
import json
from pathlib import Path

import pytest

from pm25gnn import cli
from pm25gnn.dataio import load_dataset
from pm25gnn.geograph import haversine_km, read_graph_json

TINY = """\
# five-city world, short run
synth.n_cities = 5
synth.n_timesteps = 160
synth.lat_max = 36.0
synth.lon_max = 114.0
synth.min_separation_km = 30
train.epochs = 2
model.h_dim = 8
model.e_dim = 6
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert run("gen-synth", "--config", root / "tiny.cfg", "--out", root / "ds") == 0
    assert run("train", "--data", root / "ds", "--config", root / "tiny.cfg", "--out", root / "run") == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))




def test_build_graph_flat_world(tmp_path, capsys):
    cfg = tmp_path / "flat.cfg"
    cfg.write_text("synth.n_timesteps = 10\nsynth.base_elevation_m = 0\n")
    from pm25gnn.synth import SynthConfig, generate_world

    world = generate_world(SynthConfig(n_timesteps=10, mountains=()))
    from pm25gnn.dataio import save_dataset

    save_dataset(tmp_path / "ds", world.to_dataset())
    assert run("build-graph", "--nodes", tmp_path / "ds" / "nodes.csv", "--elevation", tmp_path / "ds" / "elevation.grid", "--out", tmp_path / "g.json") == 0
    out = capsys.readouterr().out
    cities = world.cities
    expected = sum(2 for i in range(12) for j in range(i + 1, 12) if haversine_km(cities[i], cities[j]) < 300.0)
    assert f"edges {expected}" in out and "nodes 12" in out
    assert read_graph_json(tmp_path / "g.json", cities).n_edges == expected


def test_build_graph_zero_distance_gate(tiny, tmp_path, capsys, caplog):
    code = run("build-graph", "--nodes", tiny / "ds" / "nodes.csv", "--elevation", tiny / "ds" / "elevation.grid", "--d-theta", 0, "--out", tmp_path / "g.json")
    assert code == 0
    assert "edges 0" in capsys.readouterr().out
    assert "no edges" in caplog.text


def test_build_graph_missing_elevation(tiny, tmp_path, capsys):
    missing = tmp_path / "nowhere.grid"
    assert run("build-graph", "--nodes", tiny / "ds" / "nodes.csv", "--elevation", missing, "--out", tmp_path / "g.json") == 2
    assert str(missing) in capsys.readouterr().err


def test_gen_synth_outputs(tiny):
    ds = load_dataset(tiny / "ds")
    assert ds.pm25.shape == (160, 5)
    splits = json.loads((tiny / "ds" / "splits.json").read_text())
    assert set(splits) == {"train", "validate", "test"}
    meta = json.loads((tiny / "ds" / "run_meta.json").read_text())
    assert meta["config"]["synth.n_cities"] == 5 and "wall_time_s" in meta and "numpy" in meta["versions"]


def test_train_outputs(tiny):
    assert (tiny / "run" / "checkpoint" / "checkpoint.json").exists()
    hist = _rows(tiny / "run" / "history.csv")
    assert hist[0] == ["epoch", "train_loss", "val_loss"] and len(hist) == 4
    m = json.loads((tiny / "run" / "metrics.json").read_text())
    assert m["epochs_run"] == 2


def test_evaluate_and_predict(tiny, tmp_path):
    assert run("evaluate", "--data", tiny / "ds", "--checkpoint", tiny / "run" / "checkpoint", "--out", tmp_path / "ev") == 0
    rows = _rows(tmp_path / "ev" / "metrics.csv")
    assert [r[0] for r in rows[1:]] == ["Train_Loss", "Validate_Loss", "Test_Loss", "RMSE", "MAE", "CSI", "POD", "FAR"]
    lt = _rows(tmp_path / "ev" / "per_leadtime.csv")
    assert [int(r[0]) for r in lt[1:]] == [3, 12, 24, 36, 48, 60, 72]
    assert _rows(tmp_path / "ev" / "traces.csv")[0] == ["start_time", "city_id", "leadtime_h", "pred_ugm3", "truth_ugm3"]
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["report"]["categorical"] == "pooled"

    assert run("evaluate", "--data", tiny / "ds", "--checkpoint", tiny / "run" / "checkpoint", "--per-cell-categorical", "--out", tmp_path / "ev2") == 0
    assert json.loads((tmp_path / "ev2" / "metrics.json").read_text())["report"]["categorical"] == "per_cell"

    assert run("predict", "--data", tiny / "ds", "--checkpoint", tiny / "run" / "checkpoint", "--start", "2015-01-03T06:00:00Z", "--out", tmp_path / "pr") == 0
    fc = _rows(tmp_path / "pr" / "forecast.csv")
    assert fc[0] == ["city_id", "leadtime_h", "pm25_ugm3"]
    body = fc[1:]
    assert len(body) == 5 * 24
    for city in range(5):
        lts = [int(r[1]) for r in body if int(r[0]) == city]
        assert lts == list(range(3, 73, 3))
    assert all(0.0 <= float(r[2]) <= 500.0 for r in body)


def test_predict_start_checks(tiny, tmp_path, capsys):
    ck = tiny / "run" / "checkpoint"
    assert run("predict", "--data", tiny / "ds", "--checkpoint", ck, "--start", "2015-01-03T07:00:00Z", "--out", tmp_path / "p") == 2
    assert run("predict", "--data", tiny / "ds", "--checkpoint", ck, "--start", 150, "--out", tmp_path / "p") == 2
    assert run("predict", "--data", tiny / "ds", "--checkpoint", ck, "--start", 17, "--out", tmp_path / "p") == 0
    capsys.readouterr()


def test_outputs_are_reproducible(tiny, tmp_path):
    for k in (1, 2):
        assert run("train", "--data", tiny / "ds", "--config", tiny / "tiny.cfg", "--out", tmp_path / f"r{k}") == 0
        assert run("evaluate", "--data", tiny / "ds", "--checkpoint", tmp_path / f"r{k}" / "checkpoint", "--out", tmp_path / f"e{k}") == 0
    for rel in ["history.csv", "metrics.json", "checkpoint/checkpoint.json"] + [
        f"checkpoint/tensors/{p.name}" for p in (tmp_path / "r1" / "checkpoint" / "tensors").iterdir()
    ]:
        assert (tmp_path / "r1" / rel).read_bytes() == (tmp_path / "r2" / rel).read_bytes(), rel
    for rel in ("metrics.csv", "per_leadtime.csv", "traces.csv", "metrics.json"):
        assert (tmp_path / "e1" / rel).read_bytes() == (tmp_path / "e2" / rel).read_bytes(), rel
    # and against the fixture run made with identical inputs
    assert (tmp_path / "r1" / "history.csv").read_bytes() == (tiny / "run" / "history.csv").read_bytes()


def test_flags_override_config(tiny, tmp_path):
    assert run("train", "--data", tiny / "ds", "--config", tiny / "tiny.cfg", "--train.epochs", 1, "--model", "gru", "--out", tmp_path / "r") == 0
    meta = json.loads((tmp_path / "r" / "run_meta.json").read_text())
    assert meta["config"]["train.epochs"] == 1 and meta["config"]["model.kind"] == "gru"
    assert meta["config"]["model.h_dim"] == 8


def test_unknown_config_key(tiny, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.epochs = 1\ntrain.learning_rate = 0.1\n")
    assert run("train", "--data", tiny / "ds", "--config", bad, "--out", tmp_path / "r") == 2
    err = capsys.readouterr().err
    assert "train.learning_rate" in err and "bad.cfg:2" in err


def test_bad_values_and_missing_data(tiny, tmp_path, capsys):
    assert run("train", "--data", tiny / "ds", "--train.lr", "fast", "--out", tmp_path / "r") == 2
    assert run("train", "--data", tiny / "ds", "--model.kind", "cnn", "--out", tmp_path / "r") == 2
    assert run("train", "--data", tmp_path / "absent", "--out", tmp_path / "r") == 3
    capsys.readouterr()


def test_checksum_failure_is_data_error(tiny, tmp_path, capsys):
    import shutil

    shutil.copytree(tiny / "ds", tmp_path / "ds")
    p = tmp_path / "ds" / "pm25.knt"
    raw = bytearray(p.read_bytes())
    raw[-2] ^= 1
    p.write_bytes(bytes(raw))
    assert run("evaluate", "--data", tmp_path / "ds", "--checkpoint", tiny / "run" / "checkpoint", "--out", tmp_path / "e") == 3
    assert "checksum" in capsys.readouterr().err


def test_nan_training_exit_code(tiny, tmp_path, capsys):
    from pm25gnn.dataio import save_dataset

    ds = load_dataset(tiny / "ds")
    ds.meteo = ds.meteo.copy()
    ds.meteo[40, 2, 1] = float("nan")
    save_dataset(tmp_path / "ds", ds)
    assert run("train", "--data", tmp_path / "ds", "--config", tiny / "tiny.cfg", "--out", tmp_path / "r") == 4
    assert "non-finite" in capsys.readouterr().err


def test_ablate_and_compare(tiny, tmp_path, capsys):
    common = ["--data", tiny / "ds", "--config", tiny / "tiny.cfg", "--train.epochs", 1]
    assert run("ablate", *common, "--out", tmp_path / "ab") == 0
    assert _rows(tmp_path / "ab" / "ablation.csv")[0] == ["metric", "PM2.5-GNN", "no PBL height", "no export"]
    assert sorted(p.name for p in (tmp_path / "ab" / "runs").iterdir()) == ["no_export_seed0", "no_pbl_seed0", "pm25gnn_seed0"]
    assert run("compare", *common, "--models", "mlp,lstm", "--train.repeats", 2, "--jobs", 2, "--out", tmp_path / "cmp") == 0
    rows = _rows(tmp_path / "cmp" / "compare.csv")
    assert rows[0] == ["metric", "mlp", "lstm"] and all(" ± " in c for r in rows[1:] for c in r[1:])
    assert run("compare", *common, "--models", "mlp,svm", "--out", tmp_path / "x") == 2
    capsys.readouterr()


def _subparsers():
    ap = cli.build_parser()
    action = next(a for a in ap._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


@pytest.mark.parametrize("name", ["build-graph", "gen-synth", "train", "evaluate", "predict", "ablate", "compare"])
def test_help_lists_every_flag_with_default(name):
    p = _subparsers()[name]
    text = " ".join(p.format_help().split())
    for a in p._actions:
        if not a.option_strings or a.dest == "help":
            continue
        assert a.option_strings[-1] in text
        if not a.required:
            assert a.help and "default" in a.help, a.option_strings
    for key, opt in cli.SCHEMA.items():
        if f"--{key} " in text:
            assert f"(default: {opt.default})" in text


def test_schema_covers_dataclasses():
    from dataclasses import fields

    from pm25gnn.model import ModelSpec
    from pm25gnn.synth import SynthConfig

    keys = set(cli.SCHEMA)
    assert {f"model.{f.name}" for f in fields(ModelSpec) if f.name != "seed"} <= keys
    assert {f"synth.{k}" for k in SynthConfig.scalar_fields()} <= keys
    assert "train.lr" in keys and "graph.d_theta_km" in keys
