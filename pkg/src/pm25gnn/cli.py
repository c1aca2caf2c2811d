"""``pm25gnn`` command line: graph building, synthetic data, training and scoring.

Options live in one schema. Each option can come from a flat ``key = value``
config file (``train.lr = 5e-4``, ``#`` comments) or from the matching
``--train.lr`` flag; flags win.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    DataError,
    MissingFileError,
    SplitError,
    atomic_write,
    format_time,
    load_checkpoint,
    load_dataset,
    parse_time,
    ratio_splits,
    read_splits,
    save_checkpoint,
    save_dataset,
    write_splits,
)
from .featurize import WIND_CONVENTIONS
from .geograph import GraphTopology, build_adjacency, read_elevation_grid, read_nodes_csv, write_graph_json
from .metrics import POLLUTION_THRESHOLD, STEP_HOURS
from .model import KINDS, ModelSpec, predict
from .synth import SynthConfig, SynthError, generate_world
from .train import PRECISIONS, METRIC_ROWS, TrainingAborted, TrainingConfig, evaluate, prepare_data, run_experiment, train_model

EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 2, 3, 4
log = logging.getLogger("pm25gnn")


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    key: str
    type: type
    default: object
    help: str
    choices: tuple | None = None

    def parse(self, raw):
        try:
            value = _bool(raw) if self.type is bool else self.type(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.key}: cannot parse {raw!r} as {self.type.__name__}") from None
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.key}: {value!r} not in {self.choices}")
        return value


_TRAIN_HELP = {
    "epochs": "maximum training epochs",
    "lr": "RMSprop learning rate",
    "batch_size": "windows per mini-batch",
    "horizon_steps": "forecast steps per window (3 h each)",
    "early_stop_patience": "epochs without validation improvement before stopping",
    "seed": "base random seed",
    "precision": "floating point width for training",
    "alpha": "RMSprop smoothing constant",
    "eps": "RMSprop denominator offset",
}


def _schema() -> dict[str, Option]:
    opts: list[Option] = []
    for f in fields(TrainingConfig):
        if f.name in _TRAIN_HELP:
            choices = tuple(PRECISIONS) if f.name == "precision" else None
            opts.append(Option(f"train.{f.name}", type(f.default), f.default, _TRAIN_HELP[f.name], choices))
    opts += [
        Option("train.repeats", int, 1, "seeds per model in compare/ablate"),
        Option("train.jobs", int, 1, "parallel training runs in compare/ablate"),
        Option("graph.d_theta_km", float, TrainingConfig.d_theta_km, "distance gate in km"),
        Option("graph.m_theta_m", float, TrainingConfig.m_theta_m, "terrain gate in m"),
        Option("graph.wind_convention", str, "toward", "wind direction convention", WIND_CONVENTIONS),
        Option("eval.threshold", float, POLLUTION_THRESHOLD, "pollution threshold in ug/m3"),
        Option("eval.per_cell_categorical", bool, False, "average CSI/POD/FAR per (leadtime, city) cell"),
    ]
    for f in fields(ModelSpec):
        if f.name == "seed":
            continue
        choices = KINDS if f.name == "kind" else None
        opts.append(Option(f"model.{f.name}", type(f.default), f.default, f"model {f.name.replace('_', ' ')}", choices))
    for name, default in SynthConfig.scalar_fields().items():
        opts.append(Option(f"synth.{name}", type(default), default, f"synthetic world {name.replace('_', ' ')}"))
    return {o.key: o for o in opts}


SCHEMA = _schema()


def read_config(path) -> dict[str, object]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = SCHEMA[key].parse(raw)
    return out


def resolve(args, sections) -> dict[str, object]:
    """Defaults, then config file, then flags."""
    cfg = {k: o.default for k, o in SCHEMA.items() if k.split(".")[0] in sections}
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            if k.split(".")[0] in sections:
                cfg[k] = v
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = SCHEMA[k].parse(v)
    return cfg


def training_config(cfg: dict, splits=None) -> TrainingConfig:
    kw = {f.name: cfg[f"train.{f.name}"] for f in fields(TrainingConfig) if f"train.{f.name}" in cfg}
    try:
        return TrainingConfig(
            **kw,
            wind_convention=cfg["graph.wind_convention"],
            d_theta_km=cfg["graph.d_theta_km"],
            m_theta_m=cfg["graph.m_theta_m"],
            splits=splits,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_spec(cfg: dict, **over) -> ModelSpec:
    kw = {f.name: cfg[f"model.{f.name}"] for f in fields(ModelSpec) if f"model.{f.name}" in cfg}
    kw.update(over)
    kw["seed"] = cfg.get("train.seed", 0)
    try:
        return ModelSpec(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_csv(path, rows) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    atomic_write(path, buf.getvalue())


def _run_meta(out: Path, command: str, cfg: dict, t0: float, **extra) -> None:
    meta = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("train.seed", cfg.get("synth.seed")),
        "versions": {"pm25gnn": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    meta.update(extra)
    atomic_write(out / "run_meta.json", json.dumps(meta, indent=1, sort_keys=True))


def _fmt(x: float) -> str:
    return repr(float(x))


# -- commands --------------------------------------------------------------------------


def cmd_build_graph(args) -> int:
    for p in (args.nodes, args.elevation):
        if not Path(p).exists():
            raise ConfigError(f"input file not found: {p}")
    cities = read_nodes_csv(args.nodes)
    grid = read_elevation_grid(args.elevation)
    topo = build_adjacency(cities, grid, args.d_theta, args.m_theta)
    if topo.n_edges == 0:
        log.warning("graph has no edges (d_theta=%s km, m_theta=%s m)", args.d_theta, args.m_theta)
    write_graph_json(args.out, topo)
    print(f"nodes {topo.n_nodes}")
    print(f"edges {topo.n_edges}")
    print("in-degree histogram: " + ", ".join(f"{d}:{c}" for d, c in sorted(topo.degree_histogram().items())))
    return 0


def cmd_gen_synth(args) -> int:
    t0 = time.perf_counter()
    cfg = resolve(args, ("synth",))
    try:
        scfg = SynthConfig(**{k.split(".", 1)[1]: v for k, v in cfg.items()})
        world = generate_world(scfg)
    except SynthError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    ds = world.to_dataset(args.name)
    save_dataset(out, ds)
    write_splits(out / "splits.json", ratio_splits(ds.manifest))
    _run_meta(out, "gen-synth", cfg, t0, edges=world.topology.n_edges)
    print(f"wrote {len(world.cities)} cities x {len(world.timestamps)} steps ({world.topology.n_edges} edges) to {out}")
    return 0


def _load_splits(args, manifest):
    return read_splits(args.splits) if args.splits else ratio_splits(manifest)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = resolve(args, ("train", "model", "graph"))
    if args.model:
        cfg["model.kind"] = SCHEMA["model.kind"].parse(args.model)
    ds = load_dataset(args.data)
    tcfg = training_config(cfg, _load_splits(args, ds.manifest))
    spec = model_spec(cfg)
    data = prepare_data(ds, tcfg)
    ckpt, hist = train_model(spec, data, tcfg)
    out = Path(args.out)
    save_checkpoint(out / "checkpoint", ckpt)
    hist.to_csv(out / "history.csv")
    metrics = {"train_loss": hist.best_train, "validate_loss": hist.best_val, "best_epoch": hist.best_epoch, "epochs_run": hist.rows[-1][0]}
    atomic_write(out / "metrics.json", json.dumps(metrics, indent=1))
    _run_meta(out, "train", cfg, t0, wall_time_train_s=round(hist.wall_time_s, 3))
    print(f"{spec.label}: best epoch {hist.best_epoch}, validate loss {hist.best_val:.5f}")
    return 0


def _data_for_checkpoint(ds, ckpt, splits=None):
    c = ckpt.config
    tcfg = TrainingConfig(
        horizon_steps=c.get("horizon_steps", 24),
        precision=c.get("precision", "float64"),
        wind_convention=c.get("wind_convention", "toward"),
        d_theta_km=c.get("d_theta_km", TrainingConfig.d_theta_km),
        m_theta_m=c.get("m_theta_m", TrainingConfig.m_theta_m),
        splits=splits,
    )
    topo = GraphTopology.from_json(ckpt.graph, ds.cities) if ckpt.graph else None
    return tcfg, topo


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    cfg = resolve(args, ("eval",))
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    tcfg, topo = _data_for_checkpoint(ds, ckpt, _load_splits(args, ds.manifest))
    data = prepare_data(ds, tcfg, topo, standardizer=ckpt.standardizer)
    h = tcfg.horizon_steps
    kw = dict(horizon=h, threshold=cfg["eval.threshold"], per_cell_categorical=cfg["eval.per_cell_categorical"])
    losses = {name: evaluate(ckpt, data, split, **kw).loss for name, split in (("Train_Loss", "train"), ("Validate_Loss", "validate"))}
    ev = evaluate(ckpt, data, "test", **kw)
    rep = ev.report
    values = dict(losses, Test_Loss=ev.loss, RMSE=rep.rmse, MAE=rep.mae, CSI=rep.csi, POD=rep.pod, FAR=rep.far)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", [["metric", ckpt.spec.label]] + [[m, _fmt(values[m])] for m in METRIC_ROWS])
    _write_csv(
        out / "per_leadtime.csv",
        [["leadtime_h", "rmse", "mae", "csi", "pod", "far"]]
        + [[tau] + [_fmt(v[k]) for k in ("rmse", "mae", "csi", "pod", "far")] for tau, v in rep.per_leadtime.items()],
    )
    rows = [["start_time", "city_id", "leadtime_h", "pred_ugm3", "truth_ugm3"]]
    ts = ds.timestamps
    for s, start in enumerate(ev.starts):
        for k in range(h):
            for i in range(ev.pred.shape[2]):
                rows.append([format_time(ts[start]), i, STEP_HOURS * (k + 1), _fmt(ev.pred[s, k, i]), _fmt(ev.truth[s, k, i])])
    _write_csv(out / "traces.csv", rows)
    atomic_write(out / "metrics.json", json.dumps({"values": values, "report": rep.as_dict()}, indent=1))
    _run_meta(out, "evaluate", cfg, t0, checkpoint=str(args.checkpoint))
    for note in rep.degenerate:
        log.warning(note)
    for m in METRIC_ROWS:
        print(f"{m:14s} {values[m]:.4f}")
    return 0


def cmd_predict(args) -> int:
    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    tcfg, topo = _data_for_checkpoint(ds, ckpt)
    h = tcfg.horizon_steps
    if args.start.lstrip("-").isdigit():
        start = int(args.start)
    else:
        start = (parse_time(args.start) - ds.manifest.t0) // ds.manifest.step_seconds
        if parse_time(args.start) != ds.manifest.t0 + start * ds.manifest.step_seconds:
            raise ConfigError(f"--start {args.start} is not on the 3-hour grid of the dataset")
    if not 0 <= start < ds.manifest.n_timesteps - h:
        raise ConfigError(f"--start index {start} leaves fewer than {h} forecast steps in the dataset")
    data = prepare_data(ds, tcfg, topo, standardizer=ckpt.standardizer, need_splits=False)
    if not np.all(np.isfinite(data.X[start])):
        raise DataError(f"PM2.5 observation missing at start index {start}")
    idx = np.arange(start + 1, start + 1 + h)
    Q = data.Q[idx][None] if ckpt.spec.kind == "pm25gnn" else None
    pred = predict(ckpt.spec, ckpt.params, data.X[start][None], data.P[idx][None], Q, data.topology)[0]
    phys = ckpt.standardizer.invert_prediction(pred.astype(np.float64))
    rows = [["city_id", "leadtime_h", "pm25_ugm3"]]
    for i, city in enumerate(ds.cities):
        for k in range(h):
            rows.append([city.id, STEP_HOURS * (k + 1), _fmt(phys[k, i])])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "forecast.csv", rows)
    _run_meta(out, "predict", {"start": start}, t0, checkpoint=str(args.checkpoint), start_time=format_time(ds.timestamps[start]))
    print(f"forecast for {len(ds.cities)} cities x {h} leadtimes from {format_time(ds.timestamps[start])}")
    return 0


ABLATION_COLUMNS = (("PM2.5-GNN", {}), ("no PBL height", {"drop_pbl": True}), ("no export", {"no_export": True}))


def _experiment(args, specs_for, command, header) -> int:
    t0 = time.perf_counter()
    cfg = resolve(args, ("train", "model", "graph", "eval"))
    ds = load_dataset(args.data)
    tcfg = training_config(cfg, _load_splits(args, ds.manifest))
    specs = specs_for(cfg)
    data = prepare_data(ds, tcfg)
    out = Path(args.out)
    res = run_experiment(
        specs, data, tcfg, cfg["train.repeats"], jobs=args.jobs or cfg["train.jobs"], out_dir=out / "runs",
        per_cell_categorical=cfg["eval.per_cell_categorical"],
    )
    table = res.table()
    if header:
        table[0] = ["metric"] + list(header)
    _write_csv(out / f"{command}.csv", table)
    _run_meta(out, command, cfg, t0)
    widths = [max(len(str(r[c])) for r in table) for c in range(len(table[0]))]
    for row in table:
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)))
    return 0


def cmd_ablate(args) -> int:
    return _experiment(
        args,
        lambda cfg: [model_spec(cfg, **{"kind": "pm25gnn", "drop_pbl": False, "no_export": False, **kw}) for _, kw in ABLATION_COLUMNS],
        "ablation",
        [name for name, _ in ABLATION_COLUMNS],
    )


def cmd_compare(args) -> int:
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown model kind {k!r}; expected one of {KINDS}")
    return _experiment(
        args, lambda cfg: [model_spec(cfg, kind=k, drop_pbl=False, no_export=False) for k in kinds], "compare", None
    )


# -- parser ------------------------------------------------------------------------------


def _add_schema_flags(p: argparse.ArgumentParser, sections) -> None:
    g = p.add_argument_group("settings (also accepted as 'key = value' lines in --config)")
    for key, opt in SCHEMA.items():
        if key.split(".")[0] in sections:
            extra = f" {{{','.join(map(str, opt.choices))}}}" if opt.choices else ""
            g.add_argument(f"--{key}", dest=key, metavar=opt.type.__name__.upper(), help=f"{opt.help}{extra} (default: {opt.default})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pm25gnn", description="City-graph PM2.5 forecasting toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: False)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="gate city pairs by distance and terrain, write graph.json")
    p.add_argument("--nodes", required=True, help="nodes.csv with id,name,lat,lon,altitude")
    p.add_argument("--elevation", required=True, help="elevation.grid text file")
    p.add_argument("--d-theta", type=float, default=SCHEMA["graph.d_theta_km"].default, help="distance gate in km (default: %(default)s)")
    p.add_argument("--m-theta", type=float, default=SCHEMA["graph.m_theta_m"].default, help="terrain gate in m (default: %(default)s)")
    p.add_argument("--out", required=True, help="output graph.json")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="key = value config file (default: none)")
    p.add_argument("--name", default="synth", help="dataset name (default: %(default)s)")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_schema_flags(p, ("synth",))
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--splits", help="splits.json (default: 2:1:1 chronological)")
    p.add_argument("--model", help=f"model kind {KINDS} (default: model.kind)")
    p.add_argument("--config", help="key = value config file (default: none)")
    p.add_argument("--out", required=True, help="run directory")
    _add_schema_flags(p, ("train", "model", "graph"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on every split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--splits", help="splits.json (default: 2:1:1 chronological)")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--config", help="key = value config file (default: none)")
    p.add_argument("--per-cell-categorical", dest="eval.per_cell_categorical", action="store_const", const="true",
                   help="average CSI/POD/FAR per (leadtime, city) cell (default: pooled)")
    p.add_argument("--out", required=True, help="run directory")
    _add_schema_flags(p, ("eval",))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="72-hour forecast from one start time")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--start", required=True, help="ISO-8601 UTC time or timestep index")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_predict)

    for name, func, extra in (
        ("ablate", cmd_ablate, "train full / no PBL height / no export variants with shared seeds"),
        ("compare", cmd_compare, "train several model kinds with shared seeds"),
    ):
        p = sub.add_parser(name, help=extra)
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--splits", help="splits.json (default: 2:1:1 chronological)")
        p.add_argument("--config", help="key = value config file (default: none)")
        p.add_argument("--jobs", type=int, default=None, help="parallel runs (default: train.jobs)")
        if name == "compare":
            p.add_argument("--models", default="mlp,gru,pm25gnn", help="comma-separated kinds (default: %(default)s)")
        p.add_argument("--per-cell-categorical", dest="eval.per_cell_categorical", action="store_const", const="true",
                       help="average CSI/POD/FAR per (leadtime, city) cell (default: pooled)")
        p.add_argument("--out", required=True, help="run directory")
        _add_schema_flags(p, ("train", "model", "graph", "eval"))
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SplitError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
