"""Sample windows, the RMSprop training loop and repeated-seed experiments."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import Checkpoint, Dataset, SplitSpec, atomic_write, fill_missing, ratio_splits, resolve_splits
from .featurize import Standardizer, build_edge_panel, build_node_panel, fit_standardizer
from .geograph import D_THETA_KM, M_THETA_M, GraphTopology, build_adjacency
from .metrics import POLLUTION_THRESHOLD, MetricsReport, aggregate_report
from .model import ModelSpec, forward, init_params, predict

log = logging.getLogger(__name__)

PRECISIONS = {"float64": np.float64, "float32": np.float32}
METRIC_ROWS = ("Train_Loss", "Validate_Loss", "Test_Loss", "RMSE", "MAE", "CSI", "POD", "FAR")


class TrainingAborted(RuntimeError):
    """Non-finite loss; carries the epoch, batch and sample starts involved."""

    def __init__(self, epoch: int, batch: int, starts):
        self.epoch, self.batch, self.starts = epoch, batch, list(starts)
        super().__init__(f"non-finite training loss at epoch {epoch}, batch {batch} (sample starts {self.starts})")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 8
    horizon_steps: int = 24
    early_stop_patience: int = 5
    seed: int = 0
    precision: str = "float64"
    alpha: float = 0.99
    eps: float = 1e-8
    wind_convention: str = "toward"
    d_theta_km: float = D_THETA_KM
    m_theta_m: float = M_THETA_M
    splits: SplitSpec | None = None

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(PRECISIONS)}")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["splits"] = None if self.splits is None else self.splits.to_json()
        return d


@dataclass(frozen=True)
class Sample:
    start: int
    x0: np.ndarray  # [N] standardized
    P: np.ndarray  # [H, N, p]
    Q: np.ndarray  # [H, M, q]
    truth: np.ndarray  # [H, N] standardized

    @property
    def truth_index(self) -> range:
        return range(self.start + 1, self.start + 1 + self.truth.shape[0])


@dataclass
class PreparedData:
    """Standardized panels plus everything needed to cut sample windows."""

    topology: GraphTopology
    standardizer: Standardizer
    P: np.ndarray  # [T, N, p]
    Q: np.ndarray  # [T, M, q]
    X: np.ndarray  # [T, N] standardized, NaN where missing
    pm25: np.ndarray  # [T, N] physical, gap-filled
    valid: np.ndarray  # [T, N] bool
    ranges: dict[str, list[tuple[int, int]]]

    @property
    def n_nodes(self) -> int:
        return self.P.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.P.shape[1], self.P.shape[2], self.Q.shape[2]


@dataclass
class TrainHistory:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_early: bool = False
    wall_time_s: float = 0.0

    def to_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_loss"] + [f"{e},{tr!r},{va!r}" for e, tr, va in self.rows]
        atomic_write(path, "\n".join(lines) + "\n")

    @property
    def best_train(self) -> float:
        return next(tr for e, tr, _ in self.rows if e == self.best_epoch)


def prepare_data(
    dataset: Dataset,
    config: TrainingConfig,
    topology: GraphTopology | None = None,
    standardizer: Standardizer | None = None,
    need_splits: bool = True,
) -> PreparedData:
    """Build the graph and feature panels, then standardize.

    Without a given ``standardizer`` one is fit on the train range only.
    """
    ranges = {}
    if need_splits or standardizer is None:
        ranges = resolve_splits(dataset.manifest, config.splits or ratio_splits(dataset.manifest))
    if topology is None:
        topology = build_adjacency(dataset.cities, dataset.grid, config.d_theta_km, config.m_theta_m)
    pm25, valid = fill_missing(dataset.pm25)
    nodes = build_node_panel(dataset.meteo, dataset.timestamps)
    edges = build_edge_panel(dataset.meteo, topology, config.wind_convention)
    std = standardizer or fit_standardizer(nodes, edges, pm25, ranges["train"])
    dt = PRECISIONS[config.precision]
    return PreparedData(
        topology,
        std,
        std.apply_nodes(nodes.values).astype(dt),
        std.apply_edges(edges.values).astype(dt),
        std.apply_pm25(pm25).astype(dt),
        pm25,
        valid,
        ranges,
    )


def sample_starts(ranges, horizon: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Start indices ``t`` whose window ``t .. t+horizon`` lies inside one interval."""
    starts = []
    for a, b in ranges:
        if b - a < horizon + 1:
            raise ValueError(f"range [{a}, {b}) holds {b - a} steps; need at least horizon+1 = {horizon + 1}")
        for t in range(a, b - horizon):
            if valid is None or valid[t : t + horizon + 1].all():
                starts.append(t)
    return np.asarray(starts, dtype=np.int64)


def make_samples(data: PreparedData, split_range, horizon: int) -> list[Sample]:
    """One sample per admissible start (stride 1); windows never leave their interval."""
    if isinstance(split_range, str):
        split_range = data.ranges[split_range]
    out = []
    for t in sample_starts(split_range, horizon, data.valid):
        out.append(Sample(int(t), data.X[t], data.P[t + 1 : t + 1 + horizon], data.Q[t + 1 : t + 1 + horizon], data.X[t + 1 : t + 1 + horizon]))
    return out


def _batch(data: PreparedData, starts, horizon: int):
    idx = np.asarray(starts)[:, None] + np.arange(1, horizon + 1)
    return data.X[starts], data.P[idx], data.Q[idx], data.X[idx]  # x0 [B,N], P [B,H,N,p], Q, truth [B,H,N]


def _targets(truth: np.ndarray) -> np.ndarray:
    """[B, H, N] -> [B*N, H] to line up with forward's row order."""
    b, h, n = truth.shape
    return truth.transpose(0, 2, 1).reshape(b * n, h)


def batch_loss(spec: ModelSpec, params, data: PreparedData, starts, horizon: int) -> nx.Tensor:
    x0, P, Q, truth = _batch(data, starts, horizon)
    out = forward(spec, params, x0, P, Q if spec.kind == "pm25gnn" else None, data.topology)
    return nx.mse_loss(out, _targets(truth))


def split_loss(spec: ModelSpec, params: dict[str, np.ndarray], data: PreparedData, starts, horizon: int, batch_size: int = 64) -> float:
    """Mean squared error in standardized space over all windows of a split."""
    if len(starts) == 0:
        return math.nan
    x0, P, Q, truth = _batch(data, starts, horizon)
    pred = predict(spec, params, x0, P, Q if spec.kind == "pm25gnn" else None, data.topology, batch_size)
    r = pred.astype(np.float64) - truth
    return float(np.mean(r * r))


def train_model(spec: ModelSpec, data: PreparedData, config: TrainingConfig) -> tuple[Checkpoint, TrainHistory]:
    """Fit ``spec`` on the train windows; keep the parameters of the best validation epoch."""
    t_start = time.perf_counter()
    h = config.horizon_steps
    n, p, q = data.dims
    dt = PRECISIONS[config.precision]
    train_starts = sample_starts(data.ranges["train"], h, data.valid)
    val_starts = sample_starts(data.ranges["validate"], h, data.valid)
    if len(train_starts) == 0:
        raise ValueError("no complete training windows")
    params = init_params(spec, n, p, q, dtype=dt)
    state = nx.RmspropState()
    rng = np.random.default_rng([spec.seed, 7])
    hist = TrainHistory()

    tr0 = split_loss(spec, params, data, train_starts, h)
    va0 = split_loss(spec, params, data, val_starts, h)
    hist.rows.append((0, tr0, va0))
    hist.best_val, hist.best_epoch = va0, 0
    best = params
    wait = 0
    for epoch in range(1, config.epochs + 1):
        order = train_starts[rng.permutation(len(train_starts))]
        losses = []
        for bi, s in enumerate(range(0, len(order), config.batch_size)):
            starts = order[s : s + config.batch_size]
            tape = nx.GradTape()
            watched = {k: tape.watch(v, k) for k, v in params.items()}
            loss = batch_loss(spec, watched, data, starts, h)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingAborted(epoch, bi, starts)
            grads = nx.backward(loss)
            params, state = nx.rmsprop_step(params, grads, state, config.lr, config.alpha, config.eps)
            losses.append(value * len(starts))
        train_loss = float(sum(losses) / len(order))
        val_loss = split_loss(spec, params, data, val_starts, h)
        hist.rows.append((epoch, train_loss, val_loss))
        log.info("%s seed %d epoch %d train %.5f val %.5f", spec.label, spec.seed, epoch, train_loss, val_loss)
        if not math.isfinite(val_loss):
            raise TrainingAborted(epoch, -1, [])
        if val_loss < hist.best_val:
            hist.best_val, hist.best_epoch, best, wait = val_loss, epoch, params, 0
        else:
            wait += 1
            if wait >= config.early_stop_patience:
                hist.stopped_early = True
                break
    hist.wall_time_s = time.perf_counter() - t_start
    ckpt = Checkpoint(
        spec=spec,
        params={k: np.array(v) for k, v in best.items()},
        standardizer=data.standardizer,
        n_nodes=n,
        n_node_features=p,
        n_edge_features=q,
        config=config.snapshot(),
        val_loss=hist.best_val,
        graph=data.topology.to_json(),
    )
    return ckpt, hist


@dataclass
class Evaluation:
    loss: float  # standardized MSE
    pred: np.ndarray  # [S, H, N] physical units
    truth: np.ndarray
    starts: np.ndarray
    report: MetricsReport


def evaluate(
    ckpt: Checkpoint,
    data: PreparedData,
    split: str = "test",
    horizon: int = 24,
    threshold: float = POLLUTION_THRESHOLD,
    per_cell_categorical: bool = False,
) -> Evaluation:
    starts = sample_starts(data.ranges[split], horizon, data.valid)
    x0, P, Q, truth_std = _batch(data, starts, horizon)
    pred_std = predict(ckpt.spec, ckpt.params, x0, P, Q if ckpt.spec.kind == "pm25gnn" else None, data.topology)
    r = pred_std.astype(np.float64) - truth_std
    idx = starts[:, None] + np.arange(1, horizon + 1)
    pred = ckpt.standardizer.invert_prediction(pred_std.astype(np.float64))
    truth = data.pm25[idx]
    report = aggregate_report(pred, truth, threshold, per_cell_categorical)
    return Evaluation(float(np.mean(r * r)), pred, truth, starts, report)


# -- experiments ---------------------------------------------------------------------


@dataclass
class RunResult:
    label: str
    seed: int
    values: dict[str, float]
    history: TrainHistory
    checkpoint: Checkpoint


@dataclass
class ExperimentResult:
    runs: list[RunResult]

    def labels(self) -> list[str]:
        seen = []
        for r in self.runs:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        """label -> metric -> (mean, population std)."""
        out = {}
        for label in self.labels():
            vals = [r.values for r in self.runs if r.label == label]
            out[label] = {m: (float(np.mean([v[m] for v in vals])), float(np.std([v[m] for v in vals]))) for m in METRIC_ROWS}
        return out

    def table(self, digits: int = 4) -> list[list[str]]:
        """Rows of [metric, "mean ± std" per model]; first row is the header."""
        summ = self.summary()
        labels = self.labels()
        rows = [["metric"] + labels]
        for m in METRIC_ROWS:
            rows.append([m] + [f"{summ[lb][m][0]:.{digits}f} ± {summ[lb][m][1]:.{digits}f}" for lb in labels])
        return rows

    def write_csv(self, path) -> None:
        from io import StringIO

        buf = StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table())
        atomic_write(path, buf.getvalue())


def run_once(spec: ModelSpec, data: PreparedData, config: TrainingConfig, per_cell_categorical: bool = False) -> RunResult:
    ckpt, hist = train_model(spec, data, config)
    ev = evaluate(ckpt, data, "test", config.horizon_steps, per_cell_categorical=per_cell_categorical)
    rep = ev.report
    values = {
        "Train_Loss": hist.best_train,
        "Validate_Loss": hist.best_val,
        "Test_Loss": ev.loss,
        "RMSE": rep.rmse,
        "MAE": rep.mae,
        "CSI": rep.csi,
        "POD": rep.pod,
        "FAR": rep.far,
    }
    return RunResult(spec.label, spec.seed, values, hist, ckpt)


def run_experiment(
    specs: list[ModelSpec],
    data: PreparedData,
    config: TrainingConfig,
    n_repeats: int = 1,
    jobs: int = 1,
    out_dir=None,
    per_cell_categorical: bool = False,
) -> ExperimentResult:
    """Train every spec with seeds ``config.seed .. config.seed + n_repeats - 1`` and score the test split."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    tasks = [spec.with_seed(config.seed + k) for spec in specs for k in range(n_repeats)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(lambda s: run_once(s, data, config, per_cell_categorical), tasks))
    else:
        runs = [run_once(s, data, config, per_cell_categorical) for s in tasks]
    if out_dir is not None:
        for r in runs:
            d = Path(out_dir) / f"{r.label}_seed{r.seed}"
            d.mkdir(parents=True, exist_ok=True)
            r.history.to_csv(d / "history.csv")
            atomic_write(d / "metrics.json", json.dumps(r.values, indent=1))
    return ExperimentResult(runs)


def with_precision(config: TrainingConfig, precision: str) -> TrainingConfig:
    return replace(config, precision=precision)
