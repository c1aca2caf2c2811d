"""Train the graph model on a small synthetic world and forecast 72 hours ahead.

Run: python demos/train_and_forecast.py [--epochs N]
A few epochs take seconds; the library defaults in the library use 50.
"""

import argparse

import numpy as np

from pm25gnn.model import ModelSpec, predict
from pm25gnn.synth import SynthConfig, generate_world
from pm25gnn.train import TrainingConfig, evaluate, prepare_data, train_model

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=4)
args = ap.parse_args()

world = generate_world(SynthConfig(n_cities=8, n_timesteps=480, seed=1))
config = TrainingConfig(epochs=args.epochs, precision="float32")
data = prepare_data(world.to_dataset(), config)
print("index ranges per split:", data.ranges)

spec = ModelSpec("pm25gnn", h_dim=32, seed=0)
ckpt, hist = train_model(spec, data, config)
for epoch, tr, va in hist.rows:
    print(f"epoch {epoch:2d}  train {tr:.4f}  validate {va:.4f}")
print(f"kept epoch {hist.best_epoch}")

ev = evaluate(ckpt, data, "test")
rep = ev.report
print(f"\ntest RMSE {rep.rmse:.2f}  MAE {rep.mae:.2f}  CSI {rep.csi:.3f}  POD {rep.pod:.3f}  FAR {rep.far:.3f}")
print("RMSE by lead time:", {k: round(v["rmse"], 2) for k, v in rep.per_leadtime.items()})

start = data.ranges["test"][0][0] + 10
idx = np.arange(start + 1, start + 25)
pred = predict(spec, ckpt.params, data.X[start][None], data.P[idx][None], data.Q[idx][None], data.topology)[0]
pred = ckpt.standardizer.invert_prediction(pred.astype(float))
print(f"\ncity 0 from step {start}:  lead(h)  forecast  observed")
for k in range(0, 24, 3):
    print(f"                      {3 * (k + 1):4d}  {pred[k, 0]:8.1f}  {world.pm25[idx[k], 0]:8.1f}")
