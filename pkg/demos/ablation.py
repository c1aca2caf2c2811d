"""Compare the full graph model with its two ablations and a node-only GRU.

Run: python demos/ablation.py [--epochs N] [--seeds K]
Few-epoch runs separate the graph models from the GRU but are too noisy to
rank the ablations; that comparison needs the full 50 epochs and several
seeds on the default world, as in the acceptance suite.
"""

import argparse

from pm25gnn.model import ModelSpec
from pm25gnn.synth import SynthConfig, generate_world
from pm25gnn.train import TrainingConfig, prepare_data, run_experiment

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=5)
ap.add_argument("--seeds", type=int, default=1)
args = ap.parse_args()

world = generate_world(SynthConfig(n_cities=8, n_timesteps=480, seed=2))
config = TrainingConfig(epochs=args.epochs, precision="float32")
data = prepare_data(world.to_dataset(), config)
specs = [
    ModelSpec("pm25gnn", h_dim=32),
    ModelSpec("pm25gnn", h_dim=32, drop_pbl=True),
    ModelSpec("pm25gnn", h_dim=32, no_export=True),
    ModelSpec("gru", h_dim=32),
]
result = run_experiment(specs, data, config, n_repeats=args.seeds)
table = result.table()
widths = [max(len(r[c]) for r in table) for c in range(len(table[0]))]
for row in table:
    print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
