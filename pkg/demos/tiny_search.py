"""A complete search on a toy-sized problem, through the same commands the CLI runs.

1. generate a small synthetic dataset (labels go to a sidecar file),
2. search loss weights with CMA-ES under the unsupervised fitness,
3. train a model with the best weights,
4. score it with a linear probe and write the report tables.

Takes well under a minute.  Output lands in ./runs/tiny.

    python3 demos/tiny_search.py
"""
from pathlib import Path

from evoloss import harness
from evoloss.model import ModelConfig
from evoloss.synthgen import DatasetConfig
from evoloss.training import ProxyConfig
from evoloss.report import read_history, write_report

out = Path("runs/tiny")
cfg = harness.ExperimentConfig(
    dataset=DatasetConfig(num_clips=256, num_classes=4, frames=8, height=6, width=6, audio_rate=8),
    dataset_path=str(out / "data.bin"),
    keys=("AE", "FD1", "GC", "RR", "RS", "RA"),
    model=ModelConfig(hidden=(24, 16), embed_dim=8, decoder_hidden=16),
    proxy=ProxyConfig(train_steps=30),
    final=harness.FinalConfig(steps=150),
    fitness=harness.FitnessConfig(k=4, trials=5),
    strategy="cmaes", budget=16, out_dir=str(out),
)

path, hist = harness.cmd_gen_data(cfg)
print(f"dataset at {path}; clips per class {hist.tolist()}")

# No labels are loaded here: the fitness only looks at cluster structure.
weights, history = harness.cmd_evolve(cfg)
fits = [r["fitness"] for r in history]
print(f"{len(history)} evaluations; first {fits[0]:+.4f}, best {max(fits):+.4f}")
print("best weights:", {k: round(v, 2) for k, v in weights.items()})

ckpt = harness.cmd_train_final(cfg)
for protocol in ("kmeans", "linear"):
    res = harness.cmd_eval(cfg, protocol, ckpt)
    print(f"{protocol:7s} accuracy {res.accuracy:.3f}")

write_report(out, read_history(out / harness.HISTORY), cfg.keys)
print("report tables:", sorted(p.name for p in (out / "report").iterdir()))
