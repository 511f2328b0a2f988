"""Experiment configuration, the pipeline commands and evaluation protocols."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .container import atomic_write_text
from .evolve import FitnessCache, evolve
from .fitness import elo_fitness, parity_split, weak_fitness
from .losses import LossWeights, check_layout
from .model import ModelBundle, ModelConfig, TaskKey, build_bundle, load_bundle, save_bundle
from .numerics import ParamSet, Tape
from .synthgen import (
    Dataset,
    DatasetConfig,
    class_histogram,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .training import ProxyConfig, fit_genome, proxy_train

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
DEFAULT_KEYS = ("AD1", "AD2", "AE", "AR", "FD1", "FD2", "FE", "FT",
                "GC", "GD1", "RA", "RB", "RP", "RR", "RS", "RT")
FITNESS_MODES = ("elo", "weak", "both")
PROTOCOLS = ("kmeans", "linear", "finetune")

HISTORY = "history.ndjson"
TIMING = "timing.ndjson"
BEST = "best.weights"
CHECKPOINT = "model.ckpt"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FitnessConfig:
    mode: str = "elo"
    k: int = 8
    s: float = 1.0
    trials: int = 20

    def __post_init__(self):
        if self.mode not in FITNESS_MODES:
            raise ConfigError(f"fitness mode must be one of {FITNESS_MODES}, got {self.mode!r}")
        if self.k < 1 or self.trials < 1 or not self.s > 0:
            raise ConfigError("fitness needs k >= 1, trials >= 1 and s > 0")


@dataclass(frozen=True)
class FinalConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 0.1
    warmup_frac: float = 0.02
    clip_norm: float = 5.0


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 1000
    lr: float = 0.05
    finetune_steps: int = 200
    finetune_lr: float = 0.01
    finetune_batch: int = 128


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    dataset_path: str = "data/synth.bin"
    keys: tuple = DEFAULT_KEYS
    model: ModelConfig = field(default_factory=ModelConfig)
    fitness: FitnessConfig = field(default_factory=FitnessConfig)
    strategy: str = "cmaes"
    budget: int = 60
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    final: FinalConfig = field(default_factory=FinalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        keys = tuple(sorted(self.keys))
        if not keys:
            raise ConfigError("at least one loss key is required")
        if len(set(keys)) != len(keys):
            raise ConfigError("duplicate loss keys")
        for k in keys:
            try:
                TaskKey.parse(k)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        object.__setattr__(self, "keys", keys)
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        from .evolve import STRATEGIES
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")

    @property
    def dim(self) -> int:
        return len(self.keys)

    @property
    def modalities(self) -> list[str]:
        out = {"main"}
        for k in self.keys:
            out |= TaskKey.parse(k).modalities()
        return sorted(out)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def to_dict(self) -> dict:
        return {
            "format_version": CONFIG_VERSION,
            "dataset": self.dataset.to_dict(),
            "dataset_path": self.dataset_path,
            "keys": list(self.keys),
            "model": self.model.to_dict(),
            "fitness": dict(self.fitness.__dict__),
            "strategy": self.strategy,
            "budget": self.budget,
            "proxy": self.proxy.to_dict(),
            "final": dict(self.final.__dict__),
            "probe": dict(self.probe.__dict__),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("format_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        sub = {
            "dataset": DatasetConfig.from_dict,
            "model": ModelConfig.from_dict,
            "fitness": lambda x: FitnessConfig(**x),
            "proxy": lambda x: ProxyConfig(**x),
            "final": lambda x: FinalConfig(**x),
            "probe": lambda x: ProbeConfig(**x),
        }
        try:
            for name, make in sub.items():
                if name in d:
                    d[name] = make(d[name])
            if "keys" in d:
                d["keys"] = tuple(d["keys"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "fitness" in kw and isinstance(kw["fitness"], str):
            kw["fitness"] = replace(self.fitness, mode=kw["fitness"])
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: ExperimentConfig) -> tuple[Path, np.ndarray]:
    ds = generate_dataset(config.dataset)
    path = Path(config.dataset_path)
    write_dataset(path, ds)
    hist = class_histogram(ds.unlock_labels().labels, config.dataset.num_classes)
    return path, hist


def load_dataset(config: ExperimentConfig, with_labels: bool = False) -> Dataset:
    ds = read_dataset(config.dataset_path, with_labels=with_labels)
    if ds.config != config.dataset:
        raise ConfigError("dataset file was generated with a different dataset config")
    return ds


def make_fitness_fn(config: ExperimentConfig, dataset: Dataset):
    """genome -> (fitness, info) through proxy training.

    In ``elo`` mode labels are never touched; the dataset stays locked.
    """
    fc = config.fitness
    eval_ids = dataset.clip_ids[dataset.eval_index]
    if fc.mode == "elo":
        dataset.lock_labels()
    labels = dataset.labels[dataset.eval_index] if fc.mode != "elo" else None

    def fn(genome, seed):
        weights = LossWeights.from_vector(config.keys, genome)
        emb = proxy_train(weights, dataset, config.proxy, seed)
        info = {}
        if fc.mode in ("elo", "both"):
            rep = elo_fitness(emb, fc.k, fc.s, fc.trials, base_seed=seed)
            info.update(elo_fitness=rep.fitness, per_trial_kl=rep.per_trial_kl)
        if fc.mode in ("weak", "both"):
            info["weak_fitness"] = weak_fitness(emb, labels, fc.k, fc.trials,
                                                clip_ids=eval_ids, base_seed=seed)
        value = info["weak_fitness"] if fc.mode == "weak" else info["elo_fitness"]
        return value, info

    return fn


def _json_line(rec: dict) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return repr(v)  # "-inf" / "nan" as strings keep the file strict JSON
        return v
    return json.dumps({k: clean(v) for k, v in rec.items()}, sort_keys=True)


def cmd_evolve(config: ExperimentConfig, cache: FitnessCache | None = None,
               dataset: Dataset | None = None) -> tuple[LossWeights, list[dict]]:
    if dataset is None:
        dataset = load_dataset(config, with_labels=config.fitness.mode != "elo")
    fn = make_fitness_fn(config, dataset)
    timings = []

    def on_record(rec, seconds):
        rec["seed"] = config.seed
        timings.append({"evaluation": len(timings), "wall_time": round(seconds, 6)})
        log.info("eval %d round %d fitness %.6f best %.6f", len(timings) - 1, rec["round"],
                 rec["fitness"], rec["best_so_far"])

    best, state = evolve(config.strategy, config.budget, fn, config.seed, config.dim,
                         cache=cache, on_record=on_record)
    out = config.out
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / HISTORY, "".join(_json_line(r) + "\n" for r in state.history))
    atomic_write_text(out / TIMING, "".join(json.dumps(t) + "\n" for t in timings))
    weights = LossWeights.from_vector(config.keys, best["genome"])
    atomic_write_text(out / BEST, weights.to_text())
    return weights, state.history


def read_weights(path, config: ExperimentConfig) -> LossWeights:
    weights = LossWeights.from_text(Path(path).read_text())
    check_layout(weights, config.keys)
    return weights


def train_final(config: ExperimentConfig, weights: LossWeights, dataset: Dataset,
                seed: int | None = None) -> tuple[ModelBundle, list[float]]:
    check_layout(weights, config.keys)
    f = config.final
    seed = config.seed if seed is None else seed
    return fit_genome(weights, dataset, config.model, f.steps, f.batch_size, seed,
                      lr=f.lr, warmup_frac=f.warmup_frac, clip_norm=f.clip_norm)


def cmd_train_final(config: ExperimentConfig, weights_path=None,
                    dataset: Dataset | None = None) -> Path:
    weights = read_weights(weights_path or config.out / BEST, config)
    dataset = dataset or load_dataset(config)
    bundle, losses = train_final(config, weights, dataset)
    head, tail = losses[:50], losses[-50:]
    meta = {
        "weights": dict(weights.items()),
        "steps": config.final.steps,
        "seed": config.seed,
        "loss_first50": float(np.mean(head)) if head else None,
        "loss_last50": float(np.mean(tail)) if tail else None,
    }
    path = config.out / CHECKPOINT
    path.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(path, bundle, meta)
    return path


# ---------------------------------------------------------------------------
# evaluation protocols


@dataclass
class EvalResult:
    protocol: str
    accuracy: float
    config: dict

    def to_json(self) -> str:
        return json.dumps({"protocol": self.protocol, "accuracy": self.accuracy,
                           "config": self.config}, sort_keys=True, indent=2) + "\n"


def _standardizer(X_fit):
    mu = X_fit.mean(axis=0)
    sd = X_fit.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return mu, sd


def _head_params(dim, classes) -> ParamSet:
    return ParamSet({"probe.W": np.zeros((dim, classes)), "probe.b": np.zeros(classes)})


def _logits(P, X):
    return nx.affine_forward({"W": P["probe.W"], "b": P["probe.b"]}, X)


def linear_probe(X_fit, y_fit, X_eval, y_eval, classes: int, steps: int = 1000,
                 lr: float = 0.05) -> tuple[float, ParamSet, tuple]:
    """Softmax affine classifier on z-scored features, full batch, cosine schedule."""
    mu, sd = _standardizer(X_fit)
    Z = (X_fit - mu) / sd
    P = _head_params(Z.shape[1], classes)
    for step in range(steps):
        v = Tape().watch(P)
        loss = nx.softmax_cross_entropy(_logits(v, Z), y_fit)
        nx.sgd_step(P, nx.backward(loss, P), nx.cosine_warmup_lr(step, 0, steps, lr))
    pred = np.argmax(_logits(P, (X_eval - mu) / sd).value, axis=1)
    return float(np.mean(pred == y_eval)), P, (mu, sd)


def _probe_split(dataset: Dataset):
    ev = dataset.eval_index
    fit, test = parity_split(dataset.clip_ids[ev])
    labels = dataset.labels
    return ev[fit], ev[test], labels


def evaluate(bundle: ModelBundle, dataset: Dataset, protocol: str, probe: ProbeConfig,
             k: int | None = None, seed: int = 0) -> EvalResult:
    """Score frozen (or, for finetune, unfrozen) Main embeddings on the eval split."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}")
    fit_idx, test_idx, labels = _probe_split(dataset)
    C = dataset.config.num_classes
    frames = dataset.arrays["main"]
    snap = {"probe": dict(probe.__dict__), "seed": seed}
    if protocol == "kmeans":
        ev = dataset.eval_index
        emb = bundle.main_embeddings(frames[ev])
        acc = weak_fitness(emb, labels[ev], k or C, trials=20, clip_ids=dataset.clip_ids[ev],
                           base_seed=seed)
        return EvalResult(protocol, acc, snap)
    X_fit = bundle.main_embeddings(frames[fit_idx])
    X_test = bundle.main_embeddings(frames[test_idx])
    acc, head, (mu, sd) = linear_probe(X_fit, labels[fit_idx], X_test, labels[test_idx], C,
                                       probe.steps, probe.lr)
    if protocol == "linear":
        return EvalResult(protocol, acc, snap)
    acc = finetune(bundle, head, mu, sd, frames, labels, fit_idx, test_idx, probe, seed)
    return EvalResult(protocol, acc, snap)


def finetune(bundle: ModelBundle, head: ParamSet, mu, sd, frames, labels, fit_idx, test_idx,
             probe: ProbeConfig, seed: int) -> float:
    """Start from the trained linear head and update it jointly with the Main encoder."""
    enc = bundle.encoders["main"]
    P = ParamSet({k: v.copy() for k, v in bundle.params.items() if k.startswith(enc.prefix)})
    P.update({k: v.copy() for k, v in head.items()})
    rng = np.random.default_rng(seed)
    steps = probe.finetune_steps

    def forward(v, rows):
        emb, _ = enc.forward(v, frames[rows].astype(np.float64))
        return _logits(v, (emb - mu) * (1.0 / sd))

    for step in range(steps):
        rows = np.sort(rng.choice(fit_idx, size=min(probe.finetune_batch, len(fit_idx)),
                                  replace=False))
        v = Tape().watch(P)
        loss = nx.softmax_cross_entropy(forward(v, rows), labels[rows])
        grads = nx.backward(loss, P)
        nx.clip_grad_norm(grads, 5.0)
        nx.sgd_step(P, grads, nx.cosine_warmup_lr(step, 0, steps, probe.finetune_lr))
    correct = 0
    for s in range(0, len(test_idx), 256):
        rows = test_idx[s:s + 256]
        correct += int(np.sum(np.argmax(forward(P, rows).value, axis=1) == labels[rows]))
    return correct / len(test_idx)


def cmd_eval(config: ExperimentConfig, protocol: str, checkpoint=None) -> EvalResult:
    bundle, _ = load_bundle(checkpoint or config.out / CHECKPOINT)
    dataset = load_dataset(config, with_labels=True)
    res = evaluate(bundle, dataset, protocol, config.probe, config.fitness.k, config.seed)
    atomic_write_text(config.out / f"eval_{protocol}.json", res.to_json())
    return res
