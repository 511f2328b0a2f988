"""Mini-batch SGD on the weighted multi-task loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .losses import LossWeights, sample_batch, total_loss
from .model import ModelBundle, ModelConfig, build_bundle
from .numerics import NumericsError, Tape
from .synthgen import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProxyConfig:
    """How one genome is scored during search."""
    train_steps: int = 100
    batch_size: int = 16
    dataset_fraction: float = 1.0
    encoder_scale: str = "small"
    lr: float = 0.1
    warmup_frac: float = 0.02
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.train_steps < 0:
            raise ValueError("train_steps must be >= 0")
        if not 0 < self.dataset_fraction <= 1:
            raise ValueError("dataset_fraction must be in (0, 1]")
        if self.encoder_scale not in ("small", "full"):
            raise ValueError("encoder_scale is 'small' or 'full'")

    def model_config(self) -> ModelConfig:
        return SMALL_MODEL if self.encoder_scale == "small" else ModelConfig()

    def to_dict(self) -> dict:
        return dict(self.__dict__)


SMALL_MODEL = ModelConfig(hidden=(64, 32), embed_dim=16, decoder_hidden=32)


def warmup_steps(total: int, frac: float) -> int:
    return min(total, max(1, round(frac * total))) if total else 0


def train(bundle: ModelBundle, weights: LossWeights, dataset: Dataset, steps: int,
          batch_size: int, seed: int, lr: float = 0.1, warmup_frac: float = 0.02,
          clip_norm: float | None = 5.0, index=None, on_step=None) -> list[float]:
    """Train ``bundle`` in place; returns the weighted total loss per step.

    Zero-weight parts are never computed.  An all-zero genome leaves the
    parameters untouched.
    """
    index = dataset.train_index if index is None else np.asarray(index)
    if len(index) < 2:
        raise ValueError("training needs at least two clips")
    rng = np.random.default_rng(seed)
    warm = warmup_steps(steps, warmup_frac)
    active = [k for k, w in weights.items() if w > 0]
    totals = []
    for step in range(steps):
        rows = np.sort(rng.choice(index, size=min(batch_size, len(index)), replace=False))
        batch = sample_batch(dataset, rows, bundle.keys, bundle.config, rng)
        if not active:
            totals.append(0.0)
            continue
        P = Tape().watch(bundle.params)
        out = total_loss(weights, bundle, batch, P=P, compute_all=False)
        if not np.isfinite(out.total):
            raise NumericsError(f"non-finite loss at step {step}")
        grads = nx.backward(out.total_var, bundle.params)
        if clip_norm:
            nx.clip_grad_norm(grads, clip_norm)
        nx.sgd_step(bundle.params, grads, nx.cosine_warmup_lr(step + 1, warm, steps, lr))
        totals.append(out.total)
        if on_step is not None:
            on_step(step, out)
    return totals


def fit_genome(weights: LossWeights, dataset: Dataset, model_config: ModelConfig, steps: int,
               batch_size: int, seed: int, **kw) -> tuple[ModelBundle, list[float]]:
    bundle = build_bundle(weights.keys, dataset.config, model_config, seed=seed)
    losses = train(bundle, weights, dataset, steps, batch_size, seed, **kw)
    return bundle, losses


def proxy_train(weights: LossWeights, dataset: Dataset, proxy: ProxyConfig, seed: int) -> np.ndarray:
    """Short training run, then frozen Main embeddings of every eval clip."""
    train_idx = dataset.train_index
    if proxy.dataset_fraction < 1:
        n = max(2, int(round(proxy.dataset_fraction * len(train_idx))))
        train_idx = train_idx[:n]
    bundle, _ = fit_genome(weights, dataset, proxy.model_config(), proxy.train_steps,
                           proxy.batch_size, seed, lr=proxy.lr, warmup_frac=proxy.warmup_frac,
                           clip_norm=proxy.clip_norm, index=train_idx)
    return bundle.main_embeddings(dataset.arrays["main"][dataset.eval_index])
