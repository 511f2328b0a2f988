"""Self-supervised task losses, distillation, and the weighted combination.

Loss functions accept arrays or recorded :class:`~evoloss.numerics.Var`
values.  With plain arrays they return a Python float; with Vars they return
a scalar Var that can be differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .model import ModelBundle, TaskKey
from .numerics import ShapeError, Tape, Var
from .synthgen import Dataset, draw_alignment, draw_reverse, draw_shuffle

PROB_EPS = 1e-12


class MissingModalityError(KeyError):
    pass


def _result(v: Var, inputs) -> Var | float:
    if any(isinstance(x, Var) for x in inputs):
        return v
    return float(v.value)


def _on_one_tape(P):
    """Parameters as Vars on a single tape (constants when none are watched)."""
    if any(isinstance(v, Var) for v in P.values()):
        return P
    tape = Tape()
    return {k: tape.constant(v) for k, v in P.items()}


def _lift_all(*xs):
    tape = next((x.tape for x in xs if isinstance(x, Var)), None) or Tape()
    return [nx.lift(x, tape) for x in xs]


# ---------------------------------------------------------------------------
# elementary losses


def recon_loss(predicted, target):
    """Mean squared error."""
    p, t = _lift_all(predicted, target)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match target {t.shape}")
    return _result(nx.square(p - t).mean(), (predicted, target))


def bce_loss(p, y):
    """Binary cross-entropy, averaged when ``p`` is a batch."""
    pv, yv = _lift_all(p, np.asarray(y, dtype=np.float64))
    pv = nx.clip(pv, PROB_EPS, 1.0 - PROB_EPS)
    if pv.shape != yv.shape:
        raise ShapeError(f"probabilities {pv.shape} vs labels {yv.shape}")
    ll = yv * nx.log(pv) + (1.0 - yv) * nx.log(1.0 - pv)
    return _result(-(ll.mean()), (p,))


def contrastive_loss(x1, x2, xn, alpha: float = 1.0):
    """``||x1 - x2|| + max(0, alpha - ||x1 - xn||)`` with unsquared norms.

    Row-wise for 2-D inputs, then averaged over rows.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a, b, n = _lift_all(x1, x2, xn)
    if not (a.shape == b.shape == n.shape):
        raise ShapeError(f"contrastive inputs differ in shape: {a.shape}, {b.shape}, {n.shape}")
    pos = nx.norm(a - b, axis=-1)
    neg = nx.relu(alpha - nx.norm(a - n, axis=-1))
    return _result((pos + neg).mean(), (x1, x2, xn))


def distill_loss(aux_tap, main_tap):
    """MSE pulling ``main_tap`` toward a frozen copy of ``aux_tap``."""
    aux, main = _lift_all(aux_tap, main_tap)
    if aux.shape != main.shape:
        raise ShapeError(f"tap shapes differ: auxiliary {aux.shape}, main {main.shape}")
    return _result(nx.square(main - nx.stop_gradient(aux)).mean(), (aux_tap, main_tap))


# ---------------------------------------------------------------------------
# loss weights


class LossWeights:
    """Genome: one weight in [0, 1] per loss key, in canonical (sorted) order.

    Serialised as ``KEY = value`` lines; values use ``repr`` so the text
    round-trips bit-exactly.
    """

    def __init__(self, weights: Mapping[str, float]):
        for k in weights:
            TaskKey.parse(k)
        self._w = {k: float(weights[k]) for k in sorted(weights)}
        bad = {k: v for k, v in self._w.items() if not (0.0 <= v <= 1.0)}
        if bad:
            raise ValueError(f"weights outside [0, 1]: {bad}")

    @property
    def keys(self) -> list[str]:
        return list(self._w)

    @property
    def dim(self) -> int:
        return len(self._w)

    def __getitem__(self, k):
        return self._w[k]

    def __iter__(self):
        return iter(self._w)

    def __len__(self):
        return len(self._w)

    def items(self):
        return self._w.items()

    def __eq__(self, other):
        return isinstance(other, LossWeights) and self._w == other._w

    def __repr__(self):
        return f"LossWeights({self._w})"

    @property
    def task_weights(self) -> dict:
        return {k: v for k, v in self._w.items() if TaskKey.parse(k).task != "distill"}

    @property
    def distill_weights(self) -> dict:
        return {k: v for k, v in self._w.items() if TaskKey.parse(k).task == "distill"}

    def to_vector(self) -> np.ndarray:
        return np.array(list(self._w.values()), dtype=np.float64)

    @classmethod
    def from_vector(cls, keys, vector) -> "LossWeights":
        keys = sorted(keys)
        vector = np.asarray(vector, dtype=np.float64)
        if len(keys) != len(vector):
            raise ValueError(f"{len(keys)} keys but a vector of length {len(vector)}")
        return cls(dict(zip(keys, vector.tolist())))

    @classmethod
    def uniform(cls, keys, value: float = 1.0) -> "LossWeights":
        return cls({k: value for k in keys})

    def replace(self, **updates) -> "LossWeights":
        return LossWeights({**self._w, **updates})

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self._w.items())

    @classmethod
    def from_text(cls, text: str) -> "LossWeights":
        out = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'KEY = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k in out:
                raise ValueError(f"line {n}: duplicate key {k}")
            out[k] = float(v)
        return cls(out)


def check_layout(weights: LossWeights, keys) -> None:
    """Raise if ``weights`` does not carry exactly ``keys``."""
    have, want = set(weights.keys), set(keys)
    if have != want:
        raise KeyError(f"genome layout mismatch: unknown keys {sorted(have - want)}, "
                       f"missing keys {sorted(want - have)}")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Everything one training step needs, drawn up front from an rng."""
    frames: dict                       # modality -> (B, F, d)
    negatives: np.ndarray              # row i's negative partner, never i
    shuffle: dict = field(default_factory=dict)   # key -> (x, labels)
    reverse: dict = field(default_factory=dict)
    align: dict = field(default_factory=dict)     # key -> (xa, xb, labels)

    @property
    def size(self) -> int:
        return len(self.negatives)


def batch_modalities(keys) -> set[str]:
    out = {"main"}
    for k in keys:
        out |= TaskKey.parse(k).modalities()
    return out


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least two clips to pick in-batch negatives")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_batch(frames: Mapping[str, np.ndarray], keys, bundle_config,
               rng: np.random.Generator) -> Batch:
    """Draw shuffled / reversed / alignment variants for ``keys``.

    ``frames`` maps modality to (B, F, d) float64 arrays.  Negatives for the
    contrastive and alignment tasks are other clips of the same batch.
    """
    parsed = [TaskKey.parse(k) for k in sorted(keys)]
    B, F = next(iter(frames.values())).shape[:2]
    batch = Batch(dict(frames), derangement(B, rng))
    for k in parsed:
        if k.task in ("shuffle", "reverse"):
            x = frames[k.modality]
            draw = draw_shuffle if k.task == "shuffle" else draw_reverse
            orders, labels = zip(*(draw(F, rng) for _ in range(B)))
            xs = np.stack([x[i, o] for i, o in enumerate(orders)])
            target = batch.shuffle if k.task == "shuffle" else batch.reverse
            target[k.name] = (xs, np.array(labels, dtype=np.float64))
        elif k.task == "align":
            w, off = bundle_config.align_window, bundle_config.align_offset
            xa_full, xb_full = frames[k.modality], frames["audio"]
            xa, xb, labels = [], [], []
            for i in range(B):
                s1, s2, label, neg = draw_alignment(F, w, off, rng)
                src = batch.negatives[i] if neg == "other" else i
                xa.append(xa_full[i, s1:s1 + w])
                xb.append(xb_full[src, s2:s2 + w])
                labels.append(label)
            batch.align[k.name] = (np.stack(xa), np.stack(xb), np.array(labels, dtype=np.float64))
    return batch


def sample_batch(dataset: Dataset, index, keys, bundle_config, rng) -> Batch:
    return make_batch(dataset.batch(index, sorted(batch_modalities(keys))), keys, bundle_config, rng)


# ---------------------------------------------------------------------------
# task losses on a bundle


def alignment_loss(bundle: ModelBundle, sample, key: str | None = None, P=None):
    """BCE of the alignment head on one TaskSample (or a batch of windows)."""
    if key is None:
        key = next((k for k in bundle.heads if TaskKey.parse(k).task == "align"), None)
        if key is None:
            raise KeyError("bundle has no alignment head")
    tk = TaskKey.parse(key)
    P = bundle.params if P is None else P
    watched = any(isinstance(v, Var) for v in P.values())
    P = _on_one_tape(P)
    if hasattr(sample, "task_kind"):
        if sample.task_kind != "align" or len(sample.inputs) != 2:
            raise ValueError("alignment_loss needs an 'align' TaskSample with two windows")
        xa, xb = sample.inputs
        labels = np.asarray(sample.label, dtype=np.float64)
    else:
        xa, xb, labels = sample
    ea, _ = bundle.encoders[tk.modality].forward(P, xa)
    eb, _ = bundle.encoders["audio"].forward(P, xb)
    p = bundle.heads[key].forward(P, nx.concat([ea, eb], axis=-1))
    loss = bce_loss(p, labels)
    return loss if watched else float(loss.value)


@dataclass
class LossBreakdown:
    parts: dict        # key -> unweighted loss (float), None when skipped
    weights: dict      # key -> weight
    total: float
    total_var: Var | None = None

    def recompute_total(self) -> float:
        return math.fsum(self.weights[k] * v for k, v in self.parts.items() if v is not None)


def total_loss(weights: LossWeights, bundle: ModelBundle, batch: Batch, P=None,
               compute_all: bool = True) -> LossBreakdown:
    """Weighted sum of every configured task and distillation loss.

    ``P`` is the parameter mapping to use; pass watched Vars to train.  With
    ``compute_all=False`` zero-weight keys are not evaluated at all and are
    reported as ``None`` (the training path); otherwise every part is
    computed so the breakdown is complete.
    """
    check_layout(weights, bundle.keys)
    P = _on_one_tape(bundle.params if P is None else P)
    tape = next(v.tape for v in P.values())
    cfg = bundle.config
    T, N = cfg.future_context, cfg.future_horizon
    cache = {}

    def full(m):
        if ("full", m) not in cache:
            if m not in batch.frames:
                raise MissingModalityError(f"batch lacks {m} frames")
            cache[("full", m)] = bundle.encoders[m].forward(P, batch.frames[m])
        return cache[("full", m)]

    parts, wts, terms = {}, {}, []
    for key in weights.keys:
        w = weights[key]
        wts[key] = w
        if w == 0.0 and not compute_all:
            parts[key] = None
            continue
        k = TaskKey.parse(key)
        try:
            if k.task == "reconstruct":
                emb, _ = full(k.modality)
                loss = recon_loss(bundle.decoders[key].forward(P, emb), batch.frames[k.modality])
            elif k.task == "future":
                x = batch.frames[k.modality]
                emb, _ = bundle.encoders[k.modality].forward(P, x[:, :T])
                loss = recon_loss(bundle.decoders[key].forward(P, emb), x[:, T:T + N])
            elif k.task in ("transfer", "colorize"):
                emb, _ = full(k.modality)
                loss = recon_loss(bundle.decoders[key].forward(P, emb), batch.frames[k.partner])
            elif k.task in ("shuffle", "reverse"):
                x, labels = (batch.shuffle if k.task == "shuffle" else batch.reverse)[key]
                emb, _ = bundle.encoders[k.modality].forward(P, x)
                loss = bce_loss(bundle.heads[key].forward(P, emb), labels)
            elif k.task == "align":
                loss = alignment_loss(bundle, batch.align[key], key, P)
            elif k.task == "embed":
                xm, _ = full("main")
                xo, _ = full(k.modality)
                loss = contrastive_loss(xm, xo, nx.take(xo, batch.negatives, axis=0),
                                        cfg.contrastive_margin)
            elif k.task == "distill":
                _, aux_taps = full(k.modality)
                _, main_taps = full("main")
                loss = distill_loss(dict(aux_taps)[k.layer], dict(main_taps)[k.layer])
            else:  # pragma: no cover - TaskKey.parse guards this
                raise ValueError(key)
        except KeyError as exc:
            if w > 0:
                raise MissingModalityError(f"cannot compute active loss {key}: {exc}") from exc
            parts[key] = None
            continue
        parts[key] = float(loss.value)
        if w > 0:
            terms.append(loss * w)

    if terms:
        total_var = terms[0]
        for t in terms[1:]:
            total_var = total_var + t
    else:
        total_var = tape.constant(0.0)
    return LossBreakdown(parts, wts, float(total_var.value), total_var)
