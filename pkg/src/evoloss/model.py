"""Per-modality encoders, decoders and binary heads.

All networks are small affine stacks over per-frame flattened inputs.  An
encoder maps ``(B, F, in_dim)`` to a ``(B, D)`` embedding by

    affine(h1) -> relu -> [window of consecutive frames] -> affine(h2) -> relu
    -> affine(D) -> mean over time

The window step concatenates ``temporal_window`` consecutive frame
activations, so the embedding depends on frame order.  Every hidden layer's
post-rectifier activation is exposed as a tap for distillation.

Forward functions take a parameter mapping ``P`` whose values are either raw
arrays or :class:`~evoloss.numerics.Var` leaves watched on a tape; that is how
the same code serves inference and training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import ParamSet, ShapeError, Tape, Var, glorot_uniform
from .synthgen import LETTER, MODALITY_OF, DatasetConfig

PROB_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (128, 64)
    embed_dim: int = 32
    temporal_window: int = 2
    decoder_hidden: int = 64
    future_context: int = 6   # T frames seen
    future_horizon: int = 2   # N frames predicted
    align_window: int = 4
    align_offset: int = 2
    contrastive_margin: float = 1.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


# ---------------------------------------------------------------------------
# components


@dataclass
class ModalityEncoder:
    modality: str
    in_dim: int
    hidden: tuple
    embed_dim: int
    temporal_window: int = 2

    @property
    def prefix(self) -> str:
        return f"enc.{LETTER[self.modality]}."

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.embed_dim]

    @property
    def temporal_layer(self) -> int:
        # the window is applied to the input of this affine layer
        return min(1, len(self.hidden))

    def min_frames(self) -> int:
        return self.temporal_window

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        p = ParamSet()
        sizes = self.sizes
        for i in range(len(sizes) - 1):
            fan_in = sizes[i] * (self.temporal_window if i == self.temporal_layer else 1)
            p[f"{self.prefix}l{i}.W"] = glorot_uniform(rng, fan_in, sizes[i + 1])
            p[f"{self.prefix}l{i}.b"] = np.zeros(sizes[i + 1])
        return p

    def forward(self, P: Mapping, x):
        """Return ``(embedding, taps)`` for ``x`` of shape (B, F, in) or (F, in)."""
        tape = _tape_for(P)
        x = nx.lift(x, tape)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.modality} encoder expects (B, F, {self.in_dim}), got {x.shape}")
        if x.shape[1] < self.temporal_window:
            raise ShapeError(f"{self.modality} encoder needs >= {self.temporal_window} frames, "
                             f"got {x.shape[1]}")
        h = x
        taps = []
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            if i == self.temporal_layer and self.temporal_window > 1:
                h = temporal_stack(h, self.temporal_window)
            h = nx.affine_forward({"W": P[f"{self.prefix}l{i}.W"], "b": P[f"{self.prefix}l{i}.b"]}, h)
            if i < n_layers - 1:
                h = nx.relu(h)
                taps.append((i + 1, h[0] if squeeze else h))
        emb = h.mean(axis=1)
        return (emb[0] if squeeze else emb), taps


def temporal_stack(h: Var, window: int) -> Var:
    """(B, T, C) -> (B, T - window + 1, window * C), consecutive frames side by side."""
    T = h.shape[1]
    n = T - window + 1
    return nx.concat([h[:, j:j + n] for j in range(window)], axis=-1)


@dataclass
class DecoderHead:
    key: str
    kind: str                # "reconstruct" | "future" | "cross"
    target: str              # target modality
    out_frames: int
    frame_dim: int
    embed_dim: int
    hidden: int = 64

    @property
    def prefix(self) -> str:
        return f"dec.{self.key}."

    @property
    def out_shape(self) -> tuple:
        return (self.out_frames, self.frame_dim)

    def init_params(self, rng) -> ParamSet:
        p = ParamSet()
        p[self.prefix + "l0.W"] = glorot_uniform(rng, self.embed_dim, self.hidden)
        p[self.prefix + "l0.b"] = np.zeros(self.hidden)
        p[self.prefix + "l1.W"] = glorot_uniform(rng, self.hidden, self.out_frames * self.frame_dim)
        p[self.prefix + "l1.b"] = np.zeros(self.out_frames * self.frame_dim)
        return p

    def forward(self, P: Mapping, emb):
        tape = _tape_for(P)
        emb = nx.lift(emb, tape)
        squeeze = emb.ndim == 1
        if squeeze:
            emb = emb.reshape((1, emb.shape[0]))
        if emb.shape[-1] != self.embed_dim:
            raise ShapeError(f"decoder {self.key} expects embeddings of length {self.embed_dim}, "
                             f"got {emb.shape}")
        h = nx.relu(nx.affine_forward({"W": P[self.prefix + "l0.W"], "b": P[self.prefix + "l0.b"]}, emb))
        out = nx.affine_forward({"W": P[self.prefix + "l1.W"], "b": P[self.prefix + "l1.b"]}, h)
        out = out.reshape((out.shape[0],) + self.out_shape)
        return out[0] if squeeze else out


@dataclass
class BinaryHead:
    key: str
    in_dim: int

    @property
    def prefix(self) -> str:
        return f"head.{self.key}."

    def init_params(self, rng) -> ParamSet:
        a = np.sqrt(6.0 / (self.in_dim + 1))
        return ParamSet({self.prefix + "W": rng.uniform(-a, a, self.in_dim),
                         self.prefix + "b": np.zeros(1)})

    def forward(self, P: Mapping, x):
        """Probability of the positive class, clamped to [1e-12, 1 - 1e-12]."""
        tape = _tape_for(P)
        x = nx.lift(x, tape)
        W = nx.lift(P[self.prefix + "W"], tape)
        b = nx.lift(P[self.prefix + "b"], tape)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"head {self.key} expects inputs of length {self.in_dim}, got {x.shape}")
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape((1, self.in_dim))
        z = nx.affine_forward({"W": W.reshape((self.in_dim, 1)), "b": b}, x)
        p = nx.clip(nx.sigmoid(z), PROB_EPS, 1.0 - PROB_EPS).reshape((x.shape[0],))
        return p[0] if squeeze else p


def _tape_for(P: Mapping) -> Tape:
    for v in P.values():
        if isinstance(v, Var):
            return v.tape
    return Tape()


# ---------------------------------------------------------------------------
# task keys


TASK_LETTERS = {
    "R": "reconstruct",
    "P": "future",
    "T": "transfer",
    "C": "colorize",
    "S": "shuffle",
    "B": "reverse",
    "A": "align",
    "E": "embed",
    "D": "distill",
}


@dataclass(frozen=True)
class TaskKey:
    """Parsed loss-weight key ``<modality letter><task letter>[<layer>]``."""
    name: str
    modality: str
    task: str
    layer: int | None = None

    @classmethod
    def parse(cls, name: str) -> "TaskKey":
        if len(name) < 2 or name[0] not in MODALITY_OF or name[1] not in TASK_LETTERS:
            raise ValueError(f"malformed loss key {name!r}")
        modality, task = MODALITY_OF[name[0]], TASK_LETTERS[name[1]]
        rest = name[2:]
        if task == "distill":
            if not rest.isdigit() or int(rest) < 1:
                raise ValueError(f"distillation key {name!r} needs a layer index >= 1")
            if modality == "main":
                raise ValueError("distillation runs into the main encoder; source cannot be R")
            return cls(name, modality, task, int(rest))
        if rest:
            raise ValueError(f"only distillation keys carry a layer index: {name!r}")
        if task == "colorize" and modality != "grey":
            raise ValueError("colorize (C) is defined for the grey modality only")
        if task == "align" and modality == "audio":
            raise ValueError("audio alignment pairs a modality with audio; AA is undefined")
        if task == "embed" and modality == "main":
            raise ValueError("embedding contrast pairs a modality with main; RE is undefined")
        if task == "transfer" and modality not in ("main", "flow"):
            raise ValueError("transfer (T) is defined for R (to flow) and F (to main)")
        return cls(name, modality, task)

    @property
    def partner(self) -> str | None:
        """Second modality the task reads, if any."""
        if self.task == "transfer":
            return "flow" if self.modality == "main" else "main"
        if self.task == "colorize":
            return "main"
        if self.task == "align":
            return "audio"
        if self.task in ("embed", "distill"):
            return "main"
        return None

    def modalities(self) -> set[str]:
        out = {self.modality}
        if self.partner:
            out.add(self.partner)
        return out


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ModelBundle:
    config: ModelConfig
    data: DatasetConfig
    keys: tuple
    params: ParamSet
    encoders: dict = field(default_factory=dict)
    decoders: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)

    def watch(self, tape: Tape) -> dict:
        return tape.watch(self.params)

    def embed(self, modality: str, x, P: Mapping | None = None):
        return self.encoders[modality].forward(self.params if P is None else P, x)

    def main_embeddings(self, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Frozen Main-encoder embeddings for ``frames`` of shape (N, F, in)."""
        enc = self.encoders["main"]
        out = np.empty((len(frames), enc.embed_dim))
        for s in range(0, len(frames), batch_size):
            chunk = np.asarray(frames[s:s + batch_size], dtype=np.float64)
            emb, _ = enc.forward(self.params, chunk)
            out[s:s + batch_size] = emb.value
        return out

    def tap_shapes(self, modality: str, frames: int) -> list[tuple]:
        enc = self.encoders[modality]
        x = np.zeros((1, frames, enc.in_dim))
        _, taps = enc.forward(self.params, x)
        return [(i, t.shape) for i, t in taps]


def build_bundle(keys, data: DatasetConfig, config: ModelConfig | None = None,
                 seed: int = 0) -> ModelBundle:
    """Fresh, seeded bundle with every component the task ``keys`` need.

    The Main encoder is always present.  Components are created in sorted key
    order so the parameter layout depends only on the key set.
    """
    config = config or ModelConfig()
    parsed = [TaskKey.parse(k) for k in sorted(keys)]
    F = data.frames
    if config.future_context + config.future_horizon > F:
        raise ValueError("future_context + future_horizon exceeds the clip length")
    rng = np.random.default_rng(seed)

    needed = {"main"}
    for k in parsed:
        needed |= k.modalities()
    encoders = {}
    for m in ("main", "grey", "flow", "audio"):
        if m in needed:
            encoders[m] = ModalityEncoder(m, data.frame_dim(m), tuple(config.hidden),
                                          config.embed_dim, config.temporal_window)

    decoders, heads = {}, {}
    D = config.embed_dim
    for k in parsed:
        if k.task == "reconstruct":
            decoders[k.name] = DecoderHead(k.name, "reconstruct", k.modality, F,
                                           data.frame_dim(k.modality), D, config.decoder_hidden)
        elif k.task == "future":
            decoders[k.name] = DecoderHead(k.name, "future", k.modality, config.future_horizon,
                                           data.frame_dim(k.modality), D, config.decoder_hidden)
        elif k.task in ("transfer", "colorize"):
            decoders[k.name] = DecoderHead(k.name, "cross", k.partner, F,
                                           data.frame_dim(k.partner), D, config.decoder_hidden)
        elif k.task in ("shuffle", "reverse"):
            heads[k.name] = BinaryHead(k.name, D)
        elif k.task == "align":
            heads[k.name] = BinaryHead(k.name, 2 * D)
        elif k.task == "distill":
            n_hidden = len(config.hidden)
            if k.layer > n_hidden:
                raise ValueError(f"{k.name}: encoder has only {n_hidden} tap layers")

    params = ParamSet()
    for m, enc in encoders.items():
        params.update(enc.init_params(rng))
    for name in sorted(decoders):
        params.update(decoders[name].init_params(rng))
    for name in sorted(heads):
        params.update(heads[name].init_params(rng))
    return ModelBundle(config, data, tuple(sorted(keys)), params, encoders, decoders, heads)


# functional wrappers


def embed(encoder: ModalityEncoder, x, params: Mapping):
    emb, taps = encoder.forward(params, x)
    return emb, taps


def decode(head: DecoderHead, embedding, params: Mapping):
    return head.forward(params, embedding)


def binary_predict(head: BinaryHead, embedding, params: Mapping):
    p = head.forward(params, embedding)
    return float(p.value) if np.ndim(p.value) == 0 else p


def save_bundle(path, bundle: ModelBundle, meta: dict | None = None) -> None:
    header = {
        "model": bundle.config.to_dict(),
        "data": bundle.data.to_dict(),
        "keys": list(bundle.keys),
    }
    header.update(meta or {})
    nx.save_params(path, bundle.params, header)


def load_bundle(path) -> tuple[ModelBundle, dict]:
    params, header = nx.load_params(path)
    bundle = build_bundle(header["keys"], DatasetConfig.from_dict(header["data"]),
                          ModelConfig.from_dict(header["model"]))
    if set(bundle.params) != set(params):
        raise ValueError("checkpoint parameters do not match the declared layout")
    for k, v in params.items():
        bundle.params[k] = v
    return bundle, header
