"""Synthetic multi-modal clips with Zipf-distributed latent classes.

Each clip is a Gaussian blob drifting over a toroidal canvas.  The class
decides the blob's base colour, heading, turning rate, speed and the pitch of
its soundtrack; per-clip nuisances (start position, colour and heading jitter,
speed phase, pixel noise) keep classes from being trivially separable.

Four synchronised modalities are produced:

``main``   F x H x W x 3 colour frames in [0, 1]
``grey``   F x H x W x 1, the exact channel mean of ``main``
``flow``   F x H x W x 2, analytic displacement (x, y) in pixels/frame
``audio``  F * R mono samples in [-1, 1]; amplitude follows blob speed

Everything is a pure function of the config and the generator state, so a
clip can be rebuilt from ``(config.seed ^ clip_id)`` alone.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import atomic_write_text, read_container, write_container

MODALITIES = ("main", "grey", "flow", "audio")
# single-letter codes used in loss-weight keys
LETTER = {"main": "R", "grey": "G", "flow": "F", "audio": "A"}
MODALITY_OF = {v: k for k, v in LETTER.items()}

DATASET_FORMAT = 1


class LabelAccessError(PermissionError):
    """Raised when class labels are read without the label capability."""


@dataclass(frozen=True)
class DatasetConfig:
    num_clips: int = 4096
    num_classes: int = 8
    zipf_s: float = 1.0
    frames: int = 8
    height: int = 16
    width: int = 16
    audio_rate: int = 64
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_clips < 0:
            raise ValueError("num_clips must be >= 0")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.zipf_s <= 0:
            raise ValueError("zipf_s must be > 0")
        if self.frames < 4:
            raise ValueError("frames must be >= 4 (future prediction needs a split)")
        if min(self.height, self.width, self.audio_rate) < 1:
            raise ValueError("height, width and audio_rate must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def frame_dim(self, modality: str) -> int:
        hw = self.height * self.width
        return {"main": 3 * hw, "grey": hw, "flow": 2 * hw, "audio": self.audio_rate}[modality]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**d)


@dataclass
class MultiModalClip:
    main: np.ndarray
    grey: np.ndarray
    flow: np.ndarray
    audio: np.ndarray
    latent_class: int
    clip_id: int = 0

    def frames(self, modality: str) -> np.ndarray:
        """Per-frame flattened view, shape (F, frame_dim)."""
        arr = getattr(self, modality)
        F = self.main.shape[0]
        return arr.reshape(F, -1)


@dataclass
class TaskSample:
    inputs: tuple
    label: int
    task_kind: str
    # bookkeeping the samplers expose for tests and batching
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ClassStyle:
    color: tuple
    heading: float
    turn: float
    speed: float
    pitch: float  # cycles per frame


# ---------------------------------------------------------------------------
# class structure


def zipf_pmf(C: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, C + 1, dtype=np.float64) ** s
    return w / w.sum()


def zipf_sample(C: int, s: float, rng: np.random.Generator) -> int:
    """Class ``i`` with probability ``(i+1)**-s / H(C, s)``."""
    if C < 1 or s <= 0:
        raise ValueError("zipf_sample needs C >= 1 and s > 0")
    if C == 1:
        return 0
    cdf = np.cumsum(zipf_pmf(C, s))
    i = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(i, C - 1)


_PALETTE = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.90],
    [0.85, 0.80, 0.20],
])


def class_style(cls: int, num_classes: int) -> ClassStyle:
    """Deterministic appearance/motion parameters for a class.

    Colours repeat every four classes, so colour alone cannot tell class
    ``c`` from ``c + 4``; motion and sound have to carry the rest.
    """
    return ClassStyle(
        color=tuple(_PALETTE[cls % len(_PALETTE)]),
        heading=2.0 * math.pi * cls / max(num_classes, 1),
        turn=0.12 * (1 if cls % 2 == 0 else -1),
        speed=0.6 + 0.5 * (cls % 3),
        pitch=2.0 + 0.75 * cls,
    )


# ---------------------------------------------------------------------------
# rendering


def derive_grey(main: np.ndarray) -> np.ndarray:
    main = np.asarray(main)
    if main.shape[-1] != 3:
        raise ValueError(f"expected 3 colour channels in the last axis, got {main.shape}")
    return main.mean(axis=-1, keepdims=True)


def _blob(H, W, cx, cy, sigma):
    xs = np.arange(W, dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)
    dx = (xs[None, :] - cx + W / 2.0) % W - W / 2.0
    dy = (ys[:, None] - cy + H / 2.0) % H - H / 2.0
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def generate_clip(cls: int, config: DatasetConfig, rng: np.random.Generator,
                  style: ClassStyle | None = None, clip_id: int = 0) -> MultiModalClip:
    """Render one clip of class ``cls``.  Positions wrap around the canvas."""
    if not 0 <= cls < config.num_classes:
        raise ValueError(f"class {cls} outside [0, {config.num_classes})")
    style = style or class_style(cls, config.num_classes)
    F, H, W, R = config.frames, config.height, config.width, config.audio_rate

    # nuisances, always drawn in the same order
    start = rng.uniform(0.0, [W, H])
    color = np.clip(np.asarray(style.color) + rng.normal(0.0, 0.08, 3), 0.0, 1.0)
    heading0 = style.heading + rng.normal(0.0, 0.2)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    audio_phase = rng.uniform(0.0, 2.0 * math.pi)
    sigma = rng.uniform(1.6, 2.4)

    t = np.arange(F + 1, dtype=np.float64)
    speed_t = style.speed * (1.0 + 0.5 * np.sin(2.0 * math.pi * t / F + phase))
    heading_t = heading0 + style.turn * t
    steps = speed_t[:, None] * np.stack([np.cos(heading_t), np.sin(heading_t)], axis=1)
    pos = np.concatenate([start[None, :], start[None, :] + np.cumsum(steps[:-1], axis=0)])
    disp = pos[1:] - pos[:-1]  # (F, 2)

    background = 0.1
    main = np.empty((F, H, W, 3))
    flow = np.empty((F, H, W, 2))
    for f in range(F):
        g = _blob(H, W, pos[f, 0], pos[f, 1], sigma)
        main[f] = background + (color - background) * g[..., None]
        flow[f] = g[..., None] * disp[f]
    if config.noise_std > 0:
        main = main + rng.normal(0.0, config.noise_std, main.shape)
    main = np.clip(main, 0.0, 1.0)

    tau = np.arange(F * R, dtype=np.float64) / R
    amp = np.clip(style.speed * (1.0 + 0.5 * np.sin(2.0 * math.pi * tau / F + phase)) / 2.5,
                  0.0, 1.0)
    audio = amp * np.sin(2.0 * math.pi * style.pitch * tau + audio_phase)
    if config.noise_std > 0:
        audio = audio + rng.normal(0.0, config.noise_std, audio.shape)
    audio = np.clip(audio, -1.0, 1.0)

    return MultiModalClip(main=main, grey=derive_grey(main), flow=flow, audio=audio,
                          latent_class=int(cls), clip_id=int(clip_id))


def clip_rng(config: DatasetConfig, clip_id: int) -> np.random.Generator:
    return np.random.default_rng(config.seed ^ clip_id)


def sample_clip(config: DatasetConfig, clip_id: int) -> MultiModalClip:
    """Draw the class from the Zipf prior and render, using the per-clip seed."""
    rng = clip_rng(config, clip_id)
    cls = zipf_sample(config.num_classes, config.zipf_s, rng)
    return generate_clip(cls, config, rng, clip_id=clip_id)


# ---------------------------------------------------------------------------
# datasets


class Dataset:
    """Stacked per-frame arrays for many clips.

    ``arrays[m]`` has shape ``(N, F, frame_dim(m))`` and is stored as float32
    to keep desk-scale datasets in memory; batches are promoted to float64.
    Labels sit behind :meth:`unlock_labels`; reading :attr:`labels` while the
    dataset is locked raises :class:`LabelAccessError`.
    """

    def __init__(self, config: DatasetConfig, arrays: dict, clip_ids: np.ndarray,
                 labels: np.ndarray | None = None, label_path: Path | None = None):
        self.config = config
        self.arrays = arrays
        self.clip_ids = np.asarray(clip_ids, dtype=np.int64)
        self._labels = labels
        self._label_path = label_path
        self._unlocked = False

    def __len__(self):
        return len(self.clip_ids)

    @property
    def labels(self) -> np.ndarray:
        if not self._unlocked:
            raise LabelAccessError("class labels are locked for this dataset")
        return self._labels

    def unlock_labels(self) -> "Dataset":
        if self._labels is None:
            if self._label_path is None:
                raise LabelAccessError("no label source attached to this dataset")
            self._labels = read_label_sidecar(self._label_path, self.clip_ids)
        self._unlocked = True
        return self

    def lock_labels(self) -> "Dataset":
        self._unlocked = False
        return self

    @property
    def train_index(self) -> np.ndarray:
        return np.flatnonzero(self.clip_ids < self.config.num_clips // 2)

    @property
    def eval_index(self) -> np.ndarray:
        return np.flatnonzero(self.clip_ids >= self.config.num_clips // 2)

    def batch(self, index, modalities=MODALITIES) -> dict:
        index = np.asarray(index)
        return {m: self.arrays[m][index].astype(np.float64) for m in modalities}

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        labels = None if self._labels is None else self._labels[index]
        out = Dataset(self.config, {m: a[index] for m, a in self.arrays.items()},
                      self.clip_ids[index], labels, self._label_path)
        out._unlocked = self._unlocked
        return out


def generate_dataset(config: DatasetConfig) -> Dataset:
    N, F = config.num_clips, config.frames
    arrays = {m: np.empty((N, F, config.frame_dim(m)), dtype=np.float32) for m in MODALITIES}
    labels = np.empty(N, dtype=np.int64)
    for i in range(N):
        clip = sample_clip(config, i)
        labels[i] = clip.latent_class
        for m in MODALITIES:
            arrays[m][i] = clip.frames(m)
    return Dataset(config, arrays, np.arange(N), labels)


def class_histogram(labels, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)


def label_sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".labels")


def write_dataset(path, dataset: Dataset) -> Path:
    """Write the container and its label sidecar; returns the sidecar path."""
    header = {"format_version": DATASET_FORMAT, "config": dataset.config.to_dict()}
    entries = {"clip_id": dataset.clip_ids}
    entries.update({m: np.ascontiguousarray(a, dtype=np.float32) for m, a in dataset.arrays.items()})
    write_container(path, entries, header, kind="dataset")
    side = label_sidecar_path(path)
    # labels are needed here, so writing requires the capability too
    labels = dataset._labels
    if labels is None:
        labels = dataset.unlock_labels().labels
    lines = ["# clip_id latent_class"] + [f"{c} {l}" for c, l in zip(dataset.clip_ids, labels)]
    atomic_write_text(side, "\n".join(lines) + "\n")
    return side


def read_dataset(path, with_labels: bool = False) -> Dataset:
    """Load a dataset container.  The label sidecar is only opened on demand."""
    header, entries = read_container(path, kind="dataset")
    if header.get("format_version") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {header.get('format_version')}")
    config = DatasetConfig.from_dict(header["config"])
    arrays = {m: entries[m] for m in MODALITIES}
    ds = Dataset(config, arrays, entries["clip_id"], label_path=label_sidecar_path(path))
    if with_labels:
        ds.unlock_labels()
    return ds


def read_label_sidecar(path, clip_ids) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise LabelAccessError(f"label sidecar {path} is missing")
    table = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cid, cls = line.split()
        table[int(cid)] = int(cls)
    return np.array([table[int(c)] for c in clip_ids], dtype=np.int64)


# ---------------------------------------------------------------------------
# self-supervised samplers


def _as_frames(clip, modality: str) -> np.ndarray:
    if isinstance(clip, MultiModalClip):
        return clip.frames(modality)
    return np.asarray(clip)


def draw_shuffle(F: int, rng: np.random.Generator):
    """(order, label): identity with label 1, else a non-identity permutation."""
    if F < 3:
        raise ValueError("temporal samplers need at least 3 frames")
    if rng.random() < 0.5:
        return np.arange(F), 1
    ident = np.arange(F)
    while True:
        perm = rng.permutation(F)
        if not np.array_equal(perm, ident):
            return perm, 0


def draw_reverse(F: int, rng: np.random.Generator):
    if F < 3:
        raise ValueError("temporal samplers need at least 3 frames")
    if rng.random() < 0.5:
        return np.arange(F), 1
    return np.arange(F)[::-1].copy(), 0


def make_shuffled(clip, rng: np.random.Generator, modality: str = "main") -> TaskSample:
    x = _as_frames(clip, modality)
    order, label = draw_shuffle(len(x), rng)
    return TaskSample((x[order],), label, "shuffle", {"order": order})


def make_reversed(clip, rng: np.random.Generator, modality: str = "main") -> TaskSample:
    x = _as_frames(clip, modality)
    order, label = draw_reverse(len(x), rng)
    return TaskSample((x[order],), label, "reverse", {"order": order})


def draw_alignment(F: int, window: int, offset: int, rng: np.random.Generator,
                   other_available: bool = True):
    """Pick window starts for an alignment pair.

    Returns ``(start_a, start_b, label, neg_type)``; ``neg_type`` is ``None``
    for positives, ``"shift"`` for a same-clip time shift, ``"other"`` when
    the second window comes from another clip.
    """
    if offset < 1:
        raise ValueError("offset_frames must be >= 1")
    if not 1 <= window <= F:
        raise ValueError(f"window of {window} frames does not fit in {F} frames")
    last = F - window
    if last < offset:
        raise ValueError(f"no shifted window of {window} frames at offset >= {offset} "
                         f"fits in {F} frames")
    if rng.random() < 0.5:
        s = int(rng.integers(0, last + 1))
        return s, s, 1, None
    if other_available and rng.random() < 0.5:
        s = int(rng.integers(0, last + 1))
        return s, s, 0, "other"
    starts = np.arange(last + 1)
    s = int(rng.choice([a for a in starts if np.any(np.abs(starts - a) >= offset)]))
    partners = starts[np.abs(starts - s) >= offset]
    return s, int(rng.choice(partners)), 0, "shift"


def make_misaligned(clip_a, clip_b, offset_frames: int, rng: np.random.Generator,
                    modalities=("main", "audio"), window: int | None = None) -> TaskSample:
    """Aligned (label 1) or misaligned (label 0) pair of modality windows."""
    m1, m2 = modalities
    xa1 = _as_frames(clip_a, m1)
    xa2 = _as_frames(clip_a, m2)
    F = len(xa1)
    window = window or F // 2
    s1, s2, label, neg = draw_alignment(F, window, offset_frames, rng, clip_b is not None)
    second = _as_frames(clip_b, m2) if neg == "other" else xa2
    return TaskSample(
        (xa1[s1:s1 + window], second[s2:s2 + window]), label, "align",
        {"start_a": s1, "start_b": s2, "neg_type": neg},
    )
