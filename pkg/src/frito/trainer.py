"""Synthetic domain-shifted spectrograms, Adam, and the training/eval loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kvfile import record
from .model import Checkpoint, forward, forward_backward
from .tensor import F32, Rng

# substream keys
_KEY_BANDS = 1
_KEY_DOMAIN = 2
_KEY_TRAIN = 3
_KEY_EVAL = 4


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthTaskSpec:
    """Classes are sets of frequency bands; domains recolor the spectrum.

    Each class owns ``bands_per_class`` disjoint bands of ``band_width`` mel
    bins. A domain multiplies every mel bin by
    ``exp(tilt * (m / (mels - 1) - 0.5)) * (1 + distortion * u_m)`` with
    ``u_m`` uniform in [-1, 1] drawn once per domain, so the transform is
    the same for every class.
    """

    classes: int = 4
    mels: int = 32
    frames: int = 32
    train_domain: int = 0
    domain_tilts: tuple[float, ...] = (0.0, 1.5, -1.5)
    domain_distortions: tuple[float, ...] = (0.0, 0.6, 0.6)
    bands_per_class: int = 2
    band_width: int = 3
    band_amplitude: float = 1.0
    noise: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(self.domain_tilts) != len(self.domain_distortions):
            raise ValueError("domain_tilts and domain_distortions must have equal length")
        if not 0 <= self.train_domain < self.n_domains:
            raise ValueError(f"train_domain {self.train_domain} out of range")
        if any(not 0 <= x < 1 for x in self.domain_distortions):
            raise ValueError("distortions must lie in [0, 1)")
        slots = self.mels // self.band_width
        if self.classes * self.bands_per_class > slots:
            raise ValueError(f"{self.classes} classes x {self.bands_per_class} bands do not fit in {slots} band slots")

    @property
    def n_domains(self) -> int:
        return len(self.domain_tilts)

    @property
    def heldout_domains(self) -> tuple[int, ...]:
        return tuple(d for d in range(self.n_domains) if d != self.train_domain)

    def class_bands(self) -> list[list[int]]:
        """Mel bins carrying each class's energy."""
        slots = Rng(self.seed, _KEY_BANDS).permutation(self.mels // self.band_width)
        out = []
        for c in range(self.classes):
            mine = sorted(slots[c * self.bands_per_class : (c + 1) * self.bands_per_class])
            out.append([int(s) * self.band_width + j for s in mine for j in range(self.band_width)])
        return out

    def domain_gain(self, domain: int) -> np.ndarray:
        if not 0 <= domain < self.n_domains:
            raise ValueError(f"domain {domain} out of range")
        m = np.arange(self.mels) / max(self.mels - 1, 1)
        u = Rng(self.seed, _KEY_DOMAIN, domain).uniform(self.mels, -1.0, 1.0)
        return np.exp(self.domain_tilts[domain] * (m - 0.5)) * (1.0 + self.domain_distortions[domain] * u)


def synth_sample(task: SynthTaskSpec, cls: int, domain: int, rng: Rng) -> np.ndarray:
    """One ``(mels, frames)`` float32 spectrogram of class ``cls`` seen through ``domain``."""
    if not 0 <= cls < task.classes:
        raise ValueError(f"class {cls} out of range")
    gain = task.domain_gain(domain)
    spec = task.noise * np.abs(rng.normal((task.mels, task.frames), 1.0, np.float64))
    bands = task.class_bands()[cls]
    # energy in every band frame, never zero
    spec[bands] += task.band_amplitude * (0.5 + 0.5 * rng.uniform((len(bands), task.frames)))
    return (spec * gain[:, None]).astype(F32)


def make_dataset(task: SynthTaskSpec, domain: int, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """``n`` samples with labels cycling through the classes, in index order."""
    labels = np.arange(n) % task.classes
    specs = np.stack([synth_sample(task, int(c), domain, rng) for c in labels]) if n else np.zeros(
        (0, task.mels, task.frames), F32
    )
    return specs, labels


def eval_set(task: SynthTaskSpec, domain: int, n: int = 64) -> tuple[np.ndarray, np.ndarray]:
    return make_dataset(task, domain, n, Rng(task.seed, _KEY_EVAL, domain))


class Adam:
    """Adam without weight decay; bias-corrected moments."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50
    eval_samples: int = 64

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1 or self.eval_samples < 1:
            raise ValueError("steps, batch_size, eval_every and eval_samples must be positive")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")


def evaluate(ckpt: Checkpoint, task: SynthTaskSpec, domain: int, mode: str = "full", n: int = 64):
    """Accuracy and per-class accuracy on the fixed eval set of ``domain``."""
    specs, labels = eval_set(task, domain, n)
    pred = np.argmax(forward(ckpt, specs, mode), axis=-1)
    acc = float(np.mean(pred == labels))
    per_class = [float(np.mean(pred[labels == c] == c)) if np.any(labels == c) else float("nan") for c in range(task.classes)]
    return acc, per_class


def predictions(ckpt: Checkpoint, task: SynthTaskSpec, domain: int, mode: str = "full", n: int = 64) -> np.ndarray:
    specs, _ = eval_set(task, domain, n)
    return np.argmax(forward(ckpt, specs, mode), axis=-1)


def train(ckpt: Checkpoint, task: SynthTaskSpec, cfg: TrainConfig, on_record=None) -> tuple[Checkpoint, list[str]]:
    """Train in full-masked mode; return the best checkpoint by train-domain accuracy and the log.

    Log lines are ``key=value`` records, one per step (``kind=step``) and one
    per evaluation (``kind=eval``, accuracy for every domain).
    """
    g = ckpt.config.grid
    if task.mels < g.mels or task.frames < g.frames:
        raise ValueError(f"task spectrograms {task.mels}x{task.frames} smaller than grid needs")
    ckpt = ckpt.copy()
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    stream = Rng(cfg.seed, _KEY_TRAIN)
    log: list[str] = []

    def emit(line):
        log.append(line)
        if on_record is not None:
            on_record(line)

    best, best_acc = ckpt.copy(), -1.0
    for step in range(1, cfg.steps + 1):
        labels = stream.integers(0, task.classes, cfg.batch_size)
        specs = np.stack([synth_sample(task, int(c), task.train_domain, stream) for c in labels])
        loss, grads = forward_backward(ckpt, specs, labels)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at step {step}")
        opt.step(ckpt.params, grads)
        emit(record(kind="step", step=step, loss=loss))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            accs = {d: evaluate(ckpt, task, d, "full", cfg.eval_samples)[0] for d in range(task.n_domains)}
            emit(record(kind="eval", step=step, **{f"acc.d{d}": a for d, a in accs.items()}))
            if accs[task.train_domain] > best_acc:
                best, best_acc = ckpt.copy(), accs[task.train_domain]
    return best, log
