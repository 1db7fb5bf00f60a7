"""Adam training of the toy transformer, plus the text-only biased variant."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MultimodalTransformer, group_by_layout

log = logging.getLogger(__name__)

BIAS_MODES = ("balanced", "text_only")


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    bias_mode: str = "balanced"

    def __post_init__(self):
        problems = []
        if not self.learning_rate >= 0:
            problems.append("learning_rate must be >= 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.bias_mode not in BIAS_MODES:
            problems.append(f"bias_mode must be one of {BIAS_MODES}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns (new params, state); inputs are not mutated."""
    step = state.step + 1
    new_params, m_all, v_all = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_all[name], v_all[name] = m, v
    return new_params, AdamState(step, m_all, v_all)


def _text_only_regions(samples: Sequence, cfg: TrainConfig, region_dim: int) -> dict[str, np.ndarray]:
    """Fixed label-free stand-in images for the text_only mode.

    Each sample borrows the regions of a different training sample (a
    seeded derangement among samples with the same region count), so the
    image channel keeps its real feature statistics but says nothing about
    the sample's own label. A sample with no partner of its size gets
    Gaussian noise with the per-dimension moments of all regions.
    """
    rng = np.random.default_rng([cfg.seed, 7919])
    all_regions = np.concatenate([np.asarray(s.regions, dtype=np.float64) for s in samples])
    mu, sd = all_regions.mean(axis=0), all_regions.std(axis=0)
    by_size: dict[int, list] = {}
    for s in samples:
        by_size.setdefault(len(s.regions), []).append(s)
    out = {}
    for size, group in sorted(by_size.items()):
        if len(group) == 1:
            out[group[0].id] = mu + sd * rng.normal(size=(size, region_dim))
            continue
        order = rng.permutation(len(group))
        for a, b in zip(order, np.roll(order, -1)):
            out[group[int(a)].id] = np.asarray(group[int(b)].regions, dtype=np.float64)
    return out


def train(model: MultimodalTransformer, dataset: Sequence, cfg: TrainConfig = TrainConfig()):
    """Fit ``model`` on ``dataset``. Returns (trained copy, per-epoch mean loss)."""
    dataset = list(dataset)
    if not dataset:
        raise DegenerateDataError("dataset is empty")
    labels = {s.label for s in dataset}
    if labels != {0, 1}:
        raise DegenerateDataError(f"dataset must contain both labels, found {sorted(labels)}")

    rng = np.random.default_rng(cfg.seed)
    noise = _text_only_regions(dataset, cfg, model.config.region_dim) if cfg.bias_mode == "text_only" else None
    buckets = list(group_by_layout(dataset).values())
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState()
    curve = []
    for epoch in range(cfg.epochs):
        batches = []
        for idx in buckets:
            order = rng.permutation(idx)
            batches += [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        losses, weights = [], []
        for b in (batches[i] for i in rng.permutation(len(batches))):
            chunk = [dataset[int(i)] for i in b]
            regions = None if noise is None else np.stack([noise[s.id] for s in chunk])
            loss, grads = model.with_params(params).loss_and_grads(chunk, regions_override=regions)
            params, state = adam_step(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss)
            weights.append(len(chunk))
        curve.append(float(np.average(losses, weights=weights)))
        log.debug("epoch %d loss %.6f", epoch + 1, curve[-1])
    return model.with_params(params), curve


def save_loss_curve(curve: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(curve, 1):
            w.writerow([i, repr(float(loss))])
