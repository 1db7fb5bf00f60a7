"""Attention attribution on the last layer, split by modality interaction.

For head ``h`` the attribution is the integrated gradient along the ray
``a * A`` (a in [0, 1])::

    attattr_h = A_h * (1/m) * sum_{j=1..m} dF(a_j * A) / dA_h

with F the hateful-minus-benign logit margin and nodes ``a_j = (j - 1/2)/m``
(midpoint rule, the default) or ``a_j = j/m`` (``rule="right"``; with m = 1
this is the single-step ``A * dF(A)/dA``). The midpoint rule is O(1/m^2)
accurate; the right rule only O(1/m). Rows of ``a * A`` are left
unnormalized. Averages over the within-text, within-image and cross-modal
blocks of the (H, S, S) result give the per-interaction scores; marker rows
and columns are dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .model import SequenceLayout

INTERACTION_TYPES = ("within_text", "within_image", "cross_modal")
ALL = "all"
VARIANTS = ("attattr", "attention_only", "gradient_only")
DEFAULT_M_STEPS = 300
RULES = ("midpoint", "right")


@dataclass(frozen=True)
class InteractionMask:
    within_text: np.ndarray
    within_image: np.ndarray
    cross_modal: np.ndarray
    excluded: np.ndarray

    def by_type(self) -> dict[str, np.ndarray]:
        return {t: getattr(self, t) for t in INTERACTION_TYPES}

    def sizes(self) -> dict[str, int]:
        return {t: int(m.sum()) for t, m in self.by_type().items()}


def interaction_masks(layout: SequenceLayout) -> InteractionMask:
    S = layout.length
    is_text = np.zeros(S, dtype=bool)
    is_text[list(layout.text)] = True
    is_image = np.zeros(S, dtype=bool)
    is_image[list(layout.image)] = True
    within_text = np.outer(is_text, is_text)
    within_image = np.outer(is_image, is_image)
    cross = np.outer(is_text, is_image) | np.outer(is_image, is_text)
    excluded = ~(within_text | within_image | cross)
    return InteractionMask(within_text, within_image, cross, excluded)


def type_means(matrices: np.ndarray, masks: InteractionMask) -> dict[str, float]:
    """Mean over heads and mask positions for each interaction type, plus ``all``."""
    matrices = np.asarray(matrices, dtype=np.float64)
    H = matrices.shape[0]
    out = {}
    total, count = 0.0, 0
    for name, m in masks.by_type().items():
        s = float(matrices[:, m].sum())
        n = int(m.sum())
        out[name] = s / (H * n) if n else 0.0
        total += s
        count += n
    out[ALL] = total / (H * count) if count else 0.0
    return out


@dataclass
class AttributionRecord:
    sample_id: str
    layout: SequenceLayout
    attattr: np.ndarray  # (H, S, S)
    attention: np.ndarray  # (H, S, S), last layer
    gradient: np.ndarray  # (H, S, S), dF/dA at a = 1
    m_steps: int
    layer: int
    means: dict[str, dict[str, float]] = field(default_factory=dict)  # variant -> type -> mean

    def __post_init__(self):
        if not self.means:
            masks = interaction_masks(self.layout)
            self.means = {
                "attattr": type_means(self.attattr, masks),
                "attention_only": type_means(self.attention, masks),
                "gradient_only": type_means(self.gradient, masks),
            }

    @property
    def type_means(self) -> dict[str, float]:
        return self.means["attattr"]


def quadrature_nodes(m_steps: int, rule: str = "midpoint") -> np.ndarray:
    if m_steps < 1:
        raise ValueError(f"m_steps must be >= 1, got {m_steps}")
    j = np.arange(1, m_steps + 1)
    if rule == "midpoint":
        return (j - 0.5) / m_steps
    if rule == "right":
        return j / m_steps
    raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")


def _integrated_gradient(model, sample, m_steps: int, rule: str, chunk: int = 150):
    alphas = quadrature_nodes(m_steps, rule)
    A = np.asarray(model.last_attention(sample))
    acc = np.zeros_like(A)
    for lo in range(0, m_steps, chunk):
        a = alphas[lo:lo + chunk]
        _, grads = model.objective_with_attention(sample, a[:, None, None, None] * A)
        acc += grads.sum(axis=0)
    return A, acc / m_steps


def attribute(model, sample, m_steps: int = DEFAULT_M_STEPS, rule: str = "midpoint") -> AttributionRecord:
    """Attribution record for ``sample`` with all three score variants."""
    A, mean_grad = _integrated_gradient(model, sample, m_steps, rule)
    _, grad_at_one = model.objective_with_attention(sample, A[None])
    layer = getattr(getattr(model, "config", None), "n_layers", 1) - 1
    return AttributionRecord(sample.id, model.layout(sample), A * mean_grad, A, grad_at_one[0], m_steps, layer)


def attattr_head(model, sample, head: int, m_steps: int = DEFAULT_M_STEPS, rule: str = "midpoint") -> np.ndarray:
    n_heads = model.config.n_heads
    if not 0 <= head < n_heads:
        raise IndexError(f"head {head} out of range for {n_heads} heads")
    return attribute(model, sample, m_steps, rule).attattr[head]


def attattr_by_type(model, sample, m_steps: int = DEFAULT_M_STEPS, rule: str = "midpoint") -> AttributionRecord:
    return attribute(model, sample, m_steps, rule)


def attention_only_score(model, sample) -> dict[str, float]:
    """Interaction means of the raw last-layer attention; never touches gradients."""
    return type_means(model.last_attention(sample), interaction_masks(model.layout(sample)))


def gradient_only_score(model, sample) -> dict[str, float]:
    """Interaction means of dF/dA at the model's own attention."""
    A = np.asarray(model.last_attention(sample))
    _, grads = model.objective_with_attention(sample, A[None])
    return type_means(grads[0], interaction_masks(model.layout(sample)))


def local_explain(record: AttributionRecord, layout: SequenceLayout | None = None,
                  top_tokens: int = 10, top_regions: int = 3, variant: str = "attattr") -> dict[str, dict[str, list[int]]]:
    """Top text positions and region indices per interaction type.

    A position's score is the attribution mass it emits plus receives inside
    the type's mask, summed over heads. Ties go to the lower index.
    Indices are 0-based within the text span and within the region list.
    """
    if top_tokens < 1 or top_regions < 1:
        raise ValueError("top_tokens and top_regions must be >= 1")
    layout = layout or record.layout
    X = {"attattr": record.attattr, "attention_only": record.attention, "gradient_only": record.gradient}[variant]
    masks = interaction_masks(layout)
    out = {}
    for name, m in masks.by_type().items():
        masked = np.where(m, X, 0.0).sum(axis=0)
        score = masked.sum(axis=1) + masked.sum(axis=0)
        ranked = {}
        for key, span, limit in (("tokens", layout.text, top_tokens), ("regions", layout.image, top_regions)):
            positions = [p for p in span if m[p].any() or m[:, p].any()]
            order = sorted(positions, key=lambda p: (-score[p], p))
            ranked[key] = [p - span.start for p in order[:limit]]
        out[name] = ranked
    return out


class LinearAttentionProbe:
    """Model whose margin is linear in last-layer attention: F(A) = sum(c * A) + offset.

    Attention itself comes from ``base``; ``coeffs`` must be (H, S, S) for
    the layouts it is used with.
    """

    def __init__(self, base, coeffs: np.ndarray, offset: float = 0.0):
        self.base = base
        self.config = base.config
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        self.offset = float(offset)

    def layout(self, sample) -> SequenceLayout:
        return self.base.layout(sample)

    def last_attention(self, sample) -> np.ndarray:
        return self.base.last_attention(sample)

    def objective_with_attention(self, sample, attention, objective: str = "margin"):
        attention = np.asarray(attention, dtype=np.float64)
        if attention.shape[1:] != self.coeffs.shape:
            raise ValueError(f"attention batch {attention.shape} does not match coefficients {self.coeffs.shape}")
        values = (attention * self.coeffs).sum(axis=(1, 2, 3)) + self.offset
        return values, np.broadcast_to(self.coeffs, attention.shape).copy()

    def logits_with_attention(self, sample, attention) -> np.ndarray:
        values, _ = self.objective_with_attention(sample, np.asarray(attention)[None])
        return np.array([0.0, values[0]])

    def forward_with_attention_override(self, sample, alpha: float) -> np.ndarray:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        return self.logits_with_attention(sample, alpha * self.last_attention(sample))


# -------------------------------------------------------------------- dump


def record_to_json(record: AttributionRecord, top_tokens: int = 10, top_regions: int = 3) -> dict:
    return {
        "sample_id": record.sample_id,
        "m_steps": record.m_steps,
        "layer": record.layer,
        "n_text": record.layout.n_text,
        "n_regions": record.layout.n_regions,
        "means": record.means,
        "explanation": local_explain(record, top_tokens=top_tokens, top_regions=top_regions),
    }


def save_attributions(records: Iterable[AttributionRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")


def load_attribution_means(path: str | Path) -> dict[str, dict[str, dict[str, float]]]:
    """sample_id -> variant -> type -> mean, from an attribution dump."""
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["sample_id"]] = rec["means"]
    return out
