"""Intersectional treatment effects (miATE) and their attribution analogue (MIDAS).

For a triple (hateful, image-benign, text-benign) with model output theta::

    effect = theta(T1, I1) - theta(T1, I0) - theta(T0, I1)

The ``image`` analysis uses triples whose image confounder is original (the
text confounder may be crafted); ``text`` is the mirror image. MIDAS applies
the same difference to per-interaction attribution means.
"""

from __future__ import annotations

import csv
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .attribution import ALL, DEFAULT_M_STEPS, INTERACTION_TYPES, VARIANTS, attribute
from .synth import ConfounderTriple

ANALYSES = ("image", "text")
SCORE_TYPES = (ALL,) + INTERACTION_TYPES
CSV_FIELDS = ("model", "analysis", "measure", "variant", "interaction_type", "mean", "ci_low", "ci_high", "n", "filtered")


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class EffectEstimate:
    mean: float
    ci_low: float
    ci_high: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def bootstrap_ci(values: Sequence[float], n_boot: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[idx].mean(axis=1)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return float(lo), float(hi)


def estimate(values: Sequence[float], n_boot: int = 1000, level: float = 0.95, seed: int = 0) -> EffectEstimate:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInputError("no observations to estimate from")
    lo, hi = bootstrap_ci(values, n_boot, level, seed)
    return EffectEstimate(float(values.mean()), lo, hi, int(values.size))


def select(triples: Iterable[ConfounderTriple], analysis: str) -> list[ConfounderTriple]:
    if analysis not in ANALYSES:
        raise ValueError(f"analysis must be one of {ANALYSES}, got {analysis!r}")
    return [t for t in triples if analysis in t.analyses()]


def _observations(triples: Sequence[ConfounderTriple], per_triple: np.ndarray, aggregate_picks: bool) -> np.ndarray:
    if not aggregate_picks:
        return per_triple
    groups: OrderedDict[str, list[float]] = OrderedDict()
    for t, v in zip(triples, per_triple):
        groups.setdefault(t.hateful.id, []).append(v)
    return np.array([np.mean(v) for v in groups.values()])


def triple_effects(triples: Sequence[ConfounderTriple], score: Callable[[object], float]) -> np.ndarray:
    return np.array([score(t.hateful) - score(t.image_benign) - score(t.text_benign) for t in triples])


class OracleModel:
    """Stub that outputs the true label as its probability (a perfect intersectional model)."""

    def predict_prob(self, sample) -> float:
        return float(sample.label)

    def predict_probs(self, samples: Sequence) -> np.ndarray:
        return np.array([float(s.label) for s in samples])


def predict_many(model, samples: Sequence) -> np.ndarray:
    if hasattr(model, "predict_probs"):
        return np.asarray(model.predict_probs(list(samples)), dtype=np.float64)
    return np.array([model.predict_prob(s) for s in samples], dtype=np.float64)


def _unique_members(triples: Iterable[ConfounderTriple]) -> list:
    seen = OrderedDict()
    for t in triples:
        for s in t.members():
            seen.setdefault(s.id, s)
    return list(seen.values())


def probabilities(model, triples: Iterable[ConfounderTriple]) -> dict[str, float]:
    members = _unique_members(triples)
    return dict(zip((s.id for s in members), predict_many(model, members)))


def miate_from_probs(triples: Iterable[ConfounderTriple], probs: Mapping[str, float], analysis: str,
                     n_boot: int = 1000, seed: int = 0, aggregate_picks: bool = False) -> EffectEstimate:
    chosen = select(triples, analysis)
    if not chosen:
        raise EmptyInputError(f"no triples for the {analysis} analysis")
    effects = triple_effects(chosen, lambda s: probs[s.id])
    return estimate(_observations(chosen, effects, aggregate_picks), n_boot, seed=seed)


def miate(model, triples: Iterable[ConfounderTriple], analysis: str, n_boot: int = 1000, seed: int = 0,
          aggregate_picks: bool = False) -> EffectEstimate:
    """Mean intersectional effect on hateful probability, with a bootstrap CI."""
    chosen = select(triples, analysis)
    if not chosen:
        raise EmptyInputError(f"no triples for the {analysis} analysis")
    return miate_from_probs(chosen, probabilities(model, chosen), analysis, n_boot, seed, aggregate_picks)


def midas_from_scores(triples: Iterable[ConfounderTriple], scores: Mapping[str, Mapping[str, float]], analysis: str,
                      n_boot: int = 1000, seed: int = 0, aggregate_picks: bool = False) -> dict[str, EffectEstimate]:
    """MIDAS per interaction type (and ``all``) from per-sample type scores."""
    chosen = select(triples, analysis)
    if not chosen:
        raise EmptyInputError(f"no triples for the {analysis} analysis")
    out = {}
    for kind in SCORE_TYPES:
        effects = triple_effects(chosen, lambda s: scores[s.id][kind])
        out[kind] = estimate(_observations(chosen, effects, aggregate_picks), n_boot, seed=seed)
    return out


@dataclass
class ScoreCache:
    """Attribution records keyed by sample id, computed on demand."""

    model: object
    m_steps: int = DEFAULT_M_STEPS
    records: dict = field(default_factory=dict)

    def record(self, sample):
        if sample.id not in self.records:
            self.records[sample.id] = attribute(self.model, sample, self.m_steps)
        return self.records[sample.id]

    def scores(self, triples: Iterable[ConfounderTriple], variant: str) -> dict[str, dict[str, float]]:
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        return {s.id: self.record(s).means[variant] for s in _unique_members(triples)}


def midas(model, triples: Iterable[ConfounderTriple], analysis: str, variant: str = "attattr",
          m_steps: int = DEFAULT_M_STEPS, n_boot: int = 1000, seed: int = 0, aggregate_picks: bool = False,
          cache: ScoreCache | None = None) -> dict[str, EffectEstimate]:
    chosen = select(triples, analysis)
    if not chosen:
        raise EmptyInputError(f"no triples for the {analysis} analysis")
    cache = cache or ScoreCache(model, m_steps)
    return midas_from_scores(chosen, cache.scores(chosen, variant), analysis, n_boot, seed, aggregate_picks)


def filter_correct(model, triples: Iterable[ConfounderTriple], threshold: float = 0.5) -> list[ConfounderTriple]:
    """Triples where the hateful member scores above ``threshold`` and both confounders below."""
    triples = list(triples)
    if not triples:
        return []
    probs = probabilities(model, triples)
    return [
        t for t in triples
        if probs[t.hateful.id] > threshold
        and probs[t.image_benign.id] < threshold
        and probs[t.text_benign.id] < threshold
    ]


# ------------------------------------------------------------ relation check


@dataclass(frozen=True)
class RelationReport:
    midas_sum: np.ndarray
    expectation_gap: np.ndarray
    discrepancy: np.ndarray

    @property
    def max_discrepancy(self) -> float:
        return float(np.max(np.abs(self.discrepancy)))


def relation_check(attention_hateful, gradient_hateful, attention_reference, gradient_reference,
                   tol: float = 1e-9) -> RelationReport:
    """Compare the summed single-step MIDAS with the attention expectation gap.

    Inputs are (n,) or (n, n_types) arrays over n samples. The reference
    side stands for the combined confounder terms of the three-term MIDAS.
    Gradient weights must be normalized over samples (sum to 1 per type);
    under uniform weights 1/n the two quantities coincide.
    """
    a1, g1, a0, g0 = (np.asarray(x, dtype=np.float64) for x in
                      (attention_hateful, gradient_hateful, attention_reference, gradient_reference))
    if not (a1.shape == g1.shape == a0.shape == g0.shape) or a1.ndim not in (1, 2) or a1.shape[0] == 0:
        raise ValueError("attention and gradient inputs must share a non-empty (n,) or (n, types) shape")
    for name, g in (("hateful", g1), ("reference", g0)):
        dev = np.max(np.abs(g.sum(axis=0) - 1.0))
        if dev > tol:
            raise ValueError(f"{name} gradient weights must sum to 1 over samples (off by {dev:.3g})")
    midas_sum = (a1 * g1 - a0 * g0).sum(axis=0)
    gap = a1.mean(axis=0) - a0.mean(axis=0)
    return RelationReport(midas_sum, gap, midas_sum - gap)


# -------------------------------------------------------------------- report


@dataclass
class EffectReport:
    model: str
    filtered: bool
    miate: dict[str, EffectEstimate] = field(default_factory=dict)  # analysis ->
    midas: dict[str, dict[str, dict[str, EffectEstimate]]] = field(default_factory=dict)  # analysis -> variant -> type
    n_triples: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        rows = []
        for analysis, est in self.miate.items():
            rows.append(self._row(analysis, "miate", "", "", est))
        for analysis, by_variant in self.midas.items():
            for variant, by_type in by_variant.items():
                for kind, est in by_type.items():
                    rows.append(self._row(analysis, "midas", variant, kind, est))
        return rows

    def _row(self, analysis, measure, variant, kind, est: EffectEstimate) -> dict:
        return {
            "model": self.model, "analysis": analysis, "measure": measure, "variant": variant,
            "interaction_type": kind, "mean": repr(est.mean), "ci_low": repr(est.ci_low),
            "ci_high": repr(est.ci_high), "n": est.n, "filtered": int(self.filtered),
        }

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "filtered": self.filtered,
            "n_triples": self.n_triples,
            "miate": {a: e.as_dict() for a, e in self.miate.items()},
            "midas": {a: {v: {k: e.as_dict() for k, e in bt.items()} for v, bt in bv.items()} for a, bv in self.midas.items()},
        }


def effect_report(model, triples: Sequence[ConfounderTriple], name: str = "model", analyses: Sequence[str] = ANALYSES,
                  variants: Sequence[str] = VARIANTS, filter_correctly_classified: bool = False,
                  m_steps: int = DEFAULT_M_STEPS, n_boot: int = 1000, seed: int = 0,
                  aggregate_picks: bool = False, cache: ScoreCache | None = None) -> EffectReport:
    if filter_correctly_classified:
        triples = filter_correct(model, triples)
    report = EffectReport(name, filter_correctly_classified)
    cache = cache or ScoreCache(model, m_steps)
    for analysis in analyses:
        chosen = select(triples, analysis)
        report.n_triples[analysis] = len(chosen)
        if not chosen:
            continue
        report.miate[analysis] = miate(model, chosen, analysis, n_boot, seed, aggregate_picks)
        report.midas[analysis] = {
            v: midas(model, chosen, analysis, v, m_steps, n_boot, seed, aggregate_picks, cache) for v in variants
        }
    return report


def write_reports(reports: Sequence[EffectReport], csv_path: str | Path, json_path: str | Path | None = None) -> None:
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(r.rows())
    if json_path is not None:
        Path(json_path).write_text(json.dumps([r.to_json() for r in reports], indent=1, sort_keys=True) + "\n")


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
