"""Synthetic memes whose label is the AND of a text signal and an image signal.

The generating graph is ``text_signal -> label <- image_signal``: neither
modality alone makes a sample hateful. Hateful samples come in groups with
benign confounders that flip exactly one modality while copying the other
verbatim, and missing confounders can be crafted by borrowing the absent
modality from an unrelated benign sample.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ORIGINAL = "original"
PICKED = "picked"


class GenConfigError(ValueError):
    pass


class InsufficientPoolError(ValueError):
    def __init__(self, modality: str, needed: int, available: int):
        super().__init__(f"{modality} pool has {available} candidates, {needed} needed")
        self.modality = modality


@dataclass(frozen=True)
class MemeSample:
    id: str
    tokens: tuple[int, ...]
    regions: tuple[tuple[float, ...], ...]
    t_signal: bool
    i_signal: bool
    label: int
    group_id: str | None = None

    def __post_init__(self):
        if self.label != int(self.t_signal and self.i_signal):
            raise ValueError(f"{self.id}: label {self.label} contradicts signals ({self.t_signal}, {self.i_signal})")
        if not self.tokens or not self.regions:
            raise ValueError(f"{self.id}: tokens and regions must be non-empty")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["tokens"] = list(self.tokens)
        rec["regions"] = [list(r) for r in self.regions]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "MemeSample":
        return cls(
            id=rec["id"],
            tokens=tuple(int(t) for t in rec["tokens"]),
            regions=tuple(tuple(float(x) for x in r) for r in rec["regions"]),
            t_signal=bool(rec["t_signal"]),
            i_signal=bool(rec["i_signal"]),
            label=int(rec["label"]),
            group_id=rec.get("group_id"),
        )


@dataclass(frozen=True)
class ConfounderPair:
    """A hateful sample and its original benign confounder in one modality."""

    hateful: MemeSample
    benign: MemeSample
    kind: str  # "text_benign" or "image_benign"


@dataclass(frozen=True)
class ConfounderTriple:
    hateful: MemeSample
    text_benign: MemeSample  # (T0, I1)
    image_benign: MemeSample  # (T1, I0)
    text_benign_provenance: str
    image_benign_provenance: str

    def analyses(self) -> tuple[str, ...]:
        """Analysis types this triple serves: ``image`` needs an original image confounder."""
        out = []
        if self.image_benign_provenance == ORIGINAL:
            out.append("image")
        if self.text_benign_provenance == ORIGINAL:
            out.append("text")
        return tuple(out)

    def members(self) -> tuple[MemeSample, MemeSample, MemeSample]:
        return (self.hateful, self.image_benign, self.text_benign)


@dataclass(frozen=True)
class GenConfig:
    """Counts and geometry of a synthetic dataset.

    Group counts produce hateful samples with their confounders; the
    ``extra_*`` counts add ungrouped samples for the named (t, i) cell.
    """

    text_groups: int = 0  # hateful + text-benign confounder
    image_groups: int = 0  # hateful + image-benign confounder
    both_groups: int = 0  # hateful + both confounders
    extra_11: int = 0
    extra_10: int = 0
    extra_01: int = 0
    extra_00: int = 0
    n_tokens: int = 6
    n_regions: int = 4
    region_dim: int = 16
    signal_vocab: tuple[int, ...] = tuple(range(0, 8))
    noise_vocab: tuple[int, ...] = tuple(range(8, 64))
    max_signal_tokens: int = 2
    max_signal_regions: int = 2
    noise_std: float = 0.5
    center_distance: float = 4.0
    seed: int = 0  # draws of individual samples
    world_seed: int = 0  # cluster geometry; datasets meant to be compared must share it
    id_prefix: str = "s"

    def validate(self) -> None:
        problems = []
        if not self.signal_vocab:
            problems.append("signal_vocab is empty")
        if not self.noise_vocab:
            problems.append("noise_vocab is empty")
        if set(self.signal_vocab) & set(self.noise_vocab):
            problems.append("signal_vocab and noise_vocab overlap")
        if not self.id_prefix or any(c in self.id_prefix for c in "+:"):
            problems.append("id_prefix must be non-empty and free of '+' and ':'")
        if self.center_distance < 4 * self.noise_std:
            problems.append(f"center_distance {self.center_distance} < 4 x noise_std {self.noise_std}")
        for name in ("n_tokens", "n_regions", "region_dim", "max_signal_tokens", "max_signal_regions"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.max_signal_tokens > self.n_tokens:
            problems.append("max_signal_tokens exceeds n_tokens")
        if self.max_signal_regions > self.n_regions:
            problems.append("max_signal_regions exceeds n_regions")
        for name in ("text_groups", "image_groups", "both_groups", "extra_11", "extra_10", "extra_01", "extra_00"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if problems:
            raise GenConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for key in ("signal_vocab", "noise_vocab"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class _Sampler:
    cfg: GenConfig
    rng: np.random.Generator
    benign_center: np.ndarray = field(init=False)
    signal_center: np.ndarray = field(init=False)

    def __post_init__(self):
        dim = self.cfg.region_dim
        world = np.random.default_rng(self.cfg.world_seed)
        self.benign_center = world.normal(size=dim)
        direction = world.normal(size=dim)
        direction /= np.linalg.norm(direction)
        self.signal_center = self.benign_center + self.cfg.center_distance * direction

    def noise_tokens(self, n: int) -> list[int]:
        return [int(t) for t in self.rng.choice(self.cfg.noise_vocab, size=n)]

    def text(self, signal: bool) -> list[int]:
        tokens = self.noise_tokens(self.cfg.n_tokens)
        if signal:
            k = int(self.rng.integers(1, self.cfg.max_signal_tokens + 1))
            for pos in self.rng.choice(self.cfg.n_tokens, size=k, replace=False):
                tokens[int(pos)] = int(self.rng.choice(self.cfg.signal_vocab))
        return tokens

    def region(self, signal: bool) -> list[float]:
        center = self.signal_center if signal else self.benign_center
        return list(center + self.rng.normal(scale=self.cfg.noise_std, size=self.cfg.region_dim))

    def image(self, signal: bool) -> list[list[float]]:
        regions = [self.region(False) for _ in range(self.cfg.n_regions)]
        if signal:
            k = int(self.rng.integers(1, self.cfg.max_signal_regions + 1))
            for pos in self.rng.choice(self.cfg.n_regions, size=k, replace=False):
                regions[int(pos)] = self.region(True)
        return regions

    def defuse_text(self, tokens: Sequence[int]) -> list[int]:
        """Replace every signal token with a noise token; the rest is kept."""
        signal = set(self.cfg.signal_vocab)
        return [self.noise_tokens(1)[0] if t in signal else t for t in tokens]

    def defuse_image(self, regions: Sequence[Sequence[float]]) -> list[list[float]]:
        """Redraw regions closer to the signal center than the benign one."""
        out = []
        for r in regions:
            r = np.asarray(r)
            if np.linalg.norm(r - self.signal_center) < np.linalg.norm(r - self.benign_center):
                out.append(self.region(False))
            else:
                out.append(list(r))
        return out


def make_sample(sample_id: str, tokens, regions, t: bool, i: bool, group_id: str | None = None) -> MemeSample:
    return MemeSample(
        id=sample_id,
        tokens=tuple(int(x) for x in tokens),
        regions=tuple(tuple(float(x) for x in r) for r in regions),
        t_signal=bool(t),
        i_signal=bool(i),
        label=int(bool(t) and bool(i)),
        group_id=group_id,
    )


def generate(cfg: GenConfig) -> list[MemeSample]:
    """Deterministic dataset for ``cfg``; groups first, then the extra cells."""
    cfg.validate()
    sampler = _Sampler(cfg, np.random.default_rng(cfg.seed))
    samples: list[MemeSample] = []

    def new(tokens, regions, t, i, group=None):
        s = make_sample(f"{cfg.id_prefix}{len(samples):05d}", tokens, regions, t, i, group)
        samples.append(s)
        return s

    group_index = 0
    for kinds in [("text",)] * cfg.text_groups + [("image",)] * cfg.image_groups + [("text", "image")] * cfg.both_groups:
        gid = f"{cfg.id_prefix}g{group_index:04d}"
        group_index += 1
        tokens, regions = sampler.text(True), sampler.image(True)
        new(tokens, regions, True, True, gid)
        if "text" in kinds:
            new(sampler.defuse_text(tokens), regions, False, True, gid)
        if "image" in kinds:
            new(tokens, sampler.defuse_image(regions), True, False, gid)

    for (t, i), count in (((1, 1), cfg.extra_11), ((1, 0), cfg.extra_10), ((0, 1), cfg.extra_01), ((0, 0), cfg.extra_00)):
        for _ in range(count):
            new(sampler.text(bool(t)), sampler.image(bool(i)), bool(t), bool(i))
    return samples


def extract_confounders(dataset: Iterable[MemeSample]) -> tuple[list[ConfounderPair], list[ConfounderPair]]:
    """(text_benign_pairs, image_benign_pairs), matched on group id."""
    groups: dict[str, list[MemeSample]] = {}
    for s in dataset:
        if s.group_id is not None:
            groups.setdefault(s.group_id, []).append(s)
    text_pairs, image_pairs = [], []
    for gid in sorted(groups):
        members = groups[gid]
        hateful = [s for s in members if s.label == 1]
        if len(hateful) != 1:
            continue
        h = hateful[0]
        for s in members:
            if s is h:
                continue
            if not s.t_signal and s.i_signal:
                text_pairs.append(ConfounderPair(h, s, "text_benign"))
            elif s.t_signal and not s.i_signal:
                image_pairs.append(ConfounderPair(h, s, "image_benign"))
    return text_pairs, image_pairs


def picked_id(hateful: MemeSample, source: MemeSample, modality: str) -> str:
    return f"{hateful.id}+{modality}:{source.id}"


def craft(hateful: MemeSample, source: MemeSample, modality: str) -> MemeSample:
    """Hateful sample with its ``modality`` ("text" or "image") taken from ``source``."""
    if modality == "text":
        return make_sample(picked_id(hateful, source, "text"), source.tokens, hateful.regions,
                           False, True, hateful.group_id)
    if modality == "image":
        return make_sample(picked_id(hateful, source, "image"), hateful.tokens, source.regions,
                           True, False, hateful.group_id)
    raise ValueError(f"unknown modality {modality!r}")


def original_triples(dataset: Iterable[MemeSample]) -> list[ConfounderTriple]:
    """Triples for groups that already carry both original confounders."""
    text_pairs, image_pairs = extract_confounders(dataset)
    image_by_id = {p.hateful.id: p.benign for p in image_pairs}
    return [
        ConfounderTriple(p.hateful, p.benign, image_by_id[p.hateful.id], ORIGINAL, ORIGINAL)
        for p in text_pairs
        if p.hateful.id in image_by_id
    ]


def pick_missing(pairs: Iterable[ConfounderPair], benign_pool: Iterable[MemeSample], k: int = 3,
                 seed: int = 0) -> list[ConfounderTriple]:
    """Complete each pair into ``k`` triples with distinct borrowed confounders.

    A text-benign pair lacks an image confounder, so the image is borrowed
    from a pool sample without the image signal, and vice versa. Pool
    samples from the pair's own group are never used.
    """
    pairs = list(pairs)
    pool = [s for s in benign_pool if s.label == 0]
    if k <= 0 or not pairs:
        return []
    rng = np.random.default_rng(seed)
    triples = []
    for pair in pairs:
        h = pair.hateful

        def unrelated(s):
            return h.group_id is None or s.group_id != h.group_id

        if pair.kind == "text_benign":
            modality = "image"
            candidates = [s for s in pool if not s.i_signal and unrelated(s)]
        elif pair.kind == "image_benign":
            modality = "text"
            candidates = [s for s in pool if not s.t_signal and unrelated(s)]
        else:
            raise ValueError(f"unknown pair kind {pair.kind!r}")
        if len(candidates) < k:
            raise InsufficientPoolError(modality, k, len(candidates))
        for j in rng.choice(len(candidates), size=k, replace=False):
            crafted = craft(h, candidates[int(j)], modality)
            if modality == "image":
                triples.append(ConfounderTriple(h, pair.benign, crafted, ORIGINAL, PICKED))
            else:
                triples.append(ConfounderTriple(h, crafted, pair.benign, PICKED, ORIGINAL))
    return triples


def build_triples(dataset: Sequence[MemeSample], k: int = 3, seed: int = 0) -> list[ConfounderTriple]:
    """All analysable triples: original-complete groups plus ``k`` picks per one-sided pair."""
    text_pairs, image_pairs = extract_confounders(dataset)
    complete = original_triples(dataset)
    done = {t.hateful.id for t in complete}
    one_sided = [p for p in image_pairs + text_pairs if p.hateful.id not in done]
    return complete + pick_missing(one_sided, dataset, k=k, seed=seed)


# -------------------------------------------------------------------- I/O


def save_dataset(samples: Iterable[MemeSample], path: str | Path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def load_dataset(path: str | Path) -> list[MemeSample]:
    path = Path(path)
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(MemeSample.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad sample record: {exc}") from exc
    return out


def _member_record(sample: MemeSample, provenance: str) -> dict:
    if provenance == ORIGINAL:
        return {"id": sample.id, "provenance": ORIGINAL}
    hateful_id, _, rest = sample.id.partition("+")
    modality, _, source = rest.partition(":")
    return {"id": sample.id, "provenance": PICKED, "hateful": hateful_id, "modality": modality, "source": source}


def save_triples(triples: Iterable[ConfounderTriple], path: str | Path) -> None:
    with open(path, "w") as f:
        for t in triples:
            rec = {
                "hateful": t.hateful.id,
                "text_benign": _member_record(t.text_benign, t.text_benign_provenance),
                "image_benign": _member_record(t.image_benign, t.image_benign_provenance),
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_triples(path: str | Path, dataset: Iterable[MemeSample]) -> list[ConfounderTriple]:
    """Rebuild triples from ids; picked members are re-crafted from their source."""
    by_id = {s.id: s for s in dataset}
    path = Path(path)

    def member(rec: dict) -> MemeSample:
        if rec["provenance"] == ORIGINAL:
            return by_id[rec["id"]]
        return craft(by_id[rec["hateful"]], by_id[rec["source"]], rec["modality"])

    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(ConfounderTriple(
                    by_id[rec["hateful"]],
                    member(rec["text_benign"]),
                    member(rec["image_benign"]),
                    rec["text_benign"]["provenance"],
                    rec["image_benign"]["provenance"],
                ))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad triple record: {exc}") from exc
    return out


def split(samples: Sequence[MemeSample], holdout: float, seed: int) -> tuple[list[MemeSample], list[MemeSample]]:
    """Seeded random (train, held-out) split."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_hold = int(round(holdout * len(samples)))
    hold = {int(i) for i in order[:n_hold]}
    train = [s for i, s in enumerate(samples) if i not in hold]
    held = [s for i, s in enumerate(samples) if i in hold]
    return train, held


def with_regions(sample: MemeSample, regions) -> MemeSample:
    return replace(sample, regions=tuple(tuple(float(x) for x in r) for r in regions))
