"""In-context learning as implicit fine-tuning, and the meta-gradient feature pipeline.

With linear attention, the output on a frozen query ``q`` given context
columns ``X = [X_demo, X_zsl]`` splits into a zero-shot weight and a
demonstration-driven update::

    W_V X (W_K X)^T q = (W_ZSL + dW) q
    W_ZSL = W_V X_zsl (W_K X_zsl)^T,  dW = sum_i (W_V x_i)(W_K x_i)^T

The second half of the module turns attention weights into feature rows
(token-wise column sums for a zero-shot prompt and the few-shot delta) and
fits a small gradient-boosted tree ensemble whose split counts serve as
feature importance.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .attribution import INTERACTION_TYPES
from .trainer import DegenerateDataError

SUBTASKS = ("TTC", "IA", "LI")
WEIGHT_TYPES = ("W", "dW")
MARKER = "marker"


class TaskShapeError(ValueError):
    pass


# ----------------------------------------------------------------- dual form


@dataclass(frozen=True)
class LinearAttentionTask:
    """Columns of ``X_zsl`` and ``X_demo`` are context vectors of width d."""

    W_K: np.ndarray
    W_V: np.ndarray
    X_zsl: np.ndarray
    X_demo: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        for name in ("W_K", "W_V", "X_zsl", "X_demo", "q"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.q.shape[0] if self.q.ndim == 1 else None
        problems = []
        if d is None:
            problems.append(f"q must be a vector, got shape {self.q.shape}")
        else:
            for name in ("W_K", "W_V"):
                if getattr(self, name).shape != (d, d):
                    problems.append(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")
            for name in ("X_zsl", "X_demo"):
                X = getattr(self, name)
                if X.ndim != 2 or X.shape[0] != d:
                    problems.append(f"{name} must be ({d}, n), got {X.shape}")
        if problems:
            raise TaskShapeError("; ".join(problems))

    @property
    def d_model(self) -> int:
        return self.q.shape[0]

    @property
    def n_demos(self) -> int:
        return self.X_demo.shape[1]

    @property
    def W_zsl(self) -> np.ndarray:
        return self.W_V @ self.X_zsl @ (self.W_K @ self.X_zsl).T

    @property
    def delta_W(self) -> np.ndarray:
        dW = np.zeros((self.d_model, self.d_model))
        for x in self.X_demo.T:
            dW += np.outer(self.W_V @ x, self.W_K @ x)
        return dW

    @classmethod
    def random(cls, d: int, n_zsl: int, n_demo: int, rng: np.random.Generator) -> "LinearAttentionTask":
        return cls(rng.normal(size=(d, d)), rng.normal(size=(d, d)), rng.normal(size=(d, n_zsl)),
                   rng.normal(size=(d, n_demo)), rng.normal(size=d))


def forward_icl(task: LinearAttentionTask) -> np.ndarray:
    """Linear attention over the concatenated context, query held fixed."""
    X = np.concatenate([task.X_demo, task.X_zsl], axis=1)
    return task.W_V @ X @ ((task.W_K @ X).T @ task.q)


def forward_dual(task: LinearAttentionTask) -> np.ndarray:
    return (task.W_zsl + task.delta_W) @ task.q


def forward_zsl(task: LinearAttentionTask) -> np.ndarray:
    return task.W_zsl @ task.q


def subtask_compose(q, weights: Mapping[str, tuple]) -> np.ndarray:
    """Sum of ``(W + dW) q`` over the TTC, IA and LI subtasks."""
    if set(weights) != set(SUBTASKS) or len(weights) != len(SUBTASKS):
        raise ValueError(f"expected exactly the subtasks {SUBTASKS}, got {sorted(weights)}")
    q = np.asarray(q, dtype=np.float64)
    out = np.zeros_like(q)
    for name in SUBTASKS:
        W, dW = (np.asarray(x, dtype=np.float64) for x in weights[name])
        if W.shape != (q.shape[0], q.shape[0]) or dW.shape != W.shape:
            raise TaskShapeError(f"subtask {name}: weights must be ({q.shape[0]}, {q.shape[0]})")
        out = out + (W + dW) @ q
    return out


# -------------------------------------------------------------- feature rows


@dataclass(frozen=True)
class MetaFeatureRow:
    features: np.ndarray  # [W part | dW part], 2 * n_tokens
    weight_types: tuple[str, ...]
    interaction_tags: tuple[str, ...]
    subtask: str
    target: int

    @property
    def n_tokens(self) -> int:
        return len(self.features) // 2


def column_sums(attention) -> np.ndarray:
    """Total attention each key position receives, summed over all leading axes."""
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise TaskShapeError(f"attention must end in a square (S, S) block, got {a.shape}")
    return a.reshape(-1, a.shape[-1]).sum(axis=0)


def interaction_tags(attention, modality: Sequence[str]) -> tuple[str, ...]:
    """Tag each key position by where its attention mass comes from.

    A text or image position is ``within_<modality>`` when the mass it
    receives from same-modality queries is at least the mass from the other
    modality, else ``cross_modal``. Marker positions are tagged ``marker``.
    """
    a = np.asarray(attention, dtype=np.float64)
    a = a.reshape(-1, a.shape[-2], a.shape[-1]).sum(axis=0)
    modality = np.asarray(modality)
    if modality.shape != (a.shape[-1],):
        raise TaskShapeError(f"modality labels ({modality.shape[0]}) do not match {a.shape[-1]} tokens")
    tags = []
    for j, mod in enumerate(modality):
        if mod not in ("text", "image"):
            tags.append(MARKER)
            continue
        other = "image" if mod == "text" else "text"
        same = a[modality == mod, j].sum()
        cross = a[modality == other, j].sum()
        tags.append(f"within_{mod}" if same >= cross else "cross_modal")
    return tuple(tags)


def meta_features(zsl_attention, fewshot_attention, mask, tags: Sequence[str] | None = None,
                  subtask: str = "LI", target: int = 0, pad_to: int | None = None) -> MetaFeatureRow:
    """Feature row from zero-shot and few-shot attention over the same n tokens.

    ``mask`` is True at positions to drop (prompt scaffolding); they
    contribute zeros. ``pad_to`` appends zero tokens so that rows from
    prompts of different lengths line up.
    """
    zs = column_sums(zsl_attention)
    fs = column_sums(fewshot_attention)
    mask = np.asarray(mask, dtype=bool)
    n = zs.shape[0]
    if fs.shape[0] != n or mask.shape != (n,):
        raise TaskShapeError(f"token counts disagree: zero-shot {n}, few-shot {fs.shape[0]}, mask {mask.shape}")
    if subtask not in SUBTASKS:
        raise ValueError(f"subtask must be one of {SUBTASKS}")
    tags = tuple(tags) if tags is not None else (MARKER,) * n
    if len(tags) != n:
        raise TaskShapeError(f"{len(tags)} tags for {n} tokens")
    zs = np.where(mask, 0.0, zs)
    delta = np.where(mask, 0.0, fs) - zs
    width = n if pad_to is None else pad_to
    if width < n:
        raise TaskShapeError(f"cannot pad {n} tokens to {width}")
    pad = width - n
    features = np.concatenate([zs, np.zeros(pad), delta, np.zeros(pad)])
    all_tags = tags + (MARKER,) * pad
    return MetaFeatureRow(features, ("W",) * width + ("dW",) * width, all_tags * 2, subtask, int(target))


def separable_rows(n_rows: int, n_tokens: int = 8, seed: int = 0, subtask: str = "LI") -> list[MetaFeatureRow]:
    """Rows where feature 0 alone decides the class; the rest is noise."""
    rng = np.random.default_rng(seed)
    y = np.arange(n_rows) % 2
    rng.shuffle(y)
    X = rng.normal(size=(n_rows, 2 * n_tokens))
    X[:, 0] = np.where(y == 1, 1.0, -1.0) + rng.uniform(0, 1, size=n_rows) * np.where(y == 1, 1, -1)
    return _rows(X, y, n_tokens, subtask)


def null_rows(n_rows: int, n_tokens: int = 8, seed: int = 0, subtask: str = "LI") -> list[MetaFeatureRow]:
    """The separable design with targets permuted, so labels carry no signal."""
    rows = separable_rows(n_rows, n_tokens, seed, subtask)
    y = np.random.default_rng([seed, 1]).permutation([r.target for r in rows])
    return [MetaFeatureRow(r.features, r.weight_types, r.interaction_tags, r.subtask, int(t)) for r, t in zip(rows, y)]


def _rows(X, y, n_tokens, subtask):
    tags = tuple(INTERACTION_TYPES[i % 3] for i in range(n_tokens)) * 2
    types = ("W",) * n_tokens + ("dW",) * n_tokens
    return [MetaFeatureRow(x, types, tags, subtask, int(t)) for x, t in zip(X, y)]


def toy_rows(model, queries: Sequence, demos: Sequence, subtask: str = "LI") -> list[MetaFeatureRow]:
    """Feature rows from the toy transformer's last-layer attention.

    The zero-shot prompt is the query alone; the few-shot prompt prepends
    one demonstration's tokens and regions. Features cover the query's own
    positions (start, text, separator, regions) in both prompts, with the
    two marker positions masked. The target is the query's label.
    """
    from .synth import MemeSample  # local import keeps icl usable without the generator

    rows = []
    for i, query in enumerate(queries):
        demo = demos[i % len(demos)]
        prompt = MemeSample(f"{query.id}|{demo.id}", tuple(demo.tokens) + tuple(query.tokens),
                            tuple(demo.regions) + tuple(query.regions), query.t_signal, query.i_signal,
                            query.label, None)
        zs_layout, fs_layout = model.layout(query), model.layout(prompt)
        nd_t, nd_r = len(demo.tokens), len(demo.regions)
        keep = ([fs_layout.start] + [fs_layout.text[nd_t + j] for j in range(zs_layout.n_text)]
                + [fs_layout.sep] + [fs_layout.image[nd_r + j] for j in range(zs_layout.n_regions)])
        zs_attn = model.last_attention(query)
        fs_attn = model.last_attention(prompt)[..., keep][..., keep, :]
        modality = ([MARKER] + ["text"] * zs_layout.n_text + [MARKER] + ["image"] * zs_layout.n_regions)
        mask = np.array([m == MARKER for m in modality])
        tags = interaction_tags(zs_attn, modality)
        rows.append(meta_features(zs_attn, fs_attn, mask, tags, subtask, query.label))
    return harmonize_tags(rows)


def harmonize_tags(rows: Sequence[MetaFeatureRow]) -> list[MetaFeatureRow]:
    """Give every row the per-feature majority tag so grouping is well defined."""
    if not rows:
        return []
    width = len(rows[0].features)
    order = INTERACTION_TYPES + (MARKER,)
    tags = []
    for j in range(width):
        counts = Counter(r.interaction_tags[j] for r in rows)
        tags.append(max(order, key=lambda t: (counts.get(t, 0), -order.index(t))))
    tags = tuple(tags)
    return [MetaFeatureRow(r.features, r.weight_types, tags, r.subtask, r.target) for r in rows]


# ------------------------------------------------------------- tree ensemble


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.is_leaf:
            return np.full(X.shape[0], self.value)
        go_left = X[:, self.feature] <= self.threshold
        out = np.empty(X.shape[0])
        out[go_left] = self.left.predict(X[go_left])
        out[~go_left] = self.right.predict(X[~go_left])
        return out

    def internal_nodes(self):
        if not self.is_leaf:
            yield self
            yield from self.left.internal_nodes()
            yield from self.right.internal_nodes()

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())


@dataclass(frozen=True)
class BoostConfig:
    max_depth: int = 3
    learning_rate: float = 0.1
    max_rounds: int = 200
    patience: int = 10
    reg_lambda: float = 1.0
    min_gain: float = 1e-12
    min_child_hessian: float = 1e-3


@dataclass
class TreeEnsembleModel:
    trees: list[TreeNode]
    base_score: float
    learning_rate: float
    n_features: int
    importance: dict[int, int] = field(default_factory=dict)  # feature -> split-node count
    split: dict[str, list[int]] = field(default_factory=dict)  # train / valid / test row indices
    valid_curve: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def enumerate_importance(self) -> dict[int, int]:
        """Split counts found by walking every tree (independent of training bookkeeping)."""
        counts = Counter(node.feature for t in self.trees for node in t.internal_nodes())
        return dict(sorted(counts.items()))


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def _log_loss(y, p):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def _grow(X, g, h, depth, cfg: BoostConfig) -> TreeNode:
    G, H = g.sum(), h.sum()
    leaf = TreeNode(value=-G / (H + cfg.reg_lambda))
    if depth >= cfg.max_depth or X.shape[0] < 2:
        return leaf
    parent = G * G / (H + cfg.reg_lambda)
    best = (cfg.min_gain, None, None)
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        gl, hl = np.cumsum(g[order])[:-1], np.cumsum(h[order])[:-1]
        gr, hr = G - gl, H - hl
        valid = (xs[1:] > xs[:-1]) & (hl >= cfg.min_child_hessian) & (hr >= cfg.min_child_hessian)
        if not valid.any():
            continue
        gain = gl**2 / (hl + cfg.reg_lambda) + gr**2 / (hr + cfg.reg_lambda) - parent
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best[0]:
            best = (gain[k], f, 0.5 * (xs[k] + xs[k + 1]))
    _, f, thr = best
    if f is None:
        return leaf
    go_left = X[:, f] <= thr
    return TreeNode(f, float(thr), _grow(X[go_left], g[go_left], h[go_left], depth + 1, cfg),
                    _grow(X[~go_left], g[~go_left], h[~go_left], depth + 1, cfg))


def split_indices(n: int, seed: int = 0, fractions=(0.56, 0.14, 0.30)) -> dict[str, list[int]]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return {
        "train": sorted(perm[:n_train].tolist()),
        "valid": sorted(perm[n_train:n_train + n_valid].tolist()),
        "test": sorted(perm[n_train + n_valid:].tolist()),
    }


def fit_boosted(X_train, y_train, X_valid=None, y_valid=None, cfg: BoostConfig = BoostConfig()) -> TreeEnsembleModel:
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    rate = np.clip(y_train.mean(), 1e-6, 1 - 1e-6)
    model = TreeEnsembleModel([], math.log(rate / (1 - rate)), cfg.learning_rate, X_train.shape[1])
    f_train = np.full(len(y_train), model.base_score)
    f_valid = None if X_valid is None else np.full(len(y_valid), model.base_score)
    best_loss, best_rounds, stale = math.inf, 0, 0
    for _ in range(cfg.max_rounds):
        p = _sigmoid(f_train)
        tree = _grow(X_train, p - y_train, p * (1 - p), 0, cfg)
        model.trees.append(tree)
        f_train += cfg.learning_rate * tree.predict(X_train)
        if f_valid is None:
            continue
        f_valid += cfg.learning_rate * tree.predict(np.asarray(X_valid, dtype=np.float64))
        loss = _log_loss(np.asarray(y_valid), _sigmoid(f_valid))
        model.valid_curve.append(loss)
        if loss < best_loss - 1e-12:
            best_loss, best_rounds, stale = loss, len(model.trees), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if f_valid is not None:
        model.trees = model.trees[:best_rounds]
    counts = Counter()
    for t in model.trees:
        counts.update(node.feature for node in t.internal_nodes())
    model.importance = dict(sorted(counts.items()))
    return model


def auc(scores, targets) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(targets).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class ImportanceTable:
    """Rows of (grouping, group, n_features, n_occurrences)."""

    rows: tuple[tuple[str, str, int, int], ...]

    def group(self, grouping: str) -> dict[str, tuple[int, int]]:
        return {g: (nf, no) for kind, g, nf, no in self.rows if kind == grouping}


def importance_table(importance: Mapping[int, int], weight_types: Sequence[str], tags: Sequence[str]) -> ImportanceTable:
    rows = []
    for grouping, labels, names in (("weight_type", weight_types, WEIGHT_TYPES),
                                    ("interaction_type", tags, INTERACTION_TYPES + (MARKER,))):
        for name in names:
            feats = [f for f in importance if labels[f] == name]
            if grouping == "interaction_type" and name == MARKER and not feats:
                continue
            rows.append((grouping, name, len(feats), sum(importance[f] for f in feats)))
    return ImportanceTable(tuple(rows))


@dataclass
class EnsembleResult:
    model: TreeEnsembleModel
    test_auc: float
    importance: ImportanceTable


def train_tree_ensemble(rows: Sequence[MetaFeatureRow], targets: Sequence[int] | None = None, seed: int = 0,
                        cfg: BoostConfig = BoostConfig()) -> EnsembleResult:
    """56/14/30 split, boosted trees with early stopping, test AUC and grouped importance."""
    if len(rows) < 10:
        raise DegenerateDataError(f"need at least 10 rows, got {len(rows)}")
    X = np.stack([r.features for r in rows])
    y = np.asarray([r.target for r in rows] if targets is None else targets, dtype=np.float64)
    parts = split_indices(len(rows), seed)
    tr, va, te = (np.asarray(parts[k], dtype=int) for k in ("train", "valid", "test"))
    if len(set(y[tr].tolist())) < 2:
        raise DegenerateDataError("training split contains a single class")
    model = fit_boosted(X[tr], y[tr], X[va] if len(va) else None, y[va] if len(va) else None, cfg)
    model.split = parts
    try:
        test_auc = auc(model.decision_function(X[te]), y[te])
    except ValueError:
        test_auc = float("nan")
    table = importance_table(model.importance, rows[0].weight_types, rows[0].interaction_tags)
    return EnsembleResult(model, test_auc, table)


# ------------------------------------------------------------------------ io


def save_rows(rows: Sequence[MetaFeatureRow], path: str | Path) -> None:
    width = len(rows[0].features) if rows else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subtask", "target"] + [f"{rows[0].weight_types[j]}:{j}" for j in range(width)])
        for r in rows:
            w.writerow([r.subtask, r.target] + [repr(float(x)) for x in r.features])


def save_importance(table: ImportanceTable, path: str | Path, label: str = "") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["experiment", "grouping", "group", "n_features", "n_occurrences"])
        for row in table.rows:
            w.writerow([label, *row])
