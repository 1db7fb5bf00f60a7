"""Toy multimodal transformer encoder over ``[start, text..., sep, regions...]``.

Pre-norm blocks, learned positions for text only (regions form a set), and a
two-way classification head on the mean of the final hidden states. Every head's
attention matrix is a graph node; the last layer's can be replaced by
caller-supplied values, which is how attention attribution evaluates F(aA).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor

CHECKPOINT_FORMAT = "midaslab-checkpoint"
CHECKPOINT_VERSION = 1

HATEFUL = 1


class ConfigError(ValueError):
    pass


class CapacityError(ValueError):
    """Sample does not fit the model's sequence capacity."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = 64
    region_dim: int = 16
    max_text: int = 16
    max_regions: int = 8
    d_ff: int = 64
    seed: int = 0

    def __post_init__(self):
        problems = [
            f"{name} must be >= 1"
            for name in ("d_model", "n_heads", "n_layers", "vocab_size", "region_dim", "max_text", "max_regions", "d_ff")
            if getattr(self, name) < 1
        ]
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class SequenceLayout:
    """Positions of ``[start, text..., sep, regions...]``."""

    n_text: int
    n_regions: int

    @property
    def start(self) -> int:
        return 0

    @property
    def text(self) -> range:
        return range(1, 1 + self.n_text)

    @property
    def sep(self) -> int:
        return 1 + self.n_text

    @property
    def image(self) -> range:
        return range(2 + self.n_text, 2 + self.n_text + self.n_regions)

    @property
    def length(self) -> int:
        return self.n_text + self.n_regions + 2

    @property
    def markers(self) -> tuple[int, int]:
        return (self.start, self.sep)


@dataclass
class ForwardResult:
    logits: np.ndarray  # (2,)
    attention: list[np.ndarray]  # per layer, (H, S, S)
    layout: SequenceLayout


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_text, d),
        "start_emb": (d,),
        "sep_emb": (d,),
        "img_proj": (cfg.region_dim, d),
        "img_bias": (d,),
    }
    for layer in range(cfg.n_layers):
        p = f"l{layer}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, cfg.d_ff), p + "b1": (cfg.d_ff,),
            p + "w2": (cfg.d_ff, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_cls": (d, 2), "b_cls": (2,)})
    return shapes


def _stack(samples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.array([list(s.tokens) for s in samples], dtype=np.int64)
    regions = np.array([np.asarray(s.regions, dtype=np.float64) for s in samples])
    return tokens, regions


def group_by_layout(samples: Sequence) -> dict[tuple[int, int], list[int]]:
    """Indices of ``samples`` bucketed by (n_tokens, n_regions)."""
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(samples):
        buckets.setdefault((len(s.tokens), len(s.regions)), []).append(i)
    return buckets


class MultimodalTransformer:
    """Immutable parameter snapshot plus the forward computations over it."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = _param_shapes(config)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if tuple(np.shape(params[name])) != shape:
                raise ConfigError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")
        self.config = config
        self.params = {name: np.array(params[name], dtype=np.float64) for name in expected}

    @classmethod
    def init(cls, config: ModelConfig) -> "MultimodalTransformer":
        """Xavier-uniform weights, unit LayerNorm gains, zero biases."""
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in _param_shapes(config).items():
            short = name.split(".")[-1]
            if short.endswith("_g"):
                params[name] = np.ones(shape)
            elif short.startswith("b") or short.endswith("_b") or short == "img_bias":
                params[name] = np.zeros(shape)
            else:
                fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (1, shape[0])
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-limit, limit, size=shape)
        return cls(config, params)

    def with_params(self, params: dict[str, np.ndarray]) -> "MultimodalTransformer":
        return MultimodalTransformer(self.config, params)

    # ------------------------------------------------------------ plumbing

    def layout(self, sample) -> SequenceLayout:
        n_text, n_regions = len(sample.tokens), len(sample.regions)
        cfg = self.config
        if not 1 <= n_text <= cfg.max_text:
            raise CapacityError(f"sample has {n_text} tokens; model accepts 1..{cfg.max_text}")
        if not 1 <= n_regions <= cfg.max_regions:
            raise CapacityError(f"sample has {n_regions} regions; model accepts 1..{cfg.max_regions}")
        return SequenceLayout(n_text, n_regions)

    def _check_batch(self, tokens: np.ndarray, regions: np.ndarray) -> SequenceLayout:
        cfg = self.config
        if tokens.shape[1] > cfg.max_text:
            raise CapacityError(f"sample has {tokens.shape[1]} tokens; model accepts 1..{cfg.max_text}")
        if regions.shape[1] > cfg.max_regions:
            raise CapacityError(f"sample has {regions.shape[1]} regions; model accepts 1..{cfg.max_regions}")
        if regions.shape[2] != cfg.region_dim:
            raise CapacityError(f"region width {regions.shape[2]} != model region_dim {cfg.region_dim}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise CapacityError(f"token ids must lie in [0, {cfg.vocab_size})")
        return SequenceLayout(tokens.shape[1], regions.shape[1])

    def graph_params(self, g: Graph, trainable: bool = False) -> dict[str, Tensor]:
        return {name: g.tensor(v, requires_grad=trainable, name=name) for name, v in self.params.items()}

    def embed(self, g: Graph, P: dict[str, Tensor], tokens: np.ndarray, regions: np.ndarray) -> Tensor:
        batch, n_text = tokens.shape
        d = self.config.d_model
        text = ad.embedding_lookup(P["tok_emb"], tokens) + P["pos_emb"][:n_text]
        image = g.constant(regions) @ P["img_proj"] + P["img_bias"]
        zeros = np.zeros((batch, 1, d))
        start = ad.add(zeros, P["start_emb"])
        sep = ad.add(zeros, P["sep_emb"])
        return ad.concat([start, text, sep, image], axis=1)

    def block(self, g: Graph, P: dict[str, Tensor], layer: int, x: Tensor, attention: Sequence[Tensor] | None = None):
        """One pre-norm block. ``attention`` (per head, (B,S,S)) replaces the softmax weights."""
        p = f"l{layer}."
        cfg = self.config
        dh = cfg.d_head
        h = ad.layer_norm(x, P[p + "ln1_g"], P[p + "ln1_b"])
        q, k, v = h @ P[p + "wq"], h @ P[p + "wk"], h @ P[p + "wv"]
        heads, mixed = [], []
        for hh in range(cfg.n_heads):
            cols = (Ellipsis, slice(hh * dh, (hh + 1) * dh))
            if attention is None:
                a = ad.softmax_rows(q[cols] @ ad.transpose(k[cols]), scale=1.0 / math.sqrt(dh))
            else:
                a = attention[hh]
            heads.append(a)
            mixed.append(a @ v[cols])
        x = x + (ad.concat(mixed, axis=-1) @ P[p + "wo"] + P[p + "bo"])
        h2 = ad.layer_norm(x, P[p + "ln2_g"], P[p + "ln2_b"])
        x = x + (ad.gelu(h2 @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"])
        return x, heads

    def head(self, g: Graph, P: dict[str, Tensor], x: Tensor) -> Tensor:
        # mean-pool every position so each last-layer attention row reaches the output
        h = ad.layer_norm(x, P["lnf_g"], P["lnf_b"])
        return ad.reduce_mean(h, axis=1) @ P["w_cls"] + P["b_cls"]

    def run(self, g: Graph, P: dict[str, Tensor], tokens: np.ndarray, regions: np.ndarray,
            last_attention: Sequence[Tensor] | None = None):
        """Full pass; returns (logits (B,2), per-layer head attention nodes)."""
        self._check_batch(tokens, regions)
        x = self.embed(g, P, tokens, regions)
        stack = []
        last = self.config.n_layers - 1
        for layer in range(self.config.n_layers):
            x, heads = self.block(g, P, layer, x, last_attention if layer == last else None)
            stack.append(heads)
        return self.head(g, P, x), stack

    def _prefix(self, tokens: np.ndarray, regions: np.ndarray) -> np.ndarray:
        """Hidden state entering the last block, (B,S,d)."""
        g = Graph()
        P = self.graph_params(g)
        x = self.embed(g, P, tokens, regions)
        for layer in range(self.config.n_layers - 1):
            x, _ = self.block(g, P, layer, x)
        return x.values

    # ------------------------------------------------------------- inference

    def forward(self, sample) -> ForwardResult:
        layout = self.layout(sample)
        tokens, regions = _stack([sample])
        g = Graph()
        logits, stack = self.run(g, self.graph_params(g), tokens, regions)
        attention = [np.stack([a.values[0] for a in heads]) for heads in stack]
        return ForwardResult(logits.values[0].copy(), attention, layout)

    def predict_prob(self, sample) -> float:
        return float(prob_from_logits(self.forward(sample).logits))

    def predict_probs(self, samples: Sequence, batch_size: int = 256) -> np.ndarray:
        """Hateful probabilities, batched over samples sharing a layout."""
        out = np.empty(len(samples))
        for idx in group_by_layout(samples).values():
            for lo in range(0, len(idx), batch_size):
                chunk = idx[lo:lo + batch_size]
                for i in chunk:
                    self.layout(samples[i])
                tokens, regions = _stack([samples[i] for i in chunk])
                g = Graph()
                logits, _ = self.run(g, self.graph_params(g), tokens, regions)
                out[chunk] = prob_from_logits(logits.values)
        return out

    def last_attention(self, sample) -> np.ndarray:
        """Last-layer attention, (H, S, S)."""
        return self.forward(sample).attention[-1]

    def forward_with_attention_override(self, sample, alpha: float) -> np.ndarray:
        """Logits with the last layer's attention replaced by ``alpha * A``.

        ``A`` comes from an unmodified pass on the same sample; rows of the
        replacement sum to ``alpha``.
        """
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        A = self.last_attention(sample)
        return self.logits_with_attention(sample, alpha * A)

    def logits_with_attention(self, sample, attention: np.ndarray) -> np.ndarray:
        """Logits with the last layer's attention set to ``attention`` (H,S,S)."""
        layout = self.layout(sample)
        tokens, regions = _stack([sample])
        attention = np.asarray(attention, dtype=np.float64)
        expected = (self.config.n_heads, layout.length, layout.length)
        if attention.shape != expected:
            raise ValueError(f"attention override has shape {attention.shape}, expected {expected}")
        g = Graph()
        over = [g.tensor(attention[h][None], requires_grad=True) for h in range(self.config.n_heads)]
        logits, _ = self.run(g, self.graph_params(g), tokens, regions, last_attention=over)
        return logits.values[0].copy()

    def objective_with_attention(self, sample, attention: np.ndarray, objective: str = "margin"):
        """Evaluate F and dF/dA for a batch of last-layer attention stacks.

        ``attention`` is (B, H, S, S). ``objective`` is ``"margin"`` (hateful
        minus benign logit) or ``"prob"`` (hateful probability). Earlier
        layers are computed once and shared by every batch entry.
        Returns (values (B,), gradients (B, H, S, S)).
        """
        layout = self.layout(sample)
        tokens, regions = _stack([sample])
        self._check_batch(tokens, regions)
        attention = np.asarray(attention, dtype=np.float64)
        H, S = self.config.n_heads, layout.length
        if attention.ndim != 4 or attention.shape[1:] != (H, S, S):
            raise ValueError(f"attention batch has shape {attention.shape}, expected (B, {H}, {S}, {S})")
        batch = attention.shape[0]
        hidden = self._prefix(tokens, regions)
        g = Graph()
        P = self.graph_params(g)
        x = g.constant(np.broadcast_to(hidden, (batch,) + hidden.shape[1:]))
        over = [g.tensor(attention[:, h], requires_grad=True) for h in range(H)]
        x, _ = self.block(g, P, self.config.n_layers - 1, x, over)
        logits = self.head(g, P, x)
        if objective == "margin":
            values = logits[:, HATEFUL] - logits[:, 1 - HATEFUL]
        elif objective == "prob":
            values = ad.softmax_rows(logits)[:, HATEFUL]
        else:
            raise ValueError(f"unknown objective {objective!r}")
        g.backward(ad.reduce_sum(values))
        grads = np.stack([t.grad for t in over], axis=1)
        return values.values.copy(), grads

    # -------------------------------------------------------------- training

    def loss_and_grads(self, samples: Sequence, labels: Sequence[int] | None = None, regions_override=None):
        """Mean cross-entropy over samples sharing one layout, and its parameter gradients."""
        tokens, regions = _stack(samples)
        if regions_override is not None:
            regions = np.asarray(regions_override, dtype=np.float64)
        labels = np.array([s.label for s in samples] if labels is None else labels, dtype=np.int64)
        g = Graph()
        P = self.graph_params(g, trainable=True)
        logits, _ = self.run(g, P, tokens, regions)
        loss = ad.cross_entropy_with_logits(logits, labels)
        g.backward(loss)
        return float(loss.values), {name: t.grad for name, t in P.items()}


def prob_from_logits(logits: np.ndarray) -> np.ndarray:
    """Hateful-class softmax probability along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True))[..., HATEFUL]


# ------------------------------------------------------------ checkpoints


def save_checkpoint(model: MultimodalTransformer, path: str | Path) -> None:
    """Write config and parameters as JSON; floats use shortest round-trip repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": {
            name: {"shape": list(v.shape), "values": [float(x) for x in v.reshape(-1)]}
            for name, v in model.params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> MultimodalTransformer:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    config = ModelConfig(**doc["config"])
    params = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return MultimodalTransformer(config, params)


def accuracy(model: MultimodalTransformer, samples: Iterable) -> float:
    samples = list(samples)
    probs = model.predict_probs(samples)
    labels = np.array([s.label for s in samples])
    return float(np.mean((probs > 0.5) == (labels == HATEFUL)))
