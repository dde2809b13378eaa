"""Encoder-only transformer text classifier built on :mod:`tagleak.autodiff`.

Weights are applied as ``x @ W + b`` (input features along rows of ``W``).
The model is evaluated either from token ids or from continuous token
embeddings; the latter is the path the gradient attack optimizes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from tagleak import autodiff as ad
from tagleak.autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 1
    hidden: int = 8
    num_heads: int = 1
    filter_size: int = 16
    vocab_size: int = 16
    max_seq_len: int = 8
    num_classes: int = 2
    layer_norm_eps: float = 1e-12
    embedding_norm: bool = False  # BERT-style layer norm after the position add
    pooling: str = "first"  # first | mean

    def __post_init__(self):
        for name in ("num_layers", "hidden", "num_heads", "filter_size", "vocab_size", "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.num_heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by num_heads={self.num_heads}")
        if self.pooling not in ("first", "mean"):
            raise ConfigError(f"pooling must be 'first' or 'mean', got {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    @property
    def num_layer_groups(self) -> int:
        """Embeddings, each encoder layer, and the classifier head."""
        return self.num_layers + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# (layers, hidden units, attention heads, filter size) of the reference models
PRESETS = {
    "transformer": dict(num_layers=2, hidden=100, num_heads=4, filter_size=200),
    "tinybert4": dict(num_layers=4, hidden=312, num_heads=6, filter_size=1200),
    "tinybert6": dict(num_layers=6, hidden=768, num_heads=12, filter_size=3072),
    "bert_base": dict(num_layers=12, hidden=768, num_heads=12, filter_size=3072),
    "bert_large": dict(num_layers=24, hidden=1024, num_heads=16, filter_size=4096),
    "tiny": dict(num_layers=1, hidden=8, num_heads=1, filter_size=16),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ModelConfig(**base)


class Param(NamedTuple):
    name: str
    layer: int
    tensor: Tensor


LAYER_PARAM_SHAPES = (
    ("attention.query.weight", ("hidden", "hidden")),
    ("attention.query.bias", ("hidden",)),
    ("attention.key.weight", ("hidden", "hidden")),
    ("attention.key.bias", ("hidden",)),
    ("attention.value.weight", ("hidden", "hidden")),
    ("attention.value.bias", ("hidden",)),
    ("attention.output.weight", ("hidden", "hidden")),
    ("attention.output.bias", ("hidden",)),
    ("attention.norm.gain", ("hidden",)),
    ("attention.norm.bias", ("hidden",)),
    ("ffn.input.weight", ("hidden", "filter_size")),
    ("ffn.input.bias", ("filter_size",)),
    ("ffn.output.weight", ("filter_size", "hidden")),
    ("ffn.output.bias", ("hidden",)),
    ("ffn.norm.gain", ("hidden",)),
    ("ffn.norm.bias", ("hidden",)),
)


def parameter_layout(config: ModelConfig) -> list[tuple[str, int, tuple[int, ...]]]:
    """Names, layer indices and shapes of every weight, in store order."""
    dims = {
        "hidden": config.hidden,
        "filter_size": config.filter_size,
        "vocab_size": config.vocab_size,
        "max_seq_len": config.max_seq_len,
        "num_classes": config.num_classes,
    }
    layout = [
        ("embeddings.word", 0, (config.vocab_size, config.hidden)),
        ("embeddings.position", 0, (config.max_seq_len, config.hidden)),
    ]
    if config.embedding_norm:
        layout.append(("embeddings.norm.gain", 0, (config.hidden,)))
        layout.append(("embeddings.norm.bias", 0, (config.hidden,)))
    for i in range(config.num_layers):
        for short, shape in LAYER_PARAM_SHAPES:
            layout.append((f"encoder.{i}.{short}", i + 1, tuple(dims[d] for d in shape)))
    head = config.num_layers + 1
    layout.append(("classifier.weight", head, (config.hidden, config.num_classes)))
    layout.append(("classifier.bias", head, (config.num_classes,)))
    return layout


class ParameterStore:
    """Ordered, uniquely named weights tagged with a layer index.

    Layer 0 holds the embeddings; indices increase toward the classifier.
    """

    def __init__(self, params: Sequence[Param] = ()):
        self._params: list[Param] = []
        self._index: dict[str, int] = {}
        for p in params:
            self.add(p.name, p.layer, p.tensor)

    def add(self, name: str, layer: int, tensor: Tensor) -> None:
        if name in self._index:
            raise ValueError(f"duplicate parameter name {name!r}")
        if self._params and layer < self._params[-1].layer:
            raise ValueError(f"layer index of {name!r} ({layer}) decreases along store order")
        self._index[name] = len(self._params)
        self._params.append(Param(name, layer, tensor))

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[self._index[name]].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def names(self) -> list[str]:
        return [p.name for p in self._params]

    def layers(self) -> list[int]:
        return [p.layer for p in self._params]

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self._params]

    def layer_params(self, i: int) -> dict[str, Tensor]:
        prefix = f"encoder.{i}."
        return {p.name[len(prefix):]: p.tensor for p in self._params if p.name.startswith(prefix)}

    def snapshot(self) -> list[np.ndarray]:
        return [p.tensor.data.copy() for p in self._params]

    def equals(self, other: "ParameterStore") -> bool:
        """Exact equality of names, layer indices, shapes and element bits."""
        if self.names() != other.names() or self.layers() != other.layers():
            return False
        return all(
            a.tensor.shape == b.tensor.shape and a.tensor.data.tobytes() == b.tensor.data.tobytes()
            for a, b in zip(self, other)
        )

    def check_against(self, config: ModelConfig) -> None:
        """Raise ``ConfigError`` naming the first tensor that disagrees with ``config``."""
        expected = parameter_layout(config)
        have = {p.name: p for p in self._params}
        for name, layer, shape in expected:
            if name not in have:
                raise ConfigError(f"missing tensor {name!r}")
            p = have[name]
            if p.tensor.shape != shape:
                raise ConfigError(f"tensor {name!r} has shape {p.tensor.shape}, config expects {shape}")
            if p.layer != layer:
                raise ConfigError(f"tensor {name!r} has layer index {p.layer}, config expects {layer}")
        extra = set(have) - {n for n, _, _ in expected}
        if extra:
            raise ConfigError(f"unexpected tensor {sorted(extra)[0]!r}")


class GradientSet(list):
    """Per-parameter gradients, parallel to a :class:`ParameterStore`."""

    def __init__(self, entries: Sequence[Param] = ()):
        super().__init__(entries)

    def tensors(self) -> list[Tensor]:
        return [e.tensor for e in self]

    def arrays(self) -> list[np.ndarray]:
        return [e.tensor.data for e in self]

    def detached(self) -> "GradientSet":
        return GradientSet(Param(e.name, e.layer, e.tensor.detach()) for e in self)

    def equals(self, other: "GradientSet") -> bool:
        return len(self) == len(other) and all(
            a.name == b.name and a.tensor.shape == b.tensor.shape and np.array_equal(a.tensor.data, b.tensor.data)
            for a, b in zip(self, other)
        )


# ---------------------------------------------------------------------------
# building blocks

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def sdps_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d_k)) v``.

    Works on ``(seq, d_k)`` or on stacked heads ``(heads, seq, d_k)``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ad.ShapeError(f"incompatible attention operands q{q.shape} k{k.shape} v{v.shape}")
    scores = ad.mul(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    seq, hidden = x.shape
    return ad.transpose(ad.reshape(x, (seq, num_heads, hidden // num_heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, seq, dim = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (seq, heads * dim))


def multi_head_attention(x: Tensor, params: dict[str, Tensor], num_heads: int) -> Tensor:
    hidden = x.shape[-1]
    if hidden % num_heads:
        raise ConfigError(f"hidden={hidden} is not divisible by num_heads={num_heads}")
    q = linear(x, params["attention.query.weight"], params["attention.query.bias"])
    k = linear(x, params["attention.key.weight"], params["attention.key.bias"])
    v = linear(x, params["attention.value.weight"], params["attention.value.bias"])
    if num_heads == 1:
        context = sdps_attention(q, k, v)
    else:
        context = _merge_heads(
            sdps_attention(_split_heads(q, num_heads), _split_heads(k, num_heads), _split_heads(v, num_heads))
        )
    return linear(context, params["attention.output.weight"], params["attention.output.bias"])


def feed_forward(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = ad.gelu(linear(x, params["ffn.input.weight"], params["ffn.input.bias"]))
    return linear(h, params["ffn.output.weight"], params["ffn.output.bias"])


def encoder_layer(x: Tensor, params: dict[str, Tensor], num_heads: int, eps: float = 1e-12) -> Tensor:
    """Post-norm encoder block: attention and GELU feed-forward, each with residual + layer norm."""
    if x.ndim != 2 or x.shape[1] != params["attention.query.weight"].shape[0]:
        raise ad.ShapeError(f"encoder input must be (seq, hidden), got {x.shape}")
    h = ad.layer_norm(
        ad.add(x, multi_head_attention(x, params, num_heads)),
        params["attention.norm.gain"],
        params["attention.norm.bias"],
        eps,
    )
    return ad.layer_norm(ad.add(h, feed_forward(h, params)), params["ffn.norm.gain"], params["ffn.norm.bias"], eps)


# ---------------------------------------------------------------------------
# the classifier

class TransformerClassifier:
    """Configuration plus weights; treated as read-only by the attack."""

    def __init__(self, config: ModelConfig, params: ParameterStore):
        params.check_against(config)
        self.config = config
        self.params = params

    @property
    def word_embeddings(self) -> Tensor:
        return self.params["embeddings.word"]

    def check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise ValueError("empty token sequence")
        if ids.size > self.config.max_seq_len:
            raise ValueError(f"sequence of {ids.size} tokens exceeds max_seq_len={self.config.max_seq_len}")
        bad = ids[(ids < 0) | (ids >= self.config.vocab_size)]
        if bad.size:
            raise ValueError(f"token id {int(bad[0])} outside vocabulary of size {self.config.vocab_size}")
        return ids

    def embed(self, tokens) -> Tensor:
        """Word-embedding lookup, without positions."""
        return ad.getitem(self.word_embeddings, self.check_tokens(tokens))

    def encode(self, embeddings: Tensor) -> Tensor:
        cfg = self.config
        if embeddings.ndim != 2 or embeddings.shape[1] != cfg.hidden:
            raise ad.ShapeError(f"embeddings must be (seq, {cfg.hidden}), got {embeddings.shape}")
        seq = embeddings.shape[0]
        if seq > cfg.max_seq_len:
            raise ValueError(f"sequence of {seq} positions exceeds max_seq_len={cfg.max_seq_len}")
        x = ad.add(embeddings, ad.getitem(self.params["embeddings.position"], slice(0, seq)))
        if cfg.embedding_norm:
            x = ad.layer_norm(x, self.params["embeddings.norm.gain"], self.params["embeddings.norm.bias"], cfg.layer_norm_eps)
        for i in range(cfg.num_layers):
            x = encoder_layer(x, self.params.layer_params(i), cfg.num_heads, cfg.layer_norm_eps)
        return x

    def forward(self, inputs) -> Tensor:
        """Logits of shape ``(num_classes,)`` from token ids or an embedding tensor."""
        embeddings = inputs if isinstance(inputs, Tensor) else self.embed(inputs)
        hidden = self.encode(embeddings)
        if self.config.pooling == "mean":
            pooled = ad.mean(hidden, axis=0, keepdims=True)
        else:
            pooled = ad.getitem(hidden, slice(0, 1))
        logits = linear(pooled, self.params["classifier.weight"], self.params["classifier.bias"])
        return ad.reshape(logits, (self.config.num_classes,))

    __call__ = forward

    def loss(self, inputs, label) -> Tensor:
        return ad.cross_entropy(self.forward(inputs), label)


def model_gradient(
    model: TransformerClassifier,
    inputs,
    label,
    create_graph: bool = False,
    scale: float = 1.0,
) -> GradientSet:
    """Gradient of the classification loss with respect to every weight.

    ``label`` is a class id (hard target) or a score tensor (soft target).
    Weights the loss does not reach, such as the word-embedding table when
    ``inputs`` are embeddings, get zero gradients.
    """
    params = list(model.params)
    loss = model.loss(inputs, label)
    if scale != 1.0:
        loss = ad.mul(loss, scale)
    grads = ad.backward(loss, [p.tensor for p in params], create_graph=create_graph, allow_unused=True)
    return GradientSet(Param(p.name, p.layer, g) for p, g in zip(params, grads))
