"""Gradient-matching text reconstruction (TAG) and its DLG baseline.

The attacker holds the model weights and a participant's gradient.  It
optimises continuous dummy token embeddings and dummy label scores so that
the gradient they induce matches the intercepted one, then projects the
embeddings back onto the vocabulary.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from tagleak import autodiff as ad
from tagleak.autodiff import Tensor
from tagleak.metrics import recover_rate
from tagleak.model import ConfigError, GradientSet, TransformerClassifier, model_gradient
from tagleak.weights import make_rng

UNK_ID = 1
# dummy draws use their own Philox stream so a shared seed never aligns them with the weights
DUMMY_STREAM = 1


class AttackDivergedError(RuntimeError):
    """The gradient distance became non-finite; carries the last finite state."""

    def __init__(self, message: str, iteration: int, trace: "AttackTrace"):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


@dataclass(frozen=True)
class AttackConfig:
    lr: float = 0.05
    max_iters: int = 1000
    mode: str = "tag"  # tag | dlg
    alpha0: float = 0.01
    gamma: float = 0.85
    stopping: str = "budget"  # budget | plateau
    patience: int = 200
    seed: int = 0
    seq_len: Optional[int] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.mode not in ("tag", "dlg"):
            raise ConfigError(f"mode must be 'tag' or 'dlg', got {self.mode!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.alpha0 < 0:
            raise ConfigError(f"alpha0 must be >= 0, got {self.alpha0}")
        if self.stopping not in ("budget", "plateau"):
            raise ConfigError(f"stopping must be 'budget' or 'plateau', got {self.stopping!r}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    @property
    def effective_alpha0(self) -> float:
        return 0.0 if self.mode == "dlg" else self.alpha0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


def alpha_schedule(layer: int, num_layers: int, alpha0: float, gamma: float) -> float:
    """L1 weight for ``layer``: ``alpha0 * gamma**layer``, largest at the input side."""
    if not 0 <= layer < num_layers:
        raise ValueError(f"layer {layer} outside [0, {num_layers})")
    return alpha0 * gamma**layer


def make_schedule(alpha0: float, gamma: float, num_layers: int) -> Callable[[int], float]:
    return lambda layer: alpha_schedule(layer, num_layers, alpha0, gamma)


def gradient_distance(ga: GradientSet, gb: GradientSet, schedule: Callable[[int], float] | None = None) -> Tensor:
    """Sum over parameters of ``||ga - gb||_2 + alpha(layer) * ||ga - gb||_1``.

    With no schedule (or a zero alpha) only the L2 terms remain.
    """
    if len(ga) != len(gb):
        raise ValueError(f"gradient sets have {len(ga)} and {len(gb)} entries")
    total = None
    for a, b in zip(ga, gb):
        if a.name != b.name or a.tensor.shape != b.tensor.shape:
            raise ValueError(f"gradient entries {a.name!r}{a.tensor.shape} and {b.name!r}{b.tensor.shape} do not match")
        diff = ad.sub(a.tensor, b.tensor)
        term = ad.l2_norm(diff)
        alpha = schedule(a.layer) if schedule is not None else 0.0
        if alpha:
            term = ad.add(term, ad.mul(alpha, ad.l1_norm(diff)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("empty gradient sets")
    return total


# ---------------------------------------------------------------------------
# optimiser state

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class DummyState:
    x: np.ndarray
    y: np.ndarray
    m_x: np.ndarray = None
    v_x: np.ndarray = None
    m_y: np.ndarray = None
    v_y: np.ndarray = None

    def __post_init__(self):
        for name, like in (("m_x", self.x), ("v_x", self.x), ("m_y", self.y), ("v_y", self.y)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(like))

    @classmethod
    def random(cls, seq_len: int, hidden: int, num_classes: int, seed: int) -> "DummyState":
        rng = make_rng(seed, DUMMY_STREAM)
        x = rng.standard_normal((seq_len, hidden))
        y = rng.standard_normal(num_classes)
        return cls(x, y)

    def copy(self) -> "DummyState":
        return DummyState(*(a.copy() for a in (self.x, self.y, self.m_x, self.v_x, self.m_y, self.v_y)))


def _adam_step(param, grad, m, v, lr, t):
    m = BETA1 * m + (1.0 - BETA1) * grad
    v = BETA2 * v + (1.0 - BETA2) * (grad * grad)
    m_hat = m / (1.0 - BETA1**t)
    v_hat = v / (1.0 - BETA2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), m, v


def adam_update(state: DummyState, grad_x: np.ndarray, grad_y: np.ndarray, lr: float, iteration: int) -> DummyState:
    """One bias-corrected Adam step; ``iteration`` counts from 1."""
    if grad_x.shape != state.x.shape or grad_y.shape != state.y.shape:
        raise ValueError("gradient shapes do not match the dummy state")
    x, m_x, v_x = _adam_step(state.x, grad_x, state.m_x, state.v_x, lr, iteration)
    y, m_y, v_y = _adam_step(state.y, grad_y, state.m_y, state.v_y, lr, iteration)
    return DummyState(x, y, m_x, v_x, m_y, v_y)


# ---------------------------------------------------------------------------
# projections

def project_to_tokens(x, embedding_matrix, unk_id: int = UNK_ID) -> list[int]:
    """Vocabulary id with the highest cosine similarity to each row of ``x``.

    Ties go to the lowest id; rows of zero norm map to ``unk_id``.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    emb = np.asarray(getattr(embedding_matrix, "data", embedding_matrix), dtype=np.float64)
    if x.ndim != 2 or emb.ndim != 2 or x.shape[1] != emb.shape[1]:
        raise ValueError(f"cannot project {x.shape} onto embeddings {emb.shape}")
    row_norms = np.linalg.norm(emb, axis=1)
    safe = np.where(row_norms > 0, row_norms, 1.0)
    unit_emb = emb / safe[:, None]
    out = []
    for row in x:
        n = np.linalg.norm(row)
        if n == 0:
            out.append(unk_id)
            continue
        scores = unit_emb @ (row / n)
        out.append(int(np.argmax(scores)))  # argmax returns the first maximum
    return out


def recover_label(y) -> int:
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    return int(np.argmax(y))


# ---------------------------------------------------------------------------
# the attack loop

@dataclass
class IterationRecord:
    iter: int
    loss: float
    tokens: list[int]
    recover_rate: Optional[float]
    wall_time: float

    def to_json(self, with_time: bool = False) -> dict:
        d = {"iter": self.iter, "loss": self.loss, "tokens": self.tokens, "recover_rate": self.recover_rate}
        if with_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class AttackTrace:
    records: list[IterationRecord] = field(default_factory=list)
    final_x: Optional[np.ndarray] = None
    final_y: Optional[np.ndarray] = None
    tokens: list[int] = field(default_factory=list)
    label: Optional[int] = None
    stopped_early: bool = False
    runtime_s: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def best_recover_rate(self) -> Optional[float]:
        rates = [r.recover_rate for r in self.records if r.recover_rate is not None]
        return max(rates) if rates else None

    def same_as(self, other: "AttackTrace") -> bool:
        """Bit-level equality, ignoring wall-clock fields."""
        if len(self.records) != len(other.records):
            return False
        for a, b in zip(self.records, other.records):
            if (a.iter, a.loss, a.tokens, a.recover_rate) != (b.iter, b.loss, b.tokens, b.recover_rate):
                return False
        return (
            self.tokens == other.tokens
            and self.label == other.label
            and np.array_equal(self.final_x, other.final_x)
            and np.array_equal(self.final_y, other.final_y)
        )


def _check_structure(model: TransformerClassifier, target: GradientSet) -> None:
    params = list(model.params)
    if len(params) != len(target):
        raise ValueError(f"target has {len(target)} gradients, model has {len(params)} parameters")
    for p, g in zip(params, target):
        if p.name != g.name or p.tensor.shape != g.tensor.shape:
            raise ValueError(f"target gradient {g.name!r}{g.tensor.shape} does not match parameter {p.name!r}{p.tensor.shape}")


def distance_and_grads(
    model: TransformerClassifier, target: GradientSet, state: DummyState, schedule
) -> tuple[float, np.ndarray, np.ndarray]:
    """Gradient distance at ``state`` and its derivatives w.r.t. the dummy embeddings and label."""
    x = Tensor._wrap(state.x.copy(), True)
    y = Tensor._wrap(state.y.copy(), True)
    dummy = model_gradient(model, x, y, create_graph=True)
    dist = gradient_distance(dummy, target, schedule)
    value = float(dist.data)
    if not np.isfinite(value):
        return value, None, None
    gx, gy = ad.backward(dist, [x, y])
    return value, gx.data, gy.data


def run_attack(
    model: TransformerClassifier,
    target: GradientSet,
    config: AttackConfig,
    oracle_tokens: Sequence[int] | None = None,
    callback: Callable[[IterationRecord, DummyState], None] | None = None,
) -> AttackTrace:
    _check_structure(model, target)
    if config.stopping == "plateau" and oracle_tokens is None:
        raise ValueError("plateau stopping needs the oracle tokens")
    seq_len = config.seq_len or (len(oracle_tokens) if oracle_tokens is not None else None)
    if seq_len is None:
        raise ValueError("the dummy sequence length must be given in the config or via oracle tokens")
    num_classes = config.num_classes or model.config.num_classes
    target = target.detached()
    schedule = make_schedule(config.effective_alpha0, config.gamma, model.config.num_layer_groups)
    emb = model.word_embeddings.data
    truth = list(oracle_tokens) if oracle_tokens is not None else None

    state = DummyState.random(seq_len, model.config.hidden, num_classes, config.seed)
    trace = AttackTrace()
    start = time.perf_counter()
    best_hits, since_best = -1, 0
    for it in range(config.max_iters):
        loss, gx, gy = distance_and_grads(model, target, state, schedule)
        if gx is None or not (np.isfinite(gx).all() and np.isfinite(gy).all()):
            trace.final_x, trace.final_y = state.x, state.y
            trace.tokens = project_to_tokens(state.x, emb)
            trace.label = recover_label(state.y)
            trace.runtime_s = time.perf_counter() - start
            raise AttackDivergedError(f"gradient distance became non-finite at iteration {it}", it, trace)
        tokens = project_to_tokens(state.x, emb)
        rate = recover_rate(tokens, truth) if truth is not None else None
        record = IterationRecord(it, loss, tokens, rate, time.perf_counter() - start)
        trace.records.append(record)
        if callback is not None:
            callback(record, state)
        state = adam_update(state, gx, gy, config.lr, it + 1)

        if config.stopping == "plateau":
            if rate > best_hits:
                best_hits, since_best = rate, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    trace.stopped_early = True
                    break

    trace.final_x, trace.final_y = state.x, state.y
    trace.tokens = project_to_tokens(state.x, emb)
    trace.label = recover_label(state.y)
    trace.runtime_s = time.perf_counter() - start
    return trace
