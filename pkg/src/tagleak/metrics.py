"""Scores for recovered text: Recover Rate, ROUGE-N/L (F1), PCA embedding similarity.

All percentages are on a 0-100 scale.  Functions whose inputs are too short
to score return 0 and emit :class:`DegenerateInputWarning` rather than raise.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class DegenerateInputWarning(UserWarning):
    pass


def _flag(msg: str) -> None:
    warnings.warn(msg, DegenerateInputWarning, stacklevel=3)


@dataclass
class EvalReport:
    recover_rate: float
    rouge1: float
    rouge2: float
    rougeL: float
    embedding_similarity: float | None = None
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def recover_rate(recovered: Sequence, truth: Sequence) -> float:
    """Percent of ground-truth tokens present in ``recovered``, counted as multisets."""
    if len(truth) == 0:
        raise ValueError("recover_rate needs a non-empty ground truth")
    hits = sum((Counter(recovered) & Counter(truth)).values())
    return 100.0 * hits / len(truth)


def _f1(overlap: int, n_pred: int, n_ref: int) -> float:
    if overlap == 0:
        return 0.0
    precision = overlap / n_pred
    recall = overlap / n_ref
    return 100.0 * 2 * precision * recall / (precision + recall)


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(recovered: Sequence, truth: Sequence, n: int) -> float:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(recovered) < n or len(truth) < n:
        _flag(f"fewer than {n} tokens; ROUGE-{n} set to 0")
        return 0.0
    pred, ref = ngrams(recovered, n), ngrams(truth, n)
    overlap = sum((pred & ref).values())
    return _f1(overlap, sum(pred.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(recovered: Sequence, truth: Sequence) -> float:
    if len(recovered) == 0 or len(truth) == 0:
        _flag("empty sequence; ROUGE-L set to 0")
        return 0.0
    return _f1(lcs_length(recovered, truth), len(recovered), len(truth))


def pca_2d(points) -> np.ndarray:
    """Project rows onto the top two principal directions of their covariance.

    Directions are ordered by descending eigenvalue and signed so that each
    one's largest-magnitude component is positive.  When the data spans fewer
    than two dimensions the missing coordinates are zero.
    """
    x = np.asarray(getattr(points, "data", points), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"pca_2d needs a 2-d array with at least 2 rows, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evecs.shape[1] < 2:
        evecs = np.hstack([evecs, np.zeros((evecs.shape[0], 2 - evecs.shape[1]))])
        evals = np.concatenate([evals, np.zeros(2 - evals.size)])
    directions = evecs[:, :2].copy()
    tol = max(float(evals[0]), 1.0) * 1e-12
    for j in range(2):
        if evals[j] <= tol:
            if j == 0 or evals[0] > tol:
                _flag("input spans fewer than two dimensions; zero-filling missing PCA axes")
            directions[:, j] = 0.0
            continue
        col = directions[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            directions[:, j] = -col
    return centered @ directions


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        _flag("zero-norm vector in cosine similarity; pair scored 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def embedding_similarity(dummy, truth) -> float:
    """Mean cosine between matching rows after a joint 2-D PCA of both sets."""
    d = np.asarray(getattr(dummy, "data", dummy), dtype=np.float64)
    t = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if d.shape != t.shape:
        raise ValueError(f"dummy {d.shape} and truth {t.shape} embeddings differ in shape")
    projected = pca_2d(np.vstack([d, t]))
    pd, pt = projected[: len(d)], projected[len(d) :]
    return float(np.mean([cosine_similarity(a, b) for a, b in zip(pd, pt)]))


def evaluate(recovered: Sequence, truth: Sequence, runtime_s: float = 0.0, embedding_similarity: float | None = None) -> EvalReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        return EvalReport(
            recover_rate=recover_rate(recovered, truth),
            rouge1=rouge_n(recovered, truth, 1),
            rouge2=rouge_n(recovered, truth, 2),
            rougeL=rouge_l(recovered, truth),
            embedding_similarity=embedding_similarity,
            runtime_s=runtime_s,
        )
