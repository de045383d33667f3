"""Visual-text matching scores, their linear fusion and mask selection.

For a proposal with fused visual feature ``f``::

    s_att = cos(f, f_att)
    s_van = cos(f, f_van)
    s_sur = -mean(cos(f, f_neg) for f_neg in negatives)   (0 when there are none)
    s     = s_van + alpha * s_att + beta * s_sur

and the proposal with the largest ``s`` wins, ties going to the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backends.base import Embedding, TextEncoder
from .errors import DegenerateSum, DimensionMismatch, EmptyInput, ScoreBoundsViolation

DEFAULT_TAU = 0.85
DEFAULT_BETA = 1.0
DEFAULT_ALPHA = {"refcoco": 0.5, "refcoco+": 0.5, "refcocog": 0.3}


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 0.5
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))

    @classmethod
    def for_dataset(cls, dataset_tag: str) -> FusionWeights:
        try:
            return cls(DEFAULT_ALPHA[dataset_tag.lower()], DEFAULT_BETA)
        except KeyError:
            raise ValueError(f"unknown dataset tag {dataset_tag!r}; expected one of {sorted(DEFAULT_ALPHA)}") from None

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class NegativeSet:
    phrases: list[str] = field(default_factory=list)
    embeddings: list[Embedding] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.phrases) != len(self.embeddings):
            raise ValueError("phrases and embeddings must be parallel")

    def __len__(self) -> int:
        return len(self.phrases)


@dataclass(frozen=True)
class ScoreBreakdown:
    proposal_index: int
    s_van: float
    s_att: float
    s_sur: float
    s_total: float

    def to_json(self) -> dict:
        return {
            "proposal_index": self.proposal_index,
            "s_van": self.s_van,
            "s_att": self.s_att,
            "s_sur": self.s_sur,
            "s_total": self.s_total,
        }

    @classmethod
    def from_json(cls, d: dict) -> ScoreBreakdown:
        return cls(int(d["proposal_index"]), float(d["s_van"]), float(d["s_att"]), float(d["s_sur"]), float(d["s_total"]))


def _check_dims(a: Embedding, b: Embedding) -> None:
    if a.dim != b.dim:
        raise DimensionMismatch(f"embedding dims differ: {a.dim} vs {b.dim}")


def cosine(a: Embedding, b: Embedding) -> float:
    _check_dims(a, b)
    x, y = a.values, b.values
    c = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return min(1.0, max(-1.0, c))


def fuse_visual(f_mb: Embedding, f_mc: Embedding, normalize_first: bool = True) -> Embedding:
    """Merge the blur- and crop-rendered features into one instance feature."""
    _check_dims(f_mb, f_mc)
    a, b = f_mb.values, f_mc.values
    if normalize_first:
        a = a / np.linalg.norm(a)
        b = b / np.linalg.norm(b)
    total = a + b
    if not np.any(total):
        raise DegenerateSum("visual features cancel out (antipodal inputs)")
    return Embedding(total)


def filter_negatives(
    candidates: Sequence[str],
    object_phrase: str,
    expression: str,
    tau: float,
    encoder: TextEncoder,
) -> NegativeSet:
    """Keep phrases dissimilar to the referent and absent from the expression."""
    if not -1.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [-1, 1], got {tau}")
    if not candidates:
        return NegativeSet()
    anchor = encoder.encode_text(object_phrase)
    expr = expression.casefold()
    phrases, embs = [], []
    for c in candidates:
        if c.casefold() in expr:
            continue
        emb = encoder.encode_text(c)
        if cosine(emb, anchor) < tau:
            phrases.append(c)
            embs.append(emb)
    return NegativeSet(phrases, embs)


def surrounding_score(f_i: Embedding, negs: NegativeSet) -> float:
    if len(negs) == 0:
        return 0.0
    return -math.fsum(cosine(f_i, e) for e in negs.embeddings) / len(negs)


def fuse_scores(s_van: float, s_att: float, s_sur: float, w: FusionWeights) -> float:
    total = s_van + w.alpha * s_att + w.beta * s_sur
    bound = 1.0 + w.alpha + w.beta
    if not -bound - 1e-12 <= total <= bound + 1e-12:
        raise ScoreBoundsViolation(f"s_total={total} outside [-{bound}, {bound}]")
    return total


def score_proposal(
    f_i: Embedding,
    f_att: Embedding,
    f_van: Embedding,
    negs: NegativeSet,
    w: FusionWeights,
    proposal_index: int = 0,
) -> ScoreBreakdown:
    s_att = cosine(f_i, f_att)
    s_van = cosine(f_i, f_van)
    s_sur = surrounding_score(f_i, negs)
    return ScoreBreakdown(proposal_index, s_van, s_att, s_sur, fuse_scores(s_van, s_att, s_sur, w))


def refuse(b: ScoreBreakdown, w: FusionWeights) -> ScoreBreakdown:
    """Recompute the total under other weights; the raw scores are weight-free."""
    return replace(b, s_total=fuse_scores(b.s_van, b.s_att, b.s_sur, w))


def select_mask(breakdowns: Sequence[ScoreBreakdown]) -> int:
    if not breakdowns:
        raise EmptyInput("no proposals to select from")
    best = min(breakdowns, key=lambda b: (-b.s_total, b.proposal_index))
    return best.proposal_index
