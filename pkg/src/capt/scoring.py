"""Aspect attention pooling and the multi-level prediction heads.

Phone-level: a regression head (one score per phone) and a 41-way
classifier over realized phones.  Word-level: mean-pool the phone
representations inside each word span, then one affine map to
(accuracy, stress, total).  Utterance-level: one attention pooler and one
regressor per aspect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import ParamStore, he_uniform
from .errors import AlignmentError, ContractError
from .phonology import N_PHONES

ASPECTS = ("accuracy", "completeness", "fluency", "prosody", "total")
WORD_SCORE_NAMES = ("accuracy", "stress", "total")


@dataclass
class PredictionBundle:
    """Detached (numpy) predictions for one utterance, normalized scale."""

    phone_scores: np.ndarray  # (N,)
    mdd_logits: np.ndarray  # (N, 41)
    word_scores: np.ndarray  # (W, 3)
    utterance_scores: np.ndarray  # (5,)


@dataclass
class GraphOutputs:
    """Same fields as PredictionBundle but as live graph tensors."""

    phone_scores: dc.Tensor
    mdd_logits: dc.Tensor
    word_scores: dc.Tensor
    utterance_scores: dc.Tensor

    def detach(self) -> PredictionBundle:
        return PredictionBundle(
            phone_scores=self.phone_scores.data.copy(),
            mdd_logits=self.mdd_logits.data.copy(),
            word_scores=self.word_scores.data.copy(),
            utterance_scores=self.utterance_scores.data.copy(),
        )


def init_scoring_params(d_model: int, d_attn: int, rng: np.random.Generator,
                        store: ParamStore) -> None:
    # heads start small: keeps initial losses O(1) and the MDD softmax
    # unsaturated regardless of how much the residual stack grows activations
    for a in ASPECTS:
        store.add(f"pool.{a}.w_proj", he_uniform(rng, d_model, (d_model, d_attn)))
        store.add(f"pool.{a}.w_score", rng.normal(0.0, 0.2, size=d_attn))
        store.add(f"head.utt.{a}.w", rng.normal(0.0, 0.02, size=d_model))
        store.add(f"head.utt.{a}.b", np.asarray(0.5))
    store.add("head.phone.w", rng.normal(0.0, 0.02, size=d_model))
    store.add("head.phone.b", np.asarray(0.5))
    store.add("head.mdd.w", rng.normal(0.0, 0.02, size=(d_model, N_PHONES)))
    store.add("head.mdd.b", np.zeros(N_PHONES))
    store.add("head.word.w", rng.normal(0.0, 0.02, size=(d_model, 3)))
    store.add("head.word.b", np.full(3, 0.5))


def attention_weights(h: dc.Tensor, params: ParamStore, aspect: str) -> dc.Tensor:
    """alpha_i = softmax_i( w_a . tanh(W_a h_i) ); (N,) summing to 1."""
    if h.data.shape[0] < 1:
        raise ContractError("attention_weights: empty sequence")
    scores = dc.matmul(dc.tanh(dc.matmul(h, params[f"pool.{aspect}.w_proj"])),
                       params[f"pool.{aspect}.w_score"])
    return dc.softmax(scores, axis=-1)


def pool(h: dc.Tensor, alpha: dc.Tensor) -> dc.Tensor:
    """Convex combination of the rows of h; alpha must sum to 1."""
    if alpha.data.shape != (h.data.shape[0],):
        raise ContractError(
            f"pool: weight length {alpha.data.shape} vs {h.data.shape[0]} rows"
        )
    if abs(alpha.data.sum() - 1.0) > 1e-9:
        raise ContractError("pool: weights do not sum to 1")
    return dc.matmul(alpha, h)


def phone_level_outputs(h: dc.Tensor, params: ParamStore):
    scores = dc.add(dc.matmul(h, params["head.phone.w"]), params["head.phone.b"])
    logits = dc.linear(h, params["head.mdd.w"], params["head.mdd.b"])
    return scores, logits


def validate_word_spans(spans, n_phones: int):
    """Spans must partition 0..N-1 into contiguous nonempty pieces, in order."""
    expect = 0
    for w, (start, stop) in enumerate(spans):
        if start != expect or stop <= start:
            raise AlignmentError(
                f"word {w}: span ({start}, {stop}) does not continue partition at {expect}"
            )
        expect = stop
    if expect != n_phones:
        raise AlignmentError(f"word spans cover {expect} phones, utterance has {n_phones}")


def word_level_outputs(h: dc.Tensor, word_spans, params: ParamStore) -> dc.Tensor:
    validate_word_spans(word_spans, h.data.shape[0])
    pooled = dc.stack([dc.mean_rows(dc.slice_rows(h, s, e)) for s, e in word_spans])
    return dc.linear(pooled, params["head.word.w"], params["head.word.b"])


def utterance_level_outputs(h: dc.Tensor, params: ParamStore) -> dc.Tensor:
    scores = []
    for a in ASPECTS:
        alpha = attention_weights(h, params, a)
        h_u = pool(h, alpha)
        scores.append(dc.add(dc.matmul(h_u, params[f"head.utt.{a}.w"]),
                             params[f"head.utt.{a}.b"]))
    return dc.stack(scores)
