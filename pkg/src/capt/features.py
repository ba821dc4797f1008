"""Per-phone input vectors: GOP, canonical/phonological embedding, fusion.

The acoustic side of each phone is a precomputed feature row
(GOP scalar followed by an SSL-style embedding) projected to d_model.
The symbolic side is a projection of [one-hot(41) | attributes(24)].
The two are fused by elementwise addition to form the encoder input.
"""

from __future__ import annotations

import logging

import numpy as np

from . import diffcore as dc
from .encoder import ParamStore, he_uniform
from .errors import ContractError, DatasetError, ShapeError
from .phonology import N_ATTRIBUTES, N_PHONES

log = logging.getLogger("capt")

GOP_FLOOR = 1e-10  # posterior clamp when the canonical phone gets zero mass


def compute_gop(frame_posteriors: np.ndarray, canonical_id: int) -> float:
    """Mean log posterior of the canonical phone over its aligned frames.

    Always <= 0; exactly 0 only when every frame puts all mass on the
    canonical phone.  Zero posteriors are clamped at log(1e-10) and logged
    rather than raised.
    """
    post = np.asarray(frame_posteriors, dtype=np.float64)
    if post.ndim != 2 or post.shape[1] != N_PHONES:
        raise ShapeError(f"compute_gop: expected (T, {N_PHONES}) posteriors, got {post.shape}")
    if post.shape[0] < 1:
        raise ContractError("compute_gop: empty phone segment")
    if not (0 <= canonical_id < N_PHONES):
        raise ContractError(f"compute_gop: canonical id {canonical_id} out of range")
    sums = post.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("compute_gop: posterior rows must sum to 1 (+-1e-6)")
    p = post[:, canonical_id]
    if np.any(p < GOP_FLOOR):
        log.warning("compute_gop: clamped %d zero posterior(s) on canonical phone %d",
                    int((p < GOP_FLOOR).sum()), canonical_id)
        p = np.maximum(p, GOP_FLOOR)
    return float(np.log(p).mean())


def build_onehot_attr_matrix(attr_table: np.ndarray) -> np.ndarray:
    """(41, 65) constant matrix: identity one-hot block next to the attributes."""
    if attr_table.shape != (N_PHONES, N_ATTRIBUTES):
        raise ShapeError(f"attribute table shape {attr_table.shape}")
    return np.concatenate([np.eye(N_PHONES), attr_table], axis=1)


def init_feature_params(feat_dim: int, d_model: int, rng: np.random.Generator,
                        store: ParamStore) -> None:
    store.add("feat.proj.w", he_uniform(rng, feat_dim, (feat_dim, d_model)))
    store.add("feat.proj.b", np.zeros(d_model))
    store.add("embed.w", he_uniform(rng, N_PHONES + N_ATTRIBUTES,
                                    (N_PHONES + N_ATTRIBUTES, d_model)))


def check_embedding_injective(onehot_attr: np.ndarray, embed_w: np.ndarray) -> None:
    """All 41 canonical embeddings must be pairwise distinct at init."""
    emb = onehot_attr @ embed_w
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    dist += np.eye(len(emb))
    if np.any(dist < 1e-9):
        raise ContractError("canonical embeddings collide; re-seed the projection")


def canonical_embeddings(phone_ids: np.ndarray, onehot_attr: np.ndarray,
                         params: ParamStore) -> dc.Tensor:
    """c_i rows for a sequence of phone ids, differentiable w.r.t. embed.w."""
    rows = dc.Tensor(onehot_attr[np.asarray(phone_ids, dtype=np.int64)])
    return dc.matmul(rows, params["embed.w"])


def fuse(x: dc.Tensor, c: dc.Tensor) -> dc.Tensor:
    """Elementwise additive fusion of acoustic and symbolic embeddings."""
    if x.data.shape != c.data.shape:
        raise ShapeError(f"fuse: shapes differ {x.data.shape} vs {c.data.shape}")
    return dc.add(x, c)


def assemble_utterance_features(feature_rows: np.ndarray, phone_ids: np.ndarray,
                                onehot_attr: np.ndarray, params: ParamStore,
                                utt_id: str = "?") -> dc.Tensor:
    """X_hat = project(gop | ssl) + canonical_embedding, per phone."""
    feature_rows = np.asarray(feature_rows, dtype=np.float64)
    phone_ids = np.asarray(phone_ids, dtype=np.int64)
    n = phone_ids.shape[0]
    if n < 1:
        raise ContractError(f"utterance {utt_id}: no phones")
    if feature_rows.shape[0] != n:
        raise DatasetError(
            f"utterance {utt_id}: {feature_rows.shape[0]} feature rows for {n} phones"
        )
    x = dc.linear(dc.Tensor(feature_rows), params["feat.proj.w"], params["feat.proj.b"])
    c = canonical_embeddings(phone_ids, onehot_attr, params)
    return fuse(x, c)
