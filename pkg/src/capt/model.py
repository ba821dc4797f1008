"""Full model assembly: features -> bidirectional SSM encoder -> heads.

Also owns model persistence.  A saved model records the format version, the
configuration, and the sha256 of the phonological table it was trained with;
loading refuses a file whose table checksum differs from the active table.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from . import features as feat
from . import phonology, scoring
from .encoder import (EncoderConfig, ParamStore, append_think_tokens,
                      bimamba_encode, init_encoder_params)
from .errors import PersistenceError

MODEL_FORMAT_VERSION = 1

# raw annotation score ranges; training happens in [0, 1]
PHONE_SCORE_MAX = 2.0
WORD_SCORE_MAX = 10.0
UTT_SCORE_MAX = 10.0


@dataclass
class Model:
    cfg: EncoderConfig
    feat_dim: int
    d_attn: int
    params: ParamStore
    onehot_attr: np.ndarray
    table_checksum: str

    def forward(self, feature_rows, phone_ids, word_spans) -> scoring.GraphOutputs:
        """Predictions for one utterance, in normalized [0, 1] score space."""
        n = len(phone_ids)
        x_hat = feat.assemble_utterance_features(
            feature_rows, phone_ids, self.onehot_attr, self.params
        )
        think = self.params["enc.think"] if "enc.think" in self.params else None
        h = bimamba_encode(append_think_tokens(x_hat, think), n, self.params, self.cfg)
        phone_scores, mdd_logits = scoring.phone_level_outputs(h, self.params)
        word_scores = scoring.word_level_outputs(h, word_spans, self.params)
        utt_scores = scoring.utterance_level_outputs(h, self.params)
        return scoring.GraphOutputs(phone_scores, mdd_logits, word_scores, utt_scores)

    def predict(self, feature_rows, phone_ids, word_spans) -> scoring.PredictionBundle:
        return self.forward(feature_rows, phone_ids, word_spans).detach()


def init_model(cfg: EncoderConfig, feat_dim: int, seed: int,
               d_attn: int | None = None) -> Model:
    cfg.validate()
    if d_attn is None:
        d_attn = cfg.d_attn if cfg.d_attn > 0 else max(cfg.d_model // 2, 1)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    feat.init_feature_params(feat_dim, cfg.d_model, rng, store)
    init_encoder_params(cfg, rng, store)
    scoring.init_scoring_params(cfg.d_model, d_attn, rng, store)
    table_text = phonology.default_table_text()
    attr = phonology.load_attribute_table(table_text)
    onehot_attr = feat.build_onehot_attr_matrix(attr)
    feat.check_embedding_injective(onehot_attr, store["embed.w"].data)
    return Model(cfg=cfg, feat_dim=feat_dim, d_attn=d_attn, params=store,
                 onehot_attr=onehot_attr,
                 table_checksum=phonology.table_checksum(table_text))


def save_model(model: Model, path) -> None:
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": asdict(model.cfg),
        "feat_dim": model.feat_dim,
        "d_attn": model.d_attn,
        "table_checksum": model.table_checksum,
        "score_ranges": {"phone": PHONE_SCORE_MAX, "word": WORD_SCORE_MAX,
                         "utterance": UTT_SCORE_MAX},
    }
    arrays = {f"param/{name}": t.data for name, t in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                       dtype=np.uint8)
    # plain zipfile with a pinned timestamp so identical models are
    # byte-identical files (np.savez stamps the current time)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_model(path) -> Model:
    try:
        with np.load(path) as z:
            if "__meta__" not in z:
                raise PersistenceError(f"{path}: not a model file (missing metadata)")
            meta = json.loads(bytes(z["__meta__"]).decode())
            arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise PersistenceError(f"{path}: cannot read model file: {e}") from e
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise PersistenceError(
            f"{path}: format version {meta.get('format_version')} "
            f"unsupported (expected {MODEL_FORMAT_VERSION})"
        )
    current = phonology.table_checksum()
    if meta["table_checksum"] != current:
        raise PersistenceError(
            f"{path}: phonological table checksum mismatch "
            f"(model {meta['table_checksum'][:12]}..., active {current[:12]}...); "
            "refusing to load against a different table"
        )
    cfg = EncoderConfig(**meta["config"])
    model = init_model(cfg, meta["feat_dim"], seed=0, d_attn=meta["d_attn"])
    names = set(model.params.names())
    if names != set(arrays):
        raise PersistenceError(f"{path}: parameter set does not match configuration")
    for name in names:
        stored = np.asarray(arrays[name], dtype=np.float64)
        if stored.shape != model.params[name].data.shape:
            raise PersistenceError(f"{path}: shape mismatch for parameter {name}")
        model.params[name].data = stored
    return model


def all_param_tensors(model: Model) -> list[dc.Tensor]:
    return model.params.tensors()
