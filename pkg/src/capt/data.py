"""Corpus formats, synthetic generator, run configuration, importer.

A corpus is a directory holding ``corpus.jsonl`` (one utterance record per
line: phones with canonical/realized symbols and scores, word scores,
utterance aspect scores) and ``features.bin`` (binary container of per-phone
acoustic feature matrices, keyed by utterance id).  Scores are stored in
their raw annotation ranges (phone 0-2, word/utterance 0-10) and normalized
to [0, 1] on load.  See docs/formats.md for the byte-level layout.
"""

from __future__ import annotations

import configparser
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .errors import ConfigError, DatasetError
from .phonology import (ARPABET_39, DEL, DEL_ID, PHONE_TO_ID, PHONES, UNK,
                        phone_id)
from .scoring import ASPECTS
from .training import TrainConfig

PHONE_SCORE_MAX = 2.0
WORD_SCORE_MAX = 10.0
UTT_SCORE_MAX = 10.0

FEATURE_MAGIC = b"CAPTFEA\x01"
FEATURE_VERSION = 1

CORPUS_FILE = "corpus.jsonl"
FEATURE_FILE = "features.bin"
META_FILE = "corpus_meta.json"


# ---------------------------------------------------------------------------
# in-memory records


@dataclass
class PhoneEntry:
    canonical: str
    realized: str
    score: float  # raw 0-2
    word_index: int


@dataclass
class UtteranceRecord:
    id: str
    phones: list[PhoneEntry]
    word_scores: list[tuple[float, float, float]]  # raw 0-10 (accuracy, stress, total)
    utterance_scores: dict[str, float]  # raw 0-10 per aspect
    features: np.ndarray | None = None  # (N, F)

    # -- derived views -----------------------------------------------------
    @property
    def n_phones(self) -> int:
        return len(self.phones)

    def canonical_ids(self) -> np.ndarray:
        return np.array([phone_id(p.canonical) for p in self.phones], dtype=np.int64)

    def realized_ids(self) -> np.ndarray:
        return np.array([phone_id(p.realized) for p in self.phones], dtype=np.int64)

    def word_spans(self) -> list[tuple[int, int]]:
        spans = []
        start = 0
        for i in range(1, len(self.phones) + 1):
            if i == len(self.phones) or self.phones[i].word_index != self.phones[i - 1].word_index:
                spans.append((start, i))
                start = i
        return spans

    def phone_targets_norm(self) -> np.ndarray:
        return np.array([p.score for p in self.phones]) / PHONE_SCORE_MAX

    def word_targets_norm(self) -> np.ndarray:
        return np.asarray(self.word_scores, dtype=np.float64) / WORD_SCORE_MAX

    def utt_targets_norm(self) -> np.ndarray:
        return np.array([self.utterance_scores[a] for a in ASPECTS]) / UTT_SCORE_MAX


def normalize_score(raw: float, level: str) -> float:
    return raw / {"phone": PHONE_SCORE_MAX, "word": WORD_SCORE_MAX,
                  "utterance": UTT_SCORE_MAX}[level]


def denormalize_score(norm: float, level: str):
    return norm * {"phone": PHONE_SCORE_MAX, "word": WORD_SCORE_MAX,
                   "utterance": UTT_SCORE_MAX}[level]


# ---------------------------------------------------------------------------
# validation


def _fail(rec_id: str, field_name: str, msg: str):
    raise DatasetError(f"record {rec_id!r}, field {field_name!r}: {msg}")


def validate_record(rec: UtteranceRecord) -> None:
    if not rec.phones:
        _fail(rec.id, "phones", "empty phone list")
    prev = -1
    for i, p in enumerate(rec.phones):
        if p.canonical not in PHONE_TO_ID or p.canonical in (DEL, UNK):
            _fail(rec.id, f"phones[{i}].canonical", f"not a canonical phone: {p.canonical!r}")
        if p.realized not in PHONE_TO_ID:
            _fail(rec.id, f"phones[{i}].realized", f"not in inventory: {p.realized!r}")
        if not (0.0 <= p.score <= PHONE_SCORE_MAX):
            _fail(rec.id, f"phones[{i}].score", f"{p.score} outside [0, {PHONE_SCORE_MAX}]")
        if p.word_index not in (prev, prev + 1):
            _fail(rec.id, f"phones[{i}].word", "word indices must be contiguous nondecreasing from 0")
        prev = p.word_index
    n_words = prev + 1
    if len(rec.word_scores) != n_words:
        _fail(rec.id, "word_scores", f"{len(rec.word_scores)} triples for {n_words} words")
    for w, triple in enumerate(rec.word_scores):
        if len(triple) != 3 or not all(0.0 <= s <= WORD_SCORE_MAX for s in triple):
            _fail(rec.id, f"word_scores[{w}]", f"invalid triple {triple}")
    for a in ASPECTS:
        if a not in rec.utterance_scores:
            _fail(rec.id, "utterance_scores", f"missing aspect {a!r}")
        s = rec.utterance_scores[a]
        if not (0.0 <= s <= UTT_SCORE_MAX):
            _fail(rec.id, f"utterance_scores.{a}", f"{s} outside [0, {UTT_SCORE_MAX}]")
    if rec.features is not None and rec.features.shape[0] != rec.n_phones:
        _fail(rec.id, "features", f"{rec.features.shape[0]} feature rows for {rec.n_phones} phones")


# ---------------------------------------------------------------------------
# binary feature container


def write_feature_file(path, matrices: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", FEATURE_VERSION, len(matrices)))
        offsets = {}
        for uid, mat in matrices.items():
            mat = np.asarray(mat, dtype=np.float32)
            offsets[uid] = f.tell()
            f.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            f.write(mat.astype("<f4").tobytes())
        index_offset = f.tell()
        for uid, ofs in offsets.items():
            enc = uid.encode()
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<Q", ofs))
        f.write(struct.pack("<Q", index_offset))


def read_feature_file(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
        if blob[:8] != FEATURE_MAGIC:
            raise DatasetError(f"{path}: bad magic, not a feature container")
        version, count = struct.unpack_from("<II", blob, 8)
        if version != FEATURE_VERSION:
            raise DatasetError(f"{path}: unsupported feature format version {version}")
        (index_offset,) = struct.unpack_from("<Q", blob, len(blob) - 8)
        out = {}
        pos = index_offset
        for _ in range(count):
            (id_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            uid = blob[pos : pos + id_len].decode()
            pos += id_len
            (ofs,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            rows, cols = struct.unpack_from("<II", blob, ofs)
            payload = blob[ofs + 8 : ofs + 8 + rows * cols * 4]
            if len(payload) != rows * cols * 4:
                raise DatasetError(f"{path}: truncated payload for record {uid!r}")
            out[uid] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
        return out
    except (struct.error, UnicodeDecodeError, IndexError) as e:
        raise DatasetError(f"{path}: corrupt feature container: {e}") from e


# ---------------------------------------------------------------------------
# corpus serialization


def _record_to_json(rec: UtteranceRecord) -> dict:
    return {
        "id": rec.id,
        "phones": [
            {"canonical": p.canonical, "realized": p.realized,
             "score": round(p.score, 4), "word": p.word_index}
            for p in rec.phones
        ],
        "word_scores": [[round(s, 4) for s in t] for t in rec.word_scores],
        "utterance_scores": {a: round(rec.utterance_scores[a], 4) for a in ASPECTS},
        "features": rec.id,
    }


def _record_from_json(obj: dict, lineno: int) -> UtteranceRecord:
    try:
        phones = [
            PhoneEntry(p["canonical"], p["realized"], float(p["score"]), int(p["word"]))
            for p in obj["phones"]
        ]
        return UtteranceRecord(
            id=str(obj["id"]),
            phones=phones,
            word_scores=[tuple(float(s) for s in t) for t in obj["word_scores"]],
            utterance_scores={a: float(v) for a, v in obj["utterance_scores"].items()},
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"corpus line {lineno}: malformed record: {e}") from e


def save_dataset(records: list[UtteranceRecord], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / CORPUS_FILE, "w") as f:
        for rec in records:
            f.write(json.dumps(_record_to_json(rec), sort_keys=True) + "\n")
    write_feature_file(out_dir / FEATURE_FILE,
                       {rec.id: rec.features for rec in records})


def load_dataset(path) -> list[UtteranceRecord]:
    path = Path(path)
    corpus_path = path / CORPUS_FILE if path.is_dir() else path
    if not corpus_path.exists():
        raise DatasetError(f"{corpus_path}: no such corpus file")
    features = read_feature_file(corpus_path.parent / FEATURE_FILE)
    records = []
    with open(corpus_path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"corpus line {lineno}: invalid JSON: {e}") from e
            rec = _record_from_json(obj, lineno)
            key = obj.get("features", rec.id)
            if key not in features:
                _fail(rec.id, "features", f"no feature matrix under key {key!r}")
            rec.features = features[key]
            validate_record(rec)
            records.append(rec)
    if not records:
        raise DatasetError(f"{corpus_path}: empty corpus")
    return records


# ---------------------------------------------------------------------------
# synthetic corpus with a planted generative rule


@dataclass
class PlantedRule:
    """Hidden maps tying features to scores and realized phones."""

    ssl_dim: int
    emb_realized: np.ndarray  # (41, ssl_dim)
    v_quality: np.ndarray  # (ssl_dim,)
    sub_map: np.ndarray  # (39,) substitution target per canonical phone

    @classmethod
    def make(cls, rule_seed: int, ssl_dim: int) -> "PlantedRule":
        rng = np.random.default_rng(rule_seed)
        emb = rng.normal(0.0, 1.0, size=(len(PHONES), ssl_dim))
        v_q = rng.normal(0.0, 1.0, size=ssl_dim)
        # fixed derangement: substitute each phone with its cyclic neighbor
        shift = int(rng.integers(1, len(ARPABET_39)))
        sub = (np.arange(len(ARPABET_39)) + shift) % len(ARPABET_39)
        return cls(ssl_dim, emb, v_q, sub)


def synth_records(n: int, seed: int, rule_seed: int = 0, ssl_dim: int = 32):
    """Generate n learnable utterances; returns (records, meta).

    Phone quality q drives everything: the GOP feature encodes q exactly,
    the ssl part encodes the realized phone and q with small noise, scores
    are affine in q plus bounded noise, and low-q phones get mispronounced.
    meta["bayes_phone_mse"] is the raw-scale MSE of the noiseless predictor
    2q against the stored phone scores, the floor any model can reach.
    """
    if n < 1:
        raise DatasetError("synthetic corpus needs n >= 1")
    rule = PlantedRule.make(rule_seed, ssl_dim)
    rng = np.random.default_rng(seed)
    records = []
    sq_err_sum = 0.0
    n_phone_total = 0
    for u in range(n):
        n_ph = int(rng.integers(3, 21))
        n_words = int(rng.integers(1, min(5, n_ph) + 1))
        cuts = np.sort(rng.choice(np.arange(1, n_ph), size=n_words - 1, replace=False))
        bounds = np.concatenate([[0], cuts, [n_ph]])
        word_of = np.zeros(n_ph, dtype=int)
        for w in range(n_words):
            word_of[bounds[w] : bounds[w + 1]] = w
        canonical = rng.integers(0, len(ARPABET_39), size=n_ph)
        q = rng.uniform(0.15, 0.85, size=n_ph)
        realized = canonical.copy()
        realized[q < 0.4] = rule.sub_map[canonical[q < 0.4]]
        realized[q < 0.2] = DEL_ID
        scores = 2.0 * q + rng.uniform(-0.3, 0.3, size=n_ph)
        gop = 2.5 * (q - 1.0)
        ssl = (rule.emb_realized[realized]
               + np.outer(q, rule.v_quality)
               + rng.normal(0.0, 0.05, size=(n_ph, ssl_dim)))
        feats = np.concatenate([gop[:, None], ssl], axis=1)

        phones = [
            PhoneEntry(PHONES[canonical[i]], PHONES[realized[i]],
                       round(float(scores[i]), 4), int(word_of[i]))
            for i in range(n_ph)
        ]
        word_scores = []
        for w in range(n_words):
            mq = float(q[word_of == w].mean())
            word_scores.append((
                10.0 * mq + float(rng.uniform(-0.5, 0.5)),
                10.0 * (0.3 + 0.5 * mq) + float(rng.uniform(-0.5, 0.5)),
                9.0 * mq + 0.5 + float(rng.uniform(-0.5, 0.5)),
            ))
        uq = float(q.mean())
        nv = rng.uniform(-0.4, 0.4, size=5)
        utt_scores = {
            "accuracy": 10.0 * uq + float(nv[0]),
            "completeness": 10.0 * (0.2 + 0.7 * uq) + float(nv[1]),
            "fluency": 10.0 * (0.1 + 0.8 * uq) + float(nv[2]),
            "prosody": 10.0 * (0.15 + 0.75 * uq) + float(nv[3]),
            "total": 9.0 * uq + 0.5 + float(nv[4]),
        }
        rec = UtteranceRecord(id=f"synth-{seed:08d}-{u:06d}", phones=phones,
                              word_scores=word_scores, utterance_scores=utt_scores,
                              features=feats)
        validate_record(rec)
        records.append(rec)
        sq_err_sum += float(((np.array([p.score for p in phones]) - 2.0 * q) ** 2).sum())
        n_phone_total += n_ph
    meta = {
        "n_utterances": n,
        "seed": seed,
        "rule_seed": rule_seed,
        "ssl_dim": ssl_dim,
        "n_phones": n_phone_total,
        "bayes_phone_mse": sq_err_sum / n_phone_total,
    }
    return records, meta


def synth_corpus(n: int, seed: int, out_dir, rule_seed: int = 0, ssl_dim: int = 32) -> dict:
    records, meta = synth_records(n, seed, rule_seed, ssl_dim)
    save_dataset(records, out_dir)
    with open(Path(out_dir) / META_FILE, "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    return meta


# ---------------------------------------------------------------------------
# run configuration (INI-style)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    train_data: str = ""
    test_data: str = ""


def load_run_config(path) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"{path}: cannot read config file")
    cfg = RunConfig()
    try:
        if cp.has_section("model"):
            m = cp["model"]
            e = cfg.encoder
            e.d_model = m.getint("d_model", e.d_model)
            e.d_state = m.getint("d_state", e.d_state)
            e.expand = m.getint("expand", e.expand)
            e.n_layers = m.getint("n_layers", e.n_layers)
            e.conv_width = m.getint("conv_width", e.conv_width)
            e.n_think = m.getint("think_tokens", e.n_think)
            e.d_attn = m.getint("d_attn", e.d_attn)
            e.scan_impl = m.get("scan_impl", e.scan_impl)
        if cp.has_section("training"):
            t = cp["training"]
            tc = cfg.training
            tc.alpha = t.getfloat("alpha", tc.alpha)
            tc.lr = t.getfloat("lr", tc.lr)
            tc.epochs = t.getint("epochs", tc.epochs)
            tc.batch_size = t.getint("batch_size", tc.batch_size)
            tc.seed = t.getint("seed", tc.seed)
            tc.optimizer = t.get("optimizer", tc.optimizer)
        if cp.has_section("data"):
            cfg.train_data = cp["data"].get("train", "")
            cfg.test_data = cp["data"].get("test", "")
    except ValueError as e:
        raise ConfigError(f"{path}: bad value in config: {e}") from e
    cfg.encoder.validate()
    cfg.training.validate()
    return cfg


# ---------------------------------------------------------------------------
# best-effort speechocean762 annotation importer (no audio features)


def _strip_phone(symbol: str) -> str:
    base = symbol.rstrip("0123456789*").upper()
    if symbol in (DEL, UNK):
        return symbol
    return base if base in PHONE_TO_ID else UNK


def import_speechocean(scores_json_path, out_corpus_path) -> int:
    """Convert a speechocean762 scores.json into corpus.jsonl records.

    Acoustic feature matrices are not derivable from the annotations and
    must be supplied separately; only the jsonl file is written.  Returns
    the number of converted records.
    """
    with open(scores_json_path) as f:
        raw = json.load(f)
    out_path = Path(out_corpus_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(out_path, "w") as out:
        for uid in sorted(raw):
            u = raw[uid]
            phones = []
            word_scores = []
            skip = False
            for wi, word in enumerate(u.get("words", [])):
                canon = [_strip_phone(p) for p in word.get("phones", [])]
                if any(c in (DEL, UNK) for c in canon):
                    skip = True  # canonical side must be a real phone
                    break
                realized = list(canon)
                for mis in word.get("mispronunciations", []):
                    idx = mis.get("index")
                    if idx is not None and 0 <= idx < len(realized):
                        realized[idx] = _strip_phone(str(mis.get("pronounced-phone", UNK)))
                accs = word.get("phones-accuracy", [2.0] * len(canon))
                for c, r, s in zip(canon, realized, accs):
                    phones.append({"canonical": c, "realized": r,
                                   "score": float(np.clip(s, 0.0, 2.0)), "word": wi})
                word_scores.append([float(np.clip(word.get(k, 0.0), 0.0, 10.0))
                                    for k in ("accuracy", "stress", "total")])
            if skip or not phones:
                continue
            rec = {
                "id": uid,
                "phones": phones,
                "word_scores": word_scores,
                "utterance_scores": {
                    "accuracy": float(np.clip(u.get("accuracy", 0.0), 0, 10)),
                    "completeness": float(np.clip(u.get("completeness", 0.0), 0, 10)),
                    "fluency": float(np.clip(u.get("fluency", 0.0), 0, 10)),
                    "prosody": float(np.clip(u.get("prosodic", u.get("prosody", 0.0)), 0, 10)),
                    "total": float(np.clip(u.get("total", 0.0), 0, 10)),
                },
                "features": uid,
            }
            out.write(json.dumps(rec, sort_keys=True) + "\n")
            count += 1
    return count
