"""Multi-task objective and the optimizer loop.

The total loss is (1 - alpha) * L_apa + alpha * L_mdd with alpha = 0.3 by
default; L_apa is the sum of phone-, word- and utterance-level MSE terms in
normalized [0, 1] score space, L_mdd the mean cross-entropy of the realized
phone classifier.  Batches average per-utterance terms so utterance length
does not reweight the objective.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .encoder import ParamStore
from .errors import ConfigError, ContractError, DatasetError, NumericError
from .scoring import GraphOutputs


@dataclass
class TrainConfig:
    alpha: float = 0.3
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"

    def validate(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("lr/epochs must be >= 0, batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LossBreakdown:
    l_phn: float
    l_word: float
    l_utt: float
    l_mdd: float

    @property
    def l_apa(self) -> float:
        return self.l_phn + self.l_word + self.l_utt

    def l_total(self, alpha: float) -> float:
        return (1.0 - alpha) * self.l_apa + alpha * self.l_mdd


# ---------------------------------------------------------------------------
# loss terms


def apa_loss(out: GraphOutputs, phone_t, word_t, utt_t):
    """Per-level MSE terms; returns (l_phn, l_word, l_utt, l_apa) tensors."""
    for name, pred, tgt in (("phone", out.phone_scores, phone_t),
                            ("word", out.word_scores, word_t),
                            ("utterance", out.utterance_scores, utt_t)):
        if tgt is None:
            raise DatasetError(f"missing {name}-level target scores")
        if pred.data.shape != np.asarray(tgt).shape:
            raise DatasetError(
                f"{name}-level arity mismatch: prediction {pred.data.shape} "
                f"vs target {np.asarray(tgt).shape}"
            )
    l_phn = dc.mse(out.phone_scores, phone_t)
    l_word = dc.mse(out.word_scores, word_t)
    l_utt = dc.mse(out.utterance_scores, utt_t)
    return l_phn, l_word, l_utt, dc.add(dc.add(l_phn, l_word), l_utt)


def mdd_loss(mdd_logits: dc.Tensor, realized_ids) -> dc.Tensor:
    return dc.cross_entropy(mdd_logits, realized_ids)


def total_loss(l_apa: dc.Tensor, l_mdd: dc.Tensor, alpha: float) -> dc.Tensor:
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha {alpha} outside [0, 1]")
    return dc.add(dc.scale(l_apa, 1.0 - alpha), dc.scale(l_mdd, alpha))


def batch_loss(model, batch, alpha: float):
    """Averaged loss over a batch of utterance records.

    Returns (graph total loss, LossBreakdown of the averaged terms).
    """
    phn_terms, word_terms, utt_terms, mdd_terms = [], [], [], []
    for rec in batch:
        out = model.forward(rec.features, rec.canonical_ids(), rec.word_spans())
        l_phn, l_word, l_utt, _ = apa_loss(
            out, rec.phone_targets_norm(), rec.word_targets_norm(), rec.utt_targets_norm()
        )
        phn_terms.append(l_phn)
        word_terms.append(l_word)
        utt_terms.append(l_utt)
        mdd_terms.append(mdd_loss(out.mdd_logits, rec.realized_ids()))
    l_phn_b = dc.mean(dc.stack(phn_terms))
    l_word_b = dc.mean(dc.stack(word_terms))
    l_utt_b = dc.mean(dc.stack(utt_terms))
    l_mdd_b = dc.mean(dc.stack(mdd_terms))
    l_apa_b = dc.add(dc.add(l_phn_b, l_word_b), l_utt_b)
    graph_total = total_loss(l_apa_b, l_mdd_b, alpha)
    breakdown = LossBreakdown(float(l_phn_b.data), float(l_word_b.data),
                              float(l_utt_b.data), float(l_mdd_b.data))
    return graph_total, breakdown


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, params: ParamStore, lr: float):
        self.params = params
        self.lr = lr

    def step(self):
        for t in self.params.tensors():
            if t.grad is not None:
                t.data -= self.lr * t.grad


class Adam:
    def __init__(self, params: ParamStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self):
        self.t += 1
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1**self.t)
            v_hat = self.v[name] / (1 - self.b2**self.t)
            t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, params: ParamStore):
    return Adam(params, cfg.lr) if cfg.optimizer == "adam" else Sgd(params, cfg.lr)


# ---------------------------------------------------------------------------
# training loop


def train(records, cfg: TrainConfig, model, log_path=None,
          callback=None) -> list[LossBreakdown]:
    """Deterministic (given seed) epoch loop; returns per-epoch breakdowns."""
    cfg.validate()
    if not records:
        raise DatasetError("training on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg, model.params)
    history: list[LossBreakdown] = []
    log_file = open(log_path, "a", newline="") if log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file)
        if log_file.tell() == 0:
            writer.writerow(["epoch", "l_phn", "l_word", "l_utt", "l_mdd", "l_total"])
    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(len(records))
            sums = np.zeros(4)
            n_batches = 0
            for start in range(0, len(records), cfg.batch_size):
                batch = [records[i] for i in perm[start : start + cfg.batch_size]]
                model.params.zero_grad()
                with dc.Tape() as tape:
                    loss, bd = batch_loss(model, batch, cfg.alpha)
                    if not np.isfinite(loss.data):
                        raise NumericError(
                            f"non-finite loss at epoch {epoch}, batch {n_batches}"
                        )
                    tape.backward(loss)
                opt.step()
                sums += [bd.l_phn, bd.l_word, bd.l_utt, bd.l_mdd]
                n_batches += 1
            bd = LossBreakdown(*(float(v) for v in sums / n_batches))
            history.append(bd)
            if writer:
                writer.writerow([epoch, repr(bd.l_phn), repr(bd.l_word),
                                 repr(bd.l_utt), repr(bd.l_mdd),
                                 repr(bd.l_total(cfg.alpha))])
            if callback and callback(epoch, bd):
                break
    finally:
        if log_file:
            log_file.close()
    return history


# ---------------------------------------------------------------------------
# overfit / capacity harness


def training_set_stats(model, records) -> tuple[float, float]:
    """(phone MSE in normalized space, MDD classification accuracy)."""
    sq, n, correct = 0.0, 0, 0
    for rec in records:
        pred = model.predict(rec.features, rec.canonical_ids(), rec.word_spans())
        tgt = rec.phone_targets_norm()
        sq += float(((pred.phone_scores - tgt) ** 2).sum())
        correct += int((pred.mdd_logits.argmax(axis=1) == rec.realized_ids()).sum())
        n += rec.n_phones
    return sq / n, correct / n


def overfit_sanity(n_utts: int, encoder_cfg, train_cfg: TrainConfig,
                   max_epochs: int = 500, mse_threshold: float = 0.01,
                   acc_threshold: float = 0.99) -> dict:
    """Memorization check on a tiny synthetic set."""
    if n_utts < 1:
        raise DatasetError("overfit sanity needs at least 1 utterance")
    if n_utts > 64:
        raise ContractError("overfit sanity is meant for <= 64 utterances")
    from . import model as model_mod
    from .data import synth_records

    records, _ = synth_records(n_utts, seed=train_cfg.seed, rule_seed=0)
    feat_dim = records[0].features.shape[1]
    model = model_mod.init_model(encoder_cfg, feat_dim, seed=train_cfg.seed)

    state = {"epochs": 0}

    def stop(epoch, bd):
        state["epochs"] = epoch + 1
        if (epoch + 1) % 25 == 0 or epoch + 1 == max_epochs:
            mse_now, acc_now = training_set_stats(model, records)
            return mse_now < mse_threshold and acc_now > acc_threshold
        return False

    cfg = TrainConfig(alpha=train_cfg.alpha, lr=train_cfg.lr, epochs=max_epochs,
                      batch_size=min(train_cfg.batch_size, n_utts),
                      seed=train_cfg.seed, optimizer=train_cfg.optimizer)
    train(records, cfg, model, callback=stop)
    mse_final, acc_final = training_set_stats(model, records)
    return {
        "n_utterances": n_utts,
        "epochs_run": state["epochs"],
        "phone_mse": mse_final,
        "mdd_accuracy": acc_final,
        "passed": mse_final < mse_threshold and acc_final > acc_threshold,
    }
