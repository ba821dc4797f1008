"""Finite-difference verification of every layer and the full tiny model.

Each entry builds a small random instance, wires it into a scalar loss and
compares the tape gradients against central differences.  The CLI
``gradcheck`` subcommand runs this suite and exits 0 iff every entry stays
within the 1e-4 relative tolerance.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import model as model_mod
from . import scoring
from .encoder import EncoderConfig, ParamStore, init_encoder_params, mamba_block
from .scan import selective_scan
from .training import TrainConfig, batch_loss

TOLERANCE = 1e-4

TINY_CFG = EncoderConfig(d_model=8, d_state=4, expand=2, n_layers=1,
                         conv_width=4, n_think=2, d_attn=4)


def _p(rng, shape):
    return dc.Tensor(rng.normal(0.0, 0.7, size=shape), requires_grad=True)


def _primitive_checks(rng):
    checks = []

    a, b = _p(rng, (3, 4)), _p(rng, (4, 2))
    checks.append(("matmul", lambda: dc.mean(dc.matmul(a, b)), [a, b]))

    x, y = _p(rng, (5,)), _p(rng, (5,))
    checks.append(("add_mul", lambda: dc.mean(dc.mul(dc.add(x, y), x)), [x, y]))

    z = _p(rng, (4, 3))
    checks.append(("tanh", lambda: dc.mean(dc.tanh(z)), [z]))
    checks.append(("silu", lambda: dc.mean(dc.silu(z)), [z]))
    checks.append(("exp", lambda: dc.mean(dc.exp(z)), [z]))
    checks.append(("softplus", lambda: dc.mean(dc.softplus(z)), [z]))
    checks.append(("softmax", lambda: dc.mean(dc.mul(dc.softmax(z), z)), [z]))

    p = _p(rng, (6,))
    tgt = rng.normal(size=6)
    checks.append(("mse", lambda: dc.mse(p, tgt), [p]))

    logits = _p(rng, (5, 7))
    labels = rng.integers(0, 7, size=5)
    checks.append(("cross_entropy", lambda: dc.cross_entropy(logits, labels), [logits]))

    xc, k, bias = _p(rng, (6, 3)), _p(rng, (4, 3)), _p(rng, (3,))
    checks.append(("conv1d_causal",
                   lambda: dc.mean(dc.conv1d_causal(xc, k, bias)), [xc, k, bias]))

    t_len, ci, s = 5, 3, 2
    xs = _p(rng, (t_len, ci))
    a_raw = _p(rng, (t_len, ci, s))
    bb = _p(rng, (t_len, ci, s))
    cc = _p(rng, (t_len, s))
    dd = _p(rng, (ci,))

    def scan_loss():
        a_bar = dc.sigmoid(a_raw)  # keep the recurrence stable under probing
        return dc.mean(selective_scan(xs, a_bar, bb, cc, dd))

    checks.append(("selective_scan", scan_loss, [xs, a_raw, bb, cc, dd]))
    return checks


def _layer_checks(rng):
    checks = []

    cfg = EncoderConfig(d_model=4, d_state=3, expand=2, n_layers=1,
                        conv_width=3, n_think=0)
    store = ParamStore()
    init_encoder_params(cfg, rng, store)
    xin = rng.normal(size=(6, 4))

    def block_loss():
        return dc.mean(mamba_block(dc.Tensor(xin), store, "enc.l0.fwd", cfg))

    checks.append(("mamba_block", block_loss, store.tensors()))

    pool_store = ParamStore()
    scoring.init_scoring_params(d_model=5, d_attn=3, rng=rng, store=pool_store)
    h = rng.normal(size=(4, 5))
    spans = [(0, 2), (2, 4)]
    phone_tgt = rng.uniform(size=4)
    word_tgt = rng.uniform(size=(2, 3))
    utt_tgt = rng.uniform(size=5)
    labels = rng.integers(0, 41, size=4)

    def heads_loss():
        ht = dc.Tensor(h)
        scores, logits = scoring.phone_level_outputs(ht, pool_store)
        words = scoring.word_level_outputs(ht, spans, pool_store)
        utts = scoring.utterance_level_outputs(ht, pool_store)
        l = dc.add(dc.mse(scores, phone_tgt), dc.mse(words, word_tgt))
        l = dc.add(l, dc.mse(utts, utt_tgt))
        return dc.add(l, dc.cross_entropy(logits, labels))

    checks.append(("pooling_and_heads", heads_loss, pool_store.tensors()))
    return checks


def _full_model_check(seed: int):
    from .data import synth_records

    records, _ = synth_records(8, seed=seed, rule_seed=0, ssl_dim=6)
    # pin the tiny geometry: 5 phones, d_model 8, K = 2
    rec = next(r for r in records if r.n_phones >= 5)
    rec.features = rec.features[:5]
    rec.phones = rec.phones[:5]
    rec.word_scores = rec.word_scores[: rec.phones[4].word_index + 1]
    model = model_mod.init_model(TINY_CFG, feat_dim=7, seed=seed)

    def loss():
        l, _ = batch_loss(model, [rec], alpha=0.3)
        return l

    # 3e-4 balances truncation against float64 roundoff over the deep graph
    return ("full_model_tiny", loss, model.params.tensors(), 3e-4)


def run_suite(seed: int = 0, include_full_model: bool = True):
    """Returns a list of (name, max_rel_err, passed)."""
    rng = np.random.default_rng(seed)
    checks = [(n, f, p, 1e-4) for n, f, p in _primitive_checks(rng) + _layer_checks(rng)]
    if include_full_model:
        checks.append(_full_model_check(seed))
    results = []
    for name, f, params, eps in checks:
        err = dc.grad_check(f, params, epsilon=eps)
        results.append((name, err, err <= TOLERANCE))
    return results
