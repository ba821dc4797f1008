import numpy as np
import pytest

from capt import diffcore as dc
from capt import training as tr
from capt.data import synth_records
from capt.encoder import EncoderConfig, ParamStore
from capt.errors import ConfigError, DatasetError
from capt.model import init_model
from capt.scoring import GraphOutputs


def tiny_model(seed=0, feat_dim=33):
    cfg = EncoderConfig(d_model=8, d_state=4, expand=2, n_layers=1,
                        conv_width=3, n_think=2)
    return init_model(cfg, feat_dim=feat_dim, seed=seed)


def fake_outputs(rng, n, w):
    return GraphOutputs(
        phone_scores=dc.Tensor(rng.uniform(size=n)),
        mdd_logits=dc.Tensor(rng.normal(size=(n, 41))),
        word_scores=dc.Tensor(rng.uniform(size=(w, 3))),
        utterance_scores=dc.Tensor(rng.uniform(size=5)),
    )


def test_train_config_validation():
    tr.TrainConfig().validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(alpha=1.5).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        tr.TrainConfig(optimizer="lion").validate()


def test_apa_loss_is_sum_of_level_mses():
    rng = np.random.default_rng(0)
    out = fake_outputs(rng, 6, 2)
    pt, wt, ut = rng.uniform(size=6), rng.uniform(size=(2, 3)), rng.uniform(size=5)
    l_phn, l_word, l_utt, l_apa = tr.apa_loss(out, pt, wt, ut)
    assert abs(float(l_phn.data) - ((out.phone_scores.data - pt) ** 2).mean()) < 1e-12
    assert abs(float(l_word.data) - ((out.word_scores.data - wt) ** 2).mean()) < 1e-12
    assert abs(float(l_utt.data) - ((out.utterance_scores.data - ut) ** 2).mean()) < 1e-12
    assert abs(float(l_apa.data) - float(l_phn.data + l_word.data + l_utt.data)) < 1e-12


def test_apa_loss_arity_and_missing_targets():
    rng = np.random.default_rng(1)
    out = fake_outputs(rng, 4, 2)
    with pytest.raises(DatasetError):
        tr.apa_loss(out, None, rng.uniform(size=(2, 3)), rng.uniform(size=5))
    with pytest.raises(DatasetError):
        tr.apa_loss(out, rng.uniform(size=3), rng.uniform(size=(2, 3)),
                    rng.uniform(size=5))


def test_mdd_loss_is_mean_cross_entropy():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 41))
    labels = rng.integers(0, 41, size=5)
    got = float(tr.mdd_loss(dc.Tensor(logits), labels).data)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    expect = -logp[np.arange(5), labels].mean()
    assert abs(got - expect) < 1e-12


def test_total_loss_identity_and_alpha_limits():
    l_apa = dc.Tensor(np.asarray(2.0))
    l_mdd = dc.Tensor(np.asarray(6.0))
    assert abs(float(tr.total_loss(l_apa, l_mdd, 0.3).data) - (0.7 * 2 + 0.3 * 6)) < 1e-12
    assert float(tr.total_loss(l_apa, l_mdd, 0.0).data) == 2.0
    assert float(tr.total_loss(l_apa, l_mdd, 1.0).data) == 6.0
    with pytest.raises(ConfigError):
        tr.total_loss(l_apa, l_mdd, -0.1)


def test_batch_loss_breakdown_identity():
    records, _ = synth_records(4, seed=3, ssl_dim=8)
    model = tiny_model(feat_dim=9)
    total, bd = tr.batch_loss(model, records, alpha=0.3)
    assert abs(bd.l_apa - (bd.l_phn + bd.l_word + bd.l_utt)) < 1e-12
    assert abs(float(total.data) - (0.7 * bd.l_apa + 0.3 * bd.l_mdd)) < 1e-12
    assert abs(float(total.data) - bd.l_total(0.3)) < 1e-12


def test_batch_loss_averages_per_utterance():
    records, _ = synth_records(3, seed=4, ssl_dim=8)
    model = tiny_model(feat_dim=9)
    _, bd_all = tr.batch_loss(model, records, alpha=0.3)
    singles = [tr.batch_loss(model, [r], alpha=0.3)[1] for r in records]
    assert abs(bd_all.l_phn - np.mean([b.l_phn for b in singles])) < 1e-12
    assert abs(bd_all.l_mdd - np.mean([b.l_mdd for b in singles])) < 1e-12


def test_adam_on_quadratic_converges():
    store = ParamStore()
    store.add("x", np.array([5.0, -3.0]))
    opt = tr.Adam(store, lr=0.1)
    for _ in range(300):
        store.zero_grad()
        with dc.Tape() as tape:
            tape.backward(dc.mse(store["x"], np.zeros(2)))
        opt.step()
    assert np.abs(store["x"].data).max() < 1e-3


def test_sgd_matches_manual_update():
    store = ParamStore()
    store.add("x", np.array([1.0, 2.0]))
    opt = tr.Sgd(store, lr=0.5)
    store.zero_grad()
    with dc.Tape() as tape:
        tape.backward(dc.total_sum(dc.mul(store["x"], store["x"])))
    before = store["x"].data.copy()
    grad = store["x"].grad.copy()
    opt.step()
    np.testing.assert_allclose(store["x"].data, before - 0.5 * grad, atol=1e-15)
    np.testing.assert_allclose(grad, 2 * before, atol=1e-15)


def test_train_loss_decreases_and_logs(tmp_path):
    records, _ = synth_records(8, seed=5, ssl_dim=8)
    model = tiny_model(feat_dim=9)
    cfg = tr.TrainConfig(lr=3e-3, epochs=8, batch_size=4, seed=0)
    log = tmp_path / "loss.csv"
    hist = tr.train(records, cfg, model, log_path=log)
    assert len(hist) == 8
    assert hist[-1].l_total(cfg.alpha) < hist[0].l_total(cfg.alpha)
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "epoch,l_phn,l_word,l_utt,l_mdd,l_total"
    assert len(lines) == 9
    # logged floats round-trip exactly
    row = lines[1].split(",")
    assert float(row[1]) == hist[0].l_phn


def test_train_is_deterministic(tmp_path):
    records, _ = synth_records(6, seed=6, ssl_dim=8)
    cfg = tr.TrainConfig(lr=2e-3, epochs=3, batch_size=4, seed=7)
    outs = []
    for run in range(2):
        model = tiny_model(seed=1, feat_dim=9)
        log = tmp_path / f"run{run}.csv"
        tr.train(records, cfg, model, log_path=log)
        outs.append(log.read_bytes())
    assert outs[0] == outs[1]


def test_train_empty_dataset_and_callback_stop():
    model = tiny_model(feat_dim=9)
    with pytest.raises(DatasetError):
        tr.train([], tr.TrainConfig(), model)
    records, _ = synth_records(4, seed=8, ssl_dim=8)
    hist = tr.train(records, tr.TrainConfig(epochs=10, batch_size=4), model,
                    callback=lambda e, bd: e == 2)
    assert len(hist) == 3


def test_training_set_stats_ranges():
    records, _ = synth_records(4, seed=9, ssl_dim=8)
    model = tiny_model(feat_dim=9)
    mse, acc = tr.training_set_stats(model, records)
    assert mse >= 0.0
    assert 0.0 <= acc <= 1.0


def test_overfit_sanity_rejects_bad_sizes():
    cfg = EncoderConfig(d_model=8, d_state=4, n_layers=1)
    with pytest.raises(DatasetError):
        tr.overfit_sanity(0, cfg, tr.TrainConfig())
    from capt.errors import ContractError
    with pytest.raises(ContractError):
        tr.overfit_sanity(65, cfg, tr.TrainConfig())
