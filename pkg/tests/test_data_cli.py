import json

import numpy as np
import pytest

from capt import cli
from capt import data as dm
from capt.errors import ConfigError, DatasetError


def make_record(uid="u0"):
    phones = [
        dm.PhoneEntry("B", "B", 1.8, 0),
        dm.PhoneEntry("AA", "AE", 0.7, 0),
        dm.PhoneEntry("T", "<del>", 0.1, 1),
    ]
    return dm.UtteranceRecord(
        id=uid,
        phones=phones,
        word_scores=[(8.0, 7.0, 8.0), (2.0, 3.0, 2.0)],
        utterance_scores={a: 5.0 for a in
                          ("accuracy", "completeness", "fluency", "prosody", "total")},
        features=np.arange(9.0).reshape(3, 3),
    )


# --- record views and validation -------------------------------------------

def test_record_derived_views():
    rec = make_record()
    np.testing.assert_array_equal(rec.canonical_ids(), [6, 0, 30])
    assert rec.realized_ids()[2] == 39  # <del>
    assert rec.word_spans() == [(0, 2), (2, 3)]
    np.testing.assert_allclose(rec.phone_targets_norm(), [0.9, 0.35, 0.05])
    assert rec.word_targets_norm().shape == (2, 3)
    assert rec.utt_targets_norm().shape == (5,)
    np.testing.assert_allclose(rec.utt_targets_norm(), 0.5)


def test_normalize_denormalize_round_trip():
    for level, top in (("phone", 2.0), ("word", 10.0), ("utterance", 10.0)):
        assert dm.normalize_score(top, level) == 1.0
        assert dm.denormalize_score(1.0, level) == top
        assert abs(dm.denormalize_score(dm.normalize_score(0.7, level), level) - 0.7) < 1e-15


@pytest.mark.parametrize("mutate,field", [
    (lambda r: r.phones.clear(), "phones"),
    (lambda r: setattr(r.phones[0], "canonical", "<del>"), "canonical"),
    (lambda r: setattr(r.phones[0], "realized", "ZZ"), "realized"),
    (lambda r: setattr(r.phones[0], "score", 2.5), "score"),
    (lambda r: setattr(r.phones[2], "word_index", 3), "word"),
    (lambda r: r.word_scores.pop(), "word_scores"),
    (lambda r: r.utterance_scores.pop("fluency"), "utterance_scores"),
    (lambda r: setattr(r, "features", np.zeros((2, 3))), "features"),
])
def test_validate_record_names_offender(mutate, field):
    rec = make_record("bad-utt")
    mutate(rec)
    with pytest.raises(DatasetError) as e:
        dm.validate_record(rec)
    msg = str(e.value)
    assert "bad-utt" in msg and field in msg


# --- feature container and corpus round trip --------------------------------

def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mats = {f"u{i}": rng.normal(size=(int(rng.integers(1, 6)), 4)).astype(np.float32)
            for i in range(5)}
    path = tmp_path / "features.bin"
    dm.write_feature_file(path, mats)
    back = dm.read_feature_file(path)
    assert set(back) == set(mats)
    for k in mats:
        np.testing.assert_array_equal(back[k], mats[k].astype(np.float64))


def test_feature_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "features.bin"
    path.write_bytes(b"NOTAFEATUREFILE!")
    with pytest.raises(DatasetError):
        dm.read_feature_file(path)


def test_dataset_round_trip(tmp_path):
    records, _ = dm.synth_records(5, seed=1, ssl_dim=8)
    dm.save_dataset(records, tmp_path)
    back = dm.load_dataset(tmp_path)
    assert [r.id for r in back] == [r.id for r in records]
    for a, b in zip(records, back):
        np.testing.assert_array_equal(a.canonical_ids(), b.canonical_ids())
        np.testing.assert_array_equal(a.realized_ids(), b.realized_ids())
        assert a.word_spans() == b.word_spans()
        # features survive the float32 container
        np.testing.assert_allclose(a.features, b.features, atol=1e-6)
        # scores are rounded to 4 decimals on write
        np.testing.assert_allclose(a.phone_targets_norm(), b.phone_targets_norm(),
                                   atol=1e-4)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        dm.load_dataset(tmp_path / "nowhere")
    records, _ = dm.synth_records(2, seed=2, ssl_dim=8)
    dm.save_dataset(records, tmp_path)
    (tmp_path / dm.CORPUS_FILE).write_text("")
    with pytest.raises(DatasetError):
        dm.load_dataset(tmp_path)
    (tmp_path / dm.CORPUS_FILE).write_text("{not json\n")
    with pytest.raises(DatasetError) as e:
        dm.load_dataset(tmp_path)
    assert "line 1" in str(e.value)


# --- synthetic generator ----------------------------------------------------

def test_synth_records_planted_rule_consistency():
    records, meta = dm.synth_records(20, seed=3, ssl_dim=8)
    assert meta["n_phones"] == sum(r.n_phones for r in records)
    assert 0.02 < meta["bayes_phone_mse"] < 0.04  # Var(U(-0.3, 0.3)) = 0.03
    for rec in records:
        # gop column encodes quality exactly: q = gop/2.5 + 1
        q = rec.features[:, 0] / 2.5 + 1.0
        assert ((q > 0.149) & (q < 0.851)).all()
        canon = rec.canonical_ids()
        real = rec.realized_ids()
        # realization policy is a deterministic function of q
        assert (real[q >= 0.4] == canon[q >= 0.4]).all()
        mid = (q >= 0.2) & (q < 0.4)
        assert (real[mid] != canon[mid]).all()
        assert (real[q < 0.2] == 39).all()  # <del>
        # scores are 2q plus bounded noise
        raw = np.array([p.score for p in rec.phones])
        assert np.abs(raw - 2.0 * q).max() < 0.301


def test_synth_determinism_and_seed_sensitivity():
    a1, m1 = dm.synth_records(4, seed=5, ssl_dim=8)
    a2, _ = dm.synth_records(4, seed=5, ssl_dim=8)
    b, _ = dm.synth_records(4, seed=6, ssl_dim=8)
    for x, y in zip(a1, a2):
        np.testing.assert_array_equal(x.features, y.features)
    assert not np.array_equal(a1[0].features, b[0].features)
    with pytest.raises(DatasetError):
        dm.synth_records(0, seed=0)


# --- run config -------------------------------------------------------------

def test_load_run_config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(
        "[model]\nd_model = 24\nn_layers = 3\nthink_tokens = 6\n"
        "[training]\nlr = 0.005\nepochs = 12\noptimizer = sgd\n"
        "[data]\ntrain = /tmp/train\ntest = /tmp/test\n"
    )
    cfg = dm.load_run_config(path)
    assert cfg.encoder.d_model == 24
    assert cfg.encoder.n_layers == 3
    assert cfg.encoder.n_think == 6
    assert cfg.training.lr == 0.005
    assert cfg.training.epochs == 12
    assert cfg.training.optimizer == "sgd"
    assert cfg.train_data == "/tmp/train"


def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        dm.load_run_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nd_model = many\n")
    with pytest.raises(ConfigError):
        dm.load_run_config(bad)
    bad.write_text("[training]\nalpha = 7\n")
    with pytest.raises(ConfigError):
        dm.load_run_config(bad)


# --- speechocean importer ---------------------------------------------------

def test_import_speechocean(tmp_path):
    raw = {
        "000010011": {
            "accuracy": 8, "completeness": 10.0, "fluency": 9,
            "prosodic": 9, "total": 8,
            "words": [
                {"phones": ["W", "IY0"], "phones-accuracy": [2.0, 1.8],
                 "accuracy": 10, "stress": 10, "total": 10,
                 "mispronunciations": []},
                {"phones": ["K", "AO1", "L"], "phones-accuracy": [2.0, 0.4, 2.0],
                 "accuracy": 6, "stress": 10, "total": 6,
                 "mispronunciations": [{"index": 1, "pronounced-phone": "AA"}]},
            ],
        },
        "000010012": {
            "accuracy": 5, "completeness": 10, "fluency": 5, "prosodic": 5,
            "total": 5,
            "words": [{"phones": ["<unk>"], "phones-accuracy": [0.0]}],
        },
    }
    src = tmp_path / "scores.json"
    src.write_text(json.dumps(raw))
    out = tmp_path / "corpus.jsonl"
    n = dm.import_speechocean(src, out)
    assert n == 1  # the <unk>-canonical utterance is skipped
    rec = json.loads(out.read_text().splitlines()[0])
    assert rec["id"] == "000010011"
    assert [p["canonical"] for p in rec["phones"]] == ["W", "IY", "K", "AO", "L"]
    assert rec["phones"][3]["realized"] == "AA"
    assert rec["utterance_scores"]["prosody"] == 9.0


# --- CLI --------------------------------------------------------------------

def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_synth_train_eval_score(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    code, out, _ = run_cli(["synth", "--n", "12", "--seed", "7",
                            "--out", str(corpus), "--ssl-dim", "8"], capsys)
    assert code == 0
    meta = json.loads(out)
    assert meta["n_utterances"] == 12
    assert (corpus / "corpus.jsonl").exists()
    assert (corpus / "features.bin").exists()
    assert (corpus / "corpus_meta.json").exists()

    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nd_model = 16\nd_state = 4\nn_layers = 1\n"
                   "think_tokens = 2\n"
                   "[training]\nepochs = 2\nbatch_size = 6\nlr = 0.002\n")
    model_path = tmp_path / "model.capt"
    code, out, _ = run_cli(["train", "--config", str(ini), "--data", str(corpus),
                            "--out", str(model_path)], capsys)
    assert code == 0
    assert model_path.exists()
    log = tmp_path / "model.capt.loss.csv"
    assert log.exists()
    assert len(log.read_text().strip().splitlines()) == 3

    report_path = tmp_path / "report.json"
    code, out, _ = run_cli(["eval", "--model", str(model_path),
                            "--data", str(corpus), "--out", str(report_path)], capsys)
    assert code == 0
    report = json.loads(out)
    assert report["n_utterances"] == 12
    assert json.loads(report_path.read_text()) == report

    some_id = json.loads((corpus / "corpus.jsonl").read_text().splitlines()[0])["id"]
    code, out, _ = run_cli(["score", "--model", str(model_path),
                            "--data", str(corpus), "--id", some_id], capsys)
    assert code == 0
    pred = json.loads(out)
    assert pred["id"] == some_id
    assert len(pred["phone_scores"]) == len(pred["mdd_predicted"])


def test_cli_errors_exit_codes(tmp_path, capsys):
    code, _, err = run_cli(["eval", "--model", str(tmp_path / "missing.capt"),
                            "--data", str(tmp_path)], capsys)
    assert code == 1
    assert "error:" in err
    with pytest.raises(SystemExit) as e:
        cli.main(["synth"])  # missing required args
    assert e.value.code == 2
    capsys.readouterr()


def test_cli_score_unknown_id(tmp_path, capsys):
    corpus = tmp_path / "c"
    run_cli(["synth", "--n", "2", "--seed", "1", "--out", str(corpus),
             "--ssl-dim", "8"], capsys)
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nd_model = 8\nd_state = 4\nn_layers = 1\n"
                   "[training]\nepochs = 1\n")
    model_path = tmp_path / "m.capt"
    run_cli(["train", "--config", str(ini), "--data", str(corpus),
             "--out", str(model_path)], capsys)
    code, _, err = run_cli(["score", "--model", str(model_path),
                            "--data", str(corpus), "--id", "nope"], capsys)
    assert code == 1 and "nope" in err
