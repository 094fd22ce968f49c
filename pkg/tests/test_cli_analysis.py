import dataclasses
import json

import numpy as np
import pytest

from ainfonce import analysis
from ainfonce.cli import main
from ainfonce.data import load_csv_dataset
from ainfonce.persistence import config_hash, load_checkpoint, load_config, read_csv
from ainfonce.train_eval import evaluate, finetune, pretrain

TINY = {"seed": 3, "data": {"classes": 3, "dim": 6, "n_train": 10, "n_test": 6},
        "encoder": {"hidden": [12], "k": 6},
        "train": {"epochs": 2, "batch_size": 16},
        "anneal": {"warmup_epochs": 1},
        "finetune": {"epochs": 2, "batch_size": 16}}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_full_cli_cycle(tmp_path, cfg_path, capsys):
    ck, model, hist = tmp_path / "ck.bin", tmp_path / "model.bin", tmp_path / "h.csv"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(ck), "--seed", "7"]) == 0
    assert ck.exists()
    comment, rows = read_csv(f"{ck}.metrics.csv")
    cfg = load_config(cfg_path)
    cfg.seed = 7
    assert comment == f"# config_sha256={config_hash(cfg)} seed=7"
    assert [r["epoch"] for r in rows] == [0.0, 1.0]

    assert main(["finetune", "--config", str(cfg_path), "--checkpoint", str(ck),
                 "--mode", "ALF", "--out", str(model)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(model)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0 <= report["RA"] <= 1 and report["attack"]["steps"] == 20

    assert main(["dist-hist", "--config", str(cfg_path), "--checkpoint", str(ck),
                 "--bins", "5", "--out", str(hist)]) == 0
    _, bins = read_csv(hist)
    assert len(bins) == 5 and abs(sum(b["count"] for b in bins) - 1) <= 1e-9


def test_pretrain_is_reproducible_through_the_cli(tmp_path, cfg_path):
    outs = []
    for k in range(2):
        ck = tmp_path / f"ck{k}.bin"
        assert main(["pretrain", "--config", str(cfg_path), "--out", str(ck)]) == 0
        outs.append((ck.read_bytes(), (tmp_path / f"ck{k}.bin.metrics.csv").read_text()))
    assert outs[0] == outs[1]


def test_gen_data(tmp_path, cfg_path):
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d")]) == 0
    train = load_csv_dataset(tmp_path / "d" / "train.csv")
    assert (train.n, train.dim) == (30, 6)


def test_usage_errors(tmp_path, cfg_path, capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["pretrain", "--config", str(cfg_path)]) == 1
    assert "--out" in capsys.readouterr().err
    assert main(["pretrain", "--bogus-flag", "--out", "x"]) == 1
    assert "--bogus-flag" in capsys.readouterr().err
    assert main(["sweep-alpha", "--alphas", "a,b", "--out", "x"]) == 1


def test_runtime_errors_exit_2(tmp_path, cfg_path, capsys):
    assert main(["eval", "--config", str(tmp_path / "missing.json"), "--checkpoint", "x"]) == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX")
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(bad)]) == 2
    assert "XXXX" in capsys.readouterr().err
    unknown = tmp_path / "unknown.json"
    unknown.write_text('{"trian": {}}')
    assert main(["pretrain", "--config", str(unknown), "--out", str(tmp_path / "o")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--suite", "losses", "--suite", "encoder"]) == 0
    out = capsys.readouterr().out
    assert "PASS losses: 50 checks" in out and "PASS encoder" in out


def test_gradcheck_reports_failures(monkeypatch, capsys):
    bad = {"broken": lambda seed: [analysis.GradResult("broken", "x", 1.0, 1e-5)]}
    monkeypatch.setattr(analysis, "GRAD_SUITES", bad)
    assert main(["gradcheck"]) == 2
    assert "FAIL broken" in capsys.readouterr().out


def test_sweep_alpha_cli(tmp_path, cfg_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep-alpha", "--config", str(cfg_path), "--alphas", "1.0,0.3",
                 "--epochs", "1", "--finetune-epochs", "1", "--out", str(out)]) == 0
    comment, rows = read_csv(out)
    assert comment.startswith("# config_sha256=")
    assert [r["alpha"] for r in rows] == [0.3, 1.0]
    assert set(rows[0]) == {"alpha", "SA", "RA", "collapse"}


def test_sweep_rejects_out_of_range(cfg_path):
    with pytest.raises(ValueError):
        analysis.alpha_sweep(load_config(cfg_path), [1.5])


def test_sweep_at_half_equals_symmetric_run(cfg_path):
    cfg = load_config(cfg_path)
    (row,) = analysis.alpha_sweep(cfg, [0.5])
    train, test = cfg.datasets()
    tcfg = dataclasses.replace(cfg.train_config(), loss_kind="infonce")
    enc, _ = pretrain(tcfg, train)
    model = finetune(enc, train, "LP", cfg.finetune_config())
    rep = evaluate(model, test, cfg.eval_attack, seed=cfg.seed)
    from ainfonce.train_eval import collapse_metric
    assert row["SA"] == rep.sa and row["RA"] == rep.ra
    assert abs(row["collapse"] - collapse_metric(enc.encode(test.X)[1])) <= 1e-9


# ---------------------------------------------------------------------------
# histograms


def test_identical_embeddings_fill_first_bin():
    rows = analysis.histogram_from_embeddings(np.tile([1.0, 0.0], (6, 1)), 4)
    assert rows[0]["count"] == 1.0 and all(r["count"] == 0 for r in rows[1:])
    assert rows[0]["bin_lo"] == 0.0 and rows[-1]["bin_hi"] == 2.0


def test_antipodal_clusters_fill_last_bin():
    Z = np.vstack([np.tile([1.0, 0.0], (3, 1)), np.tile([-1.0, 0.0], (3, 1))])
    rows = analysis.histogram_from_embeddings(Z, 4)
    # 9 cross pairs at distance 2, 6 within-cluster pairs at 0
    assert rows[-1]["count"] == pytest.approx(9 / 15)
    assert rows[0]["count"] == pytest.approx(6 / 15)


def test_histogram_normalization_and_errors():
    Z = np.random.default_rng(0).standard_normal((30, 5))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    for bins in (2, 7, 50):
        assert abs(sum(r["count"] for r in analysis.histogram_from_embeddings(Z, bins)) - 1) <= 1e-9
    with pytest.raises(ValueError):
        analysis.histogram_from_embeddings(Z, 1)
    with pytest.raises(ValueError):
        analysis.negative_pair_distances(Z[:1])


def test_registered_suites():
    assert set(analysis.GRAD_SUITES) == {"primitives", "encoder", "losses"}


def test_checkpoint_from_cli_loads(tmp_path, cfg_path):
    ck = tmp_path / "ck.bin"
    main(["pretrain", "--config", str(cfg_path), "--out", str(ck)])
    enc = load_checkpoint(ck)
    assert enc.dims.hidden == (12,) and enc.dims.k == 6
