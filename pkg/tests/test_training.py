import csv
import json
from pathlib import Path

import pytest

from pise.training import (ARMS, ConfigError, RunResult, TrainConfig, format_config,
                           make_splits, parse_config_text, run_ablation, sampling_sweep,
                           train_reconstructor, write_ablation)

# small enough to train in seconds on the toy set
TINY = dict(dataset="toy", n_train=64, n_val=32, n_test=40, epochs=6, width=4, depth=2,
            batch_size=32, feature_extractor="domain_cnn")


@pytest.fixture
def tiny(tmp_path):
    return TrainConfig(**TINY, output_dir=str(tmp_path / "run"))


@pytest.fixture
def toy_env(toy, toy_clf, monkeypatch):
    """Route every dataset/classifier lookup in training to the toy fixtures."""
    import pise.training as tr
    monkeypatch.setattr(tr.datasets, "load", lambda tag, root=None: toy)
    monkeypatch.setattr(tr, "get_classifiers", lambda cfg, ds=None, seed=0: {"plaincnn": toy_clf})
    return toy, {"plaincnn": toy_clf}


# -- configuration -----------------------------------------------------------

def test_config_round_trip():
    cfg = TrainConfig(rate=0.1, lambda_perc=0.0, init_mode="learned_random", lr=3e-4)
    assert parse_config_text(format_config(cfg)) == cfg
    assert format_config(parse_config_text(format_config(cfg))) == format_config(cfg)


def test_comments_and_overrides():
    text = "# desk config\nrate = 0.02  # two percent\n\nepochs=7\n"
    cfg = parse_config_text(text, overrides=["epochs=9", "lambda_perc = 0"])
    assert (cfg.rate, cfg.epochs, cfg.lambda_perc) == (0.02, 9, 0.0)


def test_missing_keys_are_named_together():
    with pytest.raises(ConfigError, match="rate, epochs"):
        parse_config_text("lr = 0.001\n", require=("rate", "epochs", "lr"))


@pytest.mark.parametrize("text, msg", [
    ("rate 0.05", "key=value"),
    ("colour = red", "unknown key"),
    ("epochs = many", "cannot parse"),
    ("epochs = 5", "grad_window"),
    ("rate = 1.5", "rate"),
    ("init_mode = fourier", "init_mode"),
    ("lambda_mse = 0\nlambda_perc = 0", "positive"),
    ("optimizer = lbfgs", "optimizer"),
])
def test_invalid_configs(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config_text(text)


def test_splits_are_disjoint_and_fixed(toy):
    cfg = TrainConfig(**TINY)
    a, b = make_splits(toy, cfg), make_splits(toy, cfg)
    assert (a.train == b.train).all() and (a.val == b.val).all()
    assert len(a.train) == 64 and len(a.val) == 32 and len(a.test) == 40
    flat = lambda t: {bytes(r.numpy().tobytes()) for r in t}
    assert not flat(a.train) & flat(a.val)
    with pytest.raises(ConfigError):
        make_splits(toy, cfg.replace(n_train=5000))


# -- training ------------------------------------------------------------------

def test_smoke_run_writes_artifacts(tiny, toy_env):
    toy, clfs = toy_env
    r = train_reconstructor(tiny, toy, clfs)
    assert len(r.grad_trace) == 6 and len(r.val_loss) == 6
    assert all(g >= 0 for g in r.grad_trace) and r.grad_init > 0
    assert r.grad_index == pytest.approx(sum(r.grad_trace[-5:]) / 5 / r.grad_trace[0])
    assert 0 <= r.accuracy["plaincnn"] <= 1 and len(r.accuracy_history["plaincnn"]) == 5
    assert r.psnr < 99 and r.feature_extractor == "domain_cnn"
    assert r.measurements == 39
    for before, after in r.frozen_checksums.values():
        assert before == after
    out = tiny.output_dir
    for name in ("reconstructor.pt", "reconstructor.json", "grad.csv", "metrics.csv",
                 "recon_grid.png", "run.json"):
        assert (Path(out) / name).exists(), name
    back = RunResult.from_json(f"{out}/run.json")
    assert back.grad_trace == r.grad_trace and back.config == r.config
    with open(f"{out}/metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 6 and rows[0]["psnr"] == "" and rows[-1]["psnr"] != ""


def test_identical_configs_replay_exactly(tiny, toy_env):
    toy, clfs = toy_env
    a = train_reconstructor(tiny, toy, clfs, write=False)
    b = train_reconstructor(tiny, toy, clfs, write=False)
    assert abs(a.final_val_loss - b.final_val_loss) <= 1e-6 * abs(a.final_val_loss)
    assert a.grad_trace == b.grad_trace
    c = train_reconstructor(tiny.replace(param_seed=1), toy, clfs, write=False)
    assert c.final_val_loss != a.final_val_loss


def test_mse_only_run_needs_no_extractor(tiny, toy_env):
    toy, clfs = toy_env
    r = train_reconstructor(tiny.replace(**ARMS["A"]), toy, clfs, write=False)
    assert r.feature_extractor is None
    assert r.config["init_mode"] == "learned_random"


# -- ablation and sweep ----------------------------------------------------------

def test_standard_arms():
    assert [(a["init_mode"], a["lambda_perc"] > 0) for a in ARMS.values()] == [
        ("learned_random", False), ("adjoint", False), ("learned_random", True), ("adjoint", True)]


def test_singleton_ablation_equals_its_run(tiny, toy_env):
    table = run_ablation(tiny, {"D": ARMS["D"]}, seeds=[0])
    run = table["runs"]["D"][0]
    summary = table["arms"]["D"]
    assert summary["grad_index"]["mean"] == run.grad_index and summary["grad_index"]["std"] == 0.0
    assert summary["acc_plaincnn"]["values"] == [run.accuracy["plaincnn"]]
    assert summary["psnr"]["mean"] == run.psnr and summary["label"] == "Phys+Perc"


def test_ablation_order_independent(tmp_path, toy_env):
    base = TrainConfig(**TINY)
    ab = run_ablation(base.replace(output_dir=str(tmp_path / "x")), {k: ARMS[k] for k in "BD"}, [0, 1])
    ba = run_ablation(base.replace(output_dir=str(tmp_path / "y")), {k: ARMS[k] for k in "DB"}, [1, 0])
    for arm in "BD":
        for key in ("grad_index", "psnr", "acc_plaincnn"):
            assert ab["arms"][arm][key]["mean"] == ba["arms"][arm][key]["mean"]
            assert ab["arms"][arm][key]["std"] == ba["arms"][arm][key]["std"]
    write_ablation(ab, tmp_path / "abl.csv")
    with open(tmp_path / "abl.csv") as f:
        rows = list(csv.DictReader(f))
    assert [(r["arm"], r["seed"]) for r in rows] == [("B", "0"), ("B", "1"), ("D", "0"), ("D", "1")]
    assert set(json.loads((tmp_path / "abl.json").read_text())) == {"B", "D"}


def test_finished_runs_are_reused(tmp_path, toy_env):
    base = TrainConfig(**TINY, output_dir=str(tmp_path / "abl"))
    first = run_ablation(base, {"B": ARMS["B"]}, [0])["runs"]["B"][0]
    stamp = (tmp_path / "abl" / "B" / "seed0" / "run.json").stat().st_mtime_ns
    again = run_ablation(base, {"B": ARMS["B"]}, [0])["runs"]["B"][0]
    assert again.grad_trace == first.grad_trace
    assert (tmp_path / "abl" / "B" / "seed0" / "run.json").stat().st_mtime_ns == stamp


def test_ablation_needs_arms_and_seeds(tiny):
    with pytest.raises(ValueError):
        run_ablation(tiny, {}, [0])
    with pytest.raises(ValueError):
        run_ablation(tiny, None, [])


def test_single_rate_sweep(tmp_path, toy_env):
    base = TrainConfig(**TINY, output_dir=str(tmp_path / "sweep"))
    rows = sampling_sweep(base, rates=[0.05])
    assert len(rows) == 1 and rows[0]["rate"] == 0.05 and rows[0]["measurements"] == 39
    run = RunResult.from_json(tmp_path / "sweep" / "rate0.05" / "run.json")
    assert rows[0]["psnr"] == run.psnr
    with pytest.raises(ConfigError):
        sampling_sweep(base, rates=[0.05, 1.2])


def test_shipped_config_parses():
    from pise.training import load_config
    cfg = load_config(Path(__file__).parents[1] / "configs" / "fashion5.cfg")
    assert (cfg.rate, cfg.epochs, cfg.n_train, cfg.n_test) == (0.05, 15, 4000, 1000)
