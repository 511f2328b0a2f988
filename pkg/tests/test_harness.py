import json
import math

import numpy as np
import pytest

from evoloss import harness
from evoloss.cli import main
from evoloss.harness import ConfigError, ExperimentConfig, FinalConfig, ProbeConfig, linear_probe
from evoloss.losses import LossWeights
from evoloss.model import ModelConfig, build_bundle, load_bundle
from evoloss.report import HistoryError, pearson, ranks, read_history, spearman, write_report
from evoloss.synthgen import DatasetConfig, LabelAccessError, label_sidecar_path
from evoloss.training import ProxyConfig

TINY_DATA = DatasetConfig(num_clips=48, num_classes=3, frames=8, height=4, width=4, audio_rate=8)
TINY_MODEL = ModelConfig(hidden=(8, 6), embed_dim=4, decoder_hidden=6)
KEYS = ("RR", "RS", "FD1", "AE", "GC", "RA")


def tiny_config(tmp_path, **kw):
    base = dict(
        dataset=TINY_DATA, dataset_path=str(tmp_path / "data.bin"), keys=KEYS, model=TINY_MODEL,
        proxy=ProxyConfig(train_steps=3, batch_size=4), final=FinalConfig(steps=4, batch_size=4),
        probe=ProbeConfig(steps=50, finetune_steps=3, finetune_batch=8),
        strategy="random", budget=2, out_dir=str(tmp_path / "run"),
    )
    base.update(kw)
    cfg = ExperimentConfig(**base)
    cfg = cfg.with_overrides(fitness=harness.FitnessConfig(k=3, trials=2))
    return cfg


@pytest.fixture()
def cfg(tmp_path):
    c = tiny_config(tmp_path)
    harness.cmd_gen_data(c)
    return c


class TestConfig:
    def test_round_trip(self, tmp_path):
        c = tiny_config(tmp_path)
        c.save(tmp_path / "c.json")
        assert ExperimentConfig.load(tmp_path / "c.json") == c
        assert ExperimentConfig.from_dict(json.loads(c.to_json())) == c

    def test_default_round_trip(self):
        c = ExperimentConfig()
        assert ExperimentConfig.from_dict(c.to_dict()) == c
        assert c.dim == 16 and c.modalities == ["audio", "flow", "grey", "main"]

    @pytest.mark.parametrize("bad", [{"keys": ["RD1"]}, {"budget": 0}, {"strategy": "x"},
                                     {"format_version": 9}, {"bogus": 1}, {"keys": []}])
    def test_rejects(self, bad):
        d = ExperimentConfig().to_dict()
        d.update(bad)
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(d)


class TestCommands:
    def test_gen_data_histogram(self, tmp_path):
        c = tiny_config(tmp_path)
        path, hist = harness.cmd_gen_data(c)
        assert path.exists() and label_sidecar_path(path).exists()
        assert hist.sum() == TINY_DATA.num_clips

    def test_empty_dataset(self, tmp_path):
        c = tiny_config(tmp_path, dataset=DatasetConfig(num_clips=0))
        path, hist = harness.cmd_gen_data(c)
        assert path.exists() and hist.sum() == 0

    def test_evolve_budget_one(self, cfg):
        c = cfg.with_overrides(budget=1)
        weights, history = harness.cmd_evolve(c)
        lines = (c.out / harness.HISTORY).read_text().splitlines()
        assert len(history) == 1 and len(lines) == 1
        assert LossWeights.from_text((c.out / harness.BEST).read_text()) == weights

    def test_evolve_deterministic(self, cfg, tmp_path):
        harness.cmd_evolve(cfg)
        a = (cfg.out / harness.HISTORY).read_bytes(), (cfg.out / harness.BEST).read_bytes()
        other = cfg.with_overrides(out_dir=str(tmp_path / "again"))
        harness.cmd_evolve(other)
        assert (other.out / harness.HISTORY).read_bytes() == a[0]
        assert (other.out / harness.BEST).read_bytes() == a[1]

    def test_elo_runs_without_label_file(self, cfg):
        label_sidecar_path(cfg.dataset_path).unlink()
        _, history = harness.cmd_evolve(cfg)
        assert all(math.isfinite(r["fitness"]) for r in history)

    def test_weak_needs_labels(self, cfg):
        label_sidecar_path(cfg.dataset_path).unlink()
        with pytest.raises(LabelAccessError):
            harness.cmd_evolve(cfg.with_overrides(fitness="weak"))

    def test_elo_fitness_cannot_read_labels(self, cfg):
        ds = harness.load_dataset(cfg, with_labels=True)
        fn = harness.make_fitness_fn(cfg, ds)
        with pytest.raises(LabelAccessError):
            ds.labels
        value, info = fn(np.full(len(KEYS), 0.5), 0)
        assert value == info["elo_fitness"] <= 0

    def test_both_mode_records_weak(self, cfg):
        _, history = harness.cmd_evolve(cfg.with_overrides(fitness="both"))
        assert all("weak_fitness" in r and "elo_fitness" in r for r in history)
        assert all(r["fitness"] == r["elo_fitness"] for r in history)

    def test_train_zero_steps_is_init(self, cfg):
        c = cfg.with_overrides(final=FinalConfig(steps=0))
        harness.cmd_evolve(c)
        bundle, meta = load_bundle(harness.cmd_train_final(c))
        fresh = build_bundle(c.keys, c.dataset, c.model, seed=c.seed)
        assert all(bundle.params[k].tobytes() == fresh.params[k].tobytes() for k in fresh.params)

    def test_train_deterministic_and_round_trip(self, cfg, tmp_path):
        harness.cmd_evolve(cfg)
        p1 = harness.cmd_train_final(cfg)
        b1 = p1.read_bytes()
        p2 = harness.cmd_train_final(cfg)
        assert p2.read_bytes() == b1
        bundle, _ = load_bundle(p1)
        harness.nx.save_params(tmp_path / "copy.ckpt", bundle.params, {})
        q, _ = harness.nx.load_params(tmp_path / "copy.ckpt")
        assert all(q[k].tobytes() == bundle.params[k].tobytes() for k in q)

    def test_train_key_mismatch(self, cfg, tmp_path):
        (tmp_path / "w.txt").write_text("RR = 0.5\nGT9 = 0.1\n")
        with pytest.raises(ValueError):
            harness.cmd_train_final(cfg, tmp_path / "w.txt")
        (tmp_path / "w.txt").write_text("RR = 0.5\n")
        with pytest.raises(KeyError, match="missing"):
            harness.cmd_train_final(cfg, tmp_path / "w.txt")

    @pytest.mark.parametrize("protocol", ["kmeans", "linear", "finetune"])
    def test_eval_protocols(self, cfg, protocol):
        harness.cmd_evolve(cfg)
        harness.cmd_train_final(cfg)
        res = harness.cmd_eval(cfg, protocol)
        assert 0.0 <= res.accuracy <= 1.0
        assert json.loads((cfg.out / f"eval_{protocol}.json").read_text())["protocol"] == protocol

    def test_eval_missing_sidecar(self, cfg):
        harness.cmd_evolve(cfg)
        harness.cmd_train_final(cfg)
        label_sidecar_path(cfg.dataset_path).unlink()
        with pytest.raises(LabelAccessError):
            harness.cmd_eval(cfg, "linear")


def test_linear_probe_one_hot_is_perfect():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, 200)
    X = np.eye(4)[y]
    acc, _, _ = linear_probe(X[:100], y[:100], X[100:], y[100:], 4, steps=200)
    assert acc == 1.0


class TestReport:
    def test_scalar_loop_pearson(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=40), rng.normal(size=40)
        mx, my = sum(x) / 40, sum(y) / 40
        sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
        sxx = sum((a - mx) ** 2 for a in x)
        syy = sum((b - my) ** 2 for b in y)
        assert abs(pearson(x, y) - sxy / math.sqrt(sxx * syy)) < 1e-9

    def test_ranks_and_spearman(self):
        assert ranks([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]
        assert spearman([1, 2, 3, 4], [1, 4, 9, 16]) == pytest.approx(1.0)

    def write_history(self, path, recs):
        path.write_text("".join(json.dumps(r) + "\n" for r in recs))

    def test_single_record(self, tmp_path):
        rec = {"round": 0, "genome": [0.1, 0.2, 0.3], "fitness": -0.2, "strategy": "random", "seed": 0}
        self.write_history(tmp_path / "h", [rec])
        paths = write_report(tmp_path, read_history(tmp_path / "h"), ["RR", "FD1", "AE"])
        traj = paths["weights_trajectory.csv"].read_text().splitlines()
        heat = paths["heatmap.csv"].read_text().splitlines()
        assert len(traj) == 1 + 3 and len(heat) == 1 + 3
        assert heat[1].startswith("audio,embed,AE,0.1")

    def test_correlation_file_matches(self, tmp_path):
        rng = np.random.default_rng(1)
        recs = [{"round": i, "genome": [float(v)], "fitness": float(e), "elo_fitness": float(e),
                 "weak_fitness": float(w)} for i, (v, e, w) in
                enumerate(zip(rng.random(12), rng.normal(size=12), rng.normal(size=12)))]
        self.write_history(tmp_path / "h", recs)
        paths = write_report(tmp_path, read_history(tmp_path / "h"), ["RR"])
        n, p, s = paths["correlation.csv"].read_text().splitlines()[1].split(",")
        e = [r["elo_fitness"] for r in recs]
        w = [r["weak_fitness"] for r in recs]
        assert int(n) == 12 and abs(float(p) - pearson(e, w)) < 1e-9

    def test_malformed_line_number(self, tmp_path):
        (tmp_path / "h").write_text('{"round": 0, "genome": [0.1], "fitness": 0}\n{oops\n')
        with pytest.raises(HistoryError, match=":2:"):
            read_history(tmp_path / "h")

    def test_minus_inf_survives(self, tmp_path):
        (tmp_path / "h").write_text('{"round": 0, "genome": [0.1], "fitness": "-inf"}\n')
        assert read_history(tmp_path / "h")[0]["fitness"] == -math.inf


class TestCli:
    def test_pipeline(self, tmp_path, capsys):
        c = tiny_config(tmp_path)
        c.save(tmp_path / "cfg.json")
        args = ["--config", str(tmp_path / "cfg.json")]
        assert main(["gen-data", *args]) == 0
        assert main(["evolve", *args, "--budget", "2", "--fitness", "both"]) == 0
        assert main(["train", *args]) == 0
        assert main(["eval", *args, "--protocol", "linear"]) == 0
        assert main(["report", *args]) == 0
        out = c.out
        for name in ("history.ndjson", "best.weights", "model.ckpt", "report/scatter.csv",
                     "report/heatmap.csv", "report/strategy_summary.csv"):
            assert (out / name).exists(), name
        assert "linear accuracy" in capsys.readouterr().out

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["evolve", "--strategy", "annealing"])
        assert e.value.code == 1

    def test_bad_config_is_usage_error(self, tmp_path):
        (tmp_path / "c.json").write_text('{"budget": 0}')
        assert main(["evolve", "--config", str(tmp_path / "c.json")]) == 1

    def test_runtime_error(self, tmp_path):
        c = tiny_config(tmp_path)
        c.save(tmp_path / "c.json")
        assert main(["evolve", "--config", str(tmp_path / "c.json")]) == 2  # no dataset yet
