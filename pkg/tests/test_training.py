import statistics

import numpy as np
import pytest

from evoloss import harness
from evoloss.evolve import evolve
from evoloss.harness import FinalConfig, ProbeConfig
from evoloss.losses import LossWeights, sample_batch, total_loss
from evoloss.model import ModelConfig, build_bundle
from evoloss.synthgen import DatasetConfig, clip_rng, generate_dataset, zipf_pmf, zipf_sample
from evoloss.training import ProxyConfig, fit_genome, proxy_train, warmup_steps

DATA = DatasetConfig(num_clips=160, num_classes=4, frames=8, height=5, width=5, audio_rate=8)
MODEL = ModelConfig(hidden=(16, 12), embed_dim=6, decoder_hidden=12)
KEYS = ("RR", "RS", "AE", "FD1", "GC")


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(DATA)


def test_warmup_steps():
    assert warmup_steps(0, 0.02) == 0
    assert warmup_steps(100, 0.02) == 2
    assert warmup_steps(10, 0.02) == 1


class TestProxy:
    def proxy(self, steps):
        return ProxyConfig(train_steps=steps, batch_size=8, encoder_scale="full")

    def init_embeddings(self, ds, seed):
        b = build_bundle(KEYS, DATA, ProxyConfig(encoder_scale="full").model_config(), seed=seed)
        return b.main_embeddings(ds.arrays["main"][ds.eval_index])

    def test_zero_genome_is_init(self, ds):
        w = LossWeights.uniform(KEYS, 0.0)
        np.testing.assert_array_equal(proxy_train(w, ds, self.proxy(20), 3), self.init_embeddings(ds, 3))

    def test_zero_steps_is_init(self, ds):
        w = LossWeights.uniform(KEYS, 0.7)
        np.testing.assert_array_equal(proxy_train(w, ds, self.proxy(0), 4), self.init_embeddings(ds, 4))

    def test_recon_only_lowers_recon(self, ds):
        w = LossWeights.uniform(KEYS, 0.0).replace(RR=1.0)
        wins = 0
        for seed in range(5):
            batch = sample_batch(ds, ds.eval_index[:32], KEYS, MODEL, np.random.default_rng(seed))
            before, _ = fit_genome(w, ds, MODEL, 0, 8, seed)
            after, _ = fit_genome(w, ds, MODEL, 60, 8, seed)
            rr = [total_loss(w, b, batch).parts["RR"] for b in (before, after)]
            wins += rr[1] < rr[0]
        assert wins >= 4

    def test_fraction_validated(self):
        with pytest.raises(ValueError):
            ProxyConfig(dataset_fraction=0.0)


def small_cfg(tmp_path, **kw):
    base = dict(dataset=DATA, dataset_path=str(tmp_path / "d.bin"), keys=KEYS, model=MODEL,
                final=FinalConfig(steps=200, batch_size=8),
                probe=ProbeConfig(steps=300, finetune_steps=60, finetune_batch=32),
                out_dir=str(tmp_path / "run"))
    base.update(kw)
    return harness.ExperimentConfig(**base)


def test_final_training_lowers_loss(tmp_path, ds):
    cfg = small_cfg(tmp_path)
    _, losses = harness.train_final(cfg, LossWeights.uniform(KEYS, 0.5), ds, seed=0)
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


class TestProbes:
    def test_linear_probe_on_random_init_beats_chance(self, ds):
        ds.unlock_labels()
        b = build_bundle(KEYS, DATA, MODEL, seed=0)
        acc = harness.evaluate(b, ds, "linear", ProbeConfig(steps=300), seed=0).accuracy
        assert 1 / DATA.num_classes < acc <= 1.0

    def test_finetune_not_worse_than_linear(self, tmp_path, ds):
        ds.unlock_labels()
        cfg = small_cfg(tmp_path)
        gaps = []
        for seed in range(3):
            b, _ = harness.train_final(cfg, LossWeights.uniform(KEYS, 0.5), ds, seed=seed)
            lin = harness.evaluate(b, ds, "linear", cfg.probe, seed=seed).accuracy
            ft = harness.evaluate(b, ds, "finetune", cfg.probe, seed=seed).accuracy
            gaps.append(ft - lin)
        assert statistics.median(gaps) >= -0.02


def test_generated_classes_follow_zipf():
    cfg = DatasetConfig(num_clips=100_000, num_classes=3)
    # the class draw gen-data makes for each clip, without rendering frames
    labels = np.array([zipf_sample(3, cfg.zipf_s, clip_rng(cfg, i)) for i in range(cfg.num_clips)])
    freq = np.bincount(labels, minlength=3) / len(labels)
    assert 0.5 * np.abs(freq - zipf_pmf(3, 1.0)).sum() < 0.02


def test_cmaes_best_beats_first_generation(ds, tmp_path):
    cfg = small_cfg(tmp_path, proxy=ProxyConfig(train_steps=15, batch_size=8, encoder_scale="full"),
                    fitness=harness.FitnessConfig(k=4, trials=3))
    fn = harness.make_fitness_fn(cfg, ds)
    best, state = evolve("cmaes", 24, fn, 0, cfg.dim)  # popsize 8 for d = 5: three generations
    first = [r["fitness"] for r in state.history if r["round"] == 0]
    assert best["fitness"] > np.mean(first)
