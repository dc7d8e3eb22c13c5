"""Training loop tests: determinism, resume, checkpoints and failure handling."""

# run these tests like:
#
#    python -m unittest test_training.py


import json
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np

from analysis import pairwise_accuracy
from checkpoint import load_checkpoint
from data import PreferenceDataset
from errors import ConfigError, NumericError, UsageError
from generator.synthetic import SyntheticSpec, generate_synthetic
from models import ModelConfig, RewardModel
from objective import LossConfig
from training import TrainConfig, train


def tiny_dataset(n_pairs=20, regime="terminal", noise_std=0.3, seed=0):
    spec = SyntheticSpec(regime=regime, d=8, prompt_len=(2, 4), response_len=(4, 8),
                         noise_std=noise_std, n_pairs=n_pairs, seed=seed)
    store, pairs = generate_synthetic(spec)
    return PreferenceDataset(pairs=pairs, store=store)


def tiny_config(**overrides):
    values = dict(total_steps=6, batch_pairs=4, checkpoint_every=3, log_every=3, lr=1e-2,
                  warmup_ratio=0.1, model=ModelConfig(d=8, K=2, n_heads=2), loss=LossConfig())
    values.update(overrides)
    return TrainConfig(**values)


class TrainingTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.dataset = tiny_dataset()

    def tearDown(self):
        self.tmp.cleanup()

    def test_zero_steps(self):
        result = train(self.dataset, tiny_config(total_steps=0))
        self.assertEqual(result.log, [])
        self.assertEqual(result.state.step, 0)

    def test_same_seed_same_log(self):
        a = train(self.dataset, tiny_config()).log
        b = train(self.dataset, tiny_config()).log
        self.assertEqual(a, b)
        self.assertEqual([r["step"] for r in a], [1, 2, 3, 4, 5, 6])

    def test_metrics_record(self):
        record = train(self.dataset, tiny_config()).log[0]
        self.assertEqual(set(record), {"step", "loss", "mean_p", "mean_entropy", "lr",
                                       "grad_norm", "alpha_mean", "pi_mean",
                                       "alpha_running", "pi_running"})
        self.assertEqual(record["lr"], 0.0)
        self.assertEqual(len(record["alpha_mean"]), 2)
        self.assertAlmostEqual(sum(record["pi_mean"]), 1.0, 12)
        self.assertEqual(record["alpha_running"], record["alpha_mean"])

    def test_running_means(self):
        log = train(self.dataset, tiny_config()).log
        for n, record in enumerate(log, start=1):
            for key in ("alpha", "pi"):
                expected = np.mean([r[f"{key}_mean"] for r in log[:n]], axis=0)
                np.testing.assert_allclose(record[f"{key}_running"], expected, atol=1e-12)
        self.assertAlmostEqual(sum(log[-1]["pi_running"]), 1.0, 12)

    def test_checkpoints_and_metrics_file(self):
        result = train(self.dataset, tiny_config(total_steps=7), out_dir=self.dir)
        names = [p.name for p in result.checkpoints]
        self.assertEqual(names, ["step_000003.ckpt", "step_000006.ckpt", "step_000007.ckpt"])
        lines = (self.dir / "metrics.jsonl").read_text().splitlines()
        self.assertEqual([json.loads(line) for line in lines], result.log)

    def test_resume_matches_uninterrupted(self):
        full = train(self.dataset, tiny_config(), out_dir=self.dir / "full")
        model, state = load_checkpoint(self.dir / "full" / "checkpoints" / "step_000003.ckpt")
        resumed = train(self.dataset, tiny_config(), model=model, state=state,
                        out_dir=self.dir / "resumed")
        self.assertEqual(resumed.log, full.log[3:])
        for name, param in full.model.parameters().items():
            np.testing.assert_array_equal(resumed.model.parameters()[name].data, param.data)

    def test_modes_share_data_order(self):
        a = train(self.dataset, tiny_config(total_steps=1), mode="full").log[0]
        b = train(self.dataset, tiny_config(total_steps=1), mode="last_only").log[0]
        self.assertEqual(b["pi_mean"], [1.0, 0.0, 0.0])
        self.assertEqual(a["alpha_mean"], b["alpha_mean"])

    def test_bypassed_parameters_keep_their_values(self):
        cfg = tiny_config()
        start = RewardModel.initialize(cfg.model, cfg.seed).parameters()
        for mode, frozen, trained in (("no_refine", "refinement/", "router/"),
                                      ("last_only", "router/", "heads/0/"),
                                      ("mean_only", "scorer/", "heads/1/")):
            result = train(self.dataset, cfg, mode=mode)
            params = result.model.parameters()
            for name, param in params.items():
                if name.startswith(frozen):
                    np.testing.assert_array_equal(param.data, start[name].data, err_msg=name)
            moved = [name for name in params if name.startswith(trained)
                     and not np.array_equal(params[name].data, start[name].data)]
            self.assertTrue(moved, mode)
            self.assertFalse(any(np.any(result.state.m[name]) for name in params
                                 if name.startswith(frozen)), mode)

    def test_non_finite_loss(self):
        cfg = tiny_config(total_steps=5)
        first = train(self.dataset, tiny_config(total_steps=3), out_dir=self.dir)
        model = first.model
        model.heads[0].fc2.bias.data[:] = np.nan
        with self.assertRaises(NumericError) as ctx:
            train(self.dataset, cfg, model=model, state=first.state, out_dir=self.dir)
        self.assertIn("step_000003.ckpt", str(ctx.exception))

    def test_validation(self):
        with self.assertRaises(ConfigError):
            train(self.dataset, tiny_config(warmup_ratio=0.0))
        with self.assertRaises(ConfigError):
            train(self.dataset, tiny_config(batch_pairs=0))
        with self.assertRaises(ConfigError):
            train(PreferenceDataset(pairs=[], store=self.dataset.store), tiny_config())
        with self.assertRaises(UsageError):
            train(self.dataset, tiny_config(), mode="bogus")

    def test_learns_separable_set(self):
        cfg = tiny_config(total_steps=200, checkpoint_every=200, log_every=100)
        result = train(self.dataset, cfg)
        accuracy = pairwise_accuracy(result.model, self.dataset.pairs, self.dataset.store)
        self.assertEqual(accuracy["overall"], 1.0)
        self.assertLess(result.log[-1]["loss"], result.log[0]["loss"])
