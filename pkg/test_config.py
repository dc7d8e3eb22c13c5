"""Configuration resolution tests."""

# run these tests like:
#
#    python -m unittest test_config.py


import json
import tempfile
from pathlib import Path
from unittest import TestCase

from config import PROFILES, RunConfig, merge, resolve_config, write_config
from errors import ConfigError


class ConfigTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, document, name="run.json"):
        path = self.dir / name
        path.write_text(json.dumps(document))
        return path

    #####
    ## profiles
    #####
    def test_default_profile(self):
        cfg = resolve_config()
        self.assertEqual(cfg.profile, "standard")
        self.assertEqual((cfg.model.K, cfg.loss.tau_bt, cfg.loss.gamma), (3, 1.3, 0.9))
        cfg.validate()

    def test_every_profile_validates(self):
        for name in PROFILES:
            resolve_config(profile=name).validate()

    def test_tiny_profile(self):
        cfg = resolve_config(profile="tiny")
        self.assertEqual((cfg.model.d, cfg.model.K, cfg.train.total_steps), (8, 2, 50))
        self.assertEqual(cfg.synthetic.prompt_len, (2, 4))

    def test_unknown_profile(self):
        with self.assertRaises(ConfigError):
            resolve_config(profile="huge")

    #####
    ## layering
    #####
    def test_merge(self):
        merged = merge({"a": {"x": 1, "y": 2}, "b": 1}, {"a": {"y": 3}, "c": 4})
        self.assertEqual(merged, {"a": {"x": 1, "y": 3}, "b": 1, "c": 4})

    def test_file_then_flags(self):
        path = self.write({"profile": "compact", "seed": 3, "loss": {"gamma": 0.2},
                           "train": {"total_steps": 40}})
        cfg = resolve_config(path, overrides={"train": {"total_steps": 10}})
        self.assertEqual(cfg.profile, "compact")
        self.assertEqual(cfg.loss.gamma, 0.2)
        self.assertEqual(cfg.loss.tau_bt, 1.2)
        self.assertEqual(cfg.train.total_steps, 10)
        self.assertEqual((cfg.seed, cfg.train.seed, cfg.synthetic.seed), (3, 3, 3))

    def test_explicit_profile_wins(self):
        path = self.write({"profile": "compact"})
        self.assertEqual(resolve_config(path, profile="wide").profile, "wide")
        self.assertEqual(resolve_config(path, default_profile="tiny").profile, "compact")
        self.assertEqual(resolve_config(default_profile="tiny").profile, "tiny")

    def test_sections_are_linked(self):
        cfg = resolve_config(profile="tiny")
        self.assertIs(cfg.train.model, cfg.model)
        self.assertIs(cfg.train.loss, cfg.loss)

    def test_written_config_resolves_to_itself(self):
        cfg = resolve_config(profile="tiny", overrides={"seed": 5, "loss": {"lam": 0.0}})
        path = write_config(cfg, self.dir / "run")
        self.assertEqual(resolve_config(path).to_dict(), cfg.to_dict())

    #####
    ## errors
    #####
    def test_unknown_keys(self):
        with self.assertRaises(ConfigError):
            resolve_config(self.write({"optimiser": {}}))
        with self.assertRaises(ConfigError) as ctx:
            resolve_config(self.write({"loss": {"focal": 2.0}}))
        self.assertIn("focal", str(ctx.exception))
        with self.assertRaises(ConfigError):
            resolve_config(overrides={"train": {"seed": 4}})

    def test_bad_file(self):
        with self.assertRaises(ConfigError):
            resolve_config(self.dir / "missing.json")
        bad = self.dir / "bad.json"
        bad.write_text("{seed: 1")
        with self.assertRaises(ConfigError):
            resolve_config(bad)
        with self.assertRaises(ConfigError):
            resolve_config(self.write([1, 2]))

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            resolve_config(overrides={"seed": -1}).validate()
        with self.assertRaises(ConfigError):
            resolve_config(overrides={"loss": {"tau_bt": 0}}).validate()
        with self.assertRaises(ConfigError):
            resolve_config(overrides={"synthetic": {"d": 16}}).validate()

    def test_missing_data_paths(self):
        cfg = resolve_config(profile="tiny")
        with self.assertRaises(ConfigError):
            cfg.validate(require_data=True)
        cfg.data.embeddings = str(self.dir / "nope.adje")
        cfg.data.train = str(self.dir / "nope.jsonl")
        with self.assertRaises(ConfigError) as ctx:
            cfg.validate(require_data=True)
        self.assertIn("no such file", str(ctx.exception))

    def test_run_config_defaults(self):
        cfg = RunConfig(seed=7)
        self.assertEqual((cfg.train.seed, cfg.synthetic.seed), (7, 7))
