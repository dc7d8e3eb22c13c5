"""Command-line tests."""

# run these tests like:
#
#    python -m unittest test_app.py


import json
import tempfile
from pathlib import Path
from unittest import TestCase

from click.testing import CliRunner

from app import prism
from report import load_report


class CommandTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.runner = CliRunner()
        self.data = self.dir / "data"

    def tearDown(self):
        self.tmp.cleanup()

    def run_prism(self, *args, out=None, env=None):
        argv = ["--profile", "tiny"]
        if out is not None:
            argv += ["--out", str(out)]
        return self.runner.invoke(prism, argv + [str(a) for a in args], env=env)

    def generate(self, out=None):
        result = self.run_prism("gen", "--n-pairs", 12, "--test-pairs", 3, out=out or self.data)
        self.assertEqual(result.exit_code, 0, result.output)
        return out or self.data

    def train_run(self, out, steps, *extra):
        result = self.run_prism("train", "--data", self.data, "--steps", steps,
                                "--no-progress", *extra, out=out)
        self.assertEqual(result.exit_code, 0, result.output)
        return result

    #####
    ## gen
    #####
    def test_gen_writes_dataset(self):
        self.generate()
        self.assertTrue((self.data / "embeddings.adje").exists())
        self.assertEqual(len((self.data / "train.jsonl").read_text().splitlines()), 27)
        self.assertEqual(len((self.data / "test.jsonl").read_text().splitlines()), 9)
        provenance = json.loads((self.data / "provenance.json").read_text())
        self.assertEqual([s["regime"] for s in provenance["specs"]],
                         ["terminal", "distributed", "sparse"])
        self.assertTrue((self.data / "config.json").exists())

    def test_gen_is_deterministic(self):
        a = self.generate(self.dir / "a")
        b = self.generate(self.dir / "b")
        for name in ("embeddings.adje", "train.jsonl", "test.jsonl"):
            self.assertEqual((a / name).read_bytes(), (b / name).read_bytes())

    def test_gen_single_regime(self):
        result = self.run_prism("gen", "--regime", "sparse", "--n-pairs", 5, out=self.data)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertFalse((self.data / "test.jsonl").exists())
        self.assertIn("sparse-000004", (self.data / "train.jsonl").read_text())

    def test_gen_invalid_input(self):
        result = self.run_prism("gen", "--regime", "everywhere", out=self.data)
        self.assertEqual(result.exit_code, 1)
        result = self.run_prism("gen", "--n-pairs", 4, "--test-pairs", 4, out=self.data)
        self.assertEqual(result.exit_code, 1)
        self.assertIn("leaves no training pairs", result.output)

    #####
    ## train
    #####
    def test_train(self):
        self.generate()
        run = self.dir / "run"
        result = self.train_run(run, 4)
        self.assertIn("trained to step 4", result.output)
        self.assertTrue((run / "checkpoints" / "step_000004.ckpt").exists())
        self.assertEqual(len((run / "metrics.jsonl").read_text().splitlines()), 4)
        self.assertEqual(json.loads((run / "config.json").read_text())["profile"], "tiny")

    def test_train_missing_dataset(self):
        result = self.run_prism("train", "--data", self.dir / "absent", "--no-progress",
                                out=self.dir / "run")
        self.assertEqual(result.exit_code, 1)
        self.assertIn("no such file", result.output)

    def test_resume_matches_uninterrupted_run(self):
        self.generate()
        self.train_run(self.dir / "straight", 6)
        self.train_run(self.dir / "first", 4)
        resumed = self.train_run(self.dir / "second", 6, "--resume",
                                 self.dir / "first" / "checkpoints" / "step_000004.ckpt")
        self.assertIn("trained to step 6", resumed.output)
        straight = self.dir / "straight" / "checkpoints" / "step_000006.ckpt"
        second = self.dir / "second" / "checkpoints" / "step_000006.ckpt"
        self.assertEqual(straight.read_bytes(), second.read_bytes())

    def test_resume_missing_checkpoint(self):
        self.generate()
        result = self.run_prism("train", "--data", self.data, "--resume", self.dir / "x.ckpt",
                                "--no-progress", out=self.dir / "run")
        self.assertEqual(result.exit_code, 1)

    #####
    ## eval, ablate, analyze
    #####
    def test_eval(self):
        self.generate()
        self.train_run(self.dir / "run", 3)
        out = self.dir / "eval"
        result = self.run_prism("eval", "--checkpoint",
                                self.dir / "run" / "checkpoints" / "step_000003.ckpt",
                                "--data", self.data, out=out)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("Pairwise accuracy", result.output)
        (report,) = load_report(out / "eval.json")
        self.assertEqual(report.counts["overall"], 9)
        self.assertTrue((out / "eval.csv").exists())

    def test_eval_untrained_on_train_split(self):
        self.generate()
        result = self.run_prism("eval", "--data", self.data, "--split", "train", "--mode",
                                "no_refine", out=self.dir / "eval")
        self.assertEqual(result.exit_code, 0, result.output)
        (report,) = load_report(self.dir / "eval" / "eval.json")
        self.assertEqual(report.counts["overall"], 27)
        self.assertEqual(report.mode, "no_refine")

    def test_ablate(self):
        self.generate()
        out = self.dir / "ablation"
        result = self.run_prism("ablate", "--data", self.data, "--modes", "last_only,full",
                                "--seeds", "0,1", "--steps", 2, "--no-progress", out=out)
        self.assertEqual(result.exit_code, 0, result.output)
        reports = load_report(out / "ablation.json")
        self.assertEqual([(r.mode, r.seed) for r in reports],
                         [("last_only", 0), ("full", 0), ("last_only", 1), ("full", 1)])
        self.assertTrue((out / "full-seed1" / "checkpoints" / "step_000002.ckpt").exists())
        self.assertIn("mean over seeds 0, 1", (out / "ablation.txt").read_text())

    def test_ablate_unknown_mode(self):
        self.generate()
        result = self.run_prism("ablate", "--data", self.data, "--modes", "full,router_only",
                                out=self.dir / "ablation")
        self.assertEqual(result.exit_code, 1)
        self.assertIn("router_only", result.output)

    def test_analyze(self):
        self.generate()
        out = self.dir / "analysis"
        result = self.run_prism("analyze", "--data", self.data, "--at", "midpoint", out=out)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("Gradient alignment (evaluated at midpoint)", result.output)
        (report,) = load_report(out / "analysis.json")
        self.assertEqual(set(report.alignment), {"before", "after"})
        self.assertEqual(set(report.routing), {"terminal", "distributed", "sparse"})

    def test_analyze_unknown_section(self):
        self.generate()
        result = self.run_prism("analyze", "--data", self.data, "--what", "routing,latency",
                                out=self.dir / "analysis")
        self.assertEqual(result.exit_code, 1)

    #####
    ## gradcheck and plumbing
    #####
    def test_gradcheck_passes(self):
        result = self.run_prism("gradcheck", "--pairs", 1, "--length", 6)
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("gradient check passed", result.output)

    def test_gradcheck_planted_error(self):
        result = self.run_prism("gradcheck", "--pairs", 1, "--length", 6,
                                "--corrupt-param", "heads/1/fc2/bias")
        self.assertEqual(result.exit_code, 2)
        self.assertIn("heads/1/fc2/bias", result.output)

    def test_gradcheck_step_sizes(self):
        for step in ("1e-3", "1e-5"):
            result = self.run_prism("gradcheck", "--pairs", 1, "--length", 6, "--step", step)
            self.assertEqual(result.exit_code, 0, result.output)
            self.assertIn("gradient check passed", result.output)
            self.assertIn("after extrapolation", result.output)

    def test_bad_group_options(self):
        for argv in (["--profile", "bogus", "gradcheck"], ["--seed", "-1", "gradcheck"]):
            result = self.runner.invoke(prism, argv)
            self.assertEqual(result.exit_code, 1, result.output)

    def test_gradcheck_unknown_param(self):
        result = self.run_prism("gradcheck", "--corrupt-param", "nowhere/weight")
        self.assertEqual(result.exit_code, 1)

    def test_bad_log_level(self):
        result = self.run_prism("gen", out=self.data, env={"PRISM_LOG_LEVEL": "LOUD"})
        self.assertEqual(result.exit_code, 1)
        self.assertIn("PRISM_LOG_LEVEL", result.output)
