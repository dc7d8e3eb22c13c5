"""prism command line: gen, train, eval, ablate, analyze and gradcheck.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 when a
numeric check fails at run time.
"""

import json
import logging
import os
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np
from tqdm import tqdm

from aggregation import MODES, reward
from analysis import EVAL_POINTS, ablation_eval, evaluate
from checkpoint import load_checkpoint
from config import DEFAULT_PROFILE, PROFILES, resolve_config, write_config
from data import load_dataset, load_pairs, split_pairs, write_embeddings, write_pairs
from errors import (ConfigError, DataError, DomainError, FormatError, NumericError,
                    ShapeError, UsageError)
from generator.helpers import REGIMES
from generator.synthetic import generate_suite
from gradcheck import finite_diff_check
from models import RewardModel, TokenSequence, collate
from objective import pair_loss
from report import emit_report, render_table
from training import train

logger = logging.getLogger("prism")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
INVALID_INPUT = (ConfigError, DataError, FormatError, ShapeError, UsageError)
NUMERIC_FAILURE = (NumericError, DomainError)


##############################################################################
# Plumbing


class ClickHandler(logging.Handler):
    """Send log records to click's current stderr."""

    def emit(self, record):
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def configure_logging(verbose):
    level_name = "DEBUG" if verbose else os.environ.get("PRISM_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise ConfigError(f"PRISM_LOG_LEVEL: unknown level {level_name!r}")
    root = logging.getLogger()
    if not any(isinstance(h, ClickHandler) for h in root.handlers):
        handler = ClickHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


class PrismGroup(click.Group):
    """Maps prism errors and click usage errors onto the documented exit codes."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as exc:
            exc.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            exc.exit_code = 1
            raise
        except INVALID_INPUT as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(1)
        except NUMERIC_FAILURE as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            ctx.exit(2)


def split_list(value):
    return [item.strip() for item in value.split(",") if item.strip()] if value else []


def run_config(ctx, overrides=None, profile=None):
    """Resolve profile -> config file -> group flags -> command flags."""

    opts = ctx.obj
    flags = {}
    if opts["seed"] is not None:
        flags["seed"] = opts["seed"]
    if opts["out"] is not None:
        flags["out"] = opts["out"]
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            value = {k: v for k, v in value.items() if v is not None}
            if value:
                flags[key] = value
        elif value is not None:
            flags[key] = value
    return resolve_config(opts["config"], flags, profile=opts["profile"],
                          default_profile=profile or DEFAULT_PROFILE)


def data_overrides(data_dir):
    """--data DIR stands for DIR/embeddings.adje, DIR/train.jsonl and DIR/test.jsonl."""

    if data_dir is None:
        return {}
    base = Path(data_dir)
    paths = {"embeddings": str(base / "embeddings.adje"), "train": str(base / "train.jsonl")}
    if (base / "test.jsonl").exists():
        paths["test"] = str(base / "test.jsonl")
    return paths


def load_model(cfg, checkpoint):
    """A trained model from `checkpoint`, or a fresh one from the config seed."""

    if checkpoint is None:
        logger.info("no checkpoint given; evaluating an untrained model (seed %d)", cfg.seed)
        return RewardModel.initialize(cfg.model, cfg.seed)
    model, _ = load_checkpoint(checkpoint)
    return model


def eval_pairs(cfg, split):
    dataset = load_dataset(cfg.data.embeddings, cfg.data.train, d=cfg.model.d)
    if split == "train":
        return dataset, dataset.pairs
    if not cfg.data.test:
        raise ConfigError("data.test is not set; use --split train or provide a test manifest")
    return dataset, load_pairs(cfg.data.test, dataset.store)


##############################################################################
# Commands


@click.group(cls=PrismGroup)
@click.option("--config", "config_path", default=None, help="JSON run config.")
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default=None,
              help="Named defaults applied before the config file.")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.option("--out", default=None, help="Output directory.")
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
@click.pass_context
def prism(ctx, config_path, profile, seed, out, verbose):
    """Routed reward head: data generation, training and analysis."""

    configure_logging(verbose)
    ctx.obj = {"config": config_path, "profile": profile, "seed": seed, "out": out}


@prism.command()
@click.option("--regime", "regimes", multiple=True, type=click.Choice(REGIMES),
              help="Regime to generate; repeat for a suite (default: all).")
@click.option("--n-pairs", type=click.IntRange(min=1), default=None)
@click.option("--test-pairs", type=click.IntRange(min=0), default=None,
              help="Pairs per regime held out as test.jsonl.")
@click.option("--d", type=click.IntRange(min=1), default=None)
@click.option("--signal-strength", type=float, default=None)
@click.option("--noise-std", type=float, default=None)
@click.option("--prompt-signature", type=float, default=None)
@click.option("--max-magnitude", type=click.IntRange(min=1), default=None)
@click.option("--direction-seed", type=click.IntRange(min=0), default=None)
@click.pass_context
def gen(ctx, regimes, n_pairs, test_pairs, d, signal_strength, noise_std, prompt_signature,
        max_magnitude, direction_seed):
    """Generate a synthetic embedding store and pair manifests."""

    synthetic = {"n_pairs": n_pairs, "d": d, "signal_strength": signal_strength,
                 "noise_std": noise_std, "prompt_signature": prompt_signature,
                 "max_magnitude": max_magnitude, "direction_seed": direction_seed}
    overrides = {"synthetic": synthetic, "data": {"test_pairs": test_pairs}}
    if d is not None:
        overrides["model"] = {"d": d}
    cfg = run_config(ctx, overrides).validate()
    if signal_strength is not None:
        cfg.synthetic.regime_strength = None

    specs = [replace(cfg.synthetic, regime=regime) for regime in (regimes or REGIMES)]
    for spec in specs:
        spec.validate()
    n_test = cfg.data.test_pairs
    if n_test >= cfg.synthetic.n_pairs:
        raise ConfigError(f"test_pairs={n_test} leaves no training pairs out of {cfg.synthetic.n_pairs}")

    store, pairs = generate_suite(specs)
    train_pairs, held_out = split_pairs(pairs, n_test)
    out = Path(cfg.out)
    write_embeddings(out / "embeddings.adje", store)
    write_pairs(out / "train.jsonl", train_pairs)
    files = ["embeddings.adje", "train.jsonl"]
    if held_out:
        write_pairs(out / "test.jsonl", held_out)
        files.append("test.jsonl")
    provenance = {"seed": cfg.seed, "test_pairs": n_test, "files": files,
                  "specs": [asdict(spec) for spec in specs]}
    with open(out / "provenance.json", "w") as f:
        json.dump(provenance, f, indent=2)
        f.write("\n")
    write_config(cfg, out)
    click.echo(f"wrote {len(train_pairs)} train / {len(held_out)} test pairs to {out}")


@prism.command("train")
@click.option("--data", "data_dir", default=None, help="Directory written by `prism gen`.")
@click.option("--mode", type=click.Choice(MODES), default="full")
@click.option("--steps", type=click.IntRange(min=0), default=None)
@click.option("--resume", default=None, help="Checkpoint to continue from.")
@click.option("--progress/--no-progress", default=True)
@click.pass_context
def train_cmd(ctx, data_dir, mode, steps, resume, progress):
    """Train a model; writes metrics.jsonl and checkpoints under --out."""

    cfg = run_config(ctx, {"data": data_overrides(data_dir), "train": {"total_steps": steps}})
    cfg.validate(require_data=True)
    if resume is not None and not Path(resume).exists():
        raise ConfigError(f"--resume: no such file {resume}")

    dataset = load_dataset(cfg.data.embeddings, cfg.data.train, d=cfg.model.d)
    model = state = None
    if resume is not None:
        model, state = load_checkpoint(resume, expect=cfg.model)
        if state is None:
            raise FormatError(f"{resume}: checkpoint has no optimizer state to resume from")
    write_config(cfg, cfg.out)
    result = train(dataset, cfg.train, mode=mode, model=model, state=state, out_dir=cfg.out,
                   progress=progress)
    last = result.checkpoints[-1] if result.checkpoints else "none"
    click.echo(f"trained to step {result.state.step}; last checkpoint: {last}")


@prism.command("eval")
@click.option("--checkpoint", default=None, help="Trained model (default: untrained).")
@click.option("--data", "data_dir", default=None)
@click.option("--mode", type=click.Choice(MODES), default="full")
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@click.pass_context
def eval_cmd(ctx, checkpoint, data_dir, mode, split):
    """Pairwise accuracy and routing profile of one model."""

    cfg = run_config(ctx, {"data": data_overrides(data_dir)}).validate(require_data=True)
    dataset, pairs = eval_pairs(cfg, split)
    model = load_model(cfg, checkpoint)
    report, records = evaluate(model, pairs, dataset.store, mode=mode, seed=cfg.seed,
                               domains=dataset.domains())
    emit_report(report, Path(cfg.out) / "eval", records=records)
    click.echo(render_table([report]))


@prism.command()
@click.option("--data", "data_dir", default=None)
@click.option("--modes", default="last_only,mean_only,attn_only,full", show_default=True)
@click.option("--seeds", default=None, help="Comma-separated seeds (default: --seed).")
@click.option("--steps", type=click.IntRange(min=0), default=None)
@click.option("--what", default="accuracy,routing", show_default=True)
@click.option("--progress/--no-progress", default=True)
@click.pass_context
def ablate(ctx, data_dir, modes, seeds, steps, what, progress):
    """Train and evaluate every mode under identical seeds and data order."""

    sections = split_list(what)
    if set(sections) - {"accuracy", "routing", "alignment"}:
        raise UsageError(f"unknown --what section(s) in {what!r}; expected accuracy, routing, alignment")
    modes = split_list(modes)
    unknown = [m for m in modes if m not in MODES]
    if not modes or unknown:
        raise UsageError(f"unknown mode(s) {unknown}; expected one of {', '.join(MODES)}")
    cfg = run_config(ctx, {"data": data_overrides(data_dir), "train": {"total_steps": steps}})
    cfg.validate(require_data=True)
    try:
        seed_list = [int(s) for s in split_list(seeds)] or [cfg.seed]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {seeds!r}") from None

    dataset, test_pairs = eval_pairs(cfg, "test" if cfg.data.test else "train")
    write_config(cfg, cfg.out)
    reports = []
    runs = [(seed, mode) for seed in seed_list for mode in modes]
    for seed, mode in tqdm(runs, desc="ablate", disable=not progress):
        train_cfg = replace(cfg.train, seed=seed)
        run_dir = Path(cfg.out) / f"{mode}-seed{seed}"
        reports.append(ablation_eval(dataset, mode, train_cfg, test_pairs=test_pairs,
                                     what=tuple(sections), out_dir=run_dir))
    emit_report(reports, Path(cfg.out) / "ablation")
    click.echo(render_table(reports, title="prism-rm ablation"))


@prism.command()
@click.option("--checkpoint", default=None)
@click.option("--data", "data_dir", default=None)
@click.option("--mode", type=click.Choice(MODES), default="full")
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@click.option("--what", default="routing,alignment", show_default=True)
@click.option("--at", type=click.Choice(EVAL_POINTS), default="chosen",
              help="Where the reward gradient is taken for alignment.")
@click.pass_context
def analyze(ctx, checkpoint, data_dir, mode, split, what, at):
    """Routing profile and before/after-refinement gradient alignment."""

    sections = split_list(what)
    unknown = [s for s in sections if s not in ("routing", "alignment")]
    if unknown:
        raise UsageError(f"unknown --what section(s) {unknown}; expected routing, alignment")
    cfg = run_config(ctx, {"data": data_overrides(data_dir)}).validate(require_data=True)
    dataset, pairs = eval_pairs(cfg, split)
    model = load_model(cfg, checkpoint)
    report, records = evaluate(model, pairs, dataset.store, mode=mode,
                               what=("accuracy", *sections), at=at, seed=cfg.seed,
                               domains=dataset.domains())
    emit_report(report, Path(cfg.out) / "analysis", records=records, at=at)
    click.echo(render_table([report], title="prism-rm analysis", at=at))


@prism.command()
@click.option("--step", type=float, default=1e-5, show_default=True)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@click.option("--pairs", "n_pairs", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--length", type=click.IntRange(min=2), default=12, show_default=True)
@click.option("--corrupt-param", default=None, hidden=True)
@click.pass_context
def gradcheck(ctx, step, tolerance, n_pairs, length, corrupt_param):
    """Finite-difference check of the full pair loss over every parameter."""

    cfg = run_config(ctx, profile="tiny").validate()
    model = RewardModel.initialize(cfg.model, cfg.seed, init_std=0.3, zero_residual=False)
    params = model.parameters()
    if corrupt_param is not None and corrupt_param not in params:
        raise UsageError(f"--corrupt-param: no parameter named {corrupt_param!r}")

    rng = np.random.default_rng([cfg.seed, length])
    prompt_len = max(1, length // 3)
    sequences = [TokenSequence.from_prompt_len(rng.normal(size=(length, cfg.model.d)), prompt_len)
                 for _ in range(2 * n_pairs)]
    batch = collate(sequences)
    magnitude = rng.integers(0, 4, size=n_pairs)
    chosen, rejected = np.arange(n_pairs), np.arange(n_pairs, 2 * n_pairs)

    def loss():
        out = reward(batch, model)
        return pair_loss(out.subset(chosen), out.subset(rejected), magnitude, cfg.loss).loss

    def corrupt(name, grad):
        return grad + 1.0 if name == corrupt_param else grad

    report = finite_diff_check(loss, params, step=step, tolerance=tolerance,
                               grad_hook=corrupt if corrupt_param else None)
    click.echo(f"max relative error {report.max_rel_error:.3e} over {len(report.params)} "
               f"tensors (step {step:g}, tolerance {tolerance:g})")
    click.echo(f"verdict error {report.max_verdict_error:.3e} after extrapolation, "
               f"{report.excused} element(s) within roundoff or truncation")
    for name, index in report.warnings:
        click.echo(f"warning: {name}{list(index)} is a non-differentiable point")
    if not report.passed:
        names = ", ".join(f"{p.name} ({p.verdict_error:.2e})" for p in report.failures)
        raise NumericError(f"gradient check failed for {names}")
    click.echo("gradient check passed")


if __name__ == "__main__":
    prism()
