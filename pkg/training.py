"""Training loop: batching, focal BT loss, clipping, AdamW and checkpoints."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from aggregation import bypassed, check_mode, reward
from checkpoint import save_checkpoint
from data import batch_iter
from errors import ConfigError, NumericError
from models import ModelConfig, RewardModel, collate
from objective import LossConfig, pair_loss
from optim import OptimizerState, adamw_step, clip_global_norm, global_norm, lr_at
from tensor import backward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_ratio: float = 0.03
    max_grad_norm: float = 2.0
    batch_pairs: int = 8
    total_steps: int = 1500
    checkpoint_every: int = 25
    log_every: int = 25
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if not 0 < self.warmup_ratio < 1:
            raise ConfigError(f"train.warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if self.batch_pairs < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("train.batch_pairs, checkpoint_every and log_every must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps must be >= 0")
        if self.lr <= 0 or self.max_grad_norm <= 0:
            raise ConfigError("train.lr and train.max_grad_norm must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must be in [0, 1)")
        if self.seed < 0:
            raise ConfigError("train.seed must be >= 0")
        self.loss.validate()
        self.model.validate()
        return self


@dataclass
class TrainResult:
    model: RewardModel
    state: OptimizerState
    log: list
    checkpoints: list


def checkpoint_path(out_dir, step):
    return Path(out_dir) / "checkpoints" / f"step_{step:06d}.ckpt"


def train_step(model, params, state, pairs, store, cfg, lr, mode="full"):
    """One optimisation step over `pairs`; returns the metrics record.

    Parameters a mode bypasses get neither an Adam update nor weight decay.
    """

    model.zero_grad()
    n = len(pairs)
    batch = collate([store.get(p.chosen) for p in pairs] + [store.get(p.rejected) for p in pairs])
    out = reward(batch, model, mode)
    breakdown = pair_loss(out.subset(np.arange(n)), out.subset(np.arange(n, 2 * n)),
                          [p.magnitude for p in pairs], cfg.loss)
    loss = breakdown.loss.item()
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss!r} at step {state.step + 1}")
    backward(breakdown.loss)

    frozen = bypassed(mode)
    active = {name: p for name, p in params.items() if not name.startswith(frozen)}
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for name, p in active.items()}
    norm = global_norm(grads)
    clip_global_norm(grads, cfg.max_grad_norm)
    adamw_step(active, grads, state, lr, cfg)

    entropies = np.concatenate([breakdown.entropy_chosen.data, breakdown.entropy_rejected.data])
    alpha_mean = out.states.alpha.data.mean(axis=0)
    pi_mean = out.pi.data.mean(axis=0)
    running = state.accumulate(alpha=alpha_mean, pi=pi_mean)
    return {
        "step": state.step,
        "loss": loss,
        "mean_p": float(breakdown.p.data.mean()),
        "mean_entropy": float(entropies.mean()),
        "lr": lr,
        "grad_norm": norm,
        "alpha_mean": alpha_mean.tolist(),
        "pi_mean": pi_mean.tolist(),
        "alpha_running": running["alpha"],
        "pi_running": running["pi"],
    }


def train(dataset, cfg, mode="full", model=None, state=None, out_dir=None, progress=False):
    """Train for cfg.total_steps optimisation steps.

    Steps are the unit: the data cycles, with epoch e ordered by
    batch_iter(seed, e), so a run resumed from a checkpoint at step s
    continues exactly as the uninterrupted run would. Metrics are appended
    to <out_dir>/metrics.jsonl and checkpoints written every
    cfg.checkpoint_every steps and at the end.
    """

    cfg.validate()
    check_mode(mode)
    if not dataset.pairs:
        raise ConfigError("cannot train on an empty dataset")
    if dataset.store.d != cfg.model.d:
        raise ConfigError(f"dataset has d={dataset.store.d}, model expects d={cfg.model.d}")

    if model is None:
        model = RewardModel.initialize(cfg.model, cfg.seed)
    params = model.parameters()
    if state is None:
        state = OptimizerState.zeros(params)

    metrics_file = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics_file = open(Path(out_dir) / "metrics.jsonl", "a")

    per_epoch = math.ceil(len(dataset.pairs) / cfg.batch_pairs)
    log = []
    checkpoints = []
    last_good = None
    if out_dir is not None and checkpoint_path(out_dir, state.step).exists():
        last_good = checkpoint_path(out_dir, state.step)
    epoch, batches = None, None
    try:
        steps = range(state.step, cfg.total_steps)
        for step in tqdm(steps, desc=f"train[{mode}]", disable=not progress, leave=False):
            step_epoch, slot = divmod(step, per_epoch)
            if step_epoch != epoch:
                epoch = step_epoch
                batches = batch_iter(dataset.pairs, cfg.batch_pairs, cfg.seed, epoch)
            try:
                record = train_step(model, params, state, batches[slot], dataset.store,
                                    cfg, lr_at(step, cfg), mode)
            except NumericError as exc:
                raise NumericError(f"{exc}; last good checkpoint: {last_good}") from exc
            log.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if state.step % cfg.log_every == 0:
                logger.info("step %d loss %.4f p %.3f lr %.2e |g| %.3f pi %s",
                            state.step, record["loss"], record["mean_p"], record["lr"],
                            record["grad_norm"], np.round(record["pi_running"], 3).tolist())
            if out_dir is not None and (state.step % cfg.checkpoint_every == 0
                                        or state.step == cfg.total_steps):
                last_good = checkpoint_path(out_dir, state.step)
                save_checkpoint(model, state, last_good)
                checkpoints.append(last_good)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    return TrainResult(model=model, state=state, log=log, checkpoints=checkpoints)
