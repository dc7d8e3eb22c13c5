"""AdamW with decoupled weight decay, warmup schedule and global-norm clipping."""

from dataclasses import dataclass, field

import numpy as np

from errors import NumericError, ShapeError


@dataclass
class OptimizerState:
    """First/second moment buffers keyed by parameter name, the step count and
    running sums of the per-step routing statistics."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)
    running_steps: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(step=0,
                   m={name: np.zeros_like(p.data) for name, p in params.items()},
                   v={name: np.zeros_like(p.data) for name, p in params.items()})

    def accumulate(self, **values):
        """Fold one step's statistics into the running sums; returns the running means."""

        self.running_steps += 1
        for key, value in values.items():
            value = np.asarray(value, dtype=np.float64)
            total = self.running.get(key)
            self.running[key] = value.copy() if total is None else total + value
        return {key: (total / self.running_steps).tolist() for key, total in self.running.items()}


def decays(name):
    """Weight decay applies to weight matrices, not biases or layer-norm gains."""

    return name.rsplit("/", 1)[-1] == "weight"


def lr_at(step, cfg):
    """Linear ramp from 0 over round(warmup_ratio * total_steps) steps, then constant."""

    warmup = int(round(cfg.warmup_ratio * cfg.total_steps))
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    return cfg.lr


def global_norm(grads):
    return float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_global_norm(grads, max_norm):
    """Scale all grads in place so their global L2 norm is at most max_norm.

    Returns the factor applied (1.0 when no clipping was needed).
    """

    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericError(f"non-finite gradient norm; offending parameters: {bad[:5]}")
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads.values():
        g *= factor
    return factor


def adamw_step(params, grads, state, lr, cfg):
    """One bias-corrected Adam update with decoupled weight decay, in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """

    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, param in params.items():
        g = grads[name]
        if g.shape != param.data.shape or state.m[name].shape != g.shape:
            raise ShapeError("adamw_step", [param.data.shape, g.shape, state.m[name].shape], name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if decays(name):
            update = update + cfg.weight_decay * param.data
        param.data -= lr * update
    state.step = t
    return state
