"""Focal Bradley-Terry pair loss with magnitude weights and a routing-entropy floor."""

import logging
from dataclasses import dataclass

import numpy as np

import tensor as T
from errors import ConfigError, DataError
from tensor import Tensor

logger = logging.getLogger(__name__)

ONE_MINUS_P_FLOOR = 1e-12
ENTROPY_TARGETS = ("mean", "chosen")


@dataclass
class LossConfig:
    """tau_bt: BT temperature; gamma: focusing; lam/eta: entropy penalty weight/target."""

    tau_bt: float = 1.3
    gamma: float = 0.9
    lam: float = 0.01
    eta: float = 0.7
    entropy_target: str = "mean"

    def validate(self):
        if self.tau_bt <= 0:
            raise ConfigError(f"loss.tau_bt must be > 0, got {self.tau_bt}")
        if self.gamma < 0:
            raise ConfigError(f"loss.gamma must be >= 0, got {self.gamma}")
        if self.lam < 0 or self.eta < 0:
            raise ConfigError("loss.lam and loss.eta must be >= 0")
        if self.entropy_target not in ENTROPY_TARGETS:
            raise ConfigError(f"loss.entropy_target must be one of {ENTROPY_TARGETS}")
        if self.eta > np.log(3):
            logger.warning("eta=%.4f exceeds ln 3; the entropy penalty can never vanish", self.eta)
        return self


@dataclass
class PairLossBreakdown:
    """Per-pair components (tensors of shape (B,)) and their mean `loss`."""

    p: Tensor
    focal_term: Tensor
    entropy_chosen: Tensor
    entropy_rejected: Tensor
    penalty: Tensor
    w_m: np.ndarray
    total: Tensor
    loss: Tensor


def bt_probability(r_plus, r_minus, tau_bt):
    """p = sigmoid((r+ - r-) / tau_bt)."""

    return T.sigmoid(T.scale(T.sub(r_plus, r_minus), 1.0 / tau_bt))


def magnitude_weight(magnitude):
    """w_m = sqrt(max(magnitude, 1)); 0 means "absent" and weighs 1."""

    m = np.asarray(magnitude, dtype=np.float64)
    if np.any(m < 0):
        raise DataError(f"negative preference magnitude: {magnitude!r}")
    w = np.sqrt(np.maximum(m, 1.0))
    return float(w) if w.ndim == 0 else w


def routing_entropy(pi):
    """-sum_i pi_i ln pi_i over the last axis, with 0 ln 0 = 0."""

    return -T.sum(pi * T.log(T.clamp_min(pi, 1e-300)), axis=-1)


def entropy_penalty(H, eta, lam):
    """lam * max(0, eta - H)^2."""

    return T.scale(T.power(T.relu(T.sub(eta, H)), 2), lam)


def pair_loss(reward_plus, reward_minus, magnitude, cfg):
    """-w_m (1-p)^gamma log p + entropy penalty, per pair and averaged."""

    x = T.scale(T.sub(reward_plus.reward, reward_minus.reward), 1.0 / cfg.tau_bt)
    p = T.sigmoid(x)
    log_p = T.log_sigmoid(x)
    # (1 - p)^gamma = exp(gamma ln(1 - p)), with 1 - p = sigmoid(-x)
    one_minus_p = T.clamp_min(T.sigmoid(T.scale(x, -1.0)), ONE_MINUS_P_FLOOR)
    modulator = T.exp(T.scale(T.log(one_minus_p), cfg.gamma))
    w_m = np.broadcast_to(magnitude_weight(magnitude), p.dims).astype(np.float64)
    focal = -(Tensor(w_m) * modulator * log_p)

    h_plus = routing_entropy(reward_plus.pi)
    h_minus = routing_entropy(reward_minus.pi)
    pen_plus = entropy_penalty(h_plus, cfg.eta, cfg.lam)
    if cfg.entropy_target == "chosen":
        penalty = pen_plus
    else:
        penalty = T.scale(pen_plus + entropy_penalty(h_minus, cfg.eta, cfg.lam), 0.5)

    total = focal + penalty
    return PairLossBreakdown(p=p, focal_term=focal, entropy_chosen=h_plus,
                             entropy_rejected=h_minus, penalty=penalty, w_m=w_m,
                             total=total, loss=T.mean(total))
