"""Stage II: pooled views, per-view heads and the prompt-conditioned router."""

from dataclasses import dataclass

import numpy as np

import tensor as T
from errors import DataError, UsageError
from models import VIEWS
from refinement import as_batch, bypass, refine
from tensor import Tensor

MODES = ("full", "last_only", "mean_only", "attn_only", "no_refine")
FORCED_VIEW = {"last_only": 0, "mean_only": 1, "attn_only": 2}


@dataclass
class ViewBundle:
    """Pooled vectors (B x d each), attention weights and per-view scores (B x 3)."""

    z_last: Tensor
    z_mean: Tensor
    z_attn: Tensor
    z_prompt: Tensor
    beta: Tensor
    scores: Tensor


@dataclass
class RewardOutput:
    """Routing weights pi (B x 3) and rewards r (B,), with what produced them."""

    pi: Tensor
    reward: Tensor
    views: ViewBundle = None
    states: object = None

    def subset(self, indices):
        """Rows `indices` of pi and reward, still on the tape."""

        return RewardOutput(pi=T.take(self.pi, indices, axis=0),
                            reward=T.take(self.reward, indices, axis=0))


def check_mode(mode):
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


def bypassed(mode):
    """Parameter-name prefixes whose values cannot reach the reward under `mode`."""

    check_mode(mode)
    if mode == "no_refine":
        return ("refinement/",)
    if mode not in FORCED_VIEW:
        return ()
    view = FORCED_VIEW[mode]
    skipped = ["router/"] + [f"heads/{v}/" for v in range(len(VIEWS)) if v != view]
    if VIEWS[view] != "attn":
        skipped.append("scorer/")
    return tuple(skipped)


##############################################################################
# Pooling


def pool_last(refined, response_mask):
    """Row tau = max{t : m_t = 1} of each sequence."""

    mask = np.asarray(response_mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise DataError("pool_last: empty response")
    L = mask.shape[1]
    tau = L - 1 - np.argmax(mask[:, ::-1], axis=1)
    one_hot = np.arange(L)[None, :] == tau[:, None]
    return T.masked_mean(refined, one_hot, axis=1)


def pool_mean(refined, response_mask):
    """sum_t m_t H_t / sum_t m_t over response tokens."""

    mask = np.asarray(response_mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise DataError("pool_mean: empty response")
    return T.masked_mean(refined, mask, axis=1)


def pool_attention(refined, pad_mask, scorer):
    """Softmax of W_a H_t + b_a over every unpadded token, prompt included."""

    B, L, _ = refined.dims
    beta = T.masked_softmax(scorer(refined), pad_mask)
    z = T.sum(T.reshape(beta, (B, L, 1)) * refined, axis=1)
    return z, beta


def pool_prompt(refined, prompt_len):
    """Mean of rows 0..prompt_len-1 of each sequence."""

    B, L, _ = refined.dims
    prompt_len = np.broadcast_to(np.asarray(prompt_len), (B,))
    if np.any(prompt_len < 1):
        raise DataError("pool_prompt: prompt_len must be >= 1")
    mask = np.arange(L)[None, :] < prompt_len[:, None]
    return T.masked_mean(refined, mask, axis=1)


##############################################################################
# Scoring and routing


def score_view(z, head):
    """Scalar score per row from an independent MLP head."""

    return T.reshape(head(z), (z.dims[0],))


def route(z_last, z_mean, z_attn, z_prompt, router):
    """pi = softmax(router([z_L; z_M; z_A; z_P]))."""

    return T.softmax(router(T.concat([z_last, z_mean, z_attn, z_prompt], axis=-1)), axis=-1)


def score_and_route(z_last, z_mean, z_attn, z_prompt, model, mode="full"):
    """Per-view scores, routing weights and r = sum_v pi_v s_v."""

    views = (z_last, z_mean, z_attn)
    scores = T.concat([T.reshape(score_view(z, head), (z.dims[0], 1))
                       for z, head in zip(views, model.heads)], axis=-1)
    if mode in FORCED_VIEW:
        pi = np.zeros((z_last.dims[0], 3))
        pi[:, FORCED_VIEW[mode]] = 1.0
        pi = Tensor(pi)
    else:
        pi = route(z_last, z_mean, z_attn, z_prompt, model.router)
    return scores, pi, T.sum(pi * scores, axis=-1)


def pool_views(refined, batch, scorer):
    """All four pooled vectors of a batch plus the attention weights."""

    z_attn, beta = pool_attention(refined, batch.pad_mask, scorer)
    prompt_len = batch.prompt_mask.sum(axis=1)
    return (pool_last(refined, batch.response_mask),
            pool_mean(refined, batch.response_mask),
            z_attn,
            pool_prompt(refined, prompt_len),
            beta)


def reward(seq, model, mode="full"):
    """Full pipeline: refine, pool, score, route, mix."""

    check_mode(mode)
    batch = as_batch(seq)
    if mode == "no_refine":
        states = bypass(batch, model.config.K)
    else:
        states = refine(batch, model.refinement)
    z_last, z_mean, z_attn, z_prompt, beta = pool_views(states.refined, batch, model.scorer)
    scores, pi, r = score_and_route(z_last, z_mean, z_attn, z_prompt, model, mode)
    views = ViewBundle(z_last=z_last, z_mean=z_mean, z_attn=z_attn, z_prompt=z_prompt,
                       beta=beta, scores=scores)
    return RewardOutput(pi=pi, reward=r, views=views, states=states)
