"""Stage I: transformer refinement blocks mixed by a depth gate."""

from dataclasses import dataclass

import numpy as np

import tensor as T
from errors import ConfigError, ShapeError
from models import SequenceBatch, TokenSequence, collate
from tensor import Tensor


@dataclass
class RefinedStates:
    """Per-block states H1..HK, depth weights alpha (B x K) and their mixture."""

    initial: Tensor
    per_block: list
    alpha: Tensor
    refined: Tensor


def as_batch(seq):
    if isinstance(seq, TokenSequence):
        return collate([seq])
    if isinstance(seq, SequenceBatch):
        return seq
    raise TypeError(f"expected TokenSequence or SequenceBatch, got {type(seq).__name__}")


def _check_input(H, pad_mask, d):
    if H.ndim != 3 or H.dims[2] != d or np.shape(pad_mask) != H.dims[:2]:
        raise ShapeError("refinement", [H.dims, np.shape(pad_mask)], f"expected B x L x {d}")


def self_attention(attn, x, pad_mask):
    """Multi-head attention over unpadded keys (bidirectional unless causal)."""

    B, L, d = x.dims
    if d % attn.n_heads:
        raise ConfigError(f"d={d} is not divisible by n_heads={attn.n_heads}")
    dh = d // attn.n_heads

    def split(t):
        return T.transpose(T.reshape(t, (B, L, attn.n_heads, dh)), (0, 2, 1, 3))

    q, k, v = split(attn.query(x)), split(attn.key(x)), split(attn.value(x))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
    mask = np.asarray(pad_mask, dtype=bool)[:, None, None, :]
    if attn.causal:
        mask = mask & np.tril(np.ones((L, L), dtype=bool))
    weights = T.masked_softmax(scores, mask)
    context = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
    return attn.output(context)


def block_forward(block, H, pad_mask):
    """H + Attn(LN(H)), then + FFN(LN(.)); shape stays B x L x d."""

    _check_input(H, pad_mask, block.ln_attn.gain.dims[0])
    x = H + self_attention(block.attn, block.ln_attn(H), pad_mask)
    return x + block.ffn(block.ln_ffn(x))


def depth_gate(stack, H0, pad_mask):
    """alpha = softmax(gate(masked mean of H0 over real tokens)), B x K."""

    _check_input(H0, pad_mask, stack.gate.weight.dims[0])
    context = T.masked_mean(H0, pad_mask, axis=1)
    return T.softmax(stack.gate(context), axis=-1)


def mix(alpha, states):
    """sum_k alpha[:, k] * states[k]."""

    B = alpha.dims[0]
    total = None
    for k, H in enumerate(states):
        term = T.reshape(T.take(alpha, k, axis=1), (B, 1, 1)) * H
        total = term if total is None else total + term
    return total


def refine(seq, stack):
    """Run the K blocks from H0 and mix their outputs with the depth gate.

    The mixture runs over H1..HK; H0 itself is not a component.
    """

    batch = as_batch(seq)
    H0 = Tensor(batch.embeddings)
    states = []
    H = H0
    for block in stack.blocks:
        H = block_forward(block, H, batch.pad_mask)
        states.append(H)
    alpha = depth_gate(stack, H0, batch.pad_mask)
    return RefinedStates(initial=H0, per_block=states, alpha=alpha, refined=mix(alpha, states))


def bypass(seq, K):
    """Stage I switched off: refined = H0; alpha is reported as uniform."""

    batch = as_batch(seq)
    H0 = Tensor(batch.embeddings)
    alpha = Tensor(np.full((len(batch), K), 1.0 / K))
    return RefinedStates(initial=H0, per_block=[], alpha=alpha, refined=H0)
