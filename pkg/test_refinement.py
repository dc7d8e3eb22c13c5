"""Refinement stack tests: blocks, depth gate and mixture."""

# run these tests like:
#
#    python -m unittest test_refinement.py


from dataclasses import replace
from unittest import TestCase

import numpy as np

from errors import ShapeError
from models import ModelConfig, RewardModel, TokenSequence, collate
from refinement import block_forward, bypass, depth_gate, refine
from tensor import Tensor, no_grad


def np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def np_block(block, H):
    """Straight-line single-sequence forward of one block (no padding)."""

    attn = block.attn
    L, d = H.shape
    dh = d // attn.n_heads
    x = np_layer_norm(H, block.ln_attn.gain.data, block.ln_attn.bias.data)
    q = x @ attn.query.weight.data + attn.query.bias.data
    k = x @ attn.key.weight.data + attn.key.bias.data
    v = x @ attn.value.weight.data + attn.value.bias.data
    heads = []
    for h in range(attn.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        s = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        heads.append(w @ v[:, cols])
    context = np.concatenate(heads, axis=1)
    H1 = H + context @ attn.output.weight.data + attn.output.bias.data
    y = np_layer_norm(H1, block.ln_ffn.gain.data, block.ln_ffn.bias.data)
    hidden = np_gelu(y @ block.ffn.fc1.weight.data + block.ffn.fc1.bias.data)
    return H1 + hidden @ block.ffn.fc2.weight.data + block.ffn.fc2.bias.data


class RefinementTestCase(TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.config = ModelConfig(d=8, K=2, n_heads=2)
        self.trained = RewardModel.initialize(self.config, seed=1, init_std=0.3,
                                              zero_residual=False)
        self.fresh = RewardModel.initialize(self.config, seed=1)

    def seq(self, L=6, prompt_len=2):
        return TokenSequence.from_prompt_len(self.rng.normal(size=(L, 8)), prompt_len)

    #####
    ## blocks
    #####
    def test_zero_output_projection_is_identity(self):
        batch = collate([self.seq()])
        H = Tensor(batch.embeddings)
        with no_grad():
            out = block_forward(self.fresh.refinement.blocks[0], H, batch.pad_mask)
        np.testing.assert_array_equal(out.data, batch.embeddings)

    def test_padding_rows_are_ignored(self):
        block = self.trained.refinement.blocks[0]
        seq = self.seq(L=2, prompt_len=1).padded(3)
        outputs = []
        for fill in (0.0, 1e3):
            emb = seq.embeddings.copy()
            emb[2] = fill
            with no_grad():
                out = block_forward(block, Tensor(emb[None]), seq.pad_mask[None])
            outputs.append(out.data[0, :2])
        np.testing.assert_allclose(outputs[0], outputs[1], atol=1e-12)

    def test_block_matches_oracle(self):
        block = self.trained.refinement.blocks[0]
        seq = self.seq()
        with no_grad():
            out = block_forward(block, Tensor(seq.embeddings[None]), seq.pad_mask[None])
        np.testing.assert_allclose(out.data[0], np_block(block, seq.embeddings), atol=1e-10)

    def test_wrong_width(self):
        block = self.trained.refinement.blocks[0]
        with self.assertRaises(ShapeError):
            block_forward(block, Tensor(np.ones((1, 3, 5))), np.ones((1, 3), dtype=bool))

    #####
    ## depth gate
    #####
    def test_zero_gate_is_uniform(self):
        batch = collate([self.seq()])
        with no_grad():
            alpha = depth_gate(self.fresh.refinement, Tensor(batch.embeddings), batch.pad_mask)
        np.testing.assert_allclose(alpha.data, [[0.5, 0.5]], atol=1e-12)

    def test_gate_bias(self):
        stack = self.fresh.refinement
        stack.gate.bias.data[:] = [10.0, 0.0]
        batch = collate([self.seq()])
        with no_grad():
            alpha = depth_gate(stack, Tensor(batch.embeddings), batch.pad_mask)
        np.testing.assert_allclose(alpha.data[0], [0.9999546, 0.0000454], atol=1e-7)

    def test_gate_invariant_to_duplicated_tokens(self):
        stack = self.trained.refinement
        seq = self.seq()
        doubled = TokenSequence.from_prompt_len(np.vstack([seq.embeddings, seq.embeddings]), 2)
        with no_grad():
            a = depth_gate(stack, Tensor(seq.embeddings[None]), seq.pad_mask[None])
            b = depth_gate(stack, Tensor(doubled.embeddings[None]), doubled.pad_mask[None])
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    #####
    ## refine
    #####
    def test_single_block(self):
        config = ModelConfig(d=8, K=1, n_heads=2)
        model = RewardModel.initialize(config, seed=2, init_std=0.3, zero_residual=False)
        with no_grad():
            states = refine(self.seq(), model.refinement)
        np.testing.assert_allclose(states.alpha.data, [[1.0]])
        np.testing.assert_allclose(states.refined.data, states.per_block[0].data, atol=1e-15)

    def test_identity_blocks(self):
        with no_grad():
            states = refine(self.seq(), self.fresh.refinement)
        np.testing.assert_allclose(states.refined.data, states.initial.data, atol=1e-15)

    def test_mixture(self):
        stack = self.trained.refinement
        stack.gate.weight.data[:] = 0.0
        stack.gate.bias.data[:] = [0.0, np.log(3.0)]
        with no_grad():
            states = refine(self.seq(), stack)
        np.testing.assert_allclose(states.alpha.data, [[0.25, 0.75]], atol=1e-12)
        H1, H2 = (h.data for h in states.per_block)
        np.testing.assert_allclose(states.refined.data, 0.25 * H1 + 0.75 * H2, atol=1e-12)

    def test_alpha_on_simplex(self):
        with no_grad():
            for _ in range(50):
                states = refine(self.seq(L=int(self.rng.integers(3, 9))), self.trained.refinement)
                self.assertLess(abs(states.alpha.data.sum() - 1.0), 1e-10)
                self.assertTrue(np.all(states.alpha.data >= 0))

    def test_bypass(self):
        states = bypass(self.seq(), 2)
        np.testing.assert_array_equal(states.refined.data, states.initial.data)
        np.testing.assert_allclose(states.alpha.data, [[0.5, 0.5]])

    def test_refined_is_convex_per_token(self):
        with no_grad():
            states = refine(collate([self.seq(L=7), self.seq(L=4)]), self.trained.refinement)
        stacked = np.stack([h.data for h in states.per_block])
        self.assertTrue(np.all(states.refined.data >= stacked.min(axis=0) - 1e-12))
        self.assertTrue(np.all(states.refined.data <= stacked.max(axis=0) + 1e-12))

    def test_padding_contents_are_ignored(self):
        stack = self.trained.refinement
        short, long = self.seq(L=4, prompt_len=2), self.seq(L=9, prompt_len=3)
        batch = collate([short, long])
        noisy = batch.embeddings.copy()
        noisy[0, 4:] = self.rng.normal(scale=50.0, size=(5, 8))
        with no_grad():
            a = refine(batch, stack)
            b = refine(replace(batch, embeddings=noisy), stack)
            alone = refine(short, stack)
        np.testing.assert_allclose(b.alpha.data, a.alpha.data, atol=1e-10)
        np.testing.assert_allclose(a.alpha.data[0], alone.alpha.data[0], atol=1e-10)
        np.testing.assert_allclose(b.refined.data[0, :4], a.refined.data[0, :4], atol=1e-10)
        np.testing.assert_allclose(b.refined.data[0, :4], alone.refined.data[0], atol=1e-10)
        np.testing.assert_allclose(b.refined.data[1], a.refined.data[1], atol=1e-10)
