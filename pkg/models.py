"""Sequence types and parameter containers for the routed reward head."""

from dataclasses import dataclass, asdict

import numpy as np

import tensor as T
from errors import ConfigError, DataError, ShapeError
from tensor import Tensor

VIEWS = ("last", "mean", "attn")


##############################################################################
# Sequences and pairs


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """One prompt+response embedding matrix.

    Rows [0, prompt_len) are prompt tokens, response tokens follow, and
    any padding forms a contiguous suffix.
    """

    embeddings: np.ndarray
    response_mask: np.ndarray
    prompt_len: int
    pad_mask: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        resp = np.asarray(self.response_mask, dtype=bool)
        pad = np.asarray(self.pad_mask, dtype=bool)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "response_mask", resp)
        object.__setattr__(self, "pad_mask", pad)

        if emb.ndim != 2:
            raise ShapeError("TokenSequence", [emb.shape], "embeddings must be L x d")
        length = emb.shape[0]
        if resp.shape != (length,) or pad.shape != (length,):
            raise ShapeError("TokenSequence", [emb.shape, resp.shape, pad.shape])
        if self.prompt_len < 1:
            raise DataError(f"prompt_len must be >= 1, got {self.prompt_len}")
        if not resp.any():
            raise DataError("response_mask has no response token")
        if resp[:self.prompt_len].any():
            raise DataError("response tokens must follow the prompt")
        if np.any(resp & ~pad):
            raise DataError("a response token is marked as padding")
        n_real = int(pad.sum())
        if not pad[:n_real].all():
            raise DataError("padding must be a contiguous suffix")
        if self.prompt_len + int(resp.sum()) > length:
            raise DataError("prompt_len + response length exceeds L")

    def __repr__(self):
        return (f"<TokenSequence L={self.L} d={self.d} prompt_len={self.prompt_len} "
                f"response={int(self.response_mask.sum())}>")

    @property
    def L(self):
        return self.embeddings.shape[0]

    @property
    def d(self):
        return self.embeddings.shape[1]

    @classmethod
    def from_prompt_len(cls, embeddings, prompt_len):
        """Unpadded sequence whose response is every row from prompt_len on."""

        embeddings = np.asarray(embeddings, dtype=np.float64)
        length = embeddings.shape[0]
        idx = np.arange(length)
        return cls(embeddings=embeddings, response_mask=idx >= prompt_len,
                   prompt_len=prompt_len, pad_mask=np.ones(length, dtype=bool))

    def padded(self, length, fill=0.0):
        """Copy right-padded to `length` rows."""

        extra = length - self.L
        if extra < 0:
            raise ShapeError("padded", [(self.L, self.d), (length,)], "cannot shrink")
        pad_rows = np.full((extra, self.d), fill, dtype=np.float64)
        return TokenSequence(
            embeddings=np.vstack([self.embeddings, pad_rows]),
            response_mask=np.concatenate([self.response_mask, np.zeros(extra, dtype=bool)]),
            prompt_len=self.prompt_len,
            pad_mask=np.concatenate([self.pad_mask, np.zeros(extra, dtype=bool)]),
        )


@dataclass(frozen=True, eq=False)
class SequenceBatch:
    """B sequences right-padded to a common length L."""

    embeddings: np.ndarray
    response_mask: np.ndarray
    prompt_mask: np.ndarray
    pad_mask: np.ndarray

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def d(self):
        return self.embeddings.shape[2]

    def last_index(self):
        """Index of the final response token of each sequence."""

        L = self.response_mask.shape[1]
        return L - 1 - np.argmax(self.response_mask[:, ::-1], axis=1)


def collate(sequences):
    """Stack sequences into a SequenceBatch, padding to the longest one."""

    if not sequences:
        raise DataError("cannot collate an empty list of sequences")
    dims = {seq.d for seq in sequences}
    if len(dims) != 1:
        raise ShapeError("collate", [(seq.L, seq.d) for seq in sequences], "mixed d")
    length = max(seq.L for seq in sequences)
    padded = [seq.padded(length) for seq in sequences]
    prompt = np.zeros((len(padded), length), dtype=bool)
    for row, seq in enumerate(padded):
        prompt[row, :seq.prompt_len] = True
    return SequenceBatch(
        embeddings=np.stack([seq.embeddings for seq in padded]),
        response_mask=np.stack([seq.response_mask for seq in padded]),
        prompt_mask=prompt,
        pad_mask=np.stack([seq.pad_mask for seq in padded]),
    )


@dataclass(frozen=True)
class PreferencePair:
    """A prompt with a chosen and a rejected response, by sequence id."""

    id: str
    domain: str
    chosen: int
    rejected: int
    magnitude: int = 0

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise DataError(f"pair {self.id!r}: chosen and rejected are the same sequence")
        if self.magnitude < 0:
            raise DataError(f"pair {self.id!r}: negative magnitude {self.magnitude}")


##############################################################################
# Architecture


@dataclass
class ModelConfig:
    """Architecture dims. Widths left as None follow d."""

    d: int = 32
    K: int = 3
    n_heads: int = 4
    ffn_width: int = None
    head_hidden: int = None
    router_hidden: int = None
    causal: bool = False

    def __post_init__(self):
        if self.ffn_width is None:
            self.ffn_width = 2 * self.d
        if self.head_hidden is None:
            self.head_hidden = max(1, self.d // 2)
        if self.router_hidden is None:
            self.router_hidden = self.d

    def validate(self):
        for field_name in ("d", "K", "n_heads", "ffn_width", "head_hidden", "router_hidden"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"model.{field_name} must be >= 1")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        return self

    def to_arch(self):
        return np.array([self.d, self.K, self.n_heads, self.ffn_width,
                         self.head_hidden, self.router_hidden, int(self.causal)], dtype=np.float64)

    @classmethod
    def from_arch(cls, arch):
        d, K, n_heads, ffn, head, router, causal = (int(v) for v in arch)
        return cls(d=d, K=K, n_heads=n_heads, ffn_width=ffn, head_hidden=head,
                   router_hidden=router, causal=bool(causal))

    def to_dict(self):
        return asdict(self)


##############################################################################
# Parameter containers


class Module:
    """Walks its attributes for parameters in definition order."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}/")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}/{i}/")

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for param in self.parameters().values():
            param.zero_grad()


def _param(values, name):
    return Tensor(np.ascontiguousarray(values), requires_grad=True, name=name)


class Linear(Module):
    """y = x W + b with W stored in x out layout."""

    def __init__(self, n_in, n_out, rng, std, zero=False):
        values = rng.normal(0.0, std, size=(n_in, n_out))
        if zero:
            values[:] = 0.0
        self.weight = _param(values, "weight")
        self.bias = _param(np.zeros(n_out), "bias")

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, width):
        self.gain = _param(np.ones(width), "gain")
        self.bias = _param(np.zeros(width), "bias")

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, n_in, hidden, n_out, rng, std_in, std_out, zero_out=False):
        self.fc1 = Linear(n_in, hidden, rng, std_in)
        self.fc2 = Linear(hidden, n_out, rng, std_out, zero=zero_out)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class SelfAttention(Module):
    def __init__(self, d, n_heads, rng, std, zero_out, causal=False):
        if d % n_heads:
            raise ConfigError(f"d={d} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.causal = causal
        self.query = Linear(d, d, rng, std)
        self.key = Linear(d, d, rng, std)
        self.value = Linear(d, d, rng, std)
        self.output = Linear(d, d, rng, std, zero=zero_out)


class TransformerBlock(Module):
    """Pre-norm block: attention then a two-layer feed-forward network."""

    def __init__(self, config, rng, std, zero_out):
        self.ln_attn = LayerNorm(config.d)
        self.attn = SelfAttention(config.d, config.n_heads, rng, std, zero_out, config.causal)
        self.ln_ffn = LayerNorm(config.d)
        self.ffn = MLP(config.d, config.ffn_width, config.d, rng, std, std, zero_out=zero_out)


class RefinementStack(Module):
    """K transformer blocks plus the depth gate R^d -> R^K."""

    def __init__(self, config, rng, std, zero_out):
        self.K = config.K
        self.blocks = [TransformerBlock(config, rng, std, zero_out) for _ in range(config.K)]
        self.gate = Linear(config.d, config.K, rng, std, zero=zero_out)


class AttentionScorer(Module):
    """Single linear scorer W_a h + b_a for attention pooling."""

    def __init__(self, d, rng, std, zero=False):
        self.linear = Linear(d, 1, rng, std, zero=zero)

    def __call__(self, refined):
        return T.reshape(self.linear(refined), refined.dims[:-1])


class RewardModel(Module):
    """Refinement stack, attention scorer, one head per view and the router."""

    def __init__(self, config, rng, init_std=0.02, zero_residual=True):
        config.validate()
        d = config.d
        self.config = config
        self.refinement = RefinementStack(config, rng, init_std, zero_residual)
        self.scorer = AttentionScorer(d, rng, init_std, zero=zero_residual)
        self.heads = [
            MLP(d, config.head_hidden, 1, rng, d ** -0.5, config.head_hidden ** -0.5)
            for _ in VIEWS
        ]
        self.router = MLP(4 * d, config.router_hidden, 3, rng, (4 * d) ** -0.5,
                          config.router_hidden ** -0.5, zero_out=zero_residual)

    def __repr__(self):
        n = sum(p.data.size for p in self.parameters().values())
        return f"<RewardModel d={self.config.d} K={self.config.K} params={n}>"

    @classmethod
    def initialize(cls, config, seed, init_std=0.02, zero_residual=True):
        """Build a model from a seed.

        With zero_residual the attention/FFN output projections, the depth
        gate, the attention scorer and the router's last layer start at
        zero, so refined = H0 and alpha, beta, pi are uniform at step 0.
        Parameters are drawn in a fixed order whatever the flags are.
        """

        rng = np.random.default_rng(seed)
        return cls(config, rng, init_std=init_std, zero_residual=zero_residual)
