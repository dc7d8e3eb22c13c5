"""Generate synthetic preference pairs whose evidence sits in a known place.

Every pair shares one prompt block between its chosen and rejected
response. The chosen response receives +signal_strength * u spread over
its tokens according to the regime and the rejected response receives
-signal_strength * u at the same tokens:

    terminal     the whole signal on the final response token
    distributed  signal_strength / L_y on every response token
    sparse       the whole signal on one random non-final response token

All other entries are i.i.d. normal noise. Prompts also carry a per-regime
signature direction so a router conditioned on the prompt can tell the
regimes apart. `regime_strength` maps a regime to its own signal_strength.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from data import EmbeddingStore
from errors import ConfigError
from generator.helpers import REGIMES, injection_weights, quality_geometry, sample_length
from models import PreferencePair

logger = logging.getLogger(__name__)


@dataclass
class SyntheticSpec:
    regime: str = "terminal"
    d: int = 32
    prompt_len: tuple = (4, 8)
    response_len: tuple = (8, 24)
    signal_strength: float = 3.0
    noise_std: float = 1.0
    n_pairs: int = 100
    seed: int = 0
    direction_seed: int = None
    prompt_signature: float = 1.0
    max_magnitude: int = 1
    id_offset: int = 0
    regime_strength: dict = None

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; valid regimes: {', '.join(REGIMES)}")
        for name in ("prompt_len", "response_len"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.regime == "sparse" and self.response_len[0] < 2:
            raise ConfigError("the sparse regime needs responses of at least 2 tokens")
        if self.d < 1 or self.n_pairs < 1 or self.max_magnitude < 1:
            raise ConfigError("d, n_pairs and max_magnitude must be >= 1")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        unknown = set(self.regime_strength or ()) - set(REGIMES)
        if unknown:
            raise ConfigError(f"regime_strength names unknown regime(s) {sorted(unknown)}")
        return self

    @property
    def geometry_seed(self):
        return self.seed if self.direction_seed is None else self.direction_seed

    @property
    def strength(self):
        """signal_strength, unless regime_strength gives one for this regime."""

        return float((self.regime_strength or {}).get(self.regime, self.signal_strength))


def generate_synthetic(spec):
    """Return (EmbeddingStore, pairs) for one regime."""

    spec.validate()
    rng = np.random.default_rng([spec.seed, REGIMES.index(spec.regime)])
    u, signatures = quality_geometry(spec.d, spec.geometry_seed)
    signature = spec.prompt_signature * signatures[spec.regime]

    records = {}
    pairs = []
    for i in range(spec.n_pairs):
        prompt_len = sample_length(rng, spec.prompt_len)
        response_len = sample_length(rng, spec.response_len)
        prompt = rng.normal(0.0, spec.noise_std, size=(prompt_len, spec.d)) + signature
        chosen = rng.normal(0.0, spec.noise_std, size=(response_len, spec.d))
        rejected = rng.normal(0.0, spec.noise_std, size=(response_len, spec.d))
        injection = spec.strength * np.outer(
            injection_weights(spec.regime, response_len, rng), u)
        magnitude = int(rng.integers(1, spec.max_magnitude + 1))

        chosen_id = spec.id_offset + 2 * i
        rejected_id = chosen_id + 1
        records[chosen_id] = (np.vstack([prompt, chosen + injection]), prompt_len)
        records[rejected_id] = (np.vstack([prompt, rejected - injection]), prompt_len)
        pairs.append(PreferencePair(id=f"{spec.regime}-{spec.id_offset + i:06d}",
                                    domain=spec.regime, chosen=chosen_id,
                                    rejected=rejected_id, magnitude=magnitude))

    logger.info("generated %d %s pairs (d=%d)", len(pairs), spec.regime, spec.d)
    return EmbeddingStore(spec.d, records), pairs


def generate_suite(specs):
    """Several regimes in one store; sequence ids are offset so they never collide."""

    if len({spec.d for spec in specs}) != 1:
        raise ConfigError("all specs of a suite must share d")
    records = {}
    pairs = []
    offset = 0
    for spec in specs:
        store, part = generate_synthetic(replace(spec, id_offset=offset))
        records.update({seq_id: store.raw(seq_id) for seq_id in store.ids()})
        pairs.extend(part)
        offset += 2 * spec.n_pairs
    return EmbeddingStore(specs[0].d, records), pairs
