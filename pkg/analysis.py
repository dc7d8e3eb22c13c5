"""Pairwise accuracy, routing profiles, the alignment diagnostic and ablations."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

import tensor as T
from aggregation import check_mode, pool_views, reward, score_and_route
from errors import ConfigError, UsageError
from models import VIEWS, RewardModel, collate
from tensor import Tensor, no_grad
from training import train

logger = logging.getLogger(__name__)

STAGES = ("before", "after")
EVAL_POINTS = ("chosen", "rejected", "midpoint")
ZERO_NORM = 1e-12
CHUNK_PAIRS = 64


def eval_threads():
    """Evaluation fan-out from PRISM_EVAL_THREADS (default 1)."""

    raw = os.environ.get("PRISM_EVAL_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"PRISM_EVAL_THREADS must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"PRISM_EVAL_THREADS must be >= 1, got {threads}")
    return threads


def _chunks(pairs, size=CHUNK_PAIRS):
    return [pairs[i:i + size] for i in range(0, len(pairs), size)]


def _fan_out(fn, chunks, threads):
    """Apply fn to every chunk; results come back in chunk order."""

    threads = eval_threads() if threads is None else threads
    if threads == 1 or len(chunks) < 2:
        return [fn(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def _pair_batch(pairs, store):
    return collate([store.get(p.chosen) for p in pairs] + [store.get(p.rejected) for p in pairs])


##############################################################################
# Per-pair scoring


@dataclass
class PairRecord:
    """Scores of one pair; pi_chosen is None for plain scoring functions."""

    id: str
    domain: str
    r_chosen: float
    r_rejected: float
    pi_chosen: tuple = None
    alignment: dict = field(default_factory=dict)

    @property
    def credit(self):
        if self.r_chosen > self.r_rejected:
            return 1.0
        if self.r_chosen == self.r_rejected:
            return 0.5
        return 0.0

    def to_row(self):
        row = {"id": self.id, "domain": self.domain,
               "r_chosen": self.r_chosen, "r_rejected": self.r_rejected}
        pi = self.pi_chosen or (None, None, None)
        row.update({f"pi_{view}": value for view, value in zip(VIEWS, pi)})
        row.update({f"align_{key}": value for key, value in sorted(self.alignment.items())})
        return row


def score_pairs(model, pairs, store, mode="full", threads=None):
    """Score every pair without recording gradients.

    `model` is a RewardModel or any callable mapping a SequenceBatch to a
    length-B array of rewards.
    """

    check_mode(mode)

    def run(chunk):
        n = len(chunk)
        batch = _pair_batch(chunk, store)
        with no_grad():
            if isinstance(model, RewardModel):
                out = reward(batch, model, mode)
                rewards, pi = out.reward.data, out.pi.data
            else:
                rewards, pi = np.asarray(model(batch), dtype=np.float64), None
        return [PairRecord(id=p.id, domain=p.domain,
                           r_chosen=float(rewards[i]), r_rejected=float(rewards[n + i]),
                           pi_chosen=None if pi is None else tuple(float(x) for x in pi[i]))
                for i, p in enumerate(chunk)]

    return [record for part in _fan_out(run, _chunks(pairs), threads) for record in part]


def _by_domain(records):
    groups = {}
    for record in records:
        groups.setdefault(record.domain, []).append(record)
    return dict(sorted(groups.items()))


def accuracy_from_records(records):
    """({domain: accuracy, "overall": accuracy}, {domain: count, "overall": count})."""

    accuracy, counts = {}, {}
    for domain, group in _by_domain(records).items():
        accuracy[domain] = float(np.mean([r.credit for r in group]))
        counts[domain] = len(group)
    if records:
        accuracy["overall"] = float(np.mean([r.credit for r in records]))
        counts["overall"] = len(records)
    return accuracy, counts


def routing_from_records(records):
    """Mean chosen-response pi per domain."""

    profile = {}
    for domain, group in _by_domain(records).items():
        pis = [r.pi_chosen for r in group if r.pi_chosen is not None]
        if pis:
            profile[domain] = np.mean(np.array(pis), axis=0).tolist()
    return profile


def pairwise_accuracy(model, pairs, store, mode="full", threads=None):
    """Fraction of pairs with r(chosen) > r(rejected), ties scoring 0.5."""

    accuracy, _ = accuracy_from_records(score_pairs(model, pairs, store, mode, threads))
    return accuracy


def routing_profile(model, pairs, store, mode="full", threads=None):
    if not isinstance(model, RewardModel):
        raise UsageError("routing_profile needs a RewardModel")
    return routing_from_records(score_pairs(model, pairs, store, mode, threads))


##############################################################################
# Alignment diagnostic


@dataclass
class AlignmentResult:
    """Per-domain mean cosine per view plus the gate-weighted combination."""

    stage: str
    at: str
    by_domain: dict
    excluded: dict
    per_pair: dict


def _cosines(grads, diffs):
    g_norm = np.linalg.norm(grads, axis=1)
    d_norm = np.linalg.norm(diffs, axis=1)
    valid = (g_norm > ZERO_NORM) & (d_norm > ZERO_NORM)
    cos = np.full(len(grads), np.nan)
    cos[valid] = np.sum(grads[valid] * diffs[valid], axis=1) / (g_norm[valid] * d_norm[valid])
    return cos


def gate_weighted(alignments, pi_bar):
    """sum_v pi_v * align_v, renormalised over the views that have a value."""

    weights = [(pi_bar[i], alignments[view]) for i, view in enumerate(VIEWS)
               if alignments.get(view) is not None]
    total = sum(w for w, _ in weights)
    if not weights or total <= 0:
        return None
    return float(sum(w * a for w, a in weights) / total)


def alignment_score(model, pairs, store, stage, at="chosen", mode="full", threads=None):
    """Cosine between grad_z r and z(chosen) - z(rejected), per view and domain.

    Views are pooled from H0 ("before") or from the refined states
    ("after") and scored through the same trained heads and router. The
    gradient is taken at the chosen view vectors, the rejected ones or
    their midpoint. Gate weights are the domain-mean chosen routing weights
    of the ordinary forward pass.
    """

    check_mode(mode)
    if stage not in STAGES:
        raise UsageError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    if at not in EVAL_POINTS:
        raise UsageError(f"unknown evaluation point {at!r}; expected one of {', '.join(EVAL_POINTS)}")

    def run(chunk):
        n = len(chunk)
        batch = _pair_batch(chunk, store)
        with no_grad():
            out = reward(batch, model, mode)
            states = out.states.initial if stage == "before" else out.states.refined
            pooled = [z.data for z in pool_views(states, batch, model.scorer)[:4]]
        plus = [z[:n] for z in pooled]
        minus = [z[n:] for z in pooled]
        if at == "chosen":
            point = plus
        elif at == "rejected":
            point = minus
        else:
            point = [(a + b) / 2.0 for a, b in zip(plus, minus)]

        leaves = [Tensor(z, requires_grad=True) for z in point]
        T.current_tape().clear()
        _, _, r = score_and_route(*leaves, model, mode)
        grads = T.grad(T.sum(r), leaves[:3])
        cos = np.stack([_cosines(g, a - b) for g, a, b in zip(grads, plus, minus)], axis=1)
        return cos, out.pi.data[:n]

    parts = _fan_out(run, _chunks(pairs), threads)
    cos = np.concatenate([c for c, _ in parts]) if parts else np.zeros((0, 3))
    pi = np.concatenate([p for _, p in parts]) if parts else np.zeros((0, 3))

    by_domain, excluded, per_pair = {}, {}, {}
    domains = np.array([p.domain for p in pairs])
    for i, pair in enumerate(pairs):
        per_pair[pair.id] = {view: (None if np.isnan(cos[i, v]) else float(cos[i, v]))
                             for v, view in enumerate(VIEWS)}
    for domain in sorted(set(domains.tolist())):
        rows = domains == domain
        values = {}
        excluded[domain] = {}
        for v, view in enumerate(VIEWS):
            column = cos[rows, v]
            kept = column[~np.isnan(column)]
            excluded[domain][view] = int(len(column) - len(kept))
            values[view] = float(kept.mean()) if len(kept) else None
        values["gated"] = gate_weighted(values, pi[rows].mean(axis=0))
        by_domain[domain] = values
        if any(excluded[domain].values()):
            logger.warning("alignment[%s] %s: excluded %s", stage, domain, excluded[domain])
    return AlignmentResult(stage=stage, at=at, by_domain=by_domain, excluded=excluded,
                           per_pair=per_pair)


##############################################################################
# Reports


@dataclass
class EvalReport:
    """Everything one evaluation of one model produced.

    accuracy and counts map domain -> value with an "overall" entry;
    routing maps domain -> mean [pi_last, pi_mean, pi_attn]; alignment and
    alignment_excluded map stage -> domain -> view -> value.
    """

    mode: str
    seed: int = None
    accuracy: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    routing: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    alignment_excluded: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __repr__(self):
        overall = self.accuracy.get("overall")
        return f"<EvalReport mode={self.mode} seed={self.seed} overall={overall}>"

    def domains(self):
        return [d for d in self.accuracy if d != "overall"]

    def macro_accuracy(self):
        values = [self.accuracy[d] for d in self.domains()]
        return float(np.mean(values)) if values else None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown report keys: {', '.join(sorted(unknown))}")
        return cls(**data)


def evaluate(model, pairs, store, mode="full", what=("accuracy", "routing"), at="chosen",
             seed=None, domains=None, threads=None):
    """Score `pairs` and build an EvalReport plus the per-pair records.

    `what` may add "alignment"; `domains` lists the groups expected so
    that an empty one is noted rather than silently missing.
    """

    unknown = set(what) - {"accuracy", "routing", "alignment"}
    if unknown:
        raise UsageError(f"unknown analysis section(s): {', '.join(sorted(unknown))}")
    records = score_pairs(model, pairs, store, mode, threads)
    report = EvalReport(mode=mode, seed=seed)
    report.accuracy, report.counts = accuracy_from_records(records)
    for domain in domains or []:
        if domain not in report.counts:
            report.notes.append(f"domain {domain!r} has no pairs; omitted")
    if "routing" in what and isinstance(model, RewardModel):
        report.routing = routing_from_records(records)
    if "alignment" in what:
        by_id = {record.id: record for record in records}
        for stage in STAGES:
            result = alignment_score(model, pairs, store, stage, at=at, mode=mode, threads=threads)
            report.alignment[stage] = result.by_domain
            report.alignment_excluded[stage] = result.excluded
            for pair_id, values in result.per_pair.items():
                by_id[pair_id].alignment.update(
                    {f"{stage}_{view}": value for view, value in values.items()})
    logger.info("evaluated mode=%s on %d pairs: overall %.4f", mode, len(records),
                report.accuracy.get("overall", float("nan")))
    return report, records


def ablation_eval(dataset, mode, cfg, test_pairs=None, what=("accuracy", "routing"),
                  at="chosen", out_dir=None, progress=False, threads=None):
    """Train one variant under `cfg` and evaluate it.

    Every mode shares cfg.seed, hence the same initial weights and the
    same batch order; only the head/router or refinement pathway differs.
    """

    check_mode(mode)
    result = train(dataset, cfg, mode=mode, out_dir=out_dir, progress=progress)
    pairs = dataset.pairs if test_pairs is None else test_pairs
    report, _ = evaluate(result.model, pairs, dataset.store, mode=mode, what=what, at=at,
                         seed=cfg.seed, domains=dataset.domains(), threads=threads)
    return report


def average_reports(reports):
    """Seed-averaged accuracy per (mode, domain), in first-seen mode order."""

    grouped = {}
    for report in reports:
        grouped.setdefault(report.mode, []).append(report)
    rows = []
    for mode, group in grouped.items():
        domains = sorted({d for r in group for d in r.domains()})
        accuracy = {d: float(np.mean([r.accuracy[d] for r in group if d in r.accuracy]))
                    for d in domains}
        macro = float(np.mean(list(accuracy.values()))) if accuracy else None
        overall = [r.accuracy["overall"] for r in group if "overall" in r.accuracy]
        rows.append({"mode": mode, "seeds": [r.seed for r in group], "accuracy": accuracy,
                     "macro": macro,
                     "overall": float(np.mean(overall)) if overall else None})
    return rows
