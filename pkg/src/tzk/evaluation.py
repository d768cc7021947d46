"""Metrics and qualitative probes: bits/dim, conditional NLL, accuracy,
latent interpolation.

Likelihoods convert to bits per dimension as nats / (D ln 2). Byte images
are uniformly dequantized onto [0,1)^D and the 8 bits spent on the byte
grid are added back, so an exactly uniform model scores 8.0 bpd.

Large-scale reference numbers from the original TzK experiments are kept as
documentation constants only; they are not reproducible at desk scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tz
from .data import Dataset
from .errors import ContractError
from .knowledge import derive_seed
from .nets import standard_normal_log_prob_rows
from .objective import TzkModel
from .tensor import Tensor

LN2 = math.log(2.0)

# Published large-scale results (bits/dim) for the original TzK experiments;
# documentation only, desk-scale runs do not approach these.
REFERENCE_BPD = {
    "cifar10": {"prior": 3.54, "conditional": 2.99},
    "mnist": {"prior": 1.11, "conditional": 1.02},
}


@dataclass
class EvalReport:
    """One evaluation run: named metrics over a dataset."""

    dataset: str
    metrics: dict[str, float] = field(default_factory=dict)
    sample_count: int = 0
    seed: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["dataset", "metric", "value", "sample_count", "seed"])
            for name, value in self.metrics.items():
                writer.writerow([self.dataset, name, repr(value),
                                 self.sample_count, self.seed])

    def pretty(self) -> str:
        width = max((len(k) for k in self.metrics), default=6)
        lines = [f"dataset: {self.dataset}  (n={self.sample_count}, seed={self.seed})"]
        for name, value in self.metrics.items():
            lines.append(f"  {name:<{width}}  {value: .6f}")
        return "\n".join(lines)


def _model_log_prob(model, t: Tensor) -> Tensor:
    """Unconditional log density; accepts a TzkModel or anything flow-like."""
    flow = getattr(model, "tflow", model)
    return flow.log_prob(t)


def nll_bits_per_dim(model, dataset: Dataset, seed: int = 0,
                     batch_size: int = 512) -> float:
    """Mean negative log likelihood in bits per dimension.

    Continuous data is scored as-is; byte images are dequantized with
    uniform noise, scored on [0,1)^D, and charged log2(256) per dimension.
    """
    if dataset.n == 0:
        raise ContractError("nll_bits_per_dim needs a non-empty dataset")
    rng = np.random.default_rng(derive_seed(seed, "nll"))
    d = dataset.dim
    total = 0.0
    with tz.no_grad():
        for start in range(0, dataset.n, batch_size):
            idx = np.arange(start, min(start + batch_size, dataset.n))
            rows = dataset.observations(rng=rng, idx=idx)
            lp = _model_log_prob(model, Tensor(rows.astype(tz.default_dtype())))
            total += float(np.sum(lp.data))
    bpd = -total / (dataset.n * d * LN2)
    if dataset.kind == "byte-image":
        bpd += math.log2(256.0)
    return bpd


def conditional_nll(model: TzkModel, head_id: str, dataset: Dataset,
                    draws: int = 1, seed: int = 0,
                    batch_size: int = 512) -> tuple[float, float]:
    """Conditional bits/dim via posterior code draws at e=1.

    Per point: sample a code from the inference posterior, score the
    observation under the generative conditional. Returns the mean and the
    Monte-Carlo standard error over all point/draw scores.
    """
    head = model.head(head_id)
    if dataset.n == 0:
        raise ContractError("conditional_nll needs a non-empty dataset")
    if draws < 1:
        raise ContractError("conditional_nll needs draws >= 1")
    rng = np.random.default_rng(derive_seed(seed, f"cond-nll:{head_id}"))
    d = dataset.dim
    scores = []
    with tz.no_grad():
        for start in range(0, dataset.n, batch_size):
            idx = np.arange(start, min(start + batch_size, dataset.n))
            rows = dataset.observations(rng=rng, idx=idx)
            t = Tensor(rows.astype(tz.default_dtype()))
            for _ in range(draws):
                c = head.sample_c("posterior", e=1, t=t, rng=rng)
                lp = head.log_p_t_given_e_c(t, 1, c, model.tflow)
                scores.append(np.asarray(lp.data, dtype=np.float64))
    flat = np.concatenate(scores) / (d * LN2)
    bpd = -float(np.mean(flat))
    if dataset.kind == "byte-image":
        bpd += math.log2(256.0)
    se = float(np.std(flat) / math.sqrt(flat.size))
    return bpd, se


def discriminator_accuracy(model: TzkModel, head_id: str, dataset: Dataset,
                           threshold: float = 0.5, seed: int = 0) -> float:
    """Fraction of examples where [p(e=1|t) > threshold] matches the label.

    A probability exactly at the threshold predicts 0, so ties count as
    incorrect for positive examples.
    """
    head = model.head(head_id)
    if head_id not in dataset.labels:
        raise KeyError(f"dataset has no label column {head_id!r}")
    labels = dataset.labels[head_id]
    known = labels >= 0
    if not known.any():
        raise ContractError(f"label column {head_id!r} is entirely unobserved")
    rng = np.random.default_rng(derive_seed(seed, "disc-acc"))
    rows = dataset.observations(rng=rng, idx=np.flatnonzero(known))
    with tz.no_grad():
        logits = head.disc_t.logits(Tensor(rows.astype(tz.default_dtype()))).data
    prob = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    pred = prob > threshold
    return float(np.mean(pred == (labels[known] > 0)))


def interpolate_latent(model, t_a: Tensor, t_b: Tensor,
                       n_steps: int) -> list[tuple[np.ndarray, float]]:
    """Linear interpolation in the flow latent between two observations.

    Returns (observation, base log density of the interpolant's latent) for
    each step. The base density of every interpolant is at least the smaller
    endpoint density: the squared norm is convex along the segment.
    """
    if n_steps < 2:
        raise ContractError("interpolate_latent needs n_steps >= 2")
    flow = getattr(model, "tflow", model)
    with tz.no_grad():
        za, _ = flow.inverse(t_a if t_a.data.ndim == 1 else t_a)
        zb, _ = flow.inverse(t_b)
        za_d = za.data.reshape(-1)
        zb_d = zb.data.reshape(-1)
        out = []
        for alpha in np.linspace(0.0, 1.0, n_steps):
            z = (1.0 - alpha) * za_d + alpha * zb_d
            zt = Tensor(z.astype(tz.default_dtype()))
            base_lp = standard_normal_log_prob_rows(
                tz.reshape(zt, (1, z.size))).item()
            t, _ = flow.forward(zt)
            out.append((np.array(t.data), base_lp))
    return out


def evaluate(model: TzkModel, dataset: Dataset, head_id: Optional[str] = None,
             seed: int = 0, draws: int = 1) -> EvalReport:
    """Standard evaluation bundle: bpd, optional conditional bpd, accuracies,
    and consistency-gap statistics on filled batches."""
    from .training import fill_missing_codes

    report = EvalReport(dataset=dataset.name, sample_count=dataset.n, seed=seed)
    report.metrics["bpd"] = nll_bits_per_dim(model, dataset, seed=seed)
    if head_id is not None:
        bpd, se = conditional_nll(model, head_id, dataset, draws=draws, seed=seed)
        report.metrics[f"conditional_bpd:{head_id}"] = bpd
        report.metrics[f"conditional_bpd_se:{head_id}"] = se
    for hid in model.heads:
        if hid in dataset.labels and (dataset.labels[hid] >= 0).any():
            report.metrics[f"disc_accuracy:{hid}"] = discriminator_accuracy(
                model, hid, dataset, seed=seed)
    labeled = {hid: col for hid, col in dataset.labels.items() if hid in model.heads}
    if labeled:
        rng = np.random.default_rng(derive_seed(seed, "eval-gap"))
        batch = dataset.sample_batch(min(dataset.n, 256), rng)
        batch.heads = {hid: bh for hid, bh in batch.heads.items()
                       if hid in model.heads}
        with tz.no_grad():
            completed = fill_missing_codes(model, batch, rng)
            terms = model.bound_terms(completed)
        report.metrics["bound"] = float(np.mean(terms["bound"].data))
        report.metrics["mixture"] = float(np.mean(terms["mixture"].data))
        report.metrics["gap"] = float(np.mean(terms["gap"].data))
    return report
