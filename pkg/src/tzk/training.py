"""Semi-supervised maximum-likelihood training.

The loop fills each example's missing latent codes by a fair coin flip
between the generative prior and the inference posterior (both
reparameterized, so gradients reach the samplers), evaluates the joint
bound, and applies Adam under a linear-warmup / inverse-sqrt-decay schedule.
Parameter groups can be frozen by name prefix; with a frozen observation
flow, heads share no mutable state and can be trained concurrently.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as tz
from .data import Batch, Dataset
from .errors import (
    ContractError,
    LabelingError,
    NumericError,
    StateError,
    TrainingAbort,
)
from .knowledge import KnowledgeHead, derive_seed
from . import objective
from .objective import CompletedBatch, CompletedHead, TzkModel
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Optimization knobs.

    The published recipe pairs lr 1e-5 and 4000 warmup steps with
    million-image runs; the defaults here are rescaled for desk-size data
    and stay config-overridable.
    """

    lr_max: float = 1e-3
    warmup_steps: int = 200
    batch_size: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 1000
    seed: int = 0
    freeze_tflow: bool = False
    grad_clip_norm: Optional[float] = 100.0
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ContractError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear ramp to lr_max at ``warmup_steps``, then inverse-sqrt decay."""
    if step < 1:
        raise ContractError("lr_schedule steps start at 1")
    w = config.warmup_steps
    return config.lr_max * min(step / w, math.sqrt(w / step))


class Adam:
    """Adam with bias correction over a named parameter table.

    Frozen prefixes receive no update and their moments stay untouched.
    """

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = dict(params)
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data, dtype=np.float64)
                  for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data, dtype=np.float64)
                  for name, p in self.params.items()}

    def register(self, params: dict[str, Tensor]) -> None:
        """Extend the table with freshly added parameters (zeroed moments)."""
        for name, p in params.items():
            if name in self.params:
                raise KeyError(f"parameter {name!r} already registered")
            self.params[name] = p
            self.m[name] = np.zeros_like(p.data, dtype=np.float64)
            self.v[name] = np.zeros_like(p.data, dtype=np.float64)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def apply(self, lr: float, frozen_prefixes: Sequence[str] = ()) -> None:
        self.step_count += 1
        b1, b2 = self.config.adam_beta1, self.config.adam_beta2
        eps = self.config.adam_eps
        t = self.step_count
        clip_scale = self._clip_scale(frozen_prefixes)
        for name, p in self.params.items():
            if _frozen(name, frozen_prefixes):
                continue
            g = p.grad
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64) * clip_scale
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** t)
            v_hat = self.v[name] / (1 - b2 ** t)
            p.assign_(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))

    def _clip_scale(self, frozen_prefixes: Sequence[str]) -> float:
        limit = self.config.grad_clip_norm
        if limit is None:
            return 1.0
        total = 0.0
        for name, p in self.params.items():
            if _frozen(name, frozen_prefixes) or p.grad is None:
                continue
            total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
        norm = math.sqrt(total)
        return 1.0 if norm <= limit else limit / norm


def _frozen(name: str, prefixes: Sequence[str]) -> bool:
    return any(name.startswith(pref) for pref in prefixes)


# -- code filling ----------------------------------------------------------------


def fill_missing_codes(model: TzkModel, batch: Batch, rng: np.random.Generator,
                       t_override: Optional[Tensor] = None) -> CompletedBatch:
    """Complete every participating head record with a concrete code.

    Observed codes pass through untouched. Missing codes are drawn per
    example by a fair coin: the generative branch samples the head's code
    flow prior, the inference branch samples the posterior Gaussian at the
    observed e. Both draws are reparameterized. Heads with no observed e for
    an example simply do not participate in that example.
    """
    if t_override is not None:
        t = t_override
    else:
        t = Tensor(np.asarray(batch.t, dtype=tz.default_dtype()))
    n = t.shape[0]
    heads = {}
    for hid, col in batch.heads.items():
        head = model.head(hid)
        e = np.asarray(col.e, dtype=np.int64)
        mask = e >= 0
        c_mask = (np.zeros(n, dtype=bool) if col.c_mask is None
                  else np.asarray(col.c_mask, dtype=bool))
        if col.c is None and c_mask.any():
            raise LabelingError(f"head {hid!r}: c_mask set without codes")
        if np.any(c_mask & ~mask):
            raise LabelingError(
                f"head {hid!r}: observed code without an observed existence bit"
            )
        needs_fill = mask & ~c_mask
        fill_idx = np.flatnonzero(needs_fill)
        enc_branch = rng.random(fill_idx.size) < 0.5
        enc_idx = fill_idx[enc_branch]
        dec_idx = fill_idx[~enc_branch]

        pieces: list[Tensor] = []
        order: list[np.ndarray] = []
        obs_idx = np.flatnonzero(c_mask)
        if obs_idx.size:
            obs = np.asarray(col.c, dtype=tz.default_dtype())[obs_idx]
            pieces.append(Tensor(obs))
            order.append(obs_idx)
        if enc_idx.size:
            eps = rng.standard_normal((enc_idx.size, head.code_dim))
            t_sub = tz.gather_rows(t, enc_idx)
            pieces.append(head.sample_c("posterior", e=e[enc_idx], t=t_sub, eps=eps))
            order.append(enc_idx)
        if dec_idx.size:
            eps = rng.standard_normal((dec_idx.size, head.code_dim))
            pieces.append(head.sample_c("prior", n=dec_idx.size, eps=eps))
            order.append(dec_idx)
        rest_idx = np.flatnonzero(~mask)
        if rest_idx.size:
            pieces.append(Tensor(np.zeros((rest_idx.size, head.code_dim),
                                          dtype=tz.default_dtype())))
            order.append(rest_idx)

        if len(pieces) == 1 and order[0].size == n and np.all(np.diff(order[0]) == 1):
            c = pieces[0]
        else:
            stacked = pieces[0] if len(pieces) == 1 else tz.concat_rows(*pieces)
            restore = np.empty(n, dtype=np.int64)
            restore[np.concatenate(order)] = np.arange(n)
            c = tz.gather_rows(stacked, restore)
        branch = np.full(n, objective.BRANCH_ABSENT, dtype=np.int8)
        branch[obs_idx] = objective.BRANCH_OBSERVED
        branch[enc_idx] = objective.BRANCH_ENCODER
        branch[dec_idx] = objective.BRANCH_DECODER
        heads[hid] = CompletedHead(mask=mask, e=np.maximum(e, 0), c=c, branch=branch)
    return CompletedBatch(t=t, heads=heads)


# -- training steps ----------------------------------------------------------------


def frozen_prefixes(model: TzkModel, config: TrainConfig,
                    extra: Sequence[str] = ()) -> list[str]:
    out = list(extra)
    if config.freeze_tflow:
        out.append("tflow.")
    return out


def train_step(model: TzkModel, batch: Batch, opt: Adam, config: TrainConfig,
               rng: np.random.Generator,
               frozen: Sequence[str] = ()) -> tuple[float, dict]:
    """One optimization step; returns the loss and batch statistics."""
    if model.tflow.needs_init and not model.tflow.actnorm_initialized:
        raise StateError("train_step requires an initialized actnorm")
    if batch.n < 1:
        raise ContractError("train_step needs a non-empty batch")
    # the step's graph only reaches parameters owned by this optimizer (the
    # flow is either registered here or detached), so this zeroing is complete
    opt.zero_grads()
    completed = fill_missing_codes(model, batch, rng)
    terms = model.bound_terms(completed)
    loss = tz.neg(tz.mean_all(terms["bound"]))
    stats = {
        "loss": loss.item(),
        "bound": float(np.mean(terms["bound"].data)),
        "mixture": float(np.mean(terms["mixture"].data)),
        "gap": float(np.mean(terms["gap"].data)),
    }
    for hid, col in completed.heads.items():
        if col.mask.any():
            stats[f"acc:{hid}"] = _disc_accuracy(model.head(hid), completed.t,
                                                 col.e, col.mask)
    if config.lr_max == 0.0:
        return stats["loss"], stats
    tz.backward(loss)
    lr = lr_schedule(opt.step_count + 1, config)
    opt.apply(lr, frozen_prefixes(model, config, frozen))
    stats["lr"] = lr
    return stats["loss"], stats


def _disc_accuracy(head: KnowledgeHead, t: Tensor, e: np.ndarray,
                   mask: np.ndarray) -> float:
    with tz.no_grad():
        logits = head.disc_t.logits(t.detach()).data
    pred = logits > 0.0
    ok = (pred == (e > 0)) & mask
    return float(np.sum(ok) / np.sum(mask))


def add_knowledge(model: TzkModel, head_spec: dict,
                  opt: Optional[Adam] = None) -> KnowledgeHead:
    """Append a freshly initialized head; existing behavior is untouched.

    The head's weights derive from (model seed, head id), so adding heads in
    any order yields identical parameters.
    """
    spec = dict(head_spec)
    head_id = spec.pop("id")
    head = KnowledgeHead(head_id, obs_dim=model.dim, seed=model.seed, **spec)
    model.add_head(head)
    if opt is not None:
        opt.register(dict(head.named_parameters()))
    return head


def train_loop(model: TzkModel, dataset: Dataset, config: TrainConfig,
               opt: Optional[Adam] = None,
               rng: Optional[np.random.Generator] = None,
               log_writer: Optional[Callable[[dict], None]] = None,
               on_checkpoint: Optional[Callable[[int, Adam, np.random.Generator], None]] = None,
               frozen: Sequence[str] = (),
               start_step: int = 0) -> tuple[Adam, np.random.Generator]:
    """Run ``max_steps`` optimization steps over sampled minibatches.

    A non-finite loss aborts with the failing step in the message.
    """
    if rng is None:
        rng = np.random.default_rng(derive_seed(config.seed, "train"))
    if opt is None:
        opt = Adam(dict(model.named_parameters()), config)
    if model.tflow.needs_init and not model.tflow.actnorm_initialized:
        init_n = max(config.batch_size, min(dataset.n, 256))
        init = dataset.sample_batch(init_n, rng)
        model.tflow.actnorm_init(Tensor(init.t.astype(tz.default_dtype())))
    for step in range(start_step + 1, config.max_steps + 1):
        batch = dataset.sample_batch(config.batch_size, rng)
        try:
            loss, stats = train_step(model, batch, opt, config, rng, frozen=frozen)
        except NumericError as err:
            raise TrainingAbort(
                f"non-finite loss at step {step} "
                f"(batch size {batch.n}, first t row {batch.t[0]!r}): {err}"
            ) from err
        if log_writer is not None:
            stats["step"] = step
            log_writer(stats)
        if (config.checkpoint_every and on_checkpoint is not None
                and step % config.checkpoint_every == 0 and step < config.max_steps):
            on_checkpoint(step, opt, rng)
    if on_checkpoint is not None:
        on_checkpoint(config.max_steps, opt, rng)
    return opt, rng


class CsvLogger:
    """Streams per-step stats as CSV with a stable column set."""

    def __init__(self, path, head_ids: Iterable[str]):
        self.fields = ["step", "lr", "loss", "bound", "mixture", "gap"]
        self.fields += [f"acc:{hid}" for hid in head_ids]
        self._fp = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fp, fieldnames=self.fields,
                                      extrasaction="ignore")
        self._writer.writeheader()

    def __call__(self, stats: dict) -> None:
        self._writer.writerow(stats)

    def close(self) -> None:
        self._fp.close()


# -- specialization over a frozen flow ------------------------------------------------


def specialize(model: TzkModel, datasets: dict[str, Dataset], config: TrainConfig,
               parallel: bool = False,
               head_spec: Optional[dict] = None) -> dict[str, dict]:
    """Train one conditional head per labeled group over the frozen flow.

    Each group's examples are positives (e=1) for its head and negatives
    (e=0) for every other head. Heads share no parameters, so with the flow
    frozen they can be trained concurrently; sequential and parallel runs
    use identical per-head random streams and produce identical results.
    """
    if not model.tflow.actnorm_initialized and model.tflow.needs_init:
        raise StateError("specialize needs a pre-trained (initialized) flow")
    if len(datasets) < 2:
        warnings.warn(
            "specialize with a single group leaves discriminators "
            "unconstrained (no negative examples)", stacklevel=2)
    union_x = np.concatenate([ds.x for ds in datasets.values()], axis=0)
    owners = np.concatenate([
        np.full(ds.n, gi, dtype=np.int64)
        for gi, ds in enumerate(datasets.values())])
    spec = dict(head_spec or {})
    for gid in datasets:
        if gid not in model.heads:
            add_knowledge(model, {"id": gid, **spec})

    group_ids = list(datasets)
    # the frozen flow is shared read-only across head trainers; detaching its
    # parameters keeps backward from touching any cross-thread state
    flow_params = [p for _n, p in model.tflow.named_parameters()]
    flow_rg = [p.requires_grad for p in flow_params]
    for p in flow_params:
        p.requires_grad = False

    def run_one(gi: int) -> tuple[str, dict]:
        gid = group_ids[gi]
        labels = {gid: (owners == gi).astype(np.int16)}
        union = Dataset(name=f"specialize-{gid}", kind="continuous",
                        x=union_x, labels=labels)
        cfg = replace(config, freeze_tflow=True)
        rng = np.random.default_rng(derive_seed(config.seed, f"specialize:{gid}"))
        opt = Adam(dict(model.heads[gid].named_parameters()), cfg)
        train_loop(model, union, cfg, opt=opt, rng=rng)
        final = union.sample_batch(min(union.n, 512),
                                  np.random.default_rng(derive_seed(config.seed, f"eval:{gid}")))
        completed = fill_missing_codes(
            model, final, np.random.default_rng(derive_seed(config.seed, f"evalfill:{gid}")))
        acc = _disc_accuracy(model.heads[gid], completed.t,
                             completed.heads[gid].e, completed.heads[gid].mask)
        return gid, {"disc_accuracy": acc}

    results: dict[str, dict] = {}
    try:
        if parallel:
            with ThreadPoolExecutor(max_workers=len(group_ids)) as pool:
                for gid, metrics in pool.map(run_one, range(len(group_ids))):
                    results[gid] = metrics
        else:
            for gi in range(len(group_ids)):
                gid, metrics = run_one(gi)
                results[gid] = metrics
    finally:
        for p, rg in zip(flow_params, flow_rg):
            p.requires_grad = rg
    return results
