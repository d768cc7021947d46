"""Two-level composition: a parent code space is the child observation space.

The child model treats the parent's (filled) bridge codes as its
observations; the joint objective is the plain sum of the two bounds.
Gradients reach the parent's inference regressor through the reparameterized
codes unless the parent is frozen, in which case the parent contribution is
a constant and the gradient support is exactly the child parameter set.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tz
from .data import Batch, Dataset
from .errors import ContractError, DimensionError, NumericError, TrainingAbort
from .knowledge import derive_seed
from .objective import TzkModel
from .tensor import Tensor
from .training import Adam, TrainConfig, fill_missing_codes, lr_schedule


class HierarchicalModel:
    """Parent model, the bridge head feeding the child, and the child model."""

    def __init__(self, parent: TzkModel, bridge_head_id: str, child: TzkModel):
        bridge = parent.head(bridge_head_id)
        if child.dim != bridge.code_dim:
            raise DimensionError(
                f"child observes {child.dim} dims but bridge head "
                f"{bridge_head_id!r} emits {bridge.code_dim}"
            )
        parent_ids = {id(p) for _n, p in parent.named_parameters()}
        child_ids = {id(p) for _n, p in child.named_parameters()}
        if parent_ids & child_ids:
            raise ContractError("parent and child must not share parameters")
        self.parent = parent
        self.bridge_head_id = bridge_head_id
        self.child = child

    def named_parameters(self):
        for name, p in self.parent.named_parameters():
            yield f"parent.{name}", p
        for name, p in self.child.named_parameters():
            yield f"child.{name}", p

    def named_buffers(self):
        for name, b in self.parent.named_buffers():
            yield f"parent.{name}", b
        for name, b in self.child.named_buffers():
            yield f"child.{name}", b

    def split_batch(self, batch: Batch) -> tuple[Batch, dict]:
        """Route label columns to the level that owns each head id."""
        parent_heads, child_heads = {}, {}
        for hid, col in batch.heads.items():
            if hid in self.parent.heads:
                parent_heads[hid] = col
            elif hid in self.child.heads:
                child_heads[hid] = col
            else:
                raise KeyError(f"head {hid!r} belongs to neither level")
        return Batch(t=batch.t, heads=parent_heads), child_heads


def hierarchical_loss(hmodel: HierarchicalModel, batch: Batch,
                      rng: np.random.Generator,
                      freeze_parent: bool = False) -> tuple[Tensor, dict]:
    """Sum of the parent and child per-batch objectives.

    The child observes the parent's filled bridge codes. Child gradients
    reach the parent only through the reparameterized posterior draws (the
    encoder regressor); prior-branch and observed codes enter the child as
    constants. With ``freeze_parent`` the parent side is evaluated as a
    constant and all codes are detached.
    """
    parent_batch, child_heads = hmodel.split_batch(batch)
    if freeze_parent:
        with tz.no_grad():
            completed = fill_missing_codes(hmodel.parent, parent_batch, rng)
            parent_terms = hmodel.parent.bound_terms(completed)
        bridge_c = completed.heads[hmodel.bridge_head_id].c.detach()
    else:
        completed = fill_missing_codes(hmodel.parent, parent_batch, rng)
        parent_terms = hmodel.parent.bound_terms(completed)
        bridge_c = _encoder_gradient_only(completed.heads[hmodel.bridge_head_id])
    parent_loss = tz.neg(tz.mean_all(parent_terms["bound"]))

    child_batch = Batch(t=np.zeros((batch.n, hmodel.child.dim)), heads=child_heads)
    completed_child = fill_missing_codes(hmodel.child, child_batch, rng,
                                         t_override=bridge_c)
    child_terms = hmodel.child.bound_terms(completed_child)
    child_loss = tz.neg(tz.mean_all(child_terms["bound"]))

    total = tz.add(parent_loss, child_loss)
    stats = {
        "loss": total.item(),
        "parent_loss": parent_loss.item(),
        "child_loss": child_loss.item(),
        "parent_gap": float(np.mean(parent_terms["gap"].data)),
        "child_gap": float(np.mean(child_terms["gap"].data)),
    }
    return total, stats


def _encoder_gradient_only(col) -> Tensor:
    """Keep gradients on posterior-drawn rows; detach the rest."""
    from .objective import BRANCH_ENCODER

    enc_idx = np.flatnonzero(col.branch == BRANCH_ENCODER)
    if enc_idx.size == col.branch.size:
        return col.c
    if enc_idx.size == 0:
        return col.c.detach()
    other_idx = np.flatnonzero(col.branch != BRANCH_ENCODER)
    live = tz.gather_rows(col.c, enc_idx)
    frozen = Tensor(col.c.data[other_idx])
    restore = np.empty(col.branch.size, dtype=np.int64)
    restore[np.concatenate([enc_idx, other_idx])] = np.arange(col.branch.size)
    return tz.gather_rows(tz.concat_rows(live, frozen), restore)


def hierarchical_sample(hmodel: HierarchicalModel, child_head_id: str,
                        temperature: float = 1.0,
                        rng: Optional[np.random.Generator] = None,
                        n: int = 1) -> Tensor:
    """Ancestral draw down the hierarchy for one child knowledge type.

    Child code from its code prior conditioned on existence (the prior flow
    reweighted by the code discriminator, realized by rejection), bridge
    code from the child's generative conditional at e=1, observation from
    the parent's generative conditional at e=1. Returns an (n, D) tensor.
    """
    child_head = hmodel.child.head(child_head_id)
    bridge_head = hmodel.parent.head(hmodel.bridge_head_id)
    if rng is None:
        raise ContractError("hierarchical_sample needs an rng")
    with tz.no_grad():
        c_child = _sample_code_given_existence(child_head, n, temperature, rng)
        bridge = child_head.sample_t_given_c(
            c_child, e=1, tflow=hmodel.child.tflow,
            temperature=temperature, rng=rng)
        t = bridge_head.sample_t_given_c(
            bridge, e=1, tflow=hmodel.parent.tflow,
            temperature=temperature, rng=rng)
    return t


def _sample_code_given_existence(head, n: int, temperature: float,
                                 rng: np.random.Generator,
                                 max_rounds: int = 50) -> Tensor:
    """Draw codes from p(c | e=1): prior-flow proposals accepted with the
    code discriminator's probability (p(e,c) = p(e|c) p(c))."""
    kept: list[np.ndarray] = []
    total = 0
    best: Optional[tuple[float, np.ndarray]] = None
    for _ in range(max_rounds):
        eps = rng.standard_normal((max(2 * n, 16), head.code_dim)) * temperature
        cand = head.sample_c("prior", eps=eps)
        logits = head.disc_c.logits(cand).data
        accept = rng.random(logits.shape[0]) < _sigmoid(logits)
        rows = cand.data[accept]
        if rows.size:
            kept.append(rows)
            total += rows.shape[0]
        top = int(np.argmax(logits))
        if best is None or logits[top] > best[0]:
            best = (float(logits[top]), np.array(cand.data[top]))
        if total >= n:
            break
    if total < n:
        # discriminator barely accepts anything; pad with the best proposal
        pad = np.tile(best[1], (n - total, 1))
        kept.append(pad)
    out = np.concatenate(kept, axis=0)[:n]
    return Tensor(out.astype(tz.default_dtype()))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    q = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, q) / (1.0 + q)


def encode_to_bridge(hmodel: HierarchicalModel, t: Tensor,
                     rng: Optional[np.random.Generator] = None,
                     use_mean: bool = True) -> Tensor:
    """Infer bridge codes for observations via the parent posterior at e=1."""
    bridge_head = hmodel.parent.head(hmodel.bridge_head_id)
    with tz.no_grad():
        if use_mean:
            t2 = t if t.data.ndim == 2 else tz.reshape(t, (1, t.shape[0]))
            mu, _sigma = bridge_head._select_reg(bridge_head.enc_reg, t2, 1)
            return mu
        if rng is None:
            raise ContractError("sampled encoding needs an rng")
        return bridge_head.sample_c("posterior", e=1, t=t, rng=rng)


def train_hierarchical(hmodel: HierarchicalModel, dataset: Dataset,
                       config: TrainConfig,
                       freeze_parent_tflow: bool = True,
                       freeze_parent: bool = False,
                       extra_frozen: Sequence[str] = (),
                       rng: Optional[np.random.Generator] = None,
                       log_writer: Optional[Callable[[dict], None]] = None,
                       opt: Optional[Adam] = None) -> Adam:
    """Joint loop over the summed objective with per-level freezing options."""
    if rng is None:
        rng = np.random.default_rng(derive_seed(config.seed, "hierarchy"))
    if opt is None:
        opt = Adam(dict(hmodel.named_parameters()), config)
    frozen: list[str] = list(extra_frozen)
    if freeze_parent:
        frozen.append("parent.")
    elif freeze_parent_tflow:
        frozen.append("parent.tflow.")
    if hmodel.parent.tflow.needs_init and not hmodel.parent.tflow.actnorm_initialized:
        init = dataset.sample_batch(min(dataset.n, 256), rng)
        hmodel.parent.tflow.actnorm_init(Tensor(init.t.astype(tz.default_dtype())))
    for step in range(1, config.max_steps + 1):
        batch = dataset.sample_batch(config.batch_size, rng)
        opt.zero_grads()
        try:
            loss, stats = hierarchical_loss(hmodel, batch, rng,
                                            freeze_parent=freeze_parent)
            tz.backward(loss)
        except NumericError as err:
            raise TrainingAbort(f"non-finite loss at step {step}: {err}") from err
        lr = lr_schedule(step, config)
        opt.apply(lr, frozen)
        if log_writer is not None:
            stats["step"] = step
            stats["lr"] = lr
            log_writer(stats)
    return opt
