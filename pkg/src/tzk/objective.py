"""The joint model: dual factorizations, training bound, and identity checks.

A :class:`TzkModel` couples one observation flow with any number of knowledge
heads. The joint density over an observation t and completed knowledge
records (e^i, c^i) has two factorizations sharing the same flow:

  encoder:  log p(t) + sum_i [ log p(c^i|e^i,t) + log p(e^i|t) ]
  decoder:  sum_i [ log p(t|e^i,c^i) + log p(e^i|c^i) + log p(c^i) ]
            - (K-1) * log p(t)

Training maximizes the average of the two log densities, a Jensen lower
bound on the log of their equal mixture. All arithmetic stays in log space;
the bound/mixture difference is computed as -log cosh(d/2) of the log-density
gap d, which never exponentiates anything large.

This module also hosts two self-checks: an algebraic identity relating the
gradient of the bound to the gradient of the mixture plus a gap-weighted
correction, and an exhaustively enumerated entropy/mutual-information
decomposition on fully discretized toy distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tz
from .errors import ContractError, DimensionError
from .flows import FlowModel
from .knowledge import KnowledgeHead
from .tensor import Tensor


@dataclass
class JointPoint:
    """A fully specified point: observation plus concrete (e, c) per head."""

    t: np.ndarray
    knowledge: dict[str, tuple[int, np.ndarray]] = field(default_factory=dict)


BRANCH_ABSENT = -1
BRANCH_OBSERVED = 0
BRANCH_ENCODER = 1
BRANCH_DECODER = 2


class CompletedHead:
    """Batched per-head columns with all codes concrete.

    ``mask`` marks the rows where the head participates; non-participating
    rows carry zero codes and contribute nothing. ``branch`` records where
    each code came from (observed / encoder posterior / decoder prior).
    """

    __slots__ = ("mask", "e", "c", "branch")

    def __init__(self, mask: np.ndarray, e: np.ndarray, c: Tensor,
                 branch: Optional[np.ndarray] = None):
        self.mask = np.asarray(mask, dtype=bool)
        self.e = np.asarray(e, dtype=np.int64)
        self.c = c
        if branch is None:
            branch = np.where(self.mask, BRANCH_OBSERVED, BRANCH_ABSENT)
        self.branch = np.asarray(branch, dtype=np.int8)


class CompletedBatch:
    """A batch ready for joint evaluation: t rows plus per-head columns."""

    __slots__ = ("t", "heads")

    def __init__(self, t: Tensor, heads: dict[str, CompletedHead]):
        self.t = t
        self.heads = heads

    @property
    def n(self) -> int:
        return self.t.shape[0]


class TzkModel:
    """Observation flow plus an ordered set of knowledge heads."""

    def __init__(self, tflow: FlowModel, heads: Optional[dict[str, KnowledgeHead]] = None,
                 seed: int = 0):
        self.tflow = tflow
        self.heads: dict[str, KnowledgeHead] = dict(heads or {})
        self.seed = seed
        for head in self.heads.values():
            self._check_head(head)

    def _check_head(self, head: KnowledgeHead) -> None:
        if head.obs_dim != self.tflow.dim:
            raise DimensionError(
                f"head {head.id!r} expects obs_dim {head.obs_dim}, flow has {self.tflow.dim}"
            )

    @property
    def dim(self) -> int:
        return self.tflow.dim

    @property
    def k(self) -> int:
        return len(self.heads)

    def add_head(self, head: KnowledgeHead) -> None:
        if head.id in self.heads:
            raise KeyError(f"head id {head.id!r} already exists")
        self._check_head(head)
        self.heads[head.id] = head

    def head(self, head_id: str) -> KnowledgeHead:
        try:
            return self.heads[head_id]
        except KeyError:
            raise KeyError(
                f"unknown head {head_id!r}; available: {sorted(self.heads)}"
            ) from None

    # -- parameter registry ---------------------------------------------------
    def named_parameters(self):
        for name, p in self.tflow.named_parameters():
            yield f"tflow.{name}", p
        for head in self.heads.values():
            yield from head.named_parameters()

    def named_buffers(self):
        for name, b in self.tflow.named_buffers():
            yield f"tflow.{name}", b
        for head in self.heads.values():
            yield from head.named_buffers()

    def encoder_param_names(self) -> set[str]:
        """The inference-side group: observation flow, disc_t, enc regressors."""
        names = {n for n, _ in self.tflow.named_parameters()}
        names = {f"tflow.{n}" for n in names}
        for head in self.heads.values():
            names |= head.encoder_param_names()
        return names

    def decoder_param_names(self) -> set[str]:
        """The generative-side group; the observation flow is shared."""
        all_names = {n for n, _ in self.named_parameters()}
        enc_only = self.encoder_param_names() - {
            n for n in all_names if n.startswith("tflow.")}
        return all_names - enc_only

    # -- point <-> batch ---------------------------------------------------------
    def _point_batch(self, point: JointPoint) -> CompletedBatch:
        missing = set(self.heads) - set(point.knowledge)
        if missing:
            raise ContractError(f"point lacks knowledge for heads {sorted(missing)}")
        unknown = set(point.knowledge) - set(self.heads)
        if unknown:
            raise KeyError(f"point references unknown heads {sorted(unknown)}")
        t = Tensor(np.asarray(point.t, dtype=tz.default_dtype()).reshape(1, -1))
        heads = {}
        for hid, (e, c) in point.knowledge.items():
            head = self.heads[hid]
            c_arr = np.asarray(c, dtype=tz.default_dtype()).reshape(1, -1)
            if c_arr.shape[1] != head.code_dim:
                raise DimensionError(
                    f"head {hid!r} code dim {c_arr.shape[1]} != {head.code_dim}"
                )
            heads[hid] = CompletedHead(np.array([True]), np.array([int(e)]),
                                       Tensor(c_arr))
        return CompletedBatch(t, heads)

    # -- batched factorizations ----------------------------------------------------
    def log_p_enc_rows(self, batch: CompletedBatch,
                       flow_logp: Optional[Tensor] = None) -> Tensor:
        lp = flow_logp if flow_logp is not None else self.tflow.log_prob(batch.t)
        total = lp
        for hid, col in batch.heads.items():
            head = self.heads[hid]
            term = tz.add(head.log_p_c_given_e_t(col.c, col.e, batch.t),
                          head.log_p_e_given_t(batch.t, col.e))
            total = tz.add(total, _masked(term, col.mask))
        return total

    def log_p_dec_rows(self, batch: CompletedBatch,
                       flow_logp: Optional[Tensor] = None,
                       flow_pass: Optional[tuple[Tensor, Tensor]] = None) -> Tensor:
        if flow_pass is None:
            flow_pass = self.tflow.inverse(batch.t)
        z, logdet = flow_pass
        if flow_logp is None:
            from .nets import standard_normal_log_prob_rows

            flow_logp = tz.add(standard_normal_log_prob_rows(z), logdet)
        n = batch.n
        k_per_row = np.zeros(n)
        total = Tensor(np.zeros(n, dtype=batch.t.dtype))
        for hid, col in batch.heads.items():
            head = self.heads[hid]
            term = tz.add(head.log_p_t_given_e_c_from_z(z, logdet, col.e, col.c),
                          head.log_p_k(col.c, col.e))
            total = tz.add(total, _masked(term, col.mask))
            k_per_row += col.mask.astype(float)
        coeff = Tensor((1.0 - k_per_row).astype(batch.t.dtype))
        return tz.add(total, tz.mul(coeff, flow_logp))

    def bound_terms(self, batch: CompletedBatch) -> dict[str, Tensor]:
        """Encoder/decoder rows plus derived bound, mixture, and gap rows.

        The flow's analysis pass is computed once and shared by both
        factorizations.
        """
        z, logdet = self.tflow.inverse(batch.t)
        from .nets import standard_normal_log_prob_rows

        flow_logp = tz.add(standard_normal_log_prob_rows(z), logdet)
        enc = self.log_p_enc_rows(batch, flow_logp=flow_logp)
        dec = self.log_p_dec_rows(batch, flow_logp=flow_logp,
                                  flow_pass=(z, logdet))
        bound = tz.mul(tz.add(enc, dec), 0.5)
        gap = tz.neg(tz.logcosh(tz.mul(tz.sub(enc, dec), 0.5)))
        mixture = tz.sub(bound, gap)
        return {"enc": enc, "dec": dec, "bound": bound,
                "gap": gap, "mixture": mixture, "flow_logp": flow_logp}


def _masked(term: Tensor, mask: np.ndarray) -> Tensor:
    if mask.all():
        return term
    return tz.mul(term, Tensor(mask.astype(term.dtype)))


# -- per-point operations ---------------------------------------------------------


def log_p_enc(model: TzkModel, point: JointPoint) -> Tensor:
    """Encoder-factorized joint log density at one completed point."""
    batch = model._point_batch(point)
    return tz.reshape(model.log_p_enc_rows(batch), ())


def log_p_dec(model: TzkModel, point: JointPoint) -> Tensor:
    """Decoder-factorized joint log density at one completed point."""
    batch = model._point_batch(point)
    return tz.reshape(model.log_p_dec_rows(batch), ())


def lower_bound(model: TzkModel, point: JointPoint) -> Tensor:
    """Per-point training objective: the average of the two log densities."""
    batch = model._point_batch(point)
    terms = model.bound_terms(batch)
    return tz.reshape(terms["bound"], ())


def log_mixture(model: TzkModel, point: JointPoint) -> Tensor:
    """log of the equal mixture of the two factorizations (logsumexp - log 2)."""
    batch = model._point_batch(point)
    terms = model.bound_terms(batch)
    return tz.reshape(terms["mixture"], ())


def consistency_gap(model: TzkModel, point: JointPoint) -> Tensor:
    """Non-positive encoder/decoder agreement term: -log cosh(d/2).

    Equals lower_bound - log_mixture; zero exactly when the factorizations
    assign equal density.
    """
    batch = model._point_batch(point)
    terms = model.bound_terms(batch)
    return tz.reshape(terms["gap"], ())


# -- gradient identity check -------------------------------------------------------


def _grad_vector(model: TzkModel, value: Tensor) -> np.ndarray:
    tz.backward(value)
    parts = []
    for _name, p in model.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(np.asarray(g, dtype=np.float64).reshape(-1))
        p.zero_grad()
    return np.concatenate(parts) if parts else np.zeros(0)


def gradient_identity_check(model: TzkModel, point: JointPoint) -> float:
    """Verify the bound-gradient identity; returns the max deviation.

    Left side: one autodiff pass through (log_enc + log_dec)/2. Right side:
    separate passes through each factorization, recombined as the mixture
    gradient plus a gap-weighted correction,

      grad log M + [ (r-1) grad log_enc + (1-r) grad log_dec ] / (2 (1+r))

    with r = p_dec/p_enc computed from the log-density difference. When the
    factorizations agree (r=1) the correction vanishes.
    """
    for _name, p in model.named_parameters():
        p.zero_grad()
    lhs = _grad_vector(model, lower_bound(model, point))
    le = log_p_enc(model, point)
    le_val = le.item()
    ge = _grad_vector(model, le)
    ld = log_p_dec(model, point)
    ld_val = ld.item()
    gd = _grad_vector(model, ld)

    r = float(np.exp(min(ld_val - le_val, 700.0)))
    mixture_grad = (ge + r * gd) / (1.0 + r)
    correction = ((r - 1.0) * ge + (1.0 - r) * gd) / (2.0 * (1.0 + r))
    rhs = mixture_grad + correction
    if lhs.size == 0:
        return 0.0
    return float(np.max(np.abs(lhs - rhs)))


# -- discrete entropy / mutual-information identity ----------------------------------


@dataclass
class DiscreteKnowledge:
    """Conditional tables for one discretized knowledge type."""

    p_e_given_t: np.ndarray  # (T, 2)
    p_c_given_et: np.ndarray  # (T, 2, C)


@dataclass
class DiscreteToy:
    """A fully discretized joint in the compositional form.

    The joint over (t, e^i, c^i) is defined by the observation marginal and
    the per-type conditionals; with conditionally independent knowledge the
    encoder and decoder factorizations agree by construction. The latent
    state is the identity relabeling of the observation cell.
    """

    p_t: np.ndarray
    knowledge: list[DiscreteKnowledge]

    def __post_init__(self):
        self.p_t = np.asarray(self.p_t, dtype=np.float64)
        if self.p_t.ndim != 1 or self.p_t.size > 64:
            raise ContractError("toy needs a 1-D observation table with <= 64 cells")
        if len(self.knowledge) > 2:
            raise ContractError("toy supports at most 2 knowledge types")
        _check_simplex(self.p_t, "p_t")
        t_cells = self.p_t.size
        for i, k in enumerate(self.knowledge):
            k.p_e_given_t = np.asarray(k.p_e_given_t, dtype=np.float64)
            k.p_c_given_et = np.asarray(k.p_c_given_et, dtype=np.float64)
            if k.p_e_given_t.shape != (t_cells, 2):
                raise ContractError(f"knowledge {i}: p(e|t) must be (T, 2)")
            if (k.p_c_given_et.ndim != 3
                    or k.p_c_given_et.shape[:2] != (t_cells, 2)
                    or k.p_c_given_et.shape[2] > 16):
                raise ContractError(f"knowledge {i}: p(c|e,t) must be (T, 2, C<=16)")
            for row in k.p_e_given_t:
                _check_simplex(row, f"knowledge {i} p(e|t)")
            for te in k.p_c_given_et.reshape(-1, k.p_c_given_et.shape[2]):
                _check_simplex(te, f"knowledge {i} p(c|e,t)")

    def joint(self) -> np.ndarray:
        """Exhaustive joint table with axes (t, e1, c1[, e2, c2])."""
        j = self.p_t.copy()
        for k in self.knowledge:
            cond = k.p_e_given_t[..., None] * k.p_c_given_et  # (T, 2, C)
            j = j[..., None, None] * cond.reshape(
                (self.p_t.size,) + (1,) * (j.ndim - 1) + cond.shape[1:])
        return j


def _check_simplex(p: np.ndarray, what: str) -> None:
    if np.any(p < -1e-12) or abs(float(np.sum(p)) - 1.0) > 1e-9:
        raise ContractError(f"{what} is not a probability distribution")


def _entropy(p: np.ndarray) -> float:
    p = p.reshape(-1)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def _mutual_information(joint_2d: np.ndarray) -> float:
    """I(X;Y) of a 2-D joint table by direct enumeration."""
    px = joint_2d.sum(axis=1)
    py = joint_2d.sum(axis=0)
    return _entropy(px) + _entropy(py) - _entropy(joint_2d)


@dataclass
class EntropyMiReport:
    lhs: float
    rhs: float
    deviation: float
    h_t: float
    h_k: list[float]
    i_k_t: list[float]
    i_z_k: list[float]


def entropy_mi_identity_check(toy: DiscreteToy) -> EntropyMiReport:
    """Enumerate both sides of the joint-entropy decomposition.

    lhs: -H(k_all, t) from the full joint table. rhs: -H(t) - sum_i H(k^i)
    + (1/2) sum_i [I(k^i;t) + I(z;k^i)], each term enumerated from its own
    marginal; the latent cell z is the identity relabeling of the t cell.
    """
    joint = toy.joint()
    t_cells = toy.p_t.size
    lhs = -_entropy(joint)

    h_t = _entropy(joint.reshape(t_cells, -1).sum(axis=1))
    h_k, i_k_t, i_z_k = [], [], []
    k = len(toy.knowledge)
    for i in range(k):
        flat = _marginal_t_ki(joint, i, k)  # (T, 2*C_i)
        h_k.append(_entropy(flat.sum(axis=0)))
        i_k_t.append(_mutual_information(flat))
        # the latent cell is a deterministic bijection of the observation
        # cell; enumerate its own (z, k) table under an explicit relabeling
        z_of_t = (np.arange(t_cells)[::-1] + 1) % t_cells
        z_joint = np.zeros_like(flat)
        z_joint[z_of_t, :] = flat
        i_z_k.append(_mutual_information(z_joint))
    rhs = -h_t - sum(h_k) + 0.5 * sum(a + b for a, b in zip(i_k_t, i_z_k))
    return EntropyMiReport(lhs=lhs, rhs=rhs, deviation=abs(lhs - rhs),
                           h_t=h_t, h_k=h_k, i_k_t=i_k_t, i_z_k=i_z_k)


def _marginal_t_ki(joint: np.ndarray, i: int, k: int) -> np.ndarray:
    """Marginal joint over (t, (e^i, c^i)) flattened to (T, 2*C_i)."""
    axes = tuple(ax for ax in range(1, joint.ndim)
                 if ax not in (1 + 2 * i, 2 + 2 * i))
    m = joint.sum(axis=axes) if axes else joint
    return m.reshape(m.shape[0], -1)


def make_independent_toy(seed: int, t_cells: int = 8, c_cells: int = 4,
                         k: int = 1) -> DiscreteToy:
    """Observation and knowledge fully independent: all MI terms vanish."""
    rng = np.random.default_rng(seed)
    p_t = rng.dirichlet(np.ones(t_cells))
    knowledge = []
    for _ in range(k):
        p_e = rng.dirichlet(np.ones(2))
        p_c = np.stack([rng.dirichlet(np.ones(c_cells)) for _ in range(2)])
        knowledge.append(DiscreteKnowledge(
            p_e_given_t=np.tile(p_e, (t_cells, 1)),
            p_c_given_et=np.tile(p_c, (t_cells, 1, 1))))
    return DiscreteToy(p_t=p_t, knowledge=knowledge)


def make_sign_toy(t_cells: int = 8, c_cells: int = 4) -> DiscreteToy:
    """Binary existence fully determined by the sign of a 1-D observation."""
    if t_cells % 2:
        raise ContractError("sign toy needs an even cell count")
    p_t = np.full(t_cells, 1.0 / t_cells)
    coords = np.linspace(-1, 1, t_cells + 1)[:-1] + 1.0 / t_cells
    e1 = (coords > 0).astype(float)
    p_e = np.stack([1.0 - e1, e1], axis=1)
    p_c = np.tile(np.full(c_cells, 1.0 / c_cells), (t_cells, 2, 1))
    return DiscreteToy(p_t=p_t, knowledge=[DiscreteKnowledge(p_e, p_c)])


def make_random_toy(seed: int, t_cells: int = 6, c_cells: int = 3,
                    k: int = 2) -> DiscreteToy:
    """Seeded random conditionals; consistent by construction."""
    rng = np.random.default_rng(seed)
    p_t = rng.dirichlet(np.ones(t_cells) * 2.0)
    knowledge = []
    for _ in range(k):
        p_e = np.stack([rng.dirichlet(np.ones(2)) for _ in range(t_cells)])
        p_c = np.stack([
            np.stack([rng.dirichlet(np.ones(c_cells)) for _ in range(2)])
            for _ in range(t_cells)])
        knowledge.append(DiscreteKnowledge(p_e, p_c))
    return DiscreteToy(p_t=p_t, knowledge=knowledge)
