"""Knowledge heads: per-type discriminators, regressors, and code priors.

A :class:`KnowledgeHead` bundles everything one knowledge type needs: a
discriminator over observations p(e|t), a discriminator over codes p(e|c),
conditional Gaussian regressors t -> (mu_c, sigma_c) and c -> (mu_z, sigma_z)
with separate weight sets for e=0 and e=1, and a small flow prior over the
code space. Heads own disjoint parameters, so adding one never perturbs
another.

Batched entry points accept (n, d) tensors with a per-row e vector; the
scalar-e forms accept single 1-D observations as well.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tz
from .errors import ContractError, DimensionError
from .flows import FlowModel, build_vector_flow
from .nets import Discriminator, GaussianRegressor, gaussian_log_prob_rows
from .tensor import Tensor


def derive_seed(base_seed: int, tag: str) -> int:
    """Stable per-component seed: identical across runs and add orders."""
    digest = hashlib.sha256(f"{base_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class HeadLabel:
    """Per-head record attached to one observation."""

    e: Optional[int] = None  # 0, 1, or None when unobserved
    c: Optional[np.ndarray] = None


@dataclass
class Observation:
    """One example: observation vector plus per-head labels."""

    t: np.ndarray
    labels: dict[str, HeadLabel] = field(default_factory=dict)


class KnowledgeHead:
    """All parametric pieces for one knowledge type."""

    def __init__(self, head_id: str, obs_dim: int, code_dim: int = 10,
                 hidden: Sequence[int] = (64, 64), cflow_steps: int = 4,
                 cflow_hidden: Optional[Sequence[int]] = None, seed: int = 0,
                 enc_mu_scale: float = 1.0, enc_sigma_init: float = 1.0):
        if code_dim < 2:
            raise ContractError(f"head {head_id!r}: code_dim must be >= 2")
        self.id = head_id
        self.obs_dim = obs_dim
        self.code_dim = code_dim
        rng = np.random.default_rng(derive_seed(seed, f"head:{head_id}"))
        self.disc_t = Discriminator(rng, obs_dim, hidden)
        self.disc_c = Discriminator(rng, code_dim, hidden)
        self.enc_reg = [GaussianRegressor(rng, obs_dim, hidden, code_dim)
                        for _ in range(2)]
        self.dec_reg = [GaussianRegressor(rng, code_dim, hidden, obs_dim)
                        for _ in range(2)]
        if enc_mu_scale != 1.0 or enc_sigma_init != 1.0:
            # spread the initial posterior means and tighten the initial
            # posterior noise: codes start informative about the observation
            for reg in self.enc_reg:
                _shape_regressor_init(reg, enc_mu_scale, enc_sigma_init)
        self.c_flow: FlowModel = build_vector_flow(
            code_dim, cflow_steps, cflow_hidden or hidden, rng, needs_init=False)

    # -- parameter registry --------------------------------------------------
    def named_parameters(self, prefix: Optional[str] = None):
        prefix = prefix if prefix is not None else f"head.{self.id}"
        yield from self.disc_t.named_parameters(f"{prefix}.disc_t")
        yield from self.disc_c.named_parameters(f"{prefix}.disc_c")
        for e in (0, 1):
            yield from self.enc_reg[e].named_parameters(f"{prefix}.enc{e}")
        for e in (0, 1):
            yield from self.dec_reg[e].named_parameters(f"{prefix}.dec{e}")
        for name, p in self.c_flow.named_parameters():
            yield f"{prefix}.cflow.{name}", p

    def named_buffers(self, prefix: Optional[str] = None):
        prefix = prefix if prefix is not None else f"head.{self.id}"
        for name, b in self.c_flow.named_buffers():
            yield f"{prefix}.cflow.{name}", b

    def encoder_param_names(self, prefix: Optional[str] = None) -> set[str]:
        """Names owned by the inference side: disc_t and both enc regressors."""
        prefix = prefix if prefix is not None else f"head.{self.id}"
        names = set()
        for sub in ("disc_t", "enc0", "enc1"):
            names.update(n for n, _ in self.named_parameters(prefix)
                         if n.startswith(f"{prefix}.{sub}."))
        return names

    # -- regressor selection ---------------------------------------------------
    def _select_reg(self, regs, x: Tensor, e) -> tuple[Tensor, Tensor]:
        """Apply the e-indexed regressor pair to rows with mixed e values."""
        e_arr = np.asarray(e)
        if e_arr.ndim == 0:
            if int(e_arr) not in (0, 1):
                raise ContractError(f"e must be 0 or 1, got {e_arr}")
            return regs[int(e_arr)](x)
        if e_arr.shape[0] != x.shape[0]:
            raise DimensionError("per-row e vector length mismatch")
        if np.all(e_arr == 0):
            return regs[0](x)
        if np.all(e_arr == 1):
            return regs[1](x)
        idx0 = np.flatnonzero(e_arr == 0)
        idx1 = np.flatnonzero(e_arr == 1)
        mu0, sg0 = regs[0](tz.gather_rows(x, idx0))
        mu1, sg1 = regs[1](tz.gather_rows(x, idx1))
        restore = np.empty(x.shape[0], dtype=np.int64)
        restore[np.concatenate([idx0, idx1])] = np.arange(x.shape[0])
        mu = tz.gather_rows(tz.concat_rows(mu0, mu1), restore)
        sigma = tz.gather_rows(tz.concat_rows(sg0, sg1), restore)
        return mu, sigma

    # -- log-density pieces ------------------------------------------------------
    def log_p_e_given_t(self, t: Tensor, e) -> Tensor:
        """log p(e|t) from the observation discriminator (log-sigmoid form)."""
        t2, single = _rows(t, self.obs_dim)
        out = self.disc_t.log_prob(t2, e)
        return tz.reshape(out, ()) if single else out

    def log_p_c_given_e_t(self, c: Tensor, e, t: Tensor) -> Tensor:
        """Diagonal-Gaussian log density of c under the e-selected regressor."""
        t2, single = _rows(t, self.obs_dim)
        c2, _ = _rows(c, self.code_dim)
        mu, sigma = self._select_reg(self.enc_reg, t2, e)
        out = gaussian_log_prob_rows(c2, mu, sigma)
        return tz.reshape(out, ()) if single else out

    def log_p_t_given_e_c(self, t: Tensor, e, c: Tensor,
                          tflow: FlowModel) -> Tensor:
        """log p(t|e,c): Gaussian at z = tflow^{-1}(t) plus the flow logdet."""
        t2, single = _rows(t, self.obs_dim)
        c2, _ = _rows(c, self.code_dim)
        z, logdet = tflow.inverse(t2)
        mu, sigma = self._select_reg(self.dec_reg, c2, e)
        out = tz.add(gaussian_log_prob_rows(z, mu, sigma), logdet)
        return tz.reshape(out, ()) if single else out

    def log_p_t_given_e_c_from_z(self, z: Tensor, logdet: Tensor, e,
                                 c: Tensor) -> Tensor:
        """Same as :meth:`log_p_t_given_e_c` with the flow pass precomputed."""
        mu, sigma = self._select_reg(self.dec_reg, c, e)
        return tz.add(gaussian_log_prob_rows(z, mu, sigma), logdet)

    def log_p_k(self, c: Tensor, e) -> Tensor:
        """log p(e,c) = log p(e|c) + log p(c) under the code flow prior."""
        c2, single = _rows(c, self.code_dim)
        out = tz.add(self.disc_c.log_prob(c2, e), self.c_flow.log_prob(c2))
        return tz.reshape(out, ()) if single else out

    # -- sampling -----------------------------------------------------------------
    def sample_c(self, mode: str, e=1, t: Optional[Tensor] = None,
                 rng: Optional[np.random.Generator] = None,
                 n: Optional[int] = None, eps: Optional[np.ndarray] = None) -> Tensor:
        """Reparameterized code draw from the prior flow or the posterior.

        prior: push eps ~ N(0,I) through the code flow. posterior: mu + sigma*eps
        at the observed e given t. Pass ``eps`` to pin the noise.
        """
        if mode == "prior":
            count = n if n is not None else 1
            if eps is None:
                if rng is None:
                    raise ContractError("sample_c needs an rng or explicit eps")
                eps = rng.standard_normal((count, self.code_dim))
            sample, _ = self.c_flow.forward(
                Tensor(np.asarray(eps, dtype=tz.default_dtype())))
            return sample
        if mode == "posterior":
            if t is None:
                raise ContractError("posterior sampling requires t")
            t2, single = _rows(t, self.obs_dim)
            mu, sigma = self._select_reg(self.enc_reg, t2, e)
            if eps is None:
                if rng is None:
                    raise ContractError("sample_c needs an rng or explicit eps")
                eps = rng.standard_normal((t2.shape[0], self.code_dim))
            noise = Tensor(np.asarray(eps, dtype=tz.default_dtype()))
            out = tz.add(mu, tz.mul(sigma, noise))
            return tz.reshape(out, (self.code_dim,)) if single else out
        raise ContractError(f"unknown sample_c mode {mode!r}")

    def sample_t_given_c(self, c: Tensor, e, tflow: FlowModel,
                         temperature: float = 1.0,
                         rng: Optional[np.random.Generator] = None,
                         eps: Optional[np.ndarray] = None) -> Tensor:
        """Draw z from the conditional Gaussian and push it through the flow."""
        c2, single = _rows(c, self.code_dim)
        mu, sigma = self._select_reg(self.dec_reg, c2, e)
        if eps is None:
            if rng is None:
                raise ContractError("sample_t_given_c needs an rng or explicit eps")
            eps = rng.standard_normal((c2.shape[0], self.obs_dim))
        noise = Tensor(np.asarray(eps, dtype=tz.default_dtype()) * temperature)
        z = tz.add(mu, tz.mul(sigma, noise))
        t, _ = tflow.forward(z)
        return tz.reshape(t, (self.obs_dim,)) if single else t


def _shape_regressor_init(reg, mu_scale: float, sigma_init: float) -> None:
    import math

    from .nets import SIGMA_FLOOR

    last = reg.net.layers[-1]
    w = last.w.data.copy()
    b = last.b.data.copy()
    m = reg.d_out
    w[:, :m] *= mu_scale
    shift = (math.log(math.expm1(sigma_init - SIGMA_FLOOR))
             - math.log(math.expm1(1.0 - SIGMA_FLOOR)))
    b[m:] += shift
    last.w.assign_(w)
    last.b.assign_(b)


def _rows(x: Tensor, dim: int) -> tuple[Tensor, bool]:
    if x.data.ndim == 1:
        if x.shape[0] != dim:
            raise DimensionError(f"expected dimension {dim}, got {x.shape[0]}")
        return tz.reshape(x, (1, dim)), True
    if x.data.ndim == 2:
        if x.shape[1] != dim:
            raise DimensionError(f"expected dimension {dim}, got {x.shape[1]}")
        return x, False
    raise DimensionError(f"expected 1-D or 2-D input, got shape {x.shape}")
