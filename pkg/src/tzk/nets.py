"""MLP conditioners, Gaussian regressors, and binary discriminators.

These are the parametric pieces shared by the flow couplings and the
knowledge heads: plain fully connected networks with swish activations,
operating on (n, d) batches. Output layers are zero-initialized so freshly
built models start at well-defined neutral behavior (identity couplings,
p(e)=1/2 discriminators, unit-variance regressors).
"""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tz
from .errors import DimensionError
from .tensor import Tensor

SIGMA_FLOOR = 1e-6
# softplus(raw + offset) + floor == 1 exactly when raw == 0
SIGMA_RAW_OFFSET = math.log(math.expm1(1.0 - SIGMA_FLOOR))


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 zero_init: bool = False, scale: float = 1.0):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.standard_normal((d_in, d_out)) * (scale / math.sqrt(d_in))
        self.w = tz.parameter(w)
        self.b = tz.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return tz.add_row(tz.matmul(x, self.w), self.b)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class MLP:
    """Fully connected net with swish hidden activations.

    ``zero_last`` zeroes the final layer so the net outputs 0 at init;
    otherwise the final layer is scaled down by ``last_scale``.
    """

    def __init__(self, rng: np.random.Generator, d_in: int,
                 hidden: Sequence[int], d_out: int, zero_last: bool = True,
                 last_scale: float = 0.1):
        dims = [d_in, *hidden, d_out]
        self.layers = []
        for k in range(len(dims) - 1):
            last = k == len(dims) - 2
            self.layers.append(Linear(rng, dims[k], dims[k + 1],
                                      zero_init=zero_last and last,
                                      scale=last_scale if last else 1.0))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for k, layer in enumerate(self.layers):
            h = layer(h)
            if k < len(self.layers) - 1:
                h = tz.swish(h)
        return h

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for k, layer in enumerate(self.layers):
            yield f"{prefix}.w{k}", layer.w
            yield f"{prefix}.b{k}", layer.b


class GaussianRegressor:
    """Regress input rows to the mean and diagonal std of a Gaussian.

    The std is softplus-parameterized with a 1e-6 floor, shifted so a
    zero-output net regresses to exactly (mu=0, sigma=1). The output layer
    is initialized small (not zero): a zero-initialized regressor pins every
    input to the same Gaussian, an exactly symmetric saddle that leaves
    latent codes uninformative for a long time at small scale.
    """

    def __init__(self, rng: np.random.Generator, d_in: int,
                 hidden: Sequence[int], d_out: int, zero_last: bool = False):
        self.d_out = d_out
        self.net = MLP(rng, d_in, hidden, 2 * d_out, zero_last=zero_last,
                       last_scale=1.0)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.net(x)
        m = self.d_out
        mu = tz.gather_cols(h, np.arange(m))
        raw = tz.gather_cols(h, np.arange(m, 2 * m))
        sigma = tz.add(tz.softplus(tz.add(raw, SIGMA_RAW_OFFSET)), SIGMA_FLOOR)
        return mu, sigma

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.net.named_parameters(prefix)


class Discriminator:
    """Binary discriminator: rows -> logit; probabilities via sigmoid."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: Sequence[int]):
        self.net = MLP(rng, d_in, hidden, 1, zero_last=True)

    def logits(self, x: Tensor) -> Tensor:
        out = self.net(x)
        return tz.reshape(out, (out.shape[0],))

    def log_prob(self, x: Tensor, e) -> Tensor:
        """Row-wise log p(e|x) in the stable log-sigmoid form.

        ``e`` can be a scalar 0/1 or a per-row vector of 0/1.
        """
        logit = self.logits(x)
        e_arr = np.asarray(e, dtype=logit.dtype)
        if e_arr.ndim == 0:
            e_arr = np.full(logit.shape, float(e_arr), dtype=logit.dtype)
        elif e_arr.shape != logit.shape:
            raise DimensionError(f"e shape {e_arr.shape} != batch shape {logit.shape}")
        # e=1 -> log sig(l) = -softplus(-l); e=0 -> log(1-sig(l)) = -softplus(l)
        sign = Tensor(1.0 - 2.0 * e_arr)  # +1 for e=0, -1 for e=1
        return tz.neg(tz.softplus(tz.mul(logit, sign)))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.net.named_parameters(prefix)


def zero_output_layer(net) -> None:
    """Force a net (MLP, regressor, or discriminator) to output exactly 0.

    Zero-output regressors then regress every input to (mu=0, sigma=1) and
    zero-output discriminators emit p = 1/2.
    """
    mlp = getattr(net, "net", net)
    last = mlp.layers[-1]
    last.w.assign_(np.zeros_like(last.w.data))
    last.b.assign_(np.zeros_like(last.b.data))


def gaussian_log_prob_rows(x: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Row-wise diagonal-Gaussian log density: (n, d) -> (n,)."""
    z = tz.div(tz.sub(x, mu), sigma)
    per_dim = tz.add(tz.add(tz.mul(tz.mul(z, z), 0.5), tz.log(sigma)),
                     0.5 * tz.LOG_2PI)
    return tz.neg(tz.sum_rows(per_dim))


def standard_normal_log_prob_rows(z: Tensor) -> Tensor:
    """Row-wise log N(z; 0, I): (n, d) -> (n,)."""
    quad = tz.mul(tz.sum_rows(tz.mul(z, z)), 0.5)
    d = z.shape[1]
    return tz.neg(tz.add(quad, 0.5 * d * tz.LOG_2PI))
