"""Invertible transform stacks with exact log-determinants.

A :class:`FlowModel` maps a standard-normal base variable z to data t through
an ordered list of invertible steps. Steps are stored in *analysis* order
(data -> base); ``inverse`` walks them forward, ``forward`` walks them
backward with each step's algebraic inverse. Everything runs on flattened
(n, d) batches; image-layout operations (squeeze, channel shuffles, splits)
are resolved to fixed column index maps at construction time, expressed in
the coordinates of the current working block.

Step kinds: ActNorm (per-channel affine, data-initialized), shuffle (fixed
seeded permutation; no 1x1 convolutions here, they accumulate numeric error),
affine coupling (MLP conditioner on the passive half, scale bounded via
exp(2*tanh(s))), squeeze (space-to-channel), and split (factor half the
channels out to the base).
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as tz
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    StateError,
)
from .nets import MLP, standard_normal_log_prob_rows
from .tensor import Tensor

LOGSCALE_BOUND = 2.0  # coupling log-scale lives in [-2, 2]


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 1:
        return tz.reshape(x, (1, x.shape[0])), True
    if x.data.ndim == 2:
        return x, False
    raise DimensionError(f"flow input must be 1-D or 2-D, got shape {x.shape}")


class ActNorm:
    """Per-channel affine y = x*scale + bias with data-dependent init.

    ``pixels`` is the number of columns sharing each channel parameter
    (1 for vector data, h*w for image layouts).
    """

    kind = "actnorm"

    def __init__(self, channels: int, pixels: int = 1, initialized: bool = False):
        self.channels = channels
        self.pixels = pixels
        self.log_scale = tz.parameter(np.zeros(channels))
        self.bias = tz.parameter(np.zeros(channels))
        self.initialized = initialized

    def _cols(self) -> tuple[Tensor, Tensor]:
        if self.pixels == 1:
            return self.log_scale, self.bias
        return (tz.expand_channels(self.log_scale, self.pixels),
                tz.expand_channels(self.bias, self.pixels))

    def ana(self, x: Tensor) -> tuple[Tensor, Tensor]:
        ls, b = self._cols()
        y = tz.add_row(tz.mul_row(x, tz.exp(ls)), b)
        ld = tz.mul(tz.sum_all(self.log_scale), float(self.pixels))
        return y, ld

    def gen(self, y: Tensor) -> tuple[Tensor, Tensor]:
        ls, b = self._cols()
        x = tz.mul_row(tz.add_row(y, tz.neg(b)), tz.exp(tz.neg(ls)))
        ld = tz.neg(tz.mul(tz.sum_all(self.log_scale), float(self.pixels)))
        return x, ld

    def initialize_from(self, x: np.ndarray) -> None:
        """Standardize the analysis output on the given activations."""
        if x.shape[0] < 2:
            raise ContractError("actnorm init needs at least 2 examples")
        per_channel = x.reshape(x.shape[0], self.channels, self.pixels)
        mean = per_channel.mean(axis=(0, 2))
        std = per_channel.std(axis=(0, 2))
        if np.any(std < 1e-12):
            dead = int(np.argmin(std))
            raise DegenerateInputError(
                f"actnorm init: channel {dead} has zero variance"
            )
        self.log_scale.assign_(-np.log(std))
        self.bias.assign_(-mean / std)
        self.initialized = True

    def named_parameters(self, prefix):
        yield f"{prefix}.log_scale", self.log_scale
        yield f"{prefix}.bias", self.bias

    def named_buffers(self, prefix):
        return iter(())


class Shuffle:
    """Fixed column permutation; drawn once from a seeded RNG and persisted."""

    kind = "shuffle"

    def __init__(self, perm: np.ndarray):
        self.set_perm(perm)

    def set_perm(self, perm: np.ndarray) -> None:
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        if not np.array_equal(perm[inv], np.arange(perm.size)):
            raise ContractError("shuffle permutation is not a bijection")
        self.perm = perm
        self.inv = inv

    def ana(self, x: Tensor) -> tuple[Tensor, None]:
        return tz.gather_cols(x, self.perm), None

    def gen(self, y: Tensor) -> tuple[Tensor, None]:
        return tz.gather_cols(y, self.inv), None

    def named_parameters(self, prefix):
        return iter(())

    def named_buffers(self, prefix):
        yield f"{prefix}.perm", self.perm


class Rearrange(Shuffle):
    """Volume-preserving fixed column map (squeeze); logdet 0, not persisted."""

    kind = "squeeze"

    def named_buffers(self, prefix):
        return iter(())


class AffineCoupling:
    """Scale-and-shift the active half as a function of the passive half.

    The conditioner outputs (shift, s); the scale is exp(2*tanh(s)), so a
    zero-initialized conditioner gives an exact identity and the log-scale
    stays in [-2, 2].
    """

    kind = "coupling"

    def __init__(self, rng: np.random.Generator, passive: np.ndarray,
                 active: np.ndarray, hidden: Sequence[int]):
        self.passive = np.asarray(passive, dtype=np.int64)
        self.active = np.asarray(active, dtype=np.int64)
        if np.intersect1d(self.passive, self.active).size:
            raise ContractError("coupling passive/active sets overlap")
        n_out = self.active.size
        self.net = MLP(rng, self.passive.size, hidden, 2 * n_out, zero_last=True)
        # restore[j] = position of original column j in concat(passive, active)
        order = np.concatenate([self.passive, self.active])
        restore = np.empty_like(order)
        restore[order] = np.arange(order.size)
        self.restore = restore

    def _shift_logscale(self, xp: Tensor) -> tuple[Tensor, Tensor]:
        h = self.net(xp)
        m = self.active.size
        shift = tz.gather_cols(h, np.arange(m))
        s_raw = tz.gather_cols(h, np.arange(m, 2 * m))
        logscale = tz.mul(tz.tanh(s_raw), LOGSCALE_BOUND)
        return shift, logscale

    def gen(self, x: Tensor) -> tuple[Tensor, Tensor]:
        xp = tz.gather_cols(x, self.passive)
        xa = tz.gather_cols(x, self.active)
        shift, logscale = self._shift_logscale(xp)
        ya = tz.add(tz.mul(xa, tz.exp(logscale)), shift)
        y = tz.gather_cols(tz.concat_cols(xp, ya), self.restore)
        return y, tz.sum_rows(logscale)

    def ana(self, y: Tensor) -> tuple[Tensor, Tensor]:
        yp = tz.gather_cols(y, self.passive)
        ya = tz.gather_cols(y, self.active)
        shift, logscale = self._shift_logscale(yp)
        xa = tz.mul(tz.sub(ya, shift), tz.exp(tz.neg(logscale)))
        x = tz.gather_cols(tz.concat_cols(yp, xa), self.restore)
        return x, tz.neg(tz.sum_rows(logscale))

    def named_parameters(self, prefix):
        yield from self.net.named_parameters(prefix)

    def named_buffers(self, prefix):
        return iter(())


class Split:
    """Factor the dropped columns out to the base distribution."""

    kind = "split"

    def __init__(self, retained: np.ndarray, dropped: np.ndarray):
        self.retained = np.asarray(retained, dtype=np.int64)
        self.dropped = np.asarray(dropped, dtype=np.int64)
        order = np.concatenate([self.retained, self.dropped])
        restore = np.empty_like(order)
        restore[order] = np.arange(order.size)
        self.restore = restore

    def named_parameters(self, prefix):
        return iter(())

    def named_buffers(self, prefix):
        return iter(())


def squeeze_column_map(c: int, h: int, w: int) -> np.ndarray:
    """Column map realizing (c,h,w) -> (4c,h/2,w/2) space-to-channel.

    Output channel 4*ci + 2*di + dj holds input pixels (ci, 2i+di, 2j+dj), so
    a 1x2x2 block [[a,b],[c,d]] becomes channels (a,b,c,d).
    """
    if h % 2 or w % 2:
        raise DimensionError(f"squeeze needs even spatial extents, got {h}x{w}")
    src = np.arange(c * h * w).reshape(c, h, w)
    out = np.empty((4 * c, h // 2, w // 2), dtype=np.int64)
    for ci in range(c):
        for di in range(2):
            for dj in range(2):
                out[4 * ci + 2 * di + dj] = src[ci, di::2, dj::2]
    return out.reshape(-1)


def squeeze(x: Tensor) -> Tensor:
    """Space-to-channel rearrangement of a single (c,h,w) tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"squeeze expects a (c,h,w) tensor, got {x.shape}")
    c, h, w = x.shape
    cols = squeeze_column_map(c, h, w)
    flat = tz.reshape(x, (1, c * h * w))
    return tz.reshape(tz.gather_cols(flat, cols), (4 * c, h // 2, w // 2))


def unsqueeze(x: Tensor) -> Tensor:
    """Inverse of :func:`squeeze`."""
    if x.data.ndim != 3:
        raise DimensionError(f"unsqueeze expects a (c,h,w) tensor, got {x.shape}")
    c4, h2, w2 = x.shape
    if c4 % 4:
        raise DimensionError(f"unsqueeze needs channels divisible by 4, got {c4}")
    cols = squeeze_column_map(c4 // 4, h2 * 2, w2 * 2)
    inv = np.empty_like(cols)
    inv[cols] = np.arange(cols.size)
    flat = tz.reshape(x, (1, c4 * h2 * w2))
    return tz.reshape(tz.gather_cols(flat, inv), (c4 // 4, h2 * 2, w2 * 2))


class _Entry:
    __slots__ = ("prefix", "step")

    def __init__(self, prefix: str, step):
        self.prefix = prefix
        self.step = step


class FlowModel:
    """Ordered invertible steps over R^D with a standard-normal base.

    Steps are stored in analysis order and operate on the current working
    block (splits narrow it). Columns dropped at Split steps join the base
    variable in drop order, ahead of the final retained block.
    """

    def __init__(self, dim: int, entries: list[_Entry],
                 input_shape: Optional[tuple] = None, needs_init: bool = True):
        self.dim = dim
        self.entries = entries
        self.input_shape = input_shape  # (c, h, w) for image layouts
        self.needs_init = needs_init
        self.split_sizes = [e.step.dropped.size for e in entries
                            if isinstance(e.step, Split)]
        final = dim - sum(self.split_sizes)
        if final <= 0:
            raise ConfigError("splits dropped every dimension")
        self.final_size = final

    # -- bookkeeping -------------------------------------------------------
    @property
    def actnorm_initialized(self) -> bool:
        return all(e.step.initialized for e in self.entries
                   if isinstance(e.step, ActNorm))

    def _check_ready(self, strict: bool) -> None:
        if strict and self.needs_init and not self.actnorm_initialized:
            raise StateError("actnorm is uninitialized; run actnorm_init first")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for e in self.entries:
            yield from e.step.named_parameters(e.prefix)

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for e in self.entries:
            yield from e.step.named_buffers(e.prefix)

    def load_buffer(self, name: str, values) -> None:
        for e in self.entries:
            if isinstance(e.step, Shuffle) and name == f"{e.prefix}.perm":
                e.step.set_perm(np.asarray(values).astype(np.int64))
                return
        raise KeyError(name)

    # -- core maps ---------------------------------------------------------
    def inverse(self, t: Tensor, strict: bool = False) -> tuple[Tensor, Tensor]:
        """Analysis map t -> z with its log |det dz/dt|."""
        self._check_ready(strict)
        x, single = _as_batch(t)
        if x.shape[1] != self.dim:
            raise DimensionError(f"expected dimension {self.dim}, got {x.shape[1]}")
        logdet = Tensor(np.zeros((), dtype=x.dtype))
        pieces = []
        for e in self.entries:
            step = e.step
            try:
                if isinstance(step, Split):
                    pieces.append(tz.gather_cols(x, step.dropped))
                    x = tz.gather_cols(x, step.retained)
                else:
                    x, ld = step.ana(x)
                    if ld is not None:
                        logdet = tz.add(logdet, ld)
            except NumericError as err:
                raise NumericError(f"{err} (flow step {e.prefix})") from None
        pieces.append(x)
        z = pieces[0] if len(pieces) == 1 else tz.concat_cols(*pieces)
        logdet = _rows_like(logdet, z)
        if single:
            z = tz.reshape(z, (self.dim,))
            logdet = tz.reshape(logdet, ())
        return z, logdet

    def forward(self, z: Tensor, strict: bool = False) -> tuple[Tensor, Tensor]:
        """Generative map z -> t with its log |det dt/dz|."""
        self._check_ready(strict)
        x, single = _as_batch(z)
        if x.shape[1] != self.dim:
            raise DimensionError(f"expected dimension {self.dim}, got {x.shape[1]}")
        # peel base segments: split pieces in drop order, then the final block
        bounds = np.cumsum([0] + self.split_sizes + [self.final_size])
        segments = [tz.gather_cols(x, np.arange(bounds[k], bounds[k + 1]))
                    for k in range(len(self.split_sizes) + 1)]
        cur = segments.pop()
        logdet = Tensor(np.zeros((), dtype=x.dtype))
        for e in reversed(self.entries):
            step = e.step
            try:
                if isinstance(step, Split):
                    cur = tz.gather_cols(tz.concat_cols(cur, segments.pop()),
                                         step.restore)
                else:
                    cur, ld = step.gen(cur)
                    if ld is not None:
                        logdet = tz.add(logdet, ld)
            except NumericError as err:
                raise NumericError(f"{err} (flow step {e.prefix})") from None
        logdet = _rows_like(logdet, cur)
        if single:
            cur = tz.reshape(cur, (self.dim,))
            logdet = tz.reshape(logdet, ())
        return cur, logdet

    def log_prob(self, t: Tensor, strict: bool = False) -> Tensor:
        """log p(t) in nats: base density at inverse(t) plus the logdet."""
        single = t.data.ndim == 1
        x = tz.reshape(t, (1, self.dim)) if single else t
        z, logdet = self.inverse(x, strict=strict)
        lp = tz.add(standard_normal_log_prob_rows(z), logdet)
        if single:
            lp = tz.reshape(lp, ())
        return lp

    def sample(self, n: int, rng: np.random.Generator,
               temperature: float = 1.0) -> Tensor:
        """Push n base draws at the given temperature through the flow."""
        if n < 1:
            raise ContractError("sample needs n >= 1")
        if temperature < 0:
            raise ContractError("temperature must be non-negative")
        eps = rng.standard_normal((n, self.dim)) * temperature
        t, _ = self.forward(Tensor(eps.astype(tz.default_dtype())))
        return t

    def actnorm_init(self, batch: Tensor) -> None:
        """Data-dependent init: standardize each ActNorm on the init batch."""
        x, _ = _as_batch(batch)
        if x.shape[0] < 2:
            raise ContractError("actnorm_init needs a batch of at least 2")
        with tz.no_grad():
            cur = x.detach()
            for e in self.entries:
                step = e.step
                if isinstance(step, Split):
                    cur = tz.gather_cols(cur, step.retained)
                    continue
                if isinstance(step, ActNorm) and not step.initialized:
                    step.initialize_from(cur.data)
                cur, _ld = step.ana(cur)


def _rows_like(logdet: Tensor, ref: Tensor) -> Tensor:
    """Broadcast a scalar logdet to one entry per batch row of ``ref``."""
    if logdet.data.ndim == 1:
        return logdet
    n = ref.shape[0]
    return tz.add(Tensor(np.zeros(n, dtype=ref.dtype)), logdet)


def build_vector_flow(dim: int, steps: int, hidden: Sequence[int],
                      rng: np.random.Generator, needs_init: bool = True) -> FlowModel:
    """Stack of ``steps`` x (actnorm, shuffle, coupling) over flat R^dim."""
    if dim < 2:
        raise ConfigError(f"coupling flows need dim >= 2, got {dim}")
    entries = []
    half = dim // 2
    passive = np.arange(half)
    active = np.arange(half, dim)
    for i in range(steps):
        prefix = f"step{i}"
        entries.append(_Entry(f"{prefix}.actnorm", ActNorm(dim)))
        entries.append(_Entry(f"{prefix}.shuffle", Shuffle(rng.permutation(dim))))
        entries.append(_Entry(f"{prefix}.coupling",
                              AffineCoupling(rng, passive, active, hidden)))
    return FlowModel(dim, entries, needs_init=needs_init)


def build_image_flow(shape: Sequence[int], levels: int, steps_per_level: int,
                     hidden: Sequence[int], rng: np.random.Generator,
                     needs_init: bool = True) -> FlowModel:
    """Multi-scale stack: per level squeeze, then flow steps, then split.

    The last level keeps all its channels; earlier levels factor half out to
    the base. All index maps are in the coordinates of the current block.
    """
    c, h, w = (int(v) for v in shape)
    entries = []
    step_idx = 0
    for level in range(levels):
        if h % 2 or w % 2:
            raise ConfigError(
                f"level {level}: spatial extents {h}x{w} are not divisible by 2"
            )
        entries.append(_Entry(f"step{step_idx}.squeeze",
                              Rearrange(squeeze_column_map(c, h, w))))
        c, h, w = 4 * c, h // 2, w // 2
        step_idx += 1

        pixels = h * w
        width = c * pixels
        half_cols = (c // 2) * pixels
        passive = np.arange(half_cols)
        active = np.arange(half_cols, width)
        for _ in range(steps_per_level):
            prefix = f"step{step_idx}"
            entries.append(_Entry(f"{prefix}.actnorm", ActNorm(c, pixels)))
            ch_perm = rng.permutation(c)
            col_perm = (ch_perm[:, None] * pixels
                        + np.arange(pixels)[None, :]).reshape(-1)
            entries.append(_Entry(f"{prefix}.shuffle", Shuffle(col_perm)))
            entries.append(_Entry(f"{prefix}.coupling",
                                  AffineCoupling(rng, passive, active, hidden)))
            step_idx += 1

        if level < levels - 1:
            entries.append(_Entry(f"step{step_idx}.split",
                                  Split(passive, active)))
            c = c // 2
            step_idx += 1

    dim = int(np.prod([int(v) for v in shape]))
    return FlowModel(dim, entries, input_shape=tuple(int(v) for v in shape),
                     needs_init=needs_init)
