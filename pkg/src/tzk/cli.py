"""Command-line entry point: train, eval, sample, interpolate, make-data.

All commands are deterministic under fixed seeds in single-threaded mode.
The ``TZK_PRECISION`` environment variable (f32/f64) selects the float
width before any command runs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tz
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    restore_optimizer,
    restore_state,
    rng_from_json,
    save_checkpoint,
)
from .config import (
    build_dataset,
    build_model,
    build_train_config,
    load_config,
    validate_config,
)
from .data import Dataset, make_toy, save_dataset, write_pgm, write_ppm
from .errors import ConfigError, FormatError, TrainingAbort, TzkError
from .evaluation import evaluate, interpolate_latent
from .hierarchy import HierarchicalModel, hierarchical_sample
from .knowledge import derive_seed
from .objective import TzkModel
from .tensor import Tensor, read_tensor, write_tensor
from .training import Adam, CsvLogger, specialize, train_loop


def build_hierarchical(cfg: dict) -> HierarchicalModel:
    """Rebuild a two-level model from a nested config snapshot."""
    parent = build_model(cfg["parent"])
    child = build_model(cfg["child"])
    return HierarchicalModel(parent, cfg["bridge_head_id"], child)


def model_from_checkpoint(ckpt: Checkpoint):
    if ckpt.kind == "hierarchical":
        model = build_hierarchical(ckpt.config)
    else:
        model = build_model(ckpt.config)
    restore_state(model, ckpt.params, ckpt.buffers)
    return model


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = build_dataset(cfg)
    train_cfg = build_train_config(cfg)
    if args.max_steps is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, max_steps=args.max_steps)
    if args.freeze_tflow:
        from dataclasses import replace

        train_cfg = replace(train_cfg, freeze_tflow=True)

    io_cfg = cfg.get("io", {})
    ckpt_dir = Path(io_cfg.get("checkpoint_dir", "checkpoints"))
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = io_cfg.get("log_path", str(ckpt_dir / "train_log.csv"))

    model = build_model(cfg, dataset)
    start_step = 0
    opt = Adam(dict(model.named_parameters()), train_cfg)
    rng: Optional[np.random.Generator] = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.kind != "tzk":
            raise FormatError(f"cannot resume from a {ckpt.kind!r} checkpoint")
        if ckpt.config != cfg:
            raise ConfigError("resume checkpoint was created with a different config")
        restore_state(model, ckpt.params, ckpt.buffers)
        restore_optimizer(opt, ckpt)
        rng = rng_from_json(ckpt.rng_state)
        start_step = ckpt.step
    else:
        rng = np.random.default_rng(derive_seed(train_cfg.seed, "train"))
        if train_cfg.freeze_tflow and not model.tflow.actnorm_initialized:
            print("warning: freezing an untrained (random) observation flow",
                  file=sys.stderr)

    def on_checkpoint(step: int, opt_now: Adam, rng_now: np.random.Generator) -> None:
        save_checkpoint(ckpt_dir / f"step{step:06d}.tzkc", model, cfg, step,
                        rng=rng_now, opt=opt_now)

    logger = CsvLogger(log_path, model.heads) if not args.resume \
        else _AppendLogger(log_path, model.heads)
    try:
        if args.parallel_heads:
            if not train_cfg.freeze_tflow:
                raise ConfigError("--parallel-heads requires a frozen flow")
            groups = _datasets_by_head(dataset, model)
            specialize(model, groups, train_cfg, parallel=True)
            on_checkpoint(train_cfg.max_steps, opt, rng)
        else:
            train_loop(model, dataset, train_cfg, opt=opt, rng=rng,
                       log_writer=logger, on_checkpoint=on_checkpoint,
                       start_step=start_step)
    except TrainingAbort as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 3
    finally:
        logger.close()
    print(f"checkpoint written to {ckpt_dir / f'step{train_cfg.max_steps:06d}.tzkc'}")
    return 0


class _AppendLogger(CsvLogger):
    def __init__(self, path, head_ids):
        self.fields = ["step", "lr", "loss", "bound", "mixture", "gap"]
        self.fields += [f"acc:{hid}" for hid in head_ids]
        import csv as _csv

        self._fp = open(path, "a", newline="")
        self._writer = _csv.DictWriter(self._fp, fieldnames=self.fields,
                                       extrasaction="ignore")


def _datasets_by_head(dataset: Dataset, model: TzkModel) -> dict[str, Dataset]:
    groups = {}
    for hid in model.heads:
        col = dataset.labels.get(hid)
        if col is None or not (col == 1).any():
            raise ConfigError(f"no positive examples labeled for head {hid!r}")
        groups[hid] = Dataset(name=hid, kind=dataset.kind, x=dataset.x[col == 1])
    return groups


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    if isinstance(model, HierarchicalModel):
        raise ConfigError("eval expects a flat model checkpoint")
    if args.data:
        from .data import load_dataset

        dataset = load_dataset(args.data)
    else:
        dataset = build_dataset(ckpt.config)
    try:
        report = evaluate(model, dataset, head_id=args.head,
                          seed=args.seed, draws=args.draws)
    except KeyError as err:
        print(f"error: {err.args[0]}", file=sys.stderr)
        return 4
    print(report.pretty())
    if args.out:
        report.write_csv(args.out)
        print(f"report written to {args.out}")
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed)
    try:
        if args.child_head:
            if not isinstance(model, HierarchicalModel):
                raise ConfigError("--child-head needs a hierarchical checkpoint")
            samples = hierarchical_sample(model, args.child_head,
                                          temperature=args.temperature,
                                          rng=rng, n=args.n)
            flow = model.parent.tflow
        else:
            flat = model if not isinstance(model, HierarchicalModel) else model.parent
            flow = flat.tflow
            with tz.no_grad():
                if args.head:
                    head = flat.head(args.head)
                    eps = rng.standard_normal((args.n, head.code_dim)) * args.temperature
                    codes = head.sample_c("prior", eps=eps)
                    samples = head.sample_t_given_c(codes, e=1, tflow=flow,
                                                    temperature=args.temperature,
                                                    rng=rng)
                else:
                    samples = flow.sample(args.n, rng, temperature=args.temperature)
    except KeyError as err:
        print(f"error: {err.args[0]}", file=sys.stderr)
        return 4
    write_tensor(args.out, samples)
    print(f"samples ({args.n} x {samples.shape[-1]}) written to {args.out}")
    shape = flow.input_shape
    if shape is not None and args.grid:
        _write_grid(args.grid, samples.data, shape)
        print(f"image grid written to {args.grid}")
    return 0


def _write_grid(path, rows: np.ndarray, shape: tuple) -> None:
    c, h, w = shape
    imgs = np.clip(rows.reshape(-1, c, h, w) * 256.0, 0, 255).astype(np.uint8)
    cols = int(np.ceil(np.sqrt(imgs.shape[0])))
    grid = np.zeros((c, cols * h, cols * w), dtype=np.uint8)
    for i, img in enumerate(imgs):
        r, col = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = img
    if c == 3:
        write_ppm(path, grid)
    else:
        write_pgm(path, grid[0] if c == 1 else grid.mean(axis=0).astype(np.uint8))


def cmd_interpolate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    if isinstance(model, HierarchicalModel):
        model_flat = model.parent
    else:
        model_flat = model
    t_a = read_tensor(args.a)
    t_b = read_tensor(args.b)
    dim = model_flat.dim
    if t_a.size != dim or t_b.size != dim:
        raise ConfigError(
            f"endpoints must have dimension {dim}, got {t_a.size} and {t_b.size}"
        )
    t_a = tz.reshape(t_a, (dim,))
    t_b = tz.reshape(t_b, (dim,))
    points = interpolate_latent(model_flat, Tensor(t_a.data.astype(tz.default_dtype())),
                                Tensor(t_b.data.astype(tz.default_dtype())),
                                args.steps)
    import csv

    with open(args.out, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["index", "base_logp"] + [f"t{i}" for i in range(dim)])
        for i, (t, lp) in enumerate(points):
            writer.writerow([i, repr(lp)] + [repr(float(v)) for v in t.reshape(-1)])
    print(f"interpolation written to {args.out}")
    shape = model_flat.tflow.input_shape
    if shape is not None and args.grid:
        strip = np.stack([t.reshape(-1) for t, _ in points])
        _write_strip(args.grid, strip, shape)
        print(f"image strip written to {args.grid}")
    return 0


def _write_strip(path, rows: np.ndarray, shape: tuple) -> None:
    c, h, w = shape
    imgs = np.clip(rows.reshape(-1, c, h, w) * 256.0, 0, 255).astype(np.uint8)
    strip = np.concatenate(list(imgs), axis=2)
    if c == 3:
        write_ppm(path, strip)
    else:
        write_pgm(path, strip[0] if c == 1 else strip.mean(axis=0).astype(np.uint8))


def cmd_make_data(args) -> int:
    kw = {}
    if args.centers is not None:
        kw["centers"] = args.centers
    if args.components is not None:
        kw["components"] = args.components
    if args.radius is not None:
        kw["radius"] = args.radius
    ds = make_toy(args.kind, args.n, args.noise, args.seed, **kw)
    save_dataset(args.out, ds)
    print(f"dataset ({ds.n} x {ds.dim}, {len(ds.labels)} label columns) "
          f"written to {args.out}")
    return 0


# -- wiring --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tzk",
        description="Conditional generative flows with compositional knowledge heads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop from a JSON config")
    p.add_argument("config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--freeze-tflow", action="store_true")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--parallel-heads", action="store_true",
                   help="train heads concurrently over a frozen flow")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="TZKD container (default: the config dataset)")
    p.add_argument("--head", default=None)
    p.add_argument("--draws", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV report path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--head", default=None)
    p.add_argument("--child-head", default=None)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="TZKT output path")
    p.add_argument("--grid", default=None, help="optional PGM/PPM grid path")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("interpolate", help="interpolate between two observations")
    p.add_argument("checkpoint")
    p.add_argument("--a", required=True, help="TZKT endpoint tensor")
    p.add_argument("--b", required=True, help="TZKT endpoint tensor")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--grid", default=None, help="optional PGM/PPM strip path")
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("make-data", help="generate a toy dataset container")
    p.add_argument("--kind", required=True,
                   choices=["two-moons", "gaussian-mixture", "ring", "blobs"])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--centers", type=int, default=None)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_data)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    mode = os.environ.get("TZK_PRECISION")
    if mode:
        tz.set_precision(mode)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TzkError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
