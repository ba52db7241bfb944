"""Command-line interface: ``layerwarp retarget|train|eval|flows|toy``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import LayerwarpError

log = logging.getLogger("layerwarp")


def _cmd_retarget(args):
    from .pipeline import RetargetRequest, retarget

    req = RetargetRequest(
        input=args.input,
        checkpoint=args.checkpoint,
        output=args.output,
        mask=args.mask,
        inpainted=args.inpainted,
        factor=args.factor,
        axis=args.axis,
        height=args.height,
        width=args.width,
        export_flows=args.export_flows,
    )
    res = retarget(req)
    h, w = res.image.shape[-2:]
    print(f"wrote {args.output} ({h}x{w})")
    if res.flow_path:
        print(f"wrote {res.flow_path}")
    return 0


def _cmd_train(args):
    from .training import Trainer, ingest, load_config

    cfg = load_config(args.config)
    if args.data:
        cfg.data_root = args.data
    if args.out:
        cfg.out_dir = args.out
    if not cfg.data_root:
        raise LayerwarpError("no dataset: set data_root in the config or pass --data")
    index = ingest(cfg.data_root, cfg, cache_dir=Path(cfg.out_dir) / "cache")
    if args.resume:
        trainer = Trainer.resume(args.resume, index, cfg)
    else:
        trainer = Trainer(index, cfg)
    total = cfg.total_steps(len(index))
    every = cfg.log_every

    def report(row):
        if (row["step"] + 1) % every == 0 or row["step"] + 1 == total:
            print(
                f"step {row['step'] + 1}/{total} lr {row['lr']:.3g} "
                f"pssl {row['pssl']:.5f} nsreg {row['nsreg']:.5f} total {row['total']:.5f}",
                flush=True,
            )

    trainer.run(total, callback=report)
    print(f"checkpoint {trainer.checkpoints[-1]}")
    print(f"loss log {trainer.log_path}")
    return 0


def _cmd_eval(args):
    from .evaluation import evaluate

    report = evaluate(args.inputs, args.outputs, args.embed_backend, args.perceptual_backend)
    out = Path(args.report)
    report.write(out.with_suffix(".csv"), out.with_suffix(".json"))
    for r in report.rows:
        factor = "-" if r.factor is None else f"{r.factor:.3f}"
        print(f"{r.name}\t{factor}\t{r.axis}\t{r.content_similarity:.2f}\t{r.structure_similarity:.2f}")
    print(f"mean\t\t\t{report.content_similarity:.2f}\t{report.structure_similarity:.2f}")
    return 0


def _cmd_flows_inspect(args):
    from .flows import import_flows

    gsl, gnsl = import_flows(args.path)
    h, w = gsl.shape[:2]
    print(f"{args.path}: {h}x{w}")
    for name, g in (("salient", gsl), ("non_salient", gnsl)):
        print(f"  {name}: y [{float(g[..., 0].min()):.4f}, {float(g[..., 0].max()):.4f}] "
              f"x [{float(g[..., 1].min()):.4f}, {float(g[..., 1].max()):.4f}]")
    print(f"  identical: {bool((gsl == gnsl).all())}")
    return 0


def _cmd_flows_apply(args):
    from .imageio import save_image
    from .pipeline import apply_flows

    out = apply_flows(args.flows, args.input, args.mask, args.inpainted)
    save_image(args.output, out)
    print(f"wrote {args.output}")
    return 0


def _cmd_toy(args):
    from .synthetic import write_toy_dataset

    root = write_toy_dataset(args.root, n=args.count, size=args.size, seed=args.seed)
    print(f"wrote {args.count} images to {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerwarp", description="Layered affine image retargeting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("retarget", help="retarget one image with a checkpoint")
    r.add_argument("input")
    r.add_argument("-c", "--checkpoint", required=True)
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--mask", help="saliency mask; omitted means an all-one mask")
    r.add_argument("--inpainted", help="precomputed inpainted non-salient layer")
    r.add_argument("--factor", type=float)
    r.add_argument("--axis", choices=("height", "width"))
    r.add_argument("--height", type=int)
    r.add_argument("--width", type=int)
    r.add_argument("--export-flows", action="store_true", help="also write <output>.flows")
    r.set_defaults(func=_cmd_retarget)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("config")
    t.add_argument("--data", help="dataset root (overrides data_root)")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="content/structure similarity of retargeted outputs")
    e.add_argument("inputs")
    e.add_argument("outputs")
    e.add_argument("--embed-backend", default="randconv")
    e.add_argument("--perceptual-backend", default="randconv")
    e.add_argument("--report", default="eval_report", help="report path stem (.csv and .json)")
    e.set_defaults(func=_cmd_eval)

    f = sub.add_parser("flows", help="inspect or apply exported flow files")
    fsub = f.add_subparsers(dest="flows_command", required=True)
    fi = fsub.add_parser("inspect")
    fi.add_argument("path")
    fi.set_defaults(func=_cmd_flows_inspect)
    fa = fsub.add_parser("apply", help="recompose an image from a flow file, without a network")
    fa.add_argument("flows")
    fa.add_argument("input")
    fa.add_argument("-o", "--output", required=True)
    fa.add_argument("--mask")
    fa.add_argument("--inpainted")
    fa.set_defaults(func=_cmd_flows_apply)

    y = sub.add_parser("toy", help="write a synthetic dataset")
    y.add_argument("root")
    y.add_argument("--count", type=int, default=16)
    y.add_argument("--size", type=int, default=64)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=_cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (LayerwarpError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
