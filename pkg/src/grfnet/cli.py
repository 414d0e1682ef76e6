"""Command-line entry point: ``grfnet <subcommand> ...``.

Failures print a single ``error code=<CODE> msg="..."`` line to stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .fusion import STRATEGIES
from .network import PROFILES, count_flops, count_params_analytic, forward, shape_table
from .scenes import SampleFormatError, SceneSample, SceneSpec, generate_dataset, load_sample, save_sample
from .train import Checkpoint, CheckpointError, TrainConfig, evaluate, model_from_checkpoint, prepare, train

log = logging.getLogger("grfnet")


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.fusion is not None:
        overrides["fusion"] = args.fusion
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(cfg, out_dir=args.out, resume=resume)
    if result.report is not None:
        print(result.report.to_text())
    print(f"checkpoint={Path(args.out) / 'checkpoint.ssck'}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.manifest)
    print(report.to_kv() if args.format == "kv" else report.to_text())
    return 0


def cmd_count(args) -> int:
    cfg = PROFILES[args.scale](args.stages)
    params = count_params_analytic(cfg)
    flops = count_flops(cfg)
    print(f"params={params} ({params / 1e3:.2f}k)")
    print(f"flops={flops} ({flops / 1e9:.2f}G)")
    if args.shapes:
        for module, op, size in shape_table(cfg):
            print(f"{module}\t{op}\t{size}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    worst = run_suite(args.eps, range(args.seeds))
    ok = True
    for name, err in worst.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name}\tmax_rel_err={err:.3e}\t{'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    train_m, test_m = generate_dataset(args.out, args.n, args.seed, SceneSpec(), args.test_fraction)
    print(f"train={train_m}\ntest={test_m}")
    return 0


def cmd_export_voxels(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg, model = model_from_checkpoint(ckpt)
    sample = load_sample(args.sample)
    prepared = prepare(sample, cfg)
    logits = forward(model, sample.rgb, sample.depth, sample.intrinsics)
    pred = logits.data.argmax(axis=-1).astype(np.uint8).reshape(model.config.output_extents)
    out = SceneSample(sample.rgb, sample.depth, sample.intrinsics, pred, model.config.output_grid())
    save_sample(out, args.out)
    agree = float(np.mean(pred[prepared.mask.in_ssc] == prepared.labels[prepared.mask.in_ssc])) if prepared.mask.in_ssc.any() else float("nan")
    print(f"wrote={args.out} grid={'x'.join(map(str, pred.shape))} in_view_accuracy={agree:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grfnet", description="Voxel semantic scene completion with gated recurrent RGB-D fusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--fusion", choices=STRATEGIES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--format", choices=("table", "kv"), default="table")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="print parameter and FLOP counts")
    c.add_argument("--stages", type=int, default=4)
    c.add_argument("--scale", choices=sorted(PROFILES), default="paper")
    c.add_argument("--shapes", action="store_true", help="also print the layer output-size table")
    c.set_defaults(func=cmd_count)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("gen-data", help="write synthetic scenes and train/test manifests")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--test-fraction", type=float, default=0.2)
    d.set_defaults(func=cmd_gen_data)

    x = sub.add_parser("export-voxels", help="write the predicted label grid as an SSCV file")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--sample", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_voxels)
    return p


def _error_code(exc: BaseException) -> str:
    code = getattr(exc, "code", None)
    if isinstance(code, str):
        return code
    if isinstance(exc, FileNotFoundError):
        return "NOT_FOUND"
    if isinstance(exc, (ValueError, KeyError)):
        return "INVALID"
    return "INTERNAL"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SampleFormatError, CheckpointError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error code={_error_code(exc)} msg={json.dumps(msg)}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
