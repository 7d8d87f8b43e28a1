"""Command-line interface.

Subcommands: gen-data, train, complete, eval, noise-bench, density-bench.
Exit codes: 0 success, 1 usage error, 2 data/format/config error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .autodiff import Tensor
from .config import load_run_config, run_config_from_dict
from .errors import DanceError, ParseError
from .formats import (load_checkpoint, load_dataset, read_ply, read_xyz,
                      save_checkpoint, save_dataset, write_ply)
from .geometry import build_view_rig
from .metrics import write_metrics_csv
from .model import ModelParams, init_model_params
from .training import (complete_cloud, density_bench, evaluate,
                       generate_synthetic_dataset, noise_bench, train)


def read_cloud(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".xyz":
        return read_xyz(path)
    if ext == ".ply":
        return read_ply(path)
    raise ParseError(f"{path}: unsupported extension {ext!r} (use .xyz or .ply)")


def _load_model(ckpt_path):
    arrays, config = load_checkpoint(ckpt_path)
    run = run_config_from_dict(config)
    expected = set(init_model_params(run.model, 0).tensors)
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))[:3]
        extra = sorted(set(arrays) - expected)[:3]
        raise ParseError(f"{ckpt_path}: tensor names do not match the stored config "
                         f"(missing {missing}, unexpected {extra})")
    tensors = {n: Tensor(a, requires_grad=True) for n, a in arrays.items()}
    return ModelParams(config=run.model, tensors=tensors), run


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[k] for k in header])


def cmd_gen_data(args):
    cats = [c.strip() for c in args.categories.split(",") if c.strip()]
    samples = generate_synthetic_dataset(args.n_per_class, cats, args.points, args.seed)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples ({args.n_per_class} x {len(cats)} classes) to {args.out}")
    return 0


def cmd_train(args):
    run = load_run_config(args.config)
    if args.seed is not None:
        run.train.seed = args.seed
    dataset = load_dataset(args.data)
    params, history = train(dataset, run.model, run.train, spread=run.rig.spread)
    save_checkpoint(args.out, {n: t.data for n, t in params.tensors.items()}, run.to_dict())
    hist_path = args.history or args.out + ".history.csv"
    _write_table(hist_path, ["epoch", "loss", "cd", "cls_accuracy"],
                 [{"epoch": i, **h} for i, h in enumerate(history)])
    if history:
        last = history[-1]
        print(f"trained {run.train.epochs} epochs on {len(dataset)} samples: "
              f"loss {last['loss']:.4f}, cd {last['cd']:.4f}, "
              f"accuracy {last['cls_accuracy']:.2%}")
    print(f"checkpoint: {args.out}\nhistory: {hist_path}")
    return 0


def cmd_complete(args):
    params, run = _load_model(args.ckpt)
    r = args.r if args.r is not None else run.model.r
    rig = build_view_rig(run.model.v_count, r, run.rig.spread)
    threshold = args.threshold if args.threshold is not None else run.rig.threshold
    cloud = read_cloud(args.input)
    out, pred, _ = complete_cloud(cloud, params, rig, threshold, args.seed,
                                  run.train.use_classification, run.train.use_face_attention)
    write_ply(args.out, out, binary=not args.ascii)
    out_pred = args.out_pred or os.path.splitext(args.out)[0] + "_union.ply"
    write_ply(out_pred, pred, binary=not args.ascii)
    print(f"{len(out)} completion points -> {args.out}; "
          f"{len(pred)} total (input + completion) -> {out_pred}")
    return 0


def cmd_eval(args):
    params, run = _load_model(args.ckpt)
    dataset = load_dataset(args.data)
    rig = build_view_rig(run.model.v_count, run.model.r, run.rig.spread)
    threshold = args.threshold if args.threshold is not None else run.rig.threshold
    rows, agg = evaluate(params, dataset, rig, threshold, args.seed,
                         run.train.use_classification, run.train.use_face_attention)
    write_metrics_csv(args.out, rows, agg, paper_scale=args.paper_scale)
    print(f"evaluated {len(rows)} samples -> {args.out}")
    print(f"mean: cd_l1 {agg.cd_l1:.6f} (x1000: {agg.cd_l1 * 1000:.3f}), "
          f"cd_l2 {agg.cd_l2:.6f} (x1000: {agg.cd_l2 * 1000:.3f}), "
          f"dcd {agg.dcd:.4f}, f1 {agg.f1_at_1pct:.4f}")
    return 0


def cmd_noise_bench(args):
    params, run = _load_model(args.ckpt)
    dataset = load_dataset(args.data)
    sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    rows = noise_bench(params, dataset, sigmas, args.seed,
                       spread=run.rig.spread, threshold=run.rig.threshold)
    _write_table(args.out, ["sigma", "cd_avg"], rows)
    for row in rows:
        print(f"sigma {row['sigma']:g}: cd_avg {row['cd_avg']:.6f}")
    return 0


def cmd_density_bench(args):
    params, run = _load_model(args.ckpt)
    dataset = load_dataset(args.data)
    r_values = [int(v) for v in args.r_values.split(",") if v.strip()]
    n_values = [int(v) for v in args.n_values.split(",") if v.strip()]
    rows = density_bench(params, dataset, r_values, n_values, args.seed,
                         spread=run.rig.spread, threshold=run.rig.threshold)
    _write_table(args.out, ["r", "n", "cd_avg", "output_count"], rows)
    for row in rows:
        print(f"r {row['r']} n {row['n']}: cd_avg {row['cd_avg']:.6f}, "
              f"mean output count {row['output_count']:.1f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="dance",
                                description="point cloud completion pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n-per-class", type=int, default=10)
    g.add_argument("--categories", default="sphere,cuboid,cylinder")
    g.add_argument("--points", type=int, default=2048)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", default=None, help="JSON config; defaults apply if omitted")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", default=None, help="per-epoch CSV (default: <out>.history.csv)")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("complete", help="complete one partial cloud")
    c.add_argument("--input", required=True, help="partial cloud (.xyz or .ply)")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True, help="PLY of the predicted missing points")
    c.add_argument("--out-pred", default=None,
                   help="PLY of input plus prediction (default: <out>_union.ply)")
    c.add_argument("--r", type=int, default=None, help="override the output grid resolution")
    c.add_argument("--threshold", type=float, default=None)
    c.add_argument("--ascii", action="store_true", help="write ascii instead of binary PLY")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_complete)

    e = sub.add_parser("eval", help="metric report over a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True, help="per-sample CSV plus a mean row")
    e.add_argument("--threshold", type=float, default=None)
    e.add_argument("--paper-scale", action="store_true",
                   help="multiply CD columns by 1000 in the CSV")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    nb = sub.add_parser("noise-bench", help="CD under input noise levels")
    nb.add_argument("--data", required=True)
    nb.add_argument("--ckpt", required=True)
    nb.add_argument("--out", required=True)
    nb.add_argument("--sigmas", default="0,0.005,0.01,0.02")
    nb.add_argument("--seed", type=int, default=0)
    nb.set_defaults(func=cmd_noise_bench)

    db = sub.add_parser("density-bench", help="CD across grid resolutions and input sizes")
    db.add_argument("--data", required=True)
    db.add_argument("--ckpt", required=True)
    db.add_argument("--out", required=True)
    db.add_argument("--r-values", default="17,21,29")
    db.add_argument("--n-values", default="512,1024,2048")
    db.add_argument("--seed", type=int, default=0)
    db.set_defaults(func=cmd_density_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except DanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
