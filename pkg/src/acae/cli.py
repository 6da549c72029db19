"""Command-line entry point.

Subcommands: gen, train, eval, sweep, gradcheck, bench. All of them accept
``--config FILE``, repeated ``--set key=value`` overrides, ``--seed`` and
``--outdir``; artifacts (datasets, checkpoints, reports, figures) land in
the output directory, which defaults to $ACAE_OUTDIR or ./out. Exit codes:
0 success, 1 gradient check failure, 2 bad input (missing file or config
error), 3 numerical failure while training.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import report
from .blockio import FileFormatError
from .config import ConfigError, load_config
from .evalharness import (
    bench_overhead,
    build_score_table,
    metrics_from_table,
    rerank_search,
    sweep_lambda,
    sweep_subsets,
)
from .grad import grad_check, make_grad_instance
from .head import AcaeParams
from .oim import ImageMemoryBank, init_oim_state
from .similarity import FusionConfig
from .synthdata import DatasetFormatError, export_dataset, generate, import_dataset
from .train import TrainingDiverged, save_checkpoint, train


def _common_flags(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config key")
    sub.add_argument("--seed", type=int, help="root seed override")
    sub.add_argument("--outdir", default=os.environ.get("ACAE_OUTDIR", "out"),
                     help="output directory (default $ACAE_OUTDIR or ./out)")


def _prepare(args):
    cfg = load_config(args.config, args.overrides, seed=args.seed)
    outdir = report.ensure_outdir(args.outdir)
    report.write_text(os.path.join(outdir, "effective-config.txt"),
                      cfg.snapshot_text())
    return cfg, outdir


def _load_dataset(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return import_dataset(path)


def _load_params(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return AcaeParams.load(path)


def cmd_gen(args) -> int:
    cfg, outdir = _prepare(args)
    dataset = generate(cfg.scenario())
    out = args.out or os.path.join(outdir, "dataset.jsonl")
    export_dataset(dataset, out)
    persons = sum(img.n for img in dataset.images)
    print(f"wrote {out}: {len(dataset.images)} images, "
          f"{dataset.n_identities} identities, {persons} person instances")
    return 0


def cmd_train(args) -> int:
    cfg, outdir = _prepare(args)
    dataset = _load_dataset(args.data)
    seed = cfg["seed"]
    params = AcaeParams.initialize(
        dim=dataset.dim,
        heads=cfg["acae.heads"],
        ffn_dim=cfg["acae.ffn_dim"] or None,
        seed=seed,
        scaled_logits=cfg["acae.scaled_logits"],
        share_qkv=cfg["acae.share_qkv"],
        ln_eps=cfg["acae.ln_eps"],
    )
    bank = ImageMemoryBank.from_images(dataset.images, seed=seed,
                                       momentum=cfg["train.imb_momentum"])
    state = init_oim_state(
        dataset.n_identities, dataset.dim,
        tau=cfg["oim.tau"], gamma=cfg["oim.momentum"],
        capacity=cfg["oim.queue_factor"] * dataset.n_identities, seed=seed,
    )
    schedule = cfg.schedule()

    def progress(stats):
        tag = " (frozen)" if stats.frozen else ""
        print(f"epoch {stats.epoch:3d}  loss {stats.mean_loss:9.4f}  "
              f"lr {stats.lr:g}  skipped {stats.skipped}{tag}")

    history = train(dataset, params, bank, state, schedule,
                    sup=cfg.supervision(), seed=seed, progress=progress)

    model_path = os.path.join(outdir, "model.acae")
    ckpt_path = os.path.join(outdir, "checkpoint.acae")
    params.save(model_path)
    save_checkpoint(ckpt_path, params, bank, state)
    report.write_tsv(
        os.path.join(outdir, "train_history.tsv"),
        ["epoch", "mean_loss", "steps", "skipped", "lr", "frozen"],
        [[h.epoch, f"{h.mean_loss:.6f}", h.steps, h.skipped, f"{h.lr:g}", h.frozen]
         for h in history],
    )
    report.save_history_figure(os.path.join(outdir, "train_history.png"), history)
    print(f"wrote {model_path} and {ckpt_path}")
    return 0


def _report_table(reports, extra_rows=()):
    headers = ["config", "mAP", "top-1", "top-5", "top-10"]
    rows = [r.row() for r in reports] + list(extra_rows)
    return headers, rows


def cmd_eval(args) -> int:
    cfg, outdir = _prepare(args)
    dataset = _load_dataset(args.data)
    params = _load_params(args.model)
    protocol = cfg.protocol()
    fusion = cfg.fusion()

    table = build_score_table(dataset, params, protocol,
                              keep_features=args.with_rerank)
    baseline = metrics_from_table(
        table, FusionConfig(lam=0.0, rescale=False, normalize=fusion.normalize),
        label="baseline")
    acae = metrics_from_table(table, fusion, label="acae")
    reports = [baseline, acae]
    if args.with_rerank:
        best, _ = rerank_search(table)
        reports.insert(1, best)

    delta = ["delta (acae-baseline)",
             f"{100 * (acae.map - baseline.map):+.2f}"]
    delta += [f"{100 * (acae.topk[k] - baseline.topk[k]):+.2f}"
              for k in sorted(acae.topk)]
    headers, rows = _report_table(reports, extra_rows=[delta])

    text = report.format_table(headers, rows)
    timing = (f"# timing: appearance scoring {table.appearance_seconds:.3f}s, "
              f"attention head {table.head_seconds:.3f}s "
              f"over {len(table.queries)} queries")
    report.write_text(os.path.join(outdir, "eval_report.txt"), text + "\n" + timing)
    report.write_tsv(os.path.join(outdir, "eval_report.tsv"), headers, rows)
    report.save_compare_figure(
        os.path.join(outdir, "eval_compare.png"),
        [r.label for r in reports],
        [r.map for r in reports],
        [r.topk[1] for r in reports],
    )
    print(text)
    print(timing)
    return 0


def cmd_sweep(args) -> int:
    cfg, outdir = _prepare(args)
    dataset = _load_dataset(args.data)
    params = _load_params(args.model)
    protocol = cfg.protocol()
    fusion = cfg.fusion()
    table = build_score_table(dataset, params, protocol)
    baseline = metrics_from_table(
        table, FusionConfig(lam=0.0, rescale=False, normalize=fusion.normalize),
        label="baseline")

    chunks = []
    if args.kind in ("lambda", "all"):
        lambdas = cfg.lambdas()
        reports = sweep_lambda(table, lambdas, fusion)
        headers, rows = _report_table([baseline] + reports)
        report.write_tsv(os.path.join(outdir, "lambda_sweep.tsv"), headers, rows)
        report.save_lambda_figure(
            os.path.join(outdir, "lambda_sweep.png"),
            lambdas, [r.map for r in reports], [r.topk[1] for r in reports],
            baseline.map)
        chunks.append("fusion weight sweep\n" + report.format_table(headers, rows))
    if args.kind in ("subsets", "all"):
        reports = sweep_subsets(table, fusion)
        headers, rows = _report_table(reports)
        report.write_tsv(os.path.join(outdir, "subset_sweep.tsv"), headers, rows)
        report.save_subset_figure(
            os.path.join(outdir, "subset_sweep.png"),
            [r.label for r in reports], [r.map for r in reports])
        chunks.append("feature subset sweep\n" + report.format_table(headers, rows))

    text = "\n\n".join(chunks)
    report.write_text(os.path.join(outdir, "sweep_report.txt"), text)
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    cfg, outdir = _prepare(args)
    seed = cfg["seed"]
    sizes = [(1, 2), (2, 1), (2, 3), (3, 3), (5, 2)]
    heads = [1, 2]
    merged = {}
    worst = 0.0
    for i in range(args.instances):
        n, m = sizes[i % len(sizes)]
        h = heads[i % len(heads)]
        inst = make_grad_instance(seed + i, n=n, m=m, dim=args.dim, heads=h)
        params = AcaeParams.initialize(args.dim, heads=h, seed=seed + i)
        rep = grad_check(params, inst, tolerance=args.tolerance)
        worst = max(worst, rep.max_rel_err)
        for row in rep.rows:
            merged[row.name] = max(merged.get(row.name, 0.0), row.max_rel_err)

    headers = ["parameter", "max rel err", "result"]
    rows = [[name, f"{err:.3e}", "PASS" if err < args.tolerance else "FAIL"]
            for name, err in sorted(merged.items())]
    ok = worst < args.tolerance
    text = report.format_table(headers, rows)
    summary = (f"overall: {'PASS' if ok else 'FAIL'} over {args.instances} "
               f"instances (max rel err {worst:.3e}, tolerance {args.tolerance:g})")
    report.write_text(os.path.join(outdir, "gradcheck.txt"), text + "\n" + summary)
    report.write_tsv(os.path.join(outdir, "gradcheck.tsv"), headers, rows)
    print(text)
    print(summary)
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cfg, outdir = _prepare(args)
    dataset = _load_dataset(args.data)
    params = _load_params(args.model)
    repeats = args.repeats if args.repeats is not None else cfg["bench.repeats"]
    bench = bench_overhead(dataset, params, repeats, seed=cfg["seed"])
    headers = ["phase", "mean ms/pair", "std ms"]
    rows = bench.rows()
    text = report.format_table(headers, rows) if rows else "empty report (repeats=0)"
    report.write_text(os.path.join(outdir, "bench.txt"), text)
    report.write_tsv(os.path.join(outdir, "bench.tsv"), headers, rows)
    if rows:
        report.save_bench_figure(os.path.join(outdir, "bench.png"), bench)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acae",
        description="context-aware person retrieval: data generation, "
                    "training, evaluation, sweeps, gradient checks, benchmarks")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen", help="generate a synthetic scenario dataset")
    _common_flags(p)
    p.add_argument("--out", help="dataset path (default OUTDIR/dataset.jsonl)")
    p.set_defaults(func=cmd_gen)

    p = subs.add_parser("train", help="train the attention head on a dataset")
    _common_flags(p)
    p.add_argument("--data", required=True, help="dataset file from `gen`")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="baseline vs context retrieval metrics")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="model or checkpoint file")
    p.add_argument("--with-rerank", action="store_true",
                   help="add the best k-reciprocal re-ranking row")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("sweep", help="fusion weight and feature subset sweeps")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--kind", choices=("lambda", "subsets", "all"), default="all")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("gradcheck", help="validate gradients against finite differences")
    _common_flags(p)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--dim", type=int, default=8)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("bench", help="inference overhead of the head per image pair")
    _common_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetFormatError, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
