"""Command line entry point: gen-data, train, eval, freq-analysis, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import catalog as catalog_mod
from . import phantom

log = logging.getLogger("organseg")

ALL_ARMS = ["vanilla", "vanilla_hpa", "attention", "attention_hpa"]


def cmd_gen_data(args) -> list[Path]:
    cat = catalog_mod.load_catalog(args.catalog)
    spec = phantom.load_spec(args.spec)
    phantom.validate_spec(spec, cat)
    out = Path(args.out)
    written, cases = [], []
    for r in range(cat.num_sources):
        for s in range(args.cases_per_source):
            case_id = f"r{r}_s{s:03d}"
            case = phantom.generate_case(cat, spec, r, args.seed * 100_003 + s, case_id=case_id)
            written.append(phantom.write_case(case, out / case_id))
            cases.append(case)
    counts, total = phantom.organ_slice_counts(cases, cat)
    full_counts, _ = phantom.organ_slice_counts(cases, cat, full=True)
    stats = {"counts": counts, "total_slices": total, "present_counts": full_counts}
    (out / "corpus_stats.json").write_text(json.dumps(stats, indent=1) + "\n")
    print(f"wrote {len(written)} cases to {out}")
    print(f"{'organ':<20} {'annotated':>10} {'present':>10}")
    for name in counts:
        print(f"{name:<20} {counts[name]:>10} {full_counts[name]:>10}")
    print(f"{'total slices':<20} {total:>10}")
    return written + [out / "corpus_stats.json"]


def _arms(spec: str | None, default: str) -> list[str]:
    if not spec:
        return [default]
    if spec == "all":
        return list(ALL_ARMS)
    arms = spec.split(",")
    bad = [a for a in arms if a not in ALL_ARMS]
    if bad:
        raise ValueError(f"unknown arms {bad}")
    return arms


def cmd_train(args) -> list[Path]:
    from .training import RunConfig, cross_validate, load_cases, train

    base = RunConfig.from_json(args.run)
    if args.seed is not None:
        base.seed = args.seed
    if args.folds is not None:
        base.folds = args.folds
    out = Path(args.out)
    cat = base.load_catalog()
    cases = load_cases(args.data or base.data_dir)
    written = []
    for arm in _arms(args.arms, base.arm):
        run = base.with_arm(arm)
        arm_dir = out / arm
        arm_dir.mkdir(parents=True, exist_ok=True)
        (arm_dir / "run.json").write_text(json.dumps(run.to_dict(), indent=1) + "\n")
        if args.no_cv:
            art = train(run, cases, cat, out_dir=arm_dir)
            written += art.checkpoints
            continue
        folds, pooled = cross_validate(run, cases, out_dir=arm_dir, catalog=cat)
        print(f"== {arm}: pooled over {len(folds)} folds")
        print(pooled.to_text())
        written.append(arm_dir / "report.json")
    return written


def cmd_eval(args) -> list[Path]:
    import numpy as np

    from .metrics import aggregate_report
    from .metrics import evaluate_case
    from .network import load_checkpoint
    from .training import ARMS, load_cases, predict_case, write_report

    model, extra = load_checkpoint(args.checkpoint)
    cat = catalog_mod.load_catalog(args.catalog)
    cases = load_cases(args.data)
    if args.cases:
        keep = set(args.cases.split(","))
        cases = [c for c in cases if c.case_id in keep]
    arm = args.arm or extra.get("arm", "attention_hpa")
    use_attention = ARMS[arm][0]
    cfg = model.config
    mask = None
    if args.mask_source is not None:
        mask = catalog_mod.availability_mask(cat, args.mask_source).mask.astype(np.float64)
    metrics = []
    for c in cases:
        p = predict_case(model, c, cat, attention=use_attention, stack_size=cfg.S,
                         crop=(cfg.H, cfg.W), mask=mask)
        metrics.append(evaluate_case(p, c, cat))
    report = aggregate_report(metrics, cat)
    write_report(report, args.out)
    print(report.to_text())
    return [Path(args.out) / "report.json", Path(args.out) / "report.txt"]


def cmd_freq(args) -> list[Path]:
    from .losses import frequency_table

    with open(args.counts) as f:
        doc = json.load(f)
    counts = doc.get("counts", doc) if isinstance(doc.get("counts"), dict) else doc
    counts = {k: int(v) for k, v in counts.items() if isinstance(v, (int, float))}
    total = args.total if args.total is not None else doc.get("total_slices")
    if total is None:
        raise ValueError("total slice count missing (--total or total_slices in the JSON)")
    B = args.batch_size if args.batch_size is not None else int(doc.get("batch_size", 16))
    table = frequency_table(counts, int(total), B)

    w = max(len("organ"), *(len(k) for k in counts))
    lines = [f"{'organ':<{w}}  {'slices':>7}  {'B=1':>7}  {f'B={B}':>7}"]
    for name, row in table["organs"].items():
        lines.append(f"{name:<{w}}  {row['slices']:>7}  {row['freq_b1']:>7.4f}  {row[f'freq_b{B}']:>7.4f}")
    ratio = table["ratio"]
    if ratio:
        lines.append(f"frequency ratio {ratio['most']} / {ratio['least']}: "
                     f"{ratio['ratio_b1']:.1f} → {ratio[f'ratio_b{B}']:.2f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    written = []
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "freq.json").write_text(json.dumps(table, indent=1) + "\n")
        (out / "freq.txt").write_text(text)
        written = [out / "freq.json", out / "freq.txt"]
    return written


def cmd_report(args) -> list[Path]:
    from .metrics import MetricsReport, comparison_table

    labels = args.labels.split(",") if args.labels else []
    if labels and len(labels) != len(args.reports):
        raise ValueError("--labels must name every report")
    reports = {}
    for i, path in enumerate(args.reports):
        p = Path(path)
        label = labels[i] if labels else (p.parent.name or p.stem)
        if label in reports:
            label = f"{label}#{i}"
        reports[label] = MetricsReport.from_dict(json.loads(p.read_text()))
    text = comparison_table(reports)
    print(text, end="")
    written = []
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(text)
        written.append(out / "comparison.txt")
        if args.logs:
            written.append(plot_loss_curves(args.logs, out / "loss_curves.png"))
    return written


def plot_loss_curves(log_paths, dest) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in log_paths:
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        ax.plot([r["epoch"] for r in recs], [r["total"] for r in recs],
                marker="o", label=Path(path).parent.name or Path(path).stem)
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(dest, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(dest)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="organseg", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate phantom cases")
    p.add_argument("--catalog", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--cases-per-source", type=int, default=7)
    p.set_defaults(func=cmd_gen_data, need_out=True, default_seed=0)

    p = sub.add_parser("train", parents=[common], help="train with cross-validation")
    p.add_argument("--run", required=True, help="run.json")
    p.add_argument("--data", default=None, help="overrides data_dir in run.json")
    p.add_argument("--arms", default=None, help="'all' or comma-separated arm names")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--no-cv", action="store_true", help="train once on every case")
    p.set_defaults(func=cmd_train, need_out=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--cases", default=None, help="comma-separated case ids")
    p.add_argument("--arm", default=None, choices=ALL_ARMS)
    p.add_argument("--mask-source", type=int, default=None,
                   help="recalibrate with this source's availability mask")
    p.set_defaults(func=cmd_eval, need_out=True)

    p = sub.add_parser("freq-analysis", aliases=["freq"], parents=[common],
                       help="batch-dice participation frequencies")
    p.add_argument("--counts", required=True)
    p.add_argument("--total", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_freq, need_out=False)

    p = sub.add_parser("report", parents=[common], help="side-by-side table of report.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels", default=None)
    p.add_argument("--logs", nargs="*", default=None, help="log.jsonl files for loss curves")
    p.set_defaults(func=cmd_report, need_out=False)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.need_out and not args.out:
        ap.error(f"{args.command} requires --out")
    if args.seed is None and hasattr(args, "default_seed"):
        args.seed = args.default_seed
    try:
        args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
