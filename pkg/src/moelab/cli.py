"""Command-line front end.

Subcommands: train, inspect, perturb, compress, decompress, offload-report.
Experiment configs are JSON files; common fields can be overridden by flags.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_INTERNAL = 3


def _add_task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task-kind", default="modular_sum",
                   choices=("modular_sum", "copy_reverse", "comparison"))
    p.add_argument("--task-param", type=int, default=10)
    p.add_argument("--task-seed", type=int, default=7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="MoE compression-error sensitivity lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a synthetic task")
    _add_task_flags(p)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=float, default=0.99)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--export-dataset", help="optional JSONL dump of the training data")

    p = sub.add_parser("inspect", help="activation stats and heatmap for a clean model")
    p.add_argument("--checkpoint", required=True)
    _add_task_flags(p)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--outdir", required=True)

    p = sub.add_parser("perturb", help="run a sensitivity protocol end to end")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--p-values", type=float, nargs="+", help="override p grid")
    p.add_argument("--seeds", type=int, nargs="+", help="override seed list")
    p.add_argument("--outdir", help="override output directory")

    p = sub.add_parser("compress", help="compress a raw little-endian f64 file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--error-bound", type=float, required=True)

    p = sub.add_parser("decompress", help="reconstruct a raw f64 file from .melc")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("offload-report", help="per-expert fetch-latency table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fraction", type=float, default=0.5,
                   help="error bound as a fraction of each expert's mean |param|")
    p.add_argument("--pcie", type=float, default=32e9)
    p.add_argument("--decompress-throughput", type=float, default=64e9)
    p.add_argument("--overlap", action="store_true")
    p.add_argument("--out", required=True, help="CSV output path")
    return parser


def _cmd_train(args) -> int:
    from .model import ModelConfig, save_model
    from .tasks import TaskSpec, export_jsonl, generate_dataset
    from .training import TrainConfig, train

    spec = TaskSpec(kind=args.task_kind, param=args.task_param, seed=args.task_seed)
    data = generate_dataset(spec, args.samples, split="train")
    tc = TrainConfig(
        steps=args.steps, learning_rate=args.lr, batch_size=args.batch_size,
        seed=args.seed, target_accuracy=args.target,
    )
    result = train(ModelConfig(), data, tc)
    save_model(result.model, args.out)
    if args.export_dataset:
        export_jsonl(data, args.export_dataset)
    status = "reached" if result.reached_target else "MISSED"
    print(
        f"trained {result.steps_run} steps, final loss {result.final_loss:.4f}, "
        f"holdout exact-match {result.holdout_accuracy:.3f} ({status} target "
        f"{tc.target_accuracy})"
    )
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    from .activation_stats import ActivationLog, export_heatmap, metrics_summary
    from .experiment import evaluate_model
    from .model import load_model
    from .tasks import TaskSpec, generate_dataset

    model = load_model(args.checkpoint)
    spec = TaskSpec(kind=args.task_kind, param=args.task_param, seed=args.task_seed)
    eval_set = generate_dataset(spec, args.samples, split="eval")
    log = ActivationLog.empty(model.config.num_layers, model.config.num_experts)
    _, outcome, degenerate = evaluate_model(model, eval_set, recorder=log)

    os.makedirs(args.outdir, exist_ok=True)
    export_heatmap(log, os.path.join(args.outdir, "heatmap.csv"))
    summary = metrics_summary(log)
    with open(os.path.join(args.outdir, "metrics.json"), "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"ica={outcome.ica:.4f} pia={outcome.pia:.4f} degenerate={degenerate}")
    for layer, metrics in summary["layers"].items():
        if metrics is None:
            print(f"layer {layer}: no activations")
        else:
            print(
                f"layer {layer}: utilization={metrics['utilization']:.3f} "
                f"entropy={metrics['entropy']:.3f} gini={metrics['gini']:.3f} "
                f"imbalance={metrics['imbalance']:.3f}"
            )
    return EXIT_OK


def _cmd_perturb(args) -> int:
    from .experiment import ExperimentConfig, emit_report, run_experiment

    raw = json.loads(open(args.config).read())
    if args.p_values is not None:
        raw["p_values"] = args.p_values
    if args.seeds is not None:
        raw["seeds"] = args.seeds
    if args.outdir is not None:
        raw["output_dir"] = args.outdir
    config = ExperimentConfig.from_dict(raw)
    result = run_experiment(config)
    paths = emit_report(result, config.output_dir, config.transfer)
    base = result.report.payload["baseline"]
    print(f"baseline ica={base['ica']:.4f} pia={base['pia']:.4f}")
    for cell in result.report.payload["cells"]:
        tag = " DEGENERATE" if cell["degenerate"] else ""
        print(
            f"p={cell['p']} seed={cell['seed']}: ica={cell['ica']:.4f} "
            f"pia={cell['pia']:.4f}{tag}"
        )
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_compress(args) -> int:
    from .codec import compress_eb, ratio, write_melc

    data = np.fromfile(args.input, dtype="<f8")
    block = compress_eb(data, args.error_bound)
    write_melc(args.output, block)
    print(
        f"{data.size} values -> {block.nbytes} bytes "
        f"(ratio {ratio(block, data):.2f}) at bound {args.error_bound}"
    )
    return EXIT_OK


def _cmd_decompress(args) -> int:
    from .codec import decompress_eb, read_melc

    block = read_melc(args.input)
    values = decompress_eb(block)
    values.astype("<f8").tofile(args.output)
    print(f"reconstructed {values.size} values to {args.output}")
    return EXIT_OK


def _cmd_offload_report(args) -> int:
    from .codec import compress_eb, ratio
    from .model import ExpertId, load_model
    from .offload import TransferParams, speedup_report, write_speedup_csv
    from .perturb import compute_error_bound

    model = load_model(args.checkpoint)
    params = TransferParams(
        pcie_bandwidth=args.pcie,
        decompress_throughput=args.decompress_throughput,
        overlap=args.overlap,
    )
    sizes = {}
    ratios = {}
    for li in range(model.config.num_layers):
        for ei in range(model.config.num_experts):
            ew = model.expert(ExpertId(li, ei))
            bound = compute_error_bound(ew, args.fraction)
            flat = ew.flat()
            sizes[(li, ei)] = flat.size * 8
            if bound > 0:
                ratios[(li, ei)] = max(1.0, ratio(compress_eb(flat, bound), flat))
            else:
                ratios[(li, ei)] = 1.0
    rows = speedup_report(sizes, ratios, params)
    write_speedup_csv(rows, args.out)
    mean_speedup = sum(r.speedup for r in rows) / len(rows)
    print(f"wrote {args.out} ({len(rows)} experts, mean speedup {mean_speedup:.2f}x)")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "inspect": _cmd_inspect,
    "perturb": _cmd_perturb,
    "compress": _cmd_compress,
    "decompress": _cmd_decompress,
    "offload-report": _cmd_offload_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from .experiment import ConfigError
    from .perturb import ProtocolError
    from .tasks import TaskConfigError

    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ProtocolError, TaskConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
