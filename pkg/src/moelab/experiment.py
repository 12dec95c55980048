"""Config-driven sensitivity experiments with machine-readable reports.

Pipeline: obtain a model (checkpoint or fresh training), evaluate the clean
baseline while recording expert activations, resolve the targeting protocol
from that baseline log, then run one perturbed evaluation per (fraction,
seed) cell. The report carries full provenance: config hash, resolved
targets with their error bounds, every seed, and the rng algorithm, so a
report regenerated from its own embedded config is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from .activation_stats import ActivationLog, export_heatmap, metrics_summary
from .codec import compress_eb, ratio
from .core import RNG_ALGORITHM
from .model import ExpertId, ModelConfig, MoEModel, greedy_decode, load_model
from .offload import TransferParams, fetch_latency, transfer_time
from .perturb import (
    AllInLayer, ErrorSpec, GroupedHighestFrequent, HighestFrequent,
    RandomizeExpert, SingleExpert, TopKFrequent,
    build_plan, inject_errors, randomize_expert, select_targets,
)
from .scoring import EvalOutcome, parse_output, score, write_audit_jsonl
from .tasks import Dataset, TaskSpec, format_spec, generate_dataset
from .training import TrainConfig, train

#: Cells where more than this fraction of outputs have no recoverable
#: content are flagged as degenerate ("model down").
DEGENERATE_UNPARSEABLE_FRACTION = 0.9

PROTOCOL_PRESETS = (
    "single-expert", "highest-frequent", "cross-layer", "topk",
    "all-in-layer", "grouped", "randomize",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec
    protocol: str
    protocol_params: dict
    p_values: tuple
    seeds: tuple
    model: ModelConfig = ModelConfig()
    checkpoint: str | None = None
    train: TrainConfig = TrainConfig()
    train_samples: int = 1024
    eval_samples: int = 256
    clamp_to_bound: bool = False
    transfer: TransferParams = TransferParams()
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.protocol not in PROTOCOL_PRESETS:
            raise ConfigError(
                f"unknown protocol {self.protocol!r}; pick from {PROTOCOL_PRESETS}"
            )
        if len(self.seeds) < 1:
            raise ConfigError("need at least one seed")
        if self.protocol != "randomize":
            if len(self.p_values) < 1:
                raise ConfigError("need at least one p value")
            for p in self.p_values:
                if p < 0:
                    raise ConfigError(f"p values must be >= 0, got {p}")
        if self.eval_samples < 1 or self.train_samples < 2:
            raise ConfigError("sample counts out of range")

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "protocol": self.protocol,
            "protocol_params": dict(sorted(self.protocol_params.items())),
            "p_values": list(self.p_values),
            "seeds": list(self.seeds),
            "model": self.model.to_dict(),
            "checkpoint": self.checkpoint,
            "train": self.train.to_dict(),
            "train_samples": self.train_samples,
            "eval_samples": self.eval_samples,
            "clamp_to_bound": self.clamp_to_bound,
            "transfer": {
                "pcie_bandwidth": self.transfer.pcie_bandwidth,
                "gpu_mem_bandwidth": self.transfer.gpu_mem_bandwidth,
                "decompress_throughput": self.transfer.decompress_throughput,
                "overlap": self.transfer.overlap,
            },
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            task = TaskSpec(**raw["task"])
            model = ModelConfig(**raw.get("model", {}))
            train_cfg = TrainConfig(**raw.get("train", {}))
            transfer = TransferParams(**raw.get("transfer", {}))
            return cls(
                task=task,
                protocol=raw["protocol"],
                protocol_params=dict(raw.get("protocol_params", {})),
                p_values=tuple(raw.get("p_values", ())),
                seeds=tuple(raw.get("seeds", range(10))),
                model=model,
                checkpoint=raw.get("checkpoint"),
                train=train_cfg,
                train_samples=int(raw.get("train_samples", 1024)),
                eval_samples=int(raw.get("eval_samples", 256)),
                clamp_to_bound=bool(raw.get("clamp_to_bound", False)),
                transfer=transfer,
                output_dir=raw.get("output_dir", "runs/experiment"),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field: {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def resolve_protocol(config: ExperimentConfig):
    """Map a preset name plus params to a concrete targeting strategy."""
    params = config.protocol_params
    name = config.protocol
    try:
        if name == "single-expert":
            return SingleExpert(ExpertId(int(params.get("layer", 0)),
                                         int(params.get("expert", 0))))
        if name == "highest-frequent":
            return HighestFrequent(int(params["layer"]))
        if name == "cross-layer":
            layers = [int(l) for l in params["layers"]]
            return GroupedHighestFrequent(tuple((l, l) for l in layers))
        if name == "topk":
            return TopKFrequent(int(params["layer"]), int(params["count"]))
        if name == "all-in-layer":
            return AllInLayer(int(params["layer"]))
        if name == "grouped":
            raw_ranges = params["ranges"]
            if raw_ranges == "26-layer-preset":
                from .perturb import PRESET_26_LAYER_GROUPS
                return GroupedHighestFrequent(PRESET_26_LAYER_GROUPS)
            ranges = tuple((int(lo), int(hi)) for lo, hi in raw_ranges)
            return GroupedHighestFrequent(ranges)
        if name == "randomize":
            return RandomizeExpert(ExpertId(int(params.get("layer", 0)),
                                            int(params.get("expert", 0))))
    except KeyError as exc:
        raise ConfigError(f"protocol {name!r} is missing parameter {exc}") from exc
    raise ConfigError(f"unknown protocol {name!r}")


def evaluate_model(
    model: MoEModel,
    dataset: Dataset,
    recorder: ActivationLog | None = None,
):
    """Greedy-decode every prompt and score it; returns (outputs, outcome,
    degenerate flag)."""
    fmt = format_spec(dataset.spec)
    max_new = dataset.max_gold_len() + 2
    outputs = []
    for sample in dataset.samples:
        gen = greedy_decode(
            model, sample.prompt, max_new=max_new,
            recorder=recorder, eos_token_id=dataset.spec.close_tag,
        )
        outputs.append(gen)
    outcome = score(outputs, [s.gold for s in dataset.samples], fmt)
    unparseable = sum(
        1 for out in outputs if parse_output(out, fmt).lenient is None
    )
    degenerate = unparseable > DEGENERATE_UNPARSEABLE_FRACTION * len(outputs)
    return outputs, outcome, degenerate


@dataclass
class Report:
    payload: dict

    def to_json(self) -> str:
        return json.dumps(self.payload, indent=2) + "\n"


def _obtain_model(config: ExperimentConfig):
    if config.checkpoint is not None:
        return load_model(config.checkpoint), None
    data = generate_dataset(config.task, config.train_samples, split="train")
    result = train(config.model, data, config.train)
    return result.model, result


def run_experiment(config: ExperimentConfig) -> "ExperimentResult":
    """Full protocol run; see module docstring for the pipeline."""
    model, train_result = _obtain_model(config)
    eval_set = generate_dataset(config.task, config.eval_samples, split="eval")

    baseline_log = ActivationLog.empty(model.config.num_layers, model.config.num_experts)
    baseline_outputs, baseline, baseline_degenerate = evaluate_model(
        model, eval_set, recorder=baseline_log
    )

    strategy = resolve_protocol(config)
    targets = select_targets(strategy, baseline_log)

    cells = []
    plans = {}
    if config.protocol == "randomize":
        for seed in config.seeds:
            perturbed = randomize_expert(model, targets[0], seed)
            _, outcome, degenerate = evaluate_model(perturbed, eval_set)
            cells.append({
                "p": None, "seed": seed, "ica": outcome.ica, "pia": outcome.pia,
                "degenerate": degenerate,
            })
    else:
        for p in config.p_values:
            for seed in config.seeds:
                spec = ErrorSpec(
                    fraction=p, clamp_to_bound=config.clamp_to_bound, seed=seed
                )
                plan = build_plan(model, targets, spec)
                plans[(p, seed)] = plan
                perturbed = inject_errors(model, plan)
                _, outcome, degenerate = evaluate_model(perturbed, eval_set)
                cells.append({
                    "p": p, "seed": seed, "ica": outcome.ica, "pia": outcome.pia,
                    "degenerate": degenerate,
                })

    # compression summary: each targeted expert at each fraction's bound
    compression = []
    if config.protocol != "randomize":
        for p in config.p_values:
            for target in targets:
                ew = model.expert(target)
                plan = plans[(p, config.seeds[0])]
                bound = plan.bounds[plan.targets.index(target)]
                if bound > 0:
                    block = compress_eb(ew.flat(), bound)
                    achieved = ratio(block, ew.flat())
                    compressed_bytes = block.nbytes
                else:
                    achieved = 1.0
                    compressed_bytes = ew.param_count * 8
                compression.append({
                    "p": p, "layer": target.layer, "expert": target.expert,
                    "error_bound": bound, "raw_bytes": ew.param_count * 8,
                    "compressed_bytes": compressed_bytes, "ratio": achieved,
                })

    target_rows = []
    for target in targets:
        ew = model.expert(target)
        mean_abs = float(np.abs(ew.flat()).mean())
        target_rows.append({
            "layer": target.layer, "expert": target.expert,
            "mean_abs_param": mean_abs,
            "bounds_by_p": {str(p): p * mean_abs for p in config.p_values},
        })

    # seed dispersion per p value
    aggregates = []
    grid = sorted({c["p"] for c in cells}, key=lambda p: (p is None, p))
    for p in grid:
        group = [c for c in cells if c["p"] == p]
        icas = np.array([c["ica"] for c in group])
        pias = np.array([c["pia"] for c in group])
        aggregates.append({
            "p": p, "n_seeds": len(group),
            "ica_mean": float(icas.mean()), "ica_std": float(icas.std()),
            "pia_mean": float(pias.mean()), "pia_std": float(pias.std()),
            "degenerate_cells": int(sum(c["degenerate"] for c in group)),
        })

    payload = {
        "schema_version": 1,
        "package_version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "model": {
            "param_count": model.param_count(),
            "source": "checkpoint" if config.checkpoint else "trained",
        },
        "train_info": None if train_result is None else {
            "steps_run": train_result.steps_run,
            "final_loss": train_result.final_loss,
            "holdout_accuracy": train_result.holdout_accuracy,
            "reached_target": train_result.reached_target,
        },
        "baseline": {
            "ica": baseline.ica, "pia": baseline.pia,
            "degenerate": baseline_degenerate,
        },
        "targets": target_rows,
        "cells": cells,
        "aggregates": aggregates,
        "activation": metrics_summary(baseline_log),
        "compression": compression,
    }
    return ExperimentResult(
        report=Report(payload=payload),
        model=model,
        baseline_log=baseline_log,
        targets=targets,
        eval_set=eval_set,
        baseline_outputs=baseline_outputs,
        baseline_outcome=baseline,
    )


@dataclass
class ExperimentResult:
    report: Report
    model: MoEModel
    baseline_log: ActivationLog
    targets: tuple
    eval_set: Dataset
    baseline_outputs: list
    baseline_outcome: EvalOutcome


def emit_report(result: ExperimentResult, out_dir, transfer: TransferParams) -> list:
    """Write report.json, summary.csv, heatmap.csv, compression.csv and the
    baseline per-sample audit trail.

    Deterministic byte-for-byte: re-emitting the same result reproduces
    identical files. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", newline="\n") as fh:
        fh.write(result.report.to_json())
    paths.append(report_path)

    audit_path = os.path.join(out_dir, "baseline_audit.jsonl")
    write_audit_jsonl(
        audit_path,
        [s.prompt for s in result.eval_set.samples],
        result.baseline_outputs,
        [s.gold for s in result.eval_set.samples],
        result.baseline_outcome,
    )
    paths.append(audit_path)

    summary_path = os.path.join(out_dir, "summary.csv")
    payload = result.report.payload
    lines = ["label,p,seed,ica,pia,degenerate"]
    base = payload["baseline"]
    lines.append(f"baseline,,,{base['ica']!r},{base['pia']!r},{int(base['degenerate'])}")
    for cell in payload["cells"]:
        p = "" if cell["p"] is None else repr(cell["p"])
        lines.append(
            f"cell,{p},{cell['seed']},{cell['ica']!r},{cell['pia']!r},"
            f"{int(cell['degenerate'])}"
        )
    with open(summary_path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    paths.append(summary_path)

    heatmap_path = os.path.join(out_dir, "heatmap.csv")
    export_heatmap(result.baseline_log, heatmap_path)
    paths.append(heatmap_path)

    compression_path = os.path.join(out_dir, "compression.csv")
    comp = payload["compression"]
    if comp:
        sizes = {}
        ratios = {}
        for row in comp:
            key = (row["layer"], row["expert"], row["p"])
            sizes[key] = row["raw_bytes"]
            ratios[key] = max(1.0, row["ratio"])
        lines = ["expert,raw_bytes,ratio,t_uncompressed,t_compressed,speedup"]
        for key in sorted(sizes):
            layer, expert, p = key
            raw, r = sizes[key], ratios[key]
            t_unc = transfer_time(raw, transfer.pcie_bandwidth)
            t_cmp = fetch_latency(raw, r, transfer)
            speedup = t_unc / t_cmp
            lines.append(
                f"L{layer}E{expert}@p={p},{raw},{r!r},{t_unc!r},{t_cmp!r},{speedup!r}"
            )
        with open(compression_path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        paths.append(compression_path)
    return paths
