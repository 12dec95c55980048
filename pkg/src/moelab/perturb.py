"""Bounded-error injection into expert parameters.

The error scale for an expert is ``bound = fraction * mean(|theta|)``: a
chosen percentage of the expert's mean absolute parameter magnitude.
Injected errors are zero-mean normal draws with standard deviation equal to
that bound (optionally clamped to [-bound, +bound], which is what a hard
error-bounded codec would guarantee). Errors are sampled once per
experiment and frozen into a perturbed copy of the model; they are never
resampled per token.

Targeting strategies select which experts receive errors, either directly
by id or by activation frequency measured on a clean run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .activation_stats import ActivationLog
from .core import RngStream
from .model import ExpertId, ExpertWeights, MoEModel, expert_init_sigmas


class ProtocolError(ValueError):
    """A targeting strategy cannot be resolved (e.g. empty activation log)."""


@dataclass(frozen=True)
class ErrorSpec:
    """How much error to inject and how: fraction of mean |param|, normal
    draws, optional hard clamp, and the master seed for sampling."""

    fraction: float
    distribution: str = "normal"
    clamp_to_bound: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.fraction < 0:
            raise ValueError("fraction must be >= 0")
        if self.distribution != "normal":
            raise ValueError(f"unsupported distribution {self.distribution!r}")

    def to_dict(self) -> dict:
        return {
            "fraction": self.fraction, "distribution": self.distribution,
            "clamp_to_bound": self.clamp_to_bound, "seed": self.seed,
        }


@dataclass(frozen=True)
class SingleExpert:
    target: ExpertId


@dataclass(frozen=True)
class HighestFrequent:
    layer: int


@dataclass(frozen=True)
class TopKFrequent:
    layer: int
    count: int


@dataclass(frozen=True)
class AllInLayer:
    layer: int


@dataclass(frozen=True)
class GroupedHighestFrequent:
    """One pick per (start, end) inclusive layer range: the single most
    activated (layer, expert) pair inside the range. Ranges may overlap."""

    ranges: tuple


@dataclass(frozen=True)
class RandomizeExpert:
    target: ExpertId


TargetStrategy = Union[
    SingleExpert, HighestFrequent, TopKFrequent, AllInLayer,
    GroupedHighestFrequent, RandomizeExpert,
]

#: Overlapping three-window preset for 26-layer models (10 layers per
#: window, the last anchored to the deepest layer), zero-based inclusive.
PRESET_26_LAYER_GROUPS = ((0, 9), (8, 17), (16, 25))


def _check_layer(layer: int, log: ActivationLog) -> None:
    if not (0 <= layer < log.num_layers):
        raise ProtocolError(f"layer {layer} out of range [0, {log.num_layers})")


def _require_counts(log: ActivationLog) -> None:
    if log.tokens_processed == 0 or log.counts.sum() == 0:
        raise ProtocolError("activation log is empty; run a profiling pass first")


def _argmax_low_tie(row: np.ndarray) -> int:
    return int(np.argmax(row))  # np.argmax returns the first (lowest) max index


def select_targets(strategy: TargetStrategy, log: ActivationLog) -> tuple:
    """Resolve a strategy to a sorted tuple of unique ExpertIds.

    Frequency ties break toward the lower expert index (and lower layer for
    grouped ranges).
    """
    if isinstance(strategy, (SingleExpert, RandomizeExpert)):
        t = strategy.target
        if not (0 <= t.layer < log.num_layers and 0 <= t.expert < log.num_experts):
            raise ProtocolError(f"target {t} out of range for the log grid")
        return (t,)
    if isinstance(strategy, HighestFrequent):
        _check_layer(strategy.layer, log)
        _require_counts(log)
        return (ExpertId(strategy.layer, _argmax_low_tie(log.counts[strategy.layer])),)
    if isinstance(strategy, TopKFrequent):
        _check_layer(strategy.layer, log)
        _require_counts(log)
        if not (1 <= strategy.count <= log.num_experts):
            raise ProtocolError(f"top count {strategy.count} out of range")
        row = log.counts[strategy.layer]
        order = np.lexsort((np.arange(row.size), -row))[: strategy.count]
        return tuple(sorted(ExpertId(strategy.layer, int(e)) for e in order))
    if isinstance(strategy, AllInLayer):
        _check_layer(strategy.layer, log)
        return tuple(ExpertId(strategy.layer, e) for e in range(log.num_experts))
    if isinstance(strategy, GroupedHighestFrequent):
        _require_counts(log)
        picks = set()
        if not strategy.ranges:
            raise ProtocolError("grouped strategy needs at least one layer range")
        for lo, hi in strategy.ranges:
            if not (0 <= lo <= hi < log.num_layers):
                raise ProtocolError(f"layer range ({lo}, {hi}) out of range")
            window = log.counts[lo:hi + 1]
            flat = int(np.argmax(window))  # row-major: lower layer, then lower expert
            layer, expert = divmod(flat, log.num_experts)
            picks.add(ExpertId(lo + layer, expert))
        return tuple(sorted(picks))
    raise TypeError(f"unknown strategy {strategy!r}")


def compute_error_bound(expert: ExpertWeights, fraction: float) -> float:
    """fraction times the expert's mean absolute parameter value."""
    if fraction < 0:
        raise ValueError("fraction must be >= 0")
    flat = expert.flat()
    if flat.size == 0:
        raise ValueError("expert has no parameters")
    return float(fraction * np.abs(flat).sum() / flat.size)


@dataclass(frozen=True)
class PerturbationPlan:
    """Resolved targets with their per-expert error bounds."""

    targets: tuple            # sorted unique ExpertIds
    spec: ErrorSpec
    bounds: tuple             # per-target bound, same order as targets

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "targets": [
                {"layer": t.layer, "expert": t.expert, "error_bound": b}
                for t, b in zip(self.targets, self.bounds)
            ],
        }


def build_plan(model: MoEModel, targets, spec: ErrorSpec) -> PerturbationPlan:
    """Resolve per-expert bounds for an explicit target collection."""
    unique = tuple(sorted(set(t.check(model.config) for t in targets)))
    bounds = tuple(
        compute_error_bound(model.expert(t), spec.fraction) for t in unique
    )
    return PerturbationPlan(targets=unique, spec=spec, bounds=bounds)


def _bounded_add(base: np.ndarray, noise: np.ndarray, bound: float) -> np.ndarray:
    """base + noise with the *measured* |result - base| forced within bound.

    Clipping the noise is not quite enough: the addition itself can round
    the result a final ulp past the bound. Violating entries get their noise
    nudged toward zero until the realized delta complies.
    """
    noise = np.clip(noise, -bound, bound)
    out = base + noise
    bad = np.abs(out - base) > bound
    while np.any(bad):
        noise = np.where(bad, np.nextafter(noise, 0.0), noise)
        out = np.where(bad, base + noise, out)
        bad = np.abs(out - base) > bound
    return out


def inject_errors(model: MoEModel, plan: PerturbationPlan) -> MoEModel:
    """Perturbed copy of the model; untargeted parameters are untouched.

    Each targeted expert draws its errors from a child stream keyed by
    (seed, layer, expert), so splitting a plan into sub-plans perturbs the
    same experts with the same values as the union plan.
    """
    out = model.copy()
    root = RngStream(plan.spec.seed)
    for target, bound in zip(plan.targets, plan.bounds):
        target.check(model.config)
        if bound == 0.0:
            continue
        ew = out.layers[target.layer].experts[target.expert]
        stream = root.child("inject", target.layer, target.expert)
        noise = stream.normal(bound, ew.param_count)
        n_in = ew.w_in.size
        noise_in = noise[:n_in].reshape(ew.w_in.shape)
        noise_out = noise[n_in:].reshape(ew.w_out.shape)
        if plan.spec.clamp_to_bound:
            ew.w_in = _bounded_add(ew.w_in, noise_in, bound)
            ew.w_out = _bounded_add(ew.w_out, noise_out, bound)
        else:
            ew.w_in += noise_in
            ew.w_out += noise_out
    return out


def randomize_expert(model: MoEModel, target: ExpertId, seed: int) -> MoEModel:
    """Replace one expert's parameters with fresh init-scale draws."""
    target.check(model.config)
    out = model.copy()
    in_sigma, out_sigma = expert_init_sigmas(model.config)
    stream = RngStream(seed).child("randomize", target.layer, target.expert)
    ew = out.layers[target.layer].experts[target.expert]
    ew.w_in = stream.normal(in_sigma, ew.w_in.size).reshape(ew.w_in.shape)
    ew.w_out = stream.normal(out_sigma, ew.w_out.size).reshape(ew.w_out.shape)
    return out
