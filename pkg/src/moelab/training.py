"""Gradient-descent trainer for the MoE transformer.

Plain SGD on token-level cross-entropy over the gold continuation, with full
backpropagation through attention, layer norms, the router softmax and the
expert FFNs. The discrete top-k selection is treated as a constant within a
step: gradients flow through the renormalized weights of the selected
experts only (straight-through on the selection).

The same fused forward serves three callers: training (with backward),
loss-only evaluation for finite-difference checks (optionally with the
routing frozen to a recorded selection, which is exactly the function whose
gradient the analytic pass computes), and holdout accuracy via the model's
own decode path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, matmul, softmax
from .model import (
    ModelConfig, MoEModel, greedy_decode, init_model, route_topk, _LN_EPS,
)
from .tasks import Dataset, Sample

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_GELU_CUBIC = 0.044715


class TrainingError(RuntimeError):
    """Training diverged; carries the step index in the message."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    learning_rate: float = 0.5
    batch_size: int = 16
    seed: int = 0
    target_accuracy: float = 0.99
    eval_every: int = 250
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if not (0 < self.holdout_fraction < 1):
            raise ValueError("holdout fraction must lie in (0, 1)")
        if not (0 < self.target_accuracy <= 1):
            raise ValueError("target accuracy must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "learning_rate": self.learning_rate,
            "batch_size": self.batch_size, "seed": self.seed,
            "target_accuracy": self.target_accuracy, "eval_every": self.eval_every,
            "holdout_fraction": self.holdout_fraction,
        }


@dataclass
class TrainResult:
    model: MoEModel
    steps_run: int
    final_loss: float
    holdout_accuracy: float
    reached_target: bool
    loss_history: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)


def _gelu_parts(z):
    u = _SQRT_2_OVER_PI * (z + _GELU_CUBIC * z ** 3)
    t = np.tanh(u)
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * z ** 2)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du


def _ln_forward(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    x_hat = centered * inv_std
    return x_hat * gain + bias, x_hat, inv_std


def _ln_backward(dy, x_hat, inv_std, gain):
    dgain = (dy * x_hat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dx_hat = dy * gain
    m1 = dx_hat.mean(axis=-1, keepdims=True)
    m2 = (dx_hat * x_hat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dx_hat - m1 - x_hat * m2)
    return dx, dgain, dbias


def zero_grads(model: MoEModel) -> dict:
    return {name: np.zeros_like(arr) for name, arr in model.named_tensors()}


def _forward_sequence(model: MoEModel, inputs: np.ndarray, forced_routing=None):
    """Fused forward over one input sequence; returns (logits, cache).

    ``forced_routing[layer][token]`` overrides the top-k selection when
    given; weights are still the softmax over the (forced) selected logits.
    The cache holds every intermediate the backward pass needs, including
    the grouped expert activations.
    """
    config = model.config
    t = inputs.size
    x = model.embedding[inputs] + model.pos_embedding[:t]
    cache = {"inputs": inputs, "layers": []}
    for li, layer in enumerate(model.layers):
        lc = {"x_in": x}
        h1, xh1, inv1 = _ln_forward(x, layer.ln1_gain, layer.ln1_bias)
        lc.update(h1=h1, xh1=xh1, inv1=inv1)
        q = matmul(h1, layer.wq)
        k = matmul(h1, layer.wk)
        v = matmul(h1, layer.wv)
        scores = matmul(q, k.T) / np.sqrt(config.d_model)
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
        probs = softmax(scores, axis=-1)
        ctx = matmul(probs, v)
        x = x + matmul(ctx, layer.wo)
        lc.update(q=q, k=k, v=v, probs=probs, ctx=ctx, x_mid=x)

        h2, xh2, inv2 = _ln_forward(x, layer.ln2_gain, layer.ln2_bias)
        lc.update(h2=h2, xh2=xh2, inv2=inv2)

        logits_r = matmul(h2, layer.router)
        sel_idx = np.empty((t, config.top_k), dtype=np.int64)
        sel_w = np.empty((t, config.top_k))
        for ti in range(t):
            if forced_routing is not None:
                idx = forced_routing[li][ti]
                weights = softmax(logits_r[ti][idx])
            else:
                idx, weights = route_topk(logits_r[ti], config.top_k)
            sel_idx[ti] = idx
            sel_w[ti] = weights

        # group token slots by expert so each expert runs one batched FFN
        groups = {}
        for ti in range(t):
            for slot in range(config.top_k):
                groups.setdefault(int(sel_idx[ti, slot]), []).append((ti, slot))
        slot_outputs = np.empty((t, config.top_k, config.d_model))
        expert_cache = {}
        for ei in sorted(groups):
            pairs = groups[ei]
            rows = np.array([p[0] for p in pairs], dtype=np.int64)
            slots = np.array([p[1] for p in pairs], dtype=np.int64)
            ew = layer.experts[ei]
            z = matmul(h2[rows], ew.w_in)
            a, tanh_u = _gelu_parts(z)
            o = matmul(a, ew.w_out)
            slot_outputs[rows, slots] = o
            expert_cache[ei] = {"rows": rows, "slots": slots, "z": z, "a": a,
                                "tanh_u": tanh_u, "o": o}
        moe_out = np.einsum("tk,tkd->td", sel_w, slot_outputs)
        if layer.shared_expert is not None:
            zs = matmul(h2, layer.shared_expert.w_in)
            a_s, tanh_s = _gelu_parts(zs)
            moe_out = moe_out + matmul(a_s, layer.shared_expert.w_out)
            lc.update(zs=zs, a_s=a_s, tanh_s=tanh_s)
        x = x + moe_out
        lc.update(logits_r=logits_r, sel_idx=sel_idx, sel_w=sel_w,
                  slot_outputs=slot_outputs, expert_cache=expert_cache)
        cache["layers"].append(lc)
    xf, xhf, invf = _ln_forward(x, model.ln_f_gain, model.ln_f_bias)
    cache.update(xf=xf, xhf=xhf, invf=invf)
    logits = matmul(xf, model.head)
    return logits, cache


def _sequence_ce(logits, targets, mask_from):
    """(sum of CE over masked positions, masked count, dlogits-without-scale)."""
    t = logits.shape[0]
    m = logits.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    positions = np.arange(mask_from, t)
    ce = lse[positions] - logits[positions, targets[positions]]
    dlogits = np.zeros_like(logits)
    p = np.exp(logits[positions] - m[positions]) / np.exp(lse[positions] - m[positions, 0])[:, None]
    dlogits[positions] = p
    dlogits[positions, targets[positions]] -= 1.0
    return float(ce.sum()), positions.size, dlogits


def _backward_sequence(model: MoEModel, cache, dlogits, grads) -> None:
    """Accumulate parameter gradients for one sequence into ``grads``."""
    config = model.config
    inputs = cache["inputs"]
    t = inputs.size

    grads["head"] += matmul(cache["xf"].T, dlogits)
    dxf = matmul(dlogits, model.head.T)
    dx, dg, db = _ln_backward(dxf, cache["xhf"], cache["invf"], model.ln_f_gain)
    grads["ln_f_gain"] += dg
    grads["ln_f_bias"] += db

    for li in range(config.num_layers - 1, -1, -1):
        layer = model.layers[li]
        lc = cache["layers"][li]
        prefix = f"layer{li}"

        # x_out = x_mid + moe_out(ln2(x_mid))
        dmoe = dx
        dh2 = np.zeros_like(lc["h2"])

        if layer.shared_expert is not None:
            do_s = dmoe
            grads[f"{prefix}.shared.w_out"] += matmul(lc["a_s"].T, do_s)
            da = matmul(do_s, layer.shared_expert.w_out.T)
            dz = da * _gelu_grad(lc["zs"], lc["tanh_s"])
            grads[f"{prefix}.shared.w_in"] += matmul(lc["h2"].T, dz)
            dh2 += matmul(dz, layer.shared_expert.w_in.T)

        sel_idx, sel_w = lc["sel_idx"], lc["sel_w"]
        slot_grad_scale = np.empty_like(sel_w)  # s_{t,slot} = dmoe_t . o_{t,slot}
        for ei, ec in lc["expert_cache"].items():
            rows, slots = ec["rows"], ec["slots"]
            w_rows = sel_w[rows, slots]
            do = w_rows[:, None] * dmoe[rows]
            grads[f"{prefix}.expert{ei}.w_out"] += matmul(ec["a"].T, do)
            da = matmul(do, layer.experts[ei].w_out.T)
            dz = da * _gelu_grad(ec["z"], ec["tanh_u"])
            grads[f"{prefix}.expert{ei}.w_in"] += matmul(lc["h2"][rows].T, dz)
            np.add.at(dh2, rows, matmul(dz, layer.experts[ei].w_in.T))
            slot_grad_scale[rows, slots] = np.einsum("rd,rd->r", dmoe[rows], ec["o"])

        # softmax-over-selected-logits backward, scattered into full width
        sdotw = (slot_grad_scale * sel_w).sum(axis=1, keepdims=True)
        dsel_logits = sel_w * (slot_grad_scale - sdotw)
        dlogits_r = np.zeros((t, config.num_experts))
        np.put_along_axis(dlogits_r, sel_idx, dsel_logits, axis=1)
        grads[f"{prefix}.router"] += matmul(lc["h2"].T, dlogits_r)
        dh2 += matmul(dlogits_r, layer.router.T)

        dx_mid, dg2, db2 = _ln_backward(dh2, lc["xh2"], lc["inv2"], layer.ln2_gain)
        grads[f"{prefix}.ln2_gain"] += dg2
        grads[f"{prefix}.ln2_bias"] += db2
        dx_mid = dx_mid + dmoe  # residual branch

        # x_mid = x_in + (probs @ v) @ wo
        d_attn = dx_mid
        grads[f"{prefix}.wo"] += matmul(lc["ctx"].T, d_attn)
        dctx = matmul(d_attn, layer.wo.T)
        dprobs = matmul(dctx, lc["v"].T)
        dv = matmul(lc["probs"].T, dctx)
        row_dot = (dprobs * lc["probs"]).sum(axis=-1, keepdims=True)
        dscores = lc["probs"] * (dprobs - row_dot)
        scale = 1.0 / np.sqrt(config.d_model)
        dq = matmul(dscores, lc["k"]) * scale
        dk = matmul(dscores.T, lc["q"]) * scale
        grads[f"{prefix}.wq"] += matmul(lc["h1"].T, dq)
        grads[f"{prefix}.wk"] += matmul(lc["h1"].T, dk)
        grads[f"{prefix}.wv"] += matmul(lc["h1"].T, dv)
        dh1 = matmul(dq, layer.wq.T) + matmul(dk, layer.wk.T) + matmul(dv, layer.wv.T)
        dx_in, dg1, db1 = _ln_backward(dh1, lc["xh1"], lc["inv1"], layer.ln1_gain)
        grads[f"{prefix}.ln1_gain"] += dg1
        grads[f"{prefix}.ln1_bias"] += db1
        dx = dx_in + dx_mid  # residual branch

    np.add.at(grads["embedding"], inputs, dx)
    grads["pos_embedding"][:t] += dx


def _sample_tokens(sample: Sample):
    """(inputs, targets, first masked position) for next-token training."""
    seq = np.concatenate([sample.prompt, sample.gold])
    return seq[:-1], seq[1:], sample.prompt.size - 1


def batch_loss_and_grads(model: MoEModel, samples, forced_routing=None):
    """Mean masked cross-entropy over the batch plus parameter gradients.

    Returns (loss, grads, routing) where routing[seq][layer][token] records
    the selection actually used (feed it back as ``forced_routing`` to
    evaluate the straight-through loss the gradients belong to).
    """
    total_count = sum(s.gold.size for s in samples)
    grads = zero_grads(model)
    loss_sum = 0.0
    routing = []
    for si, sample in enumerate(samples):
        inputs, targets, mask_from = _sample_tokens(sample)
        forced = forced_routing[si] if forced_routing is not None else None
        logits, cache = _forward_sequence(model, inputs, forced_routing=forced)
        ce, _, dlogits = _sequence_ce(logits, targets, mask_from)
        loss_sum += ce
        _backward_sequence(model, cache, dlogits / total_count, grads)
        routing.append([lc["sel_idx"] for lc in cache["layers"]])
    return loss_sum / total_count, grads, routing


def batch_loss(model: MoEModel, samples, forced_routing=None) -> float:
    """Loss only (used by finite-difference checks)."""
    total_count = sum(s.gold.size for s in samples)
    loss_sum = 0.0
    for si, sample in enumerate(samples):
        inputs, targets, mask_from = _sample_tokens(sample)
        forced = forced_routing[si] if forced_routing is not None else None
        logits, _ = _forward_sequence(model, inputs, forced_routing=forced)
        ce, _, _ = _sequence_ce(logits, targets, mask_from)
        loss_sum += ce
    return loss_sum / total_count


def holdout_exact_match(model: MoEModel, samples, close_tag: int) -> float:
    """Fraction of samples whose greedy continuation equals gold exactly."""
    hits = 0
    for sample in samples:
        gen = greedy_decode(
            model, sample.prompt, max_new=sample.gold.size, eos_token_id=close_tag
        )
        hits += int(np.array_equal(gen, sample.gold))
    return hits / len(samples)


def train(config: ModelConfig, data: Dataset, tc: TrainConfig) -> TrainResult:
    """SGD until the holdout target is reached or the step budget runs out.

    Fully deterministic: the same (config, data, tc) always yields the same
    final checkpoint bit for bit.
    """
    if len(data) == 0:
        raise ValueError("training data must be non-empty")
    model = init_model(config, tc.seed)
    n_hold = max(1, int(round(tc.holdout_fraction * len(data))))
    if n_hold >= len(data):
        raise ValueError("holdout split leaves no training data")
    holdout = data.samples[:n_hold]
    train_samples = data.samples[n_hold:]
    close_tag = data.spec.close_tag

    batch_rng = RngStream(tc.seed).child("batches")
    loss_history = []
    eval_history = []
    loss = float("nan")
    accuracy = 0.0
    reached = False
    steps_run = 0
    for step in range(tc.steps):
        picks = batch_rng.integers(0, len(train_samples), tc.batch_size)
        batch = [train_samples[i] for i in picks]
        try:
            loss, grads, _ = batch_loss_and_grads(model, batch)
        except ValueError as exc:
            # params were finite going in, so a finiteness failure inside the
            # forward means the step scale blew the computation up
            raise TrainingError(f"forward overflowed at step {step}: {exc}") from exc
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        for name, arr in model.named_tensors():
            arr -= tc.learning_rate * grads[name]
            if not np.all(np.isfinite(arr)):
                raise TrainingError(
                    f"parameters diverged (non-finite {name}) at step {step}"
                )
        steps_run = step + 1
        loss_history.append((step, loss))
        if steps_run % tc.eval_every == 0 or steps_run == tc.steps:
            accuracy = holdout_exact_match(model, holdout, close_tag)
            eval_history.append((steps_run, accuracy))
            if accuracy >= tc.target_accuracy:
                reached = True
                break
    if not reached:
        accuracy = holdout_exact_match(model, holdout, close_tag)
        reached = accuracy >= tc.target_accuracy
    return TrainResult(
        model=model,
        steps_run=steps_run,
        final_loss=loss,
        holdout_accuracy=accuracy,
        reached_target=reached,
        loss_history=loss_history,
        eval_history=eval_history,
    )


def gradient_check(model: MoEModel, samples, step: float = 1e-5) -> float:
    """Max relative discrepancy between analytic and central FD gradients.

    The FD loss is evaluated with the routing frozen to the selection the
    analytic pass used, which is exactly the function the analytic gradient
    differentiates. Expert tensors never selected in the batch are skipped
    (their gradient is identically zero on both sides). The discrepancy is
    |a - b| / max(|a|, |b|, 1e-3): relative for the gradients that matter,
    absolute at 1e-8 resolution for near-zero ones.
    """
    _, grads, routing = batch_loss_and_grads(model, samples)

    active: set = set()
    for seq_routing in routing:
        for li, sel in enumerate(seq_routing):
            for ei in np.unique(sel):
                active.add((li, int(ei)))

    def fd_loss():
        return batch_loss(model, samples, forced_routing=routing)

    worst = 0.0
    for name, arr in model.named_tensors():
        if ".expert" in name:
            li = int(name.split(".")[0][len("layer"):])
            ei = int(name.split(".")[1][len("expert"):])
            if (li, ei) not in active:
                continue
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = fd_loss()
            flat[i] = keep - step
            down = fd_loss()
            flat[i] = keep
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(gflat[i]), 1e-3)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst
