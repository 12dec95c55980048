"""Desk-scale MoE transformer: embedding, single-head causal attention,
top-k routed expert FFN per layer (optional shared expert), KV-cached greedy
decoding, and activation recording hooks.

Pre-layer-norm blocks with residual connections; router weights are the
softmax over the selected logits only, so they always form a convex
combination. Ties anywhere break toward the lower index. Inference is
batch-1 and fully deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .activation_stats import ActivationLog
from .core import RngStream, Tensor, matmul, matvec, softmax

CHECKPOINT_MAGIC = b"MOEM"
CHECKPOINT_VERSION = 1
_LN_EPS = 1e-5


class CapacityError(ValueError):
    """Sequence does not fit the model's maximum length."""


class CheckpointFormatError(ValueError):
    """A checkpoint failed validation; names the offending field."""

    def __init__(self, fieldname: str, message: str):
        self.fieldname = fieldname
        super().__init__(f"bad checkpoint ({fieldname}): {message}")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_experts: int = 8
    top_k: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 32
    max_seq_len: int = 32
    use_shared_expert: bool = False

    def __post_init__(self):
        for name in (
            "num_layers", "num_experts", "top_k", "d_model", "d_ff",
            "vocab_size", "max_seq_len",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.top_k > self.num_experts:
            raise ValueError(
                f"top_k={self.top_k} cannot exceed num_experts={self.num_experts}"
            )

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "use_shared_expert": self.use_shared_expert,
        }


@dataclass(frozen=True, order=True)
class ExpertId:
    layer: int
    expert: int

    def check(self, config: ModelConfig) -> "ExpertId":
        if not (0 <= self.layer < config.num_layers):
            raise ValueError(f"layer {self.layer} out of range [0, {config.num_layers})")
        if not (0 <= self.expert < config.num_experts):
            raise ValueError(f"expert {self.expert} out of range [0, {config.num_experts})")
        return self


@dataclass
class ExpertWeights:
    w_in: Tensor   # [d_model, d_ff]
    w_out: Tensor  # [d_ff, d_model]

    @property
    def param_count(self) -> int:
        return self.w_in.size + self.w_out.size

    def flat(self) -> Tensor:
        """All parameters as one row-major vector: w_in first, then w_out."""
        return np.concatenate([self.w_in.reshape(-1), self.w_out.reshape(-1)])

    def copy(self) -> "ExpertWeights":
        return ExpertWeights(w_in=self.w_in.copy(), w_out=self.w_out.copy())


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    router: Tensor  # [d_model, num_experts]
    experts: list
    shared_expert: ExpertWeights | None = None

    def copy(self) -> "LayerParams":
        return LayerParams(
            ln1_gain=self.ln1_gain.copy(),
            ln1_bias=self.ln1_bias.copy(),
            wq=self.wq.copy(),
            wk=self.wk.copy(),
            wv=self.wv.copy(),
            wo=self.wo.copy(),
            ln2_gain=self.ln2_gain.copy(),
            ln2_bias=self.ln2_bias.copy(),
            router=self.router.copy(),
            experts=[e.copy() for e in self.experts],
            shared_expert=self.shared_expert.copy() if self.shared_expert else None,
        )


@dataclass
class MoEModel:
    config: ModelConfig
    embedding: Tensor      # [vocab, d_model]
    pos_embedding: Tensor  # [max_seq_len, d_model]
    layers: list
    ln_f_gain: Tensor
    ln_f_bias: Tensor
    head: Tensor           # [d_model, vocab]

    def expert(self, eid: ExpertId) -> ExpertWeights:
        eid.check(self.config)
        return self.layers[eid.layer].experts[eid.expert]

    def copy(self) -> "MoEModel":
        return MoEModel(
            config=self.config,
            embedding=self.embedding.copy(),
            pos_embedding=self.pos_embedding.copy(),
            layers=[layer.copy() for layer in self.layers],
            ln_f_gain=self.ln_f_gain.copy(),
            ln_f_bias=self.ln_f_bias.copy(),
            head=self.head.copy(),
        )

    def named_tensors(self):
        """(name, array) pairs in the fixed checkpoint order."""
        yield "embedding", self.embedding
        yield "pos_embedding", self.pos_embedding
        for li, layer in enumerate(self.layers):
            prefix = f"layer{li}"
            yield f"{prefix}.ln1_gain", layer.ln1_gain
            yield f"{prefix}.ln1_bias", layer.ln1_bias
            yield f"{prefix}.wq", layer.wq
            yield f"{prefix}.wk", layer.wk
            yield f"{prefix}.wv", layer.wv
            yield f"{prefix}.wo", layer.wo
            yield f"{prefix}.ln2_gain", layer.ln2_gain
            yield f"{prefix}.ln2_bias", layer.ln2_bias
            yield f"{prefix}.router", layer.router
            for ei, ew in enumerate(layer.experts):
                yield f"{prefix}.expert{ei}.w_in", ew.w_in
                yield f"{prefix}.expert{ei}.w_out", ew.w_out
            if layer.shared_expert is not None:
                yield f"{prefix}.shared.w_in", layer.shared_expert.w_in
                yield f"{prefix}.shared.w_out", layer.shared_expert.w_out
        yield "ln_f_gain", self.ln_f_gain
        yield "ln_f_bias", self.ln_f_bias
        yield "head", self.head

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_tensors())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.named_tensors())


#: Attention starts small and experts start loud so that training routes the
#: per-layer transform through the expert FFNs rather than solving tasks in
#: attention alone; perturbation experiments need experts that carry load.
ATTENTION_INIT_SCALE = 0.5
EXPERT_INIT_SCALE = 2.0


def expert_init_sigmas(config: ModelConfig) -> tuple:
    """(w_in, w_out) init scales; also the randomize-expert replacement scale."""
    return (
        EXPERT_INIT_SCALE * config.d_model ** -0.5,
        EXPERT_INIT_SCALE * config.d_ff ** -0.5,
    )


def init_model(config: ModelConfig, seed: int) -> MoEModel:
    """Fresh model: projections N(0, fan_in^-1/2) with the attention/expert
    rebalance above, embeddings N(0, 1), layer-norm gain 1 / bias 0. Fully
    determined by (config, seed)."""
    root = RngStream(seed).child("init")
    d, ff, e = config.d_model, config.d_ff, config.num_experts
    proj_sigma = d ** -0.5
    attn_sigma = ATTENTION_INIT_SCALE * proj_sigma
    in_sigma, out_sigma = expert_init_sigmas(config)

    def draw(stream, sigma, *shape):
        n = int(np.prod(shape))
        return stream.normal(sigma, n).reshape(shape)

    layers = []
    for li in range(config.num_layers):
        s = root.child("layer", li)
        experts = [
            ExpertWeights(
                w_in=draw(s.child("expert", ei, "in"), in_sigma, d, ff),
                w_out=draw(s.child("expert", ei, "out"), out_sigma, ff, d),
            )
            for ei in range(e)
        ]
        shared = None
        if config.use_shared_expert:
            shared = ExpertWeights(
                w_in=draw(s.child("shared", "in"), in_sigma, d, ff),
                w_out=draw(s.child("shared", "out"), out_sigma, ff, d),
            )
        layers.append(
            LayerParams(
                ln1_gain=np.ones(d),
                ln1_bias=np.zeros(d),
                wq=draw(s.child("wq"), attn_sigma, d, d),
                wk=draw(s.child("wk"), attn_sigma, d, d),
                wv=draw(s.child("wv"), attn_sigma, d, d),
                wo=draw(s.child("wo"), attn_sigma, d, d),
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
                router=draw(s.child("router"), proj_sigma, d, e),
                experts=experts,
                shared_expert=shared,
            )
        )
    return MoEModel(
        config=config,
        embedding=draw(root.child("embedding"), 1.0, config.vocab_size, d),
        pos_embedding=draw(root.child("pos_embedding"), 1.0, config.max_seq_len, d),
        layers=layers,
        ln_f_gain=np.ones(d),
        ln_f_bias=np.zeros(d),
        head=draw(root.child("head"), proj_sigma, d, config.vocab_size),
    )


# --- forward pieces ---------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Row-wise layer norm; works on [T, d] or [d]."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + _LN_EPS) * gain + bias


def gelu(z: Tensor) -> Tensor:
    """tanh-form GELU (smooth, so finite-difference checks are clean)."""
    return 0.5 * z * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (z + 0.044715 * z ** 3)))


def expert_forward(ew: ExpertWeights, hidden: Tensor) -> Tensor:
    """Two-layer FFN: gelu(h @ w_in) @ w_out; accepts [d] or [T, d]."""
    if hidden.ndim == 1:
        return matvec(gelu(matvec(hidden, ew.w_in)), ew.w_out)
    return matmul(gelu(matmul(hidden, ew.w_in)), ew.w_out)


def route_topk(router_logits: Tensor, k: int):
    """Select the k largest logits (ties toward the lower index).

    Returns (indices in descending-logit order, weights = softmax over the
    selected logits only).
    """
    logits = np.asarray(router_logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"router logits must be 1-D, got shape {logits.shape}")
    e = logits.size
    if not (1 <= k <= e):
        raise ValueError(f"top_k={k} out of range for {e} experts")
    if not np.all(np.isfinite(logits)):
        raise ValueError("router logits must be finite")
    # lexsort: primary key -logits (descending), secondary key index (ascending)
    order = np.lexsort((np.arange(e), -logits))
    indices = order[:k]
    weights = softmax(logits[indices])
    return indices, weights


def moe_layer_forward(
    layer: LayerParams,
    hidden: Tensor,
    top_k: int,
    recorder: ActivationLog | None = None,
    layer_index: int = 0,
) -> Tensor:
    """Routed expert mix for a single token vector [d]."""
    logits = matvec(hidden, layer.router)
    indices, weights = route_topk(logits, top_k)
    out = np.zeros_like(hidden)
    for weight, ei in zip(weights, indices):
        out = out + weight * expert_forward(layer.experts[ei], hidden)
    if layer.shared_expert is not None:
        out = out + expert_forward(layer.shared_expert, hidden)
    if recorder is not None:
        recorder.record(layer_index, indices, weights)
    return out


@dataclass
class KvCache:
    """Per-layer preallocated key/value rows for incremental decoding."""

    keys: list    # num_layers arrays [max_seq_len, d_model]
    values: list
    length: int = 0

    @classmethod
    def empty(cls, config: ModelConfig) -> "KvCache":
        shape = (config.max_seq_len, config.d_model)
        return cls(
            keys=[np.zeros(shape) for _ in range(config.num_layers)],
            values=[np.zeros(shape) for _ in range(config.num_layers)],
        )


def _attention_rows(q: Tensor, keys: Tensor, values: Tensor, causal_from: int) -> Tensor:
    """Causal attention for query rows starting at absolute position
    ``causal_from``; keys/values hold all positions up to the query end."""
    d = q.shape[1]
    scores = matmul(q, keys.T) / np.sqrt(d)
    t_q, t_k = scores.shape
    col = np.arange(t_k)[None, :]
    row = (np.arange(t_q) + causal_from)[:, None]
    scores = np.where(col <= row, scores, -np.inf)
    probs = softmax(scores, axis=-1)
    return matmul(probs, values)


def _validate_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    return tokens


def forward_prefill(
    model: MoEModel,
    tokens,
    recorder: ActivationLog | None = None,
    cache: KvCache | None = None,
):
    """Process a whole prompt; returns (logits [T, vocab], populated cache).

    Position t attends to positions <= t only. An empty prompt yields empty
    logits and an empty cache.
    """
    config = model.config
    tokens = _validate_tokens(config, tokens)
    t = tokens.size
    if t > config.max_seq_len:
        raise CapacityError(f"prompt length {t} exceeds max_seq_len {config.max_seq_len}")
    if cache is None:
        cache = KvCache.empty(config)
    if cache.length != 0:
        raise ValueError("prefill requires an empty cache")
    if t == 0:
        return np.zeros((0, config.vocab_size)), cache

    x = model.embedding[tokens] + model.pos_embedding[:t]
    for li, layer in enumerate(model.layers):
        h = layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        q = matmul(h, layer.wq)
        k = matmul(h, layer.wk)
        v = matmul(h, layer.wv)
        cache.keys[li][:t] = k
        cache.values[li][:t] = v
        ctx = _attention_rows(q, k, v, causal_from=0)
        x = x + matmul(ctx, layer.wo)
        h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias)
        moe_out = np.empty_like(h2)
        for ti in range(t):
            moe_out[ti] = moe_layer_forward(
                layer, h2[ti], config.top_k, recorder=recorder, layer_index=li
            )
        x = x + moe_out
    cache.length = t
    if recorder is not None:
        recorder.add_tokens(t)
    xf = layer_norm(x, model.ln_f_gain, model.ln_f_bias)
    return matmul(xf, model.head), cache


def decode_step(
    model: MoEModel,
    cache: KvCache,
    token: int,
    recorder: ActivationLog | None = None,
) -> Tensor:
    """Advance the cache by one token; returns the next-token logits row."""
    config = model.config
    position = cache.length
    if position >= config.max_seq_len:
        raise CapacityError(f"cache is full at max_seq_len {config.max_seq_len}")
    token = int(token)
    if not (0 <= token < config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")

    x = model.embedding[token] + model.pos_embedding[position]
    for li, layer in enumerate(model.layers):
        h = layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        hrow = h[None, :]
        q = matmul(hrow, layer.wq)
        cache.keys[li][position] = matmul(hrow, layer.wk)[0]
        cache.values[li][position] = matmul(hrow, layer.wv)[0]
        ctx = _attention_rows(
            q,
            cache.keys[li][: position + 1],
            cache.values[li][: position + 1],
            causal_from=position,
        )
        x = x + matmul(ctx, layer.wo)[0]
        h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias)
        x = x + moe_layer_forward(layer, h2, config.top_k, recorder=recorder, layer_index=li)
    cache.length = position + 1
    if recorder is not None:
        recorder.add_tokens(1)
    xf = layer_norm(x, model.ln_f_gain, model.ln_f_bias)
    return matvec(xf, model.head)


def greedy_decode(
    model: MoEModel,
    prompt,
    max_new: int,
    recorder: ActivationLog | None = None,
    eos_token_id: int | None = None,
    use_cache: bool = True,
) -> np.ndarray:
    """Greedy continuation of ``prompt``; argmax ties go to the lowest id.

    Stops after max_new tokens or right after emitting eos_token_id (which
    is included in the returned continuation). ``use_cache=False`` recomputes
    the full prefix every step and must produce the same tokens; that
    verification path ignores the recorder.
    """
    config = model.config
    prompt = _validate_tokens(config, prompt)
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    if prompt.size + max_new > config.max_seq_len:
        raise CapacityError(
            f"prompt ({prompt.size}) + max_new ({max_new}) exceeds "
            f"max_seq_len {config.max_seq_len}"
        )
    if max_new == 0:
        return np.zeros(0, dtype=np.int64)
    if prompt.size == 0:
        raise ValueError("cannot decode from an empty prompt")

    generated: list[int] = []
    if use_cache:
        logits, cache = forward_prefill(model, prompt, recorder=recorder)
        last = logits[-1]
        for _ in range(max_new):
            nxt = int(np.argmax(last))
            generated.append(nxt)
            if eos_token_id is not None and nxt == eos_token_id:
                break
            if len(generated) == max_new:
                break
            last = decode_step(model, cache, nxt, recorder=recorder)
    else:
        seq = list(prompt)
        for _ in range(max_new):
            logits, _ = forward_prefill(model, np.asarray(seq, dtype=np.int64))
            nxt = int(np.argmax(logits[-1]))
            generated.append(nxt)
            seq.append(nxt)
            if eos_token_id is not None and nxt == eos_token_id:
                break
    return np.asarray(generated, dtype=np.int64)


# --- checkpoint container ----------------------------------------------------

_CONFIG_STRUCT = struct.Struct("<7IB")


def serialize_model(model: MoEModel) -> bytes:
    """Versioned binary checkpoint; bit-exact round trip guaranteed."""
    c = model.config
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<B", CHECKPOINT_VERSION),
        _CONFIG_STRUCT.pack(
            c.num_layers, c.num_experts, c.top_k, c.d_model, c.d_ff,
            c.vocab_size, c.max_seq_len, int(c.use_shared_expert),
        ),
    ]
    for _, arr in model.named_tensors():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_model(data: bytes) -> MoEModel:
    if len(data) < 4 + 1 + _CONFIG_STRUCT.size:
        raise CheckpointFormatError("header", "truncated header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("magic", f"expected {CHECKPOINT_MAGIC!r}, got {data[:4]!r}")
    version = data[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError("version", f"unsupported version {version}")
    fields = _CONFIG_STRUCT.unpack_from(data, 5)
    try:
        config = ModelConfig(
            num_layers=fields[0], num_experts=fields[1], top_k=fields[2],
            d_model=fields[3], d_ff=fields[4], vocab_size=fields[5],
            max_seq_len=fields[6], use_shared_expert=bool(fields[7]),
        )
    except ValueError as exc:
        raise CheckpointFormatError("config", str(exc)) from exc

    offset = 4 + 1 + _CONFIG_STRUCT.size
    skeleton = init_model(config, seed=0)

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape))
        end = offset + 8 * n
        if end > len(data):
            raise CheckpointFormatError("tensors", "truncated tensor data")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset = end
        return arr.copy()

    for name, arr in skeleton.named_tensors():
        arr[...] = take(arr.shape)
    if offset != len(data):
        raise CheckpointFormatError("tensors", f"{len(data) - offset} trailing bytes")
    return skeleton


def save_model(model: MoEModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> MoEModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
