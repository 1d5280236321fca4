"""Step-level precision router.

A 2-layer post-norm Transformer encoder over step embeddings with learned
absolute positional embeddings, masked self-attention, last-valid-token
pooling and a K-way softmax head. Index 0 is the cheap (low-precision)
policy, index 1 the expensive (high-precision) one.

route() against a params snapshot that nobody is training is safe to call
from many workers at once; training (backward + adam_step) is single-writer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    Matrix,
    ParamTensor,
    ShapeMismatchError,
    as_matrix,
    layer_norm,
    linear_forward,
    masked_attention,
    relu,
    softmax_rows,
)


class EmptySequenceError(ValueError):
    """A StepSequence (or mask) with zero valid steps."""


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 0  # 0 -> 4 * embed_dim
    num_precisions: int = 2
    max_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.embed_dim)
        problems = []
        if self.embed_dim < 1:
            problems.append("embed_dim must be >= 1")
        if self.num_layers < 1:
            problems.append("num_layers must be >= 1")
        if self.num_heads < 1 or self.embed_dim % max(self.num_heads, 1) != 0:
            problems.append("embed_dim must be divisible by num_heads")
        if self.ffn_dim < 1:
            problems.append("ffn_dim must be >= 1")
        if self.num_precisions < 2:
            problems.append("num_precisions must be >= 2")
        if self.max_len < 1:
            problems.append("max_len must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            problems.append("dropout must lie in [0, 1)")
        if problems:
            raise ValueError("invalid RouterConfig: " + "; ".join(problems))


@dataclass
class StepSequence:
    """Ordered step embeddings plus a validity mask (prefix of ones)."""

    embeddings: Matrix  # (t, d)
    mask: np.ndarray    # (t,) of {0, 1}

    def __post_init__(self):
        self.embeddings = as_matrix(self.embeddings)
        self.mask = np.asarray(self.mask, dtype=np.uint8).reshape(-1)
        t = self.embeddings.shape[0]
        if self.mask.shape[0] != t:
            raise ShapeMismatchError("mask length must equal number of rows")
        n = int(self.mask.sum())
        if n == 0:
            raise EmptySequenceError("a StepSequence needs at least one valid step")
        if not (self.mask[:n] == 1).all() or (n < t and self.mask[n:].any()):
            raise ValueError("mask must be a prefix of ones followed by zeros")

    @classmethod
    def of(cls, embeddings) -> "StepSequence":
        emb = as_matrix(embeddings)
        return cls(emb, np.ones(emb.shape[0], dtype=np.uint8))

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


@dataclass
class EncoderLayerParams:
    wq: ParamTensor
    bq: ParamTensor
    wk: ParamTensor
    bk: ParamTensor
    wv: ParamTensor
    bv: ParamTensor
    wo: ParamTensor
    bo: ParamTensor
    ln1_gain: ParamTensor
    ln1_shift: ParamTensor
    w1: ParamTensor
    b1: ParamTensor
    w2: ParamTensor
    b2: ParamTensor
    ln2_gain: ParamTensor
    ln2_shift: ParamTensor


@dataclass
class RouterParams:
    """All learnable parameters, in the order they are serialized."""

    config: RouterConfig
    positional: ParamTensor              # (max_len, d)
    layers: list[EncoderLayerParams] = field(default_factory=list)
    head_weight: ParamTensor = None      # (d, K)
    head_bias: ParamTensor = None        # (1, K)

    @classmethod
    def initialize(cls, config: RouterConfig, seed: int = 0) -> "RouterParams":
        rng = np.random.default_rng(seed)
        d, f, k = config.embed_dim, config.ffn_dim, config.num_precisions

        def lin(rows, cols):
            return ParamTensor.uniform(rows, cols, fan_in=rows, rng=rng)

        def bias(cols, fan_in):
            return ParamTensor.uniform(1, cols, fan_in=fan_in, rng=rng)

        positional = ParamTensor.uniform(config.max_len, d, fan_in=d, rng=rng)
        layers = []
        for _ in range(config.num_layers):
            layers.append(EncoderLayerParams(
                wq=lin(d, d), bq=bias(d, d),
                wk=lin(d, d), bk=bias(d, d),
                wv=lin(d, d), bv=bias(d, d),
                wo=lin(d, d), bo=bias(d, d),
                ln1_gain=ParamTensor.from_value(np.ones((1, d))),
                ln1_shift=ParamTensor.zeros(1, d),
                w1=lin(d, f), b1=bias(f, d),
                w2=lin(f, d), b2=bias(d, f),
                ln2_gain=ParamTensor.from_value(np.ones((1, d))),
                ln2_shift=ParamTensor.zeros(1, d),
            ))
        return cls(
            config=config,
            positional=positional,
            layers=layers,
            head_weight=lin(d, k),
            head_bias=bias(k, d),
        )

    def tensors(self) -> list[tuple[str, ParamTensor]]:
        out = [("positional", self.positional)]
        for i, lp in enumerate(self.layers):
            for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                         "ln1_gain", "ln1_shift", "w1", "b1", "w2", "b2",
                         "ln2_gain", "ln2_shift"):
                out.append((f"layer{i}.{name}", getattr(lp, name)))
        out.append(("head_weight", self.head_weight))
        out.append(("head_bias", self.head_bias))
        return out

    def zero_grads(self) -> None:
        for _, t in self.tensors():
            t.zero_grad()

    def copy(self) -> "RouterParams":
        """Deep copy of values with fresh gradient/optimizer state."""
        fresh = RouterParams.initialize(self.config, seed=0)
        for (_, src), (_, dst) in zip(self.tensors(), fresh.tensors()):
            dst.value[:] = src.value
        return fresh


@dataclass(frozen=True)
class RoutingDistribution:
    probs: np.ndarray  # (K,)
    chosen: int
    mode: str


def truncate_sequence(seq: StepSequence, max_len: int) -> StepSequence:
    """Keep the most recent ``max_len`` valid steps; drop padding if cutting."""
    if seq.length <= max_len:
        return seq
    n = seq.n_valid
    kept = seq.embeddings[:n][max(0, n - max_len):]
    return StepSequence(kept, np.ones(kept.shape[0], dtype=np.uint8))


def add_positions(seq: StepSequence, params: RouterParams):
    """Row i of the output is z_i + P[i]; padded rows pass through unchanged."""
    seq = truncate_sequence(seq, params.config.max_len)
    t, d = seq.embeddings.shape
    if d != params.config.embed_dim:
        raise ShapeMismatchError(
            f"sequence dim {d} != router embed_dim {params.config.embed_dim}"
        )
    n = seq.n_valid
    out = seq.embeddings.copy()
    out[:n] += params.positional.value[:n]

    def backward(grad_out: Matrix) -> Matrix:
        params.positional.grad[:n] += grad_out[:n]
        return grad_out

    return out, backward


def _layer_forward(x: Matrix, valid: np.ndarray, lp: EncoderLayerParams, num_heads: int):
    d = x.shape[1]
    d_head = d // num_heads
    q, bw_q = linear_forward(x, lp.wq, lp.bq)
    k, bw_k = linear_forward(x, lp.wk, lp.bk)
    v, bw_v = linear_forward(x, lp.wv, lp.bv)

    head_outs, head_bws = [], []
    for h in range(num_heads):
        sl = slice(h * d_head, (h + 1) * d_head)
        out_h, bw_h = masked_attention(q[:, sl], k[:, sl], v[:, sl], valid)
        head_outs.append(out_h)
        head_bws.append(bw_h)
    concat = np.concatenate(head_outs, axis=1)
    attn, bw_o = linear_forward(concat, lp.wo, lp.bo)

    resid1 = x + attn
    normed1, bw_ln1 = layer_norm(resid1, lp.ln1_gain, lp.ln1_shift)
    hidden, bw_f1 = linear_forward(normed1, lp.w1, lp.b1)
    act, bw_act = relu(hidden)
    ffn, bw_f2 = linear_forward(act, lp.w2, lp.b2)
    resid2 = normed1 + ffn
    out, bw_ln2 = layer_norm(resid2, lp.ln2_gain, lp.ln2_shift)

    def backward(grad: Matrix) -> Matrix:
        g = bw_ln2(grad)
        g_normed1 = g + bw_f1(bw_act(bw_f2(g)))
        g_resid1 = bw_ln1(g_normed1)
        g_concat = bw_o(g_resid1)
        gq = np.zeros_like(q)
        gk = np.zeros_like(k)
        gv = np.zeros_like(v)
        for h in range(num_heads):
            sl = slice(h * d_head, (h + 1) * d_head)
            gq_h, gk_h, gv_h = head_bws[h](g_concat[:, sl])
            gq[:, sl] = gq_h
            gk[:, sl] = gk_h
            gv[:, sl] = gv_h
        return g_resid1 + bw_q(gq) + bw_k(gk) + bw_v(gv)

    return out, backward


def encode(seq: StepSequence, params: RouterParams):
    """N encoder layers over the position-augmented sequence.

    Returns (H, backward) where backward maps dL/dH to dL/d-embeddings and
    accumulates parameter gradients. Invalid positions never influence the
    hidden states at valid positions.
    """
    seq = truncate_sequence(seq, params.config.max_len)
    x, bw_pos = add_positions(seq, params)
    valid = seq.mask.astype(bool)
    stack = []
    for lp in params.layers:
        x, bw = _layer_forward(x, valid, lp, params.config.num_heads)
        stack.append(bw)

    def backward(grad: Matrix) -> Matrix:
        for bw in reversed(stack):
            grad = bw(grad)
        return bw_pos(grad)

    return x, backward


def pool_last_valid(hidden: Matrix, mask) -> np.ndarray:
    """Hidden state of the most recent valid step."""
    m = np.asarray(mask).reshape(-1)
    n = int(m.sum())
    if n == 0:
        raise EmptySequenceError("cannot pool an all-invalid sequence")
    return hidden[n - 1]


def forward_probs(seq: StepSequence, params: RouterParams):
    """Full router forward: probs over precisions plus a backward closure.

    ``backward(dprobs)`` accepts the gradient w.r.t. the K probabilities and
    accumulates gradients into every parameter tensor.
    """
    seq = truncate_sequence(seq, params.config.max_len)
    hidden, bw_enc = encode(seq, params)
    n = seq.n_valid
    pooled = hidden[n - 1:n, :]
    logits, bw_head = linear_forward(pooled, params.head_weight, params.head_bias)
    probs, bw_soft = softmax_rows(logits)

    def backward(dprobs) -> None:
        dp = np.asarray(dprobs, dtype=np.float64).reshape(1, -1)
        d_pooled = bw_head(bw_soft(dp))
        d_hidden = np.zeros_like(hidden)
        d_hidden[n - 1] = d_pooled[0]
        bw_enc(d_hidden)

    return probs[0], backward


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw consuming exactly one uniform."""
    u = rng.random()
    cum = np.cumsum(probs)
    return int(min(np.searchsorted(cum, u, side="right"), len(probs) - 1))


def route(seq: StepSequence, params: RouterParams, mode: str = "greedy",
          rng: np.random.Generator | None = None) -> RoutingDistribution:
    """Route one decision step.

    Greedy mode breaks ties toward the lowest index, i.e. the cheapest
    precision. Sampled mode draws from the categorical using ``rng``.
    """
    probs, _ = forward_probs(seq, params)
    if mode == "greedy":
        chosen = int(np.argmax(probs))
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode requires an rng")
        chosen = sample_categorical(probs, rng)
    else:
        raise ValueError(f"unknown routing mode {mode!r}")
    return RoutingDistribution(probs=probs, chosen=chosen, mode=mode)


# --- checkpoint format -------------------------------------------------------
#
# Little-endian binary:
#   magic   4 bytes  b"MXRT"
#   version u32      currently 1
#   config  6 x u32  (embed_dim, num_layers, num_heads, ffn_dim,
#                     num_precisions, max_len) + f64 dropout
#   then, for every tensor in RouterParams.tensors() order:
#     rows u32, cols u32, rows*cols f64 values

CHECKPOINT_MAGIC = b"MXRT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI6Id")
_SHAPE = struct.Struct("<II")


def save_params(params: RouterParams, path) -> None:
    cfg = params.config
    with open(path, "wb") as f:
        f.write(_HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
            cfg.embed_dim, cfg.num_layers, cfg.num_heads, cfg.ffn_dim,
            cfg.num_precisions, cfg.max_len, cfg.dropout,
        ))
        for _, tensor in params.tensors():
            rows, cols = tensor.value.shape
            f.write(_SHAPE.pack(rows, cols))
            f.write(np.ascontiguousarray(tensor.value, dtype="<f8").tobytes())


def load_params(path, config: RouterConfig | None = None) -> RouterParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a router checkpoint")
    (_, version, embed_dim, num_layers, num_heads, ffn_dim,
     num_precisions, max_len, dropout) = _HEADER.unpack_from(blob, 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    stored = RouterConfig(
        embed_dim=embed_dim, num_layers=num_layers, num_heads=num_heads,
        ffn_dim=ffn_dim, num_precisions=num_precisions, max_len=max_len,
        dropout=dropout,
    )
    if config is not None and config != stored:
        raise CheckpointConfigError(
            f"{path}: stored config {stored} does not match expected {config}"
        )
    params = RouterParams.initialize(stored, seed=0)
    offset = _HEADER.size
    for name, tensor in params.tensors():
        if offset + _SHAPE.size > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated before {name}")
        rows, cols = _SHAPE.unpack_from(blob, offset)
        offset += _SHAPE.size
        if (rows, cols) != tensor.value.shape:
            raise CorruptCheckpointError(
                f"{path}: tensor {name} has shape ({rows}, {cols}), "
                f"expected {tensor.value.shape}"
            )
        nbytes = rows * cols * 8
        if offset + nbytes > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated inside {name}")
        tensor.value[:] = np.frombuffer(
            blob, dtype="<f8", count=rows * cols, offset=offset
        ).reshape(rows, cols)
        offset += nbytes
    if offset != len(blob):
        raise CorruptCheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return params
