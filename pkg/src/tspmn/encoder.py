"""Compact transformer encoder with exact analytic gradients.

Numpy-only implementation of the usual stack: token/position/segment
embeddings with layer norm, post-layer-norm residual blocks (bidirectional
multi-head attention, then a GELU feed-forward), and a final layer norm.
The forward pass records an activation tape; the backward pass consumes it
and returns per-parameter gradients, which `grad_check` verifies against
central finite differences in double precision.

Padding keys receive -inf attention scores, so real positions never attend
to padding and padded rows carry exactly zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .packing import Batch, PackedExample, collate
from .textcodec import SEP_ID
from .util import DataError, NumericalError, subseed

LN_EPS = 1e-12

_LAYER_SUFFIXES = (
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "ln2_g", "ln2_b",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 2
    hidden: int = 64
    ffn: int = 128
    max_len: int = 256
    segments: int = 2
    dropout: float = 0.1
    dtype: str = "float32"  # "float64" for gradient checking
    # 0.02 matches the convention of the full-size model family this mirrors;
    # desk-scale runs train markedly faster around 1/sqrt(hidden).
    init_std: float = 0.02

    def validate(self) -> None:
        if min(self.vocab_size, self.layers, self.heads, self.hidden,
               self.ffn, self.max_len, self.segments) < 1:
            raise DataError("all model dimensions must be positive")
        if self.hidden % self.heads != 0:
            raise DataError(
                f"hidden={self.hidden} not divisible by heads={self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise DataError(f"unsupported dtype {self.dtype!r}")
        if self.init_std <= 0:
            raise DataError(f"init_std must be positive, got {self.init_std}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (name -> shape) map; iteration order is checkpoint order."""
    d, f = config.hidden, config.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
        "seg_emb": (config.segments, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for i in range(config.layers):
        prefix = f"layer{i}."
        shapes[prefix + "wq"] = (d, d)
        shapes[prefix + "bq"] = (d,)
        shapes[prefix + "wk"] = (d, d)
        shapes[prefix + "bk"] = (d,)
        shapes[prefix + "wv"] = (d, d)
        shapes[prefix + "bv"] = (d,)
        shapes[prefix + "wo"] = (d, d)
        shapes[prefix + "bo"] = (d,)
        shapes[prefix + "ln1_g"] = (d,)
        shapes[prefix + "ln1_b"] = (d,)
        shapes[prefix + "ffn_w1"] = (d, f)
        shapes[prefix + "ffn_b1"] = (f,)
        shapes[prefix + "ffn_w2"] = (f, d)
        shapes[prefix + "ffn_b2"] = (d,)
        shapes[prefix + "ln2_g"] = (d,)
        shapes[prefix + "ln2_b"] = (d,)
    shapes["final_ln_g"] = (d,)
    shapes["final_ln_b"] = (d,)
    return shapes


def param_names(config: ModelConfig) -> list[str]:
    return list(param_shapes(config))


def _truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float, dtype
) -> np.ndarray:
    # Resample anything beyond 2 sigma.
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2.0 * std
    return x.astype(dtype)


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Truncated-normal(init_std) weights, zero biases, unit layer-norm gains.

    Each tensor draws from its own named sub-seed, so the result does not
    depend on initialization order.
    """
    config.validate()
    dtype = config.np_dtype
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        rng = np.random.Generator(np.random.PCG64(subseed(seed, "init", name)))
        if leaf.endswith("_g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b") or leaf.endswith("_b") or leaf in ("ffn_b1", "ffn_b2"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _truncated_normal(rng, shape, config.init_std, dtype)
    return params


# ---------------------------------------------------------------------------
# Primitives


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, xhat, inv


def _layer_norm_backward(dy, gain, xhat, inv):
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu(x):
    # tanh form: 0.5 * x * (1 + tanh(c * (x + a * x^3)))
    u = x * x
    u *= _GELU_A
    u += 1.0
    u *= _GELU_C * x
    t = np.tanh(u)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, t


def _gelu_backward(dy, x, t):
    du = x * x
    du *= 3.0 * _GELU_A
    du += 1.0
    du *= _GELU_C
    sech2 = 1.0 - t * t
    out = sech2 * du
    out *= x
    out += 1.0 + t
    out *= 0.5
    out *= dy
    return out


def _softmax_last(x):
    e = x - x.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


# Shifted scores are clamped here before exp: anything this far below the
# row maximum contributes ~1e-26 mass, but letting it underflow produces
# subnormal floats whose microcode-assist cost dominates the forward pass.
_SCORE_FLOOR = -60.0


def _masked_softmax(scores, keep):
    """In-place row softmax with exact zeros at masked (keep == 0) keys."""
    np.subtract(scores, scores.max(axis=-1, keepdims=True), out=scores)
    np.maximum(scores, scores.dtype.type(_SCORE_FLOOR), out=scores)
    np.exp(scores, out=scores)
    scores *= keep
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def _dropout_mask(rng: np.random.Generator, shape, rate: float, dtype):
    mask = (rng.random(shape, dtype=dtype) >= rate).astype(dtype)
    mask *= dtype(1.0 / (1.0 - rate))
    return mask


def _split_heads(x, heads, head_dim):
    b, l, _ = x.shape
    # Contiguous copy: every later matmul reads this array repeatedly.
    return np.ascontiguousarray(
        x.reshape(b, l, heads, head_dim).transpose(0, 2, 1, 3)
    )


def _merge_heads(x):
    b, h, l, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dk)


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class Tape:
    """Activations needed to run the backward pass."""

    ids: np.ndarray
    segs: np.ndarray
    valid: np.ndarray
    train: bool
    emb_xhat: np.ndarray | None = None
    emb_inv: np.ndarray | None = None
    emb_drop: np.ndarray | None = None
    final_xhat: np.ndarray | None = None
    final_inv: np.ndarray | None = None
    layers: list[dict] = field(default_factory=list)


def forward_batch(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    token_ids: np.ndarray,
    segment_ids: np.ndarray,
    lengths: np.ndarray,
    train: bool = False,
    dropout_seed: int = 0,
) -> tuple[np.ndarray, Tape]:
    """Encode a padded (B, L) batch; returns per-token states and the tape."""
    dtype = config.np_dtype
    b, l = token_ids.shape
    if l > config.max_len:
        raise DataError(f"sequence length {l} exceeds max_len={config.max_len}")
    if token_ids.max(initial=0) >= config.vocab_size or token_ids.min(initial=0) < 0:
        raise DataError("token id out of vocabulary range")

    valid = np.arange(l)[None, :] < lengths[:, None]  # (B, L)
    rng = np.random.Generator(np.random.PCG64(dropout_seed))
    rate = config.dropout
    use_dropout = train and rate > 0.0

    x = (
        params["tok_emb"][token_ids]
        + params["pos_emb"][:l][None, :, :]
        + params["seg_emb"][segment_ids]
    )
    x, emb_xhat, emb_inv = _layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    tape = Tape(ids=token_ids, segs=segment_ids, valid=valid, train=use_dropout,
                emb_xhat=emb_xhat, emb_inv=emb_inv)
    if use_dropout:
        tape.emb_drop = _dropout_mask(rng, x.shape, rate, dtype)
        x = x * tape.emb_drop

    heads, dk = config.heads, config.head_dim
    scale = dtype(1.0 / math.sqrt(dk))
    # Padding keys get a large negative bias and an exact zero after exp.
    key_keep = valid.astype(dtype)[:, None, None, :]
    key_bias = (key_keep - dtype(1.0)) * dtype(1e4)

    for i in range(config.layers):
        p = f"layer{i}."
        rec: dict = {"x_in": x}

        q = _split_heads(x @ params[p + "wq"] + params[p + "bq"], heads, dk)
        k = _split_heads(x @ params[p + "wk"] + params[p + "bk"], heads, dk)
        v = _split_heads(x @ params[p + "wv"] + params[p + "bv"], heads, dk)
        scores = q @ k.transpose(0, 1, 3, 2)
        scores *= scale
        scores += key_bias
        attn = _masked_softmax(scores, key_keep)
        rec.update(q=q, k=k, v=v, attn=attn)

        attn_used = attn
        if use_dropout:
            rec["attn_drop"] = _dropout_mask(rng, attn.shape, rate, dtype)
            attn_used = attn * rec["attn_drop"]
        ctx = _merge_heads(attn_used @ v)
        rec["ctx"] = ctx
        out = ctx @ params[p + "wo"] + params[p + "bo"]
        if use_dropout:
            rec["out_drop"] = _dropout_mask(rng, out.shape, rate, dtype)
            out = out * rec["out_drop"]

        x1, ln1_xhat, ln1_inv = _layer_norm(
            x + out, params[p + "ln1_g"], params[p + "ln1_b"]
        )
        rec.update(ln1_xhat=ln1_xhat, ln1_inv=ln1_inv, x1=x1)

        pre = x1 @ params[p + "ffn_w1"] + params[p + "ffn_b1"]
        h, t = _gelu(pre)
        rec.update(pre=pre, gelu_t=t, h=h)
        f = h @ params[p + "ffn_w2"] + params[p + "ffn_b2"]
        if use_dropout:
            rec["ffn_drop"] = _dropout_mask(rng, f.shape, rate, dtype)
            f = f * rec["ffn_drop"]

        x, ln2_xhat, ln2_inv = _layer_norm(
            x1 + f, params[p + "ln2_g"], params[p + "ln2_b"]
        )
        rec.update(ln2_xhat=ln2_xhat, ln2_inv=ln2_inv)
        tape.layers.append(rec)

    states, tape.final_xhat, tape.final_inv = _layer_norm(
        x, params["final_ln_g"], params["final_ln_b"]
    )
    return states, tape


def backward_batch(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    tape: Tape,
    dstates: np.ndarray,
) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(states) through the tape; returns gradients."""
    d = config.hidden
    heads, dk = config.heads, config.head_dim
    dtype = config.np_dtype
    scale = dtype(1.0 / math.sqrt(dk))
    grads: dict[str, np.ndarray] = {}

    dx, grads["final_ln_g"], grads["final_ln_b"] = _layer_norm_backward(
        dstates, params["final_ln_g"], tape.final_xhat, tape.final_inv
    )

    for i in reversed(range(config.layers)):
        p = f"layer{i}."
        rec = tape.layers[i]

        dr2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layer_norm_backward(
            dx, params[p + "ln2_g"], rec["ln2_xhat"], rec["ln2_inv"]
        )
        df = dr2 * rec["ffn_drop"] if tape.train else dr2
        hf = rec["h"].reshape(-1, config.ffn)
        grads[p + "ffn_w2"] = hf.T @ df.reshape(-1, d)
        grads[p + "ffn_b2"] = df.sum(axis=(0, 1))
        dh = df @ params[p + "ffn_w2"].T
        dpre = _gelu_backward(dh, rec["pre"], rec["gelu_t"])
        x1f = rec["x1"].reshape(-1, d)
        grads[p + "ffn_w1"] = x1f.T @ dpre.reshape(-1, config.ffn)
        grads[p + "ffn_b1"] = dpre.sum(axis=(0, 1))
        dx1 = dpre @ params[p + "ffn_w1"].T + dr2

        dr1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layer_norm_backward(
            dx1, params[p + "ln1_g"], rec["ln1_xhat"], rec["ln1_inv"]
        )
        dout = dr1 * rec["out_drop"] if tape.train else dr1
        ctxf = rec["ctx"].reshape(-1, d)
        grads[p + "wo"] = ctxf.T @ dout.reshape(-1, d)
        grads[p + "bo"] = dout.sum(axis=(0, 1))
        dctx = _split_heads(dout @ params[p + "wo"].T, heads, dk)

        attn = rec["attn"]
        attn_used = attn * rec["attn_drop"] if tape.train else attn
        dattn = dctx @ rec["v"].transpose(0, 1, 3, 2)
        dv = attn_used.transpose(0, 1, 3, 2) @ dctx
        if tape.train:
            dattn *= rec["attn_drop"]
        # softmax backward, fused in place: dS = A * (dA - sum(dA * A))
        row_dot = np.einsum("bhqk,bhqk->bhq", dattn, attn)
        dattn -= row_dot[..., None]
        dattn *= attn
        dscores = dattn
        dq = (dscores @ rec["k"]) * scale
        dk_ = (np.ascontiguousarray(dscores.transpose(0, 1, 3, 2)) @ rec["q"]) * scale

        dqm, dkm, dvm = (_merge_heads(g) for g in (dq, dk_, dv))
        xf = rec["x_in"].reshape(-1, d)
        dx = dr1
        for name, dproj in (("wq", dqm), ("wk", dkm), ("wv", dvm)):
            grads[p + name] = xf.T @ dproj.reshape(-1, d)
            grads[p + "b" + name[1]] = dproj.sum(axis=(0, 1))
            dx = dx + dproj @ params[p + name].T

    if tape.train:
        dx = dx * tape.emb_drop
    dxe, grads["emb_ln_g"], grads["emb_ln_b"] = _layer_norm_backward(
        dx, params["emb_ln_g"], tape.emb_xhat, tape.emb_inv
    )

    b, l = tape.ids.shape
    dtok = np.zeros_like(params["tok_emb"])
    np.add.at(dtok, tape.ids.ravel(), dxe.reshape(-1, d))
    grads["tok_emb"] = dtok
    dpos = np.zeros_like(params["pos_emb"])
    dpos[:l] = dxe.sum(axis=0)
    grads["pos_emb"] = dpos
    dseg = np.zeros_like(params["seg_emb"])
    np.add.at(dseg, tape.segs.ravel(), dxe.reshape(-1, d))
    grads["seg_emb"] = dseg
    return grads


# ---------------------------------------------------------------------------
# Single-example convenience


@dataclass
class EncodedStates:
    """Per-token hidden states of one example, with the named views."""

    states: np.ndarray  # (L, d)
    eot_positions: list[int]
    mask_positions: list[int]
    sep_positions: list[int]
    tape: Tape

    @property
    def h_cls(self) -> np.ndarray:
        return self.states[0]

    @property
    def h_eot(self) -> np.ndarray:
        return self.states[self.eot_positions]

    @property
    def h_mask(self) -> np.ndarray:
        return self.states[self.mask_positions]

    @property
    def h_sep(self) -> np.ndarray:
        return self.states[self.sep_positions]


def encode(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    example: PackedExample,
    train_mode: bool = False,
    seed: int = 0,
) -> EncodedStates:
    """Encode one packed example. Deterministic when train_mode is off."""
    batch = collate([example])
    states, tape = forward_batch(
        params, config, batch.token_ids, batch.segment_ids, batch.lengths,
        train=train_mode, dropout_seed=seed,
    )
    sep_positions = [
        i for i, t in enumerate(example.token_ids) if t == SEP_ID
    ]
    return EncodedStates(
        states=states[0],
        eot_positions=list(example.eot_positions),
        mask_positions=list(example.mask_positions),
        sep_positions=sep_positions,
        tape=tape,
    )


def encode_batch(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    batch: Batch,
    train_mode: bool = False,
    seed: int = 0,
) -> tuple[np.ndarray, Tape]:
    return forward_batch(
        params, config, batch.token_ids, batch.segment_ids, batch.lengths,
        train=train_mode, dropout_seed=seed,
    )


# ---------------------------------------------------------------------------
# Gradient checking


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(
    params: dict[str, np.ndarray],
    loss_fn,
    step: float = 1e-5,
    sample_count: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn(params, want_grads)` must return (loss, grads-or-None) and be a
    deterministic function of the parameters. Parameters should be float64
    and dropout off, or the comparison is meaningless. Returns the maximum
    relative error |a - b| / max(1, |a|, |b|) over `sample_count` uniformly
    sampled parameter entries.
    """
    from .util import single_thread_blas, tune_allocator

    tune_allocator()
    with single_thread_blas():
        return _grad_check_inner(params, loss_fn, step, sample_count, seed)


def _grad_check_inner(params, loss_fn, step, sample_count, seed) -> float:
    loss0, grads = loss_fn(params, True)
    if not np.isfinite(loss0):
        raise NumericalError(f"non-finite loss {loss0!r} at the check point")
    names = sorted(params)
    sizes = np.array([params[n].size for n in names], dtype=np.int64)
    offsets = np.cumsum(sizes)
    total = int(offsets[-1])

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for _ in range(sample_count):
        flat_index = int(rng.integers(0, total))
        which = int(np.searchsorted(offsets, flat_index, side="right"))
        local = flat_index - (int(offsets[which - 1]) if which else 0)
        name = names[which]
        before = params[name].flat[local]

        params[name].flat[local] = before + step
        lo_plus, _ = loss_fn(params, False)
        params[name].flat[local] = before - step
        lo_minus, _ = loss_fn(params, False)
        params[name].flat[local] = before

        fd = (lo_plus - lo_minus) / (2.0 * step)
        analytic = float(grads[name].flat[local]) if name in grads else 0.0
        worst = max(worst, relative_error(analytic, fd))
    return worst
