"""Prediction heads, losses, and the term selection rule.

The matching head maps the hidden state at each term's [EOT] anchor to two
logits, ordered [True, False]: a term is selected when its normalized True
score is strictly greater than its False score. The same head and the same
cross-entropy serve both fine-tuning labels and the pretraining
belongs-to-dialogue labels. The mask-prediction head maps the hidden state
at each [MASK] back onto the full vocabulary.

Per-term cross-entropy is averaged within an example (and over a batch in
the batched variants) so the learning rate does not scale with the number
of packed terms; gradients are returned with respect to the logits.
"""

from __future__ import annotations

import numpy as np

from .encoder import ModelConfig, _truncated_normal
from .util import DataError, subseed

HEAD_PARAM_NAMES = ("match_w", "match_b", "mlm_w", "mlm_b")
TRUE_INDEX = 0
FALSE_INDEX = 1


def head_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.hidden
    return {
        "match_w": (d, 2),
        "match_b": (2,),
        "mlm_w": (d, config.vocab_size),
        "mlm_b": (config.vocab_size,),
    }


def init_head_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    dtype = config.np_dtype
    params: dict[str, np.ndarray] = {}
    for name, shape in head_param_shapes(config).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            rng = np.random.Generator(np.random.PCG64(subseed(seed, "init", name)))
            params[name] = _truncated_normal(rng, shape, config.init_std, dtype)
    return params


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _weighted_cross_entropy(
    logits: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Sum of weighted CE terms; gradient w.r.t. logits is (p - y) * w."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.max(axis=-1)
    ce = lse - logits[np.arange(len(targets)), targets]
    loss = float(np.sum(weights * ce, dtype=np.float64))
    dlogits = _softmax(logits)
    dlogits[np.arange(len(targets)), targets] -= 1.0
    dlogits *= weights[:, None]
    return loss, dlogits


# ---------------------------------------------------------------------------
# Single-example operations


def match_probabilities(
    params: dict[str, np.ndarray], states: np.ndarray, eot_positions
) -> np.ndarray:
    """Per-term [True, False] probabilities from the [EOT] hidden states."""
    eots = list(eot_positions)
    if not eots:
        raise DataError("no [EOT] positions to score")
    if min(eots) < 0 or max(eots) >= states.shape[0]:
        raise DataError(f"[EOT] position out of range for length {states.shape[0]}")
    logits = states[eots] @ params["match_w"] + params["match_b"]
    return _softmax(logits)


def decide(probabilities: np.ndarray) -> list[int]:
    """Indices of terms whose True score strictly exceeds their False score.

    An exact tie is not a selection.
    """
    probs = np.asarray(probabilities)
    return [
        i for i in range(probs.shape[0])
        if probs[i, TRUE_INDEX] > probs[i, FALSE_INDEX]
    ]


def msf_loss(
    probabilities: np.ndarray, labels
) -> tuple[float, np.ndarray]:
    """Mean per-term cross-entropy against boolean labels.

    Returns (loss, gradient w.r.t. the logits). The gradient is exactly
    (p - y) / term_count per term, which is what the encoder backward pass
    consumes.
    """
    probs = np.asarray(probabilities)
    flags = list(labels)
    if probs.shape[0] != len(flags):
        raise DataError(
            f"{len(flags)} labels for {probs.shape[0]} term predictions"
        )
    targets = np.array(
        [TRUE_INDEX if f else FALSE_INDEX for f in flags], dtype=np.int64
    )
    n = len(flags)
    picked = probs[np.arange(n), targets]
    loss = float(-np.sum(np.log(picked), dtype=np.float64) / n)
    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def ctd_loss(
    params: dict[str, np.ndarray], states: np.ndarray, eot_positions, labels
) -> tuple[float, np.ndarray]:
    """Belongs-to-dialogue loss: same head, same cross-entropy as matching."""
    return msf_loss(match_probabilities(params, states, eot_positions), labels)


def mmtm_loss(
    params: dict[str, np.ndarray], states: np.ndarray, mask_positions, mlm_targets
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of predicting the original ids at [MASK] positions."""
    positions = list(mask_positions)
    targets = list(mlm_targets)
    if not positions:
        raise DataError("example has no masked positions; skip its mask loss")
    if len(positions) != len(targets):
        raise DataError(
            f"{len(positions)} mask positions but {len(targets)} targets"
        )
    logits = states[positions] @ params["mlm_w"] + params["mlm_b"]
    weights = np.full(len(positions), 1.0 / len(positions), dtype=logits.dtype)
    return _weighted_cross_entropy(
        logits, np.asarray(targets, dtype=np.int64), weights
    )


def pretrain_loss(l_ctd: float, l_mmtm: float, lam: float) -> float:
    """Weighted combination of the two pretraining losses."""
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"loss weight must be in [0, 1], got {lam}")
    return lam * l_ctd + (1.0 - lam) * l_mmtm


# ---------------------------------------------------------------------------
# Batched variants used by the training loops


def matching_loss_batch(
    params: dict[str, np.ndarray],
    states: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Weighted matching loss over gathered (example, position) pairs.

    `weights` carries the per-example normalization (1 / (terms_in_example *
    batch_size)), so the scalar equals the batch mean of per-example mean
    cross-entropies. Returns (loss, d states, head gradients).
    """
    hidden = states[rows, cols]
    logits = hidden @ params["match_w"] + params["match_b"]
    targets = np.where(labels, TRUE_INDEX, FALSE_INDEX).astype(np.int64)
    loss, dlogits = _weighted_cross_entropy(logits, targets, weights)
    dstates = np.zeros_like(states)
    np.add.at(dstates, (rows, cols), dlogits @ params["match_w"].T)
    head_grads = {
        "match_w": hidden.T @ dlogits,
        "match_b": dlogits.sum(axis=0),
    }
    return loss, dstates, head_grads


def mlm_loss_batch(
    params: dict[str, np.ndarray],
    states: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Weighted mask-prediction loss over gathered positions."""
    hidden = states[rows, cols]
    logits = hidden @ params["mlm_w"] + params["mlm_b"]
    loss, dlogits = _weighted_cross_entropy(logits, targets, weights)
    dstates = np.zeros_like(states)
    np.add.at(dstates, (rows, cols), dlogits @ params["mlm_w"].T)
    head_grads = {
        "mlm_w": hidden.T @ dlogits,
        "mlm_b": dlogits.sum(axis=0),
    }
    return loss, dstates, head_grads
