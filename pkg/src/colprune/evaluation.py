"""Perplexity, output fidelity, and brute-force oracles for the test suite."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, OracleError, ShapeError
from .model import DecoderBlock, DecoderModel, PrunableGroup, forward_block, forward_model, zero_group


@dataclass
class EvalResult:
    perplexity: float
    token_count: int
    mean_logit_frobenius_gap: float | None = None
    block_cosine: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def log_softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Stable log-softmax in f64 (max subtracted before exponentiating)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sequence_nll(model: DecoderModel, tokens) -> tuple:
    """Summed next-token negative log-likelihood over one window, and the number of predictions."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logp = log_softmax(forward_model(model, tokens), axis=0)
    targets = tokens[1:]
    nll = -logp[targets, np.arange(targets.size)].sum()
    return float(nll), int(targets.size)


def perplexity(model: DecoderModel, eval_tokens, seq_len: int) -> EvalResult:
    """exp(mean NLL) over non-overlapping windows of ``seq_len`` tokens.

    A trailing window shorter than two tokens is dropped.
    """
    tokens = np.asarray(eval_tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 2:
        raise InputError("perplexity needs at least two tokens")
    if seq_len < 2:
        raise InputError("seq_len must be >= 2")
    seq_len = min(seq_len, model.spec.max_seq)
    total, count = 0.0, 0
    for start in range(0, tokens.size, seq_len):
        window = tokens[start : start + seq_len]
        if window.size < 2:
            break
        nll, n = sequence_nll(model, window)
        total += nll
        count += n
    return EvalResult(perplexity=float(np.exp(total / count)), token_count=count)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(np.vdot(a, b) / (na * nb))


def output_fidelity(ref: DecoderModel, pruned: DecoderModel, inputs: Sequence) -> dict:
    """Per-block output cosine similarity and final-logit Frobenius gap, averaged over inputs."""
    if ref.spec.vocab != pruned.spec.vocab or len(ref.blocks) != len(pruned.blocks):
        raise ShapeError("reference and pruned models expose different interfaces")
    if len(inputs) == 0:
        raise InputError("output_fidelity needs at least one input")
    cos = np.zeros(len(ref.blocks))
    gap = 0.0
    for tokens in inputs:
        la, ha = forward_model(ref, tokens, return_hidden=True)
        lb, hb = forward_model(pruned, tokens, return_hidden=True)
        cos += [_cosine(x, y) for x, y in zip(ha, hb)]
        gap += float(np.linalg.norm(la - lb))
    n = len(inputs)
    return {"block_cosine": (cos / n).tolist(), "mean_logit_frobenius_gap": gap / n}


# ----------------------------------------------------------------- oracles


def gauss_jordan_inverse(a, pivot_tol: float = 1e-13) -> np.ndarray:
    """Inverse by Gauss-Jordan elimination with partial pivoting.

    Deliberately independent of the Cholesky path used in restoration.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"need a square matrix, got {a.shape}")
    aug = np.hstack([a, np.eye(n)])
    scale = max(np.abs(a).max(), 1e-300) if n else 1.0
    for col in range(n):
        p = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[p, col]) <= pivot_tol * scale:
            raise OracleError(f"singular system at column {col}; add a small ridge")
        if p != col:
            aug[[col, p]] = aug[[p, col]]
        aug[col] /= aug[col, col]
        for r in range(n):
            if r != col and aug[r, col] != 0.0:
                aug[r] -= aug[r, col] * aug[col]
    return aug[:, n:]


def oracle_least_squares(w, x_capture, survivors, ridge: float = 0.0) -> np.ndarray:
    """Reference solution of ``min ||W* X_M - W X||_F`` from the captured activations.

    Forms the normal equations from ``X`` directly and inverts them by
    Gauss-Jordan; shares no solver code with the production restoration.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x_capture, dtype=np.float64)
    m_idx = np.asarray(survivors, dtype=np.int64)
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"capture {x.shape} does not feed weight {w.shape}")
    x_m = x[m_idx, :]
    target = w @ x
    normal = x_m @ x_m.T + ridge * np.eye(m_idx.size)
    return (target @ x_m.T) @ gauss_jordan_inverse(normal)


def oracle_zeroed_forward(block: DecoderBlock, group: PrunableGroup, removed, x) -> np.ndarray:
    """Forward of the unpruned block with the group's column-target columns set to zero."""
    out, _ = forward_block(zero_group(block, group, removed), x)
    return out
