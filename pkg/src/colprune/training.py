"""Deterministic SGD training of toy models (torch autograd mirror of the numpy forward)."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError, TrainingError
from .model import MLP_OUT, NORM_EPS, DecoderModel, Family

MAX_TRAIN_BLOCKS = 2
MAX_TRAIN_DMODEL = 64


def _params_from_model(model: DecoderModel) -> dict:
    params = {}
    for name, arr in model.tensors().items():
        params[name] = torch.tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)
    return params


def _norm(family, x, params, prefix):
    w = params[f"{prefix}.weight"]
    if family is Family.OPT:
        return F.layer_norm(x, (x.shape[-1],), w, params[f"{prefix}.bias"], eps=NORM_EPS)
    return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + NORM_EPS) * w


def _linear(params, prefix, name, x):
    y = x @ params[f"{prefix}.{name}.weight"].T
    bias = params.get(f"{prefix}.{name}.bias")
    return y if bias is None else y + bias


def torch_logits(model: DecoderModel, params: dict, tokens: torch.Tensor) -> torch.Tensor:
    """Batch forward (B, T) -> (B, T, vocab), same computation as the numpy model."""
    fam = model.spec.family
    n_heads = model.spec.n_heads
    bsz, t = tokens.shape
    x = params["embed"][tokens] + params["pos_embed"][:t]
    mask = torch.ones(t, t, dtype=torch.bool).tril()
    for i, blk in enumerate(model.blocks):
        p = f"blocks.{i}"
        h = _norm(fam, x, params, f"{p}.norm1")
        q, k, v = (_linear(params, p, n, h) for n in ("q_proj", "k_proj", "v_proj"))
        dq = q.shape[-1] // n_heads
        dv = v.shape[-1] // n_heads
        q = q.view(bsz, t, n_heads, dq).transpose(1, 2)
        k = k.view(bsz, t, n_heads, dq).transpose(1, 2)
        v = v.view(bsz, t, n_heads, dv).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dq)
        probs = torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=-1)
        attn = (probs @ v).transpose(1, 2).reshape(bsz, t, n_heads * dv)
        x = x + _linear(params, p, "o_proj", attn)
        h2 = _norm(fam, x, params, f"{p}.norm2")
        if fam is Family.OPT:
            a = torch.relu(_linear(params, p, "fc1", h2))
        else:
            a = _linear(params, p, "up_proj", h2) * F.silu(_linear(params, p, "gate_proj", h2))
        x = x + _linear(params, p, MLP_OUT[fam], a)
    h = _norm(fam, x, params, "final_norm")
    return h @ params["unembed"].T


def _write_back(model: DecoderModel, params: dict) -> DecoderModel:
    out = model.copy()
    arrays = {k: v.detach().numpy().astype(np.float32) for k, v in params.items()}
    out.embed, out.pos_embed, out.unembed = arrays["embed"], arrays["pos_embed"], arrays["unembed"]
    for i, blk in enumerate(out.blocks):
        for name in blk.weights:
            blk.weights[name] = arrays[f"blocks.{i}.{name}.weight"]
        for name in blk.biases:
            blk.biases[name] = arrays[f"blocks.{i}.{name}.bias"]
        for key in blk.norms:
            blk.norms[key] = arrays[f"blocks.{i}.{key}"]
    for key in out.final_norm:
        out.final_norm[key] = arrays[f"final_norm.{key}"]
    return out


def train_toy(
    model: DecoderModel,
    corpus,
    steps: int,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 16,
    seq_len: int = 64,
    momentum: float = 0.9,
    clip_norm: float = 1.0,
    return_losses: bool = False,
):
    """Next-token cross-entropy training with SGD (+ momentum), fully seeded.

    Batches are random windows of ``corpus`` drawn with ``seed``.
    """
    spec = model.spec
    if spec.n_blocks > MAX_TRAIN_BLOCKS or spec.d_model > MAX_TRAIN_DMODEL:
        raise ShapeError(
            f"train_toy is for toy models (<= {MAX_TRAIN_BLOCKS} blocks, d_model <= {MAX_TRAIN_DMODEL})"
        )
    if any(len(set(b.v_head_dims)) != 1 for b in model.blocks):
        raise ShapeError("train_toy needs equal head sizes")
    corpus = np.asarray(corpus, dtype=np.int64)
    seq_len = min(seq_len, spec.max_seq)
    if corpus.size < seq_len + 1:
        raise ShapeError(f"corpus too short for seq_len={seq_len}")
    if steps <= 0:
        return (model.copy(), []) if return_losses else model.copy()

    rng = np.random.default_rng(seed)
    params = _params_from_model(model)
    opt = torch.optim.SGD(list(params.values()), lr=lr, momentum=momentum)
    losses = []
    for _ in range(steps):
        starts = rng.integers(0, corpus.size - seq_len, size=batch_size)
        batch = torch.from_numpy(np.stack([corpus[s : s + seq_len + 1] for s in starts]))
        logits = torch_logits(model, params, batch[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, spec.vocab), batch[:, 1:].reshape(-1))
        if not torch.isfinite(loss):
            raise TrainingError(f"loss diverged at step {len(losses)} (lr={lr})")
        opt.zero_grad()
        loss.backward()
        if clip_norm:
            torch.nn.utils.clip_grad_norm_(list(params.values()), clip_norm)
        opt.step()
        losses.append(loss.item())
    trained = _write_back(model, params)
    return (trained, losses) if return_losses else trained
