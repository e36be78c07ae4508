"""Toy decoder-only transformers (OPT-style and LLaMA-style) in numpy.

Activations are laid out features x tokens, so a projection is ``W @ x + b``
with ``W`` stored out_features x in_features. Weights are stored f32; every
forward pass runs in f64.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import expit

from .errors import ConsistencyError, InputError, ShapeError


class Family(str, enum.Enum):
    OPT = "opt"
    LLAMA = "llama"


class GroupKind(str, enum.Enum):
    MLP_CHANNEL = "mlp_channel"
    ATTN_VO_CHANNEL = "attn_vo_channel"
    ATTN_QK_CHANNEL = "attn_qk_channel"
    # a single projection's input columns, uncoupled (structure ablation only)
    COLUMNS = "columns"


PROJECTIONS = {
    Family.OPT: ("q_proj", "k_proj", "v_proj", "o_proj", "fc1", "fc2"),
    Family.LLAMA: ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "gate_proj", "down_proj"),
}
MLP_OUT = {Family.OPT: "fc2", Family.LLAMA: "down_proj"}
MLP_IN = {Family.OPT: ("fc1",), Family.LLAMA: ("up_proj", "gate_proj")}

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ArchSpec:
    family: Family
    d_model: int
    d_hidden: int
    n_heads: int
    n_blocks: int
    vocab: int
    max_seq: int

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ShapeError(
                f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}"
            )
        if self.d_hidden < 1:
            raise ShapeError("d_hidden must be >= 1")
        if self.vocab < 2:
            raise ShapeError("vocab must be >= 2")
        if self.n_blocks < 0 or self.max_seq < 1:
            raise ShapeError("n_blocks must be >= 0 and max_seq >= 1")

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "d_model": self.d_model,
            "d_hidden": self.d_hidden,
            "n_heads": self.n_heads,
            "n_blocks": self.n_blocks,
            "vocab": self.vocab,
            "max_seq": self.max_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class DecoderBlock:
    family: Family
    n_heads: int
    weights: dict  # projection name -> (out, in) array
    biases: dict  # projection name -> (out,) array; absent key means no bias
    norms: dict  # "norm1.weight", "norm1.bias", "norm2.weight", ...
    v_head_dims: tuple

    @property
    def d_model(self) -> int:
        return self.weights["q_proj"].shape[1]

    @property
    def qk_head_dim(self) -> int:
        return self.weights["q_proj"].shape[0] // self.n_heads

    @property
    def mlp_width(self) -> int:
        return self.weights[MLP_IN[self.family][0]].shape[0]

    def projections(self) -> tuple:
        return PROJECTIONS[self.family]

    def param_count(self) -> int:
        """Projection weights only (no biases, no norms)."""
        return int(sum(self.weights[name].size for name in self.projections()))

    def copy(self) -> "DecoderBlock":
        return copy.deepcopy(self)

    def validate(self) -> None:
        """Check the shape couplings a (possibly pruned) block must satisfy."""
        w = self.weights
        d = self.d_model
        problems = []
        if set(w) != set(self.projections()):
            problems.append(f"projection set {sorted(w)}")
        q, k, v, o = w["q_proj"], w["k_proj"], w["v_proj"], w["o_proj"]
        if q.shape != k.shape or q.shape[0] % self.n_heads:
            problems.append(f"q {q.shape} / k {k.shape} not head-aligned")
        if o.shape[1] != v.shape[0]:
            problems.append(f"o_proj cols {o.shape[1]} != v_proj rows {v.shape[0]}")
        if len(self.v_head_dims) != self.n_heads or sum(self.v_head_dims) != v.shape[0]:
            problems.append(f"v_head_dims {self.v_head_dims} vs v rows {v.shape[0]}")
        if o.shape[0] != d or any(w[n].shape[1] != d for n in ("q_proj", "k_proj", "v_proj")):
            problems.append("attention model dimension mismatch")
        out = w[MLP_OUT[self.family]]
        for name in MLP_IN[self.family]:
            if w[name].shape != (out.shape[1], d):
                problems.append(f"{name} {w[name].shape} vs {MLP_OUT[self.family]} {out.shape}")
        if out.shape[0] != d:
            problems.append("mlp output dimension mismatch")
        for name, b in self.biases.items():
            if b.shape != (w[name].shape[0],):
                problems.append(f"bias {name} {b.shape} vs weight {w[name].shape}")
        if problems:
            raise ConsistencyError("; ".join(problems))


@dataclass
class DecoderModel:
    spec: ArchSpec
    embed: np.ndarray  # vocab x d
    pos_embed: np.ndarray  # max_seq x d
    blocks: list
    final_norm: dict
    unembed: np.ndarray  # vocab x d

    def copy(self) -> "DecoderModel":
        return copy.deepcopy(self)

    def block_param_count(self) -> int:
        return sum(b.param_count() for b in self.blocks)

    def tensors(self) -> dict:
        """Flat, ordered name -> array table (checkpoint layout)."""
        out = {"embed": self.embed, "pos_embed": self.pos_embed}
        for i, blk in enumerate(self.blocks):
            for name in blk.projections():
                out[f"blocks.{i}.{name}.weight"] = blk.weights[name]
                if name in blk.biases:
                    out[f"blocks.{i}.{name}.bias"] = blk.biases[name]
            for key in sorted(blk.norms):
                out[f"blocks.{i}.{key}"] = blk.norms[key]
        for key in sorted(self.final_norm):
            out[f"final_norm.{key}"] = self.final_norm[key]
        out["unembed"] = self.unembed
        return out


def _norm_keys(family: Family, prefix: str) -> tuple:
    if family is Family.OPT:
        return (f"{prefix}.weight", f"{prefix}.bias")
    return (f"{prefix}.weight",)


def build_model(spec: ArchSpec, seed: int = 0) -> DecoderModel:
    """Randomly initialised model: Gaussian weights scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    d, h = spec.d_model, spec.d_hidden

    def gauss(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(cols)).astype(np.float32)

    def small(n):
        return (0.02 * rng.standard_normal(n)).astype(np.float32)

    embed = gauss(spec.vocab, d)
    pos = gauss(spec.max_seq, d)
    blocks = []
    for _ in range(spec.n_blocks):
        shapes = {"q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d)}
        if spec.family is Family.OPT:
            shapes.update(fc1=(h, d), fc2=(d, h))
        else:
            shapes.update(up_proj=(h, d), gate_proj=(h, d), down_proj=(d, h))
        weights = {name: gauss(*shp) for name, shp in shapes.items()}
        biases = {}
        if spec.family is Family.OPT:
            biases = {name: small(shp[0]) for name, shp in shapes.items()}
        norms = {}
        for prefix in ("norm1", "norm2"):
            for key in _norm_keys(spec.family, prefix):
                norms[key] = np.ones(d, np.float32) if key.endswith("weight") else np.zeros(d, np.float32)
        blocks.append(
            DecoderBlock(
                family=spec.family,
                n_heads=spec.n_heads,
                weights=weights,
                biases=biases,
                norms=norms,
                v_head_dims=(d // spec.n_heads,) * spec.n_heads,
            )
        )
    final_norm = {
        key.split(".", 1)[1]: (np.ones(d, np.float32) if key.endswith("weight") else np.zeros(d, np.float32))
        for key in _norm_keys(spec.family, "final_norm")
    }
    return DecoderModel(spec, embed, pos, blocks, final_norm, gauss(spec.vocab, d))


# ---------------------------------------------------------------- forward


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def apply_norm(family: Family, norms: dict, prefix: str, x: np.ndarray) -> np.ndarray:
    w = _f64(norms[f"{prefix}.weight"])[:, None]
    if family is Family.OPT:
        mu = x.mean(axis=0, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=0, keepdims=True)
        return xc / np.sqrt(var + NORM_EPS) * w + _f64(norms[f"{prefix}.bias"])[:, None]
    ms = (x * x).mean(axis=0, keepdims=True)
    return x / np.sqrt(ms + NORM_EPS) * w


def _linear(block: DecoderBlock, name: str, x: np.ndarray, captured: dict | None) -> np.ndarray:
    if captured is not None:
        captured[name] = x
    y = _f64(block.weights[name]) @ x
    if name in block.biases:
        y += _f64(block.biases[name])[:, None]
    return y


def causal_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (query x key) score matrix with keys > query masked."""
    t = scores.shape[0]
    s = np.where(np.tri(t, dtype=bool), scores, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p


def attention_mix(block: DecoderBlock, q, k, v) -> np.ndarray:
    """Per-head causal attention. Returns the concatenated head outputs (dv x T)."""
    dq = block.qk_head_dim
    scale = 1.0 / np.sqrt(dq) if dq else 0.0
    outs = []
    v_off = 0
    for hd, dv in enumerate(block.v_head_dims):
        qh = q[hd * dq : (hd + 1) * dq]
        kh = k[hd * dq : (hd + 1) * dq]
        p = causal_softmax((qh.T @ kh) * scale)
        outs.append(v[v_off : v_off + dv] @ p.T)
        v_off += dv
    return np.concatenate(outs, axis=0)


def forward_block(block: DecoderBlock, x, capture: Iterable[str] | None = None):
    """One pre-norm decoder block.

    ``capture`` names projections whose exact input matrix should be returned
    (the tensor the projection multiplies, after norms and element-wise ops).
    Returns ``(output, captured)``.
    """
    x = _f64(x)
    if x.ndim != 2 or x.shape[0] != block.d_model:
        raise ShapeError(f"block input must be {block.d_model} x seq, got {x.shape}")
    wanted = set(capture or ())
    unknown = wanted - set(block.projections())
    if unknown:
        raise ShapeError(f"unknown capture taps {sorted(unknown)}")
    seen: dict = {}

    h = apply_norm(block.family, block.norms, "norm1", x)
    q = _linear(block, "q_proj", h, seen)
    k = _linear(block, "k_proj", h, seen)
    v = _linear(block, "v_proj", h, seen)
    attn = attention_mix(block, q, k, v)
    x = x + _linear(block, "o_proj", attn, seen)

    h2 = apply_norm(block.family, block.norms, "norm2", x)
    if block.family is Family.OPT:
        a = np.maximum(_linear(block, "fc1", h2, seen), 0.0)
        m = _linear(block, "fc2", a, seen)
    else:
        up = _linear(block, "up_proj", h2, seen)
        gate = _linear(block, "gate_proj", h2, seen)
        a = up * (gate * expit(gate))
        m = _linear(block, "down_proj", a, seen)
    out = x + m
    return out, {name: seen[name] for name in wanted}


def check_tokens(model: DecoderModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise InputError("empty token sequence")
    if tokens.size > model.spec.max_seq:
        raise InputError(f"sequence length {tokens.size} exceeds max_seq {model.spec.max_seq}")
    if tokens.min() < 0 or tokens.max() >= model.spec.vocab:
        raise InputError(f"token ids must lie in [0, {model.spec.vocab})")
    return tokens


def embed_tokens(model: DecoderModel, tokens) -> np.ndarray:
    tokens = check_tokens(model, tokens)
    return _f64(model.embed[tokens].T) + _f64(model.pos_embed[: tokens.size].T)


def logits_from_hidden(model: DecoderModel, x: np.ndarray) -> np.ndarray:
    h = apply_norm(model.spec.family, {f"final_norm.{k}": v for k, v in model.final_norm.items()}, "final_norm", x)
    return _f64(model.unembed) @ h


def forward_model(model: DecoderModel, tokens, return_hidden: bool = False):
    """Logits (vocab x seq). With ``return_hidden`` also every block's output."""
    x = embed_tokens(model, tokens)
    hidden = []
    for block in model.blocks:
        x, _ = forward_block(block, x)
        hidden.append(x)
    logits = logits_from_hidden(model, x)
    if return_hidden:
        return logits, hidden
    return logits


# --------------------------------------------------------------- coupling


@dataclass(frozen=True)
class PrunableGroup:
    kind: GroupKind
    column_target: str | None
    row_targets: tuple
    n_channels: int
    params_per_channel: int  # weights + bias elements
    weights_per_channel: int  # weights only (sparsity accounting)
    head_partition: tuple | None = None  # channel count per head, when head-aligned

    @property
    def layers(self) -> tuple:
        lead = (self.column_target,) if self.column_target else ()
        return lead + tuple(self.row_targets)


@dataclass(frozen=True)
class CouplingGraph:
    groups: tuple
    skip_list: tuple = field(default=())

    def group(self, kind: GroupKind) -> PrunableGroup:
        for g in self.groups:
            if g.kind == kind:
                return g
        raise KeyError(kind)


def _coupled_group(block: DecoderBlock, kind, column_target, row_targets, head_partition=None):
    w = block.weights
    n = w[row_targets[0]].shape[0]
    if column_target is not None:
        n_col = w[column_target].shape[1]
        if n_col != n:
            raise ConsistencyError(f"{column_target} cols {n_col} != {row_targets[0]} rows {n}")
    weights = sum(w[r].shape[1] for r in row_targets)
    if column_target is not None:
        weights += w[column_target].shape[0]
    biases = sum(1 for r in row_targets if r in block.biases)
    return PrunableGroup(kind, column_target, tuple(row_targets), n, weights + biases, weights, head_partition)


def coupling_graph(block: DecoderBlock, skip_qk: bool = True) -> CouplingGraph:
    """Groups of coupled rows/columns that can be removed together."""
    fam = block.family
    groups = [
        _coupled_group(block, GroupKind.MLP_CHANNEL, MLP_OUT[fam], MLP_IN[fam]),
        _coupled_group(block, GroupKind.ATTN_VO_CHANNEL, "o_proj", ("v_proj",), tuple(block.v_head_dims)),
    ]
    skip = ()
    if skip_qk:
        skip = ("q_proj", "k_proj")
    else:
        groups.append(
            _coupled_group(
                block, GroupKind.ATTN_QK_CHANNEL, None, ("q_proj", "k_proj"),
                (block.qk_head_dim,) * block.n_heads,
            )
        )
    graph = CouplingGraph(tuple(groups), skip)
    covered = [name for g in groups for name in g.layers] + list(skip)
    if sorted(covered) != sorted(block.projections()):
        raise ConsistencyError(f"coupling graph covers {sorted(covered)}")
    return graph


def zero_group(block: DecoderBlock, group: PrunableGroup, channels) -> DecoderBlock:
    """Copy of ``block`` with the group's column-target columns zeroed.

    Nothing else changes, so the coupled upstream rows still compute but no
    longer reach the output. Groups without a column target (Q/K) have their
    rows and bias elements zeroed instead.
    """
    out = block.copy()
    channels = np.asarray(channels, dtype=np.int64)
    if group.column_target is not None:
        out.weights[group.column_target][:, channels] = 0.0
    else:
        for name in group.row_targets:
            out.weights[name][channels, :] = 0.0
            if name in out.biases:
                out.biases[name][channels] = 0.0
    return out
