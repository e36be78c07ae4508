"""Sparsity planning, column scoring, coupled removal and least-squares restoration."""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import ActivationCache, LayerStats, tap_name
from .errors import (
    ColpruneError,
    ConsistencyError,
    InfeasibleSparsityError,
    NotPositiveDefinite,
    PlanError,
    ShapeError,
)
from .linalg import col_l1_norms, gather_cols, gather_rows, spd_solve
from .model import (
    DecoderBlock,
    DecoderModel,
    GroupKind,
    PrunableGroup,
    coupling_graph,
    forward_block,
    zero_group,
)

DEFAULT_DELTA_REL = 1e-2
# coupling exactness is re-checked after every surgery on this many tokens
_VERIFY_TOKENS = 16
_VERIFY_RTOL = 1e-12


class PruneMode(str, enum.Enum):
    FASP = "fasp"
    ABLATE_ALL_COLUMNS = "ablate_all_columns"
    ABLATE_PRUNE_QK = "ablate_prune_qk"
    NO_RESTORE = "no_restore"
    BIAS_ONLY = "bias_only"


# ------------------------------------------------------------------- plans


@dataclass
class GroupPlan:
    block: int
    group: PrunableGroup
    remove_count: int
    head_aligned: bool = True

    @property
    def key(self) -> str:
        if self.group.kind is GroupKind.COLUMNS:
            return tap_name(self.block, self.group.column_target)
        return f"blocks.{self.block}.{self.group.kind.value}"

    @property
    def step(self) -> int:
        """Granularity of remove_count (one channel per head for head-aligned groups)."""
        if self.head_aligned and self.group.head_partition is not None:
            return len(self.group.head_partition)
        return 1

    @property
    def max_count(self) -> int:
        """Largest admissible remove_count: every group (and head) keeps a channel."""
        part = self.group.head_partition
        if self.head_aligned and part is not None:
            return len(part) * (min(part) - 1)
        return self.group.n_channels - 1


@dataclass
class SparsityPlan:
    target_sparsity: float
    scale_factor: float
    entries: list
    params_total: int
    params_prunable: int
    params_removed_planned: int
    mode: PruneMode = PruneMode.FASP
    skip_qk: bool = True

    @property
    def remove_counts(self) -> dict:
        return {e.key: e.remove_count for e in self.entries}

    @property
    def channel_fraction(self) -> float:
        """Per-group channel fraction before integer rounding."""
        return self.target_sparsity * self.scale_factor

    @property
    def planned_sparsity(self) -> float:
        return self.params_removed_planned / self.params_total if self.params_total else 0.0

    def for_block(self, b: int) -> list:
        return [e for e in self.entries if e.block == b]

    def to_dict(self) -> dict:
        return {
            "target_sparsity": self.target_sparsity,
            "scale_factor": self.scale_factor,
            "channel_fraction": self.channel_fraction,
            "mode": self.mode.value,
            "skip_qk": self.skip_qk,
            "remove_counts": self.remove_counts,
            "params_total": self.params_total,
            "params_prunable": self.params_prunable,
            "params_removed_planned": self.params_removed_planned,
            "planned_sparsity": self.planned_sparsity,
        }


def column_groups(block: DecoderBlock) -> list:
    """One uncoupled group per projection: its input columns."""
    groups = []
    for name in block.projections():
        rows, cols = block.weights[name].shape
        groups.append(PrunableGroup(GroupKind.COLUMNS, name, (), cols, rows, rows))
    return groups


def _mode_groups(block: DecoderBlock, mode: PruneMode, skip_qk: bool) -> tuple:
    if mode is PruneMode.ABLATE_ALL_COLUMNS:
        return column_groups(block), ()
    if mode is PruneMode.ABLATE_PRUNE_QK:
        skip_qk = False
    graph = coupling_graph(block, skip_qk=skip_qk)
    return list(graph.groups), graph.skip_list


def plan_sparsity(
    model: DecoderModel,
    s: float,
    skip_qk: bool = True,
    mode: PruneMode = PruneMode.FASP,
    head_aligned: bool = True,
) -> SparsityPlan:
    """Turn a global sparsity target into per-group channel-removal counts.

    With Q/K skipped, the remaining groups are pruned at the channel fraction
    ``s * params_total / params_prunable`` so the whole decoder stack still
    loses a fraction ``s`` of its projection weights.
    """
    mode = PruneMode(mode)
    if not 0.0 <= s < 1.0:
        raise InfeasibleSparsityError(None, f"sparsity {s} outside [0, 1)")
    entries = []
    skipped = False
    for b, block in enumerate(model.blocks):
        groups, skip = _mode_groups(block, mode, skip_qk)
        skipped = skipped or bool(skip)
        entries.extend(GroupPlan(b, g, 0, head_aligned) for g in groups)

    total = model.block_param_count()
    prunable = sum(e.group.n_channels * e.group.weights_per_channel for e in entries)
    scale = total / prunable if (skipped and prunable) else 1.0
    frac = s * scale

    for e in entries:
        count = int(round(frac * e.group.n_channels))
        count -= count % e.step
        if count > e.max_count:
            raise InfeasibleSparsityError(
                e.key,
                f"sparsity {s} needs {count} of {e.group.n_channels} channels from {e.key} "
                f"(at most {e.max_count} removable)",
            )
        e.remove_count = count

    target = s * total

    def removed():
        return sum(e.remove_count * e.group.weights_per_channel for e in entries)

    # greedy integer fix-up, largest groups first
    order = sorted(entries, key=lambda e: (-e.group.n_channels * e.group.weights_per_channel, e.block))
    current = removed()
    while True:
        best = None
        for e in order:
            for direction in (1, -1):
                new_count = e.remove_count + direction * e.step
                if not 0 <= new_count <= e.max_count:
                    continue
                delta = direction * e.step * e.group.weights_per_channel
                if abs(current + delta - target) < abs(current - target):
                    best = (e, new_count, delta)
                    break
            if best:
                break
        if best is None:
            break
        e, new_count, delta = best
        e.remove_count = new_count
        current += delta

    return SparsityPlan(
        target_sparsity=s,
        scale_factor=scale,
        entries=entries,
        params_total=total,
        params_prunable=prunable,
        params_removed_planned=current,
        mode=mode,
        skip_qk=skip_qk and mode is not PruneMode.ABLATE_PRUNE_QK,
    )


# ----------------------------------------------------------------- scoring


def score_columns(w, featnorm) -> np.ndarray:
    """Column sums of ``|W| * featnorm`` (feature norm broadcast along rows). O(mn)."""
    w = np.asarray(w)
    featnorm = np.asarray(featnorm, dtype=np.float64)
    if w.ndim != 2 or featnorm.shape != (w.shape[1],):
        raise ShapeError(f"score_columns: weight {w.shape}, featnorm {featnorm.shape}")
    return col_l1_norms(w) * featnorm


def score_rows(w, featnorm) -> np.ndarray:
    """Row sums of ``|W| * featnorm``: the importance of each output channel."""
    w = np.asarray(w, dtype=np.float64)
    featnorm = np.asarray(featnorm, dtype=np.float64)
    if w.ndim != 2 or featnorm.shape != (w.shape[1],):
        raise ShapeError(f"score_rows: weight {w.shape}, featnorm {featnorm.shape}")
    return np.abs(w) @ featnorm


@dataclass
class PruneMask:
    group: str
    survivors: np.ndarray
    removed: np.ndarray

    def __post_init__(self):
        self.survivors = np.asarray(self.survivors, dtype=np.int64)
        self.removed = np.asarray(self.removed, dtype=np.int64)
        both = np.concatenate([self.survivors, self.removed])
        if (
            np.any(np.diff(self.survivors) <= 0)
            or np.any(np.diff(self.removed) <= 0)
            or not np.array_equal(np.sort(both), np.arange(both.size))
        ):
            raise PlanError(f"mask for {self.group}: survivors/removed must partition 0..n-1, sorted")

    @property
    def n_channels(self) -> int:
        return self.survivors.size + self.removed.size

    @classmethod
    def keep_all(cls, n: int, group: str = "") -> "PruneMask":
        return cls(group, np.arange(n), np.arange(0))


def select_channels(scores, remove_count: int, head_partition: Sequence[int] | None = None, group: str = "") -> PruneMask:
    """Remove the ``remove_count`` lowest-scoring channels.

    With ``head_partition`` (channels per head, in order) the removal is split
    equally across heads. Ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if not 0 <= remove_count < max(n, 1):
        raise PlanError(f"cannot remove {remove_count} of {n} channels")
    if head_partition is None:
        removed = np.sort(np.argsort(scores, kind="stable")[:remove_count])
    else:
        sizes = list(head_partition)
        if sum(sizes) != n:
            raise PlanError(f"head partition {sizes} does not cover {n} channels")
        if remove_count % len(sizes):
            raise PlanError(f"remove_count {remove_count} not divisible by {len(sizes)} heads")
        per_head = remove_count // len(sizes)
        parts = []
        start = 0
        for size in sizes:
            if per_head >= size and per_head:
                raise PlanError(f"cannot remove {per_head} of {size} channels in a head")
            local = np.argsort(scores[start : start + size], kind="stable")[:per_head]
            parts.append(start + local)
            start += size
        removed = np.sort(np.concatenate(parts)) if parts else np.arange(0)
    survivors = np.setdiff1d(np.arange(n), removed, assume_unique=True)
    return PruneMask(group, survivors, removed)


# ----------------------------------------------------------------- surgery


def _survivor_heads(head_dims: Sequence[int], survivors: np.ndarray) -> tuple:
    edges = np.cumsum([0, *head_dims])
    return tuple(int(np.count_nonzero((survivors >= lo) & (survivors < hi))) for lo, hi in zip(edges[:-1], edges[1:]))


def apply_coupled_prune(block: DecoderBlock, group: PrunableGroup, mask: PruneMask) -> DecoderBlock:
    """Physically remove the group's removed channels; returns a new block."""
    if mask.n_channels != group.n_channels:
        raise PlanError(f"mask covers {mask.n_channels} channels, group has {group.n_channels}")
    if group.kind is GroupKind.COLUMNS:
        raise PlanError("uncoupled column groups are zeroed, not removed; use zero_columns")
    out = block.copy()
    keep = mask.survivors
    if group.column_target is not None:
        out.weights[group.column_target] = gather_cols(block.weights[group.column_target], keep)
    for name in group.row_targets:
        out.weights[name] = gather_rows(block.weights[name], keep)
        if name in block.biases:
            out.biases[name] = block.biases[name][keep].copy()
    if group.kind is GroupKind.ATTN_VO_CHANNEL:
        out.v_head_dims = _survivor_heads(block.v_head_dims, keep)
    elif group.kind is GroupKind.ATTN_QK_CHANNEL:
        per_head = _survivor_heads((block.qk_head_dim,) * block.n_heads, keep)
        if len(set(per_head)) != 1:
            raise PlanError(f"Q/K pruning must keep equal channels per head, got {per_head}")
    out.validate()
    return out


def zero_columns(w, removed) -> np.ndarray:
    w = np.array(w, copy=True)
    w[:, np.asarray(removed, dtype=np.int64)] = 0
    return w


# ------------------------------------------------------------- restoration


def _restore_f64(w_dense, survivors, gram, delta_rel):
    w = np.asarray(w_dense, dtype=np.float64)
    g = np.asarray(gram, dtype=np.float64)
    rhs = (w @ g)[:, survivors]
    a = g[np.ix_(survivors, survivors)]
    delta = delta_rel * float(np.mean(np.diag(g))) if g.size else 0.0
    w_star = spd_solve(a + delta * np.eye(survivors.size) if delta else a, rhs)
    if delta:
        # The objective separates over output rows; per row, up to a constant,
        # it is  y G_MM y^T - 2 y . rhs.  Damping can leave a row marginally
        # worse than simply keeping its surviving weights, so keep those instead.
        w_m = w[:, survivors]

        def row_obj(y):
            return np.einsum("ij,jk,ik->i", y, a, y) - 2.0 * np.einsum("ij,ij->i", y, rhs)

        worse = row_obj(w_star) > row_obj(w_m)
        w_star[worse] = w_m[worse]
    return w_star


def restore_weights(w_dense, mask: PruneMask, stats, delta_rel: float = DEFAULT_DELTA_REL) -> np.ndarray:
    """Least-squares update of the surviving columns.

    Returns the m x |M| matrix minimizing ``||W* X_M - W X||_F`` (ridge-damped
    by ``delta_rel * mean(diag(XX^T))``), in ``w_dense``'s dtype. With damping,
    any output row whose damped solution fits the calibration data worse than
    its unrestored weights keeps the unrestored weights.
    ``stats`` is a :class:`LayerStats` with a Gram, or the Gram itself.
    """
    gram = stats.gram if isinstance(stats, LayerStats) else stats
    if gram is None:
        raise ColpruneError("restoration needs a Gram matrix for this layer")
    w_dense = np.asarray(w_dense)
    n = w_dense.shape[1]
    if np.shape(gram) != (n, n):
        raise ShapeError(f"Gram {np.shape(gram)} does not match weight with {n} columns")
    if mask.n_channels != n:
        raise PlanError(f"mask covers {mask.n_channels} channels, weight has {n} columns")
    if mask.survivors.size == 0:
        raise PlanError("restoration needs at least one surviving column")
    try:
        w_star = _restore_f64(w_dense, mask.survivors, gram, delta_rel)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite(
            exc.pivot,
            f"restoration system not positive definite at pivot {exc.pivot}; raise delta_rel (now {delta_rel})",
        ) from exc
    return w_star.astype(w_dense.dtype if w_dense.dtype.kind == "f" else np.float64)


def reconstruction_error(w_dense, w_pruned, survivors, gram) -> float:
    """Relative objective ``||W' X_M - W X||_F / ||W X||_F`` evaluated via the Gram."""
    w = np.asarray(w_dense, dtype=np.float64)
    r = -w.copy()
    r[:, survivors] += np.asarray(w_pruned, dtype=np.float64)
    g = np.asarray(gram, dtype=np.float64)
    num = max(float(np.einsum("ij,jk,ik->", r, g, r)), 0.0)
    den = float(np.einsum("ij,jk,ik->", w, g, w))
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


# ---------------------------------------------------------------- pipeline


@dataclass
class PruneReport:
    mode: PruneMode
    plan: SparsityPlan
    blocks: list = field(default_factory=list)
    params_total: int = 0
    params_removed: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def achieved_sparsity(self) -> float:
        return self.params_removed / self.params_total if self.params_total else 0.0

    def to_dict(self) -> dict:
        """Deterministic content (no timings; see :meth:`meta`)."""
        return {
            "mode": self.mode.value,
            "plan": self.plan.to_dict(),
            "blocks": self.blocks,
            "accounting": {
                "params_total": self.params_total,
                "params_removed": self.params_removed,
                "achieved_sparsity": self.achieved_sparsity,
                "target_sparsity": self.plan.target_sparsity,
            },
        }

    def meta(self) -> dict:
        return {"timings": self.timings}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_coupling(before: DecoderBlock, after: DecoderBlock, group, removed, x) -> None:
    zeroed, _ = forward_block(zero_group(before, group, removed), x)
    pruned, _ = forward_block(after, x)
    err = np.linalg.norm(pruned - zeroed) / max(np.linalg.norm(zeroed), 1e-300)
    if err > _VERIFY_RTOL:
        raise ConsistencyError(f"coupled removal changed block output (rel err {err:.3e})")


def _score_summary(scores: np.ndarray) -> dict:
    return {"min": float(scores.min()), "max": float(scores.max()), "mean": float(scores.mean())}


def prune_model(
    model: DecoderModel,
    plan: SparsityPlan,
    samples: Sequence,
    mode: PruneMode | None = None,
    delta_rel: float = DEFAULT_DELTA_REL,
    restore: bool = True,
    verify: bool = True,
):
    """Prune ``model`` block by block; returns ``(pruned_model, report)``.

    Per block: statistics are collected on the current (already pruned)
    prefix, channels are scored and selected, coupled rows/columns removed,
    and the down/fc2 and o_proj weights restored by least squares. ``restore``
    only matters for the ablation modes; NO_RESTORE and BIAS_ONLY never
    update surviving weights.
    """
    mode = PruneMode(mode if mode is not None else plan.mode)
    if len(plan.entries) and max(e.block for e in plan.entries) >= len(model.blocks):
        raise PlanError("plan refers to blocks the model does not have")
    do_restore = restore and mode not in (PruneMode.NO_RESTORE, PruneMode.BIAS_ONLY)
    bias_only = mode is PruneMode.BIAS_ONLY
    model = model.copy()
    report = PruneReport(mode, plan, params_total=model.block_param_count())
    t_start = time.perf_counter()
    cache = ActivationCache(model, samples)
    t_stats = 0.0

    for b, block in enumerate(model.blocks):
        entries = [e for e in plan.for_block(b) if e.remove_count > 0]
        block_rec = {"block": b, "groups": []}
        if not entries:
            report.blocks.append(block_rec)
            if b + 1 < len(model.blocks):
                cache.advance(block)
            continue

        taps, grams, moments = [], [], []
        for e in entries:
            g = e.group
            if g.column_target is not None:
                taps.append(g.column_target)
                if do_restore:
                    grams.append(g.column_target)
                if bias_only:
                    moments.append(g.column_target)
            else:
                taps.append(g.row_targets[0])
        t0 = time.perf_counter()
        stats = cache.collect(block, b, taps, gram_taps=grams, first_moment=moments)
        t_stats += time.perf_counter() - t0
        verify_x = cache.states[0][:, :_VERIFY_TOKENS] if (verify and cache.states) else None

        for e in entries:
            g = e.group
            try:
                rec = _prune_group(block, b, e, stats, do_restore, bias_only, delta_rel, verify_x)
            except ColpruneError as exc:
                exc.args = (f"block {b}, {e.key}: {exc}",)
                raise
            block = rec.pop("block_out")
            block_rec["groups"].append(rec)
            report.params_removed += e.remove_count * g.weights_per_channel

        block.validate()
        model.blocks[b] = block
        report.blocks.append(block_rec)
        if b + 1 < len(model.blocks):
            cache.advance(block)

    if mode is not PruneMode.ABLATE_ALL_COLUMNS:
        physical = report.params_total - model.block_param_count()
        if physical != report.params_removed:
            raise ConsistencyError(f"removed {physical} weights, accounted {report.params_removed}")
    if report.params_removed != plan.params_removed_planned:
        raise ConsistencyError("achieved parameter count differs from plan")
    report.timings = {"total_s": time.perf_counter() - t_start, "stats_s": t_stats}
    return model, report


def _prune_group(block, b, entry, stats, do_restore, bias_only, delta_rel, verify_x) -> dict:
    g = entry.group
    partition = g.head_partition if entry.head_aligned else None
    if g.kind is GroupKind.ATTN_QK_CHANNEL:
        fn = stats[tap_name(b, g.row_targets[0])].feature_norms()
        scores = sum(score_rows(block.weights[name], fn) for name in g.row_targets)
    else:
        layer = stats[tap_name(b, g.column_target)]
        scores = score_columns(block.weights[g.column_target], layer.feature_norms())
    mask = select_channels(scores, entry.remove_count, partition, group=entry.key)
    rec = {
        "group": entry.key,
        "kind": g.kind.value,
        "layers": list(g.layers),
        "n_channels": g.n_channels,
        "removed": mask.removed.tolist(),
        "scores": _score_summary(scores),
        "restoration_residual": None,
        "unrestored_residual": None,
    }

    if g.kind is GroupKind.COLUMNS:
        w_dense = block.weights[g.column_target]
        out = block.copy()
        if do_restore:
            w_star = restore_weights(w_dense, mask, layer, delta_rel)
            new = np.zeros_like(w_dense)
            new[:, mask.survivors] = w_star
            out.weights[g.column_target] = new
            rec["restoration_residual"] = reconstruction_error(w_dense, w_star, mask.survivors, layer.gram)
            rec["unrestored_residual"] = reconstruction_error(
                w_dense, w_dense[:, mask.survivors], mask.survivors, layer.gram
            )
        else:
            out.weights[g.column_target] = zero_columns(w_dense, mask.removed)
        rec["block_out"] = out
        return rec

    out = apply_coupled_prune(block, g, mask)
    if verify_x is not None and g.column_target is not None:
        _check_coupling(block, out, g, mask.removed, verify_x)
    if g.column_target is None:
        rec["block_out"] = out
        return rec

    w_dense = block.weights[g.column_target]
    if do_restore:
        w_star = restore_weights(w_dense, mask, layer, delta_rel)
        out.weights[g.column_target] = w_star
        rec["restoration_residual"] = reconstruction_error(w_dense, w_star, mask.survivors, layer.gram)
        rec["unrestored_residual"] = reconstruction_error(
            w_dense, w_dense[:, mask.survivors], mask.survivors, layer.gram
        )
    if bias_only:
        mean_removed = layer.feature_mean()[mask.removed]
        shift = np.asarray(w_dense, dtype=np.float64)[:, mask.removed] @ mean_removed
        base = block.biases.get(g.column_target)
        base = np.zeros(w_dense.shape[0]) if base is None else np.asarray(base, dtype=np.float64)
        out.biases[g.column_target] = (base + shift).astype(w_dense.dtype)
    rec["block_out"] = out
    return rec
