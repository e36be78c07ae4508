"""Calibration corpus handling and per-layer activation statistics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusError, ResourceError, ShapeError, StatsLookupError
from .linalg import gram_accumulate
from .model import DecoderModel, embed_tokens, forward_block

DEFAULT_MAX_GRAM_DIM = 16384


@dataclass
class CalibConfig:
    n_samples: int = 32
    seq_len: int = 128
    seed: int = 0
    corpus_path: str | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")


# ------------------------------------------------------------------ corpus


def read_corpus(path) -> np.ndarray:
    """Load token ids from ``.tokens`` (little-endian u32) or ``.txt`` (whitespace ints)."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file {path} does not exist")
    if path.suffix == ".tokens":
        raw = path.read_bytes()
        if len(raw) % 4:
            raise CorpusError(f"{path}: size {len(raw)} is not a multiple of 4")
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if path.suffix == ".txt":
        try:
            return np.array(path.read_text().split(), dtype=np.int64)
        except ValueError as exc:
            raise CorpusError(f"{path}: non-integer token ({exc})") from exc
    raise CorpusError(f"{path}: unknown corpus extension (expected .tokens or .txt)")


def write_corpus(tokens, path) -> Path:
    path = Path(path)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= 2**32):
        raise CorpusError("token ids must fit in u32")
    if path.suffix == ".tokens":
        path.write_bytes(tokens.astype("<u4").tobytes())
    elif path.suffix == ".txt":
        path.write_text(" ".join(map(str, tokens.tolist())) + "\n")
    else:
        raise CorpusError(f"{path}: unknown corpus extension (expected .tokens or .txt)")
    return path


def synthetic_corpus(
    n_tokens: int,
    vocab: int,
    seed: int = 0,
    stream: int = 0,
    alpha: float = 1.2,
    copy_prob: float = 0.25,
    copy_lag: int = 4,
    n_states: int = 32,
) -> np.ndarray:
    """Seeded Zipf-distributed token stream with sequential structure.

    Each token is, with probability ``copy_prob``, a copy of the token
    ``copy_lag`` positions back; otherwise it is drawn from a Zipf(alpha) law
    over a permutation of the vocabulary. The permutation is picked by the
    previous token's state, one of ``n_states`` random token classes.
    ``seed`` fixes the generating process, ``stream`` the draw from it, so
    training and held-out text share statistics but not tokens.
    """
    if vocab < 2 or n_tokens < 1:
        raise CorpusError("need vocab >= 2 and n_tokens >= 1")
    prng = np.random.default_rng(seed)
    perms = np.argsort(prng.random((n_states, vocab)), axis=1)
    state = prng.integers(0, n_states, size=vocab)
    ranks = np.arange(1, vocab + 1, dtype=np.float64) ** -alpha
    cdf = np.cumsum(ranks / ranks.sum())
    cdf[-1] = 1.0

    rng = np.random.default_rng([seed, stream])
    z = np.searchsorted(cdf, rng.random(n_tokens), side="right")
    copy = rng.random(n_tokens) < copy_prob
    out = np.empty(n_tokens, dtype=np.int64)
    out[0] = perms[0, z[0]]
    zl, cl = z.tolist(), copy.tolist()
    pl = perms[state].tolist()
    buf = out.tolist()
    for t in range(1, n_tokens):
        if cl[t] and t >= copy_lag:
            buf[t] = buf[t - copy_lag]
        else:
            buf[t] = pl[buf[t - 1]][zl[t]]
    return np.asarray(buf, dtype=np.int64)


def sample_corpus(cfg: CalibConfig, vocab: int, tokens=None) -> list:
    """Draw ``cfg.n_samples`` contiguous windows uniformly at random (seeded)."""
    if tokens is None:
        if cfg.corpus_path is None:
            raise CorpusError("no corpus given")
        tokens = read_corpus(cfg.corpus_path)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < cfg.seq_len:
        raise CorpusError(f"corpus has {tokens.size} tokens, fewer than seq_len={cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise CorpusError(f"corpus token ids must lie in [0, {vocab})")
    rng = np.random.default_rng(cfg.seed)
    starts = rng.integers(0, tokens.size - cfg.seq_len + 1, size=cfg.n_samples)
    return [tokens[s : s + cfg.seq_len].copy() for s in starts]


# ------------------------------------------------------------------- stats


@dataclass
class LayerStats:
    feat_sq_sum: np.ndarray
    gram: np.ndarray | None = None
    feat_sum: np.ndarray | None = None
    token_count: int = 0

    @classmethod
    def empty(cls, n: int, gram: bool, first_moment: bool = False, max_gram_dim: int = DEFAULT_MAX_GRAM_DIM):
        if gram and n > max_gram_dim:
            raise ResourceError(f"Gram matrix of dim {n} exceeds cap {max_gram_dim}")
        return cls(
            feat_sq_sum=np.zeros(n),
            gram=np.zeros((n, n)) if gram else None,
            feat_sum=np.zeros(n) if first_moment else None,
        )

    @property
    def dim(self) -> int:
        return self.feat_sq_sum.shape[0]

    def add(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.dim:
            raise ShapeError(f"stats of dim {self.dim} cannot absorb chunk {x.shape}")
        self.feat_sq_sum += np.einsum("ij,ij->i", x, x)
        if self.gram is not None:
            self.gram = gram_accumulate(self.gram, x)
        if self.feat_sum is not None:
            self.feat_sum += x.sum(axis=1)
        self.token_count += x.shape[1]

    def feature_norms(self) -> np.ndarray:
        return np.sqrt(self.feat_sq_sum)

    def feature_mean(self) -> np.ndarray:
        if self.feat_sum is None:
            raise StatsLookupError("first moments were not accumulated")
        return self.feat_sum / max(self.token_count, 1)


class CalibStats(dict):
    """Mapping ``"blocks.{b}.{projection}"`` -> :class:`LayerStats`."""

    def __getitem__(self, layer):
        try:
            return dict.__getitem__(self, layer)
        except KeyError:
            raise StatsLookupError(f"layer {layer!r} was not tapped") from None


def feature_norms(stats: CalibStats, layer: str) -> np.ndarray:
    return stats[layer].feature_norms()


def tap_name(block: int, projection: str) -> str:
    return f"blocks.{block}.{projection}"


def split_tap(tap: str) -> tuple:
    try:
        head, b, proj = tap.split(".")
        if head != "blocks":
            raise ValueError
        return int(b), proj
    except ValueError:
        raise ShapeError(f"bad tap name {tap!r}; expected 'blocks.<i>.<projection>'") from None


class ActivationCache:
    """Block inputs for every calibration sample, advanced one block at a time.

    After pruning block ``b`` the caller advances the cache through the
    updated block, so statistics for block ``b+1`` reflect the pruned prefix.
    """

    def __init__(self, model: DecoderModel, samples: Sequence):
        self.states = [embed_tokens(model, s) for s in samples]
        self.position = 0

    def collect(
        self,
        block,
        block_index: int,
        taps: Iterable[str],
        gram_taps: Iterable[str] = (),
        first_moment: Iterable[str] = (),
        max_gram_dim: int = DEFAULT_MAX_GRAM_DIM,
    ) -> CalibStats:
        taps = list(dict.fromkeys(taps))
        gram_taps, first_moment = set(gram_taps), set(first_moment)
        stats = CalibStats()
        for x in self.states:
            _, captured = forward_block(block, x, capture=taps)
            for name in taps:
                key = tap_name(block_index, name)
                if key not in stats:
                    stats[key] = LayerStats.empty(
                        captured[name].shape[0], name in gram_taps, name in first_moment, max_gram_dim
                    )
                stats[key].add(captured[name])
        return stats

    def advance(self, block) -> None:
        self.states = [forward_block(block, x)[0] for x in self.states]
        self.position += 1


def _group_taps(taps: Iterable[str]) -> dict:
    by_block: dict = {}
    for tap in taps:
        b, proj = split_tap(tap)
        by_block.setdefault(b, []).append(proj)
    return by_block


def collect_stats(
    model: DecoderModel,
    samples: Sequence,
    taps: Iterable[str],
    gram_taps: Iterable[str] | None = None,
    first_moment: Iterable[str] = (),
    max_gram_dim: int = DEFAULT_MAX_GRAM_DIM,
) -> CalibStats:
    """Accumulate statistics for ``taps`` (``"blocks.{b}.{projection}"``), block by block.

    Grams are accumulated for ``gram_taps`` (default: every tap).
    """
    taps = list(taps)
    gram_taps = set(taps if gram_taps is None else gram_taps)
    first_moment = set(first_moment)
    by_block = _group_taps(taps)
    for b in by_block:
        if not 0 <= b < len(model.blocks):
            raise ShapeError(f"tap refers to block {b}, model has {len(model.blocks)}")
        unknown = set(by_block[b]) - set(model.blocks[b].projections())
        if unknown:
            raise ShapeError(f"block {b} has no projections {sorted(unknown)}")
    stats = CalibStats()
    cache = ActivationCache(model, samples)
    last = max(by_block, default=-1)
    for b in range(last + 1):
        block = model.blocks[b]
        if b in by_block:
            stats.update(
                cache.collect(
                    block, b, by_block[b],
                    gram_taps={split_tap(t)[1] for t in gram_taps if split_tap(t)[0] == b},
                    first_moment={split_tap(t)[1] for t in first_moment if split_tap(t)[0] == b},
                    max_gram_dim=max_gram_dim,
                )
            )
        if b < last:
            cache.advance(block)
    return stats


def collect_stats_single_pass(model: DecoderModel, samples: Sequence, taps: Iterable[str]) -> CalibStats:
    """Reference collector: one full forward per sample, capturing all taps at once."""
    taps = list(taps)
    by_block = _group_taps(taps)
    stats = CalibStats()
    for s in samples:
        x = embed_tokens(model, s)
        for b, block in enumerate(model.blocks):
            x_next, captured = forward_block(block, x, capture=by_block.get(b, ()))
            for name in by_block.get(b, ()):
                key = tap_name(b, name)
                if key not in stats:
                    stats[key] = LayerStats.empty(captured[name].shape[0], True)
                stats[key].add(captured[name])
            x = x_next
    return CalibStats({t: stats[t] for t in taps})
