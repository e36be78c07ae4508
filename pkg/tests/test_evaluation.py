import json

import numpy as np
import pytest

from colprune.calibration import synthetic_corpus
from colprune.errors import InputError, OracleError, ShapeError, TrainingError
from colprune.evaluation import (
    gauss_jordan_inverse,
    log_softmax,
    oracle_least_squares,
    oracle_zeroed_forward,
    output_fidelity,
    perplexity,
)
from colprune.model import ArchSpec, GroupKind, build_model, coupling_graph, forward_block, forward_model
from colprune.prune import PruneMask, apply_coupled_prune, plan_sparsity, prune_model, restore_weights
from colprune.training import train_toy

from conftest import make_model


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def constant_logit_model(vocab, family="llama"):
    m = build_model(ArchSpec(family, 4, 8, 1, 1, vocab, 16), 0)
    m.unembed[:] = 0
    return m


# -------------------------------------------------------------- perplexity


def test_uniform_logits_give_vocab_perplexity():
    m = constant_logit_model(37)
    res = perplexity(m, np.arange(100) % 37, 16)
    assert res.perplexity == pytest.approx(37, rel=1e-6)
    # 100 tokens in windows of 16: six full windows (15 predictions) plus one of 4 (3)
    assert res.token_count == 6 * 15 + 3


def test_confident_model_perplexity_near_one():
    """Two-token vocab, alternating stream, unembedding tied to a huge multiple of the embedding."""
    m = build_model(ArchSpec("llama", 2, 4, 1, 0, 2, 16), 0)
    m.pos_embed[:] = 0
    m.embed[:] = np.array([[1.0, 0.0], [0.0, 1.0]])
    # token 0 predicts 1 and vice versa
    m.unembed[:] = 1e3 * np.array([[0.0, 1.0], [1.0, 0.0]])
    res = perplexity(m, np.arange(32) % 2, 16)
    assert 1.0 <= res.perplexity < 1.0 + 1e-6


def test_trailing_single_token_dropped():
    m = constant_logit_model(5)
    assert perplexity(m, np.arange(17) % 5, 16).token_count == 15


@pytest.mark.parametrize("toks,seq", [([1], 8), ([], 8), ([1, 2, 3], 1)])
def test_perplexity_input_errors(toks, seq):
    with pytest.raises(InputError):
        perplexity(constant_logit_model(5), toks, seq)


def test_zero_sparsity_same_perplexity(small_model):
    toks = np.random.default_rng(0).integers(0, 50, 200)
    samples = [toks[:16], toks[16:32]]
    pruned, _ = prune_model(small_model, plan_sparsity(small_model, 0.0), samples)
    a = perplexity(small_model, toks, 32).perplexity
    b = perplexity(pruned, toks, 32).perplexity
    assert abs(a - b) <= 1e-10 * a


def test_argmax_stream_bound(small_model):
    toks = [3]
    for _ in range(31):
        toks.append(int(np.argmax(forward_model(small_model, toks)[:, -1])))
    assert perplexity(small_model, toks, 32).perplexity <= small_model.spec.vocab


def test_log_softmax_stable():
    z = np.array([[1e4, -1e4], [0.0, 1e4], [-1e4, 0.0]])
    out = log_softmax(z, axis=0)
    assert np.isfinite(out).all()
    assert np.allclose(np.exp(out).sum(axis=0), 1.0)


def test_eval_result_json():
    res = perplexity(constant_logit_model(5), np.arange(10) % 5, 8)
    d = json.loads(res.to_json())
    assert d["perplexity"] >= 1 and d["token_count"] == 8


# ---------------------------------------------------------------- fidelity


def test_fidelity_self(small_model):
    fid = output_fidelity(small_model, small_model, [np.arange(10)])
    assert fid["mean_logit_frobenius_gap"] == 0.0
    assert all(c == pytest.approx(1.0, abs=1e-12) for c in fid["block_cosine"])


def test_fidelity_zero_sparsity(small_model):
    pruned, _ = prune_model(small_model, plan_sparsity(small_model, 0.0), [np.arange(16)])
    fid = output_fidelity(small_model, pruned, [np.arange(20) % 50])
    assert fid["mean_logit_frobenius_gap"] <= 1e-10
    assert all(abs(c - 1) <= 1e-10 for c in fid["block_cosine"])


def test_fidelity_interface_mismatch():
    with pytest.raises(ShapeError):
        output_fidelity(make_model("opt", vocab=50), make_model("opt", vocab=40), [np.arange(5)])


# ----------------------------------------------------------------- oracles


def test_gauss_jordan_inverse():
    a = np.array([[0.0, 2.0], [1.0, 1.0]])  # needs a row swap
    assert np.allclose(gauss_jordan_inverse(a) @ a, np.eye(2))
    with pytest.raises(OracleError):
        gauss_jordan_inverse(np.ones((2, 2)))


def test_oracle_all_survivors_returns_w():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 5))
    x = rng.standard_normal((5, 30))
    assert rel(oracle_least_squares(w, x, np.arange(5)), w) <= 1e-10


def test_oracle_dead_feature():
    w = np.array([[1.0, 1.0]])
    x = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert np.allclose(oracle_least_squares(w, x, [0]), [[1.0]])


def test_oracle_singular_needs_ridge():
    w = np.ones((1, 2))
    x = np.zeros((2, 3))
    with pytest.raises(OracleError):
        oracle_least_squares(w, x, [0, 1])
    assert np.allclose(oracle_least_squares(w, x, [0, 1], ridge=1e-6), 0.0)


def test_oracle_agrees_with_restore():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(2, 40))
        w = rng.standard_normal((int(rng.integers(1, 16)), n))
        x = rng.standard_normal((n, int(rng.integers(n, 300))))
        surv = np.sort(rng.choice(n, int(rng.integers(1, n + 1)), replace=False))
        mask = PruneMask("g", surv, np.setdiff1d(np.arange(n), surv))
        ours = restore_weights(w, mask, x @ x.T, delta_rel=0.0)
        assert rel(ours, oracle_least_squares(w, x, surv)) <= 1e-7


def test_zeroed_forward_empty_removal(family):
    blk = make_model(family, blocks=1).blocks[0]
    x = np.random.default_rng(2).standard_normal((16, 6))
    grp = coupling_graph(blk).group(GroupKind.MLP_CHANNEL)
    assert np.array_equal(oracle_zeroed_forward(blk, grp, [], x), forward_block(blk, x)[0])


def test_zeroed_forward_all_mlp_channels_leaves_fc2_bias():
    blk = make_model("opt", blocks=1).blocks[0]
    x = np.random.default_rng(3).standard_normal((16, 6))
    grp = coupling_graph(blk).group(GroupKind.MLP_CHANNEL)
    out = oracle_zeroed_forward(blk, grp, np.arange(32), x)
    no_mlp = blk.copy()
    no_mlp.weights["fc2"][:] = 0
    no_mlp.biases["fc2"][:] = 0
    after_attn = forward_block(no_mlp, x)[0]
    expected = after_attn + blk.biases["fc2"].astype(np.float64)[:, None]
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_zeroed_forward_matches_surgery(family):
    rng = np.random.default_rng(4)
    blk = make_model(family, blocks=1).blocks[0]
    grp = coupling_graph(blk).group(GroupKind.MLP_CHANNEL)
    removed = np.sort(rng.choice(32, 11, replace=False))
    mask = PruneMask("g", np.setdiff1d(np.arange(32), removed), removed)
    x = rng.standard_normal((16, 8))
    pruned = forward_block(apply_coupled_prune(blk, grp, mask), x)[0]
    assert rel(pruned, oracle_zeroed_forward(blk, grp, removed, x)) <= 1e-12


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def toy_setup():
    spec = ArchSpec("opt", 16, 32, 2, 1, 40, 32)
    corpus = synthetic_corpus(20000, 40, seed=0)
    return build_model(spec, 0), corpus


def test_train_zero_steps_unchanged(toy_setup):
    m, corpus = toy_setup
    out = train_toy(m, corpus, 0)
    a, b = m.tensors(), out.tensors()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_train_deterministic(toy_setup):
    m, corpus = toy_setup
    a = train_toy(m, corpus, 20, lr=0.5, seed=3)
    b = train_toy(m, corpus, 20, lr=0.5, seed=3)
    ta, tb = a.tensors(), b.tensors()
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


def test_train_reduces_perplexity(toy_setup):
    m, corpus = toy_setup
    held_out = synthetic_corpus(4000, 40, seed=0, stream=1)
    trained, losses = train_toy(m, corpus, 500, lr=1.0, seed=0, return_losses=True)
    assert np.mean(losses[-20:]) < losses[0]
    assert perplexity(trained, held_out, 32).perplexity < perplexity(m, held_out, 32).perplexity


def test_train_divergence_is_error(toy_setup):
    m, corpus = toy_setup
    with pytest.raises(TrainingError):
        train_toy(m, corpus, 5, lr=float("nan"))


def test_train_size_limit():
    with pytest.raises(ShapeError):
        train_toy(make_model("opt", d=128, heads=2, blocks=1), np.arange(100) % 50, 1)
