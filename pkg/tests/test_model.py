import json

import numpy as np
import pytest

from colprune.checkpoint import ALIGN, load_model, save_model
from colprune.errors import CheckpointError, InputError, ShapeError
from colprune.model import (
    MLP_IN,
    MLP_OUT,
    ArchSpec,
    Family,
    GroupKind,
    apply_norm,
    build_model,
    coupling_graph,
    forward_block,
    forward_model,
    logits_from_hidden,
    embed_tokens,
    zero_group,
)
from colprune.prune import PruneMask, apply_coupled_prune, select_channels

from conftest import make_model


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# ------------------------------------------------------------ construction


def test_build_deterministic(family):
    spec = ArchSpec(family, 8, 16, 2, 1, 20, 16)
    a, b = build_model(spec, 42), build_model(spec, 42)
    ta, tb = a.tensors(), b.tensors()
    assert list(ta) == list(tb)
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


def test_build_seed_matters():
    spec = ArchSpec("opt", 8, 16, 2, 1, 20, 16)
    assert not np.array_equal(build_model(spec, 1).embed, build_model(spec, 2).embed)


def test_spec_divisibility():
    with pytest.raises(ShapeError):
        ArchSpec("opt", 9, 16, 2, 1, 20, 16)


@pytest.mark.parametrize("kw", [{"d_hidden": 0}, {"vocab": 1}])
def test_spec_invariants(kw):
    base = dict(family="llama", d_model=8, d_hidden=16, n_heads=2, n_blocks=1, vocab=20, max_seq=16)
    base.update(kw)
    with pytest.raises(ShapeError):
        ArchSpec(**base)


def test_family_layers():
    opt = make_model("opt", blocks=1).blocks[0]
    llama = make_model("llama", blocks=1).blocks[0]
    assert set(opt.weights) == {"q_proj", "k_proj", "v_proj", "o_proj", "fc1", "fc2"}
    assert set(opt.biases) == set(opt.weights)
    assert set(llama.weights) == {"q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "gate_proj", "down_proj"}
    assert llama.biases == {}
    assert all(w.dtype == np.float32 for w in opt.weights.values())


# -------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_bit_exact(tmp_path, small_model):
    save_model(small_model, tmp_path / "ck")
    loaded = load_model(tmp_path / "ck", spec=small_model.spec)
    a, b = small_model.tensors(), loaded.tensors()
    assert list(a) == list(b)
    for k in a:
        assert a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes(), k


def test_checkpoint_layout(tmp_path, small_model):
    save_model(small_model, tmp_path / "ck")
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    payload = (tmp_path / "ck" / "tensors.bin").read_bytes()
    assert manifest["arch"] == small_model.spec.to_dict()
    for name, rec in manifest["tensors"].items():
        assert rec["dtype"] == "f32"
        assert rec["offset"] % ALIGN == 0
        arr = np.frombuffer(payload, "<f4", count=rec["length"] // 4, offset=rec["offset"])
        assert np.array_equal(arr.reshape(rec["shape"]), small_model.tensors()[name])


def test_checkpoint_saved_twice_identical_bytes(tmp_path, small_model):
    save_model(small_model, tmp_path / "a")
    save_model(small_model, tmp_path / "b")
    for f in ("manifest.json", "tensors.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_checkpoint_spec_mismatch(tmp_path):
    m = make_model("opt")
    save_model(m, tmp_path / "ck")
    other = ArchSpec("opt", 16, 64, 2, 2, 50, 32)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "ck", spec=other)


def test_checkpoint_shape_tamper(tmp_path):
    m = make_model("opt")
    save_model(m, tmp_path / "ck")
    mpath = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["tensors"]["embed"]["shape"] = [10, 16]
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "ck")


def test_checkpoint_missing(tmp_path):
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "nothing")


def test_pruned_checkpoint_roundtrip(tmp_path):
    m = make_model("opt")
    blk = m.blocks[0]
    g = coupling_graph(blk).group(GroupKind.ATTN_VO_CHANNEL)
    m.blocks[0] = apply_coupled_prune(blk, g, select_channels(np.arange(16.0), 4, g.head_partition))
    save_model(m, tmp_path / "ck")
    loaded = load_model(tmp_path / "ck")
    assert loaded.blocks[0].v_head_dims == (6, 6)
    toks = np.arange(10) % 50
    assert np.array_equal(forward_model(m, toks), forward_model(loaded, toks))


# ----------------------------------------------------------------- forward


def test_zero_weights_give_residual_identity(family):
    blk = make_model(family, blocks=1).blocks[0]
    for w in blk.weights.values():
        w[:] = 0
    for b in blk.biases.values():
        b[:] = 0
    x = np.random.default_rng(0).standard_normal((16, 5))
    out, _ = forward_block(blk, x)
    assert np.array_equal(out, x)


def test_llama_zero_gate_switches_mlp_off():
    blk = make_model("llama", blocks=1).blocks[0]
    blk.weights["gate_proj"][:] = 0
    no_mlp = blk.copy()
    no_mlp.weights["down_proj"][:] = 0
    x = np.random.default_rng(1).standard_normal((16, 6))
    out, cap = forward_block(blk, x, capture=["down_proj"])
    assert np.array_equal(cap["down_proj"], np.zeros_like(cap["down_proj"]))
    assert np.array_equal(out, forward_block(no_mlp, x)[0])


def test_attention_uniform_when_qk_zero():
    """Single head, Q=K=0: each position averages V over its causal prefix."""
    spec = ArchSpec("llama", 2, 4, 1, 1, 5, 4)
    blk = build_model(spec, 0).blocks[0]
    blk.weights["q_proj"][:] = 0
    blk.weights["k_proj"][:] = 0
    blk.weights["down_proj"][:] = 0
    blk.weights["v_proj"][:] = np.array([[1.0, 2.0], [0.0, -1.0]])
    blk.weights["o_proj"][:] = np.array([[2.0, 0.0], [1.0, 1.0]])
    x = np.array([[3.0, 1.0], [4.0, -1.0]])
    # RMS-normed inputs by hand: column 0 has mean square 12.5, column 1 has 1
    h0 = np.array([3.0, 4.0]) / np.sqrt(12.5 + 1e-5)
    h1 = np.array([1.0, -1.0]) / np.sqrt(1.0 + 1e-5)
    v0 = np.array([h0[0] + 2 * h0[1], -h0[1]])
    v1 = np.array([h1[0] + 2 * h1[1], -h1[1]])
    wo = np.array([[2.0, 0.0], [1.0, 1.0]])
    expected = x + np.stack([wo @ v0, wo @ ((v0 + v1) / 2)], axis=1)
    out, _ = forward_block(blk, x)
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_capture_taps_are_projection_inputs(family):
    blk = make_model(family, blocks=1).blocks[0]
    x = np.random.default_rng(2).standard_normal((16, 7))
    _, cap = forward_block(blk, x, capture=blk.projections())
    assert cap["q_proj"] is cap["k_proj"]
    h = apply_norm(blk.family, blk.norms, "norm1", x)
    assert np.array_equal(cap["v_proj"], h)
    assert cap["o_proj"].shape == (16, 7)
    assert cap[MLP_OUT[blk.family]].shape == (32, 7)
    if blk.family is Family.OPT:
        assert (cap["fc2"] >= 0).all()


def test_forward_block_shape_errors():
    blk = make_model("opt", blocks=1).blocks[0]
    with pytest.raises(ShapeError):
        forward_block(blk, np.zeros((15, 3)))
    with pytest.raises(ShapeError):
        forward_block(blk, np.zeros((16, 3)), capture=["nope"])


def test_forward_model_shapes_and_determinism(small_model):
    logits = forward_model(small_model, [3])
    assert logits.shape == (50, 1)
    toks = np.arange(20) % 50
    assert forward_model(small_model, toks).tobytes() == forward_model(small_model, toks).tobytes()


def test_forward_zero_blocks():
    m = make_model("opt", blocks=0)
    toks = np.array([1, 2, 3])
    expected = logits_from_hidden(m, embed_tokens(m, toks))
    assert np.array_equal(forward_model(m, toks), expected)


@pytest.mark.parametrize("toks", [[50], [-1], list(range(33))])
def test_forward_bad_tokens(toks):
    with pytest.raises(InputError):
        forward_model(make_model("opt"), toks)


def test_causality(small_model):
    toks = np.array([1, 2, 3, 4, 5, 6])
    a = forward_model(small_model, toks)
    b = forward_model(small_model, np.array([1, 2, 3, 4, 9, 9]))
    assert np.allclose(a[:, :4], b[:, :4], rtol=1e-13, atol=1e-13)


# ---------------------------------------------------------------- coupling


def test_coupling_llama_skip_qk():
    blk = make_model("llama", d=16, blocks=1).blocks[0]
    g = coupling_graph(blk, skip_qk=True)
    assert len(g.groups) == 2
    mlp = g.group(GroupKind.MLP_CHANNEL)
    assert mlp.column_target == "down_proj" and mlp.row_targets == ("up_proj", "gate_proj")
    assert mlp.params_per_channel == 3 * 16
    assert g.skip_list == ("q_proj", "k_proj")


def test_coupling_opt_skip_qk():
    blk = make_model("opt", d=16, blocks=1).blocks[0]
    g = coupling_graph(blk, skip_qk=True)
    mlp = g.group(GroupKind.MLP_CHANNEL)
    assert mlp.params_per_channel == 2 * 16 + 1
    assert mlp.weights_per_channel == 2 * 16
    vo = g.group(GroupKind.ATTN_VO_CHANNEL)
    assert vo.column_target == "o_proj" and vo.row_targets == ("v_proj",)
    assert vo.params_per_channel == 2 * 16 + 1
    assert vo.head_partition == (8, 8)


def test_coupling_with_qk(family):
    blk = make_model(family, blocks=1).blocks[0]
    g = coupling_graph(blk, skip_qk=False)
    assert len(g.groups) == 3 and g.skip_list == ()
    qk = g.group(GroupKind.ATTN_QK_CHANNEL)
    assert qk.column_target is None and qk.row_targets == ("q_proj", "k_proj")
    covered = sorted(n for grp in g.groups for n in grp.layers)
    assert covered == sorted(blk.projections())


def test_params_per_channel_matches_shapes(family):
    blk = make_model(family, blocks=1).blocks[0]
    for grp in coupling_graph(blk, skip_qk=False).groups:
        before = sum(blk.weights[n].size for n in grp.layers) + sum(
            blk.biases[n].size for n in grp.row_targets if n in blk.biases
        )
        step = len(grp.head_partition) if grp.head_partition else 1
        mask = select_channels(np.arange(grp.n_channels, dtype=float), step, grp.head_partition)
        after_blk = apply_coupled_prune(blk, grp, mask)
        after = sum(after_blk.weights[n].size for n in grp.layers) + sum(
            after_blk.biases[n].size for n in grp.row_targets if n in after_blk.biases
        )
        assert before - after == step * grp.params_per_channel


def _random_mask(rng, grp, per_head=True):
    n = grp.n_channels
    if grp.kind is GroupKind.ATTN_VO_CHANNEL and per_head:
        k = int(rng.integers(0, min(grp.head_partition)))
        return select_channels(rng.random(n), k * len(grp.head_partition), grp.head_partition)
    removed = np.sort(rng.choice(n, size=int(rng.integers(0, n)), replace=False))
    return PruneMask("", np.setdiff1d(np.arange(n), removed), removed)


@pytest.mark.parametrize("kind", [GroupKind.MLP_CHANNEL, GroupKind.ATTN_VO_CHANNEL])
def test_coupling_exactness(family, kind):
    rng = np.random.default_rng(11)
    for trial in range(10):
        blk = make_model(family, blocks=1, seed=trial).blocks[0]
        grp = coupling_graph(blk).group(kind)
        mask = _random_mask(rng, grp, per_head=bool(trial % 2))
        x = rng.standard_normal((16, int(rng.integers(1, 12))))
        pruned = apply_coupled_prune(blk, grp, mask)
        ref, _ = forward_block(zero_group(blk, grp, mask.removed), x)
        out, _ = forward_block(pruned, x)
        assert rel(out, ref) <= 1e-12


def test_vo_pruning_keeps_surviving_attention_features(family):
    rng = np.random.default_rng(5)
    blk = make_model(family, blocks=1).blocks[0]
    grp = coupling_graph(blk).group(GroupKind.ATTN_VO_CHANNEL)
    mask = select_channels(rng.random(16), 6, grp.head_partition)
    x = rng.standard_normal((16, 9))
    _, dense = forward_block(blk, x, capture=["o_proj"])
    _, pruned = forward_block(apply_coupled_prune(blk, grp, mask), x, capture=["o_proj"])
    assert rel(pruned["o_proj"], dense["o_proj"][mask.survivors]) <= 1e-12


def test_mlp_pruning_keeps_surviving_downstream_inputs(family):
    rng = np.random.default_rng(6)
    blk = make_model(family, blocks=1).blocks[0]
    grp = coupling_graph(blk).group(GroupKind.MLP_CHANNEL)
    mask = select_channels(rng.random(32), 13)
    x = rng.standard_normal((16, 9))
    tap = MLP_OUT[blk.family]
    _, dense = forward_block(blk, x, capture=[tap])
    _, pruned = forward_block(apply_coupled_prune(blk, grp, mask), x, capture=[tap])
    assert rel(pruned[tap], dense[tap][mask.survivors]) <= 1e-12


def test_pruned_block_shapes(family):
    blk = make_model(family, blocks=1).blocks[0]
    grp = coupling_graph(blk).group(GroupKind.MLP_CHANNEL)
    out = apply_coupled_prune(blk, grp, select_channels(np.arange(32.0), 5))
    width = 27
    assert out.weights[MLP_OUT[family]].shape == (16, width)
    for name in MLP_IN[Family(family)]:
        assert out.weights[name].shape == (width, 16)
        if name in out.biases:
            assert out.biases[name].shape == (width,)
