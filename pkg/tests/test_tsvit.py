import numpy as np
import pytest

from agrisits import tensor as tt
from agrisits import tsvit
from agrisits.dataset import FormatError
from agrisits.tensor import ShapeError, Tensor, precision
from agrisits.tsvit import (
    TsvitConfig,
    capture_attention,
    forward,
    init_params,
    load_checkpoint,
    param_count,
    predict,
    save_checkpoint,
    spatial_encode,
    temporal_encode,
    tokenize,
)

from conftest import fd_grad, rel_err


def tiny_cfg(**kw):
    base = dict(
        tasks=[("crop", 3), ("mgmt", 2)],
        patch_px=4,
        subpatch_px=2,
        embed_dim=8,
        temporal_depth=1,
        spatial_depth=1,
        heads=2,
        head_dim=4,
        mlp_ratio=2,
        n_steps=4,
        n_bands=2,
    )
    base.update(kw)
    return TsvitConfig(**base)


def rand_input(rng, cfg, n=None):
    shape = (cfg.n_steps, cfg.n_bands, cfg.patch_px, cfg.patch_px)
    if n is not None:
        shape = (n,) + shape
    return rng.standard_normal(shape)


# -- tokenize -------------------------------------------------------------------


def test_tokenize_default_geometry(rng):
    cfg = TsvitConfig(patch_px=30, subpatch_px=2, embed_dim=16, n_steps=36, n_bands=10,
                      temporal_depth=0, spatial_depth=0)
    params = init_params(cfg, seed=0)
    tokens = tokenize(rand_input(rng, cfg, n=1), params, cfg)
    assert tokens.shape == (1, 225, 36, 16)


def test_tokenize_degenerate_single_subpatch(rng):
    cfg = tiny_cfg(patch_px=2, spatial_depth=0)
    assert cfg.n_subpatches == 1 and not cfg.use_spatial
    params = init_params(cfg)
    tokens = tokenize(rand_input(rng, cfg, n=2), params, cfg)
    assert tokens.shape == (2, 1, cfg.n_steps, cfg.embed_dim)


def test_tokenize_zero_patch_zero_params(rng):
    cfg = tiny_cfg()
    params = init_params(cfg)
    params["embed.bias"].data[:] = 0
    params["temporal_pos"].data[:] = 0
    tokens = tokenize(np.zeros((cfg.n_steps, cfg.n_bands, 4, 4)), params, cfg)
    assert np.all(tokens.data == 0)


def test_tokenize_flatten_order(rng):
    # token (p, t) must read sub-patch p's [B, S, S] block of acquisition t
    cfg = tiny_cfg(temporal_depth=0, spatial_depth=0)
    params = init_params(cfg)
    params["temporal_pos"].data[:] = 0
    x = rand_input(rng, cfg)
    tokens = tokenize(x, params, cfg).data[0]
    s, hs = cfg.subpatch_px, cfg.patch_px // cfg.subpatch_px
    w, b = params["embed.weight"].data, params["embed.bias"].data
    for p in (0, 1, 3):
        i, j = divmod(p, hs)
        for t in (0, 2):
            flat = x[t, :, i * s : (i + 1) * s, j * s : (j + 1) * s].ravel()
            assert rel_err(tokens[p, t], flat @ w + b) < 1e-6


def test_input_validation():
    cfg = tiny_cfg()
    params = init_params(cfg)
    with pytest.raises(ShapeError):
        forward(np.zeros((4, 2, 6, 6)), params, cfg)  # edge != configured
    with pytest.raises(ShapeError):
        forward(np.zeros((4, 2, 4, 6)), params, cfg)  # not square
    with pytest.raises(ShapeError):
        TsvitConfig(patch_px=3, subpatch_px=2)  # S does not divide patch


# -- temporal encoder -----------------------------------------------------------


def test_temporal_sequence_length_probe(rng):
    # 23 + 3 class tokens ahead of 36 time steps: attention rows of length 62
    cfg = TsvitConfig(
        tasks=[("crop", 23), ("mgmt", 3)],
        patch_px=4, subpatch_px=2, embed_dim=8, temporal_depth=1, spatial_depth=0,
        heads=2, head_dim=4, mlp_ratio=2, n_steps=36, n_bands=2,
    )
    params = init_params(cfg)
    tokens = tokenize(rand_input(rng, cfg, n=1), params, cfg)
    with capture_attention() as probes:
        temporal_encode(tokens, params, cfg)
    assert probes[0].shape == (4, 2, 62, 62)


def test_temporal_subpatch_permutation_equivariance(rng):
    cfg = tiny_cfg(patch_px=6, temporal_depth=2)
    params = init_params(cfg, seed=3)
    tokens = tokenize(rand_input(rng, cfg, n=1), params, cfg)
    perm = np.random.default_rng(0).permutation(cfg.n_subpatches)
    out = temporal_encode(tokens, params, cfg).data
    out_perm = temporal_encode(Tensor(tokens.data[:, perm]), params, cfg).data
    assert np.array_equal(out[:, perm], out_perm)


def test_temporal_depth_zero_is_class_token_broadcast(rng):
    cfg = tiny_cfg(temporal_depth=0)
    params = init_params(cfg)
    tokens = tokenize(rand_input(rng, cfg, n=2), params, cfg)
    out = temporal_encode(tokens, params, cfg).data
    cls = np.concatenate([params["class_tokens.crop"].data, params["class_tokens.mgmt"].data], axis=0)
    assert np.array_equal(out, np.broadcast_to(cls, out.shape))


# -- spatial encoder --------------------------------------------------------------


def test_spatial_identity_for_single_subpatch(rng):
    cfg = tiny_cfg(patch_px=2, spatial_depth=0)
    params = init_params(cfg)
    feats = Tensor(rng.standard_normal((2, 1, cfg.n_class_tokens, cfg.embed_dim)))
    out = spatial_encode(feats, params, cfg)
    assert out is feats


def test_spatial_class_isolation_bit_exact(rng):
    cfg = tiny_cfg(patch_px=6, spatial_depth=2)
    params = init_params(cfg, seed=1)
    feats = rng.standard_normal((1, cfg.n_subpatches, cfg.n_class_tokens, cfg.embed_dim))
    base = spatial_encode(Tensor(feats), params, cfg).data
    for k in (0, 2, 4):
        bumped = feats.copy()
        bumped[:, :, k, :] += rng.standard_normal(bumped.shape[-1]) * 0.3
        out = spatial_encode(Tensor(bumped), params, cfg).data
        others = [i for i in range(cfg.n_class_tokens) if i != k]
        assert np.array_equal(out[:, :, others], base[:, :, others])
        assert not np.array_equal(out[:, :, k], base[:, :, k])


def test_spatial_depth_zero_adds_positions_only(rng):
    cfg = tiny_cfg(patch_px=4, spatial_depth=0)
    params = init_params(cfg)
    feats = rng.standard_normal((2, cfg.n_subpatches, cfg.n_class_tokens, cfg.embed_dim))
    out = spatial_encode(Tensor(feats), params, cfg).data
    expect = feats + params["spatial_pos"].data[None, :, None, :]
    assert rel_err(out, expect) < 1e-6


# -- forward / predict --------------------------------------------------------------


def test_forward_output_shapes_multitask(rng):
    cfg = tiny_cfg(patch_px=6)
    params = init_params(cfg)
    out = forward(rand_input(rng, cfg), params, cfg)
    assert set(out) == {"crop", "mgmt"}
    assert out["crop"].shape == (6, 6, 3)
    assert out["mgmt"].shape == (6, 6, 2)
    batched = forward(rand_input(rng, cfg, n=3), params, cfg)
    assert batched["crop"].shape == (3, 6, 6, 3)


def test_forward_singletask_single_logit_set(rng):
    cfg = tiny_cfg(tasks=[("crop", 4)])
    params = init_params(cfg)
    out = forward(rand_input(rng, cfg), params, cfg)
    assert list(out) == ["crop"]
    assert out["crop"].shape == (4, 4, 4)


def test_forward_matches_manual_composition(rng):
    # the generic task machinery with one task equals the hand-wired pipeline
    cfg = tiny_cfg(tasks=[("crop", 3)], patch_px=4)
    params = init_params(cfg, seed=5)
    x = rand_input(rng, cfg)
    got = forward(x, params, cfg)["crop"].data

    feats = spatial_encode(temporal_encode(tokenize(x, params, cfg), params, cfg), params, cfg)
    scores = tt.linear(feats, params["head.crop.weight"], params["head.crop.bias"]).data[0]
    s = cfg.subpatch_px
    hs = cfg.patch_px // s
    expect = np.zeros_like(got)
    for y in range(cfg.patch_px):
        for xx in range(cfg.patch_px):
            p = (y // s) * hs + (xx // s)
            expect[y, xx] = scores[p, :, (y % s) * s + (xx % s)]
    assert np.array_equal(got, expect)


def test_predict_one_hot_and_ties(rng):
    hot = np.zeros((2, 2, 4))
    hot[:, :, 2] = 5.0
    assert np.all(predict({"crop": Tensor(hot)})["crop"] == 2)
    flat = np.ones((3, 3, 5))
    assert np.all(predict({"crop": Tensor(flat)})["crop"] == 0)


def test_predict_matches_softmax_argmax(rng):
    logits = rng.standard_normal((4, 4, 6))
    via_logits = predict({"t": Tensor(logits)})["t"]
    via_softmax = np.argmax(T_softmax(logits), axis=-1)
    assert np.array_equal(via_logits, via_softmax)


def T_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_predict_constant_shift_invariance(rng):
    logits = rng.standard_normal((5, 5, 3))
    shifted = logits + rng.standard_normal((5, 5, 1))
    a = predict({"t": Tensor(logits)})["t"]
    b = predict({"t": Tensor(shifted)})["t"]
    assert np.array_equal(a, b)


# -- gradients -----------------------------------------------------------------------


def test_end_to_end_gradient_vs_fd(rng):
    with precision("float64"):
        cfg = tiny_cfg()  # d=8, depths 1/1, T=4, B=2, H=4, S=2, 2+2 classes
        params = init_params(cfg, seed=7)
        x = rand_input(rng, cfg)
        w = {name: rng.standard_normal((4, 4, k)) for name, k in cfg.tasks}

        def loss_value():
            out = forward(x, params, cfg)
            return sum(float((out[n].data * w[n]).sum()) for n, _ in cfg.tasks)

        out = forward(x, params, cfg)
        loss = None
        for name, _ in cfg.tasks:
            term = (out[name] * Tensor(w[name])).sum()
            loss = term if loss is None else loss + term
        loss.backward()

        for name in ("embed.weight", "class_tokens.crop", "temporal.0.attn.wq",
                     "temporal.0.mlp.w1", "spatial.0.attn.wv", "spatial_pos",
                     "temporal_pos", "head.mgmt.weight", "temporal.0.ln1.gamma"):
            p = params[name]
            assert p.grad is not None, name
            num = fd_grad(loss_value, p.data, h=1e-5)
            assert rel_err(p.grad, num) < 1e-3, name


# -- parameters & checkpoints -----------------------------------------------------------


def test_param_count_matches_closed_form():
    for cfg in (
        tiny_cfg(),
        tiny_cfg(patch_px=2, spatial_depth=0),
        TsvitConfig(),  # paper-scale defaults: d=150, depths 8/4, heads 8
        tiny_cfg(tasks=[("crop", 5)]),
    ):
        params = init_params(cfg, seed=0)
        assert sum(t.size for t in params.values()) == param_count(cfg)


def test_default_config_matches_published_settings():
    cfg = TsvitConfig()
    assert cfg.embed_dim == 150 and cfg.temporal_depth == 8 and cfg.spatial_depth == 4
    assert cfg.heads == 8 and cfg.subpatch_px == 2
    assert cfg.n_steps == 36 and cfg.n_bands == 10
    assert cfg.n_subpatches == 225


def test_singletask_params_are_multitask_subset():
    multi = set(p for p, _, _ in tsvit._param_specs(tiny_cfg()))
    single = set(p for p, _, _ in tsvit._param_specs(tiny_cfg(tasks=[("crop", 3)])))
    assert single < multi
    assert multi - single == {"class_tokens.mgmt", "head.mgmt.weight", "head.mgmt.bias"}


def test_init_is_seeded():
    cfg = tiny_cfg()
    a = init_params(cfg, seed=4)
    b = init_params(cfg, seed=4)
    c = init_params(cfg, seed=5)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg()
    params = init_params(cfg, seed=2)
    save_checkpoint(tmp_path / "ck", params, cfg)
    loaded, cfg2 = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg
    assert list(loaded) == list(params)
    for k in params:
        assert np.array_equal(loaded[k].data, params[k].data)
    save_checkpoint(tmp_path / "ck2", loaded, cfg2)
    assert (tmp_path / "ck" / "params.bin").read_bytes() == (tmp_path / "ck2" / "params.bin").read_bytes()
    assert (tmp_path / "ck" / "manifest.json").read_bytes() == (tmp_path / "ck2" / "manifest.json").read_bytes()


def test_checkpoint_round_trip_float64(tmp_path):
    with precision("float64"):
        cfg = tiny_cfg()
        params = init_params(cfg, seed=2)
        save_checkpoint(tmp_path / "ck", params, cfg)
        loaded, _ = load_checkpoint(tmp_path / "ck")
        assert loaded["embed.weight"].data.dtype == np.float64
        assert all(np.array_equal(loaded[k].data, params[k].data) for k in params)


def test_checkpoint_truncated_rejected(tmp_path):
    cfg = tiny_cfg()
    save_checkpoint(tmp_path / "ck", init_params(cfg), cfg)
    blob = (tmp_path / "ck" / "params.bin").read_bytes()
    (tmp_path / "ck" / "params.bin").write_bytes(blob[:-16])
    with pytest.raises(FormatError, match="params.bin"):
        load_checkpoint(tmp_path / "ck")


def test_attention_rows_sum_to_one(rng):
    cfg = tiny_cfg(patch_px=6, temporal_depth=2, spatial_depth=1)
    params = init_params(cfg, seed=6)
    with capture_attention() as probes:
        forward(rand_input(rng, cfg), params, cfg)
    assert len(probes) == 3
    for att in probes:
        assert np.abs(att.sum(axis=-1) - 1.0).max() < 1e-6
