import numpy as np
import pytest

from hoidet import tensor as tz
from hoidet.data import GenConfig, generate, rasterize
from hoidet.errors import CheckpointError, ConfigError
from hoidet.model import (Model, ModelConfig, init_params, load_checkpoint,
                          param_shapes, save_checkpoint, sine_positions)

MICRO = dict(d=8, layers=1, heads=2, n_instance_slots=5,
             n_interaction_slots=4, n_actions=4, n_categories=3, grid=3)


def micro_cfg(**over):
    kw = dict(MICRO)
    kw.update(over)
    return ModelConfig(**kw)


def micro_scene_tokens(cfg, seed=0):
    gen = GenConfig(categories=cfg.n_categories, actions=cfg.n_actions,
                    max_instances=cfg.n_instance_slots - 1, max_triplets=2)
    scene = generate(1, gen, seed=seed)[0]
    return scene, rasterize(scene, cfg.grid, cfg.n_categories)


def test_output_cardinality_matches_queries():
    cfg = micro_cfg()
    model = Model(cfg, init_seed=1)
    _, tokens = micro_scene_tokens(cfg)
    out = model.run(tokens)
    assert out["memory"].shape == (cfg.tokens, cfg.d)
    assert out["mu"].shape == (cfg.n_instance_slots, cfg.d)
    assert out["boxes"].shape == (cfg.n_instance_slots, 4)
    assert out["cat_logits"].shape == (cfg.n_instance_slots,
                                       cfg.n_categories + 1)
    assert out["z"].shape == (cfg.n_interaction_slots, cfg.d)
    assert out["act_logits"].shape == (cfg.n_interaction_slots, cfg.n_actions)


def test_forward_deterministic():
    cfg = micro_cfg()
    model = Model(cfg, init_seed=2)
    _, tokens = micro_scene_tokens(cfg)
    a = model.run(tokens)
    b = model.run(tokens)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_zero_tokens_zero_weights_constant_output():
    cfg = micro_cfg()
    params = {n: np.zeros(s) for n, s in param_shapes(cfg).items()}
    model = Model(cfg, params)
    memory = model.encode(model.bind(), tz.const(np.zeros((cfg.tokens,
                                                           cfg.d_in))))
    rows = memory.array
    assert np.allclose(rows, rows[0])


def test_micro_encoder_matches_hand_rolled_attention():
    # independent explicit softmax(QK^T/sqrt(d))V transcription, one layer,
    # one head, two tokens
    cfg = ModelConfig(d=4, layers=1, heads=1, n_instance_slots=3,
                      n_interaction_slots=2, n_actions=2, n_categories=2,
                      grid=2)
    rng = np.random.default_rng(8)
    model = Model(cfg, init_seed=8)
    p = model.params
    tokens = np.zeros((cfg.tokens, cfg.d_in))
    tokens[0] = rng.standard_normal(cfg.d_in)
    tokens[3] = rng.standard_normal(cfg.d_in)

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    pe = sine_positions(cfg.grid, cfg.d)
    x = tokens @ p["input_proj.w"] + p["input_proj.b"]
    xn = ln(x, p["enc.l0.ln1.g"], p["enc.l0.ln1.b"])
    qk = xn + pe
    q = qk @ p["enc.l0.attn.wq"] + p["enc.l0.attn.bq"]
    k = qk @ p["enc.l0.attn.wk"] + p["enc.l0.attn.bk"]
    v = xn @ p["enc.l0.attn.wv"] + p["enc.l0.attn.bv"]
    scores = q @ k.T / np.sqrt(cfg.d)
    e = np.exp(scores - scores.max(-1, keepdims=True))
    att = e / e.sum(-1, keepdims=True)
    x = x + (att @ v) @ p["enc.l0.attn.wo"] + p["enc.l0.attn.bo"]
    xn = ln(x, p["enc.l0.ln2.g"], p["enc.l0.ln2.b"])
    h = np.maximum(xn @ p["enc.l0.ffn.w1"] + p["enc.l0.ffn.b1"], 0.0)
    x = x + h @ p["enc.l0.ffn.w2"] + p["enc.l0.ffn.b2"]
    want = ln(x, p["enc.ln.g"], p["enc.ln.b"])

    got = model.encode(model.bind(), tz.const(tokens)).array
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_query_permutation_permutes_outputs():
    cfg = micro_cfg()
    model = Model(cfg, init_seed=3)
    _, tokens = micro_scene_tokens(cfg)
    base = model.run(tokens)

    perm = np.array([2, 0, 1, 4, 3])
    params = dict(model.params)
    params["inst_queries"] = model.params["inst_queries"][perm]
    permuted = Model(cfg, params).run(tokens)
    np.testing.assert_allclose(permuted["mu"], base["mu"][perm], atol=1e-9)
    np.testing.assert_allclose(permuted["boxes"], base["boxes"][perm],
                               atol=1e-9)


def test_batched_forward_matches_single():
    cfg = micro_cfg()
    model = Model(cfg, init_seed=4)
    _, t0 = micro_scene_tokens(cfg, seed=0)
    _, t1 = micro_scene_tokens(cfg, seed=1)
    batched = model.forward(model.bind(), tz.const(np.stack([t0, t1])))
    single0 = model.run(t0)
    single1 = model.run(t1)
    np.testing.assert_allclose(batched["mu"].array[0], single0["mu"], atol=1e-9)
    np.testing.assert_allclose(batched["mu"].array[1], single1["mu"], atol=1e-9)
    np.testing.assert_allclose(batched["v_h"].array[1], single1["v_h"],
                               atol=1e-9)


def test_shared_vs_separate_encoder_param_sets():
    shared = set(param_shapes(micro_cfg(shared_encoder=True)))
    separate = set(param_shapes(micro_cfg(shared_encoder=False)))
    extra = {n for n in separate - shared}
    assert extra and all(n.startswith("enc2.") for n in extra)
    assert not any(n.startswith("enc2.") for n in shared)


def test_direct_regression_adds_box_heads():
    cfg = micro_cfg(direct_regression=True)
    names = set(param_shapes(cfg))
    assert "head_hbox.w1" in names and "head_obox.w3" in names
    model = Model(cfg, init_seed=5)
    _, tokens = micro_scene_tokens(cfg)
    out = model.run(tokens)
    assert out["hbox_logits"].shape == (cfg.n_interaction_slots, 4)
    assert out["obox_logits"].shape == (cfg.n_interaction_slots, 4)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(n_actions=1)


def test_checkpoint_roundtrip(tmp_path):
    cfg = micro_cfg()
    model = Model(cfg, init_seed=6)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.cfg == cfg
    assert set(back.params) == set(model.params)
    for name in model.params:
        assert back.params[name].tobytes() == model.params[name].tobytes()


def test_checkpoint_rejects_missing_tensor(tmp_path):
    import json
    import zipfile

    cfg = micro_cfg()
    model = Model(cfg, init_seed=7)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        raw = zf.read("tensors.bin")
    manifest["tensors"] = manifest["tensors"][:-1]
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("tensors.bin", raw)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(bad)


def test_checkpoint_rejects_bad_shape(tmp_path):
    import json
    import zipfile

    cfg = micro_cfg()
    model = Model(cfg, init_seed=7)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        raw = zf.read("tensors.bin")
    manifest["tensors"][0]["shape"] = [1, 1]
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("tensors.bin", raw)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(bad)


def test_init_params_deterministic_and_xavier_bounded():
    cfg = micro_cfg()
    a = init_params(cfg, seed=9)
    b = init_params(cfg, seed=9)
    for n in a:
        assert a[n].tobytes() == b[n].tobytes()
    w = a["enc.l0.attn.wq"]
    bound = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
    assert np.abs(w).max() <= bound
    assert np.all(a["enc.l0.attn.bq"] == 0.0)
    assert np.all(a["enc.l0.ln1.g"] == 1.0)
