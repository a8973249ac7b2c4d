import numpy as np
import pytest

from hoidet.data import (OCCLUDED, GenConfig, Scene, SceneInstance, Triplet,
                         action_table, generate, load_scenes, rasterize,
                         save_scenes, token_channels, triplet_label_vector)
from hoidet.errors import ConfigError, ParseError
from hoidet.geometry import Box


def test_generate_deterministic(tmp_path):
    a = generate(50, GenConfig(), seed=42)
    b = generate(50, GenConfig(), seed=42)
    assert a == b
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_scenes(a, pa)
    save_scenes(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_generate_seed_changes_output():
    assert generate(10, GenConfig(), seed=1) != generate(10, GenConfig(), seed=2)


def test_scene_invariants_many_seeds():
    cfg = GenConfig()
    table = action_table(cfg)
    allowed = set().union(*table.values())
    for scene in generate(2000, cfg, seed=3):
        assert 1 <= len(scene.instances) <= cfg.max_instances
        assert 1 <= len(scene.triplets) <= cfg.max_triplets
        pairs = set()
        for t in scene.triplets:
            assert scene.instances[t.human].category == 0
            assert (t.human, t.object) not in pairs
            pairs.add((t.human, t.object))
            assert t.actions
            if t.object == OCCLUDED:
                assert set(t.actions) <= allowed
            else:
                obj = scene.instances[t.object]
                assert obj.category != 0
                assert set(t.actions) <= set(table[obj.category])
        for inst in scene.instances:
            b = inst.box
            assert 0.0 <= b.cx <= 1.0 and 0.0 <= b.cy <= 1.0
            assert b.w > 0.0 and b.h > 0.0
            assert 0 <= inst.category < cfg.categories


def test_no_occlusions_at_rate_zero():
    cfg = GenConfig(occlusion_rate=0.0)
    count = 0
    for scene in generate(2000, cfg, seed=5):
        count += sum(1 for t in scene.triplets if t.object == OCCLUDED)
    assert count == 0


def test_occluded_fraction_matches_rate():
    # triplet occlusion is an independent Bernoulli draw per interaction
    cfg = GenConfig(occlusion_rate=0.3)
    total = occluded = 0
    seed = 9
    scenes = []
    while total < 10_000:
        scenes = generate(4000, cfg, seed=seed, start_id=len(scenes))
        for s in scenes:
            for t in s.triplets:
                total += 1
                occluded += t.object == OCCLUDED
        seed += 1
    assert abs(occluded / total - 0.3) < 0.02


def test_action_table_respects_cooccurrence_bounds():
    none = action_table(GenConfig(action_cooccurrence=0.0))
    assert all(len(v) == 1 for v in none.values())
    full = action_table(GenConfig(action_cooccurrence=1.0))
    assert any(len(v) == 2 for v in full.values())
    for k, acts in full.items():
        assert all(1 <= a < 8 for a in acts)


def test_unsatisfiable_config_raises():
    with pytest.raises(ConfigError):
        generate(1, GenConfig(actions=1), seed=0)
    with pytest.raises(ConfigError):
        generate(1, GenConfig(categories=1), seed=0)
    with pytest.raises(ConfigError):
        generate(1, GenConfig(occlusion_rate=1.5), seed=0)


def test_label_vector():
    v = triplet_label_vector(Triplet(0, 1, (2, 5)), 8)
    assert v[0] == 1.0 and v[2] == 1.0 and v[5] == 1.0
    assert v.sum() == 3.0


def test_rasterize_empty_scene_is_background():
    scene = Scene(0, (), (), 0)
    tokens = rasterize(scene, 8, 8)
    assert tokens.shape == (64, token_channels(8))
    assert np.all(tokens == 0.0)


def test_rasterize_lights_covered_cells():
    # box spans cells (2..3) x (2..3) in an 8x8 grid
    inst = SceneInstance(Box(0.375, 0.375, 0.25, 0.25), 2)
    tokens = rasterize(Scene(0, (inst,), (), 0), 8, 8)
    cov = tokens[:, -1].reshape(8, 8)
    want = np.zeros((8, 8))
    want[2:4, 2:4] = 1.0
    np.testing.assert_array_equal(cov, want)
    # center cell carries category presence, the raw box and cell offsets
    t = 3 * 8 + 3
    assert tokens[t, 7 * 2] == 1.0
    np.testing.assert_allclose(tokens[t, 7 * 2 + 1:7 * 2 + 7],
                               [0.375, 0.375, 0.25, 0.25, -0.5, -0.5])


def test_rasterize_deterministic():
    scene = generate(1, GenConfig(), seed=77)[0]
    a = rasterize(scene, 8, 8)
    b = rasterize(scene, 8, 8)
    assert a.tobytes() == b.tobytes()


def test_roundtrip_on_1000_scenes(tmp_path):
    scenes = generate(1000, GenConfig(occlusion_rate=0.4), seed=13)
    path = tmp_path / "scenes.jsonl"
    save_scenes(scenes, path)
    back = load_scenes(path)
    assert back == scenes


def test_roundtrip_preserves_occluded_and_actions(tmp_path):
    inst = (SceneInstance(Box(0.5, 0.5, 0.2, 0.2), 0),
            SceneInstance(Box(0.6, 0.6, 0.05, 0.05), 3))
    scene = Scene(7, inst, (Triplet(0, OCCLUDED, (3, 4)),), 99)
    path = tmp_path / "one.jsonl"
    save_scenes([scene], path)
    assert load_scenes(path) == [scene]


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = generate(1, GenConfig(), seed=0)
    save_scenes(good, path)
    with open(path, "a") as f:
        f.write('{"scene_id": 1, "instances": [}\n')
    with pytest.raises(ParseError, match="line 2"):
        load_scenes(path)


def test_parse_error_on_missing_field(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"scene_id": 0, "instances": []}\n')
    with pytest.raises(ParseError, match="line 1"):
        load_scenes(path)
