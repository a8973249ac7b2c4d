"""Synthetic scene generation, grid rasterization and JSONL persistence.

Scenes are the desk-scale stand-in for real imagery. The generator builds
fully observable ground truth so the detector and interaction heads have
something learnable:

* category 0 is the person category; categories 1..C-1 are object kinds;
* an instance interacts with a human exactly when it was placed inside the
  attachment radius of that human's center, distractors are kept far away;
* tiny "prop" instances near a human mark an interaction whose real target
  is occluded (the triplet's object is the OCCLUDED sentinel, scored against
  the all-zeros box);
* each object category maps to a fixed action set, so action labels are a
  deterministic function of what is visible.

Action slot 0 is the interactiveness slot; real actions are 1..A-1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .geometry import Box

OCCLUDED = -1

# placement geometry (normalized units)
_HUMAN_SEP = 0.30       # min distance between human centers
_ATTACH_MIN = 0.07      # attached instance distance from its human
_ATTACH_MAX = 0.14
_OTHER_HUMAN_MIN = 0.20  # attached instance distance from other humans
_DISTRACTOR_MIN = 0.30  # distractor distance from every human
_SAME_CAT_SEP = 0.18    # min distance between same-category centers
_INSTANCE_SEP = 0.06    # min distance between any two centers

# size ranges (w and h drawn independently); props are visibly tiny, which
# is the cue that the interaction target itself is occluded
_HUMAN_WH = (0.18, 0.28)
_OBJECT_WH = (0.12, 0.22)
_PROP_WH = (0.03, 0.06)


@dataclass(frozen=True)
class SceneInstance:
    box: Box
    category: int


@dataclass(frozen=True)
class Triplet:
    human: int
    object: int  # instance index, or OCCLUDED
    actions: tuple[int, ...]


@dataclass(frozen=True)
class Scene:
    scene_id: int
    instances: tuple[SceneInstance, ...]
    triplets: tuple[Triplet, ...]
    rng_seed: int


@dataclass
class GenConfig:
    categories: int = 8          # C, category 0 = person
    actions: int = 8             # gamma, slot 0 = interactiveness
    max_instances: int = 10
    max_triplets: int = 4
    occlusion_rate: float = 0.15
    action_cooccurrence: float = 0.3
    max_distractors: int = 2

    def validate(self):
        if self.categories < 2:
            raise ConfigError("need at least 2 categories (person + one object)")
        if self.actions < 2:
            raise ConfigError("need at least 2 action slots "
                              "(interactiveness + one action): zero allowed pairs")
        if self.max_instances < 2:
            raise ConfigError("max_instances must be >= 2")
        if self.max_triplets < 1:
            raise ConfigError("max_triplets must be >= 1")
        if not (0.0 <= self.occlusion_rate <= 1.0):
            raise ConfigError("occlusion_rate must be in [0, 1]")
        if not (0.0 <= self.action_cooccurrence <= 1.0):
            raise ConfigError("action_cooccurrence must be in [0, 1]")


def _hash_frac(k: int) -> float:
    return ((k * 2654435761) % (1 << 32)) / float(1 << 32)


def action_table(cfg: GenConfig) -> dict[int, tuple[int, ...]]:
    """Allowed action set per object category; deterministic in the config."""
    cfg.validate()
    n_real = cfg.actions - 1
    table = {}
    for k in range(1, cfg.categories):
        base = 1 + (k - 1) % n_real
        acts = {base}
        if _hash_frac(k) < cfg.action_cooccurrence:
            acts.add(1 + k % n_real)
        table[k] = tuple(sorted(acts))
    return table


def triplet_label_vector(triplet: Triplet, n_actions: int) -> np.ndarray:
    """Binary action labels with the interactiveness slot set."""
    v = np.zeros(n_actions, dtype=np.float64)
    v[0] = 1.0
    for a in triplet.actions:
        v[a] = 1.0
    return v


def _q6(x: float) -> float:
    return round(float(x), 6)


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _place(rng, existing, categories, category, lo, hi, *,
           anchor=None, r_range=None, min_dists=()):
    """Rejection-sample a center; progressively relaxes separation rules."""
    for attempt in range(200):
        relax = 1.0 if attempt < 100 else 0.5
        if anchor is not None:
            r = rng.uniform(*r_range)
            th = rng.uniform(0.0, 2.0 * math.pi)
            c = (anchor[0] + r * math.cos(th), anchor[1] + r * math.sin(th))
            if not (lo <= c[0] <= hi and lo <= c[1] <= hi):
                continue
        else:
            c = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        ok = True
        for (pts, d) in min_dists:
            if any(_dist(c, p) < d * relax for p in pts):
                ok = False
                break
        if ok:
            same = [p for p, pc in zip(existing, categories) if pc == category]
            if any(_dist(c, p) < _SAME_CAT_SEP * relax for p in same):
                continue
            return c
    return None


def _make_scene(scene_id: int, cfg: GenConfig, scene_seed: int) -> Scene:
    rng = np.random.default_rng(scene_seed)
    table = action_table(cfg)

    n_att = int(rng.integers(1, min(cfg.max_triplets, cfg.max_instances - 1) + 1))
    occluded = rng.random(n_att) < cfg.occlusion_rate
    n_occ = int(occluded.sum())

    base_humans = int(rng.integers(1, 3))
    n_humans = max(base_humans, n_occ)
    n_humans = min(n_humans, cfg.max_instances - n_att)
    if n_humans < 1:
        n_humans = 1
    if n_occ > n_humans:
        # scene too small for that many occluded pairs; drop the excess flags
        drop = n_occ - n_humans
        for i in range(n_att - 1, -1, -1):
            if occluded[i] and drop > 0:
                occluded[i] = False
                drop -= 1

    centers: list[tuple[float, float]] = []
    cats: list[int] = []
    instances: list[SceneInstance] = []

    def add_instance(center, category, w, h):
        centers.append(center)
        cats.append(category)
        instances.append(SceneInstance(
            Box(_q6(center[0]), _q6(center[1]), _q6(w), _q6(h)), category))

    human_ids = []
    for _ in range(n_humans):
        c = _place(rng, centers, cats, 0, 0.2, 0.8,
                   min_dists=((centers, _HUMAN_SEP),))
        if c is None:
            break
        human_ids.append(len(instances))
        add_instance(c, 0, rng.uniform(*_HUMAN_WH), rng.uniform(*_HUMAN_WH))
    if not human_ids:
        add_instance((0.5, 0.5), 0, 0.22, 0.22)
        human_ids = [0]

    # occluded attachments take distinct humans; the rest share round-robin
    assignment = []
    free = list(human_ids)
    for i in range(n_att):
        if occluded[i] and free:
            assignment.append(free.pop(0))
        else:
            assignment.append(human_ids[int(rng.integers(0, len(human_ids)))])

    triplets: list[Triplet] = []
    used_pairs = set()
    human_centers = [centers[h] for h in human_ids]
    for i in range(n_att):
        h = assignment[i]
        if h >= len(instances):
            continue
        category = int(rng.integers(1, cfg.categories))
        others = [c for j, c in enumerate(centers) if j != h and cats[j] == 0]
        c = _place(rng, centers, cats, category, 0.03, 0.97,
                   anchor=centers[h], r_range=(_ATTACH_MIN, _ATTACH_MAX),
                   min_dists=((others, _OTHER_HUMAN_MIN),
                              (centers, _INSTANCE_SEP)))
        if c is None:
            continue
        if bool(occluded[i]):
            if (h, OCCLUDED) in used_pairs:
                continue
            add_instance(c, category, rng.uniform(*_PROP_WH),
                         rng.uniform(*_PROP_WH))
            triplets.append(Triplet(h, OCCLUDED, table[category]))
            used_pairs.add((h, OCCLUDED))
        else:
            add_instance(c, category, rng.uniform(*_OBJECT_WH),
                         rng.uniform(*_OBJECT_WH))
            o = len(instances) - 1
            triplets.append(Triplet(h, o, table[category]))
            used_pairs.add((h, o))

    room = cfg.max_instances - len(instances)
    n_dist = int(rng.integers(0, min(cfg.max_distractors, max(room, 0)) + 1))
    for _ in range(n_dist):
        category = int(rng.integers(0, cfg.categories))
        c = _place(rng, centers, cats, category, 0.05, 0.95,
                   min_dists=((human_centers, _DISTRACTOR_MIN),
                              (centers, _INSTANCE_SEP)))
        if c is None:
            continue
        if category == 0:
            w, h = rng.uniform(*_HUMAN_WH), rng.uniform(*_HUMAN_WH)
        elif rng.random() < 0.3:
            w, h = rng.uniform(*_PROP_WH), rng.uniform(*_PROP_WH)
        else:
            w, h = rng.uniform(*_OBJECT_WH), rng.uniform(*_OBJECT_WH)
        add_instance(c, category, w, h)

    if not triplets:
        # guarantee at least one interaction per scene
        h = human_ids[0]
        category = int(rng.integers(1, cfg.categories))
        th = rng.uniform(0.0, 2.0 * math.pi)
        r = 0.5 * (_ATTACH_MIN + _ATTACH_MAX)
        c = (min(max(centers[h][0] + r * math.cos(th), 0.05), 0.95),
             min(max(centers[h][1] + r * math.sin(th), 0.05), 0.95))
        add_instance(c, category, rng.uniform(*_OBJECT_WH),
                     rng.uniform(*_OBJECT_WH))
        triplets.append(Triplet(h, len(instances) - 1, table[category]))

    return Scene(scene_id, tuple(instances), tuple(triplets), scene_seed)


def generate(count: int, cfg: GenConfig, seed: int, start_id: int = 0) -> list[Scene]:
    """Generate ``count`` scenes, reproducible from ``seed``.

    Each scene draws from its own generator seeded with ``seed ^ scene_id``,
    so generation is order-independent and safe to parallelize.
    """
    cfg.validate()
    return [_make_scene(sid, cfg, seed ^ sid)
            for sid in range(start_id, start_id + count)]


# ---------------------------------------------------------------------------
# rasterization


def token_channels(categories: int) -> int:
    # per category: presence + (cx, cy, w, h) + cell-relative (dx, dy);
    # plus one coverage channel
    return 7 * categories + 1


def rasterize(scene: Scene, grid: int, categories: int) -> np.ndarray:
    """Encode a scene as (grid*grid, channels) tokens.

    The cell containing an instance's center carries its category presence
    flag, raw box coordinates and the center offset relative to the cell
    (amplified by the grid, so fine position is linearly readable); the
    trailing channel counts how many instance boxes overlap each cell.
    """
    d_in = token_channels(categories)
    tokens = np.zeros((grid * grid, d_in), dtype=np.float64)
    cell = 1.0 / grid
    for inst in scene.instances:
        b = inst.box
        row = min(int(b.cy / cell), grid - 1)
        col = min(int(b.cx / cell), grid - 1)
        t = row * grid + col
        base = 7 * inst.category
        tokens[t, base] = 1.0
        dx = b.cx * grid - (col + 0.5)
        dy = b.cy * grid - (row + 0.5)
        tokens[t, base + 1:base + 7] = (b.cx, b.cy, b.w, b.h, dx, dy)
        x0, y0, x1, y1 = b.corners()
        c0 = max(int(math.floor(x0 / cell)), 0)
        c1 = min(int(math.ceil(x1 / cell)), grid)
        r0 = max(int(math.floor(y0 / cell)), 0)
        r1 = min(int(math.ceil(y1 / cell)), grid)
        for r in range(r0, r1):
            for c in range(c0, c1):
                ix = min(x1, (c + 1) * cell) - max(x0, c * cell)
                iy = min(y1, (r + 1) * cell) - max(y0, r * cell)
                if ix > 1e-12 and iy > 1e-12:
                    tokens[r * grid + c, 5 * categories] += 1.0
    return tokens


# ---------------------------------------------------------------------------
# persistence (JSONL, one scene per line)


def _scene_to_obj(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "instances": [{"box": [inst.box.cx, inst.box.cy, inst.box.w, inst.box.h],
                       "cat": inst.category} for inst in scene.instances],
        "triplets": [{"h": t.human,
                      "o": "occluded" if t.object == OCCLUDED else t.object,
                      "actions": list(t.actions)} for t in scene.triplets],
        "seed": scene.rng_seed,
    }


def _scene_from_obj(obj: dict) -> Scene:
    instances = tuple(
        SceneInstance(Box(*(float(v) for v in it["box"])), int(it["cat"]))
        for it in obj["instances"])
    triplets = tuple(
        Triplet(int(t["h"]),
                OCCLUDED if t["o"] == "occluded" else int(t["o"]),
                tuple(int(a) for a in t["actions"]))
        for t in obj["triplets"])
    return Scene(int(obj["scene_id"]), instances, triplets, int(obj["seed"]))


def save_scenes(scenes: Sequence[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for scene in scenes:
            f.write(json.dumps(_scene_to_obj(scene), separators=(",", ":")))
            f.write("\n")


def load_scenes(path) -> list[Scene]:
    scenes = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                scenes.append(_scene_from_obj(obj))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from e
    return scenes


def instance_arrays(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """(n,4) box array and (n,) category array for a scene."""
    boxes = np.array([inst.box.as_array() for inst in scene.instances],
                     dtype=np.float64).reshape(-1, 4)
    cats = np.array([inst.category for inst in scene.instances], dtype=np.intp)
    return boxes, cats
