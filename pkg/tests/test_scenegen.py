"""Generator contracts: determinism, partitions, prompts, expressions, files."""

import numpy as np
import pytest
from scipy.spatial import cKDTree

from multiseg3d.errors import (AmbiguityError, ContractError, InstanceLookupError,
                               SceneFormatError, UnsupportedVersionError)
from multiseg3d.scene import Scene, load_scene, save_scene, scene_from_text, scene_to_text
from multiseg3d.scenegen import (SceneRecipe, compute_superpoints, generate_pseudo_masks,
                                 generate_scene, make_text_expression, resolve_expression,
                                 sample_vision_prompt)
from multiseg3d.validation import check_scene


@pytest.fixture(scope="module")
def scene():
    return generate_scene(7, SceneRecipe(counts={"chair": 3, "table": 1}))


def test_instance_count_and_floor(scene):
    assert sorted(scene.thing_instances()) == [0, 1, 2, 3]
    floor_cls = scene.class_names.index("floor")
    floor_sel = scene.semantic_id == floor_cls
    assert floor_sel.any()
    assert np.all(scene.instance_id[floor_sel] == -1)


def test_point_budget(scene):
    assert scene.n_points == 2048
    small = generate_scene(1, SceneRecipe(counts={"chair": 1}, total_points=900))
    assert small.n_points == 900


def test_bit_identical_regeneration(scene):
    again = generate_scene(7, SceneRecipe(counts={"chair": 3, "table": 1}))
    for name in ("points", "colors", "instance_id", "semantic_id", "superpoint_id"):
        assert np.array_equal(getattr(scene, name), getattr(again, name))


def test_scene_passes_validation(scene):
    check_scene(scene)


def test_unplaceable_recipe_raises():
    with pytest.raises(Exception) as exc:
        generate_scene(0, SceneRecipe(counts={"sofa": 40}, room=(3.0, 3.0)))
    assert "place" in str(exc.value)


# ---------------------------------------------------------------------------
# superpoints


def test_superpoints_partition(scene):
    m = scene.n_superpoints
    counts = np.bincount(scene.superpoint_id, minlength=m)
    assert np.all(counts > 0)
    assert scene.superpoint_id.min() == 0


def test_superpoints_count_band(scene):
    target = 96
    assert target / 2 <= scene.n_superpoints <= 2 * target


def test_superpoints_instance_pure(scene):
    for sp in range(scene.n_superpoints):
        sel = scene.superpoint_id == sp
        assert len(np.unique(scene.instance_id[sel])) == 1
        assert len(np.unique(scene.semantic_id[sel])) == 1


def test_superpoints_connected_in_group_knn(scene):
    # oracle: rebuild each label group's 8-NN graph with scipy and BFS each cell
    keys = scene.instance_id * 10_000 + scene.semantic_id
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        k = min(9, len(idx))
        _, nbr = cKDTree(scene.points[idx]).query(scene.points[idx], k=k)
        nbr = nbr.reshape(len(idx), -1)
        adj = {i: set() for i in range(len(idx))}
        for i in range(len(idx)):
            for j in nbr[i]:
                if i != j:
                    adj[i].add(int(j))
                    adj[int(j)].add(i)
        local_sp = scene.superpoint_id[idx]
        for sp in np.unique(local_sp):
            members = set(np.flatnonzero(local_sp == sp))
            start = next(iter(members))
            seen, frontier = {start}, [start]
            while frontier:
                cur = frontier.pop()
                for nxt in adj[cur]:
                    if nxt in members and nxt not in seen:
                        seen.add(nxt)
                        frontier.append(nxt)
            assert seen == members


def test_single_cube_target_one():
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(200, 3))
    cube = Scene(points=pts, colors=np.full((200, 3), 0.5),
                 instance_id=np.zeros(200, dtype=np.int64),
                 semantic_id=np.full(200, 1, dtype=np.int64),
                 superpoint_id=np.zeros(200, dtype=np.int64),
                 class_names=["floor", "cube"], stuff_flags=[True, False])
    sp = compute_superpoints(cube, target=1)
    assert sp.max() == 0


def test_superpoint_target_contract():
    s = generate_scene(3, SceneRecipe(counts={"chair": 1}, total_points=600))
    with pytest.raises(ContractError):
        compute_superpoints(s, target=s.n_points + 1)


# ---------------------------------------------------------------------------
# pseudo masks


def test_pseudo_masks_cube_on_floor():
    s = generate_scene(5, SceneRecipe(counts={"cabinet": 1}, total_points=1200))
    pm = generate_pseudo_masks(s, 0)
    assert len(pm) >= 2


def test_pseudo_masks_ignore_labels(scene):
    pm = generate_pseudo_masks(scene, 0)
    relabeled = Scene(points=scene.points, colors=scene.colors,
                      instance_id=(scene.instance_id + 1) % 3,
                      semantic_id=np.zeros_like(scene.semantic_id),
                      superpoint_id=scene.superpoint_id,
                      class_names=scene.class_names, stuff_flags=scene.stuff_flags)
    pm2 = generate_pseudo_masks(relabeled, 0)
    assert np.array_equal(pm.masks, pm2.masks)


def test_pseudo_masks_deterministic_and_covering(scene):
    pm = generate_pseudo_masks(scene, 42)
    pm2 = generate_pseudo_masks(scene, 42)
    assert np.array_equal(pm.masks, pm2.masks)
    assert pm.masks.any(axis=0).mean() >= 0.8
    assert np.all(pm.masks.sum(axis=1) > 0)


# ---------------------------------------------------------------------------
# vision prompts


def test_prompt_center_minimizes_distance(scene):
    inst = 0
    idx = np.flatnonzero(scene.instance_id == inst)
    center = scene.points[idx].mean(axis=0)
    p = sample_vision_prompt(scene, inst, "center")
    dists = np.linalg.norm(scene.points[idx] - center, axis=1)
    assert np.linalg.norm(scene.points[p] - center) == dists.min()
    # ties resolve to the lowest point index
    winners = idx[dists == dists.min()]
    assert p == winners.min()


def test_prompt_quantile_extremes(scene):
    inst = 1
    idx = np.flatnonzero(scene.instance_id == inst)
    center = scene.points[idx].mean(axis=0)
    dists = np.linalg.norm(scene.points[idx] - center, axis=1)
    far = sample_vision_prompt(scene, inst, "quantile", r_d=1.0)
    assert np.linalg.norm(scene.points[far] - center) == dists.max()
    near = sample_vision_prompt(scene, inst, "quantile", r_d=1e-9)
    assert np.linalg.norm(scene.points[near] - center) == dists.min()


def test_prompt_random_deterministic(scene):
    a = sample_vision_prompt(scene, 2, "random", seed=9)
    b = sample_vision_prompt(scene, 2, "random", seed=9)
    assert a == b
    assert scene.instance_id[a] == 2


def test_prompt_unknown_instance(scene):
    with pytest.raises(InstanceLookupError):
        sample_vision_prompt(scene, 99, "center")


# ---------------------------------------------------------------------------
# referring expressions


def test_expression_right_of():
    # two chairs around one table: the one at larger x is "right of the table"
    rec = SceneRecipe(counts={"chair": 2, "table": 1}, total_points=1200)
    for seed in range(6):
        s = generate_scene(seed, rec)
        chairs = [i for i in s.thing_instances()
                  if s.class_names[s.instance_class(i)] == "chair"]
        table = [i for i in s.thing_instances()
                 if s.class_names[s.instance_class(i)] == "table"][0]
        tx = s.points[s.instance_id == table].mean(axis=0)[0]
        cx = {i: s.points[s.instance_id == i].mean(axis=0)[0] for i in chairs}
        right = [i for i in chairs if cx[i] > tx]
        if len(right) == 1:
            tokens = ("the", "chair", "right", "of", "the", "table")
            assert resolve_expression(s, tokens) == right[0]


def test_expression_unique_class(scene):
    table = [i for i in scene.thing_instances()
             if scene.class_names[scene.instance_class(i)] == "table"][0]
    assert make_text_expression(scene, table, seed=0) == ("the", "table")
    assert resolve_expression(scene, ("the", "table")) == table


def test_expression_roundtrip_many_scenes():
    rec = SceneRecipe(counts={"chair": 2, "table": 1, "sofa": 1}, total_points=1400)
    checked = 0
    for seed in range(10):
        s = generate_scene(seed, rec)
        for inst in s.thing_instances():
            for eseed in range(3):
                try:
                    tokens = make_text_expression(s, inst, seed=eseed)
                except AmbiguityError:
                    continue
                assert resolve_expression(s, tokens) == inst
                checked += 1
    assert checked > 40


# ---------------------------------------------------------------------------
# scene files


def test_scene_roundtrip(tmp_path, scene):
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    back = load_scene(path)
    for name in ("points", "colors", "instance_id", "semantic_id", "superpoint_id"):
        assert np.array_equal(getattr(scene, name), getattr(back, name))
    assert back.class_names == scene.class_names
    assert back.stuff_flags == scene.stuff_flags


def test_truncated_file_rejected(scene):
    text = scene_to_text(scene)
    with pytest.raises(SceneFormatError) as exc:
        scene_from_text(text[: len(text) // 2])
    assert exc.value.offset is not None


def test_version_mismatch(scene):
    text = scene_to_text(scene).replace('"version": 1', '"version": 999')
    with pytest.raises(UnsupportedVersionError):
        scene_from_text(text)
