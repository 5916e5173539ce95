"""Input validation helpers used by the estimator and the harness."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .scene import Scene


def check_scene(scene: Scene) -> Scene:
    """Verify the documented Scene invariants; returns the scene unchanged."""
    n = scene.n_points
    if n == 0:
        raise ContractError("scene: empty point cloud")
    for name in ("points", "colors"):
        arr = getattr(scene, name)
        if arr.shape != (n, 3):
            raise ContractError(f"scene: {name} must be (N, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"scene: non-finite values in {name}")
    for name in ("instance_id", "semantic_id", "superpoint_id"):
        arr = getattr(scene, name)
        if arr.shape != (n,):
            raise ContractError(f"scene: {name} must be (N,), got {arr.shape}")
    if len(scene.stuff_flags) != len(scene.class_names):
        raise ContractError("scene: stuff_flags length != class_names length")
    if scene.semantic_id.min() < 0 or scene.semantic_id.max() >= scene.n_classes:
        raise ContractError("scene: semantic_id out of class-table range")

    # superpoints form a surjective partition onto [0, M)
    m = scene.n_superpoints
    counts = np.bincount(scene.superpoint_id, minlength=m)
    if scene.superpoint_id.min() < 0 or np.any(counts == 0):
        raise ContractError("scene: superpoint ids must cover [0, M) with no empty id")

    # instances are semantically consistent and never on stuff classes
    for inst in scene.thing_instances():
        sem = np.unique(scene.semantic_id[scene.instance_id == inst])
        if len(sem) != 1:
            raise ContractError(f"scene: instance {inst} spans several semantic classes")
        if scene.stuff_flags[int(sem[0])]:
            raise ContractError(f"scene: instance {inst} carries a stuff class")
    return scene


def check_scenes(scenes) -> list[Scene]:
    scenes = list(scenes)
    if not scenes:
        raise ContractError("expected at least one scene")
    names = scenes[0].class_names
    for s in scenes:
        check_scene(s)
        if s.class_names != names:
            raise ContractError("scenes disagree on the class table")
    return scenes


def check_positive(name: str, value) -> None:
    if value <= 0:
        raise ContractError(f"{name} must be positive, got {value}")


def check_probability(name: str, value) -> None:
    if not 0.0 <= value <= 1.0:
        raise ContractError(f"{name} must be in [0, 1], got {value}")
