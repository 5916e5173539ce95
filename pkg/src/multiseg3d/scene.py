"""Scene container plus the on-disk scene format (see docs/formats.md)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SceneFormatError, UnsupportedVersionError

SCENE_FORMAT = "multiseg3d-scene"
SCENE_VERSION = 1


@dataclass
class Scene:
    """A labelled synthetic point cloud.

    points/colors are (N, 3); instance_id is -1 on stuff points; semantic_id
    indexes class_names; superpoint_id partitions [0, M).
    """

    points: np.ndarray
    colors: np.ndarray
    instance_id: np.ndarray
    semantic_id: np.ndarray
    superpoint_id: np.ndarray
    class_names: list[str]
    stuff_flags: list[bool]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_superpoints(self) -> int:
        return int(self.superpoint_id.max()) + 1 if self.n_points else 0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def thing_instances(self) -> list[int]:
        ids = np.unique(self.instance_id)
        return [int(i) for i in ids if i >= 0]

    def instance_class(self, instance: int) -> int:
        sel = self.instance_id == instance
        if not sel.any():
            from .errors import InstanceLookupError

            raise InstanceLookupError(f"instance {instance} not in scene")
        return int(self.semantic_id[sel][0])

    def instance_point_mask(self, instance: int) -> np.ndarray:
        return self.instance_id == instance

    def stuff_point_mask(self, class_id: int) -> np.ndarray:
        return (self.semantic_id == class_id) & (self.instance_id < 0)

    def superpoint_sizes(self) -> np.ndarray:
        return np.bincount(self.superpoint_id, minlength=self.n_superpoints)

    def pool_point_mask(self, point_mask: np.ndarray) -> np.ndarray:
        """Majority vote of a boolean point mask per superpoint -> (M,) float."""
        m = self.n_superpoints
        hits = np.bincount(self.superpoint_id, weights=point_mask.astype(float), minlength=m)
        sizes = self.superpoint_sizes()
        return (hits > 0.5 * sizes).astype(np.float64)


@dataclass
class PromptSet:
    """Interaction prompts: clicks and referring expressions with targets.

    pairing lists (click index, expression index) couples that refer to the
    same instance; used to form the vision-text training pairs.
    """

    clicks: list[tuple[int, int]] = field(default_factory=list)          # (point index, instance)
    expressions: list[tuple[tuple[str, ...], int]] = field(default_factory=list)
    pairing: list[tuple[int, int]] = field(default_factory=list)

    def validate(self, scene: Scene) -> None:
        for point_idx, inst in self.clicks:
            if int(scene.instance_id[point_idx]) != inst:
                raise ContractError(f"click at point {point_idx} does not hit instance {inst}")
        for ci, ei in self.pairing:
            if self.clicks[ci][1] != self.expressions[ei][1]:
                raise ContractError(f"pairing ({ci}, {ei}) targets differ")


@dataclass
class VocabularySplit:
    """Base classes are trainable; novel classes only appear at evaluation."""

    base: list[int]
    novel: list[int]

    def validate(self, n_classes: int) -> None:
        if set(self.base) & set(self.novel):
            raise ContractError("vocabulary split: base and novel overlap")
        if set(self.base) | set(self.novel) != set(range(n_classes)):
            raise ContractError("vocabulary split: classes missing from base + novel")


@dataclass
class PseudoMaskSet:
    """Unsupervised binary point masks with undetermined category."""

    masks: np.ndarray  # (n_masks, N) bool

    def __len__(self) -> int:
        return len(self.masks)


# ---------------------------------------------------------------------------
# serialization: structured JSON text, floats at 17 significant digits


def _fmt_floats(arr: np.ndarray) -> str:
    return "[" + ", ".join(f"{v:.17g}" for v in arr.ravel()) + "]"


def _fmt_ints(arr: np.ndarray) -> str:
    return "[" + ", ".join(str(int(v)) for v in arr.ravel()) + "]"


def scene_to_text(scene: Scene) -> str:
    parts = [
        "{",
        f'  "format": "{SCENE_FORMAT}",',
        f'  "version": {SCENE_VERSION},',
        f'  "n_points": {scene.n_points},',
        f'  "class_names": {json.dumps(scene.class_names)},',
        f'  "stuff_flags": {json.dumps([bool(f) for f in scene.stuff_flags])},',
        f'  "points": {_fmt_floats(scene.points)},',
        f'  "colors": {_fmt_floats(scene.colors)},',
        f'  "instance_id": {_fmt_ints(scene.instance_id)},',
        f'  "semantic_id": {_fmt_ints(scene.semantic_id)},',
        f'  "superpoint_id": {_fmt_ints(scene.superpoint_id)}',
        "}",
    ]
    return "\n".join(parts) + "\n"


def scene_from_text(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed scene file at byte {exc.pos}: {exc.msg}",
                               offset=exc.pos) from None
    if not isinstance(doc, dict) or doc.get("format") != SCENE_FORMAT:
        raise SceneFormatError("not a scene file (missing format marker)")
    if doc.get("version") != SCENE_VERSION:
        raise UnsupportedVersionError(
            f"scene version {doc.get('version')!r} unsupported (expected {SCENE_VERSION})")
    required = ["n_points", "class_names", "stuff_flags", "points", "colors",
                "instance_id", "semantic_id", "superpoint_id"]
    for key in required:
        if key not in doc:
            raise SceneFormatError(f"scene file missing field {key!r}")
    n = int(doc["n_points"])
    points = np.asarray(doc["points"], dtype=np.float64)
    colors = np.asarray(doc["colors"], dtype=np.float64)
    if points.size != 3 * n or colors.size != 3 * n:
        raise SceneFormatError("points/colors length does not match n_points")
    scene = Scene(
        points=points.reshape(n, 3),
        colors=colors.reshape(n, 3),
        instance_id=np.asarray(doc["instance_id"], dtype=np.int64),
        semantic_id=np.asarray(doc["semantic_id"], dtype=np.int64),
        superpoint_id=np.asarray(doc["superpoint_id"], dtype=np.int64),
        class_names=list(doc["class_names"]),
        stuff_flags=[bool(f) for f in doc["stuff_flags"]],
    )
    for name, arr in (("instance_id", scene.instance_id),
                      ("semantic_id", scene.semantic_id),
                      ("superpoint_id", scene.superpoint_id)):
        if arr.shape != (n,):
            raise SceneFormatError(f"{name} length does not match n_points")
    return scene


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_text(scene))


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_text(fh.read())
