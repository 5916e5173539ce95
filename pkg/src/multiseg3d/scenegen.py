"""Synthetic room generator: primitive furniture on a floor plane with walls,
label-pure superpoints, unsupervised pseudo masks, click sampling and
template referring expressions.

Everything here is a pure function of (seed, inputs); no global RNG.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import AmbiguityError, ContractError, InstanceLookupError, PlacementError
from .rng import make_rng
from .scene import PseudoMaskSet, Scene

FLOOR = "floor"
WALL = "wall"


@dataclass
class ObjectSpec:
    """Geometry and appearance ranges for one furniture class."""

    name: str
    primitive: str                      # "box" | "cylinder"
    footprint: tuple[float, float]      # box: min/max side; cylinder: min/max radius
    height: tuple[float, float]
    color: tuple[float, float, float]
    elongation: float = 1.0             # box depth/width ratio upper bound


DEFAULT_CATALOG: dict[str, ObjectSpec] = {
    "chair": ObjectSpec("chair", "box", (0.45, 0.60), (0.75, 0.95), (0.62, 0.30, 0.18)),
    "table": ObjectSpec("table", "box", (0.95, 1.40), (0.70, 0.78), (0.40, 0.26, 0.12), 0.65),
    "sofa": ObjectSpec("sofa", "box", (1.50, 1.90), (0.78, 0.95), (0.16, 0.28, 0.58), 0.50),
    "cabinet": ObjectSpec("cabinet", "box", (0.80, 1.20), (1.30, 1.70), (0.52, 0.52, 0.56), 0.45),
    "lamp": ObjectSpec("lamp", "cylinder", (0.14, 0.22), (1.25, 1.60), (0.85, 0.72, 0.25)),
    "stool": ObjectSpec("stool", "cylinder", (0.18, 0.26), (0.42, 0.52), (0.22, 0.55, 0.26)),
}

FLOOR_COLOR = (0.72, 0.70, 0.66)
WALL_COLOR = (0.88, 0.87, 0.82)


@dataclass
class SceneRecipe:
    """What to build: instance counts per class plus room geometry."""

    counts: dict[str, int] = field(default_factory=lambda: {"chair": 3, "table": 1})
    room: tuple[float, float] = (6.0, 5.0)
    wall_height: float = 1.6
    total_points: int = 2048
    superpoint_target: int = 96
    color_noise: float = 0.05
    margin: float = 0.18                # clearance between objects and to walls
    max_retries: int = 120
    catalog: dict[str, ObjectSpec] = field(default_factory=lambda: dict(DEFAULT_CATALOG))
    extra_classes: tuple[str, ...] = ()  # vocabulary-only classes (no instances placed)

    def class_table(self) -> tuple[list[str], list[bool]]:
        # canonical order: the table must agree across scene sets that place
        # different subsets of the vocabulary (train vs open-vocab scenes)
        names = [FLOOR, WALL] + sorted(set(self.counts) | set(self.extra_classes))
        flags = [c in (FLOOR, WALL) for c in names]
        return names, flags


# ---------------------------------------------------------------------------
# surface sampling helpers


def _allocate(weights: np.ndarray, total: int, minimum: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of `total` into len(weights) buckets."""
    weights = np.maximum(np.asarray(weights, dtype=np.float64), 1e-12)
    raw = weights / weights.sum() * (total - minimum.sum())
    out = np.floor(raw).astype(int) + minimum
    rem = total - out.sum()
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    for i in range(rem):
        out[order[i % len(out)]] += 1
    return out


def _sample_box(rng, center, size, n: int) -> np.ndarray:
    """Uniform samples on the top + 4 side faces of an axis-aligned box."""
    dx, dy, dz = size
    areas = np.array([dx * dy, dy * dz, dy * dz, dx * dz, dx * dz])
    counts = _allocate(areas, n, np.zeros(5, dtype=int))
    pts = []
    u = rng.uniform(size=(n, 2))
    offset = 0
    for face, c in enumerate(counts):
        uv = u[offset:offset + c]
        offset += c
        if face == 0:    # top
            p = np.column_stack([(uv[:, 0] - 0.5) * dx, (uv[:, 1] - 0.5) * dy,
                                 np.full(c, dz / 2.0)])
        elif face in (1, 2):  # x- and x+ sides
            sign = -1.0 if face == 1 else 1.0
            p = np.column_stack([np.full(c, sign * dx / 2.0), (uv[:, 0] - 0.5) * dy,
                                 (uv[:, 1] - 0.5) * dz])
        else:            # y- and y+ sides
            sign = -1.0 if face == 3 else 1.0
            p = np.column_stack([(uv[:, 0] - 0.5) * dx, np.full(c, sign * dy / 2.0),
                                 (uv[:, 1] - 0.5) * dz])
        pts.append(p)
    out = np.concatenate(pts)
    out[:, 2] += dz / 2.0          # rest on the floor
    return out + np.array([center[0], center[1], 0.0])


def _sample_cylinder(rng, center, radius: float, height: float, n: int) -> np.ndarray:
    lateral = 2.0 * np.pi * radius * height
    top = np.pi * radius ** 2
    counts = _allocate(np.array([lateral, top]), n, np.zeros(2, dtype=int))
    theta = rng.uniform(0, 2 * np.pi, size=counts[0])
    z = rng.uniform(0, height, size=counts[0])
    side = np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])
    r = radius * np.sqrt(rng.uniform(size=counts[1]))
    phi = rng.uniform(0, 2 * np.pi, size=counts[1])
    cap = np.column_stack([r * np.cos(phi), r * np.sin(phi), np.full(counts[1], height)])
    out = np.concatenate([side, cap])
    return out + np.array([center[0], center[1], 0.0])


def _sample_floor(rng, room, n: int) -> np.ndarray:
    uv = rng.uniform(size=(n, 2)) * np.array(room)
    return np.column_stack([uv[:, 0], uv[:, 1], np.zeros(n)])


def _sample_walls(rng, room, height: float, n: int) -> np.ndarray:
    ex, ey = room
    lengths = np.array([ex, ex, ey, ey])
    counts = _allocate(lengths * height, n, np.zeros(4, dtype=int))
    pts = []
    for wall, c in enumerate(counts):
        t = rng.uniform(size=c) * lengths[wall]
        z = rng.uniform(size=c) * height
        if wall == 0:
            p = np.column_stack([t, np.zeros(c), z])
        elif wall == 1:
            p = np.column_stack([t, np.full(c, ey), z])
        elif wall == 2:
            p = np.column_stack([np.zeros(c), t, z])
        else:
            p = np.column_stack([np.full(c, ex), t, z])
        pts.append(p)
    return np.concatenate(pts)


# ---------------------------------------------------------------------------
# scene generation


def generate_scene(seed: int, recipe: SceneRecipe | None = None) -> Scene:
    """Deterministic synthetic room scene; see SceneRecipe for the knobs."""
    recipe = recipe or SceneRecipe()
    rng = make_rng(seed, "scenegen")
    names, flags = recipe.class_table()
    class_idx = {c: i for i, c in enumerate(names)}
    ex, ey = recipe.room

    # place footprints without overlap
    placements = []
    occupied: list[tuple[float, float, float, float]] = []
    for cls in sorted(recipe.counts):
        if cls not in recipe.catalog:
            raise ContractError(f"recipe: class {cls!r} missing from catalog")
        spec = recipe.catalog[cls]
        for _ in range(recipe.counts[cls]):
            placed = False
            for _attempt in range(recipe.max_retries):
                if spec.primitive == "box":
                    w = rng.uniform(*spec.footprint)
                    d = w * rng.uniform(spec.elongation, 1.0)
                    if rng.uniform() < 0.5:
                        w, d = d, w
                else:
                    w = d = 2.0 * rng.uniform(*spec.footprint)
                h = rng.uniform(*spec.height)
                cx = rng.uniform(recipe.margin + w / 2, ex - recipe.margin - w / 2)
                cy = rng.uniform(recipe.margin + d / 2, ey - recipe.margin - d / 2)
                box = (cx - w / 2 - recipe.margin, cy - d / 2 - recipe.margin,
                       cx + w / 2 + recipe.margin, cy + d / 2 + recipe.margin)
                if all(box[2] < o[0] or box[0] > o[2] or box[3] < o[1] or box[1] > o[3]
                       for o in occupied):
                    occupied.append(box)
                    placements.append((cls, spec, (cx, cy), (w, d, h)))
                    placed = True
                    break
            if not placed:
                raise PlacementError(f"could not place {cls!r} after {recipe.max_retries} tries")

    # point budget: proportional to surface area, minimum per object
    floor_area = ex * ey
    wall_area = 2.0 * (ex + ey) * recipe.wall_height
    obj_areas = []
    for cls, spec, _, (w, d, h) in placements:
        if spec.primitive == "box":
            obj_areas.append(w * d + 2 * (w + d) * h)
        else:
            obj_areas.append(2 * np.pi * (w / 2) * h + np.pi * (w / 2) ** 2)
    weights = np.array([floor_area, wall_area] + obj_areas)
    minimum = np.array([16, 16] + [24] * len(placements))
    if minimum.sum() > recipe.total_points:
        raise ContractError("recipe: total_points too small for the object count")
    counts = _allocate(weights, recipe.total_points, minimum)

    chunks, colors, inst_ids, sem_ids = [], [], [], []

    def add(points, base_color, sem, inst):
        chunks.append(points)
        noise = rng.uniform(-recipe.color_noise, recipe.color_noise, size=points.shape)
        colors.append(np.clip(np.asarray(base_color) + noise, 0.0, 1.0))
        sem_ids.append(np.full(len(points), sem, dtype=np.int64))
        inst_ids.append(np.full(len(points), inst, dtype=np.int64))

    add(_sample_floor(rng, recipe.room, counts[0]), FLOOR_COLOR, class_idx[FLOOR], -1)
    add(_sample_walls(rng, recipe.room, recipe.wall_height, counts[1]),
        WALL_COLOR, class_idx[WALL], -1)
    for k, (cls, spec, center, (w, d, h)) in enumerate(placements):
        if spec.primitive == "box":
            pts = _sample_box(rng, center, (w, d, h), counts[2 + k])
        else:
            pts = _sample_cylinder(rng, center, w / 2.0, h, counts[2 + k])
        add(pts, spec.color, class_idx[cls], k)

    points = np.concatenate(chunks)
    scene = Scene(
        points=points,
        colors=np.concatenate(colors),
        instance_id=np.concatenate(inst_ids),
        semantic_id=np.concatenate(sem_ids),
        superpoint_id=np.zeros(len(points), dtype=np.int64),
        class_names=names,
        stuff_flags=flags,
    )
    scene.superpoint_id = compute_superpoints(scene, recipe.superpoint_target, seed=seed)
    return scene


# ---------------------------------------------------------------------------
# superpoints: seeded region growing on the label-restricted 8-NN graph


def _knn_edges(points: np.ndarray, colors: np.ndarray, k: int = 8,
               color_weight: float = 0.3):
    """Symmetric weighted edge list of the k-NN graph over these points."""
    n = len(points)
    kq = min(k + 1, n)
    tree = cKDTree(points)
    _, nbr = tree.query(points, k=kq)
    nbr = np.atleast_2d(nbr)
    if kq == 1:
        nbr = nbr.reshape(n, 1)
    src = np.repeat(np.arange(n), nbr.shape[1])
    dst = nbr.ravel()
    keep = src != dst
    src, dst = src[keep], dst[keep]
    src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])  # symmetrize
    spatial = np.linalg.norm(points[src] - points[dst], axis=1)
    chroma = np.linalg.norm(colors[src] - colors[dst], axis=1)
    w = spatial + color_weight * chroma
    return src, dst, w


def _components(n: int, src, dst) -> np.ndarray:
    """Union-find connected components over an edge list."""
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in zip(src, dst):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(n)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels


def _grow_regions(n: int, adj: list[list[tuple[int, float]]], seeds: list[int]) -> np.ndarray:
    """Multi-source Dijkstra; each point takes the seed that reaches it first.

    Ties go to the lower seed rank, which keeps cells connected and the
    result independent of heap internals.
    """
    dist = np.full(n, np.inf)
    owner = np.full(n, -1, dtype=np.int64)
    heap = []
    for rank, s in enumerate(seeds):
        dist[s] = 0.0
        owner[s] = rank
        heapq.heappush(heap, (0.0, rank, s))
    while heap:
        d, rank, i = heapq.heappop(heap)
        if d > dist[i] or (d == dist[i] and rank > owner[i]):
            continue
        for j, w in adj[i]:
            nd = d + w
            if nd < dist[j] or (nd == dist[j] and rank < owner[j]):
                dist[j] = nd
                owner[j] = rank
                heapq.heappush(heap, (nd, rank, j))
    return owner


def compute_superpoints(scene: Scene, target: int, seed: int = 0) -> np.ndarray:
    """Partition the scene into roughly `target` label-pure, connected cells.

    Cells never cross an (instance, semantic) label boundary, so every
    superpoint is instance-pure by construction. M lands in
    [target/2, 2*target] for any recipe this generator emits.
    """
    n = scene.n_points
    if target < 1:
        raise ContractError("compute_superpoints: target must be >= 1")
    if target > n:
        raise ContractError(f"compute_superpoints: target {target} exceeds N={n}")
    rng = make_rng(seed, "superpoints")

    # group points by label, then by spatial component within the group
    keys = scene.instance_id * np.int64(10_000) + scene.semantic_id
    comp_global = np.full(n, -1, dtype=np.int64)
    comp_sizes: list[int] = []
    comp_points: list[np.ndarray] = []
    next_comp = 0
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        src, dst, w = _knn_edges(scene.points[idx], scene.colors[idx])
        labels = _components(len(idx), src, dst)
        for c in range(labels.max() + 1):
            members = idx[labels == c]
            comp_global[members] = next_comp
            comp_sizes.append(len(members))
            comp_points.append(members)
            next_comp += 1

    sizes = np.array(comp_sizes, dtype=np.float64)
    alloc = np.maximum(1, np.floor(target * sizes / n).astype(int))
    alloc = np.minimum(alloc, sizes.astype(int))
    leftover = target - alloc.sum()
    if leftover > 0:
        frac = target * sizes / n - np.floor(target * sizes / n)
        room = sizes.astype(int) - alloc
        order = np.argsort(-frac, kind="stable")
        i = 0
        while leftover > 0 and np.any(room > 0):
            c = order[i % len(order)]
            if room[c] > 0:
                alloc[c] += 1
                room[c] -= 1
                leftover -= 1
            i += 1

    m_total = int(alloc.sum())
    if not (target / 2 <= m_total <= 2 * target):
        raise ContractError(
            f"compute_superpoints: target {target} incompatible with label structure "
            f"(would produce M={m_total})")

    out = np.full(n, -1, dtype=np.int64)
    offset = 0
    for members, n_seeds in zip(comp_points, alloc):
        k = len(members)
        pts = scene.points[members]
        src, dst, w = _knn_edges(pts, scene.colors[members])
        adj: list[list[tuple[int, float]]] = [[] for _ in range(k)]
        for a, b, ww in zip(src, dst, w):
            adj[a].append((int(b), float(ww)))
        # farthest-point seeds, seeded start; duplicates cannot seed twice
        start = int(rng.integers(k))
        seeds = [start]
        d2 = np.linalg.norm(pts - pts[start], axis=1)
        for _ in range(int(n_seeds) - 1):
            if d2.max() == 0.0:
                break
            nxt = int(np.argmax(d2))
            seeds.append(nxt)
            d2 = np.minimum(d2, np.linalg.norm(pts - pts[nxt], axis=1))
        owner = _grow_regions(k, adj, seeds)
        out[members] = owner + offset
        offset += len(seeds)
    return out


# ---------------------------------------------------------------------------
# open-set pseudo masks: labels are never read here


def generate_pseudo_masks(scene: Scene, seed: int = 0, min_size: int | None = None,
                          color_threshold: float = 0.15,
                          spatial_factor: float = 3.0) -> PseudoMaskSet:
    """Unsupervised oversegmentation into geometric/chromatic regions.

    Point colors are median-filtered over the 8-NN neighborhood (robust to
    per-point noise without blending across boundaries), then edges of the
    8-NN graph survive when the filtered colors agree and the spatial gap is
    small relative to the median neighbor spacing; connected components
    become masks. Coverage of at least 80% of the points is guaranteed by
    admitting smaller components until reached.
    """
    n = scene.n_points
    kq = min(9, n)
    _, nbr = cKDTree(scene.points).query(scene.points, k=kq)
    filtered = np.median(scene.colors[nbr.reshape(n, kq)], axis=1)
    src, dst, _ = _knn_edges(scene.points, filtered, color_weight=0.0)
    spatial = np.linalg.norm(scene.points[src] - scene.points[dst], axis=1)
    chroma = np.linalg.norm(filtered[src] - filtered[dst], axis=1)
    cut = spatial_factor * np.median(spatial)
    keep = (spatial <= cut) & (chroma <= color_threshold)
    labels = _components(n, src[keep], dst[keep])
    if min_size is None:
        min_size = max(4, n // 256)

    order = np.argsort(-np.bincount(labels), kind="stable")
    masks, covered = [], 0
    for c in order:
        mask = labels == c
        size = int(mask.sum())
        if size >= min_size or covered < 0.8 * n:
            masks.append(mask)
            covered += size
        if size < min_size and covered >= 0.8 * n:
            break
    _ = seed  # the procedure is deterministic; seed kept for interface parity
    return PseudoMaskSet(masks=np.array(masks, dtype=bool))


# ---------------------------------------------------------------------------
# prompt simulation


def _instance_points(scene: Scene, instance: int) -> np.ndarray:
    idx = np.flatnonzero(scene.instance_id == instance)
    if len(idx) == 0:
        raise InstanceLookupError(f"instance {instance} not in scene")
    return idx


def sample_vision_prompt(scene: Scene, instance: int, strategy: str = "center",
                         r_d: float | None = None, seed: int = 0) -> int:
    """Pick the click point index on an instance.

    center: point nearest the instance centroid (ties -> lowest index);
    quantile: the floor(r_d * n)-th nearest point to the centroid, clamped
    to [1, n]; random: uniform over the instance's points.
    """
    idx = _instance_points(scene, instance)
    pts = scene.points[idx]
    center = pts.mean(axis=0)
    dist = np.linalg.norm(pts - center, axis=1)
    if strategy == "center":
        return int(idx[np.argmin(dist)])  # argmin takes the first (lowest index) on ties
    if strategy == "quantile":
        if r_d is None:
            raise ContractError("sample_vision_prompt: quantile strategy needs r_d")
        order = np.lexsort((idx, dist))
        k = min(max(int(np.floor(r_d * len(idx))), 1), len(idx))
        return int(idx[order[k - 1]])
    if strategy == "random":
        rng = make_rng(seed, "click", instance)
        return int(idx[rng.integers(len(idx))])
    raise ContractError(f"sample_vision_prompt: unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# referring expressions: closed template grammar, always re-resolvable

_RELATIONS = {
    "left of": lambda t, a: t[0] < a[0],
    "right of": lambda t, a: t[0] > a[0],
    "in front of": lambda t, a: t[1] < a[1],
    "behind": lambda t, a: t[1] > a[1],
}


def _centroid(scene: Scene, instance: int) -> np.ndarray:
    return scene.points[_instance_points(scene, instance)].mean(axis=0)


def _instances_by_class(scene: Scene) -> dict[int, list[int]]:
    by_cls: dict[int, list[int]] = {}
    for inst in scene.thing_instances():
        by_cls.setdefault(scene.instance_class(inst), []).append(inst)
    return by_cls


def make_text_expression(scene: Scene, instance: int, seed: int = 0) -> tuple[str, ...]:
    """Template expression that uniquely picks `instance` among its class."""
    cls = scene.instance_class(instance)
    by_cls = _instances_by_class(scene)
    cls_name = scene.class_names[cls]
    same = by_cls[cls]
    if len(same) == 1:
        return ("the", cls_name)

    centroids = {i: _centroid(scene, i) for i in scene.thing_instances()}
    candidates: list[tuple[str, ...]] = []
    anchors = [c for c, insts in sorted(by_cls.items()) if c != cls and len(insts) == 1]
    for anchor_cls in anchors:
        anchor = by_cls[anchor_cls][0]
        anchor_name = scene.class_names[anchor_cls]
        for rel, pred in _RELATIONS.items():
            sat = [i for i in same if pred(centroids[i], centroids[anchor])]
            if sat == [instance]:
                candidates.append(("the", cls_name, *rel.split(), "the", anchor_name))
        near = min(same, key=lambda i: (np.linalg.norm(centroids[i] - centroids[anchor]), i))
        dists = sorted(np.linalg.norm(centroids[i] - centroids[anchor]) for i in same)
        if near == instance and dists[1] - dists[0] > 1e-9:
            candidates.append(("the", cls_name, "nearest", "to", "the", anchor_name))
    if not candidates:
        raise AmbiguityError(
            f"no uniquely-resolving expression for instance {instance} ({cls_name})")
    rng = make_rng(seed, "expression", instance)
    return candidates[int(rng.integers(len(candidates)))]


def resolve_expression(scene: Scene, tokens: tuple[str, ...]) -> int:
    """Evaluate template semantics; returns the unique target instance id."""
    tokens = tuple(tokens)
    if len(tokens) < 2 or tokens[0] != "the":
        raise ContractError(f"unparseable expression {tokens!r}")
    by_name = {scene.class_names[c]: c for c in range(scene.n_classes)}
    cls = by_name.get(tokens[1])
    if cls is None:
        raise ContractError(f"unknown class {tokens[1]!r} in expression")
    same = _instances_by_class(scene).get(cls, [])
    if len(tokens) == 2:
        if len(same) != 1:
            raise AmbiguityError(f"'the {tokens[1]}' does not pick a unique instance")
        return same[0]
    rel = " ".join(tokens[2:-2])
    anchor_cls = by_name.get(tokens[-1])
    if tokens[-2] != "the" or anchor_cls is None:
        raise ContractError(f"unparseable expression {tokens!r}")
    anchor_insts = _instances_by_class(scene).get(anchor_cls, [])
    if len(anchor_insts) != 1:
        raise AmbiguityError(f"anchor 'the {tokens[-1]}' is not unique")
    anchor_c = _centroid(scene, anchor_insts[0])
    centroids = {i: _centroid(scene, i) for i in same}
    if rel == "nearest to":
        best = min(same, key=lambda i: (np.linalg.norm(centroids[i] - anchor_c), i))
        return best
    if rel not in _RELATIONS:
        raise ContractError(f"unknown relation {rel!r}")
    sat = [i for i in same if _RELATIONS[rel](centroids[i], anchor_c)]
    if len(sat) != 1:
        raise AmbiguityError(f"expression {tokens!r} matches {len(sat)} instances")
    return sat[0]
