"""Prompt encoders: frozen hash text embedding, trainable projection, class
name embeddings and vision-click lookup.

The frozen embedder keeps the two properties the model relies on,
determinism and openness to unseen words, without pretrained weights. It
does not model synonym similarity, so tests and protocols always use exact
class-name strings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .rng import make_rng
from .scene import Scene

TEXT_DIM = 64  # frozen embedding width C
NO_OBJECT = "<no-object>"


def embed_text(tokens, embedder_seed: int = 0) -> np.ndarray:
    """Frozen, position-sensitive, unit-norm embedding of a token sequence."""
    tokens = tuple(tokens)
    if not tokens:
        raise ContractError("embed_text: empty token sequence")
    acc = np.zeros(TEXT_DIM)
    for pos, tok in enumerate(tokens):
        rng = make_rng(embedder_seed, "text-embed", pos, str(tok))
        acc = acc + rng.normal(size=TEXT_DIM)
    return acc / np.linalg.norm(acc)


@dataclass
class TextProjection:
    """Two trainable linear layers C -> d_in with a relu between."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    def named_params(self, prefix: str = "text_proj") -> dict[str, ad.Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def init_text_projection(rng: np.random.Generator, d_in: int) -> TextProjection:
    return TextProjection(
        w1=ad.parameter((TEXT_DIM, d_in), rng), b1=ad.parameter(np.zeros(d_in)),
        w2=ad.parameter((d_in, d_in), rng), b2=ad.parameter(np.zeros(d_in)),
    )


def project_text(vectors, proj: TextProjection) -> ad.Tensor:
    """(n, C) frozen embeddings -> (n, d_in) trainable features."""
    x = vectors if isinstance(vectors, ad.Tensor) else ad.Tensor(vectors)
    h = ad.relu(ad.add(ad.matmul(x, proj.w1), proj.b1))
    return ad.add(ad.matmul(h, proj.w2), proj.b2)


@dataclass
class ClassEmbeddings:
    """Frozen unit-norm rows, one per class name plus a no-object row (last)."""

    matrix: np.ndarray          # (n_classes + 1, d_out)
    names: list[str]

    @property
    def no_object_index(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]


def _class_lift(d_out: int, embedder_seed: int) -> np.ndarray:
    """Fixed (d_out, C) lift, sign-canonical.

    Orthonormal columns when d_out >= C (an isometry); orthonormal rows
    otherwise (tests use small d_out).
    """
    rng = make_rng(embedder_seed, "class-lift")
    a = rng.normal(size=(max(d_out, TEXT_DIM), min(d_out, TEXT_DIM)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if d_out >= TEXT_DIM else q.T


def embed_class_names(names, d_out: int, embedder_seed: int = 0,
                      mode: str = "closed") -> ClassEmbeddings:
    """Class-name rows for the prediction head.

    `open` and `closed` share the mechanism: hashing is vocabulary-free, so
    unseen names always embed; the mode only documents the caller's intent.
    """
    names = list(names)
    if not names:
        raise ContractError("embed_class_names: empty name list")
    if len(set(names)) != len(names):
        raise ContractError("embed_class_names: duplicate class names")
    if mode not in ("closed", "open"):
        raise ContractError(f"embed_class_names: unknown mode {mode!r}")
    lift = _class_lift(d_out, embedder_seed)
    rows = []
    for name in names + [NO_OBJECT]:
        vec = lift @ embed_text(tuple(name.split()), embedder_seed)
        rows.append(vec / np.linalg.norm(vec))
    return ClassEmbeddings(matrix=np.array(rows), names=names)


@dataclass
class VisionPromptFeature:
    """A superpoint feature row serving as the click's query seed."""

    feature: ad.Tensor          # (1, d_in), a taped row of the superpoint features
    superpoint: int
    point: int


def encode_vision_prompt(click, scene: Scene, superpoint_features: ad.Tensor) -> VisionPromptFeature:
    """Click -> nearest point -> its superpoint -> that feature row, verbatim.

    `click` is either a point index or a 3-coordinate; coordinate ties go to
    the lowest point index. The returned row stays on the tape, so prompt
    gradients flow back into the backbone.
    """
    if scene.n_points == 0:
        raise ContractError("encode_vision_prompt: empty scene")
    if isinstance(click, (int, np.integer)):
        point = int(click)
        if not 0 <= point < scene.n_points:
            raise ContractError(f"encode_vision_prompt: point index {point} out of range")
    else:
        coord = np.asarray(click, dtype=np.float64)
        if coord.shape != (3,):
            raise ContractError("encode_vision_prompt: click must be index or 3-coordinate")
        point = int(np.argmin(np.linalg.norm(scene.points - coord, axis=1)))
    sp = int(scene.superpoint_id[point])
    row = ad.gather_rows(superpoint_features, np.array([sp]))
    return VisionPromptFeature(feature=row, superpoint=sp, point=point)
