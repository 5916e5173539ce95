"""Versioned checkpoint files: named parameter tensors, optimizer state and
the class table, serialized losslessly (floats at 17 significant digits)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TrainConfig
from .errors import SceneFormatError, UnsupportedVersionError
from .model import Model, init_model
from .optim import AdamWState

CHECKPOINT_FORMAT = "multiseg3d-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume training or reproduce an evaluation."""

    config: TrainConfig
    class_names: list[str]
    stuff_flags: list[bool]
    base_class_ids: list[int]
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    epoch: int = 0
    best_overall: float = 0.0


def checkpoint_from_model(model: Model, opt: AdamWState | None, names: list[str],
                          epoch: int, best_overall: float) -> Checkpoint:
    params = {name: t.data.copy() for name, t in model.named_params().items()}
    ck = Checkpoint(config=model.config, class_names=model.class_names,
                    stuff_flags=model.stuff_flags, base_class_ids=model.base_class_ids,
                    params=params, epoch=epoch, best_overall=best_overall)
    if opt is not None and opt.m:
        ck.opt_m = {n: m.copy() for n, m in zip(names, opt.m)}
        ck.opt_v = {n: v.copy() for n, v in zip(names, opt.v)}
        ck.opt_step = opt.step
    return ck


def model_from_checkpoint(ck: Checkpoint) -> Model:
    model = init_model(ck.config, ck.class_names, ck.stuff_flags, ck.base_class_ids)
    named = model.named_params()
    missing = set(named) - set(ck.params)
    extra = set(ck.params) - set(named)
    if missing or extra:
        raise SceneFormatError(f"checkpoint parameter mismatch: missing={sorted(missing)},"
                               f" extra={sorted(extra)}")
    for name, tensor in named.items():
        stored = ck.params[name]
        if stored.shape != tensor.data.shape:
            raise SceneFormatError(f"checkpoint: {name} shape {stored.shape} != "
                                   f"{tensor.data.shape}")
        tensor.data = stored.copy()
    return model


def _flat(arr: np.ndarray) -> str:
    return "[" + ", ".join(f"{v:.17g}" for v in np.asarray(arr, dtype=np.float64).ravel()) + "]"


def save_checkpoint(ck: Checkpoint, path) -> None:
    def tensor_block(table: dict[str, np.ndarray]) -> str:
        rows = []
        for name in sorted(table):
            arr = table[name]
            rows.append(f'    "{name}": {{"shape": {list(arr.shape)}, '
                        f'"data": {_flat(arr)}}}')
        return "{\n" + ",\n".join(rows) + "\n  }" if rows else "{}"

    cfg = {k: (v if not isinstance(v, bool) else bool(v))
           for k, v in asdict(ck.config).items()}
    parts = [
        "{",
        f'  "format": "{CHECKPOINT_FORMAT}",',
        f'  "version": {CHECKPOINT_VERSION},',
        f'  "config": {json.dumps(cfg)},',
        f'  "class_names": {json.dumps(ck.class_names)},',
        f'  "stuff_flags": {json.dumps([bool(f) for f in ck.stuff_flags])},',
        f'  "base_class_ids": {json.dumps([int(i) for i in ck.base_class_ids])},',
        f'  "epoch": {ck.epoch},',
        f'  "best_overall": {ck.best_overall:.17g},',
        f'  "opt_step": {ck.opt_step},',
        f'  "params": {tensor_block(ck.params)},',
        f'  "opt_m": {tensor_block(ck.opt_m)},',
        f'  "opt_v": {tensor_block(ck.opt_v)}',
        "}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed checkpoint at byte {exc.pos}: {exc.msg}",
                               offset=exc.pos) from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise SceneFormatError("not a checkpoint file (missing format marker)")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {doc.get('version')!r} unsupported")

    def tensors(block: dict) -> dict[str, np.ndarray]:
        out = {}
        for name, spec in block.items():
            arr = np.asarray(spec["data"], dtype=np.float64)
            out[name] = arr.reshape(spec["shape"])
        return out

    config = TrainConfig(**doc["config"]).validate()
    return Checkpoint(
        config=config,
        class_names=list(doc["class_names"]),
        stuff_flags=[bool(f) for f in doc["stuff_flags"]],
        base_class_ids=[int(i) for i in doc["base_class_ids"]],
        params=tensors(doc["params"]),
        opt_m=tensors(doc["opt_m"]),
        opt_v=tensors(doc["opt_v"]),
        opt_step=int(doc["opt_step"]),
        epoch=int(doc["epoch"]),
        best_overall=float(doc["best_overall"]),
    )
