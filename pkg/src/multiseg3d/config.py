"""Training configuration and the flat key=value config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ContractError, SceneFormatError

# the reference training recipe; selftest asserts these stay the defaults
REFERENCE_DEFAULTS = {
    "lr0": 1e-4,
    "weight_decay": 0.05,
    "inter_weight": 0.1,
    "top_k_percent": 10.0,
    "decoder_layers": 6,
    "d_in": 32,
    "d_out": 256,
    "eval_period": 16,
}


@dataclass
class TrainConfig:
    # optimization
    lr0: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 128                # desk-scale budget; full recipe used 512
    batch_size: int = 2
    eval_period: int = 16            # epochs between validation passes
    seed: int = 0
    # architecture
    d_in: int = 32
    d_out: int = 256
    decoder_layers: int = 6
    n_heads: int = 4
    # losses
    inter_weight: float = 0.1        # balance on the inter-task losses
    top_k_percent: float = 10.0      # distillation region size
    # query sampling
    m_low_fraction: float = 0.5      # training m ~ U[ceil(0.5 M), M]
    query_cap: int = 3500
    # prompts
    prompts_per_scene: int = 4       # K_v = K_t upper bound per scene
    pair_cap: int = 8                # vision-text pairs per batch (B)
    # data (defaults used by gen-scenes)
    n_train_scenes: int = 32
    n_val_scenes: int = 8
    points_per_scene: int = 2048
    superpoint_target: int = 96
    # inference thresholds
    binarize_threshold: float = 0.5
    score_floor: float = 0.1
    min_segment_points: int = 25
    # component toggles
    use_distill: bool = True
    use_contrastive: bool = True
    use_rank: bool = True
    use_finetune_trick: bool = False
    # two-stage fine-tuning trick
    finetune_epochs: int = 40
    finetune_scale: float = 1e-3

    def validate(self) -> "TrainConfig":
        for name in ("lr0", "epochs", "batch_size", "d_in", "d_out", "decoder_layers",
                     "eval_period", "points_per_scene", "superpoint_target"):
            if getattr(self, name) <= 0:
                raise ContractError(f"config: {name} must be positive")
        if not 0.0 < self.m_low_fraction <= 1.0:
            raise ContractError("config: m_low_fraction must be in (0, 1]")
        if self.d_in % self.n_heads:
            raise ContractError("config: d_in must be divisible by n_heads")
        return self


def save_config(config: TrainConfig, path) -> None:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{f.name} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    by_name = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneFormatError(f"config line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in by_name:
            raise SceneFormatError(f"config line {lineno}: unknown key {key!r}")
        ftype = by_name[key].type
        if ftype == "bool" or ftype is bool:
            if raw.lower() not in ("true", "false"):
                raise SceneFormatError(f"config line {lineno}: {key} must be true/false")
            values[key] = raw.lower() == "true"
        elif ftype == "int" or ftype is int:
            values[key] = int(raw)
        else:
            values[key] = float(raw)
    return TrainConfig(**values).validate()
