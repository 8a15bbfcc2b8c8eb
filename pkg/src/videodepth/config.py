"""Key = value text configuration for training runs.

Lines are `key = value`; blank lines and `#` comments are ignored.
Types are coerced from the TrainConfig field defaults; unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ContractError


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "train_out"
    seed: int = 0
    fusion: str = "warped"  # pair | naive | warped
    image_size: int = 64
    planes: int = 64
    d_near: float = 0.25
    d_far: float = 20.0
    batch_size: int = 4
    subsequence_length: int = 8
    k_measurements: int = 1
    pair_iterations: int = 500
    cell_decoder_iterations: int = 500
    encoder_iterations: int = 0
    full_iterations: int = 1000
    finetune_iterations: int = 300
    learning_rate: float = 1e-4
    finetune_learning_rate: float = 5e-5
    val_fraction: float = 0.15
    val_interval: int = 25
    symmetric_pair: bool = False
    augment: bool = True
    pair_checkpoint: str = ""
    cell_kind: str = "convlstm"  # convlstm | convgru
    cell_configuration: int = 5


def _coerce(name: str, kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ContractError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ContractError(
            f"config key {name}: expected {kind.__name__}, got {raw!r}") from None


def parse_config(path) -> TrainConfig:
    kinds = {f.name: type(f.default) for f in fields(TrainConfig)}
    values = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ContractError(f"{path}:{line_no}: expected key = value")
            key, raw = (part.strip() for part in body.split("=", 1))
            if key not in kinds:
                raise ContractError(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = _coerce(key, kinds[key], raw)
    return TrainConfig(**values)


def write_config(cfg: TrainConfig, path):
    with open(path, "w") as fh:
        for f in fields(TrainConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")
