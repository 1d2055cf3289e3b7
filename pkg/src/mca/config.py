"""Training configuration and key=value config files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import DataError


@dataclass
class TrainConfig:
    # defaults: ImageNet-Dogs column of the hyper-parameter table, except lr (desk-scale Adam)
    lr: float = 1e-2
    epochs: int = 100
    batch_size: int = 128
    c: int = 3
    k_i: int = 5
    k_s: int = 20
    k_p: int = 30
    tau_ia: float = 0.05
    tau_pa: float = 0.6
    eta: float = 10.0
    lambda_a: float = 1.0
    lambda_pa: float = 1.0
    lambda_sa: float = 5.0
    gamma_r: int = 1000
    gamma_h: int = 10
    rho_u: float = 0.05
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bias: bool = True
    paper_literal_entropy: bool = False
    prototype_mode: str = "batch"
    holdout: float = 0.25
    workers: int = 1

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "c", "k_i", "k_s", "k_p", "gamma_r", "workers"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.gamma_h < 0 or self.rho_u < 0:
            raise DataError("gamma_h and rho_u must be non-negative")
        if self.tau_ia <= 0 or self.tau_pa <= 0:
            raise DataError("temperatures must be positive")
        if self.lr < 0:
            raise DataError("learning rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")
        if self.prototype_mode not in ("batch", "full"):
            raise DataError(f"unknown prototype mode {self.prototype_mode!r}")
        if not 0 <= self.holdout < 1:
            raise DataError("holdout must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise DataError(f"not a boolean: {value!r}")
    if kind is int or kind == "int":
        return int(value)
    if kind is float or kind == "float":
        return float(value)
    return value.strip()


def parse_kv_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment, keys may use dashes."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such config file: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def apply_overrides(cfg, values: dict[str, str]):
    """Return a copy of dataclass ``cfg`` with string ``values`` coerced onto its fields."""
    types = {f.name: f.type for f in fields(cfg)}
    kw = {}
    for key, value in values.items():
        if key not in types:
            raise DataError(f"unknown config key {key!r}")
        try:
            kw[key] = _coerce(value, types[key]) if isinstance(value, str) else value
        except ValueError as exc:
            raise DataError(f"bad value for {key}: {value!r}") from exc
    return dataclasses.replace(cfg, **kw)
