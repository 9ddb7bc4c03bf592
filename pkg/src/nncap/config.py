"""Run configuration: defaults, flat key=value config files, CLI overrides.

Every training hyperparameter default matches the experiment settings the
package ships with; a config file (lines of ``key = value``, ``#``
comments allowed) overrides the defaults, and explicit CLI flags override
the file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import DEFAULT_SPLIT_RATIOS


@dataclass
class RunConfig:
    # loss weights and optimizer
    ce_weight: float = 0.9
    nce_weight: float = 5.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    max_epochs: int = 30
    gl_threshold: float = 5.0
    nce_temperature: float = 0.07
    cam_epochs: int = 10
    cam_lr: float = 1e-2
    seed: int = 0
    # model shape
    d_model: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    # retrieval
    n_neighbors: int = 64
    knn_weight: float = 0.25
    # ablations
    no_nncm: bool = False
    no_cam: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.knn_weight <= 1.0:
            raise ValueError(f"knn_weight must lie in [0, 1], got {self.knn_weight}")
        if self.n_neighbors < 1:
            raise ValueError(f"n_neighbors must be >= 1, got {self.n_neighbors}")


# The fixed small-scale benchmark the ablation experiment runs on.
BENCHMARK = {
    "n": 2500,
    "seed": 11,
    "split_ratios": (0.8, 0.1, 0.1),
}
BENCHMARK_SEEDS = (1, 2, 3)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    return target_type(value)


def build_run_config(file_path: str | Path | None = None,
                     overrides: dict | None = None) -> RunConfig:
    """defaults < config file < explicit overrides (None means unset)."""
    cfg = RunConfig()
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {name: type(getattr(cfg, name)) for name in known}
    if file_path is not None:
        for key, value in parse_config_file(file_path).items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(value, types[key]))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg
