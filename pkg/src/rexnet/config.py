"""Run configuration: a flat ``key = value`` text file with typed defaults."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # segmentation
    superpixels: int = 200
    slic_compactness: float = 10.0
    slic_iterations: int = 10
    edge_threshold: float = 0.3
    edge_min_region: int = 16
    # networks
    trunk_channels: tuple = (8, 16, 32, 32)
    head_hidden: int = 256
    branch_dilation: int = 2
    fusion_variant: str = "maps"
    deep_supervision: bool = True
    lambda_edge: float = 0.1
    # optimisation
    seed: int = 0
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    lr_stage1: float = 0.01
    lr_stage2: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 1
    checkpoint_every: int = 500
    # depth refinement
    depth_refine: bool = True
    sigma_pos: float = 5.0
    sigma_dep: float = 0.02
    sigma_col: float = 5.0
    # evaluation
    beta_sq: float = 0.3
    # synthetic corpus
    n_train: int = 200
    n_test: int = 50
    image_size: int = 96
    # execution
    workers: int = 1

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_BOOLS = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def _coerce(name: str, default, raw: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return _BOOLS[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = base.replace(**{k: _coerce(k, known[k], v) for k, v in pairs.items()})
    validate(cfg)
    return cfg


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v
    return parse_overrides(pairs, base)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = parse_text(Path(path).read_text()) if path else RunConfig()
    return parse_overrides(overrides, cfg) if overrides else cfg


def validate(cfg: RunConfig) -> None:
    if len(cfg.trunk_channels) != 4:
        raise ConfigError("trunk_channels needs exactly four entries")
    if cfg.fusion_variant not in ("maps", "features"):
        raise ConfigError("fusion_variant must be 'maps' or 'features'")
    if not 0 < cfg.edge_threshold < 1:
        raise ConfigError("edge_threshold must lie in (0, 1)")
    if cfg.image_size % 16:
        raise ConfigError("image_size must be divisible by 16")
    if cfg.superpixels < 1 or cfg.batch_size < 1 or cfg.branch_dilation < 1:
        raise ConfigError("superpixels, batch_size and branch_dilation must be positive")
