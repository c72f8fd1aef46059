"""Flat key=value run configuration shared by every subcommand."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


def _default_seed() -> int:
    raw = os.environ.get("LSV_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LSV_SEED must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    # corpus generation
    corpus: str = "corpus"
    speakers: int = 40
    test_speakers: int = 8
    utts: int = 20
    frames_min: int = 200
    frames_max: int = 400
    feat_dim: int = 24
    separation: float = 0.5
    seed: int = field(default_factory=_default_seed)
    enroll_utts: int = 1
    n_target: int = 0  # 0: every feasible target trial
    n_nontarget: int = 0  # 0: min(feasible, 4 * n_target)
    # model / training
    system: str = "d-vector"
    framework: str = ""  # optional; must agree with system when set
    manifest: str = ""
    run_dir: str = ""
    epochs: int = 15
    base_lr: float = 1e-3
    batch_size: int = 64
    eval_every: int = 3
    chunk_min: int = 200
    chunk_max: int = 400
    width: int = 512
    profile: str = "desk"
    sigma: float = 0.3
    lambda0: float = 1000.0
    lambda1: float = 10.0
    lambda_rest: float = 0.1
    lambda_norm: str = "unit"  # "unit": weights divided by layer width; "sum": used as given
    eval_trials: str = ""
    resume: str = ""  # "", "latest", or a checkpoint path
    # evaluation / reporting
    trials: str = ""
    backend: str = ""  # "", "cosine" or "plda"; empty picks the framework default
    checkpoint: str = ""
    run: list = field(default_factory=list)
    out: str = ""

    @classmethod
    def keys(cls) -> dict[str, type]:
        types = {"int": int, "float": float, "str": str, "list": list}
        return {f.name: types[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}

    def set(self, key: str, raw) -> None:
        key = key.replace("-", "_")
        kinds = self.keys()
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        kind = kinds[key]
        try:
            if kind is list:
                value = [s for s in (raw if isinstance(raw, list) else str(raw).split(",")) if s]
            else:
                value = kind(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
        setattr(self, key, value)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                k, v = (s.strip() for s in line.split("=", 1))
                try:
                    cfg.set(k, v)
                except ConfigError as e:
                    raise ConfigError(f"{path}:{lineno}: {e}") from None
        return cfg

    def dumps(self) -> str:
        lines = []
        for k in self.keys():
            v = getattr(self, k)
            lines.append(f"{k}={','.join(v) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"
