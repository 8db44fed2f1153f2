"""Layered run configuration: defaults < config file < environment < flags.

Keys are flat and dotted (`moe.k = 2` style) in a plain text format so a
resolved snapshot can be written beside every run's outputs and re-read to
reproduce it exactly. Environment variables use the PIE_ prefix with dots
mapped to underscores (model.n_experts -> PIE_MODEL_N_EXPERTS).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .scenarios import GeneratorConfig
from .scoring import ScorerConfig
from .training import TrainConfig

ENV_PREFIX = "PIE_"

DEFAULTS: dict = {
    "model.dim": 32,
    "model.state_dim": 8,
    "model.n_heads": 2,
    "model.fusion_layers": 2,
    "model.red_layers": 2,
    "model.n_experts": 3,
    "model.moe_k": 2,
    "model.moe_hidden": 0,
    "model.p_drop": 0.1,
    "model.n_agent_slots": 8,
    "model.image_tokens_h": 4,
    "model.image_tokens_w": 16,
    "model.lidar_tokens_h": 8,
    "model.lidar_tokens_w": 8,
    "model.fusion": "+-",
    "model.interaction": "shared",
    "model.red_mamba": True,
    "model.red_moe": True,
    "model.seed": 0,
    "train.epochs": 40,
    "train.batch_size": 16,
    "train.lr": 2e-4,
    "train.weight_decay": 0.01,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.seed": 0,
    "train.lambda_v": 1.0,
    "train.lambda_a": 0.5,
    "train.clip_norm": 5.0,
    "train.val_every": 0,
    "gen.seed": 0,
    "gen.train_count": 128,
    "gen.val_count": 32,
    "gen.test_count": 32,
    "gen.lane_half_width": 3.5,
    "gen.v_cruise": 10.0,
    "gen.a_max": 2.0,
    "gen.lookahead": 5.0,
    "gen.max_agents": 8,
    "gen.p_red_light": 0.35,
    "gen.p_unknown_command": 0.0,
    "gen.lidar_cell": 0.5,
    "gen.image_rows": 16,
    "gen.image_cols": 64,
    "gen.template_mix": "straight_road:0.3,left_turn:0.2,right_turn:0.2,"
                        "t_junction:0.15,crosswalk:0.15",
    "scorer.dt": 0.1,
    "scorer.ttc_horizon": 1.0,
    "scorer.accel_limit": 4.0,
    "scorer.jerk_limit": 8.0,
    "scorer.lane_keep_limit": 0.8,
    "scorer.extended_comfort_limit": 2.0,
    "scorer.reverse_limit": 0.5,
    "scorer.min_expert_progress": 0.1,
    "scorer.ego_length": 4.0,
    "scorer.ego_width": 1.85,
    "scorer.ego_center_offset": 1.4,
    "anchors.seed": 0,
    "eval.jobs": 1,
}


class ConfigError(Exception):
    pass


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"config key {key}: cannot parse {raw!r} as "
            f"{type(default).__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def env_name(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "_").upper()


class Config:
    """Resolved flat configuration with typed access."""

    def __init__(self, values: dict):
        self.values = values

    def get(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def __getitem__(self, key: str):
        return self.get(key)

    def snapshot_text(self) -> str:
        lines = [f"{k} = {_format(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_snapshot(self, path) -> None:
        Path(path).write_text(self.snapshot_text())

    # typed sub-config builders -------------------------------------
    def model_config(self) -> ModelConfig:
        g = self.get
        return ModelConfig(
            dim=g("model.dim"), state_dim=g("model.state_dim"),
            n_heads=g("model.n_heads"), fusion_layers=g("model.fusion_layers"),
            red_layers=g("model.red_layers"), n_experts=g("model.n_experts"),
            moe_k=g("model.moe_k"), moe_hidden=g("model.moe_hidden"),
            p_drop=g("model.p_drop"), n_agent_slots=g("model.n_agent_slots"),
            image_tokens=(g("model.image_tokens_h"), g("model.image_tokens_w")),
            lidar_tokens=(g("model.lidar_tokens_h"), g("model.lidar_tokens_w")),
            fusion=g("model.fusion"), interaction=g("model.interaction"),
            red_mamba=g("model.red_mamba"), red_moe=g("model.red_moe"),
            seed=g("model.seed"))

    def train_config(self) -> TrainConfig:
        g = self.get
        return TrainConfig(
            epochs=g("train.epochs"), batch_size=g("train.batch_size"),
            lr=g("train.lr"), weight_decay=g("train.weight_decay"),
            beta1=g("train.beta1"), beta2=g("train.beta2"), eps=g("train.eps"),
            seed=g("train.seed"), lambda_v=g("train.lambda_v"),
            lambda_a=g("train.lambda_a"), clip_norm=g("train.clip_norm"),
            val_every=g("train.val_every"))

    def generator_config(self) -> GeneratorConfig:
        g = self.get
        return GeneratorConfig(
            lane_half_width=g("gen.lane_half_width"), v_cruise=g("gen.v_cruise"),
            a_max=g("gen.a_max"), lookahead=g("gen.lookahead"),
            max_agents=g("gen.max_agents"), p_red_light=g("gen.p_red_light"),
            p_unknown_command=g("gen.p_unknown_command"),
            lidar_cell=g("gen.lidar_cell"), image_rows=g("gen.image_rows"),
            image_cols=g("gen.image_cols"))

    def scorer_config(self) -> ScorerConfig:
        g = self.get
        return ScorerConfig(
            dt=g("scorer.dt"), ttc_horizon=g("scorer.ttc_horizon"),
            accel_limit=g("scorer.accel_limit"), jerk_limit=g("scorer.jerk_limit"),
            lane_keep_limit=g("scorer.lane_keep_limit"),
            extended_comfort_limit=g("scorer.extended_comfort_limit"),
            reverse_limit=g("scorer.reverse_limit"),
            min_expert_progress=g("scorer.min_expert_progress"),
            ego_length=g("scorer.ego_length"), ego_width=g("scorer.ego_width"),
            ego_center_offset=g("scorer.ego_center_offset"))

    def template_mix(self) -> list:
        """Parse gen.template_mix into [(template, weight)] with weights
        normalized."""
        from .scenarios import TEMPLATES
        pairs = []
        for chunk in self.get("gen.template_mix").split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            if ":" not in chunk:
                raise ConfigError(f"gen.template_mix entry {chunk!r} lacks ':'")
            name, _, w = chunk.partition(":")
            if name.strip() not in TEMPLATES:
                raise ConfigError(f"gen.template_mix names unknown template {name.strip()!r}")
            try:
                pairs.append((name.strip(), float(w)))
            except ValueError:
                raise ConfigError(f"gen.template_mix weight {w!r} is not a number") from None
        total = sum(w for _, w in pairs)
        if total <= 0:
            raise ConfigError("gen.template_mix weights must sum to > 0")
        return [(n, w / total) for n, w in pairs]


def parse_file(path) -> dict:
    """Read `key = value` lines; '#' starts a comment."""
    out = {}
    for i, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def resolve(config_file: Optional[str] = None,
            overrides: Optional[list] = None,
            environ: Optional[dict] = None) -> Config:
    """Apply layers in precedence order and return the resolved config."""
    values = dict(DEFAULTS)
    if config_file:
        if not Path(config_file).exists():
            raise ConfigError(f"config file not found: {config_file}")
        for key, raw in parse_file(config_file).items():
            if key not in DEFAULTS:
                raise ConfigError(f"{config_file}: unknown config key {key!r}")
            values[key] = _parse(key, raw)
    env = os.environ if environ is None else environ
    for key in DEFAULTS:
        name = env_name(key)
        if name in env:
            values[key] = _parse(key, env[name])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse(key, raw)
    return Config(values)
