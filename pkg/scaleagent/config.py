import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .internal.neuralcore import OptimizerConfig
from .internal.sca import AgentConfig
from .internal.segnet import SegNetConfig
from .internal.synthgeo import SceneConfig

ENV_PREFIX = 'SCALEAGENT_'
# Environment variables with the prefix that are not config keys
RESERVED_ENV = {'SCALEAGENT_CONFIG', 'SCALEAGENT_SLOW_TESTS'}

DEFAULT_POLICIES = [
    'local_only', 'context_only_2', 'context_only_4', 'fixed_2', 'fixed_3', 'fixed_4', 'fixed_5', 'fixed_6',
    'random', 'single_branch', 'learned', 'oracle',
]


class ConfigError(Exception):
    pass


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: Optional[str] = None
    test_dataset: Optional[str] = None
    out: str = 'runs/default'
    train_scenes: int = 20
    test_scenes: int = 10
    patch_h: int = 64
    patch_w: int = 64
    thumb_h: int = 64
    thumb_w: int = 64
    scene: SceneConfig = Field(default_factory=SceneConfig)
    segnet: SegNetConfig = Field(default_factory=SegNetConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    agent_optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    pretrain_steps: int = 3000
    agent_steps: int = 3000
    joint_steps: int = 2000
    interval: int = 100
    batch_size: int = 4
    log_every: int = 100
    checkpoint_every: int = 0
    reward_window: int = 10
    policies: List[str] = Field(default_factory=lambda: list(DEFAULT_POLICIES))
    random_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1
    seed: int = 0

    @field_validator('pretrain_steps', 'agent_steps', 'joint_steps', 'checkpoint_every', 'train_scenes', 'test_scenes')
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError('must be >= 0')
        return v

    @field_validator('interval', 'batch_size', 'log_every', 'reward_window', 'workers',
                     'patch_h', 'patch_w', 'thumb_h', 'thumb_w')
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError('must be >= 1')
        return v

    @field_validator('seed')
    @classmethod
    def validate_seed(cls, v):
        if not 0 <= v < 2 ** 64:
            raise ValueError('seed must fit in u64')
        return v

    @field_validator('random_seeds')
    @classmethod
    def validate_random_seeds(cls, v):
        if not v:
            raise ValueError('random_seeds must not be empty')
        return v

    @model_validator(mode='after')
    def validate_geometry(self):
        stride = self.segnet.stride
        if self.patch_h % stride or self.patch_w % stride:
            raise ValueError(f'patch {self.patch_h}x{self.patch_w} must be divisible by the segnet stride {stride}')
        if self.agent.in_channels != self.segnet.in_channels:
            raise ValueError('agent.in_channels must equal segnet.in_channels')
        if self.patch_h > self.scene.height or self.patch_w > self.scene.width:
            raise ValueError('patch must fit inside the generated scenes')
        if self.thumb_h > self.scene.height or self.thumb_w > self.scene.width:
            raise ValueError('thumbnail must fit inside the generated scenes')
        return self

    @property
    def patch_hw(self):
        return self.patch_h, self.patch_w

    @property
    def thumb_hw(self):
        return self.thumb_h, self.thumb_w


def _set_dotted(config: Dict[str, Any], key: str, value: Any):
    node = config
    parts = key.split('.')
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Key '{key}': '{part}' is not a section")
        node = child
    node[parts[-1]] = value


def parse_flat(text: str, source: str = '<config>') -> Dict[str, Any]:
    """Parse ``key = value`` lines; values are typed like YAML scalars."""
    config: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigError(f"{source}:{lineno}: cannot parse value '{value}'") from e
        _set_dotted(config, key, parsed)
    return config


def _one_line(error: ValidationError) -> str:
    first = error.errors()[0]
    location = '.'.join(str(p) for p in first['loc']) or 'config'
    more = f" (+{error.error_count() - 1} more)" if error.error_count() > 1 else ''
    return f"{location}: {first['msg']}{more}"


class ScaleAgentConfig:
    def __init__(self, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        self.config_path = config_path or os.environ.get('SCALEAGENT_CONFIG')
        self.overrides = overrides or {}
        self.config = self._load_config()
        self.run = self._validate_config(self.config)

    def _read_file(self) -> Dict[str, Any]:
        if not self.config_path:
            return {}
        path = Path(self.config_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {self.config_path}")
        try:
            text = path.read_text(encoding='utf-8')
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"Cannot read config {self.config_path}: {e}") from e
        if path.suffix in ('.yaml', '.yml'):
            try:
                loaded = yaml.safe_load(text) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Invalid YAML in {self.config_path}") from e
            if not isinstance(loaded, dict):
                raise ConfigError(f"{self.config_path}: top level must be a mapping")
            return loaded
        return parse_flat(text, str(path))

    def _load_config(self) -> Dict[str, Any]:
        config = self._read_file()
        # Override from env, e.g. SCALEAGENT_AGENT__GAMMA -> agent.gamma
        for key, value in sorted(os.environ.items()):
            if key.startswith(ENV_PREFIX) and key not in RESERVED_ENV:
                config_key = key[len(ENV_PREFIX):].lower().replace('__', '.')
                try:
                    _set_dotted(config, config_key, yaml.safe_load(value))
                except yaml.YAMLError as e:
                    raise ConfigError(f"Cannot parse {key}='{value}'") from e
        for key, value in self.overrides.items():
            if value is not None:
                _set_dotted(config, key, value)
        return config

    def _validate_config(self, config: Dict[str, Any]) -> RunConfig:
        try:
            return RunConfig.model_validate(config)
        except ValidationError as e:
            raise ConfigError(_one_line(e)) from e

    def get(self, key: str, default=None):
        node: Any = self.run.model_dump()
        for part in key.split('.'):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def get_scene_config(self) -> SceneConfig:
        return self.run.scene.model_copy(update={'seed': self.run.seed})

    def get_out_dir(self) -> Path:
        return Path(self.run.out)

    def to_dict(self) -> Dict[str, Any]:
        return self.run.model_dump(mode='json')
