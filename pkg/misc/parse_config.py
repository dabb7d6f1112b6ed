import configparser
import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

from dotenv import load_dotenv

from misc.errors import ConfigError

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(__file__), 'pipeline_config.cfg')
ENV_PATH = os.path.join(os.path.dirname(__file__), '.env')


@dataclass(frozen=True)
class PairPolicy:
    max_angle_deg: float = 75.0
    max_translation_m: float = 1.5
    k_nearest: Optional[int] = 4


@dataclass(frozen=True)
class PipelineConfig:
    '''
    Fully resolved settings for one segmentation run. Every field has a counterpart
    in `misc/pipeline_config.cfg` and a command line flag of the same name.
    '''

    # 2D stage
    tau2d_percentile: float = 78.0
    tau2d_override: Optional[float] = None
    min_match_confidence: float = 0.5
    max_matches_per_pair: int = 10000
    pair_policy: PairPolicy = field(default_factory=PairPolicy)
    sparse_view_max_images: int = 4

    # 3D stage
    tau3d: float = 5e-4
    min_point_confidence: float = 0.5
    max_cloud_points: int = 50000
    enable_3d: bool = True

    # Background and run settings
    reach_radius: float = 1.5
    workspace_origin: Optional[tuple] = None
    background_mask_paths: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 0

    def validate(self) -> 'PipelineConfig':

        if not 0 < self.tau2d_percentile <= 100:
            raise ConfigError(f"tau2d_percentile must be in (0, 100], got {self.tau2d_percentile}")
        if self.tau2d_override is not None and self.tau2d_override < 0:
            raise ConfigError(f"tau2d_override must be non-negative, got {self.tau2d_override}")
        if not 0 <= self.min_match_confidence <= 1:
            raise ConfigError(f"min_match_confidence must be in [0, 1], got {self.min_match_confidence}")
        if self.max_matches_per_pair < 1:
            raise ConfigError(f"max_matches_per_pair must be at least 1, got {self.max_matches_per_pair}")
        if self.max_cloud_points < 1:
            raise ConfigError(f"max_cloud_points must be at least 1, got {self.max_cloud_points}")
        if self.reach_radius <= 0:
            raise ConfigError(f"reach_radius must be positive, got {self.reach_radius}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.threads < 0:
            raise ConfigError(f"threads must be 0 (auto) or positive, got {self.threads}")
        if self.pair_policy.max_angle_deg <= 0 or self.pair_policy.max_translation_m <= 0:
            raise ConfigError("pair_policy limits must be positive")
        if self.pair_policy.k_nearest is not None and self.pair_policy.k_nearest < 1:
            raise ConfigError(f"pair_policy.k_nearest must be at least 1, got {self.pair_policy.k_nearest}")
        if self.workspace_origin is not None and len(self.workspace_origin) != 3:
            raise ConfigError("workspace_origin needs exactly three coordinates")

        return self

    @property
    def resolved_threads(self) -> int:
        return self.threads or (os.cpu_count() or 1)

    def to_dict(self) -> dict:
        '''Serializable form of the configuration, without `threads`.'''

        return {
            'tau2d_percentile': self.tau2d_percentile,
            'tau2d_override': self.tau2d_override,
            'min_match_confidence': self.min_match_confidence,
            'max_matches_per_pair': self.max_matches_per_pair,
            'pair_policy': {
                'max_angle_deg': self.pair_policy.max_angle_deg,
                'max_translation_m': self.pair_policy.max_translation_m,
                'k_nearest': self.pair_policy.k_nearest,
            },
            'sparse_view_max_images': self.sparse_view_max_images,
            'tau3d': self.tau3d,
            'min_point_confidence': self.min_point_confidence,
            'max_cloud_points': self.max_cloud_points,
            'enable_3d': self.enable_3d,
            'reach_radius': self.reach_radius,
            'workspace_origin': list(self.workspace_origin) if self.workspace_origin is not None else None,
            'background_mask_paths': {str(key): value for key, value in sorted(self.background_mask_paths.items())},
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> 'PipelineConfig':

        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(sorted(unknown))}")

        values = dict(raw)
        if 'pair_policy' in values and isinstance(values['pair_policy'], dict):
            values['pair_policy'] = PairPolicy(**values['pair_policy'])
        if values.get('workspace_origin') is not None:
            values['workspace_origin'] = tuple(float(v) for v in values['workspace_origin'])
        if 'background_mask_paths' in values:
            values['background_mask_paths'] = {int(key): value for key, value in values['background_mask_paths'].items()}

        try:
            return cls(**values).validate()
        except TypeError as e:
            raise ConfigError(f"Invalid configuration: {e}")


def _optional_float(text: str) -> Optional[float]:
    text = text.strip()
    return float(text) if text and text.lower() != 'none' else None


def _optional_int(text: str) -> Optional[int]:
    text = text.strip()
    return int(text) if text and text.lower() != 'none' else None


def read_cfg_file(file_path: str, base: PipelineConfig) -> PipelineConfig:
    '''
    Parse an INI style config file and layer its values over `base`.\n

    Parameters:
        `file_path (str)` - Path of the .cfg file.\n
        `base (PipelineConfig)` - Configuration the file values override.\n

    Return:
        `config (PipelineConfig)` - Merged configuration.\n
    '''

    reader = configparser.ConfigParser()
    if not reader.read(file_path):
        raise ConfigError(f"Config file not found: {file_path}")

    values = {}
    try:
        if reader.has_section('match2d'):
            section = reader['match2d']
            if 'tau2d_percentile' in section:
                values['tau2d_percentile'] = section.getfloat('tau2d_percentile')
            if 'tau2d_override' in section:
                values['tau2d_override'] = _optional_float(section['tau2d_override'])
            if 'min_match_confidence' in section:
                values['min_match_confidence'] = section.getfloat('min_match_confidence')
            if 'max_matches_per_pair' in section:
                values['max_matches_per_pair'] = section.getint('max_matches_per_pair')
            if 'sparse_view_max_images' in section:
                values['sparse_view_max_images'] = section.getint('sparse_view_max_images')

        if reader.has_section('pair_policy'):
            section = reader['pair_policy']
            values['pair_policy'] = PairPolicy(
                max_angle_deg=section.getfloat('max_angle_deg', base.pair_policy.max_angle_deg),
                max_translation_m=section.getfloat('max_translation_m', base.pair_policy.max_translation_m),
                k_nearest=_optional_int(section.get('k_nearest', str(base.pair_policy.k_nearest))),
            )

        if reader.has_section('lift3d'):
            section = reader['lift3d']
            if 'tau3d' in section:
                values['tau3d'] = section.getfloat('tau3d')
            if 'min_point_confidence' in section:
                values['min_point_confidence'] = section.getfloat('min_point_confidence')
            if 'max_cloud_points' in section:
                values['max_cloud_points'] = section.getint('max_cloud_points')
            if 'enable_3d' in section:
                values['enable_3d'] = section.getboolean('enable_3d')

        if reader.has_section('pipeline'):
            section = reader['pipeline']
            if 'reach_radius' in section:
                values['reach_radius'] = section.getfloat('reach_radius')
            if 'workspace_origin' in section:
                origin = section['workspace_origin'].strip()
                values['workspace_origin'] = tuple(float(v) for v in origin.split(',')) if origin else None
            if 'seed' in section:
                values['seed'] = section.getint('seed')
            if 'threads' in section:
                values['threads'] = section.getint('threads')

        if reader.has_section('background'):
            values['background_mask_paths'] = {int(key): value for key, value in reader['background'].items()}

    except ValueError as e:
        raise ConfigError(f"Invalid value in {file_path}: {e}")

    return replace(base, **values).validate()


def read_config_file(file_path: str, base: PipelineConfig) -> PipelineConfig:

    if not os.path.exists(file_path):
        raise ConfigError(f"Config file not found: {file_path}")

    # A config_echo.json from an earlier run reproduces that run exactly
    if file_path.endswith('.json'):
        with open(file_path, 'r', encoding='utf-8') as json_file:
            try:
                raw = json.load(json_file)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid JSON in {file_path}: {e}")
        merged = base.to_dict()
        merged.update(raw)
        return replace(PipelineConfig.from_dict(merged), threads=base.threads)

    return read_cfg_file(file_path, base)


def extract_config_info(config_path: Optional[str] = None, env_path: str = ENV_PATH) -> PipelineConfig:
    '''
    Build the effective configuration: packaged defaults, then `misc/.env`, then an
    optional user config file.\n

    Parameters:
        `config_path (str)` - Optional .cfg or config_echo.json path supplied by the user.\n
        `env_path (str)` - Location of the dotenv file with SEGFUSE_* overrides.\n

    Return:
        `config (PipelineConfig)` - Validated configuration.\n
    '''

    config = read_cfg_file(DEFAULT_CONFIG_PATH, PipelineConfig())

    load_dotenv(env_path)
    env_config = os.environ.get('SEGFUSE_CONFIG')
    if env_config:
        config = read_config_file(env_config, config)

    env_values = {}
    try:
        if os.environ.get('SEGFUSE_THREADS'):
            env_values['threads'] = int(os.environ['SEGFUSE_THREADS'])
        if os.environ.get('SEGFUSE_SEED'):
            env_values['seed'] = int(os.environ['SEGFUSE_SEED'])
    except ValueError as e:
        raise ConfigError(f"Invalid SEGFUSE_* environment value: {e}")
    config = replace(config, **env_values).validate()

    if config_path:
        config = read_config_file(config_path, config)

    return config


def apply_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:

    # Flags left unset arrive as None and keep the configured value
    values = {key: value for key, value in overrides.items() if value is not None}
    policy_values = {key: values.pop(key) for key in ('max_angle_deg', 'max_translation_m', 'k_nearest') if key in values}
    if policy_values:
        values['pair_policy'] = replace(config.pair_policy, **policy_values)

    return replace(config, **values).validate()


if __name__ == "__main__":
    print(extract_config_info())
