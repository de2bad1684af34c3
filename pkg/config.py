import json
import os
import typing
from dataclasses import dataclass, field, fields
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigError
from models import FistaParams, FlowParams, SegmentationParams, TrainingParams, params_to_dict

# Load environment variables
load_dotenv()

TRUE_WORDS = {'1', 'true', 'yes', 'on'}
FALSE_WORDS = {'0', 'false', 'no', 'off'}


@dataclass
class IOParams:
    model_path: Optional[str] = None
    keep_intermediates: bool = False
    intermediates_dir: str = 'intermediates'


@dataclass
class PipelineConfig:
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    training: TrainingParams = field(default_factory=TrainingParams)
    flow: FlowParams = field(default_factory=FlowParams)
    fista: FistaParams = field(default_factory=FistaParams)
    io: IOParams = field(default_factory=IOParams)
    seed: int = 0
    ref_index: int = 1

    def to_dict(self):
        return {
            'segmentation': params_to_dict(self.segmentation),
            'training': params_to_dict(self.training),
            'flow': params_to_dict(self.flow),
            'fista': params_to_dict(self.fista),
            'io': params_to_dict(self.io),
            'seed': self.seed,
            'ref_index': self.ref_index,
        }


SECTIONS = ('segmentation', 'training', 'flow', 'fista', 'io')
SCALARS = ('seed', 'ref_index')

# Short flags accepted on the command line
ALIASES = {
    'stride': 'segmentation.stride',
    'window': 'segmentation.window',
    'tau': 'segmentation.tau',
    'mu': 'flow.mu',
    'lambda': 'fista.lambda',
    'max_iters': 'fista.max_iters',
    'ref': 'ref_index',
}


def _positive(v):
    return v > 0


def _at_least(n):
    return lambda v: v >= n


def _optional(check):
    return lambda v: v is None or check(v)


RULES = {
    'segmentation.stride': (_at_least(1), 'must be at least 1'),
    'segmentation.window': (_at_least(8), 'must be at least 8'),
    'segmentation.nms_radius': (_optional(_positive), 'must be positive'),
    'segmentation.tau': (lambda v: 0 < v < 1, 'must lie strictly between 0 and 1'),
    'segmentation.erode_radius': (_at_least(1), 'must be at least 1'),
    'segmentation.dilate_radius': (_at_least(1), 'must be at least 1'),
    'segmentation.lambda_s': (_positive, 'must be positive'),
    'segmentation.sigma_c': (_positive, 'must be positive'),
    'segmentation.lattice_thickness': (_at_least(1), 'must be at least 1'),
    'segmentation.link_factor': (_positive, 'must be positive'),
    'segmentation.feature_backend': (lambda v: v in ('gradhist', 'fvec'), "must be 'gradhist' or 'fvec'"),
    'segmentation.alpha_tol': (_positive, 'must be positive'),
    'segmentation.alpha_max_iters': (_at_least(1), 'must be at least 1'),
    'segmentation.alpha_prior': (_at_least(0), 'must be non-negative'),
    'segmentation.color_tol': (_optional(_positive), 'must be positive'),
    'segmentation.min_lattice_nodes': (_at_least(1), 'must be at least 1'),
    'training.c': (_positive, 'must be positive'),
    'training.epochs': (_at_least(1), 'must be at least 1'),
    'training.learning_rate': (_positive, 'must be positive'),
    'training.jitter': (_at_least(0), 'must be non-negative'),
    'training.negatives_per_scene': (_at_least(1), 'must be at least 1'),
    'training.min_negative_distance': (_positive, 'must be positive'),
    'training.distractor_texture': (_optional(lambda v: v in ('noise', 'checker')), "must be 'noise' or 'checker'"),
    'training.distractors_per_scene': (_at_least(0), 'must be non-negative'),
    'flow.mu': (_positive, 'must be positive'),
    'flow.epsilon_phi': (_positive, 'must be positive'),
    'flow.pyramid_ratio': (lambda v: 0.25 <= v <= 0.9, 'must lie in [0.25, 0.9]'),
    'flow.min_dim': (_at_least(16), 'must be at least 16'),
    'flow.outer_iters': (_at_least(1), 'must be at least 1'),
    'flow.cg_iters': (_at_least(1), 'must be at least 1'),
    'flow.cg_tol': (_positive, 'must be positive'),
    'flow.warp_updates': (_at_least(1), 'must be at least 1'),
    'flow.mask_dilation': (_at_least(0), 'must be non-negative'),
    'fista.lambda': (_at_least(0), 'must be non-negative'),
    'fista.eps_stop': (_optional(_positive), 'must be positive'),
    'fista.max_iters': (_at_least(1), 'must be at least 1'),
    'fista.step': (_optional(_positive), 'must be positive'),
    'fista.power_iters': (_at_least(5), 'must be at least 5'),
    'fista.gradient_scale': (_positive, 'must be positive'),
    'seed': (_at_least(0), 'must be non-negative'),
    'ref_index': (_at_least(0), 'must be non-negative'),
}


def _field_map(params):
    """JSON key -> dataclass field for one section"""
    return {f.metadata.get('key', f.name): f for f in fields(params)}


def _coerce(key, value, annotation):
    optional = False
    if typing.get_origin(annotation) is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        annotation = args[0]
        optional = True
    if value is None or (optional and isinstance(value, str) and value.lower() in ('none', 'null')):
        if optional:
            return None
        raise ConfigError(key, 'may not be null')

    try:
        if annotation is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in TRUE_WORDS | FALSE_WORDS:
                return value.lower() in TRUE_WORDS
            raise ValueError(value)
        if annotation is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if annotation is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if annotation is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {annotation.__name__}, got {value!r}") from None
    return value


def _set(cfg, dotted, value):
    if dotted in SCALARS:
        setattr(cfg, dotted, _coerce(dotted, value, int))
        return
    section, _, name = dotted.partition('.')
    if section not in SECTIONS or not name:
        raise ConfigError(dotted, 'unknown configuration key')
    params = getattr(cfg, section)
    mapping = _field_map(params)
    if name not in mapping:
        raise ConfigError(dotted, 'unknown configuration key')
    target = mapping[name]
    hints = typing.get_type_hints(type(params))
    setattr(params, target.name, _coerce(dotted, value, hints[target.name]))


def _flatten(data):
    if not isinstance(data, dict):
        raise ConfigError('<root>', 'configuration file must hold a JSON object')
    flat = {}
    for key, value in data.items():
        if key in SCALARS:
            flat[key] = value
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, 'section must be a JSON object')
            for name, leaf in value.items():
                flat[f'{key}.{name}'] = leaf
        else:
            raise ConfigError(key, 'unknown configuration key')
    return flat


def validate(cfg):
    flat = {}
    for section in SECTIONS:
        for name, value in params_to_dict(getattr(cfg, section)).items():
            flat[f'{section}.{name}'] = value
    flat['seed'] = cfg.seed
    flat['ref_index'] = cfg.ref_index
    for key, (check, message) in RULES.items():
        if not check(flat[key]):
            raise ConfigError(key, f"{message}, got {flat[key]!r}")
    if cfg.segmentation.feature_backend == 'fvec' and not cfg.segmentation.feature_file:
        raise ConfigError('segmentation.feature_file', "required by the 'fvec' feature backend")
    return cfg


def parse_config(path=None, overrides=None):
    """Defaults, then the JSON file at path, then dotted-key overrides"""
    cfg = PipelineConfig()
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"malformed JSON ({e})") from e
        for key, value in _flatten(data).items():
            _set(cfg, key, value)
    for key, value in (overrides or {}).items():
        _set(cfg, ALIASES.get(key, key), value)
    return validate(cfg)


def dotted_keys():
    keys = list(SCALARS)
    for section in SECTIONS:
        keys.extend(f'{section}.{name}' for name in _field_map(getattr(PipelineConfig(), section)))
    return keys


def threads():
    raw = os.getenv('DEFENCE_THREADS')
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError('DEFENCE_THREADS', f"expected an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError('DEFENCE_THREADS', 'must be at least 1')
    return value


def log_level():
    return os.getenv('DEFENCE_LOG_LEVEL', 'INFO').upper()


def model_path():
    return os.getenv('DEFENCE_MODEL_PATH')


def max_upload_bytes():
    return int(os.getenv('DEFENCE_MAX_UPLOAD_MB', 32)) * 1024 * 1024
