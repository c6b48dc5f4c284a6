"""
Configuration management for the ZeroSlide benchmark harness.

A run is described by a plain-text file of ``[section]`` headers and
``key = value`` lines. Every key has a default in DEFAULT_CONFIG except the
methods and seeds of ``[run]``. Unknown sections and keys are rejected, with
a suggestion when a known key is close.
"""
import copy
import difflib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from scripts.aggregator import AGGREGATOR_KINDS
from scripts.core import SIMILARITY_MODES
from scripts.datagen import SyntheticConfig, default_task_specs
from scripts.error_handling import ConfigError
from scripts.logger import get_logger
from scripts.trainers import CHECKPOINT_MODES, TRAINED_METHODS, TrainerSettings

logger = get_logger(__name__)

METHODS = TRAINED_METHODS + ("zeroslide",)
BUFFER_METHODS = ("derpp", "buro")
DATA_SOURCES = ("synthetic", "file")

# None marks keys that are required ([run]), optional paths, or trainer
# epochs/lr that fall back to the [finetune] values.
DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    'data': {
        'source': 'synthetic',
        'path': None,
        'dim': 64,
        'tasks': [2, 3, 2, 2, 2, 2],
        'slides_per_class': 40,
        'regions_per_slide': 8,
        'patches_per_region': 16,
        'class_separation': 0.5,
        'patch_noise_sigma': 0.05,
        'train_fraction': 0.6,
        'val_fraction': 0.2,
        'seed': 0,
    },
    'prototypes': {
        'source': 'synthetic',
        'path': None,
        'variants': 4,
        'noise_sigma': 0.15,
        'seed': 1,
    },
    'run': {
        'methods': None,
        'seeds': None,
        'n_folds': 3,
        'output_dir': 'results',
        'workers': 1,
        'aggregator': 'gated_attention',
        'similarity': 'cosine',
        'checkpoint': 'best_val',
    },
    'finetune': {
        'epochs': 10,
        'lr': 0.05,
    },
    'ewc': {
        'epochs': None,
        'lr': None,
        'lambda': 100.0,
    },
    'derpp': {
        'epochs': None,
        'lr': None,
        'alpha': 0.5,
        'beta': 0.5,
        'buffer_capacity': [30],
        'replay_items': 1,
    },
    'buro': {
        'epochs': None,
        'lr': None,
        'replay_weight': 1.0,
        'buffer_capacity': [30],
        'regions_per_bag': 8,
    },
    'zeroslide': {},
}

KEY_TYPES: Dict[str, str] = {
    'data.source': 'str', 'data.path': 'str', 'data.dim': 'int', 'data.tasks': 'int_list',
    'data.slides_per_class': 'int', 'data.regions_per_slide': 'int', 'data.patches_per_region': 'int',
    'data.class_separation': 'float', 'data.patch_noise_sigma': 'float',
    'data.train_fraction': 'float', 'data.val_fraction': 'float', 'data.seed': 'int',
    'prototypes.source': 'str', 'prototypes.path': 'str', 'prototypes.variants': 'int',
    'prototypes.noise_sigma': 'float', 'prototypes.seed': 'int',
    'run.methods': 'str_list', 'run.seeds': 'int_list', 'run.n_folds': 'int', 'run.output_dir': 'str',
    'run.workers': 'int', 'run.aggregator': 'str', 'run.similarity': 'str', 'run.checkpoint': 'str',
    'finetune.epochs': 'int', 'finetune.lr': 'float',
    'ewc.epochs': 'int', 'ewc.lr': 'float', 'ewc.lambda': 'float',
    'derpp.epochs': 'int', 'derpp.lr': 'float', 'derpp.alpha': 'float', 'derpp.beta': 'float',
    'derpp.buffer_capacity': 'int_list', 'derpp.replay_items': 'int',
    'buro.epochs': 'int', 'buro.lr': 'float', 'buro.replay_weight': 'float',
    'buro.buffer_capacity': 'int_list', 'buro.regions_per_bag': 'int',
}

REQUIRED_KEYS = ('run.methods', 'run.seeds')

_SECTION_RE = re.compile(r"^\[\s*([A-Za-z_]\w*)\s*\]$")
_COMMENT_RE = re.compile(r"\s+#.*$")


def _merge_dicts(default, custom):
    """Recursively merge two dictionaries."""
    result = dict(default)
    for key, value in custom.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _merge_dicts(result[key], value)
        else:
            result[key] = value
    return result


def _suggest(word: str, candidates) -> Optional[str]:
    matches = difflib.get_close_matches(word, list(candidates), n=1, cutoff=0.5)
    return matches[0] if matches else None


def _convert(dotted: str, raw: str, line: int) -> Any:
    kind = KEY_TYPES[dotted]
    try:
        if kind == 'int':
            return int(raw)
        if kind == 'float':
            return float(raw)
        if kind == 'str':
            return raw
        items = [item.strip() for item in raw.split(',')]
        if any(not item for item in items):
            raise ValueError("empty list item")
        if kind == 'int_list':
            return [int(item) for item in items]
        return items
    except ValueError:
        expected = {'int': 'an integer', 'float': 'a number', 'int_list': 'a list of integers',
                    'str_list': 'a list of names'}[kind]
        raise ConfigError(f"expected {expected}, got '{raw}'", key=dotted, line=line) from None


@dataclass(frozen=True)
class MethodVariant:
    """One method with fixed hyperparameters (and, for rehearsal, one buffer capacity)."""
    method: str
    settings: Optional[TrainerSettings] = None
    buffer_capacity: Optional[int] = None

    @property
    def name(self) -> str:
        if self.buffer_capacity is None:
            return self.method
        return f"{self.method}@{self.buffer_capacity}"


class RunPlan:
    """
    A validated run configuration.

    Values are kept as a nested dictionary with every default resolved;
    dot-notation ``get`` reads them, the properties expose typed views.
    """

    def __init__(self, values: Dict[str, Dict[str, Any]]):
        self.values = values

    def get(self, key: str, default=None):
        """Get a configuration value by dot notation key."""
        value: Any = self.values
        try:
            for k in key.split('.'):
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    @property
    def methods(self) -> Tuple[str, ...]:
        return tuple(self.get('run.methods'))

    @property
    def seeds(self) -> Tuple[int, ...]:
        return tuple(self.get('run.seeds'))

    @property
    def n_folds(self) -> int:
        return self.get('run.n_folds')

    @property
    def workers(self) -> int:
        return self.get('run.workers')

    @property
    def output_dir(self) -> str:
        return self.get('run.output_dir')

    @property
    def similarity(self) -> str:
        return self.get('run.similarity')

    def synthetic_config(self) -> SyntheticConfig:
        data, prototypes = self.values['data'], self.values['prototypes']
        return SyntheticConfig(
            tasks=default_task_specs(data['tasks'], data['slides_per_class']),
            dim=data['dim'],
            regions_per_slide=data['regions_per_slide'],
            patches_per_region=data['patches_per_region'],
            class_separation=data['class_separation'],
            patch_noise_sigma=data['patch_noise_sigma'],
            prototype_noise_sigma=prototypes['noise_sigma'],
            prototype_variants=prototypes['variants'],
            train_fraction=data['train_fraction'],
            val_fraction=data['val_fraction'],
            seed=data['seed'],
            prototype_seed=prototypes['seed'],
        )

    def trainer_settings(self, method: str, buffer_capacity: int = 0) -> TrainerSettings:
        section = self.values[method]
        return TrainerSettings(
            epochs=section['epochs'],
            lr=section['lr'],
            ewc_lambda=self.get('ewc.lambda'),
            alpha=self.get('derpp.alpha'),
            beta=self.get('derpp.beta'),
            replay_items=self.get('derpp.replay_items'),
            replay_weight=self.get('buro.replay_weight'),
            buffer_capacity=buffer_capacity,
            regions_per_bag=self.get('buro.regions_per_bag'),
            aggregator=self.get('run.aggregator'),
            checkpoint=self.get('run.checkpoint'),
        )

    def variants(self) -> List[MethodVariant]:
        """Method variants in plan order; rehearsal methods expand per buffer capacity."""
        result = []
        for method in self.methods:
            if method == 'zeroslide':
                result.append(MethodVariant(method))
            elif method in BUFFER_METHODS:
                for capacity in self.values[method]['buffer_capacity']:
                    result.append(MethodVariant(method, self.trainer_settings(method, capacity), capacity))
            else:
                result.append(MethodVariant(method, self.trainer_settings(method)))
        return result

    def __eq__(self, other):
        if not isinstance(other, RunPlan):
            return NotImplemented
        return self.values == other.values

    def __repr__(self):
        return f"RunPlan(methods={list(self.methods)}, seeds={list(self.seeds)})"


def _validate(values: Dict[str, Dict[str, Any]], lines: Dict[str, int]) -> None:
    def fail(key: str, message: str):
        raise ConfigError(message, key=key, line=lines.get(key))

    def check(key: str, condition: bool, message: str):
        if not condition:
            fail(key, message)

    for key in REQUIRED_KEYS:
        section, name = key.split('.')
        if values[section][name] is None:
            fail(key, "required key is missing")

    data, prototypes, run = values['data'], values['prototypes'], values['run']
    check('data.source', data['source'] in DATA_SOURCES, f"must be one of {', '.join(DATA_SOURCES)}")
    check('data.path', data['source'] != 'file' or bool(data['path']), "required when source = file")
    check('data.dim', data['dim'] >= 2, "must be at least 2")
    check('data.tasks', all(count >= 2 for count in data['tasks']), "every task needs at least 2 classes")
    check('data.slides_per_class', data['slides_per_class'] >= 4, "must be at least 4")
    check('data.regions_per_slide', data['regions_per_slide'] >= 1, "must be positive")
    check('data.patches_per_region', data['patches_per_region'] >= 1, "must be positive")
    check('data.class_separation', 0.0 <= data['class_separation'] <= 2.0, "must lie in [0, 2]")
    check('data.patch_noise_sigma', data['patch_noise_sigma'] >= 0, "must be non-negative")
    check('data.train_fraction', 0.0 < data['train_fraction'] < 1.0, "must lie in (0, 1)")
    check('data.val_fraction', 0.0 <= data['val_fraction'] < 1.0 - data['train_fraction'],
          "must leave room for a test split")
    check('data.seed', data['seed'] >= 0, "must be non-negative")

    check('prototypes.source', prototypes['source'] in DATA_SOURCES,
          f"must be one of {', '.join(DATA_SOURCES)}")
    check('prototypes.path', prototypes['source'] != 'file' or bool(prototypes['path']),
          "required when source = file")
    check('prototypes.variants', prototypes['variants'] >= 1, "must be positive")
    check('prototypes.noise_sigma', prototypes['noise_sigma'] >= 0, "must be non-negative")
    check('prototypes.seed', prototypes['seed'] >= 0, "must be non-negative")

    for method in run['methods']:
        if method not in METHODS:
            raise ConfigError(f"unknown method '{method}'", key='run.methods', line=lines.get('run.methods'),
                              suggestion=_suggest(method, METHODS))
    check('run.methods', len(set(run['methods'])) == len(run['methods']), "methods must not repeat")
    check('run.seeds', all(seed >= 0 for seed in run['seeds']), "seeds must be non-negative")
    check('run.seeds', len(set(run['seeds'])) == len(run['seeds']), "seeds must not repeat")
    check('run.n_folds', run['n_folds'] >= 2, "must be at least 2")
    check('run.workers', run['workers'] >= 1, "must be positive")
    check('run.aggregator', run['aggregator'] in AGGREGATOR_KINDS, f"must be one of {', '.join(AGGREGATOR_KINDS)}")
    check('run.similarity', run['similarity'] in SIMILARITY_MODES, f"must be one of {', '.join(SIMILARITY_MODES)}")
    check('run.checkpoint', run['checkpoint'] in CHECKPOINT_MODES, f"must be one of {', '.join(CHECKPOINT_MODES)}")

    for method in TRAINED_METHODS:
        section = values[method]
        check(f'{method}.epochs', section['epochs'] >= 0, "must be non-negative")
        check(f'{method}.lr', section['lr'] > 0, "must be positive")
    check('ewc.lambda', values['ewc']['lambda'] >= 0, "must be non-negative")
    check('derpp.alpha', values['derpp']['alpha'] >= 0, "must be non-negative")
    check('derpp.beta', values['derpp']['beta'] >= 0, "must be non-negative")
    check('derpp.replay_items', values['derpp']['replay_items'] >= 1, "must be positive")
    check('buro.replay_weight', values['buro']['replay_weight'] >= 0, "must be non-negative")
    check('buro.regions_per_bag', values['buro']['regions_per_bag'] >= 1, "must be positive")
    for method in BUFFER_METHODS:
        capacities = values[method]['buffer_capacity']
        check(f'{method}.buffer_capacity', all(c >= 0 for c in capacities), "capacities must be non-negative")
        check(f'{method}.buffer_capacity', len(set(capacities)) == len(capacities), "capacities must not repeat")


def parse_config_text(text: str) -> RunPlan:
    """Parse and validate configuration text."""
    custom: Dict[str, Dict[str, Any]] = {}
    lines: Dict[str, int] = {}
    section: Optional[str] = None

    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line[0] in '#;':
            continue
        line = _COMMENT_RE.sub('', line)

        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1)
            if section not in DEFAULT_CONFIG:
                raise ConfigError(f"unknown section [{section}]", line=number,
                                  suggestion=_suggest(section, DEFAULT_CONFIG))
            custom.setdefault(section, {})
            continue

        if '=' not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", line=number)
        key, value = (part.strip() for part in line.split('=', 1))
        if section is None:
            raise ConfigError("key outside any section", key=key, line=number)
        dotted = f"{section}.{key}"
        if key not in DEFAULT_CONFIG[section]:
            raise ConfigError(f"unknown key in [{section}]", key=key, line=number,
                              suggestion=_suggest(key, DEFAULT_CONFIG[section]))
        if dotted in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[dotted]})", key=dotted, line=number)
        if not value:
            raise ConfigError("empty value", key=dotted, line=number)
        custom[section][key] = _convert(dotted, value, number)
        lines[dotted] = number

    values = _merge_dicts(copy.deepcopy(DEFAULT_CONFIG), custom)
    for method in ('ewc', 'derpp', 'buro'):
        for key in ('epochs', 'lr'):
            if values[method][key] is None:
                values[method][key] = values['finetune'][key]
    _validate(values, lines)
    return RunPlan(values)


def parse_config(path: Union[str, Path]) -> RunPlan:
    """Read and validate a configuration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read configuration {path}: {e}") from e
    plan = parse_config_text(text)
    logger.info("loaded configuration %s: methods %s, %d seeds, %d folds",
                path, ", ".join(plan.methods), len(plan.seeds), plan.n_folds)
    return plan


def _format_value(value: Any) -> str:
    if isinstance(value, list):
        return ", ".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def normalize_config(plan: RunPlan) -> str:
    """Canonical text with every key of every section; parses back to an equal plan."""
    out = []
    for section, defaults in DEFAULT_CONFIG.items():
        out.append(f"[{section}]")
        for key in defaults:
            value = plan.values[section][key]
            if value is not None:
                out.append(f"{key} = {_format_value(value)}")
        out.append("")
    return "\n".join(out)
