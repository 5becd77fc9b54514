"""
Pipeline configuration: one JSON document, layered as
defaults -> preset -> config file -> command-line overrides.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv

from corpus_processor import SCHEMA_PRESETS, parse_schema_arg
from label_spaces import LabelSpace, resolve_space, with_gain_overrides
from models import ConfigValidationError, QGenError
from qgen_service import GENERATOR_BACKENDS, SCORER_BACKENDS
from qgen_templates import TemplateConfig

load_dotenv()

logger = logging.getLogger(__name__)

STAGES = ('ingest', 'gen', 'filter', 'relabel', 'split', 'mine-negatives', 'eval', 'report')
SOURCE_FORMATS = ('csv', 'tsv', 'jsonl')
RETRIEVERS = ('bm25', 'http')


@dataclass
class PipelineConfig:
    corpus: List[Dict[str, Any]] = field(default_factory=list)
    exemplar_corpus: List[Dict[str, Any]] = field(default_factory=list)
    label_space: Union[str, Dict[str, Any]] = 'esci'
    eval_label_space: Optional[Union[str, Dict[str, Any]]] = None
    gains: Dict[str, float] = field(default_factory=dict)
    exponential_gain: bool = False
    template: Dict[str, Any] = field(default_factory=dict)
    mode: str = 'labelcond'
    prompting: bool = False
    backend: str = 'mock-template'
    scorer: str = 'mock-overlap'
    retriever: str = 'bm25'
    generator_url: Optional[str] = None
    scorer_url: Optional[str] = None
    retriever_url: Optional[str] = None
    max_in_flight: int = 8
    max_output_chars: int = 160
    queries_per_cell: int = 1
    dedup: bool = True
    roundtrip: bool = False
    consistency: str = 'relabel'
    split_ratio: float = 0.9
    k: int = 35
    k1: float = 1.2
    b: float = 0.75
    index_fields: List[str] = field(default_factory=lambda: ['title', 'description'])
    eval_ks: List[int] = field(default_factory=lambda: [5, 10, 20])
    eval_mode: str = 'distribution'
    out_dir: str = 'qgen_out'
    seed: int = 0
    stages: List[str] = field(default_factory=lambda: list(STAGES))
    preset: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional['PipelineConfig'] = None) -> 'PipelineConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigValidationError(f"Unknown config keys: {', '.join(unknown)}")
        return replace(base or cls(), **data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def space(self) -> LabelSpace:
        """Label space used for generation and scoring"""
        return resolve_space(self.label_space)

    def eval_space(self) -> LabelSpace:
        """Label space of the corpus gold judgments, with gain overrides applied"""
        base = resolve_space(self.eval_label_space if self.eval_label_space is not None else self.label_space)
        return with_gain_overrides(base, self.gains or None, self.exponential_gain or None)

    def template_config(self) -> TemplateConfig:
        return TemplateConfig.from_dict(self.template)

    def effective_stages(self) -> List[str]:
        """Stage list in pipeline order, without the optional stages switched off"""
        skipped = set()
        if not self.dedup:
            skipped.add('filter')
        if not self.roundtrip:
            skipped.add('relabel')
        return [stage for stage in STAGES if stage in self.stages and stage not in skipped]

    def hash(self) -> str:
        """Hash of everything that affects artifacts; paths and the output dir are excluded"""
        data = self.to_dict()
        data.pop('out_dir')
        for key in ('corpus', 'exemplar_corpus'):
            data[key] = [{k: v for k, v in source.items() if k != 'path'} for source in data[key]]
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode('utf-8')).hexdigest()

    def validate(self, check_files: bool = True) -> None:
        """Raise ConfigValidationError on the first invariant violation"""
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigValidationError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.k < 1:
            raise ConfigValidationError(f"k must be >= 1, got {self.k}")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ConfigValidationError(f"eval_ks must be non-empty and >= 1, got {self.eval_ks}")
        if self.k1 <= 0 or not 0.0 <= self.b <= 1.0:
            raise ConfigValidationError(f"BM25 needs k1 > 0 and 0 <= b <= 1, got k1={self.k1}, b={self.b}")
        if self.mode not in ('vanilla', 'labelcond'):
            raise ConfigValidationError(f"mode must be 'vanilla' or 'labelcond', got '{self.mode}'")
        if self.consistency not in ('relabel', 'filter'):
            raise ConfigValidationError(f"consistency must be 'relabel' or 'filter', got '{self.consistency}'")
        if self.eval_mode not in ('distribution', 'scalar'):
            raise ConfigValidationError(f"eval_mode must be 'distribution' or 'scalar', got '{self.eval_mode}'")
        if self.backend not in GENERATOR_BACKENDS:
            raise ConfigValidationError(f"Unknown backend '{self.backend}'. Valid: {', '.join(GENERATOR_BACKENDS)}")
        if self.scorer not in SCORER_BACKENDS:
            raise ConfigValidationError(f"Unknown scorer '{self.scorer}'. Valid: {', '.join(SCORER_BACKENDS)}")
        if self.retriever not in RETRIEVERS:
            raise ConfigValidationError(f"Unknown retriever '{self.retriever}'. Valid: {', '.join(RETRIEVERS)}")
        for name in ('queries_per_cell', 'max_in_flight', 'max_output_chars'):
            if getattr(self, name) < 1:
                raise ConfigValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        bad_stages = [s for s in self.stages if s not in STAGES]
        if bad_stages:
            raise ConfigValidationError(f"Unknown stages {bad_stages}. Valid: {', '.join(STAGES)}")
        if self.scorer == 'random' and self.eval_mode != 'scalar':
            raise ConfigValidationError("The random scorer only supports eval_mode 'scalar'")

        try:
            self.space()
            self.eval_space()
            self.template_config()
        except (QGenError, TypeError) as e:
            raise ConfigValidationError(str(e))

        for source in list(self.corpus) + list(self.exemplar_corpus):
            self._validate_source(source, check_files)

    def _validate_source(self, source: Dict[str, Any], check_files: bool) -> None:
        if 'path' not in source or 'schema' not in source:
            raise ConfigValidationError(f"Corpus source needs 'path' and 'schema': {source}")
        fmt = source.get('format') or Path(source['path']).suffix.lstrip('.').lower()
        if fmt not in SOURCE_FORMATS:
            raise ConfigValidationError(f"Corpus source {source['path']} has unsupported format '{fmt}'")
        if check_files and not Path(source['path']).exists():
            raise ConfigValidationError(f"Corpus source not found: {source['path']}")
        schema = source['schema']
        if isinstance(schema, str) and schema not in SCHEMA_PRESETS and '=' not in schema:
            raise ConfigValidationError(
                f"Unknown schema preset '{schema}'. Valid: {', '.join(sorted(SCHEMA_PRESETS))}"
            )


def source_schema(source: Dict[str, Any]) -> Dict[str, str]:
    schema = source['schema']
    return dict(schema) if isinstance(schema, dict) else parse_schema_arg(schema)


def source_format(source: Dict[str, Any]) -> str:
    return (source.get('format') or Path(source['path']).suffix.lstrip('.')).lower()


_LABELCOND_STAGES = ['ingest', 'gen', 'filter', 'relabel', 'split', 'eval', 'report']
_VANILLA_STAGES = ['ingest', 'gen', 'split', 'mine-negatives', 'eval', 'report']

PRESETS: Dict[str, Dict[str, Any]] = {
    # ESCI-trained relevance model applied directly to the target corpus
    'zero-shot-eval': {'stages': ['ingest', 'eval', 'report'], 'scorer': 'mock-overlap'},
    'vanilla-finetune': {'mode': 'vanilla', 'prompting': False, 'dedup': False, 'stages': _VANILLA_STAGES},
    'vanilla-prompt': {'mode': 'vanilla', 'prompting': True, 'dedup': False, 'stages': _VANILLA_STAGES},
    'labelcond-finetune': {'mode': 'labelcond', 'prompting': False, 'dedup': True, 'stages': _LABELCOND_STAGES},
    'labelcond-prompt': {'mode': 'labelcond', 'prompting': True, 'dedup': True, 'stages': _LABELCOND_STAGES},
    'random-baseline': {'stages': ['ingest', 'eval', 'report'], 'scorer': 'random', 'eval_mode': 'scalar'},
}


def preset(name: str) -> PipelineConfig:
    """Config for one of the named model variants"""
    if name not in PRESETS:
        raise ConfigValidationError(f"Unknown preset '{name}'. Valid presets: {', '.join(PRESETS)}")
    data = dict(PRESETS[name])
    data['stages'] = list(data['stages'])
    return PipelineConfig.from_dict({**data, 'preset': name})


def load_config_file(path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        raise ConfigValidationError(f"Cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"Config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigValidationError(f"Config file {path} must hold a JSON object")
    return data


def build_config(config_path=None, preset_name: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Layer defaults, preset, config file and overrides; None overrides are ignored"""
    file_data = load_config_file(config_path) if config_path else {}
    name = preset_name or file_data.get('preset')
    cfg = preset(name) if name else PipelineConfig()
    cfg = PipelineConfig.from_dict(file_data, base=cfg)
    if preset_name:
        cfg = replace(cfg, preset=preset_name)
    cfg = PipelineConfig.from_dict({k: v for k, v in (overrides or {}).items() if v is not None}, base=cfg)
    logger.debug(f"Resolved config {cfg.hash()[:12]} (preset={cfg.preset})")
    return cfg


def derive_seed(seed: int, stage: str) -> int:
    """Per-stage seed from the global seed"""
    digest = hashlib.sha256(f"{seed}:{stage}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big')
