"""
Text templates for query generation: label-conditioned and vanilla inputs,
few-shot prompt assembly, and parsing generator output back into a query.

Input scaffold:  Label: <label> Product: <title> Description: <description>
Output scaffold: Query: <query>
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from label_spaces import GradedLabel, LabelSpace, parse_label
from models import Corpus, GenerationParseError, Judgment, LabelParseError, PreconditionError, ProductDoc

logger = logging.getLogger(__name__)

QUERY_MARKER = 'Query:'
VANILLA_SHOTS = 8
SHOTS_PER_LABEL = 2


@dataclass(frozen=True)
class TemplateConfig:
    include_description: bool = True
    # character proxy for a 256-token input budget
    max_input_chars: int = 1200
    field_order: Tuple[str, ...] = ('title', 'description')
    document_word: str = 'Product'

    def __post_init__(self):
        if self.max_input_chars < 1:
            raise PreconditionError(f"max_input_chars must be positive, got {self.max_input_chars}")
        if self.document_word not in ('Product', 'Document'):
            raise PreconditionError(f"document_word must be 'Product' or 'Document', got '{self.document_word}'")
        object.__setattr__(self, 'field_order', tuple(self.field_order))

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> 'TemplateConfig':
        data = dict(data or {})
        if 'field_order' in data:
            data['field_order'] = tuple(data['field_order'])
        return cls(**data)

    def to_dict(self) -> Dict:
        return {
            'include_description': self.include_description,
            'max_input_chars': self.max_input_chars,
            'field_order': list(self.field_order),
            'document_word': self.document_word,
        }


@dataclass(frozen=True)
class Exemplar:
    """One (label, product, query) demonstration for a few-shot prompt"""
    label: GradedLabel
    product: ProductDoc
    query_text: str

    def __post_init__(self):
        if not self.query_text or not self.query_text.strip():
            raise PreconditionError(f"Exemplar for product {self.product.product_id} has an empty query")


def _clean(text: str) -> str:
    return ' '.join((text or '').split())


def _field_header(name: str) -> str:
    if name == 'description':
        return 'Description'
    return name.replace('_', ' ').title()


def _render(product: ProductDoc, cfg: TemplateConfig, prefix: str) -> str:
    out = f"{prefix}{cfg.document_word}: {_clean(product.title)}"
    if len(out) > cfg.max_input_chars:
        logger.debug(f"Scaffold for {product.product_id} exceeds the {cfg.max_input_chars} char budget")
        return out

    for name in cfg.field_order:
        if name == 'title' or (name == 'description' and not cfg.include_description):
            continue
        text = _clean(product.field_text(name))
        if not text:
            continue
        head = f" {_field_header(name)}: "
        room = cfg.max_input_chars - len(out) - len(head)
        if room >= len(text):
            out += head + text
            continue
        # budget hit: keep what fits of this field and drop the rest
        cut = text[:max(room, 0)].rstrip()
        if cut:
            out += head + cut
        break
    return out


def format_labelcond_input(product: ProductDoc, label: GradedLabel, cfg: TemplateConfig) -> str:
    """'Label: <label> Product: <title> Description: <description>' within the char budget"""
    return _render(product, cfg, f"Label: {label.label} ")


def format_vanilla_input(product: ProductDoc, cfg: TemplateConfig) -> str:
    """'Product: <title> Description: <description>' within the char budget"""
    return _render(product, cfg, '')


def parse_query_output(raw: str) -> str:
    """Strip one leading 'Query:' marker and keep the first line"""
    text = (raw or '').lstrip()
    if text.startswith(QUERY_MARKER):
        text = text[len(QUERY_MARKER):]
    query = text.split('\n', 1)[0].strip()
    if not query:
        raise GenerationParseError(f"No query found in generator output: {raw!r}")
    return query


def _space_of(exemplars: Sequence[Exemplar], target_label: Optional[GradedLabel]) -> Optional[LabelSpace]:
    if target_label is not None:
        return target_label.space
    if exemplars:
        return exemplars[0].label.space
    return None


def assemble_prompt(exemplars: Sequence[Exemplar], target: ProductDoc, mode: str,
                    target_label: Optional[GradedLabel], cfg: TemplateConfig,
                    shots: int = VANILLA_SHOTS, shots_per_label: int = SHOTS_PER_LABEL) -> str:
    """Few-shot prompt: exemplar blocks, then the target input ending at 'Query:'"""
    space = _space_of(exemplars, target_label)
    if mode == 'vanilla':
        if len(exemplars) != shots:
            raise PreconditionError(f"Vanilla prompts need exactly {shots} exemplars, got {len(exemplars)}")
        off_label = [ex.label.label for ex in exemplars if ex.label.label != space.top_label]
        if off_label:
            raise PreconditionError(
                f"Vanilla prompts need '{space.top_label}' exemplars only, got labels {sorted(set(off_label))}"
            )
        ordered = list(exemplars)
        target_input = format_vanilla_input(target, cfg)
    elif mode == 'labelcond':
        if target_label is None:
            raise PreconditionError("Label-conditioned prompts need a target label")
        if space is None or space.continuous:
            raise PreconditionError("Label-conditioned prompts need a discrete label space")
        counts = {label: 0 for label in space.labels}
        for ex in exemplars:
            if ex.label.label not in counts:
                raise PreconditionError(f"Exemplar label '{ex.label.label}' is not in space '{space.name}'")
            counts[ex.label.label] += 1
        for label in space.labels:
            if counts[label] != shots_per_label:
                raise PreconditionError(
                    f"Label-conditioned prompts need {shots_per_label} exemplars for label '{label}', got {counts[label]}"
                )
        # label-order-major, given order within a label
        ordered = sorted(exemplars, key=lambda ex: space.rank_of(ex.label.label))
        target_input = format_labelcond_input(target, target_label, cfg)
    else:
        raise PreconditionError(f"Unknown prompt mode '{mode}'")

    blocks = []
    for ex in ordered:
        if mode == 'labelcond':
            ex_input = format_labelcond_input(ex.product, ex.label, cfg)
        else:
            ex_input = format_vanilla_input(ex.product, cfg)
        blocks.append(f"{ex_input}\n{QUERY_MARKER} {_clean(ex.query_text)}")
    blocks.append(f"{target_input}\n{QUERY_MARKER}")
    return '\n\n'.join(blocks)


def _labeled_pairs(corpus: Corpus, space: LabelSpace) -> List[Tuple[GradedLabel, ProductDoc, Judgment]]:
    pairs = []
    for judgment in sorted(corpus.judgments, key=lambda j: (j.query_id, j.product_id, j.query_text)):
        product = corpus.get_product(judgment.product_id)
        if product is None:
            continue
        try:
            label = parse_label(judgment.raw_label, space)
        except LabelParseError:
            continue
        pairs.append((label, product, judgment))
    return pairs


def sample_exemplars(corpus: Corpus, space: LabelSpace, mode: str, seed: int,
                     shots: int = VANILLA_SHOTS, shots_per_label: int = SHOTS_PER_LABEL) -> List[Exemplar]:
    """Seeded draw of prompt exemplars from a labeled corpus, label-order-major"""
    pools: Dict[str, List[Exemplar]] = {label: [] for label in space.labels}
    for label, product, judgment in _labeled_pairs(corpus, space):
        if label.label in pools:
            pools[label.label].append(Exemplar(label, product, judgment.query_text))

    wanted = {space.top_label: shots} if mode == 'vanilla' else {label: shots_per_label for label in space.labels}
    rng = np.random.default_rng(seed)
    exemplars: List[Exemplar] = []
    for label in space.labels:
        if label not in wanted:
            continue
        pool = pools[label]
        if len(pool) < wanted[label]:
            raise PreconditionError(
                f"Need {wanted[label]} exemplars for label '{label}' but the corpus has {len(pool)}"
            )
        picks = rng.choice(len(pool), size=wanted[label], replace=False)
        exemplars.extend(pool[int(i)] for i in picks)
    return exemplars


def format_training_pair(judgment: Judgment, product: ProductDoc, space: LabelSpace, mode: str,
                         cfg: TemplateConfig) -> Optional[Dict]:
    """One QGen finetune row, or None when vanilla mode skips the judgment's label"""
    label = parse_label(judgment.raw_label, space)
    if mode == 'vanilla':
        if space.continuous or label.label != space.top_label:
            return None
        text = format_vanilla_input(product, cfg)
    elif mode == 'labelcond':
        text = format_labelcond_input(product, label, cfg)
    else:
        raise PreconditionError(f"Unknown prompt mode '{mode}'")
    return {
        'query_id': judgment.query_id,
        'product_id': product.product_id,
        'label': label.label,
        'input': text,
        'target': f"{QUERY_MARKER} {_clean(judgment.query_text)}",
    }


def build_qgen_training_pairs(corpus: Corpus, space: LabelSpace, mode: str, cfg: TemplateConfig) -> List[Dict]:
    """Finetune data for a QGen model: every judgment (labelcond) or top-label ones (vanilla)"""
    rows = []
    for _, product, judgment in _labeled_pairs(corpus, space):
        row = format_training_pair(judgment, product, space, mode, cfg)
        if row is not None:
            rows.append(row)
    return rows
