"""
Domain records shared by the query-generation toolkit: catalog products,
gold judgments, generated queries and the error types raised across services.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple


class QGenError(Exception):
    """Base error for the toolkit"""


class SchemaError(QGenError):
    """A declared column or role is missing from the source table"""


class RowParseError(QGenError):
    """A source row could not be turned into a product or judgment"""

    def __init__(self, row_number: int, reason: str, raw: Any = None):
        super().__init__(f"Row {row_number}: {reason}")
        self.row_number = row_number
        self.reason = reason
        self.raw = raw


class LabelParseError(QGenError):
    """Raw label text is not part of the label space"""

    def __init__(self, raw: str, space_name: str):
        super().__init__(f"Label '{raw}' is not valid in label space '{space_name}'")
        self.raw = raw
        self.space_name = space_name


class GenerationParseError(QGenError):
    """Generator output did not contain a usable query"""


class DistributionError(QGenError):
    """A scorer returned an invalid label distribution"""


class PreconditionError(QGenError):
    """An operation was called with inputs it cannot accept"""


class BackendError(QGenError):
    """Transport or server failure talking to a model backend"""


class ConfigValidationError(QGenError):
    """Pipeline configuration violates an invariant"""


class UpstreamMissingError(QGenError):
    """A stage was run before the stage that produces its inputs"""

    def __init__(self, path: str):
        super().__init__(f"Required upstream artifact not found: {path}")
        self.path = path


class IndexFormatError(QGenError):
    """Persisted index file is corrupt or has the wrong version"""


@dataclass(frozen=True)
class ProductDoc:
    """One catalog item"""
    product_id: str
    title: str
    description: str = ''
    extras: Dict[str, str] = field(default_factory=dict)

    def field_text(self, name: str) -> str:
        if name == 'title':
            return self.title
        if name == 'description':
            return self.description
        return self.extras.get(name, '')

    def to_dict(self) -> Dict[str, Any]:
        return {
            'product_id': self.product_id,
            'title': self.title,
            'description': self.description,
            'extras': dict(self.extras),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ProductDoc':
        return cls(
            product_id=data['product_id'],
            title=data['title'],
            description=data.get('description', ''),
            extras=dict(data.get('extras') or {}),
        )


@dataclass(frozen=True)
class Judgment:
    """Gold (query, product, label) triple from a test corpus"""
    query_id: str
    query_text: str
    product_id: str
    raw_label: str
    dataset_tag: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {
            'query_id': self.query_id,
            'query': self.query_text,
            'product_id': self.product_id,
            'label': self.raw_label,
            'dataset': self.dataset_tag,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Judgment':
        return cls(
            query_id=data['query_id'],
            query_text=data['query'],
            product_id=data['product_id'],
            raw_label=data['label'],
            dataset_tag=data.get('dataset', ''),
        )


@dataclass
class IngestReport:
    """Row accounting for one ingested file"""
    source: str = ''
    rows_read: int = 0
    rows_accepted: int = 0
    rows_skipped: int = 0
    errors: List[Dict[str, Any]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'source': self.source,
            'rows_read': self.rows_read,
            'rows_accepted': self.rows_accepted,
            'rows_skipped': self.rows_skipped,
            'errors': list(self.errors),
            'warnings': list(self.warnings),
        }


@dataclass(frozen=True)
class Corpus:
    """Products plus gold judgments for one dataset; immutable once built"""
    products: Tuple[ProductDoc, ...] = ()
    judgments: Tuple[Judgment, ...] = ()
    label_space_name: str = ''
    report: Optional[IngestReport] = field(default=None, compare=False, repr=False)

    @cached_property
    def product_map(self) -> Dict[str, ProductDoc]:
        # first occurrence wins when a hand-built corpus carries duplicate ids
        mapping: Dict[str, ProductDoc] = {}
        for product in self.products:
            mapping.setdefault(product.product_id, product)
        return mapping

    def get_product(self, product_id: str) -> Optional[ProductDoc]:
        return self.product_map.get(product_id)

    def is_empty(self) -> bool:
        return not self.products

    def canonical(self) -> 'Corpus':
        """Copy with products sorted by id and judgments by (query, product, label)"""
        products = tuple(sorted(self.products, key=lambda p: p.product_id))
        judgments = tuple(sorted(
            self.judgments,
            key=lambda j: (j.query_id, j.product_id, j.raw_label, j.query_text),
        ))
        return Corpus(products, judgments, self.label_space_name, self.report)


@dataclass(frozen=True)
class ScoreDistribution:
    """Per-label probabilities emitted by a scorer backend"""
    space: Any
    probs: Dict[str, float]

    def __post_init__(self):
        labels = list(self.space.labels)
        missing = [label for label in labels if label not in self.probs]
        if missing:
            raise DistributionError(f"Distribution is missing labels: {missing}")
        extra = [label for label in self.probs if label not in labels]
        if extra:
            raise DistributionError(f"Distribution has labels outside '{self.space.name}': {extra}")
        for label, p in self.probs.items():
            if not isinstance(p, (int, float)) or math.isnan(p) or p < 0.0 or p > 1.0:
                raise DistributionError(f"Probability for '{label}' out of range: {p}")
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-6:
            raise DistributionError(f"Probabilities sum to {total:.6f}, expected 1")

    def argmax(self) -> str:
        """Most probable label; ties go to the more relevant label"""
        best = None
        for label in self.space.labels:
            if best is None or self.probs[label] > self.probs[best]:
                best = label
        return best


@dataclass(frozen=True)
class GeneratedQuery:
    """Synthetic (product, label, query) triple with the generator's logprob"""
    product_id: str
    desired_label: str
    query_text: str
    logprob: float
    final_label: str = ''

    def __post_init__(self):
        if not self.query_text.strip():
            raise GenerationParseError(f"Empty query for product {self.product_id}")
        if not self.final_label:
            object.__setattr__(self, 'final_label', self.desired_label)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'product_id': self.product_id,
            'desired_label': self.desired_label,
            'final_label': self.final_label,
            'query': self.query_text,
            'logprob': self.logprob,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GeneratedQuery':
        return cls(
            product_id=data['product_id'],
            desired_label=data['desired_label'],
            query_text=data['query'],
            logprob=float(data['logprob']),
            final_label=data.get('final_label') or data['desired_label'],
        )


@dataclass(frozen=True)
class SyntheticDataset:
    """Generated queries over one label space plus the config that produced them"""
    records: Tuple[GeneratedQuery, ...]
    space: Any
    provenance: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'records', tuple(self.records))
        valid = set(self.space.labels)
        for record in self.records:
            if record.desired_label not in valid or record.final_label not in valid:
                raise PreconditionError(
                    f"Record for {record.product_id} has labels outside '{self.space.name}': "
                    f"{record.desired_label}/{record.final_label}"
                )

    def __len__(self) -> int:
        return len(self.records)

    def product_ids(self) -> List[str]:
        seen: Dict[str, None] = {}
        for record in self.records:
            seen.setdefault(record.product_id, None)
        return list(seen)

    def with_records(self, records) -> 'SyntheticDataset':
        return SyntheticDataset(tuple(records), self.space, self.provenance)
