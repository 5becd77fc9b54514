"""
Synthetic data shaping: generation plans and requests, duplicate filtration,
round-trip relabeling, product-disjoint splits and label balancing.
"""

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from bm25_retriever import HardNegativeSet
from jsonl_utils import read_jsonl, write_jsonl
from label_spaces import LabelSpace, parse_label
from models import Corpus, GeneratedQuery, PreconditionError, QGenError, SyntheticDataset
from qgen_service import DEFAULT_MAX_OUTPUT_CHARS, GenFailure, GenRequest, generate_batch, score
from qgen_templates import (
    Exemplar, TemplateConfig, assemble_prompt, format_labelcond_input, format_vanilla_input,
)

logger = logging.getLogger(__name__)

MODES = ('vanilla', 'labelcond')
CONSISTENCY_MODES = ('relabel', 'filter')


@dataclass(frozen=True)
class GenerationTask:
    product_id: str
    label: str
    replica: int = 0

    @property
    def request_id(self) -> str:
        return f"{self.product_id}::{self.label}::{self.replica}"


def plan_generation(corpus: Corpus, space: LabelSpace, mode: str, queries_per_cell: int = 1) -> List[GenerationTask]:
    """Product order x label order x replica; vanilla plans the top label only"""
    if corpus.is_empty():
        raise PreconditionError("Cannot plan generation over an empty corpus")
    if mode not in MODES:
        raise PreconditionError(f"Unknown generation mode '{mode}'. Valid: {', '.join(MODES)}")
    if queries_per_cell < 1:
        raise PreconditionError(f"queries_per_cell must be >= 1, got {queries_per_cell}")
    if space.continuous:
        raise PreconditionError(f"Generation needs a discrete label space, got '{space.name}'")

    labels = space.labels if mode == 'labelcond' else (space.top_label,)
    return [
        GenerationTask(product_id, label, replica)
        for product_id in corpus.product_map
        for label in labels
        for replica in range(queries_per_cell)
    ]


def build_generation_requests(corpus: Corpus, tasks: Sequence[GenerationTask], space: LabelSpace, mode: str,
                              cfg: TemplateConfig, exemplars: Optional[Sequence[Exemplar]] = None,
                              max_output_chars: int = DEFAULT_MAX_OUTPUT_CHARS) -> List[GenRequest]:
    """Finetune-style inputs, or few-shot prompts when exemplars are given"""
    requests = []
    for task in tasks:
        product = corpus.get_product(task.product_id)
        if product is None:
            raise PreconditionError(f"Task references unknown product {task.product_id}")
        label = parse_label(task.label, space)
        if exemplars:
            text = assemble_prompt(exemplars, product, mode, label if mode == 'labelcond' else None, cfg)
        elif mode == 'labelcond':
            text = format_labelcond_input(product, label, cfg)
        else:
            text = format_vanilla_input(product, cfg)
        requests.append(GenRequest(task.request_id, text, max_output_chars))
    return requests


def run_generation(backend, tasks: Sequence[GenerationTask], requests: Sequence[GenRequest], space: LabelSpace,
                   max_in_flight: int = 8, provenance: Optional[Dict] = None) -> Tuple[SyntheticDataset, List[GenFailure]]:
    """Issue the requests and pair each response with its task; failures stay positional"""
    if len(tasks) != len(requests):
        raise PreconditionError(f"{len(tasks)} tasks but {len(requests)} requests")
    results = generate_batch(backend, requests, max_in_flight=max_in_flight)
    records, failures = [], []
    for task, result in zip(tasks, results):
        if not result.success:
            failures.append(result)
            continue
        records.append(GeneratedQuery(task.product_id, task.label, result.query_text, result.logprob))
    logger.info(f"Generated {len(records)} queries, {len(failures)} failures")
    return SyntheticDataset(tuple(records), space, dict(provenance or {})), failures


def normalize_query(text: str) -> str:
    """Trim, collapse internal whitespace, case-fold"""
    return ' '.join(text.split()).casefold()


def _pair_key(upper: str, lower: str) -> str:
    return f"{upper}|{lower}"


@dataclass
class DedupReport:
    """Duplicate statistics per product and per label pair"""
    input_count: int = 0
    output_count: int = 0
    duplicate_groups: int = 0
    products_with_duplicates: List[str] = field(default_factory=list)
    pair_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def removed(self) -> int:
        return self.input_count - self.output_count

    def products_spanning(self, upper: str, lower: str) -> int:
        """Products having one query generated for both labels"""
        return self.pair_counts.get(_pair_key(upper, lower), 0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_count': self.input_count,
            'output_count': self.output_count,
            'removed': self.removed,
            'duplicate_groups': self.duplicate_groups,
            'products_with_duplicates': list(self.products_with_duplicates),
            'pair_counts': dict(sorted(self.pair_counts.items())),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DedupReport':
        return cls(
            input_count=data['input_count'],
            output_count=data['output_count'],
            duplicate_groups=data['duplicate_groups'],
            products_with_duplicates=list(data['products_with_duplicates']),
            pair_counts=dict(data['pair_counts']),
        )


def dedup_filter(records, space: Optional[LabelSpace] = None) -> Tuple[SyntheticDataset, DedupReport]:
    """Keep the max-logprob record per (product, normalized query); survivors keep input order.

    Logprob ties go to the more relevant desired label, then the smaller query text,
    then the earlier record.
    """
    provenance = {}
    if isinstance(records, SyntheticDataset):
        space = space or records.space
        provenance = records.provenance
        records = records.records
    if space is None:
        raise PreconditionError("dedup_filter needs the label space of the records")
    records = list(records)

    groups: Dict[Tuple[str, str], List[int]] = defaultdict(list)
    for i, record in enumerate(records):
        groups[(record.product_id, normalize_query(record.query_text))].append(i)

    keep = set()
    report = DedupReport(input_count=len(records))
    spanning: Dict[str, set] = defaultdict(set)
    duplicated = set()
    for (product_id, _), members in groups.items():
        winner = min(members, key=lambda i: (-records[i].logprob, space.rank_of(records[i].desired_label),
                                             records[i].query_text, i))
        keep.add(winner)
        if len(members) < 2:
            continue
        report.duplicate_groups += 1
        duplicated.add(product_id)
        labels = sorted({records[i].desired_label for i in members}, key=space.rank_of)
        for upper, lower in combinations(labels, 2):
            spanning[_pair_key(upper, lower)].add(product_id)

    survivors = [record for i, record in enumerate(records) if i in keep]
    report.output_count = len(survivors)
    report.products_with_duplicates = sorted(duplicated)
    report.pair_counts = {key: len(products) for key, products in spanning.items()}
    if report.removed:
        logger.info(f"Dedup removed {report.removed} of {report.input_count} queries "
                    f"across {len(duplicated)} products")
    return SyntheticDataset(tuple(survivors), space, provenance), report


@dataclass
class RelabelReport:
    consistency: str = 'relabel'
    scored: int = 0
    dropped: int = 0
    mismatches: int = 0
    kept: int = 0
    confusion: Dict[str, Dict[str, int]] = field(default_factory=dict)
    errors: List[Dict[str, str]] = field(default_factory=list)

    @property
    def mismatch_rate(self) -> float:
        return self.mismatches / self.scored if self.scored else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'consistency': self.consistency,
            'scored': self.scored,
            'dropped': self.dropped,
            'mismatches': self.mismatches,
            'mismatch_rate': self.mismatch_rate,
            'kept': self.kept,
            'confusion': {d: dict(f) for d, f in self.confusion.items()},
            'errors': list(self.errors),
        }


def _same_space(a: LabelSpace, b: LabelSpace) -> bool:
    return a.name == b.name and tuple(a.labels) == tuple(b.labels)


def roundtrip_relabel(ds: SyntheticDataset, scorer, corpus: Corpus,
                      consistency: str = 'relabel') -> Tuple[SyntheticDataset, RelabelReport]:
    """Set final_label to the scorer's argmax; 'filter' keeps only records the scorer agrees with"""
    if consistency not in CONSISTENCY_MODES:
        raise PreconditionError(f"Unknown consistency mode '{consistency}'. Valid: {', '.join(CONSISTENCY_MODES)}")
    scorer_space = getattr(scorer, 'space', None)
    if scorer_space is None or not _same_space(scorer_space, ds.space):
        raise PreconditionError(
            f"Scorer label space '{getattr(scorer_space, 'name', None)}' does not match dataset space '{ds.space.name}'"
        )

    report = RelabelReport(consistency=consistency,
                           confusion={d: {f: 0 for f in ds.space.labels} for d in ds.space.labels})
    relabeled = []
    for record in ds.records:
        product = corpus.get_product(record.product_id)
        try:
            if product is None:
                raise PreconditionError(f"Unknown product {record.product_id}")
            final = score(scorer, record.query_text, product).argmax()
        except QGenError as e:
            report.dropped += 1
            report.errors.append({'product_id': record.product_id, 'query': record.query_text,
                                  'error_type': type(e).__name__, 'message': str(e)})
            continue
        report.scored += 1
        report.confusion[record.desired_label][final] += 1
        if final != record.desired_label:
            report.mismatches += 1
            if consistency == 'filter':
                continue
        relabeled.append(GeneratedQuery(record.product_id, record.desired_label, record.query_text,
                                        record.logprob, final))
    report.kept = len(relabeled)
    if report.dropped:
        logger.warning(f"⚠️ Relabel dropped {report.dropped} records the scorer could not score")
    logger.info(f"Relabel mismatch rate {report.mismatch_rate:.4f} over {report.scored} records")
    return ds.with_records(relabeled), report


def split_train_val(ds: SyntheticDataset, ratio: float = 0.9, seed: int = 0) -> Tuple[SyntheticDataset, SyntheticDataset]:
    """Product-disjoint split; the train product count is the nearest boundary to ratio"""
    if not ds.records:
        raise PreconditionError("Cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise PreconditionError(f"Split ratio must be in (0, 1), got {ratio}")

    product_ids = sorted(ds.product_ids())
    order = np.random.default_rng(seed).permutation(len(product_ids))
    n_train = int(math.floor(ratio * len(product_ids) + 0.5))
    train_ids = {product_ids[int(i)] for i in order[:n_train]}

    train = [r for r in ds.records if r.product_id in train_ids]
    val = [r for r in ds.records if r.product_id not in train_ids]
    if not val:
        logger.warning(f"⚠️ Validation split is empty ({len(product_ids)} products, ratio {ratio})")
    return ds.with_records(train), ds.with_records(val)


def _final_label(record) -> str:
    return record.final_label


def upsample_balance(records: Sequence, space: LabelSpace, seed: int = 0,
                     label_of: Callable[[Any], str] = _final_label) -> List:
    """Resample each label with replacement up to the largest label count; originals come first"""
    if space.continuous:
        raise PreconditionError(f"Cannot balance over continuous space '{space.name}'")
    pools: Dict[str, List] = {label: [] for label in space.labels}
    for record in records:
        label = label_of(record)
        if label not in pools:
            raise PreconditionError(f"Record label '{label}' is not in space '{space.name}'")
        pools[label].append(record)
    empty = [label for label, pool in pools.items() if not pool]
    if empty:
        raise PreconditionError(f"Cannot balance: no records for label(s) {', '.join(empty)}")

    target = max(len(pool) for pool in pools.values())
    rng = np.random.default_rng(seed)
    balanced = list(records)
    for label in space.labels:
        pool = pools[label]
        missing = target - len(pool)
        if missing:
            picks = rng.choice(len(pool), size=missing, replace=True)
            balanced.extend(pool[int(i)] for i in picks)
    return balanced


def build_ranking_pairs(sets: Sequence[HardNegativeSet], space: LabelSpace, seed: int = 0) -> List[Dict[str, str]]:
    """Positive and hard-negative (query, product) rows balanced to equal label counts"""
    rows = []
    for hn in sets:
        rows.append({'query': hn.query_text, 'product_id': hn.positive, 'label': space.top_label})
        rows.extend({'query': hn.query_text, 'product_id': pid, 'label': space.least_label}
                    for pid in hn.negatives)
    if not rows:
        return []
    binary = LabelSpace(space.name, (space.top_label, space.least_label), (1.0, 0.0), (1.0, 0.0))
    return upsample_balance(rows, binary, seed, label_of=lambda row: row['label'])


def build_classification_examples(ds: SyntheticDataset, corpus: Corpus) -> List[Dict[str, str]]:
    """Rows for a downstream relevance classifier, labeled with final_label"""
    rows, missing = [], 0
    for record in ds.records:
        product = corpus.get_product(record.product_id)
        if product is None:
            missing += 1
            continue
        rows.append({
            'query': record.query_text,
            'product_id': product.product_id,
            'title': product.title,
            'description': product.description,
            'label': record.final_label,
        })
    if missing:
        logger.warning(f"⚠️ {missing} records reference products missing from the corpus")
    return rows


def write_synthetic(ds: SyntheticDataset, path) -> int:
    return write_jsonl(path, (record.to_dict() for record in ds.records))


def read_synthetic(path, space: LabelSpace, provenance: Optional[Dict] = None) -> SyntheticDataset:
    records = tuple(GeneratedQuery.from_dict(row) for row in read_jsonl(path))
    return SyntheticDataset(records, space, dict(provenance or {}))


def label_counts(records: Sequence, label_of: Callable[[Any], str] = _final_label) -> Dict[str, int]:
    return dict(Counter(label_of(r) for r in records))
