"""
Evaluation quantities: expected relevance score, graded NDCG@k over judged
corpora, and the label / duplicate diagnostics tables.
"""

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from label_spaces import LabelSpace, gain_of, parse_label, quartile_bucket, resolve_space
from models import Corpus, PreconditionError, QGenError, ScoreDistribution, SyntheticDataset

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)


def expected_score(dist: ScoreDistribution) -> float:
    """Probability-weighted sum of label weights"""
    space = dist.space
    if space.continuous or len(space.weights) != len(space.labels):
        raise PreconditionError(f"Label space '{space.name}' has no per-label weights")
    if set(dist.probs) != set(space.labels):
        raise PreconditionError(f"Distribution labels do not match space '{space.name}'")
    probs = np.array([dist.probs[label] for label in space.labels], dtype=float)
    weights = np.array(space.weights, dtype=float)
    return float(np.dot(probs, weights))


@dataclass(frozen=True)
class RankedJudgedList:
    """Entries sorted by predicted score descending, ties by product_id ascending"""
    query_id: str
    entries: Tuple[Tuple[str, float, float], ...]

    @classmethod
    def build(cls, query_id: str, entries: Iterable[Tuple[str, float, float]]) -> 'RankedJudgedList':
        ordered = sorted(entries, key=lambda e: (-e[1], e[0]))
        return cls(query_id, tuple(ordered))

    def gains(self) -> List[float]:
        return [gain for _, _, gain in self.entries]


def _dcg(gains: np.ndarray) -> float:
    discounts = np.log2(np.arange(2, gains.size + 2))
    return float(np.sum(gains / discounts))


def ndcg_at_k(ranked: RankedJudgedList, k: int) -> Optional[float]:
    """NDCG@k with log2(i+1) discounts; None marks an all-zero-gain query"""
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    gains = np.array(ranked.gains(), dtype=float)
    if gains.size == 0 or not np.any(gains > 0):
        return None
    ideal = np.sort(gains)[::-1][:k]
    idcg = _dcg(ideal)
    value = _dcg(gains[:k]) / idcg
    return min(1.0, max(0.0, value))


@dataclass
class EvalResult:
    ndcg: Dict[int, float] = field(default_factory=dict)
    per_query: Dict[str, Dict[int, float]] = field(default_factory=dict)
    skipped_queries: int = 0
    failed_queries: int = 0
    evaluated_queries: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'ndcg': {str(k): v for k, v in sorted(self.ndcg.items())},
            'per_query': {
                qid: {str(k): v for k, v in sorted(values.items())}
                for qid, values in sorted(self.per_query.items())
            },
            'skipped_queries': self.skipped_queries,
            'failed_queries': self.failed_queries,
            'evaluated_queries': self.evaluated_queries,
            'metadata': dict(self.metadata),
        }


def evaluate_scorer(corpus: Corpus, scorer, ks: Sequence[int] = DEFAULT_KS, mode: str = 'distribution',
                    seed: Optional[int] = None, space: Optional[LabelSpace] = None) -> EvalResult:
    """Macro-averaged NDCG@k of a scorer over the corpus judgments"""
    if mode not in ('distribution', 'scalar'):
        raise PreconditionError(f"Unknown scoring mode '{mode}'")
    if any(k < 1 for k in ks):
        raise PreconditionError(f"All k must be >= 1, got {list(ks)}")
    space = space or resolve_space(corpus.label_space_name)
    if seed is not None and hasattr(scorer, 'with_seed'):
        scorer = scorer.with_seed(seed)

    by_query: Dict[str, List] = defaultdict(list)
    for judgment in corpus.judgments:
        by_query[judgment.query_id].append(judgment)

    result = EvalResult(metadata={
        'averaging': 'macro',
        'discount': 'log2(rank+1)',
        'gain': 'exponential' if space.exponential_gain else 'linear',
        'label_space': space.name,
        'mode': mode,
        'ks': list(ks),
    })
    sums = {k: 0.0 for k in ks}

    for query_id in sorted(by_query):
        judgments = by_query[query_id]
        entries = []
        try:
            for judgment in judgments:
                product = corpus.get_product(judgment.product_id)
                if product is None:
                    raise PreconditionError(f"Judgment references unknown product {judgment.product_id}")
                gold = gain_of(parse_label(judgment.raw_label, space))
                if mode == 'distribution':
                    predicted = expected_score(scorer.score(judgment.query_text, product))
                else:
                    predicted = float(scorer.score_scalar(judgment.query_text, product))
                entries.append((judgment.product_id, predicted, gold))
        except QGenError as e:
            result.failed_queries += 1
            logger.warning(f"⚠️ Query {query_id} excluded from evaluation: {e}")
            continue

        ranked = RankedJudgedList.build(query_id, entries)
        values = {k: ndcg_at_k(ranked, k) for k in ks}
        if any(v is None for v in values.values()):
            result.skipped_queries += 1
            continue
        result.per_query[query_id] = values
        result.evaluated_queries += 1
        for k in ks:
            sums[k] += values[k]

    if result.evaluated_queries:
        result.ndcg = {k: sums[k] / result.evaluated_queries for k in ks}
    else:
        result.ndcg = {k: 0.0 for k in ks}
        logger.warning("⚠️ No query had a non-zero gain; NDCG means are reported as 0")
    return result


@dataclass
class StatsTable:
    """Two-column diagnostics table rendered as JSON rows or aligned text"""
    title: str
    header: Tuple[str, str]
    rows: List[Tuple[str, int]]

    def to_dict(self) -> Dict[str, Any]:
        return {'title': self.title, 'rows': [{'name': name, 'count': count} for name, count in self.rows]}

    def as_mapping(self) -> Dict[str, int]:
        return dict(self.rows)

    def to_text(self) -> str:
        frame = pd.DataFrame(self.rows, columns=list(self.header))
        return f"{self.title}\n{frame.to_string(index=False)}"


def duplicate_stats(report, space: LabelSpace) -> StatsTable:
    """Products with duplicate queries, overall and per adjacent label pair"""
    rows = [('at least 1 duplicate', len(report.products_with_duplicates))]
    for upper, lower in space.adjacent_pairs():
        rows.append((f"duplicate query for {upper} and {lower}", report.products_spanning(upper, lower)))
    return StatsTable('Products with duplicate queries across labels', ('Number of Products', 'Count'), rows)


def label_distribution(ds: SyntheticDataset, field_name: str = 'desired_label') -> StatsTable:
    """Per-label record counts plus the total"""
    counts = Counter(getattr(record, field_name) for record in ds.records)
    rows = [(f"Label: {label}", counts.get(label, 0)) for label in ds.space.labels]
    rows.append(('All', len(ds.records)))
    return StatsTable('Generated query distribution', ('Desired Label', 'Count'), rows)


def judgment_label_distribution(corpus: Corpus, space: LabelSpace) -> StatsTable:
    """Gold label counts of a corpus; continuous ratings are bucketed into quartiles"""
    counts: Counter = Counter()
    for judgment in corpus.judgments:
        label = parse_label(judgment.raw_label, space)
        counts[quartile_bucket(label.value, space) if space.continuous else label.label] += 1
    if space.continuous:
        names = ['1st Quartile', '2nd Quartile', '3rd Quartile', '4th Quartile']
    else:
        names = list(space.labels)
    rows = [(name, counts.get(name, 0)) for name in names]
    rows.append(('All', len(corpus.judgments)))
    return StatsTable('Judgment label distribution', ('Label', 'Count'), rows)


def mismatch_table(confusion: Dict[str, Dict[str, int]], space: LabelSpace) -> str:
    """Desired x predicted label counts as aligned text"""
    frame = pd.DataFrame(
        [[confusion.get(desired, {}).get(final, 0) for final in space.labels] for desired in space.labels],
        index=[f"desired {label}" for label in space.labels],
        columns=[f"final {label}" for label in space.labels],
    )
    return frame.to_string()


def format_eval_table(rows: Sequence[Tuple[str, Dict[int, float]]], ks: Sequence[int] = DEFAULT_KS) -> str:
    """Model rows with NDCG@k columns, four decimals"""
    frame = pd.DataFrame(
        [[name] + [f"{values.get(k, 0.0):.4f}" for k in ks] for name, values in rows],
        columns=['Model'] + [f"NDCG@{k}" for k in ks],
    )
    return frame.to_string(index=False)
