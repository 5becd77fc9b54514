#!/usr/bin/env python3
"""
Corpus Health Monitor
Integrity checks over an ingested corpus: dangling references, duplicate ids,
empty titles and labels the declared label space cannot parse.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from label_spaces import LabelSpace, parse_label, resolve_space
from models import Corpus, LabelParseError, QGenError

logger = logging.getLogger(__name__)


@dataclass
class ValidationReport:
    """Defects found in a corpus; empty means clean"""
    dangling_references: List[Dict[str, str]] = field(default_factory=list)
    duplicate_ids: List[str] = field(default_factory=list)
    empty_titles: List[str] = field(default_factory=list)
    unparseable_labels: List[Dict[str, str]] = field(default_factory=list)

    def is_clean(self) -> bool:
        return not self.issues()

    def issues(self) -> List[str]:
        issues = []
        for ref in self.dangling_references:
            issues.append(f"Judgment for query {ref['query_id']} references unknown product {ref['product_id']}")
        for product_id in self.duplicate_ids:
            issues.append(f"Duplicate product_id: {product_id}")
        for product_id in self.empty_titles:
            issues.append(f"Empty title for product {product_id}")
        for bad in self.unparseable_labels:
            issues.append(f"Unparseable label '{bad['label']}' for query {bad['query_id']}")
        return issues

    def to_dict(self) -> Dict:
        return {
            'dangling_references': list(self.dangling_references),
            'duplicate_ids': list(self.duplicate_ids),
            'empty_titles': list(self.empty_titles),
            'unparseable_labels': list(self.unparseable_labels),
        }


class CorpusHealthMonitor:
    """Run integrity checks over a corpus without modifying it"""

    def __init__(self, space: Optional[LabelSpace] = None):
        self.space = space

    def _resolve_space(self, corpus: Corpus) -> Optional[LabelSpace]:
        if self.space is not None:
            return self.space
        if not corpus.label_space_name:
            return None
        try:
            return resolve_space(corpus.label_space_name)
        except QGenError:
            logger.warning(f"⚠️ Unknown label space '{corpus.label_space_name}', skipping label checks")
            return None

    def check_products(self, corpus: Corpus, report: ValidationReport) -> None:
        counts = Counter(p.product_id for p in corpus.products)
        report.duplicate_ids.extend(pid for pid, n in counts.items() if n > 1)
        report.empty_titles.extend(p.product_id for p in corpus.products if not p.title.strip())

    def check_judgments(self, corpus: Corpus, report: ValidationReport) -> None:
        known = set(corpus.product_map)
        space = self._resolve_space(corpus)
        for judgment in corpus.judgments:
            if judgment.product_id not in known:
                report.dangling_references.append({
                    'query_id': judgment.query_id,
                    'product_id': judgment.product_id,
                })
            if space is not None:
                try:
                    parse_label(judgment.raw_label, space)
                except LabelParseError:
                    report.unparseable_labels.append({
                        'query_id': judgment.query_id,
                        'product_id': judgment.product_id,
                        'label': judgment.raw_label,
                    })

    def run_health_check(self, corpus: Corpus) -> ValidationReport:
        report = ValidationReport()
        self.check_products(corpus, report)
        self.check_judgments(corpus, report)

        issues = report.issues()
        if issues:
            logger.warning(f"Health check found {len(issues)} issues")
            for issue in issues[:20]:
                logger.debug(f"  - {issue}")
        else:
            logger.info("Health check passed - no issues found")
        return report


def validate_corpus(corpus: Corpus, space: Optional[LabelSpace] = None) -> ValidationReport:
    """Report-only validation; the corpus is never modified"""
    return CorpusHealthMonitor(space).run_health_check(corpus)
