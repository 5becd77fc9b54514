#!/usr/bin/env python3
"""
Corpus Processor for ingesting graded-relevance datasets (WANDS, HomeDepot,
ESCI, MS-MARCO shaped tables) into the canonical in-memory corpus.
"""

import csv
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import pandas as pd

from jsonl_utils import read_json, read_jsonl, write_json, write_jsonl
from label_spaces import LabelSpace, parse_label, resolve_space
from models import (
    Corpus, IngestReport, Judgment, LabelParseError, ProductDoc, RowParseError, SchemaError,
)

logger = logging.getLogger(__name__)

CHUNK_ROWS = 5000
BAD_LINE_MARKER = "\x00bad-line:"

BASE_ROLES = ('product_id', 'title', 'description', 'query_id', 'query', 'label')
EXTRA_PREFIX = 'extra.'

# Column names of the public dataset files
SCHEMA_PRESETS = {
    'wands': {
        'query_id': 'query_id', 'query': 'query', 'product_id': 'product_id',
        'title': 'product_name', 'description': 'product_description', 'label': 'label',
    },
    'homedepot': {
        'query_id': 'id', 'query': 'search_term', 'product_id': 'product_uid',
        'title': 'product_title', 'description': 'product_description', 'label': 'relevance',
    },
    'esci': {
        'query_id': 'query_id', 'query': 'query', 'product_id': 'product_id',
        'title': 'product_title', 'description': 'product_description', 'label': 'esci_label',
        'extra.bullet_point': 'product_bullet_point',
    },
    'msmarco': {
        'query_id': 'qid', 'query': 'query', 'product_id': 'pid',
        'title': 'title', 'description': 'passage', 'label': 'label',
    },
}


def parse_schema_arg(text: str) -> Dict[str, str]:
    """Parse 'product_id=colA,title=colB,extra.bullets=colC' into a role map"""
    if text in SCHEMA_PRESETS:
        return dict(SCHEMA_PRESETS[text])
    schema: Dict[str, str] = {}
    for part in filter(None, (p.strip() for p in text.split(','))):
        if '=' not in part:
            raise SchemaError(f"Schema entry '{part}' must look like role=column")
        role, column = (s.strip() for s in part.split('=', 1))
        schema[role] = column
    validate_schema(schema)
    return schema


def validate_schema(schema: Dict[str, str]) -> None:
    for role in schema:
        if role not in BASE_ROLES and not (role.startswith(EXTRA_PREFIX) and len(role) > len(EXTRA_PREFIX)):
            raise SchemaError(f"Unknown schema role '{role}'")
    for role in ('product_id', 'title'):
        if role not in schema:
            raise SchemaError(f"Schema must map the '{role}' role")
    if ('query' in schema) != ('label' in schema):
        raise SchemaError("Schema must map both 'query' and 'label' for judgment rows, or neither")


def _cell(value: Any) -> Optional[str]:
    """pandas pads short rows with NaN; treat anything non-string as missing"""
    if value is None:
        return None
    if isinstance(value, str):
        return value
    if isinstance(value, float) and value != value:
        return None
    return str(value)


def _json_text(value: Any) -> Optional[str]:
    if value is None or isinstance(value, str):
        return value
    if isinstance(value, (list, dict)):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


class CorpusProcessor:
    """Stream source tables row by row into a Corpus"""

    def __init__(self, schema: Dict[str, str], space: LabelSpace, dataset_tag: str = '', strict: bool = False):
        validate_schema(schema)
        self.schema = dict(schema)
        self.space = space
        self.dataset_tag = dataset_tag
        self.strict = strict
        self.has_judgments = 'query' in schema
        self.readers = {
            'csv': self._read_delimited,
            'tsv': self._read_delimited,
            'jsonl': self._read_jsonl,
        }

    def ingest(self, path, fmt: str) -> Corpus:
        fmt = fmt.lower()
        if fmt not in self.readers:
            raise SchemaError(f"Unsupported format '{fmt}'. Valid formats: {', '.join(self.readers)}")
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Source table not found: {path}")

        report = IngestReport(source=str(path))
        products: Dict[str, ProductDoc] = {}
        judgments: List[Judgment] = []

        for row_number, row in self.readers[fmt](path, fmt):
            report.rows_read += 1
            try:
                if isinstance(row, RowParseError):
                    raise row
                self._accept_row(row_number, row, products, judgments, report)
                report.rows_accepted += 1
            except RowParseError as e:
                if self.strict:
                    raise
                report.rows_skipped += 1
                report.errors.append({'row': e.row_number, 'reason': e.reason})
                logger.debug(f"Skipping row {e.row_number}: {e.reason}")

        if report.rows_read == 0:
            report.warnings.append(f"No data rows found in {path}")
            logger.warning(f"⚠️ No data rows found in {path}")
        if report.rows_skipped:
            logger.warning(f"⚠️ Skipped {report.rows_skipped} of {report.rows_read} rows in {path}")

        return Corpus(tuple(products.values()), tuple(judgments), self.space.name, report)

    def _accept_row(self, row_number: int, row: Dict[str, Any], products: Dict[str, ProductDoc],
                    judgments: List[Judgment], report: IngestReport) -> None:
        def get(role: str) -> Optional[str]:
            column = self.schema.get(role)
            return _cell(row.get(column)) if column is not None else ''

        product_id = get('product_id')
        title = get('title')
        if product_id is None or not product_id.strip():
            raise RowParseError(row_number, 'empty product_id', row)
        if title is None or not title.strip():
            raise RowParseError(row_number, f"empty title for product {product_id}", row)
        description = get('description') or ''
        extras = {}
        for role, column in self.schema.items():
            if role.startswith(EXTRA_PREFIX):
                extras[role[len(EXTRA_PREFIX):]] = _cell(row.get(column)) or ''

        judgment = None
        if self.has_judgments:
            query = get('query')
            raw_label = get('label')
            if query is None or not query.strip():
                raise RowParseError(row_number, 'empty query', row)
            if raw_label is None:
                raise RowParseError(row_number, 'missing label', row)
            try:
                parse_label(raw_label, self.space)
            except LabelParseError as e:
                raise RowParseError(row_number, str(e), row)
            query_id = get('query_id') if 'query_id' in self.schema else query
            if not query_id:
                query_id = query
            judgment = Judgment(query_id, query, product_id, raw_label, self.dataset_tag)

        existing = products.get(product_id)
        if existing is None:
            products[product_id] = ProductDoc(product_id, title, description, extras)
        elif not self.has_judgments:
            raise RowParseError(row_number, f"duplicate product_id {product_id}", row)
        elif existing.title != title:
            report.warnings.append(f"Row {row_number}: product {product_id} repeats with a different title; first kept")

        if judgment is not None:
            judgments.append(judgment)

    def _read_delimited(self, path: Path, fmt: str) -> Iterator[Tuple[int, Any]]:
        options = {
            'sep': ',' if fmt == 'csv' else '\t',
            'dtype': str,
            'keep_default_na': False,
            'na_filter': False,
            'encoding': 'utf-8',
            'encoding_errors': 'replace',
            'engine': 'python',
        }
        if fmt == 'tsv':
            options['quoting'] = csv.QUOTE_NONE

        try:
            header = pd.read_csv(path, nrows=0, **options)
        except pd.errors.EmptyDataError:
            return
        missing = [column for column in self.schema.values() if column not in header.columns]
        if missing:
            raise SchemaError(f"Missing required column '{missing[0]}' in {path}")
        width = len(header.columns)
        first_column = header.columns[0]

        # over-long lines are replaced in place by a placeholder row keyed into bad_lines
        bad_lines: Dict[str, List[str]] = {}

        def on_bad_line(fields: List[str]) -> List[str]:
            key = f"{BAD_LINE_MARKER}{len(bad_lines)}"
            bad_lines[key] = fields
            return [key] + [''] * (width - 1)

        row_number = 0
        reader = pd.read_csv(path, chunksize=CHUNK_ROWS, on_bad_lines=on_bad_line, **options)
        try:
            for chunk in reader:
                for record in chunk.to_dict(orient='records'):
                    row_number += 1
                    fields = bad_lines.pop(record.get(first_column), None)
                    if fields is not None:
                        yield row_number, RowParseError(row_number, f"expected {width} fields, got {len(fields)}", fields)
                    elif any(isinstance(value, str) and '\ufffd' in value for value in record.values()):
                        yield row_number, RowParseError(row_number, 'invalid UTF-8', record)
                    else:
                        yield row_number, record
        except pd.errors.ParserError as e:
            raise RowParseError(row_number + 1, f"unreadable row: {e}")
        finally:
            reader.close()

    def _read_jsonl(self, path: Path, fmt: str) -> Iterator[Tuple[int, Any]]:
        checked = False
        with open(path, 'rb') as f:
            row_number = 0
            for raw in f:
                if not raw.strip():
                    continue
                row_number += 1
                try:
                    line = raw.decode('utf-8')
                except UnicodeDecodeError as e:
                    yield row_number, RowParseError(row_number, f"invalid UTF-8 at byte {e.start}", raw)
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    yield row_number, RowParseError(row_number, f"invalid JSON: {e.msg}", line)
                    continue
                if not isinstance(record, dict):
                    yield row_number, RowParseError(row_number, 'JSON line is not an object', line)
                    continue
                if not checked:
                    missing = [column for column in self.schema.values() if column not in record]
                    if missing:
                        raise SchemaError(f"Missing required column '{missing[0]}' in {path}")
                    checked = True
                yield row_number, {key: _json_text(value) for key, value in record.items()}


def ingest_table(path, fmt: str, schema: Dict[str, str], label_space_name: str,
                 strict: bool = False, dataset_tag: str = '', space: Optional[LabelSpace] = None) -> Corpus:
    """Ingest one CSV/TSV/JSONL table into a Corpus; bad rows are skipped and reported"""
    space = space or resolve_space(label_space_name)
    processor = CorpusProcessor(schema, space, dataset_tag=dataset_tag or space.name, strict=strict)
    return processor.ingest(path, fmt)


def write_corpus(corpus: Corpus, out_dir) -> Dict[str, int]:
    """Write canonical products.jsonl / judgments.jsonl / corpus_meta.json"""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    n_products = write_jsonl(out_dir / 'products.jsonl', (p.to_dict() for p in corpus.products))
    n_judgments = write_jsonl(out_dir / 'judgments.jsonl', (j.to_dict() for j in corpus.judgments))
    write_json(out_dir / 'corpus_meta.json', {
        'label_space': corpus.label_space_name,
        'products': n_products,
        'judgments': n_judgments,
    })
    return {'products': n_products, 'judgments': n_judgments}


def read_corpus(out_dir, space: Optional[LabelSpace] = None) -> Corpus:
    """Re-ingest a canonical corpus directory written by write_corpus"""
    out_dir = Path(out_dir)
    meta_path = out_dir / 'corpus_meta.json'
    label_space_name = space.name if space is not None else ''
    if meta_path.exists():
        label_space_name = read_json(meta_path).get('label_space', label_space_name)
    products = tuple(ProductDoc.from_dict(row) for row in read_jsonl(out_dir / 'products.jsonl'))
    judgments_path = out_dir / 'judgments.jsonl'
    judgments = tuple(Judgment.from_dict(row) for row in read_jsonl(judgments_path)) if judgments_path.exists() else ()
    return Corpus(products, judgments, label_space_name)
