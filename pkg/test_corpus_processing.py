#!/usr/bin/env python3
"""
Tests for corpus ingestion, canonical persistence and corpus validation
"""

import json

import pytest

from corpus_health_monitor import validate_corpus
from corpus_processor import SCHEMA_PRESETS, ingest_table, parse_schema_arg, read_corpus, write_corpus
from label_spaces import builtin_space
from models import Corpus, Judgment, ProductDoc, RowParseError, SchemaError
from testing_utils import judged_rows, make_judged_corpus, run_tests, write_table

PRODUCT_SCHEMA = {'product_id': 'id', 'title': 'name', 'description': 'desc'}


def test_products_only_csv(tmp_path):
    path = tmp_path / 'products.csv'
    path.write_text('id,name,desc\np1,Oak Table,"Solid oak, seats 6"\np2,Red Chair,\n', encoding='utf-8')
    corpus = ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci')
    assert [p.product_id for p in corpus.products] == ['p1', 'p2']
    assert corpus.products[0].description == 'Solid oak, seats 6'
    assert corpus.products[1].description == ''
    assert corpus.judgments == ()
    assert corpus.report.rows_read == 2
    assert corpus.report.rows_accepted == 2


def test_missing_column_names_the_column(tmp_path):
    path = tmp_path / 'products.csv'
    path.write_text('id,desc\np1,thing\n', encoding='utf-8')
    with pytest.raises(SchemaError) as excinfo:
        ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci')
    assert "'name'" in str(excinfo.value)


def test_bad_rows_are_skipped_and_counted(tmp_path):
    path = tmp_path / 'products.csv'
    path.write_text('id,name,desc\np1,Lamp,bright\n,No Id,x\np3,,empty title\np4,Rug,soft\n', encoding='utf-8')
    corpus = ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci')
    report = corpus.report
    assert [p.product_id for p in corpus.products] == ['p1', 'p4']
    assert report.rows_skipped == 2
    assert report.rows_read == report.rows_accepted + report.rows_skipped


def test_strict_mode_raises_on_bad_row(tmp_path):
    path = tmp_path / 'products.csv'
    path.write_text('id,name,desc\np1,,x\n', encoding='utf-8')
    with pytest.raises(RowParseError):
        ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci', strict=True)


def test_duplicate_product_in_products_table_is_a_bad_row(tmp_path):
    path = tmp_path / 'products.csv'
    path.write_text('id,name,desc\np1,Lamp,a\np1,Lamp again,b\n', encoding='utf-8')
    corpus = ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci')
    assert len(corpus.products) == 1
    assert corpus.products[0].title == 'Lamp'
    assert corpus.report.rows_skipped == 1


def test_empty_file_gives_empty_corpus_with_warning(tmp_path):
    path = tmp_path / 'empty.csv'
    path.write_text('', encoding='utf-8')
    corpus = ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci')
    assert corpus.is_empty()
    assert corpus.report.rows_read == 0
    assert corpus.report.warnings


def test_wands_judgments_with_label_check(tmp_path):
    rows = [
        {'query_id': '1', 'query': 'oak table', 'product_id': 'p1', 'product_name': 'Oak Table',
         'product_description': 'solid', 'label': 'Exact'},
        {'query_id': '1', 'query': 'oak table', 'product_id': 'p2', 'product_name': 'Pine Table',
         'product_description': '', 'label': 'Partial'},
        {'query_id': '2', 'query': 'lamp', 'product_id': 'p1', 'product_name': 'Oak Table',
         'product_description': 'solid', 'label': 'Great'},
    ]
    path = write_table(tmp_path / 'wands.csv', rows)
    corpus = ingest_table(path, 'csv', SCHEMA_PRESETS['wands'], 'wands')
    assert len(corpus.products) == 2
    assert [(j.query_id, j.product_id, j.raw_label) for j in corpus.judgments] == [('1', 'p1', 'Exact'), ('1', 'p2', 'Partial')]
    assert corpus.report.rows_skipped == 1
    assert 'Great' in corpus.report.errors[0]['reason']


def test_tsv_and_jsonl_formats(tmp_path):
    tsv = tmp_path / 'products.tsv'
    tsv.write_text('id\tname\tdesc\np1\tSofa "Deluxe"\tthree seats\n', encoding='utf-8')
    corpus = ingest_table(tsv, 'tsv', PRODUCT_SCHEMA, 'esci')
    assert corpus.products[0].title == 'Sofa "Deluxe"'

    jsonl = tmp_path / 'products.jsonl'
    jsonl.write_text(
        json.dumps({'id': 7, 'name': 'Bench', 'desc': 'teak'}) + '\n'
        + 'not json\n'
        + json.dumps({'id': 'p8', 'name': 'Stool', 'desc': None}) + '\n',
        encoding='utf-8',
    )
    corpus = ingest_table(jsonl, 'jsonl', PRODUCT_SCHEMA, 'esci')
    assert [p.product_id for p in corpus.products] == ['7', 'p8']
    assert corpus.products[1].description == ''
    assert corpus.report.rows_skipped == 1


WANDS_HEADER = b'query_id,query,product_id,product_name,product_description,label\n'


def test_invalid_utf8_row_is_skipped_not_fatal(tmp_path):
    path = tmp_path / 'wands.csv'
    path.write_bytes(
        WANDS_HEADER
        + b'1,oak table,p1,Oak Table,solid,Exact\n'
        + b'1,oak table,p2,Pine \xff\xfe Table,soft,Partial\n'
        + b'2,lamp,p3,Desk Lamp,bright,Irrelevant\n'
    )
    corpus = ingest_table(path, 'csv', SCHEMA_PRESETS['wands'], 'wands')
    assert [p.product_id for p in corpus.products] == ['p1', 'p3']
    assert corpus.report.rows_skipped == 1
    assert corpus.report.rows_accepted == 2
    assert corpus.report.errors == [{'row': 2, 'reason': 'invalid UTF-8'}]
    with pytest.raises(RowParseError) as excinfo:
        ingest_table(path, 'csv', SCHEMA_PRESETS['wands'], 'wands', strict=True)
    assert excinfo.value.row_number == 2

    jsonl = tmp_path / 'products.jsonl'
    jsonl.write_bytes(
        json.dumps({'id': 'p1', 'name': 'Bench', 'desc': 'teak'}).encode() + b'\n'
        + b'{"id": "p2", "name": "Caf\xe9 Chair", "desc": ""}\n'
        + json.dumps({'id': 'p3', 'name': 'Stool', 'desc': ''}).encode() + b'\n'
    )
    corpus = ingest_table(jsonl, 'jsonl', PRODUCT_SCHEMA, 'esci')
    assert [p.product_id for p in corpus.products] == ['p1', 'p3']
    assert corpus.report.errors[0]['row'] == 2
    assert 'UTF-8' in corpus.report.errors[0]['reason']
    with pytest.raises(RowParseError):
        ingest_table(jsonl, 'jsonl', PRODUCT_SCHEMA, 'esci', strict=True)


def test_extra_field_row_keeps_its_position(tmp_path):
    path = tmp_path / 'products.csv'
    path.write_text(
        'id,name,desc\np1,Lamp,a\np2,Rug,b\np3,Sofa,c,surplus\np4,,d\np5,Desk,e\n', encoding='utf-8')
    corpus = ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci')
    assert [p.product_id for p in corpus.products] == ['p1', 'p2', 'p5']
    assert [e['row'] for e in corpus.report.errors] == [3, 4]
    assert 'expected 3 fields, got 4' in corpus.report.errors[0]['reason']
    with pytest.raises(RowParseError) as excinfo:
        ingest_table(path, 'csv', PRODUCT_SCHEMA, 'esci', strict=True)
    assert excinfo.value.row_number == 3


def test_query_id_defaults_to_query_text(tmp_path):
    path = tmp_path / 'judged.csv'
    path.write_text('pid,title,q,grade\np1,Desk,standing desk,E\n', encoding='utf-8')
    schema = parse_schema_arg('product_id=pid,title=title,query=q,label=grade')
    corpus = ingest_table(path, 'csv', schema, 'esci')
    assert corpus.judgments[0].query_id == 'standing desk'


def test_parse_schema_arg():
    schema = parse_schema_arg('product_id=asin, title=name, extra.bullets=bp')
    assert schema == {'product_id': 'asin', 'title': 'name', 'extra.bullets': 'bp'}
    assert parse_schema_arg('esci') == SCHEMA_PRESETS['esci']
    with pytest.raises(SchemaError):
        parse_schema_arg('title=name')
    with pytest.raises(SchemaError):
        parse_schema_arg('product_id=a,title=b,query=q')


def test_canonical_corpus_is_row_order_invariant(tmp_path):
    corpus = make_judged_corpus(n_products=20, n_queries=4, per_query=5)
    rows = judged_rows(corpus)
    forward = ingest_table(write_table(tmp_path / 'a.csv', rows), 'csv', SCHEMA_PRESETS['wands'], 'wands')
    backward = ingest_table(write_table(tmp_path / 'b.csv', rows[::-1]), 'csv', SCHEMA_PRESETS['wands'], 'wands')
    assert forward.canonical() == backward.canonical()

    write_corpus(forward.canonical(), tmp_path / 'out_a')
    write_corpus(backward.canonical(), tmp_path / 'out_b')
    for name in ('products.jsonl', 'judgments.jsonl', 'corpus_meta.json'):
        assert (tmp_path / 'out_a' / name).read_bytes() == (tmp_path / 'out_b' / name).read_bytes()
    assert read_corpus(tmp_path / 'out_a') == forward.canonical()


def test_validate_corpus_reports_without_modifying():
    products = (ProductDoc('p1', 'Lamp'), ProductDoc('p1', 'Lamp copy'), ProductDoc('p2', '  '))
    judgments = (
        Judgment('q1', 'lamp', 'p1', 'Exact'),
        Judgment('q1', 'lamp', 'p9', 'Exact'),
        Judgment('q2', 'rug', 'p2', 'Maybe'),
    )
    corpus = Corpus(products, judgments, 'wands')
    report = validate_corpus(corpus, builtin_space('wands'))
    assert report.duplicate_ids == ['p1']
    assert report.empty_titles == ['p2']
    assert report.dangling_references == [{'query_id': 'q1', 'product_id': 'p9'}]
    assert [bad['label'] for bad in report.unparseable_labels] == ['Maybe']
    assert not report.is_clean()
    assert len(report.issues()) == 4
    assert len(corpus.products) == 3


def test_validate_clean_corpus():
    corpus = make_judged_corpus(n_products=10, n_queries=2, per_query=3)
    assert validate_corpus(corpus).is_clean()


def main():
    run_tests([
        test_products_only_csv,
        test_missing_column_names_the_column,
        test_bad_rows_are_skipped_and_counted,
        test_strict_mode_raises_on_bad_row,
        test_duplicate_product_in_products_table_is_a_bad_row,
        test_empty_file_gives_empty_corpus_with_warning,
        test_wands_judgments_with_label_check,
        test_tsv_and_jsonl_formats,
        test_invalid_utf8_row_is_skipped_not_fatal,
        test_extra_field_row_keeps_its_position,
        test_query_id_defaults_to_query_text,
        test_parse_schema_arg,
        test_canonical_corpus_is_row_order_invariant,
        test_validate_corpus_reports_without_modifying,
        test_validate_clean_corpus,
    ], 'Corpus Processing')


if __name__ == "__main__":
    main()
