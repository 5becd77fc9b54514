#!/usr/bin/env python3
"""
Tests for QGen input templates, prompt assembly and output parsing
"""

import pytest

from label_spaces import builtin_space, parse_label
from models import Corpus, GenerationParseError, Judgment, PreconditionError, ProductDoc
from qgen_templates import (
    Exemplar, TemplateConfig, assemble_prompt, build_qgen_training_pairs, format_labelcond_input,
    format_vanilla_input, parse_query_output, sample_exemplars,
)
from testing_utils import make_products, run_tests

ESCI = builtin_space('esci')
BED = ProductDoc('p1', 'solid wood platform bed', 'queen size,   no box spring needed')


def label(name):
    return parse_label(name, ESCI)


def test_labelcond_input_scaffold():
    text = format_labelcond_input(BED, label('E'), TemplateConfig())
    assert text == 'Label: E Product: solid wood platform bed Description: queen size, no box spring needed'


def test_labelcond_input_is_label_prefix_plus_vanilla():
    configs = (
        TemplateConfig(max_input_chars=10 ** 6),
        TemplateConfig(max_input_chars=10 ** 6, include_description=False),
        TemplateConfig(max_input_chars=10 ** 6, document_word='Document'),
    )
    for index, product in enumerate(make_products(200, seed=4)):
        graded = label(ESCI.labels[index % len(ESCI.labels)])
        for cfg in configs:
            expected = f"Label: {graded.label} " + format_vanilla_input(product, cfg)
            assert format_labelcond_input(product, graded, cfg) == expected


def test_vanilla_input_without_description():
    cfg = TemplateConfig(include_description=False)
    assert format_vanilla_input(BED, cfg) == 'Product: solid wood platform bed'


def test_document_word_for_passage_corpora():
    cfg = TemplateConfig(document_word='Document')
    relevant = parse_label('Relevant', builtin_space('msmarco-binary'))
    text = format_labelcond_input(ProductDoc('d1', 'Tides', 'caused by the moon'), relevant, cfg)
    assert text == 'Label: Relevant Document: Tides Description: caused by the moon'


def test_description_truncated_to_budget_scaffold_kept():
    product = ProductDoc('p2', 'lamp', 'x' * 500)
    text = format_labelcond_input(product, label('S'), TemplateConfig(max_input_chars=60))
    assert len(text) == 60
    assert text.startswith('Label: S Product: lamp Description: ')

    long_title = ProductDoc('p3', 'word ' * 30, 'never shown')
    text = format_vanilla_input(long_title, TemplateConfig(max_input_chars=40))
    assert 'Description' not in text
    assert text.startswith('Product: word word')


def test_parse_query_output():
    assert parse_query_output('Query: red chair') == 'red chair'
    assert parse_query_output('  Query:   oak desk  \nQuery: other') == 'oak desk'
    assert parse_query_output('plain text query') == 'plain text query'
    assert parse_query_output('Query: Query: twice') == 'Query: twice'
    for bad in ('', 'Query:', '   \n   ', 'Query:  \nsecond line'):
        with pytest.raises(GenerationParseError):
            parse_query_output(bad)


def _exemplars(labels, per_label):
    products = make_products(len(labels) * per_label, seed=3)
    out = []
    for i, name in enumerate(labels):
        for j in range(per_label):
            product = products[i * per_label + j]
            out.append(Exemplar(label(name), product, f"query {name} {j}"))
    return out


def test_vanilla_prompt_has_eight_blocks_and_open_target():
    exemplars = _exemplars(['E'], 8)
    prompt = assemble_prompt(exemplars, BED, 'vanilla', None, TemplateConfig())
    blocks = prompt.split('\n\n')
    assert len(blocks) == 9
    assert blocks[0].endswith('\nQuery: query E 0')
    assert blocks[-1] == 'Product: solid wood platform bed Description: queen size, no box spring needed\nQuery:'


def test_vanilla_prompt_rejects_wrong_exemplars():
    with pytest.raises(PreconditionError):
        assemble_prompt(_exemplars(['E'], 7), BED, 'vanilla', None, TemplateConfig())
    mixed = _exemplars(['E'], 7) + _exemplars(['S'], 1)
    with pytest.raises(PreconditionError):
        assemble_prompt(mixed, BED, 'vanilla', None, TemplateConfig())


def test_labelcond_prompt_is_label_order_major():
    exemplars = _exemplars(['I', 'C', 'S', 'E'], 2)
    prompt = assemble_prompt(exemplars, BED, 'labelcond', label('C'), TemplateConfig())
    blocks = prompt.split('\n\n')
    assert len(blocks) == 9
    assert [b.split(' ', 2)[1] for b in blocks[:8]] == ['E', 'E', 'S', 'S', 'C', 'C', 'I', 'I']
    assert blocks[0].endswith('Query: query E 0')
    assert blocks[1].endswith('Query: query E 1')
    assert blocks[-1].startswith('Label: C Product: solid wood platform bed')
    assert blocks[-1].endswith('\nQuery:')


def test_labelcond_prompt_needs_two_per_label():
    exemplars = _exemplars(['E', 'S', 'C'], 2) + _exemplars(['I'], 1)
    with pytest.raises(PreconditionError) as excinfo:
        assemble_prompt(exemplars, BED, 'labelcond', label('E'), TemplateConfig())
    assert "'I'" in str(excinfo.value)


def _labeled_corpus():
    products = make_products(12, seed=5)
    judgments = []
    for i, product in enumerate(products):
        name = ESCI.labels[i % 4]
        judgments.append(Judgment(f"q{i}", f"query for {product.title}", product.product_id, name, 'esci'))
    return Corpus(tuple(products), tuple(judgments), 'esci')


def test_sample_exemplars_is_seeded():
    corpus = _labeled_corpus()
    first = sample_exemplars(corpus, ESCI, 'labelcond', seed=11)
    again = sample_exemplars(corpus, ESCI, 'labelcond', seed=11)
    assert first == again
    assert [ex.label.label for ex in first] == ['E', 'E', 'S', 'S', 'C', 'C', 'I', 'I']
    with pytest.raises(PreconditionError):
        sample_exemplars(corpus, ESCI, 'vanilla', seed=11)


def test_qgen_training_pairs():
    corpus = _labeled_corpus()
    labelcond = build_qgen_training_pairs(corpus, ESCI, 'labelcond', TemplateConfig())
    vanilla = build_qgen_training_pairs(corpus, ESCI, 'vanilla', TemplateConfig())
    assert len(labelcond) == 12
    assert len(vanilla) == 3
    assert all(row['label'] == 'E' for row in vanilla)
    assert labelcond[0]['input'].startswith(f"Label: {labelcond[0]['label']} Product: ")
    assert labelcond[0]['target'].startswith('Query: query for ')


def main():
    run_tests([
        test_labelcond_input_scaffold,
        test_labelcond_input_is_label_prefix_plus_vanilla,
        test_vanilla_input_without_description,
        test_document_word_for_passage_corpora,
        test_description_truncated_to_budget_scaffold_kept,
        test_parse_query_output,
        test_vanilla_prompt_has_eight_blocks_and_open_target,
        test_vanilla_prompt_rejects_wrong_exemplars,
        test_labelcond_prompt_is_label_order_major,
        test_labelcond_prompt_needs_two_per_label,
        test_sample_exemplars_is_seeded,
        test_qgen_training_pairs,
    ], 'QGen Template')


if __name__ == "__main__":
    main()
