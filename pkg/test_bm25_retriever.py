#!/usr/bin/env python3
"""
Tests for the BM25 index: exhaustive-ranking equivalence, hand-derived scores,
hard negative mining and the persisted index format
"""

import math

import numpy as np
import pytest

from bm25_retriever import (
    HardNegativeSet, bm25_score, build_index, load_index, mine_hard_negatives, retrieve_topk, save_index,
    tokenize, unique_terms,
)
from label_spaces import builtin_space
from models import Corpus, GeneratedQuery, IndexFormatError, PreconditionError, ProductDoc, SyntheticDataset
from testing_utils import make_products, run_tests

VOCAB = ['oak', 'red', 'chair', 'table', 'lamp', 'desk', 'sofa', 'rug', 'metal', 'glass', 'bed', 'blue',
         'modern', 'vintage', 'small', 'large', 'white', 'black', 'round', 'square']


def brute_force_ranking(products, fields, query, k, k1=1.2, b=0.75, exclude=None):
    """Score every document directly from its token list"""
    docs = sorted(products, key=lambda p: p.product_id)
    tokens = []
    for product in docs:
        doc_tokens = []
        for name in fields:
            doc_tokens.extend(tokenize(product.field_text(name)))
        tokens.append(doc_tokens)
    n = len(docs)
    avg = sum(len(t) for t in tokens) / n
    scores = [0.0] * n
    for term in unique_terms(query):
        df = sum(1 for t in tokens if term in t)
        if df == 0:
            continue
        idf = max(0.0, math.log(1.0 + (n - df + 0.5) / (df + 0.5)))
        for i, doc_tokens in enumerate(tokens):
            tf = doc_tokens.count(term)
            if tf:
                ratio = len(doc_tokens) / avg if avg else 0.0
                scores[i] += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * ratio))
    ranked = sorted(
        ((scores[i], docs[i].product_id) for i in range(n) if scores[i] > 0 and docs[i].product_id != exclude),
        key=lambda pair: (-pair[0], pair[1]),
    )
    filler = [docs[i].product_id for i in range(n)
              if scores[i] <= 0 and tokens[i] and docs[i].product_id != exclude]
    return ([pid for _, pid in ranked] + filler)[:k]


def _random_corpus(rng, n_docs):
    products = []
    for i in range(n_docs):
        title = ' '.join(rng.choice(VOCAB, size=int(rng.integers(1, 5))))
        description = ' '.join(rng.choice(VOCAB, size=int(rng.integers(0, 8))))
        products.append(ProductDoc(f"d{int(rng.integers(0, 10 ** 6)):06d}-{i}", title, description))
    return products


def test_topk_matches_exhaustive_ranking():
    rng = np.random.default_rng(1234)
    fields = ('title', 'description')
    for _ in range(100):
        products = _random_corpus(rng, int(rng.integers(1, 201)))
        index = build_index(Corpus(tuple(products)), fields)
        query = ' '.join(rng.choice(VOCAB, size=int(rng.integers(1, 4))))
        exclude = products[0].product_id
        for k in (1, 5, 35):
            assert retrieve_topk(index, query, k) == brute_force_ranking(products, fields, query, k)
            assert retrieve_topk(index, query, k, exclude) == brute_force_ranking(
                products, fields, query, k, exclude=exclude)


def test_hand_derived_three_document_scores():
    products = [ProductDoc('d1', 'red chair'), ProductDoc('d2', 'red red table'), ProductDoc('d3', 'blue lamp')]
    index = build_index(Corpus(tuple(products)), ('title',))
    avg = 7 / 3
    idf_red = math.log(1 + 1.5 / 2.5)
    idf_chair = math.log(1 + 2.5 / 1.5)
    norm_d1 = 0.25 + 0.75 * (2 / avg)
    norm_d2 = 0.25 + 0.75 * (3 / avg)
    expected_d1 = idf_red * 2.2 / (1 + 1.2 * norm_d1) + idf_chair * 2.2 / (1 + 1.2 * norm_d1)
    expected_d2 = idf_red * 2 * 2.2 / (2 + 1.2 * norm_d2)
    assert bm25_score(index, 'red chair', 'd1') == pytest.approx(expected_d1, abs=1e-9)
    assert bm25_score(index, 'red chair', 'd2') == pytest.approx(expected_d2, abs=1e-9)
    assert bm25_score(index, 'red chair', 'd3') == 0.0
    assert bm25_score(index, 'chair chair red', 'd1') == pytest.approx(expected_d1, abs=1e-9)
    assert retrieve_topk(index, 'red chair', 3) == ['d1', 'd2', 'd3']
    assert retrieve_topk(index, 'red chair', 2) == ['d1', 'd2']
    assert retrieve_topk(index, 'sofa', 3) == ['d1', 'd2', 'd3']
    assert retrieve_topk(index, 'sofa', 3, exclude='d2') == ['d1', 'd3']


def test_ties_break_by_product_id():
    products = [ProductDoc(pid, 'oak table') for pid in ('p3', 'p1', 'p2')]
    index = build_index(Corpus(tuple(products)), ('title',))
    assert retrieve_topk(index, 'oak', 2) == ['p1', 'p2']


def test_small_corpus_fills_with_non_matching_documents():
    products = [
        ProductDoc('p1', 'oak dining table'),
        ProductDoc('p2', 'oak coffee table'),
        ProductDoc('p3', 'garden hose'),
        ProductDoc('p4', 'desk lamp'),
        ProductDoc('p5', 'wool rug'),
        ProductDoc('p6', '--- ***'),
    ]
    index = build_index(Corpus(tuple(products)), ('title',))
    assert index.doc_lengths[index.ordinals['p6']] == 0
    ranked = retrieve_topk(index, 'oak dining table', 35, exclude='p1')
    assert ranked == ['p2', 'p3', 'p4', 'p5']

    ds = _dataset([GeneratedQuery('p1', 'E', 'oak dining table', -0.1)])
    sets, report = mine_hard_negatives(index, ds, k=35)
    assert sets[0].negatives == ('p2', 'p3', 'p4', 'p5')
    assert report['empty_retrievals'] == 0


def test_score_grows_with_term_frequency():
    rng = np.random.default_rng(77)
    for _ in range(50):
        products = _random_corpus(rng, int(rng.integers(2, 40)))
        term = str(rng.choice(VOCAB))
        words = [term] + [str(w) for w in rng.choice(VOCAB, size=int(rng.integers(2, 8)))]
        target = ProductDoc('zz-target', ' '.join(words))
        fields = ('title', 'description')
        previous = None
        # swap one other word at a time for the query term so length and df stay fixed
        while True:
            index = build_index(Corpus(tuple(products) + (target,)), fields)
            score = bm25_score(index, term, 'zz-target')
            if previous is not None:
                assert score >= previous - 1e-12
            previous = score
            others = [i for i, w in enumerate(words) if w != term]
            if not others:
                break
            words[others[0]] = term
            target = ProductDoc('zz-target', ' '.join(words))


def test_duplicating_a_matching_document_lowers_idf():
    rng = np.random.default_rng(78)
    for _ in range(50):
        products = _random_corpus(rng, int(rng.integers(1, 60)))
        index = build_index(Corpus(tuple(products)))
        term = tokenize(products[0].title)[0]
        duplicate = ProductDoc('zz-copy', products[0].title, products[0].description)
        grown = build_index(Corpus(tuple(products) + (duplicate,)))
        assert grown.idf(term) < index.idf(term)


def test_index_ignores_corpus_input_order():
    rng = np.random.default_rng(79)
    fields = ('title', 'description')
    for _ in range(30):
        products = _random_corpus(rng, int(rng.integers(1, 80)))
        shuffled = [products[i] for i in rng.permutation(len(products))]
        index = build_index(Corpus(tuple(products)), fields)
        other = build_index(Corpus(tuple(shuffled)), fields)
        assert other.product_ids == index.product_ids
        assert other.doc_lengths == index.doc_lengths
        for _ in range(5):
            query = ' '.join(rng.choice(VOCAB, size=int(rng.integers(1, 4))))
            assert retrieve_topk(other, query, 10) == retrieve_topk(index, query, 10)
            pid = products[int(rng.integers(0, len(products)))].product_id
            assert bm25_score(other, query, pid) == bm25_score(index, query, pid)


def test_invalid_arguments():
    with pytest.raises(PreconditionError):
        build_index(Corpus())
    index = build_index(Corpus((ProductDoc('p1', 'lamp'),)))
    with pytest.raises(PreconditionError):
        retrieve_topk(index, 'lamp', 0)
    with pytest.raises(PreconditionError):
        build_index(Corpus((ProductDoc('p1', 'lamp'),)), k1=0.0)


def _dataset(records):
    return SyntheticDataset(tuple(records), builtin_space('esci'))


def test_mine_hard_negatives_returns_top_35():
    products = [ProductDoc(f"p{i:03d}", f"chair model {i}", 'wooden chair') for i in range(60)]
    index = build_index(Corpus(tuple(products)))
    ds = _dataset([
        GeneratedQuery('p000', 'E', 'wooden chair', -0.1),
        GeneratedQuery('p001', 'I', 'wooden chair', -0.1),
        GeneratedQuery('p002', 'S', 'garden hose', -0.1, final_label='E'),
    ])
    sets, report = mine_hard_negatives(index, ds, k=35)
    assert [s.positive for s in sets] == ['p000', 'p002']
    assert len(sets[0].negatives) == 35
    assert 'p000' not in sets[0].negatives
    assert sets[1].negatives == tuple(f"p{i:03d}" for i in range(36) if i != 2)
    assert report == {'queries': 2, 'empty_retrievals': 0, 'k': 35}
    assert HardNegativeSet.from_dict(sets[0].to_dict()) == sets[0]


def test_index_file_round_trip(tmp_path):
    products = make_products(50, seed=9)
    index = build_index(Corpus(tuple(products)), ('title', 'description'), k1=1.5, b=0.6)
    path = tmp_path / 'bm25.qgfidx'
    save_index(index, path)
    loaded = load_index(path)
    assert loaded == index
    query = products[3].title
    assert loaded.retrieve(query, 10) == index.retrieve(query, 10)


def test_corrupt_index_files(tmp_path):
    index = build_index(Corpus(tuple(make_products(5))))
    path = tmp_path / 'bm25.qgfidx'
    save_index(index, path)
    data = path.read_bytes()

    bad_magic = tmp_path / 'magic.qgfidx'
    bad_magic.write_bytes(b'NOTIDX1' + data[7:])
    truncated = tmp_path / 'short.qgfidx'
    truncated.write_bytes(data[:-3])
    trailing = tmp_path / 'long.qgfidx'
    trailing.write_bytes(data + b'\x00')
    for broken in (bad_magic, truncated, trailing):
        with pytest.raises(IndexFormatError):
            load_index(broken)


def main():
    run_tests([
        test_topk_matches_exhaustive_ranking,
        test_hand_derived_three_document_scores,
        test_ties_break_by_product_id,
        test_small_corpus_fills_with_non_matching_documents,
        test_score_grows_with_term_frequency,
        test_duplicating_a_matching_document_lowers_idf,
        test_index_ignores_corpus_input_order,
        test_invalid_arguments,
        test_mine_hard_negatives_returns_top_35,
        test_index_file_round_trip,
        test_corrupt_index_files,
    ], 'BM25 Retriever')


if __name__ == "__main__":
    main()
