"""
Shared fixtures for the test scripts: small synthetic catalogs, table writers
and a script-mode runner so each test file also runs without pytest.
"""

import inspect
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd

from models import Corpus, GeneratedQuery, Judgment, ProductDoc

NOUNS = ['chair', 'table', 'lamp', 'sofa', 'bed', 'desk', 'rug', 'shelf', 'mirror', 'stool',
         'cabinet', 'bench', 'ottoman', 'dresser', 'vanity', 'faucet', 'sink', 'mattress']
ADJECTIVES = ['red', 'oak', 'solid', 'wood', 'modern', 'rustic', 'metal', 'velvet', 'outdoor', 'round',
              'folding', 'linen', 'glass', 'white', 'black', 'tufted', 'vintage', 'compact']
MATERIALS = ['walnut finish', 'brass legs', 'cotton cover', 'steel frame', 'hand woven', 'easy assembly']


def make_products(n: int, seed: int = 0) -> List[ProductDoc]:
    """Products with two to four adjective tokens and a noun, ids p0000.."""
    rng = np.random.default_rng(seed)
    products = []
    for i in range(n):
        adjectives = rng.choice(ADJECTIVES, size=int(rng.integers(2, 5)), replace=False)
        noun = NOUNS[int(rng.integers(len(NOUNS)))]
        title = ' '.join(list(adjectives) + [noun])
        description = f"{noun} with {MATERIALS[int(rng.integers(len(MATERIALS)))]}"
        products.append(ProductDoc(f"p{i:04d}", title, description))
    return products


def make_judged_corpus(n_products: int = 40, n_queries: int = 6, per_query: int = 8, seed: int = 0,
                       labels: Sequence[str] = ('Exact', 'Partial', 'Irrelevant'), space_name: str = 'wands') -> Corpus:
    rng = np.random.default_rng(seed)
    products = make_products(n_products, seed)
    judgments = []
    for q in range(n_queries):
        query = f"{ADJECTIVES[q % len(ADJECTIVES)]} {NOUNS[q % len(NOUNS)]}"
        for idx in rng.choice(n_products, size=per_query, replace=False):
            label = labels[int(rng.integers(len(labels)))]
            judgments.append(Judgment(f"q{q}", query, products[int(idx)].product_id, label, space_name))
    return Corpus(tuple(products), tuple(judgments), space_name)


def judged_rows(corpus: Corpus) -> List[Dict[str, str]]:
    """Flatten a corpus into WANDS-shaped rows, one per judgment"""
    rows = []
    for judgment in corpus.judgments:
        product = corpus.get_product(judgment.product_id)
        rows.append({
            'query_id': judgment.query_id,
            'query': judgment.query_text,
            'product_id': product.product_id,
            'product_name': product.title,
            'product_description': product.description,
            'label': judgment.raw_label,
        })
    return rows


def write_table(path: Path, rows: List[Dict[str, str]], sep: str = ',') -> Path:
    pd.DataFrame(rows).to_csv(path, sep=sep, index=False)
    return path


def record(product_id: str, label: str, query: str, logprob: float = -0.5, final: str = '') -> GeneratedQuery:
    return GeneratedQuery(product_id, label, query, logprob, final)


def run_tests(tests: List[Callable], title: str) -> bool:
    """Script-mode runner; tests taking one argument get a fresh temp directory"""
    print(f"🚀 Starting {title} tests...\n")
    passed = 0
    for test in tests:
        try:
            if inspect.signature(test).parameters:
                with tempfile.TemporaryDirectory() as tmp:
                    test(Path(tmp))
            else:
                test()
            print(f"✅ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"❌ {test.__name__}: {type(e).__name__}: {e}")
    print(f"\n📊 Test Results: {passed}/{len(tests)} tests passed")
    return passed == len(tests)
