"""
Generator and scorer backends for query generation: an HTTP JSON client with
bounded retries, deterministic offline mocks, and the bounded-concurrency
batch driver.
"""

import hashlib
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import requests
from dotenv import load_dotenv

from bm25_retriever import tokenize
from label_spaces import LabelSpace
from models import (
    BackendError, DistributionError, PreconditionError, ProductDoc, QGenError,
    ScoreDistribution,
)
from qgen_templates import parse_query_output
from relevance_metrics import expected_score

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = float(os.getenv('QGEN_HTTP_TIMEOUT', '60'))
# target length 32 tokens, as characters
DEFAULT_MAX_OUTPUT_CHARS = 160


@dataclass(frozen=True)
class GenRequest:
    request_id: str
    input_text: str
    max_output_chars: int = DEFAULT_MAX_OUTPUT_CHARS

    def __post_init__(self):
        if not self.input_text or not self.input_text.strip():
            raise PreconditionError(f"Request {self.request_id} has empty input text")
        if self.max_output_chars < 1:
            raise PreconditionError(f"Request {self.request_id} needs a positive max_output_chars")


@dataclass(frozen=True)
class GenResponse:
    request_id: str
    query_text: str
    logprob: float
    success: bool = True


@dataclass(frozen=True)
class GenFailure:
    """Positional failure entry in a batch result"""
    request_id: str
    error_type: str
    message: str
    success: bool = False

    def to_dict(self) -> Dict:
        return {'request_id': self.request_id, 'error_type': self.error_type, 'message': self.message}


def _digest(*parts) -> int:
    text = '\x00'.join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode('utf-8')).digest()[:8], 'big')


class JsonHttpClient:
    """POST JSON with bounded retries on transport errors and 5xx responses"""

    def __init__(self, base_url: str, api_token: Optional[str] = None, timeout: float = DEFAULT_TIMEOUT,
                 max_attempts: int = 3, backoff_seconds: float = 0.2, session=None,
                 sleep: Callable[[float], None] = time.sleep):
        if not base_url:
            raise PreconditionError("Backend base URL is not configured")
        self.base_url = base_url.rstrip('/')
        self.api_token = api_token
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.session = session or requests.Session()
        self.sleep = sleep

    def post(self, path: str, payload: Dict) -> Dict:
        url = f"{self.base_url}/{path.lstrip('/')}"
        headers = {"Content-Type": "application/json"}
        if self.api_token:
            headers["Authorization"] = f"Bearer {self.api_token}"

        last_error = None
        for attempt in range(self.max_attempts):
            try:
                response = self.session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except (requests.exceptions.ConnectionError, requests.exceptions.Timeout) as e:
                last_error = f"transport error: {e}"
            else:
                if response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}"
                elif response.status_code >= 400:
                    raise BackendError(f"{url} returned HTTP {response.status_code}: {response.text[:200]}")
                else:
                    try:
                        return response.json()
                    except ValueError:
                        raise BackendError(f"{url} returned a non-JSON body")
            if attempt < self.max_attempts - 1:
                delay = self.backoff_seconds * (2 ** attempt)
                logger.warning(f"⚠️ {url} failed ({last_error}), attempt {attempt + 1}/{self.max_attempts}, retrying in {delay:.1f}s")
                self.sleep(delay)
        raise BackendError(f"{url} failed after {self.max_attempts} attempts: {last_error}")


class GeneratorBackend:
    """Produces raw generator text plus a log-probability for one request"""
    name = 'generator'

    def complete(self, req: GenRequest) -> Tuple[str, float]:
        raise NotImplementedError


class HttpGenerator(GeneratorBackend):
    name = 'http'

    def __init__(self, client: JsonHttpClient):
        self.client = client

    def complete(self, req: GenRequest) -> Tuple[str, float]:
        body = self.client.post('generate', {
            'id': req.request_id,
            'input_text': req.input_text,
            'max_output_chars': req.max_output_chars,
        })
        if body.get('id') != req.request_id:
            raise BackendError(f"Response id {body.get('id')!r} does not match request {req.request_id!r}")
        try:
            return str(body['query']), float(body['logprob'])
        except (KeyError, TypeError, ValueError) as e:
            raise BackendError(f"Malformed generator response for {req.request_id}: {e}")


DISTRACTOR_TERMS = ('cheap', 'replacement', 'cover', 'kit', 'accessory', 'vintage', 'mini', 'set')


class MockTemplateGenerator(GeneratorBackend):
    """Echo salient title terms; lower desired labels drop or perturb one term per step"""
    name = 'mock-template'

    def __init__(self, space: LabelSpace, seed: int = 0, max_terms: int = 4):
        self.space = space
        self.seed = seed
        self.max_terms = max_terms

    def _target_block(self, text: str) -> str:
        # in a few-shot prompt the target is the last block
        block = text.rsplit('\n\n', 1)[-1]
        return block.split('\n', 1)[0]

    def _parse_target(self, text: str) -> Tuple[Optional[str], str]:
        line = self._target_block(text)
        label = None
        if line.startswith('Label: '):
            rest = line[len('Label: '):]
            # labels may contain spaces, so take the longest label of the space
            for name in sorted(self.space.labels, key=len, reverse=True):
                if rest.startswith(name + ' ') or rest == name:
                    label, line = name, rest[len(name) + 1:]
                    break
            else:
                label, _, line = rest.partition(' ')
        for word in ('Product: ', 'Document: '):
            if line.startswith(word):
                line = line[len(word):]
                break
        title = line.split(' Description: ', 1)[0]
        return label, title

    def _salient_terms(self, title: str) -> List[str]:
        terms = list(dict.fromkeys(tokenize(title)))
        salient = [t for t in terms if len(t) > 1 and not t.isdigit()]
        return (salient or terms)[:self.max_terms]

    def complete(self, req: GenRequest) -> Tuple[str, float]:
        label, title = self._parse_target(req.input_text)
        terms = self._salient_terms(title)
        steps = self.space.rank_of(label) if label in self.space.labels else 0
        for step in range(steps):
            if not terms:
                break
            h = _digest(self.seed, req.input_text, step)
            position = (h >> 1) % len(terms)
            if len(terms) > 1 and h % 2 == 0:
                del terms[position]
            else:
                terms[position] = DISTRACTOR_TERMS[(h >> 8) % len(DISTRACTOR_TERMS)]
        query = ' '.join(terms)
        if len(query) > req.max_output_chars:
            query = query[:req.max_output_chars].rsplit(' ', 1)[0]
        logprob = -(_digest(self.seed, req.input_text) % 1000) / 1000.0
        return f"Query: {query}", logprob


class ScorerBackend:
    """Label distribution for a (query, product) pair over a declared label space"""
    name = 'scorer'
    space: LabelSpace

    def score(self, query_text: str, product: ProductDoc) -> ScoreDistribution:
        raise NotImplementedError

    def score_scalar(self, query_text: str, product: ProductDoc) -> float:
        return expected_score(self.score(query_text, product))


class HttpScorer(ScorerBackend):
    name = 'http'

    def __init__(self, client: JsonHttpClient, space: LabelSpace):
        self.client = client
        self.space = space

    def _call(self, query_text: str, product: ProductDoc) -> Dict:
        request_id = f"{product.product_id}:{_digest(query_text, product.product_id):016x}"
        body = self.client.post('score', {
            'id': request_id,
            'query': query_text,
            'title': product.title,
            'description': product.description,
        })
        if body.get('id') != request_id:
            raise BackendError(f"Response id {body.get('id')!r} does not match request {request_id!r}")
        return body

    def score(self, query_text: str, product: ProductDoc) -> ScoreDistribution:
        body = self._call(query_text, product)
        probs = body.get('probs')
        if not isinstance(probs, dict):
            raise DistributionError(f"Scorer returned no label distribution for {product.product_id}")
        try:
            return ScoreDistribution(self.space, {str(k): float(v) for k, v in probs.items()})
        except (TypeError, ValueError) as e:
            raise DistributionError(f"Scorer returned non-numeric probabilities: {e}")

    def score_scalar(self, query_text: str, product: ProductDoc) -> float:
        body = self._call(query_text, product)
        if 'score' in body:
            try:
                return float(body['score'])
            except (TypeError, ValueError):
                raise DistributionError(f"Scorer returned a non-numeric score: {body['score']!r}")
        probs = body.get('probs')
        if not isinstance(probs, dict):
            raise DistributionError(f"Scorer returned neither score nor probs for {product.product_id}")
        return expected_score(ScoreDistribution(self.space, {str(k): float(v) for k, v in probs.items()}))


def _jaccard(a: set, b: set) -> float:
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


class MockOverlapScorer(ScorerBackend):
    """Softmax over label positions centred on (1 - token Jaccard); overlap-monotone"""
    name = 'mock-overlap'

    def __init__(self, space: LabelSpace, scale: float = 4.0):
        if space.continuous:
            raise PreconditionError(f"Mock scorer needs a discrete label space, got '{space.name}'")
        self.space = space
        self.scale = scale

    def overlap(self, query_text: str, product: ProductDoc) -> float:
        query = set(tokenize(query_text))
        title = set(tokenize(product.title))
        document = title | set(tokenize(product.description))
        return max(_jaccard(query, title), _jaccard(query, document))

    def score(self, query_text: str, product: ProductDoc) -> ScoreDistribution:
        n = len(self.space.labels)
        centre = (1.0 - self.overlap(query_text, product)) * (n - 1)
        logits = -self.scale * (np.arange(n) - centre) ** 2
        weights = np.exp(logits - logits.max())
        probs = weights / weights.sum()
        return ScoreDistribution(self.space, {label: float(p) for label, p in zip(self.space.labels, probs)})


class RandomScorer:
    """Random baseline: seeded uniform score per (query, product)"""
    name = 'random'

    def __init__(self, seed: int = 0):
        self.seed = seed

    def with_seed(self, seed: int) -> 'RandomScorer':
        return RandomScorer(seed)

    def score_scalar(self, query_text: str, product: ProductDoc) -> float:
        rng = np.random.default_rng(_digest(self.seed, query_text, product.product_id))
        return float(rng.random())


class DistributionScalarAdapter:
    """Ranking-style view of a distribution scorer"""

    def __init__(self, scorer: ScorerBackend):
        self.scorer = scorer
        self.space = scorer.space
        self.name = f"{scorer.name}-expected"

    def score(self, query_text: str, product: ProductDoc) -> ScoreDistribution:
        return self.scorer.score(query_text, product)

    def score_scalar(self, query_text: str, product: ProductDoc) -> float:
        return expected_score(self.scorer.score(query_text, product))


class HttpRetriever:
    """External retriever speaking the same JSON wire style"""
    name = 'http'

    def __init__(self, client: JsonHttpClient):
        self.client = client

    def retrieve(self, query_text: str, k: int, exclude: Optional[str] = None) -> List[str]:
        request_id = f"{_digest(query_text, k, exclude):016x}"
        body = self.client.post('retrieve', {'id': request_id, 'query': query_text, 'k': k, 'exclude': exclude})
        ids = body.get('product_ids')
        if body.get('id') != request_id or not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
            raise BackendError("Malformed retriever response")
        return [pid for pid in ids if pid != exclude][:k]


def generate(backend: GeneratorBackend, req: GenRequest) -> GenResponse:
    """Run one request and parse the query out of the backend text"""
    raw, logprob = backend.complete(req)
    query = parse_query_output(raw)
    if len(query) > req.max_output_chars:
        query = query[:req.max_output_chars].rstrip()
    if not math.isfinite(logprob) or logprob > 0.0:
        raise BackendError(f"Backend returned an invalid logprob {logprob} for {req.request_id}")
    return GenResponse(req.request_id, query, float(logprob))


def score(backend: ScorerBackend, query_text: str, product: ProductDoc) -> ScoreDistribution:
    dist = backend.score(query_text, product)
    if not isinstance(dist, ScoreDistribution):
        raise DistributionError(f"Scorer {backend.name} did not return a ScoreDistribution")
    return dist


def score_scalar(backend, query_text: str, product: ProductDoc) -> float:
    if hasattr(backend, 'score_scalar'):
        value = float(backend.score_scalar(query_text, product))
    else:
        value = expected_score(score(backend, query_text, product))
    if not math.isfinite(value):
        raise DistributionError(f"Scorer returned a non-finite score for {product.product_id}")
    return value


def _safe_generate(backend: GeneratorBackend, req: GenRequest) -> Union[GenResponse, GenFailure]:
    try:
        return generate(backend, req)
    except QGenError as e:
        return GenFailure(req.request_id, type(e).__name__, str(e))
    except Exception as e:
        logger.error(f"❌ Unexpected error for request {req.request_id}: {e}")
        return GenFailure(req.request_id, type(e).__name__, str(e))


def generate_batch(backend: GeneratorBackend, reqs: Sequence[GenRequest],
                   max_in_flight: int = 8) -> List[Union[GenResponse, GenFailure]]:
    """Results in request order; at most max_in_flight requests outstanding"""
    if max_in_flight < 1:
        raise PreconditionError(f"max_in_flight must be >= 1, got {max_in_flight}")
    if not reqs:
        return []
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = [pool.submit(_safe_generate, backend, req) for req in reqs]
        results = [future.result() for future in futures]
    failed = sum(1 for r in results if not r.success)
    if failed:
        logger.warning(f"⚠️ {failed} of {len(results)} generation requests failed")
    return results


GENERATOR_BACKENDS = ('http', 'mock-template')
SCORER_BACKENDS = ('http', 'mock-overlap', 'random')


def _client_from_env(url: Optional[str], env_name: str, token: Optional[str]) -> JsonHttpClient:
    base_url = url or os.getenv(env_name)
    if not base_url:
        raise PreconditionError(f"No backend URL given and {env_name} is not set")
    return JsonHttpClient(base_url, api_token=token or os.getenv('QGEN_API_TOKEN'))


def create_generator(name: str, space: LabelSpace, seed: int = 0, url: Optional[str] = None,
                     token: Optional[str] = None) -> GeneratorBackend:
    if name == 'mock-template':
        return MockTemplateGenerator(space, seed=seed)
    if name == 'http':
        return HttpGenerator(_client_from_env(url, 'QGEN_GENERATOR_URL', token))
    raise PreconditionError(f"Unknown generator backend '{name}'. Valid: {', '.join(GENERATOR_BACKENDS)}")


def create_scorer(name: str, space: LabelSpace, seed: int = 0, url: Optional[str] = None,
                  token: Optional[str] = None):
    if name == 'mock-overlap':
        return MockOverlapScorer(space)
    if name == 'random':
        return RandomScorer(seed)
    if name == 'http':
        return HttpScorer(_client_from_env(url, 'QGEN_SCORER_URL', token), space)
    raise PreconditionError(f"Unknown scorer backend '{name}'. Valid: {', '.join(SCORER_BACKENDS)}")


def create_retriever_client(url: Optional[str] = None, token: Optional[str] = None) -> HttpRetriever:
    return HttpRetriever(_client_from_env(url, 'QGEN_RETRIEVER_URL', token))
