"""
Flask app serving the generator / scorer / retriever JSON protocol from the
offline mock backends, so HTTP clients can be exercised without a model.
"""

import logging
import os
from typing import Optional
from urllib.parse import urlparse

from flask import Flask, jsonify, request

from bm25_retriever import Bm25Index
from label_spaces import builtin_space
from models import ProductDoc, QGenError
from qgen_service import GenRequest, GeneratorBackend, MockOverlapScorer, MockTemplateGenerator, generate

logger = logging.getLogger(__name__)


def create_app(generator: Optional[GeneratorBackend] = None, scorer=None,
               index: Optional[Bm25Index] = None) -> Flask:
    app = Flask(__name__)
    space = builtin_space('esci')
    generator = generator or MockTemplateGenerator(space)
    scorer = scorer or MockOverlapScorer(space)

    @app.route('/health')
    def health():
        return jsonify({'status': 'ok', 'generator': generator.name, 'scorer': scorer.name,
                        'retriever': index is not None})

    @app.route('/generate', methods=['POST'])
    def generate_route():
        payload = request.get_json(silent=True) or {}
        if 'id' not in payload or not payload.get('input_text'):
            return jsonify({'error': 'id and input_text are required'}), 400
        try:
            req = GenRequest(str(payload['id']), payload['input_text'],
                             int(payload.get('max_output_chars', 160)))
            response = generate(generator, req)
        except QGenError as e:
            logger.error(f"❌ Generation failed for {payload.get('id')}: {e}")
            return jsonify({'id': payload['id'], 'error': str(e)}), 500
        return jsonify({'id': response.request_id, 'query': f"Query: {response.query_text}",
                        'logprob': response.logprob})

    @app.route('/score', methods=['POST'])
    def score_route():
        payload = request.get_json(silent=True) or {}
        if 'id' not in payload or 'query' not in payload or 'title' not in payload:
            return jsonify({'error': 'id, query and title are required'}), 400
        product = ProductDoc(str(payload['id']), payload['title'], payload.get('description') or '')
        try:
            if hasattr(scorer, 'score'):
                dist = scorer.score(payload['query'], product)
                return jsonify({'id': payload['id'], 'probs': dist.probs})
            return jsonify({'id': payload['id'], 'score': scorer.score_scalar(payload['query'], product)})
        except QGenError as e:
            logger.error(f"❌ Scoring failed for {payload['id']}: {e}")
            return jsonify({'id': payload['id'], 'error': str(e)}), 500

    @app.route('/retrieve', methods=['POST'])
    def retrieve_route():
        if index is None:
            return jsonify({'error': 'No index loaded'}), 404
        payload = request.get_json(silent=True) or {}
        if 'id' not in payload or 'query' not in payload:
            return jsonify({'error': 'id and query are required'}), 400
        try:
            ids = index.retrieve(payload['query'], int(payload.get('k', 35)), payload.get('exclude'))
        except QGenError as e:
            return jsonify({'id': payload['id'], 'error': str(e)}), 400
        return jsonify({'id': payload['id'], 'product_ids': ids})

    return app


class _InProcessResponse:
    def __init__(self, response):
        self.status_code = response.status_code
        self.text = response.get_data(as_text=True)
        self._json = response.get_json(silent=True)

    def json(self):
        if self._json is None:
            raise ValueError("Response body is not JSON")
        return self._json


class InProcessSession:
    """requests.Session stand-in that routes POSTs to a Flask test client"""

    def __init__(self, app: Flask):
        self.client = app.test_client()
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        path = urlparse(url).path or '/'
        self.calls.append({'path': path, 'json': json, 'headers': dict(headers or {})})
        return _InProcessResponse(self.client.post(path, json=json, headers=headers))


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    port = int(os.environ.get('PORT', 5001))
    create_app().run(debug=False, host='127.0.0.1', port=port)
