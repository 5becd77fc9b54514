"""
Stage runner: each stage reads its upstream artifacts from the output
directory, writes its own, and records a manifest of content hashes.
"""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from bm25_retriever import HardNegativeSet, build_index, mine_hard_negatives, save_index
from corpus_health_monitor import validate_corpus
from corpus_processor import ingest_table, read_corpus, write_corpus
from jsonl_utils import file_sha256, read_json, read_jsonl, write_json, write_jsonl
from models import (
    BackendError, Corpus, PreconditionError, SyntheticDataset, UpstreamMissingError,
)
from pipeline_config import PipelineConfig, derive_seed, source_format, source_schema
from qgen_service import create_generator, create_retriever_client, create_scorer
from qgen_templates import build_qgen_training_pairs, sample_exemplars
from relevance_metrics import (
    duplicate_stats, evaluate_scorer, format_eval_table, judgment_label_distribution, label_distribution,
    mismatch_table,
)
from synthetic_pipeline import (
    DedupReport, build_classification_examples, build_generation_requests, build_ranking_pairs, dedup_filter,
    plan_generation, read_synthetic, roundtrip_relabel, run_generation, split_train_val, write_synthetic,
)

logger = logging.getLogger(__name__)

LOCK_NAME = '.qgen.lock'
CORPUS_DIR = 'corpus'
EXEMPLAR_DIR = 'exemplars'


@dataclass
class StageResult:
    stage: str
    outputs: List[str] = field(default_factory=list)
    counts: Dict[str, Any] = field(default_factory=dict)


@contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock file for one writer per output directory"""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = out_dir / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PreconditionError(f"{out_dir} is locked by another run (remove {lock_path} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode('ascii'))
        os.close(fd)
        yield lock_path
    finally:
        try:
            os.remove(lock_path)
        except FileNotFoundError:
            pass


class StageRunner:
    """Runs pipeline stages against one output directory"""

    def __init__(self, cfg: PipelineConfig, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.out_dir)
        self.space = cfg.space()
        self.eval_space = cfg.eval_space()
        self.stages: Dict[str, Callable[[], Tuple[StageResult, Dict[str, str]]]] = {
            'ingest': self.run_ingest,
            'gen': self.run_gen,
            'filter': self.run_filter,
            'relabel': self.run_relabel,
            'split': self.run_split,
            'mine-negatives': self.run_mine_negatives,
            'eval': self.run_eval,
            'report': self.run_report,
        }

    # artifact helpers

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise UpstreamMissingError(str(path))
        return path

    def seed(self, stage: str) -> int:
        return derive_seed(self.cfg.seed, stage)

    def _hash_inputs(self, names: List[str]) -> Dict[str, str]:
        hashes = {}
        for name in names:
            path = self.path(name)
            if path.is_dir():
                for child in sorted(path.iterdir()):
                    if child.is_file():
                        hashes[f"{name}/{child.name}"] = file_sha256(child)
            else:
                hashes[name] = file_sha256(path)
        return hashes

    def _corpus(self) -> Corpus:
        self.require(f"{CORPUS_DIR}/products.jsonl")
        return read_corpus(self.path(CORPUS_DIR), self.eval_space)

    def _synthetic_source(self, stage: str) -> str:
        """Latest upstream synthetic dataset for a stage, following the configured stage list"""
        stages = self.cfg.effective_stages()
        order = [('split', 'train.jsonl'), ('relabel', 'relabeled.jsonl'), ('filter', 'filtered.jsonl')]
        position = {name: i for i, name in enumerate(('gen', 'filter', 'relabel', 'split', 'mine-negatives'))}
        for upstream, artifact in order:
            if upstream in stages and position[upstream] < position[stage]:
                return artifact
        return 'generated.jsonl'

    def _read_dataset(self, name: str) -> SyntheticDataset:
        return read_synthetic(self.require(name), self.space, {'config_hash': self.cfg.hash()})

    # stages

    def run_ingest(self):
        if not self.cfg.corpus:
            raise PreconditionError("No corpus sources configured for the ingest stage")
        space = self.eval_space
        merged_products, judgments = {}, []
        counts = {'rows_read': 0, 'rows_accepted': 0, 'rows_skipped': 0}
        for source in self.cfg.corpus:
            corpus = ingest_table(source['path'], source_format(source), source_schema(source), space.name,
                                  dataset_tag=source.get('dataset', ''), space=space)
            for product in corpus.products:
                merged_products.setdefault(product.product_id, product)
            judgments.extend(corpus.judgments)
            for key in counts:
                counts[key] += getattr(corpus.report, key)
        corpus = Corpus(tuple(merged_products.values()), tuple(judgments), space.name).canonical()
        written = write_corpus(corpus, self.path(CORPUS_DIR))
        validation = validate_corpus(corpus, space)
        write_json(self.path(f"{CORPUS_DIR}/validation.json"), validation.to_dict())
        counts.update(written)
        outputs = [CORPUS_DIR]

        if self.cfg.exemplar_corpus:
            products, labeled = {}, []
            for source in self.cfg.exemplar_corpus:
                part = ingest_table(source['path'], source_format(source), source_schema(source), self.space.name,
                                    dataset_tag=source.get('dataset', ''), space=self.space)
                for product in part.products:
                    products.setdefault(product.product_id, product)
                labeled.extend(part.judgments)
            exemplar_corpus = Corpus(tuple(products.values()), tuple(labeled), self.space.name).canonical()
            counts['exemplar_judgments'] = write_corpus(exemplar_corpus, self.path(EXEMPLAR_DIR))['judgments']
            outputs.append(EXEMPLAR_DIR)

        if not validation.is_clean():
            logger.warning(f"⚠️ Corpus has {len(validation.issues())} integrity issues, see corpus/validation.json")
        sources = {f"corpus[{i}]": file_sha256(s['path']) for i, s in enumerate(self.cfg.corpus)}
        sources.update({f"exemplar_corpus[{i}]": file_sha256(s['path'])
                        for i, s in enumerate(self.cfg.exemplar_corpus)})
        return StageResult('ingest', outputs, counts), sources

    def run_gen(self):
        corpus = self._corpus()
        names = [CORPUS_DIR]
        cfg, template = self.cfg, self.cfg.template_config()
        tasks = plan_generation(corpus, self.space, cfg.mode, cfg.queries_per_cell)
        counts: Dict[str, Any] = {'tasks': len(tasks)}
        outputs = ['generated.jsonl', 'gen_failures.jsonl']

        # labeled exemplar corpus, else the target corpus's own judgments
        labeled = None
        if self.path(f"{EXEMPLAR_DIR}/products.jsonl").exists():
            labeled = read_corpus(self.path(EXEMPLAR_DIR), self.space)
            names.append(EXEMPLAR_DIR)
        inputs = self._hash_inputs(names)

        exemplars = None
        if cfg.prompting:
            exemplars = sample_exemplars(labeled or corpus, self.space, cfg.mode, self.seed('exemplars'))
            counts['exemplars'] = len(exemplars)
        elif labeled is not None:
            pairs = build_qgen_training_pairs(labeled, self.space, cfg.mode, template)
            counts['qgen_train'] = write_jsonl(self.path('qgen_train.jsonl'), pairs)
            outputs.append('qgen_train.jsonl')

        backend = create_generator(cfg.backend, self.space, seed=self.seed('gen'), url=cfg.generator_url)
        requests = build_generation_requests(corpus, tasks, self.space, cfg.mode, template,
                                             exemplars=exemplars, max_output_chars=cfg.max_output_chars)
        ds, failures = run_generation(backend, tasks, requests, self.space, max_in_flight=cfg.max_in_flight,
                                      provenance={'config_hash': cfg.hash()})
        if tasks and not ds.records:
            raise BackendError(f"All {len(tasks)} generation requests failed, e.g. {failures[0].message}")
        counts['generated'] = write_synthetic(ds, self.path('generated.jsonl'))
        counts['failures'] = write_jsonl(self.path('gen_failures.jsonl'), (f.to_dict() for f in failures))
        return StageResult('gen', outputs, counts), inputs

    def run_filter(self):
        source = self._synthetic_source('filter')
        ds = self._read_dataset(source)
        inputs = self._hash_inputs([source])
        filtered, report = dedup_filter(ds)
        write_synthetic(filtered, self.path('filtered.jsonl'))
        write_json(self.path('dedup_report.json'), report.to_dict())
        counts = {'input': report.input_count, 'output': report.output_count, 'removed': report.removed}
        return StageResult('filter', ['filtered.jsonl', 'dedup_report.json'], counts), inputs

    def run_relabel(self):
        source = self._synthetic_source('relabel')
        ds = self._read_dataset(source)
        corpus = self._corpus()
        inputs = self._hash_inputs([source, CORPUS_DIR])
        scorer = create_scorer(self.cfg.scorer, self.space, seed=self.seed('relabel'), url=self.cfg.scorer_url)
        relabeled, report = roundtrip_relabel(ds, scorer, corpus, self.cfg.consistency)
        if ds.records and not report.scored:
            raise BackendError(f"Scorer failed on all {len(ds.records)} records")
        write_synthetic(relabeled, self.path('relabeled.jsonl'))
        write_json(self.path('relabel_report.json'), report.to_dict())
        counts = {'scored': report.scored, 'dropped': report.dropped, 'kept': report.kept,
                  'mismatch_rate': report.mismatch_rate}
        return StageResult('relabel', ['relabeled.jsonl', 'relabel_report.json'], counts), inputs

    def run_split(self):
        source = self._synthetic_source('split')
        ds = self._read_dataset(source)
        corpus = self._corpus()
        inputs = self._hash_inputs([source, CORPUS_DIR])
        train, val = split_train_val(ds, self.cfg.split_ratio, self.seed('split'))
        counts = {
            'train': write_synthetic(train, self.path('train.jsonl')),
            'val': write_synthetic(val, self.path('val.jsonl')),
            'train_products': len(train.product_ids()),
            'val_products': len(val.product_ids()),
        }
        outputs = ['train.jsonl', 'val.jsonl']
        if self.cfg.mode == 'labelcond':
            examples = build_classification_examples(train, corpus)
            counts['classification_train'] = write_jsonl(self.path('classification_train.jsonl'), examples)
            outputs.append('classification_train.jsonl')
        return StageResult('split', outputs, counts), inputs

    def run_mine_negatives(self):
        source = self._synthetic_source('mine-negatives')
        ds = self._read_dataset(source)
        corpus = self._corpus()
        inputs = self._hash_inputs([source, CORPUS_DIR])
        outputs = ['hard_negatives.jsonl', 'ranking_pairs.jsonl']
        if self.cfg.retriever == 'http':
            retriever = create_retriever_client(self.cfg.retriever_url)
        else:
            retriever = build_index(corpus, self.cfg.index_fields, self.cfg.k1, self.cfg.b)
            save_index(retriever, self.path('bm25.qgfidx'))
            outputs.insert(0, 'bm25.qgfidx')
        sets, report = mine_hard_negatives(retriever, ds, self.cfg.k)
        pairs = build_ranking_pairs(sets, self.space, self.seed('mine-negatives'))
        counts = dict(report)
        counts['hard_negative_sets'] = write_jsonl(self.path('hard_negatives.jsonl'), (s.to_dict() for s in sets))
        counts['ranking_pairs'] = write_jsonl(self.path('ranking_pairs.jsonl'), pairs)
        return StageResult('mine-negatives', outputs, counts), inputs

    def model_name(self) -> str:
        return self.cfg.preset or self.cfg.scorer

    def run_eval(self):
        corpus = self._corpus()
        inputs = self._hash_inputs([CORPUS_DIR])
        scorer = create_scorer(self.cfg.scorer, self.space, seed=self.seed('eval'), url=self.cfg.scorer_url)
        result = evaluate_scorer(corpus, scorer, self.cfg.eval_ks, mode=self.cfg.eval_mode, space=self.eval_space)
        if result.failed_queries and not result.evaluated_queries and not result.skipped_queries:
            raise BackendError(f"Scoring failed for all {result.failed_queries} queries")
        payload = result.to_dict()
        payload['model'] = self.model_name()
        write_json(self.path('eval.json'), payload)
        table = format_eval_table([(self.model_name(), result.ndcg)], self.cfg.eval_ks)
        with open(self.path('eval.txt'), 'w', encoding='utf-8', newline='\n') as f:
            f.write(table + '\n')
        counts = {'evaluated_queries': result.evaluated_queries, 'skipped_queries': result.skipped_queries,
                  'failed_queries': result.failed_queries}
        counts.update({f"ndcg@{k}": v for k, v in result.ndcg.items()})
        return StageResult('eval', ['eval.json', 'eval.txt'], counts), inputs

    def run_report(self):
        corpus = self._corpus()
        names = [CORPUS_DIR]
        sections: List[str] = []
        report: Dict[str, Any] = {'config_hash': self.cfg.hash(), 'model': self.model_name()}

        table = judgment_label_distribution(corpus, self.eval_space)
        report['judgment_labels'] = table.to_dict()
        sections.append(table.to_text())

        if self.path('generated.jsonl').exists():
            names.append('generated.jsonl')
            table = label_distribution(self._read_dataset('generated.jsonl'))
            report['generated_labels'] = table.to_dict()
            sections.append(table.to_text())
        if self.path('dedup_report.json').exists():
            names.extend(['filtered.jsonl', 'dedup_report.json'])
            dedup = DedupReport.from_dict(read_json(self.path('dedup_report.json')))
            table = duplicate_stats(dedup, self.space)
            report['duplicates'] = table.to_dict()
            sections.append(table.to_text())
            table = label_distribution(self._read_dataset('filtered.jsonl'))
            table.title = 'Generated query distribution (post filtering)'
            report['filtered_labels'] = table.to_dict()
            sections.append(table.to_text())
        if self.path('relabel_report.json').exists():
            names.append('relabel_report.json')
            relabel = read_json(self.path('relabel_report.json'))
            report['relabel'] = {'mismatch_rate': relabel['mismatch_rate'], 'dropped': relabel['dropped']}
            sections.append(f"Round-trip mismatch rate: {relabel['mismatch_rate']:.4f}\n"
                            f"{mismatch_table(relabel['confusion'], self.space)}")
        if self.path('hard_negatives.jsonl').exists():
            names.append('hard_negatives.jsonl')
            sets = [HardNegativeSet.from_dict(row) for row in read_jsonl(self.path('hard_negatives.jsonl'))]
            report['hard_negatives'] = {'queries': len(sets), 'negatives': sum(len(s.negatives) for s in sets)}
            sections.append(f"Hard negatives: {report['hard_negatives']['negatives']} "
                            f"for {len(sets)} queries")
        if self.path('eval.json').exists():
            names.append('eval.json')
            result = read_json(self.path('eval.json'))
            ndcg = {int(k): v for k, v in result['ndcg'].items()}
            report['ndcg'] = result['ndcg']
            sections.append(format_eval_table([(result['model'], ndcg)], sorted(ndcg)))

        inputs = self._hash_inputs(names)
        write_json(self.path('report.json'), report)
        with open(self.path('report.txt'), 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n\n'.join(sections) + '\n')
        return StageResult('report', ['report.json', 'report.txt'], {'sections': len(sections)}), inputs

    # driver

    def write_manifest(self, result: StageResult, inputs: Dict[str, str]) -> None:
        outputs = self._hash_inputs(result.outputs)
        write_json(self.path(f"manifests/{result.stage}.json"), {
            'stage': result.stage,
            'config_hash': self.cfg.hash(),
            'seed': self.seed(result.stage),
            'inputs': inputs,
            'outputs': outputs,
            'counts': result.counts,
        })

    def run(self, stage: str) -> StageResult:
        if stage not in self.stages:
            raise PreconditionError(f"Unknown stage '{stage}'. Valid: {', '.join(self.stages)}")
        logger.info(f"Running stage '{stage}' in {self.out}")
        result, inputs = self.stages[stage]()
        self.write_manifest(result, inputs)
        logger.info(f"✅ Stage '{stage}' done: {result.counts}")
        return result


def run_stage(cfg: PipelineConfig, stage: str, out_dir=None) -> StageResult:
    """Validate the config, then run one stage under the output-directory lock"""
    cfg.validate(check_files=(stage == 'ingest'))
    runner = StageRunner(cfg, out_dir)
    with output_lock(runner.out):
        return runner.run(stage)


def run_stages(cfg: PipelineConfig, stages: Optional[List[str]] = None, out_dir=None) -> List[StageResult]:
    """Run several stages in pipeline order; defaults to the config's stage list"""
    stages = stages or cfg.effective_stages()
    cfg.validate(check_files='ingest' in stages)
    runner = StageRunner(cfg, out_dir)
    with output_lock(runner.out):
        return [runner.run(stage) for stage in stages]
