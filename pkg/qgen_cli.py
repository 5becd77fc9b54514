#!/usr/bin/env python3
"""
Query generation pipeline CLI

    python qgen_cli.py --preset labelcond-finetune --config run.json --stage all --out runs/wands
    python qgen_cli.py --config run.json --stage eval --scorer random --seed 7

Exit codes: 0 success, 2 validation error, 3 missing upstream artifact,
4 backend failure, 1 anything else.
"""

import logging
import sys

import click

from models import (
    BackendError, ConfigValidationError, PreconditionError, SchemaError, UpstreamMissingError,
)
from pipeline_config import PRESETS, STAGES, build_config
from pipeline_runner import run_stages
from qgen_service import GENERATOR_BACKENDS, SCORER_BACKENDS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_UPSTREAM_MISSING = 3
EXIT_BACKEND = 4


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (ConfigValidationError, PreconditionError, SchemaError)):
        return EXIT_VALIDATION
    if isinstance(error, UpstreamMissingError):
        return EXIT_UPSTREAM_MISSING
    if isinstance(error, BackendError):
        return EXIT_BACKEND
    return EXIT_FAILURE


@click.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='Pipeline config JSON file')
@click.option('--stage', type=click.Choice(list(STAGES) + ['all']), default='all', show_default=True,
              help="Stage to run; 'all' runs the configured stage list")
@click.option('--preset', type=click.Choice(list(PRESETS)), help='Model variant preset')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='Output directory')
@click.option('--seed', type=int, help='Global seed')
@click.option('--backend', type=click.Choice(GENERATOR_BACKENDS), help='Generator backend')
@click.option('--scorer', type=click.Choice(SCORER_BACKENDS), help='Scorer backend')
@click.option('--k', type=int, help='Hard negatives per query')
@click.option('--ratio', 'split_ratio', type=float, help='Train split ratio')
@click.option('--max-in-flight', type=int, help='Concurrent generation requests')
@click.option('--verbose', '-v', is_flag=True, help='Debug logging')
def main(config_path, stage, preset, out_dir, seed, backend, scorer, k, split_ratio, max_in_flight, verbose):
    """Run query-generation pipeline stages"""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    overrides = {
        'out_dir': out_dir, 'seed': seed, 'backend': backend, 'scorer': scorer, 'k': k,
        'split_ratio': split_ratio, 'max_in_flight': max_in_flight,
    }
    try:
        cfg = build_config(config_path, preset, overrides)
        stages = None if stage == 'all' else [stage]
        results = run_stages(cfg, stages)
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_FAILURE:
            logger.exception(f"Unexpected error: {e}")
        click.echo(f"❌ {type(e).__name__}: {e}", err=True)
        sys.exit(code)

    for result in results:
        click.echo(f"✅ {result.stage}: {', '.join(result.outputs)}")
    sys.exit(EXIT_OK)


if __name__ == '__main__':
    main()
