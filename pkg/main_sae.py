#!/usr/bin/env python3
"""
Estimation sur petites zones sous échantillonnage informatif - point d'entrée CLI.

    python main_sae.py simulate --config configs/gaussian_pps2_n30.json --reps 200
    python main_sae.py estimate --data sample.csv --frame frame.csv --family gaussian --out estimates.csv

Les erreurs sont rapportées en JSON sur stderr (code 2 pour les erreurs
attendues, 1 sinon).
"""

import argparse
import json
import logging
import sys
import traceback

from estimands import METHODS
from harness import load_run_config, run_estimate, run_simulation
from sae_config import EnvSettings
from sae_errors import InvalidConfigError, SAEError
from sae_logging import setup_logging

logger = logging.getLogger('SAE')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Estimation sur petits domaines sous échantillonnage informatif')
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', help='Étude Monte Carlo')
    simulate.add_argument('--config', help='Fichier JSON (sections population, design, inference, run)')
    simulate.add_argument('--reps', type=int, help='Nombre de réplications')
    simulate.add_argument('--seed', type=int, help='Graine maître')
    simulate.add_argument('--design', choices=['SRS', 'PPS1', 'PPS2'], help='Plan de sondage')
    simulate.add_argument('--family', help='gaussian ou bernoulli-logit')
    simulate.add_argument('--midzuno', choices=['sen', 'pips'],
                          help='Variante de Midzuno pour PPS (sen: premier tirage PPS, pips: pi exactes)')
    simulate.add_argument('--out', help='Répertoire de sortie')
    simulate.add_argument('--workers', type=int, help='Nombre de processus')

    estimate = sub.add_parser('estimate', help='Estimation sur données externes')
    estimate.add_argument('--data', required=True, help='CSV des unités échantillonnées')
    estimate.add_argument('--frame', required=True, help='CSV de la base de sondage (unités ou moyennes par zone)')
    estimate.add_argument('--family', default='gaussian', help='gaussian ou logit')
    estimate.add_argument('--methods', default=','.join(METHODS), help='Liste séparée par des virgules')
    estimate.add_argument('--covariates', default='x1', help='Covariables séparées par des virgules')
    estimate.add_argument('--seed', type=int, default=0)
    estimate.add_argument('--draws', type=int, default=1000, help='Nombre de tirages K')
    estimate.add_argument('--resamples', type=int, default=100, help='Réplicats bootstrap B')
    estimate.add_argument('--out', required=True, help='CSV de sortie')
    return parser


def _split(value: str) -> list:
    return [v.strip() for v in value.split(',') if v.strip()]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        env = EnvSettings.from_env()
        setup_logging(env.log_level, env.log_dir)

        if args.command == 'simulate':
            overrides = {'reps': args.reps, 'seed': args.seed, 'design': args.design,
                         'family': args.family, 'midzuno': args.midzuno, 'out': args.out,
                         'workers': args.workers}
            if args.workers is None and env.workers != 1:
                overrides['workers'] = env.workers
            if args.out is None and not args.config:
                overrides['out'] = env.output_dir
            run_simulation(load_run_config(args.config, overrides))
        else:
            methods = [m.lower() for m in _split(args.methods)]
            unknown = [m for m in methods if m not in METHODS]
            if unknown:
                raise InvalidConfigError(f"Unknown method {unknown[0]!r}", key="methods")
            run_estimate(args.data, args.frame, family=args.family, methods=methods, seed=args.seed,
                         out_csv=args.out, covariates=_split(args.covariates),
                         K=args.draws, B=args.resamples)
    except SAEError as e:
        logger.error(f"❌ {e}")
        print(json.dumps(e.to_record(), default=str), file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"❌ Erreur inattendue: {e}")
        logger.debug(traceback.format_exc())
        print(json.dumps({'error': 'UnexpectedError', 'type': type(e).__name__, 'message': str(e)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
