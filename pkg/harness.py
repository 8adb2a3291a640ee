#!/usr/bin/env python3
"""
Étude Monte Carlo et mode estimation.

La base auxiliaire est générée une fois par run. Chaque réplication retire les
réponses (ou réutilise le premier tirage si fixed_responses), calcule les
vraies moyennes de zone, tire un échantillon et lance chaque méthode demandée.
Chaque flux aléatoire est indexé par (seed, purpose, replication): les
résultats ne dépendent ni du nombre de workers ni de l'ordre d'exécution.
"""

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from design import DesignConfig, DrawnSample, draw_sample, normalize_weights
from direct import greg_by_area, hajek_by_area
from estimands import (METHODS, AreaEstimateTable, MetricsRow, compute_metrics, format_metrics_table,
                       metrics_frame, mu_draws, summarize_draws)
from inference import InferenceSettings, draw_pseudo_posterior, fit_pseudo_map
from model import ModelSpec
from popgen import (AreaFrame, AreaTruths, FinitePopulation, PopulationConfig, canonical_family,
                    finite_area_means, generate_aux_frame, simulate_responses)
from rescale import DesignEffectMatrices, adjust_pseudo_posterior, to_fixed_parameterization
from sae_errors import DataError, InvalidConfigError, MetricsError, SAEError, SchemaError
from seeds import random_stream

logger = logging.getLogger(__name__)

SUBSTITUTION_COLUMNS = ['replication', 'method', 'area', 'reason', 'intercept']


@dataclass(frozen=True)
class RunConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    methods: Tuple[str, ...] = METHODS
    replications: int = 200
    draws_K: int = 1000
    resample_B: int = 100
    master_seed: int = 20240101
    output_dir: str = 'results'
    workers: int = 1
    fixed_responses: bool = False
    rescale_center: str = 'mean'
    save_estimates: bool = False
    save_matrices: bool = False
    inference: InferenceSettings = field(default_factory=InferenceSettings)

    def __post_init__(self):
        methods = tuple(m.lower() for m in self.methods)
        object.__setattr__(self, 'methods', methods)
        if not methods:
            raise InvalidConfigError("methods must not be empty", key='methods')
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise InvalidConfigError(f"Unknown method {unknown[0]!r}", key='methods')
        if self.replications < 1:
            raise InvalidConfigError("replications must be >= 1", key='replications')
        if self.draws_K < 2:
            raise InvalidConfigError("draws_K must be >= 2", key='draws_K')
        if self.resample_B < 2:
            raise InvalidConfigError("resample_B must be >= 2", key='resample_B')
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1", key='workers')
        if self.rescale_center not in ('mean', 'mle'):
            raise InvalidConfigError("rescale_center must be 'mean' or 'mle'", key='rescale_center')

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(n_areas=self.population.m, family=self.population.family)


SECTIONS = {'population': PopulationConfig, 'design': DesignConfig, 'inference': InferenceSettings}
TUPLE_KEYS = {'coefficients', 'methods', 'fixed_hyper'}


def _section(name: str, cls, values: Dict[str, Any]):
    if not isinstance(values, dict):
        raise InvalidConfigError(f"section {name!r} must be an object", key=name)
    allowed = {f.name for f in fields(cls)}
    for key in values:
        if key not in allowed:
            raise InvalidConfigError(f"Unknown key {name}.{key}", key=f'{name}.{key}')
    return {k: tuple(v) if k in TUPLE_KEYS and v is not None else v for k, v in values.items()}


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Lit un fichier JSON (sections population / design / inference / run), puis
    applique les surcharges CLI (reps, seed, design, family, midzuno, out, workers).
    """
    raw: Dict[str, Any] = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidConfigError(f"Invalid JSON in {path}: {e}", key=path)
        except OSError as e:
            raise InvalidConfigError(f"Cannot read config {path}: {e}", key=path)
    for key in raw:
        if key not in SECTIONS and key != 'run':
            raise InvalidConfigError(f"Unknown section {key!r}", key=key)

    parts = {name: _section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    run_allowed = {f.name for f in fields(RunConfig)} - set(SECTIONS)
    run = raw.get('run', {})
    for key in run:
        if key not in run_allowed:
            raise InvalidConfigError(f"Unknown key run.{key}", key=f'run.{key}')
    run = {k: tuple(v) if k in TUPLE_KEYS else v for k, v in run.items()}

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if 'reps' in overrides:
        run['replications'] = int(overrides['reps'])
    if 'seed' in overrides:
        seed = int(overrides['seed'])
        run['master_seed'] = seed
        parts['population']['seed'] = seed
        parts['design']['seed'] = seed
    if 'design' in overrides:
        parts['design']['design'] = overrides['design']
    if 'family' in overrides:
        parts['population']['family'] = overrides['family']
    if 'midzuno' in overrides:
        parts['design']['midzuno'] = overrides['midzuno']
    if 'out' in overrides:
        run['output_dir'] = overrides['out']
    if 'workers' in overrides:
        run['workers'] = int(overrides['workers'])

    try:
        return RunConfig(population=PopulationConfig(**parts['population']),
                         design=DesignConfig(**parts['design']),
                         inference=InferenceSettings(**parts['inference']),
                         **run)
    except TypeError as e:
        raise InvalidConfigError(f"Invalid configuration: {e}")


@dataclass
class ReplicationResult:
    replication: int
    table: Optional[AreaEstimateTable] = None
    truths: Optional[AreaTruths] = None
    failures: List[Dict[str, Any]] = field(default_factory=list)
    matrices: Optional[DesignEffectMatrices] = None
    substitutions: List[Dict[str, Any]] = field(default_factory=list)


def _failure(replication: Optional[int], method: str, error: Exception) -> Dict[str, Any]:
    record = error.to_record() if isinstance(error, SAEError) else {
        'error': type(error).__name__, 'message': str(error)}
    record.update({'replication': replication, 'method': method})
    return record


def estimate_area_means(sample: DrawnSample, area_frame: AreaFrame, spec: ModelSpec,
                        methods: Sequence[str] = METHODS, seed: int = 0, replication: int = 0,
                        K: int = 1000, B: int = 100, center: str = 'mean',
                        settings: Optional[InferenceSettings] = None, strict: bool = True
                        ) -> Tuple[AreaEstimateTable, List[Dict[str, Any]], Optional[DesignEffectMatrices],
                                   List[Dict[str, Any]]]:
    """
    Lance les méthodes demandées sur un échantillon.

    Unwt et Wt partagent le même flux de tirages: des poids identiques donnent
    des tirages identiques. Avec strict=False, une méthode en échec est
    journalisée et enregistrée au lieu de lever. Le dernier élément liste les
    intercepts du fit de rescaling remplacés par le mode hiérarchique (zones
    séparées ou non échantillonnées).
    """
    settings = settings or InferenceSettings()
    m = area_frame.m
    sampled = set(int(a) for a in sample.areas_sampled())
    unsampled = [a for a in range(1, m + 1) if a not in sampled]
    tables: List[AreaEstimateTable] = []
    failures: List[Dict[str, Any]] = []
    substitutions: List[Dict[str, Any]] = []
    matrices = None
    weighted_draws = None

    def model_based(weights):
        fit = fit_pseudo_map(sample, spec, weights=weights, settings=settings)
        return draw_pseudo_posterior(sample, spec, K, random_stream(seed, 'draws', replication),
                                     weights=weights, fit=fit, settings=settings)

    for method in methods:
        try:
            if method == 'hajek':
                table = AreaEstimateTable.from_rows(e.to_row() for e in hajek_by_area(sample, n_areas=m))
            elif method == 'greg':
                table = AreaEstimateTable.from_rows(e.to_row() for e in greg_by_area(sample, area_frame))
            elif method == 'unwt':
                draws = to_fixed_parameterization(model_based('ones'))
                table = summarize_draws(mu_draws(draws, area_frame), 'unwt')
            else:
                if weighted_draws is None:
                    weighted_draws = model_based(None)
                if method == 'wt':
                    table = summarize_draws(mu_draws(to_fixed_parameterization(weighted_draws), area_frame), 'wt')
                else:
                    rescaled, matrices, fixed_fit = adjust_pseudo_posterior(
                        sample, spec, weighted_draws, B=B,
                        rng=random_stream(seed, 'resample', replication), center=center, settings=settings)
                    intercepts = fixed_fit.mode[fixed_fit.spec.layout.intercept]
                    substitutions.extend(
                        {'replication': replication, 'method': method, 'area': index + 1,
                         'reason': reason, 'intercept': float(intercepts[index])}
                        for index, reason in sorted(fixed_fit.flagged.items()))
                    table = summarize_draws(mu_draws(rescaled, area_frame), 'wtrscl', missing_areas=unsampled)
            tables.append(table)
        except Exception as e:
            if strict:
                raise
            logger.exception(f"❌ Réplication {replication}: méthode {method} en échec: {e}")
            failures.append(_failure(replication, method, e))
    if not tables:
        return AreaEstimateTable.from_rows([]), failures, matrices, substitutions
    return AreaEstimateTable.concat(tables), failures, matrices, substitutions


def run_replication(cfg: RunConfig, frame: FinitePopulation, area_frame: AreaFrame,
                    replication: int) -> ReplicationResult:
    """Une réplication: réponses, vraies valeurs, échantillon, toutes les méthodes"""
    result = ReplicationResult(replication=replication)
    try:
        response_rep = 0 if cfg.fixed_responses else replication
        pop = simulate_responses(frame, cfg.population,
                                 random_stream(cfg.population.seed, 'responses', response_rep))
        result.truths = finite_area_means(pop)
        sample = draw_sample(pop, cfg.design, random_stream(cfg.design.seed, 'sample', replication))
    except Exception as e:
        logger.exception(f"❌ Réplication {replication} en échec: {e}")
        result.failures.append(_failure(replication, '*', e))
        return result
    result.table, result.failures, result.matrices, result.substitutions = estimate_area_means(
        sample, area_frame, cfg.model_spec, cfg.methods, seed=cfg.master_seed,
        replication=replication, K=cfg.draws_K, B=cfg.resample_B, center=cfg.rescale_center,
        settings=cfg.inference, strict=False)
    return result


_WORKER: Dict[str, Any] = {}


def _init_worker(cfg: RunConfig, frame: FinitePopulation, area_frame: AreaFrame) -> None:
    _WORKER.update(cfg=cfg, frame=frame, area_frame=area_frame)


def _run_in_worker(replication: int) -> ReplicationResult:
    return run_replication(_WORKER['cfg'], _WORKER['frame'], _WORKER['area_frame'], replication)


class SimulationRunner:
    """Lance les réplications et écrit métriques, échecs et résumé du run"""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.failures: List[Dict[str, Any]] = []
        self.substitutions: List[Dict[str, Any]] = []
        self.stats = {
            'total': cfg.replications,
            'completed': 0,
            'failed_replications': 0,
            'failed_methods': 0,
            'failed_metrics': 0,
            'substituted_intercepts': 0,
            'start_time': datetime.now(),
        }

    def _replications(self, frame: FinitePopulation, area_frame: AreaFrame) -> List[ReplicationResult]:
        reps = range(self.cfg.replications)
        results: List[ReplicationResult] = []
        if self.cfg.workers == 1:
            for r in tqdm(reps, desc='Réplications', unit='rep'):
                results.append(run_replication(self.cfg, frame, area_frame, r))
        else:
            with ProcessPoolExecutor(max_workers=self.cfg.workers, initializer=_init_worker,
                                     initargs=(self.cfg, frame, area_frame)) as pool:
                futures = [pool.submit(_run_in_worker, r) for r in reps]
                for future in tqdm(as_completed(futures), total=len(futures), desc='Réplications', unit='rep'):
                    results.append(future.result())
        return sorted(results, key=lambda r: r.replication)

    def run(self) -> List:
        cfg = self.cfg
        logger.info("\n" + "=" * 60)
        logger.info(f"🚀 SIMULATION {cfg.population.family} / {cfg.design.design} / n(i)={cfg.design.n_per_area}")
        logger.info("=" * 60)
        logger.info(f"📊 {cfg.replications} réplications, méthodes: {', '.join(cfg.methods)}")
        if cfg.design.design != 'SRS':
            logger.info(f"🎯 Variante de Midzuno: {cfg.design.midzuno}")

        frame = generate_aux_frame(cfg.population, random_stream(cfg.population.seed, 'aux'))
        area_frame = AreaFrame.from_population(frame, cfg.model_spec.covariate_columns)
        logger.info(f"✅ Frame auxiliaire généré: N={frame.N}, m={frame.m}")

        results = self._replications(frame, area_frame)
        tables, truths = [], []
        for result in results:
            self.failures.extend(result.failures)
            self.substitutions.extend(result.substitutions)
            self.stats['substituted_intercepts'] += len(result.substitutions)
            if result.table is None or result.truths is None:
                self.stats['failed_replications'] += 1
                continue
            self.stats['completed'] += 1
            self.stats['failed_methods'] += len(result.failures)
            tables.append(result.table)
            truths.append(result.truths)

        rows = self.aggregate(tables, truths)
        self.write_outputs(rows, results)
        logger.info("\n" + format_metrics_table(rows))
        self.print_stats()
        return rows

    def aggregate(self, tables: List[AreaEstimateTable], truths: List[AreaTruths]) -> List[MetricsRow]:
        """Une ligne de métriques par méthode; une méthode sans zone exploitable est enregistrée en échec"""
        rows: List[MetricsRow] = []
        for method in self.cfg.methods:
            if not any(method in t.methods for t in tables):
                continue
            try:
                rows.extend(compute_metrics(tables, truths, design=self.cfg.design.design, methods=[method]))
            except MetricsError as e:
                logger.error(f"❌ Métriques impossibles pour {method}: {e}")
                self.failures.append(_failure(None, method, e))
                self.stats['failed_metrics'] += 1
        return rows

    def write_outputs(self, rows, results: List[ReplicationResult]) -> None:
        out = self.cfg.output_dir
        os.makedirs(out, exist_ok=True)
        metrics_path = os.path.join(out, 'metrics.csv')
        metrics_frame(rows).to_csv(metrics_path, index=False)
        logger.info(f"💾 Métriques sauvegardées: {metrics_path}")

        with open(os.path.join(out, 'failures.json'), 'w', encoding='utf-8') as f:
            json.dump(self.failures, f, indent=2, default=str)

        substitutions_path = os.path.join(out, 'substitutions.csv')
        pd.DataFrame(self.substitutions, columns=SUBSTITUTION_COLUMNS).to_csv(substitutions_path, index=False)
        if self.substitutions:
            logger.warning(f"⚠️ {len(self.substitutions)} intercepts remplacés par le mode hiérarchique: {substitutions_path}")

        if self.cfg.save_estimates:
            est_dir = os.path.join(out, 'estimates')
            os.makedirs(est_dir, exist_ok=True)
            for result in results:
                if result.table is not None:
                    result.table.to_csv(os.path.join(est_dir, f'rep_{result.replication:04d}.csv'))
        if self.cfg.save_matrices:
            mat_dir = os.path.join(out, 'matrices')
            for result in results:
                if result.matrices is not None:
                    result.matrices.to_csv(mat_dir, prefix=f'rep_{result.replication:04d}')

        duration = (datetime.now() - self.stats['start_time']).total_seconds()
        summary = {
            'config': asdict(self.cfg),
            'replications': self.cfg.replications,
            'completed': self.stats['completed'],
            'failed_replications': self.stats['failed_replications'],
            'failed_methods': self.stats['failed_methods'],
            'failed_metrics': self.stats['failed_metrics'],
            'substituted_intercepts': self.stats['substituted_intercepts'],
            'duration_s': round(duration, 1),
            'metrics': [r.to_record() for r in rows],
        }
        with open(os.path.join(out, 'summary.json'), 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, default=str)

    def print_stats(self) -> None:
        duration = (datetime.now() - self.stats['start_time']).total_seconds()
        logger.info("\n" + "=" * 60)
        logger.info("📊 STATISTIQUES")
        logger.info("=" * 60)
        logger.info(f"Réplications: {self.stats['total']}")
        logger.info(f"Terminées: {self.stats['completed']} ({self.stats['completed'] * 100 / max(self.stats['total'], 1):.1f}%)")
        logger.info(f"Réplications en échec: {self.stats['failed_replications']}")
        logger.info(f"Méthodes en échec: {self.stats['failed_methods']}")
        logger.info(f"Métriques en échec: {self.stats['failed_metrics']}")
        logger.info(f"Intercepts remplacés: {self.stats['substituted_intercepts']}")
        logger.info(f"Durée totale: {duration:.1f}s ({duration / 60:.1f} min)")
        logger.info(f"Vitesse moyenne: {self.stats['completed'] / max(duration, 1):.2f} rép/s")
        logger.info("=" * 60)


def run_simulation(cfg: RunConfig) -> List:
    return SimulationRunner(cfg).run()


def _read_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision='round_trip')
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read {path}: {e}", path=path)


def load_external_sample(table: pd.DataFrame, area_frame: AreaFrame,
                         covariates: Sequence[str] = ('x1',)) -> DrawnSample:
    """
    Valide les enregistrements d'unités (area, psu_id, stratum_id, weight, y,
    covariables), recode les zones en codes 1..m de la base et normalise les
    poids. Une colonne `w_raw` est acceptée en l'absence de `weight`.
    """
    table = table.copy()
    if 'weight' not in table.columns and 'w_raw' in table.columns:
        table['weight'] = table['w_raw']
    for column in ['area', 'psu_id', 'stratum_id', 'weight', 'y'] + list(covariates):
        if column not in table.columns:
            raise SchemaError(f"data is missing column '{column}'", column=column)
    weight = table['weight'].to_numpy(dtype=float)
    if not np.all(np.isfinite(weight)) or np.any(weight <= 0):
        raise DataError("weights must be positive", column='weight')

    labels = np.asarray(area_frame.labels)
    codes = np.searchsorted(labels, table['area'].to_numpy())
    codes = np.clip(codes, 0, labels.size - 1)
    unknown = labels[codes] != table['area'].to_numpy()
    if np.any(unknown):
        raise DataError(f"area {table['area'].to_numpy()[unknown][0]!r} is not in the frame", column='area')

    n = len(table)
    records = pd.DataFrame({
        'unit_id': table['unit_id'].to_numpy() if 'unit_id' in table.columns else np.arange(1, n + 1),
        'area': codes + 1,
        'cluster': table['cluster'].to_numpy() if 'cluster' in table.columns else table['psu_id'].to_numpy(),
        'psu_id': table['psu_id'].to_numpy(),
        'stratum_id': table['stratum_id'].to_numpy(),
        'pi': 1.0 / weight,
        'w_raw': weight,
        'w_norm': weight,
        'y': table['y'].to_numpy(dtype=float),
    })
    for column in covariates:
        records[column] = table[column].to_numpy(dtype=float)
    return normalize_weights(DrawnSample.from_frame(records, covariates=covariates))


def run_estimate(data_csv: str, frame_csv: str, family: str = 'gaussian',
                 methods: Sequence[str] = METHODS, seed: int = 0, out_csv: Optional[str] = None,
                 covariates: Sequence[str] = ('x1',), K: int = 1000, B: int = 100,
                 settings: Optional[InferenceSettings] = None) -> AreaEstimateTable:
    """Ajuste les méthodes demandées sur des unités externes; zones restituées sous leurs libellés"""
    family = canonical_family(family)
    area_frame = AreaFrame.from_table(_read_csv(frame_csv), covariates)
    if family != 'gaussian' and not area_frame.has_units:
        raise DataError("the bernoulli-logit family needs a unit-level frame")
    sample = load_external_sample(_read_csv(data_csv), area_frame, covariates)
    spec = ModelSpec(n_areas=area_frame.m, family=family, covariate_columns=tuple(covariates))
    logger.info(f"📊 {sample.n} unités, {len(sample.areas_sampled())}/{area_frame.m} zones échantillonnées")

    start = time.time()
    table, _, _, substitutions = estimate_area_means(sample, area_frame, spec, methods, seed=seed, K=K,
                                                    B=B, settings=settings, strict=True)
    table = table.relabel(area_frame.labels)
    for record in substitutions:
        label = area_frame.labels[record['area'] - 1]
        logger.warning(f"⚠️ Zone {label}: intercept remplacé par le mode hiérarchique ({record['reason']})")
    logger.info(f"✅ Estimation terminée en {time.time() - start:.1f}s")
    if out_csv:
        os.makedirs(os.path.dirname(out_csv) or '.', exist_ok=True)
        table.to_csv(out_csv)
        logger.info(f"💾 Estimations sauvegardées: {out_csv}")
    return table
