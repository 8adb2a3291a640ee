#!/usr/bin/env python3
"""
Tirages des moyennes de zone, leurs résumés et les métriques d'évaluation.

Les résumés sont des médianes a posteriori avec intervalles à 90% à queues
égales (interpolation linéaire entre statistiques d'ordre). Une vraie valeur
exactement sur une borne compte comme couverte.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from popgen import AreaFrame, AreaTruths
from sae_errors import DataError, InsufficientDrawsError, MetricsError, ParameterLayoutError

logger = logging.getLogger(__name__)

METHODS = ('hajek', 'greg', 'unwt', 'wt', 'wtrscl')
METHOD_LABELS = {'hajek': 'Hájek', 'greg': 'GREG', 'unwt': 'Unwt', 'wt': 'Wt', 'wtrscl': 'WtRscl'}
ESTIMATE_COLUMNS = ['area', 'method', 'point', 'lo90', 'hi90', 'missing']
METRICS_COLUMNS = ['design', 'method', 'rmse_x100', 'mae_x100', 'mil_x100', 'cov90_pct', 'reps',
                   'excluded']


@dataclass
class AreaEstimateTable:
    """Une ligne par (zone, méthode); lo90 <= hi90 dès que les deux sont présents"""
    frame: pd.DataFrame

    def __post_init__(self):
        missing = [c for c in ESTIMATE_COLUMNS if c not in self.frame.columns]
        if missing:
            raise DataError(f"estimate table is missing column '{missing[0]}'")
        self.frame = self.frame[ESTIMATE_COLUMNS].reset_index(drop=True)
        if self.frame.duplicated(['area', 'method']).any():
            raise DataError("estimate table has duplicated (area, method) rows")
        lo, hi = self.frame['lo90'].to_numpy(float), self.frame['hi90'].to_numpy(float)
        both = np.isfinite(lo) & np.isfinite(hi)
        if np.any(lo[both] > hi[both]):
            raise DataError("interval with lo90 > hi90")

    @classmethod
    def from_rows(cls, rows: Iterable[dict]) -> 'AreaEstimateTable':
        return cls(pd.DataFrame(list(rows), columns=ESTIMATE_COLUMNS))

    @classmethod
    def concat(cls, tables: Sequence['AreaEstimateTable']) -> 'AreaEstimateTable':
        return cls(pd.concat([t.frame for t in tables], ignore_index=True))

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(self.frame['method']))

    def for_method(self, method: str) -> pd.DataFrame:
        return self.frame[self.frame['method'] == method].sort_values('area').reset_index(drop=True)

    def relabel(self, labels: Sequence) -> 'AreaEstimateTable':
        """Remplace les codes de zone 1..m par les libellés d'origine"""
        frame = self.frame.copy()
        frame['area'] = np.asarray(labels)[frame['area'].to_numpy(int) - 1]
        return AreaEstimateTable(frame)

    def to_csv(self, path: str) -> None:
        self.frame.to_csv(path, index=False)


@dataclass
class MetricsRow:
    design: str
    method: str
    rmse: float
    mae: float
    mil90: float
    cov90: float
    reps: int
    excluded: int = 0

    def to_record(self) -> dict:
        return {'design': self.design, 'method': self.method,
                'rmse_x100': 100.0 * self.rmse, 'mae_x100': 100.0 * self.mae,
                'mil_x100': 100.0 * self.mil90, 'cov90_pct': 100.0 * self.cov90,
                'reps': self.reps, 'excluded': self.excluded}


def _fixed_blocks(draws):
    spec = draws.spec
    if spec.hierarchical:
        raise ParameterLayoutError("area means need draws in the fixed-intercepts parameterization")
    layout = spec.layout
    return draws.draws[:, layout.intercept], draws.draws[:, layout.beta]


def mu_draws_gaussian(draws, xbar: np.ndarray) -> np.ndarray:
    """mu_i = beta0_i + xbar_i' beta par tirage, forme (K, m)"""
    intercepts, beta = _fixed_blocks(draws)
    xbar = np.asarray(xbar, dtype=float)
    if xbar.shape != (intercepts.shape[1], beta.shape[1]) or not np.all(np.isfinite(xbar)):
        raise DataError("area covariate means are missing or misshaped",
                        expected=[intercepts.shape[1], beta.shape[1]])
    return intercepts + beta @ xbar.T


def mu_draws_logistic(draws, frame: AreaFrame, chunk: int = 200) -> np.ndarray:
    """mu_i = moyenne sur la zone de expit(beta0_i + x_ij' beta) dans la base d'unités, forme (K, m)"""
    intercepts, beta = _fixed_blocks(draws)
    if frame is None or not frame.has_units:
        raise DataError("logistic area means need a unit-level population frame")
    if frame.m != intercepts.shape[1]:
        raise DataError("frame and draws disagree on the number of areas")
    K, m = intercepts.shape
    mu = np.empty((K, m))
    for a in range(m):
        X = frame.unit_x[frame.unit_area == a + 1]
        if X.shape[0] == 0:
            raise DataError(f"area {a + 1} has no units in the frame")
        for start in range(0, K, chunk):
            stop = min(start + chunk, K)
            eta = intercepts[start:stop, a][:, None] + beta[start:stop] @ X.T
            mu[start:stop, a] = expit(eta).mean(axis=1)
    return mu


def mu_draws(draws, frame: AreaFrame) -> np.ndarray:
    if draws.spec.gaussian:
        return mu_draws_gaussian(draws, frame.xbar[:, [frame.covariates.index(c)
                                                       for c in draws.spec.covariate_columns]])
    return mu_draws_logistic(draws, frame)


def summarize_draws(mu: np.ndarray, method: str, missing_areas: Iterable[int] = ()) -> AreaEstimateTable:
    """Médiane et quantiles 5%/95% par zone; `missing_areas` (codes base 1) sont déclarées manquantes"""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    if mu.shape[0] < 2:
        raise InsufficientDrawsError("summaries need at least two draws", K=int(mu.shape[0]))
    lo, point, hi = np.quantile(mu, [0.05, 0.5, 0.95], axis=0, method='linear')
    missing = set(int(a) for a in missing_areas)
    rows = []
    for a in range(1, mu.shape[1] + 1):
        if a in missing:
            rows.append({'area': a, 'method': method, 'point': np.nan, 'lo90': np.nan,
                         'hi90': np.nan, 'missing': True})
        else:
            rows.append({'area': a, 'method': method, 'point': point[a - 1], 'lo90': lo[a - 1],
                         'hi90': hi[a - 1], 'missing': False})
    return AreaEstimateTable.from_rows(rows)


def replication_metrics(estimates: pd.DataFrame, truths: AreaTruths) -> Dict[str, float]:
    """
    Métriques d'une réplication sur les zones non manquantes (point et
    intervalle présents). Le nombre de zones exclues est inclus.
    """
    truth = truths.as_series()
    merged = estimates.merge(truth.rename('truth'), left_on='area', right_index=True, how='inner')
    if len(merged) != len(estimates):
        raise MetricsError("estimate areas do not match the truths")
    point = merged['point'].to_numpy(float)
    lo = merged['lo90'].to_numpy(float)
    hi = merged['hi90'].to_numpy(float)
    ybar = merged['truth'].to_numpy(float)

    present = ~merged['missing'].to_numpy(bool)
    has_point = np.isfinite(point) & present
    has_interval = has_point & np.isfinite(lo) & np.isfinite(hi)
    result = {'rmse': np.nan, 'mae': np.nan, 'cov90': np.nan, 'mil90': np.nan,
              'excluded': int(len(merged) - has_interval.sum())}
    if has_point.any():
        err = ybar[has_point] - point[has_point]
        result['rmse'] = float(np.sqrt(np.mean(err ** 2)))
        result['mae'] = float(np.mean(np.abs(err)))
        if result['mae'] > result['rmse'] * (1 + 1e-12) + 1e-15:
            raise MetricsError("MAE exceeds RMSE", mae=result['mae'], rmse=result['rmse'])
    if has_interval.any():
        inside = (lo[has_interval] <= ybar[has_interval]) & (ybar[has_interval] <= hi[has_interval])
        result['cov90'] = float(np.mean(inside))
        result['mil90'] = float(np.mean(hi[has_interval] - lo[has_interval]))
    return result


def aggregate_metrics(per_rep: Sequence[Dict[str, float]], design: str, method: str) -> MetricsRow:
    """Moyenne des métriques par réplication, en ignorant celles où une métrique est indéfinie"""
    if not per_rep:
        raise MetricsError(f"no replications to aggregate for {method}")
    frame = pd.DataFrame(list(per_rep))
    if frame['rmse'].isna().all():
        raise MetricsError(f"no usable areas for {method}", method=method)
    return MetricsRow(design=design, method=method,
                      rmse=float(frame['rmse'].mean()), mae=float(frame['mae'].mean()),
                      mil90=float(frame['mil90'].mean()), cov90=float(frame['cov90'].mean()),
                      reps=int(len(frame)), excluded=int(frame['excluded'].sum()))


def compute_metrics(tables: Sequence[AreaEstimateTable], truths: Sequence[AreaTruths],
                    design: str = '', methods: Optional[Sequence[str]] = None) -> List[MetricsRow]:
    """Un MetricsRow par méthode, moyenne des métriques par réplication"""
    if len(tables) != len(truths):
        raise MetricsError("need one truth per replication table")
    if methods is None:
        methods = [m for m in METHODS if any(m in t.methods for t in tables)]
    rows = []
    for method in methods:
        per_rep = [replication_metrics(t.for_method(method), truth)
                   for t, truth in zip(tables, truths) if method in t.methods]
        rows.append(aggregate_metrics(per_rep, design, method))
    return rows


def metrics_frame(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_record() for r in rows], columns=METRICS_COLUMNS)


def format_metrics_table(rows: Sequence[MetricsRow]) -> str:
    """Design / Method / RMSE x100 / MAE x100 / MIL x100 / 90% Int. Cov."""
    frame = pd.DataFrame([{
        'Design': r.design,
        'Method': METHOD_LABELS.get(r.method, r.method),
        'RMSE x100': round(100.0 * r.rmse, 1),
        'MAE x100': round(100.0 * r.mae, 1),
        'MIL x100': round(100.0 * r.mil90, 1) if np.isfinite(r.mil90) else np.nan,
        '90% Int. Cov.': f"{100.0 * r.cov90:.0f}%" if np.isfinite(r.cov90) else 'NA',
    } for r in rows])
    return frame.to_string(index=False, na_rep='NA')
