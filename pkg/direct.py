#!/usr/bin/env python3
"""
Estimateurs directs (fondés sur le plan) des moyennes de zone: Hájek et GREG.

Les variances utilisent la linéarisation avec remise sur les UPs dans les
strates, avec correction de population finie quand le nombre d'UPs par strate
est connu. Les zones sont traitées comme des domaines: des strates qui
traversent plusieurs zones sont acceptées.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import norm

from popgen import AreaFrame
from sae_errors import DataError

logger = logging.getLogger(__name__)

Z90 = float(norm.ppf(0.95))


@dataclass
class DirectEstimate:
    area: int
    method: str
    point: float
    se: float = np.nan
    lo90: float = np.nan
    hi90: float = np.nan

    @property
    def missing(self) -> bool:
        return not (np.isfinite(self.point) and np.isfinite(self.lo90) and np.isfinite(self.hi90))

    def to_row(self) -> dict:
        return {'area': self.area, 'method': self.method, 'point': self.point,
                'lo90': self.lo90, 'hi90': self.hi90, 'missing': self.missing}


def _with_interval(area: int, method: str, point: float, se: float) -> DirectEstimate:
    if not np.isfinite(se):
        return DirectEstimate(area=area, method=method, point=point)
    return DirectEstimate(area=area, method=method, point=point, se=se,
                          lo90=point - Z90 * se, hi90=point + Z90 * se)


def linearized_variance(z: np.ndarray, strata: np.ndarray, psus: np.ndarray,
                        psu_population: Optional[Dict] = None) -> float:
    """
    sum_h (1 - f_h) n_h / (n_h - 1) sum_c (z_hc - zbar_h)^2 over PSU totals z_hc.

    Les strates où z est nul ne contribuent pas; une strate à une seule UP et
    z non nul rend la variance inestimable (nan).
    """
    total = 0.0
    for stratum in np.unique(strata):
        rows = strata == stratum
        if not np.any(z[rows] != 0):
            continue
        labels, codes = np.unique(psus[rows], return_inverse=True)
        n_h = labels.size
        if n_h < 2:
            return np.nan
        totals = np.bincount(codes, weights=z[rows], minlength=n_h)
        f_h = 0.0
        if psu_population is not None:
            key = stratum.item() if isinstance(stratum, np.generic) else stratum
            N_h = psu_population.get(key)
            if N_h:
                f_h = min(n_h / N_h, 1.0)
        total += (1.0 - f_h) * n_h / (n_h - 1) * float(np.sum((totals - totals.mean()) ** 2))
    return total


def _area_codes(sample, n_areas: Optional[int]) -> int:
    if n_areas is not None:
        return int(n_areas)
    return int(sample.table['area'].max())


def _is_binary(y: np.ndarray) -> bool:
    return bool(np.all((y == 0) | (y == 1)))


def hajek_by_area(sample, n_areas: Optional[int] = None, binary: Optional[bool] = None,
                  fpc: bool = True) -> List[DirectEstimate]:
    """Somme w y / somme w par zone, avec écart-type linéarisé"""
    table = sample.table
    y = table['y'].to_numpy(dtype=float)
    w = table['w_raw'].to_numpy(dtype=float)
    area = table['area'].to_numpy()
    strata = table['stratum_id'].to_numpy()
    psus = table['psu_id'].to_numpy()
    binary = _is_binary(y) if binary is None else binary
    psu_population = sample.psu_population if fpc else None

    estimates = []
    for a in range(1, _area_codes(sample, n_areas) + 1):
        rows = area == a
        if not np.any(rows):
            estimates.append(DirectEstimate(area=a, method='hajek', point=np.nan))
            continue
        w_sum = w[rows].sum()
        point = float(np.dot(w[rows], y[rows]) / w_sum)
        if binary and point in (0.0, 1.0):
            # pas de variance pour une proportion dégénérée
            estimates.append(DirectEstimate(area=a, method='hajek', point=point))
            continue
        z = np.where(rows, w * (y - point) / w_sum, 0.0)
        var = linearized_variance(z, strata, psus, psu_population)
        estimates.append(_with_interval(a, 'hajek', point, np.sqrt(max(var, 0.0))))
    return estimates


@dataclass
class WorkingModelFit:
    intercepts: Dict[int, float]
    slopes: np.ndarray
    residuals: np.ndarray


def fit_working_model(sample, covariates: Sequence[str] = ('x1',)) -> WorkingModelFit:
    """Moindres carrés pondérés de y sur les indicatrices de zone et les covariables"""
    table = sample.table
    y = table['y'].to_numpy(dtype=float)
    w = table['w_raw'].to_numpy(dtype=float)
    labels, codes = np.unique(table['area'].to_numpy(), return_inverse=True)
    X = sample.covariates(covariates) if covariates else np.empty((y.size, 0))
    D = np.zeros((y.size, labels.size))
    D[np.arange(y.size), codes] = 1.0
    design = np.hstack([D, X])
    gram = (design.T * w) @ design
    if np.linalg.matrix_rank(gram) < design.shape[1]:
        raise DataError("GREG working design is collinear", covariates=list(covariates))
    coef = linalg.solve(gram, design.T @ (w * y), assume_a='pos')
    residuals = y - design @ coef
    intercepts = {int(a): float(coef[k]) for k, a in enumerate(labels)}
    return WorkingModelFit(intercepts=intercepts, slopes=coef[labels.size:], residuals=residuals)


def greg_by_area(sample, area_frame: AreaFrame, covariates: Optional[Sequence[str]] = None,
                 fpc: bool = True) -> List[DirectEstimate]:
    """
    (1/N_i) [somme sur U_i de yhat + somme sur S_i de w (y - yhat)] par zone.

    Le modèle de travail a un intercept par zone échantillonnée et des pentes
    communes sur `covariates` (par défaut celles de la base; () pour un modèle
    à intercepts seuls). Les zones non échantillonnées sont manquantes.
    """
    covariates = tuple(area_frame.covariates if covariates is None else covariates)
    frame_cols = [area_frame.covariates.index(c) for c in covariates]
    fit = fit_working_model(sample, covariates)
    table = sample.table
    w = table['w_raw'].to_numpy(dtype=float)
    area = table['area'].to_numpy()
    strata = table['stratum_id'].to_numpy()
    psus = table['psu_id'].to_numpy()
    psu_population = sample.psu_population if fpc else None

    estimates = []
    for a in range(1, area_frame.m + 1):
        if a not in fit.intercepts:
            estimates.append(DirectEstimate(area=a, method='greg', point=np.nan))
            continue
        N_i = area_frame.sizes[a - 1]
        rows = area == a
        synthetic = fit.intercepts[a] + float(area_frame.xbar[a - 1, frame_cols] @ fit.slopes)
        point = synthetic + float(np.dot(w[rows], fit.residuals[rows])) / N_i
        z = np.where(rows, w * fit.residuals / N_i, 0.0)
        var = linearized_variance(z, strata, psus, psu_population)
        estimates.append(_with_interval(a, 'greg', point, np.sqrt(max(var, 0.0))))
    return estimates
