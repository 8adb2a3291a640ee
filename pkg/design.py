#!/usr/bin/env python3
"""
Plans de sondage stratifiés (SRS, PPS1, PPS2) avec probabilités d'inclusion exactes.

L'échantillonnage est stratifié par zone. Les tirages PPS suivent la méthode de
Midzuno: la première unité est tirée proportionnellement à la taille, les
n - 1 autres par sondage aléatoire simple sans remise parmi les restantes.
Avec midzuno='pips', le plan de Midzuno est réglé sur des probabilités
d'inclusion exactement proportionnelles à la taille (plafonnées à 1), tiré
comme complément d'une élimination de Tillé sur 1 - pi.
"""

import itertools
import logging
from dataclasses import dataclass, replace
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from popgen import FinitePopulation
from sae_errors import DataError, DesignError, EmptySampleError, InvalidConfigError, SchemaError

logger = logging.getLogger(__name__)

DESIGNS = ('SRS', 'PPS1', 'PPS2')
MIDZUNO_VARIANTS = ('sen', 'pips')
DESIGN_COLUMNS = ['unit_id', 'area', 'cluster', 'psu_id', 'stratum_id', 'pi', 'w_raw', 'w_norm', 'y']
SAMPLE_COLUMNS = DESIGN_COLUMNS + ['x1']


@dataclass(frozen=True)
class DesignConfig:
    design: str = 'SRS'
    n_per_area: int = 30
    clusters_per_area_sampled: Optional[int] = None
    units_per_cluster_sampled: Optional[int] = None
    seed: int = 0
    midzuno: str = 'sen'

    def __post_init__(self):
        design = self.design.upper()
        if design not in DESIGNS:
            raise InvalidConfigError(f"Unknown design {self.design!r}", key='design')
        if self.midzuno not in MIDZUNO_VARIANTS:
            raise InvalidConfigError(f"midzuno must be one of {MIDZUNO_VARIANTS}, got {self.midzuno!r}",
                                     key='midzuno')
        object.__setattr__(self, 'design', design)
        if self.n_per_area < 1:
            raise InvalidConfigError("n_per_area must be >= 1", key='n_per_area')
        if design == 'PPS2':
            units = self.units_per_cluster_sampled
            clusters = self.clusters_per_area_sampled
            if units is None and clusters is None:
                units = 5
            if clusters is None:
                clusters = self.n_per_area // units
            if units is None:
                units = self.n_per_area // clusters
            if clusters < 1 or units < 1 or clusters * units != self.n_per_area:
                raise InvalidConfigError(
                    f"PPS2 needs n_C(i) x n(i,c) = n(i): {clusters} x {units} != {self.n_per_area}",
                    key='clusters_per_area_sampled')
            object.__setattr__(self, 'clusters_per_area_sampled', int(clusters))
            object.__setattr__(self, 'units_per_cluster_sampled', int(units))


@dataclass
class DrawnSample:
    """
    Unités échantillonnées avec leur information de plan.

    `psu_population` associe à chaque strate son nombre d'unités de premier
    degré dans la population (pour la correction de population finie); None
    pour des données externes.
    """
    table: pd.DataFrame
    design: str = 'external'
    psu_population: Optional[Dict[int, int]] = None

    @property
    def n(self) -> int:
        return int(len(self.table))

    def column(self, name: str) -> np.ndarray:
        return self.table[name].to_numpy()

    def covariates(self, columns: Sequence[str]) -> np.ndarray:
        x = self.table[list(columns)].to_numpy(dtype=float)
        if not np.all(np.isfinite(x)):
            raise DataError("sample covariates must be finite", columns=list(columns))
        return x

    def areas_sampled(self) -> np.ndarray:
        return np.unique(self.table['area'].to_numpy())

    def with_weights(self, w_norm: np.ndarray) -> 'DrawnSample':
        table = self.table.copy()
        table['w_norm'] = np.asarray(w_norm, dtype=float)
        return replace(self, table=table)

    def to_csv(self, path: str) -> None:
        self.table.drop(columns=['pi_psu'], errors='ignore').to_csv(path, index=False)

    @classmethod
    def from_frame(cls, table: pd.DataFrame, design: str = 'external',
                   psu_population: Optional[Dict[int, int]] = None,
                   covariates: Sequence[str] = ('x1',)) -> 'DrawnSample':
        for column in DESIGN_COLUMNS + list(covariates):
            if column not in table.columns:
                raise SchemaError(f"sample is missing column '{column}'", column=column)
        return cls(table=table.reset_index(drop=True), design=design, psu_population=psu_population)


def _check_sizes(sizes, n: int) -> np.ndarray:
    s = np.asarray(sizes, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise DesignError("sizes must be a non-empty vector")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise DesignError("all sizes must be positive")
    if n < 1 or n > s.size:
        raise DesignError(f"sample size {n} infeasible for {s.size} units", n=int(n), N=int(s.size))
    return s


def midzuno_inclusion_probs(sizes, n: int) -> np.ndarray:
    s = _check_sizes(sizes, n)
    N = s.size
    if n == N:
        return np.ones(N)
    p = s / s.sum()
    return (n - 1) / (N - 1) + p * (N - n) / (N - 1)


def draw_midzuno(sizes, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices triés d'un échantillon de Midzuno"""
    s = _check_sizes(sizes, n)
    N = s.size
    if n == N:
        return np.arange(N)
    first = rng.choice(N, p=s / s.sum())
    rest = np.delete(np.arange(N), first)
    others = rng.choice(rest, size=n - 1, replace=False) if n > 1 else np.empty(0, dtype=int)
    return np.sort(np.concatenate(([first], others)).astype(int))


def midzuno_sample_distribution(sizes, n: int) -> List[Tuple[Tuple[int, ...], float]]:
    """Tous les échantillons de Midzuno possibles avec leur probabilité de sélection"""
    s = _check_sizes(sizes, n)
    p = s / s.sum()
    denom = comb(s.size - 1, n - 1)
    return [(combo, float(p[list(combo)].sum()) / denom)
            for combo in itertools.combinations(range(s.size), n)]


def _capped_proportional(a: np.ndarray, n: float) -> np.ndarray:
    pi = n * a / a.sum()
    capped = np.zeros(a.size, dtype=bool)
    while True:
        newly = ~capped & (pi >= 1.0)
        if not newly.any():
            return pi
        capped |= newly
        pi[capped] = 1.0
        free = ~capped
        if free.any():
            pi[free] = (n - capped.sum()) * a[free] / a[free].sum()


def inclusion_probabilities(sizes, n: int) -> np.ndarray:
    """
    Probabilités proportionnelles à la taille, de somme n.

    Les unités dont la part dépasserait 1 sont fixées à 1 et la taille
    d'échantillon restante est répartie sur les autres, jusqu'à stabilité.
    """
    s = _check_sizes(sizes, n)
    return _capped_proportional(s, float(n))


def draw_midzuno_pips(pi, rng: np.random.Generator, eps: float = 1e-6) -> np.ndarray:
    """
    Indices triés d'un échantillon de Midzuno aux probabilités d'inclusion pi exactes.

    Les unités avec pi >= 1 - eps sont toujours prises, celles avec pi <= eps
    jamais. Parmi les autres, les unités sont éliminées une à une selon un
    plan de Tillé sur 1 - pi; les unités éliminées forment l'échantillon.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1 or not np.all(np.isfinite(pi)) or np.any(pi < 0) or np.any(pi > 1 + eps):
        raise DesignError("inclusion probabilities must lie in [0, 1]")
    selected = pi >= 1.0 - eps
    free = np.flatnonzero((pi > eps) & ~selected)
    n_free = int(round(pi[free].sum()))
    if n_free > 0:
        q = 1.0 - pi[free]
        remaining = np.ones(free.size)
        previous = np.ones(free.size)
        for step in range(1, n_free + 1):
            current = _capped_proportional(q, float(free.size - step))
            p = np.clip(1.0 - current / previous, 0.0, None) * remaining
            previous = current
            eliminated = rng.choice(free.size, p=p / p.sum())
            remaining[eliminated] = 0.0
        selected[free[remaining == 0.0]] = True
    return np.flatnonzero(selected)


def _pps_draw(sizes: np.ndarray, n: int, rng: np.random.Generator, variant: str) -> Tuple[np.ndarray, np.ndarray]:
    """(indices tirés, probabilités d'inclusion de toutes les unités) selon la variante de Midzuno"""
    if variant == 'pips':
        pi = inclusion_probabilities(sizes, n)
        return draw_midzuno_pips(pi, rng), pi
    return draw_midzuno(sizes, n, rng), midzuno_inclusion_probs(sizes, n)


def pps_sizes(values: np.ndarray) -> np.ndarray:
    """Mesure de taille décalée value - min(value) + 1"""
    values = np.asarray(values, dtype=float)
    return values - values.min() + 1.0


def _sample_table(pop: FinitePopulation, rows: np.ndarray, pi: np.ndarray, psu: np.ndarray,
                  pi_psu: Optional[np.ndarray] = None) -> pd.DataFrame:
    w_raw = 1.0 / pi
    table = pd.DataFrame({
        'unit_id': pop.unit_id[rows],
        'area': pop.area[rows],
        'cluster': pop.cluster[rows],
        'psu_id': psu,
        'stratum_id': pop.area[rows],
        'pi': pi,
        'w_raw': w_raw,
        'w_norm': w_raw,
        'y': pop.y[rows] if pop.y is not None else np.full(rows.size, np.nan),
        'x1': pop.x1[rows],
    }, columns=SAMPLE_COLUMNS)
    # probabilité d'inclusion du premier degré (diagnostic)
    table['pi_psu'] = pi if pi_psu is None else pi_psu
    return table


def draw_sample(pop: FinitePopulation, cfg: DesignConfig, rng: np.random.Generator) -> DrawnSample:
    """Tirage stratifié par zone selon cfg.design, poids normalisés"""
    n = cfg.n_per_area
    rows: List[np.ndarray] = []
    probs: List[np.ndarray] = []
    psus: List[np.ndarray] = []
    first_stage: List[np.ndarray] = []
    psu_population: Dict[int, int] = {}

    for area in range(1, pop.m + 1):
        units = np.flatnonzero(pop.area == area)
        N_i = units.size
        if n > N_i:
            raise DesignError(f"area {area}: n(i)={n} exceeds N(i)={N_i}", area=area)

        if cfg.design == 'SRS':
            chosen = np.sort(rng.choice(units, size=n, replace=False))
            rows.append(chosen)
            probs.append(np.full(n, n / N_i))
            first_stage.append(probs[-1])
            psus.append(pop.unit_id[chosen])
            psu_population[area] = N_i

        elif cfg.design == 'PPS1':
            idx, pi_area = _pps_draw(pps_sizes(pop.x2[units]), n, rng, cfg.midzuno)
            rows.append(units[idx])
            probs.append(pi_area[idx])
            first_stage.append(probs[-1])
            psus.append(pop.unit_id[units[idx]])
            psu_population[area] = N_i

        else:
            unit_size = pps_sizes(pop.x2[units])
            keys, first = np.unique(pop.cluster_key[units], return_index=True)
            n_c = cfg.clusters_per_area_sampled
            n_ic = cfg.units_per_cluster_sampled
            if n_c > keys.size:
                raise DesignError(f"area {area}: {n_c} clusters requested, {keys.size} available", area=area)
            cluster_size = pps_sizes(pop.x_tilde2[units[first]])
            cluster_draw, pi_cluster = _pps_draw(cluster_size, n_c, rng, cfg.midzuno)
            for c in cluster_draw:
                members = np.flatnonzero(pop.cluster_key[units] == keys[c])
                if n_ic > members.size:
                    raise DesignError(f"area {area}: cluster too small for {n_ic} units", area=area)
                sizes = unit_size[members]
                idx, pi_within = _pps_draw(sizes, n_ic, rng, cfg.midzuno)
                chosen = units[members[idx]]
                rows.append(chosen)
                probs.append(pi_cluster[c] * pi_within[idx])
                first_stage.append(np.full(n_ic, pi_cluster[c]))
                psus.append(np.full(n_ic, keys[c] + 1))
            psu_population[area] = int(keys.size)

    all_rows = np.concatenate(rows)
    table = _sample_table(pop, all_rows, np.concatenate(probs), np.concatenate(psus),
                         np.concatenate(first_stage))
    sample = DrawnSample(table=table, design=cfg.design, psu_population=psu_population)
    return normalize_weights(sample)


def census_sample(pop: FinitePopulation) -> DrawnSample:
    """Toute la population comme échantillon, pi = 1"""
    rows = np.arange(pop.N)
    table = _sample_table(pop, rows, np.ones(pop.N), pop.unit_id.copy())
    sizes = pop.area_sizes()
    sample = DrawnSample(table=table, design='census',
                         psu_population={a + 1: int(sizes[a]) for a in range(pop.m)})
    return normalize_weights(sample)


def normalize_weights(sample: DrawnSample) -> DrawnSample:
    """Remet w_raw à l'échelle pour que la somme des poids égale la taille d'échantillon"""
    if sample.n == 0:
        raise EmptySampleError("cannot normalize the weights of an empty sample")
    w_raw = sample.column('w_raw').astype(float)
    if not np.all(np.isfinite(w_raw)) or np.any(w_raw <= 0):
        raise DesignError("raw weights must be positive")
    if np.all(w_raw == w_raw[0]):
        w_norm = np.ones_like(w_raw)
    else:
        w_norm = w_raw * (sample.n / w_raw.sum())
    return sample.with_weights(w_norm)


def horvitz_thompson_total(y: np.ndarray, pi: np.ndarray) -> float:
    return float(np.sum(np.asarray(y, dtype=float) / np.asarray(pi, dtype=float)))
