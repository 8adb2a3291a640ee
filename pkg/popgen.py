#!/usr/bin/env python3
"""
Populations finies en grappes pour les simulations de petites zones.

Chaque zone contient le même nombre de grappes de même taille. Les unités
reçoivent une première variable auxiliaire z1 ~ N(i/m, 1) et une taille
z2 = i/m + Exp; les tailles des unités et les totaux de taille par grappe sont
standardisés sur toute la population. Les réponses suivent un modèle gaussien
ou Bernoulli-logit piloté par x1 et la taille de grappe standardisée (non
observée).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from sae_errors import DataError, DegenerateStandardizationError, InvalidConfigError, SchemaError

logger = logging.getLogger(__name__)

FAMILIES = ('gaussian', 'bernoulli-logit')
FAMILY_ALIASES = {'gaussian': 'gaussian', 'normal': 'gaussian', 'continuous': 'gaussian',
                  'bernoulli-logit': 'bernoulli-logit', 'logit': 'bernoulli-logit',
                  'binary': 'bernoulli-logit', 'bernoulli': 'bernoulli-logit'}

POPULATION_COLUMNS = ['unit_id', 'area', 'cluster', 'z1', 'x1', 'z2', 'x2', 'x_tilde2', 'y']


def canonical_family(family: str) -> str:
    try:
        return FAMILY_ALIASES[family.lower()]
    except KeyError:
        raise InvalidConfigError(f"Unknown response family {family!r}", key='family')


@dataclass(frozen=True)
class PopulationConfig:
    m: int = 20
    clusters_per_area: int = 150
    cluster_size: int = 30
    coefficients: Tuple[float, float, float] = (0.0, 1.0, 2.0)
    noise_sd: float = 1.0
    family: str = 'gaussian'
    seed: int = 20240101
    # Exp(1/2) lu comme un taux (moyenne 2) sauf si exp_reading == 'mean'
    exp_param: float = 0.5
    exp_reading: str = 'rate'
    x1_source: str = 'raw'

    def __post_init__(self):
        object.__setattr__(self, 'family', canonical_family(self.family))
        object.__setattr__(self, 'coefficients', tuple(float(b) for b in self.coefficients))
        self.validate()

    def validate(self) -> None:
        for name in ('m', 'clusters_per_area', 'cluster_size'):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"{name} must be >= 1", key=name)
        if len(self.coefficients) != 3:
            raise InvalidConfigError("coefficients must be (beta0, beta1, beta2)", key='coefficients')
        if self.noise_sd < 0:
            raise InvalidConfigError("noise_sd must be >= 0", key='noise_sd')
        if self.exp_param <= 0:
            raise InvalidConfigError("exp_param must be > 0", key='exp_param')
        if self.exp_reading not in ('rate', 'mean'):
            raise InvalidConfigError("exp_reading must be 'rate' or 'mean'", key='exp_reading')
        if self.x1_source not in ('raw', 'standardized'):
            raise InvalidConfigError("x1_source must be 'raw' or 'standardized'", key='x1_source')

    @property
    def N(self) -> int:
        return self.m * self.clusters_per_area * self.cluster_size

    @property
    def exp_mean(self) -> float:
        return 1.0 / self.exp_param if self.exp_reading == 'rate' else self.exp_param


def _frozen(values) -> np.ndarray:
    arr = np.array(values)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FinitePopulation:
    """Base de sondage complète; les tableaux sont en lecture seule une fois construits"""
    unit_id: np.ndarray
    area: np.ndarray
    cluster: np.ndarray
    cluster_key: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x_tilde2: np.ndarray
    m: int
    y: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    family: Optional[str] = None

    @property
    def N(self) -> int:
        return int(self.unit_id.shape[0])

    @property
    def has_responses(self) -> bool:
        return self.y is not None

    def area_sizes(self) -> np.ndarray:
        return np.bincount(self.area - 1, minlength=self.m)

    def covariates(self, columns: Sequence[str]) -> np.ndarray:
        return np.column_stack([np.asarray(getattr(self, c), dtype=float) for c in columns])

    def to_frame(self) -> pd.DataFrame:
        data = {
            'unit_id': self.unit_id,
            'area': self.area,
            'cluster': self.cluster,
            'z1': self.z1,
            'x1': self.x1,
            'z2': self.z2,
            'x2': self.x2,
            'x_tilde2': self.x_tilde2,
            'y': self.y if self.y is not None else np.full(self.N, np.nan),
        }
        return pd.DataFrame(data, columns=POPULATION_COLUMNS)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)
        logger.info(f"💾 Population exportée: {path} ({self.N} unités)")


@dataclass(frozen=True, eq=False)
class AreaTruths:
    area: np.ndarray
    ybar: np.ndarray

    def as_series(self) -> pd.Series:
        return pd.Series(self.ybar, index=pd.Index(self.area, name='area'), name='ybar')


def standardize(values) -> np.ndarray:
    """Centre et réduit sur la population: moyenne 0, variance 1 (diviseur N)"""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise DegenerateStandardizationError("standardize needs at least two values", size=int(arr.size))
    if not np.all(np.isfinite(arr)):
        raise DegenerateStandardizationError("standardize got non-finite values")
    centered = arr - arr.mean()
    sd = np.sqrt(np.mean(centered ** 2))
    if not sd > 0:
        raise DegenerateStandardizationError("cannot standardize a constant column", size=int(arr.size))
    return centered / sd


def generate_aux_frame(cfg: PopulationConfig, rng: np.random.Generator) -> FinitePopulation:
    """Variables auxiliaires d'une population en grappes (sans réponses)"""
    cfg.validate()
    m, n_c, size = cfg.m, cfg.clusters_per_area, cfg.cluster_size
    N = cfg.N

    area = np.repeat(np.arange(1, m + 1), n_c * size)
    cluster = np.tile(np.repeat(np.arange(1, n_c + 1), size), m)
    cluster_key = (area - 1) * n_c + (cluster - 1)
    location = area / m

    z1 = rng.normal(loc=location, scale=1.0, size=N)
    z2 = location + rng.exponential(scale=cfg.exp_mean, size=N)

    x2 = standardize(z2)
    cluster_total = np.bincount(cluster_key, weights=z2, minlength=m * n_c)
    x_tilde2 = standardize(cluster_total[cluster_key])
    x1 = standardize(z1) if cfg.x1_source == 'standardized' else z1

    logger.debug(f"Frame auxiliaire: N={N}, m={m}, {n_c} clusters de {size} unités")
    return FinitePopulation(
        unit_id=_frozen(np.arange(1, N + 1)),
        area=_frozen(area),
        cluster=_frozen(cluster),
        cluster_key=_frozen(cluster_key),
        z1=_frozen(z1),
        z2=_frozen(z2),
        x1=_frozen(x1),
        x2=_frozen(x2),
        x_tilde2=_frozen(x_tilde2),
        m=m,
    )


def linear_predictor(frame: FinitePopulation, cfg: PopulationConfig) -> np.ndarray:
    b0, b1, b2 = cfg.coefficients
    return b0 + b1 * frame.x1 + b2 * frame.x_tilde2


def simulate_responses(frame: FinitePopulation, cfg: PopulationConfig,
                       rng: np.random.Generator) -> FinitePopulation:
    """Tire y pour chaque unité; renvoie une nouvelle population (la base n'est pas modifiée)"""
    cfg.validate()
    eta = linear_predictor(frame, cfg)
    if cfg.family == 'gaussian':
        y = eta + cfg.noise_sd * rng.standard_normal(frame.N)
        q = None
    else:
        q = expit(eta)
        y = rng.binomial(1, q).astype(float)
    return replace(frame, y=_frozen(y), q=None if q is None else _frozen(q), family=cfg.family)


def finite_area_means(pop: FinitePopulation) -> AreaTruths:
    if pop.y is None:
        raise DataError("population has no responses; call simulate_responses first")
    counts = pop.area_sizes()
    totals = np.bincount(pop.area - 1, weights=pop.y, minlength=pop.m)
    with np.errstate(invalid='ignore', divide='ignore'):
        ybar = totals / counts
    return AreaTruths(area=np.arange(1, pop.m + 1), ybar=ybar)


@dataclass
class AreaFrame:
    """
    Information auxiliaire de la population par zone.

    `sizes` et `xbar` sont toujours présents. `unit_area`/`unit_x` portent la
    base au niveau unité quand elle est connue (nécessaire aux moyennes
    logistiques). Les zones sont codées 1..m.
    """
    covariates: Tuple[str, ...]
    sizes: np.ndarray
    xbar: np.ndarray
    unit_area: Optional[np.ndarray] = None
    unit_x: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=float)
        self.xbar = np.asarray(self.xbar, dtype=float).reshape(len(self.sizes), len(self.covariates))
        if self.labels is None:
            self.labels = np.arange(1, len(self.sizes) + 1)

    @property
    def m(self) -> int:
        return int(self.sizes.shape[0])

    @property
    def has_units(self) -> bool:
        return self.unit_area is not None

    @property
    def totals(self) -> np.ndarray:
        return self.xbar * self.sizes[:, None]

    @classmethod
    def from_population(cls, pop: FinitePopulation, covariates: Sequence[str] = ('x1',)) -> 'AreaFrame':
        covariates = tuple(covariates)
        x = pop.covariates(covariates)
        sizes = pop.area_sizes().astype(float)
        sums = np.column_stack([np.bincount(pop.area - 1, weights=x[:, k], minlength=pop.m)
                                for k in range(x.shape[1])])
        return cls(covariates=covariates, sizes=sizes, xbar=sums / sizes[:, None],
                   unit_area=np.asarray(pop.area), unit_x=x)

    @classmethod
    def from_table(cls, table: pd.DataFrame, covariates: Sequence[str]) -> 'AreaFrame':
        """
        Construit depuis une table d'unités (area + covariables, une ligne par
        unité) ou une table résumée par zone (area, N + moyennes des
        covariables, une ligne par zone). Les libellés de zone sont recodés en
        1..m dans l'ordre trié.
        """
        covariates = tuple(covariates)
        for column in ('area',) + covariates:
            if column not in table.columns:
                raise SchemaError(f"frame is missing column '{column}'", column=column)
        labels = np.sort(table['area'].unique())
        codes = np.searchsorted(labels, table['area'].to_numpy()) + 1
        x = table[list(covariates)].to_numpy(dtype=float)
        if not np.all(np.isfinite(x)):
            raise DataError("frame covariates must be finite")
        m = len(labels)
        if 'N' in table.columns:
            if table['area'].duplicated().any():
                raise SchemaError("area-summary frame has duplicated areas", column='area')
            sizes = np.zeros(m)
            xbar = np.zeros((m, len(covariates)))
            sizes[codes - 1] = table['N'].to_numpy(dtype=float)
            xbar[codes - 1] = x
            if np.any(sizes <= 0):
                raise DataError("area sizes N must be positive")
            return cls(covariates=covariates, sizes=sizes, xbar=xbar, labels=labels)
        sizes = np.bincount(codes - 1, minlength=m).astype(float)
        sums = np.column_stack([np.bincount(codes - 1, weights=x[:, k], minlength=m)
                                for k in range(x.shape[1])])
        return cls(covariates=covariates, sizes=sizes, xbar=sums / sizes[:, None],
                   unit_area=codes, unit_x=x, labels=labels)
