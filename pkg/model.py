#!/usr/bin/env python3
"""
Modèles d'estimation au niveau unité et leurs log pseudo-vraisemblances pondérées.

Deux familles: régression gaussienne à erreurs emboîtées et Bernoulli-logit
avec effets de zone. Deux paramétrisations de la même structure de moyenne:

    hierarchical     (beta0, beta_1..beta_p, u_1..u_m, log sigma_u, [log sigma_eps])
    fixed-intercepts (beta0_1..beta0_m, beta_1..beta_p, [log sigma_eps])

log sigma_eps n'existe que pour la famille gaussienne. Les composantes de
variance sont stockées en échelle log; les densités a priori incluent le
jacobien.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from popgen import canonical_family
from sae_errors import DataError, InvalidConfigError, ParameterLayoutError

logger = logging.getLogger(__name__)

PARAMETERIZATIONS = ('hierarchical', 'fixed-intercepts')
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PriorSpec:
    """A priori PC P(sigma > U) = alpha sur les deux écarts-types, effets fixes plats"""
    sd_prior_u: Tuple[float, float] = (3.0, 0.05)
    sd_prior_eps: Tuple[float, float] = (3.0, 0.05)

    def __post_init__(self):
        for name in ('sd_prior_u', 'sd_prior_eps'):
            upper, alpha = getattr(self, name)
            if not upper > 0 or not 0 < alpha < 1:
                raise InvalidConfigError(f"{name} needs U > 0 and 0 < alpha < 1", key=name)

    @property
    def rate_u(self) -> float:
        return pc_rate(*self.sd_prior_u)

    @property
    def rate_eps(self) -> float:
        return pc_rate(*self.sd_prior_eps)


def pc_rate(upper: float, alpha: float) -> float:
    """Taux exponentiel lambda = -ln(alpha) / U"""
    return -np.log(alpha) / upper


def pc_prior_density(sigma, upper: float = 3.0, alpha: float = 0.05):
    lam = pc_rate(upper, alpha)
    sigma = np.asarray(sigma, dtype=float)
    return np.where(sigma >= 0, lam * np.exp(-lam * sigma), 0.0)


def pc_log_prior_log_sigma(log_sigma: float, rate: float) -> float:
    """Log-densité de s = log sigma quand sigma ~ Exp(rate)"""
    return float(np.log(rate) - rate * np.exp(log_sigma) + log_sigma)


@dataclass(frozen=True)
class ModelSpec:
    n_areas: int
    family: str = 'gaussian'
    covariate_columns: Tuple[str, ...] = ('x1',)
    parameterization: str = 'hierarchical'
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        object.__setattr__(self, 'family', canonical_family(self.family))
        object.__setattr__(self, 'covariate_columns', tuple(self.covariate_columns))
        if self.parameterization not in PARAMETERIZATIONS:
            raise InvalidConfigError(f"Unknown parameterization {self.parameterization!r}",
                                     key='parameterization')
        if self.n_areas < 1:
            raise InvalidConfigError("n_areas must be >= 1", key='n_areas')

    @property
    def gaussian(self) -> bool:
        return self.family == 'gaussian'

    @property
    def hierarchical(self) -> bool:
        return self.parameterization == 'hierarchical'

    @property
    def p(self) -> int:
        return len(self.covariate_columns)

    def as_fixed(self) -> 'ModelSpec':
        return replace(self, parameterization='fixed-intercepts')

    def as_hierarchical(self) -> 'ModelSpec':
        return replace(self, parameterization='hierarchical')

    @cached_property
    def layout(self) -> 'ParamLayout':
        return ParamLayout(self)


class ParamLayout:
    """Table d'indices d'un ParamVector pour un ModelSpec"""

    def __init__(self, spec: ModelSpec):
        m, p = spec.n_areas, spec.p
        self.m, self.p = m, p
        self.hierarchical = spec.hierarchical
        self.gaussian = spec.gaussian
        if spec.hierarchical:
            self.intercept = slice(0, 1)
            self.beta = slice(1, 1 + p)
            self.u = slice(1 + p, 1 + p + m)
            self.n_latent = 1 + p + m
            self.log_sigma_u: Optional[int] = self.n_latent
            self.log_sigma_eps: Optional[int] = self.n_latent + 1 if spec.gaussian else None
        else:
            self.intercept = slice(0, m)
            self.beta = slice(m, m + p)
            self.u = None
            self.n_latent = m + p
            self.log_sigma_u = None
            self.log_sigma_eps = self.n_latent if spec.gaussian else None
        self.latent = slice(0, self.n_latent)
        self.hyper = [i for i in (self.log_sigma_u, self.log_sigma_eps) if i is not None]
        self.size = self.n_latent + len(self.hyper)

    def check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.shape[0] != self.size:
            raise ParameterLayoutError(
                f"parameter vector has length {theta.shape[-1] if theta.ndim else 0}, layout expects {self.size}",
                expected=self.size)
        return theta

    def names(self) -> list:
        if self.hierarchical:
            names = ['beta0'] + [f'beta{k + 1}' for k in range(self.p)] + [f'u{i + 1}' for i in range(self.m)]
            names.append('log_sigma_u')
        else:
            names = [f'beta0_{i + 1}' for i in range(self.m)] + [f'beta{k + 1}' for k in range(self.p)]
        if self.gaussian:
            names.append('log_sigma_eps')
        return names


@dataclass
class ModelData:
    """Vue numérique d'un échantillon pour un modèle: réponse, covariables, codes de zone (base 0), poids"""
    y: np.ndarray
    X: np.ndarray
    area_idx: np.ndarray
    w: np.ndarray
    n_areas: int

    @classmethod
    def from_sample(cls, sample, spec: ModelSpec, weights: Union[str, np.ndarray, None] = 'w_norm') -> 'ModelData':
        table = sample.table
        y = table['y'].to_numpy(dtype=float)
        X = sample.covariates(spec.covariate_columns)
        areas = table['area'].to_numpy()
        if np.any(areas < 1) or np.any(areas > spec.n_areas):
            raise DataError("sample areas must be coded 1..n_areas", n_areas=spec.n_areas)
        if not np.all(np.isfinite(y)):
            raise DataError("responses must be finite")
        if not spec.gaussian and not np.all((y == 0) | (y == 1)):
            raise DataError("bernoulli-logit responses must be 0/1")
        if weights is None or (isinstance(weights, str) and weights == 'ones'):
            w = np.ones(y.shape[0])
        elif isinstance(weights, str):
            w = table[weights].to_numpy(dtype=float)
        else:
            w = np.asarray(weights, dtype=float)
        return cls(y=y, X=X, area_idx=(areas - 1).astype(int), w=w, n_areas=spec.n_areas)

    def with_weights(self, w: np.ndarray) -> 'ModelData':
        return replace(self, w=np.asarray(w, dtype=float))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def area_counts(self) -> np.ndarray:
        return np.bincount(self.area_idx, minlength=self.n_areas)


def as_model_data(sample, spec: ModelSpec, weights=None) -> ModelData:
    if isinstance(sample, ModelData):
        if weights is None:
            return sample
        if isinstance(weights, str) and weights == 'ones':
            return sample.with_weights(np.ones(sample.n))
        return sample.with_weights(weights)
    return ModelData.from_sample(sample, spec, 'w_norm' if weights is None else weights)


def latent_design(data: ModelData, spec: ModelSpec) -> np.ndarray:
    """Matrice de plan Z avec eta = Z @ theta[latent]"""
    n, m, p = data.n, spec.n_areas, spec.p
    Z = np.zeros((n, spec.layout.n_latent))
    rows = np.arange(n)
    if spec.hierarchical:
        Z[:, 0] = 1.0
        Z[:, 1:1 + p] = data.X
        Z[rows, 1 + p + data.area_idx] = 1.0
    else:
        Z[rows, data.area_idx] = 1.0
        Z[:, m:m + p] = data.X
    return Z


def linear_predictor(theta: np.ndarray, data: ModelData, spec: ModelSpec) -> np.ndarray:
    layout = spec.layout
    theta = layout.check(theta)
    xb = data.X @ theta[layout.beta]
    if spec.hierarchical:
        return theta[0] + xb + theta[layout.u][data.area_idx]
    return theta[layout.intercept][data.area_idx] + xb


def unit_log_likelihood(theta, data: ModelData, spec: ModelSpec) -> np.ndarray:
    eta = linear_predictor(theta, data, spec)
    if spec.gaussian:
        log_sigma = theta[spec.layout.log_sigma_eps]
        resid = data.y - eta
        return -0.5 * LOG_2PI - log_sigma - 0.5 * resid ** 2 * np.exp(-2.0 * log_sigma)
    return data.y * log_expit(eta) + (1.0 - data.y) * log_expit(-eta)


def log_pseudo_likelihood(theta, sample, spec: ModelSpec, weights=None) -> float:
    """Somme des w_norm_j * log p(y_j | eta_j)"""
    data = as_model_data(sample, spec, weights)
    return float(np.dot(data.w, unit_log_likelihood(theta, data, spec)))


def unit_scores(theta, sample, spec: ModelSpec, weights=None) -> np.ndarray:
    """
    Contributions au score par unité (non pondérées), forme (n, layout.size).

    Le score pondéré vaut w @ unit_scores; la colonne log sigma_u est nulle,
    sigma_u n'entrant pas dans la vraisemblance.
    """
    data = as_model_data(sample, spec, weights)
    layout = spec.layout
    theta = layout.check(theta)
    Z = latent_design(data, spec)
    eta = Z @ theta[layout.latent]
    G = np.zeros((data.n, layout.size))
    if spec.gaussian:
        inv_var = np.exp(-2.0 * theta[layout.log_sigma_eps])
        resid = data.y - eta
        G[:, layout.latent] = Z * (resid * inv_var)[:, None]
        G[:, layout.log_sigma_eps] = -1.0 + resid ** 2 * inv_var
    else:
        G[:, layout.latent] = Z * (data.y - expit(eta))[:, None]
    return G


def weighted_score(theta, sample, spec: ModelSpec, weights=None) -> np.ndarray:
    data = as_model_data(sample, spec, weights)
    return data.w @ unit_scores(theta, data, spec)


def weighted_hessian(theta, sample, spec: ModelSpec, weights=None) -> np.ndarray:
    """Hessienne analytique de log_pseudo_likelihood (symétrique)"""
    data = as_model_data(sample, spec, weights)
    layout = spec.layout
    theta = layout.check(theta)
    Z = latent_design(data, spec)
    eta = Z @ theta[layout.latent]
    H = np.zeros((layout.size, layout.size))
    lat = layout.latent
    if spec.gaussian:
        s = layout.log_sigma_eps
        inv_var = np.exp(-2.0 * theta[s])
        resid = data.y - eta
        H[lat, lat] = -(Z.T * (data.w * inv_var)) @ Z
        cross = -2.0 * inv_var * (Z.T @ (data.w * resid))
        H[lat, s] = cross
        H[s, lat] = cross
        H[s, s] = -2.0 * inv_var * np.dot(data.w, resid ** 2)
    else:
        q = expit(eta)
        H[lat, lat] = -(Z.T * (data.w * q * (1.0 - q))) @ Z
    return H


def _require_hierarchical(spec: ModelSpec) -> None:
    if not spec.hierarchical:
        raise ParameterLayoutError("the fixed-intercepts layout has no area-effect prior; "
                                   "use the hierarchical parameterization")


def log_prior(theta, spec: ModelSpec) -> float:
    """u ~ N(0, sigma_u^2), a priori PC sur les écarts-types, effets fixes plats"""
    _require_hierarchical(spec)
    layout = spec.layout
    theta = layout.check(theta)
    log_sigma_u = theta[layout.log_sigma_u]
    u = theta[layout.u]
    value = (-0.5 * layout.m * LOG_2PI - layout.m * log_sigma_u
             - 0.5 * np.dot(u, u) * np.exp(-2.0 * log_sigma_u))
    value += pc_log_prior_log_sigma(log_sigma_u, spec.prior.rate_u)
    if spec.gaussian:
        value += pc_log_prior_log_sigma(theta[layout.log_sigma_eps], spec.prior.rate_eps)
    return float(value)


def log_pseudo_posterior(theta, sample, spec: ModelSpec, weights=None) -> float:
    """Log pseudo-a posteriori non normalisée du modèle hiérarchique"""
    _require_hierarchical(spec)
    return log_pseudo_likelihood(theta, sample, spec, weights) + log_prior(theta, spec)


def log_pseudo_posterior_gradient(theta, sample, spec: ModelSpec, weights=None) -> np.ndarray:
    _require_hierarchical(spec)
    layout = spec.layout
    theta = layout.check(theta)
    grad = weighted_score(theta, sample, spec, weights)
    sigma_u = np.exp(theta[layout.log_sigma_u])
    u = theta[layout.u]
    grad[layout.u] -= u / sigma_u ** 2
    grad[layout.log_sigma_u] += -layout.m + np.dot(u, u) / sigma_u ** 2 + 1.0 - spec.prior.rate_u * sigma_u
    if spec.gaussian:
        grad[layout.log_sigma_eps] += 1.0 - spec.prior.rate_eps * np.exp(theta[layout.log_sigma_eps])
    return grad
