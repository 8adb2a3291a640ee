#!/usr/bin/env python3
"""
Ajustement et tirages de la pseudo-loi a posteriori.

Le modèle hiérarchique est traité par une approximation de Laplace emboîtée:

  * étape interne: mode conditionnel du champ latent (beta0, beta, u) sachant
    les log écarts-types psi. Résolution linéaire exacte pour la famille
    gaussienne, Newton/IRLS avec demi-pas pour la famille logit.
  * étape externe: BFGS sur la log marginale de psi approchée par Laplace.
  * tirages: psi est tiré sur une grille autour du mode externe (pondérée par
    la marginale de Laplace), le champ latent dans l'approximation gaussienne
    au mode conditionnel de chaque point de grille.

Le modèle à intercepts fixes est ajusté par pseudo-maximum de vraisemblance.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.special import expit, logit

from model import (ModelData, ModelSpec, as_model_data, latent_design, log_prior,
                   log_pseudo_likelihood, unit_log_likelihood, weighted_hessian, weighted_score)
from sae_errors import DataError, InsufficientDrawsError, ParameterLayoutError

logger = logging.getLogger(__name__)

PROVENANCES = ('unweighted', 'weighted', 'weighted-rescaled')


@dataclass(frozen=True)
class InferenceSettings:
    outer_tol: float = 1e-6
    inner_tol: float = 1e-10
    outer_maxiter: int = 200
    inner_maxiter: int = 100
    grid_points: int = 5
    grid_span: float = 2.5
    fd_step: float = 1e-5
    hessian_step: float = 1e-3
    # log écarts-types connus, dans l'ordre du layout (log sigma_u, [log sigma_eps])
    fixed_hyper: Optional[Tuple[float, ...]] = None


@dataclass
class FitResult:
    mode: np.ndarray
    spec: ModelSpec
    curvature: np.ndarray
    converged: bool
    iterations: int
    hyper_mode: Optional[np.ndarray] = None
    hyper_cov: Optional[np.ndarray] = None
    log_marginal: Optional[float] = None
    gradient_norm: float = 0.0
    gradient_tol: float = 0.0
    # fits à intercepts fixes: indice de zone (base 0) -> 'separation' | 'unsampled'
    flagged: Dict[int, str] = field(default_factory=dict)


@dataclass
class PseudoPosteriorDraws:
    draws: np.ndarray
    spec: ModelSpec
    provenance: str = 'weighted'

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[0] < 1:
            raise InsufficientDrawsError("need at least one draw")
        if self.draws.shape[1] != self.spec.layout.size:
            raise ParameterLayoutError("draw width does not match the model layout",
                                       expected=self.spec.layout.size)
        if not np.all(np.isfinite(self.draws)):
            raise DataError("pseudo-posterior draws must be finite")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def K(self) -> int:
        return int(self.draws.shape[0])

    @property
    def parameterization(self) -> str:
        return self.spec.parameterization

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)


@dataclass
class _Conditional:
    x: np.ndarray
    chol: np.ndarray
    loglik: float
    iterations: int
    converged: bool


class LaplaceProblem:
    """Approximation gaussienne latente de la pseudo-loi a posteriori hiérarchique"""

    def __init__(self, data: ModelData, spec: ModelSpec, settings: InferenceSettings):
        if not spec.hierarchical:
            raise ParameterLayoutError("nested Laplace fitting needs the hierarchical parameterization")
        self.data = data
        self.spec = spec
        self.settings = settings
        self.layout = spec.layout
        self.Z = latent_design(data, spec)
        self._warm = np.zeros(self.layout.n_latent)

    def full(self, x: np.ndarray, psi: np.ndarray) -> np.ndarray:
        return np.concatenate([x, psi])

    def prior_precision(self, psi: np.ndarray) -> np.ndarray:
        d = np.zeros(self.layout.n_latent)
        d[self.layout.u] = np.exp(-2.0 * psi[0])
        return d

    def _objective(self, x: np.ndarray, psi: np.ndarray, d: np.ndarray) -> float:
        ll = np.dot(self.data.w, unit_log_likelihood(self.full(x, psi), self.data, self.spec))
        return float(ll - 0.5 * np.dot(d * x, x))

    def conditional(self, psi: np.ndarray) -> _Conditional:
        psi = np.asarray(psi, dtype=float)
        d = self.prior_precision(psi)
        Z, w = self.Z, self.data.w
        if self.spec.gaussian:
            inv_var = np.exp(-2.0 * psi[1])
            Q = (Z.T * (w * inv_var)) @ Z
            Q[np.diag_indices_from(Q)] += d
            chol = linalg.cholesky(Q, lower=True)
            x = linalg.cho_solve((chol, True), Z.T @ (w * self.data.y * inv_var))
            ll = float(np.dot(w, unit_log_likelihood(self.full(x, psi), self.data, self.spec)))
            return _Conditional(x=x, chol=chol, loglik=ll, iterations=1, converged=True)

        x = self._warm.copy()
        y = self.data.y
        converged = False
        iterations = 0
        current = self._objective(x, psi, d)
        for iterations in range(1, self.settings.inner_maxiter + 1):
            q = expit(Z @ x)
            grad = Z.T @ (w * (y - q)) - d * x
            if np.max(np.abs(grad)) < self.settings.inner_tol:
                converged = True
                break
            Q = (Z.T * (w * q * (1.0 - q))) @ Z
            Q[np.diag_indices_from(Q)] += d
            step = linalg.cho_solve(linalg.cho_factor(Q, lower=True), grad)
            scale = 1.0
            for _ in range(40):
                candidate = x + scale * step
                value = self._objective(candidate, psi, d)
                if value >= current - 1e-12 * abs(current):
                    break
                scale *= 0.5
            x, current = candidate, value
        q = expit(Z @ x)
        Q = (Z.T * (w * q * (1.0 - q))) @ Z
        Q[np.diag_indices_from(Q)] += d
        chol = linalg.cholesky(Q, lower=True)
        self._warm = x.copy()
        ll = float(np.dot(w, unit_log_likelihood(self.full(x, psi), self.data, self.spec)))
        return _Conditional(x=x, chol=chol, loglik=ll, iterations=iterations, converged=converged)

    def log_marginal(self, psi: np.ndarray, cond: Optional[_Conditional] = None) -> float:
        """Approximation de Laplace de log p(psi | data), à une constante près"""
        psi = np.asarray(psi, dtype=float)
        if cond is None:
            cond = self.conditional(psi)
        return (cond.loglik + log_prior(self.full(cond.x, psi), self.spec)
                - float(np.sum(np.log(np.diag(cond.chol)))))

    def safe_log_marginal(self, psi: np.ndarray) -> float:
        if np.any(np.abs(psi) > 25):
            return -np.inf
        try:
            value = self.log_marginal(psi)
        except (linalg.LinAlgError, FloatingPointError, ValueError):
            return -np.inf
        return value if np.isfinite(value) else -np.inf

    def gradient(self, psi: np.ndarray) -> np.ndarray:
        h = self.settings.fd_step
        grad = np.zeros_like(psi)
        for k in range(psi.size):
            e = np.zeros_like(psi)
            e[k] = h
            grad[k] = (self.safe_log_marginal(psi + e) - self.safe_log_marginal(psi - e)) / (2.0 * h)
        return grad

    def hessian(self, psi: np.ndarray) -> np.ndarray:
        h = self.settings.hessian_step
        d = psi.size
        f0 = self.safe_log_marginal(psi)
        H = np.zeros((d, d))
        eye = np.eye(d) * h
        for i in range(d):
            H[i, i] = (self.safe_log_marginal(psi + eye[i]) - 2.0 * f0
                       + self.safe_log_marginal(psi - eye[i])) / h ** 2
            for j in range(i + 1, d):
                H[i, j] = H[j, i] = (
                    self.safe_log_marginal(psi + eye[i] + eye[j])
                    - self.safe_log_marginal(psi + eye[i] - eye[j])
                    - self.safe_log_marginal(psi - eye[i] + eye[j])
                    + self.safe_log_marginal(psi - eye[i] - eye[j])) / (4.0 * h ** 2)
        return H

    def starting_point(self) -> np.ndarray:
        psi = [np.log(0.5)]
        if self.spec.gaussian:
            w, y = self.data.w, self.data.y
            mean = np.dot(w, y) / w.sum()
            sd = np.sqrt(np.dot(w, (y - mean) ** 2) / w.sum())
            psi.append(np.log(sd) if sd > 0 else 0.0)
        return np.array(psi)


def fit_pseudo_map(sample, spec: ModelSpec, weights=None,
                   settings: Optional[InferenceSettings] = None) -> FitResult:
    """
    Mode de la marginale de Laplace des hyperparamètres et mode latent
    conditionnel en ce point. weights=None utilise w_norm, 'ones' donne le fit
    non pondéré.
    """
    settings = settings or InferenceSettings()
    spec = spec.as_hierarchical()
    data = as_model_data(sample, spec, weights)
    problem = LaplaceProblem(data, spec, settings)

    if settings.fixed_hyper is not None:
        psi = np.asarray(settings.fixed_hyper, dtype=float)
        if psi.size != len(spec.layout.hyper):
            raise ParameterLayoutError("fixed_hyper must give one value per variance component",
                                       expected=len(spec.layout.hyper))
        cond = problem.conditional(psi)
        mode = problem.full(cond.x, psi)
        return FitResult(mode=mode, spec=spec, curvature=cond.chol @ cond.chol.T,
                         converged=cond.converged, iterations=cond.iterations, hyper_mode=psi,
                         hyper_cov=None, log_marginal=problem.log_marginal(psi, cond))

    result = minimize(lambda p: -problem.safe_log_marginal(p), problem.starting_point(),
                      jac=lambda p: -problem.gradient(p), method='BFGS',
                      options={'gtol': settings.outer_tol, 'maxiter': settings.outer_maxiter})
    psi = np.asarray(result.x, dtype=float)
    grad_norm = float(np.max(np.abs(problem.gradient(psi))))
    cond = problem.conditional(psi)
    log_marginal = problem.log_marginal(psi, cond)
    # gradient externe par différences finies: tolérance relative à l'échelle de l'objectif
    grad_tol = settings.outer_tol * max(1.0, abs(log_marginal) if np.isfinite(log_marginal) else 1.0)
    converged = bool(np.isfinite(grad_norm) and grad_norm <= grad_tol and cond.converged)
    if not converged:
        logger.warning(f"⚠️ Ajustement hiérarchique non convergé: |grad| = {grad_norm:.2e} > {grad_tol:.1e} "
                       f"après {result.nit} itérations ({result.message})")

    hyper_cov = None
    neg_hess = -problem.hessian(psi)
    try:
        linalg.cholesky(neg_hess, lower=True)
        hyper_cov = linalg.inv(neg_hess)
    except (linalg.LinAlgError, ValueError):
        logger.warning("⚠️ Courbure des hyperparamètres non définie positive, grille diagonale utilisée")
        hyper_cov = np.eye(psi.size) * 0.25

    return FitResult(mode=problem.full(cond.x, psi), spec=spec, curvature=cond.chol @ cond.chol.T,
                     converged=converged, iterations=int(result.nit), hyper_mode=psi,
                     hyper_cov=hyper_cov, log_marginal=log_marginal,
                     gradient_norm=grad_norm, gradient_tol=grad_tol)


@dataclass
class HyperGrid:
    psi: np.ndarray
    weights: np.ndarray
    modes: List[np.ndarray]
    chols: List[np.ndarray]


def build_hyper_grid(fit: FitResult, problem: LaplaceProblem) -> HyperGrid:
    """Points de grille psi_hat + V sqrt(Lambda) z, pondérés par la marginale de Laplace"""
    settings = problem.settings
    psi_hat = fit.hyper_mode
    if fit.hyper_cov is None or settings.grid_points <= 1:
        points = psi_hat[None, :]
    else:
        vals, vecs = linalg.eigh(fit.hyper_cov)
        vals = np.clip(vals, 1e-12, None)
        axis = np.linspace(-settings.grid_span, settings.grid_span, settings.grid_points)
        z = np.array(list(itertools.product(axis, repeat=psi_hat.size)))
        points = psi_hat[None, :] + (z * np.sqrt(vals)) @ vecs.T

    log_w, modes, chols = [], [], []
    for psi in points:
        try:
            cond = problem.conditional(psi)
            value = problem.log_marginal(psi, cond)
        except (linalg.LinAlgError, ValueError):
            cond, value = None, -np.inf
        log_w.append(value if np.isfinite(value) else -np.inf)
        modes.append(None if cond is None else cond.x)
        chols.append(None if cond is None else cond.chol)
    log_w = np.asarray(log_w)
    if not np.any(np.isfinite(log_w)):
        raise DataError("no usable hyperparameter grid point")
    weights = np.exp(log_w - np.max(log_w))
    weights /= weights.sum()
    return HyperGrid(psi=points, weights=weights, modes=modes, chols=chols)


def draw_pseudo_posterior(sample, spec: ModelSpec, K: int, rng: np.random.Generator,
                          weights=None, fit: Optional[FitResult] = None,
                          settings: Optional[InferenceSettings] = None,
                          provenance: Optional[str] = None) -> PseudoPosteriorDraws:
    """K tirages joints (layout hiérarchique) de la pseudo-loi a posteriori approchée"""
    if K < 1:
        raise InsufficientDrawsError("K must be >= 1", K=int(K))
    settings = settings or InferenceSettings()
    spec = spec.as_hierarchical()
    data = as_model_data(sample, spec, weights)
    if fit is None:
        fit = fit_pseudo_map(data, spec, settings=settings)
    problem = LaplaceProblem(data, spec, settings)
    grid = build_hyper_grid(fit, problem)

    which = rng.choice(len(grid.weights), size=K, p=grid.weights)
    normals = rng.standard_normal((K, spec.layout.n_latent))
    draws = np.empty((K, spec.layout.size))
    for g in np.unique(which):
        rows = np.flatnonzero(which == g)
        # x = mode + L^{-T} z a pour covariance Q^{-1} quand Q = L L^T
        latent = linalg.solve_triangular(grid.chols[g], normals[rows].T, lower=True, trans='T').T
        draws[rows, :spec.layout.n_latent] = grid.modes[g] + latent
        draws[rows, spec.layout.n_latent:] = grid.psi[g]

    if provenance is None:
        provenance = 'unweighted' if isinstance(weights, str) and weights == 'ones' else 'weighted'
    return PseudoPosteriorDraws(draws=draws, spec=spec, provenance=provenance)


def _unsampled_areas(data: ModelData) -> Dict[int, str]:
    flagged: Dict[int, str] = {}
    counts = data.area_counts()
    for a in np.flatnonzero(counts == 0):
        flagged[int(a)] = 'unsampled'
    return flagged


def fit_pseudo_mle_fixed(sample, spec: ModelSpec, weights=None,
                         fallback_intercepts: Optional[np.ndarray] = None,
                         settings: Optional[InferenceSettings] = None) -> FitResult:
    """
    Pseudo-MLE du modèle à intercepts fixes (sans a priori), Newton avec demi-pas.

    Les zones non échantillonnées et, pour la famille logit, les zones dont
    les réponses sont toutes 0 ou toutes 1 sont signalées; leurs intercepts
    restent à fallback_intercepts (p. ex. le mode hiérarchique) et sortent de
    l'optimisation.
    """
    settings = settings or InferenceSettings()
    spec = spec.as_fixed()
    layout = spec.layout
    data = as_model_data(sample, spec, weights)

    flagged = _unsampled_areas(data)
    if not spec.gaussian:
        for a in range(spec.n_areas):
            if a in flagged:
                continue
            ys = data.y[(data.area_idx == a) & (data.w > 0)]
            if ys.size and (np.all(ys == 0) or np.all(ys == 1)):
                flagged[a] = 'separation'

    theta = np.zeros(layout.size)
    free = np.ones(layout.size, dtype=bool)
    for a, reason in flagged.items():
        free[a] = False
        if fallback_intercepts is not None:
            theta[a] = fallback_intercepts[a]
        elif reason == 'separation':
            ys = data.y[data.area_idx == a]
            p = np.clip(ys.mean(), 0.5 / (ys.size + 1), 1 - 0.5 / (ys.size + 1))
            theta[a] = logit(p)
        logger.warning(f"⚠️ Zone {a + 1} signalée ({reason}), intercept fixé à {theta[a]:.4f}")

    Z = latent_design(data, spec)
    lat_free = free[:layout.n_latent]
    if spec.gaussian:
        # départ par moindres carrés pondérés, exact pour les paramètres de moyenne
        offset = Z[:, ~lat_free] @ theta[:layout.n_latent][~lat_free]
        Zf = Z[:, lat_free]
        A = (Zf.T * data.w) @ Zf
        b = Zf.T @ (data.w * (data.y - offset))
        try:
            theta[:layout.n_latent][lat_free] = linalg.solve(A, b, assume_a='pos')
        except linalg.LinAlgError:
            raise DataError("fixed-intercepts design is singular")
        resid = data.y - Z @ theta[:layout.n_latent]
        sigma2 = np.dot(data.w, resid ** 2) / data.w.sum()
        theta[layout.log_sigma_eps] = 0.5 * np.log(sigma2) if sigma2 > 0 else -10.0

    tol = settings.inner_tol * max(1.0, float(np.sum(data.w)))
    current = log_pseudo_likelihood(theta, data, spec)
    converged = False
    iterations = 0
    grad_norm = np.inf
    for iterations in range(settings.inner_maxiter + 1):
        grad = weighted_score(theta, data, spec)[free]
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= tol:
            converged = True
            break
        if iterations == settings.inner_maxiter:
            break
        H = weighted_hessian(theta, data, spec)[np.ix_(free, free)]
        try:
            step = linalg.solve(-H, grad, assume_a='pos')
        except linalg.LinAlgError:
            step = linalg.lstsq(-H, grad)[0]
        scale = 1.0
        for _ in range(40):
            candidate = theta.copy()
            candidate[free] += scale * step
            value = log_pseudo_likelihood(candidate, data, spec)
            if np.isfinite(value) and value >= current - 1e-12 * abs(current):
                break
            scale *= 0.5
        theta, current = candidate, value

    if not converged:
        logger.warning(f"⚠️ Pseudo-MLE non convergé: |score| = {grad_norm:.2e}")
    curvature = -weighted_hessian(theta, data, spec)
    return FitResult(mode=theta, spec=spec, curvature=curvature, converged=converged,
                     iterations=iterations, gradient_norm=grad_norm, flagged=flagged)
