#!/usr/bin/env python3
"""
Rescaling des tirages pseudo-a posteriori par l'effet de plan.

Les tirages du modèle hiérarchique passent en paramétrisation à intercepts
fixes, puis sont ajustés par

    theta_ws = (theta - theta_bar) R2^{-1} R1 + theta_bar

avec R1'R1 = H^-1 J H^-1 et R2'R2 = H^-1. H est l'information observée de la
log-vraisemblance pondérée au pseudo-MLE, J la covariance du score pondéré
total, estimée par un bootstrap rééchelonné des UPs dans les strates. Les deux
sont à l'échelle du total: leurs normalisations se compensent.
"""

import logging
import os
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from inference import (FitResult, InferenceSettings, PseudoPosteriorDraws,
                       fit_pseudo_mle_fixed)
from model import ModelSpec, as_model_data, unit_scores, weighted_hessian, weighted_score
from sae_errors import ParameterLayoutError, SingletonStratumError, SingularMatrixError

logger = logging.getLogger(__name__)


@dataclass
class DesignEffectMatrices:
    H_hat: np.ndarray
    J_hat: np.ndarray
    free: np.ndarray
    positive_definite: bool
    R1: Optional[np.ndarray] = None
    R2: Optional[np.ndarray] = None
    names: Optional[list] = None

    @property
    def dim(self) -> int:
        return int(self.H_hat.shape[0])

    @property
    def adjustment(self) -> np.ndarray:
        """R2^{-1} R1 sur le bloc libre, identité ailleurs"""
        A = np.eye(self.dim)
        if not self.positive_definite:
            return A
        diag = np.abs(np.diag(self.R2))
        if np.any(diag <= np.finfo(float).tiny):
            raise SingularMatrixError("R2 is singular")
        A[np.ix_(self.free, self.free)] = linalg.solve_triangular(self.R2, self.R1, lower=False)
        return A

    def to_csv(self, directory: str, prefix: str = 'design_effect') -> None:
        os.makedirs(directory, exist_ok=True)
        names = self.names or [f'theta{k}' for k in range(self.dim)]
        for label, matrix in (('H', self.H_hat), ('J', self.J_hat), ('adjustment', self.adjustment)):
            path = os.path.join(directory, f'{prefix}_{label}.csv')
            pd.DataFrame(matrix, index=names, columns=names).to_csv(path)
        logger.debug(f"💾 Matrices H/J sauvegardées dans {directory}")


def to_fixed_parameterization(draws: PseudoPosteriorDraws) -> PseudoPosteriorDraws:
    """beta0_i = beta0 + u_i par tirage; beta et log sigma_eps conservés, sigma_u abandonné"""
    spec = draws.spec
    if not spec.hierarchical:
        raise ParameterLayoutError("draws are already in the fixed-intercepts parameterization")
    src = spec.layout
    fixed = spec.as_fixed()
    dst = fixed.layout
    out = np.empty((draws.K, dst.size))
    out[:, dst.intercept] = draws.draws[:, src.intercept] + draws.draws[:, src.u]
    out[:, dst.beta] = draws.draws[:, src.beta]
    if spec.gaussian:
        out[:, dst.log_sigma_eps] = draws.draws[:, src.log_sigma_eps]
    return PseudoPosteriorDraws(draws=out, spec=fixed, provenance=draws.provenance)


def numerical_information(theta: np.ndarray, sample, spec: ModelSpec, weights=None) -> np.ndarray:
    """-d(score)/d(theta) par différences centrées, pas 1e-5 mis à l'échelle de |theta|"""
    data = as_model_data(sample, spec, weights)
    d = theta.size
    out = np.zeros((d, d))
    for k in range(d):
        h = 1e-5 * max(1.0, abs(theta[k]))
        e = np.zeros(d)
        e[k] = h
        out[:, k] = -(weighted_score(theta + e, data, spec) - weighted_score(theta - e, data, spec)) / (2.0 * h)
    return 0.5 * (out + out.T)


def estimate_H(fit: FitResult, sample, spec: ModelSpec, weights=None) -> np.ndarray:
    """Information observée au pseudo-MLE, contrôlée par différences finies"""
    spec = spec.as_fixed()
    if not fit.converged:
        logger.warning("⚠️ H estimé à un pseudo-MLE non convergé")
    data = as_model_data(sample, spec, weights)
    H = -weighted_hessian(fit.mode, data, spec)
    H = 0.5 * (H + H.T)
    numeric = numerical_information(fit.mode, data, spec)
    scale = max(np.linalg.norm(H), 1e-300)
    disagreement = np.linalg.norm(numeric - H) / scale
    if disagreement > 1e-4:
        logger.warning(f"⚠️ Hessienne analytique et numérique divergent (écart relatif {disagreement:.2e})")
    return H


def estimate_J(fit: FitResult, sample, spec: ModelSpec, B: int = 100,
               rng: Optional[np.random.Generator] = None, weights: str = 'w_norm') -> np.ndarray:
    """
    Covariance du score pondéré total sur B réplicats du bootstrap rééchelonné.

    Chaque réplicat garde m_h = floor(n_h / 2) UPs par strate (sans remise) et
    utilise les poids w * (1 - lam + lam * n_h / m_h * delta) avec
    lam = sqrt(m_h / (n_h - m_h)).
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    rng = rng if rng is not None else np.random.default_rng()
    spec = spec.as_fixed()
    table = sample.table
    w = table[weights].to_numpy(dtype=float)
    G = unit_scores(fit.mode, sample, spec)

    strata = table['stratum_id'].to_numpy()
    psus = table['psu_id'].to_numpy()
    layout = []
    for stratum in np.unique(strata):
        rows = np.flatnonzero(strata == stratum)
        labels, codes = np.unique(psus[rows], return_inverse=True)
        n_h = labels.size
        if n_h < 2:
            label = stratum.item() if isinstance(stratum, np.generic) else stratum
            raise SingletonStratumError(f"stratum {label} has a single PSU", stratum=label)
        m_h = n_h // 2
        lam = np.sqrt(m_h / (n_h - m_h))
        layout.append((rows, codes, n_h, m_h, lam))

    scores = np.empty((B, G.shape[1]))
    for b in range(B):
        multiplier = np.empty(w.shape[0])
        for rows, codes, n_h, m_h, lam in layout:
            kept = np.zeros(n_h)
            kept[rng.choice(n_h, size=m_h, replace=False)] = 1.0
            multiplier[rows] = 1.0 - lam + lam * (n_h / m_h) * kept[codes]
        scores[b] = (w * multiplier) @ G
    J = np.cov(scores, rowvar=False, ddof=1)
    return np.atleast_2d(0.5 * (J + J.T))


def _upper_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Facteur supérieur R tel que R'R = matrix, petite crête si la matrice est semi-définie"""
    matrix = 0.5 * (matrix + matrix.T)
    ridge = 0.0
    base = max(np.trace(matrix) / max(matrix.shape[0], 1), 1e-300)
    for _ in range(8):
        try:
            return linalg.cholesky(matrix + ridge * np.eye(matrix.shape[0]), lower=False)
        except linalg.LinAlgError:
            ridge = base * 1e-12 if ridge == 0.0 else ridge * 100.0
    raise SingularMatrixError("matrix is not positive semidefinite")


def design_effect_matrices(H: np.ndarray, J: np.ndarray, free: Optional[np.ndarray] = None,
                           names: Optional[list] = None) -> DesignEffectMatrices:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    J = np.atleast_2d(np.asarray(J, dtype=float))
    if H.shape != J.shape or H.shape[0] != H.shape[1]:
        raise ParameterLayoutError("H and J must be square matrices of the same size")
    free = np.ones(H.shape[0], dtype=bool) if free is None else np.asarray(free, dtype=bool)
    Hf = H[np.ix_(free, free)]
    Jf = J[np.ix_(free, free)]
    try:
        chol = linalg.cho_factor(Hf, lower=False)
    except linalg.LinAlgError:
        logger.warning("⚠️ H n'est pas définie positive, pas de rescaling")
        return DesignEffectMatrices(H_hat=H, J_hat=J, free=free, positive_definite=False, names=names)
    H_inv = linalg.cho_solve(chol, np.eye(Hf.shape[0]))
    H_inv = 0.5 * (H_inv + H_inv.T)
    R1 = _upper_cholesky(H_inv @ Jf @ H_inv)
    R2 = _upper_cholesky(H_inv)
    return DesignEffectMatrices(H_hat=H, J_hat=J, free=free, positive_definite=True,
                                R1=R1, R2=R2, names=names)


def rescale_draws(draws: PseudoPosteriorDraws, mats: DesignEffectMatrices,
                  center: Optional[np.ndarray] = None) -> PseudoPosteriorDraws:
    """Ajustement affine autour de la moyenne des tirages (ou d'un centre fourni, p. ex. le pseudo-MLE)"""
    if draws.draws.shape[1] != mats.dim:
        raise ParameterLayoutError("draw dimension does not match the design effect matrices",
                                   expected=mats.dim)
    if not mats.positive_definite:
        logger.warning("⚠️ Rescaling ignoré: tirages transmis sans ajustement")
        return draws
    theta_bar = draws.mean() if center is None else np.asarray(center, dtype=float)
    adjusted = (draws.draws - theta_bar) @ mats.adjustment + theta_bar
    return replace(draws, draws=adjusted, provenance='weighted-rescaled')


def adjust_pseudo_posterior(sample, spec: ModelSpec, hierarchical_draws: PseudoPosteriorDraws,
                            B: int = 100, rng: Optional[np.random.Generator] = None,
                            center: str = 'mean',
                            settings: Optional[InferenceSettings] = None
                            ) -> Tuple[PseudoPosteriorDraws, DesignEffectMatrices, FitResult]:
    """Changement de paramétrisation, pseudo-MLE à intercepts fixes, estimation de H et J, rescaling"""
    fixed_draws = to_fixed_parameterization(hierarchical_draws)
    fixed_spec = fixed_draws.spec
    fallback = fixed_draws.mean()[fixed_spec.layout.intercept]
    fit = fit_pseudo_mle_fixed(sample, fixed_spec, fallback_intercepts=fallback, settings=settings)
    H = estimate_H(fit, sample, fixed_spec)
    J = estimate_J(fit, sample, fixed_spec, B=B, rng=rng)
    free = np.ones(fixed_spec.layout.size, dtype=bool)
    free[list(fit.flagged)] = False
    mats = design_effect_matrices(H, J, free=free, names=fixed_spec.layout.names())
    anchor = fit.mode if center == 'mle' else None
    return rescale_draws(fixed_draws, mats, center=anchor), mats, fit
