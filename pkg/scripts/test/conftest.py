import numpy as np
import pandas as pd
import pytest

from design import DrawnSample, normalize_weights
from popgen import PopulationConfig, generate_aux_frame, simulate_responses
from seeds import random_stream


def _population(family: str, seed: int):
    cfg = PopulationConfig(m=4, clusters_per_area=8, cluster_size=10, family=family, seed=seed)
    frame = generate_aux_frame(cfg, random_stream(cfg.seed, 'aux'))
    return cfg, simulate_responses(frame, cfg, random_stream(cfg.seed, 'responses', 0))


@pytest.fixture
def gaussian_population():
    return _population('gaussian', 11)


@pytest.fixture
def logit_population():
    return _population('bernoulli-logit', 12)


@pytest.fixture
def make_sample():
    """Construit un DrawnSample normalisé à partir de tableaux simples (une UP par unité par défaut)"""

    def build(y, area, w_raw=None, x1=None, psu=None, stratum=None, psu_population=None):
        y = np.asarray(y, dtype=float)
        n = y.size
        area = np.asarray(area)
        w_raw = np.ones(n) if w_raw is None else np.asarray(w_raw, dtype=float)
        table = pd.DataFrame({
            'unit_id': np.arange(1, n + 1),
            'area': area,
            'cluster': np.arange(1, n + 1) if psu is None else np.asarray(psu),
            'psu_id': np.arange(1, n + 1) if psu is None else np.asarray(psu),
            'stratum_id': area if stratum is None else np.asarray(stratum),
            'pi': 1.0 / w_raw,
            'w_raw': w_raw,
            'w_norm': w_raw,
            'y': y,
            'x1': np.zeros(n) if x1 is None else np.asarray(x1, dtype=float),
        })
        return normalize_weights(DrawnSample.from_frame(table, psu_population=psu_population))

    return build
