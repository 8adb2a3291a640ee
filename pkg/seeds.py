"""
Flux aléatoires reproductibles indexés par (seed, purpose, replication).

Chaque flux est un générateur Philox initialisé par une SeedSequence dont la
spawn key encode l'usage et l'indice de réplication: base auxiliaire,
réplications et méthodes tirent dans des flux indépendants de l'ordre
d'exécution.
"""

from typing import Dict

import numpy as np

PURPOSES: Dict[str, int] = {
    'aux': 0,
    'responses': 1,
    'sample': 2,
    'draws': 3,
    'resample': 4,
    'estimate': 5,
}


def random_stream(seed: int, purpose: str, replication: int = 0) -> np.random.Generator:
    """Générateur Philox pour un triplet (seed, purpose, replication)"""
    if purpose not in PURPOSES:
        raise KeyError(f"Unknown stream purpose: {purpose}")
    if replication < 0:
        raise ValueError("replication index must be >= 0")
    seq = np.random.SeedSequence(
        entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
        spawn_key=(PURPOSES[purpose], int(replication)),
    )
    return np.random.Generator(np.random.Philox(seq))
