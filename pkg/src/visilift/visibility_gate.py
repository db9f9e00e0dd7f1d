"""
Two-stage visibility gate deciding which Gaussians receive a view's feature.

Stage A keeps the shortest prefix of the descending weight list that covers
tau_view of the view's total visibility, then drops weights under tau_abs.
Stage B caps the count at K_q, the number of weights at or above the
(1 - q)-quantile (lower interpolation). The kept set is the first
min(k_mass, K_q) sorted entries that clear the floor.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from visilift.config import GateConfig
from visilift.splat_visibility import VisibilityInput, ViewVisibility

PREFIX_RTOL = 1e-9


@dataclass(frozen=True)
class GateResult:
    kept: Tuple[int, ...]  # Gaussian indices, descending weight
    k_mass: int
    K_q: int
    k_keep: int
    S_tot: float

    @classmethod
    def empty(cls) -> "GateResult":
        return cls(kept=(), k_mass=0, K_q=0, k_keep=0, S_tot=0.0)


def _columns(records: VisibilityInput) -> Tuple[np.ndarray, np.ndarray]:
    visibility = ViewVisibility.from_records(records)
    return visibility.indices, visibility.weights


def _descending(indices: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Positions sorted by weight descending, ties by ascending Gaussian index"""
    return np.lexsort((indices, -weights))


def view_score(records: VisibilityInput) -> float:
    _, weights = _columns(records)
    return math.fsum(weights.tolist())


def _mass_prefix(sorted_weights: np.ndarray, s_tot: float, tau_view: float) -> int:
    # partial sums within PREFIX_RTOL below the target count as covering
    if tau_view >= 1.0:
        return len(sorted_weights)
    target = tau_view * s_tot * (1.0 - PREFIX_RTOL)
    k = int(np.searchsorted(np.cumsum(sorted_weights), target, side="left")) + 1
    return min(k, len(sorted_weights))


def stage_a(records: VisibilityInput, tau_view: float, tau_abs: float) -> Tuple[int, List[int]]:
    """Mass-coverage prefix length and the floored prefix (Gaussian indices)"""
    indices, weights = _columns(records)
    s_tot = view_score(records)
    if len(weights) == 0 or s_tot <= 0:
        return 0, []
    order = _descending(indices, weights)
    k_mass = _mass_prefix(weights[order], s_tot, tau_view)
    head = order[:k_mass]
    mass_set = [int(i) for i, w in zip(indices[head], weights[head]) if w >= tau_abs]
    return k_mass, mass_set


def stage_b(records: VisibilityInput, q: float) -> int:
    """K_q = number of weights at or above the lower (1 - q)-quantile"""
    _, weights = _columns(records)
    if len(weights) == 0:
        return 0
    tau_q = np.quantile(weights, 1.0 - q, method="lower")
    return int(np.count_nonzero(weights >= tau_q))


def gate(records: VisibilityInput, cfg: GateConfig) -> GateResult:
    indices, weights = _columns(records)
    n = len(weights)
    s_tot = view_score(records)
    if n == 0 or s_tot <= 0:
        return GateResult(kept=(), k_mass=0, K_q=0, k_keep=0, S_tot=s_tot)

    order = _descending(indices, weights)
    k_mass = _mass_prefix(weights[order], s_tot, cfg.tau_view) if cfg.use_mass_stage else n
    K_q = stage_b(records, cfg.q) if cfg.use_quantile_stage else n
    k_keep = min(k_mass, K_q)

    head = order[:k_keep]
    kept = tuple(int(i) for i, w in zip(indices[head], weights[head]) if w >= cfg.tau_abs)
    return GateResult(kept=kept, k_mass=k_mass, K_q=K_q, k_keep=k_keep, S_tot=s_tot)


def pass_through(records: VisibilityInput) -> GateResult:
    """Gating disabled: every visible Gaussian is kept"""
    indices, weights = _columns(records)
    n = len(weights)
    order = _descending(indices, weights)
    kept = tuple(int(i) for i, w in zip(indices[order], weights[order]) if w > 0)
    return GateResult(kept=kept, k_mass=n, K_q=n, k_keep=n, S_tot=view_score(records))


def apply_gate(records: VisibilityInput, cfg: GateConfig, enabled: bool = True) -> GateResult:
    result = gate(records, cfg) if enabled else pass_through(records)
    logging.debug(
        f"Gate: kept {len(result.kept)} of {len(records)} "
        f"(k_mass={result.k_mass}, K_q={result.K_q}, S_tot={result.S_tot:.4f})"
    )
    return result
