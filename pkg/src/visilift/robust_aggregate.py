"""
Multi-view feature fusion on the unit sphere.

The product path is the streaming cosine median: each Gaussian keeps only its
current unit estimate z and cumulative weight W. An observation (f, w) moves
z along the tangent component of f with step w / (W + w). Baselines are the
weighted mean and the Euclidean geometric median (Weiszfeld).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from visilift.errors import ValidationError
from visilift.scene_io import GaussianFeatureField

NORM_GUARD = 1e-9
ANCHOR_TOL = 1e-12


@dataclass(frozen=True)
class FeatureObservation:
    feature: np.ndarray
    weight: float
    view_index: int = 0

    def __post_init__(self):
        f = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        if abs(np.linalg.norm(f) - 1.0) > 1e-4:
            raise ValidationError(f"Observation feature from view {self.view_index} is not unit length")
        if not self.weight > 0:
            raise ValidationError(f"Observation weight must be > 0, got {self.weight}")
        object.__setattr__(self, "feature", f)


@dataclass(frozen=True)
class ObservationBatch:
    """Raw (features, weights) rows; no unit-norm requirement"""

    features: np.ndarray  # (n, d)
    weights: np.ndarray   # (n,)

    @classmethod
    def of(cls, observations: "Observations") -> "ObservationBatch":
        if isinstance(observations, ObservationBatch):
            return observations
        if len(observations) == 0:
            return cls(np.zeros((0, 0)), np.zeros(0))
        return cls(
            np.stack([np.asarray(o.feature, dtype=np.float64) for o in observations]),
            np.array([o.weight for o in observations], dtype=np.float64),
        )

    @classmethod
    def from_arrays(cls, features, weights=None) -> "ObservationBatch":
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        weights = np.ones(len(features)) if weights is None else np.asarray(weights, dtype=np.float64)
        return cls(features, weights)


Observations = Union[Sequence[FeatureObservation], ObservationBatch]


@dataclass(frozen=True)
class MedianState:
    z: np.ndarray
    W: float = 0.0
    t: int = 0

    @classmethod
    def start(cls, first: np.ndarray) -> "MedianState":
        """z_0 = f_1, W_0 = 0"""
        return cls(z=np.asarray(first, dtype=np.float64).copy(), W=0.0, t=0)


def _tangent_step(z: np.ndarray, W: np.ndarray, f: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """One streaming step for each row of z (n, d) against f (n, d)"""
    dot = np.einsum("nd,nd->n", f, z)
    d = f - dot[:, None] * z
    eta = w / (W + w)
    step = z + eta[:, None] * d
    norm = np.linalg.norm(step, axis=1)
    ok = norm >= NORM_GUARD
    z_next = np.where(ok[:, None], step / np.where(ok, norm, 1.0)[:, None], z)
    return z_next, W + w


def streaming_update(state: MedianState, obs: FeatureObservation) -> MedianState:
    z, W = _tangent_step(
        state.z[None, :], np.array([state.W]), obs.feature[None, :], np.array([float(obs.weight)])
    )
    return MedianState(z=z[0], W=float(W[0]), t=state.t + 1)


def aggregate_stream(observations: Sequence[FeatureObservation], epochs: int = 1,
                     dim: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """
    Fold streaming_update over an ordered stream.

    Args:
        observations: ordered by ascending view index (caller contract)
        epochs: passes over the stream; anything above 1 is for convergence checks
        dim: feature size reported for an empty stream

    Returns:
        (z, W); an empty stream gives the zero vector and W = 0
    """
    if len(observations) == 0:
        return np.zeros(dim or 0), 0.0
    state = MedianState.start(observations[0].feature)
    for _ in range(epochs):
        for obs in observations:
            state = streaming_update(state, obs)
    return state.z, state.W


def weighted_mean(observations: Observations) -> np.ndarray:
    batch = ObservationBatch.of(observations)
    total = batch.weights.sum()
    if total <= 0:
        return np.zeros(batch.features.shape[1])
    return (batch.weights @ batch.features) / total


def weiszfeld_iterates(observations: Observations, max_iters: int = 500,
                       eps: float = 1e-10) -> Iterator[np.ndarray]:
    """Yield the Weiszfeld iterates, starting at the weighted mean"""
    batch = ObservationBatch.of(observations)
    F, w = batch.features, batch.weights
    z = weighted_mean(batch)
    yield z
    for _ in range(max_iters):
        dist = np.linalg.norm(F - z, axis=1)
        near = dist < ANCHOR_TOL
        if near.any():
            yield F[int(np.argmax(near))].copy()
            return
        inv = w / dist
        z_next = (inv @ F) / inv.sum()
        step = np.linalg.norm(z_next - z)
        z = z_next
        yield z
        if step < eps:
            return


def weiszfeld_median(observations: Observations, max_iters: int = 500, eps: float = 1e-10) -> np.ndarray:
    z = None
    for z in weiszfeld_iterates(observations, max_iters, eps):
        pass
    return z


def weiszfeld_objective(z: np.ndarray, observations: Observations) -> float:
    batch = ObservationBatch.of(observations)
    return float(batch.weights @ np.linalg.norm(batch.features - z, axis=1))


def tangent_gradient(z: np.ndarray, observations: Observations) -> np.ndarray:
    """Sum of w (f - (f.z) z): the negative Riemannian gradient of the weighted cosine loss"""
    batch = ObservationBatch.of(observations)
    z = np.asarray(z, dtype=np.float64)
    dots = batch.features @ z
    return batch.weights @ (batch.features - dots[:, None] * z[None, :])


def dispersion(observations: Observations, z: np.ndarray) -> float:
    """Unweighted mean of (1 - f.z)"""
    batch = ObservationBatch.of(observations)
    if len(batch.weights) == 0:
        raise ValidationError("Dispersion needs at least one observation")
    return float(np.mean(1.0 - batch.features @ np.asarray(z, dtype=np.float64)))


def scene_dispersion(field: GaussianFeatureField, observations: Mapping[int, Observations]) -> float:
    """Mean per-Gaussian dispersion over Gaussians with W > 0"""
    values = []
    for i in np.flatnonzero(field.valid):
        obs = observations.get(int(i))
        if obs is None or len(ObservationBatch.of(obs).weights) == 0:
            continue
        values.append(dispersion(obs, field.features[i].astype(np.float64)))
    if not values:
        logging.warning("No observed Gaussians; scene dispersion is reported as 0")
        return 0.0
    return float(np.mean(values))


# =============================================================================
# Per-Gaussian aggregators used by the lift
# =============================================================================

class StreamingMedianField:
    """Constant-memory MedianStates for every Gaussian, stored as arrays"""

    def __init__(self, count: int, dim: int):
        self.z = np.zeros((count, dim), dtype=np.float64)
        self.W = np.zeros(count, dtype=np.float64)
        self.t = np.zeros(count, dtype=np.int64)

    def update(self, indices: np.ndarray, features: np.ndarray, weights: np.ndarray):
        """Apply one view's observations; indices must be unique within the call"""
        if len(indices) == 0:
            return
        z = self.z[indices]
        fresh = self.t[indices] == 0
        z[fresh] = features[fresh]
        z_next, W_next = _tangent_step(z, self.W[indices], features, weights)
        self.z[indices] = z_next
        self.W[indices] = W_next
        self.t[indices] += 1

    @property
    def nbytes(self) -> int:
        return self.z.nbytes + self.W.nbytes + self.t.nbytes

    def field(self) -> GaussianFeatureField:
        z = np.where((self.W > 0)[:, None], self.z, 0.0)
        return _to_field(z, self.W)


class WeightedMeanField:
    """Running sums of w f and w per Gaussian"""

    def __init__(self, count: int, dim: int):
        self.sums = np.zeros((count, dim), dtype=np.float64)
        self.W = np.zeros(count, dtype=np.float64)

    def update(self, indices: np.ndarray, features: np.ndarray, weights: np.ndarray):
        self.sums[indices] += weights[:, None] * features
        self.W[indices] += weights

    @property
    def nbytes(self) -> int:
        return self.sums.nbytes + self.W.nbytes

    def field(self) -> GaussianFeatureField:
        return _to_field(self.sums, self.W)


class BufferedMedianField:
    """Buffers every observation per Gaussian, then takes the Weiszfeld median"""

    def __init__(self, count: int, dim: int, max_iters: int = 500, eps: float = 1e-10):
        self.dim = dim
        self.max_iters = max_iters
        self.eps = eps
        self.W = np.zeros(count, dtype=np.float64)
        self.buffers: Dict[int, List[Tuple[np.ndarray, float]]] = {}

    def update(self, indices: np.ndarray, features: np.ndarray, weights: np.ndarray):
        for i, f, w in zip(indices.tolist(), features, weights.tolist()):
            self.buffers.setdefault(i, []).append((f.copy(), w))
            self.W[i] += w

    @property
    def nbytes(self) -> int:
        return self.W.nbytes + sum(len(b) * (self.dim + 1) * 8 for b in self.buffers.values())

    def field(self) -> GaussianFeatureField:
        z = np.zeros((len(self.W), self.dim), dtype=np.float64)
        for i, entries in self.buffers.items():
            batch = ObservationBatch(np.stack([f for f, _ in entries]), np.array([w for _, w in entries]))
            z[i] = weiszfeld_median(batch, self.max_iters, self.eps)
        return _to_field(z, self.W)


def _to_field(vectors: np.ndarray, W: np.ndarray) -> GaussianFeatureField:
    """Normalize rows; rows that cancel to (near) zero become invalid with W = 0"""
    norms = np.linalg.norm(vectors, axis=1)
    valid = (W.astype(np.float32) > 0) & (norms > NORM_GUARD * np.maximum(W, 1.0))
    dropped = int(np.count_nonzero((W > 0) & ~valid))
    if dropped:
        logging.warning(f"{dropped} Gaussians aggregated to a degenerate direction and are stored as invalid")
    features = np.zeros_like(vectors)
    features[valid] = vectors[valid] / norms[valid, None]
    return GaussianFeatureField(features, np.where(valid, W, 0.0))


def make_aggregator(name: str, count: int, dim: int, max_iters: int = 500, eps: float = 1e-10):
    if name == "cosine-median":
        return StreamingMedianField(count, dim)
    if name == "weighted-mean":
        return WeightedMeanField(count, dim)
    if name == "l1-median":
        return BufferedMedianField(count, dim, max_iters, eps)
    raise ValidationError(f"Unknown aggregator '{name}'")


class DispersionAccumulator:
    """Running per-Gaussian sums of (1 - f.z) against a fixed field"""

    def __init__(self, field: GaussianFeatureField):
        self.z = field.features.astype(np.float64)
        self.valid = field.valid
        self.sums = np.zeros(field.count, dtype=np.float64)
        self.counts = np.zeros(field.count, dtype=np.int64)

    def update(self, indices: np.ndarray, features: np.ndarray):
        self.sums[indices] += 1.0 - np.einsum("nd,nd->n", features, self.z[indices])
        self.counts[indices] += 1

    def per_gaussian(self) -> np.ndarray:
        out = np.zeros_like(self.sums)
        seen = self.counts > 0
        out[seen] = self.sums[seen] / self.counts[seen]
        return out

    def value(self) -> float:
        scored = self.valid & (self.counts > 0)
        if not scored.any():
            logging.warning("No observed Gaussians; scene dispersion is reported as 0")
            return 0.0
        return float(np.mean(self.per_gaussian()[scored]))
