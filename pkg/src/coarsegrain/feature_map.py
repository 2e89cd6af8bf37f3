"""Tensor-product feature maps kept in rank-1 (product) form.

A sample ``x`` of length N maps to ``Phi(x) = phi(x_1) ⊗ ... ⊗ phi(x_N)``,
a vector of dimension ``d**N`` that is never formed explicitly.  Instead we
store the N local vectors and a natural-log scale ``c`` so that

    Phi(x) = exp(c) * (site_1 ⊗ site_2 ⊗ ... ⊗ site_N)

Scale modes:

``unit_local``
    every site vector is normalized and the log-norms are summed into ``c``.
    Exactly the same vector as ``raw`` but free of overflow.
``raw``
    site vectors stored as produced by the local map, ``c = 0``.
``normalized``
    like ``unit_local`` but ``c`` starts at 0, i.e. each ``Phi(x)`` is
    rescaled to unit norm before anything else sees it.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ArgumentError, CapacityError, DomainError, ShapeError

SCALE_MODES = ("unit_local", "raw", "normalized")
DENSE_LIMIT = 2**20
CLAMP_SLACK = 1e-9


@dataclass(frozen=True)
class LocalMap:
    """Per-component feature map ``phi: [0, 1] -> R^d``.

    ``affine`` is ``[1, x]``; ``trig`` is ``[cos(pi x / 2), sin(pi x / 2)]``.
    """

    kind: str = "affine"

    def __post_init__(self):
        if self.kind not in ("affine", "trig"):
            raise ArgumentError(f"unknown local map {self.kind!r}")

    @property
    def dim(self) -> int:
        return 2

    @property
    def unit_functional(self):
        """Coefficients ``a`` with ``a . phi(x) == 1`` for all x, if any.

        Needed to build MPS lifts of additive models; the trig map has none.
        """
        if self.kind == "affine":
            return np.array([1.0, 0.0])
        return None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "affine":
            return np.stack([np.ones_like(x), x], axis=-1)
        h = 0.5 * np.pi * x
        return np.stack([np.cos(h), np.sin(h)], axis=-1)


def _check_mode(mode):
    if mode not in SCALE_MODES:
        raise ArgumentError(f"unknown scale mode {mode!r}; expected one of {SCALE_MODES}")


@dataclass
class ProductFeature:
    """One sample in feature space: ``exp(log_scale) * ⊗ sites``."""

    sites: List[np.ndarray]
    log_scale: float = 0.0
    scale_mode: str = "unit_local"

    def __post_init__(self):
        if len(self.sites) < 1:
            raise ArgumentError("a product feature needs at least one site")
        self.sites = [np.asarray(s, dtype=np.float64) for s in self.sites]
        self.log_scale = float(self.log_scale)

    def __len__(self):
        return len(self.sites)

    @property
    def site_dims(self):
        return tuple(s.shape[0] for s in self.sites)

    @property
    def truncated(self) -> bool:
        return self.log_scale == -math.inf

    def log_norm(self) -> float:
        """Natural log of the norm of the represented vector."""
        if self.truncated:
            return -math.inf
        return self.log_scale + sum(math.log(np.linalg.norm(s)) for s in self.sites)


@dataclass
class FeatureBatch:
    """Many product features sharing one site structure.

    ``sites[k]`` has shape ``(n_samples, d_k)``; ``log_scale`` has shape
    ``(n_samples,)``.  A ``log_scale`` of ``-inf`` flags a sample whose
    projection was entirely truncated away.
    """

    sites: List[np.ndarray]
    log_scale: np.ndarray
    scale_mode: str = "unit_local"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _check_mode(self.scale_mode)
        if not self.sites:
            raise ArgumentError("a feature batch needs at least one site")
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        n = self.log_scale.shape[0]
        for k, s in enumerate(self.sites):
            if s.ndim != 2 or s.shape[0] != n:
                raise ShapeError(f"site {k} has shape {s.shape}, expected ({n}, d)")

    def __len__(self):
        return self.log_scale.shape[0]

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def site_dims(self):
        return tuple(s.shape[1] for s in self.sites)

    @property
    def truncated(self) -> np.ndarray:
        return self.log_scale == -np.inf

    def __getitem__(self, j) -> ProductFeature:
        return ProductFeature([s[j].copy() for s in self.sites], self.log_scale[j], self.scale_mode)

    def __iter__(self):
        for j in range(len(self)):
            yield self[j]

    def take(self, idx) -> "FeatureBatch":
        idx = np.asarray(idx)
        return FeatureBatch([s[idx] for s in self.sites], self.log_scale[idx], self.scale_mode)

    def chunks(self, size: int):
        for start in range(0, len(self), size):
            yield self.take(np.arange(start, min(start + size, len(self))))

    def site_log_norms(self) -> np.ndarray:
        """``(n_samples, n_sites)`` log-norms of the stored site vectors."""
        if "lognorm" not in self._cache:
            with np.errstate(divide="ignore"):
                self._cache["lognorm"] = np.stack(
                    [np.log(np.linalg.norm(s, axis=1)) for s in self.sites], axis=1
                )
        return self._cache["lognorm"]

    def log_norm(self) -> np.ndarray:
        """Log of ``|Phi_j|`` for every sample."""
        if self.scale_mode == "raw":
            return self.log_scale + self.site_log_norms().sum(axis=1)
        return self.log_scale.copy()

    @classmethod
    def from_features(cls, features: Sequence[ProductFeature]) -> "FeatureBatch":
        features = list(features)
        if not features:
            raise ArgumentError("no features given")
        dims = features[0].site_dims
        if any(f.site_dims != dims for f in features):
            raise ShapeError("features do not share a site structure")
        sites = [np.stack([f.sites[k] for f in features]) for k in range(len(dims))]
        return cls(sites, np.array([f.log_scale for f in features]), features[0].scale_mode)


def _validate_inputs(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise DomainError(f"non-finite input at index {tuple(int(i) for i in bad)}")
    out_of_range = (x < 0.0) | (x > 1.0)
    if np.any(out_of_range):
        far = (x < -CLAMP_SLACK) | (x > 1.0 + CLAMP_SLACK)
        if np.any(far):
            bad = tuple(int(i) for i in np.argwhere(far)[0])
            raise DomainError(f"input {x[bad]:.6g} at index {bad} outside [0, 1]")
        warnings.warn("clamping inputs marginally outside [0, 1]", RuntimeWarning, stacklevel=3)
        x = np.clip(x, 0.0, 1.0)
    return x


def map_batch(x, local_map: LocalMap = LocalMap(), mode: str = "unit_local") -> FeatureBatch:
    """Map an ``(n_samples, N)`` array of inputs in [0, 1] to product features."""
    _check_mode(mode)
    x = _validate_inputs(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"expected (n_samples, N) inputs, got shape {x.shape}")
    phi = local_map(x)  # (n, N, d)
    log_scale = np.zeros(x.shape[0])
    if mode != "raw":
        norms = np.linalg.norm(phi, axis=2)
        phi = phi / norms[:, :, None]
        if mode == "unit_local":
            log_scale = np.log(norms).sum(axis=1)
    sites = [np.ascontiguousarray(phi[:, k, :]) for k in range(x.shape[1])]
    return FeatureBatch(sites, log_scale, mode)


def map_input(x, local_map: LocalMap = LocalMap(), mode: str = "unit_local") -> ProductFeature:
    """Map one input vector with entries in [0, 1] to a product feature."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    x = _validate_inputs(x)  # report indices relative to the vector
    return map_batch(x[None, :], local_map, mode)[0]


def rasterize(image) -> np.ndarray:
    """Flatten an image row by row (row 0 left to right, then row 1, ...)."""
    image = np.asarray(image)
    if image.size == 0:
        raise ArgumentError("cannot rasterize an empty image")
    if image.ndim == 1:
        return image.copy()
    if image.ndim != 2:
        raise ShapeError(f"expected an H x W image, got shape {image.shape}")
    return image.reshape(-1).copy()


def scale_pixels(pixels) -> np.ndarray:
    """Raw bytes to [0, 1]: divide by 255."""
    return np.asarray(pixels, dtype=np.float64) / 255.0


def images_to_batch(images, local_map=LocalMap(), mode="unit_local") -> FeatureBatch:
    """Rasterize and scale a stack of byte images, then map to features."""
    images = np.asarray(images)
    if images.size == 0:
        raise ArgumentError("no images given")
    flat = images.reshape(images.shape[0], -1)
    return map_batch(scale_pixels(flat), local_map, mode)


def dense_feature(f: ProductFeature, limit: int = DENSE_LIMIT) -> np.ndarray:
    """Explicit order-N tensor ``exp(c) ⊗_k site_k`` (small N only)."""
    size = int(np.prod(f.site_dims, dtype=np.float64))
    if size > limit:
        raise CapacityError(f"dense feature would have {size} entries (limit {limit})")
    out = np.array(math.exp(f.log_scale) if not f.truncated else 0.0)
    for s in f.sites:
        out = np.multiply.outer(out, s)
    return out
