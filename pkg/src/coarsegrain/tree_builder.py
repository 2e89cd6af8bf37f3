"""Layer-by-layer construction of an isometric tree from data covariances.

For every neighbouring site pair ``(2i, 2i+1)`` the reduced covariance

    rho_pair = sum_j  w_j (v_{2i} v_{2i}^T) ⊗ (v_{2i+1} v_{2i+1}^T)

is accumulated over the training features, diagonalized, and its dominant
eigenvectors become the isometry ``U_i`` that fuses the two sites into one.
The samples are then pushed through the finished layer and the process
repeats on the coarser sites.  When a prior weight MPS is supplied the pair
covariance is mixed with the matching reduction of ``W W^T``.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import mps as mps_mod
from .errors import ArgumentError, NumericError, ShapeError
from .feature_map import FeatureBatch, ProductFeature
from .tensor_core import eig_truncated

log = logging.getLogger(__name__)

#: projections with relative norm below this count as fully truncated
TRUNCATED_NORM = 1e-13


@dataclass
class PairCovariance:
    """Streaming reduced covariance of one site pair.

    ``matrix`` is the ``(d1*d2, d1*d2)`` matricization (rows ``(s1, s2)``
    row-major).  All weights are stored relative to ``exp(2 * max_log_scale)``
    so the absolute covariance is ``matrix * exp(2 * max_log_scale)``.
    ``weight_sum`` is the (relative) trace, i.e. ``sum_j |Phi_j|^2``.
    """

    dims: tuple
    matrix: np.ndarray
    weight_sum: float = 0.0
    sample_count: int = 0
    max_log_scale: float = -math.inf

    @classmethod
    def empty(cls, d1: int, d2: int) -> "PairCovariance":
        return cls((int(d1), int(d2)), np.zeros((d1 * d2, d1 * d2)))

    def copy(self) -> "PairCovariance":
        return PairCovariance(self.dims, self.matrix.copy(), self.weight_sum,
                              self.sample_count, self.max_log_scale)

    @property
    def tensor(self) -> np.ndarray:
        """Order-4 view ``(s1, s2, s1', s2')``."""
        d1, d2 = self.dims
        return self.matrix.reshape(d1, d2, d1, d2)

    def absolute(self) -> np.ndarray:
        if self.sample_count == 0 or self.max_log_scale == -math.inf:
            return np.zeros_like(self.matrix)
        return self.matrix * math.exp(2.0 * self.max_log_scale)

    def unit_trace(self) -> np.ndarray:
        tr = float(np.trace(self.matrix))
        if not tr > 0.0:
            raise NumericError(f"pair covariance {self.dims} has zero trace")
        return self.matrix / tr

    def _rebase(self, ref: float):
        """Re-express the stored sums relative to a larger reference."""
        if ref == self.max_log_scale:
            return
        if self.max_log_scale != -math.inf:
            f = math.exp(2.0 * (self.max_log_scale - ref))
            self.matrix *= f
            self.weight_sum *= f
        self.max_log_scale = ref


def _pair_log_weights(batch: FeatureBatch, pair_index: int) -> np.ndarray:
    """Half log-weight per sample: ``c_j`` plus, in raw mode, the log norms of
    every site outside the pair."""
    c = batch.log_scale
    if batch.scale_mode != "raw":
        return c.copy()
    ln = batch.site_log_norms()
    i = 2 * pair_index
    return c + ln.sum(axis=1) - ln[:, i] - ln[:, i + 1]


def _accumulate_into(acc: PairCovariance, batch: FeatureBatch, pair_index: int):
    i = 2 * pair_index
    v1, v2 = batch.sites[i], batch.sites[i + 1]
    if (v1.shape[1], v2.shape[1]) != acc.dims:
        raise ShapeError(f"sample pair dims {(v1.shape[1], v2.shape[1])} != accumulator {acc.dims}")
    half = _pair_log_weights(batch, pair_index)
    live = np.isfinite(half)
    if np.any(np.isnan(half)) or np.any(half == np.inf):
        raise NumericError("non-finite sample weight")
    acc.sample_count += len(batch)
    if not np.any(live):
        return acc
    ref = max(acc.max_log_scale, float(half[live].max()))
    acc._rebase(ref)
    root_w = np.zeros(len(batch))
    root_w[live] = np.exp(half[live] - ref)
    x = (v1[:, :, None] * v2[:, None, :]).reshape(len(batch), -1) * root_w[:, None]
    acc.matrix += x.T @ x
    acc.weight_sum += float(np.einsum("ij,ij->", x, x))
    return acc


def accumulate_pair(acc: PairCovariance, sample: Union[ProductFeature, FeatureBatch],
                    pair_index: int) -> PairCovariance:
    """Return ``acc`` with one sample (or a batch) added for sites ``(2i, 2i+1)``."""
    batch = FeatureBatch.from_features([sample]) if isinstance(sample, ProductFeature) else sample
    if not 0 <= pair_index < batch.n_sites // 2:
        raise ArgumentError(f"pair {pair_index} out of range for {batch.n_sites} sites")
    return _accumulate_into(acc.copy(), batch, pair_index)


def merge(a: PairCovariance, b: PairCovariance) -> PairCovariance:
    """Combine accumulators built from disjoint sample shards."""
    if a.dims != b.dims:
        raise ShapeError(f"cannot merge pair covariances {a.dims} and {b.dims}")
    ref = max(a.max_log_scale, b.max_log_scale)
    a2, b2 = a.copy(), b.copy()
    a2._rebase(ref)
    b2._rebase(ref)
    return PairCovariance(a.dims, a2.matrix + b2.matrix, a2.weight_sum + b2.weight_sum,
                          a.sample_count + b.sample_count, ref)


def converged(acc_prev: PairCovariance, acc: PairCovariance, tol: float) -> bool:
    """True when the unit-trace matrices differ by less than ``tol`` (Frobenius)."""
    return bool(np.linalg.norm(acc_prev.unit_trace() - acc.unit_trace()) < tol)


@dataclass
class Isometry:
    """Fuses two sites ``(d1, d2)`` into one of dimension ``out_dim``.

    ``spectrum`` holds the retained eigenvalues of the unit-trace pair
    covariance it was solved from.
    """

    tensor: np.ndarray
    truncation_error: float = 0.0
    spectrum: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def in_dims(self):
        return self.tensor.shape[:2]

    @property
    def out_dim(self) -> int:
        return self.tensor.shape[2]

    def matrix(self) -> np.ndarray:
        d1, d2, out = self.tensor.shape
        return self.tensor.reshape(d1 * d2, out)


def isometry_from_matrix(matrix, dims, cutoff: float, max_dim: Optional[int] = None) -> Isometry:
    d1, d2 = dims
    res = eig_truncated(matrix, cutoff, max_dim)
    tr = float(res.eigenvalues.sum())
    spectrum = res.retained / tr if tr > 0 else res.retained.copy()
    return Isometry(res.eigenvectors.reshape(d1, d2, res.kept), res.truncation_error, spectrum)


def solve_isometry(acc: PairCovariance, cutoff: float, max_dim: Optional[int] = None) -> Isometry:
    """Diagonalize an accumulated pair covariance and keep its dominant eigenvectors."""
    if acc.sample_count == 0:
        raise ArgumentError("cannot solve an isometry from an empty accumulator")
    return isometry_from_matrix(acc.matrix, acc.dims, cutoff, max_dim)


@dataclass
class TreeLayer:
    """One row of isometries; isometry ``i`` consumes sites ``2i, 2i+1``."""

    isometries: List[Isometry]
    passthrough_dim: Optional[int] = None

    @property
    def passthrough(self) -> bool:
        return self.passthrough_dim is not None

    @property
    def in_site_count(self) -> int:
        return 2 * len(self.isometries) + int(self.passthrough)

    @property
    def out_site_count(self) -> int:
        return len(self.isometries) + int(self.passthrough)

    @property
    def in_dims(self):
        dims = [d for iso in self.isometries for d in iso.in_dims]
        return tuple(dims + ([self.passthrough_dim] if self.passthrough else []))

    @property
    def out_dims(self):
        dims = [iso.out_dim for iso in self.isometries]
        return tuple(dims + ([self.passthrough_dim] if self.passthrough else []))


@dataclass
class TreeNetwork:
    """Stack of tree layers, bottom first, plus build metadata."""

    layers: List[TreeLayer]
    in_dims: tuple
    cutoffs: List[float] = field(default_factory=list)
    local_map: str = "affine"
    scale_mode: str = "unit_local"
    mu: float = 0.0
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(self.in_dims)
        for k, layer in enumerate(self.layers):
            if layer.in_dims != dims:
                raise ShapeError(f"layer {k} expects {layer.in_dims}, receives {dims}")
            dims = layer.out_dims
        self.in_dims = tuple(self.in_dims)

    @property
    def out_dims(self):
        return self.layers[-1].out_dims if self.layers else self.in_dims

    @property
    def bond_profile(self):
        return [list(layer.out_dims) for layer in self.layers]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def apply_layer(layer: TreeLayer, sample):
    """Coarse-grain a feature (or batch): new site ``i`` is ``U_i^T (v_2i ⊗ v_2i+1)``.

    In the unit-norm scale modes the projected vector is renormalized and its
    log-norm added to ``log_scale``.  A projection that vanishes flags the
    sample as fully truncated (``log_scale = -inf``).
    """
    single = isinstance(sample, ProductFeature)
    batch = FeatureBatch.from_features([sample]) if single else sample
    if batch.site_dims != layer.in_dims:
        raise ShapeError(f"feature sites {batch.site_dims} do not match layer inputs {layer.in_dims}")
    n = len(batch)
    unit = batch.scale_mode != "raw"
    log_scale = batch.log_scale.copy()
    dead = batch.truncated.copy()
    sites = []
    for i, iso in enumerate(layer.isometries):
        v1, v2 = batch.sites[2 * i], batch.sites[2 * i + 1]
        pair = (v1[:, :, None] * v2[:, None, :]).reshape(n, -1)
        new = pair @ iso.matrix()
        norm = np.linalg.norm(new, axis=1)
        ref = 1.0 if unit else np.linalg.norm(pair, axis=1)
        lost = norm <= TRUNCATED_NORM * ref
        dead |= lost
        if unit:
            safe = np.where(lost, 1.0, norm)
            new = new / safe[:, None]
            with np.errstate(divide="ignore"):
                log_scale += np.log(safe)
        sites.append(new)
    if layer.passthrough:
        sites.append(batch.sites[-1].copy())
    if np.any(dead):
        log_scale[dead] = -np.inf
        for s in sites:
            s[dead] = 0.0
            s[dead, 0] = 1.0
    out = FeatureBatch(sites, log_scale, batch.scale_mode)
    return out[0] if single else out


def fidelity_log(batch: FeatureBatch) -> float:
    """``log(sum_j |Phi_j|^2)`` computed stably."""
    ln = 2.0 * batch.log_norm()
    ln = ln[np.isfinite(ln)]
    if ln.size == 0:
        return -math.inf
    top = ln.max()
    return float(top + math.log(np.exp(ln - top).sum()))


@dataclass
class TreeConfig:
    """Settings for :func:`build_tree`.

    ``layers`` is a count or ``"full"`` (stop when two sites remain).
    ``convergence_tol`` enables early stopping of covariance accumulation;
    chunks are then visited in a seeded random order.
    """

    cutoff: float = 6e-4
    max_dim: Optional[int] = None
    layers: Union[int, str] = "full"
    convergence_tol: Optional[float] = None
    mu: float = 0.0
    prior: Optional[mps_mod.Mps] = None
    chunk_size: int = 2048
    threads: int = 1
    seed: int = 0
    local_map: str = "affine"

    def validate(self):
        if not 0.0 <= self.cutoff < 1.0:
            raise ArgumentError(f"cutoff must lie in [0, 1), got {self.cutoff}")
        if not 0.0 <= self.mu <= 1.0:
            raise ArgumentError(f"mu must lie in [0, 1], got {self.mu}")
        if self.mu > 0 and self.prior is None:
            raise ArgumentError("mu > 0 requires a prior MPS")
        if self.layers != "full" and (not isinstance(self.layers, int) or self.layers < 1):
            raise ArgumentError(f"layers must be 'full' or a positive count, got {self.layers!r}")
        if self.max_dim is not None and self.max_dim < 1:
            raise ArgumentError("max_dim must be >= 1")
        if self.chunk_size < 1 or self.threads < 1:
            raise ArgumentError("chunk_size and threads must be positive")


def _accumulate_chunk(chunk: FeatureBatch, n_pairs: int) -> List[PairCovariance]:
    dims = chunk.site_dims
    accs = []
    for p in range(n_pairs):
        acc = PairCovariance.empty(dims[2 * p], dims[2 * p + 1])
        accs.append(_accumulate_into(acc, chunk, p))
    return accs


def _accumulate_layer(batch: FeatureBatch, n_pairs: int, cfg: TreeConfig, rng):
    """Per-chunk accumulation merged in a fixed chunk order.

    Chunk boundaries depend only on ``chunk_size`` so results do not depend
    on the thread count.
    """
    starts = list(range(0, len(batch), cfg.chunk_size))
    if cfg.convergence_tol is not None:
        starts = [starts[k] for k in rng.permutation(len(starts))]

    def work(start):
        idx = np.arange(start, min(start + cfg.chunk_size, len(batch)))
        return _accumulate_chunk(batch.take(idx), n_pairs)

    total = None
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for k, accs in enumerate(pool.map(work, starts)):
            prev = total
            total = accs if total is None else [merge(a, b) for a, b in zip(total, accs)]
            if cfg.convergence_tol is not None and prev is not None and k + 1 < len(starts):
                live = [(p, t) for p, t in zip(prev, total) if p.weight_sum > 0]
                if live and all(converged(p, t, cfg.convergence_tol) for p, t in live):
                    log.info("pair covariances converged after %d of %d chunks", k + 1, len(starts))
                    break
    return total


def build_tree(samples: FeatureBatch, config: Optional[TreeConfig] = None,
               return_features: bool = False, **overrides):
    """Build an isometric tree from training features.

    Each layer accumulates every pair covariance in one pass over the
    samples, optionally mixes in the prior weight covariance
    ``mu * rho_W / Tr rho_W + (1 - mu) * rho / Tr rho``, solves the
    isometries, then coarse-grains the samples and the prior.
    """
    cfg = config or TreeConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    if isinstance(samples, ProductFeature):
        samples = FeatureBatch.from_features([samples])
    if not isinstance(samples, FeatureBatch) or len(samples) == 0:
        raise ArgumentError("build_tree needs a non-empty FeatureBatch")
    prior = cfg.prior if cfg.mu > 0 else None
    if prior is not None and prior.site_dims != samples.site_dims:
        raise ShapeError(f"prior sites {prior.site_dims} do not match data sites {samples.site_dims}")

    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    current = samples
    layers, stats_layers = [], []
    while True:
        n_sites = current.n_sites
        if cfg.layers == "full":
            if n_sites <= 2:
                break
        elif len(layers) == cfg.layers:
            break
        elif n_sites < 2:
            raise ArgumentError(f"cannot build {cfg.layers} layers from {samples.n_sites} sites")
        n_pairs = n_sites // 2
        accs = _accumulate_layer(current, n_pairs, cfg, rng)
        if prior is not None:
            rho_w = mps_mod.pair_covariances_w(prior, normalized=True)
        isometries = []
        for p, acc in enumerate(accs):
            d = acc.dims[0] * acc.dims[1]
            if prior is None:
                matrix = acc.matrix
            else:
                data = acc.unit_trace() if acc.weight_sum > 0 else np.zeros((d, d))
                matrix = cfg.mu * rho_w[p].reshape(d, d) + (1.0 - cfg.mu) * data
            isometries.append(isometry_from_matrix(matrix, acc.dims, cfg.cutoff, cfg.max_dim))
        layer = TreeLayer(isometries, current.site_dims[-1] if n_sites % 2 else None)
        fid_before = fidelity_log(current)
        current = apply_layer(layer, current)
        if prior is not None:
            prior = mps_mod.coarsen(prior, layer)
        fid_after = fidelity_log(current)
        errs = [iso.truncation_error for iso in isometries]
        stats_layers.append({
            "out_dims": list(layer.out_dims),
            "max_dim": int(max(layer.out_dims)),
            "truncation_error_max": float(max(errs)),
            "truncation_error_mean": float(np.mean(errs)),
            "samples_per_pair": int(accs[0].sample_count),
            "log_fidelity_before": fid_before,
            "log_fidelity_after": fid_after,
            "truncated_samples": int(current.truncated.sum()),
        })
        layers.append(layer)
        log.info("layer %d: %d -> %d sites, max dim %d, max trunc err %.3g",
                 len(layers), n_sites, layer.out_site_count, max(layer.out_dims), max(errs))

    tree = TreeNetwork(
        layers=layers,
        in_dims=samples.site_dims,
        cutoffs=[cfg.cutoff] * len(layers),
        scale_mode=samples.scale_mode,
        mu=float(cfg.mu),
        local_map=cfg.local_map,
        stats={"layers": stats_layers, "n_samples": len(samples),
               "build_seconds": time.perf_counter() - t0},
    )
    if return_features:
        return tree, current
    return tree


def coarse_grain(tree: TreeNetwork, samples):
    """Push features through every layer of ``tree``."""
    out = samples
    for layer in tree.layers:
        out = apply_layer(layer, out)
    return out
