"""Matrix product states for weight tensors.

Site tensors are stored as ``(left_bond, site, right_bond)`` arrays.  At most
one tensor, the *label site*, carries a fourth trailing index running over
class labels: ``(left_bond, site, right_bond, n_labels)``.  The boundary
bonds have dimension 1.
"""

import math
from typing import List, Optional

import numpy as np

from .errors import ArgumentError, ShapeError
from .feature_map import FeatureBatch, LocalMap, ProductFeature


class Mps:
    """Chain factorization ``W^{s1..sN}_l = A1[s1] A2[s2] ... AN[sN]``."""

    def __init__(self, tensors, label_site: Optional[int] = None):
        self.tensors: List[np.ndarray] = [np.asarray(t, dtype=np.float64) for t in tensors]
        self.label_site = label_site
        self._validate()

    def _validate(self):
        n = len(self.tensors)
        if n < 1:
            raise ArgumentError("an MPS needs at least one tensor")
        if self.label_site is not None and not 0 <= self.label_site < n:
            raise ArgumentError(f"label site {self.label_site} out of range")
        for k, t in enumerate(self.tensors):
            want = 4 if k == self.label_site else 3
            if t.ndim != want:
                raise ShapeError(f"tensor {k} has order {t.ndim}, expected {want}")
            if not np.all(np.isfinite(t)):
                raise ArgumentError(f"tensor {k} has non-finite entries")
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[2] != 1:
            raise ShapeError("boundary bonds must have dimension 1")
        for k in range(n - 1):
            if self.tensors[k].shape[2] != self.tensors[k + 1].shape[0]:
                raise ShapeError(f"bond mismatch between tensors {k} and {k + 1}")

    def __len__(self):
        return len(self.tensors)

    def __repr__(self):
        return f"Mps(sites={self.site_dims}, bonds={self.bond_dims}, labels={self.n_labels})"

    @property
    def site_dims(self):
        return tuple(t.shape[1] for t in self.tensors)

    @property
    def bond_dims(self):
        return tuple(t.shape[2] for t in self.tensors[:-1])

    @property
    def n_labels(self) -> int:
        if self.label_site is None:
            return 1
        return self.tensors[self.label_site].shape[3]

    def copy(self) -> "Mps":
        return Mps([t.copy() for t in self.tensors], self.label_site)

    def _with_label(self, k):
        """Tensor ``k`` as an order-4 array (label axis of size 1 if absent)."""
        t = self.tensors[k]
        return t if k == self.label_site else t[..., None]

    def to_dense(self, limit: int = 2**20) -> np.ndarray:
        """Dense ``(s1, ..., sN[, label])`` tensor; small MPS only."""
        if np.prod(self.site_dims, dtype=np.float64) * self.n_labels > limit:
            raise ArgumentError("MPS too large to densify")
        acc = np.ones((1, 1, 1))  # (physical, bond, label)
        for k in range(len(self)):
            t = self._with_label(k)
            acc = np.einsum("pal,asbm->psblm", acc, t)
            p, s, b, l, m = acc.shape
            if l > 1 and m > 1:
                raise ShapeError("more than one label index")
            acc = acc.reshape(p * s, b, l * m)
        dense = acc[:, 0, :].reshape(self.site_dims + (acc.shape[2],))
        return dense if self.label_site is not None else dense[..., 0]

    def norm_squared(self) -> float:
        """``Tr rho_W = sum_l |W_l|^2`` by self-contraction."""
        env, log_scale = _left_envs(self)[-1]
        return float(env[0, 0]) * math.exp(log_scale)


def _transfer(env, t):
    """Push a (bond, bond) environment through one order-4 tensor pair."""
    return np.einsum("ac,asbl,csdl->bd", env, t, t, optimize=True)


def _left_envs(w: Mps):
    """``envs[k]`` contracts tensors ``< k``; stored as (normalized env, log scale)."""
    envs = [(np.ones((1, 1)), 0.0)]
    for k in range(len(w)):
        env, log_scale = envs[-1]
        nxt = _transfer(env, w._with_label(k))
        s = float(np.abs(nxt).max(initial=0.0))
        if s > 0:
            nxt = nxt / s
            log_scale += math.log(s)
        envs.append((nxt, log_scale))
    return envs


def _right_envs(w: Mps):
    """``envs[k]`` contracts tensors ``>= k``; ``envs[len(w)]`` is the boundary."""
    envs = [None] * (len(w) + 1)
    envs[len(w)] = (np.ones((1, 1)), 0.0)
    for k in range(len(w) - 1, -1, -1):
        env, log_scale = envs[k + 1]
        t = w._with_label(k)
        nxt = np.einsum("bd,asbl,csdl->ac", env, t, t, optimize=True)
        s = float(np.abs(nxt).max(initial=0.0))
        if s > 0:
            nxt = nxt / s
            log_scale += math.log(s)
        envs[k] = (nxt, log_scale)
    return envs


def _pair_block(w: Mps, i: int):
    """Two-site tensor ``(a, s1, s2, b, label)`` for sites ``i, i+1``."""
    a, b = w._with_label(i), w._with_label(i + 1)
    theta = np.einsum("asml,mtbk->astblk", a, b)
    sh = theta.shape
    return theta.reshape(sh[0], sh[1], sh[2], sh[3], sh[4] * sh[5])


def _reduce(left, theta, right):
    rho = np.einsum("ac,astbl,cuvdl,bd->stuv", left, theta, theta, right, optimize=True)
    return 0.5 * (rho + rho.transpose(2, 3, 0, 1))


def pair_covariance_w(w: Mps, pair_index: int, normalized: bool = False) -> np.ndarray:
    """Reduced weight covariance for sites ``(2i, 2i+1)`` as an order-4 tensor.

    Every other site index, and the label index, is traced out of
    ``sum_l W_l W_l^T``.  With ``normalized`` the result has unit trace.
    """
    return pair_covariances_w(w, normalized=normalized, pairs=[pair_index])[0]


def pair_covariances_w(w: Mps, normalized: bool = False, pairs=None):
    """Reduced weight covariances for many pairs, sharing one set of environments."""
    n_pairs = len(w) // 2
    if pairs is None:
        pairs = range(n_pairs)
    pairs = list(pairs)
    for p in pairs:
        if not 0 <= p < n_pairs:
            raise ArgumentError(f"pair {p} out of range for {len(w)} sites")
    left, right = _left_envs(w), _right_envs(w)
    out = []
    for p in pairs:
        i = 2 * p
        (le, ls), (re, rs) = left[i], right[i + 2]
        rho = _reduce(le, _pair_block(w, i), re)
        if normalized:
            tr = float(np.einsum("stst->", rho))
            rho = rho / tr if tr > 0 else rho
        else:
            rho = rho * math.exp(ls + rs)
        out.append(rho)
    return out


def evaluate(w: Mps, f):
    """Model output ``W . Phi`` for a product feature or a batch.

    Returns a length-``n_labels`` vector (length 1 without a label index),
    or an ``(n_samples, n_labels)`` array for a batch.
    """
    single = isinstance(f, ProductFeature)
    batch = FeatureBatch.from_features([f]) if single else f
    if batch.site_dims != w.site_dims:
        raise ShapeError(f"feature sites {batch.site_dims} do not match MPS sites {w.site_dims}")
    n = len(batch)
    env = np.ones((n, 1, 1))  # (sample, bond, label)
    log_acc = np.zeros(n)
    for k in range(len(w)):
        t = w._with_label(k)
        env = np.einsum("nal,ns,asbm->nblm", env, batch.sites[k], t, optimize=True)
        sh = env.shape
        env = env.reshape(sh[0], sh[1], sh[2] * sh[3])
        scale = np.abs(env).reshape(n, -1).max(axis=1)
        scale[scale == 0] = 1.0
        env /= scale[:, None, None]
        log_acc += np.log(scale)
    with np.errstate(over="raise"):
        factor = np.exp(np.where(batch.truncated, -np.inf, log_acc + batch.log_scale))
    out = env[:, 0, :] * factor[:, None]
    return out[0] if single else out


def _lift_additive(coeffs, bias, unit, with_label):
    """MPS for ``f_l(x) = b_l + sum_n coeffs[l, n] . phi(x_n)``.

    Bond channels ``0..L-1`` accumulate the L partial sums; channel ``L``
    carries the constant 1, produced at every site by ``unit . phi``.
    """
    n_labels, n_sites, d = coeffs.shape
    chi = n_labels + 1
    one = n_labels

    def interior(n):
        a = np.zeros((chi, d, chi))
        for s in range(d):
            a[:, s, :] = unit[s] * np.eye(chi)
            a[one, s, :n_labels] = coeffs[:, n, s]
        return a

    tensors = []
    for n in range(n_sites):
        if unit is None:  # single site, no constant channel needed
            a = np.zeros((chi, d, chi))
            a[one, :, :n_labels] = coeffs[:, 0, :].T
        else:
            a = interior(n)
        if n == 0:
            a = a[one : one + 1].copy()
            if unit is not None:
                a[0, :, :n_labels] += np.outer(unit, bias)
            elif np.any(bias):
                raise ArgumentError("a constant shift needs a map with a constant component")
        tensors.append(a)
    last = tensors[-1][:, :, :n_labels]  # columns are the accumulators
    if with_label:
        tensors[-1] = last[:, :, None, :].copy()
    else:
        tensors[-1] = last.copy()
    return Mps(tensors, label_site=n_sites - 1 if with_label else None)


def _check_map(local_map, n_sites):
    unit = local_map.unit_functional
    if unit is None and n_sites > 1:
        raise ArgumentError(
            f"the {local_map.kind!r} map has no constant component, so an additive "
            "model over more than one site cannot be lifted exactly"
        )
    return unit


def lift_linear(v, bias: float = 0.0, local_map: LocalMap = LocalMap("affine")) -> Mps:
    """Lift ``f(x) = v . x + bias`` to a bond-dimension-2 MPS (affine map only)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size < 1:
        raise ArgumentError("need at least one weight")
    if local_map.kind != "affine":
        raise ArgumentError("lift_linear needs the affine local map [1, x]")
    coeffs = np.zeros((1, v.size, 2))
    coeffs[0, :, 1] = v
    return _lift_additive(coeffs, np.array([float(bias)]), local_map.unit_functional, False)


def lift_linear_multi(v, bias=None, local_map: LocalMap = LocalMap("affine")) -> Mps:
    """Lift an ``(L, N)`` family of linear classifiers into one MPS with a label index.

    The label index sits on the last tensor; the bond dimension is ``L + 1``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if local_map.kind != "affine":
        raise ArgumentError("lift_linear_multi needs the affine local map [1, x]")
    bias = np.zeros(v.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    if bias.shape != (v.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {v.shape[0]} labels")
    coeffs = np.zeros(v.shape + (2,))
    coeffs[:, :, 1] = v
    return _lift_additive(coeffs, bias, local_map.unit_functional, True)


def lift_extended(v, local_map: LocalMap = LocalMap("affine")) -> Mps:
    """Lift ``f(x) = sum_n sum_s v[n, s] phi^s(x_n)`` to an MPS.

    ``v`` has shape ``(N, d)``.  The construction needs a constant in the
    span of the local map components, which the trig map lacks for N > 1.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != local_map.dim:
        raise ArgumentError(f"expected an (N, {local_map.dim}) coefficient matrix, got {v.shape}")
    unit = _check_map(local_map, v.shape[0])
    return _lift_additive(v[None], np.zeros(1), unit, False)


def product_mps(f: ProductFeature) -> Mps:
    """Bond-dimension-1 MPS equal to the (unscaled) product of ``f``'s sites."""
    return Mps([s.reshape(1, -1, 1).copy() for s in f.sites])


def random_mps(site_dims, bond_dim, n_labels=None, seed=0, scale=1.0) -> Mps:
    """Random MPS with bonds capped by ``bond_dim`` and by the exact ranks.

    The label index (if any) goes on the last tensor.
    """
    rng = np.random.default_rng(seed)
    n = len(site_dims)
    lab = n_labels or 1
    bonds = [1]
    for k in range(1, n):
        left = float(np.prod(site_dims[:k], dtype=np.float64))
        right = float(np.prod(site_dims[k:], dtype=np.float64)) * lab
        bonds.append(int(min(bond_dim, left, right)))
    bonds.append(1)
    tensors = []
    for k in range(n):
        shape = (bonds[k], site_dims[k], bonds[k + 1])
        if n_labels is not None and k == n - 1:
            shape = shape + (n_labels,)
        fan = bonds[k] * site_dims[k]
        tensors.append(scale * rng.standard_normal(shape) / math.sqrt(fan))
    return Mps(tensors, label_site=n - 1 if n_labels is not None else None)


def coarsen(w: Mps, layer) -> Mps:
    """Contract each isometry of ``layer`` with the matching pair of MPS tensors.

    Site ``i`` of the result is ``sum_{s1 s2} A_{2i}[s1] A_{2i+1}[s2] U_i[s1, s2, t]``;
    an unpaired final site passes through.
    """
    if len(w) != layer.in_site_count:
        raise ShapeError(f"MPS has {len(w)} sites, layer expects {layer.in_site_count}")
    if w.site_dims != tuple(layer.in_dims):
        raise ShapeError(f"MPS sites {w.site_dims} do not match layer inputs {tuple(layer.in_dims)}")
    tensors, label_site = [], None
    for i, iso in enumerate(layer.isometries):
        theta = np.einsum(
            "asml,mtbk->astblk", w._with_label(2 * i), w._with_label(2 * i + 1)
        )
        new = np.einsum("astblk,stu->aublk", theta, iso.tensor)
        has_label = w.label_site in (2 * i, 2 * i + 1)
        sh = new.shape
        new = new.reshape(sh[0], sh[1], sh[2], sh[3] * sh[4])
        if has_label:
            label_site = i
        else:
            new = new[..., 0]
        tensors.append(np.ascontiguousarray(new))
    if layer.passthrough:
        tensors.append(w.tensors[-1].copy())
        if w.label_site == len(w) - 1:
            label_site = len(tensors) - 1
    return Mps(tensors, label_site)
