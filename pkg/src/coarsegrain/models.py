"""Supervised heads trained on coarse-grained features.

Two heads are provided:

* :class:`TopTensor` -- a dense ``(L, t1, t2)`` tensor contracted with the
  two top sites of a full tree, fitted by Polak-Ribiere conjugate gradient;
* :class:`CurtainModel` -- a partial tree whose remaining sites feed an MPS
  with a label index, fitted by single-site alternating least squares.

Both minimize the quadratic cost

    C = 1/(2 n) sum_j sum_l (f_l(x_j) - y_jl)^2 + lambda/2 |w|^2

against one-hot targets ``y``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError
from .feature_map import FeatureBatch, ProductFeature
from .mps import Mps, random_mps
from .mps import evaluate as mps_evaluate
from .tree_builder import TreeNetwork, coarse_grain

log = logging.getLogger(__name__)

CHUNK = 4096


@dataclass
class TrainConfig:
    max_iterations: int = 500
    tol: float = 1e-6
    ridge: float = 0.0
    sweeps: int = 30
    cg_max: int = 50
    seed: int = 0

    def validate(self):
        if self.max_iterations < 1 or self.sweeps < 1 or self.cg_max < 1:
            raise ArgumentError("iteration, sweep and CG counts must be positive")
        if not (math.isfinite(self.ridge) and self.ridge >= 0):
            raise ArgumentError(f"ridge must be finite and >= 0, got {self.ridge}")
        if not self.tol >= 0:
            raise ArgumentError("tol must be >= 0")


@dataclass
class TopTensor:
    weights: np.ndarray
    trace: List[float] = field(default_factory=list)

    @property
    def n_labels(self) -> int:
        return self.weights.shape[0]

    @property
    def top_dims(self):
        return self.weights.shape[1:]


@dataclass
class CurtainModel:
    """A partial tree with an MPS head over its ``N_top`` output sites."""

    tree: TreeNetwork
    top: Mps
    chi: int
    trace: List[float] = field(default_factory=list)
    sweep_costs: List[float] = field(default_factory=list)

    def __post_init__(self):
        if tuple(self.top.site_dims) != tuple(self.tree.out_dims):
            raise ShapeError(f"top MPS sites {self.top.site_dims} != tree outputs {self.tree.out_dims}")

    @property
    def n_labels(self) -> int:
        return self.top.n_labels


def one_hot(labels, n_labels: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise ShapeError(f"labels outside [0, {n_labels})")
    y = np.zeros((labels.size, n_labels))
    y[np.arange(labels.size), labels] = 1.0
    return y


def _as_batch(features):
    if isinstance(features, ProductFeature):
        return FeatureBatch.from_features([features])
    if isinstance(features, (list, tuple)):
        return FeatureBatch.from_features(features)
    return features


def _targets(labels, n, n_labels=None):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        y = labels.astype(np.float64)
    else:
        if n_labels is None:
            n_labels = int(labels.max()) + 1
        y = one_hot(labels, n_labels)
    if y.shape[0] != n:
        raise ArgumentError(f"{n} features but {y.shape[0]} labels")
    return y


def coarse_features(tree: TreeNetwork, samples) -> FeatureBatch:
    """Push samples through every tree layer and report fully truncated ones."""
    batch = _as_batch(samples)
    out = coarse_grain(tree, batch)
    lost = int(out.truncated.sum())
    if lost:
        log.warning("%d of %d samples were fully truncated by the tree", lost, len(out))
    return out


def _scales(batch: FeatureBatch) -> np.ndarray:
    with np.errstate(over="raise"):
        return np.where(batch.truncated, 0.0, np.exp(np.where(batch.truncated, 0.0, batch.log_scale)))


def _check_top(w: np.ndarray, batch: FeatureBatch):
    if batch.n_sites != 2:
        raise ShapeError(f"top tensor needs 2-site features, got {batch.n_sites} sites")
    if tuple(w.shape[1:]) != batch.site_dims:
        raise ShapeError(f"top tensor dims {w.shape[1:]} do not match features {batch.site_dims}")


def _top_forward(w, v1, v2, s):
    """Scores ``s_j * v1_j^T w_l v2_j`` for a chunk."""
    L, t1, t2 = w.shape
    t = (v2 @ w.transpose(2, 0, 1).reshape(t2, L * t1)).reshape(-1, L, t1)
    return np.einsum("nla,na->nl", t, v1) * s[:, None]


def _top_backward(r, v1, v2, s):
    """``sum_j s_j r_jl v1_j ⊗ v2_j`` for a chunk."""
    n, L = r.shape
    left = (v1[:, None, :] * (r * s[:, None])[:, :, None]).reshape(n, -1)
    return (left.T @ v2).reshape(L, v1.shape[1], v2.shape[1])


def _scores_top(w, batch: FeatureBatch) -> np.ndarray:
    s = _scales(batch)
    v1, v2 = batch.sites
    out = np.empty((len(batch), w.shape[0]))
    for a in range(0, len(batch), CHUNK):
        sl = slice(a, a + CHUNK)
        out[sl] = _top_forward(w, v1[sl], v2[sl], s[sl])
    return out


def _grad_top(resid, batch: FeatureBatch, shape) -> np.ndarray:
    s = _scales(batch)
    v1, v2 = batch.sites
    g = np.zeros(shape)
    for a in range(0, len(batch), CHUNK):
        sl = slice(a, a + CHUNK)
        g += _top_backward(resid[sl], v1[sl], v2[sl], s[sl])
    return g


def quadratic_cost(w, features, labels, ridge: float = 0.0):
    """Cost and exact gradient of the quadratic loss for a top tensor.

    Parameters
    ----------
    w : TopTensor or ndarray of shape (L, t1, t2)
    features : FeatureBatch with two sites
    labels : integer labels or one-hot ``(n, L)`` targets
    ridge : weight penalty ``lambda``
    """
    w = w.weights if isinstance(w, TopTensor) else np.asarray(w, dtype=np.float64)
    batch = _as_batch(features)
    if len(batch) == 0:
        raise ArgumentError("empty training set")
    _check_top(w, batch)
    y = _targets(labels, len(batch), w.shape[0])
    n = len(batch)
    resid = _scores_top(w, batch) - y
    cost = 0.5 * float(np.sum(resid**2)) / n + 0.5 * ridge * float(np.sum(w**2))
    grad = _grad_top(resid, batch, w.shape) / n + ridge * w
    return cost, grad


def _drop_truncated(batch, y):
    keep = ~batch.truncated
    if not np.all(keep):
        log.warning("dropping %d fully truncated samples from training", int((~keep).sum()))
        batch, y = batch.take(np.nonzero(keep)[0]), y[keep]
    if len(batch) == 0:
        raise ArgumentError("no usable training samples")
    return batch, y


def train_top(features, labels, cfg: Optional[TrainConfig] = None, n_labels=None) -> TopTensor:
    """Fit a top tensor by Polak-Ribiere conjugate gradient from zero.

    The cost is quadratic, so each line search is exact:
    ``alpha = -g.p / p.H.p`` with ``p.H.p = |F p|^2 / n + lambda |p|^2``.
    The search direction restarts every ``t1 * t2 * L`` steps and whenever
    it fails to be a descent direction.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    batch = _as_batch(features)
    if len(batch) == 0:
        raise ArgumentError("empty training set")
    y = _targets(labels, len(batch), n_labels)
    batch, y = _drop_truncated(batch, y)
    if batch.n_sites != 2:
        raise ShapeError(f"top tensor needs 2-site features, got {batch.n_sites} sites")
    n, L = y.shape
    shape = (L,) + batch.site_dims
    lam = cfg.ridge
    restart_every = int(np.prod(shape))

    w = np.zeros(shape)
    f = np.zeros((n, L))
    resid = f - y

    def cost_of(resid, w):
        return 0.5 * float(np.sum(resid**2)) / n + 0.5 * lam * float(np.sum(w**2))

    cost = cost_of(resid, w)
    g = _grad_top(resid, batch, shape) / n + lam * w
    p = -g
    trace = [cost]
    since_restart = 0
    for it in range(cfg.max_iterations):
        gnorm = float(np.linalg.norm(g))
        if gnorm < cfg.tol:
            break
        fp = _scores_top(p, batch)
        curv = float(np.sum(fp**2)) / n + lam * float(np.sum(p**2))
        if not curv > 0:
            break
        alpha = -float(np.sum(g * p)) / curv
        w = w + alpha * p
        f = f + alpha * fp
        if (it + 1) % 50 == 0:
            f = _scores_top(w, batch)  # limit drift of the running scores
        resid = f - y
        new_cost = cost_of(resid, w)
        if not math.isfinite(new_cost):
            raise NumericError(f"non-finite cost at iteration {it + 1}")
        g_new = _grad_top(resid, batch, shape) / n + lam * w
        beta = max(0.0, float(np.sum(g_new * (g_new - g))) / float(np.sum(g * g)))
        since_restart += 1
        p = -g_new + beta * p
        if since_restart >= restart_every or float(np.sum(g_new * p)) >= 0:
            p = -g_new
            since_restart = 0
        g = g_new
        cost = new_cost
        trace.append(cost)
    log.info("top tensor: %d iterations, cost %.6g", len(trace) - 1, cost)
    return TopTensor(w, trace)


def init_curtain(tree: TreeNetwork, n_labels: int, chi: int, seed: int = 0,
                 scale: float = 0.1) -> CurtainModel:
    """Curtain model with a small random (seeded) top MPS."""
    if chi < 1:
        raise ArgumentError("bond dimension must be >= 1")
    top = random_mps(tree.out_dims, chi, n_labels=n_labels, seed=seed, scale=scale)
    return CurtainModel(tree, top, chi)


class _Als:
    """Environments and local solves for one curtain training run."""

    def __init__(self, tensors, batch, y, lam):
        self.A = [t.copy() for t in tensors]
        self.V = batch.sites
        self.s = _scales(batch)
        self.y = y
        self.n = len(batch)
        self.lam = lam
        self.N = len(tensors)

    # environments: left[k] (n, Da_k) covers sites < k; right[k] (n, Db_k, L) covers sites > k
    def left_step(self, env, k):
        return np.einsum("na,ns,asb->nb", env, self.V[k], self.A[k], optimize=True)

    def right_step(self, env, k):
        if k == self.N - 1:
            return np.einsum("ns,asl->nal", self.V[k], self.A[k][:, :, 0, :], optimize=True)
        return np.einsum("ns,asb,nbl->nal", self.V[k], self.A[k], env, optimize=True)

    def all_left(self):
        envs = [self.s[:, None]]
        for k in range(self.N - 1):
            envs.append(self.left_step(envs[-1], k))
        return envs

    def all_right(self):
        envs = [None] * self.N
        env = None
        for k in range(self.N - 1, 0, -1):
            env = self.right_step(env, k)
            envs[k - 1] = env
        return envs

    def forward(self, P, k, le, re):
        if k == self.N - 1:
            return np.einsum("na,ns,asl->nl", le, self.V[k], P[:, :, 0, :], optimize=True)
        t = np.einsum("na,ns,asb->nb", le, self.V[k], P, optimize=True)
        return np.einsum("nb,nbl->nl", t, re)

    def adjoint(self, r, k, le, re):
        if k == self.N - 1:
            return np.einsum("na,ns,nl->asl", le, self.V[k], r, optimize=True)[:, :, None, :]
        u = np.einsum("nl,nbl->nb", r, re)
        return np.einsum("na,ns,nb->asb", le, self.V[k], u, optimize=True)

    def penalty(self):
        return 0.5 * self.lam * sum(float(np.sum(a**2)) for a in self.A)

    def cost_from_scores(self, f):
        return 0.5 * float(np.sum((f - self.y) ** 2)) / self.n + self.penalty()

    def solve(self, k, le, re, cg_max, site_cost):
        """Linear CG on the local normal equations, warm-started at ``A[k]``."""
        n, lam = self.n, self.lam
        A0 = self.A[k]

        def hess(P):
            return self.adjoint(self.forward(P, k, le, re), k, le, re) / n + lam * P

        x = A0.copy()
        b = self.adjoint(self.y, k, le, re) / n
        r = b - hess(x)
        p = r.copy()
        rr = float(np.sum(r * r))
        stop = (1e-12 * float(np.linalg.norm(b))) ** 2
        for _ in range(cg_max):
            if rr <= stop:
                break
            hp = hess(p)
            php = float(np.sum(p * hp))
            if not php > 0:
                break
            a = rr / php
            x += a * p
            r -= a * hp
            rr_new = float(np.sum(r * r))
            p = r + (rr_new / rr) * p
            rr = rr_new
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite local solution at site {k}")
        self.A[k] = x
        new_cost = self.cost_from_scores(self.forward(x, k, le, re))
        if new_cost > site_cost:  # roundoff guard: keep the old tensor
            self.A[k] = A0
            return site_cost
        return new_cost


def train_curtain(model: CurtainModel, features, labels, cfg: Optional[TrainConfig] = None) -> CurtainModel:
    """Single-site ALS sweeps over the top MPS; the tree stays fixed.

    ``features`` are the coarse-grained (``N_top``-site) features.  One sweep
    visits sites left to right and then right to left.  The cost after every
    local solve is appended to ``trace``; the cost after each sweep to
    ``sweep_costs``.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    batch = _as_batch(features)
    if len(batch) == 0:
        raise ArgumentError("empty training set")
    if batch.site_dims != model.top.site_dims:
        raise ShapeError(f"features {batch.site_dims} do not match top MPS {model.top.site_dims}")
    y = _targets(labels, len(batch), model.n_labels)
    batch, y = _drop_truncated(batch, y)
    top = model.top
    if top.label_site != len(top) - 1:
        raise ShapeError("curtain training expects the label index on the last top tensor")
    als = _Als(top.tensors, batch, y, cfg.ridge)
    N = als.N

    cost = als.cost_from_scores(mps_evaluate(Mps(als.A, N - 1), batch))
    trace, sweep_costs = [cost], []
    for _ in range(cfg.sweeps):
        # left to right
        right = als.all_right()
        le = als.s[:, None]
        for k in range(N):
            cost = als.solve(k, le, right[k], cfg.cg_max, cost)
            trace.append(cost)
            if k < N - 1:
                le = als.left_step(le, k)
        # right to left
        if N > 1:
            left = als.all_left()
            re = als.right_step(None, N - 1)
            for k in range(N - 2, -1, -1):
                cost = als.solve(k, left[k], re, cfg.cg_max, cost)
                trace.append(cost)
                if k > 0:
                    re = als.right_step(re, k)
        sweep_costs.append(cost)
        log.info("sweep %d: cost %.6g", len(sweep_costs), cost)
    return CurtainModel(model.tree, Mps(als.A, N - 1), model.chi,
                        model.trace + trace, model.sweep_costs + sweep_costs)


Head = Union[TopTensor, CurtainModel, Mps]


def scores(head: Head, features) -> np.ndarray:
    """``(n, L)`` scores of a head on already coarse-grained features."""
    batch = _as_batch(features)
    if isinstance(head, TopTensor):
        _check_top(head.weights, batch)
        return _scores_top(head.weights, batch)
    top = head.top if isinstance(head, CurtainModel) else head
    return mps_evaluate(top, batch)


def predict(head: Head, feature):
    """Label and score vector; ties go to the smallest label index.

    A single :class:`ProductFeature` gives ``(int, (L,) array)``; a batch gives
    ``((n,) int array, (n, L) array)``.
    """
    sc = scores(head, feature)
    labels = np.argmax(sc, axis=1)
    if isinstance(feature, ProductFeature):
        return int(labels[0]), sc[0]
    return labels, sc


@dataclass
class Evaluation:
    accuracy: float
    cost: float
    confusion: np.ndarray

    def as_dict(self):
        return {"accuracy": self.accuracy, "cost": self.cost,
                "confusion": self.confusion.tolist()}


def evaluate_accuracy(head: Head, features, labels, n_labels=None) -> Evaluation:
    """Accuracy, unregularized quadratic cost and confusion matrix (rows = truth)."""
    batch = _as_batch(features)
    if len(batch) == 0:
        raise ArgumentError("empty evaluation set")
    pred, sc = predict(head, batch)
    L = sc.shape[1] if n_labels is None else n_labels
    if sc.shape[1] != L:
        raise ShapeError(f"head produces {sc.shape[1]} labels, expected {L}")
    labels = np.asarray(labels, dtype=np.int64)
    y = one_hot(labels, L)
    cost = 0.5 * float(np.sum((sc - y) ** 2)) / len(batch)
    confusion = np.zeros((L, L), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return Evaluation(float(np.mean(pred == labels)), cost, confusion)
