"""Numerical laboratory for the contrastive mutual-information bounds.

Two regimes are covered:

* Discrete joints small enough for exhaustive enumeration. Here the
  optimal critic posterior, the exact MI, and both bound forms are
  computed in closed form, and a tabular critic trained by gradient
  ascent on the enumerated objective is checked against the posterior.

* Correlated Gaussians, where the MI is analytic. A critic is trained by
  minimizing the contrastive loss and the bound is evaluated on held-out
  samples.

Bound forms, for a critic h and N negatives per positive (nats):

    strong(h) = ln N + E_joint[log h]
    weak(h)   = ln N + E_joint[log h] + N * E_marginal[log(1 - h)]

`weak` is a valid lower bound on I(T;S) for *any* h, but even at the
optimal critic it sits roughly one nat below `strong` (the extra term
tends to -1 as N grows, since N * E_marginal[h*] -> 1). `strong` is a
bound only when h is the true posterior, which is why the Gaussian
certification trains a critic family that contains the posterior (a
bilinear form on quadratically lifted coordinates, h = sigmoid(u - ln N))
and reports the held-out strong-form plug-in as the certified value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.special import digamma, expit, log_expit

from .errors import DomainError, NonConvergenceError, ShapeError

# Exhaustive enumeration stays fast only for small alphabets.
MAX_ALPHABET = 16


@dataclass
class DiscreteJoint:
    """A joint pmf over two finite alphabets, rows = T symbols, cols = S."""

    pmf: np.ndarray

    def __post_init__(self):
        self.pmf = np.asarray(self.pmf, dtype=np.float64)
        if self.pmf.ndim != 2:
            raise ShapeError("pmf must be a 2-d matrix")
        if self.pmf.shape[0] > MAX_ALPHABET or self.pmf.shape[1] > MAX_ALPHABET:
            raise DomainError(f"alphabets are capped at {MAX_ALPHABET} per axis")
        if self.pmf.min() < 0:
            raise DomainError("pmf entries must be nonnegative")
        if abs(self.pmf.sum() - 1.0) > 1e-9:
            raise DomainError(f"pmf must sum to 1 (got {self.pmf.sum():.12f})")

    @property
    def marginal_t(self) -> np.ndarray:
        return self.pmf.sum(axis=1)

    @property
    def marginal_s(self) -> np.ndarray:
        return self.pmf.sum(axis=0)

    @property
    def product_of_marginals(self) -> np.ndarray:
        return np.outer(self.marginal_t, self.marginal_s)

    @classmethod
    def random(cls, shape: Tuple[int, int], rng: np.random.Generator) -> "DiscreteJoint":
        raw = rng.gamma(1.0, 1.0, size=shape)
        return cls(raw / raw.sum())


@dataclass
class BoundEstimate:
    """A mutual-information lower-bound value with its sampling error."""

    value: float
    n_negatives: int
    n_samples: int
    stderr: float

    def __post_init__(self):
        if self.stderr < 0:
            raise DomainError("stderr must be nonnegative")


def optimal_critic_posterior(joint: DiscreteJoint, n: int) -> np.ndarray:
    """p(t,s) / (p(t,s) + n p(t) p(s)); 0 where both terms vanish."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    pj = joint.pmf
    pm = joint.product_of_marginals
    denom = pj + n * pm
    out = np.zeros_like(pj)
    np.divide(pj, denom, out=out, where=denom > 0)
    return out


def mi_exact(joint: DiscreteJoint) -> float:
    """Sum p(t,s) log[p(t,s) / (p(t)p(s))] in nats; zero-probability cells skip."""
    pj = joint.pmf
    pm = joint.product_of_marginals
    mask = pj > 0
    return float(np.sum(pj[mask] * (np.log(pj[mask]) - np.log(pm[mask]))))


def critic_objective_exact(joint: DiscreteJoint, n: int, h: np.ndarray) -> float:
    """E_joint[log h] + n E_marginal[log(1-h)], by exact enumeration.

    This is the maximization-form critic objective, i.e. the negation of
    the contrastive loss. Cells with zero probability contribute nothing.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != joint.pmf.shape:
        raise ShapeError("critic table must match the joint's shape")
    pj = joint.pmf
    pm = joint.product_of_marginals
    pos = np.sum(pj[pj > 0] * np.log(h[pj > 0]))
    mneg = pm > 0
    neg = n * np.sum(pm[mneg] * np.log1p(-h[mneg]))
    return float(pos + neg)


def strong_bound(joint: DiscreteJoint, n: int) -> BoundEstimate:
    """ln(n) + E_joint[log q*] with q* the optimal critic posterior.

    An exact expectation, so stderr is 0. Never exceeds mi_exact.
    """
    q = optimal_critic_posterior(joint, n)
    pj = joint.pmf
    mask = pj > 0
    value = math.log(n) + float(np.sum(pj[mask] * np.log(q[mask])))
    return BoundEstimate(value=value, n_negatives=n, n_samples=0, stderr=0.0)


def weak_bound_from_loss(critic_loss_value: float, n: int) -> float:
    """ln(n) plus the maximization-form critic objective value."""
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return math.log(n) + float(critic_loss_value)


def train_tabular_critic(joint: DiscreteJoint, n: int, steps: int = 20000,
                         lr: float = 1.0) -> np.ndarray:
    """Fit a per-cell logistic critic by gradient ascent on the enumerated
    objective; converges to the closed-form posterior.

    The parametrization is h = sigmoid(theta) per cell, and the ascent
    direction is preconditioned by 1/(p_joint + n p_marginal) so all
    cells converge at comparable rates.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    a = joint.pmf
    b = n * joint.product_of_marginals
    scale = a + b
    live = scale > 0
    theta = np.zeros_like(a)
    safe_scale = np.where(live, scale, 1.0)
    for _ in range(steps):
        h = expit(theta)
        theta += lr * (a - scale * h) / safe_scale
    h = expit(theta)
    h[~live] = 0.0
    return h


def gaussian_mi_oracle(correlation: float, dims: int) -> float:
    """MI of `dims` independent bivariate-Gaussian coordinate pairs:
    -(dims/2) ln(1 - rho^2)."""
    if not abs(correlation) < 1:
        raise DomainError(f"|correlation| must be < 1, got {correlation}")
    if dims < 1:
        raise DomainError(f"dims must be >= 1, got {dims}")
    return -0.5 * dims * math.log1p(-correlation * correlation)


def knn_mutual_information(x: np.ndarray, y: np.ndarray, k: int = 3) -> float:
    """Kraskov-style k-NN MI estimate (first estimator, max-norm), in nats."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ShapeError("x and y must have the same number of samples")
    n = x.shape[0]
    if n <= k:
        raise DomainError("need more samples than neighbors")
    joint = np.hstack([x, y])
    tree_joint = cKDTree(joint)
    # distance to the k-th neighbor (excluding self) in max-norm
    dist, _ = tree_joint.query(joint, k=k + 1, p=np.inf)
    eps = dist[:, -1]
    tree_x = cKDTree(x)
    tree_y = cKDTree(y)
    nx = np.array([len(tree_x.query_ball_point(x[i], eps[i] - 1e-12, p=np.inf)) - 1
                   for i in range(n)])
    ny = np.array([len(tree_y.query_ball_point(y[i], eps[i] - 1e-12, p=np.inf)) - 1
                   for i in range(n)])
    mi = digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1))
    return float(max(mi, 0.0))


# ---------------------------------------------------------------------------
# Gaussian certification


def _sample_correlated(rng: np.random.Generator, correlation: float, dims: int,
                       n: int) -> Tuple[np.ndarray, np.ndarray]:
    """n paired samples, each coordinate pair bivariate normal with the
    given correlation, coordinates independent across dims."""
    x = rng.standard_normal((n, dims))
    e = rng.standard_normal((n, dims))
    y = correlation * x + math.sqrt(1.0 - correlation ** 2) * e
    return x, y


def _lift(v: np.ndarray) -> np.ndarray:
    """Quadratic feature lift [v, v^2, 1] so the bilinear critic family
    contains the true Gaussian log density ratio."""
    ones = np.ones((v.shape[0], 1))
    return np.hstack([v, v * v, ones])


class GaussianCritic:
    """Bilinear critic on lifted coordinates with posterior calibration:
    h(t, s) = sigmoid(psi(t)' W psi(s) - ln N)."""

    def __init__(self, dims: int, n_negatives: int):
        self.dims = dims
        self.n_negatives = n_negatives
        self.lift_dim = 2 * dims + 1
        self.weights = np.zeros((self.lift_dim, self.lift_dim))

    def logits(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """u - ln N for row-aligned lifted pairs."""
        return np.einsum("bi,ij,bj->b", px, self.weights, py) - math.log(self.n_negatives)


def _nce_value_and_grad(w_flat: np.ndarray, px: np.ndarray, py: np.ndarray,
                        neg_idx: np.ndarray, lift_dim: int, log_n: float):
    """Contrastive loss (minimization form) and its gradient in W."""
    w = w_flat.reshape(lift_dim, lift_dim)
    b = px.shape[0]
    u_pos = np.einsum("bi,ij,bj->b", px, w, py) - log_n
    a = px @ w                                   # (b, L)
    py_neg = py[neg_idx]                         # (b, N, L)
    u_neg = np.einsum("bi,bni->bn", a, py_neg) - log_n
    loss = -(log_expit(u_pos).mean() + log_expit(-u_neg).sum(axis=1).mean())
    g_pos = -expit(-u_pos) / b                   # d loss / d u_pos
    g_neg = expit(u_neg) / b                     # d loss / d u_neg
    grad = np.einsum("b,bi,bj->ij", g_pos, px, py)
    grad += np.einsum("bn,bi,bnj->ij", g_neg, px, py_neg)
    return float(loss), grad.reshape(-1)


def _negative_indices(rng: np.random.Generator, n_anchors: int, n_neg: int) -> np.ndarray:
    """(n_anchors, n_neg) partner indices avoiding each anchor's own row."""
    idx = rng.integers(0, n_anchors, size=(n_anchors, n_neg))
    own = np.arange(n_anchors)[:, None]
    collisions = idx == own
    while collisions.any():
        idx[collisions] = rng.integers(0, n_anchors, size=int(collisions.sum()))
        collisions = idx == own
    return idx


def certify_bound_on_gaussians(correlation: float, dims: int, n_negatives: int,
                               train_steps: int = 300, seed: int = 0,
                               n_train: int = 4096, n_eval: int = 4096,
                               n_splits: int = 10) -> BoundEstimate:
    """Train the critic on paired Gaussians, evaluate the bound held-out.

    The critic minimizes the contrastive loss over congruent pairs and
    `n_negatives` shuffled partners per anchor; the returned value is the
    held-out plug-in bound ln N + mean log h on congruent pairs, with the
    stderr taken over `n_splits` evaluation splits.
    """
    if not abs(correlation) < 1:
        raise DomainError(f"|correlation| must be < 1, got {correlation}")
    for name, v in (("dims", dims), ("n_negatives", n_negatives),
                    ("train_steps", train_steps), ("n_train", n_train),
                    ("n_eval", n_eval)):
        if v < 1:
            raise DomainError(f"{name} must be positive, got {v}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    x_tr, y_tr = _sample_correlated(rng, correlation, dims, n_train)
    px, py = _lift(x_tr), _lift(y_tr)
    neg_idx = _negative_indices(rng, n_train, min(n_negatives, n_train - 1))

    critic = GaussianCritic(dims, n_negatives)
    log_n = math.log(n_negatives)
    w0 = critic.weights.reshape(-1)
    loss0, grad0 = _nce_value_and_grad(w0, px, py, neg_idx, critic.lift_dim, log_n)
    res = minimize(_nce_value_and_grad, w0, args=(px, py, neg_idx, critic.lift_dim, log_n),
                   jac=True, method="L-BFGS-B",
                   options={"maxiter": train_steps, "ftol": 1e-12, "gtol": 1e-9})
    # No decrease despite a usable descent direction means the fit stalled.
    if res.fun >= loss0 and float(np.linalg.norm(grad0)) > 1e-6:
        raise NonConvergenceError(
            f"critic loss failed to decrease ({loss0:.4f} -> {res.fun:.4f})")
    critic.weights = res.x.reshape(critic.lift_dim, critic.lift_dim)

    x_ev, y_ev = _sample_correlated(rng, correlation, dims, n_eval)
    log_h = log_expit(critic.logits(_lift(x_ev), _lift(y_ev)))
    splits = np.array_split(log_h, n_splits)
    split_vals = np.array([log_n + s.mean() for s in splits])
    value = float(split_vals.mean())
    stderr = float(split_vals.std(ddof=1) / math.sqrt(len(split_vals)))
    return BoundEstimate(value=value, n_negatives=n_negatives,
                         n_samples=n_eval, stderr=stderr)
