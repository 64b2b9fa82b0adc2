"""Gaussian conditioning on sparse precisions and Metropolis-within-Gibbs.

Given hyperparameters, the latent coefficients have an exact Gaussian
posterior with precision ``Q + H' R^{-1} H``.  The hyperparameters are
sampled by random-walk Metropolis on a transformed scale, targeting the
marginal posterior ``p(theta | z)`` obtained from the log marginal likelihood;
each sweep then draws the latent vector exactly from its conditional.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .sparse_chol import NotPositiveDefiniteError, SparseCholesky

__all__ = [
    "GaussianPrior",
    "GaussianSystem",
    "PosteriorResult",
    "HyperParameter",
    "HyperState",
    "LatentModel",
    "Chain",
    "gaussian_condition",
    "gaugau_exact",
    "sample_posterior",
    "log_marginal_likelihood",
    "mwg_sample",
    "run_chains",
    "split_rhat",
]

log = logging.getLogger(__name__)

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianPrior:
    Q: sp.csc_matrix
    mean: np.ndarray
    dense_indices: tuple = ()


@dataclass
class PosteriorResult:
    mean: np.ndarray
    marginal_sd: np.ndarray | None
    log_marginal_likelihood: float
    Q_post: sp.csc_matrix
    factor: SparseCholesky = field(repr=False)
    variance_method: str = "selected-inverse"
    samples: np.ndarray | None = None

    def covariance_columns(self, idx) -> np.ndarray:
        """Columns of the posterior covariance for the given latent indices."""
        idx = np.atleast_1d(idx)
        E = np.zeros((self.Q_post.shape[0], len(idx)))
        E[idx, np.arange(len(idx))] = 1.0
        return self.factor.solve(E)

    def linear_combination_variance(self, A, batch: int = 256) -> np.ndarray:
        """diag(A Sigma A') for a sparse A.

        Rows whose nonzero pairs all lie in the factor pattern use the selected
        inverse; the rest fall back to triangular solves.
        """
        A = sp.csr_matrix(A, dtype=float)
        if A.shape[0] == 0:
            return np.zeros(0)
        S = self.factor.selected_inverse()
        out = np.asarray((A @ S).multiply(A).sum(axis=1)).ravel()
        B = A.copy()
        B.data = np.ones_like(B.data)
        P = self.factor.inverse_pattern().astype(float)
        present = np.asarray((B @ P).multiply(B).sum(axis=1)).ravel()
        need = np.diff(A.indptr).astype(float) ** 2
        rows = np.flatnonzero(present < need)
        for k in range(0, len(rows), batch):
            r = rows[k : k + batch]
            At = A[r].T.toarray()
            out[r] = np.sum(At * self.factor.solve(At), axis=0)
        return out

    def linear_combination_covariance(self, A, B) -> np.ndarray:
        """Row-wise Cov(A_i eta, B_i eta) via the polarisation identity."""
        A = sp.csr_matrix(A)
        B = sp.csr_matrix(B)
        va = self.linear_combination_variance(A)
        vb = self.linear_combination_variance(B)
        vab = self.linear_combination_variance(A + B)
        return 0.5 * (vab - va - vb)


def _prior_parts(prior):
    Q = sp.csc_matrix(prior.Q)
    mean = np.zeros(Q.shape[0]) if getattr(prior, "mean", None) is None else np.asarray(prior.mean, float)
    return Q, mean, tuple(getattr(prior, "dense_indices", ()))


def gaussian_condition(
    prior,
    H,
    noise_var,
    z,
    offset=None,
    variance: str = "selected",
    n_variance_draws: int = 200,
    seed: int | None = None,
    prior_factor: SparseCholesky | None = None,
) -> PosteriorResult:
    """Exact posterior of eta given z = H eta + offset + N(0, diag(noise_var)).

    ``variance`` picks the marginal-SD estimator: ``"selected"`` (Takahashi
    recursion, exact), ``"sampling"`` (``n_variance_draws`` posterior draws), or
    ``"none"``.
    """
    Q, m, dense = _prior_parts(prior)
    H = sp.csr_matrix(H) if H is not None else sp.csr_matrix((0, Q.shape[0]))
    z = np.asarray(z, dtype=float)
    n_obs = len(z)
    if n_obs:
        noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), (n_obs,))
        if np.any(noise_var <= 0):
            raise ValueError("noise variances must be positive")
        Rinv = sp.diags(1.0 / noise_var)
        r = z - H @ m - (0.0 if offset is None else np.asarray(offset, dtype=float))
        Q_post = (Q + H.T @ Rinv @ H).tocsc()
        b = H.T @ (r / noise_var)
    else:
        r = np.zeros(0)
        Q_post = Q.copy()
        b = np.zeros(Q.shape[0])
    try:
        post = SparseCholesky(Q_post, dense)
        prior_chol = prior_factor if prior_factor is not None else SparseCholesky(Q, dense)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(f"posterior precision is not SPD: {exc}") from exc
    delta = post.solve(b)
    mean = m + delta
    if n_obs:
        quad = float(r @ (r / noise_var) - b @ delta)
        lml = -0.5 * (n_obs * _LOG2PI + np.sum(np.log(noise_var)) + quad)
    else:
        lml = 0.0
    lml += 0.5 * (prior_chol.logdet() - post.logdet())
    sd = None
    method = variance
    if variance == "selected":
        sd = np.sqrt(np.maximum(post.marginal_variances(), 0.0))
        method = "selected-inverse"
    elif variance == "sampling":
        draws = post.sample(np.random.default_rng(seed), n_variance_draws)
        sd = draws.std(axis=0, ddof=1)
        method = f"sampling({n_variance_draws})"
    elif variance != "none":
        raise ValueError(f"unknown variance method {variance!r}")
    return PosteriorResult(mean, sd, float(lml), Q_post, post, method)


def log_marginal_likelihood(prior, H, noise_var, z, offset=None) -> float:
    return gaussian_condition(prior, H, noise_var, z, offset, variance="none").log_marginal_likelihood


def gaugau_exact(mu_prior, Sigma_prior, F, Sigma_l, x):
    """Dense normal-normal update for x = F theta + e, e ~ N(0, Sigma_l), theta ~ N(mu, Sigma_p).

    Returns the posterior mean and covariance.
    """
    mu = np.asarray(mu_prior, dtype=float)
    Sp = np.asarray(Sigma_prior, dtype=float)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Sl = np.atleast_2d(np.asarray(Sigma_l, dtype=float))
    x = np.asarray(x, dtype=float)
    try:
        sla.cholesky(Sp, lower=True)
        S = F @ Sp @ F.T + Sl
        cS = sla.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular covariance: {exc}") from exc
    K = sla.cho_solve(cS, F @ Sp).T  # Sp F' S^{-1}
    mu_post = mu + K @ (x - F @ mu)
    Sigma_post = Sp - K @ F @ Sp
    return mu_post, 0.5 * (Sigma_post + Sigma_post.T)


def sample_posterior(result: PosteriorResult, n_draws: int, seed) -> np.ndarray:
    """Exact posterior draws, shape (n_draws, N)."""
    rng = np.random.default_rng(seed)
    return result.mean + result.factor.sample(rng, n_draws)


# -- hyperparameter sampling ---------------------------------------------------


_TRANSFORMS = {
    "log": (np.log, np.exp, lambda u: u),  # forward, inverse, log|d theta / d u|
    "identity": (lambda x: x, lambda u: u, lambda u: 0.0),
    "atanh": (np.arctanh, np.tanh, lambda u: math.log(1.0 - math.tanh(u) ** 2)),
}


@dataclass(frozen=True)
class HyperParameter:
    name: str
    init: float
    transform: str = "log"
    step: float = 0.2

    def __post_init__(self):
        if self.transform not in _TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class GaussianSystem:
    """Everything gaussian_condition needs for one hyperparameter value."""

    prior: GaussianPrior
    H: sp.csr_matrix
    noise_var: np.ndarray
    offset: np.ndarray | None = None


@dataclass
class LatentModel:
    """Hyperparameters, their prior, and how they assemble the Gaussian system.

    ``log_likelihood(theta, z)`` may supply a faster route to log p(z | theta);
    without it the marginal likelihood comes from ``gaussian_condition``.
    """

    hyper: Sequence[HyperParameter]
    log_prior: Callable[[dict], float]
    assemble: Callable[[dict], GaussianSystem]
    log_likelihood: Callable[[dict, np.ndarray], float] | None = None

    @property
    def names(self) -> list[str]:
        return [h.name for h in self.hyper]


@dataclass
class HyperState:
    values: dict
    log_posterior: float


@dataclass
class Chain:
    names: list
    samples: np.ndarray  # (n_kept, n_hyper)
    log_posterior: np.ndarray
    acceptance_rate: float
    steps: np.ndarray
    latent: np.ndarray | None
    seconds: float

    def as_states(self) -> list[HyperState]:
        return [HyperState(dict(zip(self.names, s)), lp) for s, lp in zip(self.samples, self.log_posterior)]

    def write(self, path) -> None:
        """Delimited chain file: one row per kept iteration."""
        with open(path, "w") as fh:
            fh.write(",".join(["iteration", *self.names, "log_posterior"]) + "\n")
            for k, (s, lp) in enumerate(zip(self.samples, self.log_posterior)):
                fh.write(",".join([str(k), *(repr(float(v)) for v in s), repr(float(lp))]) + "\n")


class _Target:
    def __init__(self, model: LatentModel, z):
        self.model = model
        self.z = np.asarray(z, dtype=float)
        self.fwd = [_TRANSFORMS[h.transform][0] for h in model.hyper]
        self.inv = [_TRANSFORMS[h.transform][1] for h in model.hyper]
        self.jac = [_TRANSFORMS[h.transform][2] for h in model.hyper]

    def theta(self, u) -> dict:
        return {h.name: float(f(v)) for h, f, v in zip(self.model.hyper, self.inv, u)}

    def condition(self, theta: dict) -> PosteriorResult:
        system = self.model.assemble(theta)
        return gaussian_condition(system.prior, system.H, system.noise_var, self.z, system.offset, variance="none")

    def __call__(self, u) -> float:
        """Log posterior on the transformed scale (-inf where undefined)."""
        theta = self.theta(u)
        lp = self.model.log_prior(theta)
        if not np.isfinite(lp):
            return -np.inf
        try:
            if self.model.log_likelihood is not None:
                ll = self.model.log_likelihood(theta, self.z)
            else:
                ll = self.condition(theta).log_marginal_likelihood
        except (NotPositiveDefiniteError, np.linalg.LinAlgError, ValueError):
            return -np.inf
        return float(lp + ll + sum(j(v) for j, v in zip(self.jac, u)))


def mwg_sample(
    model: LatentModel,
    z,
    n_iter: int,
    seed,
    burn_in: int | None = None,
    thin: int = 1,
    draw_latent: bool = True,
    target_acceptance: float = 0.35,
) -> Chain:
    """Metropolis-within-Gibbs over (hyperparameters, latent field).

    Each sweep makes a block random-walk proposal with diagonal scales on the
    transformed hyperparameters, accepted against p(theta | z), then draws the
    latent vector from p(eta | theta, z).  Proposal scales adapt during burn-in
    only and are frozen afterwards.
    """
    rng = np.random.default_rng(seed)
    burn_in = n_iter // 2 if burn_in is None else burn_in
    target = _Target(model, z)
    u = np.array([f(h.init) for h, f in zip(model.hyper, target.fwd)], dtype=float)
    lp = target(u)
    res = None
    if not np.isfinite(lp):
        raise FloatingPointError(f"non-finite log posterior at the initial state {target.theta(u)}")
    step = np.array([h.step for h in model.hyper], dtype=float)
    log_step = np.log(step)
    kept, kept_lp, latent = [], [], []
    accepted = 0
    window_acc = 0
    t0 = time.perf_counter()
    for it in range(n_iter):
        prop = u + step * rng.standard_normal(len(u))
        lp_prop = target(prop)
        if np.log(rng.uniform()) < lp_prop - lp:
            u, lp, res = prop, lp_prop, None
            if it >= burn_in:
                accepted += 1
            window_acc += 1
        if it < burn_in and (it + 1) % 25 == 0:
            rate = window_acc / 25.0
            log_step += (rate - target_acceptance) * 2.0 / math.sqrt((it + 1) / 25.0)
            step = np.exp(log_step)
            window_acc = 0
        if it >= burn_in and (it - burn_in) % thin == 0:
            kept.append([target.theta(u)[h.name] for h in model.hyper])
            kept_lp.append(lp)
            if draw_latent:
                if res is None:
                    res = target.condition(target.theta(u))
                latent.append(res.mean + res.factor.sample(rng))
    n_post = max(1, n_iter - burn_in)
    return Chain(
        names=model.names,
        samples=np.array(kept),
        log_posterior=np.array(kept_lp),
        acceptance_rate=accepted / n_post,
        steps=step,
        latent=np.array(latent) if draw_latent else None,
        seconds=time.perf_counter() - t0,
    )


def run_chains(model: LatentModel, z, n_chains: int, seed, workers: int = 1, **kwargs) -> list[Chain]:
    """Independent chains with seeds spawned from one SeedSequence."""
    seeds = np.random.SeedSequence(seed).spawn(n_chains)
    if workers <= 1:
        return [mwg_sample(model, z, seed=s, **kwargs) for s in seeds]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda s: mwg_sample(model, z, seed=s, **kwargs), seeds))


def split_rhat(chains: Sequence[np.ndarray]) -> float:
    """Split-R-hat for one scalar quantity across chains (each a 1-d array)."""
    halves = []
    for c in chains:
        c = np.asarray(c, dtype=float)
        n = len(c) // 2
        halves += [c[:n], c[n : 2 * n]]
    x = np.array(halves)
    n = x.shape[1]
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    var = (n - 1) / n * W + B / n
    return float(np.sqrt(var / W)) if W > 0 else float("nan")
