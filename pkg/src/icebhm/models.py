"""Ready-made latent Gaussian models with Matérn hyperparameters.

``SpdeRegressionModel`` is the workhorse for point data: fixed effects plus
one SPDE field, PC priors on the field's (range, sd), and optionally a
multiplicative scale on the supplied noise variances.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.optimize as so
import scipy.sparse as sp

from .inference import (
    GaussianPrior,
    GaussianSystem,
    HyperParameter,
    LatentModel,
    PosteriorResult,
    gaussian_condition,
)
from .matern import PcPrior, pc_log_density
from .processes import StackedPrior
from .sparse_chol import SparseCholesky

__all__ = ["SpdeRegressionModel"]


class SpdeRegressionModel:
    """z = H eta + noise where one block of eta is an SPDE field with unknown (sigma, rho).

    Parameters
    ----------
    prior : StackedPrior
        Layout and the hyperparameter-free blocks (e.g. fixed effects).
    field : str
        Name of the spatial_only block whose Matérn parameters are sampled.
    H, noise_var :
        Observation operator and nominal noise variances.
    pc_prior : PcPrior
        Prior on (rho, sigma).
    noise_scale_sd : float, optional
        If given, a multiplicative noise-variance factor is added as a
        hyperparameter with a log-normal(0, noise_scale_sd^2) prior.
    """

    def __init__(
        self,
        prior: StackedPrior,
        field: str,
        H,
        noise_var,
        pc_prior: PcPrior,
        init: tuple[float, float] | None = None,
        noise_scale_sd: float | None = None,
    ):
        self.prior = prior
        self.field = field
        self.H = sp.csr_matrix(H)
        self.noise_var = np.asarray(noise_var, dtype=float)
        self.pc_prior = pc_prior
        self.noise_scale_sd = noise_scale_sd
        spec = prior.block(field).spec
        fem = spec.fem
        C = sp.diags(fem.lumped_mass)
        G = fem.stiffness
        self._parts = (C, G, (G @ sp.diags(1.0 / fem.lumped_mass) @ G).tocsc())
        seg = prior.segment(field, "field")
        self._slice = slice(seg.start, seg.start + seg.size)
        self._others = sp.csc_matrix(prior.Q)
        # zero the field block so it can be replaced per hyperparameter value
        mask = np.ones(prior.size)
        mask[self._slice] = 0.0
        M = sp.diags(mask)
        self._others = (M @ self._others @ M).tocsc()
        self._others.eliminate_zeros()
        sigma0 = init[0] if init else spec.matern.sigma
        rho0 = init[1] if init else spec.matern.rho
        hyper = [HyperParameter("sigma", sigma0, "log", 0.15), HyperParameter("rho", rho0, "log", 0.15)]
        if noise_scale_sd is not None:
            hyper.append(HyperParameter("noise_scale", 1.0, "log", 0.1))
        self.hyper = hyper
        # every precision this model needs is a linear combination of fixed
        # sparse parts; put them on one shared pattern so that a new theta only
        # recombines data arrays
        Hs = self.H
        HtRH = (Hs.T @ sp.diags(1.0 / self.noise_var) @ Hs).tocoo()
        parts = [self._embed_coo(C), self._embed_coo(G), self._embed_coo(self._parts[2]), self._others.tocoo(), HtRH]
        rows = np.concatenate([p.row for p in parts])
        cols = np.concatenate([p.col for p in parts])
        n = prior.size
        keys, inv = np.unique(cols.astype(np.int64) * n + rows, return_inverse=True)
        self._inv = inv
        self._vals = [p.data for p in parts]
        self._sizes = np.cumsum([0] + [p.nnz for p in parts])
        kc, kr = np.divmod(keys, n)
        self._indices = kr.astype(np.int32)
        self._indptr = np.searchsorted(kc, np.arange(n + 1)).astype(np.int32)
        self._n = n

    def _embed_coo(self, M) -> sp.coo_matrix:
        M = sp.coo_matrix(M)
        start = self._slice.start
        return sp.coo_matrix((M.data, (M.row + start, M.col + start)), shape=(self.prior.size,) * 2)

    def _assemble(self, coefs) -> sp.csc_matrix:
        w = np.concatenate([c * v for c, v in zip(coefs, self._vals)])
        data = np.bincount(self._inv, weights=w, minlength=len(self._indices))
        return sp.csc_matrix((data, self._indices, self._indptr), shape=(self._n, self._n))

    @staticmethod
    def _spde_coefs(sigma: float, rho: float) -> tuple[float, float, float]:
        kappa = math.sqrt(8.0) / rho
        tau2 = 1.0 / (4.0 * math.pi * kappa**2 * sigma**2)
        return tau2 * kappa**4, 2.0 * tau2 * kappa**2, tau2

    def field_precision(self, sigma: float, rho: float) -> sp.csc_matrix:
        C, G, GCG = self._parts
        a, b, c = self._spde_coefs(sigma, rho)
        return (a * C + b * G + c * GCG).tocsc()

    def gaussian_prior(self, theta: dict) -> GaussianPrior:
        a, b, c = self._spde_coefs(theta["sigma"], theta["rho"])
        Q = self._assemble((a, b, c, 1.0, 0.0))
        return GaussianPrior(Q, self.prior.mean, self.prior.dense_indices)

    def system(self, theta: dict) -> GaussianSystem:
        nv = self.noise_var * theta.get("noise_scale", 1.0)
        return GaussianSystem(self.gaussian_prior(theta), self.H, nv)

    def log_marginal_likelihood(self, z, theta: dict) -> float:
        """log p(z | theta) from the prior and posterior factorisations on the shared pattern."""
        z = np.asarray(z, dtype=float)
        s = theta.get("noise_scale", 1.0)
        a, b, c = self._spde_coefs(theta["sigma"], theta["rho"])
        dense = self.prior.dense_indices
        prior = SparseCholesky(self._assemble((a, b, c, 1.0, 0.0)), dense)
        post = SparseCholesky(self._assemble((a, b, c, 1.0, 1.0 / s)), dense)
        nv = self.noise_var * s
        rhs = self.H.T @ (z / nv)
        delta = post.solve(rhs)
        quad = float(z @ (z / nv) - rhs @ delta)
        return float(
            -0.5 * (len(z) * math.log(2.0 * math.pi) + np.sum(np.log(nv)) + quad)
            + 0.5 * (prior.logdet() - post.logdet())
        )

    def log_prior(self, theta: dict) -> float:
        lp = pc_log_density(self.pc_prior, rho=theta["rho"], sigma=theta["sigma"])
        if self.noise_scale_sd is not None:
            s = theta["noise_scale"]
            if s <= 0:
                return -np.inf
            lp += -math.log(s) - 0.5 * (math.log(s) / self.noise_scale_sd) ** 2
        return float(lp)

    def latent_model(self) -> LatentModel:
        return LatentModel(
            self.hyper, self.log_prior, self.system, lambda theta, z: self.log_marginal_likelihood(z, theta)
        )

    def condition(self, z, theta: dict, variance: str = "selected") -> PosteriorResult:
        s = self.system(theta)
        return gaussian_condition(s.prior, s.H, s.noise_var, z, s.offset, variance=variance)

    def log_posterior(self, z, theta: dict) -> float:
        """Log p(theta | z) up to a constant, on the log-hyperparameter scale."""
        lp = self.log_prior(theta)
        if not np.isfinite(lp):
            return -np.inf
        lml = self.log_marginal_likelihood(z, theta)
        return lp + lml + sum(math.log(v) for v in theta.values())

    def fit_map(self, z, variance: str = "selected") -> tuple[dict, PosteriorResult]:
        """Posterior mode of the log-hyperparameters, then the conditional posterior there."""
        names = [h.name for h in self.hyper]
        x0 = np.log([h.init for h in self.hyper])

        def objective(x):
            theta = dict(zip(names, np.exp(x)))
            try:
                val = self.log_posterior(z, theta)
            except (np.linalg.LinAlgError, ValueError, RuntimeError):
                return 1e300
            return -val if np.isfinite(val) else 1e300

        opt = so.minimize(objective, x0, method="Nelder-Mead", options=dict(xatol=5e-3, fatol=1e-4, maxiter=400))
        theta = dict(zip(names, np.exp(opt.x)))
        return theta, self.condition(z, theta, variance=variance)
