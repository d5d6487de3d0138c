"""Mean/variance specifications and their closed-form quasi-likelihood kernels.

Each family supplies the inverse link ``mean(eta)`` with two derivatives,
the variance function ``variance(mu)`` with one derivative, and the kernel
``int_a^mu (y - t) / V(t) dt`` as a function of the linear predictor, with
the integration constant dropped. All kernel quantities are at unit
dispersion; divide by ``psi`` for the dispersed version.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _exp(eta):
    with np.errstate(over="ignore"):
        return np.exp(eta)


@dataclass(frozen=True)
class QuasiFamily:
    """Base class; use :class:`LinearIdentity`, :class:`PoissonLog` or :class:`NegBinLog`."""

    name = "base"
    globally_concave = True

    def mean(self, eta):
        raise NotImplementedError

    def dmean(self, eta):
        raise NotImplementedError

    def d2mean(self, eta):
        raise NotImplementedError

    def variance(self, mu):
        raise NotImplementedError

    def dvariance(self, mu):
        raise NotImplementedError

    def kernel(self, y, eta):
        raise NotImplementedError

    def kernel_derivs(self, y, eta):
        """Return ``(dl/deta, -d2l/deta2, mu'^2/V)`` at unit dispersion."""
        raise NotImplementedError

    def concavity_defect(self, eta):
        """``V'(mu)/V(mu) * mu'^2 - mu''``; zero everywhere for globally concave families."""
        mu = self.mean(eta)
        return self.dvariance(mu) / self.variance(mu) * self.dmean(eta) ** 2 - self.d2mean(eta)

    def pearson_residuals_sq(self, y, eta):
        mu = self.mean(eta)
        return (y - mu) ** 2 / self.variance(mu)


@dataclass(frozen=True)
class LinearIdentity(QuasiFamily):
    name = "linear"

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def dmean(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def d2mean(self, eta):
        return np.zeros_like(np.asarray(eta, dtype=float))

    def variance(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def dvariance(self, mu):
        return np.zeros_like(np.asarray(mu, dtype=float))

    def kernel(self, y, eta):
        return y * eta - 0.5 * eta * eta

    def kernel_derivs(self, y, eta):
        one = np.ones_like(eta)
        return y - eta, one, one


@dataclass(frozen=True)
class PoissonLog(QuasiFamily):
    name = "poisson"

    def mean(self, eta):
        return _exp(eta)

    def dmean(self, eta):
        return _exp(eta)

    def d2mean(self, eta):
        return _exp(eta)

    def variance(self, mu):
        return np.asarray(mu, dtype=float)

    def dvariance(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def kernel(self, y, eta):
        return y * eta - _exp(eta)

    def kernel_derivs(self, y, eta):
        mu = _exp(eta)
        return y - mu, mu, mu


@dataclass(frozen=True)
class NegBinLog(QuasiFamily):
    """Log link with variance ``mu + mu^2 / theta``."""

    theta: float = 1.0
    name = "negbin"
    globally_concave = False

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")

    def mean(self, eta):
        return _exp(eta)

    def dmean(self, eta):
        return _exp(eta)

    def d2mean(self, eta):
        return _exp(eta)

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        return mu + mu * mu / self.theta

    def dvariance(self, mu):
        return 1.0 + 2.0 * np.asarray(mu, dtype=float) / self.theta

    def kernel(self, y, eta):
        # partial fractions of (y - t) / (t + t^2/theta)
        th = self.theta
        return y * eta - (y + th) * np.logaddexp(np.log(th), eta)

    def kernel_derivs(self, y, eta):
        th = self.theta
        mu = _exp(eta)
        denom = th + mu
        grad = th * (y - mu) / denom
        neg_hess = th * mu * (th + y) / denom**2
        fisher = th * mu / denom
        return grad, neg_hess, fisher


FAMILIES = {"linear": LinearIdentity, "poisson": PoissonLog, "negbin": NegBinLog}


def family_from_name(name: str, theta: float | None = None) -> QuasiFamily:
    key = name.lower()
    if key in ("linear", "gaussian", "identity"):
        return LinearIdentity()
    if key in ("poisson", "qp", "quasipoisson"):
        return PoissonLog()
    if key in ("negbin", "nb"):
        return NegBinLog(theta if theta is not None else 1.0)
    raise ValueError(f"unknown family {name!r}; expected one of {sorted(FAMILIES)}")
