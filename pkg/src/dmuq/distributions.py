"""Gaussian corner-uncertainty models, their regression losses, and covariance pooling.

Three representations of a box's location uncertainty are supported:

* ``IMG``: each of the I corners has its own D x D covariance,
* ``ISG``: every coordinate of every corner has its own variance,
* ``DMG``: the I*D stacked corner coordinates share one joint covariance.

Losses drop the additive constants of the Gaussian-vs-point-mass divergence, so
a perfect prediction with identity covariance costs exactly zero.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InsufficientDataError, InvalidParameterError, NonPSDError, SingularMatrixError
from .linalg import RAW_DIAG_BOUND, chol_factor, logdet, mat_inverse, tri_solve

LOG_2PI = math.log(2.0 * math.pi)


class Variant(str, enum.Enum):
    IMG = "IMG"
    ISG = "ISG"
    DMG = "DMG"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        try:
            return cls(str(getattr(value, "value", value)).upper())
        except ValueError as exc:
            raise InvalidParameterError(f"unknown distribution variant {value!r}") from exc


def stats_dim(variant: Variant, n_corners: int = 4, dim: int = 2) -> int:
    """Dimensionality of the residual vectors pooled for ``variant``."""
    return n_corners * dim if Variant.parse(variant) is Variant.DMG else dim


@dataclass(frozen=True)
class CornerGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def log_pdf(self, y) -> float:
        return float(log_pdf(y, self.mean, self.cov))


@dataclass(frozen=True)
class BoxUncertainty:
    """Location uncertainty of one box.

    ``cov`` is (I, D, D) for IMG and ISG (ISG covariances are diagonal) and
    (I*D, I*D) for DMG.
    """

    variant: Variant
    cov: np.ndarray

    def corner_covariances(self) -> np.ndarray:
        """Per-corner D x D blocks (the marginal blocks for DMG)."""
        if self.variant is Variant.DMG:
            dim = 2
            n = self.cov.shape[0] // dim
            return np.stack([self.cov[i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] for i in range(n)])
        return self.cov

    def log_pdf(self, corners_true: np.ndarray, corners_pred: np.ndarray) -> float:
        """Joint log-density of the true corners, summed over corners."""
        if self.variant is Variant.DMG:
            return float(log_pdf(corners_true.reshape(-1), corners_pred.reshape(-1), self.cov))
        return float(np.sum(log_pdf(corners_true, corners_pred, self.cov)))


@dataclass
class UQStats:
    sigma_a: np.ndarray
    sigma_e: np.ndarray
    n_bootstraps: int
    n_residuals: int
    block_length: int
    variant: str = Variant.IMG.value
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.sigma_a.shape[-1]


# -- densities ----------------------------------------------------------------

def log_pdf(y, mean, cov) -> np.ndarray:
    """Multivariate normal log-density with the (2 pi)^(D/2) |cov|^(1/2) normalizer.

    Leading axes broadcast, so one call can score many corners at once.
    """
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    dim = cov.shape[-1]
    try:
        ld = logdet(cov)
        inv = mat_inverse(cov)
    except SingularMatrixError as exc:
        raise NonPSDError(str(exc)) from exc
    e = y - mean
    maha = np.einsum("...i,...ij,...j->...", e, inv, e)
    return -0.5 * dim * LOG_2PI - 0.5 * ld - 0.5 * maha


def univariate_log_pdf(y, mean, var) -> np.ndarray:
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise InvalidParameterError("variances must be positive")
    e = np.asarray(y, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    return -0.5 * LOG_2PI - 0.5 * np.log(var) - 0.5 * e * e / var


# -- regression losses ----------------------------------------------------------

def kl_regression_loss(y, y_hat, sigma):
    """``0.5 e^T sigma^-1 e + 0.5 log|sigma|`` with ``e = y - y_hat``.

    Works on arrays or tensors; with tensors the gradient flows into ``y_hat``
    and whatever produced ``sigma``. Leading axes are batch axes and the
    per-item losses are returned.
    """
    is_tensor = any(isinstance(v, Tensor) for v in (y, y_hat, sigma))
    e = ad.sub(y, y_hat)
    inv = mat_inverse(ad.as_tensor(sigma))
    maha = ad.matmul(ad.matmul(e.reshape(e.shape[:-1] + (1, e.shape[-1])), inv), e.reshape(e.shape + (1,)))
    maha = maha.reshape(e.shape[:-1])
    out = 0.5 * maha + 0.5 * logdet(ad.as_tensor(sigma))
    return out if is_tensor else (float(out.data) if out.data.ndim == 0 else out.data)


def kl_loss_from_chol(y, y_hat, raw) -> Tensor:
    """Same loss as :func:`kl_regression_loss` with ``sigma = L L^T`` built from ``raw``.

    Uses a triangular solve and ``log|sigma| = 2 sum(clip(raw_diag))``.
    """
    e = ad.sub(y, y_hat)
    factor = chol_factor(raw)
    z = tri_solve(factor, e)
    dim = e.shape[-1]
    raw_diag = ad.clip(ad.as_tensor(raw)[..., :dim], -RAW_DIAG_BOUND, RAW_DIAG_BOUND)
    return 0.5 * (z * z).sum(axis=-1) + raw_diag.sum(axis=-1)


def loss_isg(y, y_hat, variances):
    """Sum over coordinates of ``0.5 e_d^2 / var_d + 0.5 log var_d``."""
    var_data = variances.data if isinstance(variances, Tensor) else np.asarray(variances, dtype=np.float64)
    if np.any(~(var_data > 0)):
        raise InvalidParameterError("variances must be positive")
    is_tensor = any(isinstance(v, Tensor) for v in (y, y_hat, variances))
    e = ad.sub(y, y_hat)
    out = (0.5 * e * e / variances + 0.5 * ad.log(variances)).sum(axis=-1)
    return out if is_tensor else (float(out.data) if out.data.ndim == 0 else out.data)


def loss_isg_from_log_std(y, y_hat, raw) -> Tensor:
    """ISG loss with ``var_d = exp(2 clip(raw_d))``; equals the IMG loss of a diagonal factor."""
    e = ad.sub(y, y_hat)
    r = ad.clip(raw, -RAW_DIAG_BOUND, RAW_DIAG_BOUND)
    return (0.5 * e * e * ad.exp(-2.0 * r) + r).sum(axis=-1)


def loss_dmg(y_all, y_hat_all, sigma_big):
    """Joint loss over all stacked corner coordinates, inputs shaped (..., I, D)."""
    def flat(v):
        v = v if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        return v.reshape(v.shape[:-2] + (v.shape[-2] * v.shape[-1],))

    return kl_regression_loss(flat(y_all), flat(y_hat_all), sigma_big)


# -- covariance pooling -------------------------------------------------------------

def combine_covariance(sigma_e, sigma_a, sigma_hat) -> np.ndarray:
    """Epistemic plus the average of bagged and predicted aleatoric covariance."""
    return np.asarray(sigma_e) + (0.5 * np.asarray(sigma_a) + 0.5 * np.asarray(sigma_hat))


def estimate_sigma_a(covariances) -> np.ndarray:
    covs = np.asarray(covariances, dtype=np.float64)
    if covs.size == 0 or covs.ndim < 2:
        raise InsufficientDataError("need at least one predicted covariance")
    if covs.ndim == 2:
        return covs.copy()
    return covs.reshape((-1,) + covs.shape[-2:]).mean(axis=0)


def estimate_sigma_e(residuals, min_count: int = 2) -> np.ndarray:
    """Population covariance (divisor n) of pooled residual vectors, centered at their mean."""
    res = np.asarray(residuals, dtype=np.float64)
    if res.ndim != 2:
        raise InsufficientDataError("residuals must be a non-empty (n, D) array")
    n, dim = res.shape
    if n < min_count:
        raise InsufficientDataError(f"need at least {min_count} residuals, got {n}")
    centered = res - res.mean(axis=0)
    cov = centered.T @ centered / n
    return 0.5 * (cov + cov.T)
