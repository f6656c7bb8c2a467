"""The generalized log-gamma (GLG) distribution.

Three-parameter location-scale-shape family containing the normal law
(shape 0) and the extreme-value law (shape 1); skewed right for negative
shape, left for positive shape.  Density, for shape lam != 0 and
z = (y - mu) / sigma:

    f(y) = c(lam)/sigma * exp{ z/lam - lam^-2 * exp(lam*z) },
    c(lam) = |lam| * (lam^-2)^(lam^-2) / Gamma(lam^-2),

and the N(mu, sigma^2) density for lam = 0.  Equivalently, for lam != 0,

    y = mu + (sigma/lam) * log(lam^2 * w),   w ~ Gamma(lam^-2, rate 1),

which is the representation used for sampling and for the closed-form
moments below.  See Lawless (2002, ch. 5) for background.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import digamma, gammaincinv, gammaln, ndtri, polygamma

from .errors import DomainError, MomentExistenceError

# Below this |lam| the normal branch is used.  Gamma(lam^-2) overflows long
# before the two branches become statistically distinguishable.
LAMBDA_EPS = 1e-6

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GlgParams:
    """Position, scale and shape of a generalized log-gamma law."""

    mu: float
    sigma: float
    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma) and np.isfinite(self.lam)):
            raise DomainError("GLG parameters must be finite")
        if self.sigma <= 0:
            raise DomainError(f"scale must be positive, got sigma={self.sigma}")

    @property
    def is_normal(self):
        """True when the shape is (numerically) zero."""
        return abs(self.lam) < LAMBDA_EPS


def _log_c(lam):
    # log of the normalizing constant |lam| (lam^-2)^(lam^-2) / Gamma(lam^-2)
    q = lam ** -2.0
    return np.log(abs(lam)) + q * np.log(q) - gammaln(q)


def log_pdf(y, params):
    """Log density at ``y`` (scalar or ndarray).

    Raises
    ------
    DomainError
        If any ``y`` is not finite.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("log_pdf requires finite y")
    z = (y - params.mu) / params.sigma
    if params.is_normal:
        out = -_LOG_SQRT_2PI - np.log(params.sigma) - 0.5 * z * z
    else:
        lam = params.lam
        # exp may overflow far in the heavy tail; -inf is the correct limit
        with np.errstate(over="ignore"):
            out = _log_c(lam) - np.log(params.sigma) + z / lam - lam ** -2.0 * np.exp(lam * z)
    return out if out.ndim else float(out)


def pdf(y, params):
    """Density at ``y``."""
    return np.exp(log_pdf(y, params))


def mean(params):
    """E(y).

    For lam != 0 this follows from the gamma representation:
    E(y) = mu + (sigma/lam) * {digamma(lam^-2) + log(lam^2)}.  The sign of
    lam matters: mirroring the shape mirrors the mean about mu.
    """
    if params.is_normal:
        return params.mu
    q = params.lam ** -2.0
    return params.mu + params.sigma * (digamma(q) - np.log(q)) / params.lam


def variance(params):
    """Var(y) = sigma^2 * trigamma(lam^-2) / lam^2 (sigma^2 for lam = 0)."""
    if params.is_normal:
        return params.sigma ** 2
    q = params.lam ** -2.0
    return params.sigma ** 2 * polygamma(1, q) / params.lam ** 2


def _check_exp_moment_exists(params, k):
    # E(e^{k b}) = (lam^2)^{k sigma/lam} Gamma(q*(1 + k*lam*sigma))/Gamma(q)
    # requires a positive gamma argument; for lam < 0 that is k*sigma*|lam| < 1.
    if params.lam < 0 and k * params.sigma * abs(params.lam) >= 1.0:
        raise MomentExistenceError(
            f"E(exp({k}*b)) diverges for sigma={params.sigma}, lam={params.lam}: "
            f"need k*sigma*|lam| < 1"
        )


def exp_moment(params, k):
    """E(e^{k b}) for b ~ GLG(0, sigma, lam), k in {1, 2}.

    Uses the lognormal expression for lam = 0 and the gamma-ratio closed
    form otherwise.  For lam < 0 the underlying integral converges only
    when k*sigma*|lam| < 1; outside that region a
    :class:`MomentExistenceError` is raised.

    Parameters
    ----------
    params : GlgParams
        Must have ``mu == 0``.
    k : int
        Moment order, 1 or 2.
    """
    if k not in (1, 2):
        raise DomainError(f"k must be 1 or 2, got {k!r}")
    if params.mu != 0.0:
        raise DomainError("exp_moment is defined for mu = 0")
    if params.is_normal:
        return float(np.exp(0.5 * (k * params.sigma) ** 2))
    _check_exp_moment_exists(params, k)
    lam, sigma = params.lam, params.sigma
    q = lam ** -2.0
    log_m = (k * sigma / lam) * np.log(lam ** 2) + gammaln(q * (1.0 + k * lam * sigma)) - gammaln(q)
    return float(np.exp(log_m))


def exp_moment_numint(params, k):
    """E(e^{k b}) by direct adaptive quadrature of the defining integral.

    Slow reference path kept as an independent cross-check of
    :func:`exp_moment`; same existence guard.
    """
    if k not in (1, 2):
        raise DomainError(f"k must be 1 or 2, got {k!r}")
    if params.mu != 0.0:
        raise DomainError("exp_moment is defined for mu = 0")
    if not params.is_normal:
        _check_exp_moment_exists(params, k)

    def integrand(y):
        return np.exp(k * y + log_pdf(y, params))

    # Split at the mode region to help the adaptive rule on skewed shapes.
    value = 0.0
    for lo, hi in ((-np.inf, 0.0), (0.0, np.inf)):
        part, _ = quad(integrand, lo, hi, limit=200)
        value += part
    return value


def sample(params, seed, n):
    """Draw ``n`` i.i.d. variates; deterministic given ``seed``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if params.is_normal:
        return rng.normal(params.mu, params.sigma, size=n)
    lam = params.lam
    w = rng.gamma(lam ** -2.0, 1.0, size=n)
    return params.mu + (params.sigma / lam) * np.log(lam ** 2 * w)


def support_interval(params, tail=1e-7):
    """An interval carrying all but ``tail`` probability in each tail.

    Used to choose plotting grids.  Exact quantiles: the normal branch
    inverts the normal CDF, otherwise the gamma representation maps
    gamma quantiles through b = mu + (sigma/lam) log(lam^2 w).
    """
    if not 0.0 < tail < 0.5:
        raise DomainError(f"tail must be in (0, 0.5), got {tail}")
    if params.is_normal:
        half = abs(ndtri(tail)) * params.sigma
        return params.mu - half, params.mu + half
    lam = params.lam
    q = lam ** -2.0
    w_lo = gammaincinv(q, tail)
    w_hi = gammaincinv(q, 1.0 - tail)
    a = params.mu + (params.sigma / lam) * np.log(lam ** 2 * w_lo)
    b = params.mu + (params.sigma / lam) * np.log(lam ** 2 * w_hi)
    return (a, b) if a <= b else (b, a)
