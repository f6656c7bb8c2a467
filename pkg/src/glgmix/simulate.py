"""Synthetic clustered count data for both model families.

One shared ``SimDesign`` describes cluster layout, covariates, and
offsets; ``simulate_pglg`` draws latent intercepts from a generalized
log-gamma law, ``simulate_mnb`` draws multiplicative gamma frailties.
The ``resample_*`` variants keep an existing dataset's design and redraw
only the responses, which is what the simulated-envelope machinery needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import glg_dist
from .data_io import INTERCEPT_NAME, ClusterData, Dataset
from .errors import DomainError
from .glg_dist import GlgParams

_ETA_MAX = 30.0  # exp(30) ~ 1e13 counts; anything past this is a design error


@dataclass(frozen=True)
class SimDesign:
    """Layout of a simulated dataset.

    ``cluster_sizes`` is either one int (balanced design) or a sequence
    with one size per cluster.  ``x_builder`` supplies covariates: None
    gives an intercept-only design, a fixed (m, p) array is reused for
    every cluster (requires balanced sizes), and a callable
    ``f(rng, m) -> (m, p)`` is invoked per cluster.  ``offsets`` follows
    the same None / scalar / per-observation-array convention.
    """

    n_clusters: int
    cluster_sizes: object = 1
    x_builder: object = None
    offsets: object = None
    seed: int = 0
    column_names: tuple = field(default=None)

    def __post_init__(self):
        if self.n_clusters < 1:
            raise DomainError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if np.isscalar(self.cluster_sizes):
            sizes = (int(self.cluster_sizes),) * self.n_clusters
        else:
            sizes = tuple(int(m) for m in self.cluster_sizes)
            if len(sizes) != self.n_clusters:
                raise DomainError(
                    f"cluster_sizes has {len(sizes)} entries for "
                    f"{self.n_clusters} clusters"
                )
        if any(m < 1 for m in sizes):
            raise DomainError("every cluster size must be >= 1")
        object.__setattr__(self, "cluster_sizes", sizes)
        if isinstance(self.x_builder, np.ndarray):
            x = np.asarray(self.x_builder, dtype=float)
            if x.ndim != 2:
                raise DomainError("fixed covariate array must be 2-dimensional")
            if len(set(sizes)) != 1 or x.shape[0] != sizes[0]:
                raise DomainError(
                    "a fixed covariate array requires balanced clusters of "
                    "matching size"
                )
            object.__setattr__(self, "x_builder", x)

    def _materialize(self, rng):
        """Draw covariates and offsets for each cluster."""
        xs = []
        for m in self.cluster_sizes:
            if self.x_builder is None:
                xs.append(np.ones((m, 1)))
            elif isinstance(self.x_builder, np.ndarray):
                xs.append(self.x_builder.copy())
            else:
                x = np.asarray(self.x_builder(rng, m), dtype=float)
                if x.ndim != 2 or x.shape[0] != m:
                    raise DomainError(
                        f"x_builder returned shape {x.shape}, expected ({m}, p)"
                    )
                xs.append(x)
        p = xs[0].shape[1]
        if any(x.shape[1] != p for x in xs):
            raise DomainError("x_builder returned inconsistent column counts")

        offs = []
        for m in self.cluster_sizes:
            if self.offsets is None:
                offs.append(np.zeros(m))
            elif np.isscalar(self.offsets):
                offs.append(np.full(m, float(self.offsets)))
            else:
                o = np.asarray(self.offsets, dtype=float)
                if o.shape != (m,):
                    raise DomainError(
                        "per-observation offsets require balanced clusters of "
                        "matching size"
                    )
                offs.append(o.copy())

        names = self.column_names
        if names is None:
            if self.x_builder is None:
                names = (INTERCEPT_NAME,)
            else:
                names = tuple(f"x{j + 1}" for j in range(p))
        elif len(names) != p:
            raise DomainError(
                f"column_names has {len(names)} entries for {p} columns"
            )
        return xs, offs, tuple(names)


def _assemble(design, xs, offs, beta, log_frailty, rng):
    """Poisson draws around exp(X beta + offset + log frailty)."""
    clusters = []
    for i, (x, off) in enumerate(zip(xs, offs)):
        eta = x @ beta + off + log_frailty[i]
        if np.any(eta > _ETA_MAX):
            raise DomainError(
                f"linear predictor exceeds {_ETA_MAX}; rescale the design"
            )
        y = rng.poisson(np.exp(eta))
        clusters.append(
            ClusterData(id=f"c{i + 1:05d}", y=y, X=x, offset=off)
        )
    return clusters


def simulate_pglg(design, params):
    """Clustered Poisson counts with GLG(0, sigma, lam) random intercepts."""
    rng = np.random.default_rng(design.seed)
    xs, offs, names = design._materialize(rng)
    prior = GlgParams(mu=0.0, sigma=params.sigma, lam=params.lam)
    b = glg_dist.sample(prior, rng, design.n_clusters)
    clusters = _assemble(design, xs, offs, params.beta, b, rng)
    return Dataset(clusters=tuple(clusters), column_names=names)


def simulate_mnb(design, params):
    """Clustered counts with multiplicative gamma(phi, 1/phi) frailties.

    Marginally multivariate negative binomial with dispersion phi.
    """
    rng = np.random.default_rng(design.seed)
    xs, offs, names = design._materialize(rng)
    w = rng.gamma(params.phi, 1.0 / params.phi, size=design.n_clusters)
    clusters = _assemble(design, xs, offs, params.beta, np.log(w), rng)
    return Dataset(clusters=tuple(clusters), column_names=names)


def _redraw(dataset, beta, log_frailty, rng):
    clusters = []
    for c, lf in zip(dataset.clusters, log_frailty):
        eta = c.X @ beta + c.offset + lf
        with np.errstate(over="raise"):
            try:
                mu = np.exp(eta)
            except FloatingPointError:
                raise DomainError(
                    f"cluster {c.id!r}: linear predictor overflows"
                ) from None
        y = rng.poisson(mu)
        clusters.append(ClusterData(id=c.id, y=y, X=c.X, offset=c.offset))
    return Dataset(clusters=tuple(clusters), column_names=dataset.column_names)


def resample_mnb(dataset, params, rng):
    """New responses from the fitted law, on the dataset's own design."""
    rng = np.random.default_rng(rng)
    w = rng.gamma(params.phi, 1.0 / params.phi, size=dataset.n_clusters)
    return _redraw(dataset, params.beta, np.log(w), rng)


def resample_pglg(dataset, params, rng):
    """New responses from the fitted law, on the dataset's own design."""
    rng = np.random.default_rng(rng)
    prior = GlgParams(mu=0.0, sigma=params.sigma, lam=params.lam)
    b = glg_dist.sample(prior, rng, dataset.n_clusters)
    return _redraw(dataset, params.beta, b, rng)
