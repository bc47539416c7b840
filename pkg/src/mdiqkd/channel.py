"""Log-normal fading model of a turbulent free-space channel.

The transmittance ``eta`` of each channel is log-normal with mean ``eta0``:
``ln(eta) ~ Normal(ln(eta0) - sigma2/2, sigma2)``. The density is evaluated
in closed form, sampled, and discretized into probability bins that the
post-selection machinery truncates at transmittance cutoffs.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

# rejection of mass above eta = 1 is not modeled; warn when it is material
MASS_ABOVE_ONE_WARN = 1e-4
COVERAGE_SIGMAS = 6.0
DEFAULT_BINS = 100


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    """Mean transmittance and Rytov variance of one channel."""

    eta0: float
    sigma2: float = 0.0

    def __post_init__(self):
        if not 0 < self.eta0 <= 1:
            raise ChannelError(f"eta0 must lie in (0, 1], got {self.eta0}")
        if not self.sigma2 >= 0:
            raise ChannelError(f"sigma2 must be >= 0, got {self.sigma2}")

    @classmethod
    def from_db(cls, loss_db: float, sigma2: float = 0.0) -> "ChannelSpec":
        return cls(eta0=10.0 ** (-loss_db / 10.0), sigma2=sigma2)

    @property
    def is_static(self) -> bool:
        return self.sigma2 == 0

    @property
    def log_mean(self) -> float:
        """Mean of ln(eta)."""
        return math.log(self.eta0) - self.sigma2 / 2.0

    @property
    def loss_db(self) -> float:
        return -10.0 * math.log10(self.eta0)

    def cdf(self, eta):
        """P(transmittance <= eta)."""
        eta = np.asarray(eta, dtype=float)
        if self.is_static:
            return (eta >= self.eta0).astype(float)
        with np.errstate(divide="ignore"):
            z = (np.log(eta) - self.log_mean) / math.sqrt(self.sigma2)
        return ndtr(z)

    def mass_above_one(self) -> float:
        return float(1.0 - self.cdf(1.0))


@dataclass(frozen=True)
class RytovInputs:
    """Plane-wave turbulence inputs: C_n^2 [m^-2/3], wave number k [rad/m], path L [m]."""

    cn2: float
    k: float
    L: float

    def __post_init__(self):
        for name in ("cn2", "k", "L"):
            if not getattr(self, name) > 0:
                raise ChannelError(f"{name} must be strictly positive")

    @classmethod
    def from_wavelength(cls, cn2: float, wavelength: float, L: float) -> "RytovInputs":
        return cls(cn2=cn2, k=2.0 * math.pi / wavelength, L=L)


def pdtc_density(eta, spec: ChannelSpec):
    """Log-normal probability density of the channel transmittance.

    Parameters
    ----------
    eta : float or array_like
        Transmittance values, strictly positive.
    spec : ChannelSpec
        Channel with ``sigma2 > 0``.
    """
    if spec.is_static:
        raise ChannelError(
            "sigma2 = 0 has no density; use discretize() for the static single-bin channel"
        )
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0):
        raise ChannelError("transmittance must be strictly positive")
    sigma = math.sqrt(spec.sigma2)
    arg = np.log(eta / spec.eta0) + spec.sigma2 / 2.0
    out = np.exp(-(arg**2) / (2.0 * spec.sigma2)) / (math.sqrt(2.0 * math.pi) * sigma * eta)
    return out if out.ndim else float(out)


def rytov_variance(inputs: RytovInputs) -> float:
    """Plane-wave Rytov variance 1.23 C_n^2 k^(7/6) L^(11/6)."""
    return 1.23 * inputs.cn2 * inputs.k ** (7.0 / 6.0) * inputs.L ** (11.0 / 6.0)


def sample_transmittance(spec: ChannelSpec, seed: int, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. transmittances; deterministic for a given seed."""
    if n < 1:
        raise ChannelError(f"n must be >= 1, got {n}")
    if spec.is_static:
        return np.full(n, spec.eta0)
    rng = np.random.default_rng(seed)
    return np.exp(rng.normal(spec.log_mean, math.sqrt(spec.sigma2), size=n))


@dataclass(frozen=True)
class TransmittanceDistribution:
    """Binned transmittance distribution.

    ``eta_low``, ``eta_high``, ``eta_repr`` and ``probability`` are parallel
    arrays in ascending transmittance order. The probabilities are the bin
    masses of the original distribution (not renormalized after truncation),
    so ``survival`` is their sum.
    """

    eta_low: np.ndarray
    eta_high: np.ndarray
    eta_repr: np.ndarray
    probability: np.ndarray
    survival: float
    spec: ChannelSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.probability)
        if not (len(self.eta_low) == len(self.eta_high) == len(self.eta_repr) == n):
            raise ChannelError("bin arrays must have equal length")
        if n and abs(float(np.sum(self.probability)) - self.survival) > 1e-9:
            raise ChannelError("bin probabilities do not sum to the survival mass")

    def __len__(self) -> int:
        return len(self.probability)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0 or self.survival <= 0

    @property
    def bins(self) -> list[tuple[float, float, float, float]]:
        return list(
            zip(
                self.eta_low.tolist(),
                self.eta_high.tolist(),
                self.eta_repr.tolist(),
                self.probability.tolist(),
            )
        )

    def mean(self) -> float:
        """Unconditional mean transmittance carried by the bins."""
        return float(np.sum(self.probability * self.eta_repr))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eta_low", "eta_high", "eta_repr", "probability"])
            for row in self.bins:
                w.writerow([repr(v) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TransmittanceDistribution":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        if data.size == 0:
            return empty_distribution()
        p = data[:, 3]
        return cls(data[:, 0], data[:, 1], data[:, 2], p, float(np.sum(p)))


def empty_distribution() -> TransmittanceDistribution:
    e = np.empty(0)
    return TransmittanceDistribution(e, e, e, e, 0.0)


def static_distribution(eta0: float) -> TransmittanceDistribution:
    a = np.array([eta0])
    return TransmittanceDistribution(a, a.copy(), a.copy(), np.array([1.0]), 1.0,
                                     spec=ChannelSpec(eta0, 0.0))


def discretize(spec: ChannelSpec, n_bins: int = DEFAULT_BINS) -> TransmittanceDistribution:
    """Log-spaced binning of the channel over mu_X +/- 6 sigma.

    Bin masses are exact integrals of the density (normal CDF differences in
    log space); each bin's representative transmittance is its conditional
    mean, ``eta0 * dPhi(z - sigma) / dPhi(z)``.
    """
    if spec.is_static:
        return static_distribution(spec.eta0)
    if n_bins < 2:
        raise ChannelError(f"n_bins must be >= 2, got {n_bins}")
    above = spec.mass_above_one()
    if above > MASS_ABOVE_ONE_WARN:
        logger.warning(
            "%.3g of the transmittance mass of channel (eta0=%.4g, sigma2=%.3g) lies above 1",
            above, spec.eta0, spec.sigma2,
        )
    sigma = math.sqrt(spec.sigma2)
    z = np.linspace(-COVERAGE_SIGMAS, COVERAGE_SIGMAS, n_bins + 1)
    edges = np.exp(spec.log_mean + sigma * z)
    prob = np.diff(ndtr(z))
    # partial first moment of a log-normal over each bin
    first_moment = spec.eta0 * np.diff(ndtr(z - sigma))
    with np.errstate(invalid="ignore", divide="ignore"):
        repr_ = np.where(prob > 0, first_moment / prob, np.sqrt(edges[:-1] * edges[1:]))
    # guard the far tails where both CDF differences underflow
    repr_ = np.clip(repr_, edges[:-1] * (1 + 1e-12), edges[1:] * (1 - 1e-12))
    return TransmittanceDistribution(
        eta_low=edges[:-1].copy(),
        eta_high=edges[1:].copy(),
        eta_repr=repr_,
        probability=prob,
        survival=float(np.sum(prob)),
        spec=spec,
    )


def truncate_above(dist: TransmittanceDistribution, eta_th: float):
    """Keep the bins whose representative transmittance is at least ``eta_th``.

    Returns the retained distribution and the retained fraction of the
    original mass. The retained bins are not renormalized.
    """
    if eta_th < 0:
        raise ChannelError(f"cutoff must be >= 0, got {eta_th}")
    if dist.is_empty or eta_th > 1.0:
        # a cutoff above the physical range rejects everything, including the
        # unphysical tail the log-normal places above 1
        return empty_distribution(), 0.0
    keep = dist.eta_repr >= eta_th
    if not np.any(keep):
        return empty_distribution(), 0.0
    p = dist.probability[keep]
    out = TransmittanceDistribution(
        dist.eta_low[keep], dist.eta_high[keep], dist.eta_repr[keep], p,
        float(np.sum(p)), spec=dist.spec,
    )
    return out, out.survival / dist.survival


def cutoff_grid(dist: TransmittanceDistribution) -> np.ndarray:
    """Cutoffs at the bin edges: 0 followed by the lower edge of every later bin.

    Cutoff ``k`` retains exactly bins ``k..n-1``.
    """
    if dist.is_empty:
        return np.zeros(1)
    return np.concatenate([[0.0], dist.eta_low[1:]])
