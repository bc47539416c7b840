"""Protocol and device parameter sets, plus the reference experiment fixtures."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class ParameterError(ValueError):
    """Raised when a parameter set violates its physical constraints."""


def db_to_transmittance(loss_db: float) -> float:
    """Convert a channel loss in dB to a linear transmittance."""
    return 10.0 ** (-float(loss_db) / 10.0)


def transmittance_to_db(eta: float) -> float:
    return -10.0 * np.log10(eta)


@dataclass(frozen=True)
class ProtocolParams:
    """One party's intensities and preparation probabilities.

    ``omega`` is the weakest decoy shared by both parties. Its preparation
    probability is derived as ``1 - p_s - p_mu - p_nu`` and never stored.
    """

    s: float
    mu: float
    nu: float
    p_s: float
    p_mu: float
    p_nu: float
    omega: float = 0.0

    def __post_init__(self):
        if not self.s > 0:
            raise ParameterError(f"signal intensity must be positive, got s={self.s}")
        if not (self.mu > self.nu > self.omega >= 0):
            raise ParameterError(
                f"decoy ordering mu > nu > omega >= 0 violated: "
                f"mu={self.mu}, nu={self.nu}, omega={self.omega}"
            )
        for name in ("p_s", "p_mu", "p_nu"):
            p = getattr(self, name)
            if not 0 < p < 1:
                raise ParameterError(f"{name} must lie in (0, 1), got {p}")
        if self.p_s + self.p_mu + self.p_nu > 1 + 1e-12:
            raise ParameterError(
                f"probabilities sum to {self.p_s + self.p_mu + self.p_nu:.6g} > 1"
            )

    @property
    def p_omega(self) -> float:
        return max(0.0, 1.0 - self.p_s - self.p_mu - self.p_nu)

    def decoys(self) -> tuple[tuple[float, float], ...]:
        """(intensity, probability) for mu, nu, omega in that order."""
        return ((self.mu, self.p_mu), (self.nu, self.p_nu), (self.omega, self.p_omega))

    def as_vector(self) -> np.ndarray:
        return np.array([self.s, self.mu, self.nu, self.p_s, self.p_mu, self.p_nu])

    @classmethod
    def from_vector(cls, x, omega: float = 0.0) -> "ProtocolParams":
        s, mu, nu, p_s, p_mu, p_nu = (float(v) for v in x)
        return cls(s=s, mu=mu, nu=nu, p_s=p_s, p_mu=p_mu, p_nu=p_nu, omega=omega)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DeviceParams:
    """Detector, misalignment and finite-size calibration constants.

    Attributes
    ----------
    y0 : float
        Dark count probability per detector per gate.
    eta_d : float
        Detector efficiency.
    e_dz, e_dx : float
        Polarization misalignment in the Z and X bases.
    n_pulses : float
        Total number of transmitted pulse pairs N.
    f : float
        Error-correction inefficiency.
    gamma : float
        Number of standard deviations used for the statistical bounds.
    """

    y0: float = 3.65e-7
    eta_d: float = 0.84
    e_dz: float = 0.004
    e_dx: float = 0.02
    n_pulses: float = 1e12
    f: float = 1.16
    gamma: float = 5.3
    # recorded for provenance only; not part of the detection model
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not 0 <= self.y0 < 1e-2:
            raise ParameterError(f"dark count probability y0={self.y0} out of range")
        if not 0 < self.eta_d <= 1:
            raise ParameterError(f"detector efficiency eta_d={self.eta_d} out of (0, 1]")
        for name in ("e_dz", "e_dx"):
            e = getattr(self, name)
            if not 0 <= e < 0.5:
                raise ParameterError(f"{name}={e} must lie in [0, 0.5)")
        if not self.n_pulses >= 1:
            raise ParameterError(f"n_pulses={self.n_pulses} must be >= 1")
        if not self.f >= 1:
            raise ParameterError(f"error-correction factor f={self.f} must be >= 1")
        if not self.gamma >= 0:
            raise ParameterError(f"gamma={self.gamma} must be >= 0")

    def replace(self, **changes) -> "DeviceParams":
        d = {k: v for k, v in asdict(self).items()}
        d.update(changes)
        return DeviceParams(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("metadata")
        return d


DARK_COUNTS_PER_DETECTOR = {"H": 4.1e-7, "V": 3.7e-7, "D": 3.2e-7, "A": 3.6e-7}

TABLE2_DEVICE = DeviceParams(
    y0=float(np.mean(list(DARK_COUNTS_PER_DETECTOR.values()))),
    eta_d=0.84,
    e_dz=0.004,
    e_dx=0.02,
    n_pulses=1e12,
    f=1.16,
    gamma=5.3,
    metadata={
        "dead_time_s": 80e-9,
        "time_jitter_s": 50e-12,
        "charlie_optical_efficiency": 0.42,
        "dark_counts_per_detector": DARK_COUNTS_PER_DETECTOR,
    },
)

# Optimized intensity rows of the two asymmetric experiments:
# (alice_loss_db, bob_loss_db) -> (alice, bob)
TABLE1 = {
    (25.0, 5.0): (
        ProtocolParams(s=0.593, mu=0.427, nu=0.101, p_s=0.588, p_mu=0.045, p_nu=0.238),
        ProtocolParams(s=0.181, mu=0.076, nu=0.018, p_s=0.601, p_mu=0.041, p_nu=0.240),
    ),
    (25.0, 8.0): (
        ProtocolParams(s=0.556, mu=0.463, nu=0.114, p_s=0.597, p_mu=0.039, p_nu=0.245),
        ProtocolParams(s=0.192, mu=0.088, nu=0.021, p_s=0.582, p_mu=0.035, p_nu=0.249),
    ),
}

TABLE1_30DB = TABLE1[(25.0, 5.0)]
TABLE1_33DB = TABLE1[(25.0, 8.0)]

# Rytov log-irradiance variance of the moderate-turbulence runs
DEFAULT_SIGMA2 = 1.0
