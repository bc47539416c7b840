"""Finite-size decoy analysis and the secure key rate.

Gains are bounded with a Gaussian standard-error model (``gamma`` standard
deviations). The single-photon yield lower bound and phase-error upper
bound come from the X-basis decoy table; the key rate combines them with
the Z-basis gain and QBER.

Two forms of the decoy bounds are available:

``"standard"`` (default)
    Subtraction form with per-party coefficients. For every intensity pair
    with ``mu > nu > omega`` it is a valid bound on any Poisson mixture of
    non-negative yields; with symmetric intensities it reduces to the usual
    ``(mu+omega)/(nu-omega)^2`` / ``(nu+omega)/(mu-omega)^2`` combination.
``"printed"``
    All-plus ``M1`` combination with scalar prefactors taken from Alice's
    intensities (``convention="alice"``) or the per-level geometric means
    (``convention="geometric"``). Kept for comparison; it overestimates the
    yield and fails :func:`check_bound_validity`.

All array-valued functions broadcast over trailing axes of the count table
so a whole threshold grid is evaluated in one pass.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc

from .detection import CountsRecord, counts_table
from .params import DeviceParams, ProtocolParams

MU, NU, OM = 0, 1, 2
FORMS = ("standard", "printed")
CONVENTIONS = ("alice", "geometric")
# e11 above this makes the privacy term vanish; h2 is not monotone beyond it
ERROR_RATE_CAP = 0.5


class NoStatisticsError(ValueError):
    """A gain denominator vanished (no pulses prepared for the pair)."""


class NoKeyError(ValueError):
    """The decoy analysis certifies no single-photon yield."""


def binary_entropy(x):
    """Binary entropy in bits, with h2(0) = h2(1) = 0."""
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError("binary entropy argument must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -arr * np.log2(arr) - (1 - arr) * np.log2(1 - arr)
    h = np.where((arr == 0) | (arr == 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


def gamma_to_epsilon(gamma: float) -> float:
    """Failure probability of a ``gamma``-sigma Gaussian bound: erfc(gamma/sqrt 2)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return float(erfc(gamma / math.sqrt(2.0)))


def epsilon_to_gamma(epsilon: float) -> float:
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if epsilon == 1:
        return 0.0
    return float(brentq(lambda g: gamma_to_epsilon(g) - epsilon, 0.0, 40.0, xtol=1e-14, rtol=1e-15))


@dataclass(frozen=True)
class BoundedGains:
    """X-basis gains ``q`` and error gains ``t`` with their gamma-bounds.

    Arrays are indexed ``[alice_level, bob_level, ...]`` with levels
    (mu, nu, omega).
    """

    q: np.ndarray
    t: np.ndarray
    q_up: np.ndarray
    q_low: np.ndarray
    t_up: np.ndarray
    t_low: np.ndarray

    @property
    def e(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.q > 0, self.t / np.where(self.q > 0, self.q, 1), 0.0)


def _pair_probabilities(alice: ProtocolParams, bob: ProtocolParams) -> np.ndarray:
    pa = np.array([p for _, p in alice.decoys()])
    pb = np.array([p for _, p in bob.decoys()])
    return np.outer(pa, pb)


def _bound(x, denom, gamma):
    with np.errstate(divide="ignore", invalid="ignore"):
        half = gamma * np.sqrt(np.where(denom > 0, x / np.where(denom > 0, denom, 1), 0.0))
    return x + half, np.maximum(x - half, 0.0)


def _gains(counts: CountsRecord, alice, bob, gamma) -> BoundedGains:
    pp = _pair_probabilities(alice, bob)
    n_eff = np.asarray(counts.n_effective, dtype=float)
    n_x = np.asarray(counts.n_x)
    denom = pp.reshape(pp.shape + (1,) * (n_x.ndim - 2)) * n_eff
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(denom > 0, denom, 1.0)
        q = np.where(denom > 0, np.asarray(counts.n_x) / safe, 0.0)
        t = np.where(denom > 0, np.asarray(counts.m_x) / safe, 0.0)
    q_up, q_low = _bound(q, denom, gamma)
    t_up, t_low = _bound(t, denom, gamma)
    return BoundedGains(q, t, q_up, q_low, t_up, t_low)


def gains_and_errors(counts: CountsRecord, alice: ProtocolParams, bob: ProtocolParams,
                     dev: DeviceParams) -> BoundedGains:
    """Per-pair gains ``n / (N_eff p_i p_j)`` with their +/- gamma bounds."""
    pp = _pair_probabilities(alice, bob)
    if np.any(pp <= 0) or np.any(np.asarray(counts.n_effective) <= 0):
        raise NoStatisticsError("no statistics for pair: zero preparation probability or N_eff")
    return _gains(counts, alice, bob, dev.gamma)


def _levels(p: ProtocolParams):
    return np.array([p.mu, p.nu, p.omega])


def _exp_weights(alice, bob):
    """exp(alice_level + bob_level) for every pair."""
    return np.exp(_levels(alice)[:, None] + _levels(bob)[None, :])


def _expand(w, arr):
    return w.reshape(w.shape + (1,) * (arr.ndim - 2))


def _scalar_levels(alice, bob, convention):
    if convention == "alice":
        return alice.mu, alice.nu, alice.omega
    if convention == "geometric":
        return (math.sqrt(alice.mu * bob.mu), math.sqrt(alice.nu * bob.nu),
                math.sqrt(alice.omega * bob.omega))
    raise ValueError(f"unknown prefactor convention {convention!r}")


def _ratio(hi, lo, om, n):
    return (hi**n - om**n) / (lo**n - om**n)


def standard_coefficients(alice: ProtocolParams, bob: ProtocolParams):
    """Weights (k_nu, k_mu, scale) with Y11 >= (k_nu M_nu - k_mu M_mu) / scale.

    ``M_x`` is the four-term combination with exponential weights. ``k_nu``
    is the largest weight for which every multi-photon term of
    ``k_nu M_nu - M_mu`` is non-positive.
    """
    g_a1 = _ratio(alice.mu, alice.nu, alice.omega, 1)
    g_a2 = _ratio(alice.mu, alice.nu, alice.omega, 2)
    g_b1 = _ratio(bob.mu, bob.nu, bob.omega, 1)
    g_b2 = _ratio(bob.mu, bob.nu, bob.omega, 2)
    k_nu = min(g_a2 * g_b1, g_a1 * g_b2)
    scale = (alice.nu - alice.omega) * (bob.nu - bob.omega) * (k_nu - g_a1 * g_b1)
    return k_nu, 1.0, scale


def _y11_arrays(g: BoundedGains, alice, bob, form="standard", convention="alice"):
    w = _expand(_exp_weights(alice, bob), g.q)
    if form == "standard":
        m_nu = (w[NU, NU] * g.q_low[NU, NU] + w[OM, OM] * g.q_low[OM, OM]
                - w[NU, OM] * g.q_up[NU, OM] - w[OM, NU] * g.q_up[OM, NU])
        m_mu = (w[MU, MU] * g.q_up[MU, MU] + w[OM, OM] * g.q_up[OM, OM]
                - w[MU, OM] * g.q_low[MU, OM] - w[OM, MU] * g.q_low[OM, MU])
        k_nu, k_mu, scale = standard_coefficients(alice, bob)
        y = (k_nu * m_nu - k_mu * m_mu) / scale
    elif form == "printed":
        mu, nu, om = _scalar_levels(alice, bob, convention)
        if mu == nu:
            raise ZeroDivisionError("degenerate decoy levels")
        m1 = (w[NU, NU] * g.q_low[NU, NU] + w[OM, OM] * g.q_low[OM, OM]
              + w[NU, OM] * g.q_up[NU, OM] + w[OM, NU] * g.q_up[OM, NU])
        m2 = (w[MU, MU] * g.q_up[MU, MU] + w[OM, OM] * g.q_low[OM, OM]
              - w[MU, OM] * g.q_low[MU, OM] - w[OM, MU] * g.q_low[OM, MU])
        y = ((mu + om) / (nu - om) ** 2 * m1 + (nu + om) / (mu - om) ** 2 * m2) / (mu - nu)
    else:
        raise ValueError(f"unknown bound form {form!r}")
    return np.clip(y, 0.0, 1.0)


def _e11_arrays(g: BoundedGains, y11, alice, bob, form="standard", convention="alice"):
    w = _expand(_exp_weights(alice, bob), g.t)
    num = (w[NU, NU] * g.t_up[NU, NU] + w[OM, OM] * g.t_up[OM, OM]
           - w[NU, OM] * g.t_low[NU, OM] - w[OM, NU] * g.t_low[OM, NU])
    if form == "standard":
        scale = (alice.nu - alice.omega) * (bob.nu - bob.omega)
    elif form == "printed":
        mu, nu, _ = _scalar_levels(alice, bob, convention)
        scale = mu - nu
    else:
        raise ValueError(f"unknown bound form {form!r}")
    y11 = np.asarray(y11, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(y11 > 0, num / (scale * np.where(y11 > 0, y11, 1.0)), 1.0)
    return np.clip(e, 0.0, 1.0)


def _scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def y11_lower(g: BoundedGains, alice: ProtocolParams, bob: ProtocolParams,
              form: str = "standard", convention: str = "alice"):
    """Lower bound on the yield of single-photon pairs, clamped to [0, 1]."""
    if alice.mu == alice.nu or bob.mu == bob.nu:
        raise ZeroDivisionError("degenerate decoy levels")
    return _scalar(_y11_arrays(g, alice, bob, form, convention))


def e11_upper(g: BoundedGains, y11_low, alice: ProtocolParams, bob: ProtocolParams,
              form: str = "standard", convention: str = "alice"):
    """Upper bound on the single-photon phase error rate, clamped to [0, 1]."""
    if np.any(np.asarray(y11_low) <= 0):
        raise NoKeyError("yield bound vanishes; no key")
    return _scalar(_e11_arrays(g, y11_low, alice, bob, form, convention))


@dataclass(frozen=True)
class KeyRateResult:
    """Secure key rate per retained pulse pair with every term that built it.

    ``rate`` is clipped at zero; ``raw_rate`` keeps the signed value.
    ``secret_bits = rate * n_effective``.
    """

    rate: float
    raw_rate: float
    y11_low: float
    e11_up: float
    q_zz: float
    e_zz: float
    secret_bits: float
    n_effective: float
    survival_fraction: float = 1.0
    form: str = "standard"
    reason: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}

    def to_jsonl(self) -> str:
        return json.dumps(self.to_dict())

    CSV_FIELDS = ("rate", "raw_rate", "y11_low", "e11_up", "q_zz", "e_zz", "secret_bits",
                  "n_effective", "survival_fraction", "form", "reason")

    def csv_row(self) -> list:
        return [getattr(self, k) for k in self.CSV_FIELDS]


def single_photon_poisson(s):
    return s * np.exp(-s)


def key_rate_arrays(counts: CountsRecord, alice: ProtocolParams, bob: ProtocolParams,
                    dev: DeviceParams, form: str = "standard", convention: str = "alice",
                    gamma: float | None = None) -> dict:
    """Vectorized key rate over any trailing grid axes of ``counts``.

    Entries with no statistics or no Z detections get rate 0.
    """
    gamma = dev.gamma if gamma is None else gamma
    g = _gains(counts, alice, bob, gamma)
    y11 = _y11_arrays(g, alice, bob, form, convention)
    e11 = _e11_arrays(g, y11, alice, bob, form, convention)
    n_eff = np.asarray(counts.n_effective, dtype=float)
    n_zz = np.asarray(counts.n_zz, dtype=float)
    m_zz = np.asarray(counts.m_zz, dtype=float)
    ok = (n_eff > 0) & (n_zz > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_zz = np.where(ok, n_zz / (np.where(ok, n_eff, 1.0) * alice.p_s * bob.p_s), 0.0)
        e_zz = np.where(ok, m_zz / np.where(ok, n_zz, 1.0), 0.0)
    e_zz = np.clip(e_zz, 0.0, 1.0)
    privacy = (y11 * single_photon_poisson(alice.s) * single_photon_poisson(bob.s)
               * (1.0 - binary_entropy(np.minimum(e11, ERROR_RATE_CAP))))
    leak = dev.f * q_zz * binary_entropy(np.minimum(e_zz, ERROR_RATE_CAP))
    raw = np.where(ok, alice.p_s * bob.p_s * (privacy - leak), 0.0)
    rate = np.maximum(raw, 0.0)
    return dict(rate=rate, raw_rate=raw, y11_low=y11, e11_up=e11, q_zz=q_zz, e_zz=e_zz,
                secret_bits=rate * n_eff, n_effective=n_eff, ok=ok)


def key_rate(counts: CountsRecord, alice: ProtocolParams, bob: ProtocolParams,
             dev: DeviceParams, form: str = "standard", convention: str = "alice",
             survival_fraction: float = 1.0) -> KeyRateResult:
    """Finite-key secure key rate per retained pulse pair."""
    if float(counts.n_effective) <= 0:
        return KeyRateResult(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, survival_fraction,
                             form, "no retained pulses")
    if float(counts.n_zz) <= 0:
        return KeyRateResult(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, float(counts.n_effective),
                             survival_fraction, form, "no Z detections")
    gains_and_errors(counts, alice, bob, dev)  # raises on missing statistics
    r = key_rate_arrays(counts, alice, bob, dev, form, convention)
    vals = {k: float(v) for k, v in r.items() if k != "ok"}
    reason = ""
    if vals["y11_low"] <= 0:
        reason = "yield bound vanishes; no key"
    elif vals["raw_rate"] <= 0:
        reason = "negative key rate"
    return KeyRateResult(survival_fraction=survival_fraction, form=form, reason=reason, **vals)


# --- bound validity ---------------------------------------------------------

def single_photon_truth(eta_a: float, eta_b: float, dev: DeviceParams,
                        n_points: int = 32, radius: float = 0.5):
    """Exact single-photon-pair yield and error rate of the detection model.

    The X-basis gain at intensities (x, y) times ``exp(x + y)`` is the
    generating function ``sum Y_nm x^n y^m / (n! m!)`` of the photon-number
    yields. The (1, 1) coefficient is extracted numerically with a
    two-dimensional Cauchy integral (FFT on a circle), independently of any
    closed form for it.
    """
    theta = 2.0 * np.pi * np.arange(n_points) / n_points
    z = radius * np.exp(1j * theta)
    x, y = z[:, None], z[None, :]
    u = dev.eta_d * eta_a * x
    v = dev.eta_d * eta_b * y
    decay = np.exp(-u - v)
    gain = (2.0 * dev.y0 * (u + v) + 0.25 * (u + v) ** 2) * decay
    err = (dev.y0 * (u + v) + (u * u + v * v + 8.0 * dev.e_dx * u * v) / 8.0) * decay
    shift = np.exp(x + y)
    c_gain = np.fft.fft2(gain * shift) / n_points**2
    c_err = np.fft.fft2(err * shift) / n_points**2
    y11 = float(np.real(c_gain[1, 1])) / radius**2
    t11 = float(np.real(c_err[1, 1])) / radius**2
    return y11, (t11 / y11 if y11 > 0 else 0.0)


@dataclass(frozen=True)
class BoundViolation:
    eta_a: float
    eta_b: float
    quantity: str
    bound: float
    truth: float


def default_validity_grid():
    """20 (eta_a, eta_b) points spanning 0-40 dB on each channel."""
    a_db = np.linspace(0.0, 40.0, 5)
    b_db = np.array([0.0, 13.0, 26.0, 40.0])
    return [(10 ** (-a / 10), 10 ** (-b / 10)) for a in a_db for b in b_db]


def check_bound_validity(alice: ProtocolParams, bob: ProtocolParams, dev: DeviceParams,
                         form: str = "standard", convention: str = "alice",
                         grid=None, rtol: float = 1e-9) -> list[BoundViolation]:
    """Asymptotic (gamma = 0) check of the decoy bounds against the exact model.

    Returns every grid point where the yield bound exceeds the true yield or
    the error bound falls below the true error rate.
    """
    grid = default_validity_grid() if grid is None else grid
    violations = []
    for eta_a, eta_b in grid:
        counts = counts_table(alice, bob, eta_a, eta_b, dev, dev.n_pulses)
        g = _gains(counts, alice, bob, 0.0)
        y_low = float(_y11_arrays(g, alice, bob, form, convention))
        y_true, e_true = single_photon_truth(eta_a, eta_b, dev)
        if y_low > y_true * (1 + rtol):
            violations.append(BoundViolation(eta_a, eta_b, "y11", y_low, y_true))
        if y_low > 0:
            e_up = float(_e11_arrays(g, y_low, alice, bob, form, convention))
            if e_up < e_true * (1 - rtol):
                violations.append(BoundViolation(eta_a, eta_b, "e11", e_up, e_true))
    return violations
