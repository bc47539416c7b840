"""Expected detection and error counts of asymmetric MDI-QKD.

All counts are expectation values (real numbers) for ``n_eff`` pulse pairs
sent through channels with instantaneous transmittances ``eta_a`` and
``eta_b``. Transmittance arguments may be numpy arrays; every function
broadcasts over them.

Dark-dark coincidences (order Y0^2) are not part of the model.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .channel import TransmittanceDistribution
from .params import DeviceParams, ProtocolParams

logger = logging.getLogger(__name__)

INTENSITY_LABELS = ("mu", "nu", "omega")


class ModelError(RuntimeError):
    """Raised when a closed form produces a physically impossible value."""


@dataclass(frozen=True)
class CountsRecord:
    """Z-basis signal counts plus the 3x3 X-basis count table.

    ``n_x[i, j]`` and ``m_x[i, j]`` hold total and error counts for Alice
    intensity ``INTENSITY_LABELS[i]`` and Bob intensity ``INTENSITY_LABELS[j]``.
    Extra trailing axes are allowed (a grid of records evaluated at once).
    """

    n_zz: np.ndarray | float
    m_zz: np.ndarray | float
    n_x: np.ndarray
    m_x: np.ndarray
    n_effective: np.ndarray | float

    def scaled(self, factor: float) -> "CountsRecord":
        return CountsRecord(
            self.n_zz * factor, self.m_zz * factor, self.n_x * factor,
            self.m_x * factor, self.n_effective * factor,
        )

    def __add__(self, other: "CountsRecord") -> "CountsRecord":
        return CountsRecord(
            self.n_zz + other.n_zz, self.m_zz + other.m_zz, self.n_x + other.n_x,
            self.m_x + other.m_x, self.n_effective + other.n_effective,
        )

    def at(self, index) -> "CountsRecord":
        """Select one record out of a grid of records."""
        idx = index if isinstance(index, tuple) else (index,)
        return CountsRecord(
            float(np.asarray(self.n_zz)[idx]),
            float(np.asarray(self.m_zz)[idx]),
            np.asarray(self.n_x)[(slice(None), slice(None)) + idx],
            np.asarray(self.m_x)[(slice(None), slice(None)) + idx],
            float(np.asarray(self.n_effective)[idx]),
        )

    def rows(self):
        """(label, n, m) rows, Z basis first, then the X pairs row-major."""
        yield "zz", float(self.n_zz), float(self.m_zz)
        for i, a in enumerate(INTENSITY_LABELS):
            for j, b in enumerate(INTENSITY_LABELS):
                yield f"x_{a}_{b}", float(self.n_x[i, j]), float(self.m_x[i, j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "n", "m"])
            w.writerow(["n_effective", repr(float(self.n_effective)), ""])
            for label, n, m in self.rows():
                w.writerow([label, repr(n), repr(m)])

    @classmethod
    def from_csv(cls, path) -> "CountsRecord":
        n_x = np.zeros((3, 3))
        m_x = np.zeros((3, 3))
        n_zz = m_zz = n_eff = None
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                label = row["label"]
                if label == "n_effective":
                    n_eff = float(row["n"])
                elif label == "zz":
                    n_zz, m_zz = float(row["n"]), float(row["m"])
                elif label.startswith("x_"):
                    a, b = label[2:].split("_")
                    i, j = INTENSITY_LABELS.index(a), INTENSITY_LABELS.index(b)
                    n_x[i, j], m_x[i, j] = float(row["n"]), float(row["m"])
                else:
                    raise ValueError(f"unknown counts label {label!r}")
        if n_zz is None or n_eff is None:
            raise ValueError(f"{path}: missing 'zz' or 'n_effective' row")
        return cls(n_zz, m_zz, n_x, m_x, n_eff)


def zero_record() -> CountsRecord:
    return CountsRecord(0.0, 0.0, np.zeros((3, 3)), np.zeros((3, 3)), 0.0)


def _check_nonnegative(*values):
    for v in values:
        if np.any(np.asarray(v) < -1e-300):
            raise ModelError("negative intermediate count; formula misuse")


def z_basis_counts(eta_a, eta_b, alice: ProtocolParams, bob: ProtocolParams,
                   dev: DeviceParams, n_eff):
    """Total and error counts of the Z-basis signal states.

    Opposite-polarization preparations give the correct coincidences,
    same-polarization preparations give errors through misalignment and dark
    counts. Returns ``(n_zz, m_zz)`` with ``m_zz`` the same-polarization part.
    """
    a = np.asarray(eta_a, dtype=float) * dev.eta_d * alice.s
    b = np.asarray(eta_b, dtype=float) * dev.eta_d * bob.s
    pref = 0.5 * n_eff * alice.p_s * bob.p_s
    n_z1 = pref * -np.expm1(-a) * -np.expm1(-b) * (1.0 - 2.0 * dev.e_dz)
    n_z2 = pref * -np.expm1(-(1.0 - dev.e_dz) * (a + b)) * (
        dev.e_dz * a + dev.y0 + dev.e_dz * b + dev.y0
    )
    _check_nonnegative(n_z1, n_z2)
    return n_z1 + n_z2, n_z2


def _x_fluxes(i_a, j_b, eta_a, eta_b, dev):
    u = dev.eta_d * np.asarray(eta_a, dtype=float) * i_a
    v = dev.eta_d * np.asarray(eta_b, dtype=float) * j_b
    return u, v


def x_basis_counts(i_a: float, j_b: float, p_i: float, p_j: float, eta_a, eta_b,
                   dev: DeviceParams, n_eff):
    """Total and error counts for one X-basis intensity pair.

    ``i_a`` is Alice's intensity, ``j_b`` Bob's, prepared with probabilities
    ``p_i`` and ``p_j``.
    """
    if i_a < 0 or j_b < 0:
        raise ValueError("intensities must be non-negative")
    u, v = _x_fluxes(i_a, j_b, eta_a, eta_b, dev)
    decay = np.exp(-u - v)
    pref = n_eff * p_i * p_j
    n = pref * (2.0 * dev.y0 * (u + v) + 0.25 * (u + v) ** 2) * decay
    m = pref * (dev.y0 * (u + v) + (u * u + v * v + 8.0 * dev.e_dx * u * v) / 8.0) * decay
    return n, m


@dataclass(frozen=True)
class CaseDecomposition:
    """Per-case Bell-state probabilities for one X-basis intensity pair.

    ``psi_minus[k]``/``psi_plus[k]`` for k = 0, 1, 2 are the {1,0}/{0,1},
    {1,1} and {2,0}/{0,2} cases. ``n_c1``/``n_w1`` are the correct and wrong
    event counts of the anti-correlated preparations.
    """

    psi_minus: tuple
    psi_plus: tuple
    n_c1: float
    n_w1: float

    @property
    def total(self):
        return 2.0 * (self.n_c1 + self.n_w1)

    @property
    def errors(self):
        return 2.0 * self.n_w1


def x_basis_case_decomposition(i_a: float, j_b: float, eta_a, eta_b, dev: DeviceParams,
                               p_i: float = 1.0, p_j: float = 1.0, n_eff: float = 1.0):
    """Photon-number case breakdown behind the combined X-basis forms.

    Exponents are read as ``exp(-eta_A eta_d i_a - eta_B eta_d j_b)``
    throughout, including the {1,1} wrong-state term.
    """
    u, v = _x_fluxes(i_a, j_b, eta_a, eta_b, dev)
    decay = np.exp(-u - v)
    dark = dev.y0 * (u + v) * decay
    one_one = (1.0 - 2.0 * dev.e_dx) * u * v * decay
    two_zero = (u * u + v * v) * decay
    minus = (dark, 0.5 * one_one, 0.25 * two_zero)
    plus = (dark, 0.25 * one_one, 0.25 * dev.e_dx * two_zero)
    pref = 0.5 * n_eff * p_i * p_j
    n_c1 = pref * sum(minus)
    n_w1 = pref * sum(plus)
    return CaseDecomposition(minus, plus, n_c1, n_w1)


def counts_table(alice: ProtocolParams, bob: ProtocolParams, eta_a, eta_b,
                 dev: DeviceParams, n_eff) -> CountsRecord:
    """Full counts record at fixed transmittances (broadcasting over them)."""
    n_zz, m_zz = z_basis_counts(eta_a, eta_b, alice, bob, dev, n_eff)
    shape = np.broadcast(np.asarray(eta_a), np.asarray(eta_b)).shape
    n_x = np.empty((3, 3) + shape)
    m_x = np.empty((3, 3) + shape)
    for i, (x, p_x) in enumerate(alice.decoys()):
        for j, (y, p_y) in enumerate(bob.decoys()):
            n_x[i, j], m_x[i, j] = x_basis_counts(x, y, p_x, p_y, eta_a, eta_b, dev, n_eff)
    if not shape:
        n_zz, m_zz = float(n_zz), float(m_zz)
    return CountsRecord(n_zz, m_zz, n_x, m_x, n_eff)


def pooled_counts(alice: ProtocolParams, bob: ProtocolParams,
                  dist_a: TransmittanceDistribution, dist_b: TransmittanceDistribution,
                  dev: DeviceParams) -> CountsRecord:
    """Counts averaged over both channels' binned transmittance distributions.

    Every bin pair contributes ``counts_table(N)`` weighted by its joint mass,
    and ``n_effective = N * survival_a * survival_b`` is the number of pulse
    pairs that the retained bins represent.
    """
    if dist_a.is_empty or dist_b.is_empty:
        return zero_record()
    grid = counts_table(alice, bob, dist_a.eta_repr[:, None], dist_b.eta_repr[None, :],
                        dev, dev.n_pulses)
    w = dist_a.probability[:, None] * dist_b.probability[None, :]
    return CountsRecord(
        float(np.sum(grid.n_zz * w)),
        float(np.sum(grid.m_zz * w)),
        np.sum(grid.n_x * w, axis=(-2, -1)),
        np.sum(grid.m_x * w, axis=(-2, -1)),
        dev.n_pulses * dist_a.survival * dist_b.survival,
    )


def bin_pair_counts(alice, bob, dist_a: TransmittanceDistribution,
                    dist_b: TransmittanceDistribution, dev: DeviceParams) -> CountsRecord:
    """Per-bin-pair mass-weighted counts (trailing axes: bin_a, bin_b).

    Summing the grid over both bin axes gives :func:`pooled_counts`.
    """
    grid = counts_table(alice, bob, dist_a.eta_repr[:, None], dist_b.eta_repr[None, :],
                        dev, dev.n_pulses)
    w = dist_a.probability[:, None] * dist_b.probability[None, :]
    return CountsRecord(grid.n_zz * w, grid.m_zz * w, grid.n_x * w, grid.m_x * w,
                        dev.n_pulses * w)


def sample_counts(record: CountsRecord, seed: int) -> CountsRecord:
    """Poisson realization of an expected-count record.

    Totals are Poisson draws; errors are binomial thinnings of the drawn
    totals, so ``m <= n`` holds for every entry.
    """
    rng = np.random.default_rng(seed)

    def draw(n, m):
        n = np.asarray(n, dtype=float)
        m = np.asarray(m, dtype=float)
        n_s = np.asarray(rng.poisson(n), dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(n > 0, m / n, 0.0)
        m_s = np.asarray(rng.binomial(n_s.astype(np.int64), np.clip(frac, 0, 1)), dtype=float)
        return n_s, m_s

    n_zz, m_zz = draw(record.n_zz, record.m_zz)
    n_x, m_x = draw(record.n_x, record.m_x)
    return replace(record, n_zz=float(n_zz) if n_zz.ndim == 0 else n_zz,
                   m_zz=float(m_zz) if m_zz.ndim == 0 else m_zz, n_x=n_x, m_x=m_x)
