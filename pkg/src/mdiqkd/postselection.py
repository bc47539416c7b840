"""Transmittance-threshold post-selection (ARTS scans and prefixed P-RTS cutoffs).

A cutoff pair ``(eta_th_a, eta_th_b)`` discards every pulse pair sent while
either channel was below its cutoff. The kept pulses form a smaller sample
``N_eff = N * survival_a * survival_b``. The finite-key analysis runs on that
sample, and the result is normalized back to the total number of
transmitted pulses. Rejection therefore pays for itself only when the
error reduction outweighs the statistics lost.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .channel import (
    ChannelSpec, TransmittanceDistribution, cutoff_grid, discretize, truncate_above,
)
from .detection import CountsRecord, bin_pair_counts, pooled_counts
from .finite_key import KeyRateResult, key_rate, key_rate_arrays
from .params import DeviceParams, ProtocolParams

logger = logging.getLogger(__name__)

LOG10_ZERO_SENTINEL = -99.0
REFINE_FACTOR = 4


class ChannelRangeError(RuntimeError):
    """The model predicts no key for any cutoff pair."""


@dataclass(frozen=True)
class ThresholdPair:
    eta_th_a: float
    eta_th_b: float

    def __post_init__(self):
        for v in (self.eta_th_a, self.eta_th_b):
            if v < 0:
                raise ValueError(f"cutoffs must be non-negative, got {v}")

    def as_tuple(self):
        return (self.eta_th_a, self.eta_th_b)


@dataclass
class RateSurface:
    """Key rate per transmitted pulse pair over a grid of cutoff pairs.

    ``rate[i, j]`` belongs to ``(cutoffs_a[i], cutoffs_b[j])``.
    """

    cutoffs_a: np.ndarray
    cutoffs_b: np.ndarray
    rate: np.ndarray
    survival_a: np.ndarray
    survival_b: np.ndarray
    details: dict = field(default_factory=dict, repr=False)

    @property
    def argmax_index(self) -> tuple[int, int]:
        # first maximum in row-major order, so ties favour the smallest cutoffs
        i, j = np.unravel_index(int(np.argmax(self.rate)), self.rate.shape)
        return int(i), int(j)

    @property
    def argmax(self) -> ThresholdPair:
        i, j = self.argmax_index
        return ThresholdPair(float(self.cutoffs_a[i]), float(self.cutoffs_b[j]))

    @property
    def max_rate(self) -> float:
        return float(np.max(self.rate))

    @property
    def no_rejection_rate(self) -> float:
        return float(self.rate[0, 0])

    def rows(self):
        """(eta_th_a, eta_th_b, rate, survival_a, survival_b) in row-major order."""
        for i, a in enumerate(self.cutoffs_a):
            for j, b in enumerate(self.cutoffs_b):
                yield (float(a), float(b), float(self.rate[i, j]),
                       float(self.survival_a[i]), float(self.survival_b[j]))

    def to_csv(self, path) -> None:
        """Write ``eta_th_a, eta_th_b, log10_rate, zero_rate`` rows.

        Zero rates are written as the sentinel ``-99`` and flagged 1.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eta_th_a", "eta_th_b", "log10_rate", "zero_rate"])
            for a, b, r, _, _ in self.rows():
                if r > 0:
                    w.writerow([repr(a), repr(b), repr(math.log10(r)), 0])
                else:
                    w.writerow([repr(a), repr(b), LOG10_ZERO_SENTINEL, 1])


def _suffix_sum(arr: np.ndarray) -> np.ndarray:
    """S[..., i, j] = sum of arr[..., i:, j:]."""
    flipped = arr[..., ::-1, ::-1]
    return np.cumsum(np.cumsum(flipped, axis=-2), axis=-1)[..., ::-1, ::-1]


def _retained_counts(per_bin: CountsRecord, idx_a, idx_b) -> CountsRecord:
    """Counts of every cutoff pair, from a per-bin-pair record with trailing (bin_a, bin_b)."""
    ix = np.ix_(idx_a, idx_b)

    def pick(arr):
        s = _suffix_sum(np.asarray(arr, dtype=float))
        return s[(Ellipsis,) + ix]

    return CountsRecord(pick(per_bin.n_zz), pick(per_bin.m_zz), pick(per_bin.n_x),
                        pick(per_bin.m_x), pick(per_bin.n_effective))


def _cutoff_indices(dist: TransmittanceDistribution, cutoffs) -> np.ndarray:
    """First bin kept by each cutoff (bins with eta_repr >= cutoff are kept).

    Cutoffs above 1 reject everything, as in :func:`truncate_above`.
    """
    cutoffs = np.asarray(cutoffs, dtype=float)
    idx = np.searchsorted(dist.eta_repr, cutoffs, side="left")
    return np.where(cutoffs > 1.0, len(dist), idx)


def scan_counts(per_bin: CountsRecord, cutoffs_a, cutoffs_b, idx_a, idx_b, n_total: float,
                alice: ProtocolParams, bob: ProtocolParams, dev: DeviceParams,
                form: str = "standard", convention: str = "alice") -> RateSurface:
    """Rate surface from per-bin-pair counts.

    ``per_bin.n_effective`` holds the number of pulse pairs falling in each
    bin pair; ``n_total`` is the number of transmitted pulse pairs the rate
    is normalized to. Cutoffs whose index equals the bin count reject
    everything and get rate 0.
    """
    na = per_bin.n_x.shape[-2]
    nb = per_bin.n_x.shape[-1]
    ia = np.minimum(np.asarray(idx_a), na)
    ib = np.minimum(np.asarray(idx_b), nb)
    pad = lambda arr: np.pad(np.asarray(arr, dtype=float),
                             [(0, 0)] * (np.ndim(arr) - 2) + [(0, 1), (0, 1)])
    padded = CountsRecord(pad(per_bin.n_zz), pad(per_bin.m_zz), pad(per_bin.n_x),
                          pad(per_bin.m_x), pad(per_bin.n_effective))
    kept = _retained_counts(padded, ia, ib)
    r = key_rate_arrays(kept, alice, bob, dev, form, convention)
    pulses = _suffix_sum(np.asarray(padded.n_effective))
    total = max(pulses[0, 0], 1e-300)
    return RateSurface(np.asarray(cutoffs_a, dtype=float), np.asarray(cutoffs_b, dtype=float),
                       r["secret_bits"] / n_total, pulses[ia, 0] / total, pulses[0, ib] / total,
                       details=r)


def arts_scan(alice: ProtocolParams, bob: ProtocolParams, dist_a: TransmittanceDistribution,
              dist_b: TransmittanceDistribution, dev: DeviceParams,
              cutoffs_a: Sequence[float] | None = None, cutoffs_b: Sequence[float] | None = None,
              form: str = "standard", convention: str = "alice") -> RateSurface:
    """Exhaustive cutoff scan over the model distributions.

    The default grid is each distribution's bin edges (see
    :func:`mdiqkd.channel.cutoff_grid`). Per-bin count tables are computed
    once; each grid point is then a suffix sum.
    """
    if dist_a.is_empty or dist_b.is_empty:
        raise ValueError("cannot scan an empty distribution")
    cutoffs_a = cutoff_grid(dist_a) if cutoffs_a is None else np.asarray(cutoffs_a, dtype=float)
    cutoffs_b = cutoff_grid(dist_b) if cutoffs_b is None else np.asarray(cutoffs_b, dtype=float)
    per_bin = bin_pair_counts(alice, bob, dist_a, dist_b, dev)
    return scan_counts(per_bin, cutoffs_a, cutoffs_b, _cutoff_indices(dist_a, cutoffs_a),
                       _cutoff_indices(dist_b, cutoffs_b), dev.n_pulses, alice, bob, dev,
                       form, convention)


@dataclass
class BinnedCounts:
    """Counts sorted by the probe-measured transmittance bin of each channel.

    ``counts`` has trailing axes (bin_a, bin_b); ``counts.n_effective`` holds
    the pulse pairs sent while the channels were in each bin pair.
    ``edges_a``/``edges_b`` are the lower bin edges and ``n_total`` is the
    number of transmitted pulse pairs.
    """

    counts: CountsRecord
    edges_a: np.ndarray
    edges_b: np.ndarray
    n_total: float

    def save(self, path) -> None:
        c = self.counts
        np.savez(path, n_zz=c.n_zz, m_zz=c.m_zz, n_x=c.n_x, m_x=c.m_x,
                 n_effective=c.n_effective, edges_a=self.edges_a, edges_b=self.edges_b,
                 n_total=self.n_total)

    @classmethod
    def load(cls, path) -> "BinnedCounts":
        with np.load(path) as z:
            missing = {"n_zz", "m_zz", "n_x", "m_x", "n_effective", "edges_a", "edges_b",
                       "n_total"} - set(z.files)
            if missing:
                raise ValueError(f"{path} lacks arrays {sorted(missing)}")
            rec = CountsRecord(z["n_zz"], z["m_zz"], z["n_x"], z["m_x"], z["n_effective"])
            out = cls(rec, z["edges_a"], z["edges_b"], float(z["n_total"]))
        na, nb = len(out.edges_a), len(out.edges_b)
        if rec.n_x.shape != (3, 3, na, nb) or np.shape(rec.n_effective) != (na, nb):
            raise ValueError(f"{path}: count arrays do not match {na} x {nb} bins")
        return out


def model_binned_counts(alice, bob, dist_a, dist_b, dev) -> BinnedCounts:
    """Expected binned counts of the model, in the same layout as measured data."""
    return BinnedCounts(bin_pair_counts(alice, bob, dist_a, dist_b, dev), dist_a.eta_low.copy(),
                        dist_b.eta_low.copy(), dev.n_pulses)


def arts_scan_binned(data: BinnedCounts, alice: ProtocolParams, bob: ProtocolParams,
                     dev: DeviceParams, form: str = "standard",
                     convention: str = "alice") -> RateSurface:
    """ARTS over externally binned counts; cutoff k keeps bins k.. of each channel."""
    cuts_a = np.concatenate([[0.0], data.edges_a[1:]])
    cuts_b = np.concatenate([[0.0], data.edges_b[1:]])
    return scan_counts(data.counts, cuts_a, cuts_b, np.arange(len(cuts_a)),
                       np.arange(len(cuts_b)), data.n_total, alice, bob, dev, form, convention)


def key_rate_at_thresholds(th: ThresholdPair, alice: ProtocolParams, bob: ProtocolParams,
                           dist_a: TransmittanceDistribution, dist_b: TransmittanceDistribution,
                           dev: DeviceParams, form: str = "standard",
                           convention: str = "alice") -> KeyRateResult:
    """Finite-key result on the pulses kept by one cutoff pair."""
    kept_a, surv_a = truncate_above(dist_a, th.eta_th_a)
    kept_b, surv_b = truncate_above(dist_b, th.eta_th_b)
    if surv_a == 0 or surv_b == 0:
        return KeyRateResult(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, form,
                             "all data rejected")
    counts = pooled_counts(alice, bob, kept_a, kept_b, dev)
    return key_rate(counts, alice, bob, dev, form, convention,
                    survival_fraction=surv_a * surv_b)


def rate_at_thresholds(th: ThresholdPair, alice: ProtocolParams, bob: ProtocolParams,
                       dist_a: TransmittanceDistribution, dist_b: TransmittanceDistribution,
                       dev: DeviceParams, form: str = "standard",
                       convention: str = "alice") -> float:
    """Secret bits per transmitted pulse pair after applying the cutoffs."""
    res = key_rate_at_thresholds(th, alice, bob, dist_a, dist_b, dev, form, convention)
    return res.secret_bits / dev.n_pulses


@dataclass(frozen=True)
class PrtsResult:
    """Prefixed cutoffs predicted from calibration data alone.

    ``threshold`` is the argmax of the model scan on the default grid.
    ``refined`` comes from one extra pass on a finer binning around it.
    """

    threshold: ThresholdPair
    rate: float
    no_rejection_rate: float
    refined: ThresholdPair
    refined_rate: float
    surface: RateSurface = field(repr=False, compare=False)


def _local_window(cutoffs: np.ndarray, k: int, fine: np.ndarray) -> np.ndarray:
    lo = cutoffs[k - 1] if k > 0 else 0.0
    hi = cutoffs[k + 1] if k + 1 < len(cutoffs) else np.inf
    sel = fine[(fine >= lo) & (fine <= hi)]
    return sel if len(sel) else np.array([cutoffs[k]])


def prts_threshold(alice: ProtocolParams, bob: ProtocolParams, spec_a: ChannelSpec,
                   spec_b: ChannelSpec, dev: DeviceParams, n_bins: int = 100,
                   refine: bool = True, form: str = "standard",
                   convention: str = "alice") -> PrtsResult:
    """Fix the cutoffs before data collection from (eta0, sigma2) and device calibration."""
    dist_a = discretize(spec_a, n_bins)
    dist_b = discretize(spec_b, n_bins)
    surface = arts_scan(alice, bob, dist_a, dist_b, dev, form=form, convention=convention)
    if surface.max_rate <= 0:
        raise ChannelRangeError("channel beyond key-generation range")
    best = surface.argmax
    refined, refined_rate = best, surface.max_rate
    if refine and not (spec_a.is_static and spec_b.is_static):
        fine_a = discretize(spec_a, n_bins * REFINE_FACTOR) if not spec_a.is_static else dist_a
        fine_b = discretize(spec_b, n_bins * REFINE_FACTOR) if not spec_b.is_static else dist_b
        i, j = surface.argmax_index
        win_a = _local_window(surface.cutoffs_a, i, cutoff_grid(fine_a))
        win_b = _local_window(surface.cutoffs_b, j, cutoff_grid(fine_b))
        local = arts_scan(alice, bob, fine_a, fine_b, dev, win_a, win_b, form, convention)
        refined, refined_rate = local.argmax, local.max_rate
    return PrtsResult(best, surface.max_rate, surface.no_rejection_rate, refined,
                      refined_rate, surface)


# --- loss sweep --------------------------------------------------------------

ParamsForLoss = Callable[[float, float], tuple[ProtocolParams, ProtocolParams]]


def table1_params_for_loss(loss_a_db: float, loss_b_db: float):
    """Reference intensity row whose Bob loss is closest to ``loss_b_db``."""
    from .params import TABLE1

    key = min(TABLE1, key=lambda k: (abs(k[0] - loss_a_db), abs(k[1] - loss_b_db)))
    return TABLE1[key]


@dataclass(frozen=True)
class SweepPoint:
    loss_db: float
    loss_a_db: float
    loss_b_db: float
    rate_static: float
    rate_prts: float
    threshold: ThresholdPair


@dataclass
class SweepResult:
    points: list[SweepPoint]

    @staticmethod
    def _max_loss(points, attr):
        positive = [p.loss_db for p in points if getattr(p, attr) > 0]
        return max(positive) if positive else None

    @property
    def max_loss_static(self):
        return self._max_loss(self.points, "rate_static")

    @property
    def max_loss_prts(self):
        return self._max_loss(self.points, "rate_prts")

    @property
    def extension_db(self):
        """Extra tolerable loss gained by the prefixed cutoffs (None if either curve never has key)."""
        if self.max_loss_static is None or self.max_loss_prts is None:
            return None
        return self.max_loss_prts - self.max_loss_static

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["loss_db", "loss_a_db", "loss_b_db", "rate_static", "rate_prts",
                        "eta_th_a", "eta_th_b"])
            for p in self.points:
                w.writerow([p.loss_db, p.loss_a_db, p.loss_b_db, repr(p.rate_static),
                            repr(p.rate_prts), repr(p.threshold.eta_th_a),
                            repr(p.threshold.eta_th_b)])


def loss_sweep(params_for_loss: ParamsForLoss, dev: DeviceParams, loss_range: Sequence[float],
               loss_a_db: float = 25.0, sigma2_a: float = 1.0, sigma2_b: float = 1.0,
               n_bins: int = 100, form: str = "standard",
               convention: str = "alice") -> SweepResult:
    """No-rejection and prefixed-cutoff rates versus total mean loss.

    Alice's mean loss stays at ``loss_a_db``; Bob's absorbs the rest of each
    total. ``params_for_loss(loss_a_db, loss_b_db)`` supplies the intensities
    (fixed rows or re-optimized per point).
    """
    points = []
    for total in loss_range:
        loss_b = float(total) - loss_a_db
        if loss_b < 0:
            raise ValueError(f"total loss {total} dB is below Alice's {loss_a_db} dB")
        alice, bob = params_for_loss(loss_a_db, loss_b)
        spec_a = ChannelSpec.from_db(loss_a_db, sigma2_a)
        spec_b = ChannelSpec.from_db(loss_b, sigma2_b)
        surface = arts_scan(alice, bob, discretize(spec_a, n_bins), discretize(spec_b, n_bins),
                            dev, form=form, convention=convention)
        points.append(SweepPoint(float(total), loss_a_db, loss_b, surface.no_rejection_rate,
                                 surface.max_rate, surface.argmax))
        logger.info("loss %.2f dB: static %.3g, P-RTS %.3g at %s", total,
                    surface.no_rejection_rate, surface.max_rate, surface.argmax)
    return SweepResult(points)
