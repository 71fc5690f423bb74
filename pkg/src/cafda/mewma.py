"""MEWMA control chart on principal component scores.

The chart smooths the score vectors, ``omega_g = (1 - lam) omega_{g-1} +
lam xi_g`` with ``omega_0 = 0``, and signals when ``T2_g = omega_g'
Lambda_omega^-1 omega_g`` exceeds ``h4``, where ``Lambda_omega = lam / (2 -
lam) * diag(nu)``. ``lam = 1`` is the Hotelling chart.

Run lengths are estimated by Monte Carlo. Because T2 only depends on the
standardized scores, simulations draw standard normal vectors; a mean
shift ``delta`` in component ``r`` becomes ``delta / sqrt(nu_r)``.

Replications are split into fixed-size chunks, each with its own seed
spawned from the master seed, so results do not depend on threading.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

CHUNK = 20_000
CALIBRATION_REPS = 200_000
CURVE_REPS = 10_000
DEFAULT_MAX_STEPS = 1_000_000


def _check_lambda(lam):
    if not 0 < lam <= 1:
        raise ConfigError(f"smoothing constant lambda must lie in (0, 1], got {lam}")


@dataclass(frozen=True)
class ChartConfig:
    lam: float
    variances: np.ndarray
    h4: float = math.inf
    target_arl: float | None = None

    def __post_init__(self):
        _check_lambda(self.lam)
        nu = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if nu.size == 0 or np.any(nu <= 0) or not np.isfinite(nu).all():
            raise ConfigError("score variances must be positive")
        object.__setattr__(self, "variances", nu)
        if self.h4 < 0:
            raise ConfigError("threshold h4 must be >= 0")

    @property
    def dim(self):
        return self.variances.size

    @property
    def omega_variances(self):
        return self.lam / (2.0 - self.lam) * self.variances


@dataclass(frozen=True)
class ChartState:
    omega: np.ndarray
    g: int = 0
    t2: float = 0.0
    alarmed: bool = False

    @classmethod
    def initial(cls, dim):
        return cls(np.zeros(dim))


def update(state: ChartState, xi, cfg: ChartConfig) -> ChartState:
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != cfg.dim or state.omega.size != cfg.dim:
        raise ConfigError(f"score vector of length {xi.size} for a {cfg.dim}-dimensional chart")
    omega = (1.0 - cfg.lam) * state.omega + cfg.lam * xi
    t2 = float(np.sum(omega**2 / cfg.omega_variances))
    return ChartState(omega, state.g + 1, t2, t2 > cfg.h4)


@dataclass(frozen=True)
class ChartTrace:
    g: np.ndarray
    day_ids: list
    t2: np.ndarray
    h4: float
    alarmed: np.ndarray

    @property
    def run_length(self):
        hits = np.flatnonzero(self.alarmed)
        return int(self.g[hits[0]]) if hits.size else None

    @property
    def alarm_days(self):
        return [self.day_ids[i] for i in np.flatnonzero(self.alarmed)]

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["g", "day_id", "T2", "h4", "alarmed"])
            for g, d, t2, a in zip(self.g, self.day_ids, self.t2, self.alarmed):
                day = d.isoformat() if hasattr(d, "isoformat") else d
                w.writerow([int(g), day, repr(float(t2)), repr(float(self.h4)), int(bool(a))])


def monitor_stream(cfg: ChartConfig, scores) -> ChartTrace:
    """Run the chart over a sequence of score vectors without resetting after alarms.

    Items may be arrays or objects with ``values`` and ``day_id``.
    """
    state = ChartState.initial(cfg.dim)
    gs, ids, t2s, alarms = [], [], [], []
    for k, item in enumerate(scores, start=1):
        values = getattr(item, "values", item)
        state = update(state, values, cfg)
        gs.append(state.g)
        ids.append(getattr(item, "day_id", k))
        t2s.append(state.t2)
        alarms.append(state.alarmed)
    return ChartTrace(np.array(gs, dtype=int), ids, np.array(t2s), cfg.h4, np.array(alarms, dtype=bool))


# ----------------------------------------------------------------------------
# Monte Carlo run lengths


@dataclass(frozen=True)
class RunLengthSummary:
    arl: float
    se: float
    reps: int
    run_lengths: np.ndarray = field(repr=False)
    censored: int = 0

    def histogram(self, bins="auto"):
        return np.histogram(self.run_lengths, bins=bins)

    def write_histogram(self, path, bins="auto"):
        counts, edges = self.histogram(bins)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lower", "upper", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def _summary(n, censored=0):
    n = np.asarray(n, dtype=float)
    se = float(n.std(ddof=1) / math.sqrt(n.size)) if n.size > 1 else math.nan
    return RunLengthSummary(float(n.mean()), se, int(n.size), n.astype(np.int64), int(censored))


def _chunks(reps, seed, chunk=CHUNK):
    sizes = [min(chunk, reps - a) for a in range(0, reps, chunk)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    return list(zip(sizes, seeds))


def _map(fn, jobs, threads):
    if threads and threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda a: fn(*a), jobs))
    return [fn(*a) for a in jobs]


def _run_chunk(n, seed, dim, lam, h, shift, max_steps, tau=1):
    """Run lengths of ``n`` standardized charts; ``shift`` is added from step ``tau``."""
    rng = np.random.default_rng(seed)
    c = (2.0 - lam) / lam
    omega = np.zeros((n, dim))
    ids = np.arange(n)
    out = np.full(n, max_steps, dtype=np.int64)
    g = 0
    while ids.size and g < max_steps:
        g += 1
        x = rng.standard_normal((ids.size, dim))
        if shift is not None and g >= tau:
            x += shift
        omega = x if lam == 1.0 else (1.0 - lam) * omega + lam * x
        t2 = c * np.einsum("ij,ij->i", omega, omega)
        hit = t2 > h
        if hit.any():
            out[ids[hit]] = g
            keep = ~hit
            ids = ids[keep]
            omega = omega[keep]
    return out, int(ids.size)


def _standard_shift(cfg, shift):
    if shift is None:
        return None
    r, delta = shift
    if not 0 <= r < cfg.dim:
        raise ConfigError(f"shift component {r} outside a {cfg.dim}-dimensional chart")
    vec = np.zeros(cfg.dim)
    vec[r] = delta / math.sqrt(cfg.variances[r])
    return vec


def estimate_arl(cfg: ChartConfig, shift=None, reps=CURVE_REPS, seed=0, max_steps=DEFAULT_MAX_STEPS,
                 threads=None) -> RunLengthSummary:
    """Zero-state run length of the chart under Gaussian scores.

    Parameters
    ----------
    cfg : ChartConfig
    shift : (int, float), optional
        ``(component, delta)``: zero-based component index and mean shift in
        the scores' own units, present from the first observation on.
    reps : int
    seed : int
    max_steps : int
        Runs still silent after this many steps are censored at ``max_steps``.
    """
    vec = _standard_shift(cfg, shift)
    jobs = [(n, s, cfg.dim, cfg.lam, cfg.h4, vec, max_steps) for n, s in _chunks(reps, seed)]
    parts = _map(_run_chunk, jobs, threads)
    n = np.concatenate([p[0] for p in parts])
    censored = sum(p[1] for p in parts)
    if censored:
        log.warning("%d of %d runs censored at %d steps", censored, reps, max_steps)
    return _summary(n, censored)


def _record_chunk(n, seed, dim, lam, h_hi, max_steps):
    """Simulate until T2 > h_hi and keep every running-maximum record.

    For any ``h <= h_hi`` the run length of a path is the step of its first
    record above ``h``, so one simulation answers all threshold queries.
    """
    rng = np.random.default_rng(seed)
    c = (2.0 - lam) / lam
    omega = np.zeros((n, dim))
    ids = np.arange(n)
    best = np.full(n, -np.inf)
    rec_id, rec_g, rec_v = [], [], []
    g = 0
    while ids.size:
        g += 1
        if g > max_steps:
            raise NumericError(f"calibration paths exceeded {max_steps} steps; target ARL too large")
        x = rng.standard_normal((ids.size, dim))
        omega = x if lam == 1.0 else (1.0 - lam) * omega + lam * x
        t2 = c * np.einsum("ij,ij->i", omega, omega)
        new = t2 > best
        if new.any():
            rec_id.append(ids[new])
            rec_g.append(np.full(int(new.sum()), g, dtype=np.int64))
            rec_v.append(t2[new])
            best[new] = t2[new]
        done = t2 > h_hi
        if done.any():
            keep = ~done
            ids = ids[keep]
            omega = omega[keep]
            best = best[keep]
    return np.concatenate(rec_id), np.concatenate(rec_g), np.concatenate(rec_v)


class _Records:
    def __init__(self, parts, h_hi):
        offset = 0
        ids, gs, vs = [], [], []
        for (rid, rg, rv), n in parts:
            ids.append(rid + offset)
            gs.append(rg)
            vs.append(rv)
            offset += n
        self.n = offset
        self.h_hi = h_hi
        self.ids = np.concatenate(ids)
        self.g = np.concatenate(gs)
        self.v = np.concatenate(vs)

    def run_lengths(self, h):
        if h > self.h_hi:
            raise ValueError("query above the simulated threshold")
        sel = self.v > h
        out = np.full(self.n, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(out, self.ids[sel], self.g[sel])
        return out

    def arl(self, h):
        return float(self.run_lengths(h).mean())


def _simulate_records(dim, lam, h_hi, reps, seed, threads, max_steps):
    chunks = _chunks(reps, seed)
    jobs = [(n, s, dim, lam, h_hi, max_steps) for n, s in chunks]
    parts = _map(_record_chunk, jobs, threads)
    return _Records(list(zip(parts, [n for n, _ in chunks])), h_hi)


@dataclass(frozen=True)
class Calibration:
    dim: int
    lam: float
    target_arl: float
    h4: float
    arl: float
    se: float
    reps: int
    seed: int

    def to_dict(self):
        return {k: getattr(self, k) for k in ("dim", "lam", "target_arl", "h4", "arl", "se", "reps", "seed")}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["dim"]), float(d["lam"]), float(d["target_arl"]), float(d["h4"]), float(d["arl"]),
                   float(d["se"]), int(d["reps"]), int(d["seed"]))


def _bisect(records, target, lo, hi, rtol, max_iter=100):
    a, b = lo, hi
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        arl = records.arl(mid)
        if abs(arl - target) / target < rtol:
            return mid
        if arl < target:
            a = mid
        else:
            b = mid
        if b - a < 1e-9 * hi:
            break
    return 0.5 * (a + b)


def calibrate_h4(dim: int, lam: float, target_arl: float, reps=CALIBRATION_REPS, seed=0, threads=None,
                 rtol=1e-3, max_steps=DEFAULT_MAX_STEPS) -> Calibration:
    """Threshold ``h4`` giving the requested in-control ARL, by Monte Carlo and bisection.

    A pilot run locates the threshold roughly; the full run then simulates
    every path until it exceeds a slightly larger bracket and records its
    running maxima, after which the ARL at any lower threshold is exact for
    those paths and bisection needs no further simulation.
    """
    _check_lambda(lam)
    if not target_arl > 1:
        raise ConfigError("target ARL must exceed 1")
    if dim < 1:
        raise ConfigError("chart dimension must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(2)
    pilot_seed = int(seeds[0].generate_state(1)[0])
    main_seed = int(seeds[1].generate_state(1)[0])

    h0 = float(stats.chi2.isf(1.0 / target_arl, dim))
    lo = 0.0
    hi = 1.2 * h0
    pilot_reps = min(reps, 4000)
    for doubling in range(61):
        rec = _simulate_records(dim, lam, hi, pilot_reps, pilot_seed, threads, max_steps)
        if rec.arl(hi) >= target_arl:
            break
        lo, hi = hi, hi + 2.0 * (hi - lo)
    else:
        raise NumericError("could not bracket the threshold after 60 doublings")
    h_pilot = _bisect(rec, target_arl, lo, hi, 0.01)

    hi = 1.06 * h_pilot
    for doubling in range(61):
        rec = _simulate_records(dim, lam, hi, reps, main_seed, threads, max_steps)
        if rec.arl(hi) >= target_arl:
            break
        hi *= 1.06
    else:
        raise NumericError("could not bracket the threshold after 60 expansions")
    lo = 0.0
    h4 = _bisect(rec, target_arl, lo, hi, rtol)
    n = rec.run_lengths(h4)
    s = _summary(n)
    log.info("calibrated h4=%.4f (dim=%d, lambda=%g): ARL %.2f +- %.2f", h4, dim, lam, s.arl, s.se)
    return Calibration(dim, float(lam), float(target_arl), float(h4), s.arl, s.se, reps, seed)


def hotelling_arl(h, dim):
    """Exact in-control ARL of the Hotelling chart (``lam = 1``)."""
    return 1.0 / float(stats.chi2.sf(h, dim))


def with_threshold(cfg: ChartConfig, h4: float) -> ChartConfig:
    return replace(cfg, h4=float(h4))
