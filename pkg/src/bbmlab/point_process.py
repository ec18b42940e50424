"""Samplers for the limit point processes: exponential PPP, cluster
process, and the tidal construction it corrects.

The cluster and tidal processes attach an independent drifted branching
run to each atom of a Poisson process on the negative axis.  Both atom
densities grow at least exponentially toward -infinity, so the atom
populations inside any useful truncation depth are astronomically large
and cannot be realized one by one.  What can be realized exactly is the
restriction to a view window [v, inf): an atom at x contributes iff the
maximal displacement W of its run reaches v - x, so contributing atoms
form a Poisson process with intensity nu(x) * P[W >= v - x].  The law of
W is estimated once from a library of independent runs; contributing
atoms are then sampled jointly with a library run conditioned to clear
their bar, and that run's displacement vector supplies the emitted
points.  Beyond the library's empirical resolution a fitted
Gaussian-corrected exponential envelope extends the tail; its share of
the intensity is recorded in the sample metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.stats import norm

from .branching import (LOG_CORRECTION, SQRT2, OffspringLaw, SimConfig,
                        simulate_tree)
from .errors import ConfigError
from .rng import CounterStream

# -- atom measures on the negative axis -----------------------------------


class TidalAtoms:
    """Intensity lam * exp(-sqrt(2) x) dx on the negative axis."""

    kind = "tidal"

    def __init__(self, lam: float):
        if lam <= 0:
            raise ConfigError("intensity scale must be > 0")
        self.lam = lam

    def mass(self, a: float, b: float) -> float:
        """Measure of [a, b), for a <= b <= 0."""
        if a >= b:
            return 0.0
        return self.lam * (math.exp(-SQRT2 * a) - math.exp(-SQRT2 * b)) / SQRT2

    def density(self, x):
        return self.lam * np.exp(-SQRT2 * x)

    def sample(self, a: float, b: float, n: int, stream: CounterStream) -> np.ndarray:
        """n atoms from the measure restricted to [a, b)."""
        u = stream.uniform(n)
        ea, eb = math.exp(-SQRT2 * a), math.exp(-SQRT2 * b)
        return -np.log(ea - u * (ea - eb)) / SQRT2


class ClusterAtoms:
    """Intensity lam * (-x) exp(-sqrt(2) x) dx on the negative axis."""

    kind = "cluster"

    def __init__(self, lam: float):
        if lam <= 0:
            raise ConfigError("intensity scale must be > 0")
        self.lam = lam

    @staticmethod
    def _antiderivative(x: float) -> float:
        return (x / SQRT2 + 0.5) * math.exp(-SQRT2 * x)

    def mass(self, a: float, b: float) -> float:
        if a >= b:
            return 0.0
        return self.lam * (self._antiderivative(b) - self._antiderivative(a))

    def density(self, x):
        return self.lam * (-x) * np.exp(-SQRT2 * x)

    def sample(self, a: float, b: float, n: int, stream: CounterStream) -> np.ndarray:
        """Rejection from the tidal shape; (-x)/(-a) <= 1 on [a, b)."""
        out = np.empty(n)
        have = 0
        proposal = TidalAtoms(self.lam)
        while have < n:
            m = max(16, 2 * (n - have))
            x = proposal.sample(a, b, m, stream)
            accept = stream.uniform(m) < (-x) / (-a)
            x = x[accept][: n - have]
            out[have:have + x.size] = x
            have += x.size
        return out


# -- point samples ---------------------------------------------------------


@dataclass
class PointSample:
    """Finite decreasing point configuration with window metadata."""

    points: np.ndarray
    window: tuple[float, float]
    intensity_scale: float
    seed: int
    kind: str                      # "ppp" | "cluster" | "tidal"
    r: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.window
        if self.points.size and (self.points.min() < lo or self.points.max() > hi):
            raise ConfigError("points outside the declared window")
        if np.any(np.diff(self.points) > 0):
            raise ConfigError("points must be sorted decreasing")

    def __len__(self) -> int:
        return len(self.points)


def sample_exponential_ppp(lam: float, low: float, seed: int) -> PointSample:
    """PPP with density lam * sqrt(2) exp(-sqrt(2) x) dx on [low, inf)."""
    if lam <= 0:
        raise ConfigError("intensity scale must be > 0")
    stream = CounterStream(seed, stream=101)
    mean_count = lam * math.exp(-SQRT2 * low)
    n = stream.poisson(mean_count)
    pts = low - np.log(stream.uniform(n)) / SQRT2 if n else np.empty(0)
    pts = np.sort(pts)[::-1]
    return PointSample(points=pts, window=(low, math.inf), intensity_scale=lam,
                       seed=seed, kind="ppp",
                       metadata={"mean_count": mean_count})


# -- cluster-displacement library ------------------------------------------


def _library_worker(args) -> tuple[np.ndarray, list[np.ndarray]]:
    r, floor, seeds, offspring_probs, barrier = args
    law = OffspringLaw(tuple(offspring_probs),
                       require_mean_two=abs(sum((i + 1) * p for i, p in
                                               enumerate(offspring_probs)) - 2) <= 1e-12)
    drift = SQRT2 * r
    maxima = np.empty(len(seeds))
    vectors: list[np.ndarray] = []
    for i, seed in enumerate(seeds):
        tree = simulate_tree(SimConfig(horizon=r, offspring=law, seed=seed,
                                       barrier_offset=barrier))
        disp = tree.end_position[tree.leaf_ids()] - drift
        w = float(disp.max())
        maxima[i] = w
        vectors.append(np.sort(disp[disp >= floor])[::-1] if w >= floor
                       else np.empty(0))
    return maxima, vectors


class ClusterLibrary:
    """Empirical law of the displacement cloud of one drifted run.

    Holds, for n independent runs at horizon r, the maximal displacement
    W_j = max_k x_k(r) - sqrt(2) r and the per-run displacement vectors
    above ``floor``.  Conditional resampling among runs with W_j >= bar
    realizes "a run given that it clears the bar".
    """

    def __init__(self, r: float, floor: float, n: int, seed: int,
                 offspring: Optional[OffspringLaw] = None,
                 barrier: Optional[float] = None, workers: int = 1):
        if r <= 0:
            raise ConfigError("library horizon must be > 0")
        self.r = float(r)
        self.floor = float(floor)
        self.n = int(n)
        self.seed = int(seed)
        self.offspring = offspring or OffspringLaw.binary()
        self.barrier = barrier
        seeds = [seed + j for j in range(n)]
        chunk = max(1, n // max(1, workers * 4))
        batches = [(self.r, self.floor, seeds[i:i + chunk],
                    self.offspring.probabilities, barrier)
                   for i in range(0, n, chunk)]
        maxima: list[np.ndarray] = []
        vectors: list[np.ndarray] = []
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for m, v in pool.map(_library_worker, batches):
                    maxima.append(m)
                    vectors.extend(v)
        else:
            for batch in batches:
                m, v = _library_worker(batch)
                maxima.append(m)
                vectors.extend(v)
        self.maxima = np.concatenate(maxima)
        self.vectors = vectors
        self._sorted = np.sort(self.maxima)

    def clear_probability(self, bar: float) -> float:
        """Empirical P[W >= bar]."""
        idx = np.searchsorted(self._sorted, bar, side="left")
        return (self.n - idx) / self.n

    def runs_clearing(self, bar: float) -> np.ndarray:
        return np.nonzero(self.maxima >= bar)[0]

    def tail_quantile(self, top: int) -> float:
        """W above which only ``top`` runs remain."""
        return float(self._sorted[max(0, self.n - top)])

    # -- fitted analytic tail ------------------------------------------

    def envelope_rho(self, top_lo: int = 200, top_hi: int = 20) -> Optional[float]:
        """Scale of the Gaussian-corrected exponential tail envelope,
        fitted where the empirical tail is still resolved."""
        if self.r < 2.0 or self.n < 2 * top_lo:
            return None
        ks = np.unique(np.linspace(top_hi, top_lo, 12).astype(int))
        ratios = []
        for k in ks:
            w = self.tail_quantile(k)
            x = w + LOG_CORRECTION * math.log(self.r)
            if x < 1.0:
                continue
            p_emp = k / self.n
            ratios.append(p_emp / envelope_shape(x, self.r))
        if not ratios:
            return None
        return float(np.exp(np.mean(np.log(ratios))))


def envelope_shape(x, r: float):
    """Tail shape rho-free part: X exp(-sqrt(2) X - X^2/(2r) + cX log(r)/r)."""
    x = np.asarray(x, dtype=np.float64)
    return x * np.exp(-SQRT2 * x - x * x / (2.0 * r)
                      + LOG_CORRECTION * x * np.log(r) / r)


def displacement_mean_count(r: float, bar: float) -> float:
    """Exact expected number of displacements >= bar for one run:
    e^r P[B_r >= bar + sqrt(2) r] (one-particle tilt)."""
    z = (bar + SQRT2 * r) / math.sqrt(r)
    # e^r * survival, evaluated in log space to survive large r
    log_sf = norm.logsf(z)
    return math.exp(r + log_sf)


def default_cluster_depth(r: float) -> float:
    return 3.0 * r / SQRT2 + 10.0

def default_tidal_depth(r: float) -> float:
    return SQRT2 * r + 10.0 * math.sqrt(max(r, 1.0))


@dataclass
class _ContributorModel:
    """Thinned description of the contributing atoms for one sampler setup.

    Each library run's weight is the analytic atom mass of the region its
    maximum can serve, Lambda([v - W_j, 0)), so the contributing-atom
    intensity mu is an exactly unbiased functional of the library: the
    unresolved far tail of W enters through the weights, not through a
    pointwise tail estimate.  The price is sampling variance concentrated
    in the largest W_j, which shrinks with the library size.
    """

    measure: object
    view_low: float
    depth: float
    library: ClusterLibrary
    mu: float = 0.0

    def __post_init__(self):
        lib, v, A = self.library, self.view_low, self.depth
        weights = np.array([self.measure.mass(max(-A, v - w), 0.0)
                            for w in lib.maxima])
        self._weights = weights
        self._cum = np.cumsum(weights)
        self.mu = float(weights.mean())

    @property
    def mu_total(self) -> float:
        return self.mu

    def sample_pair(self, stream: CounterStream) -> tuple[float, int]:
        """(atom position, library run index) for one contributing atom.

        Runs are drawn proportionally to their weight and the atom is
        placed by the measure restricted to the run's served region; the
        marginal atom intensity is nu(x) * P_hat[W >= v - x] and the run
        is uniform among those clearing the atom's bar.
        """
        total = self._cum[-1]
        u = float(stream.uniform(1)[0]) * total
        j = int(np.searchsorted(self._cum, u, side="right"))
        j = min(j, len(self._cum) - 1)
        a = max(-self.depth, self.view_low - float(self.library.maxima[j]))
        x = float(self.measure.sample(a, 0.0, 1, stream)[0])
        return x, j


def _sample_decorated(measure, r: float, view_low: float, depth: float,
                      seed: int, library: ClusterLibrary,
                      model: Optional[_ContributorModel] = None
                      ) -> PointSample:
    stream = CounterStream(seed, stream=202)
    if r == 0.0:
        # degenerate clusters: the points are the atoms themselves
        lo = max(-depth, view_low)
        mu = measure.mass(lo, 0.0) if view_low < 0 else 0.0
        k = stream.poisson(mu)
        pts = measure.sample(lo, 0.0, k, stream) if k else np.empty(0)
        pts = np.sort(pts)[::-1]
        return PointSample(points=pts, window=(view_low, math.inf),
                           intensity_scale=measure.lam, seed=seed,
                           kind=measure.kind, r=0.0,
                           metadata={"atoms_realized": int(k),
                                     "expected_atom_count": measure.mass(-depth, 0.0),
                                     "depth": depth})
    if model is None:
        model = _ContributorModel(measure=measure, view_low=view_low,
                                  depth=depth, library=library)
    k = stream.poisson(model.mu_total)
    points: list[float] = []
    survivors = []
    for _ in range(k):
        x, j = model.sample_pair(stream)
        disp = library.vectors[j]
        emitted = (x + disp[disp >= view_low - x]).tolist()
        points.extend(emitted)
        survivors.append(len(emitted))
    pts = np.sort(np.asarray(points))[::-1] if points else np.empty(0)
    return PointSample(points=pts, window=(view_low, math.inf),
                       intensity_scale=measure.lam, seed=seed,
                       kind=measure.kind, r=r,
                       metadata={
                           "atoms_realized": int(k),
                           "atom_points": survivors,
                           "expected_atom_count": measure.mass(-depth, 0.0),
                           "contributing_mean": model.mu_total,
                           "depth": depth,
                           "library_size": library.n,
                       })


def sample_cluster_process(r: float, lam: float, trunc_A: Optional[float] = None,
                           view_low: float = 0.0, seed: int = 0, *,
                           library: Optional[ClusterLibrary] = None,
                           library_size: int = 4000,
                           workers: int = 1) -> PointSample:
    """One realization of the cluster process restricted to [view_low, inf)."""
    if trunc_A is None:
        trunc_A = default_cluster_depth(r)
    if not math.isfinite(trunc_A):
        raise ConfigError("the cluster atom density is not integrable; "
                          "a finite truncation depth is required")
    measure = ClusterAtoms(lam)
    if r > 0 and library is None:
        library = ClusterLibrary(r, floor=view_low, n=library_size,
                                 seed=seed ^ 0x5EED, workers=workers)
    return _sample_decorated(measure, r, view_low, trunc_A, seed, library)


def sample_tidal_process(r: float, lam: float, view_low: float = 0.0,
                         seed: int = 0, *, depth: Optional[float] = None,
                         library: Optional[ClusterLibrary] = None,
                         library_size: int = 4000,
                         workers: int = 1) -> PointSample:
    """One realization of the tidal construction restricted to [view_low, inf)."""
    if depth is None:
        depth = default_tidal_depth(r)
    if not math.isfinite(depth):
        raise ConfigError("the tidal atom density is not integrable; "
                          "a finite truncation depth is required")
    measure = TidalAtoms(lam)
    if r > 0 and library is None:
        library = ClusterLibrary(r, floor=view_low, n=library_size,
                                 seed=seed ^ 0x71DA1, workers=workers)
    return _sample_decorated(measure, r, view_low, depth, seed, library)


@dataclass
class DriftOffEstimate:
    r: float
    y: float
    lam: float
    replicas: int
    hits: int
    estimate: float
    ci_low: float
    ci_high: float
    analytic_given_library: float

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in
                ("r", "y", "lam", "replicas", "hits", "estimate",
                 "ci_low", "ci_high", "analytic_given_library")}


def _wilson_interval(hits: int, n: int, z: float = 1.959963984540054
                     ) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = hits / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def drift_off_probability(r: float, y: float, lam: float, replicas: int,
                          seed: int, *, depth: Optional[float] = None,
                          library: Optional[ClusterLibrary] = None,
                          library_size: int = 4000,
                          workers: int = 1) -> DriftOffEstimate:
    """Monte Carlo estimate of P[at least one tidal point >= y]."""
    if replicas < 100:
        raise ConfigError("drift-off estimation needs at least 100 replicas")
    if depth is None:
        depth = default_tidal_depth(r)
    measure = TidalAtoms(lam)
    if r > 0 and library is None:
        library = ClusterLibrary(r, floor=y, n=library_size,
                                 seed=seed ^ 0x71DA1, workers=workers)
    model = None
    if r > 0:
        model = _ContributorModel(measure=measure, view_low=y, depth=depth,
                                  library=library)
        analytic = 1.0 - math.exp(-model.mu_total)
    else:
        lo = max(-depth, y)
        analytic = 1.0 - math.exp(-measure.mass(lo, 0.0)) if y < 0 else 0.0
    hits = 0
    for i in range(replicas):
        sample = _sample_decorated(measure, r, y, depth, seed + i, library,
                                   model=model)
        hits += int(len(sample) > 0)
    est = hits / replicas
    lo_ci, hi_ci = _wilson_interval(hits, replicas)
    return DriftOffEstimate(r=r, y=y, lam=lam, replicas=replicas, hits=hits,
                            estimate=est, ci_low=lo_ci, ci_high=hi_ci,
                            analytic_given_library=analytic)


def drift_off_envelope(r: float, y: float, lam: float, rho: float,
                       depth: Optional[float] = None) -> float:
    """Quadrature of the fitted tail envelope against the tidal atom
    density: an analytic companion that should dominate the Monte Carlo
    estimate."""
    if depth is None:
        depth = default_tidal_depth(r)
    beta = LOG_CORRECTION * math.log(r)
    measure = TidalAtoms(lam)

    def integrand(x):
        bar = y - x + beta
        p = rho * float(envelope_shape(max(bar, 1.0), r)) if bar >= 1.0 else 1.0
        return measure.density(x) * min(1.0, p)

    val, _ = quad(integrand, -depth, 0.0, limit=200)
    return 1.0 - math.exp(-val)


def expected_cluster_count(r: float, lam: float, view_low: float,
                           depth: Optional[float] = None) -> float:
    """Quadrature oracle for the cluster-process mean count in
    [view_low, inf): atom density times the exact one-run mean count."""
    if depth is None:
        depth = default_cluster_depth(r)
    measure = ClusterAtoms(lam)
    if r == 0.0:
        return measure.mass(max(-depth, view_low), 0.0) if view_low < 0 else 0.0

    def integrand(x):
        return measure.density(x) * displacement_mean_count(r, view_low - x)

    val, _ = quad(integrand, -depth, 0.0, limit=400)
    return float(val)
