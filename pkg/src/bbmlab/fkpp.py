"""Finite-difference front propagation for the reaction-diffusion equation
u_t = 1/2 u_xx + sum_k p_k u^k - u.

With Heaviside-right initial data the solution is a rightward pulled
front connecting 0 (left) to 1 (right); its centering grows like
sqrt(2) t minus a logarithmic correction, and the recentered profile
converges to the traveling wave solving
1/2 w'' + sqrt(2) w' + sum_k p_k w^k - w = 0.
Explicit Euler in time with central second differences; dt <= dx^2 keeps
the discrete maximum principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import IO, Optional, Sequence

import numpy as np

from .branching import LOG_CORRECTION, SQRT2, OffspringLaw
from .errors import ConfigError
from .ioutils import float_str
from .stats import EstimatedConstant


@dataclass
class WaveProfile:
    x_min: float
    dx: float
    values: np.ndarray
    time: float = 0.0
    frame_shift: float = 0.0

    @property
    def grid(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(len(self.values))

    @property
    def x_max(self) -> float:
        return self.x_min + self.dx * (len(self.values) - 1)

    def copy(self) -> "WaveProfile":
        return replace(self, values=self.values.copy())


def heaviside_profile(x_min: float, x_max: float, dx: float) -> WaveProfile:
    """Initial condition 1 at x >= 0, 0 below."""
    n = int(round((x_max - x_min) / dx)) + 1
    x = x_min + dx * np.arange(n)
    return WaveProfile(x_min=x_min, dx=dx, values=(x >= 0.0).astype(np.float64))


def _reaction_coefficients(offspring: OffspringLaw) -> np.ndarray:
    """Coefficients of sum_k p_k u^k - u, ascending powers."""
    coeffs = np.zeros(offspring.k_max + 1)
    for k, p in enumerate(offspring.probabilities, start=1):
        coeffs[k] += p
    coeffs[1] -= 1.0
    return coeffs


def _reaction(u: np.ndarray, coeffs: np.ndarray, out: np.ndarray) -> np.ndarray:
    out[:] = coeffs[-1]
    for c in coeffs[-2::-1]:
        out *= u
        out += c
    return out


def evolve(profile: WaveProfile, offspring: OffspringLaw, dt: float,
           steps: int) -> WaveProfile:
    """Advance steps * dt with Dirichlet ends (0 left, 1 right)."""
    dx = profile.dx
    if dt > dx * dx:
        raise ConfigError(f"stability requires dt <= dx^2 = {dx*dx:g}, got {dt:g}")
    u = profile.values.copy()
    coeffs = _reaction_coefficients(offspring)
    lap = np.empty_like(u)
    rea = np.empty_like(u)
    half_over_dx2 = 0.5 / (dx * dx)
    left, right = u[0], u[-1]
    for _ in range(steps):
        lap[1:-1] = u[2:]
        lap[1:-1] += u[:-2]
        lap[1:-1] -= 2.0 * u[1:-1]
        _reaction(u, coeffs, rea)
        u[1:-1] += dt * (half_over_dx2 * lap[1:-1] + rea[1:-1])
        u[0] = left
        u[-1] = right
        np.clip(u, 0.0, 1.0, out=u)
    return WaveProfile(x_min=profile.x_min, dx=dx, values=u,
                       time=profile.time + steps * dt,
                       frame_shift=profile.frame_shift)


def front_position(profile: WaveProfile, level: float = 0.5) -> float:
    """Abscissa where the (nondecreasing) profile crosses the level,
    by linear interpolation."""
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    u = profile.values
    above = u >= level
    if not above.any() or above.all():
        raise ConfigError("profile does not cross the level")
    j = int(np.argmax(above))
    if j == 0:
        return profile.x_min
    x = profile.grid
    u0, u1 = u[j - 1], u[j]
    if u1 == u0:
        return float(x[j])
    return float(x[j - 1] + (level - u0) / (u1 - u0) * profile.dx)


def recentered_values(profile: WaveProfile, level: float = 0.5) -> np.ndarray:
    """Profile resampled on a grid whose origin is the level crossing."""
    shift = front_position(profile, level)
    x = profile.grid
    return np.interp(x, x - shift, profile.values,
                     left=profile.values[0], right=profile.values[-1])


def wave_residual(profile: WaveProfile, offspring: OffspringLaw,
                  *, converged_check: Optional[float] = None,
                  boundary_skip: int = 3) -> float:
    """Sup-norm of 1/2 u'' + sqrt(2) u' + reaction(u) on the interior.

    The steady wave equation is translation invariant, so the residual is
    evaluated on the raw grid without any resampling.  ``converged_check``
    carries the caller's measured per-unit-time drift of the recentered
    profile; a drift above 1e-6 rejects the call as premature.
    """
    if converged_check is not None and converged_check >= 1e-6:
        raise ConfigError(
            f"profile not converged: recentered drift {converged_check:g} "
            "per step (need < 1e-6)")
    u = profile.values
    dx = profile.dx
    coeffs = _reaction_coefficients(offspring)
    d1 = (u[2:] - u[:-2]) / (2.0 * dx)
    d2 = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (dx * dx)
    rea = np.empty_like(u)
    _reaction(u, coeffs, rea)
    res = 0.5 * d2 + SQRT2 * d1 + rea[1:-1]
    s = slice(boundary_skip, len(res) - boundary_skip)
    return float(np.abs(res[s]).max())


# -- protocols ---------------------------------------------------------------


@dataclass
class FrontTrack:
    times: np.ndarray
    fronts: np.ndarray
    profile: WaveProfile
    dx: float
    dt: float
    #: sup-norm difference of recentered profiles over the last step
    final_drift_per_step: float = math.nan


def run_front_tracking(*, dx: float = 0.1, t_final: float = 200.0,
                       offspring: Optional[OffspringLaw] = None,
                       dt_factor: float = 0.4,
                       record_from: float = 0.0, record_every: float = 2.0,
                       x_min: float = -50.0, x_pad: float = 100.0,
                       level: float = 0.5) -> FrontTrack:
    """Evolve Heaviside data to t_final, recording the front position."""
    offspring = offspring or OffspringLaw.binary()
    dt = dt_factor * dx * dx
    profile = heaviside_profile(x_min, SQRT2 * t_final + x_pad, dx)
    times = []
    fronts = []
    t_records = np.arange(record_from, t_final + 1e-9, record_every)
    steps_done = 0
    for t_rec in t_records:
        target = int(round(t_rec / dt))
        if target > steps_done:
            profile = evolve(profile, offspring, dt, target - steps_done)
            steps_done = target
        if t_rec > 0.0:
            times.append(profile.time)
            fronts.append(front_position(profile, level))
    # per-step drift of the recentered shape, averaged over one time unit
    # (interpolation phase noise cancels in the average)
    before = recentered_values(profile, level)
    drift_steps = max(1, int(round(1.0 / dt)))
    profile = evolve(profile, offspring, dt, drift_steps)
    after = recentered_values(profile, level)
    drift = float(np.abs(after - before).max()) / drift_steps
    return FrontTrack(times=np.asarray(times), fronts=np.asarray(fronts),
                      profile=profile, dx=dx, dt=dt,
                      final_drift_per_step=drift)


def fit_front_speed(times: np.ndarray, fronts: np.ndarray,
                    t_min: float = 20.0, t_max: float = 200.0) -> dict:
    """Front-law fits over [t_min, t_max].

    speed: slope of the free three-parameter model a*t + b*log t + c.
    log_coefficient: from the constrained model sqrt(2) t - b*log t + c.
    """
    mask = (times >= t_min) & (times <= t_max)
    if mask.sum() < 4:
        raise ConfigError("not enough front records in the fit range")
    t = times[mask]
    f = fronts[mask]
    design = np.column_stack([t, np.log(t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(design, f, rcond=None)
    speed = float(coef[0])
    resid = f - SQRT2 * t
    design_c = np.column_stack([-np.log(t), np.ones_like(t)])
    coef_c, *_ = np.linalg.lstsq(design_c, resid, rcond=None)
    return {
        "speed": speed,
        "speed_free_log_coefficient": float(-coef[1]),
        "log_coefficient": float(coef_c[0]),
        "offset": float(coef_c[1]),
        "t_range": (float(t[0]), float(t[-1])),
        "n_points": int(mask.sum()),
    }


def tail_fit(profile: WaveProfile, *, anchor_x: float = 0.0,
             tail_window: tuple[float, float] = (1e-5, 1e-2),
             level: float = 0.5) -> EstimatedConstant:
    """Fit of 1 - w(x) ~ C x exp(-sqrt(2) x) in the right tail.

    The wave is determined only up to translation; coordinates are fixed
    so the level-1/2 crossing sits at ``anchor_x`` (the Monte Carlo
    median of the recentered maximum, for cross-method comparison).
    """
    lo, hi = tail_window
    if not 0.0 < lo < hi < 1.0:
        raise ConfigError("tail window must satisfy 0 < lo < hi < 1")
    crossing = front_position(profile, level)
    x = profile.grid - crossing + anchor_x
    tail = 1.0 - profile.values
    mask = (tail > lo) & (tail < hi) & (x > 1.0)
    if mask.sum() < 8:
        raise ConfigError("tail below the numeric floor in the fit window")
    logs = np.log(tail[mask]) - (np.log(x[mask]) - SQRT2 * x[mask])
    log_c = float(logs.mean())
    c_hat = math.exp(log_c)
    stderr = c_hat * float(logs.std(ddof=1)) / math.sqrt(mask.sum())
    return EstimatedConstant(c_hat=c_hat, stderr=stderr,
                             fit_window=(float(x[mask][0]), float(x[mask][-1])),
                             method="fkpp-tail")


# -- serialization -----------------------------------------------------------

def export_profile_csv(profile: WaveProfile, fh: IO[str]) -> None:
    fh.write("x,u\n")
    for x, u in zip(profile.grid, profile.values):
        fh.write(f"{float_str(x)},{float_str(u)}\n")


def export_front_csv(track: FrontTrack, fh: IO[str]) -> None:
    fh.write("t,front\n")
    for t, f in zip(track.times, track.fronts):
        fh.write(f"{float_str(t)},{float_str(f)}\n")
