"""True likelihood and true posterior grids for the toy detector.

The detector response has a closed-form extended likelihood: per module a
Poisson count term, per photon a (shifted) gamma arrival-time density.
Evaluating it on label grids with a flat prior gives the ground-truth
posterior used for contour overlays and for sample-based KL estimates
against trained models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .toymc import (
    REGION_HALF_WIDTH,
    DetectorConfig,
    Event,
    Label,
    mixture_components,
)

_TIME_LOG_FLOOR = -745.0


def log_likelihood(event: Event, label: Label, config: DetectorConfig,
                   nu: float = 1.0) -> float:
    """Extended log-likelihood of one event at a hypothesis label.

    Sum over modules of -lambda_j + k_j ln lambda_j - ln k_j! plus the log
    arrival-time density of every photon.
    """
    if event.n_hits and (event.modules.min() < 0 or event.modules.max() >= config.n_modules):
        raise ValueError("event refers to modules outside the detector")
    total = 0.0
    for j in range(config.n_modules):
        comps = mixture_components(label, j, config, nu)
        lams = np.array([c[0] for c in comps])
        lam = float(lams.sum())
        sel = event.modules == j
        k = int(np.count_nonzero(sel))
        total += -lam + k * math.log(lam) - float(gammaln(k + 1))
        if k:
            ts = np.sort(event.times[sel])  # canonical order: bit-stable sums
            if len(comps) == 1:
                total += float(comps[0][1].log_pdf(ts).sum())
            else:
                log_w = np.log(lams / lam)
                per_comp = np.stack([c[1].log_pdf(ts) for c in comps])
                total += float(logsumexp(per_comp + log_w[:, None], axis=0).sum())
    return total


@dataclass
class GridPosterior:
    """Normalized flat-prior posterior on a rectangular label grid."""

    axes: tuple           # per-dimension 1-d coordinate arrays
    log_density: np.ndarray
    cell_volume: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_density)):
            raise ValueError("grid posterior has non-finite entries")

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def total_mass(self) -> float:
        return float(self.density.sum() * self.cell_volume)

    def interpolate_log_density(self, point: Sequence[float]) -> float:
        """Multilinear interpolation of the log-density at a point."""
        point = np.asarray(point, dtype=np.float64)
        if point.shape != (len(self.axes),):
            raise ValueError("point dimensionality does not match the grid")
        idx0 = []
        frac = []
        for ax, p in zip(self.axes, point):
            i = int(np.clip(np.searchsorted(ax, p) - 1, 0, len(ax) - 2))
            idx0.append(i)
            frac.append((p - ax[i]) / (ax[i + 1] - ax[i]))
        val = 0.0
        ndim = len(self.axes)
        for corner in range(1 << ndim):
            w = 1.0
            sel = []
            for dim in range(ndim):
                hi = (corner >> dim) & 1
                w *= frac[dim] if hi else (1.0 - frac[dim])
                sel.append(idx0[dim] + hi)
            val += w * float(self.log_density[tuple(sel)])
        return val

    def to_csv(self, path) -> None:
        """Axis header lines, then row-major rows of the last axis."""
        write_grid_csv(self.axes, self.log_density, path, self.cell_volume)


def write_grid_csv(axes, values: np.ndarray, path, cell_volume: float) -> None:
    """Shared grid export: axis header lines, then row-major value rows."""
    with open(path, "w") as fh:
        for dim, ax in enumerate(axes):
            fh.write("axis_%d,%s\n" % (dim, ",".join(repr(float(v)) for v in ax)))
        fh.write("cell_volume,%r\n" % cell_volume)
        fh.write("log_density\n")
        flat = values.reshape(-1, values.shape[-1])
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _grid_log_likelihood(event: Event, config: DetectorConfig, xs: np.ndarray,
                         ys: np.ndarray, thetas: Optional[np.ndarray],
                         topology: str = "point",
                         track_length: Optional[float] = None) -> np.ndarray:
    """Vectorized extended log-likelihood over a label grid."""
    if thetas is None:
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        TH = np.zeros_like(X)
    else:
        X, Y, TH = np.meshgrid(xs, ys, thetas, indexing="ij")
    ux, uy = np.cos(TH), np.sin(TH)
    out = np.zeros(X.shape)
    kappa = config.angular_coupling
    if topology == "track":
        n_emit = 20
        step = (track_length or 20.0) / n_emit
        offsets = (np.arange(n_emit) + 0.5) * step
    else:
        offsets = np.zeros(1)
    modules = config.module_array()
    n_cells = X.size
    chunk = max(1, 4_000_000 // max(n_cells, 1))  # bound hit-term temporaries
    for j, (mx, my) in enumerate(modules):
        sel = event.modules == j
        k = int(np.count_nonzero(sel))
        ts = np.sort(event.times[sel])
        lam_parts = []
        gammas = []  # per emitter: (growth, scale, offset) grids
        for off in offsets:
            ex, ey = X + off * ux, Y + off * uy
            dx, dy = mx - ex, my - ey
            d = np.hypot(dx, dy)
            cos_psi = np.where(d > 1e-12, (ux * dx + uy * dy) / np.maximum(d, 1e-12), 1.0)
            lam_e = (config.yield_n0 / len(offsets) * np.exp(-d / config.attenuation_length)
                     * (1.0 + kappa * cos_psi) / (1.0 + kappa))
            lam_parts.append(lam_e)
            if k:
                growth = 1.0 + d / config.timing_shape_scale
                gammas.append((growth, config.timing_width * growth,
                               d / config.propagation_speed))
        lam = np.sum(lam_parts, axis=0)
        out += -lam + k * np.log(lam) - float(gammaln(k + 1))
        if not k:
            continue
        log_w = None
        if len(offsets) > 1:
            log_w = np.log(np.stack(lam_parts)) - np.log(lam)
        for start in range(0, k, chunk):
            tc = ts[start:start + chunk].reshape((-1,) + (1,) * X.ndim)
            per_emitter = []
            for (growth, scale, offset_t) in gammas:
                dt = tc - offset_t
                with np.errstate(divide="ignore", invalid="ignore"):
                    lp = ((growth - 1.0) * np.log(dt) - dt / scale
                          - growth * np.log(scale) - gammaln(growth))
                lp = np.where(dt > 0,
                              np.nan_to_num(lp, nan=-np.inf, neginf=_TIME_LOG_FLOOR),
                              _TIME_LOG_FLOOR + dt / scale)
                per_emitter.append(lp)
            if log_w is None:
                out += per_emitter[0].sum(axis=0)
            else:
                stacked = np.stack(per_emitter)  # (n_emit, chunk) + grid
                out += logsumexp(stacked + log_w[:, None], axis=0).sum(axis=0)
    return out


def posterior_grid(event: Event, config: DetectorConfig, axes: Sequence[np.ndarray],
                   topology: str = "point",
                   track_length: Optional[float] = None) -> GridPosterior:
    """Flat-prior posterior: normalized exp(log-likelihood) over the grid."""
    axes = tuple(np.asarray(a, dtype=np.float64) for a in axes)
    if len(axes) not in (2, 3):
        raise ValueError("grid must have 2 (x, y) or 3 (x, y, theta) axes")
    for ax in axes:
        if ax.size < 2:
            raise ValueError("degenerate grid: every axis needs >= 2 points")
    thetas = axes[2] if len(axes) == 3 else None
    ll = _grid_log_likelihood(event, config, axes[0], axes[1], thetas,
                              topology=topology, track_length=track_length)
    spacings = [float(ax[1] - ax[0]) for ax in axes]
    cell_volume = float(np.prod(spacings))
    log_norm = float(logsumexp(ll)) + math.log(cell_volume)
    return GridPosterior(axes=axes, log_density=ll - log_norm, cell_volume=cell_volume)


def default_axes(n: int = 200, half_width: float = REGION_HALF_WIDTH,
                 n_theta: int = 0):
    """Cell-centred uniform axes covering the generation region."""
    step = 2.0 * half_width / n
    xs = -half_width + step * (np.arange(n) + 0.5)
    axes = [xs, xs.copy()]
    if n_theta:
        t_step = 2.0 * math.pi / n_theta
        axes.append(t_step * (np.arange(n_theta) + 0.5))
    return tuple(axes)


def hpd_contour(grid: GridPosterior, mass: float) -> float:
    """Largest density threshold whose superlevel set carries >= mass."""
    if not (0.0 < mass < 1.0):
        raise ValueError("mass must be in (0, 1)")
    dens = np.sort(grid.density.ravel())[::-1]
    cum = np.cumsum(dens) * grid.cell_volume
    idx = int(np.searchsorted(cum, mass))
    idx = min(idx, dens.size - 1)
    return float(dens[idx])


def sample_kl_to_truth(model_logprob: Callable[[Event, Label], float],
                       events: Sequence[Event], config: DetectorConfig,
                       axes: Optional[Sequence[np.ndarray]] = None) -> float:
    """Mean over events of ln P_true(label; event) - ln q(label; event).

    The true log posterior is interpolated from a flat-prior grid, so this
    matches the model's validation loss up to the (constant) true-posterior
    entropy term.
    """
    if not events:
        raise ValueError("empty event list")
    if axes is None:
        axes = default_axes()
    total = 0.0
    for ev in events:
        if ev.label is None:
            raise ValueError("sample_kl_to_truth needs labeled events")
        grid = posterior_grid(ev, config, axes)
        ln_true = grid.interpolate_log_density((ev.label.x, ev.label.y))
        total += ln_true - model_logprob(ev, ev.label)
    return float(total / len(events))


def true_posterior_loss(events: Sequence[Event], config: DetectorConfig,
                        axes: Optional[Sequence[np.ndarray]] = None) -> float:
    """Mean of -ln P_true(label; event): the loss floor a perfect model attains."""
    if axes is None:
        axes = default_axes()
    total = 0.0
    for ev in events:
        grid = posterior_grid(ev, config, axes)
        total -= grid.interpolate_log_density((ev.label.x, ev.label.y))
    return float(total / len(events))
