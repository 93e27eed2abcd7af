"""Coverage curves and posterior-predictive goodness-of-fit p-values.

Coverage: flowing each true label backwards through the posterior chains
lands on the joint standard-normal base, where -2 log density differences
reduce to the squared norm; under a correct posterior that statistic is
chi-square distributed with the label dimension, so credible levels map to
quantile thresholds exactly, for posteriors of any shape.

Goodness of fit: with a generative part trained alongside the posterior,
each observed event is compared against its own posterior predictive
simulations through the per-photon log-likelihood test quantity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .model import (
    POS_SCALE,
    TIME_SCALE,
    EventBatch,
    ModelBundle,
    _mlp_apply,
    pack_events,
)
from .special import ConvergenceError, chi2_quantile
from .toymc import Event

DEFAULT_LEVELS = np.round(np.arange(0.05, 0.951, 0.05), 4)


@dataclass
class CoverageReport:
    levels: np.ndarray
    actual: np.ndarray
    n_events: int
    binomial_errors: np.ndarray
    n_failed: int = 0

    def __post_init__(self):
        if np.any(np.diff(self.actual) < 0):
            raise ValueError("coverage must be non-decreasing in the level")

    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.actual - self.levels)))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("level,actual,binomial_error,n_events,n_failed\n")
            for lv, ac, be in zip(self.levels, self.actual, self.binomial_errors):
                fh.write(f"{float(lv)!r},{float(ac)!r},{float(be)!r},{self.n_events},{self.n_failed}\n")


@dataclass
class GofReport:
    p_values: np.ndarray
    n_sim: int
    test_quantity_id: str = "per-photon-log-likelihood"

    def __post_init__(self):
        if self.n_sim < 1:
            raise ValueError("n_sim must be >= 1")
        if np.any((self.p_values < 0) | (self.p_values > 1)):
            raise ValueError("p-values must lie in [0, 1]")

    def low_fraction(self, cut: float = 0.05) -> float:
        return float(np.mean(self.p_values < cut))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("event_index,p_value\n")
            for i, p in enumerate(self.p_values):
                fh.write(f"{i},{float(p)!r}\n")


def lambda_base(base_point) -> np.ndarray:
    """-2 (ln p_b(z) - ln p_b(0)) for the standard normal: the squared norm."""
    z = np.asarray(base_point, dtype=np.float64)
    if z.ndim == 1:
        return float(np.sum(z * z))
    return np.sum(z * z, axis=-1)


def coverage_curve(bundle: ModelBundle, events: Sequence[Event],
                   levels: Optional[np.ndarray] = None,
                   invert_chunk: int = 1024) -> CoverageReport:
    """Empirical coverage of the posterior credible regions at each level.

    Events whose inversion does not converge are counted and excluded
    rather than silently binned.
    """
    if levels is None:
        levels = DEFAULT_LEVELS
    levels = np.asarray(levels, dtype=np.float64)
    if not events:
        raise ValueError("empty event list")
    lams = []
    n_failed = 0
    for start in range(0, len(events), invert_chunk):
        chunk = list(events[start:start + invert_chunk])
        try:
            base = bundle.base_points(chunk)
            lams.append(lambda_base(base))
        except (ConvergenceError, FloatingPointError):
            for ev in chunk:
                try:
                    lams.append(np.atleast_1d(lambda_base(bundle.base_points([ev]))))
                except (ConvergenceError, FloatingPointError):
                    n_failed += 1
    lam = np.concatenate(lams) if lams else np.empty(0)
    if lam.size == 0:
        raise ConvergenceError("all label inversions failed")
    dim = bundle.arch.label_dim
    thresholds = np.array([chi2_quantile(dim, lv) for lv in levels])
    actual = np.array([float(np.mean(lam <= t)) for t in thresholds])
    errors = np.sqrt(np.maximum(actual * (1 - actual), 1e-12) / lam.size)
    return CoverageReport(levels=levels, actual=actual, n_events=int(lam.size),
                          binomial_errors=errors, n_failed=n_failed)


def _decoder_batch(counts: np.ndarray, owners: np.ndarray, mods: np.ndarray,
                   times: np.ndarray) -> EventBatch:
    # the decoder only reads counts and the flattened hits
    n = counts.shape[0]
    return EventBatch(feats=np.zeros((n, 0, 3)), mask=np.zeros((n, 0)),
                      counts=counts, hit_owner=owners, hit_module=mods,
                      hit_times=times, n_hits=counts.sum(axis=1).astype(np.intp))


def _score_simulations(bundle: ModelBundle, sims: Sequence[Event],
                       z_rows: np.ndarray) -> np.ndarray:
    """T(x_i, z_i) = ln p(x_i; z_i) / max(N_i, 1) for simulated events."""
    m = bundle.config.n_modules
    counts = np.stack([np.bincount(ev.modules, minlength=m) for ev in sims]).astype(float)
    owners = np.concatenate([np.full(ev.n_hits, i, dtype=np.intp)
                             for i, ev in enumerate(sims)]) if sims else np.empty(0, np.intp)
    mods = np.concatenate([ev.modules for ev in sims])
    times = np.concatenate([ev.times for ev in sims])
    batch = _decoder_batch(counts, owners, mods, times)
    ll = bundle.decoder_log_likelihood(bundle.accessor(), batch, z_rows)
    n_d = np.maximum(counts.sum(axis=1), 1.0)
    return ll / n_d


def _score_observed(bundle: ModelBundle, event: Event, z_rows: np.ndarray) -> np.ndarray:
    """T(x_obs, z_i) for every posterior draw z_i."""
    n = z_rows.shape[0]
    m = bundle.config.n_modules
    counts = np.tile(np.bincount(event.modules, minlength=m).astype(float), (n, 1))
    owners = np.repeat(np.arange(n), event.n_hits)
    mods = np.tile(event.modules, n)
    times = np.tile(event.times, n)
    batch = _decoder_batch(counts, owners, mods, times)
    ll = bundle.decoder_log_likelihood(bundle.accessor(), batch, z_rows)
    return ll / max(event.n_hits, 1)


def posterior_draws(bundle: ModelBundle, event: Event, n: int,
                    rng: np.random.Generator) -> np.ndarray:
    """n posterior label draws for one event (position, plus angle if present)."""
    P = bundle.accessor()
    batch = pack_events([event], bundle.config)
    h = bundle.encode(P, batch)
    fp = bundle._pos_flow_params(P, h)
    pos, _ = bundle.pos_chain.sample(fp, rng, n)
    if bundle.dir_chain is None:
        return pos
    h_rep = np.repeat(h, n, axis=0)
    fdir = bundle._dir_flow_params(P, h_rep, pos)
    eps = rng.standard_normal((n, 1))
    theta, _ = bundle.dir_chain.sample_from_eps(fdir, eps)
    return np.concatenate([pos, theta], axis=1)


def _gen_draws(bundle: ModelBundle, event: Event, n_sim: int,
               rng: np.random.Generator) -> np.ndarray:
    """Posterior (and latent) draws in the generative z space."""
    z = posterior_draws(bundle, event, n_sim, rng)
    if bundle.lat_chain is not None:
        P = bundle.accessor()
        batch = pack_events([event], bundle.config)
        h = np.repeat(bundle.encode(P, batch), n_sim, axis=0)
        fl = bundle.latent_flow_params(P, h, z[:, :bundle.arch.posterior.dim])
        z_u, _ = bundle.lat_chain.sample_from_eps(fl, rng.standard_normal(
            (n_sim, bundle.arch.latent.dim)))
        return np.concatenate([z[:, :bundle.arch.posterior.dim], z_u], axis=1)
    if bundle.dir_chain is not None:
        return z[:, :bundle.arch.posterior.dim]
    return z


def gof_pvalue(bundle: ModelBundle, event: Event, n_sim: int,
               rng: np.random.Generator) -> float:
    """Posterior-predictive p-value of one event.

    Draws z_i from the posterior given the observed event and x_i from the
    decoder given z_i; returns the fraction of simulations whose test
    quantity the observation beats, T(x_i, z_i) < T(x_obs, z_i) with T the
    per-photon log-likelihood. Observations the model cannot describe score
    below all simulations and land near p = 0; ties count strictly against
    that tail. Zero-hit simulations enter with N_d = 1, i.e.
    T = -sum_j lambda_j.

    The decoder's per-(draw, module) yields and time-flow parameters are
    computed once and reused for simulation, simulated scores and observed
    scores.
    """
    if n_sim < 1:
        raise ValueError("n_sim must be >= 1")
    if bundle.arch.generative is None:
        raise ValueError("goodness-of-fit needs a generative part")
    z_gen = _gen_draws(bundle, event, n_sim, rng)
    m = bundle.config.n_modules
    P = bundle.accessor()
    modules = bundle.config.module_array() / POS_SCALE
    z_rep = np.repeat(z_gen, m, axis=0)
    mod_rep = np.tile(modules, (n_sim, 1))
    log_lam = np.asarray(bundle.decoder_log_yield(P, z_rep, mod_rep)).reshape(n_sim, m)
    lam = np.exp(log_lam)
    ft = _mlp_apply(P, "dec.time", bundle._decoder_inputs(z_rep, mod_rep)).reshape(n_sim, m, -1)

    # simulate counts and times
    ks = rng.poisson(lam)
    per_sim = ks.sum(axis=1)
    sim_owner = np.repeat(np.arange(n_sim), per_sim)
    sim_mod = np.repeat(np.tile(np.arange(m), n_sim), ks.ravel())
    u_sim = bundle.sample_times_scaled(ft[sim_owner, sim_mod], rng)

    log_time_const = math.log(TIME_SCALE)
    count_sim = (ks * log_lam - lam).sum(axis=1) - gammaln(ks + 1.0).sum(axis=1)
    time_sim = np.zeros(n_sim)
    if u_sim.size:
        lp = bundle.time_flow.log_prob(ft[sim_owner, sim_mod], u_sim.reshape(-1, 1))
        np.add.at(time_sim, sim_owner, lp - log_time_const)
    t_sim = (count_sim + time_sim) / np.maximum(per_sim, 1)

    k_obs = np.bincount(event.modules, minlength=m).astype(np.float64)
    count_obs = (k_obs * log_lam - lam).sum(axis=1) - float(gammaln(k_obs + 1.0).sum())
    obs_owner = np.repeat(np.arange(n_sim), event.n_hits)
    obs_mod = np.tile(event.modules, n_sim)
    u_obs = np.tile(event.times, n_sim) / TIME_SCALE
    lp_obs = bundle.time_flow.log_prob(ft[obs_owner, obs_mod], u_obs.reshape(-1, 1))
    time_obs = np.zeros(n_sim)
    np.add.at(time_obs, obs_owner, lp_obs - log_time_const)
    t_obs = (count_obs + time_obs) / max(event.n_hits, 1)
    return float(np.mean(t_sim < t_obs))


def run_gof(bundle: ModelBundle, events: Sequence[Event], n_sim: int,
            seed: int, threads: int = 1) -> GofReport:
    """Per-event p-values with independent substreams per (seed, index).

    The substreams make the report identical for any thread count.
    """
    if not events:
        raise ValueError("empty event list")

    def one(i: int) -> float:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, i))))
        return gof_pvalue(bundle, events[i], n_sim, rng)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            ps = np.array(list(pool.map(one, range(len(events)))))
    else:
        ps = np.array([one(i) for i in range(len(events))])
    return GofReport(p_values=ps, n_sim=n_sim)


def pvalue_histograms(reports: dict, n_bins: int = 20) -> dict:
    """Shared-binning histogram counts per dataset name."""
    if not reports:
        raise ValueError("no reports given")
    for name, rep in reports.items():
        if rep.p_values.size == 0:
            raise ValueError(f"empty p-value set for {name!r}")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return {
        "edges": edges,
        "counts": {name: np.histogram(rep.p_values, bins=edges)[0]
                   for name, rep in reports.items()},
    }


def write_histogram_csv(hist: dict, path) -> None:
    names = list(hist["counts"])
    edges = hist["edges"]
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi," + ",".join(names) + "\n")
        for i in range(len(edges) - 1):
            row = [repr(float(edges[i])), repr(float(edges[i + 1]))]
            row += [str(int(hist["counts"][n][i])) for n in names]
            fh.write(",".join(row) + "\n")


# -- minimal SVG rendering (optional output; tests never depend on it) ----------

def _svg_header(w, h):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}">\n<rect width="100%" height="100%" fill="white"/>\n')


def coverage_svg(report: CoverageReport, path) -> None:
    w = h = 360
    pad = 40

    def sx(v):
        return pad + v * (w - 2 * pad)

    def sy(v):
        return h - pad - v * (h - 2 * pad)

    parts = [_svg_header(w, h)]
    parts.append(f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" '
                 'stroke="#999" stroke-dasharray="4 3"/>\n')
    pts = " ".join(f"{sx(l):.1f},{sy(a):.1f}" for l, a in zip(report.levels, report.actual))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="2"/>\n')
    parts.append(f'<text x="{w / 2 - 60}" y="{h - 8}" font-size="12">expected coverage</text>\n')
    parts.append(f'<text x="10" y="{h / 2}" font-size="12" transform="rotate(-90 12 {h / 2})">'
                 'actual coverage</text>\n</svg>\n')
    with open(path, "w") as fh:
        fh.write("".join(parts))


def pvalue_hist_svg(hist: dict, path) -> None:
    w, h, pad = 420, 300, 40
    names = list(hist["counts"])
    palette = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad"]
    max_count = max(int(c.max()) for c in hist["counts"].values()) or 1
    edges = hist["edges"]
    parts = [_svg_header(w, h)]
    for ci, name in enumerate(names):
        color = palette[ci % len(palette)]
        counts = hist["counts"][name]
        pts = []
        for i, c in enumerate(counts):
            x0 = pad + edges[i] * (w - 2 * pad)
            x1 = pad + edges[i + 1] * (w - 2 * pad)
            y = h - pad - (c / max_count) * (h - 2 * pad)
            pts.append(f"{x0:.1f},{y:.1f} {x1:.1f},{y:.1f}")
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>\n')
        parts.append(f'<text x="{pad}" y="{15 + 14 * ci}" font-size="12" '
                     f'fill="{color}">{name}</text>\n')
    parts.append(f'<text x="{w / 2 - 20}" y="{h - 8}" font-size="12">p-value</text>\n</svg>\n')
    with open(path, "w") as fh:
        fh.write("".join(parts))
