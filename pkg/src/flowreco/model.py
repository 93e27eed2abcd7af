"""Conditional model: sequence encoder, flow posteriors, generative decoder.

A bundle owns a single flat parameter vector shared by up to five parts:

  * encoder      GRU over time-ordered photon features + aggregation MLP
  * posterior    conditional flow over the observed labels (or over the
                 latent code in autoencoder mode)
  * direction    optional conditional circle flow over an emission angle,
                 conditioned on the position (factorized posterior)
  * latent       optional conditional flow over extra latent variables
  * generative   directly-parametrized prior flow plus a decoder made of a
                 per-module log-yield MLP and a conditional arrival-time flow

All math goes through :mod:`flowreco.autodiff` helpers, so each method runs
on a recording tape (training) or on plain arrays (evaluation) depending on
the accessor/tape passed in.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import LayoutBuilder, NumpyParams, ParamVector
from .flows import AffineBlock, CircleFlatBlock, FlowChain, GaussianizationBlock, MoebiusBlock
from .toymc import DetectorConfig, Event, Label, SchemaError

MODEL_FORMAT_VERSION = 1
POS_SCALE = 15.0    # m, fixed feature standardization
TIME_SCALE = 100.0  # ns
_LOG_LAM_MIN = math.log(1e-8)
_LOG_LAM_MAX = 8.0


@dataclass(frozen=True)
class EncoderArch:
    gru_hidden: int = 10
    agg_hidden: int = 15
    h_dim: int = 20


@dataclass(frozen=True)
class PosteriorArch:
    kind: str = "gf"          # gf | affine | mse
    dim: int = 2
    layers: int = 5
    kernels: int = 5
    mlp_width: int = 50


@dataclass(frozen=True)
class DirectionArch:
    blocks: int = 1
    kernels: int = 8
    mlp_width: int = 50


@dataclass(frozen=True)
class LatentArch:
    dim: int = 2
    kind: str = "affine"
    layers: int = 1
    kernels: int = 3
    mlp_width: int = 50


@dataclass(frozen=True)
class GenerativeArch:
    prior_layers: int = 2
    prior_kernels: int = 3
    dec_width: int = 100
    time_layers: int = 1
    time_kernels: int = 5


@dataclass(frozen=True)
class BundleArch:
    encoder: EncoderArch = field(default_factory=EncoderArch)
    posterior: PosteriorArch = field(default_factory=PosteriorArch)
    direction: Optional[DirectionArch] = None
    latent: Optional[LatentArch] = None
    generative: Optional[GenerativeArch] = None

    @property
    def label_dim(self) -> int:
        return self.posterior.dim + (1 if self.direction is not None else 0)

    @property
    def gen_z_dim(self) -> int:
        return self.posterior.dim + (self.latent.dim if self.latent is not None else 0)

    def to_dict(self) -> dict:
        return {
            "encoder": asdict(self.encoder),
            "posterior": asdict(self.posterior),
            "direction": None if self.direction is None else asdict(self.direction),
            "latent": None if self.latent is None else asdict(self.latent),
            "generative": None if self.generative is None else asdict(self.generative),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BundleArch":
        return cls(
            encoder=EncoderArch(**d["encoder"]),
            posterior=PosteriorArch(**d["posterior"]),
            direction=None if d["direction"] is None else DirectionArch(**d["direction"]),
            latent=None if d["latent"] is None else LatentArch(**d["latent"]),
            generative=None if d["generative"] is None else GenerativeArch(**d["generative"]),
        )


def posterior_chain(arch: PosteriorArch) -> FlowChain:
    if arch.kind == "mse":
        return FlowChain([AffineBlock(arch.dim, fixed_sigma=True)])
    if arch.kind == "affine":
        return FlowChain([AffineBlock(arch.dim)])
    if arch.kind == "gf":
        blocks = [GaussianizationBlock(arch.dim, arch.kernels) for _ in range(arch.layers)]
        blocks.append(AffineBlock(arch.dim))
        return FlowChain(blocks)
    raise ValueError(f"unknown posterior kind {arch.kind!r}")


def direction_chain(arch: DirectionArch) -> FlowChain:
    blocks = [CircleFlatBlock()]
    blocks.extend(MoebiusBlock(arch.kernels) for _ in range(arch.blocks))
    return FlowChain(blocks)


def latent_chain(arch: LatentArch) -> FlowChain:
    return posterior_chain(PosteriorArch(kind=arch.kind, dim=arch.dim,
                                         layers=arch.layers, kernels=arch.kernels))


def prior_chain(arch: BundleArch) -> FlowChain:
    g = arch.generative
    blocks = [GaussianizationBlock(arch.gen_z_dim, g.prior_kernels)
              for _ in range(g.prior_layers)]
    blocks.append(AffineBlock(arch.gen_z_dim))
    return FlowChain(blocks)


def time_chain(arch: GenerativeArch) -> FlowChain:
    blocks = [GaussianizationBlock(1, arch.time_kernels) for _ in range(arch.time_layers)]
    blocks.append(AffineBlock(1))
    return FlowChain(blocks)


# -- batches -------------------------------------------------------------------

@dataclass
class EventBatch:
    """Padded, standardized hit sequences plus per-module count summaries."""

    feats: np.ndarray      # (B, T, 3): module x / 15, module y / 15, t / 100
    mask: np.ndarray       # (B, T) 1.0 where a hit exists
    counts: np.ndarray     # (B, M) photon counts per module
    hit_owner: np.ndarray  # (H,) flattened hit -> event row
    hit_module: np.ndarray  # (H,) flattened hit -> module index
    hit_times: np.ndarray  # (H,) raw times, event-major in canonical order
    n_hits: np.ndarray     # (B,)

    @property
    def size(self) -> int:
        return self.feats.shape[0]


def pack_events(events: Sequence[Event], config: DetectorConfig) -> EventBatch:
    if not events:
        raise ValueError("cannot pack an empty event batch")
    modules = config.module_array()
    b = len(events)
    n_hits = np.array([ev.n_hits for ev in events], dtype=np.intp)
    if np.any(n_hits == 0):
        raise ValueError("events must contain at least one hit")
    t_max = int(n_hits.max())
    feats = np.zeros((b, t_max, 3))
    mask = np.zeros((b, t_max))
    counts = np.zeros((b, config.n_modules))
    owners, mods, times = [], [], []
    for i, ev in enumerate(events):
        order = np.lexsort((ev.modules, ev.times))  # canonical: time, then module
        m = ev.modules[order]
        t = ev.times[order]
        feats[i, :m.size, 0] = modules[m, 0] / POS_SCALE
        feats[i, :m.size, 1] = modules[m, 1] / POS_SCALE
        feats[i, :m.size, 2] = t / TIME_SCALE
        mask[i, :m.size] = 1.0
        counts[i] = np.bincount(m, minlength=config.n_modules)
        owners.append(np.full(m.size, i, dtype=np.intp))
        mods.append(m)
        times.append(t)
    return EventBatch(feats=feats, mask=mask, counts=counts,
                      hit_owner=np.concatenate(owners),
                      hit_module=np.concatenate(mods),
                      hit_times=np.concatenate(times), n_hits=n_hits)


def labels_array(events: Sequence[Event], with_direction: bool) -> np.ndarray:
    rows = []
    for ev in events:
        if ev.label is None:
            raise ValueError("event without a truth label")
        row = [ev.label.x, ev.label.y]
        if with_direction:
            if ev.label.direction is None:
                raise ValueError("event label carries no direction")
            row.append(ev.label.direction)
        rows.append(row)
    return np.asarray(rows, dtype=np.float64)


# -- parameter initialization ---------------------------------------------------

def _add_mlp(lb: LayoutBuilder, prefix: str, n_in: int, width: int, n_out: int,
             n_hidden: int = 2) -> None:
    d = n_in
    for i in range(n_hidden):
        lb.add(f"{prefix}.w{i}", d, width)
        lb.add(f"{prefix}.b{i}", width)
        d = width
    lb.add(f"{prefix}.wout", d, n_out)
    lb.add(f"{prefix}.bout", n_out)


def _init_mlp(pv: ParamVector, rng, prefix: str, n_hidden: int = 2,
              out_scale: float = 0.05, bias_presets: Optional[dict] = None) -> None:
    for i in range(n_hidden):
        w = pv.view(f"{prefix}.w{i}")
        w[...] = rng.standard_normal(w.shape) / math.sqrt(w.shape[0])
    wout = pv.view(f"{prefix}.wout")
    wout[...] = out_scale * rng.standard_normal(wout.shape) / math.sqrt(wout.shape[0])
    if bias_presets:
        bout = pv.view(f"{prefix}.bout")
        for idx, val in bias_presets.items():
            bout[idx] = val


def _mlp_apply(P, prefix: str, x, n_hidden: int = 2):
    h = x
    for i in range(n_hidden):
        h = ad.tanh(h @ P(f"{prefix}.w{i}") + P(f"{prefix}.b{i}"))
    return h @ P(f"{prefix}.wout") + P(f"{prefix}.bout")


def _trailing_affine_presets(chain: FlowChain, log_sigma: float,
                             mu: Optional[np.ndarray] = None) -> dict:
    presets = {}
    for block, a, b in chain.param_slices():
        if isinstance(block, AffineBlock):
            if mu is not None:
                for i, v in enumerate(mu):
                    presets[a + i] = float(v)
            if not block.fixed_sigma:
                presets[b - 1] = log_sigma
    return presets


# -- the bundle -----------------------------------------------------------------

class ModelBundle:
    """Architecture plus one flat parameter vector for all parts."""

    def __init__(self, arch: BundleArch, params: ParamVector,
                 config: DetectorConfig):
        self.arch = arch
        self.params = params
        self.config = config
        self.pos_chain = posterior_chain(arch.posterior)
        self.dir_chain = direction_chain(arch.direction) if arch.direction else None
        self.lat_chain = latent_chain(arch.latent) if arch.latent else None
        if arch.generative:
            self.prior_flow = prior_chain(arch)
            self.time_flow = time_chain(arch.generative)
        else:
            self.prior_flow = None
            self.time_flow = None

    # -- construction ----------------------------------------------------------

    @classmethod
    def layout(cls, arch: BundleArch, config: DetectorConfig) -> dict:
        lb = LayoutBuilder()
        enc = arch.encoder
        for gate in ("r", "z", "n"):
            lb.add(f"enc.gru.wx{gate}", 3, enc.gru_hidden)
            lb.add(f"enc.gru.uh{gate}", enc.gru_hidden, enc.gru_hidden)
            lb.add(f"enc.gru.b{gate}", enc.gru_hidden)
        lb.add("enc.agg.w0", enc.gru_hidden, enc.agg_hidden)
        lb.add("enc.agg.b0", enc.agg_hidden)
        lb.add("enc.agg.wout", enc.agg_hidden, enc.h_dim)
        lb.add("enc.agg.bout", enc.h_dim)
        pos = posterior_chain(arch.posterior)
        _add_mlp(lb, "post.pos", enc.h_dim, arch.posterior.mlp_width, pos.param_count)
        if arch.direction is not None:
            dchain = direction_chain(arch.direction)
            _add_mlp(lb, "post.dir", enc.h_dim + arch.posterior.dim,
                     arch.direction.mlp_width, dchain.param_count)
        if arch.latent is not None:
            lchain = latent_chain(arch.latent)
            _add_mlp(lb, "latq", enc.h_dim + arch.posterior.dim,
                     arch.latent.mlp_width, lchain.param_count)
        if arch.generative is not None:
            lb.add("prior.flow", prior_chain(arch).param_count)
            _add_mlp(lb, "dec.yield", arch.gen_z_dim + 2, arch.generative.dec_width, 1)
            _add_mlp(lb, "dec.time", arch.gen_z_dim + 2, arch.generative.dec_width,
                     time_chain(arch.generative).param_count)
        return lb.build()

    @classmethod
    def build(cls, arch: BundleArch, config: DetectorConfig, seed: int) -> "ModelBundle":
        layout = cls.layout(arch, config)
        pv = ParamVector.zeros(layout)
        rng = np.random.default_rng(seed)
        enc = arch.encoder
        for gate in ("r", "z", "n"):
            wx = pv.view(f"enc.gru.wx{gate}")
            wx[...] = rng.standard_normal(wx.shape) / math.sqrt(3.0)
            uh = pv.view(f"enc.gru.uh{gate}")
            uh[...] = rng.standard_normal(uh.shape) / math.sqrt(enc.gru_hidden)
        for name, fan in (("enc.agg.w0", enc.gru_hidden), ("enc.agg.wout", enc.agg_hidden)):
            w = pv.view(name)
            w[...] = rng.standard_normal(w.shape) / math.sqrt(fan)
        bundle = cls(arch, pv, config)
        _init_mlp(pv, rng, "post.pos",
                  bias_presets=_trailing_affine_presets(bundle.pos_chain, math.log(8.0)))
        if bundle.dir_chain is not None:
            _init_mlp(pv, rng, "post.dir")
        if bundle.lat_chain is not None:
            _init_mlp(pv, rng, "latq",
                      bias_presets=_trailing_affine_presets(bundle.lat_chain, 0.0))
        if arch.generative is not None:
            prior = pv.view("prior.flow")
            prior[...] = 0.05 * rng.standard_normal(prior.shape)
            for idx, val in _trailing_affine_presets(bundle.prior_flow, math.log(8.0)).items():
                prior[idx] = val
            _init_mlp(pv, rng, "dec.yield", bias_presets={0: math.log(3.0)})
            time_presets = _trailing_affine_presets(
                bundle.time_flow, 0.0, mu=np.array([1.0]))
            _init_mlp(pv, rng, "dec.time", bias_presets=time_presets)
        return bundle

    def accessor(self):
        return NumpyParams(self.params)

    # -- encoder ----------------------------------------------------------------

    def encode(self, P, batch: EventBatch, tape=None):
        """GRU over the hit sequence, aggregated to the hidden summary h."""
        lift = tape.constant if tape is not None else (lambda a: a)
        b, t_max, _ = batch.feats.shape
        # input-side projections for all steps at once
        flat = lift(batch.feats.reshape(b * t_max, 3))
        gx = {g: flat @ P(f"enc.gru.wx{g}") + P(f"enc.gru.b{g}") for g in "rzn"}
        h = lift(np.zeros((b, self.arch.encoder.gru_hidden)))
        row0 = np.arange(b) * t_max
        for t in range(t_max):
            m_t = batch.mask[:, t:t + 1]
            if float(m_t.sum()) == 0.0:
                break
            rows = row0 + t
            r = ad.sigmoid(ad.gather(gx["r"], rows, axis=0) + h @ P("enc.gru.uhr"))
            z = ad.sigmoid(ad.gather(gx["z"], rows, axis=0) + h @ P("enc.gru.uhz"))
            n = ad.tanh(ad.gather(gx["n"], rows, axis=0) + (r * h) @ P("enc.gru.uhn"))
            h_new = (1.0 - z) * n + z * h
            # padded rows (mask 0) keep h bit-exactly
            h = h + lift(m_t) * (h_new - h)
        hidden = ad.tanh(h @ P("enc.agg.w0") + P("enc.agg.b0"))
        return hidden @ P("enc.agg.wout") + P("enc.agg.bout")

    # -- posterior ---------------------------------------------------------------

    def _pos_flow_params(self, P, h):
        return _mlp_apply(P, "post.pos", h)

    def _dir_flow_params(self, P, h, pos):
        inp = ad.concat([h, pos * (1.0 / POS_SCALE)], axis=1)
        return _mlp_apply(P, "post.dir", inp)

    def posterior_log_prob(self, P, batch: EventBatch, labels: np.ndarray, tape=None):
        """ln q(labels; events); factorized position x direction if present."""
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape[1] != self.arch.label_dim:
            raise ValueError("label dimensionality does not match the model")
        lift = tape.constant if tape is not None else (lambda a: a)
        h = self.encode(P, batch, tape)
        d = self.arch.posterior.dim
        lp = self.pos_chain.log_prob(self._pos_flow_params(P, h), lift(labels[:, :d]))
        if self.dir_chain is not None:
            fdir = self._dir_flow_params(P, h, lift(labels[:, :d]))
            lp = lp + self.dir_chain.log_prob(fdir, lift(labels[:, d:d + 1]))
        return lp

    def posterior_sample(self, P, batch: EventBatch, eps: np.ndarray, tape=None,
                         h=None):
        """Reparametrized labels from base draws; also returns (base, log q)."""
        if eps.shape[0] != batch.size or eps.shape[1] != self.arch.label_dim:
            raise ValueError("base draws must be (batch, label_dim)")
        lift = tape.constant if tape is not None else (lambda a: a)
        if h is None:
            h = self.encode(P, batch, tape)
        d = self.arch.posterior.dim
        pos, lp = self.pos_chain.sample_from_eps(self._pos_flow_params(P, h),
                                                 lift(eps[:, :d]))
        if self.dir_chain is None:
            return pos, eps, lp
        fdir = self._dir_flow_params(P, h, pos)
        theta, lp_dir = self.dir_chain.sample_from_eps(fdir, lift(eps[:, d:d + 1]))
        return ad.concat([pos, theta], axis=1), eps, lp + lp_dir

    def base_points(self, events: Sequence[Event]) -> np.ndarray:
        """Inverse-flow images of the true labels at the joint normal base."""
        P = self.accessor()
        batch = pack_events(events, self.config)
        labels = labels_array(events, self.dir_chain is not None)
        h = self.encode(P, batch)
        d = self.arch.posterior.dim
        z_pos, _ = self.pos_chain.inverse(self._pos_flow_params(P, h), labels[:, :d])
        if self.dir_chain is None:
            return z_pos
        fdir = self._dir_flow_params(P, h, labels[:, :d])
        z_dir, _ = self.dir_chain.inverse(fdir, labels[:, d:d + 1])
        return np.concatenate([z_pos, z_dir], axis=1)

    def position_log_prob_scan(self, event: Event, pts: np.ndarray) -> np.ndarray:
        """ln q(position; event) on an arbitrary set of positions."""
        P = self.accessor()
        batch = pack_events([event], self.config)
        h = self.encode(P, batch)
        fp = self._pos_flow_params(P, h)
        return self.pos_chain.log_prob(fp, np.asarray(pts, dtype=np.float64))

    def log_prob_event(self, event: Event, label: Label) -> float:
        """Convenience scalar ln q(label; event) on the numpy path."""
        batch = pack_events([event], self.config)
        row = [label.x, label.y]
        if self.dir_chain is not None:
            row.append(label.direction)
        lp = self.posterior_log_prob(self.accessor(), batch,
                                     np.asarray([row]))
        return float(lp[0])

    # -- latent posterior ---------------------------------------------------------

    def latent_flow_params(self, P, h, z_o):
        inp = ad.concat([h, z_o * (1.0 / POS_SCALE)], axis=1)
        return _mlp_apply(P, "latq", inp)

    # -- generative model -----------------------------------------------------------

    def prior_log_prob(self, P, z, tape=None):
        fp = ad.reshape(P("prior.flow"), (1, -1))
        return self.prior_flow.log_prob(fp, z)

    def _decoder_inputs(self, z, module_xy_scaled):
        return ad.concat([z * (1.0 / POS_SCALE), module_xy_scaled], axis=1)

    def decoder_log_yield(self, P, z, module_xy_scaled):
        raw = _mlp_apply(P, "dec.yield", self._decoder_inputs(z, module_xy_scaled))
        return ad.clip(raw, _LOG_LAM_MIN, _LOG_LAM_MAX)

    def decoder_log_likelihood(self, P, batch: EventBatch, z, tape=None):
        """Poisson-process log-likelihood of each event given its z row."""
        lift = tape.constant if tape is not None else (lambda a: a)
        b = batch.size
        m = self.config.n_modules
        modules = self.config.module_array() / POS_SCALE
        # per-module expected counts
        z_rows = ad.gather(z, np.repeat(np.arange(b), m), axis=0)
        mod_rows = lift(np.tile(modules, (b, 1)))
        log_lam = ad.reshape(self.decoder_log_yield(P, z_rows, mod_rows), (b, m))
        lam = ad.exp(log_lam)
        counts = batch.counts
        count_term = ad.asum(counts * log_lam - lam, axis=1) - gammaln(counts + 1.0).sum(axis=1)
        if batch.hit_times.size == 0:
            return count_term
        # per-photon arrival densities under the conditional time flow
        zh = ad.gather(z, batch.hit_owner, axis=0)
        mod_h = lift(modules[batch.hit_module])
        ft = _mlp_apply(P, "dec.time", self._decoder_inputs(zh, mod_h))
        u = lift(batch.hit_times.reshape(-1, 1) / TIME_SCALE)
        lp_u = self.time_flow.log_prob(ft, u) - math.log(TIME_SCALE)
        time_term = ad.segment_sum(lp_u, batch.hit_owner, b)
        return count_term + time_term

    def _time_mixture_fast_path(self) -> bool:
        blocks = self.time_flow.blocks
        return (len(blocks) == 2
                and isinstance(blocks[0], GaussianizationBlock) and blocks[0].dim == 1
                and isinstance(blocks[1], AffineBlock) and not blocks[1].fixed_sigma)

    def sample_times_scaled(self, ft_rows: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
        """One scaled arrival time per conditioning row of the time flow.

        A single kernel layer plus an affine rescaling admits exact
        inverse-CDF sampling of the kernel mixture (identical in law to
        transforming a Gaussian draw, without the bisection); other chain
        shapes fall back to the generic transform.
        """
        n = ft_rows.shape[0]
        if n == 0:
            return np.empty(0)
        if self._time_mixture_fast_path():
            gf, aff = self.time_flow.blocks
            w, mu, s = (np.asarray(v) for v in gf._kernel_params(ft_rows[:, :gf.param_count]))
            w, mu, s = w[:, 0, :], mu[:, 0, :], s[:, 0, :]
            cum = np.cumsum(w, axis=1)
            comp = np.minimum((rng.random((n, 1)) > cum).sum(axis=1), w.shape[1] - 1)
            rows = np.arange(n)
            p = rng.random(n)
            x = mu[rows, comp] + s[rows, comp] * (np.log(p) - np.log1p(-p))
            ap = ft_rows[:, gf.param_count:]
            return ap[:, 0] + np.exp(ap[:, 1]) * x
        eps = rng.standard_normal((n, 1))
        u, _ = self.time_flow.sample_from_eps(ft_rows, eps)
        return u[:, 0]

    def time_flow_params(self, z_rows: np.ndarray) -> np.ndarray:
        """Conditional time-flow parameters per (z, module) row; (n, M, P)."""
        P = self.accessor()
        n = z_rows.shape[0]
        m = self.config.n_modules
        modules = self.config.module_array() / POS_SCALE
        inp = self._decoder_inputs(np.repeat(z_rows, m, axis=0), np.tile(modules, (n, 1)))
        ft = _mlp_apply(P, "dec.time", inp)
        return ft.reshape(n, m, -1)

    def decoder_sample_many(self, z_rows: np.ndarray,
                            rng: np.random.Generator) -> list:
        """Independent decoder draws for each z row, vectorized across draws.

        Poisson counts per module, then one batched pass through the
        conditional time flow for every photon. No trigger is applied.
        """
        P = self.accessor()
        z_rows = np.atleast_2d(np.asarray(z_rows, dtype=np.float64))
        n = z_rows.shape[0]
        m = self.config.n_modules
        modules = self.config.module_array() / POS_SCALE
        z_rep = np.repeat(z_rows, m, axis=0)
        mod_rep = np.tile(modules, (n, 1))
        lam = np.exp(self.decoder_log_yield(P, z_rep, mod_rep)).reshape(n, m)
        ks = rng.poisson(lam)
        per_draw = ks.sum(axis=1)
        total = int(per_draw.sum())
        if total == 0:
            empty = Event(modules=np.empty(0, dtype=np.int64), times=np.empty(0))
            return [empty for _ in range(n)]
        owner = np.repeat(np.arange(n), per_draw)
        mod_idx = np.repeat(np.tile(np.arange(m), n), ks.ravel())
        ft = _mlp_apply(P, "dec.time", self._decoder_inputs(
            z_rows[owner], modules[mod_idx]))
        times = self.sample_times_scaled(ft, rng) * TIME_SCALE
        events = []
        start = 0
        for i in range(n):
            stop = start + int(per_draw[i])
            mi, ti = mod_idx[start:stop], times[start:stop]
            order = np.lexsort((mi, ti))
            events.append(Event(modules=mi[order].astype(np.int64), times=ti[order]))
            start = stop
        return events

    def decoder_sample(self, z_row: np.ndarray, rng: np.random.Generator) -> Event:
        """One decoder draw: Poisson counts, then flow-sampled times. No trigger."""
        return self.decoder_sample_many(np.asarray(z_row).reshape(1, -1), rng)[0]

    def expected_lambdas(self, z_row: np.ndarray) -> np.ndarray:
        P = self.accessor()
        m = self.config.n_modules
        modules = self.config.module_array() / POS_SCALE
        z_rep = np.tile(np.asarray(z_row, dtype=np.float64).reshape(1, -1), (m, 1))
        return np.exp(self.decoder_log_yield(P, z_rep, modules)).ravel()

    # -- persistence -----------------------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "flow-model-bundle",
            "architecture": self.arch.to_dict(),
            "detector": {
                "module_positions": [list(p) for p in self.config.module_positions],
                "trigger_threshold": self.config.trigger_threshold,
                "yield_n0": self.config.yield_n0,
                "attenuation_length": self.config.attenuation_length,
                "angular_coupling": self.config.angular_coupling,
                "timing_shape_scale": self.config.timing_shape_scale,
                "timing_width": self.config.timing_width,
                "propagation_speed": self.config.propagation_speed,
                "systematics": None,
            },
            "layout": [[name, off, list(shape)]
                       for name, (off, shape) in self.params.layout.items()],
            "values": self.params.values.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        from .toymc import _config_from_dict
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid model file {path}: {exc}") from exc
        if doc.get("kind") != "flow-model-bundle":
            raise SchemaError(f"{path} is not a model bundle")
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise SchemaError(f"unsupported model format version in {path}")
        arch = BundleArch.from_dict(doc["architecture"])
        layout = {name: (off, tuple(shape)) for name, off, shape in doc["layout"]}
        pv = ParamVector(np.asarray(doc["values"], dtype=np.float64), layout)
        config = _config_from_dict(doc["detector"])
        return cls(arch, pv, config)


class TruePhysicsDecoder:
    """Decoder with yields and arrival laws frozen to the detector's truth.

    Uses the same likelihood assembly as the trainable decoder (per-module
    count terms plus segment-summed per-photon time terms over a packed
    batch), with the physics evaluated in closed form instead of networks.
    Point-like hypothesis labels only; serves as a cross-check harness
    against independent likelihood implementations.
    """

    def __init__(self, config: DetectorConfig):
        self.config = config

    def _lambdas(self, labels: np.ndarray, nu: float) -> np.ndarray:
        cfg = self.config
        modules = cfg.module_array()
        dx = modules[None, :, 0] - labels[:, None, 0]
        dy = modules[None, :, 1] - labels[:, None, 1]
        d = np.hypot(dx, dy)
        cos_psi = np.where(d > 1e-12, dx / np.maximum(d, 1e-12), 1.0)  # +x emission
        kappa = cfg.angular_coupling
        return (nu * cfg.yield_n0 * np.exp(-d / cfg.attenuation_length)
                * (1.0 + kappa * cos_psi) / (1.0 + kappa))

    def log_likelihood(self, batch: EventBatch, labels: np.ndarray,
                       nu: float = 1.0) -> np.ndarray:
        cfg = self.config
        b = batch.counts.shape[0]
        lam = self._lambdas(labels, nu)
        count_term = ((batch.counts * np.log(lam) - lam).sum(axis=1)
                      - gammaln(batch.counts + 1.0).sum(axis=1))
        if batch.hit_times.size == 0:
            return count_term
        modules = cfg.module_array()
        hit_pos = labels[batch.hit_owner]
        delta = modules[batch.hit_module] - hit_pos
        d = np.hypot(delta[:, 0], delta[:, 1])
        growth = 1.0 + d / cfg.timing_shape_scale
        scale = cfg.timing_width * growth
        dt = batch.hit_times - d / cfg.propagation_speed
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = ((growth - 1.0) * np.log(dt) - dt / scale
                  - growth * np.log(scale) - gammaln(growth))
        lp = np.where(dt > 0, np.nan_to_num(lp, nan=-np.inf, neginf=-745.0),
                      -745.0 + dt / scale)
        time_term = np.zeros(b)
        np.add.at(time_term, batch.hit_owner, lp)
        return count_term + time_term
