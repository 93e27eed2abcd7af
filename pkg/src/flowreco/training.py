"""Loss functions and the training loop.

Four objectives over the model bundle:

  * supervised            mean of -ln q(label; event) over labeled events
  * elbo                  autoencoder bound with reparametrized latents
  * extended supervised   supervised term plus a generative term evaluated
                          at stop-gradient posterior samples, so the label
                          posterior trains exactly as in supervised mode and
                          the prior/decoder train on its samples
  * semi supervised       extended term for labeled events; for unlabeled
                          events the same expression with the label sampled
                          (gradient-carrying) from the posterior

The optimizer is a sample-based natural-gradient step with running averages
of the gradient mean and the diagonal Fisher (squared gradients), both
bias-corrected. The learning rate only ever decreases, driven by the
relative fluctuation of the validation loss; late-epoch parameter snapshots
are averaged (stochastic weight averaging) into the final model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tape
from .model import EventBatch, ModelBundle, labels_array, pack_events

LR_FLOOR = 1e-6


@dataclass
class LrAdaptConfig:
    window: int = 20
    loss_std_threshold: float = 0.02
    factor: float = 0.5
    enabled: bool = True


@dataclass
class SwaConfig:
    start_fraction: float = 0.8
    stride: int = 1


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-2
    fisher_decay: float = 0.999
    mean_decay: float = 0.9
    lr_adapt: LrAdaptConfig = field(default_factory=LrAdaptConfig)
    swa: SwaConfig = field(default_factory=SwaConfig)
    max_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mean_decay <= 1.0 and 0.0 <= self.fisher_decay <= 1.0):
            raise ValueError("decays must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0.0 < self.swa.start_fraction < 1.0):
            raise ValueError("swa start_fraction must be in (0, 1)")


@dataclass
class OptimizerState:
    mean_grad: np.ndarray
    fisher_diag: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(mean_grad=np.zeros(n), fisher_diag=np.zeros(n), step=0)


def ngd_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray,
             cfg: TrainConfig, lr: float) -> np.ndarray:
    """One natural-gradient step; updates ``state`` in place, returns new params."""
    if grads.shape != params.shape or grads.shape != state.mean_grad.shape:
        raise ValueError("parameter/gradient shapes do not match")
    state.step += 1
    b1, b2 = cfg.mean_decay, cfg.fisher_decay
    state.mean_grad = b1 * state.mean_grad + (1.0 - b1) * grads
    state.fisher_diag = b2 * state.fisher_diag + (1.0 - b2) * grads * grads
    # decay 1.0 freezes the average; skip bias correction for that edge
    m_hat = state.mean_grad if b1 >= 1.0 else state.mean_grad / (1.0 - b1 ** state.step)
    f_hat = state.fisher_diag if b2 >= 1.0 else state.fisher_diag / (1.0 - b2 ** state.step)
    return params - lr * m_hat / (np.sqrt(f_hat) + 1e-8)


def lr_adapt(history: Sequence[float], lr: float, cfg: TrainConfig) -> float:
    """Halve the rate when validation-loss fluctuations exceed the threshold.

    Never increases; floored at 1e-6; inert until the window fills and when
    disabled (which training does for single-scale affine posteriors).
    """
    ac = cfg.lr_adapt
    if not ac.enabled or len(history) < ac.window:
        return lr
    window = np.asarray(history[-ac.window:], dtype=np.float64)
    mean = abs(float(window.mean()))
    rel = float(window.std()) / max(mean, 1e-12)
    if rel > ac.loss_std_threshold:
        return max(lr * ac.factor, LR_FLOOR)
    return lr


def swa_average(snapshots: Sequence[ParamVector]) -> ParamVector:
    """Elementwise arithmetic mean of parameter snapshots."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    first = snapshots[0]
    for s in snapshots[1:]:
        if s.layout != first.layout:
            raise ValueError("snapshot layouts differ")
    mean = np.mean([s.values for s in snapshots], axis=0)
    return ParamVector(mean, first.layout)


# -- loss tapes -----------------------------------------------------------------

def _grad_or_value(bundle: ModelBundle, fn, want_grad: bool):
    if want_grad:
        tape = Tape(fn, bundle.params.layout)
        value = float(tape.forward(bundle.params))
        return value, tape.backward(1.0)
    out = fn(ad.EvalTape(), ad.NumpyParams(bundle.params))
    return float(np.asarray(ad.value_of(out))), None


def _tape_or_none(tb):
    return None if isinstance(tb, ad.EvalTape) else tb


def make_supervised_loss_fn(bundle: ModelBundle, batch: EventBatch,
                            labels: np.ndarray):
    """Tape function for the mean negative label log-posterior."""

    def fn(tb, P):
        lp = bundle.posterior_log_prob(P, batch, labels, tape=_tape_or_none(tb))
        return ad.amean(-1.0 * lp)

    return fn


def supervised_loss(bundle: ModelBundle, events, want_grad: bool = True,
                    batch: Optional[EventBatch] = None,
                    labels: Optional[np.ndarray] = None):
    """Mean negative posterior log-probability of the true labels."""
    if batch is None:
        if not events:
            raise ValueError("empty batch")
        batch = pack_events(events, bundle.config)
        labels = labels_array(events, bundle.dir_chain is not None)
    return _grad_or_value(bundle, make_supervised_loss_fn(bundle, batch, labels),
                          want_grad)


def make_elbo_loss_fn(bundle: ModelBundle, batch: EventBatch,
                      rng: np.random.Generator):
    """Tape function for the negative evidence lower bound (one draw/event).

    With a latent chain present, the latent code joins the reparametrized
    draw, so the bound runs over the full z = (labels-as-latents, extras).
    """
    eps = rng.standard_normal((batch.size, bundle.arch.label_dim))
    eps_u = (rng.standard_normal((batch.size, bundle.arch.latent.dim))
             if bundle.lat_chain is not None else None)

    def fn(tb, P):
        tape = _tape_or_none(tb)
        h = bundle.encode(P, batch, tape=tape)
        z, _, lq = bundle.posterior_sample(P, batch, eps, tape=tape, h=h)
        if bundle.lat_chain is not None:
            fl = bundle.latent_flow_params(P, h, z)
            z_u, lq_u = bundle.lat_chain.sample_from_eps(fl, tb.constant(eps_u))
            z = ad.concat([z, z_u], axis=1)
            lq = lq + lq_u
        ll = bundle.decoder_log_likelihood(P, batch, z, tape=tape)
        lp_prior = bundle.prior_log_prob(P, z, tape=tape)
        return ad.amean(-1.0 * ll + lq - lp_prior)

    return fn


def elbo_loss(bundle: ModelBundle, events, rng: np.random.Generator,
              want_grad: bool = True, batch: Optional[EventBatch] = None):
    """Negative evidence lower bound with one reparametrized draw per event."""
    if bundle.arch.generative is None:
        raise ValueError("elbo_loss needs a generative part")
    if batch is None:
        if not events:
            raise ValueError("empty batch")
        batch = pack_events(events, bundle.config)
    return _grad_or_value(bundle, make_elbo_loss_fn(bundle, batch, rng), want_grad)


def make_extended_loss_fn(bundle: ModelBundle, batch: EventBatch,
                          labels: np.ndarray, rng: np.random.Generator):
    """Tape function for the extended supervised objective.

    The label samples (and the encoding the latent posterior conditions on)
    are drawn with frozen parameters outside the tape and entered as
    constants. That realizes the stop-gradient exactly: the label posterior
    and encoder see only the supervised term, also under finite differences.
    """
    eps_o = rng.standard_normal((batch.size, bundle.arch.label_dim))
    P_np = ad.NumpyParams(bundle.params)
    z_o_samp, _, _ = bundle.posterior_sample(P_np, batch, eps_o)
    h_frozen = bundle.encode(P_np, batch) if bundle.lat_chain is not None else None
    eps_u = (rng.standard_normal((batch.size, bundle.arch.latent.dim))
             if bundle.lat_chain is not None else None)

    def fn(tb, P):
        tape = _tape_or_none(tb)
        lift = tb.constant
        lp_label = bundle.posterior_log_prob(P, batch, labels, tape=tape)
        z_o = lift(z_o_samp)
        gen_term = None
        if bundle.lat_chain is not None:
            fl = bundle.latent_flow_params(P, lift(h_frozen), z_o)
            z_u, lq_u = bundle.lat_chain.sample_from_eps(fl, lift(eps_u))
            z_full = ad.concat([z_o, z_u], axis=1)
            gen_term = lq_u
        else:
            z_full = z_o
        ll = bundle.decoder_log_likelihood(P, batch, z_full, tape=tape)
        lp_prior = bundle.prior_log_prob(P, z_full, tape=tape)
        total = -1.0 * lp_label - ll - lp_prior
        if gen_term is not None:
            total = total + gen_term
        return ad.amean(total)

    return fn


def extended_supervised_loss(bundle: ModelBundle, events, rng: np.random.Generator,
                             want_grad: bool = True,
                             batch: Optional[EventBatch] = None,
                             labels: Optional[np.ndarray] = None):
    """Supervised term plus the generative term at stop-gradient label samples."""
    if bundle.arch.generative is None:
        raise ValueError("extended_supervised_loss needs a generative part")
    if batch is None:
        if not events:
            raise ValueError("empty batch")
        batch = pack_events(events, bundle.config)
        labels = labels_array(events, bundle.dir_chain is not None)
    return _grad_or_value(bundle, make_extended_loss_fn(bundle, batch, labels, rng),
                          want_grad)


def semi_supervised_loss(bundle: ModelBundle, events, rng: np.random.Generator,
                         want_grad: bool = True):
    """Extended term for labeled events; reparametrized-label term otherwise."""
    if bundle.arch.generative is None:
        raise ValueError("semi_supervised_loss needs a generative part")
    if not events:
        raise ValueError("empty batch")
    labeled = [ev for ev in events if ev.label is not None]
    unlabeled = [ev for ev in events if ev.label is None]
    n = len(events)
    parts = []  # (weight, fn) pairs evaluated on one tape

    if labeled:
        batch_l = pack_events(labeled, bundle.config)
        labels = labels_array(labeled, bundle.dir_chain is not None)
        ext_fn = make_extended_loss_fn(bundle, batch_l, labels, rng)

        def labeled_fn(tb, P):
            return ext_fn(tb, P) * float(len(labeled))

        parts.append(labeled_fn)

    if unlabeled:
        # the reparametrized-label term is exactly the bound over z = (z_o, z_u)
        batch_u = pack_events(unlabeled, bundle.config)
        elbo_fn = make_elbo_loss_fn(bundle, batch_u, rng)

        def unlabeled_fn(tb, P):
            return elbo_fn(tb, P) * float(len(unlabeled))

        parts.append(unlabeled_fn)

    def fn(tb, P):
        total = None
        for part in parts:
            val = part(tb, P)
            total = val if total is None else total + val
        return total * (1.0 / n)

    return _grad_or_value(bundle, fn, want_grad)


# -- training loop ----------------------------------------------------------------

LOSS_MODES = ("supervised", "extended", "semi", "vae")

FREEZE_PREFIXES = ("enc.", "post.")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    swa_active: bool


def _loss_for_mode(bundle, mode, batch, labels, rng, want_grad):
    if mode == "supervised":
        return supervised_loss(bundle, None, want_grad, batch=batch, labels=labels)
    if mode == "vae":
        return elbo_loss(bundle, None, rng, want_grad, batch=batch)
    if mode == "extended":
        return extended_supervised_loss(bundle, None, rng, want_grad,
                                        batch=batch, labels=labels)
    raise ValueError(f"unknown training mode {mode!r}")


def make_batches(events, batch_size: int, config):
    """Length-sorted batches (padding efficiency); composition is fixed."""
    order = np.argsort([ev.n_hits for ev in events], kind="stable")
    packs = []
    for start in range(0, len(order), batch_size):
        chunk = [events[i] for i in order[start:start + batch_size]]
        packs.append((pack_events(chunk, config), chunk))
    return packs


def train(bundle: ModelBundle, events, cfg: TrainConfig, mode: str = "supervised",
          freeze_posterior: bool = False, log_path=None,
          progress: bool = False) -> list:
    """Trains the bundle in place; returns per-epoch log rows.

    The training set is split 80/20 into train/validation by a seeded
    permutation. Gradient steps are sequential, so fixed seeds reproduce the
    loss curve bit for bit. For single-scale affine (and MSE) posteriors the
    learning-rate adaptation is disabled and the rate stays fixed.
    """
    if mode not in ("supervised", "extended", "vae", "semi"):
        raise ValueError(f"unknown training mode {mode!r}")
    if mode == "semi":
        return _train_semi(bundle, events, cfg, log_path, progress)
    needs_labels = mode in ("supervised", "extended")
    if needs_labels and any(ev.label is None for ev in events):
        raise ValueError(f"mode {mode!r} requires fully labeled data")
    if bundle.arch.posterior.kind in ("affine", "mse") and cfg.lr_adapt.enabled:
        cfg = replace(cfg, lr_adapt=replace(cfg.lr_adapt, enabled=False))
    rng = np.random.default_rng(cfg.seed)
    n_val = max(1, len(events) // 5)
    perm = rng.permutation(len(events))
    val_events = [events[i] for i in perm[:n_val]]
    train_events = [events[i] for i in perm[n_val:]]
    batches = make_batches(train_events, cfg.batch_size, bundle.config)
    val_batches = make_batches(val_events, min(cfg.batch_size * 4, 1024), bundle.config)
    needs_dir = bundle.dir_chain is not None
    batch_labels = [labels_array(evs, needs_dir) if needs_labels else None
                    for _, evs in batches]
    val_labels = [labels_array(evs, needs_dir) if needs_labels else None
                  for _, evs in val_batches]
    freeze_mask = None
    if freeze_posterior:
        freeze_mask = np.zeros(bundle.params.size, dtype=bool)
        for name, (off, shape) in bundle.params.layout.items():
            if name.startswith(FREEZE_PREFIXES):
                n = max(int(np.prod(shape)), 1)
                freeze_mask[off:off + n] = True

    opt = OptimizerState.zeros(bundle.params.size)
    lr = cfg.lr
    history: list = []
    rows: list = []
    swa_snaps: list = []
    swa_start = max(1, math.ceil(cfg.swa.start_fraction * cfg.max_epochs))
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(batches))
        train_total, n_seen = 0.0, 0
        for bi in order:
            batch, evs = batches[bi]
            value, grad = _loss_for_mode(bundle, mode, batch, batch_labels[bi], rng, True)
            g = grad.values
            if freeze_mask is not None:
                g = np.where(freeze_mask, 0.0, g)
            bundle.params.values = ngd_step(opt, bundle.params.values, g, cfg, lr)
            train_total += value * batch.size
            n_seen += batch.size
        val_rng = np.random.default_rng((cfg.seed, epoch))
        val_total = 0.0
        for (vb, _), vl in zip(val_batches, val_labels):
            v, _ = _loss_for_mode(bundle, mode, vb, vl, val_rng, False)
            val_total += v * vb.size
        val_loss = val_total / len(val_events)
        history.append(val_loss)
        new_lr = lr_adapt(history, lr, cfg)
        if new_lr < lr:
            history = []  # observe fluctuations at the new rate before adapting again
        lr = new_lr
        swa_active = epoch >= swa_start and (epoch - swa_start) % cfg.swa.stride == 0
        if swa_active:
            swa_snaps.append(bundle.params.copy())
        rows.append(EpochRow(epoch, train_total / max(n_seen, 1), val_loss, lr, swa_active))
        if progress:
            print(f"epoch {epoch:3d}  train {rows[-1].train_loss:.4f}  "
                  f"val {val_loss:.4f}  lr {lr:.2e}{'  swa' if swa_active else ''}")
    if swa_snaps:
        averaged = swa_average(swa_snaps)
        if freeze_mask is not None:
            averaged.values[freeze_mask] = bundle.params.values[freeze_mask]
        bundle.params = averaged
    if log_path is not None:
        write_training_log(log_path, rows)
    return rows


def _train_semi(bundle, events, cfg, log_path, progress):
    """Semi-supervised loop: mixed batches keep their labeled/unlabeled split."""
    rng = np.random.default_rng(cfg.seed)
    n_val = max(1, len(events) // 5)
    perm = rng.permutation(len(events))
    val_events = [events[i] for i in perm[:n_val]]
    train_events = [events[i] for i in perm[n_val:]]
    order = np.argsort([ev.n_hits for ev in train_events], kind="stable")
    groups = [[train_events[i] for i in order[s:s + cfg.batch_size]]
              for s in range(0, len(order), cfg.batch_size)]
    opt = OptimizerState.zeros(bundle.params.size)
    lr = cfg.lr
    history, rows, swa_snaps = [], [], []
    swa_start = max(1, math.ceil(cfg.swa.start_fraction * cfg.max_epochs))
    for epoch in range(1, cfg.max_epochs + 1):
        batch_order = rng.permutation(len(groups))
        train_total, n_seen = 0.0, 0
        for bi in batch_order:
            evs = groups[bi]
            value, grad = semi_supervised_loss(bundle, evs, rng, True)
            bundle.params.values = ngd_step(opt, bundle.params.values, grad.values, cfg, lr)
            train_total += value * len(evs)
            n_seen += len(evs)
        val_rng = np.random.default_rng((cfg.seed, epoch))
        val_loss, _ = semi_supervised_loss(bundle, val_events, val_rng, False)
        history.append(val_loss)
        lr = lr_adapt(history, lr, cfg)
        swa_active = epoch >= swa_start and (epoch - swa_start) % cfg.swa.stride == 0
        if swa_active:
            swa_snaps.append(bundle.params.copy())
        rows.append(EpochRow(epoch, train_total / max(n_seen, 1), val_loss, lr, swa_active))
        if progress:
            print(f"epoch {epoch:3d}  train {rows[-1].train_loss:.4f}  "
                  f"val {val_loss:.4f}  lr {lr:.2e}")
    if swa_snaps:
        bundle.params = swa_average(swa_snaps)
    if log_path is not None:
        write_training_log(log_path, rows)
    return rows


def write_training_log(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr,swa_active\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{int(r.swa_active)}\n")
