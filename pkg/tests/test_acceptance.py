"""Acceptance criteria, one test per criterion, one PASS/FAIL line each.

The trained-model criteria run full desk-scale pipelines (generate, train,
evaluate, write CSV reports); the determinism criterion repeats them with
identical seeds and compares report checksums. Run with ``-s`` to see the
per-criterion lines.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from flowreco import autodiff as ad
from flowreco import truth
from flowreco.autodiff import Tape
from flowreco.calibration import (
    coverage_curve,
    lambda_base,
    pvalue_histograms,
    run_gof,
    write_histogram_csv,
)
from flowreco.flows import rho_tot, rho_tot_inverse, sample_uniform_sphere_via_flow
from flowreco.model import (
    BundleArch,
    GenerativeArch,
    LatentArch,
    ModelBundle,
    PosteriorArch,
    TruePhysicsDecoder,
    labels_array,
    pack_events,
)
from flowreco.special import chi2_cdf
from flowreco.toymc import build_detector, generate_dataset
from flowreco.training import (
    LrAdaptConfig,
    TrainConfig,
    make_elbo_loss_fn,
    make_extended_loss_fn,
    make_supervised_loss_fn,
    supervised_loss,
    train,
)

# ---- desk-scale pipeline sizes -------------------------------------------------

N_TRAIN_D1 = 50_000          # criterion 6 (stated size)
EPOCHS_D1 = 36
N_KL_EVENTS = 300

N_TRAIN_D2 = 20_000          # criterion 7
EPOCHS_D2 = 40
N_COVERAGE = 5_000           # stated size

N_TRAIN_SYS = 15_000         # criterion 8
EPOCHS_SYS = 32
N_COVERAGE_SYS = 4_000

N_TRAIN_D4 = 12_000          # criterion 9
EPOCHS_D4 = 24
N_GOF_EVENTS = 1_000         # stated size
N_SIM = 500                  # stated size

GF_ARCH = dict(kind="gf", dim=2, layers=5, kernels=5, mlp_width=50)


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ks_statistic(samples, cdf):
    xs = np.sort(samples)
    n = xs.size
    c = cdf(xs)
    return max(np.max(np.abs(np.arange(1, n + 1) / n - c)),
               np.max(np.abs(c - np.arange(0, n) / n)))


# ---- criteria 1-3: sphere transforms and the base statistic ---------------------

def test_criterion_1_sphere_flow_exactness():
    t0 = time.time()
    radii = np.linspace(0.02, 5.0, 100)
    worst_closed = 0.0
    for d in (1, 2):
        for r in radii:
            worst_closed = max(worst_closed,
                               abs(rho_tot(d, float(r))
                                   - rho_tot(d, float(r), force_general=True)))
    worst_round = 0.0
    for d in (1, 2, 3, 4):
        for theta in np.linspace(0.01, math.pi - 0.01, 100):
            r = rho_tot_inverse(d, float(theta))
            worst_round = max(worst_round, abs(rho_tot(d, r) - theta))
    elapsed = time.time() - t0
    ok = worst_closed <= 1e-8 and worst_round <= 1e-6 and elapsed < 5.0
    report(1, ok, f"general-path deviation {worst_closed:.2e} (<=1e-8), "
                  f"round trip {worst_round:.2e} (<=1e-6), {elapsed:.1f}s (<5s)")


def test_criterion_2_uniform_sphere_sampling():
    t0 = time.time()
    n = 10 ** 5
    crit = 1.6276 / math.sqrt(n)
    a = sample_uniform_sphere_via_flow(1, np.random.default_rng(1001), n)[:, 0]
    ks1 = ks_statistic(a, lambda x: x / (2 * math.pi))
    pts = sample_uniform_sphere_via_flow(2, np.random.default_rng(1002), n)
    ks2 = ks_statistic(np.cos(pts[:, 0]), lambda x: (x + 1) / 2)
    elapsed = time.time() - t0
    ok = ks1 < crit and ks2 < crit and elapsed < 10.0
    report(2, ok, f"KS circle {ks1:.4f}, KS sphere cos(theta) {ks2:.4f} "
                  f"(1% critical {crit:.4f}), {elapsed:.1f}s (<10s)")


def test_criterion_3_chi_square_law():
    t0 = time.time()
    n = 10 ** 6
    crit = 1.6276 / math.sqrt(n)
    worst = 0.0
    rng = np.random.default_rng(1003)
    for dof in (1, 2, 3):
        lam = lambda_base(rng.standard_normal((n, dof)))
        worst = max(worst, ks_statistic(lam, lambda x: chi2_cdf(dof, x)))
    elapsed = time.time() - t0
    ok = worst < crit and elapsed < 30.0
    report(3, ok, f"max KS over dof 1-3: {worst:.5f} (1% critical {crit:.5f}), "
                  f"{elapsed:.1f}s (<30s)")


# ---- criterion 4: gradient integrity --------------------------------------------

def test_criterion_4_gradient_integrity():
    t0 = time.time()
    cfg1 = build_detector(1)
    events = generate_dataset(1, 10, seed=1004)
    arch = BundleArch(
        posterior=PosteriorArch(kind="gf", dim=2, layers=2, kernels=3, mlp_width=8),
        latent=LatentArch(dim=1, mlp_width=8),
        generative=GenerativeArch(dec_width=12, time_kernels=3))
    worst = {}
    rng = np.random.default_rng(1005)

    bundle = ModelBundle.build(arch, cfg1, seed=2)
    batch = pack_events(events, cfg1)
    labels = labels_array(events, False)
    tape = Tape(make_supervised_loss_fn(bundle, batch, labels), bundle.params.layout)
    worst["supervised"] = ad.check_gradients(tape, bundle.params, eps=1e-5)

    tape = Tape(make_elbo_loss_fn(bundle, batch, rng), bundle.params.layout)
    worst["elbo"] = ad.check_gradients(tape, bundle.params, eps=1e-5)

    ext_fn = make_extended_loss_fn(bundle, batch, labels, rng)
    tape = Tape(ext_fn, bundle.params.layout)
    worst["extended"] = ad.check_gradients(tape, bundle.params, eps=1e-5)
    # stop-gradient zeroing: the generative part is flat along the posterior
    tape.forward(bundle.params)
    g_ext = tape.backward()
    _, g_sup = supervised_loss(bundle, None, batch=batch, labels=labels)
    sep = max(float(np.max(np.abs(g_ext.view(n) - g_sup.view(n))))
              for n in bundle.params.layout if n.startswith(("enc.", "post.")))
    elapsed = time.time() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and sep <= 1e-10 and elapsed < 120.0
    report(4, ok, "max relative errors " +
           ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) +
           f" (<=1e-4); stop-gradient separation {sep:.1e}; {elapsed:.0f}s (<120s)")


# ---- criterion 5: oracle equivalence ---------------------------------------------

def test_criterion_5_oracle_equivalence():
    cfg = build_detector(2)
    events = generate_dataset(2, 100, seed=1006)
    dec = TruePhysicsDecoder(cfg)
    batch = pack_events(events, cfg)
    labels = labels_array(events, False)
    ll_dec = dec.log_likelihood(batch, labels)
    ll_oracle = np.array([truth.log_likelihood(ev, ev.label, cfg) for ev in events])
    err = float(np.max(np.abs(ll_dec - ll_oracle)))
    report(5, err <= 1e-6, f"max |decoder - oracle| = {err:.2e} (<=1e-6) on 100 events")


# ---- criteria 6-9: trained pipelines ----------------------------------------------

def pipeline_fig5(workdir: Path) -> dict:
    """Dataset-1 training of GF/affine/MSE posteriors plus KL-to-truth."""
    workdir.mkdir(parents=True, exist_ok=True)
    events = generate_dataset(1, N_TRAIN_D1, seed=2001)
    kl_events = generate_dataset(1, N_KL_EVENTS, seed=2002)
    cfg1 = build_detector(1)
    axes = truth.default_axes(200)
    out = {"csv": [], "val": {}, "kl": {}}
    for kind, lr in (("gf", 1e-2), ("affine", 3e-3), ("mse", 3e-3)):
        arch = BundleArch(posterior=PosteriorArch(
            kind=kind, dim=2, layers=3, kernels=5, mlp_width=50))
        bundle = ModelBundle.build(arch, cfg1, seed=2003)
        cfg = TrainConfig(batch_size=128, lr=lr, max_epochs=EPOCHS_D1, seed=2004,
                          lr_adapt=LrAdaptConfig(window=8))
        log = workdir / f"train_{kind}.log.csv"
        train(bundle, events, cfg, mode="supervised", log_path=log)
        out["csv"].append(log)
        out["val"][kind] = supervised_loss(bundle, kl_events, want_grad=False)[0]
        out["kl"][kind] = truth.sample_kl_to_truth(bundle.log_prob_event,
                                                   kl_events, cfg1, axes)
    kl_csv = workdir / "kl.csv"
    with open(kl_csv, "w") as fh:
        fh.write("flow,val_loss,sample_kl\n")
        for kind in ("gf", "affine", "mse"):
            fh.write(f"{kind},{out['val'][kind]!r},{float(out['kl'][kind])!r}\n")
    out["csv"].append(kl_csv)
    return out


def pipeline_coverage(workdir: Path) -> dict:
    """Dataset-2 GF training plus a coverage curve on fresh labeled events."""
    workdir.mkdir(parents=True, exist_ok=True)
    events = generate_dataset(2, N_TRAIN_D2, seed=2101)
    val_events = generate_dataset(2, N_COVERAGE, seed=2102)
    cfg2 = build_detector(2)
    bundle = ModelBundle.build(BundleArch(posterior=PosteriorArch(**GF_ARCH)),
                               cfg2, seed=2103)
    cfg = TrainConfig(batch_size=128, lr=1e-2, max_epochs=EPOCHS_D2, seed=2104,
                      lr_adapt=LrAdaptConfig(window=8))
    log = workdir / "train_d2.log.csv"
    train(bundle, events, cfg, mode="supervised", log_path=log)
    report_cov = coverage_curve(bundle, val_events)
    cov_csv = workdir / "coverage_d2.csv"
    report_cov.to_csv(cov_csv)
    return {"csv": [log, cov_csv], "report": report_cov}


def pipeline_systematics(workdir: Path) -> dict:
    """Training on the yield-marginalized dataset, evaluated on plain truth."""
    workdir.mkdir(parents=True, exist_ok=True)
    events = generate_dataset(2, N_TRAIN_SYS, seed=2201, marginalize=True)
    plain_events = generate_dataset(2, N_COVERAGE_SYS, seed=2202, marginalize=False)
    cfg2 = build_detector(2)
    bundle = ModelBundle.build(BundleArch(posterior=PosteriorArch(**GF_ARCH)),
                               cfg2, seed=2203)
    cfg = TrainConfig(batch_size=128, lr=1e-2, max_epochs=EPOCHS_SYS, seed=2204,
                      lr_adapt=LrAdaptConfig(window=8))
    log = workdir / "train_sys.log.csv"
    train(bundle, events, cfg, mode="supervised", log_path=log)
    report_cov = coverage_curve(bundle, plain_events)
    cov_csv = workdir / "coverage_sys.csv"
    report_cov.to_csv(cov_csv)
    return {"csv": [log, cov_csv], "report": report_cov}


def pipeline_gof(workdir: Path) -> dict:
    """Dataset-4 extended training, p-values for datasets 4, 2 and 5."""
    workdir.mkdir(parents=True, exist_ok=True)
    train_events = generate_dataset(4, N_TRAIN_D4, seed=2301)
    cfg4 = build_detector(4)
    bundle = ModelBundle.build(
        BundleArch(posterior=PosteriorArch(**GF_ARCH), generative=GenerativeArch()),
        cfg4, seed=2302)
    cfg = TrainConfig(batch_size=128, lr=1e-2, max_epochs=EPOCHS_D4, seed=2303,
                      lr_adapt=LrAdaptConfig(window=8))
    log = workdir / "train_d4.log.csv"
    train(bundle, train_events, cfg, mode="extended", log_path=log)
    out = {"csv": [log], "p": {}}
    reports = {}
    for ds, seed in ((4, 2304), (2, 2305), (5, 2306)):
        events = generate_dataset(ds, N_GOF_EVENTS, seed=seed)
        rep = run_gof(bundle, events, n_sim=N_SIM, seed=2307)
        reports[f"d{ds}"] = rep
        out["p"][ds] = rep.p_values
        csv_path = workdir / f"gof_d{ds}.csv"
        rep.to_csv(csv_path)
        out["csv"].append(csv_path)
    hist_csv = workdir / "gof_hist.csv"
    write_histogram_csv(pvalue_histograms(reports), hist_csv)
    out["csv"].append(hist_csv)
    return out


@pytest.fixture(scope="module")
def workroot(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def fig5_run(workroot):
    return pipeline_fig5(workroot / "fig5_run1")


@pytest.fixture(scope="module")
def coverage_run(workroot):
    return pipeline_coverage(workroot / "coverage_run1")


@pytest.fixture(scope="module")
def systematics_run(workroot):
    return pipeline_systematics(workroot / "systematics_run1")


@pytest.fixture(scope="module")
def gof_run(workroot):
    return pipeline_gof(workroot / "gof_run1")


def test_criterion_6_fig5_ordering(fig5_run):
    val, kl = fig5_run["val"], fig5_run["kl"]
    ok = (val["gf"] < val["affine"] < val["mse"]) and (kl["gf"] < kl["affine"])
    report(6, ok,
           f"validation losses gf {val['gf']:.3f} < affine {val['affine']:.3f} "
           f"< mse {val['mse']:.3f}; sample KL gf {kl['gf']:.3f} < "
           f"affine {kl['affine']:.3f}")


def test_criterion_7_coverage(coverage_run):
    rep = coverage_run["report"]
    sel = [int(np.argmin(np.abs(rep.levels - l))) for l in np.arange(0.1, 0.91, 0.1)]
    dev = float(np.max(np.abs(rep.actual[sel] - rep.levels[sel])))
    ok = dev <= 0.05 and rep.n_failed == 0
    report(7, ok, f"max |actual - expected| over levels 0.1..0.9 = {dev:.4f} "
                  f"(<=0.05) on {rep.n_events} events, {rep.n_failed} failures")


def test_criterion_8_systematics_overcoverage(systematics_run):
    rep = systematics_run["report"]
    margin = float(np.min(rep.actual - (rep.levels - rep.binomial_errors)))
    ok = margin >= 0.0
    report(8, ok, "actual >= expected - 1 sigma at every level "
                  f"(worst margin {margin:+.4f}); marginalized training, "
                  "plain-truth evaluation")


def test_criterion_9_gof_separation(gof_run):
    p4, p2, p5 = (gof_run["p"][k] for k in (4, 2, 5))
    med4 = float(np.median(p4))
    f4, f2, f5 = (float(np.mean(p < 0.05)) for p in (p4, p2, p5))
    err = math.sqrt(max(f2 * (1 - f2), f4 * (1 - f4), 1e-6) / p2.size)
    ok_a = 0.4 <= med4 <= 0.65
    ok_b = (f2 - f4) >= 2.0 * err
    ok_c = f5 > f2
    report(9, ok_a and ok_b and ok_c,
           f"(a) training median p = {med4:.3f} in [0.40, 0.65]; "
           f"(b) low-p fractions d2 {f2:.3f} vs d4 {f4:.3f} "
           f"(excess {(f2 - f4):.3f} >= {2 * err:.3f}); "
           f"(c) tracks d5 {f5:.3f} > d2 {f2:.3f}")


def test_criterion_10_determinism(workroot, fig5_run, coverage_run,
                                  systematics_run, gof_run):
    runs1 = {p.name: sha(p) for r in (fig5_run, coverage_run, systematics_run,
                                      gof_run) for p in r["csv"]}
    second = {}
    for pipeline, sub in ((pipeline_fig5, "fig5_run2"),
                          (pipeline_coverage, "coverage_run2"),
                          (pipeline_systematics, "systematics_run2"),
                          (pipeline_gof, "gof_run2")):
        for p in pipeline(workroot / sub)["csv"]:
            second[p.name] = sha(p)
    mismatched = [name for name in runs1 if runs1[name] != second[name]]
    report(10, not mismatched,
           f"{len(runs1)} report CSVs reproduced checksum-identically"
           + (f"; mismatches: {mismatched}" if mismatched else ""))
