"""Coverage statistics and posterior-predictive p-values."""

import math

import numpy as np
import pytest

from flowreco.calibration import (
    CoverageReport,
    GofReport,
    _score_observed,
    _score_simulations,
    coverage_curve,
    coverage_svg,
    gof_pvalue,
    lambda_base,
    posterior_draws,
    pvalue_hist_svg,
    pvalue_histograms,
    run_gof,
    write_histogram_csv,
)
from flowreco.model import (
    BundleArch,
    DirectionArch,
    GenerativeArch,
    ModelBundle,
    PosteriorArch,
    pack_events,
)
from flowreco.special import chi2_cdf
from flowreco.toymc import Event, Label, build_detector, generate_dataset

CFG2 = build_detector(2)
CFG3 = build_detector(3)


def build_gf(config=CFG2, direction=False, generative=False, seed=0, kind="gf"):
    arch = BundleArch(
        posterior=PosteriorArch(kind=kind, dim=2, layers=2, kernels=3, mlp_width=8),
        direction=DirectionArch(blocks=1, kernels=4, mlp_width=8) if direction else None,
        generative=GenerativeArch(dec_width=12, time_kernels=3) if generative else None,
    )
    return ModelBundle.build(arch, config, seed=seed)


def relabel_from_model(bundle, events, rng):
    """Attach labels drawn from the model's own posterior: coverage is exact."""
    P = bundle.accessor()
    batch = pack_events(events, bundle.config)
    eps = rng.standard_normal((len(events), bundle.arch.label_dim))
    labels, _, _ = bundle.posterior_sample(P, batch, eps)
    out = []
    for ev, row in zip(events, labels):
        direction = float(row[2]) % (2 * math.pi) if bundle.dir_chain is not None else None
        out.append(Event(modules=ev.modules, times=ev.times,
                         label=Label(float(row[0]), float(row[1]), direction=direction)))
    return out


class TestLambdaBase:
    def test_zero_vector(self):
        assert lambda_base(np.zeros(3)) == 0.0

    def test_sum_of_squares(self):
        assert lambda_base(np.array([1.0, 1.0])) == 2.0

    def test_chi2_distribution(self):
        rng = np.random.default_rng(0)
        n = 2 * 10 ** 5
        z = rng.standard_normal((n, 3))
        lam = lambda_base(z)
        xs = np.sort(lam)
        emp = np.arange(1, n + 1) / n
        cdf = chi2_cdf(3, xs)
        assert np.max(np.abs(emp - cdf)) < 1.6276 / math.sqrt(n)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((100, 3))
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        np.testing.assert_allclose(lambda_base(z @ q.T), lambda_base(z), rtol=1e-10)


class TestCoverage:
    def test_exact_model_on_diagonal(self):
        bundle = build_gf(seed=2)
        events = relabel_from_model(bundle, generate_dataset(2, 1200, seed=3),
                                    np.random.default_rng(4))
        report = coverage_curve(bundle, events)
        assert report.n_failed == 0
        for lv, ac, be in zip(report.levels, report.actual, report.binomial_errors):
            assert abs(ac - lv) <= 3 * be + 1e-9

    def test_joint_euclidean_sphere_diagonal(self):
        bundle = build_gf(config=CFG3, direction=True, seed=5)
        events = relabel_from_model(bundle, generate_dataset(3, 900, seed=6),
                                    np.random.default_rng(70))
        report = coverage_curve(bundle, events)
        assert report.n_failed == 0
        for lv, ac, be in zip(report.levels, report.actual, report.binomial_errors):
            assert abs(ac - lv) <= 3 * be + 1e-9

    def test_halved_widths_undercover(self):
        bundle = build_gf(kind="affine", seed=8)
        events = relabel_from_model(bundle, generate_dataset(2, 1000, seed=9),
                                    np.random.default_rng(10))
        bundle.params.view("post.pos.bout")[2] -= math.log(2.0)  # sigma / 2
        report = coverage_curve(bundle, events)
        assert np.all(report.actual < report.levels)

    def test_monotone_actual(self):
        bundle = build_gf(seed=11)
        events = relabel_from_model(bundle, generate_dataset(2, 200, seed=12),
                                    np.random.default_rng(13))
        report = coverage_curve(bundle, events)
        assert np.all(np.diff(report.actual) >= 0)

    def test_csv_and_svg(self, tmp_path):
        report = CoverageReport(levels=np.array([0.1, 0.5, 0.9]),
                                actual=np.array([0.12, 0.48, 0.91]),
                                n_events=100,
                                binomial_errors=np.array([0.03, 0.05, 0.03]))
        report.to_csv(tmp_path / "cov.csv")
        coverage_svg(report, tmp_path / "cov.svg")
        lines = (tmp_path / "cov.csv").read_text().splitlines()
        assert lines[0] == "level,actual,binomial_error,n_events,n_failed"
        assert len(lines) == 4
        assert (tmp_path / "cov.svg").read_text().startswith("<svg")

    def test_empty_events_rejected(self):
        with pytest.raises(ValueError):
            coverage_curve(build_gf(), [])


@pytest.fixture(scope="module")
def gen_bundle():
    return build_gf(generative=True, seed=14)


class TestGof:

    def test_zero_hit_simulations_use_minus_lambda(self, gen_bundle):
        z = np.array([[0.0, 0.0]])
        empty = Event(modules=np.empty(0, dtype=np.int64), times=np.empty(0))
        t = _score_simulations(gen_bundle, [empty], z)
        lam = gen_bundle.expected_lambdas(z[0])
        assert t[0] == pytest.approx(-lam.sum(), rel=1e-12)

    def test_pvalue_bounds_and_determinism(self, gen_bundle):
        events = generate_dataset(2, 4, seed=15)
        p1 = run_gof(gen_bundle, events, n_sim=40, seed=16)
        p2 = run_gof(gen_bundle, events, n_sim=40, seed=16)
        np.testing.assert_array_equal(p1.p_values, p2.p_values)
        assert np.all((p1.p_values >= 0) & (p1.p_values <= 1))

    def test_worker_invariance(self, gen_bundle):
        events = generate_dataset(2, 4, seed=17)
        full = run_gof(gen_bundle, events, n_sim=30, seed=18)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((18, 2))))
        alone = gof_pvalue(gen_bundle, events[2], 30, rng)
        assert alone == full.p_values[2]

    def test_tie_convention_counts_against_tail(self, gen_bundle):
        # identical test quantities must give p = 0 under the strict inequality
        t = np.full(32, -3.3)
        assert float(np.mean(t.copy() < t)) == 0.0

    def test_p_monotone_in_observed_quantity(self, gen_bundle):
        # a better-scoring observation beats more simulations
        rng = np.random.default_rng(19)
        event = generate_dataset(2, 1, seed=20)[0]
        z = posterior_draws(gen_bundle, event, 64, rng)
        sims = gen_bundle.decoder_sample_many(z, rng)
        sims = [s if s.n_hits else Event(modules=np.array([0]), times=np.array([5.0]))
                for s in sims]
        t_sim = _score_simulations(gen_bundle, sims, z)
        t_obs = _score_observed(gen_bundle, event, z)
        ps = [float(np.mean(t_sim < t_obs + shift)) for shift in (-5.0, 0.0, 5.0)]
        assert ps[0] <= ps[1] <= ps[2]
        assert all(0.0 <= p <= 1.0 for p in ps)

    def test_self_consistency_non_degenerate(self, gen_bundle):
        # observations simulated from the model's own pipeline should not be
        # flagged: p-values stay away from the extremes
        rng = np.random.default_rng(21)
        seed_event = generate_dataset(2, 1, seed=22)[0]
        ps = []
        for rep in range(20):
            z = posterior_draws(gen_bundle, seed_event, 1, rng)
            x_obs = gen_bundle.decoder_sample(z[0], rng)
            if x_obs.n_hits < 2:
                continue
            ps.append(gof_pvalue(gen_bundle, x_obs, 200,
                                 np.random.default_rng((23, rep))))
        ps = np.array(ps)
        assert ps.size >= 15
        assert np.all(ps > 0.0) and np.all(ps < 1.0)

    def test_nsim_validation(self, gen_bundle):
        with pytest.raises(ValueError):
            gof_pvalue(gen_bundle, generate_dataset(2, 1, seed=24)[0], 0,
                       np.random.default_rng(0))


class TestHistograms:
    def test_shared_bins_and_csv(self, tmp_path):
        r1 = GofReport(p_values=np.array([0.1, 0.2, 0.9]), n_sim=100)
        r2 = GofReport(p_values=np.array([0.5, 0.5]), n_sim=100)
        hist = pvalue_histograms({"a": r1, "b": r2}, n_bins=10)
        assert hist["counts"]["a"].sum() == 3
        assert hist["counts"]["b"][5] == 2
        write_histogram_csv(hist, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "bin_lo,bin_hi,a,b"
        assert len(lines) == 11
        pvalue_hist_svg(hist, tmp_path / "h.svg")
        assert (tmp_path / "h.svg").read_text().startswith("<svg")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pvalue_histograms({})
        with pytest.raises(ValueError):
            pvalue_histograms({"a": GofReport(p_values=np.empty(0), n_sim=100)})

    def test_gof_report_validation(self):
        with pytest.raises(ValueError):
            GofReport(p_values=np.array([1.2]), n_sim=100)
        with pytest.raises(ValueError):
            GofReport(p_values=np.array([0.5]), n_sim=0)
