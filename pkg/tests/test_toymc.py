"""Detector simulation: yields, timing laws, triggering, dataset files."""

import hashlib
import math

import numpy as np
import pytest
from scipy import integrate, stats

from flowreco import toymc
from flowreco.toymc import (
    DetectorConfig,
    Label,
    SchemaError,
    arrival_time_density,
    build_detector,
    event_rng,
    expected_yield,
    generate_dataset,
    mixture_components,
    read_dataset,
    sample_event,
    write_dataset,
)


class TestBuildDetector:
    def test_dataset_1(self):
        cfg = build_detector(1)
        assert cfg.n_modules == 1
        assert cfg.module_positions == ((0.0, 0.0),)
        assert cfg.trigger_threshold == 1

    def test_dataset_2(self):
        cfg = build_detector(2)
        assert cfg.n_modules == 16
        assert cfg.trigger_threshold == 5
        xs = sorted({p[0] for p in cfg.module_positions})
        assert xs == [-15.0, -5.0, 5.0, 15.0]

    def test_dataset_4_same_detector_as_2(self):
        assert build_detector(4) == build_detector(2)
        assert toymc.dataset_half_width(4) == 10.0
        assert toymc.dataset_half_width(2) == 20.0

    def test_unknown_id(self):
        with pytest.raises(ValueError):
            build_detector(9)


class TestExpectedYield:
    def test_zero_distance_aligned(self):
        cfg = build_detector(1)
        lam = expected_yield(Label(0.0, 0.0), 0, cfg, nu=1.0)
        # d = 0 counts as aligned, so the angular factor is (1+k)/(1+k) = 1
        assert lam == pytest.approx(cfg.yield_n0, rel=1e-12)

    def test_one_attenuation_length_no_coupling(self):
        cfg = DetectorConfig(module_positions=((0.0, 0.0),), trigger_threshold=1,
                             angular_coupling=0.0)
        lam = expected_yield(Label(-cfg.attenuation_length, 0.0), 0, cfg)
        assert lam == pytest.approx(cfg.yield_n0 / math.e, rel=1e-12)

    def test_perpendicular_at_ten_meters(self):
        # label 10 m below a module, pointing +x: psi = pi/2, kappa = 0.5
        cfg = build_detector(2)
        module = cfg.module_positions[0]
        label = Label(module[0], module[1] - 10.0)
        lam = expected_yield(label, 0, cfg)
        expect = cfg.yield_n0 * math.exp(-10.0 / cfg.attenuation_length) * (1.0 / 1.5)
        assert lam == pytest.approx(expect, rel=1e-12)

    def test_invalid_module(self):
        with pytest.raises(ValueError):
            expected_yield(Label(0.0, 0.0), 5, build_detector(1))

    def test_track_splits_yield(self):
        cfg = build_detector(2)
        track = Label(0.0, 0.0, topology="track", length=toymc.TRACK_LENGTH)
        lam = expected_yield(track, 3, cfg)
        emitters = track.emitter_positions()
        assert emitters.shape == (20, 2)
        manual = 0.0
        module = np.asarray(cfg.module_positions[3])
        for e in emitters:
            d = np.hypot(*(module - e))
            cos_psi = (module - e)[0] / d
            manual += (cfg.yield_n0 / 20.0 * math.exp(-d / cfg.attenuation_length)
                       * (1 + cfg.angular_coupling * cos_psi) / (1 + cfg.angular_coupling))
        assert lam == pytest.approx(manual, rel=1e-12)

    def test_always_positive(self):
        cfg = build_detector(2)
        rng = np.random.default_rng(0)
        for _ in range(200):
            label = Label(rng.uniform(-20, 20), rng.uniform(-20, 20),
                          direction=rng.uniform(0, 2 * math.pi))
            for j in range(cfg.n_modules):
                assert expected_yield(label, j, cfg) > 0.0


class TestArrivalTimeDensity:
    def test_zero_distance_is_exponential(self):
        cfg = build_detector(1)
        spec = arrival_time_density(Label(0.0, 0.0), 0, cfg)
        assert spec.shape == 1.0
        assert spec.offset == 0.0

    def test_shape_two_at_shape_scale(self):
        cfg = build_detector(1)
        spec = arrival_time_density(Label(cfg.timing_shape_scale, 0.0), 0, cfg)
        assert spec.shape == pytest.approx(2.0)

    def test_monte_carlo_mean(self):
        cfg = build_detector(1)
        spec = arrival_time_density(Label(10.0, 0.0), 0, cfg)
        rng = np.random.default_rng(42)
        samples = spec.sample(rng, 10 ** 5)
        se = samples.std() / math.sqrt(samples.size)
        assert abs(samples.mean() - spec.mean()) <= 4.0 * se

    def test_density_normalization(self):
        cfg = build_detector(1)
        for d in (0.5, 3.0, 10.0, 25.0):
            spec = toymc._gamma_for_distance(d, cfg)
            hi = spec.offset + 50.0 * spec.shape * spec.scale
            val, _ = integrate.quad(lambda t: math.exp(spec.log_pdf(t)),
                                    spec.offset, hi, limit=200)
            assert val >= 1.0 - 1e-6

    def test_log_pdf_finite_before_offset(self):
        spec = toymc.GammaSpec(shape=2.0, scale=5.0, offset=50.0)
        vals = spec.log_pdf(np.array([0.0, 49.9, 50.0, 51.0]))
        assert np.all(np.isfinite(vals))
        assert vals[0] < vals[1] < vals[3]


class TestSampleEvent:
    def test_far_label_rejected(self):
        cfg = build_detector(2)
        rng = np.random.default_rng(1)
        assert sample_event(Label(1e4, 1e4), cfg, rng) is None

    def test_seed_determinism(self):
        cfg = build_detector(2)
        label = Label(3.0, -4.0)
        e1 = sample_event(label, cfg, np.random.default_rng(123))
        e2 = sample_event(label, cfg, np.random.default_rng(123))
        np.testing.assert_array_equal(e1.modules, e2.modules)
        np.testing.assert_array_equal(e1.times, e2.times)

    def test_retention_threshold_strict(self):
        cfg = build_detector(2)
        rng = np.random.default_rng(5)
        kept = 0
        for _ in range(200):
            ev = sample_event(Label(rng.uniform(-20, 20), rng.uniform(-20, 20)), cfg, rng)
            if ev is not None:
                kept += 1
                assert ev.n_hits > cfg.trigger_threshold
        assert kept > 0

    def test_acceptance_fraction_matches_poisson_tail(self):
        cfg = build_detector(2)
        rng = np.random.default_rng(314)
        n_labels = 10 ** 4
        labels = [Label(rng.uniform(-20, 20), rng.uniform(-20, 20)) for _ in range(n_labels)]
        total_lams = np.array([
            sum(expected_yield(lbl, j, cfg) for j in range(cfg.n_modules)) for lbl in labels
        ])
        p_keep = stats.poisson.sf(cfg.trigger_threshold, total_lams)
        kept = np.array([sample_event(lbl, cfg, rng) is not None for lbl in labels])
        sigma = math.sqrt(float(np.sum(p_keep * (1 - p_keep))) / n_labels ** 2)
        assert abs(kept.mean() - p_keep.mean()) <= 3.0 * sigma

    def test_per_module_mean_matches_yield(self):
        cfg = build_detector(1)
        label = Label(4.0, 2.0)
        lam = expected_yield(label, 0, cfg)
        rng = np.random.default_rng(9)
        n_resim = 10 ** 5
        counts = rng.poisson(lam, size=n_resim)  # count part of the process
        se = math.sqrt(lam / n_resim)
        assert abs(counts.mean() - lam) <= 4.0 * se
        # full pipeline on a smaller resimulation budget, no trigger bias:
        # use a label bright enough that rejection never happens
        n_full = 20000
        tot = 0
        for i in range(n_full):
            ev = sample_event(label, cfg, event_rng(77, i))
            tot += 0 if ev is None else ev.n_hits
        assert abs(tot / n_full - lam) <= 4.0 * math.sqrt(lam / n_full) + 0.02

    def test_track_event_uses_emitter_mixture(self):
        cfg = build_detector(2)
        track = Label(-5.0, 0.0, topology="track", length=20.0)
        comps = mixture_components(track, 0, cfg)
        assert len(comps) == 20
        ev = sample_event(track, cfg, np.random.default_rng(8))
        assert ev is not None and ev.n_hits > cfg.trigger_threshold


class TestGenerateDataset:
    def test_dataset2_contract(self):
        events = generate_dataset(2, 300, seed=7)
        assert len(events) == 300
        cfg = build_detector(2)
        for ev in events:
            assert ev.n_hits > cfg.trigger_threshold
            assert np.all(np.diff(ev.times) >= 0)

    def test_dataset4_labels_contained(self):
        for ev in generate_dataset(4, 100, seed=1):
            assert abs(ev.label.x) < 10.0 and abs(ev.label.y) < 10.0

    def test_dataset3_has_direction(self):
        for ev in generate_dataset(3, 20, seed=2):
            assert ev.label.direction is not None
            assert 0.0 <= ev.label.direction < 2 * math.pi

    def test_dataset5_tracks(self):
        for ev in generate_dataset(5, 20, seed=3):
            assert ev.label.topology == "track"
            assert ev.label.length == 20.0

    def test_marginalized_variance_exceeds_plain(self):
        plain = generate_dataset(2, 4000, seed=3, marginalize=False)
        marg = generate_dataset(2, 4000, seed=3, marginalize=True)
        var_plain = np.var([ev.n_hits for ev in plain])
        var_marg = np.var([ev.n_hits for ev in marg])
        assert var_marg > var_plain
        assert all(ev.nu is not None and ev.nu > 0 for ev in marg)
        assert all(ev.nu is None for ev in plain)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            generate_dataset(2, 0, seed=1)
        with pytest.raises(ValueError):
            generate_dataset(7, 10, seed=1)

    def test_worker_invariance_of_event_streams(self):
        # event i is reproducible in isolation, regardless of loop order
        full = generate_dataset(2, 10, seed=21)
        cfg = build_detector(2)
        ev5 = None
        rng = event_rng(21, 5)
        while ev5 is None:
            label = toymc._draw_label(2, rng)
            ev5 = sample_event(label, cfg, rng)
        np.testing.assert_array_equal(ev5.times, full[5].times)


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        events = generate_dataset(3, 40, seed=11)
        cfg = build_detector(3)
        path = tmp_path / "d3.jsonl"
        write_dataset(path, events, dataset_id=3, seed=11, marginalize=False, config=cfg)
        header, cfg2, back = read_dataset(path)
        assert header["dataset_id"] == 3 and header["n_events"] == 40
        assert cfg2 == cfg
        for a, b in zip(events, back):
            np.testing.assert_array_equal(a.modules, b.modules)
            np.testing.assert_array_equal(a.times, b.times)
            assert a.label == b.label

    def test_bit_identical_serialization(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        cfg = build_detector(2)
        for p in (p1, p2):
            write_dataset(p, generate_dataset(2, 50, seed=99, marginalize=True),
                          dataset_id=2, seed=99, marginalize=True, config=cfg)
        h1 = hashlib.sha256(p1.read_bytes()).hexdigest()
        h2 = hashlib.sha256(p2.read_bytes()).hexdigest()
        assert h1 == h2

    def test_schema_errors(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("not json\n")
        with pytest.raises(SchemaError):
            read_dataset(bad)
        bad.write_text('{"kind":"something-else"}\n')
        with pytest.raises(SchemaError):
            read_dataset(bad)
