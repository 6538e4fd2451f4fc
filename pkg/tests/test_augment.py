"""Rewrite rules, perturbations, refinement, and dataset assembly."""

import numpy as np
import pytest

from stldistill import augment as ag
from stldistill import formula as fm
from stldistill import kernel as kn
from stldistill.errors import ConfigError, DepthUnreachableError
from stldistill.semantics import robustness_matrix, robustness_vector
from stldistill.signals import sample_mu0

from helpers import horizon_compatible, random_formula

CFG = ag.AugmentConfig()


@pytest.fixture(scope="module")
def ts():
    # grid matches the augment config (dt = 1), 500 signals for kernel checks
    return sample_mu0(500, CFG.signal_points, CFG.num_vars, CFG.signal_horizon, seed=77)


@pytest.fixture(scope="module")
def probe():
    return sample_mu0(1, CFG.signal_points, CFG.num_vars, CFG.signal_horizon, seed=78).trajectory(0)


def sample_compatible(rng, ts, max_depth=4, temporal_bias=False):
    while True:
        f = random_formula(rng, max_depth=max_depth, max_start=8, max_width=12)
        if temporal_bias and not any(
            isinstance(n, (fm.Always, fm.Eventually)) for n in fm.iter_nodes(f)
        ):
            continue
        if horizon_compatible(f, ts.points, ts.time_step):
            return f


class TestConfig:
    def test_default_probabilities_sum_to_one(self):
        CFG.validate()

    def test_bad_probabilities_rejected(self):
        bad = ag.AugmentConfig(p_no_change=0.5)
        with pytest.raises(ConfigError):
            bad.validate()

    def test_stratum_counts_1000(self):
        counts = ag.stratum_counts(1000, CFG)
        assert sum(counts.values()) == 1000
        assert abs(counts["equivalent"] - 104) <= 10
        assert abs(counts["parametric"] - 434) <= 10
        assert abs(counts["hybrid"] - 457) <= 10


class TestRewriteRules:
    def test_de_morgan_shape(self):
        rng = np.random.default_rng(0)
        a, b = fm.Predicate(0, ">=", 1.0), fm.Predicate(1, "<=", 2.0)
        out = ag.apply_rule(fm.And(a, b), "de_morgan", CFG, rng)
        assert out == fm.Not(fm.Or(fm.Not(a), fm.Not(b)))

    def test_temporal_identity_shape(self):
        rng = np.random.default_rng(1)
        f = fm.Predicate(0, ">=", 0.0)
        out = ag.apply_rule(f, "temporal_identity", CFG, rng)
        assert isinstance(out, (fm.Always, fm.Eventually))
        assert out.interval == fm.Interval(0.0, 0.0)
        assert out.child == f

    def test_time_partition_minkowski_sum(self):
        rng = np.random.default_rng(2)
        f = fm.Always(fm.Interval(2.0, 6.0), fm.Predicate(0, ">=", 0.0))
        out = ag.apply_rule(f, "time_partition", CFG, rng)
        assert isinstance(out, fm.Always) and isinstance(out.child, fm.Always)
        outer, inner = out.interval, out.child.interval
        assert outer.start + inner.start == pytest.approx(2.0, abs=1e-9)
        assert outer.end + inner.end == pytest.approx(6.0, abs=1e-9)

    def test_not_injection_skips_not_parent(self):
        rng = np.random.default_rng(3)
        inner = fm.Predicate(0, ">=", 0.0)
        f = fm.Not(inner)
        for _ in range(20):
            out = ag.apply_rule(f, "not_injection", CFG, rng)
            # the child of a Not is never wrapped; only the root qualifies
            assert out == fm.Not(fm.Not(f))

    def test_predicate_inversion(self):
        rng = np.random.default_rng(4)
        out = ag.apply_rule(fm.Predicate(0, "<=", 3.0), "predicate_inversion", CFG, rng)
        assert out == fm.Not(fm.Predicate(0, ">", 3.0))

    def test_inapplicable_rule_returns_none(self):
        rng = np.random.default_rng(5)
        assert ag.apply_rule(fm.Top(), "de_morgan", CFG, rng) is None
        assert ag.apply_rule(fm.Top(), "distributivity", CFG, rng) is None

    @pytest.mark.parametrize("rule", ag.PRESERVING_RULES + ("duality_shift",))
    def test_preserving_rules_keep_robustness(self, rule, ts):
        rng = np.random.default_rng(hash(rule) % 2**32)
        applied = 0
        while applied < 40:
            f = sample_compatible(rng, ts, temporal_bias=rule in
                                  ("time_partition", "distributivity", "duality_shift"))
            g = ag.apply_rule(f, rule, CFG, rng)
            if g is None or g == f:
                continue
            if not horizon_compatible(g, ts.points, ts.time_step):
                continue
            before = robustness_vector(f, ts).values
            after = robustness_vector(g, ts).values
            np.testing.assert_allclose(after, before, rtol=1e-9, atol=1e-12)
            applied += 1

    def test_rewrite_once_changes_at_most_one_neighborhood(self):
        rng = np.random.default_rng(6)
        f = fm.parse("( always[0,5] x_0 >= 0.1 and eventually[0,4] x_1 <= 0.2 )")
        for _ in range(50):
            g = ag.rewrite_once(f, CFG, rng)
            assert fm.parse(fm.print_formula(g)) == g  # stays well-formed


class TestEquivalentVariant:
    def test_depth_target_and_kernel_similarity(self, ts):
        rng = np.random.default_rng(9)
        seeds = ag.load_seed_formulas(ag.default_seed_path(), num_vars=3)
        for idx in rng.choice(len(seeds), size=8, replace=False):
            f = seeds[int(idx)]
            g = ag.make_equivalent_variant(f, CFG, rng)
            assert fm.depth(g) >= CFG.min_depth
            mat = robustness_matrix([f, g], ts)
            gm = kn.gram_from_robustness(mat)
            assert gm.values[0, 1] >= 1.0 - 1e-6

    def test_unreachable_depth_raises(self):
        cfg = ag.AugmentConfig(
            p_not_injection=0.0, p_de_morgan=0.0, p_time_partition=0.0,
            p_until_nesting=0.0, p_temporal_identity=0.0, p_distributivity=0.0,
            p_predicate_inversion=0.0, p_no_change=1.0,
        )
        rng = np.random.default_rng(10)
        with pytest.raises(DepthUnreachableError):
            ag.make_equivalent_variant(fm.parse("x_0 >= 0"), cfg, rng)


class TestPerturb:
    def test_interval_consistency_example(self):
        # width resampled to 3 with left bound 5 gives right bound 8
        iv = ag._consistent_interval(5.0, 3.0)
        assert iv == fm.Interval(5.0, 8.0)

    def test_structure_unchanged(self):
        rng = np.random.default_rng(11)
        f = fm.parse("always[0,10] ( x_0 >= 1.0 and eventually[2,5] x_1 <= 0.5 )")
        for _ in range(50):
            g = ag.perturb(f, CFG, rng)
            assert type(g) is type(f)
            assert fm.size(g) == fm.size(f)
            assert fm.depth(g) == fm.depth(f)

    def test_vibration_threshold_range(self):
        cfg = ag.AugmentConfig(p_vibration=1.0)
        rng = np.random.default_rng(12)
        f = fm.Predicate(0, ">=", 2.0)
        for _ in range(100):
            g = ag.perturb(f, cfg, rng)
            assert 0.9 * 2.0 - 1e-9 <= g.threshold <= 1.1 * 2.0 + 1e-9

    def test_shift_threshold_range(self):
        cfg = ag.AugmentConfig(p_vibration=0.0)
        rng = np.random.default_rng(13)
        f = fm.Predicate(0, ">=", 2.0)
        for _ in range(100):
            g = ag.perturb(f, cfg, rng)
            assert -4.0 - 1e-9 <= g.threshold <= 8.0 + 1e-9

    def test_degenerate_interval_untouched(self):
        rng = np.random.default_rng(14)
        f = fm.Always(fm.Interval(0.0, 0.0), fm.Predicate(0, ">=", 0.0))
        for _ in range(20):
            g = ag.perturb(f, CFG, rng)
            assert g.interval == fm.Interval(0.0, 0.0)

    def test_shift_translates_window(self):
        cfg = ag.AugmentConfig(p_vibration=0.0)
        rng = np.random.default_rng(15)
        f = fm.Always(fm.Interval(20.0, 30.0), fm.Predicate(0, ">=", 0.0))
        for _ in range(100):
            g = ag.perturb(f, cfg, rng)
            iv = g.interval
            assert iv.width == pytest.approx(10.0, abs=1e-4)
            assert 5.0 - 1e-9 <= iv.start <= 60.0 + 1e-9


class TestRefine:
    def test_duality_preserves_probe_robustness(self, probe):
        from stldistill.semantics import robustness

        cfg = ag.AugmentConfig(p_duality_shift=1.0)
        rng = np.random.default_rng(16)
        f = fm.parse("always[0,10] x_0 >= 0.3")
        g = ag.refine_serialized(f, cfg, rng, probe)
        assert g is not None and g != f
        assert robustness(g, probe, 0) == pytest.approx(robustness(f, probe, 0), abs=1e-12)

    def test_rejects_horizon_violation(self, probe):
        rng = np.random.default_rng(17)
        f = fm.parse("always[0,500] x_0 >= 0.0")
        assert ag.refine_serialized(f, CFG, rng, probe) is None

    def test_zero_probability_keeps_formula(self, probe):
        cfg = ag.AugmentConfig(p_duality_shift=0.0)
        rng = np.random.default_rng(18)
        f = fm.parse("always[0,10] x_0 >= 0.3")
        assert ag.refine_serialized(f, cfg, rng, probe) == f


@pytest.fixture(scope="module")
def seeds():
    return ag.load_seed_formulas(ag.default_seed_path(), num_vars=3)


class TestBuildDataset:
    def test_counts_and_round_trip(self, seeds, tmp_path):
        records = ag.build_dataset(seeds, 120, CFG, seed=5)
        assert len(records) == 120
        kinds = [r.variant_kind for r in records]
        counts = {k: kinds.count(k) for k in ag.VARIANT_KINDS}
        target = ag.stratum_counts(120, CFG)
        assert counts == target
        for rec in records:
            fm.parse(rec.formula_text, num_vars=CFG.num_vars)
        path = tmp_path / "data.jsonl"
        ag.save_dataset(records, path)
        assert ag.load_dataset(path) == records

    def test_reproducible(self, seeds):
        a = ag.build_dataset(seeds, 40, CFG, seed=6)
        b = ag.build_dataset(seeds, 40, CFG, seed=6)
        assert a == b
        c = ag.build_dataset(seeds, 40, CFG, seed=7)
        assert a != c

    def test_equivalent_stratum_kernel_similarity(self, seeds, ts):
        records = ag.build_dataset(seeds, 60, CFG, seed=8)
        eq = [r for r in records if r.variant_kind == "equivalent"]
        assert eq
        for rec in eq:
            variant = fm.parse(rec.formula_text)
            mat = robustness_matrix([seeds[rec.seed_id], variant], ts)
            gm = kn.gram_from_robustness(mat)
            assert gm.values[0, 1] >= 1.0 - 1e-6

    def test_all_records_pass_validation(self, seeds, probe):
        records = ag.build_dataset(seeds, 60, CFG, seed=9)
        for rec in records:
            assert ag._validate(fm.parse(rec.formula_text), probe)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ValueError):
            ag.build_dataset([], 10, CFG, seed=0)


class TestSeedFile:
    def test_bundled_seeds_parse_and_fit_horizon(self):
        seeds = ag.load_seed_formulas(ag.default_seed_path(), num_vars=3)
        assert len(seeds) >= 50
        dt = CFG.time_step
        for f in seeds:
            assert horizon_compatible(f, CFG.signal_points, dt)
