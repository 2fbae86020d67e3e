from dataclasses import replace

import numpy as np
import pytest

from partnest import estimators as est
from partnest import inference as inf
from partnest.data import PartialNestDataset
from partnest.errors import StackInconsistent, TooManyFailedReplicates

from test_estimators import FIXTURE_ROWS, fixture_dataset


def mean_stack(y):
    y = np.asarray(y, dtype=float)
    return inf.StackedSystem(np.array([y.mean()]), lambda th: (y - th[0])[:, None],
                             {"mu": slice(0, 1)})


def test_pure_mean_stack_matches_textbook():
    y = np.random.default_rng(0).standard_normal(57) * 3 + 1
    res = inf.sandwich_se(mean_stack(y))["mu"]
    # M-estimation meat averages m^2, so the SD has divisor n
    assert res.se == pytest.approx(y.std(ddof=0) / np.sqrt(y.size), abs=1e-10)
    assert res.point == y.mean()
    assert res.lower == pytest.approx(y.mean() - 1.959963984540054 * res.se, abs=1e-15)
    assert res.lower <= res.point <= res.upper


def test_intercept_only_stack_is_solved_exactly():
    d = fixture_dataset(FIXTURE_ROWS[:10])
    spec = est.ModelSpec(outcome=(), participation=(), part=(), treatment=())
    nuis = est.fit_nuisances(d, spec)
    for kind in est.ESTIMATOR_KINDS:
        system = inf.build_stack(d, nuis, kind)
        assert np.max(np.abs(system.residual_mean())) < 1e-10


@pytest.mark.parametrize("kind, blocks", [
    (est.G_FORMULA, 2), (est.TRIAL_ONLY, 2), (est.WEIGHTING, 3), (est.AUGMENTED, 5),
])
def test_stack_dimension(sim_data, kind, blocks):
    nuis = est.fit_nuisances(sim_data)
    system = inf.build_stack(sim_data, nuis, kind)
    assert system.dim == blocks * (sim_data.d + 1) + 3
    assert system.contributions().shape == (sim_data.n, system.dim)
    assert np.max(np.abs(system.residual_mean())) <= 1e-6
    assert system.targets == est.TARGETS
    np.testing.assert_allclose([system.theta[system.blocks[t]][0] for t in est.TARGETS],
                               est.estimate(sim_data, nuis, kind), rtol=0, atol=0)


def test_known_treatment_drops_its_block(sim_data):
    nuis = est.fit_nuisances(sim_data, est.ModelSpec(known_treatment_prob=0.5))
    system = inf.build_stack(sim_data, nuis, est.AUGMENTED)
    assert "treatment" not in system.blocks
    assert system.dim == 4 * (sim_data.d + 1) + 3


def test_normalized_weights_stack(sim_data):
    spec = est.ModelSpec(normalized_weights=True)
    nuis = est.fit_nuisances(sim_data, spec)
    for kind in (est.WEIGHTING, est.AUGMENTED):
        system = inf.build_stack(sim_data, nuis, kind)
        assert {"kappa0", "kappa1"} <= set(system.blocks)
        assert np.max(np.abs(system.residual_mean())) <= 1e-6
        np.testing.assert_allclose([system.theta[system.blocks[t]][0] for t in est.TARGETS],
                                   est.estimate(sim_data, nuis, kind), atol=1e-12)


def test_unconverged_nuisance_rejected(sim_data):
    nuis = est.fit_nuisances(sim_data)
    bad = replace(nuis, participation_model=replace(nuis.participation_model, converged=False))
    with pytest.raises(StackInconsistent):
        inf.build_stack(sim_data, bad, est.WEIGHTING)


def test_wrong_plug_in_rejected(sim_data):
    nuis = est.fit_nuisances(sim_data)
    m = nuis.outcome_models[0]
    moved = replace(m, coefficients=m.coefficients + 0.1)
    bad = replace(nuis, outcome_models={0: moved, 1: nuis.outcome_models[1]})
    with pytest.raises(StackInconsistent):
        inf.build_stack(sim_data, bad, est.G_FORMULA)


def test_numerical_bread_matches_logistic_information(sim_data):
    nuis = est.fit_nuisances(sim_data)
    system = inf.build_stack(sim_data, nuis, est.AUGMENTED)
    J = inf.numerical_jacobian(system)
    Z = est.model_features(sim_data, None)
    subsets = {
        "participation": np.ones(sim_data.n, bool),
        "part": np.ones(sim_data.n, bool),
        "treatment": sim_data.s == 1,
        "outcome0": (sim_data.s == 1) & (sim_data.a == 0),
        "outcome1": (sim_data.s == 1) & (sim_data.a == 1),
    }
    for name, rows in subsets.items():
        sl = system.blocks[name]
        analytic = nuis.models[name].information(Z[rows]) / sim_data.n
        numeric = -J[sl, sl]
        assert np.max(np.abs(numeric - analytic)) / np.max(np.abs(analytic)) < 1e-4


def test_sandwich_covariance_nearly_symmetric_before_symmetrizing(sim_data):
    nuis = est.fit_nuisances(sim_data)
    system = inf.build_stack(sim_data, nuis, est.AUGMENTED)
    M = system.contributions()
    A_inv = np.linalg.inv(-inf.numerical_jacobian(system))
    raw = A_inv @ (M.T @ M / M.shape[0]) @ A_inv.T / M.shape[0]
    assert np.max(np.abs(raw - raw.T)) <= 1e-6 * np.max(np.abs(raw))
    cov = inf.sandwich_covariance(system)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() > -1e-12 * np.abs(cov).max()


# -- bootstrap ------------------------------------------------------------------------

def test_bootstrap_reproducible(sim_data):
    a = inf.bootstrap(sim_data, est.PROPOSED, B=1000, seed=7)
    b = inf.bootstrap(sim_data, est.PROPOSED, B=1000, seed=7)
    for k in est.PROPOSED:
        np.testing.assert_array_equal(a.replicates[k], b.replicates[k])
        assert a.intervals[k] == b.intervals[k]
    c = inf.bootstrap(sim_data, est.PROPOSED, B=1000, seed=8)
    assert not np.array_equal(a.replicates[est.G_FORMULA], c.replicates[est.G_FORMULA])


def test_bootstrap_invariant_to_threads_and_chunking(sim_data):
    serial = inf.bootstrap(sim_data, est.AUGMENTED, B=120, seed=3, chunk_size=17)
    threaded = inf.bootstrap(sim_data, est.AUGMENTED, B=120, seed=3, chunk_size=17, threads=3)
    np.testing.assert_array_equal(serial.replicates[est.AUGMENTED],
                                  threaded.replicates[est.AUGMENTED])
    # chunk boundaries change batched BLAS shapes, so only round-off may differ
    single = inf.bootstrap(sim_data, est.AUGMENTED, B=120, seed=3)
    np.testing.assert_allclose(single.replicates[est.AUGMENTED],
                               serial.replicates[est.AUGMENTED], rtol=0, atol=1e-12)


def test_replicate_counts_independent_of_order(sim_data):
    forward = inf.resample_counts(sim_data, np.arange(10), seed=5)
    backward = inf.resample_counts(sim_data, np.arange(10)[::-1], seed=5)
    np.testing.assert_array_equal(forward, backward[::-1])
    np.testing.assert_array_equal(forward.sum(axis=1), sim_data.n)


def test_stratified_counts_preserve_parts(sim_data):
    counts = inf.resample_counts(sim_data, np.arange(20), seed=5, stratified=True)
    np.testing.assert_array_equal(counts @ (sim_data.p == 0), sim_data.n0)
    np.testing.assert_array_equal(counts @ (sim_data.p == 1), sim_data.n1)


def test_frequency_counts_equal_literal_resampling(sim_data):
    spec = est.ModelSpec()
    counts = inf.resample_counts(sim_data, np.arange(4), seed=9)
    pred, ok = est.fit_predict_batch(sim_data, spec, counts)
    assert ok.all()
    for kind in est.ESTIMATOR_KINDS:
        batch = est.estimate_batch(sim_data, spec, pred, counts, kind)
        for b in range(4):
            rows = np.repeat(np.arange(sim_data.n), counts[b].astype(int))
            literal = sim_data.take(rows)
            expect = est.estimate(literal, est.fit_nuisances(literal, spec), kind)
            np.testing.assert_allclose(batch[b], expect, atol=1e-8)


def test_constant_outcome_gives_zero_se(sim_data_continuous):
    d = sim_data_continuous
    flat = PartialNestDataset(d.X, d.p, d.s, d.a, np.where(d.s == 1, 2.5, np.nan),
                              d.covariate_names, d.outcome_kind)
    kinds = (est.G_FORMULA, est.AUGMENTED)
    res = inf.bootstrap(flat, kinds, B=100, seed=1)
    nuis = est.fit_nuisances(flat)
    for k in kinds:
        for t in est.TARGETS:
            iv = res.intervals[k][t]
            assert iv.se == pytest.approx(0.0, abs=1e-12)
            assert iv.lower == pytest.approx(iv.point, abs=1e-11)
            assert iv.upper == pytest.approx(iv.point, abs=1e-11)
        sw = inf.sandwich_se(inf.build_stack(flat, nuis, k))
        assert all(sw[t].se < 1e-6 for t in est.TARGETS)


def test_sandwich_and_bootstrap_agree(sim_data):
    nuis = est.fit_nuisances(sim_data)
    boot = inf.bootstrap(sim_data, est.PROPOSED, B=1000, seed=11, nuisances=nuis)
    for k in est.PROPOSED:
        sw = inf.sandwich_se(inf.build_stack(sim_data, nuis, k))
        for t in est.TARGETS:
            b = boot.intervals[k][t].se
            assert abs(sw[t].se - b) / b < 0.15, (k, t, sw[t].se, b)


def test_percentile_interval_reported(sim_data):
    res = inf.bootstrap(sim_data, est.WEIGHTING, B=200, seed=2)
    for t in est.TARGETS:
        iv = res.percentile[est.WEIGHTING][t]
        reps = res.replicates[est.WEIGHTING][:, est.TARGETS.index(t)]
        assert iv.lower == np.percentile(reps, 2.5) and iv.upper == np.percentile(reps, 97.5)


def test_minimum_replicates(sim_data):
    with pytest.raises(ValueError):
        inf.bootstrap(sim_data, B=99, seed=1)


def test_too_many_failed_replicates():
    d = fixture_dataset()
    with pytest.raises(TooManyFailedReplicates):
        inf.bootstrap(d, est.PROPOSED, B=100, seed=1)
