import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import Polynomial as P

from gkcv.errors import ConfigError, MissingSeriesError, ReplicaFailure
from gkcv.estimate import (
    ESTIMATORS,
    EstimatorReport,
    WeightFunction,
    asymptotic_variance_prediction,
    checkpoints,
    divergent_weight,
    get_weight,
    gk_cv_adjoint,
    gk_cv_combined,
    gk_cv_forward,
    gk_estimate,
    he_cv_adjoint,
    he_cv_combined,
    he_cv_forward,
    he_direct,
    he_estimate,
    he_estimate_many,
    he_partials,
    observables_for,
    run_estimator,
    series_names,
    split_name,
    static_term_iid,
    static_term_mc,
    static_term_quadrature,
    weight_catalog,
    zeta,
)
from gkcv.integrate import TrajectoryBatch
from gkcv.models import LangevinParams, MultiscaleParams, make_langevin, make_multiscale_fast

from conftest import batch_from, identity, ou_cv_batch

CATALOG_NAMES = [w.name for w in weight_catalog()]
ZERO = WeightFunction("zero", lambda u: np.zeros_like(u))

# Polynomial forms of the polynomial catalog entries; zeta = int_0^1 (1 - v) w(v)^2 dv
POLY_WEIGHTS = {
    "constant": P([1.0]),
    "bartlett": P([1.0, -1.0]),
    "parzen_riesz": P([1.0, 0.0, -1.0]),
}


def poly_zeta(p):
    integrand = (P([1.0, -1.0]) * p**2).integ()
    return integrand(1.0) - integrand(0.0)


class TestWeights:
    def test_catalog_names(self):
        assert CATALOG_NAMES == [
            "constant", "bartlett", "parzen", "tukey_hanning",
            "parzen_riesz", "parzen_geometric", "parzen_cauchy",
        ]

    @pytest.mark.parametrize("name", CATALOG_NAMES)
    def test_unit_at_zero(self, name):
        assert get_weight(name)(0.0) == 1.0

    @pytest.mark.parametrize("name", CATALOG_NAMES)
    def test_finite_and_zero_outside(self, name):
        w = get_weight(name)
        u = np.linspace(0.0, 1.0 - 1e-9, 1001)
        assert np.all(np.isfinite(w(u)))
        assert w(1.0) == 0.0 and w(1.5) == 0.0 and w(-0.1) == 0.0

    def test_bartlett_value(self):
        assert get_weight("bartlett")(0.25) == 0.75

    def test_parzen_continuity(self):
        fn = get_weight("parzen").fn
        assert fn(np.array(0.5)) == pytest.approx(0.25, abs=1e-15)
        assert 2 * (1 - 0.5) ** 3 == 0.25
        assert get_weight("parzen")(0.5 + 1e-12) == pytest.approx(0.25, abs=1e-10)

    def test_tukey_hanning_at_one(self):
        assert get_weight("tukey_hanning")(1.0 - 1e-12) == pytest.approx(0.0, abs=1e-15)

    def test_name_normalization(self):
        assert get_weight("Tukey-Hanning").name == "tukey_hanning"
        with pytest.raises(ConfigError):
            get_weight("triangle")

    def test_divergent_weight(self):
        w = divergent_weight()
        assert w(0.5) == pytest.approx(2.0)
        assert w(1.0 - 1e-9) == pytest.approx(1e6)


class TestZeta:
    def test_constant(self):
        assert abs(zeta(get_weight("constant")) - 0.5) <= 1e-8

    def test_bartlett(self):
        assert abs(zeta(get_weight("bartlett")) - 0.25) <= 1e-8

    def test_zero_weight(self):
        assert zeta(ZERO) == 0.0

    @pytest.mark.parametrize("name", sorted(POLY_WEIGHTS))
    def test_polynomial_weights_exact(self, name):
        assert zeta(get_weight(name)) == pytest.approx(poly_zeta(POLY_WEIGHTS[name]), rel=1e-10)

    def test_parzen_piecewise(self):
        left = P([1.0, 0.0, -6.0, 6.0])
        right = 2 * P([1.0, -1.0]) ** 3
        a = (P([1.0, -1.0]) * left**2).integ()
        b = (P([1.0, -1.0]) * right**2).integ()
        expected = a(0.5) - a(0.0) + b(1.0) - b(0.5)
        assert zeta(get_weight("parzen")) == pytest.approx(expected, rel=1e-10)

    def test_closed_forms(self):
        # (1 - v)/(1 + v)^2 and (1 - v)/(1 + v^2)^2 integrate in elementary terms
        assert zeta(get_weight("parzen_geometric")) == pytest.approx(1 - np.log(2), rel=1e-9)
        assert zeta(get_weight("parzen_cauchy")) == pytest.approx(np.pi / 8, rel=1e-9)


def simple_report(values, var=(0.5, 2.0), runtime=1.5):
    var_t = np.column_stack([[0.1, 0.2], var])
    return EstimatorReport("gk", float(np.mean(values)), var_t, runtime, np.asarray(values, float))


class TestReport:
    def test_cost_is_exact_product(self):
        rep = simple_report([1.0, 2.0])
        assert rep.cost == 1.5 * 2.0

    def test_json_fields(self):
        data = json.loads(simple_report([1.0, 3.0]).to_json())
        assert list(data) == ["estimator", "rho_hat", "variance_vs_time", "runtime_seconds", "cost"]
        assert data["rho_hat"] == 2.0
        assert data["variance_vs_time"] == [[0.1, 0.5], [0.2, 2.0]]

    def test_csv(self):
        text = simple_report([1.0, 3.0]).variance_csv()
        assert text.splitlines() == ["t,variance", "0.1,0.5", "0.2,2.0"]

    def test_single_replica_is_undefined(self):
        trajs = batch_from(0.5, f=[[2.0, 0.0, 0.0]], g=[[1.0, 1.0, 1.0]])
        rep = gk_estimate(trajs)
        assert rep.rho_hat == 2.0
        assert np.isnan(rep.final_variance)
        assert "undefined (K=1)" in rep.variance_csv()
        assert json.loads(rep.to_json())["cost"] is None

    def test_shifted(self):
        rep = simple_report([1.0, 3.0]).shifted(0.25, name="x")
        assert rep.rho_hat == 2.25 and rep.estimator == "x"
        np.testing.assert_array_equal(rep.replica_values, [1.25, 3.25])


class TestGreenKubo:
    def test_zero_series(self):
        assert gk_estimate(batch_from(0.1, f=[[1.0, 2.0, 3.0]], g=[[0.0, 0.0, 0.0]])).rho_hat == 0.0

    def test_constant_integrand(self):
        trajs = batch_from(0.5, f=[[2.0, 7.0, 7.0]], g=[[1.0, 1.0, 1.0]])
        assert gk_estimate(trajs).rho_hat == 2.0

    def test_trapezoid(self):
        trajs = batch_from(1.0, f=[[3.0, 0.0, 0.0]], g=[[0.0, 1.0, 2.0]])
        assert gk_estimate(trajs).rho_hat == 6.0

    def test_initial_only_factor(self):
        trajs = TrajectoryBatch(1.0, 2.0, {"g": np.array([[0.0, 1.0, 2.0]])}, {"f": np.array([3.0])})
        assert gk_estimate(trajs).rho_hat == 6.0

    def test_variance_over_replicas(self):
        trajs = batch_from(1.0, f=[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], g=[[1.0, 1.0, 1.0]] * 2)
        rep = gk_estimate(trajs, stride=1)
        np.testing.assert_allclose(rep.variance_vs_time, [[1.0, 2.0], [2.0, 8.0]])
        assert rep.rho_hat == 4.0

    def test_empty(self):
        with pytest.raises(ConfigError):
            gk_estimate(TrajectoryBatch(0.1, 1.0, {"f": np.empty((0, 11)), "g": np.empty((0, 11))}))

    def test_nan_names_replica(self):
        g = np.ones((3, 5))
        g[2, 3] = np.nan
        with pytest.raises(ReplicaFailure) as info:
            gk_estimate(batch_from(0.1, f=np.ones((3, 5)), g=g))
        assert info.value.replica == 2 and info.value.observable == "g"

    def test_missing_series(self):
        with pytest.raises(MissingSeriesError):
            gk_cv_forward(batch_from(0.1, f=np.ones((2, 3)), g=np.ones((2, 3))))

    def test_pairs_sum(self):
        trajs = batch_from(1.0, a=[[1.0, 0, 0]], b=[[1.0, 1, 1]], c=[[2.0, 0, 0]], d=[[0.0, 1, 2]])
        assert gk_estimate(trajs, pairs=[("a", "b"), ("c", "d")]).rho_hat == 2.0 + 4.0


class TestHalfEinstein:
    def test_zero_weight(self, ou_small):
        assert he_estimate(ou_small, ZERO).rho_hat == 0.0

    def test_constant_series(self):
        # (1/T) int_0^T int_0^t 1 ds dt = T/2, less the corner node at lag T where
        # w(1) = 0: weight (1/2)(1/2) dt^2 / T
        trajs = batch_from(0.1, f=np.ones((1, 11)), g=np.ones((1, 11)))
        assert he_estimate(trajs, get_weight("constant")).rho_hat == pytest.approx(0.5 - 0.0025, abs=1e-14)

    @pytest.mark.parametrize("name", CATALOG_NAMES)
    def test_lag_form_matches_direct(self, name):
        rng = np.random.default_rng(0)
        f, g = rng.normal(size=(2, 50))
        w = get_weight(name)
        lag = he_estimate(batch_from(0.02, f=f, g=g), w).rho_hat
        assert abs(lag - he_direct(f, g, 0.02, w)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(2, 100),
        st.sampled_from(CATALOG_NAMES),
        st.floats(1e-3, 1.0),
        st.integers(0, 2**32 - 1),
    )
    def test_lag_form_matches_direct_property(self, n, name, dt, seed):
        rng = np.random.default_rng(seed)
        f, g = rng.normal(size=(2, n))
        w = get_weight(name)
        lag = he_estimate(batch_from(dt, f=f, g=g), w).rho_hat
        direct = he_direct(f, g, dt, w)
        assert abs(lag - direct) <= 1e-12 * max(1.0, abs(direct))

    def test_partials_are_shorter_horizons(self):
        rng = np.random.default_rng(1)
        f, g = rng.normal(size=(2, 41))
        w = get_weight("parzen")
        idx, part = he_partials(batch_from(0.05, f=f, g=g), w, stride=10)
        for c, m in enumerate(idx):
            assert part[0, c] == pytest.approx(he_direct(f[: m + 1], g[: m + 1], 0.05, w), abs=1e-12)

    def test_many_matches_single(self, ou_small):
        weights = [get_weight("bartlett"), get_weight("tukey_hanning")]
        many = he_estimate_many(ou_small, weights)
        for w, rep in zip(weights, many):
            one = he_estimate(ou_small, w)
            np.testing.assert_allclose(rep.replica_values, one.replica_values, rtol=0, atol=1e-13)
            assert rep.estimator == f"he_{w.name}"


@pytest.fixture(scope="module")
def half_batches():
    return {"gk": ou_cv_batch(0.5, 2000, 5.0, 21), "he": ou_cv_batch(0.5, 500, 40.0, 22)}


class TestControlVariates:
    VARIANTS = {
        "gk_forward": lambda t: gk_cv_forward(t),
        "gk_adjoint": lambda t: gk_cv_adjoint(t),
        "gk_combined": lambda t: gk_cv_combined(t),
        "he_forward": lambda t: he_cv_forward(t, get_weight("bartlett")),
        "he_adjoint": lambda t: he_cv_adjoint(t, get_weight("bartlett")),
        "he_combined": lambda t: he_cv_combined(t, get_weight("bartlett")),
    }

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_zero_surrogate_is_bitwise_plain(self, ou_small, name):
        plain = gk_estimate(ou_small) if name.startswith("gk") else he_estimate(ou_small, get_weight("bartlett"))
        cv = self.VARIANTS[name](ou_small)
        assert cv.rho_hat == plain.rho_hat
        np.testing.assert_array_equal(cv.variance_vs_time, plain.variance_vs_time)
        np.testing.assert_array_equal(cv.replica_values, plain.replica_values)

    def test_corrected_series_vanish_for_exact_surrogate(self, ou_exact):
        assert np.max(np.abs(ou_exact.series["g_fwd"])) <= 1e-6
        assert np.max(np.abs(ou_exact.series["f_adj"])) <= 1e-6

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_exact_surrogate_collapse(self, ou_exact, name):
        assert self.VARIANTS[name](ou_exact).final_variance <= 1e-8

    @pytest.mark.parametrize("name", ["gk_forward", "gk_adjoint", "gk_combined", "he_forward", "he_adjoint", "he_combined"])
    def test_static_plus_correction_matches_plain(self, ou_model, half_batches, name):
        # HE carries an O(1/T) bias that scales with the observables, so it is
        # checked on a longer horizon
        trajs = half_batches[name[:2]]
        psi = lambda x: 0.5 * x[:, 0]
        _, variant = split_name(name)
        static = 0.0
        if variant in ("forward", "combined"):
            static += static_term_quadrature(ou_model, identity, psi)
        if variant in ("adjoint", "combined"):
            static += static_term_quadrature(ou_model, psi, identity)
        if variant == "combined":
            # <psi_f*, L psi_g> with L(0.5 x) = -0.5 x
            static += static_term_quadrature(ou_model, psi, lambda x: -0.5 * x[:, 0])
        w = get_weight("constant")
        plain = run_estimator("gk" if name.startswith("gk") else "he", trajs, w=w)
        corr = run_estimator(name, trajs, w=w)
        diff = plain.replica_values - (static + corr.replica_values)
        assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / np.sqrt(len(diff))


class TestDispatch:
    def test_split_name(self):
        assert split_name("gk") == ("gk", "plain")
        assert split_name("he_combined") == ("he", "combined")
        with pytest.raises(ConfigError):
            split_name("gk_sideways")
        with pytest.raises(ConfigError):
            split_name("ge")

    def test_series_names(self):
        assert series_names("plain") == ("f", "g")
        assert series_names("combined", "f1", "h31") == ("f1_adj", "h31_fwd")

    def test_observables_for(self):
        obs = {"f": 1, "g": 2, "g_fwd": 3, "f_adj": 4}
        assert observables_for("gk_adjoint", obs) == ({"g": 2}, {"f_adj": 4})
        assert observables_for("he_forward", obs) == ({"f": 1, "g_fwd": 3}, {})
        with pytest.raises(MissingSeriesError):
            observables_for("gk_forward", {"f": 1, "g": 2})

    def test_he_needs_weight(self, ou_small):
        with pytest.raises(ConfigError):
            run_estimator("he", ou_small)

    @pytest.mark.parametrize("name", ESTIMATORS)
    def test_run_estimator_names(self, ou_small, name):
        assert run_estimator(name, ou_small, w=get_weight("constant")).estimator == name

    def test_checkpoints(self):
        np.testing.assert_array_equal(checkpoints(26, 10), [10, 20, 25])
        np.testing.assert_array_equal(checkpoints(2, 10), [1])


class TestStaticTerms:
    def test_mc_zero(self):
        trajs = batch_from(0.1, a=np.ones((2, 5)), b=np.zeros((2, 5)))
        assert static_term_mc(trajs, "a", "b") == 0.0

    def test_mc_ones(self):
        trajs = batch_from(0.1, a=np.ones((2, 5)), b=np.ones((2, 5)))
        assert static_term_mc(trajs, "a", "b") == pytest.approx(1.0, abs=1e-14)

    def test_mc_empty(self):
        with pytest.raises(ConfigError):
            static_term_mc(TrajectoryBatch(0.1, 0.4, {"a": np.empty((0, 5))}), "a", "a")

    def test_mc_ou_second_moment(self):
        trajs = ou_cv_batch(0, 1000, 50.0, 8)
        assert static_term_mc(trajs, "f", "g") == pytest.approx(1.0, abs=0.05)

    def test_quadrature_ou(self, ou_model):
        assert static_term_quadrature(ou_model, identity, identity) == pytest.approx(1.0, rel=1e-6)

    def test_quadrature_fast_block(self):
        model = make_multiscale_fast(MultiscaleParams())
        assert static_term_quadrature(model, identity, identity) == pytest.approx(0.5, rel=1e-6)

    def test_quadrature_fourth_moment(self, ou_model):
        assert static_term_quadrature(ou_model, identity, lambda x: x[:, 0] ** 3) == pytest.approx(3.0, rel=1e-6)

    def test_quadrature_unsupported(self):
        with pytest.raises(ConfigError, match="static_term_mc"):
            static_term_quadrature(make_langevin(LangevinParams()), identity, identity)

    def test_iid_matches_quadrature(self, ou_model):
        val = static_term_iid(ou_model, identity, identity, np.random.default_rng(0), n=200_000)
        assert val == pytest.approx(1.0, abs=4 * np.sqrt(2.0 / 200_000))


class TestPredictions:
    def test_gk_slope(self):
        assert asymptotic_variance_prediction("gk", {"f_norm2": 1.0, "g_energy": 1.0}) == 2.0

    def test_he_bartlett(self):
        zb = zeta(get_weight("bartlett"))
        assert asymptotic_variance_prediction("he", {"f_energy": 1.0, "g_energy": 1.0}, zb) == pytest.approx(1.0)

    @pytest.mark.parametrize("kind", ESTIMATORS)
    def test_zero_inner_product(self, kind):
        ip = {"f_norm2": 0.0, "f_energy": 0.0, "g_energy": 1.0}
        assert asymptotic_variance_prediction(kind, ip, 0.5) == 0.0

    def test_scaled_surrogates(self):
        assert asymptotic_variance_prediction("gk_combined", {"f_norm2": 0.25, "g_energy": 0.25}) == 0.125
        assert asymptotic_variance_prediction("he_combined", {"f_energy": 0.25, "g_energy": 0.25}, 0.25) == 0.0625

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            asymptotic_variance_prediction("ml", {})
