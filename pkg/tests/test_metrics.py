"""Voronoi losses and conditional-density distances.

Loss oracles are hand-computed sums over explicit small measures; distance
oracles are the closed-form Gaussian TV and Hellinger expressions averaged
over the input distribution with Gauss-Hermite quadrature.
"""

import math

import numpy as np
import pytest
from scipy.stats import norm

from moe_lab import metrics, model
from moe_lab.analysis import UnsupportedCellSize


def _pinned(atoms, tau, gate=None):
    return model.MixingMeasure(tuple(atoms), tau, gate or model.GateSpec.linear(), pinned=True)


def _free(atoms, tau, gate=None):
    return model.MixingMeasure(tuple(atoms), tau, gate or model.GateSpec.linear(), pinned=False)


def _ref_2():
    return _free(
        (
            model.Atom(0.2, [-3.0], [-1.0], 2.0, 0.3),
            model.Atom(-0.1, [3.0], [1.0], -2.0, 0.5),
        ),
        0.8,
    )


class TestLossKind:
    def test_parse_and_str_round_trip(self):
        for text in ("D1(2)", "D2", "D3(4)", "D4", "D5", "D6", "D1(2.5)"):
            assert str(metrics.LossKind.parse(text)) == text

    def test_exponent_rules(self):
        with pytest.raises(ValueError):
            metrics.LossKind("D1")
        with pytest.raises(ValueError):
            metrics.LossKind("D2", 2.0)
        with pytest.raises(ValueError):
            metrics.LossKind("D1", 0.5)
        with pytest.raises(ValueError):
            metrics.LossKind("D7")
        with pytest.raises(ValueError):
            metrics.LossKind.parse("D1(2")


class TestVoronoiAssign:
    def test_nearest_assignment(self):
        ref = _ref_2()
        fitted = _free(
            (
                model.Atom(0.0, [-2.9], [-1.1], 2.1, 0.35),
                model.Atom(0.0, [2.8], [0.9], -1.9, 0.45),
                model.Atom(0.0, [3.2], [1.2], -2.2, 0.55),
            ),
            0.8,
        )
        assign = metrics.voronoi_assign(fitted, ref)
        assert assign.cells == ((0,), (1, 2))
        assert assign.distances.shape == (3, 2)

    def test_tie_goes_to_lowest_index(self):
        ref = _free(
            (
                model.Atom(0.0, [1.0], [0.0], 0.0, 0.5),
                model.Atom(0.0, [-1.0], [0.0], 0.0, 0.5),
            ),
            1.0,
        )
        fitted = _free((model.Atom(0.0, [0.0], [0.0], 0.0, 0.5),), 1.0)
        assign = metrics.voronoi_assign(fitted, ref)
        assert assign.cells == ((0,), ())

    def test_dimension_mismatch(self):
        ref = _ref_2()
        fitted = _free((model.Atom(0.0, [0.0, 0.0], [0.0, 0.0], 0.0, 0.5),), 1.0)
        with pytest.raises(ValueError):
            metrics.voronoi_assign(fitted, ref)


class TestKij:
    def test_hand_value(self):
        delta = [1.0, 2.0, 3.0, 4.0, 5.0]
        kappas = [1.0, 2.0, 1.0, 1.0, 0.5]
        expect = 1.0 + 4.0 + 3.0 + 4.0 + math.sqrt(5.0)
        assert metrics.kij(delta, kappas) == pytest.approx(expect, rel=1e-14)

    def test_validation(self):
        with pytest.raises(ValueError):
            metrics.kij([1.0, 2.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            metrics.kij([-1.0, 0, 0, 0, 0], [1.0, 1, 1, 1, 1])


class TestAtomDeltas:
    def test_hand_values(self):
        at = model.Atom(0.0, [1.0, 2.0], [0.5, -0.5], 1.0, 0.4)
        ref = model.Atom(0.0, [1.0, 0.0], [0.5, 0.5], -1.0, 0.1)
        got = metrics.atom_deltas(at, 0.9, ref, 0.4)
        np.testing.assert_allclose(got, [2.0, 0.5, 1.0, 2.0, 0.3], rtol=1e-14)


class TestEvalLoss:
    def test_zero_at_reference(self):
        ref = _ref_2()
        for text in ("D1(2)", "D2", "D3(2)", "D4", "D5", "D6"):
            kind = metrics.LossKind.parse(text)
            rep = metrics.eval_loss(kind, ref, ref)
            assert rep.value == pytest.approx(0.0, abs=1e-14)
            assert rep.empty_cells == ()

    def test_d1_hand_value(self):
        ref = _ref_2()
        fitted = _free(
            (
                model.Atom(0.3, [-2.5], [-1.2], 2.2, 0.4),
                model.Atom(-0.2, [3.5], [0.9], -2.1, 0.6),
            ),
            1.0,
        )
        w_f = np.exp([0.3 / 1.0, -0.2 / 1.0])
        w_r = np.exp([0.2 / 0.8, -0.1 / 0.8])
        d_tau = abs(1.0 - 0.8)
        cells = [
            (0, [0.5, d_tau, 0.2, 0.2, 0.1]),
            (1, [0.5, d_tau, 0.1, 0.1, 0.1]),
        ]
        expect = 0.0
        for j, dl in cells:
            expect += abs(w_f[j] - w_r[j])
            expect += w_f[j] * sum(v**2 for v in dl)
        got = metrics.eval_loss(metrics.LossKind("D1", 2.0), fitted, ref)
        assert got.value == pytest.approx(expect, rel=1e-12)

    def test_d2_ignores_gate_deltas(self):
        ref = _ref_2()
        # gate parameters far off, regression parameters exact
        fitted = _free(
            (
                model.Atom(0.2, [-2.0], [-1.0], 2.0, 0.3),
                model.Atom(-0.1, [2.0], [1.0], -2.0, 0.5),
            ),
            0.8,
        )
        got = metrics.eval_loss(metrics.LossKind("D2"), fitted, ref)
        assert got.value == pytest.approx(0.0, abs=1e-14)

    def test_d5_minus_d2_is_weighted_gate_term(self):
        rng = np.random.default_rng(2)
        ref = _ref_2()
        for _ in range(5):
            atoms = tuple(
                model.Atom(
                    float(rng.normal(0, 0.3)),
                    rng.normal(0, 2, 1),
                    rng.normal(0, 1, 1),
                    float(rng.normal(0, 2)),
                    float(rng.uniform(0.2, 1.0)),
                )
                for _ in range(3)
            )
            fitted = _free(atoms, float(rng.uniform(0.5, 1.5)))
            d5 = metrics.eval_loss(metrics.LossKind("D5"), fitted, ref)
            d2 = metrics.eval_loss(metrics.LossKind("D2"), fitted, ref)
            assign = metrics.voronoi_assign(fitted, ref)
            extra = 0.0
            for j, cell in enumerate(assign.cells):
                for i in cell:
                    at = fitted.atoms[i]
                    w = math.exp(at.beta0 / fitted.tau)
                    dl = metrics.atom_deltas(at, fitted.tau, ref.atoms[j], ref.tau)
                    extra += w * (dl[0] + dl[1])
            assert d5.value - d2.value == pytest.approx(extra, rel=1e-12)

    def test_d4_exponents_by_cell_size(self):
        ref = _ref_2()
        # two atoms in cell 0, one in cell 1
        fitted = _free(
            (
                model.Atom(0.1, [-3.1], [-1.0], 2.3, 0.35),
                model.Atom(0.0, [-2.9], [-0.9], 1.8, 0.25),
                model.Atom(-0.1, [3.0], [1.1], -2.4, 0.52),
            ),
            0.8,
        )
        w = np.exp(np.array([0.1, 0.0, -0.1]) / 0.8)
        w_r = np.exp(np.array([0.2, -0.1]) / 0.8)
        # cell 0 has two atoms: exponent 4 on |db|, 2 on |dnu|
        expect = abs(w[0] + w[1] - w_r[0])
        expect += w[0] * (abs(2.3 - 2.0) ** 4 + abs(0.35 - 0.3) ** 2)
        expect += w[1] * (abs(1.8 - 2.0) ** 4 + abs(0.25 - 0.3) ** 2)
        # cell 1 is a singleton: plain absolute deltas
        expect += abs(w[2] - w_r[1])
        expect += w[2] * (abs(-2.4 + 2.0) + abs(0.52 - 0.5))
        got = metrics.eval_loss(metrics.LossKind("D4"), fitted, ref)
        assert got.value == pytest.approx(expect, rel=1e-12)

    def test_d6_exponents_by_cell_size(self):
        ref = _ref_2()
        fitted = _free(
            (
                model.Atom(0.1, [-3.1], [-1.2], 2.3, 0.35),
                model.Atom(0.0, [-2.9], [-0.9], 1.8, 0.25),
                model.Atom(-0.1, [3.0], [1.1], -2.4, 0.52),
            ),
            0.9,
        )
        w = np.exp(np.array([0.1, 0.0, -0.1]) / 0.9)
        w_r = np.exp(np.array([0.2, -0.1]) / 0.8)
        expect = abs(w[0] + w[1] - w_r[0])
        for i in (0, 1):
            at = fitted.atoms[i]
            dl = metrics.atom_deltas(at, 0.9, ref.atoms[0], 0.8)
            expect += w[i] * (dl[0] ** 2 + dl[1] ** 2 + dl[2] ** 2 + dl[3] ** 4 + dl[4] ** 2)
        expect += abs(w[2] - w_r[1])
        dl = metrics.atom_deltas(fitted.atoms[2], 0.9, ref.atoms[1], 0.8)
        expect += w[2] * dl.sum()
        got = metrics.eval_loss(metrics.LossKind("D6"), fitted, ref)
        assert got.value == pytest.approx(expect, rel=1e-12)

    def test_empty_cell_contributes_reference_weight(self):
        ref = _ref_2()
        fitted = _free((model.Atom(0.0, [-3.0], [-1.0], 2.0, 0.3),), 0.8)
        got = metrics.eval_loss(metrics.LossKind("D2"), fitted, ref)
        assert got.empty_cells == (1,)
        w_r1 = math.exp(-0.1 / 0.8)
        assert got.per_cell[1][0] == pytest.approx(w_r1, rel=1e-12)

    def test_unsupported_cell_size_raises(self):
        ref = _ref_2()
        atoms = tuple(
            model.Atom(0.0, [-3.0 + 0.01 * i], [-1.0], 2.0, 0.3) for i in range(4)
        )
        fitted = _free(atoms, 0.8)
        with pytest.raises(UnsupportedCellSize):
            metrics.eval_loss(metrics.LossKind("D4"), fitted, ref)
        # families without cell-size exponents handle size-4 cells fine
        metrics.eval_loss(metrics.LossKind("D1", 2.0), fitted, ref)

    def test_report_serialization(self):
        ref = _ref_2()
        rep = metrics.eval_loss(metrics.LossKind("D5"), ref, ref)
        obj = rep.to_obj()
        assert obj["loss_kind"] == "D5"
        assert obj["schema"] == 1
        assert len(obj["per_cell"]) == 2


def _tv_gauss_equal_var(dmu, sigma):
    return 2.0 * norm.cdf(abs(dmu) / (2.0 * sigma)) - 1.0


def _hermite_mean(fn, nodes=150):
    xs, ws = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(ws / math.sqrt(2 * math.pi) * fn(xs)))


class TestTvDistance:
    def test_constant_shift_oracle(self):
        # same slope and variance: TV is the same at every x, so se ~ 0 and
        # the MC mean must match the closed form up to quadrature error
        a = _pinned((model.Atom(0.0, [0.0], [1.0], 0.0, 0.5),), 1.0)
        b = _pinned((model.Atom(0.0, [0.0], [1.0], 0.9, 0.5),), 1.0)
        est = metrics.tv_distance(a, b, n_mc=50, seed=1)
        expect = _tv_gauss_equal_var(0.9, math.sqrt(0.5))
        assert est.se < 1e-12
        assert est.value == pytest.approx(expect, abs=1e-8)

    def test_x_dependent_oracle(self):
        a = _pinned((model.Atom(0.0, [0.0], [1.0], 0.0, 0.4),), 1.0)
        b = _pinned((model.Atom(0.0, [0.0], [0.4], 0.3, 0.4),), 1.0)
        est = metrics.tv_distance(a, b, n_mc=400, seed=2)
        sig = math.sqrt(0.4)
        expect = _hermite_mean(lambda x: _tv_gauss_equal_var(0.6 * x - 0.3, sig))
        assert abs(est.value - expect) <= 2.0 * est.se + 1e-6

    def test_identical_measures_zero(self):
        a = _ref_2()
        est = metrics.tv_distance(a, a, n_mc=20, seed=3)
        assert est.value == pytest.approx(0.0, abs=1e-12)

    def test_bounds_and_validation(self):
        a = _ref_2()
        b = _pinned((model.Atom(0.0, [0.0, 0.0], [1.0, 0.0], 0.0, 0.5),), 1.0)
        with pytest.raises(ValueError):
            metrics.tv_distance(a, b)
        with pytest.raises(ValueError):
            metrics.tv_distance(a, a, n_mc=1)


class TestHellingerDistance:
    def test_unequal_variance_oracle(self):
        # constant mean gap with different variances has a closed form
        a = _pinned((model.Atom(0.0, [0.0], [0.0], 0.0, 0.3),), 1.0)
        b = _pinned((model.Atom(0.0, [0.0], [0.0], 0.7, 0.6),), 1.0)
        est = metrics.hellinger_distance(a, b, n_mc=50, seed=4)
        s1, s2 = 0.3, 0.6
        h2 = 1.0 - math.sqrt(2.0 * math.sqrt(s1 * s2) / (s1 + s2)) * math.exp(
            -0.49 / (4.0 * (s1 + s2))
        )
        assert est.value == pytest.approx(math.sqrt(h2), abs=1e-7)

    def test_mixture_case_bounded_by_one(self):
        a = _ref_2()
        b = _pinned((model.Atom(0.0, [0.0], [0.0], 0.0, 4.0),), 1.0)
        bb = _free(
            (
                model.Atom(0.0, [0.0], [0.0], 0.0, 4.0),
                model.Atom(0.0, [0.0], [0.0], 1.0, 4.0),
            ),
            1.0,
        )
        for other in (b, bb):
            est = metrics.hellinger_distance(a, other, n_mc=60, seed=5)
            assert 0.0 <= est.value <= 1.0

    def test_per_x_bounds_vs_tv(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            atoms = tuple(
                model.Atom(
                    float(rng.normal(0, 0.2)),
                    rng.normal(0, 1, 1),
                    rng.normal(0, 1, 1),
                    float(rng.normal(0, 1)),
                    float(rng.uniform(0.2, 1.0)),
                )
                for _ in range(2)
            )
            a = _free(atoms, 0.9)
            b = _ref_2()
            h2, tv = metrics.hellinger_tv_bounds_per_x(a, b, n_mc=40, seed=7)
            assert np.all(h2 <= tv + 1e-10)
            assert np.all(tv <= np.sqrt(2.0 * h2) + 1e-10)

    def test_triangle_inequality_shared_draws(self):
        # same seed means the same x draws, so the pointwise triangle
        # inequality survives the average up to quadrature error
        rng = np.random.default_rng(8)
        for trial in range(3):
            ms = []
            for _ in range(3):
                atoms = tuple(
                    model.Atom(
                        float(rng.normal(0, 0.2)),
                        rng.normal(0, 1, 1),
                        rng.normal(0, 1, 1),
                        float(rng.normal(0, 1.5)),
                        float(rng.uniform(0.2, 1.2)),
                    )
                    for _ in range(2)
                )
                ms.append(_free(atoms, float(rng.uniform(0.5, 1.2))))
            t12 = metrics.tv_distance(ms[0], ms[1], n_mc=60, seed=9).value
            t23 = metrics.tv_distance(ms[1], ms[2], n_mc=60, seed=9).value
            t13 = metrics.tv_distance(ms[0], ms[2], n_mc=60, seed=9).value
            assert t13 <= t12 + t23 + 1e-9


class TestScaleInvariance:
    def test_linear_gate_scaling_is_invisible(self):
        atoms = (
            model.Atom(0.4, [-2.0], [-1.0], 2.0, 0.3),
            model.Atom(0.0, [0.0], [1.0], -2.0, 0.5),
        )
        G = model.MixingMeasure(atoms, 0.7, model.GateSpec.linear(), pinned=True)
        for lam in (0.5, 2.0, 7.0):
            est = metrics.tv_distance(G, model.scale_measure(G, lam), n_mc=100, seed=11)
            assert est.value < 1e-10

    def test_sigmoid_gate_scaling_is_visible(self):
        gate = model.GateSpec.activated(model.Activation("sigmoid"))
        atoms = (
            model.Atom(0.4, [-2.0], [-1.0], 2.0, 0.3),
            model.Atom(0.0, [0.0], [1.0], -2.0, 0.5),
        )
        G = model.MixingMeasure(atoms, 0.7, gate, pinned=True)
        est = metrics.tv_distance(G, model.scale_measure(G, 2.0), n_mc=100, seed=12)
        assert est.value > 1e-3
