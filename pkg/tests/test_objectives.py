import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_records
from mocsurv.autodiff import Graph, check_gradients
from mocsurv.data import SurvivalRecord
from mocsurv.objectives import (
    MOC_TERMS,
    PairPredictions,
    cox_npll,
    intra_modal_loss,
    moc_loss,
    oc_loss,
    oc_output_grads,
    ratio_loss_graph,
    total,
)

unit = st.floats(0.01, 0.99)


def logit(r):
    return math.log(r / (1.0 - r))


class TestOcLoss:
    def test_examples(self):
        assert oc_loss(0.5, 0.5) == 1.0
        assert oc_loss(0.8, 0.4) == 2.0
        assert oc_loss(0.1, 0.9) == pytest.approx(1 / 9, rel=1e-15)

    @pytest.mark.parametrize("bad", [(0.0, 0.5), (0.5, 1.0), (-0.1, 0.5), (0.5, 1.2)])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            oc_loss(*bad)

    @settings(max_examples=200)
    @given(unit, unit)
    def test_loss_above_one_iff_numerator_larger(self, a, b):
        assert (oc_loss(a, b) > 1) == (a > b)


class TestOutputGrads:
    def test_examples(self):
        dA, dB = oc_output_grads(0.8, 0.4)
        assert dA == pytest.approx(0.4, rel=1e-15)
        assert dB == pytest.approx(-1.2, rel=1e-15)
        assert oc_output_grads(0.5, 0.5) == (0.5, -0.5)
        assert oc_output_grads(1 - 1e-12, 0.5)[0] < 1e-11

    def test_finite_differences_through_sigmoid(self):
        h = 1e-6
        oa, ob = logit(0.8), logit(0.4)

        def f(x, y):
            return (1 / (1 + math.exp(-x))) / (1 / (1 + math.exp(-y)))

        assert (f(oa + h, ob) - f(oa - h, ob)) / (2 * h) == pytest.approx(0.4, rel=1e-8)
        assert (f(oa, ob + h) - f(oa, ob - h)) / (2 * h) == pytest.approx(-1.2, rel=1e-8)

    @settings(max_examples=200)
    @given(unit, unit)
    def test_sign_property(self, a, b):
        dA, dB = oc_output_grads(a, b)
        assert dA > 0 and dB < 0

    def test_autodiff_matches_closed_form(self):
        g = Graph()
        oa, ob = g.param("OA"), g.param("OB")
        terms = ratio_loss_graph(g, {"pA": g.sigmoid(oa), "pB": g.sigmoid(ob)}, "oc_unimodal_path")
        g.set_output(total(g, terms.values()))
        rng = np.random.default_rng(0)
        for _ in range(100):
            ra, rb = rng.uniform(0.01, 0.99, size=2)
            g.forward({"OA": np.array([[logit(ra)]]), "OB": np.array([[logit(rb)]])}, {})
            grads = g.backward()
            dA, dB = oc_output_grads(ra, rb)
            assert grads["OA"][0, 0] == pytest.approx(dA, rel=1e-8)
            assert grads["OB"][0, 0] == pytest.approx(dB, rel=1e-8)


class TestMultimodal:
    def test_symmetric_point(self):
        v = moc_loss(PairPredictions(0.5, 0.5, 0.5, 0.5))
        assert v.loss == 5.0
        assert intra_modal_loss(PairPredictions(0.5, 0.5, 0.5, 0.5)).loss == 2.0

    def test_quarter_three_quarter(self):
        v = moc_loss(PairPredictions(p_A=0.25, g_A=0.25, p_B=0.75, g_B=0.75))
        assert v.loss == pytest.approx(5 / 3, rel=1e-15)

    def test_intra_example(self):
        v = intra_modal_loss(PairPredictions(p_A=0.8, g_A=0.5, p_B=0.4, g_B=0.5))
        assert v.loss == 3.0

    @settings(max_examples=200)
    @given(unit, unit, unit, unit)
    def test_breakdown(self, pa, ga, pb, gb):
        pp = PairPredictions(pa, ga, pb, gb)
        m, i = moc_loss(pp), intra_modal_loss(pp)
        assert tuple(m.terms) == MOC_TERMS
        assert abs(sum(m.terms.values()) - m.loss) <= 1e-12 * m.loss
        cross = m.terms["pA/gB"] + m.terms["gA/pB"] + m.terms["fused"]
        assert i.loss == pytest.approx(m.loss - cross, rel=1e-12)
        assert m.loss > 0

    def test_invalid_predictions(self):
        with pytest.raises(ValueError):
            PairPredictions(0.5, 1.0, 0.5, 0.5)

    @pytest.mark.parametrize("mode", ["moc", "intra_only"])
    def test_graph_matches_functions(self, mode):
        rng = np.random.default_rng(3)
        vals = rng.uniform(0.05, 0.95, size=(4, 6, 1))
        g = Graph()
        nodes = {k: g.input(k) for k in ("pA", "gA", "pB", "gB")}
        terms = ratio_loss_graph(g, nodes, mode)
        g.set_output(total(g, terms.values()))
        out = g.forward({}, dict(zip(("pA", "gA", "pB", "gB"), vals)))
        fn = moc_loss if mode == "moc" else intra_modal_loss
        expect = sum(fn(PairPredictions(*vals[:, j, 0])).loss for j in range(6))
        assert out == pytest.approx(expect, rel=1e-12)

    def test_clamp_guards_denominator(self):
        g = Graph()
        terms = ratio_loss_graph(g, {"pA": g.input("a"), "pB": g.input("b")}, "oc_unimodal_path")
        g.set_output(total(g, terms.values()))
        out = g.forward({}, {"a": np.array([[0.5]]), "b": np.array([[0.0]])})
        assert out == pytest.approx(0.5 / 1e-6)


R = SurvivalRecord


class TestCox:
    def test_two_uncensored(self):
        recs = [R("a", 1, True), R("b", 2, True)]
        assert cox_npll([0.3, 0.3], recs) == pytest.approx(math.log(2), abs=1e-15)

    def test_single(self):
        assert cox_npll([1.7], [R("a", 1, True)]) == 0.0

    def test_no_events(self):
        with pytest.raises(ValueError):
            cox_npll([0.0, 1.0], [R("a", 1, False), R("b", 2, False)])

    def test_hand_value_with_tie_and_censoring(self):
        recs = [R("a", 1, True), R("b", 2, True), R("c", 2, True), R("d", 3, False)]
        s = [0.1, 0.4, -0.2, 0.5]
        e = [math.exp(x) for x in s]
        expect = -(s[0] - math.log(sum(e))) - (s[1] - math.log(sum(e[1:]))) - (s[2] - math.log(sum(e[1:])))
        assert cox_npll(s, recs) == pytest.approx(expect, rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        recs = random_records(rng, 30, 0.3, tie_prob=0.5)
        s = rng.normal(size=30)
        assert abs(cox_npll(s + 7.3, recs) - cox_npll(s, recs)) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_graph_op(self, seed):
        rng = np.random.default_rng(seed)
        recs = random_records(rng, 12, 0.3, tie_prob=0.5)
        if not any(r.event for r in recs):
            recs[0] = R(recs[0].id, recs[0].time, True)
        g = Graph()
        s = g.param("s")
        g.set_output(g.cox_npll(s, g.input("t"), g.input("e")))
        inputs = {"t": np.array([r.time for r in recs]), "e": np.array([float(r.event) for r in recs])}
        scores = rng.normal(size=(12, 1))
        assert g.forward({"s": scores}, inputs) == pytest.approx(cox_npll(scores[:, 0], recs), rel=1e-12)
        assert check_gradients(g, {"s": scores}, inputs) < 1e-6
