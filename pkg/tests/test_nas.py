import csv
import io
import math

import numpy as np
import pytest

from nexume import ehsim, nas
from nexume.devmodel import builtin_profile
from nexume.dynfit.training import TrainConfig
from nexume.errors import EmptySpace, NoFeasibleCandidate, ParseError

MID = builtin_profile("synthetic_mid")
TRACE = ehsim.EnergyTrace.constant(500.0, 0.01)


class TestSLOFilter:
    def test_reject_accept_accept(self):
        rows = [("cfg-a", 380.0, 0.91), ("cfg-b", 260.0, 0.87), ("cfg-c", 280.0, 0.89)]
        d = nas.slo_filter(rows, 300.0)
        assert [x.accepted for x in d] == [False, True, True]
        assert d[0].reason == "latency over SLO"

    def test_dominated_rejected(self):
        d = nas.slo_filter([("a", 250.0, 0.9), ("b", 280.0, 0.8)], 300.0)
        assert [x.accepted for x in d] == [True, False] and d[1].reason == "dominated"

    def test_min_accuracy(self):
        d = nas.slo_filter([("a", 250.0, 0.5)], 300.0, min_accuracy=0.6)
        assert not d[0].accepted

    def test_without_accuracy(self):
        assert [x.accepted for x in nas.slo_filter([("a", 380, None), ("b", 260, None)], 300)] == [False, True]


class TestEnumerate:
    def test_completeness(self):
        space = nas.SearchSpace(conv_counts=(2, 3), filters=(8, 16), kernels=((3, 3), (5, 3)), policies=("l2", "taylor"))
        assert len(space.candidates()) == space.size() == (4**2 + 4**3) * 2

    def test_full_option_product(self):
        space = nas.SearchSpace(conv_counts=(2, 3, 4), filters=(8, 16), kernels=((3, 3), (5, 5), (5, 3)))
        assert space.size() == 6**2 + 6**3 + 6**4 == len(space.candidates())

    def test_infinite_slo(self):
        ests = nas.enumerate_and_filter(nas.SearchSpace(), MID, TRACE, math.inf)
        assert all(e.feasible == e.candidate.fits((1, 12, 12)) for e in ests)
        assert sum(e.feasible for e in ests) == len(ests) - 8

    def test_single_candidate(self):
        space = nas.SearchSpace(conv_counts=(2,), filters=(8,), kernels=((3, 3),))
        (e,) = nas.enumerate_and_filter(space, MID, TRACE, 1e9)
        lat, energy = nas.estimate(e.candidate, MID, TRACE)
        assert (e.est_latency_ms, e.energy_uj) == (lat, energy)

    def test_soundness(self):
        ests = nas.enumerate_and_filter(nas.SearchSpace(), MID, TRACE, 400.0)
        assert any(e.feasible for e in ests) and any(not e.feasible for e in ests)
        assert all(e.est_latency_ms <= 400.0 for e in ests if e.feasible)

    def test_unfit_candidates_flagged(self):
        space = nas.SearchSpace(conv_counts=(3,), kernels=((5, 3),), filters=(8,), input_shape=(1, 10, 10))
        (e,) = nas.enumerate_and_filter(space, MID, TRACE, math.inf)
        assert not e.feasible and e.reason == "does not fit input"

    def test_empty(self):
        with pytest.raises(EmptySpace):
            nas.enumerate_and_filter(nas.SearchSpace(conv_counts=()), MID, TRACE, 300.0)

    def test_latency_model(self):
        cand = nas.Candidate(((8, 3, 3), (8, 3, 3)))
        net = cand.build()
        macs = net.layer_macs()
        t_ms = sum(m * MID.mac_time(net.layers[i].kernel) for i, m in macs.items()) * 1e-6
        e_uj = sum(m * MID.mac_energy(net.layers[i].kernel) for i, m in macs.items()) / 1000
        lat, energy = nas.estimate(cand, MID, TRACE, initial_uj=10.0)
        assert energy == pytest.approx(e_uj)
        assert lat == pytest.approx(t_ms + (e_uj - 10.0) / 500.0 * 1000)
        assert nas.estimate(cand, MID, TRACE, initial_uj=1e9)[0] == pytest.approx(t_ms)
        assert nas.estimate(cand, MID, ehsim.EnergyTrace.constant(0.0))[0] == math.inf


class TestDescriptor:
    def test_round_trip(self):
        c = nas.Candidate(((8, 3, 3), (16, 5, 5), (16, 5, 3)), "taylor")
        assert c.descriptor() == "3xCONV2D:8[3x3],16[5x5],16[5x3],AvgPool,FC"
        assert nas.parse_descriptor(c.descriptor(True)) == c

    def test_spaces_and_case(self):
        c = nas.parse_descriptor("4 x CONV2D: 8[3x3], 8[5x5], 16[5x5], 16[5x5], AvgPool, L2Drop, FC")
        assert len(c.convs) == 4 and c.policy == "l2"

    @pytest.mark.parametrize("bad", ["CONV2D:8[3x3]", "2xCONV2D:8[3x3],FC", "1xCONV2D:8[3y3],FC", "1xCONV2D:8[3x3],Max"])
    def test_errors(self, bad):
        with pytest.raises(ParseError):
            nas.parse_descriptor(bad)


def separable(n, seed):
    """Left-half vs right-half brightness: linearly separable 6x6 images."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(0, 0.2, (n, 1, 6, 6))
    for k in range(n):
        x[k, 0, :, :3] += 1.0 if y[k] == 0 else 0.0
        x[k, 0, :, 3:] += 1.0 if y[k] == 1 else 0.0
    return x, y


def two_candidates():
    space = nas.SearchSpace(conv_counts=(2,), filters=(4,), kernels=((3, 3),), input_shape=(1, 6, 6), n_classes=2)
    small = nas.enumerate_and_filter(space, MID, TRACE, math.inf)
    big_space = nas.SearchSpace(conv_counts=(2,), filters=(8,), kernels=((3, 3),), input_shape=(1, 6, 6), n_classes=2)
    return small + nas.enumerate_and_filter(big_space, MID, TRACE, math.inf)


class TestSearch:
    cfg = TrainConfig(seed=3, lr=0.05, batch_size=16)

    def run(self, steps):
        return nas.search(two_candidates(), steps, separable(128, 0), separable(64, 1), self.cfg, (1, 6, 6), 2)

    def test_converge_and_reproducible(self):
        a, b = self.run(150), self.run(150)
        assert [e.val_loss for e in a] == [e.val_loss for e in b]
        assert [e.candidate for e in a] == [e.candidate for e in b]
        assert all(e.val_accuracy >= 0.95 for e in a)

    def test_zero_budget_ranks_by_initial_loss(self):
        ranked = self.run(0)
        for e in ranked:
            net = e.candidate.build((1, 6, 6), 2, seed=self.cfg.seed)
            x, y = separable(64, 1)
            assert net.loss(x, y) == pytest.approx(e.val_loss)
        assert [e.val_loss for e in ranked] == sorted(e.val_loss for e in ranked)

    def test_no_feasible(self):
        ests = nas.enumerate_and_filter(nas.SearchSpace(), MID, TRACE, 0.0)
        with pytest.raises(NoFeasibleCandidate):
            nas.search(ests, 1, separable(8, 0), separable(8, 1))

    def test_report_csv(self):
        text = nas.report_csv(self.run(0))
        rows = list(csv.reader(io.StringIO(text)))
        assert tuple(rows[0]) == nas.REPORT_FIELDS and len(rows) == 3
        assert nas.parse_descriptor(rows[1][0]).convs[0][0] in (4, 8)
