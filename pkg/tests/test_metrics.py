"""Rate and aggregation tests against hand-computed oracles."""

import numpy as np
import pytest

from poisonsim.attack import AttackResult, InjectionEvent
from poisonsim.matchers import Template, train
from poisonsim.metrics import (
    RateSnapshot,
    aggregate,
    snapshot_rates,
    success_at,
    summary_csv,
    trajectories_csv,
)
from poisonsim.updating import AuthSystem, UpdatePolicy


def fixed_system(threshold=-1.0):
    emb = np.zeros((3, 2))
    matcher = train("centroid", Template.from_embeddings(emb),
                    threshold=threshold)
    return AuthSystem(extractor=None, template=Template.from_embeddings(emb),
                      matcher=matcher, policy=UpdatePolicy())


def test_snapshot_rates_hand_counts():
    # centroid at origin, threshold -1: accepted iff within unit distance
    sys = fixed_system()
    attacker = [[0.5, 0.0], [2.0, 0.0]]          # 1 of 2 accepted -> IAR 0.5
    genuine = [[0.1, 0.0], [0.0, 0.2], [3.0, 0.0], [0.0, 4.0]]  # FRR 0.5
    impostor = [[0.0, 0.5], [5.0, 0.0], [6.0, 0.0], [7.0, 0.0]]  # FAR 0.25
    snap = snapshot_rates(sys, attacker, genuine, impostor)
    assert snap == RateSnapshot(iar=0.5, far=0.25, frr=0.5, n_attacker=2,
                                n_genuine=4, n_impostor=4)
    assert snap.to_dict()["far"] == 0.25


def test_snapshot_rates_names_empty_set():
    sys = fixed_system()
    good = [[0.0, 0.0]]
    with pytest.raises(ValueError, match="genuine"):
        snapshot_rates(sys, good, np.empty((0, 2)), good)
    with pytest.raises(ValueError, match="impostor"):
        snapshot_rates(sys, good, good, np.empty((0, 2)))
    with pytest.raises(ValueError, match="attacker"):
        snapshot_rates(sys, np.empty((0, 2)), good, good)


def fake_result(success, accepted, failures=0, iar=None, far=None, frr=None,
                first_try=True, pair="a->v", mode="oracle"):
    length = accepted + 1
    iar = tuple(iar) if iar is not None else tuple(np.linspace(0, 1, length))
    far = tuple(far) if far is not None else tuple([0.05] * length)
    frr = tuple(frr) if frr is not None else tuple([0.03] * length)
    events = tuple(
        InjectionEvent(rank=k + 1, step_index=10 * (k + 1),
                       attempts=1 if first_try else 3,
                       step_fraction=0.1 * (k + 1), mean_distance=0.5,
                       sample_distance=0.5, embedding=(0.0,))
        for k in range(accepted))
    attacker, victim = pair.split("->")
    return AttackResult(
        success=success, injections_attempted=accepted + failures,
        injections_accepted=accepted, failures=failures, stagnated=False,
        iar_trajectory=iar, far_trajectory=far, frr_trajectory=frr,
        events=events, matcher_kind="centroid", scheme="flat", mode=mode,
        attacker_id=attacker, victim_id=victim)


def test_success_at_budgets():
    results = [fake_result(True, 1), fake_result(True, 5),
               fake_result(True, 12), fake_result(False, 2)]
    assert success_at(results, 1) == 0.25
    assert success_at(results, 5) == 0.5
    assert success_at(results, 10) == 0.5
    assert success_at(results, 12) == 0.75
    with pytest.raises(ValueError):
        success_at([], 1)


def test_aggregate_hand_oracle():
    r1 = fake_result(True, 1, failures=1, iar=(0.0, 0.8))
    r2 = fake_result(True, 3, failures=3, iar=(0.0, 0.2, 0.4, 0.9),
                     first_try=False)
    rep = aggregate([r1, r2])
    assert rep.n_runs == 2 and rep.n_success == 2
    assert rep.success_rates == {1: 0.5, 3: 1.0, 10: 1.0}
    assert rep.median_injections_to_success == 2.0
    assert rep.failed_attempts_per_success == pytest.approx(4 / 4)
    assert rep.first_pick_rate == pytest.approx(1 / 4)
    # r1's trajectory is padded with its final value 0.8
    np.testing.assert_allclose(rep.iar_mean, [0.0, 0.5, 0.6, 0.85])
    np.testing.assert_allclose(
        rep.iar_std,
        [np.std([0.0, 0.0]), np.std([0.8, 0.2]), np.std([0.8, 0.4]),
         np.std([0.8, 0.9])])
    d = rep.to_dict()
    assert d["success_rates"] == {"1": 0.5, "3": 1.0, "10": 1.0}
    assert d["median_injections_to_success"] == 2.0


def test_aggregate_all_failed_median_is_none_in_dict():
    rep = aggregate([fake_result(False, 2), fake_result(False, 0)])
    assert np.isinf(rep.median_injections_to_success)
    assert rep.to_dict()["median_injections_to_success"] is None


def test_trajectories_csv_layout():
    res = fake_result(True, 2, iar=(0.0, 0.5, 1.0), far=(0.1, 0.1, 0.2),
                      frr=(0.0, 0.0, 0.05), pair="u01->u02")
    text = trajectories_csv([res])
    lines = text.strip().split("\n")
    assert lines[0] == "pair_id,matcher,weighting,mode,injection_index,iar,far,frr"
    assert len(lines) == 4
    assert lines[1].startswith("u01->u02,centroid,flat,oracle,0,")
    cells = lines[3].split(",")
    assert cells[4] == "2"
    assert float(cells[5]) == 1.0 and float(cells[7]) == 0.05


def test_summary_csv_layout():
    rep = aggregate([fake_result(True, 1), fake_result(False, 4, failures=2)])
    text = summary_csv([("centroid/flat", rep)])
    lines = text.strip().split("\n")
    assert lines[0].split(",")[:3] == ["label", "n_runs", "n_success"]
    assert "success_at_1" in lines[0]
    assert lines[1].startswith("centroid/flat,2,1,")
