"""Acceptance suite for the frozen benchmark.

Each test covers one numbered acceptance criterion end to end on the default
(frozen) configuration and prints a single PASS/FAIL verdict line; run with

    pytest tests/test_acceptance.py -v -s

to see the verdicts stream. The population, calibrations, and attack sweeps
are built once per session and shared across criteria, so the whole suite
costs a few minutes on one core.
"""
from __future__ import annotations

import filecmp
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from poisonsim.attack import AttackConfig
from poisonsim.cli import main as cli_main
from poisonsim.config import default_config
from poisonsim.defense import (
    DetectorConfig,
    detect,
    poisoning_sequence,
    sanitize_hypersphere,
)
from poisonsim.features import random_extractor
from poisonsim.harness import (
    config_label,
    load_run,
    stage_attack,
    stage_calibrate,
    stage_detect,
    stage_fit_heuristic,
    stage_gen_data,
)
from poisonsim.matchers import Template, calibrate_threshold_at_eer, train
from poisonsim.metrics import success_at


def verdict(number: int, name: str, checks: list[tuple[str, bool]]) -> None:
    """Print one PASS/FAIL line for a criterion, then assert it."""
    ok = all(flag for _, flag in checks)
    failed = [label for label, flag in checks if not flag]
    line = f"criterion {number:02d} {name}: {'PASS' if ok else 'FAIL'}"
    if failed:
        line += f" ({'; '.join(failed)})"
    print(f"\n{line}")
    assert ok, line


class Bench:
    """Frozen-benchmark run directory with cached calibrations and sweeps."""

    def __init__(self, root: Path):
        stage_gen_data(default_config(), root)
        self.ctx = load_run(root)
        self._calibrated: set[str] = set()
        self._sweeps: dict = {}
        self.timings: dict = {}
        self._heuristic_fitted = False

    def calibrate(self, kind: str, scheme: str, nu: float | None = None):
        label = config_label(kind, scheme, nu)
        if label not in self._calibrated:
            stage_calibrate(self.ctx, kind, scheme, nu)
            self._calibrated.add(label)

    def sweep(self, mode: str, kind: str, scheme: str, nu: float | None = None):
        key = (mode, kind, scheme, nu)
        if key not in self._sweeps:
            self.calibrate(kind, scheme, nu)
            if mode == "heuristic" and not self._heuristic_fitted:
                stage_fit_heuristic(self.ctx, kind, scheme, nu)
                self._heuristic_fitted = True
            t0 = time.perf_counter()
            self._sweeps[key] = stage_attack(self.ctx, mode, kind, scheme, nu)
            self.timings[key] = time.perf_counter() - t0
        return self._sweeps[key]


@pytest.fixture(scope="session")
def bench(tmp_path_factory) -> Bench:
    return Bench(tmp_path_factory.mktemp("bench") / "run")


def median_injections(results) -> float:
    counts = [r.injections_accepted for r in results if r.success]
    return float(np.median(counts)) if counts else math.inf


# ---------------------------------------------------------------------------
# criterion 1: analytic Jacobians agree with central finite differences


def fd_jacobian(extractor, x, step=1e-5):
    x = np.asarray(x, dtype=float)
    J = np.zeros((extractor.d_emb, x.shape[0]))
    for i in range(x.shape[0]):
        hi, lo = x.copy(), x.copy()
        hi[i] += step
        lo[i] -= step
        J[:, i] = (extractor.extract(hi) - extractor.extract(lo)) / (2 * step)
    return J


def max_rel_error(a, b):
    scale = np.maximum(np.abs(b), 1e-3)
    return float(np.max(np.abs(a - b) / scale))


def test_criterion_01_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for draw in range(100):
        ext = random_extractor(64, 16, hidden=(48, 32), seed=1000 + draw)
        x = rng.random(64)
        worst = max(worst, max_rel_error(ext.jacobian(x), fd_jacobian(ext, x)))
    elapsed = time.perf_counter() - t0
    verdict(1, "jacobian vs finite differences", [
        (f"max rel err {worst:.2e} < 1e-5", worst < 1e-5),
        (f"elapsed {elapsed:.1f}s < 10s", elapsed < 10.0),
    ])


# ---------------------------------------------------------------------------
# criterion 2: nu-SVM fraction bounds and dense-QP agreement


def qp_oracle_objective(X, C):
    from cvxopt import matrix, solvers

    n = X.shape[0]
    Q = X @ X.T
    G = matrix(np.vstack([-np.eye(n), np.eye(n)]))
    h = matrix(np.concatenate([np.zeros(n), C]))
    solvers.options["show_progress"] = False
    sol = solvers.qp(matrix(Q), matrix(np.zeros(n)), G, h,
                     matrix(np.ones((1, n))), matrix(np.ones(1)))
    alpha = np.array(sol["x"]).ravel()
    return 0.5 * alpha @ Q @ alpha


def test_criterion_02_nu_svm_bounds_and_qp_oracle():
    rng = np.random.default_rng(5)
    bound_ok = True
    for nu in (0.1, 0.3, 0.5, 0.9):
        for _ in range(50):
            X = rng.normal(size=(20, 3))
            X /= np.linalg.norm(X, axis=1, keepdims=True)
            m = train("ocsvm", Template.from_embeddings(X), "flat", nu=nu)
            scores = m.score_batch(X)
            outliers = float(np.mean(scores < -1e-9))
            svs = float(np.mean(m.svm_alpha > 1e-9))
            bound_ok &= outliers <= nu + 1 / 20 and svs >= nu - 1 / 20
    qp_gap = 0.0
    for trial in range(10):
        X = rng.normal(size=(10, 3))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        nu = (0.2, 0.5, 0.8)[trial % 3]
        m = train("ocsvm", Template.from_embeddings(X), "flat", nu=nu)
        obj = 0.5 * m.svm_alpha @ (X @ X.T) @ m.svm_alpha
        qp_gap = max(qp_gap, abs(obj - qp_oracle_objective(X, np.full(10, 1 / (nu * 10)))))
    verdict(2, "nu-svm bounds and qp oracle", [
        ("outlier/support fractions within nu bounds", bound_ok),
        (f"dual objective gap {qp_gap:.2e} <= 1e-5", qp_gap <= 1e-5),
    ])


# ---------------------------------------------------------------------------
# criterion 3: EER calibration equals an exhaustive threshold sweep


def eer_oracle(genuine, impostor):
    merged = sorted(set(float(v) for v in genuine) | set(float(v) for v in impostor))
    candidates = [float("-inf")]
    candidates += [(a + b) / 2.0 for a, b in zip(merged, merged[1:])]
    candidates += [float("inf")]
    best = None
    for t in candidates:  # ascending, so strict < keeps the lowest threshold on ties
        far = sum(1 for s in impostor if s >= t) / len(impostor)
        frr = sum(1 for s in genuine if s < t) / len(genuine)
        if best is None or abs(far - frr) < best[0]:
            best = (abs(far - frr), t, (far + frr) / 2.0)
    return best[1], best[2]


def test_criterion_03_eer_equals_exhaustive_sweep():
    rng = np.random.default_rng(99)
    exact = True
    for _ in range(100):
        n_g, n_i = int(rng.integers(3, 40)), int(rng.integers(3, 40))
        genuine = rng.normal(loc=rng.uniform(0, 2), size=n_g)
        impostor = rng.normal(loc=rng.uniform(-2, 0), size=n_i)
        if rng.random() < 0.3:  # force score ties across the two sets
            impostor[: n_i // 2] = rng.choice(genuine, size=n_i // 2)
        thr, eer = calibrate_threshold_at_eer(genuine, impostor)
        thr_o, eer_o = eer_oracle(genuine, impostor)
        exact &= thr == thr_o and eer == eer_o
    verdict(3, "eer equals exhaustive sweep", [
        ("threshold and eer exactly equal on 100 random score sets", exact),
    ])


# ---------------------------------------------------------------------------
# criterion 4: oracle success@10 for every matcher, within the time budget


def test_criterion_04_oracle_success_all_matchers(bench):
    checks = []
    for kind in ("centroid", "maximum", "ocsvm"):
        nu = 0.5 if kind == "ocsvm" else None
        res = bench.sweep("oracle", kind, "flat", nu)
        rate = success_at(res, 10)
        secs = bench.timings[("oracle", kind, "flat", nu)]
        checks.append((f"{kind} success@10 {rate:.2f} >= 0.80", rate >= 0.80))
        checks.append((f"{kind} sweep {secs:.0f}s < 300s", secs < 300.0))
    verdict(4, "oracle success@10 per matcher", checks)


# ---------------------------------------------------------------------------
# criterion 5: vulnerability ordering across matchers and weighting schemes


def test_criterion_05_matcher_vulnerability_ordering(bench):
    flat, sigmoid = {}, {}
    for kind in ("centroid", "maximum", "ocsvm"):
        nu = 0.5 if kind == "ocsvm" else None
        flat[kind] = bench.sweep("oracle", kind, "flat", nu)
        sigmoid[kind] = bench.sweep("oracle", kind, "sigmoid", nu)
    checks = [
        ("100 pairs per sweep", all(len(r) >= 100 for r in flat.values())),
        (f"maximum success@1 {success_at(flat['maximum'], 1):.2f} > "
         f"centroid {success_at(flat['centroid'], 1):.2f}",
         success_at(flat["maximum"], 1) > success_at(flat["centroid"], 1)),
    ]
    for kind in flat:
        s_f, s_s = success_at(flat[kind], 3), success_at(sigmoid[kind], 3)
        checks.append((f"{kind} sigmoid@3 {s_s:.2f} >= flat@3 {s_f:.2f}", s_s >= s_f))
    med = {kind: median_injections(flat[kind]) for kind in flat}
    checks.append((
        f"median injections maximum {med['maximum']:.0f} < ocsvm "
        f"{med['ocsvm']:.0f} < centroid {med['centroid']:.0f}",
        med["maximum"] < med["ocsvm"] < med["centroid"]))
    verdict(5, "matcher vulnerability ordering", checks)


# ---------------------------------------------------------------------------
# criterion 6: poisoning leaves FRR and FAR essentially unchanged


def test_criterion_06_stealth_rates(bench):
    res = [r for r in bench.sweep("oracle", "centroid", "flat") if r.success]
    d_frr = float(np.mean([r.frr_trajectory[-1] - r.frr_trajectory[0] for r in res]))
    d_far = float(np.mean([r.far_trajectory[-1] - r.far_trajectory[0] for r in res]))
    verdict(6, "stealth: FRR/FAR drift", [
        (f"{len(res)} successful runs", len(res) > 0),
        (f"mean FRR increase {d_frr * 100:.2f}pp < 5pp", d_frr < 0.05),
        (f"mean FAR increase {d_far * 100:.2f}pp < 5pp", d_far < 0.05),
    ])


# ---------------------------------------------------------------------------
# criterion 7: larger nu values slow the attack down


def test_criterion_07_nu_resilience_trend(bench):
    grid = (0.1, 0.3, 0.5, 0.7, 0.9)
    med = {nu: median_injections(bench.sweep("oracle", "ocsvm", "flat", nu))
           for nu in grid}
    ordered = list(med.values())
    ratio = med[0.9] / med[0.1]
    verdict(7, "nu resilience trend", [
        (f"medians {ordered} non-decreasing", ordered == sorted(ordered)),
        (f"nu=0.9 median {med[0.9]:.0f} >= 1.5x nu=0.1 median {med[0.1]:.0f}",
         ratio >= 1.5),
    ])


# ---------------------------------------------------------------------------
# criterion 8: the fitted heuristic beats blind iteration


def failed_per_accepted(results) -> float:
    accepted = sum(r.injections_accepted for r in results)
    return sum(r.failures for r in results) / max(accepted, 1)


def test_criterion_08_heuristic_value(bench):
    heur = bench.sweep("heuristic", "centroid", "flat")
    iterative = bench.sweep("iterative", "centroid", "flat")
    fpa_h, fpa_i = failed_per_accepted(heur), failed_per_accepted(iterative)
    events = [ev for r in heur for ev in r.events]
    first_pick = float(np.mean([ev.attempts == 1 for ev in events]))
    verdict(8, "heuristic value", [
        (f"failed/accepted {fpa_h:.2f} <= 50% of iterative {fpa_i:.2f}",
         fpa_h <= 0.5 * fpa_i),
        (f"first-pick rate {first_pick:.2f} >= 0.70", first_pick >= 0.70),
    ])


# ---------------------------------------------------------------------------
# criterion 9: surrogate-generated traces transfer poorly


def test_criterion_09_transfer_gap(bench):
    same = success_at(bench.sweep("oracle", "centroid", "flat"), 10)
    surr = success_at(bench.sweep("transfer", "centroid", "flat"), 10)
    verdict(9, "transfer gap", [
        (f"same-model {same:.2f} > surrogate {surr:.2f}", same > surr),
        (f"same-model >= 5x surrogate ({same:.2f} vs {surr:.2f})",
         same >= 5 * surr),
    ])


# ---------------------------------------------------------------------------
# criterion 10: the update-direction detector and hypersphere rollback


def test_criterion_10_detection_and_rollback(bench):
    ctx = bench.ctx
    results = bench.sweep("oracle", "centroid", "flat")
    label = "oracle_" + config_label("centroid", "flat", None)
    cosine = stage_detect(ctx, "cosine", label)
    hyper = stage_detect(ctx, "hypersphere", label)
    theta1 = AttackConfig().success_iar
    n0 = ctx.cfg.population.enrolment_size

    # per-run alarm positions at the calibrated threshold, and the IAR at
    # the moment the second accepted injection lands
    tuned = DetectorConfig(
        cos_threshold=cosine["threshold"],
        consecutive_flags_to_alarm=ctx.cfg.detection.consecutive_flags_to_alarm)
    caught_early, early_iar_ok, detection_runs = 0, True, 0
    for r in results:
        if len(r.events) < 2:
            continue
        detection_runs += 1
        centroid = ctx.dataset.users[r.victim_id].train_embeddings.mean(axis=0)
        report = detect(poisoning_sequence(r.events), centroid, tuned,
                        initial_count=n0)
        if report.alarm and report.alarm_index == 0:
            caught_early += 1
            early_iar_ok &= r.iar_trajectory[2] < theta1
    by_second = caught_early / detection_runs

    # rollback: sanitize each successful run's accepted injections and check
    # the restored template accepts the attacker at the baseline rate again
    granularity_ok = True
    worst_gap = 0.0
    for r in results:
        if not r.success or len(r.events) < 2:
            continue
        user = ctx.dataset.users[r.victim_id]
        injected = np.asarray([ev.embedding for ev in r.events], dtype=float)
        rep = sanitize_hypersphere(
            injected, user.train_embeddings.mean(axis=0),
            ctx.cfg.detection.window, hyper["radius"], initial_count=n0)
        kept = injected[list(rep.kept)]
        emb = np.vstack([user.train_embeddings, kept]) if kept.size \
            else user.train_embeddings
        matcher = train("centroid", Template.from_embeddings(emb), "flat",
                        threshold=_threshold_of(ctx, "centroid", "flat", None))
        attacker = ctx.dataset.users[r.attacker_id]
        restored = float(np.mean(matcher.decide_batch(attacker.test_embeddings)))
        gap = abs(restored - r.iar_trajectory[0])
        worst_gap = max(worst_gap, gap)
        granularity_ok &= gap <= 1.0 / attacker.test_embeddings.shape[0] + 1e-12

    verdict(10, "detection and rollback", [
        (f"cosine eer {cosine['eer']:.3f} < 0.15", cosine["eer"] < 0.15),
        (f"alarm by second injection {by_second:.3f} >= 0.95", by_second >= 0.95),
        ("attacker IAR below takeover at every early alarm", early_iar_ok),
        (f"poison runs reverted {hyper['poison_revert_rate']:.2f} == 1",
         hyper["poison_revert_rate"] == 1.0),
        (f"rollback IAR gap {worst_gap:.3f} within one sample", granularity_ok),
    ])


def _threshold_of(ctx, kind, scheme, nu):
    label = config_label(kind, scheme, nu)
    with open(ctx.root / "calibrate" / f"{label}.json", "r", encoding="utf-8") as fh:
        return json.load(fh)["threshold"]


# ---------------------------------------------------------------------------
# criterion 11: bitwise-identical reruns


SMALL_CONFIG = """
seed = 7
sweep.n_pairs = 12
sweep.heuristic_pairs = 6
detection.sequences_per_factor = 8
"""


def _run_pipeline(root: Path, config_path: Path) -> None:
    out = str(root)
    cli_main(["gen-data", "--config", str(config_path), "--out", out])
    cli_main(["calibrate", "--data", out, "--matcher", "centroid"])
    cli_main(["fit-heuristic", "--data", out, "--matcher", "centroid"])
    for mode in ("oracle", "heuristic"):
        cli_main(["attack", "--data", out, "--mode", mode,
                  "--matcher", "centroid"])
    for detector in ("cosine", "hypersphere"):
        cli_main(["detect", "--data", out, "--detector", detector,
                  "--matcher", "centroid"])
    cli_main(["report", "--data", out])


def test_criterion_11_bitwise_determinism(bench, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    config_path = tmp_path / "bench.cfg"
    config_path.write_text(SMALL_CONFIG, encoding="utf-8")
    run_a, run_b = tmp_path / "a", tmp_path / "b"
    _run_pipeline(run_a, config_path)
    _run_pipeline(run_b, config_path)
    capsys.readouterr()  # CLI prints are not part of the comparison

    files_a = sorted(p.relative_to(run_a) for p in run_a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(run_b) for p in run_b.rglob("*") if p.is_file())
    same_sets = files_a == files_b
    mismatched = [str(rel) for rel in files_a
                  if not filecmp.cmp(run_a / rel, run_b / rel, shallow=False)] \
        if same_sets else ["file sets differ"]
    verdict(11, "bitwise determinism", [
        (f"{len(files_a)} files in both runs", same_sets and len(files_a) > 0),
        (f"all files identical (mismatched: {mismatched})", not mismatched),
    ])
