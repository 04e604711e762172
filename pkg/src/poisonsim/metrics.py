"""Outcome rates and cross-pair aggregation for poisoning runs.

Rates follow the acceptance convention throughout: IAR is the fraction of the
attacker's unperturbed samples accepted, FRR the fraction of held-out victim
samples rejected, FAR the fraction of other-user samples accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .updating import AuthSystem

SUCCESS_BUDGETS = (1, 3, 10)


@dataclass(frozen=True)
class RateSnapshot:
    iar: float
    far: float
    frr: float
    n_attacker: int
    n_genuine: int
    n_impostor: int

    def to_dict(self) -> dict:
        return {"iar": self.iar, "far": self.far, "frr": self.frr,
                "n_attacker": self.n_attacker, "n_genuine": self.n_genuine,
                "n_impostor": self.n_impostor}


def snapshot_rates(sys: AuthSystem, attacker_embeddings, genuine_embeddings,
                   impostor_embeddings) -> RateSnapshot:
    """Evaluate the three rates of one system state against fixed sets."""
    sets = {"attacker": np.atleast_2d(np.asarray(attacker_embeddings, dtype=float)),
            "genuine": np.atleast_2d(np.asarray(genuine_embeddings, dtype=float)),
            "impostor": np.atleast_2d(np.asarray(impostor_embeddings, dtype=float))}
    for name, arr in sets.items():
        if arr.size == 0:
            raise ValueError(f"{name} embedding set is empty")
    accept = {name: float(np.mean(sys.matcher.decide_batch(arr)))
              for name, arr in sets.items()}
    return RateSnapshot(
        iar=accept["attacker"], far=accept["impostor"],
        frr=1.0 - accept["genuine"], n_attacker=sets["attacker"].shape[0],
        n_genuine=sets["genuine"].shape[0], n_impostor=sets["impostor"].shape[0])


def success_at(results, budget: int) -> float:
    """Fraction of runs that succeeded within `budget` accepted injections."""
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    hits = sum(1 for r in results if r.success and r.injections_accepted <= budget)
    return hits / len(results)


def _padded(trajectories) -> np.ndarray:
    """Stack variable-length trajectories, repeating each run's final value."""
    rows = [list(t) for t in trajectories]
    width = max(len(r) for r in rows)
    return np.asarray([r + [r[-1]] * (width - len(r)) for r in rows], dtype=float)


@dataclass(frozen=True)
class AggregateReport:
    """Cross-run summary of poisoning outcomes."""

    n_runs: int
    n_success: int
    success_rates: dict[int, float]  # budget -> fraction succeeded within it
    median_injections_to_success: float  # inf-padded median over all runs
    failed_attempts_per_success: float  # total failures / total accepted
    first_pick_rate: float  # fraction of injections landed on the first try
    iar_mean: tuple[float, ...]
    iar_std: tuple[float, ...]
    far_mean: tuple[float, ...]
    far_std: tuple[float, ...]
    frr_mean: tuple[float, ...]
    frr_std: tuple[float, ...]

    def to_dict(self) -> dict:
        d = {"n_runs": self.n_runs, "n_success": self.n_success,
             "success_rates": {str(k): v for k, v in self.success_rates.items()},
             "median_injections_to_success":
                 None if math.isinf(self.median_injections_to_success)
                 else self.median_injections_to_success,
             "failed_attempts_per_success": self.failed_attempts_per_success,
             "first_pick_rate": self.first_pick_rate}
        for name in ("iar", "far", "frr"):
            d[f"{name}_mean"] = list(getattr(self, f"{name}_mean"))
            d[f"{name}_std"] = list(getattr(self, f"{name}_std"))
        return d


def aggregate(results, budgets=SUCCESS_BUDGETS) -> AggregateReport:
    """Summarize many attack results; trajectories are padded to equal length
    by holding each run's final value (the system stops changing there)."""
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    n = len(results)
    to_success = np.asarray([r.injections_to_success for r in results])
    total_accepted = sum(r.injections_accepted for r in results)
    total_failures = sum(r.failures for r in results)
    all_events = [ev for r in results for ev in r.events]
    first_picks = sum(1 for ev in all_events if ev.attempts == 1)
    stats = {}
    for name in ("iar", "far", "frr"):
        mat = _padded([getattr(r, f"{name}_trajectory") for r in results])
        stats[f"{name}_mean"] = tuple(float(v) for v in mat.mean(axis=0))
        stats[f"{name}_std"] = tuple(float(v) for v in mat.std(axis=0))
    return AggregateReport(
        n_runs=n,
        n_success=sum(1 for r in results if r.success),
        success_rates={int(b): success_at(results, b) for b in budgets},
        median_injections_to_success=float(np.median(to_success)),
        failed_attempts_per_success=(total_failures / total_accepted
                                     if total_accepted else float("nan")),
        first_pick_rate=(first_picks / len(all_events)
                         if all_events else float("nan")),
        **stats)


def trajectories_csv(results) -> str:
    """Per-injection rate rows: pair_id,matcher,weighting,mode,injection_index,iar,far,frr."""
    lines = ["pair_id,matcher,weighting,mode,injection_index,iar,far,frr"]
    for r in results:
        for k, (iar, far, frr) in enumerate(
                zip(r.iar_trajectory, r.far_trajectory, r.frr_trajectory)):
            lines.append(f"{r.pair_id},{r.matcher_kind},{r.scheme},{r.mode},"
                         f"{k},{iar!r},{far!r},{frr!r}")
    return "\n".join(lines) + "\n"


def summary_csv(labeled_reports) -> str:
    """One row per (label, AggregateReport) with the headline numbers."""
    budgets = sorted({b for _, rep in labeled_reports for b in rep.success_rates})
    cols = ["label", "n_runs", "n_success"] + \
        [f"success_at_{b}" for b in budgets] + \
        ["median_injections_to_success", "failed_attempts_per_success",
         "first_pick_rate"]
    lines = [",".join(cols)]
    for label, rep in labeled_reports:
        row = [label, str(rep.n_runs), str(rep.n_success)]
        row += [repr(rep.success_rates.get(b, float("nan"))) for b in budgets]
        row += [repr(rep.median_injections_to_success),
                repr(rep.failed_attempts_per_success),
                repr(rep.first_pick_rate)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
