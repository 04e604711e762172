"""Poisoning-sample generation and the template-poisoning injection loop.

Generation runs in two phases over a shared masked perturbation: phase 1
pulls the masked attacker batch back onto the attacker's own centroid (the
accessory should not change who the attacker looks like), phase 2 walks the
batch toward the victim's embedding. Every intermediate perturbation is kept;
the attack then injects intermediates through the victim's self-update gate,
starting near the victim and retreating toward the attacker as the template
drifts, until the attacker's own unperturbed samples are accepted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .features import (
    DimensionError,
    FeatureExtractor,
    PerturbationMask,
    apply_perturbation,
    full_mask,
)
from .updating import AuthSystem, attempt_auth_and_update

MODES = ("oracle", "heuristic", "iterative")


class UnsupportedModeError(ValueError):
    """Raised when a mode needs raw-space generation but only embeddings exist."""


class HeuristicFitError(ValueError):
    """Too few accepted records to fit an injection rank; carries the rank."""

    def __init__(self, rank: int, count: int):
        super().__init__(
            f"injection rank {rank} has {count} accepted records, need >= 3")
        self.rank = rank


# ---------------------------------------------------------------------------
# perturbation penalties


def total_variation(values, topology: str = "chain", grid_shape=None) -> float:
    """Smoothness penalty over neighboring perturbation values.

    chain: sum of |v_i - v_{i+1}| over consecutive values. grid: values are
    laid out on grid_shape and each cell contributes
    sqrt(down_diff^2 + right_diff^2), missing neighbors counting as zero.
    """
    v = np.asarray(values, dtype=float)
    if topology == "chain":
        return float(np.sum(np.abs(np.diff(v))))
    if topology == "grid":
        if grid_shape is None or grid_shape[0] * grid_shape[1] != v.shape[0]:
            raise DimensionError(
                f"grid shape {grid_shape} does not tile {v.shape[0]} values")
        p = v.reshape(grid_shape)
        down2 = np.zeros(grid_shape)
        right2 = np.zeros(grid_shape)
        down2[:-1, :] = (p[:-1, :] - p[1:, :]) ** 2
        right2[:, :-1] = (p[:, :-1] - p[:, 1:]) ** 2
        return float(np.sum(np.sqrt(down2 + right2)))
    raise ValueError(f"unknown topology {topology!r}")


def nps(values, palette) -> float:
    """Non-printability score: sum over values of the product of palette gaps.

    Zero whenever every value sits exactly on a palette entry.
    """
    palette = np.asarray(palette, dtype=float)
    if palette.size == 0:
        raise ValueError("palette must be non-empty")
    v = np.atleast_1d(np.asarray(values, dtype=float))
    return float(np.sum(np.prod(np.abs(v[:, None] - palette[None, :]), axis=1)))


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for two-phase masked generation.

    step_scale is the maximum per-coordinate change per iteration in
    normalized units (the classic 4/255); coords_per_step is how many masked
    coordinates move each iteration; steps_per_phase is the per-phase
    iteration count, so a trace has 2*steps_per_phase steps.
    """

    steps_per_phase: int = 100
    coords_per_step: int = 4
    step_scale: float = 4.0 / 255.0
    norm_order: int = 2
    palette: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    tv_topology: str = "chain"
    init_range: tuple[float, float] = (0.25, 0.75)
    selection_beta: float | None = None  # None: set from medians at step 1

    def __post_init__(self):
        if self.step_scale <= 0 or self.coords_per_step < 1 or self.steps_per_phase < 1:
            raise ValueError("step_scale > 0, coords_per_step >= 1, steps_per_phase >= 1")
        if self.norm_order not in (1, 2):
            raise ValueError("norm_order must be 1 or 2")
        if len(self.palette) == 0:
            raise ValueError("palette must be non-empty")


@dataclass(frozen=True)
class GenerationTrace:
    """All intermediate perturbations of one generation run.

    Row j (0..n_steps) is the state after j optimization steps; rows from
    phase2_start on are the injectable intermediates, ordered from
    attacker-like to victim-like. For embedding-space traces (no raw access)
    extractor and mask are None and `embeddings` carries the candidates
    directly.
    """

    deltas: np.ndarray | None  # (T+1, d_in) or None in embedding mode
    embeddings: np.ndarray  # (T+1, batch, d_emb) under the generating extractor
    dist_to_attacker: np.ndarray  # (T+1, batch)
    dist_to_victim: np.ndarray  # (T+1, batch)
    objective: np.ndarray  # (T+1,)
    nps_values: np.ndarray  # (T+1,)
    tv_values: np.ndarray  # (T+1,)
    phase2_start: int
    extractor: FeatureExtractor | None
    mask: PerturbationMask | None
    attacker_batch: np.ndarray | None
    victim_target: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.embeddings.shape[0] - 1

    @property
    def phase2_indices(self) -> np.ndarray:
        return np.arange(self.phase2_start, self.n_steps + 1)

    def step_fraction(self, j: int) -> float:
        return j / self.n_steps

    def mean_victim_distance(self, j: int) -> float:
        return float(np.mean(self.dist_to_victim[j]))

    def masked_inputs(self, j: int) -> np.ndarray:
        if self.deltas is None:
            raise UnsupportedModeError("embedding-space trace has no raw inputs")
        return apply_perturbation(self.attacker_batch, self.mask, self.deltas[j])

    def embeddings_at(self, j: int, extractor: FeatureExtractor | None = None) -> np.ndarray:
        """Candidate embeddings at step j under `extractor` (default: generating one)."""
        if extractor is None or extractor is self.extractor:
            return self.embeddings[j]
        return extractor.extract_batch(self.masked_inputs(j))

    def to_csv(self) -> str:
        lines = ["step,objective,mean_distance"]
        for j in range(self.n_steps + 1):
            target_dist = self.dist_to_attacker[j] if j < self.phase2_start \
                else self.dist_to_victim[j]
            lines.append(f"{j},{float(self.objective[j])!r},{float(np.mean(target_dist))!r}")
        return "\n".join(lines) + "\n"


def select_generation_batch(raw_samples, extractor: FeatureExtractor,
                            k: int) -> np.ndarray:
    """Low-noise subset: the k samples closest to the user's embedding centroid."""
    raw = np.atleast_2d(np.asarray(raw_samples, dtype=float))
    emb = extractor.extract_batch(raw)
    dist = np.linalg.norm(emb - emb.mean(axis=0), axis=1)
    order = np.argsort(dist, kind="stable")[:k]
    return raw[np.sort(order)]


def _distances(emb: np.ndarray, target: np.ndarray, order: int):
    diff = emb - target
    if order == 2:
        dist = np.linalg.norm(diff, axis=1)
        safe = np.where(dist > 0, dist, 1.0)
        grad = diff / safe[:, None]
    else:
        dist = np.sum(np.abs(diff), axis=1)
        grad = np.sign(diff)
    return dist, grad


def batch_masked_generate(extractor: FeatureExtractor, attacker_samples,
                          masks, target, cfg: GenerationConfig,
                          rng: np.random.Generator) -> GenerationTrace:
    """Two-phase masked perturbation search (returns every intermediate).

    Args:
        extractor: generating extractor (the attacker's model of the system).
        attacker_samples: raw batch (low-noise subset of the attacker's data).
        masks: one PerturbationMask or a list with identical footprints.
        target: victim embedding to approach in phase 2.
        cfg: generation knobs.
        rng: source for the random initial perturbation.

    Each step backpropagates per-sample distance gradients, weights sample i
    by its distance (batch mean plus deviation d_i, so stragglers get pulled
    hardest and the spread shrinks), then moves the top coords_per_step masked
    coordinates against their gradient sign, ranking them by |weighted
    gradient| minus a penalty-scaled change in non-printability and total
    variation. Per-coordinate movement is capped at step_scale per iteration
    and halved until the phase objective does not increase, so progress is
    full speed far from the target and damped at convergence; the result
    stays clamped in [0,1] and coordinates pinned at a clamp bound count as
    inactive.
    """
    X = np.atleast_2d(np.asarray(attacker_samples, dtype=float))
    if isinstance(masks, PerturbationMask):
        mask = masks
    else:
        masks = list(masks)
        mask = masks[0]
        for other in masks[1:]:
            if not np.array_equal(other.editable, mask.editable):
                raise ValueError("all masks must share one footprint")
    if X.shape[1] != extractor.d_in or mask.editable.shape[0] != extractor.d_in:
        raise DimensionError("attacker samples, mask and extractor disagree on d_in")
    target = np.asarray(target, dtype=float)
    editable = np.flatnonzero(mask.editable)
    n_steps = 2 * cfg.steps_per_phase
    attacker_centroid = extractor.extract_batch(X).mean(axis=0)

    delta = np.full(extractor.d_in, 0.5)
    delta[editable] = rng.uniform(*cfg.init_range, size=editable.size)

    deltas = np.empty((n_steps + 1, extractor.d_in))
    embeddings = np.empty((n_steps + 1, X.shape[0], extractor.d_emb))
    dist_att = np.empty((n_steps + 1, X.shape[0]))
    dist_vic = np.empty((n_steps + 1, X.shape[0]))
    objective = np.empty(n_steps + 1)
    nps_vals = np.empty(n_steps + 1)
    tv_vals = np.empty(n_steps + 1)

    beta = cfg.selection_beta
    palette = np.asarray(cfg.palette, dtype=float)

    def forward(d):
        emb, cache = extractor.forward_batch(apply_perturbation(X, mask, d))
        return emb, cache

    def coordinate_penalties(vals, new_vals):
        """Per-footprint-coordinate change in NPS + chain TV if it moved alone."""
        d_nps = (np.prod(np.abs(new_vals[:, None] - palette), axis=1)
                 - np.prod(np.abs(vals[:, None] - palette), axis=1))
        left = np.concatenate([[np.nan], vals[:-1]])
        right = np.concatenate([vals[1:], [np.nan]])

        def tv_terms(center):
            t = np.zeros_like(center)
            ok = ~np.isnan(left)
            t[ok] += np.abs(center[ok] - left[ok])
            ok = ~np.isnan(right)
            t[ok] += np.abs(center[ok] - right[ok])
            return t

        return d_nps + (tv_terms(new_vals) - tv_terms(vals))

    def record(j, d, emb):
        deltas[j] = d
        embeddings[j] = emb
        dist_att[j], _ = _distances(emb, attacker_centroid, cfg.norm_order)
        dist_vic[j], _ = _distances(emb, target, cfg.norm_order)
        nps_vals[j] = nps(d[editable], palette)
        tv_vals[j] = total_variation(d[editable], "chain")
        phase_dist = dist_att[j] if j <= cfg.steps_per_phase else dist_vic[j]
        objective[j] = float(np.mean(phase_dist ** cfg.norm_order)
                             + beta * (nps_vals[j] + tv_vals[j]))

    emb, cache = forward(delta)
    for j in range(0, n_steps + 1):
        if j > 0:
            phase_target = attacker_centroid if j <= cfg.steps_per_phase else target
            dist, dgrad = _distances(emb, phase_target, cfg.norm_order)
            upstream = dist[:, None] * dgrad  # weight = batch mean + deviation
            grad = extractor.backprop_batch(cache, upstream).sum(axis=0)
            grad[~mask.editable] = 0.0

            g = grad[editable]
            vals = delta[editable]
            active = g != 0.0
            active &= ~((vals <= 0.0) & (g > 0.0))  # step down from the floor
            active &= ~((vals >= 1.0) & (g < 0.0))  # step up from the ceiling
            if not np.any(active):
                record(j, delta, emb)
                continue
            steps = -cfg.step_scale * np.sign(g)
            new_vals = np.clip(vals + steps, 0.0, 1.0)
            penalty = coordinate_penalties(vals, new_vals)
            if beta is None:
                positive = penalty[active & (penalty > 0)]
                beta = float(np.median(np.abs(g[active])) / np.median(positive)) \
                    if positive.size else 0.0
            score = np.abs(g) - beta * penalty
            score[~active] = -np.inf
            m_eff = min(cfg.coords_per_step, int(np.count_nonzero(active)))
            top = np.argsort(-score, kind="stable")[:m_eff]

            # acceptance tracks the distance alone: the penalties steer which
            # coordinates move, not whether a step is kept
            prev_obj = float(np.mean(dist ** cfg.norm_order))
            scale = 1.0
            for _ in range(6):
                cand_vals = vals.copy()
                cand_vals[top] = np.clip(vals[top] + scale * steps[top], 0.0, 1.0)
                cand_delta = delta.copy()
                cand_delta[editable] = cand_vals
                cand_emb, cand_cache = forward(cand_delta)
                cand_dist, _ = _distances(cand_emb, phase_target, cfg.norm_order)
                if float(np.mean(cand_dist ** cfg.norm_order)) <= prev_obj:
                    delta, emb, cache = cand_delta, cand_emb, cand_cache
                    break
                scale *= 0.5
        elif beta is None:
            # set the selection scale from the initial state so row 0's
            # recorded objective uses the same penalty weight as every step
            dist, dgrad = _distances(emb, attacker_centroid, cfg.norm_order)
            grad = extractor.backprop_batch(cache, dist[:, None] * dgrad).sum(axis=0)
            g = grad[editable]
            vals = delta[editable]
            new_vals = np.clip(vals - cfg.step_scale * np.sign(g), 0.0, 1.0)
            penalty = coordinate_penalties(vals, new_vals)
            positive = penalty[(g != 0) & (penalty > 0)]
            beta = float(np.median(np.abs(g[g != 0])) / np.median(positive)) \
                if positive.size and np.any(g != 0) else 0.0
        record(j, delta, emb)

    return GenerationTrace(
        deltas=deltas, embeddings=embeddings, dist_to_attacker=dist_att,
        dist_to_victim=dist_vic, objective=objective, nps_values=nps_vals,
        tv_values=tv_vals, phase2_start=cfg.steps_per_phase, extractor=extractor,
        mask=mask, attacker_batch=X, victim_target=target)


def embedding_line_trace(attacker_embeddings, victim_embedding,
                         n_steps: int = 200) -> GenerationTrace:
    """Perfect-attacker candidates straight through embedding space.

    For embedding-only datasets there is no raw space to optimize in; the
    oracle flow instead walks the segment from the attacker embedding centroid
    to the victim embedding. Step 0 is the attacker end.
    """
    A = np.atleast_2d(np.asarray(attacker_embeddings, dtype=float))
    victim = np.asarray(victim_embedding, dtype=float)
    centroid = A.mean(axis=0)
    ts = np.linspace(0.0, 1.0, n_steps + 1)
    rows = centroid[None, :] + ts[:, None] * (victim - centroid)[None, :]
    embeddings = rows[:, None, :]
    dist_vic = np.linalg.norm(rows - victim, axis=1)[:, None]
    dist_att = np.linalg.norm(rows - centroid, axis=1)[:, None]
    zero = np.zeros(n_steps + 1)
    return GenerationTrace(
        deltas=None, embeddings=embeddings, dist_to_attacker=dist_att,
        dist_to_victim=dist_vic, objective=dist_vic[:, 0].copy(),
        nps_values=zero, tv_values=zero.copy(), phase2_start=0, extractor=None,
        mask=None, attacker_batch=None, victim_target=victim)


# ---------------------------------------------------------------------------
# saliency-map generation (single-sample alternate strategy)


@dataclass(frozen=True)
class SaliencyTrace:
    """States and L1 objectives of a saliency-map run; flags stagnation."""

    xs: np.ndarray  # (steps+1, d_in)
    objective: np.ndarray  # (steps+1,)
    stagnated: bool

    @property
    def n_steps(self) -> int:
        return self.xs.shape[0] - 1


def saliency_generate(extractor: FeatureExtractor, x, target, step_size: float,
                      stop_predicate=None, max_steps: int = 1000,
                      stagnation_window: int = 50,
                      stagnation_tol: float = 1e-12):
    """Greedy two-coordinate descent guided by a saliency map.

    Per step, with d the output-space direction toward the target, the
    saliency of input feature i is S_i = d . J[:, i]: how strongly increasing
    that feature moves the embedding the right way. The argmax feature gets
    +step_size and the argmin gets -step_size (each only if its saliency sign
    actually helps), clamped to [0,1]. Stops when stop_predicate(embedding)
    holds, max_steps is hit, or the L1 objective stagnates.

    Returns (final x, SaliencyTrace).
    """
    x = np.array(x, dtype=float)
    target = np.asarray(target, dtype=float)
    xs = [x.copy()]
    objective = []
    stagnated = False
    best = np.inf
    since_improved = 0
    for _ in range(max_steps + 1):
        e = extractor.extract(x)
        obj = float(np.sum(np.abs(e - target)))
        objective.append(obj)
        if stop_predicate is not None and stop_predicate(e):
            break
        if obj < best - stagnation_tol:
            best = obj
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= stagnation_window:
                stagnated = True
                break
        if len(objective) == max_steps + 1:
            break
        d = target - e
        S = d @ extractor.jacobian(x)
        i_up = int(np.argmax(S))
        i_dn = int(np.argmin(S))
        moved = False
        if S[i_up] > 0 and x[i_up] < 1.0:
            x[i_up] = min(1.0, x[i_up] + step_size)
            moved = True
        if S[i_dn] < 0 and i_dn != i_up and x[i_dn] > 0.0:
            x[i_dn] = max(0.0, x[i_dn] - step_size)
            moved = True
        if not moved:
            stagnated = True
            break
        xs.append(x.copy())
    trace = SaliencyTrace(np.stack(xs), np.asarray(objective), stagnated)
    return x, trace


# ---------------------------------------------------------------------------
# injection heuristic


@dataclass(frozen=True)
class InjectionRecord:
    """One gate observation from a population run used to fit the heuristic."""

    rank: int  # 1-based accepted-injection rank
    step_fraction: float  # trace step j / n_steps
    distance: float  # L2 distance from the injected sample to the known victim sample
    accepted: bool


@dataclass(frozen=True)
class HeuristicModel:
    """Per-injection-rank 2D Gaussians over (step fraction, victim distance)."""

    ranks: tuple[int, ...]
    means: tuple[tuple[float, float], ...]
    covariances: tuple[tuple[tuple[float, float], tuple[float, float]], ...]

    def _index_for(self, rank: int) -> int:
        below = [i for i, r in enumerate(self.ranks) if r <= rank]
        return below[-1] if below else 0

    def log_density(self, rank: int, points) -> np.ndarray:
        """Gaussian log-density of (step_fraction, distance) rows for a rank."""
        idx = self._index_for(rank)
        mean = np.asarray(self.means[idx])
        cov = np.asarray(self.covariances[idx])
        pts = np.atleast_2d(np.asarray(points, dtype=float)) - mean
        L = np.linalg.cholesky(cov)
        z = np.linalg.solve(L, pts.T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * np.sum(z * z, axis=0) - 0.5 * (2 * np.log(2 * np.pi) + logdet)

    def to_dict(self) -> dict:
        return {"ranks": list(self.ranks),
                "means": [list(m) for m in self.means],
                "covariances": [[list(r) for r in c] for c in self.covariances]}

    @classmethod
    def from_dict(cls, data: dict) -> "HeuristicModel":
        return cls(tuple(int(r) for r in data["ranks"]),
                   tuple(tuple(m) for m in data["means"]),
                   tuple(tuple(tuple(r) for r in c) for c in data["covariances"]))


def fit_heuristic(records, jitter: float = 1e-9) -> HeuristicModel:
    """Fit per-rank Gaussians to accepted (step fraction, distance) records.

    Every rank present in the records needs >= 3 accepted entries; requests
    beyond the largest fitted rank fall back to it.
    """
    by_rank: dict[int, list[tuple[float, float]]] = {}
    for rec in records:
        if rec.accepted:
            by_rank.setdefault(rec.rank, []).append((rec.step_fraction, rec.distance))
    if not by_rank:
        raise HeuristicFitError(1, 0)
    ranks, means, covs = [], [], []
    for rank in sorted(by_rank):
        pts = np.asarray(by_rank[rank], dtype=float)
        if pts.shape[0] < 3:
            raise HeuristicFitError(rank, pts.shape[0])
        mean = pts.mean(axis=0)
        centered = pts - mean
        cov = centered.T @ centered / (pts.shape[0] - 1)
        if np.min(np.linalg.eigvalsh(cov)) <= 1e-15:
            cov = cov + jitter * np.eye(2)
        ranks.append(rank)
        means.append((float(mean[0]), float(mean[1])))
        covs.append(((float(cov[0, 0]), float(cov[0, 1])),
                     (float(cov[1, 0]), float(cov[1, 1]))))
    return HeuristicModel(tuple(ranks), tuple(means), tuple(covs))


def heuristic_select(model: HeuristicModel, rank: int,
                     trace: GenerationTrace) -> int:
    """Phase-2 step whose (step fraction, distance) maximizes the rank's Gaussian."""
    candidates = trace.phase2_indices
    points = np.stack([
        candidates / trace.n_steps,
        [trace.mean_victim_distance(int(j)) for j in candidates],
    ], axis=1)
    densities = model.log_density(rank, points)
    return int(candidates[int(np.argmax(densities))])


def records_from_results(results) -> list[InjectionRecord]:
    """Accepted-injection records for heuristic fitting from attack results.

    The distance recorded is the injected sample's own distance to the known
    victim sample. Accepted samples sit on the inner side of the gate at the
    step where the batch first clears it, so fitting on them (rather than on
    batch means) biases later selections slightly past the boundary, which is
    what makes first picks stick.
    """
    records = []
    for res in results:
        for ev in res.events:
            records.append(InjectionRecord(ev.rank, ev.step_fraction,
                                           ev.sample_distance, True))
    return records


# ---------------------------------------------------------------------------
# the poisoning loop


@dataclass(frozen=True)
class AttackConfig:
    """Injection-loop thresholds and budget.

    success_iar: fraction of the attacker's unperturbed samples that must be
    accepted for the backdoor to count as installed. injection_accept: fraction
    of the masked batch the gate must accept before one sample is injected.
    """

    success_iar: float = 0.5
    injection_accept: float = 0.5
    max_injection_attempts: int = 150
    fallback_step: int | None = None  # default: steps_per_phase // 20, >= 1

    def __post_init__(self):
        if not (0.0 < self.success_iar <= 1.0 and 0.0 < self.injection_accept <= 1.0):
            raise ValueError("acceptance fractions must lie in (0, 1]")
        if self.max_injection_attempts < 0:
            raise ValueError("max_injection_attempts must be >= 0")


@dataclass(frozen=True)
class InjectionEvent:
    rank: int
    step_index: int
    attempts: int  # gate presentations spent on this injection (1 = first pick)
    step_fraction: float
    mean_distance: float  # batch mean distance to the known victim sample at the step
    sample_distance: float  # the injected sample's own distance to the known sample
    embedding: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"rank": self.rank, "step_index": self.step_index,
                "attempts": self.attempts, "step_fraction": self.step_fraction,
                "mean_distance": self.mean_distance,
                "sample_distance": self.sample_distance,
                "embedding": list(self.embedding)}

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionEvent":
        return cls(d["rank"], d["step_index"], d["attempts"], d["step_fraction"],
                   d["mean_distance"], d["sample_distance"],
                   tuple(d["embedding"]))


@dataclass(frozen=True)
class AttackResult:
    """Outcome of one attacker-victim poisoning run."""

    success: bool
    injections_attempted: int
    injections_accepted: int
    failures: int
    stagnated: bool
    iar_trajectory: tuple[float, ...]
    far_trajectory: tuple[float, ...]
    frr_trajectory: tuple[float, ...]
    events: tuple[InjectionEvent, ...]
    matcher_kind: str
    scheme: str
    mode: str
    nu: float | None = None
    attacker_id: str | None = None
    victim_id: str | None = None
    seed: int | None = None

    @property
    def injections_to_success(self) -> float:
        return float(self.injections_accepted) if self.success else np.inf

    @property
    def pair_id(self) -> str:
        return f"{self.attacker_id or 'a'}->{self.victim_id or 'v'}"

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "injections_attempted": self.injections_attempted,
            "injections_accepted": self.injections_accepted,
            "failures": self.failures,
            "stagnated": self.stagnated,
            "iar_trajectory": list(self.iar_trajectory),
            "far_trajectory": list(self.far_trajectory),
            "frr_trajectory": list(self.frr_trajectory),
            "events": [ev.to_dict() for ev in self.events],
            "matcher_kind": self.matcher_kind,
            "scheme": self.scheme,
            "mode": self.mode,
            "nu": self.nu,
            "attacker_id": self.attacker_id,
            "victim_id": self.victim_id,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        return cls(
            success=d["success"],
            injections_attempted=d["injections_attempted"],
            injections_accepted=d["injections_accepted"],
            failures=d["failures"],
            stagnated=d["stagnated"],
            iar_trajectory=tuple(d["iar_trajectory"]),
            far_trajectory=tuple(d["far_trajectory"]),
            frr_trajectory=tuple(d["frr_trajectory"]),
            events=tuple(InjectionEvent.from_dict(ev) for ev in d["events"]),
            matcher_kind=d["matcher_kind"], scheme=d["scheme"], mode=d["mode"],
            nu=d["nu"], attacker_id=d["attacker_id"], victim_id=d["victim_id"],
            seed=d["seed"])


def _acceptance_fraction(sys: AuthSystem, embeddings: np.ndarray) -> float:
    return float(np.mean(sys.matcher.decide_batch(embeddings)))


def run_poisoning(victim_sys: AuthSystem, attacker_samples, known_victim_sample,
                  cfg: AttackConfig, gen_cfg: GenerationConfig, mode: str, *,
                  heuristic_model: HeuristicModel | None = None,
                  mask: PerturbationMask | None = None,
                  trace: GenerationTrace | None = None,
                  victim_test=None, other_samples=None,
                  rng: np.random.Generator | None = None,
                  attacker_id: str | None = None, victim_id: str | None = None,
                  seed: int | None = None) -> AttackResult:
    """Execute the poisoning loop against one victim system.

    Modes: "oracle" queries the gate for the earliest accepted intermediate
    (full-knowledge attacker, zero failed attempts); "heuristic" picks steps
    via the fitted Gaussians and walks fallback_step further on each failure;
    "iterative" starts every injection at the first phase-2 step and walks up.

    In raw mode attacker_samples are raw vectors; a trace is generated with
    the victim system's extractor unless one is supplied (transfer runs supply
    a surrogate-built trace; the gate always scores embeddings under the
    victim's extractor). victim_test / other_samples are embedding sets used
    for the FRR/FAR trajectory; when omitted those trajectories carry NaN.

    The known victim sample must be accepted by the system at the start and
    the attacker's own samples must start below the success fraction.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    embedding_mode = victim_sys.extractor is None
    if embedding_mode and mode != "oracle":
        raise UnsupportedModeError(
            f"{mode} mode needs raw samples; embedding-only data supports oracle mode")
    if mode == "heuristic" and heuristic_model is None:
        raise ValueError("heuristic mode requires a fitted heuristic model")

    att = np.atleast_2d(np.asarray(attacker_samples, dtype=float))
    known = np.asarray(known_victim_sample, dtype=float)
    if embedding_mode:
        attacker_emb = att
        known_emb = known
    else:
        attacker_emb = victim_sys.extractor.extract_batch(att)
        known_emb = victim_sys.extractor.extract(known)
    if not victim_sys.matcher.decide(known_emb):
        raise ValueError("known victim sample is rejected at the start")

    if trace is None:
        if embedding_mode:
            trace = embedding_line_trace(attacker_emb, known_emb)
        else:
            gen_mask = mask if mask is not None else full_mask(victim_sys.extractor.d_in)
            target = victim_sys.extractor.extract(known)
            trace = batch_masked_generate(victim_sys.extractor, att, gen_mask,
                                          target, gen_cfg, rng)

    victim_test = None if victim_test is None else np.atleast_2d(victim_test)
    other_samples = None if other_samples is None else np.atleast_2d(other_samples)

    def rates(sys: AuthSystem) -> tuple[float, float, float]:
        iar = _acceptance_fraction(sys, attacker_emb)
        frr = 1.0 - _acceptance_fraction(sys, victim_test) \
            if victim_test is not None else float("nan")
        far = _acceptance_fraction(sys, other_samples) \
            if other_samples is not None else float("nan")
        return iar, far, frr

    candidate_cache: dict[int, np.ndarray] = {}

    def candidates_at(j: int) -> np.ndarray:
        if j not in candidate_cache:
            candidate_cache[j] = trace.embeddings_at(j, victim_sys.extractor)
        return candidate_cache[j]

    sys = victim_sys
    iar, far, frr = rates(sys)
    iar_traj, far_traj, frr_traj = [iar], [far], [frr]
    events: list[InjectionEvent] = []
    attempts = 0
    accepted_n = 0
    failures = 0
    stagnated = False
    success = iar >= cfg.success_iar
    fallback = cfg.fallback_step if cfg.fallback_step is not None \
        else max(1, gen_cfg.steps_per_phase // 20)
    last_step = trace.n_steps

    while not success and attempts < cfg.max_injection_attempts:
        rank = accepted_n + 1
        if mode == "oracle":
            start = None
            for j in trace.phase2_indices:
                if _acceptance_fraction(sys, candidates_at(int(j))) >= cfg.injection_accept:
                    start = int(j)
                    break
            if start is None:
                stagnated = True
                break
        elif mode == "heuristic":
            start = heuristic_select(heuristic_model, rank, trace)
        else:  # iterative: always restart at the most attacker-like intermediate
            start = trace.phase2_start

        j = start
        injected = False
        attempt_count = 0
        while attempts < cfg.max_injection_attempts:
            attempts += 1
            attempt_count += 1
            embs = candidates_at(j)
            decisions = sys.matcher.decide_batch(embs)
            if float(np.mean(decisions)) >= cfg.injection_accept:
                pick_from = np.flatnonzero(decisions)
                pick = int(pick_from[rng.integers(pick_from.size)])
                ok, sys = attempt_auth_and_update(sys, embs[pick], origin="injected")
                if not ok:
                    # retraining failure: counts as a failed attempt
                    failures += 1
                else:
                    accepted_n += 1
                    injected = True
                    events.append(InjectionEvent(
                        rank=rank, step_index=j, attempts=attempt_count,
                        step_fraction=trace.step_fraction(j),
                        mean_distance=trace.mean_victim_distance(j),
                        sample_distance=float(np.linalg.norm(embs[pick] - known_emb)),
                        embedding=tuple(float(v) for v in embs[pick])))
                    iar, far, frr = rates(sys)
                    iar_traj.append(iar)
                    far_traj.append(far)
                    frr_traj.append(frr)
                    success = iar >= cfg.success_iar
                    break
            else:
                failures += 1
            if j >= last_step:
                break
            j = min(j + fallback, last_step)
        if not injected:
            if not success and attempts < cfg.max_injection_attempts:
                stagnated = True  # trace exhausted below the gate
            break

    return AttackResult(
        success=success, injections_attempted=attempts,
        injections_accepted=accepted_n, failures=failures, stagnated=stagnated,
        iar_trajectory=tuple(iar_traj), far_trajectory=tuple(far_traj),
        frr_trajectory=tuple(frr_traj), events=tuple(events),
        matcher_kind=victim_sys.matcher.kind, scheme=victim_sys.matcher.scheme,
        mode=mode, nu=victim_sys.matcher.nu, attacker_id=attacker_id,
        victim_id=victim_id, seed=seed)


def run_transfer_poisoning(surrogate: FeatureExtractor, target_sys: AuthSystem,
                           attacker_samples, known_victim_sample,
                           cfg: AttackConfig, gen_cfg: GenerationConfig,
                           mode: str = "oracle", *,
                           mask: PerturbationMask | None = None,
                           rng: np.random.Generator | None = None,
                           **kwargs) -> AttackResult:
    """Poisoning with generation on a surrogate extractor.

    The trace (and any heuristic distances) comes from the surrogate; gate
    decisions, injected embeddings, and all rates use the target system.
    """
    if surrogate.d_in != target_sys.extractor.d_in:
        raise DimensionError("surrogate and target must share raw input space")
    rng = rng if rng is not None else np.random.default_rng(0)
    att = np.atleast_2d(np.asarray(attacker_samples, dtype=float))
    gen_mask = mask if mask is not None else full_mask(surrogate.d_in)
    target_emb = surrogate.extract(np.asarray(known_victim_sample, dtype=float))
    trace = batch_masked_generate(surrogate, att, gen_mask, target_emb,
                                  gen_cfg, rng)
    return run_poisoning(target_sys, attacker_samples, known_victim_sample,
                         cfg, gen_cfg, mode, mask=gen_mask, trace=trace,
                         rng=rng, **kwargs)
