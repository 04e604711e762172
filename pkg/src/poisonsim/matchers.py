"""Template matchers: centroid, closest-sample, and one-class nu-SVM.

All matchers share one score convention: higher is more genuine, and
decide(e) accepts iff score(e) >= threshold. Thresholds come from EER
calibration and are never recalibrated afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

MATCHER_KINDS = ("centroid", "maximum", "ocsvm")
WEIGHT_SCHEMES = ("flat", "sigmoid")

ORIGIN_ENROLLED = "enrolled"
ORIGIN_SELF_UPDATE = "self_update"


class SvmTrainingError(RuntimeError):
    """SMO solver failed to reach the KKT tolerance; carries the final violation."""

    def __init__(self, kkt_violation: float, iterations: int):
        super().__init__(
            f"nu-SVM solver stopped after {iterations} iterations with "
            f"KKT violation {kkt_violation:.3e}")
        self.kkt_violation = kkt_violation
        self.iterations = iterations


@dataclass(frozen=True)
class TemplateEntry:
    embedding: np.ndarray
    order_index: int
    origin: str  # ORIGIN_ENROLLED | ORIGIN_SELF_UPDATE

    def __post_init__(self):
        emb = np.array(self.embedding, dtype=float)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if self.origin not in (ORIGIN_ENROLLED, ORIGIN_SELF_UPDATE):
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass(frozen=True)
class Template:
    """Ordered embeddings with provenance; append-only via `append`."""

    entries: tuple[TemplateEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("template must hold at least one entry")
        orders = [e.order_index for e in entries]
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("order_index must be strictly increasing")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_embeddings(cls, embeddings, origin: str = ORIGIN_ENROLLED) -> "Template":
        rows = np.atleast_2d(np.asarray(embeddings, dtype=float))
        return cls(tuple(TemplateEntry(row, i, origin) for i, row in enumerate(rows)))

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])

    @property
    def d_emb(self) -> int:
        return self.entries[0].embedding.shape[0]

    def append(self, embedding, origin: str = ORIGIN_SELF_UPDATE) -> "Template":
        entry = TemplateEntry(np.asarray(embedding, dtype=float),
                              self.entries[-1].order_index + 1, origin)
        return Template(self.entries + (entry,))

    def drop_last_updates(self, k: int) -> "Template":
        """Remove the last k self-update entries; enrolled entries are kept."""
        update_positions = [i for i, e in enumerate(self.entries)
                            if e.origin == ORIGIN_SELF_UPDATE]
        if k > len(update_positions):
            raise ValueError(
                f"cannot remove {k} updates, template has {len(update_positions)}")
        if k == 0:
            return self
        doomed = set(update_positions[-k:])
        kept = tuple(e for i, e in enumerate(self.entries) if i not in doomed)
        return Template(kept)


def weighted_mean(embeddings: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean of embedding rows."""
    weights = np.asarray(weights, dtype=float)
    return weights @ np.asarray(embeddings, dtype=float) / weights.sum()


def compute_weights(template: Template, scheme: str) -> np.ndarray:
    """Per-entry weights: flat ones, or sigmoid of recency.

    The sigmoid scheme maps entry ranks linearly onto [-5, 5] (oldest -> -5,
    newest -> +5, a single entry -> +5) and applies 1/(1+exp(-x)), so recent
    samples dominate and the oldest get weights near zero.
    """
    n = template.size
    if scheme == "flat":
        return np.ones(n)
    if scheme == "sigmoid":
        x = np.full(n, 5.0) if n == 1 else np.linspace(-5.0, 5.0, n)
        return 1.0 / (1.0 + np.exp(-x))
    raise ValueError(f"unknown weight scheme {scheme!r}")


@dataclass(frozen=True)
class TrainedMatcher:
    """Decision function over embeddings with a calibrated threshold.

    Retraining on a grown template produces a new instance carrying the same
    threshold; decide() refuses to run until a threshold is set.
    """

    kind: str
    scheme: str
    threshold: float | None = None
    nu: float | None = None
    # kind-specific parameters
    centroid: np.ndarray | None = None
    samples: np.ndarray | None = None
    weights: np.ndarray | None = None
    svm_normal: np.ndarray | None = None
    svm_offset: float | None = None
    svm_alpha: np.ndarray | None = None

    def with_threshold(self, threshold: float) -> "TrainedMatcher":
        return replace(self, threshold=float(threshold))

    def score_batch(self, E) -> np.ndarray:
        E = np.atleast_2d(np.asarray(E, dtype=float))
        if self.kind == "centroid":
            return -np.linalg.norm(E - self.centroid, axis=1)
        if self.kind == "maximum":
            d = np.linalg.norm(E[:, None, :] - self.samples[None, :, :], axis=2)
            return -np.min(d / self.weights, axis=1)
        if self.kind == "ocsvm":
            norm = np.linalg.norm(self.svm_normal)
            return (E @ self.svm_normal - self.svm_offset) / norm
        raise ValueError(f"unknown matcher kind {self.kind!r}")

    def score(self, e) -> float:
        return float(self.score_batch(np.asarray(e)[None, :])[0])

    def decide_batch(self, E) -> np.ndarray:
        if self.threshold is None:
            raise RuntimeError("matcher has no calibrated threshold")
        return self.score_batch(E) >= self.threshold

    def decide(self, e) -> bool:
        return bool(self.decide_batch(np.asarray(e)[None, :])[0])


def _solve_ocsvm(X: np.ndarray, weights: np.ndarray, nu: float,
                 kkt_tol: float = 1e-6, max_iter: int | None = None):
    """Weighted one-class nu-SVM dual with linear kernel, solved by SMO.

    minimize 0.5 a^T Q a  s.t.  sum(a) = 1,  0 <= a_i <= w_i/(nu * sum(w))

    Pairwise coordinate steps preserve the equality constraint; the pair is
    chosen by maximal KKT violation and the step size by the second-order
    optimum clipped to the box. Returns (alpha, normal, offset).
    """
    n = X.shape[0]
    C = weights / (nu * float(np.sum(weights)))
    Q = X @ X.T
    # feasible start: alpha_i = nu * C_i sums to exactly 1 within the box
    alpha = nu * C
    alpha *= 1.0 / alpha.sum()
    G = Q @ alpha
    if max_iter is None:
        max_iter = 200 * n + 2000
    eps = 1e-12
    violation = np.inf
    for it in range(max_iter):
        up = alpha < C - eps  # can receive mass
        down = alpha > eps  # can give mass
        Gi = np.where(up, G, np.inf)
        Gj = np.where(down, G, -np.inf)
        i = int(np.argmin(Gi))
        j = int(np.argmax(Gj))
        violation = float(Gj[j] - Gi[i])
        if violation <= kkt_tol:
            break
        a = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        step = violation / max(a, eps)
        step = min(step, C[i] - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        G += (Q[:, i] - Q[:, j]) * step
    else:
        raise SvmTrainingError(violation, max_iter)
    normal = X.T @ alpha
    margin = (alpha > eps) & (alpha < C - eps)
    if np.any(margin):
        offset = float(np.mean(G[margin]))
    else:
        lo = G[alpha > eps]
        hi = G[alpha < C - eps]
        offset = float((np.max(lo) + np.min(hi)) / 2.0) if lo.size and hi.size \
            else float(np.mean(G))
    return alpha, normal, offset


def train(kind: str, template: Template, scheme: str = "flat",
          nu: float | None = None, threshold: float | None = None) -> TrainedMatcher:
    """Fit a matcher of the given kind on the template.

    centroid stores the weighted mean embedding; maximum stores the weighted
    samples (effective distance d_i / w_i, so low-weight old samples count as
    farther); ocsvm solves the weighted one-class dual. `threshold` is carried
    through unchanged so retraining never moves the operating point.
    """
    if kind not in MATCHER_KINDS:
        raise ValueError(f"unknown matcher kind {kind!r}")
    weights = compute_weights(template, scheme)
    E = template.embeddings
    if kind == "centroid":
        return TrainedMatcher(kind, scheme, threshold,
                              centroid=weighted_mean(E, weights))
    if kind == "maximum":
        return TrainedMatcher(kind, scheme, threshold, samples=E, weights=weights)
    if nu is None or not 0.0 < nu <= 1.0:
        raise ValueError("ocsvm requires nu in (0, 1]")
    if template.size * nu < 1.0:
        raise ValueError(
            f"ocsvm needs n*nu >= 1 (n={template.size}, nu={nu})")
    alpha, normal, offset = _solve_ocsvm(E, weights, nu)
    return TrainedMatcher(kind, scheme, threshold, nu=nu,
                          svm_normal=normal, svm_offset=offset, svm_alpha=alpha)


def calibrate_threshold_at_eer(genuine, impostor) -> tuple[float, float]:
    """Pick the threshold balancing FAR and FRR; return (threshold, eer).

    Candidates are the midpoints of the merged sorted score set plus +-inf.
    FAR(t) is the fraction of impostor scores >= t, FRR(t) the fraction of
    genuine scores < t. The threshold minimizing |FAR - FRR| wins, ties going
    to the lower (more permissive) threshold; EER = (FAR + FRR)/2 there.
    """
    genuine = np.asarray(genuine, dtype=float)
    impostor = np.asarray(impostor, dtype=float)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("both genuine and impostor score sets must be non-empty")
    if not (np.all(np.isfinite(genuine)) and np.all(np.isfinite(impostor))):
        raise ValueError("scores must be finite")
    merged = np.unique(np.concatenate([genuine, impostor]))
    midpoints = (merged[:-1] + merged[1:]) / 2.0
    candidates = np.concatenate([[-np.inf], midpoints, [np.inf]])
    far = np.mean(impostor[None, :] >= candidates[:, None], axis=1)
    frr = np.mean(genuine[None, :] < candidates[:, None], axis=1)
    best = int(np.argmin(np.abs(far - frr)))  # first minimum = lowest threshold
    return float(candidates[best]), float((far[best] + frr[best]) / 2.0)
