"""Unsupervised template self-updating with an append-only log and rollback.

The update policy is an infinite window: any probe scoring at or above the
fixed acceptance threshold is appended to the template and the matcher is
retrained immediately (same threshold — calibration happens once, at
enrolment). AuthSystem values are immutable; every attempt returns a new
system state, which makes replays and concurrent pair sweeps trivially safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .features import FeatureExtractor
from .matchers import (
    ORIGIN_SELF_UPDATE,
    SvmTrainingError,
    Template,
    TrainedMatcher,
    train,
)

EVENT_UPDATE = "update"
EVENT_ROLLBACK = "rollback"


@dataclass(frozen=True)
class UpdatePolicy:
    """Infinite-window self-update; optional lockout after consecutive rejects."""

    max_consecutive_rejects: int | None = None


@dataclass(frozen=True)
class UpdateEvent:
    order: int
    kind: str  # EVENT_UPDATE | EVENT_ROLLBACK
    accepted: bool
    score: float | None
    origin: str
    template_size: int
    embedding: np.ndarray | None = None
    error: str | None = None

    def to_record(self) -> dict:
        return {
            "order": self.order,
            "kind": self.kind,
            "accepted": self.accepted,
            "score": self.score,
            "origin": self.origin,
            "template_size": self.template_size,
            "error": self.error,
        }


@dataclass(frozen=True)
class AuthSystem:
    """A deployed verifier: extractor, template, matcher, policy, and its log."""

    extractor: FeatureExtractor | None
    template: Template
    matcher: TrainedMatcher
    policy: UpdatePolicy
    log: tuple[UpdateEvent, ...] = ()
    consecutive_rejects: int = 0

    @property
    def threshold(self) -> float:
        return self.matcher.threshold

    @property
    def locked(self) -> bool:
        limit = self.policy.max_consecutive_rejects
        return limit is not None and self.consecutive_rejects >= limit


def enrol(template: Template, kind: str, scheme: str, threshold: float,
          nu: float | None = None, extractor: FeatureExtractor | None = None,
          policy: UpdatePolicy | None = None) -> AuthSystem:
    """Build a fresh system from an enrolment template and a calibrated threshold."""
    matcher = train(kind, template, scheme, nu=nu, threshold=threshold)
    return AuthSystem(extractor=extractor, template=template, matcher=matcher,
                      policy=policy or UpdatePolicy())


def attempt_auth_and_update(sys: AuthSystem, embedding,
                            origin: str = "probe") -> tuple[bool, AuthSystem]:
    """Score a probe; on acceptance append it to the template and retrain.

    Returns (accepted, new_system). The threshold never moves. If retraining
    fails (ocsvm non-convergence) the sample is rejected and the template
    reverted. When the policy's consecutive-reject limit has been reached the
    template is locked: probes are still scored but nothing is ever appended.
    """
    e = np.asarray(embedding, dtype=float)
    score = sys.matcher.score(e)
    accepted = bool(score >= sys.matcher.threshold)
    order = len(sys.log)
    if accepted and not sys.locked:
        new_template = sys.template.append(e, origin=ORIGIN_SELF_UPDATE)
        try:
            new_matcher = train(sys.matcher.kind, new_template, sys.matcher.scheme,
                                nu=sys.matcher.nu, threshold=sys.matcher.threshold)
        except SvmTrainingError as exc:
            event = UpdateEvent(order, EVENT_UPDATE, False, score, origin,
                                sys.template.size, embedding=e, error=str(exc))
            return False, replace(sys, log=sys.log + (event,),
                                  consecutive_rejects=sys.consecutive_rejects + 1)
        event = UpdateEvent(order, EVENT_UPDATE, True, score, origin,
                            new_template.size, embedding=e)
        return True, replace(sys, template=new_template, matcher=new_matcher,
                             log=sys.log + (event,), consecutive_rejects=0)
    error = "update_locked" if (accepted and sys.locked) else None
    event = UpdateEvent(order, EVENT_UPDATE, False, score, origin,
                        sys.template.size, embedding=e, error=error)
    rejects = 0 if accepted else sys.consecutive_rejects + 1
    return False, replace(sys, log=sys.log + (event,), consecutive_rejects=rejects)


def rollback(sys: AuthSystem, k: int) -> AuthSystem:
    """Remove the last k self-update entries and retrain; enrolled entries stay.

    The log keeps its full history and gains a rollback marker. k=0 is a no-op.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return sys
    new_template = sys.template.drop_last_updates(k)
    new_matcher = train(sys.matcher.kind, new_template, sys.matcher.scheme,
                        nu=sys.matcher.nu, threshold=sys.matcher.threshold)
    event = UpdateEvent(len(sys.log), EVENT_ROLLBACK, False, None,
                        f"rollback:{k}", new_template.size)
    return replace(sys, template=new_template, matcher=new_matcher,
                   log=sys.log + (event,))


def accepted_update_embeddings(sys: AuthSystem) -> np.ndarray:
    """Embeddings of self-update entries currently in the template, in order."""
    rows = [e.embedding for e in sys.template.entries
            if e.origin == ORIGIN_SELF_UPDATE]
    if not rows:
        return np.empty((0, sys.template.d_emb))
    return np.stack(rows)


def log_to_jsonl(log) -> str:
    """Serialize an update log as JSON-lines, one event per line."""
    return "\n".join(json.dumps(ev.to_record(), sort_keys=True) for ev in log)
