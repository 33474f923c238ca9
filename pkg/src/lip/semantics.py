"""Capability adjudication, prior blending, semantic entropy and the prior store."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Protocol, Sequence

from .canonical import canonical_bytes
from .errors import NoViableCandidates, SemanticsError, UnnormalizedDistribution
from .protocol import ContextState, IntentPayload

log = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9
PRIOR_INITIAL = 0.5
LEXICAL_WEIGHT = 0.5
CONSTRAINT_WEIGHT = 0.5

_TOKEN = re.compile(r"[^\W_]+")


def tokens(*texts: str) -> frozenset[str]:
    """Lowercased alphanumeric runs, deduplicated."""
    out: set[str] = set()
    for text in texts:
        out.update(_TOKEN.findall(text.lower()))
    return frozenset(out)


@dataclass(frozen=True)
class Capability:
    capability_id: str
    owner: str
    description: str
    tags: frozenset[str] = frozenset()
    declared_scopes: frozenset[str] = frozenset()
    constraint_domain: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.capability_id:
            raise SemanticsError("capability_id must be non-empty")
        if not self.description or not self.description.strip():
            raise SemanticsError(f"capability {self.capability_id}: description must be non-empty")
        for name in ("tags", "declared_scopes", "constraint_domain"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))

    def to_doc(self) -> dict:
        return {
            "capability_id": self.capability_id,
            "owner": self.owner,
            "description": self.description,
            "tags": sorted(self.tags),
            "declared_scopes": sorted(self.declared_scopes),
            "constraint_domain": sorted(self.constraint_domain),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any], owner: Optional[str] = None) -> "Capability":
        return cls(
            capability_id=doc["capability_id"],
            owner=owner if owner is not None else doc["owner"],
            description=doc["description"],
            tags=frozenset(doc.get("tags", ())),
            declared_scopes=frozenset(doc.get("declared_scopes", ())),
            constraint_domain=frozenset(doc.get("constraint_domain", ())),
        )


@dataclass(frozen=True)
class ConstraintMatch:
    key: str
    matched: bool
    score: float
    context_value: Any = None

    def to_doc(self) -> dict:
        doc = {"key": self.key, "matched": self.matched, "score": self.score}
        if self.context_value is not None:
            doc["context"] = self.context_value
        return doc


@dataclass(frozen=True)
class Rationale:
    lexical_score: float
    matched_tokens: tuple[str, ...]
    constraints: tuple[ConstraintMatch, ...]
    note: str = ""

    def to_doc(self) -> dict:
        doc = {
            "lexical_score": self.lexical_score,
            "matched_tokens": list(self.matched_tokens),
            "constraints": [c.to_doc() for c in self.constraints],
        }
        if self.note:
            doc["note"] = self.note
        return doc


@dataclass(frozen=True)
class CandidateJudgment:
    capability_id: str
    suitability: float
    rationale: Rationale
    blended: Optional[float] = None

    def __post_init__(self):
        for name in ("suitability", "blended"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise SemanticsError(f"{name} {v} outside [0, 1]")

    @property
    def effective(self) -> float:
        return self.suitability if self.blended is None else self.blended

    def to_doc(self) -> dict:
        doc = {
            "capability_id": self.capability_id,
            "suitability": self.suitability,
            "rationale": self.rationale.to_doc(),
        }
        if self.blended is not None:
            doc["blended"] = self.blended
        return doc


@dataclass(frozen=True)
class SuitabilityDistribution:
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(k), float(p)) for k, p in self.entries)
        if not entries:
            raise SemanticsError("distribution needs at least one entry")
        ids = [k for k, _ in entries]
        if len(set(ids)) != len(ids):
            raise SemanticsError("distribution entries must have distinct ids")
        for k, p in entries:
            if not math.isfinite(p) or p < 0:
                raise SemanticsError(f"probability for {k} must be finite and non-negative")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_weights(cls, weights: Mapping[str, float] | Iterable[tuple[str, float]]) -> "SuitabilityDistribution":
        items = list(weights.items()) if isinstance(weights, Mapping) else list(weights)
        total = math.fsum(w for _, w in items)
        if total <= 0:
            raise NoViableCandidates("all weights are zero")
        return cls(tuple((k, w / total) for k, w in items))

    @classmethod
    def uniform(cls, ids: Sequence[str]) -> "SuitabilityDistribution":
        return cls.from_weights([(k, 1.0) for k in ids])

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.entries)

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def without(self, ids: Iterable[str]) -> "SuitabilityDistribution":
        drop = set(ids)
        return SuitabilityDistribution.from_weights([(k, p) for k, p in self.entries if k not in drop])

    def to_doc(self) -> list:
        return [[k, p] for k, p in self.entries]


@dataclass(frozen=True)
class OutcomePrior:
    capability_id: str
    rho: float = PRIOR_INITIAL
    observations: int = 0
    last_update: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise SemanticsError(f"prior rho {self.rho} outside [0, 1]")
        if self.observations < 0:
            raise SemanticsError("observations must be non-negative")

    def to_doc(self) -> dict:
        return {
            "capability_id": self.capability_id,
            "rho": self.rho,
            "observations": self.observations,
            "last_update": self.last_update,
        }


@dataclass(frozen=True)
class AdjudicatorConfig:
    admission_threshold: float = 0.35
    alpha: float = 0.7
    prior_smoothing: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.admission_threshold <= 1.0:
            raise SemanticsError("admission_threshold must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise SemanticsError("alpha must lie in [0, 1]")
        if not 0.0 < self.prior_smoothing <= 1.0:
            raise SemanticsError("prior_smoothing must lie in (0, 1]")


# -- adjudication --------------------------------------------------------------


class Adjudicator(Protocol):
    def judge(
        self, intent: IntentPayload, context: ContextState, capabilities: Sequence[Capability]
    ) -> list[CandidateJudgment]: ...


class LexicalAdjudicator:
    """Deterministic default: token overlap plus constraint-domain coverage."""

    def __init__(self, lexical_weight: float = LEXICAL_WEIGHT, constraint_weight: float = CONSTRAINT_WEIGHT):
        self.lexical_weight = lexical_weight
        self.constraint_weight = constraint_weight

    def judge(self, intent, context, capabilities):
        wanted = tokens(intent.goal_text, *intent.tags)
        keys = [c.key for c in intent.constraints]
        out = []
        for cap in capabilities:
            offered = tokens(cap.description, *cap.tags)
            common = wanted & offered
            lexical = len(common) / len(wanted) if wanted else 0.0
            matches = tuple(
                ConstraintMatch(k, k in cap.constraint_domain, 1.0 if k in cap.constraint_domain else 0.0, context.facts.get(k))
                for k in keys
            )
            if keys:
                coverage = sum(m.score for m in matches) / len(keys)
                score = self.lexical_weight * lexical + self.constraint_weight * coverage
            else:
                # nothing to cover: lexical alignment decides alone
                score = lexical
            out.append(
                CandidateJudgment(
                    capability_id=cap.capability_id,
                    suitability=min(1.0, max(0.0, score)),
                    rationale=Rationale(lexical, tuple(sorted(common)), matches),
                )
            )
        return out


class HttpAdjudicator:
    """Delegates judgment to an external model service speaking JSON over HTTP.

    The service receives ``{"intent", "context", "capabilities"}`` and must
    answer with a list of ``{"capability_id", "suitability", "rationale"}``.
    Constraint coverage in the returned rationale is recomputed locally so
    every judgment still lists each intent key exactly once.
    """

    def __init__(self, url: str, timeout: float = 30.0, opener=None):
        self.url = url
        self.timeout = timeout
        self._open = opener or urllib.request.urlopen

    def judge(self, intent, context, capabilities):
        body = canonical_bytes(
            {
                "intent": intent.to_doc(),
                "context": context.to_doc(),
                "capabilities": [c.to_doc() for c in capabilities],
            }
        )
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        with self._open(req, timeout=self.timeout) as resp:
            answer = json.loads(resp.read().decode("utf-8"))
        by_id = {c.capability_id: c for c in capabilities}
        out = []
        for item in answer:
            cap = by_id.get(item.get("capability_id"))
            if cap is None:
                continue
            s = float(item["suitability"])
            if not 0.0 <= s <= 1.0:
                raise SemanticsError(f"external adjudicator returned suitability {s} for {cap.capability_id}")
            matches = tuple(
                ConstraintMatch(c.key, c.key in cap.constraint_domain, 1.0 if c.key in cap.constraint_domain else 0.0)
                for c in intent.constraints
            )
            note = item.get("rationale", "")
            out.append(CandidateJudgment(cap.capability_id, s, Rationale(0.0, (), matches, str(note))))
        missing = set(by_id) - {j.capability_id for j in out}
        if missing:
            raise SemanticsError(f"external adjudicator skipped: {', '.join(sorted(missing))}")
        return out


def adjudicate(
    intent: IntentPayload,
    context: ContextState,
    capabilities: Sequence[Capability],
    adjudicator: Optional[Adjudicator] = None,
) -> list[CandidateJudgment]:
    """One judgment per capability, best first; ties broken by capability id."""
    if not capabilities:
        raise NoViableCandidates("no capabilities to adjudicate")
    judgments = (adjudicator or LexicalAdjudicator()).judge(intent, context, capabilities)
    return sorted(judgments, key=lambda j: (-j.suitability, j.capability_id))


def blend_score(s: float, rho: float, alpha: float) -> float:
    for name, v in (("s", s), ("rho", rho), ("alpha", alpha)):
        if not 0.0 <= v <= 1.0:
            raise SemanticsError(f"{name}={v} outside [0, 1]")
    return alpha * s + (1.0 - alpha) * rho


def apply_priors(judgments: Sequence[CandidateJudgment], priors: "PriorStore", alpha: float) -> list[CandidateJudgment]:
    return [replace(j, blended=blend_score(j.suitability, priors.get(j.capability_id).rho, alpha)) for j in judgments]


def entropy(dist: SuitabilityDistribution) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    total = math.fsum(p for _, p in dist.entries)
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise UnnormalizedDistribution(f"probabilities sum to {total!r}")
    h = -math.fsum(p * math.log(p) for _, p in dist.entries if p > 0.0)
    return max(0.0, h)


def normalize_judgments(judgments: Sequence[CandidateJudgment]) -> SuitabilityDistribution:
    weights = [(j.capability_id, j.effective) for j in judgments]
    if not weights or all(w <= 0 for _, w in weights):
        raise NoViableCandidates("every candidate scored zero")
    return SuitabilityDistribution.from_weights(weights)


def admit(judgments: Sequence[CandidateJudgment], config: AdjudicatorConfig) -> list[CandidateJudgment]:
    return [j for j in judgments if j.effective >= config.admission_threshold]


def outcome_signal(indicators: Sequence[float]) -> float:
    """Mean of the available outcome indicators, each in [0, 1]."""
    if not indicators:
        raise SemanticsError("no outcome indicators supplied")
    for v in indicators:
        if not 0.0 <= v <= 1.0:
            raise SemanticsError(f"indicator {v} outside [0, 1]")
    return math.fsum(indicators) / len(indicators)


def update_prior(prior: OutcomePrior, outcome: float, config: AdjudicatorConfig, now: Optional[int] = None) -> OutcomePrior:
    if not 0.0 <= outcome <= 1.0:
        raise SemanticsError(f"outcome {outcome} outside [0, 1]")
    lam = config.prior_smoothing
    rho = (1.0 - lam) * prior.rho + lam * outcome
    return OutcomePrior(
        capability_id=prior.capability_id,
        rho=min(1.0, max(0.0, rho)),
        observations=prior.observations + 1,
        last_update=prior.last_update if now is None else now,
    )


class PriorStore:
    """Outcome priors keyed by capability id, optionally backed by a JSON-lines file.

    Updates append one line; ``compact`` rewrites the file with the latest
    value per capability.
    """

    def __init__(self, path: Optional[os.PathLike | str] = None, initial: float = PRIOR_INITIAL):
        self.path = Path(path) if path is not None else None
        self.initial = initial
        self._priors: dict[str, OutcomePrior] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    prior = OutcomePrior(doc["capability_id"], float(doc["rho"]), int(doc["observations"]), int(doc["last_update"]))
                except (ValueError, KeyError, TypeError, SemanticsError) as exc:
                    raise SemanticsError(f"{self.path}:{lineno}: bad prior record ({exc})") from exc
                self._priors[prior.capability_id] = prior

    def get(self, capability_id: str) -> OutcomePrior:
        with self._lock:
            return self._priors.get(capability_id) or OutcomePrior(capability_id, self.initial)

    def update(self, capability_id: str, outcome: float, config: AdjudicatorConfig, now: Optional[int] = None) -> OutcomePrior:
        with self._lock:
            current = self._priors.get(capability_id) or OutcomePrior(capability_id, self.initial)
            new = update_prior(current, outcome, config, now)
            self._priors[capability_id] = new
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "ab") as fh:
                    fh.write(canonical_bytes(new.to_doc()) + b"\n")
            return new

    def snapshot(self) -> dict[str, OutcomePrior]:
        with self._lock:
            return dict(self._priors)

    def compact(self) -> None:
        if self.path is None:
            return
        with self._lock:
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            with open(tmp, "wb") as fh:
                for cid in sorted(self._priors):
                    fh.write(canonical_bytes(self._priors[cid].to_doc()) + b"\n")
            os.replace(tmp, self.path)
