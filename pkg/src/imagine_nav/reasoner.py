"""Three-stage navigational reasoning: goal grounding, perceptual verification,
decision justification. Deterministic templates over the filter's evidence."""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np

from .environment import Panorama, code_table, entity_name
from .errors import ContractError
from .imagination import PRESENCE_THRESHOLD, InstructionState, SceneHypothesis, cosine, embed
from .scheduler import ModeDecision

STOP = "STOP"
MASS_THRESHOLD = 0.5
DIRECT = "direct"


@dataclass(frozen=True)
class ReasonerConfig:
    w_similarity: float = 1.0
    w_attention: float = 1.0
    w_entity: float = 0.5
    w_revisit: float = 0.5
    stop_base: float = -0.25
    temperature: float = 0.5


@dataclass(frozen=True)
class CandidateEvidence:
    candidate_id: int
    tile_index: int
    attention_mass: float
    similarity: float
    revisit: bool
    entities_seen: tuple[int, ...]

    def to_json(self) -> dict:
        d = asdict(self)
        d["entities_seen"] = list(self.entities_seen)
        return d


@dataclass(frozen=True)
class Decision:
    action: int | str
    policy: tuple[float, ...]
    scores: tuple[tuple[int | str, float], ...]
    text: str


@dataclass
class ReasoningTrace:
    step: int
    mode: ModeDecision
    stage1_text: str
    target_entity: int
    stage2_text: str
    evidence: list[CandidateEvidence]
    stage3_text: str
    action: int | str
    scores: list[tuple[int | str, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "mode": self.mode.to_json(),
            "stage1": {"text": self.stage1_text, "target_entity": self.target_entity},
            "stage2": {"text": self.stage2_text, "evidence": [e.to_json() for e in self.evidence]},
            "stage3": {"text": self.stage3_text, "action": self.action},
            "scores": [{"action": a, "score": s} for a, s in self.scores],
            "action": self.action,
        }


def trace_problems(trace: dict) -> list[str]:
    """Lint a serialized trace; an empty list means it satisfies the trace contract."""
    problems = []
    for stage in ("stage1", "stage2", "stage3"):
        text = (trace.get(stage) or {}).get("text")
        if not isinstance(text, str) or not text.strip():
            problems.append(f"{stage} missing or empty")
    mode = trace.get("mode")
    try:
        if not ModeDecision(**mode).is_valid():
            problems.append("mode decision violates the scheduling rule")
    except TypeError:
        problems.append("mode decision malformed")
    actions = [row.get("action") for row in trace.get("scores", [])]
    if trace.get("action") not in actions:
        problems.append(f"action {trace.get('action')!r} not in score table")
    return problems


def direction_phrase(tile_index: int, k: int) -> str:
    pos = (tile_index + 0.5) / k
    if pos < 1 / 3:
        return "left side"
    if pos < 2 / 3:
        return "center"
    return "right side"


def ground_goal(instr: InstructionState, decision: ModeDecision, hypothesis: SceneHypothesis) -> tuple[int, str]:
    target = hypothesis.target_entity
    text = (f"Looking for {entity_name(target)} "
            f"({decision.mode} mode, u={decision.u_t:.2f}, s={decision.s_t:.2f})")
    if instr.next_entity is not None and instr.next_entity != target:
        text += f"; a stand-in for the {entity_name(instr.next_entity)} named in the instruction"
    return target, text


def tile_masses(attention: np.ndarray, k: int) -> np.ndarray:
    h, w_total = attention.shape
    if w_total % k:
        raise ContractError(f"attention width {w_total} is not a multiple of {k} tiles")
    return attention.reshape(h, k, w_total // k).mean(axis=(0, 2))


def verify_perception(
    attention: np.ndarray,
    pano: Panorama,
    hypothesis: SceneHypothesis,
    visited: Sequence[int] = (),
    vocab_size: int = 32,
) -> tuple[list[CandidateEvidence], str]:
    attention = np.asarray(attention, float)
    grid = pano.grid
    if attention.shape != grid.shape[:2]:
        raise ContractError(f"attention map {attention.shape} does not match panorama {grid.shape[:2]}")
    channels = grid.shape[-1]
    table = code_table(vocab_size, channels)
    masses = tile_masses(attention, pano.k)
    target_embed = embed(hypothesis.imagined)
    visited = set(visited)
    evidence = []
    for i, (cand, tile) in enumerate(zip(pano.candidates, pano.tiles)):
        scores = tile.reshape(-1, channels) @ table.T
        present = scores.max(axis=1) > PRESENCE_THRESHOLD
        seen = tuple(sorted({int(e) for e in np.argmax(scores[present], axis=1)}))
        evidence.append(CandidateEvidence(
            candidate_id=int(cand),
            tile_index=i,
            attention_mass=float(np.clip(masses[i], 0.0, 1.0)),
            similarity=cosine(target_embed, embed(tile)),
            revisit=cand in visited,
            entities_seen=seen,
        ))
    return evidence, _stage2_text(evidence, pano.k, hypothesis.target_entity)


def _stage2_text(evidence: list[CandidateEvidence], k: int, target: int) -> str:
    name = entity_name(target)
    strong = [e for e in evidence if e.attention_mass > MASS_THRESHOLD]
    if strong:
        parts = [
            f"the mask highlights the {direction_phrase(e.tile_index, k)} of the view "
            f"(candidate {e.candidate_id}, mass {e.attention_mass:.2f}, sees {_names(e.entities_seen)})"
            for e in strong
        ]
        return f"The {name} appears to be in view: " + "; ".join(parts) + "."
    best = max(evidence, key=lambda e: (e.attention_mass, -e.candidate_id))
    return (f"No view clearly shows the {name}; the strongest response is on the "
            f"{direction_phrase(best.tile_index, k)} (candidate {best.candidate_id}, "
            f"mass {best.attention_mass:.2f}, sees {_names(best.entities_seen)}).")


def _names(entities: Sequence[int]) -> str:
    return ", ".join(entity_name(e) for e in entities) if entities else "nothing recognisable"


def softmax(scores: Sequence[float], temperature: float) -> np.ndarray:
    z = np.asarray(scores, float) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _argmax_lowest_id(evidence: Sequence[CandidateEvidence], values: Sequence[float]) -> int:
    best = max(values)
    return min(e.candidate_id for e, v in zip(evidence, values) if v == best)


def candidate_scores(evidence: Sequence[CandidateEvidence], instr: InstructionState,
                     config: ReasonerConfig) -> list[float]:
    nxt = instr.next_entity
    return [
        config.w_similarity * e.similarity
        + config.w_attention * e.attention_mass
        + config.w_entity * float(nxt is not None and nxt in e.entities_seen)
        - config.w_revisit * float(e.revisit)
        for e in evidence
    ]


def stop_score(evidence: Sequence[CandidateEvidence], instr: InstructionState, config: ReasonerConfig) -> float:
    best_mass = max(e.attention_mass for e in evidence)
    return config.stop_base + config.w_attention * best_mass * float(instr.exhausted)


def decide(evidence: Sequence[CandidateEvidence], instr: InstructionState,
           config: ReasonerConfig | None = None) -> Decision:
    config = config or ReasonerConfig()
    if not evidence:
        raise ContractError("decide needs at least one candidate")
    cand = candidate_scores(evidence, instr, config)
    stop = stop_score(evidence, instr, config)
    policy = softmax(cand + [stop], config.temperature)
    # STOP only wins when it strictly beats every candidate
    if stop > max(cand):
        action: int | str = STOP
    else:
        action = _argmax_lowest_id(evidence, cand)
    scores = tuple((e.candidate_id, float(s)) for e, s in zip(evidence, cand)) + ((STOP, float(stop)),)
    return Decision(action, tuple(float(p) for p in policy), scores, _stage3_text(action, evidence, cand, stop))


def decide_direct(evidence: Sequence[CandidateEvidence], config: ReasonerConfig | None = None) -> Decision:
    """Similarity-only choice used when structured reasoning is ablated."""
    config = config or ReasonerConfig()
    if not evidence:
        raise ContractError("decide needs at least one candidate")
    sims = [e.similarity for e in evidence]
    action = _argmax_lowest_id(evidence, sims)
    policy = softmax(sims + [config.stop_base], config.temperature)
    scores = tuple((e.candidate_id, float(s)) for e, s in zip(evidence, sims)) + ((STOP, config.stop_base),)
    return Decision(action, tuple(float(p) for p in policy), scores, DIRECT)


def _stage3_text(action, evidence, cand, stop) -> str:
    if action == STOP:
        return f"Stop here: stopping scores {stop:.2f}, above every move (best {max(cand):.2f})."
    idx = next(i for i, e in enumerate(evidence) if e.candidate_id == action)
    e = evidence[idx]
    why = []
    if e.attention_mass > MASS_THRESHOLD:
        why.append("the mask confirms the goal there")
    if e.revisit:
        why.append("despite having been there before")
    reason = f" ({'; '.join(why)})" if why else ""
    return (f"Move to candidate {e.candidate_id}: similarity {e.similarity:.2f}, attention "
            f"{e.attention_mass:.2f}, sees {_names(e.entities_seen)}; score {cand[idx]:.2f} "
            f"vs stop {stop:.2f}{reason}.")


def update_progress(instr: InstructionState, chosen: CandidateEvidence | None,
                    map_informative: bool = True) -> InstructionState:
    """Advance past the next entity once the chosen tile shows it.

    A flat attention map says nothing about where the entity is, so in that case
    the caption alone confirms it instead of the mass threshold.
    """
    if chosen is None or instr.exhausted:
        return instr
    if instr.next_entity not in chosen.entities_seen:
        return instr
    if chosen.attention_mass > MASS_THRESHOLD or not map_informative:
        return instr.advance()
    return instr
