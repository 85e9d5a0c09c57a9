"""Closed-loop navigation: schedule, imagine, align, reason, act."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .alignment import PafParams, fuse_and_decode
from .environment import Episode, Panorama, World, render_observation, shortest_path
from .errors import ContractError
from .imagination import (
    STATIC,
    InstructionState,
    SceneHypothesis,
    blank_hypothesis,
    embed,
    imagine_dynamic,
    imagine_static,
)
from .reasoner import (
    DIRECT,
    STOP,
    CandidateEvidence,
    Decision,
    ReasonerConfig,
    ReasoningTrace,
    decide,
    decide_direct,
    ground_goal,
    update_progress,
    verify_perception,
)
from .scheduler import (
    DEFAULT_ALPHA,
    DEFAULT_TAU_S,
    DEFAULT_TAU_U,
    DEFAULT_WINDOW,
    ModeDecision,
    action_entropy,
    path_deviation,
    select_mode,
    trajectory_uncertainty,
    visual_similarity,
)

STOPPED = "stopped"
BUDGET_EXHAUSTED = "budget_exhausted"
STATIC_STREAK = 3
# attention maps whose range is below this carry no spatial information
FLAT_MAP_TOL = 1e-6

# (mode, instruction, panorama, history, world, viewpoint) -> hypothesis
Imaginer = Callable[[str, InstructionState, Panorama, Sequence[int], World, int], SceneHypothesis]
# (step, instruction, stage texts, evidence) -> {stage1, stage2, stage3, action} or None
ReasonHook = Callable[[int, InstructionState, dict, Sequence[CandidateEvidence]], "dict | None"]


@dataclass(frozen=True)
class AgentConfig:
    max_steps: int = 20
    no_imagination: bool = False
    no_filter: bool = False
    no_ais: bool = False
    no_cot: bool = False
    tau_u: float = DEFAULT_TAU_U
    tau_s: float = DEFAULT_TAU_S
    alpha: float = DEFAULT_ALPHA
    window: int = DEFAULT_WINDOW
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)
    seed: int = 0
    mask_salient: bool = True

    def reasoner_config(self) -> ReasonerConfig:
        if self.no_imagination:
            return replace(self.reasoner, w_similarity=0.0)
        return self.reasoner


@dataclass
class AgentState:
    viewpoint: int
    visited: list[int]
    instr: InstructionState
    path_length: float = 0.0
    step: int = 0
    last_policy: tuple[float, ...] | None = None
    last_hypothesis: SceneHypothesis | None = None
    traces: list[ReasoningTrace] = field(default_factory=list)
    actions: list[int | str] = field(default_factory=list)
    termination: str | None = None
    # per-step bookkeeping for failure flags
    modes: list[ModeDecision] = field(default_factory=list)
    hop_masses: list[tuple[float, float]] = field(default_factory=list)
    similarities: list[float] = field(default_factory=list)
    keep_maps: bool = False
    attention_maps: list[np.ndarray] = field(default_factory=list)

    @property
    def terminated(self) -> bool:
        return self.termination is not None


@dataclass
class Trajectory:
    episode_id: int
    viewpoints: list[int]
    actions: list[int | str]
    traces: list[ReasoningTrace]
    termination: str
    path_length: float
    instruction_cursor: int
    failure_flags: dict[str, bool]
    attention_maps: list[np.ndarray] = field(default_factory=list)

    @property
    def final_viewpoint(self) -> int:
        return self.viewpoints[-1]

    def to_json(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "viewpoints": self.viewpoints,
            "actions": self.actions,
            "termination": self.termination,
            "metrics": {
                "path_length": self.path_length,
                "steps": len(self.actions),
                "instruction_cursor": self.instruction_cursor,
                "failure_flags": self.failure_flags,
            },
        }

    def trace_records(self) -> list[dict]:
        return [dict(t.to_json(), episode_id=self.episode_id) for t in self.traces]


def initial_state(episode: Episode) -> AgentState:
    return AgentState(episode.start, [episode.start], InstructionState(tuple(episode.entities)))


def render_seed(seed: int, episode_id: int) -> int:
    return int(np.random.SeedSequence([seed, episode_id]).generate_state(1)[0])


def builtin_imaginer(mask_salient: bool = True) -> Imaginer:
    def imagine(mode, instr, pano, history, world, viewpoint):
        if mode == STATIC:
            return imagine_static(instr, world.params, pano, mask_salient)
        return imagine_dynamic(pano, history, instr, world.params, viewpoint, mask_salient)
    return imagine


def _schedule(state: AgentState, pano: Panorama, config: AgentConfig) -> ModeDecision:
    if state.step == 0:
        return select_mode(0.0, 1.0, config.tau_u, config.tau_s, step=0)
    u = trajectory_uncertainty(
        action_entropy(state.last_policy),
        path_deviation(state.visited, config.window),
        config.alpha,
    )
    s = visual_similarity(embed(state.last_hypothesis.imagined), embed(pano.grid))
    decision = select_mode(u, s, config.tau_u, config.tau_s, step=state.step)
    if config.no_ais and decision.mode != STATIC:
        decision = replace(decision, mode=STATIC, forced=True)
    return decision


def _imagination_instr(instr: InstructionState) -> InstructionState:
    # once every entity is met the agent keeps picturing the final one
    if instr.exhausted and instr.entities:
        return InstructionState(instr.entities, len(instr.entities) - 1)
    return instr


def step(
    state: AgentState,
    world: World,
    paf_params: PafParams,
    config: AgentConfig,
    episode: Episode | None = None,
    imaginer: Imaginer | None = None,
    reason_hook: ReasonHook | None = None,
) -> AgentState:
    """Advance the agent by one action. Mutates and returns ``state``."""
    if state.terminated:
        raise ContractError("episode already terminated")
    imaginer = imaginer or builtin_imaginer(config.mask_salient)
    seed = render_seed(config.seed, episode.episode_id if episode else 0)
    pano = render_observation(world, state.viewpoint, seed)

    # (1) schedule
    mode = _schedule(state, pano, config)

    # (2) imagine
    goal_instr = _imagination_instr(state.instr)
    if config.no_imagination:
        hypothesis = blank_hypothesis(goal_instr.next_entity, world.params, mode.mode)
    else:
        hypothesis = imaginer(mode.mode, goal_instr, pano, state.visited, world, state.viewpoint)

    # (3) align
    if config.no_filter:
        attention = np.full(pano.grid.shape[:2], 0.5)
    else:
        attention = fuse_and_decode(paf_params, pano.grid, hypothesis.imagined, hypothesis.inpainted)
    if state.keep_maps:
        state.attention_maps.append(attention)

    # (4) reason
    target, stage1 = ground_goal(goal_instr, mode, hypothesis)
    evidence, stage2 = verify_perception(
        attention, pano, hypothesis, state.visited, world.params.vocab_size
    )
    rconf = config.reasoner_config()
    if state.instr.exhausted:
        decision = _finish_decision(evidence, state.instr, rconf)
    elif config.no_cot:
        decision = decide_direct(evidence, rconf)
    else:
        decision = decide(evidence, state.instr, rconf)
    stage3, action = decision.text, decision.action
    if config.no_cot:
        stage1 = stage2 = stage3 = DIRECT
    elif reason_hook is not None and not state.instr.exhausted:
        external = reason_hook(state.step, state.instr,
                               {"stage1": stage1, "stage2": stage2, "stage3": stage3}, evidence)
        if external is not None:
            stage1, stage2, stage3 = external["stage1"], external["stage2"], external["stage3"]
            action = external["action"]

    state.traces.append(ReasoningTrace(
        step=state.step,
        mode=mode,
        stage1_text=stage1,
        target_entity=target,
        stage2_text=stage2,
        evidence=evidence,
        stage3_text=stage3,
        action=action,
        scores=list(decision.scores),
    ))
    state.modes.append(mode)
    state.similarities.append(visual_similarity(embed(hypothesis.imagined), embed(pano.grid)))
    if episode is not None:
        state.hop_masses.append(_next_hop_mass(world, state.viewpoint, episode.goal, evidence))

    # (5) act
    state.actions.append(action)
    state.last_policy = decision.policy
    state.last_hypothesis = hypothesis
    state.step += 1
    if action == STOP:
        state.termination = STOPPED
        return state
    chosen = next(e for e in evidence if e.candidate_id == action)
    if not world.graph.has_edge(state.viewpoint, chosen.candidate_id):
        raise AssertionError(f"action {chosen.candidate_id} is not a neighbor of {state.viewpoint}")
    state.path_length += world.graph.edge_length(state.viewpoint, chosen.candidate_id)
    state.viewpoint = chosen.candidate_id
    state.visited.append(chosen.candidate_id)

    # (6) progress
    state.instr = update_progress(state.instr, chosen, float(np.ptp(attention)) > FLAT_MAP_TOL)
    return state


def _finish_decision(evidence: Sequence[CandidateEvidence], instr: InstructionState,
                     config: ReasonerConfig) -> Decision:
    """Every instruction entity has been confirmed: stop, still reporting the score table."""
    scored = decide(evidence, instr, config)
    stop = dict(scored.scores)[STOP]
    text = (f"Every landmark in the instruction has been confirmed, so stop here "
            f"(stop score {stop:.2f}, best move {max(s for a, s in scored.scores if a != STOP):.2f}).")
    return Decision(STOP, scored.policy, scored.scores, text)


def _next_hop_mass(world: World, v: int, goal: int, evidence: Sequence[CandidateEvidence]) -> tuple[float, float]:
    masses = [e.attention_mass for e in evidence]
    if v == goal:
        return float("nan"), float(np.mean(masses))
    path, _ = shortest_path(world.graph, v, goal)
    hop = next(e.attention_mass for e in evidence if e.candidate_id == path[1])
    return hop, float(np.mean(masses))


def failure_flags(state: AgentState, tau_s: float) -> dict[str, bool]:
    """Heuristic failure categories: poor imagination, misaligned attention,
    over-reliance on the instruction-driven mode."""
    imagination = bool(state.similarities) and state.similarities[-1] < 0.0
    hops = [(h, m) for h, m in state.hop_masses if not np.isnan(h)]
    misaligned = sum(h < m for h, m in hops)
    attention = bool(hops) and 2 * misaligned > len(hops)
    streak = best = 0
    for d in state.modes:
        streak = streak + 1 if (d.mode == STATIC and d.s_t < tau_s and d.step > 0) else 0
        best = max(best, streak)
    return {
        "inaccurate_imagination": imagination,
        "attention_misalignment": attention,
        "static_over_reliance": best >= STATIC_STREAK,
    }


def run_episode(
    world: World,
    episode: Episode,
    paf_params: PafParams,
    config: AgentConfig | None = None,
    imaginer: Imaginer | None = None,
    reason_hook: ReasonHook | None = None,
    keep_maps: bool = False,
) -> Trajectory:
    config = config or AgentConfig()
    if not 0 <= episode.start < world.graph.n or not 0 <= episode.goal < world.graph.n:
        raise ContractError(f"episode {episode.episode_id} does not belong to this world")
    state = initial_state(episode)
    state.keep_maps = keep_maps
    while not state.terminated and state.step < config.max_steps:
        step(state, world, paf_params, config, episode, imaginer, reason_hook)
    return Trajectory(
        episode_id=episode.episode_id,
        viewpoints=list(state.visited),
        actions=list(state.actions),
        traces=list(state.traces),
        termination=state.termination or BUDGET_EXHAUSTED,
        path_length=state.path_length,
        instruction_cursor=state.instr.cursor,
        failure_flags=failure_flags(state, config.tau_s),
        attention_maps=state.attention_maps,
    )
