"""Adaptive imagination scheduling: pick instruction-driven (static) or
observation-driven (dynamic) imagination from uncertainty and similarity."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .errors import ContractError
from .imagination import DYNAMIC, STATIC

DEFAULT_TAU_U = 0.5
DEFAULT_TAU_S = 0.6
DEFAULT_ALPHA = 0.5
DEFAULT_WINDOW = 4


@dataclass(frozen=True)
class ModeDecision:
    mode: str
    u_t: float
    s_t: float
    tau_u: float
    tau_s: float
    step: int
    forced: bool = False

    def to_json(self) -> dict:
        return asdict(self)

    def is_valid(self) -> bool:
        if self.mode not in (STATIC, DYNAMIC) or not 0.0 <= self.u_t <= 1.0:
            return False
        if not -1.0 <= self.s_t <= 1.0:
            return False
        if self.step == 0 or self.forced:
            return self.mode == STATIC
        return (self.mode == STATIC) == (self.u_t < self.tau_u and self.s_t > self.tau_s)


def action_entropy(policy: Sequence[float]) -> float:
    """Shannon entropy of the action distribution normalised by ln(#actions)."""
    p = np.asarray(policy, float)
    if p.ndim != 1 or p.size == 0:
        raise ContractError("policy must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError(f"policy is not a distribution (sum={p.sum():.8f})")
    if p.size == 1:
        return 0.0
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum() / math.log(p.size))
    return min(max(h, 0.0), 1.0)


def path_deviation(history: Sequence[int], window: int = DEFAULT_WINDOW) -> float:
    """Revisit ratio: share of the last ``window`` positions already visited before."""
    if window < 1:
        raise ContractError("window must be >= 1")
    history = list(history)
    if not history:
        return 0.0
    start = max(0, len(history) - window)
    revisits = sum(1 for i in range(start, len(history)) if history[i] in history[:i])
    return revisits / (len(history) - start)


def trajectory_uncertainty(entropy: float, deviation: float, alpha: float = DEFAULT_ALPHA) -> float:
    for name, x in (("entropy", entropy), ("deviation", deviation), ("alpha", alpha)):
        if not 0.0 <= x <= 1.0:
            raise ContractError(f"{name}={x} outside [0, 1]")
    return alpha * entropy + (1.0 - alpha) * deviation


def visual_similarity(imagined_embed, observed_embed) -> float:
    a = np.asarray(imagined_embed, float)
    b = np.asarray(observed_embed, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def select_mode(u_t: float, s_t: float, tau_u: float = DEFAULT_TAU_U, tau_s: float = DEFAULT_TAU_S,
                step: int = 1) -> ModeDecision:
    if not (math.isfinite(tau_u) and math.isfinite(tau_s)):
        raise ContractError("thresholds must be finite")
    if step == 0:
        # nothing has been imagined or decided yet: start from the instruction
        return ModeDecision(STATIC, 0.0, 1.0, tau_u, tau_s, 0)
    mode = STATIC if (u_t < tau_u and s_t > tau_s) else DYNAMIC
    return ModeDecision(mode, float(u_t), float(s_t), tau_u, tau_s, step)
