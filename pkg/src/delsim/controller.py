"""Dynamic exit-layer policy: shadow-token statistics, decayed acceptance-rate
estimation, token-per-layer maximization, and the dynamic draft threshold.

All statistics come from the LayerSteps already produced by the round's draft
and verification passes; the update path never calls the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import SessionConfig
from .engine import DraftPlan, RoundOutcome
from .types import LayerStep, TokenId


@dataclass(frozen=True, eq=False)
class ShadowMatrix:
    """Greedy per-layer tokens and confidences for one round's positions.

    Row ``ell - 1`` of ``tokens`` holds what layer ``ell`` would have drafted
    at each position; ``target_tokens`` are the full model's argmaxes.
    """

    tokens: np.ndarray  # (L-1, g+1) token ids
    target_tokens: np.ndarray  # (g+1,)
    confidences: np.ndarray  # (L-1, g+1) top-1 probabilities

    @property
    def width(self) -> int:
        return int(self.target_tokens.size)


@dataclass(frozen=True, eq=False)
class RoundStats:
    """One round's contribution to the decayed accumulators.

    ``u_r`` is the index of the first position where the draft layer's shadow
    token disagrees with the target (or the last position if none); counts and
    confidence sums run over the inclusive window [0, u_r]. With per-layer
    windows ``u_r`` is a vector holding each layer's own first mismatch.
    """

    u_r: int | np.ndarray
    c: np.ndarray  # (L-1,) matched shadow tokens per layer
    tcs: np.ndarray  # (L-1,) confidence mass on matched tokens
    fcs: np.ndarray  # (L-1,) confidence mass on mismatched tokens


@dataclass(frozen=True, eq=False)
class DecayedStats:
    """Decayed sums over past rounds: A <- omega * A + a_r per push."""

    sc: np.ndarray
    su: float | np.ndarray
    stcs: np.ndarray
    sfcs: np.ndarray
    scnt: float


def zero_stats(n_exit_layers: int, per_layer_window: bool = False) -> DecayedStats:
    su: float | np.ndarray = np.zeros(n_exit_layers) if per_layer_window else 0.0
    return DecayedStats(
        sc=np.zeros(n_exit_layers),
        su=su,
        stcs=np.zeros(n_exit_layers),
        sfcs=np.zeros(n_exit_layers),
        scnt=0.0,
    )


def shadow_tokens(steps: Sequence[LayerStep]) -> ShadowMatrix:
    """Greedy-decode every layer's distribution at every position.

    Argmax ties break toward the lowest token id.
    """
    if len(steps) == 0:
        raise ValueError("steps must be non-empty")
    probs = np.stack([s.probs for s in steps])  # (g+1, L, V)
    am = probs.argmax(axis=2)
    top = probs.max(axis=2)
    return ShadowMatrix(
        tokens=np.ascontiguousarray(am[:, :-1].T),
        target_tokens=np.ascontiguousarray(am[:, -1]),
        confidences=np.ascontiguousarray(top[:, :-1].T),
    )


def _first_mismatch(mismatch_row: np.ndarray) -> int:
    # first True index, or the last position when the row fully matches
    if mismatch_row.any():
        return int(np.argmax(mismatch_row))
    return int(mismatch_row.size - 1)


def round_stats(sm: ShadowMatrix, exit_layer: int, per_layer_window: bool = False) -> RoundStats:
    """Window statistics for one round, windowed by the exit layer's first
    shadow mismatch (or each layer's own mismatch when per-layer windows are
    enabled for study)."""
    n_exit = sm.tokens.shape[0]
    if not 1 <= exit_layer <= n_exit:
        raise ValueError(f"exit_layer must lie in [1, {n_exit + 1}), got {exit_layer}")
    matches = sm.tokens == sm.target_tokens[None, :]
    width = sm.width
    if per_layer_window:
        mism = ~matches
        u = np.where(mism.any(axis=1), mism.argmax(axis=1), width - 1)
        mask = np.arange(width)[None, :] <= u[:, None]
    else:
        u = _first_mismatch(~matches[exit_layer - 1])
        mask = (np.arange(width) <= u)[None, :]
    in_window = matches & mask
    c = in_window.sum(axis=1).astype(np.float64)
    tcs = (sm.confidences * in_window).sum(axis=1)
    fcs = (sm.confidences * (~matches & mask)).sum(axis=1)
    return RoundStats(u_r=u, c=c, tcs=tcs, fcs=fcs)


def prefill_round_stats(sm: ShadowMatrix, per_layer_window: bool = False) -> RoundStats:
    """Pseudo-round over a prompt window: all positions count, u = width - 1."""
    width = sm.width
    matches = sm.tokens == sm.target_tokens[None, :]
    c = matches.sum(axis=1).astype(np.float64)
    tcs = (sm.confidences * matches).sum(axis=1)
    fcs = (sm.confidences * ~matches).sum(axis=1)
    u: int | np.ndarray = width - 1
    if per_layer_window:
        u = np.full(sm.tokens.shape[0], float(width - 1))
    return RoundStats(u_r=u, c=c, tcs=tcs, fcs=fcs)


def push(stats: DecayedStats, rs: RoundStats, omega: float) -> DecayedStats:
    """Fold one round into the decayed sums; the incremental form reproduces
    the direct weighted sum by induction."""
    return DecayedStats(
        sc=omega * stats.sc + rs.c,
        su=omega * stats.su + rs.u_r,
        stcs=omega * stats.stcs + rs.tcs,
        sfcs=omega * stats.sfcs + rs.fcs,
        scnt=omega * stats.scnt + 1.0,
    )


def estimate_alpha(
    stats: DecayedStats,
    eps: float,
    fallback: np.ndarray | None = None,
) -> np.ndarray:
    """Per-layer acceptance-rate estimate: decayed matches over decayed window
    indices, clamped into [eps, 1].

    When the window-index sum is zero (every round so far had u_r = 0) the
    decayed round count is used as denominator instead; with no data at all
    the fallback (e.g. the prefill-seeded estimate) is returned.
    """
    if stats.scnt <= 0.0:
        if fallback is not None:
            return np.asarray(fallback, dtype=np.float64)
        return np.full_like(stats.sc, eps)
    su = np.asarray(stats.su, dtype=np.float64)
    denom = np.where(su > 0.0, su, stats.scnt)
    return np.clip(stats.sc / denom, eps, 1.0)


def tpl(alpha: float, ell: int, d: int, L: int) -> float:
    """Expected tokens generated per layer loaded for one SD round.

    Computed as the geometric sum of acceptance powers over the drafting cost
    d*ell + L; finite at alpha = 1 where it equals (d+1)/(d*ell + L).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha out of [0,1]: {alpha}")
    if ell < 1 or ell >= L:
        raise ValueError(f"ell must lie in [1, {L}), got {ell}")
    if d < 0:
        raise ValueError(f"d must be >= 0, got {d}")
    total = 1.0
    term = 1.0
    for _ in range(d):
        term *= alpha
        total += term
    return total / (d * ell + L)


def tpl_grid(alpha: np.ndarray, d_max: int, L: int) -> np.ndarray:
    """TPL over the full (ell, d) grid; row ell-1, column d."""
    alpha = np.asarray(alpha, dtype=np.float64)
    n = alpha.size
    powers = alpha[:, None] ** np.arange(d_max + 1)[None, :]
    numer = np.cumsum(powers, axis=1)
    denom = np.arange(d_max + 1)[None, :] * np.arange(1, n + 1)[:, None] + L
    return numer / denom


def select_plan(
    stats: DecayedStats,
    thresholds: np.ndarray,
    cfg: SessionConfig,
    fallback_alpha: np.ndarray | None = None,
) -> DraftPlan:
    """Exhaustive argmax of TPL over exit layers [1, L) and lengths [0, d_max].

    Ties break toward the smaller layer, then the smaller length (cheaper and
    shorter is safer under estimation noise).
    """
    alpha = estimate_alpha(stats, cfg.alpha_clamp_eps, fallback_alpha)
    grid = tpl_grid(alpha, cfg.d_max, cfg.L)
    flat = int(np.argmax(grid))  # row-major: smallest ell, then smallest d
    ell = flat // (cfg.d_max + 1) + 1
    d = flat % (cfg.d_max + 1)
    return DraftPlan(
        exit_layer=ell,
        threshold=float(thresholds[ell - 1]),
        planned_len=d,
        cap_mode=cfg.draft_cap_mode,
    )


def update_threshold(stats: DecayedStats, cfg: SessionConfig) -> np.ndarray:
    """Per-layer draft threshold: midpoint of the decayed mean confidences of
    matched and mismatched shadow tokens.

    The mismatch mass uses the decayed sum of window sizes (u_r + 1 per round)
    minus the matched count, which keeps it non-negative. Degenerate layers
    fall back to the single available mean, then to the configured default.
    """
    sc = stats.sc
    su_prime = np.asarray(stats.su, dtype=np.float64) + stats.scnt
    miss_mass = su_prime - sc

    have_match = sc > 0.0
    have_miss = miss_mass > 1e-12
    matched_mean = np.divide(stats.stcs, sc, out=np.zeros_like(sc), where=have_match)
    miss_mean = np.divide(stats.sfcs, miss_mass, out=np.zeros_like(sc), where=have_miss)

    tau = np.full_like(sc, cfg.default_threshold)
    both = have_match & have_miss
    tau = np.where(both, 0.5 * (matched_mean + miss_mean), tau)
    tau = np.where(have_match & ~have_miss, matched_mean, tau)
    tau = np.where(~have_match & have_miss, miss_mean, tau)
    return np.clip(tau, 0.0, 1.0)


def prefill_init(
    model,
    prompt: Sequence[TokenId],
    cfg: SessionConfig,
    per_layer_window: bool = False,
):
    """Seed the controller from the prompt before the first SD round.

    Computes LayerSteps over the last min(prefill_window, len(prompt)) prompt
    positions, folds them in as one pseudo-round, and derives the initial
    thresholds and plan. Prefill cost is not charged to any ledger: it falls
    outside the generation cost window and is shared by every method.
    """
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    window = min(cfg.prefill_window, len(prompt))
    start = len(prompt) - window + 1
    steps = [model.step(list(prompt[:k])) for k in range(start, len(prompt) + 1)]
    sm = shadow_tokens(steps)
    rs = prefill_round_stats(sm, per_layer_window)
    stats = push(zero_stats(cfg.L - 1, per_layer_window), rs, cfg.omega)
    thresholds = update_threshold(stats, cfg)
    plan = select_plan(stats, thresholds, cfg)
    return stats, thresholds, plan


def del_update(
    outcome: RoundOutcome,
    stats: DecayedStats,
    cfg: SessionConfig,
    per_layer_window: bool = False,
    fallback_alpha: np.ndarray | None = None,
):
    """Fold one round's outcome into the statistics and produce the next plan.

    Composes shadow_tokens -> round_stats -> push -> estimate_alpha ->
    threshold update -> plan selection, using only the LayerSteps the round
    already produced. The returned plan carries the freshly updated threshold
    of its exit layer.
    """
    sm = shadow_tokens(outcome.steps)
    rs = round_stats(sm, outcome.exit_layer_used, per_layer_window)
    stats = push(stats, rs, cfg.omega)
    alpha = estimate_alpha(stats, cfg.alpha_clamp_eps, fallback_alpha)
    thresholds = update_threshold(stats, cfg)
    plan = select_plan(stats, thresholds, cfg, fallback_alpha)
    if per_layer_window:
        u_exit = int(np.asarray(rs.u_r)[outcome.exit_layer_used - 1])
    else:
        u_exit = int(rs.u_r)
    aux = {"alpha": alpha, "thresholds": thresholds, "u_r": u_exit}
    return plan, stats, aux


class DelController:
    """Stateful policy wrapper around the update pipeline.

    Interface shared with the baselines: ``init(model, prompt)`` returns the
    first plan, ``observe(outcome)`` returns the next one.
    """

    name = "del"

    def __init__(self, cfg: SessionConfig, per_layer_window: bool = False):
        self.cfg = cfg
        self.per_layer_window = per_layer_window
        self.stats: DecayedStats | None = None
        self.thresholds: np.ndarray | None = None
        self._prefill_alpha: np.ndarray | None = None
        self._last_alpha: np.ndarray | None = None
        self._last_u: int | None = None

    def init(self, model, prompt: Sequence[TokenId]) -> DraftPlan:
        stats, thresholds, plan = prefill_init(model, prompt, self.cfg, self.per_layer_window)
        self.stats = stats
        self.thresholds = thresholds
        self._prefill_alpha = estimate_alpha(stats, self.cfg.alpha_clamp_eps)
        self._last_alpha = self._prefill_alpha
        self._last_u = None
        return plan

    def observe(self, outcome: RoundOutcome) -> DraftPlan:
        if self.stats is None:
            raise RuntimeError("init must be called before observe")
        plan, self.stats, aux = del_update(
            outcome, self.stats, self.cfg, self.per_layer_window, self._prefill_alpha
        )
        self.thresholds = aux["thresholds"]
        self._last_alpha = aux["alpha"]
        self._last_u = aux["u_r"]
        return plan

    def trace_fields(self) -> dict:
        alpha = None if self._last_alpha is None else [float(a) for a in self._last_alpha]
        return {"alpha_snapshot": alpha, "u_r": self._last_u}
