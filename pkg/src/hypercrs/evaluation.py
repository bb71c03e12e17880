"""Rule-based baselines, episode rollouts, metrics and the comparison harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .env import AgentAction, ConversationEnv, EnvConfig, EpisodeState, transcript_header, transcript_record
from .policy import ScoredActionSpace, preference_vector, score_actions, select_action
from .world import Catalog, NodeIndex, SocialGraph

METRIC_FIELDS = ("policy", "SR@5", "SR@10", "SR@15", "AT", "hDCG", "episodes", "seed")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    turn: int
    rank: int | None = None
    total_reward: float = 0.0

    def __post_init__(self):
        if self.success and (self.turn < 1 or self.rank is None or self.rank < 1):
            raise ValueError("a successful episode needs turn >= 1 and rank >= 1")


# ---------------------------------------------------------------------------
# metrics


def metric_sr(results, t: int) -> float:
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    return sum(r.success and r.turn <= t for r in results) / len(results)


def metric_at(results, max_turns: int = 15) -> float:
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    return sum(r.turn if r.success else max_turns for r in results) / len(results)


def hdcg_gain(t: int, k: int) -> float:
    turn_discount = 1.0 / math.log2(t + 1)
    return turn_discount + turn_discount / math.log2(k + 1)


def metric_hdcg(results, max_turns: int = 15, rec_size: int = 10) -> float:
    results = list(results)
    if not results:
        raise ValueError("no episode results")
    total = sum(hdcg_gain(r.turn, r.rank) for r in results
                if r.success and r.turn <= max_turns and r.rank <= rec_size)
    return total / len(results)


def summarize(results, max_turns: int = 15, rec_size: int = 10) -> dict[str, float]:
    return {
        "SR@5": metric_sr(results, 5),
        "SR@10": metric_sr(results, 10),
        "SR@15": metric_sr(results, 15),
        "AT": metric_at(results, max_turns),
        "hDCG": metric_hdcg(results, max_turns, rec_size),
    }


# ---------------------------------------------------------------------------
# baselines


class _Scored:
    def __init__(self, catalog: Catalog, social: SocialGraph, embeddings: np.ndarray,
                 env_config: EnvConfig = EnvConfig(), use_social: bool = True):
        self.catalog = catalog
        self.index = NodeIndex.from_world(catalog, social)
        self.emb = np.asarray(embeddings, dtype=np.float64)
        self.env_config = env_config
        self.use_social = use_social

    def ranked_items(self, state: EpisodeState, k: int) -> list[int]:
        items = sorted(state.cand_items)
        if not items:
            return []
        z = preference_vector(state, self.emb, self.index, self.use_social)
        logits = self.emb[[self.index.item(v) for v in items]] @ z
        order = np.lexsort((np.asarray(items), -logits))[:k]
        return [items[i] for i in order]


class AbsGreedyPolicy(_Scored):
    """Recommends the top candidates every turn and never asks."""

    name = "abs_greedy"

    def __call__(self, state: EpisodeState, rng=None) -> AgentAction | None:
        items = self.ranked_items(state, self.env_config.rec_size)
        return AgentAction.recommend(items) if items else None


def binary_entropy(rho: float) -> float:
    if rho <= 0.0 or rho >= 1.0:
        return 0.0
    return -rho * math.log(rho) - (1 - rho) * math.log(1 - rho)


class MaxEntropyPolicy(_Scored):
    """Asks the most informative attributes while too many candidates remain.

    Deterministic by default: asks while ``|V_cand| > K``. With ``rec_prob`` set,
    it also recommends early with that probability per turn.
    """

    name = "max_entropy"

    def __init__(self, *args, rec_prob: float | None = None, **kw):
        super().__init__(*args, **kw)
        self.rec_prob = rec_prob

    def entropies(self, state: EpisodeState) -> dict[int, float]:
        n = len(state.cand_items)
        out = {}
        for p in sorted(state.cand_attrs):
            cover = len(self.catalog.attr_items[p] & state.cand_items)
            out[p] = binary_entropy(cover / n) if n else 0.0
        return out

    def __call__(self, state: EpisodeState, rng=None) -> AgentAction | None:
        cfg = self.env_config
        ask = len(state.cand_items) > cfg.rec_size and state.cand_attrs
        if ask and self.rec_prob is not None and rng is not None and rng.random() < self.rec_prob:
            ask = False
        if ask:
            ent = self.entropies(state)
            ranked = sorted(ent, key=lambda p: (-ent[p], p))
            best = ranked[0]
            c = self.catalog.attr_type[best]
            same = [p for p in ranked if self.catalog.attr_type[p] == c][: cfg.ask_size]
            return AgentAction.ask(same)
        items = self.ranked_items(state, cfg.rec_size)
        if items:
            return AgentAction.recommend(items)
        return None


class RandomPolicy(_Scored):
    """Uniformly random action id over the pruned space; random order inside the action."""

    name = "random"

    def __init__(self, *args, k_items: int = 10, k_attrs: int = 10, **kw):
        super().__init__(*args, **kw)
        self.k_items, self.k_attrs = k_items, k_attrs

    def __call__(self, state: EpisodeState, rng: np.random.Generator) -> AgentAction | None:
        space: ScoredActionSpace = score_actions(state, self.emb, self.index, self.k_items,
                                                 self.k_attrs, self.use_social)
        if space.empty:
            return None
        q = rng.random(len(space))
        action, _ = select_action(space, q, 1.0, rng, self.catalog,
                                  self.env_config.rec_size, self.env_config.ask_size)
        return action


# ---------------------------------------------------------------------------
# rollouts and comparison


def run_episode(env: ConversationEnv, policy, state: EpisodeState, rng: np.random.Generator):
    """Roll one episode to termination; returns the result and the transcript records."""
    records = [transcript_header(state)]
    total = 0.0
    rank = None
    while not state.done:
        action = policy(state, rng)
        records_state = state
        state, outcome = env.step(state, action)
        records.append(transcript_record(records_state, action, outcome))
        total += outcome.reward
        if outcome.success:
            rank = outcome.rank
    turn = state.turn if state.success else env.config.max_turns + 1
    return EpisodeResult(state.success, turn, rank, total), records


def sample_initial_states(env: ConversationEnv, episodes: int, seed: int) -> list[EpisodeState]:
    rng = np.random.default_rng(seed)
    users = env.social.sorted_users
    return [env.reset(users[int(rng.integers(len(users)))], rng) for _ in range(episodes)]


def evaluate_policy(env: ConversationEnv, policy, initial_states, seed: int) -> list[EpisodeResult]:
    results = []
    for i, s0 in enumerate(initial_states):
        res, _ = run_episode(env, policy, s0, np.random.default_rng([seed, i]))
        results.append(res)
    return results


def run_comparison(catalog: Catalog, social: SocialGraph, policies, episodes: int, seed: int,
                   env_config: EnvConfig = EnvConfig()) -> list[dict]:
    """Evaluate every policy on one shared episode sample; one metrics row per policy."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = ConversationEnv(catalog, social, env_config)
    starts = sample_initial_states(env, episodes, seed)
    items = policies.items() if isinstance(policies, dict) else ((p.name, p) for p in policies)
    rows = []
    for name, policy in items:
        results = evaluate_policy(env, policy, starts, seed)
        row = {"policy": name, **summarize(results, env_config.max_turns, env_config.rec_size)}
        row.update(episodes=episodes, seed=seed)
        rows.append(row)
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def format_table(rows, columns=("SR@5", "SR@10", "SR@15", "AT", "hDCG")) -> str:
    head = f"{'policy':<16}" + "".join(f"{c:>9}" for c in columns)
    lines = [head]
    for r in rows:
        lines.append(f"{r['policy']:<16}" + "".join(f"{r[c]:>9.3f}" for c in columns))
    return "\n".join(lines)
