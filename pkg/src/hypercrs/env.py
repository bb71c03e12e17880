"""Multi-round conversational recommendation environment.

State bookkeeping, candidate updates, the simulated user, transitions and rewards.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .world import Catalog, SocialGraph

ACCEPT_ATTR = "accept_attr"
REJECT_ATTR = "reject_attr"
REJECT_ITEMS = "reject_items"


class ContractError(RuntimeError):
    """An action or transition violated the environment contract."""


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Rewards:
    rec_suc: float = 1.0
    rec_fail: float = -0.1
    ask_suc: float = 0.01
    ask_fail: float = -0.1
    quit: float = -0.3


@dataclass(frozen=True)
class EnvConfig:
    max_turns: int = 15
    rec_size: int = 10
    ask_size: int = 2
    n_targets: int = 2
    rewards: Rewards = field(default_factory=Rewards)

    def reward_bounds(self) -> tuple[float, float]:
        r = self.rewards
        low = min(self.ask_size * min(r.ask_fail, r.ask_suc), r.rec_fail, 0.0) + r.quit
        return low, r.rec_suc


class Event(NamedTuple):
    turn: int
    kind: str
    payload: tuple


@dataclass(frozen=True)
class AgentAction:
    kind: str
    asked_attrs: tuple[int, ...] = ()
    rec_items: tuple[int, ...] = ()

    @classmethod
    def ask(cls, attrs) -> "AgentAction":
        return cls("ask", asked_attrs=tuple(attrs))

    @classmethod
    def recommend(cls, items) -> "AgentAction":
        return cls("recommend", rec_items=tuple(items))

    @property
    def payload(self) -> tuple[int, ...]:
        return self.asked_attrs if self.kind == "ask" else self.rec_items

    def to_json(self) -> dict:
        return {"kind": self.kind, "payload": list(self.payload)}

    @classmethod
    def from_json(cls, d: dict) -> "AgentAction":
        return cls.ask(d["payload"]) if d["kind"] == "ask" else cls.recommend(d["payload"])


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    accepted_attrs: tuple[int, ...] = ()
    rejected_attrs: tuple[int, ...] = ()
    accepted_item: int | None = None
    rank: int | None = None
    done: bool = False
    success: bool = False


@dataclass
class EpisodeState:
    user: int
    targets: frozenset[int]
    p0: int
    accepted_attrs: tuple[int, ...]
    rejected_attrs: tuple[int, ...] = ()
    rejected_items: frozenset[int] = frozenset()
    cand_items: frozenset[int] = frozenset()
    cand_attrs: frozenset[int] = frozenset()
    friends: tuple[int, ...] = ()
    friend_items: dict[int, frozenset[int]] = field(default_factory=dict)
    turn: int = 0
    events: tuple[Event, ...] = ()
    done: bool = False
    success: bool = False

    def copy(self) -> "EpisodeState":
        return replace(self, friend_items=dict(self.friend_items))

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "targets": sorted(self.targets),
            "p0": self.p0,
            "accepted_attrs": list(self.accepted_attrs),
            "rejected_attrs": list(self.rejected_attrs),
            "rejected_items": sorted(self.rejected_items),
            "cand_items": sorted(self.cand_items),
            "cand_attrs": sorted(self.cand_attrs),
            "friends": list(self.friends),
            "friend_items": {str(f): sorted(vs) for f, vs in self.friend_items.items()},
            "turn": self.turn,
            "events": [[e.turn, e.kind, list(e.payload)] for e in self.events],
            "done": self.done,
            "success": self.success,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EpisodeState":
        return cls(
            user=d["user"],
            targets=frozenset(d["targets"]),
            p0=d["p0"],
            accepted_attrs=tuple(d["accepted_attrs"]),
            rejected_attrs=tuple(d["rejected_attrs"]),
            rejected_items=frozenset(d["rejected_items"]),
            cand_items=frozenset(d["cand_items"]),
            cand_attrs=frozenset(d["cand_attrs"]),
            friends=tuple(d["friends"]),
            friend_items={int(f): frozenset(vs) for f, vs in d["friend_items"].items()},
            turn=d["turn"],
            events=tuple(Event(t, k, tuple(p)) for t, k, p in d["events"]),
            done=d["done"],
            success=d["success"],
        )


# ---------------------------------------------------------------------------
# state bookkeeping


def update_candidates(state: EpisodeState, catalog: Catalog) -> tuple[frozenset[int], frozenset[int]]:
    acc = set(state.accepted_attrs)
    rej = set(state.rejected_attrs)
    items = frozenset(
        v for v in catalog.attr_items[state.p0] - state.rejected_items
        if not catalog.item_attrs[v].isdisjoint(acc) and catalog.item_attrs[v].isdisjoint(rej)
    )
    attrs: set[int] = set()
    for v in items:
        attrs |= catalog.item_attrs[v]
    attrs = frozenset(attrs - acc - rej)
    state.cand_items, state.cand_attrs = items, attrs
    return items, attrs


def filter_friends(state: EpisodeState, social: SocialGraph) -> tuple[int, ...]:
    kept = {}
    for f in sorted(social.friends.get(state.user, ())):
        common = social.accepted_items[f] & state.cand_items
        if common:
            kept[f] = frozenset(common)
    state.friends = tuple(kept)
    state.friend_items = kept
    return state.friends


def init_state(catalog: Catalog, social: SocialGraph, user: int, targets, p0: int) -> EpisodeState:
    state = EpisodeState(
        user=user,
        targets=frozenset(targets),
        p0=p0,
        accepted_attrs=(p0,),
        events=(Event(0, ACCEPT_ATTR, (p0,)),),
    )
    update_candidates(state, catalog)
    filter_friends(state, social)
    return state


def _overlapping_pairs(catalog: Catalog, pool) -> list[tuple[int, int]]:
    return [(a, b) for a, b in itertools.combinations(sorted(pool), 2) if catalog.overlapping(a, b)]


def sample_targets(catalog: Catalog, pool, n: int, rng: np.random.Generator) -> tuple[int, ...] | None:
    """Draw ``n`` distinct items from ``pool`` whose attribute sets share at least one attribute."""
    pool = sorted(pool)
    if n == 2:
        pairs = _overlapping_pairs(catalog, pool)
        if not pairs:
            return None
        return pairs[int(rng.integers(len(pairs)))]
    for start in rng.permutation(len(pool)):
        chosen = [pool[start]]
        joint = set(catalog.item_attrs[pool[start]])
        for j in rng.permutation(len(pool)):
            v = pool[j]
            if v not in chosen and not joint.isdisjoint(catalog.item_attrs[v]):
                chosen.append(v)
                joint &= catalog.item_attrs[v]
                if len(chosen) == n:
                    return tuple(chosen)
    return None


def sample_episode(catalog: Catalog, social: SocialGraph, user: int, rng: np.random.Generator,
                   n_targets: int = 2) -> EpisodeState:
    if user not in social.friends:
        raise SamplingError(f"unknown user {user}")
    targets = sample_targets(catalog, social.accepted_items[user], n_targets, rng)
    if targets is None:
        # catalog-wide fallback: rejection-sample anchors, then search their partners
        items = catalog.sorted_items
        for i in rng.permutation(len(items))[:64]:
            v1 = items[i]
            partners = sorted({v for p in catalog.item_attrs[v1] for v in catalog.attr_items[p]} - {v1})
            if len(partners) >= n_targets - 1:
                targets = sample_targets(catalog, [v1] + partners, n_targets, rng)
                if targets is not None:
                    break
    if targets is None:
        raise SamplingError(f"no {n_targets} items with overlapping attributes exist for user {user}")
    joint = sorted(frozenset.intersection(*(catalog.item_attrs[v] for v in targets)))
    p0 = joint[int(rng.integers(len(joint)))]
    return init_state(catalog, social, user, targets, p0)


# ---------------------------------------------------------------------------
# user simulator and transitions


def validate_action(state: EpisodeState, action: AgentAction, catalog: Catalog, config: EnvConfig) -> None:
    if state.done:
        raise ContractError("episode already finished")
    if state.turn >= config.max_turns:
        raise ContractError(f"turn {state.turn} is past the turn limit {config.max_turns}")
    payload = action.payload
    if len(set(payload)) != len(payload):
        raise ContractError(f"duplicate ids in {action.kind} payload {payload}")
    if action.kind == "ask":
        if not 1 <= len(payload) <= config.ask_size:
            raise ContractError(f"ask must carry 1..{config.ask_size} attributes, got {len(payload)}")
        if not set(payload) <= state.cand_attrs:
            raise ContractError(f"asked attributes {sorted(set(payload) - state.cand_attrs)} are not candidates")
        if len({catalog.attr_type[p] for p in payload}) != 1:
            raise ContractError("asked attributes must share one attribute type")
    elif action.kind == "recommend":
        if not 1 <= len(payload) <= config.rec_size:
            raise ContractError(f"recommend must carry 1..{config.rec_size} items, got {len(payload)}")
        if not set(payload) <= state.cand_items:
            raise ContractError(f"recommended items {sorted(set(payload) - state.cand_items)} are not candidates")
    else:
        raise ContractError(f"unknown action kind {action.kind!r}")


def _finish(state: EpisodeState, config: EnvConfig, reward: float, **kw) -> StepOutcome:
    last = state.turn + 1 >= config.max_turns
    if last and not kw.get("success", False):
        return StepOutcome(reward=reward + config.rewards.quit, done=True, **kw)
    return StepOutcome(reward=reward, done=kw.get("success", False), **kw)


def simulate_user(state: EpisodeState, action: AgentAction, catalog: Catalog,
                  config: EnvConfig = EnvConfig()) -> StepOutcome:
    validate_action(state, action, catalog, config)
    r = config.rewards
    if action.kind == "ask":
        liked = frozenset().union(*(catalog.item_attrs[v] for v in state.targets))
        acc = tuple(p for p in action.asked_attrs if p in liked)
        rej = tuple(p for p in action.asked_attrs if p not in liked)
        reward = len(acc) * r.ask_suc + len(rej) * r.ask_fail
        return _finish(state, config, reward, accepted_attrs=acc, rejected_attrs=rej)
    return feedback_on_items(state, action, config, [v for v in action.rec_items if v in state.targets])


def feedback_on_items(state: EpisodeState, action: AgentAction, config: EnvConfig, accepted) -> StepOutcome:
    """Outcome of a recommendation given the items the user accepted (possibly none)."""
    r = config.rewards
    if accepted:
        first = min(accepted, key=action.rec_items.index)
        return _finish(state, config, r.rec_suc, accepted_item=first,
                       rank=action.rec_items.index(first) + 1, success=True)
    return _finish(state, config, r.rec_fail)


def feedback_on_attrs(state: EpisodeState, action: AgentAction, config: EnvConfig, accepted) -> StepOutcome:
    """Outcome of an ask given the attributes the user accepted."""
    r = config.rewards
    accepted = set(accepted)
    acc = tuple(p for p in action.asked_attrs if p in accepted)
    rej = tuple(p for p in action.asked_attrs if p not in accepted)
    return _finish(state, config, len(acc) * r.ask_suc + len(rej) * r.ask_fail,
                   accepted_attrs=acc, rejected_attrs=rej)


def forfeit(state: EpisodeState, config: EnvConfig = EnvConfig()) -> StepOutcome:
    """Terminal outcome when no valid action exists."""
    if state.done:
        raise ContractError("episode already finished")
    return StepOutcome(reward=config.rewards.quit, done=True)


def apply_transition(state: EpisodeState, action: AgentAction | None, outcome: StepOutcome,
                     catalog: Catalog, social: SocialGraph) -> EpisodeState:
    if state.done:
        raise ContractError("cannot transition from a finished episode")
    nxt = state.copy()
    t = state.turn + 1
    events = list(state.events)
    if action is not None and action.kind == "ask":
        nxt.accepted_attrs = state.accepted_attrs + outcome.accepted_attrs
        nxt.rejected_attrs = state.rejected_attrs + outcome.rejected_attrs
        events += [Event(t, ACCEPT_ATTR, (p,)) for p in outcome.accepted_attrs]
        events += [Event(t, REJECT_ATTR, (p,)) for p in outcome.rejected_attrs]
    elif action is not None and not outcome.success:
        nxt.rejected_items = state.rejected_items | frozenset(action.rec_items)
        events.append(Event(t, REJECT_ITEMS, tuple(action.rec_items)))
    nxt.events = tuple(events)
    nxt.turn = t
    if not outcome.success:
        update_candidates(nxt, catalog)
        filter_friends(nxt, social)
    nxt.done = outcome.done
    nxt.success = outcome.success
    return nxt


class ConversationEnv:
    """Binds a world and an environment config; convenience wrapper over the module functions."""

    def __init__(self, catalog: Catalog, social: SocialGraph, config: EnvConfig = EnvConfig()):
        self.catalog = catalog
        self.social = social
        self.config = config

    def reset(self, user: int, rng: np.random.Generator) -> EpisodeState:
        return sample_episode(self.catalog, self.social, user, rng, self.config.n_targets)

    def step(self, state: EpisodeState, action: AgentAction | None):
        if action is None:
            outcome = forfeit(state, self.config)
        else:
            outcome = simulate_user(state, action, self.catalog, self.config)
        return apply_transition(state, action, outcome, self.catalog, self.social), outcome


# ---------------------------------------------------------------------------
# transcripts


def transcript_header(state: EpisodeState) -> dict:
    return {"turn": 0, "kind": "start", "user": state.user, "targets": sorted(state.targets), "p0": state.p0}


def transcript_record(state: EpisodeState, action: AgentAction | None, outcome: StepOutcome) -> dict:
    return {
        "turn": state.turn + 1,
        "kind": action.kind if action is not None else "forfeit",
        "payload": list(action.payload) if action is not None else [],
        "feedback": {
            "accepted_attrs": list(outcome.accepted_attrs),
            "rejected_attrs": list(outcome.rejected_attrs),
            "accepted_item": outcome.accepted_item,
            "success": outcome.success,
            "done": outcome.done,
        },
        "reward": outcome.reward,
    }


def write_transcript(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_transcript(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_transcript(records, catalog: Catalog, social: SocialGraph, config: EnvConfig = EnvConfig()) -> EpisodeState:
    """Re-run a transcript against the environment contract; raises ContractError on any violation.

    Feedback is taken from the transcript, so human-played sessions replay too.
    """
    head, *turns = records
    if head.get("kind") != "start":
        raise ContractError("transcript must start with a header record")
    state = init_state(catalog, social, head["user"], head["targets"], head["p0"])
    for rec in turns:
        if rec["turn"] != state.turn + 1:
            raise ContractError(f"turn {rec['turn']} out of sequence")
        if rec["kind"] == "forfeit":
            outcome = forfeit(state, config)
            action = None
        else:
            action = AgentAction.from_json(rec)
            validate_action(state, action, catalog, config)
            fb = rec["feedback"]
            if action.kind == "ask":
                outcome = feedback_on_attrs(state, action, config, fb["accepted_attrs"])
            else:
                accepted = [fb["accepted_item"]] if fb["accepted_item"] is not None else []
                outcome = feedback_on_items(state, action, config, accepted)
        if abs(outcome.reward - rec["reward"]) > 1e-9:
            raise ContractError(f"turn {rec['turn']}: reward {rec['reward']} does not match {outcome.reward}")
        state = apply_transition(state, action, outcome, catalog, social)
    return state
