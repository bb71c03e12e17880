"""Action pruning, dueling Q-network, double-DQN training with alternating contrastive steps."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .encoder import CompiledGraph, HypergraphEncoder, compile_graph, contrastive_loss
from .env import AgentAction, ConversationEnv, EnvConfig, EpisodeState, Rewards
from .hypergraph import build_hypergraph
from .kg import EmbeddingTable
from .world import Catalog, NodeIndex, SocialGraph

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ScoredActionSpace:
    items: tuple[int, ...] = ()
    item_scores: tuple[float, ...] = ()
    attrs: tuple[int, ...] = ()
    attr_scores: tuple[float, ...] = ()

    @property
    def actions(self) -> list[tuple[str, int]]:
        return [("item", v) for v in self.items] + [("attr", p) for p in self.attrs]

    def __len__(self) -> int:
        return len(self.items) + len(self.attrs)

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def to_json(self) -> dict:
        return {"items": list(self.items), "item_scores": list(self.item_scores),
                "attrs": list(self.attrs), "attr_scores": list(self.attr_scores)}

    @classmethod
    def from_json(cls, d: dict) -> "ScoredActionSpace":
        return cls(tuple(d["items"]), tuple(d["item_scores"]), tuple(d["attrs"]), tuple(d["attr_scores"]))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def preference_vector(state: EpisodeState, emb: np.ndarray, index: NodeIndex, use_social: bool = True) -> np.ndarray:
    """``e_u + sum(accepted attrs) + sum over friends of their filtered items - sum(rejected attrs)``."""
    z = emb[index.user(state.user)].copy()
    for p in state.accepted_attrs:
        z += emb[index.attr(p)]
    for p in state.rejected_attrs:
        z -= emb[index.attr(p)]
    if use_social:
        for f in state.friends:
            for v in state.friend_items[f]:
                z += emb[index.item(v)]
    return z


def _top(ids, logits, k):
    ids = np.asarray(ids)
    order = np.lexsort((ids, -logits))[:k]
    return tuple(int(i) for i in ids[order]), tuple(float(s) for s in _sigmoid(logits[order]))


def score_actions(state: EpisodeState, emb: np.ndarray, index: NodeIndex, k_items: int = 10,
                  k_attrs: int = 10, use_social: bool = True) -> ScoredActionSpace:
    """Top-k candidate items and attributes by the multi-view preference score; ties by ascending id."""
    z = preference_vector(state, emb, index, use_social)
    items = sorted(state.cand_items)
    attrs = sorted(state.cand_attrs)
    it, its = _top(items, emb[[index.item(v) for v in items]] @ z, k_items) if items else ((), ())
    at, ats = _top(attrs, emb[[index.attr(p) for p in attrs]] @ z, k_attrs) if attrs else ((), ())
    return ScoredActionSpace(it, its, at, ats)


class DuelingHead(nn.Module):
    """Value MLP on the state plus mean-centred advantage MLP on (state, action) pairs."""

    def __init__(self, d: int, hidden: int = 64):
        super().__init__()
        self.value = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.advantage = nn.Sequential(nn.Linear(2 * d, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, q: torch.Tensor, acts: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        v = self.value(q)
        pairs = torch.cat([q[:, None, :].expand(-1, acts.shape[1], -1), acts], dim=-1)
        adv = self.advantage(pairs).squeeze(-1)
        m = mask.to(adv.dtype)
        mean = (adv * m).sum(1, keepdim=True) / m.sum(1, keepdim=True).clamp(min=1)
        return v + adv - mean


def q_values(q_t: torch.Tensor, action_embs: torch.Tensor, head: DuelingHead) -> torch.Tensor:
    """Q for every action of one state."""
    mask = torch.ones(1, action_embs.shape[0], dtype=torch.bool)
    return head(q_t[None], action_embs[None], mask)[0]


class PolicyNet(nn.Module):
    def __init__(self, n_nodes: int, d: int = 64, n_layers: int = 2, heads: int = 2,
                 block: str = "transformer", hidden: int = 64, slope: float = 0.2,
                 refine_actions: bool = True, init_embeddings=None):
        super().__init__()
        self.encoder = HypergraphEncoder(n_nodes, d, n_layers, heads, slope, block,
                                         init_embeddings=init_embeddings)
        self.head = DuelingHead(d, hidden)
        self.refine_actions = refine_actions

    def prepare(self, graphs: list[CompiledGraph], spaces: list[ScoredActionSpace]):
        queries = [s.items for s in spaces] if self.refine_actions else None
        return self.encoder.batch(graphs, queries)

    def forward(self, graphs: list[CompiledGraph], spaces: list[ScoredActionSpace], index: NodeIndex,
                batch=None):
        """Padded Q-values (B x max actions) and their validity mask.

        ``batch`` may carry a prebuilt :meth:`prepare` result shared between networks
        of identical structure.
        """
        if batch is None:
            batch = self.prepare(graphs, spaces)
        q, refined, _ = self.encoder.encode(batch)
        width = max(len(s) for s in spaces)
        rows = np.zeros((len(spaces), width), dtype=np.int64)
        mask = np.zeros((len(spaces), width), dtype=bool)
        for b, s in enumerate(spaces):
            r = [index.item(v) for v in s.items] + [index.attr(p) for p in s.attrs]
            rows[b, :len(r)] = r
            mask[b, :len(r)] = True
        acts = self.encoder.embedding(torch.as_tensor(rows))
        if refined is not None and refined.shape[0]:
            bi = np.concatenate([[b] * len(s.items) for b, s in enumerate(spaces)]).astype(np.int64)
            ai = np.concatenate([np.arange(len(s.items)) for s in spaces]).astype(np.int64)
            acts = acts.index_put((torch.as_tensor(bi), torch.as_tensor(ai)), refined, accumulate=True)
        mask_t = torch.as_tensor(mask)
        return self.head(q, acts, mask_t), mask_t


def select_action(space: ScoredActionSpace, q_scores, eps: float, rng: np.random.Generator,
                  catalog: Catalog, rec_size: int = 10, ask_size: int = 2) -> tuple[AgentAction, int]:
    """Epsilon-greedy over the pruned space, expanded into a full recommend/ask action.

    Returns the action and the index of the chosen action id within ``space.actions``.
    """
    q = np.asarray(q_scores, dtype=np.float64)
    n = len(space)
    if rng.random() < eps:
        idx = int(rng.integers(n))
    else:
        idx = int(np.argmax(q[:n]))
    n_items = len(space.items)
    if idx < n_items:
        order = sorted(range(n_items), key=lambda i: -q[i])
        return AgentAction.recommend(space.items[i] for i in order[:rec_size]), idx
    chosen = space.attrs[idx - n_items]
    c = catalog.attr_type[chosen]
    same = [i for i, p in enumerate(space.attrs) if catalog.attr_type[p] == c and p != chosen]
    same.sort(key=lambda i: -q[n_items + i])
    picked = [chosen] + [space.attrs[i] for i in same[:ask_size - 1]]
    return AgentAction.ask(picked), idx


# ---------------------------------------------------------------------------
# replay


@dataclass
class ReplayEntry:
    state: EpisodeState
    space: ScoredActionSpace
    action_index: int
    action: AgentAction
    reward: float
    next_state: EpisodeState
    next_space: ScoredActionSpace
    terminal: bool
    graph: CompiledGraph | None = field(default=None, compare=False, repr=False)
    next_graph: CompiledGraph | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> dict:
        return {
            "state": self.state.to_json(),
            "space": self.space.to_json(),
            "action_index": self.action_index,
            "action": self.action.to_json(),
            "reward": self.reward,
            "next_state": self.next_state.to_json(),
            "next_space": self.next_space.to_json(),
            "terminal": self.terminal,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ReplayEntry":
        return cls(
            state=EpisodeState.from_json(d["state"]),
            space=ScoredActionSpace.from_json(d["space"]),
            action_index=d["action_index"],
            action=AgentAction.from_json(d["action"]),
            reward=d["reward"],
            next_state=EpisodeState.from_json(d["next_state"]),
            next_space=ScoredActionSpace.from_json(d["next_space"]),
            terminal=d["terminal"],
        )


class ReplayBuffer:
    def __init__(self, capacity: int = 50_000):
        self.entries: deque[ReplayEntry] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: ReplayEntry) -> None:
        self.entries.append(entry)

    def sample(self, n: int, rng: np.random.Generator) -> list[ReplayEntry]:
        idx = rng.choice(len(self.entries), size=n, replace=False)
        return [self.entries[i] for i in idx]


def dqn_target(rewards, terminal, q_online_next, q_target_next, next_mask, gamma: float = 0.999) -> torch.Tensor:
    """Double-DQN targets: online network picks the next action, target network values it.

    Padded next-action slots (``next_mask`` False) are never selected; rows without
    any next action fall back to the reward alone.
    """
    rewards = torch.as_tensor(rewards, dtype=q_target_next.dtype)
    terminal = torch.as_tensor(terminal, dtype=torch.bool)
    has_next = next_mask.any(1)
    masked = q_online_next.masked_fill(~next_mask, float("-inf"))
    best = masked.argmax(1, keepdim=True)
    boot = q_target_next.gather(1, best).squeeze(1)
    live = (~terminal) & has_next
    return rewards + gamma * torch.where(live, boot, torch.zeros_like(boot))


# ---------------------------------------------------------------------------
# agent and trainer


@dataclass
class TrainConfig:
    episodes: int = 2000
    d: int = 64
    layers: int = 2
    heads: int = 2
    block: str = "transformer"
    hidden: int = 64
    slope: float = 0.2
    lr: float = 1e-4
    gamma: float = 0.999
    batch_size: int = 128
    buffer_capacity: int = 50_000
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: int = 10_000
    target_sync: int = 20
    train_every: int = 1
    ssl_ratio: int = 1
    tau: float = 0.1
    k_items: int = 10
    k_attrs: int = 10
    use_social: bool = True
    refine_actions: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.episodes < 0 or self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need episodes >= 0 and batch_size <= buffer_capacity")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.layers <= 4:
            raise ValueError("layers must be in 1..4")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ValueError("exploration rates must lie in [0, 1]")
        if self.target_sync < 1 or self.train_every < 1 or self.ssl_ratio < 0:
            raise ValueError("target_sync and train_every must be >= 1, ssl_ratio >= 0")
        if self.tau <= 0 or not 0 <= self.gamma <= 1 or self.lr <= 0:
            raise ValueError("need tau > 0, 0 <= gamma <= 1, lr > 0")
        if self.block not in ("transformer", "attention"):
            raise ValueError(f"unknown block {self.block!r}")

    def epsilon(self, step: int) -> float:
        if self.eps_decay_steps <= 0:
            return self.eps_end
        frac = min(step / self.eps_decay_steps, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Agent:
    """Everything needed to turn an episode state into scored actions and Q-values."""

    def __init__(self, catalog: Catalog, social: SocialGraph, scoring_embeddings: np.ndarray,
                 net: PolicyNet, config: TrainConfig, env_config: EnvConfig = EnvConfig()):
        self.catalog = catalog
        self.social = social
        self.index = NodeIndex.from_world(catalog, social)
        self.scoring = np.asarray(scoring_embeddings, dtype=np.float64)
        self.net = net
        self.config = config
        self.env_config = env_config

    def space(self, state: EpisodeState) -> ScoredActionSpace:
        c = self.config
        return score_actions(state, self.scoring, self.index, c.k_items, c.k_attrs, c.use_social)

    def compile(self, state: EpisodeState) -> CompiledGraph:
        graph = build_hypergraph(state, self.catalog, self.social, use_social=self.config.use_social)
        return compile_graph(graph, self.index)

    def q(self, graphs, spaces, net: PolicyNet | None = None, batch=None):
        return (net or self.net)(graphs, spaces, self.index, batch)

    def act(self, state: EpisodeState, eps: float, rng: np.random.Generator, graph=None):
        """Returns ``(action, index, space, graph)``; action is None when no valid action exists."""
        space = self.space(state)
        if space.empty:
            return None, -1, space, graph
        if rng.random() < eps:
            scores = np.zeros(len(space))
            eff_eps = 1.0
        else:
            graph = graph or self.compile(state)
            with torch.no_grad():
                scores = self.q([graph], [space])[0][0].numpy()
            eff_eps = 0.0
        action, idx = select_action(space, scores, eff_eps, rng, self.catalog,
                                    self.env_config.rec_size, self.env_config.ask_size)
        return action, idx, space, graph

    def graphs_for(self, entries: list[ReplayEntry], nxt: bool = False) -> list[CompiledGraph]:
        out = []
        for e in entries:
            if nxt:
                if e.next_graph is None:
                    e.next_graph = self.compile(e.next_state)
                out.append(e.next_graph)
            else:
                if e.graph is None:
                    e.graph = self.compile(e.state)
                out.append(e.graph)
        return out


def dqn_loss(agent: Agent, online: PolicyNet, target: PolicyNet, entries: list[ReplayEntry],
             gamma: float) -> torch.Tensor:
    q_all, _ = agent.q(agent.graphs_for(entries), [e.space for e in entries], online)
    idx = torch.as_tensor([e.action_index for e in entries])
    q_sa = q_all.gather(1, idx[:, None]).squeeze(1)
    with torch.no_grad():
        live = [e for e in entries if not e.terminal and not e.next_space.empty]
        width = max((len(e.next_space) for e in live), default=1)
        q_on = q_sa.new_zeros(len(entries), width)
        q_tg = q_sa.new_zeros(len(entries), width)
        mask = torch.zeros(len(entries), width, dtype=torch.bool)
        if live:
            pos = [i for i, e in enumerate(entries) if not e.terminal and not e.next_space.empty]
            graphs = agent.graphs_for(live, nxt=True)
            spaces = [e.next_space for e in live]
            shared = online.prepare(graphs, spaces)
            a, m = agent.q(graphs, spaces, online, shared)
            b, _ = agent.q(graphs, spaces, target, shared)
            q_on[pos, :a.shape[1]] = a
            q_tg[pos, :b.shape[1]] = b
            mask[pos, :m.shape[1]] = m
        y = dqn_target([e.reward for e in entries], [e.terminal for e in entries], q_on, q_tg, mask, gamma)
    return ((y - q_sa) ** 2).mean()


def ssl_loss(agent: Agent, net: PolicyNet, entries: list[ReplayEntry], tau: float) -> torch.Tensor:
    batch = net.encoder.batch(agent.graphs_for(entries))
    H = net.encoder.hyperedges(batch)
    return contrastive_loss(H, batch.view_code, tau, batch.graph_id) / len(entries)


@dataclass
class EpisodeLog:
    episode: int
    turns: int
    success: bool
    ret: float
    dqn_loss: float
    ssl_loss: float


LOG_FIELDS = ("episode", "turns", "success", "return", "L_DQN", "L_SSL")


def write_training_log(logs: list[EpisodeLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for e in logs:
            w.writerow([e.episode, e.turns, int(e.success), f"{e.ret:.6f}",
                        f"{e.dqn_loss:.6f}", f"{e.ssl_loss:.6f}"])


class Trainer:
    def __init__(self, catalog: Catalog, social: SocialGraph, embeddings: EmbeddingTable,
                 config: TrainConfig = TrainConfig(), env_config: EnvConfig = EnvConfig(),
                 dtype=torch.float32):
        config.validate()
        self.config = config
        self.env_config = env_config
        self.env = ConversationEnv(catalog, social, env_config)
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        index = NodeIndex.from_world(catalog, social)
        if embeddings.node_vecs.shape != (len(index), config.d):
            raise ValueError(f"embedding table {embeddings.node_vecs.shape} does not match "
                             f"{len(index)} nodes x d={config.d}")
        self.online = PolicyNet(len(index), config.d, config.layers, config.heads, config.block,
                                config.hidden, config.slope, config.refine_actions,
                                init_embeddings=embeddings.node_vecs).to(dtype)
        self.target = copy.deepcopy(self.online)
        self.optimizer = torch.optim.Adam(self.online.parameters(), lr=config.lr)
        self.agent = Agent(catalog, social, embeddings.node_vecs, self.online, config, env_config)
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.users = social.sorted_users
        self.env_steps = 0
        self.train_steps = 0
        self.logs: list[EpisodeLog] = []

    def sync_target(self) -> None:
        self.target.load_state_dict(self.online.state_dict())

    def _step(self, loss: torch.Tensor) -> float:
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())

    def train_tick(self) -> tuple[float | None, float | None]:
        c = self.config
        if len(self.buffer) < c.batch_size:
            return None, None
        batch = self.buffer.sample(c.batch_size, self.rng)
        l_dqn = self._step(dqn_loss(self.agent, self.online, self.target, batch, c.gamma))
        self.train_steps += 1
        if self.train_steps % c.target_sync == 0:
            self.sync_target()
        l_ssl = None
        for _ in range(c.ssl_ratio):
            loss = ssl_loss(self.agent, self.online, self.buffer.sample(c.batch_size, self.rng), c.tau)
            if loss.requires_grad:
                l_ssl = self._step(loss)
        return l_dqn, l_ssl

    def run_episode(self, episode: int) -> EpisodeLog:
        c = self.config
        user = self.users[int(self.rng.integers(len(self.users)))]
        state = self.env.reset(user, self.rng)
        graph = None
        ret, dqn_losses, ssl_losses = 0.0, [], []
        while not state.done:
            eps = c.epsilon(self.env_steps)
            action, idx, space, graph = self.agent.act(state, eps, self.rng, graph)
            nxt, outcome = self.env.step(state, action)
            ret += outcome.reward
            self.env_steps += 1
            if action is not None:
                next_space = self.agent.space(nxt) if not nxt.done else ScoredActionSpace()
                self.buffer.push(ReplayEntry(state, space, idx, action, outcome.reward, nxt,
                                             next_space, outcome.done, graph=graph))
            state, graph = nxt, None
            if self.env_steps % c.train_every == 0:
                l_dqn, l_ssl = self.train_tick()
                if l_dqn is not None:
                    dqn_losses.append(l_dqn)
                if l_ssl is not None:
                    ssl_losses.append(l_ssl)
        return EpisodeLog(episode, state.turn, state.success, ret,
                          float(np.mean(dqn_losses)) if dqn_losses else float("nan"),
                          float(np.mean(ssl_losses)) if ssl_losses else float("nan"))

    def run(self, episodes: int | None = None, checkpoint_dir=None) -> list[EpisodeLog]:
        n = self.config.episodes if episodes is None else episodes
        start = len(self.logs)
        for ep in range(start, start + n):
            self.logs.append(self.run_episode(ep))
            every = self.config.checkpoint_every
            if checkpoint_dir is not None and every and (ep + 1) % every == 0:
                self.save(Path(checkpoint_dir) / f"policy_ep{ep + 1}.pt")
            if (ep + 1) % 100 == 0:
                recent = self.logs[-100:]
                log.info("episode %d  SR(last100)=%.3f  eps=%.3f", ep + 1,
                         np.mean([e.success for e in recent]), self.config.epsilon(self.env_steps))
        return self.logs

    def save(self, path) -> None:
        torch.save({
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "env_config": asdict(self.env_config),
            "config_hash": config_hash(self.config, self.env_config),
            "n_nodes": self.online.encoder.embedding.num_embeddings,
            "scoring_embeddings": self.agent.scoring,
            "online": self.online.state_dict(),
            "target": self.target.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "env_steps": self.env_steps,
            "train_steps": self.train_steps,
        }, path)


def train_loop(catalog: Catalog, social: SocialGraph, embeddings: EmbeddingTable,
               config: TrainConfig = TrainConfig(), env_config: EnvConfig = EnvConfig(),
               checkpoint_dir=None) -> tuple[Trainer, list[EpisodeLog]]:
    trainer = Trainer(catalog, social, embeddings, config, env_config)
    logs = trainer.run(checkpoint_dir=checkpoint_dir)
    return trainer, logs


@dataclass
class PolicyBundle:
    net: PolicyNet
    config: TrainConfig
    env_config: EnvConfig
    scoring_embeddings: np.ndarray
    config_hash: str


def load_policy(path) -> PolicyBundle:
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ck.get('format_version')}")
    config = TrainConfig(**ck["config"])
    env_d = dict(ck["env_config"])
    env_config = EnvConfig(**{**env_d, "rewards": Rewards(**env_d["rewards"])})
    net = PolicyNet(ck["n_nodes"], config.d, config.layers, config.heads, config.block,
                    config.hidden, config.slope, config.refine_actions)
    net.load_state_dict(ck["online"])
    net.eval()
    return PolicyBundle(net, config, env_config, np.asarray(ck["scoring_embeddings"]), ck["config_hash"])


class LearnedPolicy:
    """Greedy policy driven by a trained network."""

    def __init__(self, agent: Agent, name: str = "learned"):
        self.agent = agent
        self.name = name

    @classmethod
    def from_bundle(cls, bundle: PolicyBundle, catalog: Catalog, social: SocialGraph, name: str = "learned"):
        return cls(Agent(catalog, social, bundle.scoring_embeddings, bundle.net, bundle.config,
                         bundle.env_config), name)

    def __call__(self, state: EpisodeState, rng: np.random.Generator) -> AgentAction | None:
        action, _, _, _ = self.agent.act(state, 0.0, rng)
        return action
