"""Stage helpers shared by the command line and the experiment harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .env import EnvConfig
from .evaluation import AbsGreedyPolicy, MaxEntropyPolicy, RandomPolicy, run_comparison
from .kg import EmbeddingTable, build_triples, pretrain
from .policy import LearnedPolicy, TrainConfig, Trainer
from .world import Catalog, NodeIndex, SocialGraph, WorldSpec, generate_world

BASELINES = ("random", "abs_greedy", "max_entropy")


def pretrain_world(catalog: Catalog, social: SocialGraph, d: int = 64, epochs: int = 100, seed: int = 0,
                   lr: float = 0.01, margin: float = 1.0, batch_size: int = 256) -> EmbeddingTable:
    triples = build_triples(catalog, social)
    n = len(NodeIndex.from_world(catalog, social))
    return pretrain(triples, d, epochs, margin, seed, n_nodes=n, lr=lr, batch_size=batch_size)


def baseline_policies(catalog, social, embeddings: np.ndarray, env_config: EnvConfig = EnvConfig(),
                      names=BASELINES, use_social: bool = True, k_items: int = 10, k_attrs: int = 10) -> dict:
    out = {}
    for name in names:
        if name == "random":
            out[name] = RandomPolicy(catalog, social, embeddings, env_config, use_social=use_social,
                                     k_items=k_items, k_attrs=k_attrs)
        elif name == "abs_greedy":
            out[name] = AbsGreedyPolicy(catalog, social, embeddings, env_config, use_social=use_social)
        elif name == "max_entropy":
            out[name] = MaxEntropyPolicy(catalog, social, embeddings, env_config, use_social=use_social)
        else:
            raise ValueError(f"unknown baseline {name!r}")
    return out


@dataclass
class SeedRun:
    seed: int
    rows: list[dict]
    train_seconds: dict[str, float]
    trainers: dict[str, Trainer]

    def row(self, policy: str) -> dict:
        return next(r for r in self.rows if r["policy"] == policy)


def desk_run(spec: WorldSpec, train: TrainConfig, seed: int, eval_episodes: int = 300,
             env_config: EnvConfig = EnvConfig(), kg_epochs: int = 100, baselines=("random", "abs_greedy"),
             variants: dict[str, dict] | None = None) -> SeedRun:
    """Generate a world, pretrain, train one policy per variant and compare against baselines.

    ``variants`` maps a policy name to TrainConfig overrides (default: one full model
    named ``learned``). All policies are scored on the same episode sample.
    """
    catalog, social = generate_world(replace(spec, seed=seed))
    table = pretrain_world(catalog, social, train.d, kg_epochs, seed)
    policies = baseline_policies(catalog, social, table.node_vecs, env_config, baselines,
                                 k_items=train.k_items, k_attrs=train.k_attrs)
    variants = variants or {"learned": {}}
    seconds, trainers = {}, {}
    for name, overrides in variants.items():
        start = time.perf_counter()
        trainer = Trainer(catalog, social, table, replace(train, seed=seed, **overrides), env_config)
        trainer.run()
        seconds[name] = time.perf_counter() - start
        trainers[name] = trainer
        policies[name] = LearnedPolicy(trainer.agent, name)
    rows = run_comparison(catalog, social, policies, eval_episodes, seed + 10_000, env_config)
    return SeedRun(seed, rows, seconds, trainers)


def mean_rows(runs: list[SeedRun], names, columns=("SR@5", "SR@10", "SR@15", "AT", "hDCG")) -> list[dict]:
    """Average metric rows across seeds, one row per policy name, in the order given."""
    return [{"policy": name, **{c: float(np.mean([r.row(name)[c] for r in runs])) for c in columns},
             "seeds": len(runs)} for name in names]


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign-test p-value for at least ``wins`` successes out of ``n`` fair coin flips."""
    from math import comb
    return sum(comb(n, k) for k in range(wins, n + 1)) / 2 ** n


def artifact(out, name: str) -> Path:
    path = Path(out) / name
    if not path.exists():
        raise FileNotFoundError(f"missing upstream artifact {path}; run the preceding stage first")
    return path
