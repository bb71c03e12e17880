"""Command line: generate, pretrain, train, eval, play.

Exit codes: 0 success, 1 validation error (bad config, bad input files, missing
upstream artifacts), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, load_config, write_manifest
from .env import (
    ConversationEnv,
    EpisodeState,
    apply_transition,
    feedback_on_attrs,
    feedback_on_items,
    forfeit,
    transcript_header,
    transcript_record,
    write_transcript,
)
from .evaluation import format_table, run_comparison, write_metrics_csv
from .kg import load_embeddings, save_embeddings
from .policy import LearnedPolicy, Trainer, load_policy, write_training_log
from .world import WorldFormatError, WorldValidationError, generate_world, load_world_dir, save_world

log = logging.getLogger("hypercrs")

WORLD_DIR = "world"
EMBEDDINGS = "embeddings.txt"
POLICY = "policy.pt"


def _world_dir(config: RunConfig) -> Path:
    return Path(config.world_dir) if config.world_dir else Path(config.out) / WORLD_DIR


def _load_world(config: RunConfig):
    return load_world_dir(_world_dir(config))


def cmd_generate(config: RunConfig) -> Path:
    out = _world_dir(config)
    catalog, social = generate_world(config.world)
    save_world(catalog, social, out)
    write_manifest(config, out / "manifest.json", "generate",
                   {"counts": {"items": len(catalog.items), "attributes": len(catalog.attributes),
                               "users": len(social.users), "edges": len(social.edges())}})
    return out


def cmd_pretrain(config: RunConfig) -> Path:
    catalog, social = _load_world(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    k = config.kg
    table = pipeline.pretrain_world(catalog, social, config.train.d, k.epochs, config.seed, k.lr, k.margin,
                                    k.batch_size)
    save_embeddings(table, out / EMBEDDINGS)
    write_manifest(config, out / "manifest_pretrain.json", "pretrain",
                   {"final_loss": table.loss_history[-1] if table.loss_history else None})
    return out / EMBEDDINGS


def cmd_train(config: RunConfig) -> Path:
    catalog, social = _load_world(config)
    out = Path(config.out)
    table = load_embeddings(pipeline.artifact(out, EMBEDDINGS))
    trainer = Trainer(catalog, social, table, config.train, config.env)
    ckdir = out / "checkpoints" if config.train.checkpoint_every else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    logs = trainer.run(checkpoint_dir=ckdir)
    trainer.save(out / POLICY)
    write_training_log(logs, out / "train_log.csv")
    write_manifest(config, out / "manifest_train.json", "train",
                   {"env_steps": trainer.env_steps, "train_steps": trainer.train_steps})
    return out / POLICY


def cmd_eval(config: RunConfig, checkpoint=None) -> list[dict]:
    catalog, social = _load_world(config)
    out = Path(config.out)
    table = load_embeddings(pipeline.artifact(out, EMBEDDINGS))
    names = [p for p in config.eval.policies if p != "learned"]
    policies = pipeline.baseline_policies(catalog, social, table.node_vecs, config.env, names,
                                          k_items=config.train.k_items, k_attrs=config.train.k_attrs)
    if "learned" in config.eval.policies:
        ck = Path(checkpoint) if checkpoint else out / POLICY
        if ck.exists():
            policies["learned"] = LearnedPolicy.from_bundle(load_policy(ck), catalog, social)
        else:
            log.warning("no policy checkpoint at %s; evaluating baselines only", ck)
    rows = run_comparison(catalog, social, policies, config.eval.episodes, config.seed, config.env)
    write_metrics_csv(rows, out / "metrics.csv")
    write_manifest(config, out / "manifest_eval.json", "eval", {"policies": list(policies)})
    return rows


def _parse_ids(text: str):
    text = text.strip()
    if text.lower() in ("", "none", "no", "n", "-"):
        return []
    return [int(t) for t in text.replace(",", " ").split()]


def play_session(policy, env: ConversationEnv, state: EpisodeState, rng, input_fn=input, print_fn=print):
    """Run one conversation where a human answers in place of the simulator."""
    records = [transcript_header(state)]
    cat = env.catalog
    print_fn(f"user {state.user}, opening attribute {state.p0}; target items {sorted(state.targets)}")
    while not state.done:
        action = policy(state, rng)
        if action is None:
            outcome = forfeit(state, env.config)
        elif action.kind == "ask":
            shown = ", ".join(f"{p} (type {cat.attr_type[p]})" for p in action.asked_attrs)
            print_fn(f"turn {state.turn + 1}: do you like any of: {shown}?")
            while True:
                try:
                    picked = _parse_ids(input_fn("accepted attribute ids (blank for none): "))
                    if set(picked) <= set(action.asked_attrs):
                        break
                except ValueError:
                    pass
                print_fn(f"please answer with ids from {list(action.asked_attrs)}")
            outcome = feedback_on_attrs(state, action, env.config, picked)
        else:
            print_fn(f"turn {state.turn + 1}: how about items {list(action.rec_items)}?")
            while True:
                try:
                    picked = _parse_ids(input_fn("accepted item id (blank to reject all): "))
                    if len(picked) <= 1 and set(picked) <= set(action.rec_items):
                        break
                except ValueError:
                    pass
                print_fn(f"please answer with at most one id from {list(action.rec_items)}")
            outcome = feedback_on_items(state, action, env.config, picked)
        records.append(transcript_record(state, action, outcome))
        state = apply_transition(state, action, outcome, env.catalog, env.social)
    print_fn("accepted, session over" if state.success else "session ended without success")
    return state, records


def cmd_play(config: RunConfig, checkpoint=None, input_fn=input, print_fn=print) -> Path:
    catalog, social = _load_world(config)
    out = Path(config.out)
    ck = Path(checkpoint) if checkpoint else pipeline.artifact(out, POLICY)
    if not ck.exists():
        raise FileNotFoundError(f"missing policy checkpoint {ck}")
    bundle = load_policy(ck)
    policy = LearnedPolicy.from_bundle(bundle, catalog, social)
    env = ConversationEnv(catalog, social, bundle.env_config)
    rng = np.random.default_rng(config.seed)
    users = social.sorted_users
    state = env.reset(users[int(rng.integers(len(users)))], rng)
    _, records = play_session(policy, env, state, rng, input_fn, print_fn)
    tdir = out / "transcripts"
    tdir.mkdir(parents=True, exist_ok=True)
    path = tdir / f"play_seed{config.seed}.jsonl"
    write_transcript(records, path)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypercrs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "pretrain", "train", "eval", "play"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. --set train.episodes=100")
        if name in ("eval", "play"):
            p.add_argument("--checkpoint", help="policy checkpoint (default: OUT/policy.pt)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = []
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides.append(tuple(item.split("=", 1)))
        if args.seed is not None:
            overrides.append(("seed", str(args.seed)))
        if args.out is not None:
            overrides.append(("out", args.out))
        config = load_config(args.config, overrides)
        cmd = args.command
        if cmd == "generate":
            print(cmd_generate(config))
        elif cmd == "pretrain":
            print(cmd_pretrain(config))
        elif cmd == "train":
            print(cmd_train(config))
        elif cmd == "eval":
            print(format_table(cmd_eval(config, args.checkpoint)))
        elif cmd == "play":
            print(cmd_play(config, args.checkpoint))
    except (ConfigError, WorldFormatError, WorldValidationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
