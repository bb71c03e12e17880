"""Static world structure: item catalog, social graph, file IO and synthetic generation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

ITEMS_FILE = "items.tsv"
ATTR_TYPES_FILE = "attr_types.tsv"
INTERACTIONS_FILE = "interactions.tsv"
SOCIAL_FILE = "social.tsv"


class WorldFormatError(ValueError):
    """A world file line could not be parsed."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class WorldValidationError(ValueError):
    """Parsed world data references ids that do not exist or breaks an invariant."""


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class Catalog:
    items: frozenset[int]
    attributes: frozenset[int]
    attribute_types: frozenset[int]
    item_attrs: dict[int, frozenset[int]]
    attr_type: dict[int, int]

    def __post_init__(self):
        if set(self.item_attrs) != set(self.items):
            raise WorldValidationError("item_attrs keys must equal the item set")
        for item, attrs in self.item_attrs.items():
            if not attrs:
                raise WorldValidationError(f"item {item} has no attributes")
            for a in attrs:
                if a not in self.attributes:
                    raise WorldValidationError(f"item {item} references unknown attribute {a}")
        if set(self.attr_type) != set(self.attributes):
            raise WorldValidationError("every attribute needs exactly one type")
        for a, c in self.attr_type.items():
            if c not in self.attribute_types:
                raise WorldValidationError(f"attribute {a} has unknown type {c}")

    @cached_property
    def attr_items(self) -> dict[int, frozenset[int]]:
        """Inverse index: attribute -> items carrying it (V_p)."""
        index: dict[int, set[int]] = {a: set() for a in self.attributes}
        for item, attrs in self.item_attrs.items():
            for a in attrs:
                index[a].add(item)
        return {a: frozenset(vs) for a, vs in index.items()}

    @cached_property
    def sorted_items(self) -> tuple[int, ...]:
        return tuple(sorted(self.items))

    @cached_property
    def sorted_attributes(self) -> tuple[int, ...]:
        return tuple(sorted(self.attributes))

    def overlapping(self, v1: int, v2: int) -> bool:
        return v1 != v2 and not self.item_attrs[v1].isdisjoint(self.item_attrs[v2])


@dataclass(frozen=True)
class SocialGraph:
    friends: dict[int, frozenset[int]]
    accepted_items: dict[int, frozenset[int]]

    def __post_init__(self):
        if set(self.friends) != set(self.accepted_items):
            raise WorldValidationError("friends and accepted_items must cover the same users")
        for u, fs in self.friends.items():
            if u in fs:
                raise WorldValidationError(f"user {u} is its own friend")
            for f in fs:
                if f not in self.friends or u not in self.friends[f]:
                    raise WorldValidationError(f"friendship {u}-{f} is not symmetric")

    @property
    def users(self) -> frozenset[int]:
        return frozenset(self.friends)

    @cached_property
    def sorted_users(self) -> tuple[int, ...]:
        return tuple(sorted(self.friends))

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges, each once, as (lower id, higher id)."""
        return sorted((u, f) for u, fs in self.friends.items() for f in fs if u < f)

    def interactions(self) -> list[tuple[int, int]]:
        return sorted((u, v) for u, vs in self.accepted_items.items() for v in vs)

    def validate_against(self, catalog: Catalog) -> None:
        for u, vs in self.accepted_items.items():
            for v in vs:
                if v not in catalog.items:
                    raise WorldValidationError(f"user {u} interacted with unknown item {v}")


@dataclass(frozen=True)
class NodeIndex:
    """Unified row index over users, items and attributes for embedding tables.

    Rows are laid out as [users | items | attributes], each block in ascending id order.
    """

    users: tuple[int, ...]
    items: tuple[int, ...]
    attributes: tuple[int, ...]

    @classmethod
    def from_world(cls, catalog: Catalog, social: SocialGraph) -> "NodeIndex":
        return cls(social.sorted_users, catalog.sorted_items, catalog.sorted_attributes)

    @cached_property
    def _user_row(self) -> dict[int, int]:
        return {u: i for i, u in enumerate(self.users)}

    @cached_property
    def _item_row(self) -> dict[int, int]:
        off = len(self.users)
        return {v: off + i for i, v in enumerate(self.items)}

    @cached_property
    def _attr_row(self) -> dict[int, int]:
        off = len(self.users) + len(self.items)
        return {p: off + i for i, p in enumerate(self.attributes)}

    def __len__(self) -> int:
        return len(self.users) + len(self.items) + len(self.attributes)

    def user(self, u: int) -> int:
        return self._user_row[u]

    def item(self, v: int) -> int:
        return self._item_row[v]

    def attr(self, p: int) -> int:
        return self._attr_row[p]

    def row(self, kind: str, node_id: int) -> int:
        if kind == "user" or kind == "friend":
            return self._user_row[node_id]
        if kind == "item":
            return self._item_row[node_id]
        if kind == "attr":
            return self._attr_row[node_id]
        raise KeyError(kind)


@dataclass(frozen=True)
class WorldSpec:
    n_users: int = 50
    n_items: int = 200
    n_attributes: int = 40
    n_types: int = 5
    social_density: float = 0.1
    interactions_per_user: int = 20
    attrs_min: int = 3
    attrs_max: int = 6
    # probability that an item's next attribute is drawn from a type it already uses
    type_clustering: float = 0.5
    # Zipf exponent of attribute popularity within a type; 0 means uniform
    popularity_skew: float = 1.0
    # number of latent favourite attributes per user driving their history
    user_interests: int = 3
    interest_strength: float = 2.0
    # fraction of each user's history copied from friends' histories
    social_homophily: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_attributes", "n_types",
                     "interactions_per_user", "attrs_min", "attrs_max", "user_interests"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.attrs_max < self.attrs_min:
            raise ValueError("attrs_max must be >= attrs_min")
        if self.n_attributes < self.n_types:
            raise ValueError("need at least one attribute per type")
        for name in ("social_density", "type_clustering", "social_homophily"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.popularity_skew < 0:
            raise ValueError("popularity_skew must be >= 0")


def world_equal(a: tuple[Catalog, SocialGraph], b: tuple[Catalog, SocialGraph]) -> bool:
    return a[0] == b[0] and a[1] == b[1]


# ---------------------------------------------------------------------------
# file IO


def _read_pairs(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise WorldFormatError(path, line_no, f"expected 2 tab-separated fields, got {len(parts)}")
            yield line_no, parts[0].strip(), parts[1].strip()


def _parse_id(path, line_no, text) -> int:
    if not text.isdigit():
        raise WorldFormatError(path, line_no, f"invalid id {text!r}")
    return int(text)


def load_world(items_path, interactions_path, social_path, attr_types_path=None) -> tuple[Catalog, SocialGraph]:
    """Load and validate a world from line-oriented TSV files.

    ``attr_types_path`` defaults to ``attr_types.tsv`` next to the items file.
    """
    items_path = Path(items_path)
    attr_types_path = Path(attr_types_path) if attr_types_path else items_path.with_name(ATTR_TYPES_FILE)

    attr_type: dict[int, int] = {}
    for line_no, a, c in _read_pairs(attr_types_path):
        aid = _parse_id(attr_types_path, line_no, a)
        if aid in attr_type:
            raise WorldFormatError(attr_types_path, line_no, f"duplicate attribute {aid}")
        attr_type[aid] = _parse_id(attr_types_path, line_no, c)

    item_attrs: dict[int, frozenset[int]] = {}
    for line_no, v, attrs in _read_pairs(items_path):
        vid = _parse_id(items_path, line_no, v)
        if vid in item_attrs:
            raise WorldFormatError(items_path, line_no, f"duplicate item {vid}")
        ids = [_parse_id(items_path, line_no, a) for a in attrs.split(",") if a.strip()]
        if not ids:
            raise WorldFormatError(items_path, line_no, f"item {vid} lists no attributes")
        for a in ids:
            if a not in attr_type:
                raise WorldValidationError(f"item {vid} references unknown attribute {a}")
        item_attrs[vid] = frozenset(ids)

    accepted: dict[int, set[int]] = {}
    for line_no, u, v in _read_pairs(Path(interactions_path)):
        uid = _parse_id(interactions_path, line_no, u)
        vid = _parse_id(interactions_path, line_no, v)
        if vid not in item_attrs:
            raise WorldValidationError(f"interaction of user {uid} references unknown item {vid}")
        accepted.setdefault(uid, set()).add(vid)

    friends: dict[int, set[int]] = {u: set() for u in accepted}
    for line_no, u, f in _read_pairs(Path(social_path)):
        uid = _parse_id(social_path, line_no, u)
        fid = _parse_id(social_path, line_no, f)
        if uid == fid:
            raise WorldValidationError(f"self-loop on user {uid}")
        friends.setdefault(uid, set()).add(fid)
        friends.setdefault(fid, set()).add(uid)

    catalog = Catalog(
        items=frozenset(item_attrs),
        attributes=frozenset(attr_type),
        attribute_types=frozenset(attr_type.values()),
        item_attrs=item_attrs,
        attr_type=attr_type,
    )
    social = SocialGraph(
        friends={u: frozenset(fs) for u, fs in friends.items()},
        accepted_items={u: frozenset(accepted.get(u, ())) for u in friends},
    )
    social.validate_against(catalog)
    return catalog, social


def load_world_dir(directory) -> tuple[Catalog, SocialGraph]:
    d = Path(directory)
    for name in (ITEMS_FILE, ATTR_TYPES_FILE, INTERACTIONS_FILE, SOCIAL_FILE):
        if not (d / name).exists():
            raise FileNotFoundError(f"missing world file {d / name}")
    return load_world(d / ITEMS_FILE, d / INTERACTIONS_FILE, d / SOCIAL_FILE, d / ATTR_TYPES_FILE)


def save_world(catalog: Catalog, social: SocialGraph, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "items": d / ITEMS_FILE,
        "attr_types": d / ATTR_TYPES_FILE,
        "interactions": d / INTERACTIONS_FILE,
        "social": d / SOCIAL_FILE,
    }
    with open(paths["items"], "w", encoding="utf-8", newline="\n") as fh:
        for v in catalog.sorted_items:
            fh.write(f"{v}\t{','.join(map(str, sorted(catalog.item_attrs[v])))}\n")
    with open(paths["attr_types"], "w", encoding="utf-8", newline="\n") as fh:
        for a in catalog.sorted_attributes:
            fh.write(f"{a}\t{catalog.attr_type[a]}\n")
    with open(paths["interactions"], "w", encoding="utf-8", newline="\n") as fh:
        for u, v in social.interactions():
            fh.write(f"{u}\t{v}\n")
    with open(paths["social"], "w", encoding="utf-8", newline="\n") as fh:
        for u, f in social.edges():
            fh.write(f"{u}\t{f}\n")
    return paths


# ---------------------------------------------------------------------------
# synthetic generation


def _popularity(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def generate_world(spec: WorldSpec) -> tuple[Catalog, SocialGraph]:
    """Generate a reproducible synthetic world.

    Attributes are split into contiguous type blocks. Each item draws a handful of
    attributes, preferring types it already uses, with Zipf popularity inside a type.
    Users interact with items that match a few latent favourite attributes; with
    ``social_homophily > 0`` part of every history is copied from friends.
    """
    spec.validate()
    if spec.n_items < 2:
        raise GenerationError("need at least two items for an overlapping pair")
    rng = np.random.default_rng(spec.seed)

    attr_type = {a: a * spec.n_types // spec.n_attributes for a in range(spec.n_attributes)}
    by_type: dict[int, list[int]] = {}
    for a, c in attr_type.items():
        by_type.setdefault(c, []).append(a)
    type_pop = {c: _popularity(len(attrs), spec.popularity_skew) for c, attrs in by_type.items()}

    def draw_in_type(c: int, taken: set[int]) -> int | None:
        attrs = by_type[c]
        w = np.array([0.0 if a in taken else p for a, p in zip(attrs, type_pop[c])])
        if w.sum() <= 0:
            return None
        return attrs[int(rng.choice(len(attrs), p=w / w.sum()))]

    item_attrs: dict[int, frozenset[int]] = {}
    for v in range(spec.n_items):
        k = min(int(rng.integers(spec.attrs_min, spec.attrs_max + 1)), spec.n_attributes)
        chosen: set[int] = set()
        used_types: list[int] = []
        while len(chosen) < k:
            if used_types and rng.random() < spec.type_clustering:
                c = used_types[int(rng.integers(len(used_types)))]
            else:
                c = int(rng.integers(spec.n_types))
            a = draw_in_type(c, chosen)
            if a is None:
                continue
            chosen.add(a)
            if c not in used_types:
                used_types.append(c)
        item_attrs[v] = frozenset(chosen)

    items = list(range(spec.n_items))
    if not any(not item_attrs[a].isdisjoint(item_attrs[b]) for a, b in itertools.combinations(items, 2)):
        # force one overlapping pair so episodes stay sampleable
        shared = min(item_attrs[0])
        item_attrs[1] = item_attrs[1] | {shared}

    catalog = Catalog(
        items=frozenset(items),
        attributes=frozenset(attr_type),
        attribute_types=frozenset(attr_type.values()),
        item_attrs=item_attrs,
        attr_type=attr_type,
    )

    users = list(range(spec.n_users))
    friends: dict[int, set[int]] = {u: set() for u in users}
    if spec.social_density > 0:
        for u, f in itertools.combinations(users, 2):
            if rng.random() < spec.social_density:
                friends[u].add(f)
                friends[f].add(u)

    n_hist = min(spec.interactions_per_user, spec.n_items)
    attr_matrix = np.zeros((spec.n_items, spec.n_attributes))
    for v, attrs in item_attrs.items():
        attr_matrix[v, list(attrs)] = 1.0
    own: dict[int, list[int]] = {}
    for u in users:
        fav = rng.choice(spec.n_attributes, size=min(spec.user_interests, spec.n_attributes), replace=False)
        affinity = attr_matrix[:, fav].sum(axis=1)
        w = np.exp(spec.interest_strength * affinity)
        own[u] = [int(v) for v in rng.choice(spec.n_items, size=n_hist, replace=False, p=w / w.sum())]

    accepted: dict[int, frozenset[int]] = {}
    for u in users:
        hist = list(own[u])
        pool = sorted({v for f in friends[u] for v in own[f]} - set(hist))
        n_copy = min(int(round(spec.social_homophily * n_hist)), len(pool))
        if n_copy:
            copied = rng.choice(len(pool), size=n_copy, replace=False)
            keep = rng.permutation(len(hist))[: n_hist - n_copy]
            hist = [hist[i] for i in sorted(keep)] + [pool[i] for i in copied]
        accepted[u] = frozenset(hist)

    social = SocialGraph(
        friends={u: frozenset(fs) for u, fs in friends.items()},
        accepted_items=accepted,
    )
    return catalog, social
