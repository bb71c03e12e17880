import numpy as np
import pytest

from hypercrs.env import ConversationEnv, EnvConfig
from hypercrs.kg import build_triples, pretrain
from hypercrs.world import Catalog, NodeIndex, SocialGraph, WorldSpec, generate_world


def make_catalog(item_attrs: dict, attr_type: dict | None = None) -> Catalog:
    attrs = sorted({a for s in item_attrs.values() for a in s} | set(attr_type or {}))
    attr_type = attr_type or {a: 0 for a in attrs}
    return Catalog(
        items=frozenset(item_attrs),
        attributes=frozenset(attrs),
        attribute_types=frozenset(attr_type.values()),
        item_attrs={v: frozenset(s) for v, s in item_attrs.items()},
        attr_type=dict(attr_type),
    )


def make_social(friends: dict, accepted: dict) -> SocialGraph:
    users = set(friends) | set(accepted)
    return SocialGraph(
        friends={u: frozenset(friends.get(u, ())) for u in users},
        accepted_items={u: frozenset(accepted.get(u, ())) for u in users},
    )


SMALL_SPEC = WorldSpec(n_users=8, n_items=20, n_attributes=10, n_types=3, social_density=0.4,
                       interactions_per_user=6, attrs_min=2, attrs_max=4, seed=3)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_embeddings(small_world):
    catalog, social = small_world
    n = len(NodeIndex.from_world(catalog, social))
    return pretrain(build_triples(catalog, social), d=16, epochs=10, seed=0, n_nodes=n)


@pytest.fixture
def small_env(small_world):
    catalog, social = small_world
    return ConversationEnv(catalog, social, EnvConfig())


def random_worlds(n, seed=0, **kw):
    """Yield ``n`` small random worlds with varied shapes."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        spec = WorldSpec(
            n_users=int(rng.integers(2, 6)),
            n_items=int(rng.integers(4, 14)),
            n_attributes=int(rng.integers(3, 9)),
            n_types=int(rng.integers(1, 3)),
            social_density=float(rng.uniform(0, 0.8)),
            interactions_per_user=int(rng.integers(2, 6)),
            attrs_min=1,
            attrs_max=3,
            seed=int(rng.integers(1 << 30)),
            **kw,
        )
        yield generate_world(spec)


def fd_relative_error(fn, tensors, h=1e-6):
    """Max relative error between autograd and central differences, per tensor.

    ``fn`` maps nothing to a scalar tensor and reads ``tensors`` (float64 leaves)
    by reference. Relative error is ``max|g_auto - g_fd| / max|g_fd|``; a tensor whose
    true gradient vanishes (e.g. a bias cancelled by mean-centring) is judged on
    absolute error instead.
    """
    import torch

    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    errs = []
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            num = torch.zeros_like(t)
            flat, nflat = t.view(-1), num.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                nflat[i] = (up - down) / (2 * h)
            scale = num.abs().max().item()
            diff = (g - num).abs().max().item()
            errs.append(diff / scale if scale > 1e-8 else diff)
    return errs


# ---------------------------------------------------------------------------
# acceptance reporting

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
ACCEPTANCE_TABLES: list[str] = []


@pytest.fixture
def record():
    """Record one acceptance criterion as ``record(number, name, passed, detail)``."""
    def _record(number, name, passed, detail=""):
        ACCEPTANCE[number] = (name, bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {name}: {detail}")
    for table in ACCEPTANCE_TABLES:
        tr.write_line("")
        tr.write_line(table)
