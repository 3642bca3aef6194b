"""Composition of single-cache MAPs over a cache tree.

Two operations build the system MAP bottom-up:

* level superposition: independent sibling subtrees combine via the
  Kronecker sum,
* line superposition: a parent cache joins the MAP of its children in four
  steps: Kronecker sum, removal of causally impossible states, demotion of
  active transitions that no longer escape the tree, and rewiring of the
  all-out miss so the parent fetches from the origin alongside its child.

After the full composition the active transitions of the system MAP are
exactly the requests answered by an origin fetch (system misses).

Construction cost grows linearly with the number of caches (each step is a
Kronecker sum plus label scans); the dominating cost is the dense
steady-state solve, cubic in the final state count, which is what per-level
lumping keeps small for symmetric trees.
"""

from collections import Counter
from dataclasses import dataclass
from itertools import product

import numpy as np

from ttldelay.cache_builders import (
    build_parent_cache,
    build_single_cache,
    fetch_entry_distribution,
)
from ttldelay.errors import ConfigError
from ttldelay.map_algebra import (
    LabeledMap,
    StateLabel,
    empty_map,
    kronecker_sum,
)
from ttldelay.lumping import lump_symmetric_level
from ttldelay.settings import default_settings


def level_superpose(maps, settings=None):
    """Superpose independent sibling sub-MAPs; empty input gives the unit MAP."""
    maps = list(maps)
    if not maps:
        return empty_map()
    result = maps[0]
    for m in maps[1:]:
        result = kronecker_sum(result, m, settings=settings)
    return result


def _moved_root_pair(forest_a, forest_b):
    """Root symbols (before, after) of the single child that moved.

    Compares forests as multisets so it also works on lumped, canonically
    sorted labels.  Returns ``None`` when no single-child move explains the
    difference (e.g. identical forests).
    """
    if forest_a == forest_b:
        return None
    ca, cb = Counter(forest_a), Counter(forest_b)
    removed = list((ca - cb).elements())
    added = list((cb - ca).elements())
    if len(removed) == 1 and len(added) == 1:
        return removed[0][1], added[0][1]
    return None


@dataclass(frozen=True)
class InvalidStateRule:
    """Causality predicate for composite (children, parent) states.

    A fetching parent implies an ongoing chain through some child, and every
    fetching child waits at a fetch entry phase until the parent admits (its
    delay clock only starts then).  A state with the parent in a fetch phase
    is therefore invalid unless at least one child subtree root is fetching
    and every fetching child sits at one of its entry phases.
    ``entry_supports`` lists, per child, the phases a fresh miss can enter.
    """

    entry_supports: tuple

    def pair_blocks(self, child_index, symbol):
        """True when this child alone cannot justify a fetching parent."""
        if symbol[0] in ("O", "I"):
            return True
        return symbol[1] not in self.entry_supports[child_index]

    def invalid(self, children_label, parent_symbol):
        if parent_symbol[0] != "F":
            return False
        roots = children_label.root_symbols()
        some_fetching_at_entry = False
        for c, s in enumerate(roots):
            if s[0] != "F":
                continue
            if s[1] not in self.entry_supports[c]:
                return True  # a pinned child cannot sit mid-fetch
            some_fetching_at_entry = True
        return not some_fetching_at_entry


def _child_entry_distributions(children):
    """Per child, the distribution of fetch phases a fresh miss enters.

    Derived from the children MAP itself: chain-start transitions are the
    active transitions that flip a subtree root from out to fetching, and
    their rates split proportionally to the entry distribution.
    """
    n = {len(label.forest) for label in children.labels}
    if len(n) != 1:
        raise ConfigError("children MAP labels do not expose per-child symbols")
    n = n.pop()
    records = {}  # (source, child or "*") -> {phase: rate}
    rows, cols = np.nonzero(children.d1 > 0)
    for i, j in zip(rows, cols):
        fi, fj = children.labels[i].forest, children.labels[j].forest
        diffs = [c for c in range(n) if fi[c] != fj[c]]
        if len(diffs) == 1:
            c = diffs[0]
            si, sj = fi[c][1], fj[c][1]
            key = (i, c)
        else:
            # Lumped labels stay sorted, so a flip can reorder positions;
            # siblings are then identical and share one entry distribution.
            move = _moved_root_pair(fi, fj)
            if move is None:
                continue
            si, sj = move
            key = (i, "*")
        if si[0] == "O" and sj[0] == "F":
            bucket = records.setdefault(key, {})
            bucket[sj[1]] = bucket.get(sj[1], 0.0) + children.d1[i, j]

    def normalized(bucket):
        total = sum(bucket.values())
        return {ph: r / total for ph, r in bucket.items()}

    shared = next(
        (normalized(b) for (_, who), b in records.items() if who == "*"), None
    )
    dists = []
    for c in range(n):
        bucket = next(
            (b for (_, who), b in records.items() if who == c), None
        )
        if bucket is not None:
            dists.append(normalized(bucket))
        elif shared is not None:
            dists.append(shared)
        else:
            dists.append({})
    return dists


def _snap_to_entry(forest, rule, entry_dists, children_index):
    """Targets and weights after mid-fetch children restart at their entry.

    A chain start freezes running child fetches; frozen clocks restart from
    scratch on the parent's admission, so the phase a child was caught in is
    irrelevant and the state collapses onto the entry distribution.
    """
    options = []
    for c, node in enumerate(forest):
        symbol = node[1]
        if symbol[0] == "F" and symbol[1] not in rule.entry_supports[c]:
            options.append(
                [((node[0], ("F", ph)), w) for ph, w in entry_dists[c].items()]
            )
        else:
            options.append([(node, 1.0)])
    for combo in product(*options):
        nodes = tuple(item[0] for item in combo)
        share = 1.0
        for _, w in combo:
            share *= w
        if nodes not in children_index:
            nodes = tuple(sorted(nodes))  # lumped labels are kept sorted
        yield children_index[nodes], share


def line_superpose(parent, children, parent_entry=None, settings=None):
    """Join a parent cache MAP with the superposed MAP of its children.

    ``parent`` must come from :func:`build_parent_cache` (no active
    transitions of its own).  ``parent_entry`` gives the probability split of
    a fresh parent fetch over its fetch phases; when omitted, the fetch
    enters at the highest phase, which is exact for exponential, Erlang and
    Coxian delays.
    """
    settings = settings or default_settings()
    if np.any(parent.d1 != 0):
        raise ConfigError("parent MAP must have no active transitions")
    p_syms = [label.forest[0][1] for label in parent.labels]
    if p_syms[:2] != [("O", 0), ("I", 0)] or any(s[0] != "F" for s in p_syms[2:]):
        raise ConfigError("parent MAP states must be ordered [Out, In, F_1..F_f]")
    n_fetch = len(p_syms) - 2
    if parent_entry is None:
        parent_entry = np.zeros(n_fetch)
        parent_entry[-1] = 1.0
    parent_entry = np.asarray(parent_entry, dtype=float)

    entry_dists = _child_entry_distributions(children)
    rule = InvalidStateRule(tuple(frozenset(d) for d in entry_dists))
    nc, npar = children.size, parent.size

    # Step (a): Kronecker sum, children index varying slowest.
    combo = kronecker_sum(children, parent, settings=settings)
    d0 = combo.d0.copy()
    d1 = combo.d1.copy()

    def sidx(ci, pi):
        return ci * npar + pi

    # Step (b), states: drop everything the causality rule forbids.
    valid = np.ones(nc * npar, dtype=bool)
    for ci in range(nc):
        for pi in range(2, npar):
            if rule.invalid(children.labels[ci], p_syms[pi]):
                valid[sidx(ci, pi)] = False

    # Steps (c) and (d): reclassify the children's miss events.
    #
    # Under a fetching parent they stay active: the object is coming from the
    # origin, so these requests remain system misses.  Under a present parent
    # they are hits and become hidden.  Under an idle parent, an event that
    # starts a fresh fetch chain (it flips some child root from out to
    # fetching) escalates: the parent begins fetching from the origin and the
    # event stays an active system miss; an event that merely joins an
    # ongoing child fetch becomes hidden.
    #
    # A chain start freezes every running child fetch: the frozen clock
    # restarts from scratch when the parent admits, so the target snaps any
    # mid-fetch sibling back to its entry distribution.
    children_index = {label.forest: i for i, label in enumerate(children.labels)}
    for ci in range(nc):
        for cj in np.flatnonzero(children.d1[ci] > 0):
            rate = children.d1[ci, cj]
            move = _moved_root_pair(
                children.labels[ci].forest, children.labels[cj].forest
            )
            starts_chain = (
                move is not None and move[0][0] == "O" and move[1][0] == "F"
            )
            # Parent In: hit at the parent.
            d1[sidx(ci, 1), sidx(cj, 1)] -= rate
            d0[sidx(ci, 1), sidx(cj, 1)] += rate
            # Parent Out: escalate or absorb.
            src = sidx(ci, 0)
            d1[src, sidx(cj, 0)] -= rate
            if starts_chain:
                for target, share in _snap_to_entry(
                    children.labels[cj].forest, rule, entry_dists, children_index
                ):
                    for k, weight in enumerate(parent_entry):
                        if weight:
                            d1[src, sidx(target, 2 + k)] += rate * share * weight
            else:
                d0[src, sidx(cj, 0)] += rate

    # Step (b), transitions: a child cannot be admitted while the parent is
    # still fetching, whatever the surrounding states look like.
    q_children = children.d0 + children.d1
    for a, b in zip(*np.nonzero(q_children)):
        if a == b:
            continue
        move = _moved_root_pair(
            children.labels[a].forest, children.labels[b].forest
        )
        if move is not None and move[0][0] == "F" and move[1][0] == "I":
            for pi in range(2, npar):
                d0[sidx(a, pi), sidx(b, pi)] = 0.0

    keep = np.flatnonzero(valid)
    d0 = d0[np.ix_(keep, keep)]
    d1 = d1[np.ix_(keep, keep)]

    # Deleted transitions freeze the affected clocks: restore conservation.
    np.fill_diagonal(d0, 0.0)
    np.fill_diagonal(d0, -(d0.sum(axis=1) + d1.sum(axis=1)))

    labels = []
    for s in keep:
        ci, pi = divmod(int(s), npar)
        labels.append(
            StateLabel(((children.labels[ci].forest, p_syms[pi]),))
        )
    return LabeledMap(d0, d1, tuple(labels))


def _matrices_match(a, b, tol=1e-12):
    return (
        a.size == b.size
        and a.labels == b.labels
        and np.max(np.abs(a.d0 - b.d0)) <= tol
        and np.max(np.abs(a.d1 - b.d1)) <= tol
    )


def _superpose_with_lumping(child_maps, lump_per_level, settings):
    """Level-superpose children, lumping runs of identical siblings."""
    if not lump_per_level:
        return level_superpose(child_maps, settings=settings)
    groups = []
    for m in child_maps:
        if groups and _matrices_match(groups[-1][0], m):
            groups[-1].append(m)
        else:
            groups.append([m])
    parts = []
    for group in groups:
        combined = level_superpose(group, settings=settings)
        if len(group) > 1:
            combined = lump_symmetric_level(
                combined, [group[0].size] * len(group), settings=settings
            ).map
        parts.append(combined)
    return level_superpose(parts, settings=settings)


def build_tree(spec, lump_per_level=False, settings=None):
    """Build the full system MAP of a cache tree by post-order composition."""
    settings = settings or default_settings()
    spec.validate(exact=True)

    def build(node):
        if node.is_leaf:
            return build_single_cache(node.arrival, node.ttl, node.delay)
        children = _superpose_with_lumping(
            [build(child) for child in node.children], lump_per_level, settings
        )
        parent = build_parent_cache(node.ttl, node.delay)
        return line_superpose(
            parent,
            children,
            parent_entry=fetch_entry_distribution(node.delay),
            settings=settings,
        )

    return build(spec.root)
