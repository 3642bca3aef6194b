"""Exact state aggregation over symmetric sibling sub-trees.

When the level superposition combines ``n`` identical sub-MAPs, permuting the
siblings leaves the dynamics unchanged, so states that are permutations of
one another can be merged without approximation.  The orbit invariant is the
multiset of sibling sub-labels; each block of the resulting partition is
characterised by a frequency vector over sub-states, which is why the block
count is the number of weak compositions ``C(n + m_S - 1, m_S - 1)``.
"""

from dataclasses import dataclass
from math import comb

import numpy as np

from ttldelay.errors import NotSymmetricError
from ttldelay.map_algebra import LabeledMap, StateLabel


@dataclass(frozen=True)
class Partition:
    """A lumping of a state set into blocks of equivalent states."""

    blocks: tuple  # tuple of tuples of state indices
    block_of: tuple  # state index -> block index
    representatives: tuple  # one state index per block

    @property
    def size(self):
        return len(self.blocks)


@dataclass(frozen=True)
class LumpedMap:
    """A MAP over partition blocks, next to the partition that produced it."""

    map: LabeledMap
    partition: Partition


def partition_count(m_s, n):
    """Number of sibling-permutation blocks for ``n`` sub-trees of ``m_s`` states.

    Exact integer arithmetic; this is the stars-and-bars count of frequency
    vectors.
    """
    if m_s < 1 or n < 1:
        raise ValueError("m_s and n must be positive")
    return comb(n + m_s - 1, m_s - 1)


def _sibling_parts(label, n):
    if len(label.forest) != n:
        raise NotSymmetricError(
            f"state label has {len(label.forest)} sibling components, expected {n}"
        )
    return label.forest


def _verify_identical_factors(m, widths, tol=1e-12):
    """Check that the Kronecker factors of a full level superposition match."""
    n = len(widths)
    w = widths[0]
    strides = [w ** (n - 1 - k) for k in range(n)]
    ref_d0 = ref_d1 = None
    for k, stride in enumerate(strides):
        idx = np.arange(w) * stride
        f_d0 = m.d0[np.ix_(idx, idx)].copy()
        f_d1 = m.d1[np.ix_(idx, idx)].copy()
        # The diagonal of a Kronecker-sum slice mixes every factor's diagonal,
        # so compare off-diagonal structure only.
        np.fill_diagonal(f_d0, 0.0)
        np.fill_diagonal(f_d1, 0.0)
        if ref_d0 is None:
            ref_d0, ref_d1 = f_d0, f_d1
        elif (
            np.max(np.abs(f_d0 - ref_d0)) > tol
            or np.max(np.abs(f_d1 - ref_d1)) > tol
        ):
            raise NotSymmetricError(
                f"sibling {k} differs from sibling 0 by more than {tol}"
            )


def lump_symmetric_level(m, sibling_block_widths, settings=None):
    """Lump a level superposition of identical siblings by label multisets.

    ``sibling_block_widths`` lists the per-sibling state counts; all entries
    must agree.  Works on full products and on products from which invalid
    states were already removed (the blocks simply shrink).
    """
    widths = list(sibling_block_widths)
    n = len(widths)
    if n == 0:
        raise ValueError("need at least one sibling")
    if len(set(widths)) != 1:
        raise NotSymmetricError(f"sibling widths differ: {widths}")
    if n == 1:
        partition = Partition(
            blocks=tuple((i,) for i in range(m.size)),
            block_of=tuple(range(m.size)),
            representatives=tuple(range(m.size)),
        )
        return LumpedMap(m, partition)

    if widths[0] ** n == m.size:
        _verify_identical_factors(m, widths)

    by_signature = {}
    for idx, label in enumerate(m.labels):
        signature = tuple(sorted(_sibling_parts(label, n)))
        by_signature.setdefault(signature, []).append(idx)

    signatures = sorted(by_signature)
    blocks = []
    block_of = [0] * m.size
    reps = []
    for b, signature in enumerate(signatures):
        members = tuple(by_signature[signature])
        blocks.append(members)
        for s in members:
            block_of[s] = b
        reps.append(min(members, key=lambda s: m.labels[s].forest))

    nb = len(blocks)
    ld0 = np.zeros((nb, nb))
    ld1 = np.zeros((nb, nb))
    block_index = np.asarray(block_of)
    for b, rep in enumerate(reps):
        np.add.at(ld0[b], block_index, m.d0[rep])
        np.add.at(ld1[b], block_index, m.d1[rep])

    labels = tuple(StateLabel(sig) for sig in signatures)
    lumped = LabeledMap(ld0, ld1, labels)
    partition = Partition(tuple(blocks), tuple(block_of), tuple(reps))

    if widths[0] ** n != m.size:
        report = verify_lumpability(m, partition)
        if not report.passed:
            raise NotSymmetricError(
                "sibling permutation partition is not lumpable on this "
                f"reduced product (worst deviation {report.worst_deviation:.3e})"
            )
    return LumpedMap(lumped, partition)


@dataclass(frozen=True)
class LumpabilityReport:
    passed: bool
    worst_deviation: float
    failures: tuple

    def __bool__(self):
        return self.passed


def verify_lumpability(m, partition, tol=1e-9):
    """Numerically test the strong-lumpability condition for ``partition``.

    For every ordered block pair the total outgoing rate into the target
    block must be identical for all members of the source block.  Also checks
    that no single transition changes more than one sibling component, when
    the labels expose siblings.
    """
    q = m.generator()
    nb = partition.size
    onehot = np.zeros((m.size, nb))
    onehot[np.arange(m.size), np.asarray(partition.block_of)] = 1.0

    worst = 0.0
    failures = []
    for b, members in enumerate(partition.blocks):
        rows = q[np.asarray(members)] @ onehot  # |block| x nb
        dev = np.max(np.abs(rows - rows[0]), axis=0)
        j = int(np.argmax(dev))
        if dev[j] > worst:
            worst = float(dev[j])
        bad = np.flatnonzero(dev > tol)
        for jj in bad[:4]:
            failures.append(
                f"block {b} -> block {jj}: member rates differ by {dev[jj]:.3e}"
            )

    lengths = {len(lab.forest) for lab in m.labels}
    if len(lengths) == 1 and lengths.pop() > 1 and m.size <= 5000:
        off = q - np.diag(np.diag(q))
        for i, j in zip(*np.nonzero(np.abs(off) > 0)):
            fi, fj = m.labels[i].forest, m.labels[j].forest
            changed = sum(a != b for a, b in zip(fi, fj))
            if changed > 1:
                failures.append(
                    f"transition {i}->{j} changes {changed} sibling components"
                )

    return LumpabilityReport(not failures, worst, tuple(failures))
