"""Independent brute-force oracles and proof-machinery utilities.

Everything here deliberately avoids the satsynth code paths (no shared
tree-walk kernels): these routines are the second route in every
cross-check, so they recompute reached nodes with their own numpy
level-order sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import MdpModel, rm_run_nodes
from .policy import HistoryOracle
from .satsynth import Hypothesis, sufficient_depth
from .traces import (
    NegativePair,
    PrefixTree,
    SignaturePartition,
    class_pair_witness,
    compute_signatures,
    enumerate_prefix_tree,
)

DEFAULT_ENUM_CAP = 300_000


class EnumerationCapError(RuntimeError):
    pass


def _all_hypotheses(u_max: int, n_ap: int, n_states: int, cap: int):
    """Stacked delta/labeling arrays for every anchored hypothesis."""
    n_delta = u_max ** (u_max * n_ap)
    n_lab = n_ap ** (n_states - 1)
    total = n_delta * n_lab
    if total > cap:
        raise EnumerationCapError(
            f"{total} candidate hypotheses exceed the enumeration cap {cap}"
        )
    # mixed-radix unravel: delta entries vary fastest over (i, p) row-major
    d_idx = np.arange(n_delta)
    deltas = np.zeros((n_delta, u_max + 1, n_ap + 1), np.int32)
    for i in range(u_max):
        for p in range(n_ap):
            deltas[:, i + 1, p + 1] = d_idx % u_max + 1
            d_idx = d_idx // u_max
    l_idx = np.arange(n_lab)
    labs = np.zeros((n_lab, n_states + 1), np.int32)
    labs[:, 1] = 1
    for k in range(2, n_states + 1):
        labs[:, k] = l_idx % n_ap + 1
        l_idx = l_idx // n_ap
    # full cross product
    D = np.repeat(np.arange(n_delta), n_lab)
    L = np.tile(np.arange(n_lab), n_delta)
    return deltas[D], labs[L]


def _nodes_over_tree(tree: PrefixTree, deltas: np.ndarray, labs: np.ndarray) -> np.ndarray:
    """reach[h, n] = node reached by hypothesis h after tree prefix n."""
    H = deltas.shape[0]
    N = len(tree)
    reach = np.ones((H, N), np.int32)
    hh = np.arange(H)[:, None]
    order = np.argsort(tree.depth, kind="stable")
    d = tree.depth[order]
    for depth in range(1, int(tree.depth.max()) + 1):
        nodes = order[d == depth]
        if len(nodes) == 0:
            break
        prev = reach[:, tree.parent[nodes]]
        plab = labs[hh, tree.state[nodes][None, :]]
        reach[:, nodes] = deltas[hh, prev, plab]
    return reach


def _non_stuttering_mask(deltas: np.ndarray) -> np.ndarray:
    u = deltas.shape[1] - 1
    p = deltas.shape[2] - 1
    hh = np.arange(deltas.shape[0])[:, None, None]
    j = deltas[:, 1:, 1:]
    closed = deltas[hh, j, np.arange(1, p + 1)[None, None, :]] == j
    return closed.reshape(deltas.shape[0], u * p).all(axis=1)


def brute_force_feasible(
    pairs: list[NegativePair],
    tree: PrefixTree,
    u_max: int,
    n_ap: int,
    n_states: int,
    non_stuttering: bool = False,
    cap: int = DEFAULT_ENUM_CAP,
) -> list[Hypothesis]:
    """Exhaustive search over anchored (delta, labeling) pairs.

    Keeps the hypotheses under which every given pair of prefixes reaches
    two distinct nodes; the defining cross-check for the SAT route.
    """
    deltas, labs = _all_hypotheses(u_max, n_ap, n_states, cap)
    mask = np.ones(deltas.shape[0], bool)
    if non_stuttering:
        mask &= _non_stuttering_mask(deltas)
    if pairs:
        reach = _nodes_over_tree(tree, deltas, labs)
        ta = np.array([p.tau for p in pairs])
        tb = np.array([p.tau_prime for p in pairs])
        mask &= (reach[:, ta] != reach[:, tb]).all(axis=1)
    return [Hypothesis(deltas[h], labs[h]) for h in np.flatnonzero(mask)]


def feasible_under_partition(
    partition: SignaturePartition,
    tree: PrefixTree,
    u_max: int,
    n_ap: int,
    n_states: int,
    non_stuttering: bool = False,
    cap: int = DEFAULT_ENUM_CAP,
) -> list[Hypothesis]:
    """Brute-force feasible set under the FULL negative-example set.

    Equivalent to brute_force_feasible fed every witnessed cross-class
    pair: a hypothesis survives exactly when the node sets it reaches on
    any two witnessed classes are disjoint. Never materializes the pairs.
    """
    deltas, labs = _all_hypotheses(u_max, n_ap, n_states, cap)
    mask = np.ones(deltas.shape[0], bool)
    if non_stuttering:
        mask &= _non_stuttering_mask(deltas)
    reach = _nodes_over_tree(tree, deltas, labs)
    H = deltas.shape[0]
    C = partition.n_classes
    occ = np.zeros((C, H, u_max + 1), bool)
    for c, members in enumerate(partition.class_members):
        sub = reach[:, members]
        occ[c][np.repeat(np.arange(H), sub.shape[1]), sub.ravel()] = True
    for c1 in range(C):
        for c2 in range(c1 + 1, C):
            if class_pair_witness(partition, c1, c2) is None:
                continue
            mask &= ~np.any(occ[c1] & occ[c2], axis=1)
    return [Hypothesis(deltas[h], labs[h]) for h in np.flatnonzero(mask)]


# ---------------------------------------------------------------------------
# Synchronized machines and cycle removal


@dataclass(frozen=True)
class SyncMachine:
    """Two labeled machine models run in lock-step over a shared state set.

    Composite node (u1, u2) is stored as (u1-1)*U2 + u2 and composite
    proposition (p1, p2) as (p1-1)*P2 + p2, so rm_run applies unchanged.
    """

    delta_u: np.ndarray
    labeling: np.ndarray
    shape_nodes: tuple[int, int]
    shape_props: tuple[int, int]

    @property
    def n_nodes(self) -> int:
        return self.shape_nodes[0] * self.shape_nodes[1]

    def project_node(self, composite: int) -> tuple[int, int]:
        u2 = self.shape_nodes[1]
        return ((composite - 1) // u2 + 1, (composite - 1) % u2 + 1)


def build_sync(g1, g2) -> SyncMachine:
    """Synchronized product of two labeled machine models (shared states)."""
    if len(g1.labeling) != len(g2.labeling):
        raise ValueError("the two machines must label the same state set")
    U1 = g1.delta_u.shape[0] - 1
    U2 = g2.delta_u.shape[0] - 1
    P1 = g1.delta_u.shape[1] - 1
    P2 = g2.delta_u.shape[1] - 1
    delta = np.zeros((U1 * U2 + 1, P1 * P2 + 1), np.int32)
    for u1 in range(1, U1 + 1):
        for u2 in range(1, U2 + 1):
            cu = (u1 - 1) * U2 + u2
            for p1 in range(1, P1 + 1):
                for p2 in range(1, P2 + 1):
                    cp = (p1 - 1) * P2 + p2
                    v1 = g1.delta_u[u1, p1]
                    v2 = g2.delta_u[u2, p2]
                    delta[cu, cp] = (v1 - 1) * U2 + v2
    n_states = len(g1.labeling) - 1
    lab = np.zeros(n_states + 1, np.int32)
    lab[1:] = (g1.labeling[1:] - 1) * P2 + g2.labeling[1:]
    return SyncMachine(delta, lab, (U1, U2), (P1, P2))


def remove_cycles(tau, g) -> list[int]:
    """Shrink a trajectory by deleting (state, node)-repeating subsequences.

    Deletes s_{i+1..j} whenever s_i = s_j and the machine node after the
    i-prefix equals the node after the j-prefix, leftmost-first, until no
    cycle remains. The reached node is unchanged and feasibility of the
    trajectory is preserved (the spliced transition s_i -> s_{j+1} existed
    as s_j -> s_{j+1}).
    """
    tau = list(tau)
    while True:
        nodes = rm_run_nodes(g, tau)
        hit = None
        for i in range(1, len(tau) + 1):
            for j in range(i + 1, len(tau) + 1):
                if tau[i - 1] == tau[j - 1] and nodes[i] == nodes[j]:
                    hit = (i, j)
                    break
            if hit:
                break
        if hit is None:
            return tau
        i, j = hit
        del tau[i:j]


def check_depth_stabilization(fixture, u_max: int | None = None, n_ap: int | None = None) -> bool:
    """Feasible set at the sufficient depth equals the set one level deeper.

    Runs the full-evidence brute-force feasibility at l* and l*+1 and
    compares the hypothesis sets exactly.
    """
    u_max = fixture.u_max if u_max is None else u_max
    n_ap = fixture.n_ap if n_ap is None else n_ap
    S = fixture.mdp.n_states
    lstar = sufficient_depth(S, u_max)
    oracle = fixture.make_oracle()
    sets = []
    for depth in (lstar, lstar + 1):
        tree = enumerate_prefix_tree(fixture.mdp, depth, compress=fixture.stutter_invariant)
        part = compute_signatures(tree, oracle)
        feas = feasible_under_partition(
            part, tree, u_max, n_ap, S, non_stuttering=fixture.stutter_invariant
        )
        sets.append({h.key for h in feas})
    return sets[0] == sets[1]


def node_partition_equivalent(g1, g2, mdp: MdpModel, depth: int) -> bool:
    """Do two machine models partition depth-bounded trajectories identically?

    The checkable surrogate for policy equivalence when output functions
    are out of scope: equality of the trajectory partitions induced by the
    reached nodes (which also fixes the class -> endpoint-state structure).
    """
    u1 = g1.delta_u.shape[0] - 1
    u2 = g2.delta_u.shape[0] - 1
    need = max(sufficient_depth(mdp.n_states, u1), sufficient_depth(mdp.n_states, u2))
    if depth < need:
        raise ValueError(f"depth {depth} below the sufficient depth {need}")
    tree = enumerate_prefix_tree(mdp, depth)
    c1 = _nodes_over_tree(tree, g1.delta_u[None], g1.labeling[None])[0][1:].tolist()
    c2 = _nodes_over_tree(tree, g2.delta_u[None], g2.labeling[None])[0][1:].tolist()
    joint = set(zip(c1, c2))
    return len(joint) == len(set(c1)) == len(set(c2))
