"""Feasible trajectory prefixes, behavior signatures, and negative examples."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .env import MdpModel
from .policy import EPS_POLICY, HistoryOracle

DEFAULT_NODE_CAP = 5_000_000


class TreeOverflowError(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(
            f"prefix tree exceeds the {cap} node cap at {count} prefixes; "
            "use a smaller depth or the active mode"
        )
        self.count = count
        self.cap = cap


class PrefixTree:
    """Deduplicated feasible trajectory prefixes as a parent-pointer tree.

    Node 0 is the empty prefix; every other node appends one state to its
    parent. Node ids are topological (parents precede children).
    """

    def __init__(self):
        self.parent = np.zeros(1, np.int32)
        self.state = np.zeros(1, np.int32)
        self.depth = np.zeros(1, np.int32)
        self.parent[0] = -1
        self._child: dict[tuple[int, int], int] | None = {}

    def __len__(self) -> int:
        return len(self.parent)

    @property
    def n_prefixes(self) -> int:
        """Number of nonempty prefixes stored (the root does not count)."""
        return len(self.parent) - 1

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def _append_level(self, parents: np.ndarray, states: np.ndarray) -> np.ndarray:
        base = len(self.parent)
        self.parent = np.concatenate([self.parent, parents.astype(np.int32)])
        self.state = np.concatenate([self.state, states.astype(np.int32)])
        self.depth = np.concatenate([self.depth, self.depth[parents] + 1])
        self._child = None  # invalidated; rebuilt lazily
        return np.arange(base, len(self.parent), dtype=np.int32)

    def _child_map(self) -> dict[tuple[int, int], int]:
        if self._child is None:
            self._child = {
                (int(self.parent[n]), int(self.state[n])): n
                for n in range(1, len(self.parent))
            }
        return self._child

    def child(self, node: int, state: int) -> int | None:
        return self._child_map().get((node, state))

    def add_path(self, states) -> int:
        """Insert a trajectory, reusing existing prefixes; returns its leaf id."""
        cmap = self._child_map()
        node = 0
        for s in states:
            key = (node, int(s))
            nxt = cmap.get(key)
            if nxt is None:
                nxt = len(self.parent)
                self.parent = np.append(self.parent, np.int32(node))
                self.state = np.append(self.state, np.int32(s))
                self.depth = np.append(self.depth, self.depth[node] + 1)
                cmap[key] = nxt
            node = nxt
        return node

    def path_states(self, node: int) -> list[int]:
        out: list[int] = []
        while node > 0:
            out.append(int(self.state[node]))
            node = int(self.parent[node])
        out.reverse()
        return out

    # -- serialization -------------------------------------------------------

    def to_npz(self, path) -> None:
        np.savez_compressed(path, parent=self.parent, state=self.state)

    @classmethod
    def from_npz(cls, path) -> "PrefixTree":
        data = np.load(path)
        tree = cls.__new__(cls)
        tree.parent = data["parent"].astype(np.int32)
        tree.state = data["state"].astype(np.int32)
        depth = np.zeros(len(tree.parent), np.int32)
        for n in range(1, len(tree.parent)):
            depth[n] = depth[tree.parent[n]] + 1
        tree.depth = depth
        tree._child = None
        return tree


def enumerate_prefix_tree(
    mdp: MdpModel,
    l: int,
    compress: bool = False,
    node_cap: int = DEFAULT_NODE_CAP,
) -> PrefixTree:
    """All feasible trajectory prefixes of length at most l, as a tree.

    Feasible means a mu0-positive start followed by positive-probability
    transitions. With compress=True, consecutive repetitions of a state are
    collapsed (sound only when the non-stuttering constraint is in force,
    since equal states imply equal labels).
    """
    if l < 1:
        raise ValueError("depth must be at least 1")
    succ = mdp.successor_table()
    succ_cnt = np.array([len(x) for x in succ], np.int64)
    succ_flat = np.concatenate(succ) if len(succ) > 1 else np.empty(0, np.int32)
    succ_ptr = np.zeros(len(succ) + 1, np.int64)
    np.cumsum(succ_cnt, out=succ_ptr[1:])

    tree = PrefixTree()
    frontier = tree._append_level(
        np.zeros(len(mdp.initial_states()), np.int32), mdp.initial_states()
    )
    for _ in range(l - 1):
        if len(frontier) == 0:
            break
        fstates = tree.state[frontier]
        counts = succ_cnt[fstates]
        total = int(counts.sum())
        starts = succ_ptr[fstates]
        offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        children = succ_flat[np.repeat(starts, counts) + offs]
        parents = np.repeat(frontier, counts)
        if compress:
            keep = children != tree.state[parents]
            children, parents = children[keep], parents[keep]
        if len(tree) + len(children) - 1 > node_cap:
            raise TreeOverflowError(len(tree) + len(children) - 1, node_cap)
        frontier = tree._append_level(parents, children)
    return tree


# ---------------------------------------------------------------------------
# Behavior signatures


@dataclass(frozen=True)
class SignaturePartition:
    """Partition of tree prefixes into oracle-behavior classes.

    class_of[n] is the class id of tree node n (root gets -1); class_rows
    keeps one representative (states, rows) map per class for witness
    extraction. Classes are numbered by first appearance in node order.
    """

    class_of: np.ndarray  # (len(tree),) int32
    class_members: tuple[np.ndarray, ...]
    class_rows: tuple[tuple[np.ndarray, np.ndarray], ...]
    eps: float

    @property
    def n_classes(self) -> int:
        return len(self.class_members)

    def class_sizes(self) -> list[int]:
        return [len(m) for m in self.class_members]

    def sizes_to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "size"])
            for cid, size in enumerate(self.class_sizes()):
                writer.writerow([cid, size])


def compute_signatures(
    tree: PrefixTree, oracle: HistoryOracle, eps: float = EPS_POLICY
) -> SignaturePartition:
    """Assign each prefix a fingerprint of its defined history-policy rows.

    Two prefixes share a class exactly when their state->row maps agree on
    both domain and (eps-quantized) values; cross-class pairs with a common
    differing state are the Lemma-style negative-example evidence.
    """
    n = len(tree)
    class_of = np.full(n, -1, np.int32)
    handles = np.zeros(n, np.int64)
    handles[0] = oracle.root_handle()
    fp_by_rows_id: dict[int, bytes] = {}
    class_by_fp: dict[bytes, int] = {}
    members: list[list[int]] = []
    rows_of_class: list[tuple[np.ndarray, np.ndarray]] = []
    for node in range(1, n):
        h = oracle.extend(int(handles[tree.parent[node]]), int(tree.state[node]))
        handles[node] = h
        states, rows = oracle.rows(h)
        fp = fp_by_rows_id.get(id(rows))
        if fp is None:
            quant = np.rint(rows / eps).astype(np.int64)
            fp = hashlib.sha1(states.tobytes() + quant.tobytes()).digest()
            fp_by_rows_id[id(rows)] = fp
        cid = class_by_fp.get(fp)
        if cid is None:
            cid = len(members)
            class_by_fp[fp] = cid
            members.append([])
            rows_of_class.append((states, rows))
        class_of[node] = cid
        members[cid].append(node)
    return SignaturePartition(
        class_of=class_of,
        class_members=tuple(np.array(m, np.int32) for m in members),
        class_rows=tuple(rows_of_class),
        eps=eps,
    )


# ---------------------------------------------------------------------------
# Negative examples


@dataclass(frozen=True)
class NegativePair:
    """Two prefixes whose history-policy rows provably differ somewhere."""

    tau: int  # tree node id
    tau_prime: int
    witness_state: int
    witness_action: int


def class_pair_witness(
    partition: SignaturePartition, ci: int, cj: int
) -> tuple[int, int] | None:
    """Smallest commonly defined state (and max-gap action) separating two classes."""
    si, ri = partition.class_rows[ci]
    sj, rj = partition.class_rows[cj]
    common, ii, jj = np.intersect1d(si, sj, return_indices=True)
    if len(common) == 0:
        return None
    gaps = np.abs(ri[ii] - rj[jj])
    per_state = gaps.max(axis=1)
    hits = np.flatnonzero(per_state > partition.eps)
    if len(hits) == 0:
        return None
    k = hits[0]
    return int(common[k]), int(np.argmax(gaps[k]))


def cross_class_pair_count(partition: SignaturePartition) -> int:
    """Exact unordered cross-class pair count, from partition arithmetic."""
    sizes = partition.class_sizes()
    total = sum(sizes)
    return (total * total - sum(s * s for s in sizes)) // 2


def witnessed_pair_count(partition: SignaturePartition) -> int:
    """Cross-class pairs restricted to class pairs that have a witness."""
    sizes = partition.class_sizes()
    count = 0
    for i in range(len(sizes)):
        for j in range(i + 1, len(sizes)):
            if class_pair_witness(partition, i, j) is not None:
                count += sizes[i] * sizes[j]
    return count


def materialize_negatives(
    partition: SignaturePartition,
    tree: PrefixTree,
    mode: str = "all",
    sample_per_group: int | None = None,
    seed: int | None = None,
    max_pairs: int = 20_000_000,
) -> list[NegativePair]:
    """Turn the signature partition into concrete negative-example pairs.

    mode="all" emits every witnessed cross-class pair (guarded by
    max_pairs); mode="per_terminal" groups pairs by their unordered pair of
    terminal MDP states and samples up to sample_per_group uniformly from
    each group with the given seed, never materializing the full set.
    """
    C = partition.n_classes
    witnesses: dict[tuple[int, int], tuple[int, int]] = {}
    for i in range(C):
        for j in range(i + 1, C):
            w = class_pair_witness(partition, i, j)
            if w is not None:
                witnesses[(i, j)] = w

    if mode == "all":
        if witnessed_pair_count(partition) > max_pairs:
            raise MemoryError(
                f"{witnessed_pair_count(partition)} pairs exceed the "
                f"max_pairs={max_pairs} guard; use per_terminal sampling"
            )
        out: list[NegativePair] = []
        for (i, j), (ws, wa) in sorted(witnesses.items()):
            for a in partition.class_members[i]:
                for b in partition.class_members[j]:
                    out.append(NegativePair(int(a), int(b), ws, wa))
        return out

    if mode != "per_terminal":
        raise ValueError(f"unknown mode {mode!r}")
    if sample_per_group is None or sample_per_group < 1:
        raise ValueError("per_terminal mode needs sample_per_group >= 1")
    rng = np.random.default_rng(seed)

    # members of each class bucketed by terminal state
    buckets: dict[tuple[int, int], np.ndarray] = {}
    for cid, mem in enumerate(partition.class_members):
        terms = tree.state[mem]
        for t in np.unique(terms):
            buckets[(cid, int(t))] = mem[terms == t]

    # strata grouped by the unordered terminal pair
    groups: dict[tuple[int, int], list[tuple[int, int, int, int, int]]] = {}
    for (i, j) in sorted(witnesses):
        ti = sorted(t for (c, t) in buckets if c == i)
        tj = sorted(t for (c, t) in buckets if c == j)
        for sa in ti:
            for sb in tj:
                key = (min(sa, sb), max(sa, sb))
                cnt = len(buckets[(i, sa)]) * len(buckets[(j, sb)])
                groups.setdefault(key, []).append((i, j, sa, sb, cnt))

    out = []
    for key in sorted(groups):
        strata = groups[key]
        counts = np.array([s[4] for s in strata], np.int64)
        total = int(counts.sum())
        m = min(sample_per_group, total)
        if total <= 4 * sample_per_group:
            picks = rng.permutation(total)[:m]
        else:
            chosen: set[int] = set()
            while len(chosen) < m:
                need = m - len(chosen)
                chosen.update(int(x) for x in rng.integers(0, total, size=2 * need))
                chosen = set(list(chosen)[:m]) if len(chosen) > m else chosen
            picks = np.array(sorted(chosen), np.int64)
        bounds = np.cumsum(counts)
        for idx in np.sort(picks):
            k = int(np.searchsorted(bounds, idx, side="right"))
            local = int(idx - (bounds[k - 1] if k else 0))
            i, j, sa, sb, _ = strata[k]
            bi = buckets[(i, sa)]
            bj = buckets[(j, sb)]
            a, b = divmod(local, len(bj))
            ws, wa = witnesses[(i, j)]
            out.append(NegativePair(int(bi[a]), int(bj[b]), ws, wa))
    return out


def pairs_to_npz(pairs: list[NegativePair], path) -> None:
    arr = np.array(
        [(p.tau, p.tau_prime, p.witness_state, p.witness_action) for p in pairs],
        np.int32,
    ).reshape(-1, 4)
    np.savez_compressed(path, pairs=arr)


def pairs_from_npz(path) -> list[NegativePair]:
    arr = np.load(path)["pairs"]
    return [NegativePair(int(a), int(b), int(s), int(x)) for a, b, s, x in arr]


def cache_key(fixture_hash: str, depth: int, eps: float) -> str:
    """Stable file-name stem for the (fixture, depth, eps) trace cache."""
    tag = hashlib.sha1(f"{fixture_hash}:{depth}:{eps:.3e}".encode()).hexdigest()[:16]
    return f"traces_{tag}"
