"""Active trajectory-pair querying to bisect the hypothesis space.

Each depth increment: subsample the surviving hypotheses, let each
proposer search (randomized DFS over its own state x node graph) for
same-endpoint trajectory pairs that it maps to one target node, score
every pooled pair by how evenly the sample splits on collapse versus
separation, query the oracle for the top pairs within budget, and refine
the SAT instance incrementally with the negatives found.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .policy import EPS_POLICY, HistoryOracle
from .satsynth import (
    CnfInstance,
    EncodingParams,
    Hypothesis,
    HypothesisSet,
    TruncatedEnumerationError,
    add_negatives_incremental,
    converged,
    encode,
    enumerate_all,
)
from .traces import (
    NegativePair,
    PrefixTree,
    SignaturePartition,
    compute_signatures,
    enumerate_prefix_tree,
    materialize_negatives,
    witnessed_pair_count,
)

if os.environ.get("RMINFER_NO_JIT"):
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
else:
    from numba import njit  # type: ignore


@dataclass(frozen=True)
class ActiveConfig:
    burn_in_depth: int
    n_active: int = 100
    budget: int = 250
    candidate_cap: int = 10_000
    dfs_node_budget: int = 200_000
    seed: int = 0
    max_depth: int = 20
    enum_cap: int = 10_000
    burn_in_pair_cap: int = 200_000  # above this, burn-in samples per terminal group
    burn_in_sample: int = 5_000
    eps: float = EPS_POLICY

    def __post_init__(self):
        for name in ("burn_in_depth", "n_active", "candidate_cap", "max_depth", "enum_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.budget < 0 or self.dfs_node_budget < 0:
            raise ValueError("budgets cannot be negative")


@dataclass(frozen=True)
class CandidatePair:
    """Equal-length, same-endpoint trajectory pair proposed by one hypothesis."""

    tau: tuple[int, ...]
    tau_prime: tuple[int, ...]
    proposer: int
    target_node: int


@dataclass
class DepthRow:
    depth: int
    raw_count: int
    class_count: int
    pairs_queried: int
    negatives_added: int
    seconds: float


@dataclass
class ActiveReport:
    mode: str
    fixture: str
    seed: int
    rows: list[DepthRow] = field(default_factory=list)
    converged: bool = False
    truncated_final: bool = False
    final_set: HypothesisSet | None = None
    burn_in_prefixes: int = 0
    stored_prefixes: int = 0
    negatives_total: int = 0
    oracle_queries: int = 0
    sat_seconds: float = 0.0
    discovery_seconds: float = 0.0
    instance: CnfInstance | None = None
    tree: PrefixTree | None = None

    @property
    def total_seconds(self) -> float:
        return self.sat_seconds + self.discovery_seconds

    def final_depth(self) -> int:
        return self.rows[-1].depth if self.rows else 0


# ---------------------------------------------------------------------------
# Candidate generation


@njit(cache=True)
def _dfs_collect(
    succ_flat, succ_ptr, starts, delta, lab, u_target, length, node_budget,
    skip_stutter, out, seed,
):
    """Randomized DFS for feasible walks of `length` states reaching u_target.

    Returns the number of rows of `out` filled. Successor order is
    shuffled at every expansion; node_budget bounds expansions;
    skip_stutter drops self-successors (compressed trajectories).
    """
    np.random.seed(seed)
    max_deg = 0
    for s in range(len(succ_ptr) - 1):
        d = succ_ptr[s + 1] - succ_ptr[s]
        if d > max_deg:
            max_deg = d
    if len(starts) > max_deg:
        max_deg = len(starts)
    cand = np.zeros((length + 1, max_deg), np.int32)
    cnt = np.zeros(length + 1, np.int64)
    pos = np.zeros(length + 1, np.int64)
    node_at = np.zeros(length + 1, np.int32)
    path = np.zeros(length, np.int32)

    perm = np.random.permutation(len(starts))
    for i in range(len(starts)):
        cand[0, i] = starts[perm[i]]
    cnt[0] = len(starts)
    pos[0] = 0
    node_at[0] = 1
    collected = 0
    expansions = 0
    lvl = 0
    while lvl >= 0:
        if pos[lvl] >= cnt[lvl]:
            lvl -= 1
            continue
        if expansions >= node_budget or collected >= out.shape[0]:
            break
        s = cand[lvl, pos[lvl]]
        pos[lvl] += 1
        expansions += 1
        u = delta[node_at[lvl], lab[s]]
        path[lvl] = s
        if lvl + 1 == length:
            if u == u_target:
                for k in range(length):
                    out[collected, k] = path[k]
                collected += 1
            continue
        lvl += 1
        node_at[lvl] = u
        lo = succ_ptr[s]
        deg = succ_ptr[s + 1] - lo
        perm = np.random.permutation(deg)
        n = 0
        for k in range(deg):
            nxt = succ_flat[lo + perm[k]]
            if skip_stutter and nxt == s:
                continue
            cand[lvl, n] = nxt
            n += 1
        cnt[lvl] = n
        pos[lvl] = 0
    return collected


@njit(cache=True)
def _run_nodes_kernel(trajs, deltas, labs, out):
    H = deltas.shape[0]
    T = trajs.shape[0]
    L = trajs.shape[1]
    for h in range(H):
        for t in range(T):
            u = 1
            for k in range(L):
                u = deltas[h, u, labs[h, trajs[t, k]]]
            out[h, t] = u


def _succ_csr(mdp):
    table = mdp.successor_table()
    cnt = np.array([len(x) for x in table], np.int64)
    flat = np.concatenate(table) if len(table) > 1 else np.empty(0, np.int32)
    ptr = np.zeros(len(table) + 1, np.int64)
    np.cumsum(cnt, out=ptr[1:])
    return flat.astype(np.int32), ptr


def generate_candidates(
    h: Hypothesis,
    mdp,
    l: int,
    rng: np.random.Generator,
    u_target: int | None = None,
    dfs_node_budget: int = 200_000,
    max_collect: int = 512,
    skip_stutter: bool = False,
    proposer: int = 0,
    pairs_limit: int | None = None,
) -> list[CandidatePair]:
    """Same-endpoint trajectory pairs of length l+1 that h maps to one node.

    One target node is sampled per call; the proposer's product graph
    (MDP state x hypothesis node) is explored by randomized DFS and the
    collected walks are paired within their terminal-state buckets. With
    pairs_limit set, bucket pairs are sampled randomly rather than
    enumerated, which keeps a shared pool diverse across proposers.
    """
    length = l + 1
    if u_target is None:
        u_target = int(rng.integers(1, h.n_nodes + 1))
    flat, ptr = _succ_csr(mdp)
    out = np.zeros((max_collect, length), np.int32)
    n = _dfs_collect(
        flat, ptr, mdp.initial_states(), h.delta_u, h.labeling,
        np.int32(u_target), np.int64(length), np.int64(dfs_node_budget),
        skip_stutter, out, np.uint32(rng.integers(0, 2**32)),
    )
    walks = np.unique(out[:n], axis=0) if n else out[:0]
    pairs: list[CandidatePair] = []
    if len(walks) < 2:
        return pairs
    last = walks[:, -1]
    buckets = [walks[last == endpoint] for endpoint in np.unique(last)]
    buckets = [b for b in buckets if len(b) >= 2]
    if not buckets:
        return pairs
    if pairs_limit is None:
        for bucket in buckets:
            for a in range(len(bucket)):
                for b in range(a + 1, len(bucket)):
                    pairs.append(
                        CandidatePair(
                            tuple(int(x) for x in bucket[a]),
                            tuple(int(x) for x in bucket[b]),
                            proposer,
                            int(u_target),
                        )
                    )
        return pairs
    seen: set[tuple] = set()
    attempts = 0
    while len(pairs) < pairs_limit and attempts < 10 * pairs_limit:
        attempts += 1
        bucket = buckets[int(rng.integers(0, len(buckets)))]
        a, b = rng.choice(len(bucket), size=2, replace=False)
        ta = tuple(int(x) for x in bucket[a])
        tb = tuple(int(x) for x in bucket[b])
        key = (ta, tb) if ta <= tb else (tb, ta)
        if key in seen:
            continue
        seen.add(key)
        pairs.append(CandidatePair(ta, tb, proposer, int(u_target)))
    return pairs


def subsample(hset: HypothesisSet, n: int, rng: np.random.Generator) -> list[Hypothesis]:
    """n hypotheses drawn uniformly without replacement (all if fewer)."""
    if len(hset) == 0:
        raise ValueError("cannot subsample an empty hypothesis set")
    if len(hset) <= n:
        return list(hset.hypotheses)
    idx = rng.choice(len(hset), size=n, replace=False)
    return [hset.hypotheses[int(i)] for i in np.sort(idx)]


def quality(pair: CandidatePair, sample: list[Hypothesis]) -> int:
    """min(collapse votes, separation votes) over the sampled hypotheses."""
    if not sample:
        raise ValueError("quality needs a nonempty sample")
    coll = 0
    for h in sample:
        u1 = 1
        for s in pair.tau:
            u1 = h.delta_u[u1, h.labeling[s]]
        u2 = 1
        for s in pair.tau_prime:
            u2 = h.delta_u[u2, h.labeling[s]]
        if u1 == u2:
            coll += 1
    return min(coll, len(sample) - coll)


def _batch_quality(pairs: list[CandidatePair], sample: list[Hypothesis]) -> np.ndarray:
    """Vectorized quality over a shared pool (all pairs same length)."""
    trajs: list[tuple[int, ...]] = []
    index: dict[tuple[int, ...], int] = {}
    ia = np.empty(len(pairs), np.int64)
    ib = np.empty(len(pairs), np.int64)
    for k, pair in enumerate(pairs):
        for which, t in ((0, pair.tau), (1, pair.tau_prime)):
            i = index.get(t)
            if i is None:
                i = len(trajs)
                index[t] = i
                trajs.append(t)
            (ia if which == 0 else ib)[k] = i
    tmat = np.array(trajs, np.int32)
    deltas = np.stack([h.delta_u for h in sample]).astype(np.int32)
    labs = np.stack([h.labeling for h in sample]).astype(np.int32)
    nodes = np.zeros((len(sample), len(trajs)), np.int32)
    _run_nodes_kernel(tmat, deltas, labs, nodes)
    coll = (nodes[:, ia] == nodes[:, ib]).sum(axis=0)
    return np.minimum(coll, len(sample) - coll)


def query_batch(
    pairs: list[CandidatePair],
    oracle: HistoryOracle,
    budget: int,
    tree: PrefixTree,
    eps: float = EPS_POLICY,
) -> list[NegativePair]:
    """Query the top-budget pairs; emit negatives with concrete witnesses.

    Rows are compared at every commonly defined state (the shared endpoint
    is always among them); pairs whose rows agree everywhere are dropped.
    Witnessing trajectories are inserted into the tree.
    """
    out: list[NegativePair] = []
    for pair in pairs[:budget]:
        ha = oracle.walk(pair.tau)
        hb = oracle.walk(pair.tau_prime)
        sa, ra = oracle.rows(ha)
        sb, rb = oracle.rows(hb)
        common, iia, iib = np.intersect1d(sa, sb, return_indices=True)
        if len(common) == 0:
            continue
        gaps = np.abs(ra[iia] - rb[iib])
        per_state = gaps.max(axis=1)
        hits = np.flatnonzero(per_state > eps)
        if len(hits) == 0:
            continue
        k = hits[0]
        a = tree.add_path(pair.tau)
        b = tree.add_path(pair.tau_prime)
        out.append(NegativePair(a, b, int(common[k]), int(np.argmax(gaps[k]))))
    return out


# ---------------------------------------------------------------------------
# Random-baseline pair sampling


@njit(cache=True)
def _random_walks(succ_flat, succ_ptr, starts, length, count, skip_stutter, seed, out):
    np.random.seed(seed)
    made = 0
    attempts = 0
    while made < count and attempts < 50 * count:
        attempts += 1
        s = starts[np.random.randint(0, len(starts))]
        out[made, 0] = s
        ok = True
        for k in range(1, length):
            lo = succ_ptr[s]
            deg = succ_ptr[s + 1] - lo
            if skip_stutter:
                pick = -1
                for _ in range(8):
                    cand = succ_flat[lo + np.random.randint(0, deg)]
                    if cand != s:
                        pick = cand
                        break
                if pick < 0:
                    ok = False
                    break
                s = pick
            else:
                s = succ_flat[lo + np.random.randint(0, deg)]
            out[made, k] = s
        if ok:
            made += 1
    return made


def sample_random_pairs(
    mdp,
    l: int,
    count: int,
    rng: np.random.Generator,
    skip_stutter: bool = False,
    oversample: int = 8,
) -> list[CandidatePair]:
    """Uniformly sampled feasible same-endpoint pairs of length l+1."""
    length = l + 1
    flat, ptr = _succ_csr(mdp)
    out = np.zeros((oversample * count, length), np.int32)
    n = _random_walks(
        flat, ptr, mdp.initial_states(), np.int64(length),
        np.int64(oversample * count), skip_stutter,
        np.uint32(rng.integers(0, 2**32)), out,
    )
    walks = np.unique(out[:n], axis=0)
    pairs: list[CandidatePair] = []
    if len(walks) < 2:
        return pairs
    last = walks[:, -1]
    order = rng.permutation(len(walks))
    byend: dict[int, list[int]] = {}
    for i in order:
        byend.setdefault(int(last[i]), []).append(int(i))
    for endpoint, idxs in sorted(byend.items()):
        for a, b in zip(idxs[::2], idxs[1::2]):
            if len(pairs) >= count:
                break
            pairs.append(
                CandidatePair(
                    tuple(int(x) for x in walks[a]),
                    tuple(int(x) for x in walks[b]),
                    -1,
                    0,
                )
            )
    return pairs


# ---------------------------------------------------------------------------
# Drivers


def exhaustive_stage(
    fixture,
    depth: int,
    oracle: HistoryOracle,
    enum_cap: int,
    pair_cap: int = 200_000,
    pair_sample: int = 5_000,
    eps: float = EPS_POLICY,
    non_stuttering: bool | None = None,
    u_max: int | None = None,
    n_ap: int | None = None,
    node_cap: int | None = None,
):
    """Exhaustive evidence at one depth: tree, partition, pairs, instance, set.

    Negative pairs are fully materialized when the witnessed count fits in
    pair_cap, otherwise sampled per terminal-state group with the
    fixture-level seed (kept trial-independent on purpose).
    """
    from .traces import DEFAULT_NODE_CAP

    non_stut = fixture.stutter_invariant if non_stuttering is None else non_stuttering
    u_max = fixture.u_max if u_max is None else u_max
    n_ap = fixture.n_ap if n_ap is None else n_ap
    t0 = time.perf_counter()
    tree = enumerate_prefix_tree(
        fixture.mdp, depth, compress=non_stut,
        node_cap=node_cap if node_cap is not None else DEFAULT_NODE_CAP,
    )
    partition = compute_signatures(tree, oracle, eps)
    if witnessed_pair_count(partition) <= pair_cap:
        pairs = materialize_negatives(partition, tree, mode="all")
    else:
        pairs = materialize_negatives(
            partition, tree, mode="per_terminal",
            sample_per_group=pair_sample, seed=fixture.burn_in_seed,
        )
    discovery = time.perf_counter() - t0
    t1 = time.perf_counter()
    params = EncodingParams(u_max=u_max, n_ap=n_ap, non_stuttering=non_stut)
    inst = encode(pairs, tree, params, fixture.mdp.n_states)
    hset = enumerate_all(inst, enum_cap)
    sat = time.perf_counter() - t1
    return tree, partition, pairs, inst, hset, discovery, sat


def _safe_converged(hset: HypothesisSet) -> tuple[bool, bool]:
    """(converged, certifiable); truncated sets are never converged."""
    try:
        return converged(hset), True
    except TruncatedEnumerationError:
        return False, False


def _active_loop(cfg: ActiveConfig, fixture, oracle, mode: str) -> ActiveReport:
    report = ActiveReport(mode=mode, fixture=fixture.name, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    tree, partition, pairs, inst, hset, disc, sat = exhaustive_stage(
        fixture, cfg.burn_in_depth, oracle, cfg.enum_cap,
        pair_cap=cfg.burn_in_pair_cap, pair_sample=cfg.burn_in_sample, eps=cfg.eps,
    )
    report.discovery_seconds += disc
    report.sat_seconds += sat
    report.burn_in_prefixes = tree.n_prefixes
    report.negatives_total = len(pairs)
    report.rows.append(
        DepthRow(cfg.burn_in_depth, len(hset), hset.n_canonical(), 0, len(pairs),
                 time.perf_counter() - t0)
    )
    skip_stutter = fixture.stutter_invariant

    l = cfg.burn_in_depth
    while l < cfg.max_depth:
        is_conv, _ = _safe_converged(hset)
        if is_conv or len(hset) == 0:
            break
        t_depth = time.perf_counter()
        t_disc = time.perf_counter()
        if mode == "active":
            sample = subsample(hset, cfg.n_active, rng)
            quota = max(1, cfg.candidate_cap // len(sample))
            pool: dict[tuple, CandidatePair] = {}
            for pi, h in enumerate(sample):
                if len(pool) >= cfg.candidate_cap:
                    break
                for cand in generate_candidates(
                    h, fixture.mdp, l, rng,
                    dfs_node_budget=cfg.dfs_node_budget,
                    skip_stutter=skip_stutter, proposer=pi,
                    pairs_limit=quota,
                ):
                    key = (cand.tau, cand.tau_prime) if cand.tau <= cand.tau_prime else (cand.tau_prime, cand.tau)
                    if key not in pool:
                        pool[key] = cand
                    if len(pool) >= cfg.candidate_cap:
                        break
            cands = list(pool.values())
            if cands:
                q = _batch_quality(cands, sample)
                shuffle = rng.permutation(len(cands))
                order = shuffle[np.argsort(-q[shuffle], kind="stable")]
                cands = [cands[int(i)] for i in order]
        else:
            sample = []
            cands = sample_random_pairs(
                fixture.mdp, l, cfg.budget, rng, skip_stutter=skip_stutter
            )
        selected = cands[: cfg.budget]
        negs = query_batch(selected, oracle, cfg.budget, tree, cfg.eps)
        report.discovery_seconds += time.perf_counter() - t_disc
        t_sat = time.perf_counter()
        add_negatives_incremental(inst, negs, tree)
        hset = enumerate_all(inst, cfg.enum_cap)
        report.sat_seconds += time.perf_counter() - t_sat
        report.negatives_total += len(negs)
        l += 1
        report.rows.append(
            DepthRow(l, len(hset), hset.n_canonical(), len(selected), len(negs),
                     time.perf_counter() - t_depth)
        )

    is_conv, certifiable = _safe_converged(hset)
    report.converged = is_conv
    report.truncated_final = not certifiable
    report.final_set = hset
    report.stored_prefixes = tree.n_prefixes
    report.oracle_queries = oracle.query_count
    report.instance = inst
    report.tree = tree
    return report


def run_active(cfg: ActiveConfig, fixture, oracle: HistoryOracle | None = None) -> ActiveReport:
    """Burn-in exhaustively, then query/refine until one class or max depth."""
    return _active_loop(cfg, fixture, oracle or fixture.make_oracle(), "active")


def run_random_baseline(cfg: ActiveConfig, fixture, oracle: HistoryOracle | None = None) -> ActiveReport:
    """As run_active but querying uniformly sampled same-endpoint pairs."""
    return _active_loop(cfg, fixture, oracle or fixture.make_oracle(), "random_baseline")


def exhaustive_prefix_count(mdp, depth: int, compress: bool) -> int:
    """Walk-count of feasible prefixes up to depth, by DP (no materialization)."""
    S = mdp.n_states
    adj = np.zeros((S + 1, S + 1), np.float64)
    for s in range(1, S + 1):
        for t in mdp.successors(s):
            if compress and int(t) == s:
                continue
            adj[s, t] = 1.0
    v = (mdp.mu0 > 0).astype(np.float64)
    total = 0
    for _ in range(depth):
        total += int(v[1:].sum())
        v = v @ adj
    return total
