"""CNF compilation of trajectory evidence and AllSAT hypothesis enumeration.

Variables encode an automaton transition function over at most u_max nodes
and a labeling of states by at most n_ap propositions. Reach variables,
one row per prefix-tree node actually used by evidence, track the node the
automaton occupies after consuming a prefix; inequality clauses between
the reach rows of two prefixes express that their behaviors must separate.
"""

from __future__ import annotations

import itertools
import os
import time
from dataclasses import dataclass

import numpy as np

from .solver import SatSolver, SolverLimitError
from .traces import NegativePair, PrefixTree

if os.environ.get("RMINFER_NO_JIT"):
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
else:
    from numba import njit  # type: ignore

_EDGE_CHUNK = 4096


class EncoderError(RuntimeError):
    """An exactly-one row was violated in a model: encoder bug."""


class TruncatedEnumerationError(RuntimeError):
    """Convergence cannot be certified on a truncated hypothesis set."""


def conflict_limit_from_env() -> int | None:
    """Solver resource limit (conflicts), from RMINFER_CONFLICT_LIMIT."""
    raw = os.environ.get("RMINFER_CONFLICT_LIMIT")
    return int(raw) if raw else None


@dataclass(frozen=True)
class EncodingParams:
    u_max: int
    n_ap: int
    non_stuttering: bool = False

    def __post_init__(self):
        if self.u_max < 1:
            raise ValueError("node budget must be at least 1")
        if self.n_ap < 1:
            raise ValueError("proposition budget must be at least 1")


class Hypothesis:
    """A decoded (transition function, labeling) pair; hashable by content."""

    __slots__ = ("delta_u", "labeling", "_key")

    def __init__(self, delta_u: np.ndarray, labeling: np.ndarray):
        self.delta_u = np.ascontiguousarray(delta_u, np.int32)
        self.labeling = np.ascontiguousarray(labeling, np.int32)
        self.delta_u.setflags(write=False)
        self.labeling.setflags(write=False)
        self._key = self.delta_u[1:, 1:].tobytes() + self.labeling[1:].tobytes()

    @property
    def n_nodes(self) -> int:
        return self.delta_u.shape[0] - 1

    @property
    def n_props(self) -> int:
        return self.delta_u.shape[1] - 1

    @property
    def key(self) -> bytes:
        return self._key

    def __eq__(self, other) -> bool:
        return isinstance(other, Hypothesis) and self._key == other._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return (
            f"Hypothesis(delta_u={self.delta_u[1:, 1:].tolist()}, "
            f"labeling={self.labeling[1:].tolist()})"
        )


def hypothesis_from_machine(machine) -> Hypothesis:
    """View a ground-truth machine as a hypothesis (drops the rewards)."""
    return Hypothesis(machine.delta_u, machine.labeling)


class CnfInstance:
    """A CNF encoding plus its live solver and enumeration cache.

    Reach rows are shared across pairs through the prefix tree: each used
    tree node owns one exactly-one row of u_max reach variables.
    """

    def __init__(self, tree: PrefixTree, params: EncodingParams, n_states: int):
        if params.n_ap > n_states:
            raise ValueError("proposition budget cannot exceed the state count")
        self.tree = tree
        self.params = params
        self.n_states = n_states
        u, p = params.u_max, params.n_ap
        self._trans0 = 0  # trans vars occupy 1 .. u*p*u
        self._lab0 = u * p * u  # lab vars occupy lab0+1 .. lab0 + n_ap*S
        self.n_decision = self._lab0 + p * n_states
        self._next_var = self.n_decision + 1
        self.solver = SatSolver()
        self.solver.ensure_vars(self.n_decision)
        self.solver.set_decision_vars(np.arange(1, self.n_decision + 1, dtype=np.int32))
        self.reach_base: dict[int, int] = {}
        self.enc_nodes: list[int] = []
        self._enc_pos: dict[int, int] = {}
        self.enc_parent_pos: list[int] = []
        self.enc_state: list[int] = []
        self.pairs: list[NegativePair] = []
        self.model_cache: list[Hypothesis] = []
        self.exhausted = False
        self.encode_seconds = 0.0
        # clause template over (i, p, j), used to stamp propagation clauses
        grid = np.mgrid[1 : u + 1, 1 : p + 1, 1 : u + 1].reshape(3, -1)
        self._tpl_i, self._tpl_p, self._tpl_j = (g.astype(np.int64) for g in grid)
        self._tpl_tv = self._trans_vec(self._tpl_i, self._tpl_p, self._tpl_j)
        self._bootstrap()

    # -- variable registry ---------------------------------------------------

    def trans_var(self, i: int, p: int, j: int) -> int:
        return ((i - 1) * self.params.n_ap + (p - 1)) * self.params.u_max + j

    def _trans_vec(self, i, p, j):
        return ((i - 1) * self.params.n_ap + (p - 1)) * self.params.u_max + j

    def lab_var(self, p: int, k: int) -> int:
        return self._lab0 + (k - 1) * self.params.n_ap + p

    def reach_var(self, node: int, i: int) -> int:
        return self.reach_base[node] + i - 1

    @property
    def n_vars(self) -> int:
        return self._next_var - 1

    def var_name(self, v: int) -> str:
        u, p = self.params.u_max, self.params.n_ap
        if v <= self._lab0:
            rest, j = divmod(v - 1, u)
            i, q = divmod(rest, p)
            return f"trans({i + 1},{q + 1},{j + 1})"
        if v <= self.n_decision:
            k, q = divmod(v - self._lab0 - 1, p)
            return f"lab({q + 1},{k + 1})"
        for node, base in self.reach_base.items():
            if base <= v < base + u:
                return f"reach(node{node},{v - base + 1})"
        return f"aux({v})"

    # -- encoding --------------------------------------------------------------

    def _exactly_one(self, variables: list[int]) -> None:
        self.solver.add_clause(variables)
        for a in range(len(variables)):
            for b in range(a + 1, len(variables)):
                self.solver.add_clause([-variables[a], -variables[b]])

    def _bootstrap(self) -> None:
        u, p, S = self.params.u_max, self.params.n_ap, self.n_states
        t0 = time.perf_counter()
        for i in range(1, u + 1):
            for q in range(1, p + 1):
                self._exactly_one([self.trans_var(i, q, j) for j in range(1, u + 1)])
        for k in range(1, S + 1):
            self._exactly_one([self.lab_var(q, k) for q in range(1, p + 1)])
        self.solver.add_clause([self.lab_var(1, 1)])
        if self.params.non_stuttering:
            for i in range(1, u + 1):
                for q in range(1, p + 1):
                    for j in range(1, u + 1):
                        if i != j:
                            self.solver.add_clause(
                                [-self.trans_var(i, q, j), self.trans_var(j, q, j)]
                            )
        self._add_reach_rows([0])
        self.solver.add_clause([self.reach_var(0, 1)])
        self.encode_seconds += time.perf_counter() - t0

    def _add_reach_rows(self, nodes: list[int]) -> None:
        """Allocate reach rows and emit exactly-one + propagation clauses.

        `nodes` must be sorted ascending with every non-root parent already
        encoded (tree ids are topological, so ascending order suffices).
        """
        u, p = self.params.u_max, self.params.n_ap
        for n in nodes:
            self.reach_base[n] = self._next_var
            self._enc_pos[n] = len(self.enc_nodes)
            self.enc_nodes.append(n)
            if n:
                self.enc_parent_pos.append(self._enc_pos[int(self.tree.parent[n])])
                self.enc_state.append(int(self.tree.state[n]))
            else:
                self.enc_parent_pos.append(0)
                self.enc_state.append(0)
            self._next_var += u
        self.solver.ensure_vars(self._next_var - 1)

        # exactly-one over each new reach row
        bases = np.array([self.reach_base[n] for n in nodes], np.int64)
        alo = bases[:, None] + np.arange(u)[None, :]
        flat = [alo.reshape(-1)]
        lens = [np.full(len(nodes), u, np.int64)]
        if u > 1:
            ai, bi = np.triu_indices(u, k=1)
            amo = np.empty((len(nodes), len(ai), 2), np.int64)
            amo[:, :, 0] = -(bases[:, None] + ai[None, :])
            amo[:, :, 1] = -(bases[:, None] + bi[None, :])
            flat.append(amo.reshape(-1))
            lens.append(np.full(len(nodes) * len(ai), 2, np.int64))
        self.solver.add_clauses_flat(np.concatenate(flat), np.concatenate(lens))

        # propagation clauses for the tree edge into each new non-root node
        edge_nodes = [n for n in nodes if n]
        for lo in range(0, len(edge_nodes), _EDGE_CHUNK):
            chunk = edge_nodes[lo : lo + _EDGE_CHUNK]
            rb_child = np.array([self.reach_base[n] for n in chunk], np.int64)
            rb_parent = np.array(
                [self.reach_base[int(self.tree.parent[n])] for n in chunk], np.int64
            )
            st = self.tree.state[np.array(chunk)].astype(np.int64)
            m = len(self._tpl_i)
            rows = np.empty((len(chunk), m, 4), np.int64)
            rows[:, :, 0] = -(rb_parent[:, None] + (self._tpl_i[None, :] - 1))
            rows[:, :, 1] = -(self._lab0 + (st[:, None] - 1) * p + self._tpl_p[None, :])
            rows[:, :, 2] = -self._tpl_tv[None, :]
            rows[:, :, 3] = rb_child[:, None] + (self._tpl_j[None, :] - 1)
            self.solver.add_clauses_flat(
                rows.reshape(-1), np.full(len(chunk) * m, 4, np.int64)
            )

    def ensure_prefix_encoded(self, leaf: int) -> None:
        if not (0 <= leaf < len(self.tree)):
            raise KeyError(f"pair references prefix {leaf} missing from the tree")
        missing = []
        n = leaf
        while n not in self.reach_base:
            missing.append(n)
            n = int(self.tree.parent[n])
        if missing:
            self._add_reach_rows(sorted(missing))

    def add_pairs(self, pairs: list[NegativePair]) -> None:
        t0 = time.perf_counter()
        for pair in pairs:
            self.ensure_prefix_encoded(pair.tau)
            self.ensure_prefix_encoded(pair.tau_prime)
        u = self.params.u_max
        flat = []
        for pair in pairs:
            a, b = pair.tau, pair.tau_prime
            if a == b:
                for i in range(1, u + 1):
                    self.solver.add_clause([-self.reach_var(a, i)])
                continue
            ra, rb = self.reach_base[a], self.reach_base[b]
            row = np.empty((u, 2), np.int64)
            row[:, 0] = -(ra + np.arange(u))
            row[:, 1] = -(rb + np.arange(u))
            flat.append(row.reshape(-1))
        if flat:
            allrows = np.concatenate(flat)
            self.solver.add_clauses_flat(allrows, np.full(len(allrows) // 2, 2, np.int64))
        self.pairs.extend(pairs)
        self.encode_seconds += time.perf_counter() - t0

    # -- evaluation -------------------------------------------------------------

    def assignment_from_hypothesis(self, h: Hypothesis) -> np.ndarray:
        """Full variable assignment induced by a hypothesis (reach included)."""
        u, p = self.params.u_max, self.params.n_ap
        if h.n_nodes != u or h.n_props != p:
            raise ValueError("hypothesis shape does not match the encoding budgets")
        assign = np.zeros(self.n_vars + 1, bool)
        for i in range(1, u + 1):
            for q in range(1, p + 1):
                assign[self.trans_var(i, q, int(h.delta_u[i, q]))] = True
        for k in range(1, self.n_states + 1):
            assign[self.lab_var(int(h.labeling[k]), k)] = True
        reach = {0: 1}
        for n in self.enc_nodes:
            if n:
                parent = int(self.tree.parent[n])
                reach[n] = int(h.delta_u[reach[parent], h.labeling[self.tree.state[n]]])
            assign[self.reach_var(n, reach[n])] = True
        return assign

    def evaluate_assignment(self, assign: np.ndarray) -> bool:
        """Check every permanent clause under a full assignment (slow path)."""
        for clause in self.solver.iter_clauses():
            if not any(assign[l] if l > 0 else not assign[-l] for l in clause):
                return False
        return True

    def satisfied_by(self, h: Hypothesis) -> bool:
        """Fast semantic check that a hypothesis satisfies this instance.

        Function/anchoring rows hold for any well-formed hypothesis and the
        reach rows follow from running it, so only the non-stuttering
        closure and the pair inequalities need checking.
        """
        if h.labeling[1] != 1:
            return False
        if self.params.non_stuttering:
            j = h.delta_u[1:, 1:]  # next node per (i, p)
            ps = np.arange(1, h.n_props + 1)
            if not np.array_equal(h.delta_u[j, ps[None, :]], j):
                return False
        if not self.pairs:
            return True
        reach = _reach_matrix(self, [h])[0]
        for pair in self.pairs:
            if reach[self._enc_pos[pair.tau]] == reach[self._enc_pos[pair.tau_prime]]:
                return False
        return True

    # -- export -------------------------------------------------------------------

    def to_dimacs(self, path, map_path=None) -> None:
        clauses = list(self.solver.iter_clauses())
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"p cnf {self.n_vars} {len(clauses)}\n")
            for cl in clauses:
                fh.write(" ".join(str(l) for l in cl) + " 0\n")
        if map_path is not None:
            with open(map_path, "w", encoding="utf-8") as fh:
                for v in range(1, self.n_vars + 1):
                    fh.write(f"{v} {self.var_name(v)}\n")


@njit(cache=True)
def _reach_kernel(deltas, labs, parent_pos, states, out):
    H = deltas.shape[0]
    M = len(parent_pos)
    for h in range(H):
        out[h, 0] = 1
        for m in range(1, M):
            out[h, m] = deltas[h, out[h, parent_pos[m]], labs[h, states[m]]]


def _reach_matrix(inst: CnfInstance, hyps) -> np.ndarray:
    """Node reached at every encoded tree node, per hypothesis: (H, M)."""
    H = len(hyps)
    deltas = np.stack([h.delta_u for h in hyps]).astype(np.int32)
    labs = np.stack([h.labeling for h in hyps]).astype(np.int32)
    out = np.zeros((H, len(inst.enc_nodes)), np.int32)
    _reach_kernel(
        deltas,
        labs,
        np.array(inst.enc_parent_pos, np.int64),
        np.array(inst.enc_state, np.int64),
        out,
    )
    return out


def encode(
    pairs: list[NegativePair],
    tree: PrefixTree,
    params: EncodingParams,
    n_states: int,
) -> CnfInstance:
    """Compile negative examples into a fresh CNF instance."""
    inst = CnfInstance(tree, params, n_states)
    inst.add_pairs(pairs)
    return inst


def add_negatives_incremental(
    inst: CnfInstance, pairs: list[NegativePair], tree: PrefixTree
) -> CnfInstance:
    """Extend an instance in place with new evidence, evicting dead models.

    Only reach rows for unseen prefixes and the new inequality clauses are
    added; solver state (including learned clauses) is preserved. Cached
    models violating the new pairs are dropped by direct re-checking.
    """
    if tree is not inst.tree:
        raise ValueError("incremental evidence must reference the instance's tree")
    old = len(inst.pairs)
    inst.add_pairs(pairs)
    fresh = inst.pairs[old:]
    if fresh and inst.model_cache:
        reach = _reach_matrix(inst, inst.model_cache)
        keep = []
        for row, h in zip(reach, inst.model_cache):
            if all(
                row[inst._enc_pos[p.tau]] != row[inst._enc_pos[p.tau_prime]]
                for p in fresh
            ):
                keep.append(h)
        inst.model_cache = keep
    return inst


def decode_model(model: np.ndarray, inst: CnfInstance) -> Hypothesis:
    """Read the (delta_u, labeling) pair out of a satisfying assignment."""
    u, p, S = inst.params.u_max, inst.params.n_ap, inst.n_states
    tvals = model[1 : inst._lab0 + 1].reshape(u, p, u)
    if np.any(tvals.sum(axis=2) != 1):
        raise EncoderError("a transition row violates exactly-one")
    lvals = model[inst._lab0 + 1 : inst.n_decision + 1].reshape(S, p)
    if np.any(lvals.sum(axis=1) != 1):
        raise EncoderError("a labeling column violates exactly-one")
    delta = np.zeros((u + 1, p + 1), np.int32)
    delta[1:, 1:] = tvals.argmax(axis=2) + 1
    labeling = np.zeros(S + 1, np.int32)
    labeling[1:] = lvals.argmax(axis=1) + 1
    return Hypothesis(delta, labeling)


def _blocking_clause(inst: CnfInstance, model: np.ndarray) -> list[int]:
    dec = np.flatnonzero(model[1 : inst.n_decision + 1]) + 1
    return [-int(v) for v in dec]


def solve_one(inst: CnfInstance, max_conflicts: int | None = None) -> Hypothesis | None:
    """One satisfying hypothesis, or None when the instance is unsatisfiable."""
    if max_conflicts is None:
        max_conflicts = conflict_limit_from_env()
    if not inst.solver.solve(max_conflicts=max_conflicts):
        return None
    return decode_model(inst.solver.model(), inst)


@dataclass(frozen=True)
class HypothesisSet:
    """Enumerated models plus whether the enumeration was cut off at cap."""

    hypotheses: tuple[Hypothesis, ...]
    truncated: bool

    def __len__(self) -> int:
        return len(self.hypotheses)

    def canonical_classes(self, reachable_only: bool = False) -> dict[bytes, list[Hypothesis]]:
        classes: dict[bytes, list[Hypothesis]] = {}
        for h in self.hypotheses:
            classes.setdefault(canonical_key(h, reachable_only), []).append(h)
        return classes

    def n_canonical(self, reachable_only: bool = False) -> int:
        return len(self.canonical_classes(reachable_only))

    def contains(self, h: Hypothesis, up_to_renaming: bool = True) -> bool:
        if not up_to_renaming:
            return any(h == g for g in self.hypotheses)
        key = canonical_key(h)
        return any(canonical_key(g) == key for g in self.hypotheses)


def enumerate_all(
    inst: CnfInstance, cap: int, max_conflicts: int | None = None
) -> HypothesisSet:
    """All models of the current instance, up to cap, as hypotheses.

    Enumeration proceeds by blocking the decision-variable assignment of
    each model found. Models found by earlier calls stay cached on the
    instance (already filtered against any evidence added since), so
    re-enumeration only searches for genuinely new models.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    if max_conflicts is None:
        max_conflicts = conflict_limit_from_env()
    while len(inst.model_cache) < cap and not inst.exhausted:
        if not inst.solver.solve(max_conflicts=max_conflicts):
            inst.exhausted = True
            break
        model = inst.solver.model()
        inst.model_cache.append(decode_model(model, inst))
        inst.solver.add_clause(_blocking_clause(inst, model))
    truncated = False
    if len(inst.model_cache) >= cap and not inst.exhausted:
        if inst.solver.solve(max_conflicts=max_conflicts):
            truncated = True  # more models exist beyond the cap (left unblocked)
        else:
            inst.exhausted = True
    return HypothesisSet(tuple(inst.model_cache[:cap]), truncated)


def converged(hset: HypothesisSet) -> bool:
    """True when the set has collapsed to a single model up to renaming."""
    if hset.truncated:
        raise TruncatedEnumerationError(
            "enumeration was truncated at cap; convergence cannot be certified"
        )
    return hset.n_canonical() == 1


def sufficient_depth(n_states: int, u_max: int) -> int:
    """Depth beyond which longer trajectories add no constraints."""
    if n_states < 1 or u_max < 1:
        raise ValueError("counts must be positive")
    return n_states * u_max * u_max


# ---------------------------------------------------------------------------
# Canonicalization up to renaming


def _masked_for_behavior(h: Hypothesis) -> tuple[np.ndarray, np.ndarray]:
    """Zero out transition rows of unreachable nodes and columns of unused props."""
    delta = h.delta_u.copy()
    lab = h.labeling
    reachable = {1}
    frontier = [1]
    while frontier:
        i = frontier.pop()
        for q in range(1, h.n_props + 1):
            j = int(delta[i, q])
            if j not in reachable:
                reachable.add(j)
                frontier.append(j)
    for i in range(1, h.n_nodes + 1):
        if i not in reachable:
            delta[i, 1:] = 0
    used = set(int(x) for x in lab[1:])
    for q in range(1, h.n_props + 1):
        if q not in used:
            delta[1:, q] = 0
    return delta, lab


def _images(h: Hypothesis, reachable_only: bool):
    U, P = h.n_nodes, h.n_props
    delta, lab = (_masked_for_behavior(h) if reachable_only else (h.delta_u, h.labeling))
    for rho_t in itertools.permutations(range(2, U + 1)):
        rho = np.array((0, 1) + rho_t, np.int32)
        rho_delta = np.zeros_like(delta)
        rho_delta[1:, 1:] = rho[delta[1:, 1:]]
        for sig_t in itertools.permutations(range(2, P + 1)):
            sig = np.array((0, 1) + sig_t, np.int32)
            nd = np.zeros_like(delta)
            nd[np.ix_(rho[1:], sig[1:])] = rho_delta[1:, 1:]
            nl = sig[lab]
            yield nd, nl


def _image_key(delta: np.ndarray, lab: np.ndarray) -> bytes:
    return (
        delta[1:, 1:].astype(np.uint8).tobytes() + lab[1:].astype(np.uint8).tobytes()
    )


def canonicalize(h: Hypothesis, reachable_only: bool = False) -> Hypothesis:
    """Lexicographically smallest renaming of h (nodes and labels, 1 fixed)."""
    best = min(_images(h, reachable_only), key=lambda im: _image_key(*im))
    return Hypothesis(best[0], best[1])


def canonical_key(h: Hypothesis, reachable_only: bool = False) -> bytes:
    return min(_image_key(nd, nl) for nd, nl in _images(h, reachable_only))


def orbit_size(h: Hypothesis) -> int:
    """Distinct images of h under the anchored renaming group."""
    return len({_image_key(nd, nl) for nd, nl in _images(h, False)})


def renaming_image(h: Hypothesis, rho, sig) -> Hypothesis:
    """Apply explicit node/label permutations (1-based arrays fixing 1)."""
    rho = np.asarray(rho, np.int32)
    sig = np.asarray(sig, np.int32)
    nd = np.zeros_like(h.delta_u)
    nd[np.ix_(rho[1:], sig[1:])] = rho[h.delta_u[1:, 1:]]
    return Hypothesis(nd, sig[h.labeling])
