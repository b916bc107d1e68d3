"""Entropy-regularized optimal product policies and the history-policy oracle."""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .env import LabeledRewardMachine, ProductMdp

EPS_POLICY = 1e-6


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iters: int):
        super().__init__(
            f"soft value iteration did not converge within {iters} sweeps "
            f"(residual {residual:.3e})"
        )
        self.residual = residual


@dataclass(frozen=True)
class ProductPolicy:
    """Softmax-optimal policy over the accessible (state, node) pairs."""

    product: ProductMdp
    dist: np.ndarray  # (K, A) float64, rows sum to 1
    lam: float
    residual: float
    residual_history: tuple[float, ...] = field(repr=False, default=())

    def row(self, s: int, u: int) -> np.ndarray | None:
        """Action distribution at (s, u), or None if the pair is inaccessible."""
        q = self.product.pair_index[s, u]
        if q < 0:
            return None
        return self.dist[q]

    def dump_csv(self, path) -> None:
        """Debug dump: one line per (state, node, action, probability)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state", "node", "action", "probability"])
            for q, (s, u) in enumerate(self.product.pairs):
                for a in range(self.dist.shape[1]):
                    writer.writerow([int(s), int(u), a, repr(float(self.dist[q, a]))])


def soft_value_iteration(
    prod: ProductMdp,
    lam: float,
    tol: float = 1e-10,
    max_iters: int = 100_000,
) -> ProductPolicy:
    """Solve the entropy-regularized control problem on the product MDP.

    Iterates V <- lam * log sum_a exp(Q(., a) / lam) with
    Q(q, a) = sum_succ prob * (reward + gamma * V[succ]) until the sup-norm
    residual drops below tol, then returns the softmax policy of Q / lam.
    """
    if lam <= 0:
        raise ValueError("the entropy weight must be positive")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    K = prod.n_pairs
    A = prod.base.n_actions
    gamma = prod.base.gamma
    V = np.zeros(K, np.float64)
    ptr = prod.succ_ptr
    history: list[float] = []
    for _ in range(max_iters):
        contrib = prod.succ_prob * (prod.succ_rew + gamma * V[prod.succ_pair])
        Q = np.add.reduceat(contrib, ptr[:-1]).reshape(K, A)
        Q[np.diff(ptr).reshape(K, A) == 0] = -np.inf
        V_new = lam * logsumexp(Q / lam, axis=1)
        residual = float(np.max(np.abs(V_new - V)))
        history.append(residual)
        V = V_new
        if residual < tol:
            return ProductPolicy(
                product=prod,
                dist=softmax(Q / lam, axis=1),
                lam=lam,
                residual=residual,
                residual_history=tuple(history),
            )
    raise ConvergenceError(history[-1], max_iters)


def rows_differ(p: np.ndarray, q: np.ndarray, eps: float = EPS_POLICY) -> bool:
    """Sup-norm distinguishability test used for negative-example evidence."""
    p = np.asarray(p, np.float64)
    q = np.asarray(q, np.float64)
    if p.shape != q.shape:
        raise ValueError(f"row length mismatch: {p.shape} vs {q.shape}")
    return bool(np.max(np.abs(p - q)) > eps)


class HistoryOracle:
    """Query interface to the history policy induced by a hidden machine.

    Callers see only action distributions conditioned on raw state
    trajectories; the ground-truth machine and the product structure stay
    private. Trajectory handles are opaque ints that let tree walkers
    extend prefixes in O(1) instead of replaying from scratch.
    """

    def __init__(self, policy: ProductPolicy, truth: LabeledRewardMachine):
        self._policy = policy
        self._truth = truth
        self._product = policy.product
        # handle -> hidden machine node; handle 0 is the empty prefix.
        self._handle_nodes: list[int] = [1]
        self._children: dict[tuple[int, int], int] = {}
        self._rows_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._lock = threading.Lock()
        self._query_count = 0

    @property
    def query_count(self) -> int:
        return self._query_count

    def _bump(self, n: int = 1) -> None:
        with self._lock:
            self._query_count += n

    def _node_of(self, tau) -> int:
        u = 1
        delta, lab = self._truth.delta_u, self._truth.labeling
        for s in tau:
            if not (1 <= s <= self._truth.n_states):
                raise ValueError(f"state {s} out of range")
            u = delta[u, lab[s]]
        return int(u)

    def query(self, tau, s: int) -> np.ndarray | None:
        """History-policy row at state s after trajectory tau, or None.

        None means the (s, node-after-tau) pair is outside the accessible
        product domain; undefined rows never count as evidence.
        """
        self._bump()
        row = self._policy.row(s, self._node_of(tau))
        return None if row is None else row.copy()

    # -- handle API ---------------------------------------------------------

    def root_handle(self) -> int:
        """Handle of the empty trajectory."""
        return 0

    def extend(self, handle: int, next_state: int) -> int:
        """Handle of the trajectory `handle` extended by one state."""
        key = (handle, int(next_state))
        child = self._children.get(key)
        if child is None:
            u = self._handle_nodes[handle]
            u2 = int(self._truth.delta_u[u, self._truth.labeling[next_state]])
            child = len(self._handle_nodes)
            self._handle_nodes.append(u2)
            self._children[key] = child
        return child

    def walk(self, tau) -> int:
        h = 0
        for s in tau:
            h = self.extend(h, s)
        return h

    def rows(self, handle: int) -> tuple[np.ndarray, np.ndarray]:
        """All defined history-policy rows after the handle's trajectory.

        Returns (states, rows): the sorted states where the row is defined
        and the matching action distributions. Arrays are shared; do not
        mutate.
        """
        u = self._handle_nodes[handle]
        cached = self._rows_cache.get(u)
        if cached is None:
            idx = self._product.pair_index[:, u]
            states = np.flatnonzero(idx >= 0).astype(np.int32)
            rows = self._policy.dist[idx[states]]
            rows.setflags(write=False)
            states.setflags(write=False)
            cached = (states, rows)
            self._rows_cache[u] = cached
        self._bump(len(cached[0]))
        return cached

    def row_at(self, handle: int, s: int) -> np.ndarray | None:
        self._bump()
        row = self._policy.row(s, self._handle_nodes[handle])
        return None if row is None else row.copy()


def oracle_query(oracle: HistoryOracle, tau, s: int) -> np.ndarray | None:
    """Module-level alias for HistoryOracle.query."""
    return oracle.query(tau, s)
