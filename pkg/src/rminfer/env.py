"""Grid-world MDP models, labeled reward machines, and their products.

Indexing conventions: MDP states, machine nodes, and propositions are
1-based (arrays are padded so index 0 is unused); actions are 0-based.
The first state's proposition is always proposition 1 and the initial
machine node is always node 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-9

# (drow, dcol) per action, and the two lateral deviations of each.
_CARDINAL = {
    "north": (-1, 0),
    "east": (0, 1),
    "south": (1, 0),
    "west": (0, -1),
}
_LATERAL = {
    "north": ("east", "west"),
    "south": ("east", "west"),
    "east": ("north", "south"),
    "west": ("north", "south"),
}
ACTION_SETS = {
    "nesw": ("north", "east", "south", "west"),
    "ew": ("east", "west"),
}


class ConfigError(ValueError):
    """Raised on malformed fixture config text; message cites the line number."""


@dataclass(frozen=True)
class MdpModel:
    """Finite MDP without a reward function.

    kernel[s, a, s'] is the transition probability, rows 0 are padding.
    """

    n_states: int
    n_actions: int
    kernel: np.ndarray  # (S+1, A, S+1) float64
    mu0: np.ndarray  # (S+1,) float64
    gamma: float
    action_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")
        if self.kernel.shape != (self.n_states + 1, self.n_actions, self.n_states + 1):
            raise ValueError("kernel shape does not match state/action counts")
        if np.any(self.kernel < 0):
            raise ValueError("kernel has negative entries")
        rows = self.kernel[1:].reshape(-1, self.n_states + 1).sum(axis=1)
        if np.any(np.abs(rows - 1.0) > PROB_TOL):
            raise ValueError("kernel rows must each sum to 1")
        if np.any(self.mu0 < 0) or abs(self.mu0.sum() - 1.0) > PROB_TOL:
            raise ValueError("mu0 must be a probability vector")
        if self.mu0[0] != 0.0:
            raise ValueError("mu0[0] is padding and must be 0")

    @property
    def states(self) -> range:
        return range(1, self.n_states + 1)

    def successors(self, s: int) -> np.ndarray:
        """States reachable from s with positive probability under any action."""
        mass = self.kernel[s].max(axis=0)
        return np.flatnonzero(mass > 0.0).astype(np.int32)

    def successor_table(self) -> list[np.ndarray]:
        """successor_table()[s] = successors(s); entry 0 is a dummy."""
        return [np.empty(0, np.int32)] + [self.successors(s) for s in self.states]

    def initial_states(self) -> np.ndarray:
        return np.flatnonzero(self.mu0 > 0.0).astype(np.int32)


@dataclass(frozen=True)
class LabeledRewardMachine:
    """Reward machine transition structure plus a state labeling function.

    delta_u[u, p] is the next node, labeling[s] the proposition of state s,
    delta_r[u, p] the reward emitted on consuming p at node u (None for a
    machine model without an output function). Row/column 0 are padding.
    """

    n_nodes: int
    n_props: int
    delta_u: np.ndarray  # (U+1, P+1) int32
    labeling: np.ndarray  # (S+1,) int32
    delta_r: np.ndarray | None = None  # (U+1, P+1) float64
    initial_node: int = 1

    def __post_init__(self):
        if self.initial_node != 1:
            raise ValueError("initial node is fixed to 1")
        if self.delta_u.shape != (self.n_nodes + 1, self.n_props + 1):
            raise ValueError("delta_u shape mismatch")
        core = self.delta_u[1:, 1:]
        if np.any(core < 1) or np.any(core > self.n_nodes):
            raise ValueError("delta_u must be total on nodes x props")
        lab = self.labeling[1:]
        if np.any(lab < 1) or np.any(lab > self.n_props):
            raise ValueError("labeling must be total on states")
        if self.labeling[1] != 1:
            raise ValueError("anchoring violated: labeling(1) must be 1")
        if self.delta_r is not None and self.delta_r.shape != self.delta_u.shape:
            raise ValueError("delta_r shape mismatch")

    @property
    def nodes(self) -> range:
        return range(1, self.n_nodes + 1)

    @property
    def n_states(self) -> int:
        return len(self.labeling) - 1

    def without_rewards(self) -> "LabeledRewardMachine":
        return LabeledRewardMachine(
            self.n_nodes, self.n_props, self.delta_u, self.labeling, None
        )


def rm_run(machine, tau) -> int:
    """Node reached from the initial node after consuming the labels of tau.

    Accepts anything exposing 1-based delta_u/labeling arrays (ground-truth
    machines, decoded hypotheses, synchronized machines).
    """
    delta, lab = machine.delta_u, machine.labeling
    u = 1
    for s in tau:
        u = delta[u, lab[s]]
    return int(u)


def rm_run_nodes(machine, tau) -> list[int]:
    """Node after each prefix of tau, starting with the initial node."""
    delta, lab = machine.delta_u, machine.labeling
    u = 1
    out = [1]
    for s in tau:
        u = int(delta[u, lab[s]])
        out.append(u)
    return out


@dataclass(frozen=True)
class ProductMdp:
    """Product of an MDP model with a labeled reward machine.

    `pairs` lists the accessible (state, node) pairs in BFS discovery
    order; `pair_index[s, u]` maps back to the row in `pairs` (-1 if the
    pair is not accessible). Transition/reward data is stored in CSR form
    over (pair, action) rows for the policy solver.
    """

    base: MdpModel
    machine: LabeledRewardMachine
    pairs: np.ndarray  # (K, 2) int32
    pair_index: np.ndarray  # (S+1, U+1) int32
    succ_ptr: np.ndarray  # (K*A+1,) int64
    succ_pair: np.ndarray  # (E,) int32
    succ_prob: np.ndarray  # (E,) float64
    succ_rew: np.ndarray  # (E,) float64

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def is_accessible(self, s: int, u: int) -> bool:
        return self.pair_index[s, u] >= 0

    def check_kernel_consistency(self, tol: float = PROB_TOL) -> None:
        """Every (pair, action) row of the product kernel must sum to 1."""
        sums = np.add.reduceat(self.succ_prob, self.succ_ptr[:-1])
        sums[np.diff(self.succ_ptr) == 0] = 1.0
        if np.any(np.abs(sums - 1.0) > tol):
            raise AssertionError("product kernel rows do not sum to 1")


def build_product(mdp: MdpModel, rm: LabeledRewardMachine) -> ProductMdp:
    """Build the accessible product of an MDP model and a labeled RM.

    Accessibility is BFS from {(s0, delta_u(1, L(s0))) : mu0(s0) > 0}; the
    machine consumes the label of every state it enters, including s0.
    Rewards come from the machine's output function, which must be present.
    """
    if rm.delta_r is None:
        raise ValueError("ground-truth machine must carry an output function")
    if rm.n_states != mdp.n_states:
        raise ValueError("labeling domain does not match the MDP state set")
    S, A, U = mdp.n_states, mdp.n_actions, rm.n_nodes
    pair_index = np.full((S + 1, U + 1), -1, np.int32)
    pairs: list[tuple[int, int]] = []
    queue: list[tuple[int, int]] = []
    for s0 in mdp.initial_states():
        u0 = int(rm.delta_u[1, rm.labeling[s0]])
        if pair_index[s0, u0] < 0:
            pair_index[s0, u0] = len(pairs)
            pairs.append((int(s0), u0))
            queue.append((int(s0), u0))
    head = 0
    while head < len(queue):
        s, u = queue[head]
        head += 1
        for s2 in mdp.successors(s):
            u2 = int(rm.delta_u[u, rm.labeling[s2]])
            if pair_index[s2, u2] < 0:
                pair_index[s2, u2] = len(pairs)
                pairs.append((int(s2), u2))
                queue.append((int(s2), u2))

    pair_arr = np.array(pairs, np.int32).reshape(-1, 2)
    K = len(pairs)
    ptr = np.zeros(K * A + 1, np.int64)
    succ_pair: list[int] = []
    succ_prob: list[float] = []
    succ_rew: list[float] = []
    for q, (s, u) in enumerate(pairs):
        for a in range(A):
            row = mdp.kernel[s, a]
            for s2 in np.flatnonzero(row > 0.0):
                p2 = rm.labeling[s2]
                u2 = int(rm.delta_u[u, p2])
                succ_pair.append(int(pair_index[s2, u2]))
                succ_prob.append(float(row[s2]))
                succ_rew.append(float(rm.delta_r[u, p2]))
            ptr[q * A + a + 1] = len(succ_pair)
    return ProductMdp(
        base=mdp,
        machine=rm,
        pairs=pair_arr,
        pair_index=pair_index,
        succ_ptr=ptr,
        succ_pair=np.array(succ_pair, np.int32),
        succ_prob=np.array(succ_prob, np.float64),
        succ_rew=np.array(succ_rew, np.float64),
    )


# ---------------------------------------------------------------------------
# Grid worlds


@dataclass(frozen=True)
class GridConfig:
    """Declarative grid world: one layout character per cell = proposition."""

    layout: tuple[str, ...]
    slip_prob: float = 0.1
    gamma: float = 0.95
    lam: float = 0.1
    initial_cells: tuple[tuple[int, int], ...] = ()  # 1-based (row, col)
    actions: str = "nesw"

    def __post_init__(self):
        if not self.layout or any(len(r) != len(self.layout[0]) for r in self.layout):
            raise ValueError("layout must be a nonempty rectangular grid")
        if not (0.0 <= self.slip_prob < 1.0):
            raise ValueError("slip probability must lie in [0, 1)")
        if self.actions not in ACTION_SETS:
            raise ValueError(f"unknown action set {self.actions!r}")

    @property
    def n_rows(self) -> int:
        return len(self.layout)

    @property
    def n_cols(self) -> int:
        return len(self.layout[0])

    def cell_state(self, row: int, col: int) -> int:
        """1-based state id of the 1-based (row, col) cell, row-major."""
        return (row - 1) * self.n_cols + col

    def prop_chars(self) -> list[str]:
        """Distinct layout characters in row-major first-appearance order."""
        seen: list[str] = []
        for row in self.layout:
            for ch in row:
                if ch not in seen:
                    seen.append(ch)
        return seen

    def labeling(self) -> np.ndarray:
        order = {ch: i + 1 for i, ch in enumerate(self.prop_chars())}
        lab = np.zeros(self.n_rows * self.n_cols + 1, np.int32)
        for r, row in enumerate(self.layout):
            for c, ch in enumerate(row):
                lab[r * self.n_cols + c + 1] = order[ch]
        return lab

    def resolved_initial_states(self) -> list[int]:
        """Initial cells as state ids; defaults to the unlabeled ('.') cells."""
        if self.initial_cells:
            return [self.cell_state(r, c) for r, c in self.initial_cells]
        states = [
            self.cell_state(r + 1, c + 1)
            for r, row in enumerate(self.layout)
            for c, ch in enumerate(row)
            if ch == "."
        ]
        return states


def build_grid_mdp(config: GridConfig) -> MdpModel:
    """Stochastic grid world: slip deviates laterally, walls clamp in place.

    The intended direction is taken with probability 1 - slip; each of the
    two perpendicular neighbors receives slip/2. Any move leaving the grid
    keeps the agent in place, folding that mass into staying put.
    """
    rows, cols = config.n_rows, config.n_cols
    S = rows * cols
    names = ACTION_SETS[config.actions]
    A = len(names)
    kernel = np.zeros((S + 1, A, S + 1), np.float64)

    def target(r: int, c: int, direction: str) -> int:
        dr, dc = _CARDINAL[direction]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < rows and 0 <= c2 < cols:
            return r2 * cols + c2 + 1
        return r * cols + c + 1

    for r in range(rows):
        for c in range(cols):
            s = r * cols + c + 1
            for a, name in enumerate(names):
                kernel[s, a, target(r, c, name)] += 1.0 - config.slip_prob
                for side in _LATERAL[name]:
                    kernel[s, a, target(r, c, side)] += config.slip_prob / 2.0

    init = config.resolved_initial_states()
    if not init:
        raise ValueError("no initial cells: layout has no '.' cell and none were listed")
    if any(not (1 <= s <= S) for s in init):
        raise ValueError("initial cell outside the layout")
    mu0 = np.zeros(S + 1, np.float64)
    mu0[np.array(init)] = 1.0 / len(init)
    return MdpModel(S, A, kernel, mu0, config.gamma, names)


@dataclass(frozen=True)
class MachineSpec:
    """Edge-list description of a ground-truth machine: u --p/r--> v lines."""

    edges: tuple[tuple[int, int, float, int], ...]  # (node, prop, reward, next)
    n_nodes: int
    n_props: int


def build_ground_truth_rm(spec: MachineSpec, labeling: np.ndarray) -> LabeledRewardMachine:
    """Assemble and validate a ground-truth machine from an edge list."""
    U, P = spec.n_nodes, spec.n_props
    delta_u = np.zeros((U + 1, P + 1), np.int32)
    delta_r = np.zeros((U + 1, P + 1), np.float64)
    seen = np.zeros((U + 1, P + 1), bool)
    for u, p, r, v in spec.edges:
        if seen[u, p]:
            raise ValueError(f"duplicate transition for node {u}, proposition {p}")
        seen[u, p] = True
        delta_u[u, p] = v
        delta_r[u, p] = r
    if not seen[1:, 1:].all():
        missing = np.argwhere(~seen[1:, 1:])[0] + 1
        raise ValueError(
            f"partial transition function: node {missing[0]}, proposition {missing[1]} undefined"
        )
    return LabeledRewardMachine(U, P, delta_u, labeling, delta_r)


# ---------------------------------------------------------------------------
# Fixture config parsing

_GRID_KEYS = {"slip", "gamma", "lambda", "actions", "initial", "stutter_invariant"}


def _fail(lineno: int, msg: str) -> None:
    raise ConfigError(f"line {lineno}: {msg}")


def parse_fixture_text(text: str):
    """Parse a fixture config into (GridConfig, MachineSpec, options dict).

    Grammar: a `layout:` ... `end` block of grid rows, key=value lines
    (slip, gamma, lambda, actions, initial, stutter_invariant), and a
    `machine:` ... `end` block of `u --p/r--> v` edges where p is a layout
    character. Errors cite 1-based line numbers.
    """
    layout: list[str] = []
    machine_lines: list[tuple[int, str]] = []
    kv: dict[str, tuple[int, str]] = {}
    mode = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if mode is None and (not line or line.startswith("#")):
            continue
        if mode is None:
            if line == "layout:":
                mode = "layout"
            elif line == "machine:":
                mode = "machine"
            elif "=" in line:
                key, _, val = line.partition("=")
                key = key.strip()
                if key not in _GRID_KEYS:
                    _fail(lineno, f"unknown key {key!r}")
                if key in kv:
                    _fail(lineno, f"duplicate key {key!r}")
                kv[key] = (lineno, val.strip())
            else:
                _fail(lineno, f"expected a block header or key=value, got {line!r}")
        elif line == "end":
            mode = None
        elif mode == "layout":
            if layout and len(line) != len(layout[0]):
                _fail(lineno, "layout rows must all have the same width")
            if not line:
                _fail(lineno, "empty layout row")
            layout.append(line)
        else:
            machine_lines.append((lineno, line))
    if mode is not None:
        _fail(len(text.splitlines()), f"unterminated {mode!r} block (missing 'end')")
    if not layout:
        raise ConfigError("config has no layout block")

    def floatval(key, default):
        if key not in kv:
            return default
        lineno, val = kv[key]
        try:
            return float(val)
        except ValueError:
            _fail(lineno, f"{key} must be a number, got {val!r}")

    initial: tuple[tuple[int, int], ...] = ()
    if "initial" in kv:
        lineno, val = kv["initial"]
        if val == "unlabeled":
            initial = ()
        elif val == "all":
            initial = tuple(
                (r + 1, c + 1) for r in range(len(layout)) for c in range(len(layout[0]))
            )
        else:
            cells = []
            for token in val.split():
                try:
                    r, c = (int(x) for x in token.split(","))
                except ValueError:
                    _fail(lineno, f"bad initial cell {token!r} (want row,col)")
                if not (1 <= r <= len(layout) and 1 <= c <= len(layout[0])):
                    _fail(lineno, f"initial cell {token} outside the layout")
                cells.append((r, c))
            if not cells:
                _fail(lineno, "initial list is empty")
            initial = tuple(cells)

    stutter = True
    if "stutter_invariant" in kv:
        lineno, val = kv["stutter_invariant"]
        if val not in ("true", "false"):
            _fail(lineno, "stutter_invariant must be true or false")
        stutter = val == "true"

    try:
        grid = GridConfig(
            layout=tuple(layout),
            slip_prob=floatval("slip", 0.1),
            gamma=floatval("gamma", 0.95),
            lam=floatval("lambda", 0.1),
            initial_cells=initial,
            actions=kv.get("actions", (0, "nesw"))[1],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    prop_of = {ch: i + 1 for i, ch in enumerate(grid.prop_chars())}
    edges = []
    max_node = 0
    for lineno, line in machine_lines:
        head, arrow, tail = line.partition("-->")
        if not arrow:
            _fail(lineno, f"expected 'u --p/r--> v', got {line!r}")
        left = head.strip()
        if "--" not in left:
            _fail(lineno, f"expected 'u --p/r--> v', got {line!r}")
        node_s, _, label_s = left.partition("--")
        label_s = label_s.strip()
        if "/" not in label_s:
            _fail(lineno, f"transition label must be 'prop/reward', got {label_s!r}")
        prop_s, _, rew_s = label_s.partition("/")
        prop_s = prop_s.strip()
        if prop_s not in prop_of:
            _fail(lineno, f"proposition {prop_s!r} does not appear in the layout")
        try:
            u = int(node_s)
            v = int(tail)
            r = float(rew_s)
        except ValueError:
            _fail(lineno, f"could not parse edge {line!r}")
        if u < 1 or v < 1:
            _fail(lineno, "node ids are 1-based")
        edges.append((u, prop_of[prop_s], r, v))
        max_node = max(max_node, u, v)
    if not edges:
        raise ConfigError("config has no machine block")
    spec = MachineSpec(tuple(edges), max_node, len(prop_of))
    return grid, spec, {"stutter_invariant": stutter}


def parse_fixture_file(path) -> tuple[GridConfig, MachineSpec, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_fixture_text(fh.read())
