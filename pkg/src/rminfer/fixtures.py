"""Bundled task fixtures: parsed configs plus cached derived objects."""

from __future__ import annotations

import hashlib
from importlib import resources

from .env import (
    GridConfig,
    LabeledRewardMachine,
    MachineSpec,
    MdpModel,
    build_grid_mdp,
    build_ground_truth_rm,
    build_product,
    parse_fixture_text,
)
from .policy import HistoryOracle, ProductPolicy, soft_value_iteration

FIXTURE_NAMES = ("line3", "pick_n_drop", "patrolABCD", "patrol_tetris")


class Fixture:
    """A grid config + ground-truth machine with lazily built policy objects."""

    def __init__(self, name: str, text: str):
        self.name = name
        self.text = text
        grid, spec, opts = parse_fixture_text(text)
        self.grid: GridConfig = grid
        self.machine_spec: MachineSpec = spec
        self.stutter_invariant: bool = opts["stutter_invariant"]
        self.mdp: MdpModel = build_grid_mdp(grid)
        self.machine: LabeledRewardMachine = build_ground_truth_rm(spec, grid.labeling())
        self._product = None
        self._policy = None

    @property
    def u_max(self) -> int:
        return self.machine.n_nodes

    @property
    def n_ap(self) -> int:
        return self.machine.n_props

    @property
    def fixture_hash(self) -> str:
        return hashlib.sha1(self.text.encode()).hexdigest()

    @property
    def burn_in_seed(self) -> int:
        """Fixture-level seed for burn-in pair sampling (trial-independent)."""
        return int.from_bytes(hashlib.sha1(self.text.encode()).digest()[:4], "big")

    def product(self):
        if self._product is None:
            self._product = build_product(self.mdp, self.machine)
        return self._product

    def policy(self) -> ProductPolicy:
        if self._policy is None:
            self._policy = soft_value_iteration(self.product(), self.grid.lam)
        return self._policy

    def make_oracle(self) -> HistoryOracle:
        """A fresh oracle (query counters start at zero)."""
        return HistoryOracle(self.policy(), self.machine)


def get_fixture(name: str) -> Fixture:
    if name not in FIXTURE_NAMES:
        raise KeyError(f"unknown fixture {name!r}; available: {', '.join(FIXTURE_NAMES)}")
    text = resources.files("rminfer.fixture_data").joinpath(f"{name}.cfg").read_text()
    return Fixture(name, text)


def load_fixture_file(path) -> Fixture:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return Fixture(str(path), text)
