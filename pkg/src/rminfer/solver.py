"""Self-contained CDCL SAT solver used as the default backend.

No external SAT package is assumed. The search kernel is numba-compiled;
set RMINFER_NO_JIT=1 to run the identical code as pure Python (slow, for
debugging). Clauses can be added between solve calls; learned clauses are
kept across calls until the learned region grows past a threshold.

Literal encoding inside the kernel: variable v (1-based) maps to literals
2v (positive) and 2v+1 (negated). The public API uses signed DIMACS-style
integers.
"""

from __future__ import annotations

import os
import time

import numpy as np

if os.environ.get("RMINFER_NO_JIT"):
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
else:
    from numba import njit  # type: ignore

SAT, UNSAT, BUDGET, OVERFLOW = 1, 0, 2, 3

# meta slots
M_NCLAUSES, M_LITLEN, M_NUNITS, M_CONFLICTS, M_DECISIONS, M_PROPS = range(6)


class SolverLimitError(RuntimeError):
    def __init__(self, conflicts: int):
        super().__init__(f"conflict budget exhausted after {conflicts} conflicts")
        self.conflicts = conflicts


@njit(cache=True)
def _bulk_add(meta, lits, cstart, whead, wnext, new_lits, new_lens):
    nc = meta[M_NCLAUSES]
    ll = meta[M_LITLEN]
    pos = 0
    for i in range(len(new_lens)):
        ln = new_lens[i]
        s = ll
        for k in range(ln):
            lits[ll] = new_lits[pos + k]
            ll += 1
        pos += ln
        cstart[nc + 1] = ll
        w0 = 2 * nc
        l0 = lits[s]
        wnext[w0] = whead[l0]
        whead[l0] = w0
        w1 = 2 * nc + 1
        l1 = lits[s + 1]
        wnext[w1] = whead[l1]
        whead[l1] = w1
        nc += 1
    meta[M_NCLAUSES] = nc
    meta[M_LITLEN] = ll


@njit(cache=True)
def _compact_learned(meta, lits, cstart, cperm, whead, wnext):
    """Drop unflagged (learned) clauses and rebuild the watch lists."""
    nc = meta[M_NCLAUSES]
    out_c = 0
    out_l = np.int64(0)
    for c in range(nc):
        if cperm[c]:
            s = cstart[c]
            e = cstart[c + 1]
            for k in range(s, e):
                lits[out_l + (k - s)] = lits[k]
            out_l += e - s
            cstart[out_c + 1] = out_l
            out_c += 1
    for c in range(out_c):
        cperm[c] = 1
    for c in range(out_c, nc):
        cperm[c] = 0
    meta[M_NCLAUSES] = out_c
    meta[M_LITLEN] = out_l
    whead[:] = -1
    for c in range(out_c):
        s = cstart[c]
        w0 = 2 * c
        l0 = lits[s]
        wnext[w0] = whead[l0]
        whead[l0] = w0
        w1 = 2 * c + 1
        l1 = lits[s + 1]
        wnext[w1] = whead[l1]
        whead[l1] = w1


@njit(cache=True)
def _solve_kernel(
    meta,
    lits,
    cstart,
    whead,
    wnext,
    units,
    units_mask,
    assigns,
    level,
    reason,
    trail,
    lev_start,
    phase,
    activity,
    seen,
    learnt_buf,
    decvars,
    assumptions,
    max_conflicts,
):
    nvars = len(assigns) - 1
    assigns[:] = 0
    reason[:] = -1
    trail_len = 0
    qhead = 0
    dl = 0
    n_assum = len(assumptions)
    var_inc = 1.0
    conflicts = 0
    next_restart = 256
    restart_mult = 256

    # level-0 units
    for i in range(meta[M_NUNITS]):
        l = units[i]
        v = l >> 1
        val = 1 if (l & 1) == 0 else -1
        if assigns[v] == -val:
            return UNSAT
        if assigns[v] == 0:
            assigns[v] = val
            level[v] = 0
            trail[trail_len] = l
            trail_len += 1
    lev_start[0] = 0

    while True:
        # ---- propagate -----------------------------------------------------
        confl = -1
        while qhead < trail_len:
            p = trail[qhead]
            qhead += 1
            meta[M_PROPS] += 1
            fl = p ^ 1
            prev = -1
            w = whead[fl]
            while w != -1:
                nw = wnext[w]
                c = w >> 1
                s = cstart[c]
                if lits[s] == fl:
                    lits[s] = lits[s + 1]
                    lits[s + 1] = fl
                first = lits[s]
                fv = first >> 1
                fval = assigns[fv] if (first & 1) == 0 else -assigns[fv]
                if fval == 1:
                    prev = w
                    w = nw
                    continue
                e = cstart[c + 1]
                found = np.int64(-1)
                for k in range(s + 2, e):
                    q = lits[k]
                    qv = q >> 1
                    qval = assigns[qv] if (q & 1) == 0 else -assigns[qv]
                    if qval != -1:
                        found = k
                        break
                if found >= 0:
                    newlit = lits[found]
                    lits[found] = fl
                    lits[s + 1] = newlit
                    if prev == -1:
                        whead[fl] = nw
                    else:
                        wnext[prev] = nw
                    wnext[w] = whead[newlit]
                    whead[newlit] = w
                    w = nw
                    continue
                if fval == -1:
                    confl = c
                    break
                # unit: imply first
                assigns[fv] = 1 if (first & 1) == 0 else -1
                level[fv] = dl
                reason[fv] = c
                trail[trail_len] = first
                trail_len += 1
                prev = w
                w = nw
            if confl >= 0:
                break

        if confl >= 0:
            # ---- conflict --------------------------------------------------
            conflicts += 1
            meta[M_CONFLICTS] += 1
            if dl == 0:
                return UNSAT
            # 1-UIP analysis
            n_learnt = 1  # slot 0 reserved for the asserting literal
            counter = 0
            p = np.int32(-1)
            idx = trail_len - 1
            c = confl
            while True:
                s = cstart[c]
                e = cstart[c + 1]
                for k in range(s, e):
                    q = lits[k]
                    if q == p:
                        continue
                    v = q >> 1
                    if seen[v] == 0 and level[v] > 0:
                        seen[v] = 1
                        activity[v] += var_inc
                        if activity[v] > 1e100:
                            for vv in range(1, nvars + 1):
                                activity[vv] *= 1e-100
                            var_inc *= 1e-100
                        if level[v] == dl:
                            counter += 1
                        else:
                            learnt_buf[n_learnt] = q
                            n_learnt += 1
                while seen[trail[idx] >> 1] == 0:
                    idx -= 1
                p = trail[idx]
                v = p >> 1
                seen[v] = 0
                counter -= 1
                idx -= 1
                if counter == 0:
                    break
                c = reason[v]
            learnt_buf[0] = p ^ 1
            # backjump level = max level in learnt[1:]; move that lit to slot 1
            bj = 0
            pos = -1
            for k in range(1, n_learnt):
                lv = level[learnt_buf[k] >> 1]
                if lv > bj:
                    bj = lv
                    pos = k
            for k in range(1, n_learnt):
                seen[learnt_buf[k] >> 1] = 0
            if pos > 1:
                tmp = learnt_buf[1]
                learnt_buf[1] = learnt_buf[pos]
                learnt_buf[pos] = tmp
            var_inc /= 0.95

            # backtrack to bj
            back_to = lev_start[bj + 1] if bj < dl else trail_len
            for t in range(trail_len - 1, back_to - 1, -1):
                v = trail[t] >> 1
                phase[v] = assigns[v]
                assigns[v] = 0
                reason[v] = -1
            trail_len = back_to
            qhead = trail_len
            dl = bj

            if n_learnt == 1:
                # learned unit: persist it and assert at level 0
                l = learnt_buf[0]
                v = l >> 1
                if units_mask[v] == 0:
                    units_mask[v] = 1
                    units[meta[M_NUNITS]] = l
                    meta[M_NUNITS] += 1
                val = 1 if (l & 1) == 0 else -1
                if assigns[v] == -val:
                    return UNSAT
                if assigns[v] == 0:
                    assigns[v] = val
                    level[v] = 0
                    trail[trail_len] = l
                    trail_len += 1
            else:
                # append learned clause (capacity checked) and assert slot 0
                nc = meta[M_NCLAUSES]
                ll = meta[M_LITLEN]
                if nc + 1 >= len(cstart) - 1 or ll + n_learnt >= len(lits):
                    return OVERFLOW
                for k in range(n_learnt):
                    lits[ll + k] = learnt_buf[k]
                cstart[nc + 1] = ll + n_learnt
                meta[M_NCLAUSES] = nc + 1
                meta[M_LITLEN] = ll + n_learnt
                w0 = 2 * nc
                wnext[w0] = whead[lits[ll]]
                whead[lits[ll]] = w0
                w1 = 2 * nc + 1
                wnext[w1] = whead[lits[ll + 1]]
                whead[lits[ll + 1]] = w1
                l = learnt_buf[0]
                v = l >> 1
                assigns[v] = 1 if (l & 1) == 0 else -1
                level[v] = dl
                reason[v] = nc
                trail[trail_len] = l
                trail_len += 1

            if conflicts >= max_conflicts:
                return BUDGET
            if conflicts >= next_restart and dl > n_assum:
                restart_mult = restart_mult * 3 // 2
                next_restart = conflicts + restart_mult
                back_to = lev_start[n_assum + 1] if n_assum < dl else trail_len
                for t in range(trail_len - 1, back_to - 1, -1):
                    v = trail[t] >> 1
                    phase[v] = assigns[v]
                    assigns[v] = 0
                    reason[v] = -1
                trail_len = back_to
                qhead = back_to
                dl = n_assum
            continue

        # ---- decide --------------------------------------------------------
        if dl < n_assum:
            l = assumptions[dl]
            v = l >> 1
            val = assigns[v] if (l & 1) == 0 else -assigns[v]
            if val == -1:
                return UNSAT
            lev_start[dl + 1] = trail_len
            dl += 1
            if val == 0:
                assigns[v] = 1 if (l & 1) == 0 else -1
                level[v] = dl
                reason[v] = -1
                trail[trail_len] = l
                trail_len += 1
            continue

        best = np.int32(-1)
        best_act = -1.0
        for k in range(len(decvars)):
            v = decvars[k]
            if assigns[v] == 0 and activity[v] > best_act:
                best_act = activity[v]
                best = v
        if best == -1:
            for v in range(1, nvars + 1):
                if assigns[v] == 0:
                    best = v
                    break
        if best == -1:
            return SAT
        meta[M_DECISIONS] += 1
        lev_start[dl + 1] = trail_len
        dl += 1
        v = best
        l = 2 * v if phase[v] >= 0 else 2 * v + 1
        if phase[v] == 0:
            l = 2 * v + 1  # default phase: false
        assigns[v] = 1 if (l & 1) == 0 else -1
        level[v] = dl
        reason[v] = -1
        trail[trail_len] = l
        trail_len += 1


def _to_internal(clause) -> np.ndarray:
    arr = np.asarray(clause, np.int64)
    if np.any(arr == 0):
        raise ValueError("0 is not a valid literal")
    return (2 * np.abs(arr) + (arr < 0)).astype(np.int32)


class SatSolver:
    """Incremental CDCL solver over signed-integer literals.

    Usage: ensure_vars / add_clause / solve / model. Clauses added after a
    solve are picked up by the next call. `decision_vars` optionally
    restricts branching (unit propagation must then pin every other
    variable, which holds for the automaton encodings built here); by
    default every variable is branchable.
    """

    LEARNED_LIMIT = 4_000_000  # literals of learned clauses kept between solves

    def __init__(self):
        self.nvars = 0
        self._meta = np.zeros(8, np.int64)
        self._lits = np.zeros(1024, np.int32)
        self._cstart = np.zeros(1025, np.int64)
        self._cperm = np.zeros(1024, np.uint8)
        self._wnext = np.full(2 * 1024, -1, np.int32)
        self._whead = np.full(4, -1, np.int32)
        self._units = np.zeros(16, np.int32)
        self._units_mask = np.zeros(1, np.uint8)
        self._assigns = np.zeros(1, np.int8)
        self._level = np.zeros(1, np.int32)
        self._reason = np.full(1, -1, np.int32)
        self._trail = np.zeros(1, np.int32)
        self._lev_start = np.zeros(3, np.int32)
        self._phase = np.zeros(1, np.int8)
        self._activity = np.zeros(1, np.float64)
        self._seen = np.zeros(1, np.uint8)
        self._learnt_buf = np.zeros(2, np.int32)
        self._decvars: np.ndarray | None = None
        self._all_vars: np.ndarray | None = None
        self._perm_lit_total = 0
        self._perm_units = 0
        self._model: np.ndarray | None = None
        self._unsat_flag = False
        self.solve_seconds = 0.0
        self.n_solves = 0

    # -- construction ---------------------------------------------------------

    def ensure_vars(self, n: int) -> None:
        if n <= self.nvars:
            return
        self.nvars = n
        size = n + 1
        self._assigns = np.zeros(size, np.int8)
        self._level = np.zeros(size, np.int32)
        self._reason = np.full(size, -1, np.int32)
        self._trail = np.zeros(size + 1, np.int32)
        self._lev_start = np.zeros(size + 2, np.int32)
        grow = np.zeros(size, np.int8)
        grow[: len(self._phase)] = self._phase
        self._phase = grow
        act = np.zeros(size, np.float64)
        act[: len(self._activity)] = self._activity
        self._activity = act
        self._seen = np.zeros(size, np.uint8)
        self._learnt_buf = np.zeros(size + 2, np.int32)
        mask = np.zeros(size, np.uint8)
        mask[: len(self._units_mask)] = self._units_mask
        self._units_mask = mask
        if len(self._units) < size + 1:
            units = np.zeros(size + 1, np.int32)
            units[: self._meta[M_NUNITS]] = self._units[: self._meta[M_NUNITS]]
            self._units = units
        whead = np.full(2 * size + 2, -1, np.int32)
        whead[: len(self._whead)] = self._whead
        self._whead = whead

    def set_decision_vars(self, variables) -> None:
        self._decvars = np.asarray(variables, np.int32)

    @property
    def num_clauses(self) -> int:
        return int(self._cperm[: self._meta[M_NCLAUSES]].sum()) + int(self._meta[M_NUNITS])

    def _grow_db(self, need_lits: int, need_clauses: int) -> None:
        if self._meta[M_LITLEN] + need_lits >= len(self._lits):
            cap = max(2 * len(self._lits), int(self._meta[M_LITLEN]) + need_lits + 1024)
            lits = np.zeros(cap, np.int32)
            lits[: self._meta[M_LITLEN]] = self._lits[: self._meta[M_LITLEN]]
            self._lits = lits
        if self._meta[M_NCLAUSES] + need_clauses >= len(self._cstart) - 1:
            cap = max(2 * (len(self._cstart) - 1), int(self._meta[M_NCLAUSES]) + need_clauses + 1024)
            cstart = np.zeros(cap + 1, np.int64)
            cstart[: self._meta[M_NCLAUSES] + 1] = self._cstart[: self._meta[M_NCLAUSES] + 1]
            self._cstart = cstart
            cperm = np.zeros(cap, np.uint8)
            cperm[: self._meta[M_NCLAUSES]] = self._cperm[: self._meta[M_NCLAUSES]]
            self._cperm = cperm
            wnext = np.full(2 * cap, -1, np.int32)
            wnext[: 2 * self._meta[M_NCLAUSES]] = self._wnext[: 2 * self._meta[M_NCLAUSES]]
            self._wnext = wnext

    def add_clause(self, clause) -> None:
        """Add one clause of signed literals (may be empty, unit, or longer)."""
        ilits = np.unique(_to_internal(clause))
        variables = ilits >> 1
        if len(np.unique(variables)) != len(variables):
            return  # tautology: v and not-v both present
        self.ensure_vars(int(variables.max()) if len(variables) else 0)
        if len(ilits) == 0:
            self._unsat_flag = True
        elif len(ilits) == 1:
            v = int(variables[0])
            if self._units_mask[v]:
                old = self._units[: self._meta[M_NUNITS]]
                if (old == (ilits[0] ^ 1)).any():
                    self._unsat_flag = True
                    return
                if (old == ilits[0]).any():
                    return
            self._units_mask[v] = 1
            self._units[self._meta[M_NUNITS]] = ilits[0]
            self._meta[M_NUNITS] += 1
            self._perm_units = int(self._meta[M_NUNITS])
        else:
            self._grow_db(len(ilits), 1)
            c = int(self._meta[M_NCLAUSES])
            _bulk_add(
                self._meta, self._lits, self._cstart, self._whead, self._wnext,
                ilits, np.array([len(ilits)], np.int64),
            )
            self._cperm[c] = 1
            self._perm_lit_total += len(ilits)

    def add_clauses_flat(self, flat, lens) -> None:
        """Bulk-add clauses (all length >= 2) from a flat signed-lit array."""
        flat = np.asarray(flat, np.int64)
        lens = np.asarray(lens, np.int64)
        if len(lens) == 0:
            return
        if lens.min() < 2:
            raise ValueError("bulk add requires clauses of length >= 2")
        self.ensure_vars(int(np.abs(flat).max()))
        ilits = (2 * np.abs(flat) + (flat < 0)).astype(np.int32)
        self._grow_db(len(ilits), len(lens))
        c = int(self._meta[M_NCLAUSES])
        _bulk_add(self._meta, self._lits, self._cstart, self._whead, self._wnext, ilits, lens)
        self._cperm[c : int(self._meta[M_NCLAUSES])] = 1
        self._perm_lit_total += len(ilits)

    # -- solving ---------------------------------------------------------------

    def solve(self, assumptions=(), max_conflicts: int | None = None) -> bool:
        """Search for a model; True if satisfiable under the assumptions.

        Raises SolverLimitError when the conflict budget runs out.
        """
        if self._unsat_flag:
            return False
        self._model = None
        budget = np.int64(max_conflicts if max_conflicts is not None else 2**62)
        assum_t = tuple(assumptions)
        assum = _to_internal(assum_t) if assum_t else np.empty(0, np.int32)
        if len(assum):
            self.ensure_vars(int((assum >> 1).max()))
        if int(self._meta[M_LITLEN]) - self._perm_lit_total > self.LEARNED_LIMIT:
            _compact_learned(
                self._meta, self._lits, self._cstart, self._cperm, self._whead, self._wnext
            )
        decvars = self._decvars
        if decvars is None:
            if self._all_vars is None or len(self._all_vars) != self.nvars:
                self._all_vars = np.arange(1, self.nvars + 1, dtype=np.int32)
            decvars = self._all_vars
        t0 = time.perf_counter()
        while True:
            status = _solve_kernel(
                self._meta, self._lits, self._cstart, self._whead, self._wnext,
                self._units, self._units_mask,
                self._assigns, self._level, self._reason, self._trail,
                self._lev_start, self._phase, self._activity, self._seen,
                self._learnt_buf, decvars, assum, budget,
            )
            if status != OVERFLOW:
                break
            self._grow_db(max(1_000_000, len(self._lits)), max(100_000, len(self._cstart)))
            _compact_learned(
                self._meta, self._lits, self._cstart, self._cperm, self._whead, self._wnext
            )
        self.solve_seconds += time.perf_counter() - t0
        self.n_solves += 1
        if status == BUDGET:
            raise SolverLimitError(int(self._meta[M_CONFLICTS]))
        if status == SAT:
            self._model = self._assigns > 0
            return True
        return False

    def model(self) -> np.ndarray:
        """Boolean assignment indexed by variable; valid after a SAT solve."""
        if self._model is None:
            raise RuntimeError("no model available; the last solve was not SAT")
        return self._model

    # -- inspection --------------------------------------------------------------

    def iter_clauses(self):
        """Yield permanent clauses (units first) as signed-literal lists."""
        for i in range(self._perm_units):
            l = int(self._units[i])
            yield [(l >> 1) if (l & 1) == 0 else -(l >> 1)]
        for c in range(int(self._meta[M_NCLAUSES])):
            if not self._cperm[c]:
                continue
            s, e = int(self._cstart[c]), int(self._cstart[c + 1])
            out = []
            for k in range(s, e):
                l = int(self._lits[k])
                out.append((l >> 1) if (l & 1) == 0 else -(l >> 1))
            yield out

    @property
    def stats(self) -> dict:
        return {
            "solves": self.n_solves,
            "conflicts": int(self._meta[M_CONFLICTS]),
            "decisions": int(self._meta[M_DECISIONS]),
            "propagations": int(self._meta[M_PROPS]),
            "seconds": self.solve_seconds,
        }
