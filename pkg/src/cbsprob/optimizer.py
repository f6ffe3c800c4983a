"""Max-min quality budget allocation across reserved tasks.

Each task's quality is affine in its deadline-miss probability,
``quality = intercept - slope * (1 - p_meet)``.  :func:`optimize` finds the
highest common quality level ``L`` (on a 1e-3 grid) such that the budgets
needed to reach ``max(L, floor_i)`` on every task fit in the bandwidth
``B_total``.
"""

from __future__ import annotations

import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from cbsprob.distributions import PMF, resample
from cbsprob.qbdp import DivergentReservationError, ReservationParams, build_chain
from cbsprob.solvers import Method, deadline_probability, solve

QUALITY_GRID = 1e-3
MAX_BISECTIONS = 40
DEFAULT_DELTA = {Method.ANALYTIC: "Q/2", Method.COMPANION: "50",
                 Method.MATRIX_GEOMETRIC: "50"}
_PROB_SLACK = 1e-12


@dataclass(frozen=True)
class QualityModel:
    intercept: float
    slope: float = 0.0

    def __post_init__(self):
        if self.slope < 0:
            raise ValueError("quality slope must be nonnegative")

    def quality(self, p_meet: float) -> float:
        return self.intercept - self.slope * (1.0 - p_meet)

    def required_probability(self, level: float) -> float:
        """Smallest ``p_meet`` whose quality reaches ``level`` (``inf`` if unreachable)."""
        if level <= self.intercept - self.slope:
            return 0.0
        if level > self.intercept:
            return math.inf
        return min(1.0, max(0.0, 1.0 - (self.intercept - level) / self.slope))


@dataclass(frozen=True, eq=False)
class TaskSpec:
    name: str
    period: int
    server_period: int
    pmf: PMF
    quality: QualityModel = field(default_factory=lambda: QualityModel(0.0, 0.0))
    quality_floor: float = -math.inf
    deadline: int | None = None
    delta: str | None = None

    def __post_init__(self):
        if self.period % self.server_period:
            raise ValueError(f"{self.name}: server_period must divide period")
        d = self.effective_deadline
        if d % self.server_period or d < self.period:
            raise ValueError(f"{self.name}: deadline must be a multiple of server_period "
                             "and at least the period")

    @property
    def effective_deadline(self) -> int:
        return self.period if self.deadline is None else self.deadline


def resolve_delta(policy: str | int, budget: int) -> int:
    """Resampling step for ``budget``: the largest divisor of it not above the target.

    ``policy`` is ``"Q/k"`` (target ``budget / k``) or a step in µs.
    """
    policy = str(policy).strip()
    match = re.fullmatch(r"Q\s*/\s*(\d+)", policy, flags=re.IGNORECASE)
    if match:
        target = budget / int(match.group(1))
    elif policy.upper() == "Q":
        target = budget
    else:
        target = int(policy)
    if target < 1:
        return 1
    if budget % int(target) == 0 and int(target) == target:
        return int(target)
    for d in range(int(target), 0, -1):
        if budget % d == 0:
            return d
    return 1


@dataclass(frozen=True)
class TaskEvaluation:
    budget: int
    delta: int
    p_meet: float
    quality: float


def evaluate_task(task: TaskSpec, budget: int, solver: Method | str,
                  delta: str | int | None = None) -> TaskEvaluation:
    """Deadline probability and quality of ``task`` at ``budget`` µs per server period."""
    method = Method(solver)
    policy = delta if delta is not None else (task.delta or DEFAULT_DELTA[method])
    step = resolve_delta(policy, budget)
    params = ReservationParams(task.period, task.server_period, budget, step)
    try:
        chain = build_chain(resample(task.pmf, step), params)
    except DivergentReservationError:
        p = 0.0
    else:
        state = solve(chain, method)
        p = 1.0 if chain.always_meets else deadline_probability(state, chain,
                                                                task.effective_deadline)
    return TaskEvaluation(budget, step, p, task.quality.quality(p))


class BudgetCurve:
    """Memoised probability-vs-budget curve of one task on a budget grid.

    With ``envelope`` the curve is the running maximum over the grid, so it
    is nondecreasing even when the raw solver output is not.
    """

    def __init__(self, task: TaskSpec, solver: Method | str, resolution: int,
                 envelope: bool | None = None):
        if task.server_period % resolution:
            raise ValueError("resolution must divide server_period")
        self.task = task
        self.solver = Method(solver)
        self.grid = np.arange(resolution, task.server_period + 1, resolution)
        self.envelope = self.solver is Method.ANALYTIC if envelope is None else envelope
        self._raw: dict[int, TaskEvaluation] = {}
        self._env: np.ndarray | None = None
        self.evaluations = 0

    def evaluate(self, budget: int) -> TaskEvaluation:
        budget = int(budget)
        if budget not in self._raw:
            self._raw[budget] = evaluate_task(self.task, budget, self.solver)
            self.evaluations += 1
        return self._raw[budget]

    def probability(self, index: int) -> float:
        if self.envelope:
            if self._env is None:
                raw = [self.evaluate(q).p_meet for q in self.grid]
                self._env = np.maximum.accumulate(raw)
            return float(self._env[index])
        return self.evaluate(self.grid[index]).p_meet

    def min_budget(self, target_p: float) -> int | None:
        """Smallest grid budget whose curve value reaches ``target_p`` (None if none does)."""
        if target_p > 1.0:
            return None
        goal = target_p - _PROB_SLACK
        lo, hi = 0, self.grid.size - 1
        if self.probability(hi) < goal:
            return None
        while lo < hi:
            mid = (lo + hi) // 2
            if self.probability(mid) >= goal:
                hi = mid
            else:
                lo = mid + 1
        return int(self.grid[lo])


def min_budget(task: TaskSpec, target_p: float, solver: Method | str,
               resolution: int) -> int | None:
    """Smallest budget on the ``resolution`` grid meeting ``target_p``; None if infeasible."""
    return BudgetCurve(task, solver, resolution).min_budget(target_p)


@dataclass(frozen=True)
class TaskAllocation:
    name: str
    budget: int
    bandwidth: float
    p_meet: float
    quality: float
    exact_p_meet: float | None = None


@dataclass(frozen=True)
class Allocation:
    tasks: tuple[TaskAllocation, ...]
    total_bandwidth: float
    objective_value: float
    feasible: bool
    level: float | None = None
    binding: str | None = None
    solver: str = ""
    runtime_us: int = 0
    evaluations: int = 0

    def as_record(self) -> dict:
        return asdict(self)


def _infeasible(tasks, solver: Method, binding: str, start: float) -> Allocation:
    return Allocation(tasks=(), total_bandwidth=0.0, objective_value=-math.inf, feasible=False,
                      binding=binding, solver=solver.value,
                      runtime_us=int(1e6 * (time.perf_counter() - start)))


def optimize(tasks: list[TaskSpec], B_total: float, solver: Method | str, resolution: int,
             workers: int = 1) -> Allocation:
    """Maximise ``min_i quality_i`` subject to ``sum_i Q_i / T_s,i <= B_total`` and floors."""
    start = time.perf_counter()
    method = Method(solver)
    if not tasks:
        raise ValueError("no tasks to allocate")
    curves = [BudgetCurve(t, method, resolution) for t in tasks]
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def budgets_for(level: float) -> list[int | None]:
        targets = [t.quality.required_probability(max(level, t.quality_floor)) for t in tasks]
        jobs = zip(curves, targets)
        if pool is None:
            return [c.min_budget(p) for c, p in jobs]
        return list(pool.map(lambda cp: cp[0].min_budget(cp[1]), jobs))

    def bandwidth(budgets) -> float:
        return math.fsum(q / t.server_period for q, t in zip(budgets, tasks))

    def fits(budgets) -> bool:
        return all(q is not None for q in budgets) and bandwidth(budgets) <= B_total + 1e-12

    try:
        floor_budgets = budgets_for(-math.inf)
        for t, q in zip(tasks, floor_budgets):
            if q is None:
                return _infeasible(tasks, method, f"quality floor of {t.name}", start)
        if not fits(floor_budgets):
            return _infeasible(tasks, method, "total bandwidth", start)

        lowest = min(t.quality.intercept - t.quality.slope for t in tasks)
        lowest = min([lowest] + [t.quality_floor for t in tasks if math.isfinite(t.quality_floor)])
        lo = math.floor(lowest / QUALITY_GRID)
        hi = math.floor(min(t.quality.intercept for t in tasks) / QUALITY_GRID + 1e-9)
        if fits(budgets_for(hi * QUALITY_GRID)):
            lo = hi
        for _ in range(MAX_BISECTIONS):
            if hi - lo <= 1:
                break
            mid = (lo + hi) // 2
            if fits(budgets_for(mid * QUALITY_GRID)):
                lo = mid
            else:
                hi = mid
        level = lo * QUALITY_GRID
        budgets = budgets_for(level)
        if not fits(budgets):
            budgets = floor_budgets
        budgets = _spend_leftover(tasks, curves, budgets, B_total)
    finally:
        if pool is not None:
            pool.shutdown()

    allocs = []
    for t, c, q in zip(tasks, curves, budgets):
        ev = c.evaluate(q)
        allocs.append(TaskAllocation(t.name, int(q), q / t.server_period, ev.p_meet, ev.quality))
    return Allocation(
        tasks=tuple(allocs),
        total_bandwidth=bandwidth(budgets),
        objective_value=min(a.quality for a in allocs),
        feasible=True,
        level=level,
        solver=method.value,
        runtime_us=int(1e6 * (time.perf_counter() - start)),
        evaluations=sum(c.evaluations for c in curves),
    )


def _spend_leftover(tasks, curves, budgets, B_total) -> list[int]:
    """Give unused bandwidth to tasks in order of decreasing quality slope."""
    budgets = list(budgets)
    order = sorted(range(len(tasks)), key=lambda i: (-tasks[i].quality.slope, i))
    for i in order:
        t, curve = tasks[i], curves[i]
        used = math.fsum(q / tk.server_period for q, tk in zip(budgets, tasks))
        spare = B_total - used
        room = int(math.floor(spare * t.server_period + 1e-9))
        step = int(curve.grid[0])
        top = min(t.server_period, budgets[i] + (room // step) * step)
        if top <= budgets[i] or t.quality.slope == 0:
            continue
        current = curve.evaluate(budgets[i]).p_meet
        if current >= 1.0:
            continue
        if curve.envelope:
            candidates = range(budgets[i] + step, top + 1, step)
            best = max(candidates, key=lambda q: (curve.evaluate(q).p_meet, -q))
        else:
            best = top
        if curve.evaluate(best).p_meet > current:
            budgets[i] = int(best)
    return budgets


def exact_probabilities(tasks: list[TaskSpec], allocation: Allocation,
                        solver: Method | str = Method.MATRIX_GEOMETRIC,
                        delta: str = "50") -> Allocation:
    """Re-evaluate each allocated budget with a numeric solver at a fine step."""
    updated = []
    for t, a in zip(tasks, allocation.tasks):
        ev = evaluate_task(t, a.budget, solver, delta=delta)
        updated.append(TaskAllocation(a.name, a.budget, a.bandwidth, a.p_meet, a.quality,
                                      ev.p_meet))
    return Allocation(**{**asdict(allocation), "tasks": tuple(updated)})


def report_table(allocation: Allocation) -> str:
    """Aligned-text table: task, budget, estimated and exact probability, quality."""
    header = ("Task", "Opt. Budget (us)", "Estim. Prob.", "Exact Prob.", "Quality")
    rows = []
    for a in allocation.tasks:
        exact = "-" if a.exact_p_meet is None else f"{a.exact_p_meet:.4f}"
        rows.append((a.name, str(a.budget), f"{a.p_meet:.4f}", exact, f"{a.quality:.2f}"))
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    title = f"{allocation.solver} -- computation time: {allocation.runtime_us} us"
    lines = [title, "  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)
