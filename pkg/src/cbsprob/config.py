"""Sectioned key-value run configuration.

::

    # cbsprob-config v1
    [global]
    solver = analytic, cyclic-reduction
    total_bandwidth = 0.95

    [task decoder]
    period = 100000
    server_period = 50000
    budget = 17500, 20000, 22500
    beta = 2, 7, 99500

All times are integer microseconds.  ``;`` and ``#`` start comments.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from cbsprob.distributions import (
    PMF,
    DistributionError,
    pmf_from_beta,
    pmf_from_trace,
    read_pmf,
    truncate,
)
from cbsprob.optimizer import DEFAULT_DELTA, QualityModel, TaskSpec, resolve_delta
from cbsprob.solvers import Method

CONFIG_HEADER = "# cbsprob-config v1"
MODES = ("analyze", "simulate", "optimize")

GLOBAL_KEYS = {
    "mode", "verbosity", "solver", "total_bandwidth", "resolution", "seed", "jobs", "warmup",
    "output", "csv", "exact", "exact_delta", "replications",
}
TASK_KEYS = {
    "period", "server_period", "budget", "budget_range", "deadline",
    "pmf_file", "beta", "trace_file", "truncate",
    "delta", "delta_analytic", "delta_numeric", "delta_sweep", "solver",
    "quality_intercept", "quality_slope", "quality_floor",
}
_PMF_KEYS = ("pmf_file", "beta", "trace_file")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key and line."""


@dataclass
class TaskConfig:
    name: str
    period: int
    server_period: int
    budgets: list[int]
    deadline: int
    pmf_source: dict
    solvers: list[str]
    delta: dict[str, str]
    delta_sweep: list[str] | None = None
    quality_intercept: float | None = None
    quality_slope: float = 0.0
    quality_floor: float | None = None
    truncate: float | None = None
    pmf: PMF | None = field(default=None, repr=False)

    def to_spec(self) -> TaskSpec:
        return TaskSpec(
            name=self.name,
            period=self.period,
            server_period=self.server_period,
            pmf=self.pmf,
            quality=QualityModel(self.quality_intercept or 0.0, self.quality_slope),
            quality_floor=-math.inf if self.quality_floor is None else self.quality_floor,
            deadline=self.deadline,
            delta=None,
        )

    def delta_for(self, solver: str) -> str:
        return self.delta.get(solver, DEFAULT_DELTA[Method(solver)])


@dataclass
class RunConfig:
    mode: str
    tasks: list[TaskConfig]
    solvers: list[str]
    total_bandwidth: float | None = None
    resolution: int | None = None
    seed: int = 0
    jobs: int = 1_000_000
    warmup: int | None = None
    replications: int = 1
    verbosity: int = 0
    output: str | None = None
    csv: str | None = None
    exact: bool = True
    exact_delta: str = "50"
    source: str | None = None

    def resolved(self) -> dict:
        """Fully defaulted configuration, for embedding in reports.

        Output destinations are left out: they do not affect any result, and
        two runs that differ only in where they write should agree byte for byte.
        """
        record = asdict(self)
        record.pop("output")
        record.pop("csv")
        for task in record["tasks"]:
            task.pop("pmf", None)
        return record


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in re.split(r"[,\s]+", value.strip()) if v.strip()]


def _strip_comment(line: str) -> str:
    for marker in (" ;", " #", "\t;", "\t#"):
        pos = line.find(marker)
        if pos >= 0:
            line = line[:pos]
    return line.strip()


def _read_sections(text: str, origin: str):
    sections: list[tuple[str, int, dict[str, tuple[str, int]]]] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped[0] in "#;":
            continue
        line = _strip_comment(raw)
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{origin}:{lineno}: malformed section header")
            current = {}
            sections.append((line[1:-1].strip(), lineno, current))
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if key in current:
            raise ConfigError(f"{origin}:{lineno}: duplicate key '{key}'")
        current[key] = (value, lineno)
    return sections


class _Section:
    def __init__(self, name: str, lineno: int, items: dict, origin: str, allowed: set[str]):
        self.name = name
        self.items = items
        self.origin = origin
        self.lineno = lineno
        for key, (_, ln) in items.items():
            if key not in allowed:
                raise ConfigError(f"{origin}:{ln}: unknown key '{key}' in [{name}]")

    def error(self, key: str, message: str) -> ConfigError:
        ln = self.items[key][1] if key in self.items else self.lineno
        return ConfigError(f"{self.origin}:{ln}: [{self.name}] {message}")

    def has(self, key: str) -> bool:
        return key in self.items

    def raw(self, key: str, default=None):
        return self.items[key][0] if key in self.items else default

    def integer(self, key: str, default=None, required=False) -> int | None:
        if key not in self.items:
            if required:
                raise ConfigError(f"{self.origin}:{self.lineno}: [{self.name}] "
                                  f"missing required key '{key}'")
            return default
        try:
            return int(self.items[key][0])
        except ValueError:
            raise self.error(key, f"'{key}' must be an integer") from None

    def real(self, key: str, default=None) -> float | None:
        if key not in self.items:
            return default
        try:
            return float(self.items[key][0])
        except ValueError:
            raise self.error(key, f"'{key}' must be a number") from None


def _solvers(section: _Section, key: str = "solver") -> list[str] | None:
    if not section.has(key):
        return None
    tokens = _split_list(section.raw(key))
    for tok in tokens:
        try:
            Method(tok)
        except ValueError:
            raise section.error(key, f"unknown solver '{tok}' "
                                     "(expected analytic, companion, cyclic-reduction)") from None
    return tokens


def _check_delta_policy(section: _Section, key: str, policy: str) -> str:
    if re.fullmatch(r"Q(\s*/\s*\d+)?", policy, flags=re.IGNORECASE):
        return policy.replace(" ", "")
    if re.fullmatch(r"\d+", policy) and int(policy) >= 1:
        return policy
    raise section.error(key, f"invalid delta policy '{policy}' (use Q/k or a step in µs)")


def _budgets(section: _Section) -> list[int]:
    if section.has("budget") and section.has("budget_range"):
        raise section.error("budget_range", "give either 'budget' or 'budget_range'")
    if section.has("budget"):
        try:
            return [int(v) for v in _split_list(section.raw("budget"))]
        except ValueError:
            raise section.error("budget", "budgets must be integers") from None
    if section.has("budget_range"):
        parts = section.raw("budget_range").split(":")
        try:
            start, stop, step = (int(p) for p in parts)
        except ValueError:
            raise section.error("budget_range", "expected start:stop:step") from None
        if step <= 0 or stop < start:
            raise section.error("budget_range", "empty budget range")
        return list(range(start, stop + 1, step))
    return []


def _pmf_source(section: _Section, base: Path) -> dict:
    given = [k for k in _PMF_KEYS if section.has(k)]
    if len(given) != 1:
        raise ConfigError(f"{section.origin}:{section.lineno}: [{section.name}] "
                          "exactly one of pmf_file, beta, trace_file is required")
    key = given[0]
    if key == "beta":
        vals = _split_list(section.raw(key))
        if len(vals) not in (3, 4):
            raise section.error(key, "beta expects alpha, beta, support_max[, grid]")
        try:
            alpha, beta = float(vals[0]), float(vals[1])
            support, grid = int(vals[2]), int(vals[3]) if len(vals) == 4 else 1
        except ValueError:
            raise section.error(key, "cannot parse beta parameters") from None
        return {"kind": "beta", "alpha": alpha, "beta": beta, "support_max": support, "grid": grid}
    path = Path(section.raw(key))
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise section.error(key, f"file not found: {path}")
    return {"kind": "file" if key == "pmf_file" else "trace", "path": str(path)}


def load_pmf(source: dict) -> PMF:
    if source["kind"] == "beta":
        return pmf_from_beta(source["alpha"], source["beta"], source["support_max"],
                             source["grid"])
    if source["kind"] == "file":
        return read_pmf(source["path"])
    samples = [float(tok) for tok in Path(source["path"]).read_text().split()
               if not tok.startswith("#")]
    return pmf_from_trace(samples)


def _task(section: _Section, mode: str, global_solvers: list[str], base: Path) -> TaskConfig:
    period = section.integer("period", required=True)
    server_period = section.integer("server_period", required=True)
    if period <= 0 or server_period <= 0:
        raise section.error("period", "periods must be positive")
    if period % server_period:
        raise section.error("server_period", "server_period must divide period")
    deadline = section.integer("deadline", default=period)
    if deadline % server_period or deadline < period:
        raise section.error("deadline", "deadline must be a multiple of server_period "
                                        "and at least the period")
    budgets = _budgets(section)
    if mode in ("analyze", "simulate") and not budgets:
        raise ConfigError(f"{section.origin}:{section.lineno}: [{section.name}] "
                          "missing required key 'budget'")
    for q in budgets:
        if not 0 < q <= server_period:
            raise section.error("budget", f"budget {q} outside (0, server_period]")
    solvers = _solvers(section) or list(global_solvers)
    delta: dict[str, str] = {}
    if section.has("delta"):
        policy = _check_delta_policy(section, "delta", section.raw("delta"))
        delta = {s: policy for s in solvers}
    if section.has("delta_analytic"):
        delta[Method.ANALYTIC.value] = _check_delta_policy(
            section, "delta_analytic", section.raw("delta_analytic"))
    if section.has("delta_numeric"):
        policy = _check_delta_policy(section, "delta_numeric", section.raw("delta_numeric"))
        delta[Method.COMPANION.value] = policy
        delta[Method.MATRIX_GEOMETRIC.value] = policy
    for s in solvers:
        delta.setdefault(s, DEFAULT_DELTA[Method(s)])
    sweep = None
    if section.has("delta_sweep"):
        sweep = [_check_delta_policy(section, "delta_sweep", p)
                 for p in _split_list(section.raw("delta_sweep"))]
    if mode == "analyze":
        for q in budgets:
            for s in solvers:
                for policy in sweep or [delta[s]]:
                    key = "delta_sweep" if sweep else "delta"
                    if not _divides_exactly(policy, q):
                        raise section.error(key, f"delta {policy} does not divide budget {q}")
    if mode == "optimize":
        if not section.has("quality_intercept"):
            raise ConfigError(f"{section.origin}:{section.lineno}: [{section.name}] "
                              "missing required key 'quality_intercept'")
    slope = section.real("quality_slope", 0.0)
    if slope < 0:
        raise section.error("quality_slope", "quality_slope must be nonnegative")
    cfg = TaskConfig(
        name=section.name,
        period=period,
        server_period=server_period,
        budgets=budgets,
        deadline=deadline,
        pmf_source=_pmf_source(section, base),
        solvers=solvers,
        delta=delta,
        delta_sweep=sweep,
        quality_intercept=section.real("quality_intercept"),
        quality_slope=slope,
        quality_floor=section.real("quality_floor"),
        truncate=section.real("truncate"),
    )
    return cfg


def _divides_exactly(policy: str, budget: int) -> bool:
    match = re.fullmatch(r"Q/(\d+)", policy, flags=re.IGNORECASE)
    if match:
        return budget % int(match.group(1)) == 0
    if policy.upper() == "Q":
        return True
    return budget % int(policy) == 0


def parse_config(text: str, mode: str | None = None, origin: str = "<config>",
                 base: Path | None = None) -> RunConfig:
    """Parse and validate configuration text; raises :class:`ConfigError`."""
    base = base or Path.cwd()
    first = next((ln.strip() for ln in text.splitlines() if ln.strip()), "")
    if first != CONFIG_HEADER:
        raise ConfigError(f"{origin}:1: missing or unsupported header (expected '{CONFIG_HEADER}')")
    sections = _read_sections(text, origin)
    glob = None
    task_sections = []
    for name, lineno, items in sections:
        if name.lower() == "global":
            if glob is not None:
                raise ConfigError(f"{origin}:{lineno}: duplicate [global] section")
            glob = _Section("global", lineno, items, origin, GLOBAL_KEYS)
        elif name.lower().startswith("task"):
            task_name = name[4:].strip() or f"task{len(task_sections) + 1}"
            task_sections.append((task_name, lineno, items))
        else:
            raise ConfigError(f"{origin}:{lineno}: unknown section [{name}]")
    glob = glob or _Section("global", 1, {}, origin, GLOBAL_KEYS)
    declared = glob.raw("mode")
    if declared is not None and declared not in MODES:
        raise glob.error("mode", f"unknown mode '{declared}'")
    if mode is not None and declared is not None and mode != declared:
        raise glob.error("mode", f"config is for mode '{declared}', not '{mode}'")
    mode = mode or declared
    if mode is None:
        raise ConfigError(f"{origin}: no mode given")
    if not task_sections:
        raise ConfigError(f"{origin}: at least one [task ...] section is required")
    solvers = _solvers(glob) or [Method.ANALYTIC.value]
    names = [t[0] for t in task_sections]
    if len(set(names)) != len(names):
        raise ConfigError(f"{origin}: task names must be unique")
    tasks = [_task(_Section(name, ln, items, origin, TASK_KEYS), mode, solvers, base)
             for name, ln, items in task_sections]
    cfg = RunConfig(
        mode=mode,
        tasks=tasks,
        solvers=solvers,
        total_bandwidth=glob.real("total_bandwidth"),
        resolution=glob.integer("resolution"),
        seed=glob.integer("seed", default=0),
        jobs=glob.integer("jobs", default=1_000_000),
        warmup=glob.integer("warmup"),
        replications=glob.integer("replications", default=1),
        verbosity=glob.integer("verbosity", default=0),
        output=glob.raw("output"),
        csv=glob.raw("csv"),
        exact=(glob.raw("exact", "true").lower() in ("1", "true", "yes", "on")),
        exact_delta=_check_delta_policy(glob, "exact_delta", glob.raw("exact_delta", "50")),
        source=origin,
    )
    if mode == "optimize":
        if cfg.total_bandwidth is None:
            raise ConfigError(f"{origin}: [global] missing required key 'total_bandwidth'")
        if not 0 < cfg.total_bandwidth <= 1:
            raise glob.error("total_bandwidth", "total_bandwidth must be in (0, 1]")
        if cfg.resolution is None:
            cfg.resolution = 1000
        for t in tasks:
            if t.server_period % cfg.resolution:
                raise glob.error("resolution", f"resolution must divide server_period "
                                               f"of task {t.name}")
    if mode == "simulate":
        if cfg.jobs <= (cfg.warmup if cfg.warmup is not None else cfg.jobs // 10):
            raise glob.error("jobs", "jobs must exceed warmup")
    return cfg


def load_config(path: str | Path, mode: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    cfg = parse_config(text, mode=mode, origin=str(path), base=path.parent)
    return cfg


def materialise(cfg: RunConfig) -> RunConfig:
    """Load every task's PMF (applying optional truncation)."""
    for task in cfg.tasks:
        try:
            pmf = load_pmf(task.pmf_source)
            if task.truncate:
                pmf = truncate(pmf, task.truncate)
        except DistributionError as exc:
            raise ConfigError(f"[{task.name}] {exc}") from None
        task.pmf = pmf
    return cfg
