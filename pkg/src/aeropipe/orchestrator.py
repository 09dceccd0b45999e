"""Dependency-ordered task execution with retries and hourly scheduling.

A DagSpec is a validated set of named tasks with dependency edges.
DagRunner executes one spec for one logical hour on a shared thread
pool: tasks whose dependencies have all succeeded run concurrently,
failures retry with exponential backoff (recorded as simulated delay,
never a wall sleep), and a task that exhausts its retries causes
exactly its transitive descendants to be skipped.

Tasks hand data to dependents through staged artifacts keyed by
(dag, hour, task), so a retried task re-reads stable inputs; in-memory
handoff is available for tests that do not care about staging.

Every state transition is appended to an NDJSON run log with
(task, attempt, state, start, end). Scheduler walks an hourly cadence
over a clock with catch-up; backfill re-runs a half-open hour range
ascending.
"""

from __future__ import annotations

import json
import pickle
import shutil
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

from .model import AeropipeError, HourKey, format_hour

BACKOFF_BASE_DEFAULT = 30.0
MAX_RETRIES_DEFAULT = 2


class DagError(AeropipeError):
    """Invalid DAG shape: duplicate names, dangling deps, or a cycle."""


class TaskState(Enum):
    PENDING = "pending"
    RUNNING = "running"
    SUCCESS = "success"
    FAILED_RETRYABLE = "failed-retryable"
    FAILED_FINAL = "failed-final"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class TaskSpec:
    """One unit of work. `fn` receives a TaskContext and returns the
    task's artifact, which dependents read as ctx.inputs[name]."""

    name: str
    fn: Callable[["TaskContext"], Any]
    depends_on: tuple[str, ...] = ()
    max_retries: int = MAX_RETRIES_DEFAULT
    backoff_base: float = BACKOFF_BASE_DEFAULT
    # Staged artifacts are deleted when the whole run succeeds unless
    # this is set; the cleaned-data snapshot task relies on it.
    keep_artifact: bool = False


class DagSpec:
    def __init__(self, dag_id: str, tasks: list[TaskSpec]):
        if not dag_id:
            raise DagError("dag_id must be non-empty")
        names = [t.name for t in tasks]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise DagError(f"duplicate task names: {sorted(dupes)}")
        by_name = {t.name: t for t in tasks}
        for t in tasks:
            for dep in t.depends_on:
                if dep not in by_name:
                    raise DagError(f"task {t.name!r} depends on unknown task {dep!r}")
        self.dag_id = dag_id
        self.tasks = {t.name: t for t in tasks}
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        # Iterative DFS with an explicit path so the cycle can be named.
        WHITE, GRAY, BLACK = 0, 1, 2
        color = {name: WHITE for name in self.tasks}
        for root in self.tasks:
            if color[root] != WHITE:
                continue
            stack: list[tuple[str, int]] = [(root, 0)]
            path: list[str] = []
            while stack:
                node, edge = stack[-1]
                if edge == 0:
                    color[node] = GRAY
                    path.append(node)
                deps = self.tasks[node].depends_on
                if edge < len(deps):
                    stack[-1] = (node, edge + 1)
                    nxt = deps[edge]
                    if color[nxt] == GRAY:
                        cycle = path[path.index(nxt) :] + [nxt]
                        raise DagError("dependency cycle: " + " -> ".join(cycle))
                    if color[nxt] == WHITE:
                        stack.append((nxt, 0))
                else:
                    color[node] = BLACK
                    path.pop()
                    stack.pop()

    def descendants(self, name: str) -> set[str]:
        """All tasks reachable from `name` via reversed dependency edges."""
        children: dict[str, list[str]] = {n: [] for n in self.tasks}
        for t in self.tasks.values():
            for dep in t.depends_on:
                children[dep].append(t.name)
        seen: set[str] = set()
        queue = deque(children[name])
        while queue:
            n = queue.popleft()
            if n in seen:
                continue
            seen.add(n)
            queue.extend(children[n])
        return seen

    def topological_order(self) -> list[str]:
        indeg = {n: len(t.depends_on) for n, t in self.tasks.items()}
        children: dict[str, list[str]] = {n: [] for n in self.tasks}
        for t in self.tasks.values():
            for dep in t.depends_on:
                children[dep].append(t.name)
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order: list[str] = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        return order


class SimClock:
    """Monotone simulated clock in epoch seconds."""

    def __init__(self, start_ts: float = 0.0):
        self._now = float(start_ts)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance_to(self, ts: float) -> None:
        with self._lock:
            if ts < self._now:
                raise ValueError(f"clock cannot move backwards ({ts} < {self._now})")
            self._now = ts


class WallClock:
    """Real-time clock with the same protocol; advance_to sleeps.

    Exists for operating against real time; nothing in the test suite
    depends on it.
    """

    def now(self) -> float:
        return time.time()

    def advance_to(self, ts: float) -> None:
        delay = ts - time.time()
        if delay > 0:
            time.sleep(delay)


@dataclass
class TaskContext:
    dag_id: str
    hour: HourKey
    attempt: int
    clock: SimClock | WallClock
    inputs: dict[str, Any] = field(default_factory=dict)


class Staging:
    """Pickle store for task artifacts, one file per (dag, hour, task)."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def path(self, dag_id: str, hour: HourKey, task: str) -> Path:
        return self.root / dag_id / format_hour(hour) / f"{task}.art"

    def save(self, dag_id: str, hour: HourKey, task: str, obj: Any) -> Path:
        p = self.path(dag_id, hour, task)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "wb") as fh:
            pickle.dump(obj, fh, protocol=pickle.HIGHEST_PROTOCOL)
        return p

    def load(self, dag_id: str, hour: HourKey, task: str) -> Any:
        with open(self.path(dag_id, hour, task), "rb") as fh:
            return pickle.load(fh)

    def cleanup(self, dag_id: str, hour: HourKey, keep: set[str]) -> None:
        hour_dir = self.root / dag_id / format_hour(hour)
        if not hour_dir.is_dir():
            return
        for p in hour_dir.glob("*.art"):
            if p.stem not in keep:
                p.unlink()
        if not any(hour_dir.iterdir()):
            shutil.rmtree(hour_dir)


@dataclass
class RunResult:
    dag_id: str
    hour: HourKey
    kind: str  # "scheduled" | "backfill"
    states: dict[str, TaskState]
    attempts: dict[str, int]
    errors: dict[str, str]
    skipped_by: dict[str, str]
    total_backoff_s: float
    log_path: Path | None

    @property
    def ok(self) -> bool:
        return all(s is TaskState.SUCCESS for s in self.states.values())


class DagRunner:
    """Executes DagSpecs on one shared thread pool.

    All state transitions happen on the caller's thread; worker threads
    only run task bodies, so run logs need no locking. When staging is
    configured, successful artifacts are written there and dependents
    re-read them per attempt; without staging, handoff is in-memory.
    """

    def __init__(
        self,
        *,
        clock: SimClock | WallClock | None = None,
        run_log_dir: Path | None = None,
        staging: Staging | None = None,
        max_workers: int = 4,
    ):
        self.clock = clock or SimClock()
        self.run_log_dir = Path(run_log_dir) if run_log_dir else None
        self.staging = staging
        self._pool = ThreadPoolExecutor(max_workers=max_workers)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self) -> "DagRunner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def run(self, spec: DagSpec, hour: HourKey, kind: str = "scheduled") -> RunResult:
        states = {name: TaskState.PENDING for name in spec.tasks}
        attempts = {name: 0 for name in spec.tasks}
        starts: dict[str, float] = {}
        errors: dict[str, str] = {}
        skipped_by: dict[str, str] = {}
        memory: dict[str, Any] = {}
        total_backoff = 0.0

        log_fh = None
        log_path = None
        if self.run_log_dir is not None:
            log_path = self.run_log_dir / spec.dag_id / f"{format_hour(hour)}.log"
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log_fh = open(log_path, "w", encoding="utf-8")

        def emit(task: str, state: TaskState, *, start: float | None = None, end: float | None = None, **extra: Any) -> None:
            if log_fh is None:
                return
            event = {
                "dag": spec.dag_id,
                "hour": hour,
                "kind": kind,
                "task": task,
                "attempt": attempts[task],
                "state": state.value,
                "start": start,
                "end": end,
            }
            event.update(extra)
            log_fh.write(json.dumps(event, sort_keys=True) + "\n")
            log_fh.flush()

        def load_inputs(t: TaskSpec) -> dict[str, Any]:
            if self.staging is None:
                return {d: memory[d] for d in t.depends_on}
            return {d: self.staging.load(spec.dag_id, hour, d) for d in t.depends_on}

        def runnable() -> list[str]:
            out = []
            for name, t in spec.tasks.items():
                if states[name] is not TaskState.PENDING:
                    continue
                if all(states[d] is TaskState.SUCCESS for d in t.depends_on):
                    out.append(name)
            return sorted(out)

        futures: dict[Future, str] = {}
        try:
            while True:
                for name in runnable():
                    t = spec.tasks[name]
                    attempts[name] += 1
                    states[name] = TaskState.RUNNING
                    ctx = TaskContext(
                        dag_id=spec.dag_id,
                        hour=hour,
                        attempt=attempts[name],
                        clock=self.clock,
                        inputs=load_inputs(t),
                    )
                    starts[name] = time.time()
                    emit(name, TaskState.RUNNING, start=starts[name])
                    futures[self._pool.submit(t.fn, ctx)] = name
                if not futures:
                    break
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for fut in done:
                    name = futures.pop(fut)
                    t = spec.tasks[name]
                    ended = time.time()
                    try:
                        value = fut.result()
                    except Exception as exc:
                        message = f"{type(exc).__name__}: {exc}"
                        errors[name] = message
                        if attempts[name] <= t.max_retries:
                            delay = t.backoff_base * (2 ** (attempts[name] - 1))
                            total_backoff += delay
                            states[name] = TaskState.PENDING
                            emit(
                                name,
                                TaskState.FAILED_RETRYABLE,
                                start=starts[name],
                                end=ended,
                                error=message,
                                backoff_s=delay,
                            )
                        else:
                            states[name] = TaskState.FAILED_FINAL
                            emit(name, TaskState.FAILED_FINAL, start=starts[name], end=ended, error=message)
                            for child in sorted(spec.descendants(name)):
                                if states[child] is TaskState.PENDING:
                                    states[child] = TaskState.SKIPPED
                                    skipped_by[child] = name
                                    emit(child, TaskState.SKIPPED, blocked_by=name)
                    else:
                        states[name] = TaskState.SUCCESS
                        errors.pop(name, None)
                        if self.staging is not None:
                            self.staging.save(spec.dag_id, hour, name, value)
                        else:
                            memory[name] = value
                        emit(name, TaskState.SUCCESS, start=starts[name], end=ended)
            result = RunResult(
                dag_id=spec.dag_id,
                hour=hour,
                kind=kind,
                states=states,
                attempts=attempts,
                errors=errors,
                skipped_by=skipped_by,
                total_backoff_s=total_backoff,
                log_path=log_path,
            )
            if log_fh is not None:
                summary = {
                    "dag": spec.dag_id,
                    "hour": hour,
                    "kind": kind,
                    "run_ok": result.ok,
                    "backoff_s": total_backoff,
                    "states": {n: s.value for n, s in sorted(states.items())},
                }
                log_fh.write(json.dumps(summary, sort_keys=True) + "\n")
            if result.ok and self.staging is not None:
                keep = {t.name for t in spec.tasks.values() if t.keep_artifact}
                self.staging.cleanup(spec.dag_id, hour, keep)
            return result
        finally:
            if log_fh is not None:
                log_fh.close()


def render_tree(spec: DagSpec, result: RunResult) -> str:
    """ASCII tree of one run: tasks indented under their dependencies.

    Tasks with several parents appear under each; roots are tasks with
    no dependencies. Deterministic ordering throughout.
    """
    children: dict[str, list[str]] = {n: [] for n in spec.tasks}
    for t in spec.tasks.values():
        for dep in t.depends_on:
            children[dep].append(t.name)
    for v in children.values():
        v.sort()

    lines = [f"{spec.dag_id} @ {format_hour(result.hour)} [{result.kind}]"]

    def walk(name: str, prefix: str, is_last: bool) -> None:
        state = result.states[name]
        n_attempts = result.attempts[name]
        note = f" x{n_attempts}" if n_attempts > 1 else ""
        err = f" ({result.errors[name]})" if name in result.errors else ""
        connector = "`-- " if is_last else "|-- "
        lines.append(f"{prefix}{connector}{name} [{state.value}{note}]{err}")
        ext = "    " if is_last else "|   "
        kids = children[name]
        for i, kid in enumerate(kids):
            walk(kid, prefix + ext, i == len(kids) - 1)

    roots = sorted(n for n, t in spec.tasks.items() if not t.depends_on)
    for i, root in enumerate(roots):
        walk(root, "", i == len(roots) - 1)
    return "\n".join(lines)


class Scheduler:
    """Hourly cadence with catch-up and backfill.

    catch_up(now_hour) runs every unrun logical hour from the
    configured start through now_hour, oldest first. The cadence
    advances past failed runs; backfill exists to repair those. A run's
    logical hour is the just-completed hour, so the clock sits at the
    hour's close when its run executes.
    """

    def __init__(
        self,
        runner: DagRunner,
        dag_factory: Callable[[HourKey], DagSpec],
        *,
        first_hour: HourKey,
    ):
        self.runner = runner
        self.dag_factory = dag_factory
        self.first_hour = first_hour
        self.next_hour = first_hour

    def due(self, now_hour: HourKey) -> list[HourKey]:
        return list(range(self.next_hour, now_hour + 1))

    def catch_up(self, now_hour: HourKey) -> list[RunResult]:
        results = []
        for h in self.due(now_hour):
            self.runner.clock.advance_to((h + 1) * 3600.0)
            results.append(self.runner.run(self.dag_factory(h), h, kind="scheduled"))
            self.next_hour = h + 1
        return results

    def backfill(self, start_hour: HourKey, end_hour: HourKey) -> list[RunResult]:
        """One run per hour in the half-open range, ascending."""
        results = []
        for h in range(start_hour, end_hour):
            results.append(self.runner.run(self.dag_factory(h), h, kind="backfill"))
        return results
