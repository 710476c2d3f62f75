"""Program input format and operational semantics of the event-driven transition system.

A program is a fixed set of threads.  A thread either owns a FIFO event queue
and runs posted event handlers to completion, or it runs a straight-line
script.  States are immutable values and ``execute`` is a pure function, so
explorers can keep snapshots on their DFS stacks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

ThreadId = str
EventId = str
VarId = str
LockId = str
AssertId = str

DEFAULT_SPACE_CAP = 2_000_000


class NotEnabled(Exception):
    """Executing a transition that is not enabled in the given state."""


class ProgramValidationError(ValueError):
    """Input program violates a structural invariant; carries all violations."""

    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = list(violations)
        super().__init__("; ".join(f"{code}: {msg}" for code, msg in self.violations))


class TaskId(NamedTuple):
    """An event handler instance, or the script of a thread without a queue."""

    thread: ThreadId
    event: EventId | None


@dataclass(frozen=True)
class Operation:
    """One visible operation; ``begin``/``end`` are synthesized, never parsed."""

    kind: str  # post|read|write|lock|unlock|fork|init|assert|begin|end
    event: EventId | None = None
    dest: ThreadId | None = None
    var: VarId | None = None
    val: int | None = None
    obj: LockId | None = None
    target: ThreadId | None = None
    assert_id: AssertId | None = None

    @staticmethod
    def post(event: EventId, dest: ThreadId) -> "Operation":
        return Operation("post", event=event, dest=dest)

    @staticmethod
    def read(var: VarId) -> "Operation":
        return Operation("read", var=var)

    @staticmethod
    def write(var: VarId, val: int) -> "Operation":
        return Operation("write", var=var, val=val)

    @staticmethod
    def lock(obj: LockId) -> "Operation":
        return Operation("lock", obj=obj)

    @staticmethod
    def unlock(obj: LockId) -> "Operation":
        return Operation("unlock", obj=obj)

    @staticmethod
    def fork(target: ThreadId) -> "Operation":
        return Operation("fork", target=target)

    @staticmethod
    def init() -> "Operation":
        return Operation("init")

    @staticmethod
    def check(assert_id: AssertId) -> "Operation":
        return Operation("assert", assert_id=assert_id)

    @staticmethod
    def begin(event: EventId) -> "Operation":
        return Operation("begin", event=event)

    @staticmethod
    def end(event: EventId) -> "Operation":
        return Operation("end", event=event)


@dataclass(frozen=True)
class Transition:
    """A visible operation at a fixed position of a task; identity = (task, step)."""

    task: TaskId
    step: int
    op: Operation

    @property
    def thread(self) -> ThreadId:
        return self.task.thread

    @property
    def event(self) -> EventId | None:
        return self.task.event

    @property
    def uid(self) -> tuple[TaskId, int]:
        return (self.task, self.step)

    def sort_key(self) -> tuple:
        return (self.task.thread, self.task.event or "", self.step)

    def describe(self) -> dict:
        d = {"thread": self.task.thread, "event": self.task.event, "step": self.step,
             "op": self.op.kind}
        for f in ("event", "dest", "var", "val", "obj", "target", "assert_id"):
            v = getattr(self.op, f)
            if v is not None and not (f == "event" and self.op.kind in ("begin", "end")):
                d[f if f != "event" else "posted"] = v
        return d

    def __repr__(self) -> str:
        tag = self.task.thread if self.task.event is None else f"{self.task.thread}/{self.task.event}"
        return f"<{tag}#{self.step} {self.op.kind}>"


@dataclass(frozen=True)
class ThreadSpec:
    id: ThreadId
    has_queue: bool
    start: str  # "enabled" | "forked"
    script: tuple[Operation, ...]


class ProgramSpec:
    """Validated program: threads, handlers, shared variables and locks."""

    def __init__(self, threads, handlers, var_init, locks):
        self.threads: tuple[ThreadSpec, ...] = tuple(threads)
        self.handlers: dict[EventId, tuple[Operation, ...]] = {
            e: tuple(ops) for e, ops in handlers.items()
        }
        self.var_init: dict[VarId, int] = dict(var_init)
        self.locks: frozenset[LockId] = frozenset(locks)
        self.thread_ids: tuple[ThreadId, ...] = tuple(sorted(t.id for t in self.threads))
        self.var_ids: tuple[VarId, ...] = tuple(sorted(self.var_init))
        self.lock_ids: tuple[LockId, ...] = tuple(sorted(self.locks))
        self._by_id = {t.id: t for t in self.threads}
        # Destination queue of each posted event, from its unique post site.
        self.event_dest: dict[EventId, ThreadId] = {}
        for ops in self._all_bodies():
            for op in ops:
                if op.kind == "post":
                    self.event_dest.setdefault(op.event, op.dest)
        self._tasks: dict[TaskId, tuple[Transition, ...]] = {}
        for t in self.threads:
            if not t.has_queue:
                task = TaskId(t.id, None)
                self._tasks[task] = tuple(
                    Transition(task, i, op) for i, op in enumerate(t.script)
                )
        for e, dest in self.event_dest.items():
            if e in self.handlers:
                task = TaskId(dest, e)
                ops = (Operation.begin(e),) + self.handlers[e] + (Operation.end(e),)
                self._tasks[task] = tuple(
                    Transition(task, i, op) for i, op in enumerate(ops)
                )

    def _all_bodies(self) -> Iterator[tuple[Operation, ...]]:
        for t in self.threads:
            yield t.script
        for ops in self.handlers.values():
            yield ops

    def thread(self, tid: ThreadId) -> ThreadSpec:
        return self._by_id[tid]

    def task_transitions(self, task: TaskId) -> tuple[Transition, ...]:
        return self._tasks[task]

    def to_jsonable(self) -> dict:
        return {
            "threads": [
                {"id": t.id, "queue": t.has_queue, "start": t.start,
                 "script": [_op_to_json(op) for op in t.script]}
                for t in sorted(self.threads, key=lambda t: t.id)
            ],
            "handlers": {e: [_op_to_json(op) for op in ops]
                         for e, ops in sorted(self.handlers.items())},
            "vars": dict(sorted(self.var_init.items())),
            "locks": sorted(self.locks),
        }


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------

_OP_KEYS = ("post", "read", "write", "lock", "unlock", "fork", "init", "assert")


def _op_from_json(d: dict) -> Operation:
    if not isinstance(d, dict) or len(d) != 1:
        raise ProgramValidationError([("BadOperation", f"not an operation object: {d!r}")])
    kind, body = next(iter(d.items()))
    if kind not in _OP_KEYS:
        raise ProgramValidationError([("BadOperation", f"unknown operation {kind!r}")])
    body = body or {}
    try:
        if kind == "post":
            return Operation.post(body["event"], body["dest"])
        if kind == "read":
            return Operation.read(body["var"])
        if kind == "write":
            return Operation.write(body["var"], int(body["val"]))
        if kind == "lock":
            return Operation.lock(body["obj"])
        if kind == "unlock":
            return Operation.unlock(body["obj"])
        if kind == "fork":
            return Operation.fork(body["thread"])
        if kind == "init":
            return Operation.init()
        return Operation.check(body["id"])
    except KeyError as exc:
        raise ProgramValidationError(
            [("BadOperation", f"{kind} is missing field {exc}")]
        ) from None


def _op_to_json(op: Operation) -> dict:
    if op.kind == "post":
        return {"post": {"event": op.event, "dest": op.dest}}
    if op.kind == "read":
        return {"read": {"var": op.var}}
    if op.kind == "write":
        return {"write": {"var": op.var, "val": op.val}}
    if op.kind == "lock":
        return {"lock": {"obj": op.obj}}
    if op.kind == "unlock":
        return {"unlock": {"obj": op.obj}}
    if op.kind == "fork":
        return {"fork": {"thread": op.target}}
    if op.kind == "init":
        return {"init": {}}
    if op.kind == "assert":
        return {"assert": {"id": op.assert_id}}
    raise ValueError(f"cannot serialize synthesized op {op.kind}")


def load_program(text: bytes | str) -> ProgramSpec:
    """Parse and validate the JSON program format; raises with all violations."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    raw = json.loads(text)
    threads = []
    for td in raw.get("threads", []):
        threads.append(ThreadSpec(
            id=td["id"],
            has_queue=bool(td.get("queue", False)),
            start=td.get("start", "enabled"),
            script=tuple(_op_from_json(o) for o in td.get("script", [])),
        ))
    handlers = {e: tuple(_op_from_json(o) for o in ops)
                for e, ops in raw.get("handlers", {}).items()}
    program = ProgramSpec(threads, handlers, raw.get("vars", {}), raw.get("locks", []))
    violations = validate(program)
    if violations:
        raise ProgramValidationError(violations)
    return program


def load_program_file(path) -> ProgramSpec:
    with open(path, "rb") as fh:
        return load_program(fh.read())


def validate(p: ProgramSpec) -> list[tuple[str, str]]:
    """Collect every structural violation of the model invariants."""
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    for t in p.threads:
        if t.id in seen:
            out.append(("DuplicateId", f"thread {t.id!r} declared twice"))
        seen.add(t.id)
        if t.start not in ("enabled", "forked"):
            out.append(("ForkTargetInvalid", f"thread {t.id!r} has bad start {t.start!r}"))
        if t.has_queue and t.script:
            out.append(("QueueThreadScript", f"queue thread {t.id!r} has a script"))
        if t.has_queue and t.start == "forked":
            out.append(("ForkTargetInvalid", f"queue thread {t.id!r} cannot be forked"))
        if not t.has_queue and t.start == "forked":
            if not t.script or t.script[0].kind != "init":
                out.append(("ForkTargetInvalid",
                            f"forked thread {t.id!r} must start its script with init"))
        inits = [i for i, op in enumerate(t.script) if op.kind == "init"]
        if t.start == "forked":
            if any(i > 0 for i in inits):
                out.append(("ForkTargetInvalid", f"init not first in thread {t.id!r}"))
        elif inits:
            out.append(("ForkTargetInvalid", f"init in non-forked thread {t.id!r}"))

    dupes = [e for e in p.handlers if e in seen]
    for e in dupes:
        out.append(("DuplicateId", f"event id {e!r} collides with a thread id"))
    post_sites: dict[EventId, int] = {}
    fork_targets: dict[ThreadId, int] = {}
    bodies = [(f"thread {t.id}", t.script) for t in p.threads]
    bodies += [(f"handler {e}", ops) for e, ops in sorted(p.handlers.items())]
    for where, ops in bodies:
        for op in ops:
            if op.kind == "post":
                post_sites[op.event] = post_sites.get(op.event, 0) + 1
                if op.event not in p.handlers:
                    out.append(("MissingHandler", f"{where} posts {op.event!r} without a handler"))
                dest = p._by_id.get(op.dest)
                if dest is None or not dest.has_queue:
                    out.append(("PostDestInvalid",
                                f"{where} posts {op.event!r} to invalid dest {op.dest!r}"))
            elif op.kind in ("read", "write") and op.var not in p.var_init:
                out.append(("UnknownVar", f"{where} uses undeclared var {op.var!r}"))
            elif op.kind in ("lock", "unlock") and op.obj not in p.locks:
                out.append(("UnknownLock", f"{where} uses undeclared lock {op.obj!r}"))
            elif op.kind == "fork":
                fork_targets[op.target] = fork_targets.get(op.target, 0) + 1
                tgt = p._by_id.get(op.target)
                if tgt is None or tgt.start != "forked" or tgt.has_queue:
                    out.append(("ForkTargetInvalid",
                                f"{where} forks invalid target {op.target!r}"))
            elif op.kind == "init" and where.startswith("handler"):
                out.append(("ForkTargetInvalid", f"{where} contains init"))
    for e, n in sorted(post_sites.items()):
        if n > 1:
            out.append(("DuplicateId", f"event {e!r} posted {n} times; events are single-shot"))
    for tgt, n in sorted(fork_targets.items()):
        if n > 1:
            out.append(("ForkTargetInvalid", f"thread {tgt!r} is forked {n} times"))

    # Lock balance and proper nesting within each task body.
    for where, ops in bodies:
        held: list[LockId] = []
        for op in ops:
            if op.kind == "lock":
                if op.obj in held:
                    out.append(("UnbalancedLock", f"{where} re-acquires held lock {op.obj!r}"))
                held.append(op.obj)
            elif op.kind == "unlock":
                if not held or held[-1] != op.obj:
                    out.append(("UnbalancedLock", f"{where} unlocks {op.obj!r} out of order"))
                    if op.obj in held:
                        held.remove(op.obj)
                else:
                    held.pop()
        if held:
            out.append(("UnbalancedLock", f"{where} ends holding {held!r}"))
    return out


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------

NOT_FORKED = ("not_forked",)
IDLE = ("idle",)
FINISHED = ("finished",)


def _running(event: EventId | None, pc: int) -> tuple:
    return ("running", event, pc)


class State:
    """Immutable program state: thread statuses, queues, lock table, store."""

    __slots__ = ("program", "thread_status", "queues", "lock_owner", "store",
                 "executed_count", "_key", "_hash")

    def __init__(self, program, thread_status, queues, lock_owner, store, executed_count):
        self.program = program
        self.thread_status = thread_status
        self.queues = queues
        self.lock_owner = lock_owner
        self.store = store
        self.executed_count = executed_count
        self._key = (
            tuple(thread_status[t] for t in program.thread_ids),
            tuple(queues.get(t, ()) for t in program.thread_ids),
            tuple(lock_owner.get(l) for l in program.lock_ids),
            tuple(store[v] for v in program.var_ids),
        )
        self._hash = hash(self._key)

    @property
    def key(self) -> tuple:
        return self._key

    def fingerprint(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        return isinstance(other, State) and self._key == other._key

    def __hash__(self) -> int:
        return self._hash

    def store_items(self) -> tuple:
        return tuple(sorted(self.store.items()))


def initial_state(p: ProgramSpec) -> State:
    status: dict[ThreadId, tuple] = {}
    queues: dict[ThreadId, tuple] = {}
    for t in p.threads:
        if t.has_queue:
            status[t.id] = IDLE
            queues[t.id] = ()
        elif t.start == "forked":
            status[t.id] = NOT_FORKED
        elif not t.script:
            status[t.id] = FINISHED
        else:
            status[t.id] = _running(None, 0)
    return State(p, status, queues, {l: None for l in p.locks}, dict(p.var_init), 0)


def next_transition(s: State, t: ThreadId) -> Transition | None:
    """The unique next transition of ``t``'s current task, enabled or blocked."""
    sp = s.program.thread(t)
    st = s.thread_status[t]
    if st[0] == "finished":
        return None
    if sp.has_queue:
        if st[0] == "running":
            return s.program.task_transitions(TaskId(t, st[1]))[st[2]]
        q = s.queues[t]
        if not q:
            return None
        return s.program.task_transitions(TaskId(t, q[0]))[0]
    if st[0] == "not_forked":
        ops = s.program.task_transitions(TaskId(t, None))
        return ops[0] if ops else None
    return s.program.task_transitions(TaskId(t, None))[st[2]]


def is_enabled(s: State, r: Transition) -> bool:
    op = r.op
    if op.kind == "begin":
        st = s.thread_status[r.thread]
        q = s.queues.get(r.thread, ())
        return st == IDLE and bool(q) and q[0] == op.event
    if op.kind == "lock":
        return s.lock_owner[op.obj] is None
    if op.kind == "init":
        return s.thread_status[r.thread][0] != "not_forked"
    return True


def execute(s: State, r: Transition) -> State:
    """Deterministically apply an enabled transition; the input state is unchanged."""
    if not is_enabled(s, r):
        raise NotEnabled(f"{r!r} is not enabled")
    status = dict(s.thread_status)
    queues = s.queues
    locks = s.lock_owner
    store = s.store
    op = r.op
    t = r.thread

    if op.kind == "begin":
        queues = dict(queues)
        queues[t] = queues[t][1:]
        status[t] = _running(op.event, 1)
    elif op.kind == "end":
        status[t] = IDLE
    else:
        if op.kind == "post":
            queues = dict(queues)
            queues[op.dest] = queues[op.dest] + (op.event,)
        elif op.kind == "write":
            store = dict(store)
            store[op.var] = op.val
        elif op.kind == "lock":
            locks = dict(locks)
            locks[op.obj] = t
        elif op.kind == "unlock":
            locks = dict(locks)
            locks[op.obj] = None
        elif op.kind == "fork":
            status[op.target] = _running(None, 0)
        # read / init / assert only advance the task's pc
        task = r.task
        pc = r.step + 1
        if task.event is None and pc == len(s.program.task_transitions(task)):
            status[t] = FINISHED
        else:
            status[t] = _running(task.event, pc)
    return State(s.program, status, queues, locks, store, s.executed_count + 1)


def enabled_threads(s: State) -> set[ThreadId]:
    out = set()
    for t in s.program.thread_ids:
        r = next_transition(s, t)
        if r is not None and is_enabled(s, r):
            out.add(t)
    return out


def enabled_set(s: State) -> set[Transition]:
    out = set()
    for t in s.program.thread_ids:
        r = next_transition(s, t)
        if r is not None and is_enabled(s, r):
            out.add(r)
    return out


def next_trans(s: State) -> dict[ThreadId, Transition]:
    """Next transitions of all threads, enabled or blocked."""
    out = {}
    for t in s.program.thread_ids:
        r = next_transition(s, t)
        if r is not None:
            out[t] = r
    return out


def executable_event(s: State, t: ThreadId) -> EventId | None:
    """Event whose handler can perform the next transition on queue thread ``t``."""
    st = s.thread_status[t]
    if st[0] == "running":
        return st[1]
    q = s.queues.get(t, ())
    return q[0] if q else None


def blocked_events(s: State, t: ThreadId) -> tuple[EventId, ...]:
    """Events in ``t``'s queue that are not the executable one."""
    st = s.thread_status[t]
    q = s.queues.get(t, ())
    if st[0] == "running":
        return q
    return q[1:]


def exec_tasks(s: State) -> set[TaskId]:
    out = set()
    for t in s.program.thread_ids:
        sp = s.program.thread(t)
        if sp.has_queue:
            e = executable_event(s, t)
            if e is not None:
                out.add(TaskId(t, e))
        elif next_transition(s, t) is not None:
            out.add(TaskId(t, None))
    return out


def blocked_tasks(s: State) -> set[TaskId]:
    out = set()
    for t in s.program.thread_ids:
        if s.program.thread(t).has_queue:
            for e in blocked_events(s, t):
                out.add(TaskId(t, e))
    return out


# ---------------------------------------------------------------------------
# Deadlock cycles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeadlockCycle:
    """Blocked lock transitions in cyclic blocked-by order, canonically rotated."""

    transitions: tuple[Transition, ...]

    @property
    def dc(self) -> frozenset:
        return frozenset(self.transitions)

    @staticmethod
    def from_cycle(cycle: list[Transition]) -> "DeadlockCycle":
        lo = min(range(len(cycle)), key=lambda i: cycle[i].sort_key())
        return DeadlockCycle(tuple(cycle[lo:] + cycle[:lo]))

    def describe(self) -> list[dict]:
        return [tr.describe() for tr in self.transitions]


def detect_deadlock_cycles(s: State) -> frozenset[DeadlockCycle]:
    """All blocked-by cycles over blocked Lock transitions in ``s``."""
    blocked: dict[ThreadId, Transition] = {}
    waits_for: dict[ThreadId, ThreadId] = {}
    for t in s.program.thread_ids:
        r = next_transition(s, t)
        if r is not None and r.op.kind == "lock" and not is_enabled(s, r):
            owner = s.lock_owner[r.op.obj]
            blocked[t] = r
            waits_for[t] = owner
    cycles = set()
    for start in blocked:
        path: list[ThreadId] = []
        seen_at: dict[ThreadId, int] = {}
        t = start
        while t in waits_for and t not in seen_at:
            seen_at[t] = len(path)
            path.append(t)
            t = waits_for[t]
        if t in seen_at:
            cyc = path[seen_at[t]:]
            cycles.add(DeadlockCycle.from_cycle([blocked[x] for x in cyc]))
    return frozenset(cycles)
