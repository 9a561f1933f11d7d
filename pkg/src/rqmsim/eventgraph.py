"""Per-observer ledgers of quantum events over a global bookkeeping state.

A :class:`World` holds one trial's history: a bookkeeping state vector, an
append-only event list and one ledger per observer. Measurement outcomes are
drawn by chained Born sampling: each new outcome is sampled from the state
conditioned on every projection whose record is still physically intact.
When a later interaction re-measures a pointer register in a conflicting
basis, the old record is destroyed and its projection stops conditioning the
chain, which is re-derived by replaying the interaction history. Observer-relative
states replay the same history but condition only on the events in that
observer's ledger.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import (
    ImpossibleOutcomeError,
    InvalidStateError,
    MissingEventError,
    RecordDestroyedError,
    SimulationError,
    SpaceMismatchError,
    UnrelatedEventsError,
)
from .qcore import (
    CompositeSpace,
    DensityMatrix,
    ObservableSpec,
    StateVector,
    SystemId,
    apply_matrix_on_axes,
    commutes,
    computational_observable,
    embed_matrix,
    expm_hermitian,
    is_unitary,
    observables_match,
    partial_trace,
)

EVENT_FIELDS = ("event_id", "observer", "system", "observable", "value",
                "clock", "superseded_by")

# below this total dimension, interaction matrices are embedded on the full
# space once per scenario and applied as single matmuls
_DENSE_LIMIT = 256


@dataclass(eq=False)
class QuantumEvent:
    """One actualized fact: a variable took a value relative to an observer.

    ``superseded_by`` points at the later event whose observable conflicts
    with this one on an overlapping target (set automatically when the
    pointer record is scrambled, or by :func:`relevance_prune` for conflicts
    on the measured system itself).
    """

    event_id: int
    observer: SystemId
    system: SystemId
    targets: tuple[SystemId, ...]
    observable: str
    value: float
    clock_reading: float | None
    relative_to: SystemId
    pointer: SystemId
    outcome_index: int
    superseded_by: int | None = None
    learned_from: int | None = None
    disturbed: bool = False
    # internal bookkeeping: what hit the pointer record, and when
    record_destroyed_by: int | None = field(default=None, repr=False)
    record_disturbed_op: int | None = field(default=None, repr=False)
    op_index: int = field(default=-1, repr=False)
    obs_spec: ObservableSpec | None = field(default=None, repr=False)
    value_scale: tuple[float, ...] = field(default=(), repr=False)

    @property
    def record_intact(self) -> bool:
        return self.record_destroyed_by is None and self.record_disturbed_op is None


def event_record(event: QuantumEvent) -> dict:
    """Serialization contract: exactly the seven public fields, fixed order."""
    return {
        "event_id": event.event_id,
        "observer": event.observer,
        "system": event.system,
        "observable": event.observable,
        "value": event.value,
        "clock": event.clock_reading,
        "superseded_by": event.superseded_by,
    }


def event_line(event: QuantumEvent) -> str:
    return json.dumps(event_record(event), separators=(",", ":"))


@dataclass(frozen=True)
class LedgerEntry:
    event_id: int
    learned_via: int | None = None


@dataclass
class Ledger:
    """Ordered record of the events an observer participated in or learned of."""

    owner: SystemId
    entries: list[LedgerEntry] = field(default_factory=list)

    def add(self, event_id: int, learned_via: int | None = None) -> None:
        if any(e.event_id == event_id for e in self.entries):
            return
        entry = LedgerEntry(event_id, learned_via)
        pos = len(self.entries)
        while pos > 0 and self.entries[pos - 1].event_id > event_id:
            pos -= 1
        self.entries.insert(pos, entry)

    def event_ids(self) -> tuple[int, ...]:
        return tuple(e.event_id for e in self.entries)


@dataclass(frozen=True)
class AgreementReport:
    """Outcome of a cross-perspective link check between two events."""

    event_a: int
    event_b: int
    values: tuple[float, float]
    agree: bool
    disturbed: bool


@dataclass(eq=False)
class _Op:
    """One history entry: an interaction unitary, optionally with a sampled
    pointer projection (measurement ops)."""

    matrix: np.ndarray
    targets: tuple[SystemId, ...]
    full: np.ndarray | None = None
    event_id: int | None = None
    register: SystemId | None = None
    outcome_index: int | None = None


def _matrix_key(matrix: np.ndarray) -> str:
    return hashlib.sha1(matrix.tobytes()).hexdigest()[:16]


class World:
    """One trial's interaction history, bookkeeping state, events and ledgers.

    A world is confined to a single trial execution; identical seeds and
    identical operation sequences replay to identical event values. Worlds
    of repeated trials may share a cache of embedded matrices and conflict
    verdicts through ``shared_cache``.
    """

    def __init__(self, space: CompositeSpace, initial_state: StateVector,
                 seed, *, strict: bool = False, shared_cache: dict | None = None,
                 tol: Tolerances = DEFAULT_TOLERANCES):
        if initial_state.space.subsystems != space.subsystems:
            raise SpaceMismatchError("initial state is not on the declared space")
        self.space = space
        self.tol = tol
        self.strict = strict
        self.rng = seed if isinstance(seed, np.random.Generator) \
            else np.random.default_rng(seed)
        self.events: list[QuantumEvent] = []
        self.ledgers: dict[SystemId, Ledger] = {}
        self.decoherence_log: list = []  # DecoherenceSpec entries, in order
        # the initial amplitudes are read-only; replays copy before mutating
        self._initial = np.asarray(initial_state.amplitudes)
        self._state = self._initial.copy()
        self._ops: list[_Op] = []
        self._dims = space.dims
        self._axis = {name: i for i, name in enumerate(space.ids)}
        self._subdims = {name: d for name, d in space.subsystems}
        self._dense = space.total_dim <= _DENSE_LIMIT
        self._used_registers: set[SystemId] = set()
        self._used_environments: set[SystemId] = set()
        # embedded matrices and conflict verdicts depend on the space, so a
        # shared cache is namespaced by the space layout
        root = shared_cache if shared_cache is not None else {}
        bucket = root.get(space.subsystems)
        if bucket is None:
            bucket = {}
            root[space.subsystems] = bucket
        self._cache_root = root
        self._cache = bucket

    # -- basic accessors ----------------------------------------------------

    @property
    def bookkeeping_state(self) -> StateVector:
        return StateVector(self.space, self._state)

    def dim(self, system: SystemId) -> int:
        try:
            return self._subdims[system]
        except KeyError:
            raise SpaceMismatchError(f"unknown subsystem {system!r}") from None

    def ledger(self, owner: SystemId) -> Ledger:
        if owner not in self.ledgers:
            self.ledgers[owner] = Ledger(owner)
        return self.ledgers[owner]

    def event(self, event_id: int) -> QuantumEvent:
        if not 0 <= event_id < len(self.events):
            raise MissingEventError(f"no event with id {event_id}")
        return self.events[event_id]

    def fork(self, seed) -> "World":
        """Fresh world on the same space and initial state, empty history."""
        return World(self.space, StateVector(self.space, self._initial), seed,
                     strict=self.strict, shared_cache=self._cache_root,
                     tol=self.tol)

    # -- tensor plumbing ----------------------------------------------------

    def _axes(self, targets: Sequence[SystemId]) -> tuple[int, ...]:
        try:
            return tuple(self._axis[t] for t in targets)
        except KeyError as exc:
            raise SpaceMismatchError(f"unknown subsystem {exc.args[0]!r}") from None

    def _cached(self, key, ref, build):
        """Name-keyed cache entry, guarded by operator identity so that two
        different operators sharing a name cannot poison each other."""
        hit = self._cache.get(key)
        if hit is not None and hit[0] is ref:
            return hit[1]
        value = build()
        self._cache[key] = (ref, value)
        return value

    def _embedded(self, matrix: np.ndarray, targets: tuple[SystemId, ...],
                  name: str) -> np.ndarray | None:
        if not self._dense:
            return None
        return self._cached(
            ("full", name, targets), matrix,
            lambda: embed_matrix(matrix, self._axes(targets), self._dims))

    def _apply_op(self, state: np.ndarray, op: _Op) -> np.ndarray:
        if op.full is not None:
            return op.full @ state
        return apply_matrix_on_axes(state, self._dims, op.matrix,
                                    self._axes(op.targets))

    def _register_slices(self, register: SystemId) -> list[np.ndarray]:
        key = ("ridx", register)
        slices = self._cache.get(key)
        if slices is None:
            axis = self._axis[register]
            flat = np.arange(int(np.prod(self._dims))).reshape(self._dims)
            slices = []
            for v in range(self._dims[axis]):
                sel = [slice(None)] * len(self._dims)
                sel[axis] = v
                slices.append(np.ascontiguousarray(flat[tuple(sel)].reshape(-1)))
            self._cache[key] = slices
        return slices

    def _register_probs(self, state: np.ndarray, register: SystemId) -> list[float]:
        weights = np.abs(state) ** 2
        return [float(weights[idx].sum()) for idx in self._register_slices(register)]

    def _project_register(self, state: np.ndarray, register: SystemId,
                          index: int) -> np.ndarray:
        idx = self._register_slices(register)[index]
        branch = state[idx]
        p = float(np.vdot(branch, branch).real)
        if p <= self.tol.zero_probability:
            raise ImpossibleOutcomeError(
                f"conditioning register {register!r} on index {index} "
                f"has probability {p}")
        out = np.zeros_like(state)
        out[idx] = branch / math.sqrt(p)
        return out

    def _replay(self, keep: Callable[[int], bool] | None = None) -> np.ndarray:
        """Re-derive the state: all interaction unitaries in order, projecting
        only on measurement ops whose event passes ``keep`` (default: events
        whose pointer record has not been destroyed)."""
        if keep is None:
            keep = lambda eid: self.events[eid].record_destroyed_by is None
        state = self._initial.copy()
        for op in self._ops:
            state = self._apply_op(state, op)
            if op.event_id is not None and op.outcome_index is not None \
                    and keep(op.event_id):
                state = self._project_register(state, op.register, op.outcome_index)
        return state

    # -- record-conflict detection -------------------------------------------

    def _embedded_pair(self, obs_a: ObservableSpec, targets_a: tuple[SystemId, ...],
                       obs_b: ObservableSpec, targets_b: tuple[SystemId, ...]):
        union = [name for name in self.space.ids
                 if name in targets_a or name in targets_b]
        dims = [self._subdims[name] for name in union]
        pos = {name: i for i, name in enumerate(union)}
        a = embed_matrix(obs_a.operator, [pos[t] for t in targets_a], dims)
        b = embed_matrix(obs_b.operator, [pos[t] for t in targets_b], dims)
        return a, b

    def _observables_conflict(self, obs_a: ObservableSpec,
                              targets_a: tuple[SystemId, ...],
                              obs_b: ObservableSpec,
                              targets_b: tuple[SystemId, ...]) -> bool:
        if not set(targets_a) & set(targets_b):
            return False
        key = ("conflict", obs_a.name, targets_a, obs_b.name, targets_b)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is obs_a.operator \
                and hit[1] is obs_b.operator:
            return hit[2]
        a, b = self._embedded_pair(obs_a, targets_a, obs_b, targets_b)
        verdict = not commutes(a, b, self.tol.commute_atol)
        self._cache[key] = (obs_a.operator, obs_b.operator, verdict)
        return verdict

    def _hits_record(self, obs: ObservableSpec, targets: tuple[SystemId, ...],
                     event: QuantumEvent) -> bool:
        """Does measuring ``obs`` on ``targets`` scramble ``event``'s pointer?"""
        if event.pointer not in targets:
            return False
        comp = self._comp_obs(self.dim(event.pointer))
        return self._observables_conflict(obs, targets, comp, (event.pointer,))

    def _unitary_hits_record(self, matrix: np.ndarray,
                             targets: tuple[SystemId, ...], name: str,
                             event: QuantumEvent) -> bool:
        if event.pointer not in targets:
            return False

        def build() -> bool:
            union = [n for n in self.space.ids
                     if n in targets or n == event.pointer]
            dims = [self._subdims[n] for n in union]
            pos = {n: i for i, n in enumerate(union)}
            u = embed_matrix(matrix, [pos[t] for t in targets], dims)
            comp = self._comp_obs(self.dim(event.pointer))
            c = embed_matrix(comp.operator, [pos[event.pointer]], dims)
            return not commutes(u, c, self.tol.commute_atol)

        return self._cached(("uhit", name, targets, event.pointer), matrix,
                            build)

    def _comp_obs(self, dim: int) -> ObservableSpec:
        key = ("comp", dim)
        obs = self._cache.get(key)
        if obs is None:
            obs = computational_observable(dim)
            self._cache[key] = obs
        return obs

    # -- interaction primitives ----------------------------------------------

    def apply_unitary(self, matrix: np.ndarray, targets: Sequence[SystemId],
                      name: str | None = None) -> None:
        """Append an interaction unitary (no event, no sampling).

        A unitary that fails to commute with some pointer register's basis
        marks that record disturbed: later reads of it stop being guaranteed
        to reproduce the original value. Having no outcome of its own, it
        cannot re-randomize an already-sampled branch, so the record's
        projection keeps conditioning the chain. ``name`` is an optional
        stable label used to cache the embedded matrix across trials.
        """
        targets = tuple(targets)
        matrix = np.asarray(matrix, dtype=complex)
        if name is None:
            name = _matrix_key(matrix)
        axes = self._axes(targets)
        d_t = math.prod(self._dims[a] for a in axes)
        if matrix.shape != (d_t, d_t):
            raise SpaceMismatchError(
                f"unitary shape {matrix.shape} does not match targets {targets}")
        def check_unitary() -> bool:
            if not is_unitary(matrix, self.tol):
                raise InvalidStateError("interaction operator is not unitary")
            return True

        self._cached(("uvalid", name, targets), matrix, check_unitary)
        op_index = len(self._ops)
        for ev in self.events:
            if ev.record_intact and self._unitary_hits_record(
                    matrix, targets, name, ev):
                ev.record_disturbed_op = op_index
        op = _Op(matrix, targets, full=self._embedded(matrix, targets, name))
        self._ops.append(op)
        self._state = self._apply_op(self._state, op)

    def _measure(self, observer: SystemId, targets: tuple[SystemId, ...],
                 obs: ObservableSpec, register: SystemId,
                 clock: float | None, learned_from: int | None = None,
                 value_scale: tuple[float, ...] | None = None) -> QuantumEvent:
        from .dynamics import measurement_unitary  # deferred: module cycle

        name = f"munit:{obs.name}:{self.dim(register)}"
        unitary = self._cached(
            ("munit", obs.name, self.dim(register)), obs.operator,
            lambda: measurement_unitary(obs, self.dim(register), tol=self.tol))
        event_id = len(self.events)
        op_index = len(self._ops)
        destroyed = [ev for ev in self.events
                     if ev.record_destroyed_by is None
                     and self._hits_record(obs, targets, ev)]
        op = _Op(unitary, targets + (register,), event_id=event_id,
                 register=register,
                 full=self._embedded(unitary, targets + (register,), name))
        self._ops.append(op)
        for ev in destroyed:
            ev.record_destroyed_by = event_id
            if ev.superseded_by is None:
                ev.superseded_by = event_id
        if destroyed:
            # dropped projections change the conditioning chain: re-derive
            self._state = self._replay()
        else:
            self._state = self._apply_op(self._state, op)
        probs = self._register_probs(self._state, register)
        total = 0.0
        for p in probs:
            total += p if p > self.tol.zero_probability else 0.0
        u = self.rng.random() * total
        index = len(probs) - 1
        acc = 0.0
        for i, p in enumerate(probs):
            if p <= self.tol.zero_probability:
                continue
            acc += p
            if u < acc:
                index = i
                break
        op.outcome_index = index
        self._state = self._project_register(self._state, register, index)
        scale = tuple(value_scale) if value_scale is not None else obs.eigenvalues
        value = scale[index] if index < len(scale) else float(index)
        event = QuantumEvent(
            event_id=event_id,
            observer=observer,
            system=targets[0],
            targets=targets,
            observable=obs.name,
            value=value,
            clock_reading=clock,
            relative_to=observer,
            pointer=register,
            outcome_index=index,
            learned_from=learned_from,
            op_index=op_index,
            obs_spec=obs,
            value_scale=scale,
        )
        self.events.append(event)
        self._used_registers.add(register)
        self.ledger(observer).add(event_id)
        return event


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def record_measurement(world: World, observer: SystemId, system,
                       obs: ObservableSpec, *, pointer: SystemId | None = None,
                       clock: float | None = None) -> QuantumEvent:
    """Measure ``obs`` on ``system`` relative to ``observer``.

    The interaction unitary entangles the measured subsystems with the
    observer's pointer register (the observer's own subsystem unless
    ``pointer`` names another register); the outcome is then sampled by the
    chained Born rule and recorded as an event in the observer's ledger.
    Relative to third parties the interaction remains the pure entangling
    unitary; their relative states show no collapse.
    """
    targets = (system,) if isinstance(system, str) else tuple(system)
    if not targets:
        raise SpaceMismatchError("measurement needs at least one target")
    register = pointer if pointer is not None else observer
    d_t = 1
    for t in targets:
        d_t *= world.dim(t)  # raises on unknown ids
    if observer in targets:
        raise InvalidStateError(f"observer {observer!r} cannot measure itself")
    if register in targets:
        raise InvalidStateError(
            f"pointer register {register!r} overlaps the measured targets")
    if register in world._used_registers:
        raise InvalidStateError(
            f"register {register!r} already holds a record; "
            "declare one register per measurement")
    if obs.dim != d_t:
        raise SpaceMismatchError(
            f"observable {obs.name!r} has dimension {obs.dim}, targets span {d_t}")
    if world.dim(register) < len(obs.eigenvalues):
        raise InvalidStateError(
            f"register {register!r} has dimension {world.dim(register)} "
            f"< {len(obs.eigenvalues)} outcomes of {obs.name!r}")
    return world._measure(observer, targets, obs, register, clock)


def relative_state(world: World, observer: SystemId,
                   targets: Sequence[SystemId]) -> DensityMatrix:
    """The state of ``targets`` relative to ``observer``.

    Re-derived by replaying the interaction history and conditioning on
    exactly the events in the observer's ledger (participated in or learned
    of). A fresh observer with an empty ledger gets the unconditioned
    reduced state.
    """
    targets = tuple(targets)
    if not targets:
        raise SpaceMismatchError("targets must be nonempty")
    for t in targets:
        world.dim(t)
    if observer in targets:
        raise SpaceMismatchError(
            f"targets of a relative state exclude the observer {observer!r}")
    known = set(world.ledger(observer).event_ids())
    state = world._replay(keep=lambda eid: eid in known)
    norm = float(np.linalg.norm(state))
    if norm <= math.sqrt(world.tol.zero_probability):
        raise ImpossibleOutcomeError(
            f"ledger of {observer!r} conditions the history onto a null branch")
    return partial_trace(StateVector(world.space, state / norm), targets,
                         world.tol)


def learn(world: World, learner: SystemId, source_event, *,
          pointer: SystemId | None = None,
          strict: bool | None = None) -> QuantumEvent:
    """Read another observer's record by measuring their pointer register.

    On an intact record the returned value provably equals the source
    event's value (checked). If the record was destroyed or disturbed by an
    intervening interaction, the value is sampled from the disturbed state
    and the event is flagged ``disturbed``; in strict mode the call instead
    raises :class:`RecordDestroyedError`.
    """
    src = source_event if isinstance(source_event, QuantumEvent) \
        else world.event(int(source_event))
    if src is not world.event(src.event_id):
        raise MissingEventError("source event does not belong to this world")
    if learner == src.observer:
        raise InvalidStateError(f"{learner!r} cannot learn its own record")
    disturbed = not src.record_intact
    use_strict = world.strict if strict is None else strict
    if disturbed and use_strict:
        raise RecordDestroyedError(
            f"record of event {src.event_id} was destroyed "
            f"(strict mode forbids reading it)")
    register = pointer if pointer is not None else learner
    key = ("ptrobs", src.pointer)
    named = world._cache.get(key)
    if named is None:
        comp = world._comp_obs(world.dim(src.pointer))
        named = ObservableSpec(f"ptr({src.pointer})", comp.operator,
                               comp.eigenvalues, comp.projectors, world.tol)
        world._cache[key] = named
    if register in world._used_registers:
        raise InvalidStateError(f"register {register!r} already holds a record")
    event = world._measure(learner, (src.pointer,), named, register, None,
                           learned_from=src.event_id,
                           value_scale=src.value_scale)
    event.disturbed = disturbed
    if not disturbed and event.value != src.value:
        raise SimulationError(
            "cross-perspective link violated on an intact record "
            f"(event {src.event_id} -> {event.event_id})")
    world.ledger(learner).add(src.event_id, learned_via=event.event_id)
    return event


def check_cross_perspective_link(world: World, event_a, event_b) -> AgreementReport:
    """Compare a source record with the event that learned it."""
    a = event_a if isinstance(event_a, QuantumEvent) else world.event(int(event_a))
    b = event_b if isinstance(event_b, QuantumEvent) else world.event(int(event_b))
    if b.learned_from != a.event_id:
        raise UnrelatedEventsError(
            f"event {b.event_id} did not learn from event {a.event_id}")
    disturbed = False
    if a.record_destroyed_by is not None and a.record_destroyed_by < b.event_id:
        disturbed = True
    if a.record_disturbed_op is not None and a.record_disturbed_op < b.op_index:
        disturbed = True
    return AgreementReport(
        event_a=a.event_id,
        event_b=b.event_id,
        values=(a.value, b.value),
        agree=a.value == b.value,
        disturbed=disturbed,
    )


def check_internal_consistency(world: World, w: SystemId, s: SystemId,
                               f: SystemId, obs: ObservableSpec, *,
                               pointers: Sequence[SystemId]) -> bool:
    """Internal-consistency check: ``w`` measures ``s`` in the basis ``f``
    used, then reads ``f``'s pointer; returns whether the two values match.

    ``pointers`` names the two fresh registers ``w`` uses, in order.
    """
    prior = None
    for ev in world.events:
        if ev.observer == f and ev.targets == (s,) and ev.obs_spec is not None \
                and ev.obs_spec.dim == obs.dim \
                and np.allclose(ev.obs_spec.operator, obs.operator,
                                atol=world.tol.hermitian_atol):
            prior = ev
    if prior is None:
        raise MissingEventError(
            f"{f!r} has not measured {s!r} in the {obs.name!r} basis")
    if len(pointers) != 2:
        raise InvalidStateError("the checking observer needs two registers")
    own = record_measurement(world, w, s, obs, pointer=pointers[0])
    read = learn(world, w, prior, pointer=pointers[1])
    return own.value == read.value


def relevance_prune(world: World, system: SystemId) -> list[int]:
    """Mark events on ``system`` superseded by later non-commuting events.

    Returns the ids newly marked; a second call returns an empty list.
    """
    world.dim(system)
    on_system = [ev for ev in world.events if system in ev.targets]
    newly: list[int] = []
    for i, earlier in enumerate(on_system):
        if earlier.superseded_by is not None:
            continue
        for later in on_system[i + 1:]:
            if earlier.obs_spec is None or later.obs_spec is None:
                continue
            if world._observables_conflict(later.obs_spec, later.targets,
                                           earlier.obs_spec, earlier.targets):
                earlier.superseded_by = later.event_id
                newly.append(earlier.event_id)
                break
    return newly


def has_value(world: World, system: SystemId, obs: ObservableSpec,
              elapsed: float = 0.0,
              hamiltonian: np.ndarray | None = None) -> float | None:
    """Colloquial "has a value": the most recent unsuperseded event on
    ``system`` fixes the value of ``obs`` iff its observable matches ``obs``
    transported back through ``exp(-i H elapsed)``; otherwise ``None``.

    Matching compares projector sets (eigenvalue-ordered pairing, Frobenius
    distance), so eigenvector phases do not matter.
    """
    if elapsed < 0:
        raise InvalidStateError("elapsed time must be nonnegative")
    world.dim(system)
    candidates = [ev for ev in world.events
                  if system in ev.targets and ev.superseded_by is None
                  and ev.obs_spec is not None]
    if not candidates:
        return None
    event = candidates[-1]
    query = obs
    if hamiltonian is not None and elapsed > 0:
        u = expm_hermitian(hamiltonian, elapsed)
        from .qcore import heisenberg_transform
        query = heisenberg_transform(obs, u, inverse=True, tol=world.tol)
    if observables_match(event.obs_spec, query, world.tol.basis_match_atol):
        return event.value
    return None
