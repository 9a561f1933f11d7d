"""Interaction builders and quantitative diagnostics: measurement unitaries,
decoherence couplings, the stable-facts deficit, record-disturbance
profiling, pre/post-selected (ABL) probabilities, conditional-on-a-clock
states, and perspective aggregation over many constituents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import (
    ImpossibleOutcomeError,
    InvalidStateError,
    MissingEventError,
    SpaceMismatchError,
)
from .eventgraph import World, learn, record_measurement, relative_state
from .qcore import (
    CompositeSpace,
    DensityMatrix,
    ObservableSpec,
    StateVector,
    SystemId,
    born_probabilities,
    expm_hermitian,
    identity,
    is_unitary,
    observables_match,
    partial_trace,
    qubits,
)


# ---------------------------------------------------------------------------
# measurement model
# ---------------------------------------------------------------------------

def measurement_unitary(obs: ObservableSpec, pointer_dim: int,
                        tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """Von Neumann coupling ``|v_i⟩|p⟩ -> |v_i⟩|p+i mod d⟩``.

    A generalized controlled-shift in the observable's eigenbasis, acting on
    (measured subsystems, pointer register). It commutes with ``obs ⊗ I``,
    so repeating a measurement never disturbs its own record.
    """
    n = len(obs.eigenvalues)
    if pointer_dim < n:
        raise InvalidStateError(
            f"pointer dimension {pointer_dim} cannot store {n} outcomes "
            f"of {obs.name!r}")
    shift = np.zeros((pointer_dim, pointer_dim), dtype=complex)
    for i in range(pointer_dim):
        shift[(i + 1) % pointer_dim, i] = 1.0
    u = np.zeros((obs.dim * pointer_dim,) * 2, dtype=complex)
    power = identity(pointer_dim)
    for proj in obs.projectors:
        u += np.kron(proj, power)
        power = shift @ power
    if not is_unitary(u, tol):
        raise InvalidStateError(
            f"measurement coupling for {obs.name!r} failed the unitarity check")
    return u


# ---------------------------------------------------------------------------
# decoherence
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DecoherenceSpec:
    """Basis-selective entangling of a system with fresh environment qubits.

    ``overlap`` is the inner product of the two conditional environment
    states: 0 means a perfect record (full decoherence), 1 means no record.
    """

    system: SystemId
    environment: tuple[SystemId, ...]
    basis: ObservableSpec
    overlap: float

    def __init__(self, system: SystemId, environment: Sequence[SystemId],
                 basis: ObservableSpec, overlap: float):
        if not 0.0 <= overlap <= 1.0:
            raise InvalidStateError(f"overlap {overlap} outside [0, 1]")
        if not environment:
            raise InvalidStateError("at least one environment qubit is required")
        object.__setattr__(self, "system", system)
        object.__setattr__(self, "environment", tuple(environment))
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "overlap", float(overlap))


def _coupling_matrix(basis: ObservableSpec, overlap: float) -> np.ndarray:
    if len(basis.projectors) != 2:
        raise InvalidStateError(
            f"decoherence couplings need a two-outcome basis, "
            f"{basis.name!r} has {len(basis.projectors)}")
    s = math.sqrt(max(0.0, 1.0 - overlap * overlap))
    rotate = np.array([[overlap, -s], [s, overlap]], dtype=complex)
    return np.kron(basis.projectors[0], identity(2)) \
        + np.kron(basis.projectors[1], rotate)


def decohere(world: World, spec: DecoherenceSpec) -> World:
    """Entangle each environment qubit with the system in ``spec.basis``.

    No event is recorded: decoherence is not an observation. Conditional
    environment states overlap by ``spec.overlap``, so one qubit multiplies
    the system's basis off-diagonals by that factor.
    """
    world.space.axis(spec.system)
    if spec.basis.dim != world.dim(spec.system):
        raise SpaceMismatchError(
            f"basis {spec.basis.name!r} does not fit system {spec.system!r}")
    for env in spec.environment:
        if world.dim(env) != 2:
            raise SpaceMismatchError(f"environment {env!r} must be a qubit")
        if env in world._used_environments or env in world._used_registers:
            raise InvalidStateError(f"environment {env!r} is not fresh")
    matrix = world._cached(
        ("couple", spec.basis.name, spec.overlap), spec.basis.operator,
        lambda: _coupling_matrix(spec.basis, spec.overlap))
    label = f"couple:{spec.basis.name}:{spec.overlap}"
    for env in spec.environment:
        world.apply_unitary(matrix, (spec.system, env), name=label)
        world._used_environments.add(env)
    world.decoherence_log.append(spec)
    return world


# ---------------------------------------------------------------------------
# stable facts
# ---------------------------------------------------------------------------

def stable_fact_deficit(world: World, bob: SystemId, system: SystemId,
                        q_obs: ObservableSpec, v_obs: ObservableSpec) -> float:
    """How far ``bob``'s predictions are from a classical mixture over the
    recorded variable.

    Compares ``P(q)`` computed directly from bob's relative state against
    ``Σ_i P(q|v_i) P(v_i)``; the maximum absolute gap over outcomes ``q`` is
    the interference the record failed to suppress. Zero certifies the
    recorded variable as a stable fact for ``bob``.
    """
    recorded = False
    for ev in world.events:
        if ev.targets == (system,) and ev.obs_spec is not None \
                and observables_match(ev.obs_spec, v_obs,
                                      world.tol.basis_match_atol):
            recorded = True
            break
    if not recorded:
        for spec in world.decoherence_log:
            if spec.system == system and observables_match(
                    spec.basis, v_obs, world.tol.basis_match_atol):
                recorded = True
                break
    if not recorded:
        raise MissingEventError(
            f"no interaction recorded {v_obs.name!r} on {system!r}")
    rho = relative_state(world, bob, (system,))
    direct = born_probabilities(rho, q_obs, (system,), world.tol)
    weights = born_probabilities(rho, v_obs, (system,), world.tol)
    mixture = {q: 0.0 for q in direct}
    for value, p_v in weights.items():
        if p_v <= world.tol.zero_probability:
            continue
        proj = v_obs.projectors[v_obs.outcome_index(value, world.tol)]
        conditional = DensityMatrix(rho.space, proj @ rho.matrix @ proj / p_v,
                                    world.tol)
        for q, p_q in born_probabilities(conditional, q_obs, (system,),
                                         world.tol).items():
            mixture[q] += p_v * p_q
    return max(abs(direct[q] - mixture[q]) for q in direct)


def stable_fact_grid(initial_amplitudes: Sequence[complex],
                     overlaps: Sequence[float], q_obs: ObservableSpec,
                     v_obs: ObservableSpec) -> list[tuple[float, float]]:
    """Deficit versus environment overlap for a single decohered qubit."""
    rows = []
    for c in overlaps:
        space = qubits("S", "E")
        amps = np.kron(np.asarray(initial_amplitudes, dtype=complex),
                       np.array([1.0, 0.0]))
        world = World(space, StateVector(space, amps), seed=0)
        decohere(world, DecoherenceSpec("S", ("E",), v_obs, c))
        rows.append((float(c), stable_fact_deficit(world, "ext", "S",
                                                   q_obs, v_obs)))
    return rows


# ---------------------------------------------------------------------------
# record disturbance profiling
# ---------------------------------------------------------------------------

def disturbance_world_template(
        initial_amplitudes: Sequence[complex] = (1 / math.sqrt(2),) * 2,
        *, system: SystemId = "S", observer: SystemId = "A",
        ancilla: SystemId = "M", learner: SystemId = "B") -> World:
    """Four-qubit template world for :func:`disturbance_profile`."""
    space = qubits(system, observer, ancilla, learner)
    amps = np.asarray(initial_amplitudes, dtype=complex)
    rest = np.zeros(8, dtype=complex)
    rest[0] = 1.0
    return World(space, StateVector(space, np.kron(amps, rest)), seed=0)


def disturbance_profile(world_template: World, record_obs: ObservableSpec,
                        probe_obs: ObservableSpec, strengths: Sequence[float],
                        trials: int, *, system: SystemId = "S",
                        observer: SystemId = "A", ancilla: SystemId = "M",
                        learner: SystemId = "B",
                        master_seed: int = 0) -> list[tuple[float, float]]:
    """Retrieval fidelity of a record under a partial probe measurement.

    Per trial the observer records ``record_obs`` on the system, an ancilla
    couples to the pointer register in the ``probe_obs`` basis with coupling
    angle ``s·π/2`` (environment-state overlap ``cos(s·π/2)``), and a
    learner then reads the pointer. Fidelity is the frequency with which
    the read value matches the recorded one.
    """
    for s in strengths:
        if not 0.0 <= s <= 1.0:
            raise InvalidStateError(f"strength {s} outside [0, 1]")
    if probe_obs.dim != world_template.dim(observer):
        raise SpaceMismatchError(
            f"probe {probe_obs.name!r} does not act on the pointer register")
    rows = []
    for si, s in enumerate(strengths):
        overlap = math.cos(s * math.pi / 2.0)
        agreements = 0
        for t in range(trials):
            seed = np.random.SeedSequence(entropy=master_seed, spawn_key=(si, t))
            world = world_template.fork(seed)
            recorded = record_measurement(world, observer, system, record_obs)
            if s > 0.0:
                decohere(world, DecoherenceSpec(observer, (ancilla,),
                                                probe_obs, overlap))
            read = learn(world, learner, recorded)
            agreements += int(read.value == recorded.value)
        rows.append((float(s), agreements / trials))
    return rows


# ---------------------------------------------------------------------------
# pre- and post-selected probabilities
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TwoStateVector:
    """Forwards-evolving and backwards-evolving boundary conditions.

    ``u1`` evolves the preselected state up to the intermediate measurement,
    ``u2`` evolves its result up to the postselection. Identities if omitted.
    """

    pre: StateVector
    post: StateVector
    u1: np.ndarray = field(repr=False)
    u2: np.ndarray = field(repr=False)

    def __init__(self, pre: StateVector, post: StateVector,
                 u1: np.ndarray | None = None, u2: np.ndarray | None = None,
                 tol: Tolerances = DEFAULT_TOLERANCES):
        if pre.space.total_dim != post.space.total_dim:
            raise SpaceMismatchError("pre and post states live on different spaces")
        d = pre.space.total_dim
        u1 = identity(d) if u1 is None else np.asarray(u1, dtype=complex)
        u2 = identity(d) if u2 is None else np.asarray(u2, dtype=complex)
        for u in (u1, u2):
            if u.shape != (d, d):
                raise SpaceMismatchError("intermediate unitary has wrong shape")
            if not is_unitary(u, tol):
                raise InvalidStateError("intermediate operator is not unitary")
        object.__setattr__(self, "pre", pre)
        object.__setattr__(self, "post", post)
        object.__setattr__(self, "u1", u1)
        object.__setattr__(self, "u2", u2)

    def time_reversed(self) -> "TwoStateVector":
        """Swap pre and post and invert the two leg unitaries."""
        return TwoStateVector(self.post, self.pre,
                              self.u2.conj().T, self.u1.conj().T)


def abl_probability(tsv: TwoStateVector, obs: ObservableSpec,
                    tol: Tolerances = DEFAULT_TOLERANCES) -> dict[float, float]:
    """Intermediate-outcome distribution conditioned on both boundaries.

    ``P(v_i) = |⟨post|U2 P_i U1|pre⟩|² / Σ_j |⟨post|U2 P_j U1|pre⟩|²``.
    """
    if obs.dim != tsv.pre.space.total_dim:
        raise SpaceMismatchError(
            f"observable {obs.name!r} does not act on the boundary space")
    mid = tsv.u1 @ tsv.pre.amplitudes
    back = tsv.u2.conj().T @ tsv.post.amplitudes
    weights = {}
    for value, proj in zip(obs.eigenvalues, obs.projectors):
        amp = complex(np.vdot(back, proj @ mid))
        weights[value] = abs(amp) ** 2
    denom = sum(weights.values())
    if denom <= tol.zero_probability:
        raise ImpossibleOutcomeError(
            "postselection is impossible for every intermediate outcome")
    return {v: w / denom for v, w in weights.items()}


def abl_oracle_check(tsv: TwoStateVector, obs: ObservableSpec, trials: int,
                     *, seed: int = 0,
                     tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    """Monte Carlo cross-check of :func:`abl_probability`.

    Samples the intermediate outcome by the Born rule on the forwards state,
    accepts the trial when a final projective measurement lands on the
    postselected state, and returns the largest gap between conditional
    frequencies and the analytic distribution.
    """
    analytic = abl_probability(tsv, obs, tol)
    rng = np.random.default_rng(seed)
    mid = tsv.u1 @ tsv.pre.amplitudes
    post = tsv.post.amplitudes
    forward = []
    accept = []
    for proj in obs.projectors:
        branch = proj @ mid
        p = float(np.vdot(branch, branch).real)
        forward.append(max(p, 0.0))
        if p > tol.zero_probability:
            amp = complex(np.vdot(post, tsv.u2 @ (branch / math.sqrt(p))))
            accept.append(min(abs(amp) ** 2, 1.0))
        else:
            accept.append(0.0)
    forward = np.asarray(forward)
    forward = forward / forward.sum()
    counts = rng.multinomial(trials, forward)
    accepted = np.array([rng.binomial(n, a) if n > 0 else 0
                         for n, a in zip(counts, accept)], dtype=float)
    total = accepted.sum()
    if total == 0:
        raise ImpossibleOutcomeError("no trial survived the postselection")
    freqs = accepted / total
    return max(abs(freqs[i] - analytic[v])
               for i, v in enumerate(obs.eigenvalues))


# ---------------------------------------------------------------------------
# relational time
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdealClock:
    """Finite cyclic clock: one tick of its shift Hamiltonian advances the
    reading by one, and the reading projectors resolve the identity."""

    dimension: int
    system_id: SystemId = "C"

    def __post_init__(self):
        if self.dimension < 2:
            raise InvalidStateError("a clock needs at least two readings")

    def shift_hamiltonian(self) -> np.ndarray:
        d = self.dimension
        k = np.arange(d)
        t = np.arange(d)
        fourier = np.exp(2j * math.pi * np.outer(t, k) / d) / math.sqrt(d)
        return (fourier * (2.0 * math.pi * k / d)) @ fourier.conj().T

    def shift_unitary(self, ticks: int = 1) -> np.ndarray:
        return expm_hermitian(self.shift_hamiltonian(), float(ticks))

    def time_state(self, t: int) -> np.ndarray:
        state = np.zeros(self.dimension, dtype=complex)
        state[t] = 1.0
        return state

    def time_projector(self, t: int) -> np.ndarray:
        if not 0 <= t < self.dimension:
            raise SpaceMismatchError(
                f"reading {t} outside clock range 0..{self.dimension - 1}")
        return np.outer(self.time_state(t), self.time_state(t).conj())


def history_state(clock: IdealClock, initial: StateVector,
                  hamiltonian: np.ndarray) -> StateVector:
    """Normalized constraint state ``Σ_t |t⟩ ⊗ e^{-iHt}|ψ₀⟩ / √d``."""
    if clock.system_id in initial.space.ids:
        raise SpaceMismatchError(
            f"clock id {clock.system_id!r} collides with the evolving system")
    d = clock.dimension
    step = expm_hermitian(np.asarray(hamiltonian, dtype=complex), 1.0)
    space = CompositeSpace(((clock.system_id, d),) + initial.space.subsystems)
    rest = initial.amplitudes.copy()
    amps = np.zeros(space.total_dim, dtype=complex)
    block = initial.space.total_dim
    for t in range(d):
        amps[t * block:(t + 1) * block] = rest / math.sqrt(d)
        rest = step @ rest
    return StateVector(space, amps)


def pw_conditional_state(constraint_state: StateVector, clock: IdealClock,
                         t: int, tol: Tolerances = DEFAULT_TOLERANCES
                         ) -> StateVector:
    """State of everything but the clock, conditional on reading ``t``:
    contract ``⟨t|`` on the clock factor and renormalize."""
    space = constraint_state.space
    axis = space.axis(clock.system_id)
    if space.dims[axis] != clock.dimension:
        raise SpaceMismatchError("constraint state disagrees with clock dimension")
    if not 0 <= t < clock.dimension:
        raise SpaceMismatchError(
            f"reading {t} outside clock range 0..{clock.dimension - 1}")
    tensor = constraint_state.amplitudes.reshape(space.dims)
    sel = [slice(None)] * len(space.dims)
    sel[axis] = t
    branch = tensor[tuple(sel)].reshape(-1)
    norm = float(np.linalg.norm(branch))
    if norm * norm <= tol.zero_probability:
        raise ImpossibleOutcomeError(
            f"the constraint state has no support on clock reading {t}")
    rest = CompositeSpace(tuple(
        sub for i, sub in enumerate(space.subsystems) if i != axis))
    return StateVector(rest, branch / norm)


def pw_probability(constraint_state: StateVector, clock: IdealClock, t: int,
                   v_obs: ObservableSpec, system: SystemId,
                   tol: Tolerances = DEFAULT_TOLERANCES) -> dict[float, float]:
    """Outcome distribution of ``v_obs`` on ``system`` given clock reading
    ``t``: reduce the conditional state to the system, then apply the Born
    rule."""
    conditional = pw_conditional_state(constraint_state, clock, t, tol)
    reduced = partial_trace(conditional, (system,), tol)
    return born_probabilities(reduced, v_obs, (system,), tol)


# ---------------------------------------------------------------------------
# perspective aggregation
# ---------------------------------------------------------------------------

def aggregate_perspective(world: World, constituents: Sequence[SystemId],
                          obs: ObservableSpec,
                          threshold: float = 0.5) -> float | None:
    """Value of ``obs`` relative to a collection of constituents.

    Each constituent votes with its most recent unsuperseded record of
    ``obs``; a value wins when a strict majority (fraction above
    ``threshold``) of all constituents voted for it.
    """
    if not constituents:
        raise InvalidStateError("constituents list must be nonempty")
    votes: dict[float, int] = {}
    for member in constituents:
        latest = None
        for ev in world.events:
            if ev.observer == member and ev.superseded_by is None \
                    and ev.obs_spec is not None:
                latest = ev
        if latest is None:
            continue
        if observables_match(latest.obs_spec, obs, world.tol.basis_match_atol):
            votes[latest.value] = votes.get(latest.value, 0) + 1
    total = len(constituents)
    for value, count in votes.items():
        if count > threshold * total:
            return value
    return None
