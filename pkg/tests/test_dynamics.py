import math

import numpy as np
import pytest

from rqmsim.dynamics import (
    DecoherenceSpec,
    IdealClock,
    TwoStateVector,
    abl_oracle_check,
    abl_probability,
    aggregate_perspective,
    decohere,
    disturbance_profile,
    disturbance_world_template,
    history_state,
    measurement_unitary,
    pw_conditional_state,
    pw_probability,
    stable_fact_deficit,
    stable_fact_grid,
)
from rqmsim.errors import (
    ImpossibleOutcomeError,
    InvalidStateError,
    MissingEventError,
    SpaceMismatchError,
)
from rqmsim.eventgraph import World, record_measurement
from rqmsim.qcore import (
    CNOT,
    CompositeSpace,
    HADAMARD,
    ObservableSpec,
    PAULI_X,
    PAULI_Z,
    StateVector,
    born_probabilities,
    commutes,
    identity,
    partial_trace,
    qubits,
)

Z_OBS = ObservableSpec.from_matrix("pauli-z", PAULI_Z)
X_OBS = ObservableSpec.from_matrix("pauli-x", PAULI_X)

KET0 = np.array([1.0, 0.0], dtype=complex)
PLUS = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)


def qubit_state(amps, name="S"):
    return StateVector(CompositeSpace([(name, 2)]),
                       np.asarray(amps, dtype=complex))


def world_with(names, first_factor, seed=0):
    space = qubits(*names)
    amps = np.asarray(first_factor, dtype=complex)
    for _ in names[1:]:
        amps = np.kron(amps, KET0)
    return World(space, StateVector(space, amps), seed)


# ---------------------------------------------------------------------------
# measurement unitaries
# ---------------------------------------------------------------------------

def test_z_measurement_coupling_is_cnot():
    assert np.allclose(measurement_unitary(Z_OBS, 2), CNOT)


def test_x_measurement_coupling_is_basis_changed_cnot():
    expected = np.kron(HADAMARD, identity(2)) @ CNOT \
        @ np.kron(HADAMARD, identity(2))
    assert np.max(np.abs(measurement_unitary(X_OBS, 2) - expected)) < 1e-12


def test_measurement_coupling_copies_amplitudes():
    alpha, beta = 0.6, 0.8
    joint = np.kron(np.array([alpha, beta]), KET0)
    out = measurement_unitary(Z_OBS, 2) @ joint
    expected = np.array([alpha, 0.0, 0.0, beta])
    assert np.allclose(out, expected)


def test_measurement_coupling_commutes_with_the_observable():
    u = measurement_unitary(X_OBS, 2)
    lifted = np.kron(PAULI_X, identity(2))
    assert commutes(u, lifted)
    # equivalent statement: U (X ⊗ I) U† = X ⊗ I
    assert np.max(np.abs(u @ lifted @ u.conj().T - lifted)) < 1e-12


def test_measurement_coupling_needs_pointer_capacity():
    three = ObservableSpec.from_matrix("trit", np.diag([2.0, 1.0, 0.0]))
    with pytest.raises(InvalidStateError):
        measurement_unitary(three, 2)


# ---------------------------------------------------------------------------
# decoherence
# ---------------------------------------------------------------------------

def test_full_decoherence_kills_off_diagonals():
    w = world_with(("S", "E1", "E2", "E3"), PLUS)
    decohere(w, DecoherenceSpec("S", ("E1", "E2", "E3"), Z_OBS, 0.0))
    rho = partial_trace(w.bookkeeping_state, ("S",)).matrix
    assert abs(rho[0, 1]) < 1e-10
    # branch structure: all four qubits perfectly correlated
    amps = w.bookkeeping_state.amplitudes
    assert abs(abs(amps[0]) - 1 / math.sqrt(2)) < 1e-10
    assert abs(abs(amps[-1]) - 1 / math.sqrt(2)) < 1e-10
    assert np.sum(np.abs(amps) > 1e-12) == 2


def test_overlap_one_is_a_noop():
    w = world_with(("S", "E1"), PLUS)
    before = w.bookkeeping_state.amplitudes.copy()
    decohere(w, DecoherenceSpec("S", ("E1",), Z_OBS, 1.0))
    assert np.max(np.abs(w.bookkeeping_state.amplitudes - before)) < 1e-12


def test_partial_overlap_scales_the_off_diagonal():
    # 2x2 partial-trace oracle: rho_01 = alpha * conj(beta) * overlap
    alpha, beta = 0.6, 0.8
    for overlap in (0.25, 0.5, 0.9):
        w = world_with(("S", "E1"), (alpha, beta))
        decohere(w, DecoherenceSpec("S", ("E1",), Z_OBS, overlap))
        rho = partial_trace(w.bookkeeping_state, ("S",)).matrix
        assert abs(rho[0, 1] - alpha * beta * overlap) < 1e-12


def test_environment_must_be_fresh():
    w = world_with(("S", "E1"), PLUS)
    decohere(w, DecoherenceSpec("S", ("E1",), Z_OBS, 0.0))
    with pytest.raises(InvalidStateError):
        decohere(w, DecoherenceSpec("S", ("E1",), Z_OBS, 0.0))


def test_overlap_outside_unit_interval_rejected():
    with pytest.raises(InvalidStateError):
        DecoherenceSpec("S", ("E1",), Z_OBS, 1.5)


# ---------------------------------------------------------------------------
# stable facts
# ---------------------------------------------------------------------------

def test_deficit_vanishes_under_full_decoherence():
    w = world_with(("S", "E1"), PLUS)
    decohere(w, DecoherenceSpec("S", ("E1",), Z_OBS, 0.0))
    assert stable_fact_deficit(w, "bob", "S", X_OBS, Z_OBS) < 1e-10


def test_deficit_vanishes_after_a_sharp_record():
    w = world_with(("S", "A"), PLUS, seed=2)
    record_measurement(w, "A", "S", Z_OBS)
    assert stable_fact_deficit(w, "bob", "S", X_OBS, Z_OBS) < 1e-10


def test_coherent_case_has_half_a_unit_of_interference():
    # oracle: P(X=+1) = 1/2 + Re(alpha conj(beta)) * overlap, mixture = 1/2
    w = world_with(("S", "E1"), PLUS)
    decohere(w, DecoherenceSpec("S", ("E1",), Z_OBS, 1.0))
    eps = stable_fact_deficit(w, "bob", "S", X_OBS, Z_OBS)
    assert abs(eps - 0.5) < 1e-10


def test_commuting_query_sees_no_interference():
    for overlap in (0.0, 0.5, 1.0):
        w = world_with(("S", "E1"), (0.6, 0.8))
        decohere(w, DecoherenceSpec("S", ("E1",), Z_OBS, overlap))
        assert stable_fact_deficit(w, "bob", "S", Z_OBS, Z_OBS) < 1e-10


def test_deficit_requires_a_recorded_variable():
    w = world_with(("S", "E1"), PLUS)
    with pytest.raises(MissingEventError):
        stable_fact_deficit(w, "bob", "S", X_OBS, Z_OBS)


def test_deficit_grid_is_monotone():
    overlaps = np.linspace(1.0, 0.0, 10)
    rows = stable_fact_grid((1 / math.sqrt(2), 1 / math.sqrt(2)), overlaps,
                            X_OBS, Z_OBS)
    values = [eps for _, eps in rows]
    assert all(values[i + 1] <= values[i] + 1e-12
               for i in range(len(values) - 1))
    assert values[0] == pytest.approx(0.5, abs=1e-10)
    assert values[-1] < 1e-10


# ---------------------------------------------------------------------------
# record disturbance
# ---------------------------------------------------------------------------

def test_profile_endpoints_and_monotonicity():
    template = disturbance_world_template()
    strengths = [0.0, 0.5, 1.0]
    trials = 4000
    rows = disturbance_profile(template, Z_OBS, X_OBS, strengths, trials,
                               master_seed=7)
    assert rows[0][1] == 1.0  # no probe, exact
    sigma = 3.0 * math.sqrt(0.25 / trials)
    assert abs(rows[-1][1] - 0.5) <= sigma
    # analytic curve (1 + cos(s*pi/2)) / 2 at the midpoint
    mid_expected = (1.0 + math.cos(0.5 * math.pi / 2.0)) / 2.0
    assert abs(rows[1][1] - mid_expected) <= 3.0 * math.sqrt(
        mid_expected * (1 - mid_expected) / trials)
    assert rows[0][1] >= rows[1][1] - sigma
    assert rows[1][1] >= rows[2][1] - sigma


def test_commuting_probe_never_disturbs():
    template = disturbance_world_template()
    rows = disturbance_profile(template, Z_OBS, Z_OBS, [0.0, 0.3, 0.7, 1.0],
                               500, master_seed=8)
    assert all(fidelity == 1.0 for _, fidelity in rows)


def test_profile_rejects_bad_strengths():
    template = disturbance_world_template()
    with pytest.raises(InvalidStateError):
        disturbance_profile(template, Z_OBS, X_OBS, [0.0, 1.5], 10)


# ---------------------------------------------------------------------------
# pre/post-selected probabilities
# ---------------------------------------------------------------------------

def test_abl_plus_then_ground_pins_the_intermediate_value():
    # oracle: (1/2) / (1/2 + 0) = 1
    tsv = TwoStateVector(qubit_state(PLUS), qubit_state(KET0))
    probs = abl_probability(tsv, Z_OBS)
    assert probs[1.0] == pytest.approx(1.0, abs=1e-12)
    assert probs[-1.0] == pytest.approx(0.0, abs=1e-12)


def test_abl_consistent_eigenstate():
    tsv = TwoStateVector(qubit_state(KET0), qubit_state(KET0))
    probs = abl_probability(tsv, Z_OBS)
    assert probs[1.0] == pytest.approx(1.0, abs=1e-12)


def test_abl_orthogonal_boundaries_are_impossible():
    tsv = TwoStateVector(qubit_state(KET0), qubit_state((0.0, 1.0)))
    with pytest.raises(ImpossibleOutcomeError):
        abl_probability(tsv, Z_OBS)


def test_abl_distribution_normalizes():
    rng = np.random.default_rng(40)
    for _ in range(25):
        pre = rng.normal(size=2) + 1j * rng.normal(size=2)
        post = rng.normal(size=2) + 1j * rng.normal(size=2)
        tsv = TwoStateVector(qubit_state(pre / np.linalg.norm(pre)),
                             qubit_state(post / np.linalg.norm(post)))
        total = sum(abl_probability(tsv, Z_OBS).values())
        assert abs(total - 1.0) < 1e-10


def test_abl_oracle_agrees_on_the_worked_examples():
    cases = [
        TwoStateVector(qubit_state(PLUS), qubit_state(KET0)),
        TwoStateVector(qubit_state(KET0), qubit_state(KET0)),
        TwoStateVector(qubit_state(PLUS), qubit_state(PLUS)),
    ]
    for i, tsv in enumerate(cases):
        assert abl_oracle_check(tsv, Z_OBS, 100_000, seed=50 + i) < 0.01


def test_abl_symmetric_boundaries_are_unbiased():
    tsv = TwoStateVector(qubit_state(PLUS), qubit_state(PLUS))
    probs = abl_probability(tsv, Z_OBS)
    assert probs[1.0] == pytest.approx(0.5, abs=1e-12)


def test_abl_identity_observable_is_trivial():
    ident = ObservableSpec("one", identity(2), [1.0], [identity(2)])
    tsv = TwoStateVector(qubit_state(PLUS), qubit_state(KET0))
    probs = abl_probability(tsv, ident)
    assert probs[1.0] == pytest.approx(1.0, abs=1e-12)
    assert abl_oracle_check(tsv, ident, 10_000, seed=60) < 1e-12


def test_abl_time_reversal_invariance():
    rng = np.random.default_rng(70)
    for _ in range(20):
        pre = rng.normal(size=2) + 1j * rng.normal(size=2)
        post = rng.normal(size=2) + 1j * rng.normal(size=2)
        u1, _ = np.linalg.qr(rng.normal(size=(2, 2))
                             + 1j * rng.normal(size=(2, 2)))
        u2, _ = np.linalg.qr(rng.normal(size=(2, 2))
                             + 1j * rng.normal(size=(2, 2)))
        tsv = TwoStateVector(qubit_state(pre / np.linalg.norm(pre)),
                             qubit_state(post / np.linalg.norm(post)), u1, u2)
        forward = abl_probability(tsv, Z_OBS)
        backward = abl_probability(tsv.time_reversed(), Z_OBS)
        for value in forward:
            assert abs(forward[value] - backward[value]) < 1e-10


# ---------------------------------------------------------------------------
# relational time
# ---------------------------------------------------------------------------

def test_clock_shift_advances_readings():
    clock = IdealClock(8)
    u = clock.shift_unitary()
    for t in range(8):
        shifted = u @ clock.time_state(t)
        expected = clock.time_state((t + 1) % 8)
        assert np.max(np.abs(shifted - expected)) < 1e-9


def test_clock_projectors_resolve_identity():
    clock = IdealClock(5)
    total = sum(clock.time_projector(t) for t in range(5))
    assert np.max(np.abs(total - identity(5))) < 1e-12


def test_clock_reading_projectors_transform_covariantly():
    # E(t + t') = e^{-i H t'} E(t) e^{+i H t'}
    clock = IdealClock(6)
    for ticks in (1, 2, 5):
        u = clock.shift_unitary(ticks)
        for t in range(6):
            moved = u @ clock.time_projector(t) @ u.conj().T
            expected = clock.time_projector((t + ticks) % 6)
            assert np.max(np.abs(moved - expected)) < 1e-9


def precession_setup(d=8):
    clock = IdealClock(d)
    hamiltonian = (math.pi / 4.0) * PAULI_X
    initial = qubit_state(KET0)
    constraint = history_state(clock, initial, hamiltonian)
    return clock, hamiltonian, initial, constraint


def closed_form_step(hamiltonian):
    # independent oracle: 2x2 rotation in closed form, powered by matmul
    theta = math.pi / 4.0  # |H| coefficient
    return (math.cos(theta) * identity(2)
            - 1j * math.sin(theta) * PAULI_X)


def test_conditional_states_reproduce_schroedinger_evolution():
    clock, hamiltonian, initial, constraint = precession_setup()
    u_step = closed_form_step(hamiltonian)
    expected = initial.amplitudes.copy()
    for t in range(8):
        conditional = pw_conditional_state(constraint, clock, t)
        assert np.max(np.abs(conditional.amplitudes - expected)) < 1e-9
        expected = u_step @ expected


def test_conditional_state_at_zero_is_the_initial_state():
    clock, _, initial, constraint = precession_setup()
    conditional = pw_conditional_state(constraint, clock, 0)
    assert np.max(np.abs(conditional.amplitudes - initial.amplitudes)) < 1e-12


def test_conditional_state_fails_off_support():
    clock = IdealClock(8)
    space = CompositeSpace([("C", 8), ("S", 2)])
    amps = np.zeros(16, dtype=complex)
    amps[3 * 2 + 0] = 1.0  # clock reads 3, system |0>
    frozen = StateVector(space, amps)
    with pytest.raises(ImpossibleOutcomeError):
        pw_conditional_state(frozen, clock, 5)
    with pytest.raises(SpaceMismatchError):
        pw_conditional_state(frozen, clock, 9)


def test_pw_probabilities_match_born_rule_at_every_reading():
    clock, hamiltonian, initial, constraint = precession_setup()
    u_step = closed_form_step(hamiltonian)
    psi = initial.amplitudes.copy()
    for t in range(8):
        probs = pw_probability(constraint, clock, t, Z_OBS, "S")
        direct = born_probabilities(qubit_state(psi), Z_OBS, ["S"])
        for value in direct:
            assert abs(probs[value] - direct[value]) < 1e-9
        psi = u_step @ psi


def test_pw_static_hamiltonian_is_time_independent():
    clock = IdealClock(6)
    constraint = history_state(clock, qubit_state(PLUS), np.zeros((2, 2)))
    first = pw_probability(constraint, clock, 0, Z_OBS, "S")
    for t in range(1, 6):
        probs = pw_probability(constraint, clock, t, Z_OBS, "S")
        for value in first:
            assert abs(probs[value] - first[value]) < 1e-12


def test_pw_maximally_mixed_conditional_is_uniform():
    clock = IdealClock(4)
    bell = StateVector(qubits("S", "T"),
                       np.array([1.0, 0.0, 0.0, 1.0]) / math.sqrt(2.0))
    constraint = history_state(clock, bell, np.zeros((4, 4)))
    probs = pw_probability(constraint, clock, 2, Z_OBS, "S")
    assert probs[1.0] == pytest.approx(0.5, abs=1e-12)
    assert probs[-1.0] == pytest.approx(0.5, abs=1e-12)


def test_history_state_rejects_clock_id_collision():
    clock = IdealClock(4, system_id="S")
    with pytest.raises(SpaceMismatchError):
        history_state(clock, qubit_state(KET0), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_unanimous_environment_has_a_definite_value():
    w = world_with(("S", "E1", "E2", "E3", "E4", "E5"), KET0, seed=5)
    for env in ("E1", "E2", "E3", "E4", "E5"):
        record_measurement(w, env, "S", Z_OBS, pointer=env)
    members = ("E1", "E2", "E3", "E4", "E5")
    assert aggregate_perspective(w, members, Z_OBS) == 1.0


def test_tied_votes_yield_no_value():
    # two qubits measured by two constituents each; fifth holds no record
    space = qubits("S1", "S2", "E1", "E2", "E3", "E4", "E5")
    amps = np.kron(KET0, np.array([0.0, 1.0], dtype=complex))
    for _ in range(5):
        amps = np.kron(amps, KET0)
    w = World(space, StateVector(space, amps), 6)
    record_measurement(w, "E1", "S1", Z_OBS, pointer="E1")
    record_measurement(w, "E2", "S1", Z_OBS, pointer="E2")
    record_measurement(w, "E3", "S2", Z_OBS, pointer="E3")
    record_measurement(w, "E4", "S2", Z_OBS, pointer="E4")
    members = ("E1", "E2", "E3", "E4", "E5")
    assert aggregate_perspective(w, members, Z_OBS) is None


def test_simple_majority_carries():
    # majority-count oracle: 3 of 5 record -1, 2 record +1
    space = qubits("S1", "S2", "E1", "E2", "E3", "E4", "E5")
    amps = np.kron(np.array([0.0, 1.0], dtype=complex), KET0)
    for _ in range(5):
        amps = np.kron(amps, KET0)
    w = World(space, StateVector(space, amps), 7)
    for env in ("E1", "E2", "E3"):
        record_measurement(w, env, "S1", Z_OBS, pointer=env)  # value -1
    for env in ("E4", "E5"):
        record_measurement(w, env, "S2", Z_OBS, pointer=env)  # value +1
    members = ("E1", "E2", "E3", "E4", "E5")
    assert aggregate_perspective(w, members, Z_OBS) == -1.0


def test_aggregate_requires_constituents():
    w = world_with(("S", "E1"), KET0)
    with pytest.raises(InvalidStateError):
        aggregate_perspective(w, (), Z_OBS)
