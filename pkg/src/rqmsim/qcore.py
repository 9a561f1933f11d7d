"""Finite-dimensional linear algebra: labeled composite spaces, states,
observables, Born probabilities, projection and observable transport.

Everything here is immutable after construction and all operations are pure
functions, so values can be shared freely between concurrent trial runners.

Index convention: the first subsystem is the most significant factor, i.e.
``|a⟩ ⊗ |b⟩`` maps basis index ``(i, j)`` to flat index ``i * dim_b + j``
(plain ``numpy.kron`` order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import (
    ImpossibleOutcomeError,
    InvalidStateError,
    SpaceMismatchError,
)

SystemId = str


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=complex, copy=True)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompositeSpace:
    """An ordered list of labeled subsystems spanning a tensor-product space."""

    subsystems: tuple[tuple[SystemId, int], ...]

    def __init__(self, subsystems: Iterable[tuple[SystemId, int]],
                 tol: Tolerances = DEFAULT_TOLERANCES):
        subs = tuple((str(name), int(dim)) for name, dim in subsystems)
        if not subs:
            raise SpaceMismatchError("a composite space needs at least one subsystem")
        ids = [name for name, _ in subs]
        if len(set(ids)) != len(ids):
            raise SpaceMismatchError(f"duplicate subsystem ids in {ids}")
        total = 1
        for name, dim in subs:
            if dim < 2:
                raise SpaceMismatchError(f"subsystem {name!r} has dimension {dim} < 2")
            total *= dim
        if total > tol.dimension_cap:
            raise SpaceMismatchError(
                f"total dimension {total} exceeds cap {tol.dimension_cap}")
        object.__setattr__(self, "subsystems", subs)

    @property
    def ids(self) -> tuple[SystemId, ...]:
        return tuple(name for name, _ in self.subsystems)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(dim for _, dim in self.subsystems)

    @property
    def total_dim(self) -> int:
        out = 1
        for _, dim in self.subsystems:
            out *= dim
        return out

    def axis(self, system: SystemId) -> int:
        for i, (name, _) in enumerate(self.subsystems):
            if name == system:
                return i
        raise SpaceMismatchError(f"unknown subsystem {system!r}")

    def dim(self, system: SystemId) -> int:
        return self.subsystems[self.axis(system)][1]

    def axes(self, systems: Sequence[SystemId]) -> tuple[int, ...]:
        return tuple(self.axis(s) for s in systems)

    def subspace(self, keep: Sequence[SystemId]) -> "CompositeSpace":
        """Subspace of the listed subsystems, preserving this space's order."""
        keep_set = set(keep)
        missing = keep_set - set(self.ids)
        if missing:
            raise SpaceMismatchError(f"unknown subsystems {sorted(missing)}")
        return CompositeSpace(
            [(name, dim) for name, dim in self.subsystems if name in keep_set])


def qubits(*names: SystemId) -> CompositeSpace:
    """Composite space of two-level subsystems with the given ids."""
    return CompositeSpace([(name, 2) for name in names])


@dataclass(frozen=True, eq=False)
class StateVector:
    """Normalized pure state over a :class:`CompositeSpace`."""

    space: CompositeSpace
    amplitudes: np.ndarray = field(repr=False)

    def __init__(self, space: CompositeSpace, amplitudes: np.ndarray,
                 tol: Tolerances = DEFAULT_TOLERANCES):
        amps = np.asarray(amplitudes, dtype=complex).reshape(-1)
        if amps.shape[0] != space.total_dim:
            raise SpaceMismatchError(
                f"amplitude length {amps.shape[0]} != total dimension {space.total_dim}")
        norm = float(np.linalg.norm(amps))
        if abs(norm - 1.0) > tol.norm_atol:
            raise InvalidStateError(f"state norm {norm} deviates from 1 beyond tolerance")
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "amplitudes", _readonly(amps))

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def density_matrix(self) -> "DensityMatrix":
        return DensityMatrix(self.space, np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, unit-trace, positive-semidefinite operator on a labeled space."""

    space: CompositeSpace
    matrix: np.ndarray = field(repr=False)

    def __init__(self, space: CompositeSpace, matrix: np.ndarray,
                 tol: Tolerances = DEFAULT_TOLERANCES):
        mat = np.asarray(matrix, dtype=complex)
        d = space.total_dim
        if mat.shape != (d, d):
            raise SpaceMismatchError(f"matrix shape {mat.shape} != ({d}, {d})")
        if np.max(np.abs(mat - mat.conj().T)) > tol.hermitian_atol:
            raise InvalidStateError("density matrix is not Hermitian within tolerance")
        tr = complex(np.trace(mat))
        if abs(tr - 1.0) > tol.trace_atol:
            raise InvalidStateError(f"density matrix trace {tr} deviates from 1")
        evals = np.linalg.eigvalsh(mat)
        if float(evals.min()) < -tol.psd_atol:
            raise InvalidStateError(
                f"density matrix has negative eigenvalue {evals.min()}")
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "matrix", _readonly(mat))

    def purity(self) -> float:
        return float(np.trace(self.matrix @ self.matrix).real)


@dataclass(frozen=True, eq=False)
class ObservableSpec:
    """Named Hermitian observable with a cached spectral decomposition.

    Eigenvalues are stored in descending order; eigenvalues closer than the
    merge tolerance are collapsed into a single eigenspace whose reported
    value is their mean.
    """

    name: str
    operator: np.ndarray = field(repr=False)
    eigenvalues: tuple[float, ...]
    projectors: tuple[np.ndarray, ...] = field(repr=False)

    def __init__(self, name: str, operator: np.ndarray,
                 eigenvalues: Sequence[float], projectors: Sequence[np.ndarray],
                 tol: Tolerances = DEFAULT_TOLERANCES):
        op = np.asarray(operator, dtype=complex)
        projs = tuple(_readonly(p) for p in projectors)
        vals = tuple(float(v) for v in eigenvalues)
        d = op.shape[0]
        if op.shape != (d, d):
            raise SpaceMismatchError("observable operator must be square")
        if len(vals) != len(projs) or not vals:
            raise InvalidStateError("eigenvalues and projectors must pair up")
        if np.max(np.abs(op - op.conj().T)) > tol.hermitian_atol:
            raise InvalidStateError(f"observable {name!r} is not Hermitian")
        total = sum(projs)
        if np.max(np.abs(total - np.eye(d))) > tol.projector_atol:
            raise InvalidStateError(f"projectors of {name!r} do not resolve the identity")
        for i, p in enumerate(projs):
            for q in projs[i + 1:]:
                if np.max(np.abs(p @ q)) > tol.projector_atol:
                    raise InvalidStateError(f"projectors of {name!r} are not orthogonal")
        recon = sum(v * p for v, p in zip(vals, projs))
        if np.max(np.abs(recon - op)) > tol.reconstruction_atol:
            raise InvalidStateError(
                f"projectors of {name!r} do not reconstruct the operator")
        object.__setattr__(self, "name", str(name))
        object.__setattr__(self, "operator", _readonly(op))
        object.__setattr__(self, "eigenvalues", vals)
        object.__setattr__(self, "projectors", projs)

    @classmethod
    def from_matrix(cls, name: str, matrix: np.ndarray,
                    tol: Tolerances = DEFAULT_TOLERANCES) -> "ObservableSpec":
        """Build from a Hermitian matrix, merging near-degenerate eigenvalues."""
        mat = np.asarray(matrix, dtype=complex)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise SpaceMismatchError("observable matrix must be square")
        if np.max(np.abs(mat - mat.conj().T)) > tol.hermitian_atol:
            raise InvalidStateError(f"observable {name!r} is not Hermitian")
        w, v = np.linalg.eigh(mat)
        order = np.argsort(w)[::-1]
        w = w[order]
        v = v[:, order]
        values: list[float] = []
        projectors: list[np.ndarray] = []
        start = 0
        for i in range(1, len(w) + 1):
            # chain rule: consecutive gaps below the merge tolerance share a space
            if i == len(w) or (w[i - 1] - w[i]) > tol.eigenvalue_merge:
                block = v[:, start:i]
                projectors.append(block @ block.conj().T)
                values.append(float(np.mean(w[start:i])))
                start = i
        if len(values) < len(w):
            # eigenvalues were identified: the operator becomes the merged
            # spectral form so the spectral invariants stay exact
            mat = sum(val * p for val, p in zip(values, projectors))
        return cls(name, mat, values, projectors, tol)

    @property
    def dim(self) -> int:
        return self.operator.shape[0]

    def outcome_index(self, value: float, tol: Tolerances = DEFAULT_TOLERANCES) -> int:
        for i, v in enumerate(self.eigenvalues):
            if abs(v - value) <= tol.eigenvalue_merge:
                return i
        raise ImpossibleOutcomeError(
            f"{value} is not an eigenvalue of {self.name!r}")


# ---------------------------------------------------------------------------
# standard matrices
# ---------------------------------------------------------------------------

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2.0)
CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]],
                dtype=complex)


def identity(dim: int) -> np.ndarray:
    return np.eye(dim, dtype=complex)


def computational_observable(dim: int) -> ObservableSpec:
    """Basis-index observable ``diag(0 .. dim-1)`` on a ``dim``-level system.

    Eigenvalues are deliberately kept in register order (outcome ``i`` pairs
    with projector ``|i⟩⟨i|``) rather than sorted, so a pointer register read
    maps an outcome index straight back to the stored record slot.
    """
    projectors = []
    for i in range(dim):
        p = np.zeros((dim, dim), dtype=complex)
        p[i, i] = 1.0
        projectors.append(p)
    return ObservableSpec(f"basis({dim})", np.diag(np.arange(dim, dtype=float)),
                          list(range(dim)), projectors)


def is_unitary(matrix: np.ndarray, tol: Tolerances = DEFAULT_TOLERANCES) -> bool:
    mat = np.asarray(matrix, dtype=complex)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        return False
    return bool(np.max(np.abs(mat.conj().T @ mat - np.eye(mat.shape[0]))) <= tol.unitary_atol)


def expm_hermitian(hamiltonian: np.ndarray, t: float) -> np.ndarray:
    """``exp(-i * hamiltonian * t)`` via the spectral decomposition."""
    h = np.asarray(hamiltonian, dtype=complex)
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-1j * w * t)) @ v.conj().T


# ---------------------------------------------------------------------------
# low-level tensor helpers (shared with the event layer)
# ---------------------------------------------------------------------------

def apply_matrix_on_axes(amps: np.ndarray, dims: Sequence[int],
                         matrix: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Apply ``matrix`` to the listed tensor axes of a flat amplitude vector."""
    n = len(dims)
    tensor = amps.reshape(dims)
    rest = [i for i in range(n) if i not in axes]
    perm = list(axes) + rest
    moved = tensor.transpose(perm)
    d_t = int(np.prod([dims[a] for a in axes])) if axes else 1
    flat = moved.reshape(d_t, -1)
    out = matrix @ flat
    out = out.reshape([dims[a] for a in perm])
    inv = np.argsort(perm)
    return out.transpose(inv).reshape(-1)


def embed_matrix(matrix: np.ndarray, sub_axes: Sequence[int],
                 dims: Sequence[int]) -> np.ndarray:
    """Lift a matrix acting on ``sub_axes`` (in that order) to the full space."""
    n = len(dims)
    rest = [i for i in range(n) if i not in sub_axes]
    d_rest = int(np.prod([dims[i] for i in rest])) if rest else 1
    big = np.kron(np.asarray(matrix, dtype=complex), np.eye(d_rest))
    perm = list(sub_axes) + rest
    inv = np.argsort(perm)
    shaped = big.reshape([dims[a] for a in perm] * 2)
    reorder = list(inv) + [n + i for i in inv]
    d = int(np.prod(dims))
    return shaped.transpose(reorder).reshape(d, d)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def tensor_product(a, b):
    """Tensor product of two states, density matrices or plain operators.

    Labeled operands must not share subsystem ids; the result lives on the
    concatenated space. Plain ``numpy`` arrays combine by ``kron``.
    """
    if isinstance(a, StateVector) and isinstance(b, StateVector):
        space = _joined_space(a.space, b.space)
        return StateVector(space, np.kron(a.amplitudes, b.amplitudes))
    if isinstance(a, DensityMatrix) and isinstance(b, DensityMatrix):
        space = _joined_space(a.space, b.space)
        return DensityMatrix(space, np.kron(a.matrix, b.matrix))
    if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
        return np.kron(a, b)
    raise TypeError(
        f"cannot tensor {type(a).__name__} with {type(b).__name__}")


def _joined_space(a: CompositeSpace, b: CompositeSpace) -> CompositeSpace:
    overlap = set(a.ids) & set(b.ids)
    if overlap:
        raise SpaceMismatchError(f"subsystem ids {sorted(overlap)} appear on both operands")
    return CompositeSpace(a.subsystems + b.subsystems)


def apply_unitary(state: StateVector, u: np.ndarray, targets: Sequence[SystemId],
                  tol: Tolerances = DEFAULT_TOLERANCES) -> StateVector:
    """Apply a unitary to the listed subsystems (matrix axes in target order)."""
    axes = state.space.axes(targets)
    d_t = int(np.prod([state.space.dims[a] for a in axes]))
    u = np.asarray(u, dtype=complex)
    if u.shape != (d_t, d_t):
        raise SpaceMismatchError(
            f"unitary shape {u.shape} does not match target dimension {d_t}")
    if not is_unitary(u, tol):
        raise InvalidStateError("operator is not unitary within tolerance")
    out = apply_matrix_on_axes(state.amplitudes, state.space.dims, u, axes)
    return StateVector(state.space, out)


def partial_trace(rho, keep: Sequence[SystemId],
                  tol: Tolerances = DEFAULT_TOLERANCES) -> DensityMatrix:
    """Reduce a state or density matrix to the listed subsystems.

    Subsystem order of the result follows the original space, not ``keep``.
    """
    if not keep:
        raise SpaceMismatchError("keep list must be nonempty")
    space = rho.space
    keep_axes = sorted(space.axes(keep))
    dims = space.dims
    n = len(dims)
    sub = space.subspace(keep)
    if isinstance(rho, StateVector):
        tensor = rho.amplitudes.reshape(dims)
        ket = list(range(n))
        bra = [i if i not in keep_axes else n + i for i in range(n)]
        out_idx = [i for i in keep_axes] + [n + i for i in keep_axes]
        mat = np.einsum(tensor, ket, tensor.conj(), bra, out_idx)
    elif isinstance(rho, DensityMatrix):
        tensor = rho.matrix.reshape(dims + dims)
        ket = list(range(n))
        bra = [i if i not in keep_axes else n + i for i in range(n)]
        out_idx = [i for i in keep_axes] + [n + i for i in keep_axes]
        mat = np.einsum(tensor, ket + bra, out_idx)
    else:
        raise TypeError(f"cannot trace {type(rho).__name__}")
    d = sub.total_dim
    return DensityMatrix(sub, mat.reshape(d, d), tol)


def born_probabilities(state, obs: ObservableSpec, targets: Sequence[SystemId],
                       tol: Tolerances = DEFAULT_TOLERANCES) -> dict[float, float]:
    """Outcome distribution of ``obs`` measured on the listed subsystems."""
    space = state.space
    axes = space.axes(targets)
    d_t = int(np.prod([space.dims[a] for a in axes]))
    if obs.dim != d_t:
        raise SpaceMismatchError(
            f"observable {obs.name!r} has dimension {obs.dim}, targets span {d_t}")
    probs: dict[float, float] = {}
    if isinstance(state, StateVector):
        for value, proj in zip(obs.eigenvalues, obs.projectors):
            branch = apply_matrix_on_axes(state.amplitudes, space.dims, proj, axes)
            probs[value] = max(float(np.vdot(branch, branch).real), 0.0)
    elif isinstance(state, DensityMatrix):
        for value, proj in zip(obs.eigenvalues, obs.projectors):
            full = embed_matrix(proj, axes, space.dims)
            probs[value] = max(float(np.trace(full @ state.matrix).real), 0.0)
    else:
        raise TypeError(f"cannot measure {type(state).__name__}")
    total = sum(probs.values())
    if abs(total - 1.0) > 10 * tol.norm_atol:
        raise InvalidStateError(f"Born probabilities sum to {total}")
    return probs


def project(state: StateVector, obs: ObservableSpec, targets: Sequence[SystemId],
            outcome: float, tol: Tolerances = DEFAULT_TOLERANCES
            ) -> tuple[StateVector, float]:
    """Condition a pure state on one outcome; returns (state, probability)."""
    idx = obs.outcome_index(outcome, tol)
    axes = state.space.axes(targets)
    branch = apply_matrix_on_axes(state.amplitudes, state.space.dims,
                                  obs.projectors[idx], axes)
    p = float(np.vdot(branch, branch).real)
    if p <= tol.zero_probability:
        raise ImpossibleOutcomeError(
            f"outcome {outcome} of {obs.name!r} has probability {p}")
    return StateVector(state.space, branch / np.sqrt(p)), p


def observables_match(a: ObservableSpec, b: ObservableSpec,
                      atol: float | None = None) -> bool:
    """Same spectrum and same eigenspaces, compared projector-by-projector.

    Projector comparison (Frobenius distance after eigenvalue-ordered
    pairing) ignores eigenvector phases, which are gauge.
    """
    bound = DEFAULT_TOLERANCES.basis_match_atol if atol is None else atol
    if a.dim != b.dim or len(a.eigenvalues) != len(b.eigenvalues):
        return False
    for va, vb in zip(a.eigenvalues, b.eigenvalues):
        if abs(va - vb) > bound:
            return False
    for pa, pb in zip(a.projectors, b.projectors):
        if float(np.linalg.norm(pa - pb)) > bound:
            return False
    return True


def commutes(a, b, tol: float | None = None) -> bool:
    """True iff the max entry of ``|AB - BA|`` is below tolerance."""
    mat_a = a.operator if isinstance(a, ObservableSpec) else np.asarray(a, dtype=complex)
    mat_b = b.operator if isinstance(b, ObservableSpec) else np.asarray(b, dtype=complex)
    if mat_a.shape != mat_b.shape:
        raise SpaceMismatchError(
            f"dimension mismatch {mat_a.shape} vs {mat_b.shape}")
    bound = DEFAULT_TOLERANCES.commute_atol if tol is None else tol
    return bool(np.max(np.abs(mat_a @ mat_b - mat_b @ mat_a)) < bound)


def heisenberg_transform(v: ObservableSpec, u: np.ndarray, inverse: bool = False,
                         tol: Tolerances = DEFAULT_TOLERANCES) -> ObservableSpec:
    """Transport an observable through a unitary.

    With ``inverse=False`` returns ``U V U⁻¹``; with ``inverse=True`` returns
    ``U⁻¹ V U``. Eigenvalues are unchanged, eigenprojectors conjugated.
    """
    u = np.asarray(u, dtype=complex)
    if not is_unitary(u, tol):
        raise InvalidStateError("transport operator is not unitary")
    if u.shape[0] != v.dim:
        raise SpaceMismatchError(
            f"unitary dimension {u.shape[0]} != observable dimension {v.dim}")
    w = u.conj().T if inverse else u
    projs = [w @ p @ w.conj().T for p in v.projectors]
    op = sum(val * p for val, p in zip(v.eigenvalues, projs))
    tag = "inv" if inverse else "fwd"
    return ObservableSpec(f"{v.name}~{tag}", op, v.eigenvalues, projs, tol)
