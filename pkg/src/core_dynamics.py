# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
"""Leaky recurrent network map, its Jacobian and multi-step (cocycle) evaluation.

The state update is

    x[k+1] = G(u[k+1], x[k]) = (1 - alpha) x[k] + alpha tanh(W_r x[k] + W_in u[k+1] + W_fb psi(x[k]))

with psi(x) = W_o x for a linear readout and the feedback term omitted otherwise. An orbit
started at index k0 therefore consumes u[k0 + 1 .. k0 + n].
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pydantic

from errors import ConfigurationError
from input_space import InputSequence

logger = logging.getLogger(__name__)


class Activation(str, Enum):
    """Bounded activation functions. Only tanh (image (-1, 1)) is supported."""

    TANH = "tanh"


class ReadoutKind(str, Enum):
    """Readout map psi feeding the output back into the reservoir."""

    NONE = "none"
    LINEAR = "linear"


class InputDrivenSystem(Protocol):
    """Anything that can be driven by an `InputSequence` in batches of states."""

    @property
    def state_dim(self) -> int:
        """Dimension of the phase space."""
        ...

    @property
    def input_dim(self) -> int:
        """Number of input channels consumed per step."""
        ...

    @property
    def bound(self) -> float:
        """Half side L of the absorbing hypercube [-L, L]^N."""
        ...

    def drive(self, seq: InputSequence, first: int, last: int) -> np.ndarray:
        """Per-step input contribution for indices `first .. last`."""
        ...

    def advance(self, drive_row: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Map a (B, N) batch of states one step forward; leading stack axes broadcast."""
        ...


def _matrix(values, name: str, rows: int, cols: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, ndmin=2)
    if arr.size == 0 and rows * cols == 0:
        arr = np.zeros((rows, cols))
    if arr.shape != (rows, cols):
        raise ConfigurationError(f"{name} must be {rows}x{cols}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RnnParams:
    """All network matrices, the leak rate and the activation/readout descriptors.

    `w_o` is None when the readout is absent; `w_fb` must then be all zero.
    """

    alpha: float
    w_r: np.ndarray
    w_in: np.ndarray
    w_fb: Optional[np.ndarray] = None
    w_o: Optional[np.ndarray] = None
    activation: Activation = Activation.TANH
    bound: float = 1.0
    effective_recurrent: np.ndarray = field(init=False, repr=False)
    has_feedback: bool = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if Activation(self.activation) is not Activation.TANH or self.bound != 1.0:
            raise ConfigurationError("only tanh activation with L = 1 is supported")

        w_r = np.array(self.w_r, dtype=np.float64, ndmin=2)
        n_r = w_r.shape[0]
        w_r = _matrix(w_r, "W_r", n_r, n_r)
        w_in = np.array(self.w_in, dtype=np.float64, ndmin=2)
        if w_in.shape[0] != n_r or w_in.shape[1] == 0:
            raise ConfigurationError(f"W_in must have {n_r} rows and at least one column, got {w_in.shape}")
        w_in = _matrix(w_in, "W_in", n_r, w_in.shape[1])

        if self.w_o is not None:
            w_o = np.array(self.w_o, dtype=np.float64, ndmin=2)
            n_o = w_o.shape[0]
            w_o = _matrix(w_o, "W_o", n_o, n_r)
        else:
            w_o = None
            n_o = 0 if self.w_fb is None else np.array(self.w_fb, ndmin=2).shape[1]
        w_fb = np.zeros((n_r, n_o)) if self.w_fb is None else self.w_fb
        w_fb = _matrix(w_fb, "W_fb", n_r, n_o)
        if w_o is None and np.any(w_fb != 0.0):
            raise ConfigurationError("W_fb must be all zero when the readout is none")

        effective = w_r if w_o is None else w_r + w_fb @ w_o
        effective = np.array(effective)
        effective.setflags(write=False)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "w_r", w_r)
        object.__setattr__(self, "w_in", w_in)
        object.__setattr__(self, "w_fb", w_fb)
        object.__setattr__(self, "w_o", w_o)
        object.__setattr__(self, "effective_recurrent", effective)
        object.__setattr__(self, "has_feedback", w_o is not None and bool(np.any(w_fb != 0.0)))

    @property
    def readout(self) -> ReadoutKind:
        """Readout descriptor."""
        return ReadoutKind.NONE if self.w_o is None else ReadoutKind.LINEAR

    @property
    def n_r(self) -> int:
        """Number of reservoir neurons."""
        return self.w_r.shape[0]

    @property
    def n_i(self) -> int:
        """Input dimension."""
        return self.w_in.shape[1]

    @property
    def n_o(self) -> int:
        """Output dimension."""
        return self.w_fb.shape[1]

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(N_r, N_i, N_o)."""
        return self.n_r, self.n_i, self.n_o

    @property
    def state_dim(self) -> int:
        """Dimension of the phase space."""
        return self.n_r

    @property
    def input_dim(self) -> int:
        """Number of input channels consumed per step."""
        return self.n_i

    def drive(self, seq: InputSequence, first: int, last: int) -> np.ndarray:
        """Return W_in u[k] for k in `first .. last` as a (T, N_r) array.

        Accumulated column by column with elementwise products, so each row is independent of
        the window length.
        """
        if seq.n_inputs != self.n_i:
            raise ConfigurationError(f"input has {seq.n_inputs} channels, network expects {self.n_i}")
        values = seq.window(first, last)
        acc = values[:, 0:1] * self.w_in[:, 0]
        for j in range(1, self.n_i):
            acc = acc + values[:, j : j + 1] * self.w_in[:, j]
        return acc

    def pre_activation(self, drive_row: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Pre-activations xi for a batch, summed as W_r x, then + W_in u, then + W_fb psi(x)."""
        pre = states @ self.w_r.T
        pre = pre + drive_row
        if self.has_feedback:
            pre = pre + (states @ self.w_o.T) @ self.w_fb.T
        return pre

    def advance(self, drive_row: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Map a (B, N_r) or (S, B, N_r) batch one step forward given the precomputed input drive."""
        activated = np.tanh(self.pre_activation(drive_row, states))
        if self.alpha == 1.0:
            return activated
        return (1.0 - self.alpha) * states + self.alpha * activated

    def to_document(self) -> "RnnParamsDocument":
        """Structured, JSON-compatible description of the network."""
        return RnnParamsDocument(
            alpha=self.alpha,
            dims=list(self.dims),
            activation=self.activation.value,
            readout=self.readout.value,
            w_r=self.w_r.tolist(),
            w_in=self.w_in.tolist(),
            w_fb=self.w_fb.tolist(),
            w_o=None if self.w_o is None else self.w_o.tolist(),
        )

    @classmethod
    def from_document(cls, doc: "RnnParamsDocument") -> "RnnParams":
        """Build and validate params from their structured description."""
        n_r, n_i, n_o = doc.dims
        if (doc.readout == ReadoutKind.LINEAR.value) != (doc.w_o is not None):
            raise ConfigurationError(f"readout tag {doc.readout!r} does not match W_o presence")
        params = cls(
            alpha=doc.alpha,
            w_r=_matrix(doc.w_r or np.zeros((n_r, n_r)), "W_r", n_r, n_r),
            w_in=_matrix(doc.w_in, "W_in", n_r, n_i),
            w_fb=_matrix(doc.w_fb or np.zeros((n_r, n_o)), "W_fb", n_r, n_o),
            w_o=None if doc.w_o is None else _matrix(doc.w_o, "W_o", n_o, n_r),
            activation=Activation(doc.activation),
        )
        return params

    def save(self, path: Union[str, Path]) -> Path:
        """Write the params document as JSON."""
        path = Path(path)
        path.write_text(self.to_document().json(indent=2))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RnnParams":
        """Read a params document written by `save`."""
        try:
            doc = RnnParamsDocument.parse_raw(Path(path).read_text())
        except pydantic.ValidationError as e:
            raise ConfigurationError(f"invalid network document {path}: {e}") from e
        return cls.from_document(doc)


class RnnParamsDocument(pydantic.BaseModel):
    """Serialised form of `RnnParams`: dense row-major matrices plus descriptors."""

    class Config:
        """Pydantic config."""

        extra = "forbid"

    alpha: float = pydantic.Field(..., gt=0.0, le=1.0, description="Leak rate.")
    dims: List[int] = pydantic.Field(..., min_items=3, max_items=3, description="(N_r, N_i, N_o)")
    activation: str = pydantic.Field(Activation.TANH.value, description="Activation tag.")
    readout: str = pydantic.Field(ReadoutKind.NONE.value, description="Readout tag.")
    w_r: List[List[float]]
    w_in: List[List[float]]
    w_fb: List[List[float]] = pydantic.Field(default_factory=list)
    w_o: Optional[List[List[float]]] = None

    @pydantic.validator("activation")
    def _known_activation(cls, value):  # noqa: N805
        Activation(value)
        return value

    @pydantic.validator("readout")
    def _known_readout(cls, value):  # noqa: N805
        ReadoutKind(value)
        return value


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States x[anchor], x[anchor + 1], ... of one orbit."""

    anchor: int
    states: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def final(self) -> np.ndarray:
        """Last state."""
        return self.states[-1]

    @property
    def times(self) -> np.ndarray:
        """Time index of each stored state."""
        return np.arange(self.anchor, self.anchor + len(self))


def _as_state(params: RnnParams, x: np.ndarray) -> np.ndarray:
    state = np.array(x, dtype=np.float64, ndmin=1)
    if state.shape != (params.n_r,):
        raise ConfigurationError(f"state must have {params.n_r} entries, got shape {state.shape}")
    return state


def _as_input(params: RnnParams, u: np.ndarray) -> np.ndarray:
    value = np.array(u, dtype=np.float64, ndmin=1)
    if value.shape != (params.n_i,):
        raise ConfigurationError(f"input must have {params.n_i} entries, got shape {value.shape}")
    return value


def step(params: RnnParams, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply G(u, x) once."""
    value = _as_input(params, u)
    state = _as_state(params, x)
    drive = params.drive(InputSequence(anchor=0, values=value[None, :]), 0, 0)
    return params.advance(drive[0], state[None, :])[0]


def jacobian(params: RnnParams, u: np.ndarray, x: np.ndarray) -> np.ndarray:
    """D_x G(u, x) = (1 - alpha) I + alpha S(u, x) M, with S = diag(1 - tanh^2(xi))."""
    value = _as_input(params, u)
    state = _as_state(params, x)
    drive = params.drive(InputSequence(anchor=0, values=value[None, :]), 0, 0)
    return jacobians(params, drive[0], state[None, :])[0]


def jacobians(params: RnnParams, drive_row: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Batched Jacobians for a (B, N_r) set of states sharing one input drive."""
    slopes = 1.0 - np.tanh(params.pre_activation(drive_row, states)) ** 2
    jac = params.alpha * slopes[:, :, None] * params.effective_recurrent[None, :, :]
    jac = jac + (1.0 - params.alpha) * np.eye(params.n_r)[None, :, :]
    return jac


def spectral_norm(mat: np.ndarray) -> float:
    """Largest singular value of `mat`."""
    arr = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError("spectral norm of a matrix with non-finite entries")
    if arr.size == 0:
        return 0.0
    return float(np.linalg.norm(np.atleast_2d(arr), 2))


def iterate(
    system: InputDrivenSystem, seq: InputSequence, x0: np.ndarray, start: int, steps: int
) -> Iterator[np.ndarray]:
    """Yield the (B, N) batch after each of `steps` steps from time `start`."""
    if steps <= 0:
        return
    drive = system.drive(seq, start + 1, start + steps)
    states = np.array(x0, dtype=np.float64, ndmin=2)
    for row in drive:
        states = system.advance(row, states)
        yield states


def evolve(
    system: InputDrivenSystem,
    seq: InputSequence,
    x0: np.ndarray,
    start: int,
    steps: int,
    keep: Optional[int] = None,
) -> np.ndarray:
    """Evolve a batch of states from time `start` for `steps` steps.

    Returns a (B, keep + 1, N) array holding the states at times `start + steps - keep` ..
    `start + steps`; `keep=None` keeps the whole orbit including `x0`.

    Raises:
        InputWindowError: when the input does not cover `start + 1 .. start + steps`.
    """
    if steps < 0:
        raise ConfigurationError(f"steps must be non-negative, got {steps}")
    states = np.array(x0, dtype=np.float64, ndmin=2)
    if states.shape[1] != system.state_dim:
        raise ConfigurationError(f"states must have {system.state_dim} columns, got {states.shape}")
    if steps == 0:
        return _record(system, np.empty((0, system.state_dim)), states, 0, keep)
    return _record(system, system.drive(seq, start + 1, start + steps), states, steps, keep)


def evolve_stacked(
    system: InputDrivenSystem,
    seqs: Sequence[InputSequence],
    x0: np.ndarray,
    start: int,
    steps: int,
    keep: Optional[int] = None,
) -> np.ndarray:
    """`evolve` for several input realizations at once, all started from the same batch.

    Returns an (S, B, keep + 1, N) array; entry s is what `evolve(system, seqs[s], x0, ...)`
    returns.

    Raises:
        InputWindowError: when a realization does not cover `start + 1 .. start + steps`.
    """
    if steps < 0:
        raise ConfigurationError(f"steps must be non-negative, got {steps}")
    if not seqs:
        raise ConfigurationError("at least one input realization is needed")
    batch = np.array(x0, dtype=np.float64, ndmin=2)
    if batch.ndim != 2 or batch.shape[1] != system.state_dim:
        raise ConfigurationError(f"states must have {system.state_dim} columns, got {batch.shape}")
    states = np.repeat(batch[None, :, :], len(seqs), axis=0)
    if steps == 0:
        drive = np.empty((0, len(seqs), 1, system.state_dim))
    else:
        # (T, S, 1, N): one drive row per realization, broadcast over its batch
        drive = np.stack([system.drive(seq, start + 1, start + steps) for seq in seqs], axis=1)[:, :, None, :]
    return _record(system, drive, states, steps, keep)


def _record(
    system: InputDrivenSystem, drive: np.ndarray, states: np.ndarray, steps: int, keep: Optional[int]
) -> np.ndarray:
    keep = steps if keep is None else min(keep, steps)
    first_kept = steps - keep
    out = np.empty(states.shape[:-1] + (keep + 1, states.shape[-1]))
    if first_kept == 0:
        out[..., 0, :] = states
    for j, row in enumerate(drive, start=1):
        states = system.advance(row, states)
        if j >= first_kept:
            out[..., j - first_kept, :] = states
    return out


def orbit(params: InputDrivenSystem, seq: InputSequence, x0: np.ndarray, n: int, start: Optional[int] = None) -> Trajectory:
    """Phi(k, u, x0) for k = 0 .. n, starting at `start` (default: the input anchor)."""
    start = seq.anchor if start is None else start
    state = np.array(x0, dtype=np.float64, ndmin=1)
    states = evolve(params, seq, state[None, :], start, n)[0]
    return Trajectory(anchor=start, states=states)


def absorption_time_bound(params: RnnParams, x0: np.ndarray, u_samples: np.ndarray) -> float:
    """Steps after which every orbit from `x0` lies in [-L, L]^N_r for inputs in `u_samples`.

    N(alpha, x0) = ln((L - eta) / (|x0|_inf - eta)) / ln(1 - alpha), where eta is the largest
    activation output over the ball |x|_inf <= |x0|_inf and the input samples. For a linear
    readout each pre-activation is affine in x, so its maximum over the ball is exact.
    """
    state = _as_state(params, x0)
    radius = float(np.max(np.abs(state)))
    if radius <= params.bound:
        return 0.0
    if params.alpha == 1.0:
        return 1.0
    samples = np.array(u_samples, dtype=np.float64, ndmin=2)
    input_part = np.max(np.abs(samples @ params.w_in.T), axis=0)
    reach = radius * np.sum(np.abs(params.effective_recurrent), axis=1) + input_part
    eta = float(np.tanh(np.max(reach)))
    if eta >= params.bound:
        return math.inf
    return math.log((params.bound - eta) / (radius - eta)) / math.log(1.0 - params.alpha)


def lyapunov_spectrum(
    params: RnnParams,
    seq: InputSequence,
    x0: np.ndarray,
    steps: int,
    count: int = 1,
    start: Optional[int] = None,
) -> np.ndarray:
    """Finite-time Lyapunov exponents along the orbit of `x0` (QR re-orthonormalisation)."""
    start = seq.anchor if start is None else start
    count = min(count, params.n_r)
    state = _as_state(params, x0)[None, :]
    basis = np.eye(params.n_r)[:, :count]
    sums = np.zeros(count)
    drive = params.drive(seq, start + 1, start + steps)
    for row in drive:
        jac = jacobians(params, row, state)[0]
        state = params.advance(row, state)
        basis, upper = np.linalg.qr(jac @ basis)
        sums += np.log(np.abs(np.diag(upper)) + np.finfo(float).tiny)
    return sums / max(steps, 1)


def params_from_json(text: str) -> RnnParams:
    """Parse params from a JSON document string."""
    try:
        return RnnParams.from_document(RnnParamsDocument.parse_obj(json.loads(text)))
    except (json.JSONDecodeError, pydantic.ValidationError) as e:
        raise ConfigurationError(f"invalid network document: {e}") from e
