# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
"""Input sequences, the shift operator, sequence-space metrics and input generators.

A bi-infinite input sequence u = (u[k]) for k in Z is represented by a finite window: the
values for indices `anchor .. anchor + T - 1` plus the compact box U it takes values in.
Reading outside the window raises `InputWindowError`; nothing is ever padded.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pydantic

from errors import GeneratorError, InputWindowError

if TYPE_CHECKING:
    from contraction import LargeInputSpec

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], float]

# Filter of the context task: g(s) = exp(-s / 50), truncated where g(s) < 1e-6.
CONTEXT_FILTER_TAU = 50.0
CONTEXT_FILTER_CUTOFF = 1e-6
CONTEXT_BIASES = (0.3, 0.15)


class Stream(IntEnum):
    """Committed substream identifiers; one per channel or initial condition family."""

    SYMBOLS = 1
    UNIFORM = 2
    CONTEXT_NOISE_U1 = 3
    CONTEXT_NOISE_U2 = 4
    PULSES_ON = 5
    PULSES_OFF = 6
    INITIAL_CONDITIONS = 7
    RESERVOIR = 8
    TRAINING_NOISE = 9
    FIBRE_CLOUD = 10
    DIRECTIONS = 11


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Return the PCG64 generator for `seed` and the substream path `keys`.

    The same seed and keys give the same stream on every platform, regardless of how many
    other substreams were drawn before.
    """
    if seed < 0 or seed >= 2**64:
        raise GeneratorError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


class GeneratorKind(str, Enum):
    """Input generator families."""

    TWO_SYMBOL = "two_symbol"
    UNIFORM_SCALED = "uniform_scaled"
    CONTEXT_TASK = "context_task"
    SPLICE = "splice"


class GeneratorSpec(pydantic.BaseModel):
    """Provenance of a generated sequence: enough to regenerate it bit-exactly."""

    class Config:
        """Pydantic config."""

        extra = "forbid"
        use_enum_values = True

    kind: GeneratorKind
    seed: int = pydantic.Field(0, ge=0, lt=2**64)
    length: int = pydantic.Field(..., gt=0)
    anchor: int = 0
    params: Dict[str, Any] = pydantic.Field(default_factory=dict)


def _frozen(values: ArrayLike, ndmin: int = 1) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, ndmin=ndmin)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class InputSequence:
    """Finite window of a bi-infinite input sequence.

    `values[j]` is `u[anchor + j]`. `lower` and `upper` are the componentwise bounds of the
    compact input set U the sequence takes values in.
    """

    anchor: int
    values: np.ndarray
    provenance: Optional[GeneratorSpec] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.flags.writeable:
            values = values.copy()
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] == 0:
            raise GeneratorError(f"input values must be a non-empty (T, N_i) array, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise GeneratorError("input values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "anchor", int(self.anchor))

        lower = values.min(axis=0) if self.lower is None else _frozen(self.lower)
        upper = values.max(axis=0) if self.upper is None else _frozen(self.upper)
        if lower.shape != (values.shape[1],) or upper.shape != (values.shape[1],):
            raise GeneratorError("input bounds must have one entry per input channel")
        if np.any(values < lower) or np.any(values > upper):
            raise GeneratorError("input values leave their declared box U")
        object.__setattr__(self, "lower", _frozen(lower))
        object.__setattr__(self, "upper", _frozen(upper))

    @property
    def n_inputs(self) -> int:
        """Dimension N_i of each input value."""
        return self.values.shape[1]

    @property
    def start(self) -> int:
        """First stored index."""
        return self.anchor

    @property
    def stop(self) -> int:
        """Last stored index (inclusive)."""
        return self.anchor + self.values.shape[0] - 1

    def __len__(self) -> int:
        return self.values.shape[0]

    def covers(self, first: int, last: int) -> bool:
        """Whether every index in `first .. last` is stored."""
        return last < first or (self.start <= first and last <= self.stop)

    def window(self, first: int, last: int) -> np.ndarray:
        """Return the read-only values for indices `first .. last` inclusive.

        Raises:
            InputWindowError: when any index falls outside the stored window.
        """
        if not self.covers(first, last):
            raise InputWindowError(
                f"input window exhausted: need [{first}, {last}], stored [{self.start}, {self.stop}]"
            )
        return self.values[first - self.anchor : last - self.anchor + 1]

    def at(self, k: int) -> np.ndarray:
        """Return u[k]."""
        return self.window(k, k)[0]

    def diameter(self) -> float:
        """Euclidean diameter of the declared box U."""
        return float(np.linalg.norm(self.upper - self.lower))

    def with_bounds(self, lower: ArrayLike, upper: ArrayLike) -> "InputSequence":
        """Return the same sequence with a wider declared box U."""
        return replace(self, lower=_frozen(lower), upper=_frozen(upper))

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Write the window as CSV with columns `k, u_1 .. u_{N_i}`."""
        path = Path(path)
        header = ",".join(["k"] + [f"u_{i + 1}" for i in range(self.n_inputs)])
        ks = np.arange(self.start, self.stop + 1, dtype=np.float64)[:, None]
        fmt = ["%d"] + ["%.17g"] * self.n_inputs
        np.savetxt(path, np.hstack([ks, self.values]), delimiter=",", header=header, comments="", fmt=fmt)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "InputSequence":
        """Read a window written by `to_csv`; indices must be consecutive."""
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        ks = data[:, 0].astype(np.int64)
        if np.any(np.diff(ks) != 1):
            raise GeneratorError(f"{path}: indices must be consecutive")
        return cls(anchor=int(ks[0]), values=data[:, 1:])


def shift(seq: InputSequence, n: int) -> InputSequence:
    """Return sigma^n(u), with (sigma^n u)[k] = u[k + n].

    Only the anchor moves; the stored values are shared.
    """
    return replace(seq, anchor=seq.anchor - n)


def d_prod(u: InputSequence, v: InputSequence, half_width: int) -> float:
    """Truncated product metric: sum over |k| <= half_width of d_U(u[k], v[k]) / 2^|k|.

    The neglected tail of the infinite sum is at most `d_prod_truncation_bound(diam(U),
    half_width)`.
    """
    if half_width <= 0:
        raise InputWindowError(f"half_width must be positive, got {half_width}")
    diff = u.window(-half_width, half_width) - v.window(-half_width, half_width)
    weights = np.exp2(-np.abs(np.arange(-half_width, half_width + 1, dtype=np.float64)))
    return float(np.sum(np.linalg.norm(diff, axis=1) * weights))


def d_prod_truncation_bound(diameter: float, half_width: int) -> float:
    """Upper bound on the tail of d_prod beyond `half_width`."""
    return diameter * 2.0 ** (1 - half_width)


def d_unif(u: InputSequence, v: InputSequence) -> float:
    """Uniform metric over a shared window: max over k of d_U(u[k], v[k])."""
    if u.start != v.start or u.stop != v.stop:
        raise InputWindowError(
            f"window mismatch: [{u.start}, {u.stop}] vs [{v.start}, {v.stop}]"
        )
    return float(np.max(np.linalg.norm(u.values - v.values, axis=1)))


def constant_sequence(value: ArrayLike, first: int, last: int) -> InputSequence:
    """Sequence equal to `value` on `first .. last`."""
    row = np.array(value, dtype=np.float64, ndmin=1)
    return InputSequence(anchor=first, values=np.tile(row, (last - first + 1, 1)))


def gen_two_symbol(
    u1: ArrayLike, u2: ArrayLike, p: float, length: int, seed: int, anchor: int = 0
) -> InputSequence:
    """I.i.d. choice per step of `u1` (probability p) or `u2`."""
    if not 0.0 <= p <= 1.0:
        raise GeneratorError(f"p must lie in [0, 1], got {p}")
    first = np.array(u1, dtype=np.float64, ndmin=1)
    second = np.array(u2, dtype=np.float64, ndmin=1)
    if first.shape != second.shape:
        raise GeneratorError("both symbols must have the same dimension")
    pick = substream(seed, Stream.SYMBOLS).random(length) < p
    values = np.where(pick[:, None], first, second)
    spec = GeneratorSpec(
        kind=GeneratorKind.TWO_SYMBOL,
        seed=seed,
        length=length,
        anchor=anchor,
        params={"u1": first.tolist(), "u2": second.tolist(), "p": p},
    )
    return InputSequence(
        anchor=anchor,
        values=values,
        provenance=spec,
        lower=np.minimum(first, second),
        upper=np.maximum(first, second),
    )


def gen_uniform_scaled(w: float, length: int, seed: int, anchor: int = 0) -> InputSequence:
    """Scalar sequence of i.i.d. values w * Uniform(-1, 1)."""
    if w < 0:
        raise GeneratorError(f"w must be non-negative, got {w}")
    values = w * substream(seed, Stream.UNIFORM).uniform(-1.0, 1.0, size=(length, 1))
    spec = GeneratorSpec(
        kind=GeneratorKind.UNIFORM_SCALED, seed=seed, length=length, anchor=anchor, params={"w": w}
    )
    return InputSequence(anchor=anchor, values=values, provenance=spec, lower=[-w], upper=[w])


def exponential_filter(tau: float = CONTEXT_FILTER_TAU, cutoff: float = CONTEXT_FILTER_CUTOFF):
    """Return g(s) = exp(-s / tau) for s = 0, 1, ... while g(s) >= cutoff."""
    n_taps = int(np.floor(-tau * np.log(cutoff))) + 1
    return np.exp(-np.arange(n_taps, dtype=np.float64) / tau)


@dataclass(frozen=True, eq=False)
class ContextTaskData:
    """Drive, pulses and targets of the context-dependent routing task.

    `pulses[:, 0]` switches the context on, `pulses[:, 1]` switches it off. `targets[:, 0]` is
    the context (+1 on, -1 off) and `targets[:, 1]` routes u1 when on and u2 when off.
    """

    drive: InputSequence
    pulses: np.ndarray
    targets: np.ndarray
    spec: GeneratorSpec

    def full_input(self) -> InputSequence:
        """Four-channel input (u1, u2, u3, u4) as consumed by the network."""
        values = np.hstack([self.drive.values, self.pulses])
        return InputSequence(
            anchor=self.drive.anchor,
            values=values,
            provenance=self.spec,
            lower=np.concatenate([self.drive.lower, [0.0, 0.0]]),
            upper=np.concatenate([self.drive.upper, [1.0, 1.0]]),
        )

    def with_pulses_disabled(self) -> "ContextTaskData":
        """Same drive with both pulse channels silenced and the context held off."""
        targets = self.targets.copy()
        targets[:, 0] = -1.0
        targets[:, 1] = self.drive.values[:, 1]
        return replace(self, pulses=np.zeros_like(self.pulses), targets=targets)


def _filtered_channel(rng: np.random.Generator, length: int, taps: np.ndarray, bias: float):
    noise = rng.random(length + taps.size - 1)
    channel = np.convolve(noise, taps, mode="valid") + bias
    peak = channel.max()
    if not peak > 0.0:
        raise GeneratorError("degenerate context channel: all values are zero")
    return channel / peak


def context_targets(pulses: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """Targets of the routing task: the context flips at the pulse step; it starts off."""
    state = -1.0
    targets = np.empty((pulses.shape[0], 2))
    for k in range(pulses.shape[0]):
        if pulses[k, 0] > 0:
            state = 1.0
        elif pulses[k, 1] > 0:
            state = -1.0
        targets[k, 0] = state
        targets[k, 1] = drive[k, 0] if state > 0 else drive[k, 1]
    return targets


def gen_context_task(length: int, pulse_prob: float, seed: int, anchor: int = 0) -> ContextTaskData:
    """Generate the routing task: two filtered drives, two pulse channels, two targets.

    Each drive is Uniform[0, 1) noise convolved with the truncated exponential filter, plus a
    bias (0.3 and 0.15), normalised so its window maximum is one. Pulses are unit Bernoulli
    impulses; when both fire at the same step the "on" pulse wins and the "off" one is dropped.
    """
    if not 0.0 < pulse_prob < 1.0:
        raise GeneratorError(f"pulse_prob must lie in (0, 1), got {pulse_prob}")
    taps = exponential_filter()
    u1 = _filtered_channel(substream(seed, Stream.CONTEXT_NOISE_U1), length, taps, CONTEXT_BIASES[0])
    u2 = _filtered_channel(substream(seed, Stream.CONTEXT_NOISE_U2), length, taps, CONTEXT_BIASES[1])
    on = substream(seed, Stream.PULSES_ON).random(length) < pulse_prob
    off = substream(seed, Stream.PULSES_OFF).random(length) < pulse_prob
    off &= ~on

    drive_values = np.column_stack([u1, u2])
    pulses = np.column_stack([on, off]).astype(np.float64)
    pulses.setflags(write=False)
    targets = context_targets(pulses, drive_values)
    targets.setflags(write=False)
    spec = GeneratorSpec(
        kind=GeneratorKind.CONTEXT_TASK,
        seed=seed,
        length=length,
        anchor=anchor,
        params={"pulse_prob": pulse_prob, "tau": CONTEXT_FILTER_TAU, "cutoff": CONTEXT_FILTER_CUTOFF},
    )
    drive = InputSequence(anchor=anchor, values=drive_values, provenance=spec, lower=[0.0, 0.0], upper=[1.0, 1.0])
    logger.debug("context task: %d on pulses, %d off pulses", int(on.sum()), int(off.sum()))
    return ContextTaskData(drive=drive, pulses=pulses, targets=targets, spec=spec)


def splice_large_input(
    u: InputSequence, m: int, far_value: ArrayLike, spec: "LargeInputSpec"
) -> InputSequence:
    """Keep u[k] for |k| <= m and replace every other stored value by `far_value`.

    Raises:
        GeneratorError: if `far_value` is outside the large-input region described by `spec`.
    """
    if m < 0:
        raise GeneratorError(f"m must be non-negative, got {m}")
    far = np.array(far_value, dtype=np.float64, ndmin=1)
    if far.shape != (u.n_inputs,):
        raise GeneratorError(f"far value must have {u.n_inputs} entries")
    if not spec.contains(far):
        raise GeneratorError(f"far value {far.tolist()} is not in the large-input region")
    ks = np.arange(u.start, u.stop + 1)
    values = np.where((np.abs(ks) <= m)[:, None], u.values, far)
    provenance = GeneratorSpec(
        kind=GeneratorKind.SPLICE,
        seed=u.provenance.seed if u.provenance else 0,
        length=len(u),
        anchor=u.anchor,
        params={
            "m": m,
            "far_value": far.tolist(),
            "base": u.provenance.dict() if u.provenance else "explicit",
        },
    )
    return InputSequence(
        anchor=u.anchor,
        values=values,
        provenance=provenance,
        lower=np.minimum(u.lower, far),
        upper=np.maximum(u.upper, far),
    )


def kloeden_input(a: float, first: int, last: int) -> InputSequence:
    """Scalar sequence with u[k] = a for k >= 0 and 1 / a for k < 0."""
    ks = np.arange(first, last + 1)
    values = np.where(ks >= 0, a, 1.0 / a)[:, None]
    return InputSequence(
        anchor=first, values=values, lower=[min(a, 1.0 / a)], upper=[max(a, 1.0 / a)]
    )


def symbol_bounds(*symbols: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Componentwise box spanned by a finite input alphabet."""
    stacked = np.array(symbols, dtype=np.float64, ndmin=2)
    return stacked.min(axis=0), stacked.max(axis=0)


