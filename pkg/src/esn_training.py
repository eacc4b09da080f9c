# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
"""Echo state network with output feedback for the context-dependent routing task.

Training follows the offline recipe: random sparse reservoir rescaled to a target spectral
radius, state harvesting with the target context fed back (teacher forcing) and Gaussian noise
inside the activation, then a ridge-regression readout. Afterwards the feedback loop is closed.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pydantic
from scipy import linalg

from core_dynamics import RnnParams, RnnParamsDocument, Trajectory, evolve
from errors import ConfigurationError, TrainingError
from input_space import ContextTaskData, InputSequence, Stream, substream

logger = logging.getLogger(__name__)

MAX_RESERVOIR_ATTEMPTS = 10
RADIUS_TOLERANCE = 1e-9
# Steps after each pulse excluded from the context accuracy.
PULSE_GUARD = 20
# Context value before any pulse has been seen.
CONTEXT_OFF = -1.0


class ReservoirConfig(pydantic.BaseModel):
    """Reservoir and training hyperparameters."""

    class Config:
        """Pydantic config."""

        extra = "forbid"

    n_r: int = pydantic.Field(200, ge=1, description="Reservoir size.")
    sparsity: float = pydantic.Field(0.95, ge=0.0, lt=1.0, description="Probability of a zero W_r entry.")
    spectral_radius_target: float = pydantic.Field(0.9, gt=0.0)
    weight_range: float = pydantic.Field(1.0, gt=0.0, description="W_r entries are Uniform[-r, r].")
    noise_std: float = pydantic.Field(0.05, ge=0.0)
    ridge_lambda: float = pydantic.Field(0.7, ge=0.0)
    washout: int = pydantic.Field(200, ge=0, description="Harvested steps dropped before regression.")
    seed: int = pydantic.Field(0, ge=0)


def spectral_radius(mat: np.ndarray) -> float:
    """Largest eigenvalue modulus.

    Raises:
        TrainingError: when the eigensolver does not converge.
    """
    try:
        return float(np.max(np.abs(np.linalg.eigvals(np.asarray(mat, dtype=np.float64)))))
    except np.linalg.LinAlgError as e:
        raise TrainingError(f"eigensolve failed: {e}") from e


def init_reservoir(cfg: ReservoirConfig, n_i: int = 4, n_o: int = 2, feedback: Sequence[int] = (0,)) -> RnnParams:
    """Draw W_r, W_in and W_fb; only the output channels in `feedback` are wired back.

    Raises:
        TrainingError: when ten draws in a row give a reservoir with zero spectral radius.
    """
    for attempt in range(MAX_RESERVOIR_ATTEMPTS):
        rng = substream(cfg.seed, Stream.RESERVOIR, attempt)
        w_r = rng.uniform(-cfg.weight_range, cfg.weight_range, size=(cfg.n_r, cfg.n_r))
        w_r = w_r * (rng.random((cfg.n_r, cfg.n_r)) >= cfg.sparsity)
        radius = spectral_radius(w_r)
        if radius > 0.0:
            break
        logger.warning("reservoir draw %d has zero spectral radius; redrawing", attempt)
    else:
        raise TrainingError(f"no usable reservoir after {MAX_RESERVOIR_ATTEMPTS} draws")

    w_r = w_r * (cfg.spectral_radius_target / radius)
    achieved = spectral_radius(w_r)
    if abs(achieved - cfg.spectral_radius_target) > RADIUS_TOLERANCE:
        raise TrainingError(f"rescaled spectral radius {achieved!r} misses {cfg.spectral_radius_target}")
    w_in = rng.uniform(-1.0, 1.0, size=(cfg.n_r, n_i))
    w_fb = rng.uniform(-1.0, 1.0, size=(cfg.n_r, n_o))
    mask = np.zeros(n_o, dtype=bool)
    mask[list(feedback)] = True
    w_fb[:, ~mask] = 0.0
    logger.debug("reservoir: n_r=%d, %d non-zeros, radius %.12f", cfg.n_r, int(np.count_nonzero(w_r)), achieved)
    return RnnParams(alpha=1.0, w_r=w_r, w_in=w_in, w_fb=w_fb, w_o=np.zeros((n_o, cfg.n_r)))


def teacher_forced_states(
    params: RnnParams,
    seq: InputSequence,
    targets: np.ndarray,
    noise_std: float,
    seed: int,
    x0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Harvest x[k] for every stored k with the targets y[k - 1] in the feedback path.

    `targets` is (T,) for z1 alone or (T, m) for the first m outputs; outputs without a target
    must not feed back. `seq` carries every input column, pulses included. Row j of the result
    is the state at `seq.anchor + j`; the feedback before the first step is the "context off"
    value on every channel.

    Raises:
        ConfigurationError: when the target and input lengths differ, or an output that feeds
            back has no target.
    """
    target = np.asarray(targets, dtype=np.float64)
    if target.ndim == 1:
        target = target[:, None]
    if target.ndim != 2 or target.shape[0] != len(seq):
        raise ConfigurationError(f"targets have shape {target.shape}, input has {len(seq)} steps")
    width = target.shape[1]
    if width > params.n_o:
        raise ConfigurationError(f"{width} target columns for a network with {params.n_o} outputs")
    untargeted = np.flatnonzero(np.any(params.w_fb[:, width:] != 0.0, axis=0)) + width
    if untargeted.size:
        raise ConfigurationError(f"outputs {untargeted.tolist()} feed back but have no target")
    rng = substream(seed, Stream.TRAINING_NOISE)
    drive = params.drive(seq, seq.start, seq.stop)
    feedback = params.w_fb[:, :width]
    state = np.zeros(params.n_r) if x0 is None else np.array(x0, dtype=np.float64)
    y_prev = np.full(width, CONTEXT_OFF)
    states = np.empty((len(seq), params.n_r))
    for k, row in enumerate(drive):
        pre = params.w_r @ state + row + feedback @ y_prev
        if noise_std > 0.0:
            pre = pre + rng.normal(0.0, noise_std, size=params.n_r)
        state = (1.0 - params.alpha) * state + params.alpha * np.tanh(pre)
        states[k] = state
        y_prev = target[k]
    return states


def ridge_readout(states: np.ndarray, targets: np.ndarray, ridge_lambda: float) -> np.ndarray:
    """Solve (S^T S + lambda I) W = S^T Y and return W^T (N_o x N_r).

    Raises:
        TrainingError: on non-finite data, mismatched lengths or a singular system.
    """
    s = np.asarray(states, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if s.shape[0] == 0 or s.shape[0] != y.shape[0]:
        raise TrainingError(f"states {s.shape} and targets {y.shape} do not align")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
        raise TrainingError("ridge regression on non-finite data")
    gram = s.T @ s + ridge_lambda * np.eye(s.shape[1])
    rhs = s.T @ y
    try:
        weights = linalg.solve(gram, rhs, assume_a="pos" if ridge_lambda > 0 else "sym")
    except (linalg.LinAlgError, ValueError) as e:
        raise TrainingError(f"ridge system not solvable: {e}") from e
    return weights.T


def normal_equation_residual(states: np.ndarray, targets: np.ndarray, ridge_lambda: float, w_o: np.ndarray) -> float:
    """Relative residual of the ridge normal equations for a readout."""
    y = targets[:, None] if targets.ndim == 1 else targets
    rhs = states.T @ y
    lhs = (states.T @ states + ridge_lambda * np.eye(states.shape[1])) @ w_o.T
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))


def nrmse(target: np.ndarray, prediction: np.ndarray) -> np.ndarray:
    """Root-mean-square error per output channel, divided by the target standard deviation."""
    y = np.asarray(target, dtype=np.float64)
    y_hat = np.asarray(prediction, dtype=np.float64)
    if y.ndim == 1:
        y, y_hat = y[:, None], y_hat[:, None]
    scale = np.std(y, axis=0)
    if np.any(scale == 0.0):
        raise TrainingError("NRMSE is undefined for a constant target channel")
    return np.sqrt(np.mean((y - y_hat) ** 2, axis=0)) / scale


def guard_mask(pulses: np.ndarray, guard: int = PULSE_GUARD) -> np.ndarray:
    """True for steps not within `guard` steps from (and including) any pulse."""
    fired = np.flatnonzero(np.any(np.asarray(pulses) > 0, axis=1))
    mask = np.ones(np.asarray(pulses).shape[0], dtype=bool)
    for k in fired:
        mask[k : k + guard] = False
    return mask


def context_accuracy(z1: np.ndarray, target_z1: np.ndarray, pulses: np.ndarray, guard: int = PULSE_GUARD) -> float:
    """Fraction of unguarded steps where sign(z1) matches the target context."""
    mask = guard_mask(pulses, guard)
    if not mask.any():
        raise TrainingError("every step lies in a post-pulse window")
    agree = np.sign(np.asarray(z1)[mask]) == np.sign(np.asarray(target_z1)[mask])
    return float(np.mean(agree))


@dataclass
class PcaResult:
    """Top-k principal component projection."""

    projections: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    explained_ratio: np.ndarray

    @property
    def cumulative_variance(self) -> float:
        """Share of total variance carried by the retained components."""
        return float(np.sum(self.explained_ratio))


def pca_project(states: np.ndarray, k: int) -> PcaResult:
    """Project mean-centred states on the top-k eigenvectors of their covariance.

    Raises:
        TrainingError: when k exceeds the numerical rank of the centred data.
    """
    data = np.asarray(states, dtype=np.float64)
    mean = data.mean(axis=0)
    centred = data - mean
    cov = centred.T @ centred / max(data.shape[0] - 1, 1)
    eigenvalues, eigenvectors = linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order]
    total = float(eigenvalues.sum())
    rank = int(np.linalg.matrix_rank(centred)) if total > 0 else 0
    if not 1 <= k <= rank:
        raise TrainingError(f"cannot keep {k} components of data with rank {rank}")
    components = eigenvectors[:, :k]
    return PcaResult(
        projections=centred @ components,
        components=components,
        mean=mean,
        explained_ratio=eigenvalues[:k] / total,
    )


class TrainedModelDocument(pydantic.BaseModel):
    """Serialised `TrainedModel`."""

    class Config:
        """Pydantic config."""

        extra = "forbid"

    params: RnnParamsDocument
    config: ReservoirConfig
    train_error: List[float]
    test_error: List[float]
    metadata: Dict[str, Any] = pydantic.Field(default_factory=dict)


@dataclass(eq=False)
class TrainedModel:
    """Network with a trained readout; only z1 is fed back."""

    params: RnnParams
    config: ReservoirConfig
    train_error: List[float]
    test_error: List[float]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def save(self, path: Union[str, Path]) -> Path:
        """Write the model and its training metadata as JSON."""
        path = Path(path)
        doc = TrainedModelDocument(
            params=self.params.to_document(),
            config=self.config,
            train_error=self.train_error,
            test_error=self.test_error,
            metadata=self.metadata,
        )
        path.write_text(doc.json(indent=2))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainedModel":
        """Read a model written by `save`."""
        try:
            doc = TrainedModelDocument.parse_raw(Path(path).read_text())
        except pydantic.ValidationError as e:
            raise ConfigurationError(f"invalid model document {path}: {e}") from e
        return cls(
            params=RnnParams.from_document(doc.params),
            config=doc.config,
            train_error=doc.train_error,
            test_error=doc.test_error,
            metadata=doc.metadata,
        )


@dataclass(eq=False)
class ClosedLoopRun:
    """Outputs z[k] = W_o x[k] and states of a closed-loop run."""

    outputs: np.ndarray
    trajectory: Trajectory


def closed_loop_eval(params: RnnParams, seq: InputSequence, x0: Optional[np.ndarray] = None) -> ClosedLoopRun:
    """Run the network with its own z1 fed back over the whole stored input.

    `outputs[j]` is the readout of the state at `seq.anchor + j`; the trajectory also holds x0
    at `seq.anchor - 1`.
    """
    if params.w_o is None:
        raise ConfigurationError("closed-loop evaluation needs a linear readout")
    state = np.zeros(params.n_r) if x0 is None else np.array(x0, dtype=np.float64)
    states = evolve(params, seq, state[None, :], seq.start - 1, len(seq))[0]
    outputs = states[1:] @ params.w_o.T
    return ClosedLoopRun(outputs=outputs, trajectory=Trajectory(anchor=seq.start - 1, states=states))


def train_context_model(
    cfg: ReservoirConfig, train: ContextTaskData, test: ContextTaskData
) -> Tuple[TrainedModel, ClosedLoopRun]:
    """Full recipe: init, teacher-forced harvest, washout, ridge readout, closed-loop test.

    Returns the model and its closed-loop run on `test`.
    """
    params = init_reservoir(cfg)
    seq = train.full_input()
    states = teacher_forced_states(params, seq, train.targets, cfg.noise_std, cfg.seed)
    if cfg.washout >= states.shape[0]:
        raise TrainingError(f"washout {cfg.washout} leaves no training steps out of {states.shape[0]}")
    kept, targets = states[cfg.washout :], train.targets[cfg.washout :]
    w_o = ridge_readout(kept, targets, cfg.ridge_lambda)
    residual = normal_equation_residual(kept, targets, cfg.ridge_lambda, w_o)
    logger.info("readout trained on %d states, normal-equation residual %.2e", kept.shape[0], residual)

    trained = RnnParams(alpha=params.alpha, w_r=params.w_r, w_in=params.w_in, w_fb=params.w_fb, w_o=w_o)
    train_error = nrmse(targets, kept @ w_o.T)
    run = closed_loop_eval(trained, test.full_input())
    test_error = nrmse(test.targets[cfg.washout :], run.outputs[cfg.washout :])
    model = TrainedModel(
        params=trained,
        config=cfg,
        train_error=train_error.tolist(),
        test_error=test_error.tolist(),
        metadata={
            "washout": cfg.washout,
            "harvest": "teacher forcing: target z1[k-1] fed back, context off before the first step",
            "pulse_wiring": "u3, u4 are input columns 3 and 4 of the same uniform W_in draw",
            "feedback_channels": [0],
            "normal_equation_residual": residual,
            "train_steps": len(seq),
            "test_steps": len(test.drive),
        },
    )
    logger.info("NRMSE train %s, closed-loop test %s", np.round(train_error, 4).tolist(), np.round(test_error, 4).tolist())
    return model, run
