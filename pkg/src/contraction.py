# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
"""Sufficient-condition certifiers for contraction and echo index one.

All region checks sample a grid of states and a finite set of input values; a certified
report is evidence at the sampled points, not a proof. Every report records its worst point
and the margin `mu - worst_norm` so the resolution can be judged.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from core_dynamics import RnnParams, jacobian, jacobians, spectral_norm, step
from errors import CertificationError, ConfigurationError
from input_space import InputSequence, Stream, substream

logger = logging.getLogger(__name__)

Resolution = Union[int, Sequence[int]]

# Two-symbol system: alpha = 1/4, W_r = diag(1/2, 3/2), W_in = I, u1 = (1/4, 3/20), u2 = -u1.
SWITCHING_ALPHA = 0.25
SWITCHING_W_R = (0.5, 1.5)
SWITCHING_U1 = (0.25, 0.15)


@dataclass(frozen=True, eq=False)
class Region:
    """Axis-aligned box [lo, hi] in state space."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64, ndmin=1)
        hi = np.array(self.hi, dtype=np.float64, ndmin=1)
        if lo.shape != hi.shape:
            raise ConfigurationError(f"region corners differ in shape: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise ConfigurationError(f"region needs lo <= hi, got lo={lo.tolist()} hi={hi.tolist()}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def full(cls, dim: int, bound: float = 1.0) -> "Region":
        """The whole phase space [-L, L]^dim."""
        return cls(lo=np.full(dim, -bound), hi=np.full(dim, bound))

    @classmethod
    def parse(cls, text: str) -> "Region":
        """Parse `"lo_1,..,lo_n..hi_1,..,hi_n"`."""
        try:
            lo_text, hi_text = text.split("..")
            lo = [float(v) for v in lo_text.split(",")]
            hi = [float(v) for v in hi_text.split(",")]
        except ValueError as e:
            raise ConfigurationError(f"cannot parse region {text!r}; expected 'lo..hi'") from e
        return cls(lo=lo, hi=hi)

    @property
    def dim(self) -> int:
        """Dimension of the box."""
        return self.lo.shape[0]

    def check_inside(self, bound: float) -> None:
        """Raise unless the box lies in [-bound, bound]^dim."""
        if np.any(self.lo < -bound) or np.any(self.hi > bound):
            raise ConfigurationError(f"region leaves the phase space [-{bound}, {bound}]^{self.dim}")

    def resolution(self, grid: Resolution) -> Tuple[int, ...]:
        """Per-axis point counts; degenerate axes collapse to a single point."""
        counts = [grid] * self.dim if isinstance(grid, int) else list(grid)
        if len(counts) != self.dim:
            raise ConfigurationError(f"grid needs {self.dim} entries, got {len(counts)}")
        if any(c < 2 for c in counts):
            raise ConfigurationError(f"grid needs at least 2 points per axis, got {counts}")
        return tuple(1 if lo == hi else c for lo, hi, c in zip(self.lo, self.hi, counts))

    def grid(self, grid: Resolution) -> np.ndarray:
        """Grid points in lexicographic order (last axis fastest) as a (P, dim) array."""
        counts = self.resolution(grid)
        axes = [np.linspace(lo, hi, c) if c > 1 else np.array([lo]) for lo, hi, c in zip(self.lo, self.hi, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        """Boolean mask of points inside the box (with tolerance)."""
        pts = np.array(points, dtype=np.float64, ndmin=2)
        return np.all((pts >= self.lo - atol) & (pts <= self.hi + atol), axis=1)


@dataclass
class ContractionReport:
    """Outcome of a sampled contraction check."""

    mu: float
    certified: bool
    grid_resolution: Tuple[int, ...]
    worst_norm: float
    worst_point: np.ndarray
    input_samples: str
    worst_input: Optional[np.ndarray] = None
    effective_rate: Optional[float] = None

    @property
    def margin(self) -> float:
        """mu - worst_norm; positive when certified."""
        return self.mu - self.worst_norm

    def summary(self) -> Dict[str, Any]:
        """Plain-data view for YAML export."""
        return {
            "mu": self.mu,
            "certified": self.certified,
            "grid_resolution": list(self.grid_resolution),
            "worst_norm": self.worst_norm,
            "margin": self.margin,
            "worst_point": self.worst_point.tolist(),
            "worst_input": None if self.worst_input is None else self.worst_input.tolist(),
            "input_samples": self.input_samples,
            "effective_rate": self.effective_rate,
        }


@dataclass
class InvarianceReport:
    """Outcome of a sampled positive-invariance check; the witness is set on failure."""

    invariant: bool
    grid_resolution: Tuple[int, ...]
    witness_state: Optional[np.ndarray] = None
    witness_input: Optional[np.ndarray] = None
    witness_image: Optional[np.ndarray] = None

    def __bool__(self) -> bool:
        return self.invariant

    def summary(self) -> Dict[str, Any]:
        """Plain-data view for YAML export."""
        return {
            "invariant": self.invariant,
            "grid_resolution": list(self.grid_resolution),
            "witness_state": None if self.witness_state is None else self.witness_state.tolist(),
            "witness_input": None if self.witness_input is None else self.witness_input.tolist(),
            "witness_image": None if self.witness_image is None else self.witness_image.tolist(),
        }


@dataclass
class LargeInputSpec:
    """Radii beyond which inputs away from every hyperplane H_j force contraction.

    An input u belongs to P_j(epsilon, R_j) when |cos angle(u, (W_in)_j)| >= epsilon and
    |u| >= R_j; inside the intersection over j every pre-activation satisfies |xi_j| >= xi_bar.
    """

    epsilon: float
    mu: float
    xi_bar: float
    radii: np.ndarray
    sigma_bounds: np.ndarray
    w_in: np.ndarray = field(repr=False)

    @property
    def radius(self) -> float:
        """Largest R_j: inputs need at least this norm."""
        return float(np.max(self.radii))

    def contains(self, u: np.ndarray, rtol: float = 1e-12) -> bool:
        """Membership of `u` in the intersection of all P_j(epsilon, R_j)."""
        value = np.array(u, dtype=np.float64, ndmin=1)
        norm = float(np.linalg.norm(value))
        if norm == 0.0:
            return False
        cosines = np.abs(self.w_in @ value) / (np.linalg.norm(self.w_in, axis=1) * norm)
        return bool(np.all(cosines >= self.epsilon - rtol) and np.all(norm >= self.radii * (1.0 - rtol)))

    def suggest_far_value(self, scale: float = 1.0, seed: int = 0, candidates: int = 256) -> np.ndarray:
        """Deterministic input inside the region, of norm `scale * radius`.

        Tries the normalised rows of W_in, the coordinate axes and seeded random directions and
        keeps the direction with the largest worst-case |cos| to the rows.

        Raises:
            CertificationError: when no candidate direction clears epsilon for every row.
        """
        n_i = self.w_in.shape[1]
        rows = self.w_in / np.linalg.norm(self.w_in, axis=1, keepdims=True)
        random_dirs = substream(seed, Stream.DIRECTIONS).normal(size=(candidates, n_i))
        pool = np.vstack([rows, np.eye(n_i), -np.eye(n_i), random_dirs])
        pool = pool / np.linalg.norm(pool, axis=1, keepdims=True)
        worst = np.min(np.abs(pool @ rows.T), axis=1)
        best = int(np.argmax(worst))
        if worst[best] < self.epsilon:
            raise CertificationError(
                f"no direction found with |cos| >= {self.epsilon} to every row of W_in"
            )
        return pool[best] * self.radius * max(scale, 1.0)

    def summary(self) -> Dict[str, Any]:
        """Plain-data view for YAML export."""
        return {
            "epsilon": self.epsilon,
            "mu": self.mu,
            "xi_bar": self.xi_bar,
            "radii": self.radii.tolist(),
            "sigma_bounds": self.sigma_bounds.tolist(),
        }


def _samples(params: RnnParams, u_samples: Sequence[np.ndarray]) -> np.ndarray:
    samples = np.array(u_samples, dtype=np.float64)
    if samples.size == 0:
        raise CertificationError("u_samples must not be empty")
    samples = samples.reshape(-1, params.n_i)
    return samples


def _sample_drives(params: RnnParams, samples: np.ndarray) -> np.ndarray:
    return params.drive(InputSequence(anchor=0, values=samples), 0, samples.shape[0] - 1)


def local_contraction_norm(params: RnnParams, u: np.ndarray, x: np.ndarray) -> float:
    """Spectral norm of D_x G(u, x)."""
    return spectral_norm(jacobian(params, u, x))


def region_contraction_check(
    params: RnnParams,
    region: Region,
    u_samples: Sequence[np.ndarray],
    mu: float,
    grid: Resolution = 33,
) -> ContractionReport:
    """Evaluate |D_x G(u, x)| on the grid of `region` for every sampled input.

    Certified iff the maximum is <= mu. Ties for the maximum go to the lowest grid index.
    """
    samples = _samples(params, u_samples)
    region.check_inside(params.bound)
    points = region.grid(grid)
    drives = _sample_drives(params, samples)
    norms = np.empty((points.shape[0], samples.shape[0]))
    for s, drive_row in enumerate(drives):
        norms[:, s] = np.linalg.norm(jacobians(params, drive_row, points), ord=2, axis=(1, 2))
    per_point = norms.max(axis=1)
    worst = int(np.argmax(per_point))
    worst_norm = float(per_point[worst])
    report = ContractionReport(
        mu=mu,
        certified=worst_norm <= mu,
        grid_resolution=region.resolution(grid),
        worst_norm=worst_norm,
        worst_point=points[worst],
        worst_input=samples[int(np.argmax(norms[worst]))],
        input_samples=f"{samples.shape[0]} explicit values",
    )
    logger.debug("contraction check over %d points: worst %.6g at %s", points.shape[0], worst_norm, report.worst_point)
    return report


def region_invariance_check(
    params: RnnParams, region: Region, u_samples: Sequence[np.ndarray], grid: Resolution = 33
) -> InvarianceReport:
    """Whether G(u, x) stays in `region` for every grid point x and sampled u."""
    samples = _samples(params, u_samples)
    points = region.grid(grid)
    resolution = region.resolution(grid)
    for drive_row, u in zip(_sample_drives(params, samples), samples):
        images = params.advance(drive_row, points)
        outside = np.flatnonzero(~region.contains(images))
        if outside.size:
            idx = int(outside[0])
            logger.debug("region not invariant: %s -> %s under u=%s", points[idx], images[idx], u)
            return InvarianceReport(
                invariant=False,
                grid_resolution=resolution,
                witness_state=points[idx],
                witness_input=u,
                witness_image=images[idx],
            )
    return InvarianceReport(invariant=True, grid_resolution=resolution)


def strip_bounds_closed_form(symbol: int = 1) -> Tuple[float, float]:
    """Strip of the two-symbol system where |D_x f_symbol| > 1 along x_2.

    Solves 1 + alpha/2 (1 - 3 tanh^2(3 x_2 / 2 + c)) = 1, i.e. x_2 = (+-atanh(1/sqrt 3) - c) / 1.5,
    with c = 3/20 for f_1 and -3/20 for f_2.
    """
    if symbol not in (1, 2):
        raise ConfigurationError(f"symbol must be 1 or 2, got {symbol}")
    offset = SWITCHING_U1[1] if symbol == 1 else -SWITCHING_U1[1]
    edge = math.atanh(1.0 / math.sqrt(3.0))
    gain = SWITCHING_W_R[1]
    return (-edge - offset) / gain, (edge - offset) / gain


def switching_jacobian_diagonal(x: np.ndarray, symbol: int = 1) -> np.ndarray:
    """Closed-form Jacobian diagonal of f_symbol at a batch of states (P, 2)."""
    pts = np.array(x, dtype=np.float64, ndmin=2)
    sign = 1.0 if symbol == 1 else -1.0
    half = SWITCHING_ALPHA / 2.0
    first = 1.0 - half * (1.0 + np.tanh(pts[:, 0] / 2.0 + sign * SWITCHING_U1[0]) ** 2)
    second = 1.0 + half * (1.0 - 3.0 * np.tanh(1.5 * pts[:, 1] + sign * SWITCHING_U1[1]) ** 2)
    return np.stack([first, second], axis=1)


def closed_form_norm_check(params: RnnParams, grid: int = 101) -> float:
    """Largest |closed-form norm - SVD norm| over a grid of [-1, 1]^2 for both symbols."""
    points = Region.full(2).grid(grid)
    symbols = np.array([SWITCHING_U1, [-v for v in SWITCHING_U1]])
    worst = 0.0
    for symbol, drive_row in zip((1, 2), _sample_drives(params, symbols)):
        svd = np.linalg.norm(jacobians(params, drive_row, points), ord=2, axis=(1, 2))
        closed = np.max(np.abs(switching_jacobian_diagonal(points, symbol)), axis=1)
        worst = max(worst, float(np.max(np.abs(svd - closed))))
    return worst


def global_esp_check(params: RnnParams, mu: float, grid: Optional[Resolution] = None) -> ContractionReport:
    """Check phi'(0) |W_r + W_fb D_x psi| <= mu, which gives echo index one for every input.

    With a linear (or absent) readout D_x psi is constant, so one evaluation covers the whole
    state grid. With leak alpha < 1 the reported effective rate is 1 - alpha (1 - mu).
    """
    if not 0.0 < mu < 1.0:
        raise CertificationError(f"mu must lie in (0, 1), got {mu}")
    if grid is not None:
        logger.debug("global check: state grid %s not needed for a constant effective matrix", grid)
    norm = 1.0 * spectral_norm(params.effective_recurrent)  # tanh'(0) = 1
    return ContractionReport(
        mu=mu,
        certified=norm <= mu,
        grid_resolution=(1,) * params.n_r,
        worst_norm=norm,
        worst_point=np.zeros(params.n_r),
        input_samples="all inputs",
        effective_rate=1.0 - params.alpha * (1.0 - mu),
    )


def large_input_radius(params: RnnParams, epsilon: float, mu: float) -> LargeInputSpec:
    """Radii R_j = (xi_bar + sigma_j) / (epsilon |(W_in)_j|) of the large-input regions.

    sigma_j is the maximum over [-L, L]^N_r of |(W_r x + W_fb psi(x))_j|; for a linear readout it
    is attained at a vertex and equals L times the l1 norm of row j of the effective matrix.
    xi_bar solves tanh'(xi_bar) sigma_tilde = mu with sigma_tilde = |W_r + W_fb W_o|, clamped
    to 0 when mu >= sigma_tilde.

    Raises:
        CertificationError: if a row of W_in is zero or the parameters are out of range.
    """
    if not 0.0 < epsilon <= 1.0:
        raise CertificationError(f"epsilon must lie in (0, 1], got {epsilon}")
    if not 0.0 < mu < 1.0:
        raise CertificationError(f"mu must lie in (0, 1), got {mu}")
    row_norms = np.linalg.norm(params.w_in, axis=1)
    if np.any(row_norms == 0.0):
        zero_rows = np.flatnonzero(row_norms == 0.0).tolist()
        raise CertificationError(f"rows {zero_rows} of W_in are zero; no large-input region exists")
    effective = params.effective_recurrent
    sigma = params.bound * np.sum(np.abs(effective), axis=1)
    sigma_tilde = spectral_norm(effective)
    ratio = mu / sigma_tilde if sigma_tilde > 0.0 else math.inf
    xi_bar = 0.0 if ratio >= 1.0 else math.atanh(math.sqrt(1.0 - ratio))
    radii = (xi_bar + sigma) / (epsilon * row_norms)
    return LargeInputSpec(
        epsilon=epsilon,
        mu=mu,
        xi_bar=xi_bar,
        radii=radii,
        sigma_bounds=sigma,
        w_in=np.array(params.w_in),
    )


def contraction_rate_along(params: RnnParams, u: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Observed ratio d(G(u, x), G(u, y)) / d(x, y)."""
    gap = float(np.linalg.norm(np.asarray(x) - np.asarray(y)))
    if gap == 0.0:
        return 0.0
    return float(np.linalg.norm(step(params, u, x) - step(params, u, y))) / gap


def switching_regions() -> Dict[str, Region]:
    """The two boxes R+ and R- of the two-symbol system."""
    return {
        "upper": Region(lo=[-1.0, 0.55], hi=[1.0, 1.0]),
        "lower": Region(lo=[-1.0, -1.0], hi=[1.0, -0.55]),
    }


def certify_region(
    params: RnnParams, region: Region, u_samples: Sequence[np.ndarray], mu: float, grid: Resolution = 33
) -> Tuple[InvarianceReport, ContractionReport]:
    """Both hypotheses of the region certifier: positive invariance and contraction."""
    return (
        region_invariance_check(params, region, u_samples, grid),
        region_contraction_check(params, region, u_samples, mu, grid),
    )
