"""Training-free complexity metrics at initialization.

A circle h(theta) = sqrt(N) [u0 cos(theta) + u1 sin(theta)] in input space is
pushed through the network. Derivatives along theta are central finite
differences, integrals are left-Riemann sums over M uniform samples of
[0, 2*pi). The NTK condition number comes from per-sample parameter gradients.
"""

import copy
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from vitgauge import seeding
from vitgauge.errors import EvaluationError
from vitgauge.network import build_network, param_gradients
from vitgauge.topology import ScaleSpec, TopologySpec, spec_hash

logger = logging.getLogger(__name__)

METRICS = ("kappa", "LE", "LE_kappa", "kappa_theta")
# What search rewards and scaling ranks read.
REWARD_METRICS = ("LE", "kappa_theta")
DEGENERATE_NORM = 1e-12
PSD_TOLERANCE = 1e-10


@dataclass(frozen=True)
class CircleBasis:
    """Orthonormal pair spanning the plane of the input circle."""

    u0: np.ndarray
    u1: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.u0.shape[0])

    @classmethod
    def from_seed(cls, dim: int, seed: int) -> "CircleBasis":
        """Orthonormalize two standard-normal vectors drawn from `seed`."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
        return cls(u0=q[:, 0].copy(), u1=q[:, 1].copy())


@dataclass(frozen=True)
class EvalProtocol:
    """How metrics are sampled.

    Attributes:
        samples: Number of theta samples M.
        seeds: Number of network initializations averaged.
        step_scale: Finite-difference half-width as a fraction of 2*pi/M.
        ntk_batch: Inputs used to build the NTK matrix.
        metrics: Which of METRICS to compute; the rest are reported as NaN.
        conventional_length: Integrate ||v|| instead of sqrt(||v||) for LE.
        seed: Global seed for bases, NTK batches and initializations.
    """

    samples: int = 10
    seeds: int = 5
    step_scale: float = 1e-3
    ntk_batch: int = 8
    metrics: Tuple[str, ...] = METRICS
    conventional_length: bool = False
    seed: int = 0

    @property
    def step(self) -> float:
        return self.step_scale * 2 * math.pi / self.samples

    @property
    def thetas(self) -> np.ndarray:
        return 2 * math.pi * np.arange(self.samples) / self.samples


@dataclass
class ComplexityReport:
    """Metrics averaged over initialization seeds, with the raw rows kept."""

    kappa: float
    LE: float
    LE_kappa: float
    kappa_theta: float
    per_seed: pd.DataFrame = field(repr=False)

    def as_dict(self) -> Dict[str, float]:
        return {"kappa": self.kappa, "LE": self.LE, "LE_kappa": self.LE_kappa, "kappa_theta": self.kappa_theta}


def circle_point(basis: CircleBasis, theta: float) -> torch.Tensor:
    """h(theta) as a float64 tensor of shape (N,)."""
    return _circle_points(basis, np.array([theta]))[0]


def jacobians_theta(net: Callable, basis: CircleBasis, theta: float, step: float) -> Tuple[np.ndarray, np.ndarray]:
    """First and second theta-derivatives of the output at `theta`.

    Returns:
        (v, a) with v the central difference and a the second difference.

    Raises:
        ComplexityError: If step is not positive or outputs are non-finite.
    """
    if step <= 0:
        raise ComplexityError(f"Finite-difference step must be positive, got {step}")
    out = _outputs(net, basis, np.array([theta - step, theta, theta + step]))
    minus, center, plus = out[0], out[1], out[2]
    v = (plus - minus) / (2 * step)
    a = (plus - 2 * center + minus) / step ** 2
    return v, a


def curvature(net: Callable, basis: CircleBasis, protocol: EvalProtocol) -> float:
    """Integrated curvature of the output curve.

    Raises:
        ComplexityError: If the tangent vanishes at any sample.
    """
    total = 0.0
    for theta in protocol.thetas:
        v, a = jacobians_theta(net, basis, theta, protocol.step)
        vv = float(v @ v)
        if math.sqrt(vv) < DEGENERATE_NORM:
            raise ComplexityError(f"Degenerate tangent at theta={theta:.4f}: curvature is singular")
        aa = float(a @ a)
        va = float(v @ a)
        total += vv ** -1.5 * math.sqrt(max(vv * aa - va * va, 0.0))
    return total * 2 * math.pi / protocol.samples


def length_distortion(net: Callable, basis: CircleBasis, protocol: EvalProtocol) -> float:
    """Integral of sqrt(||v||) (or ||v|| with conventional_length) over theta."""
    norms = np.linalg.norm(_tangents(net, basis, protocol.thetas, protocol.step), axis=1)
    if not np.all(np.isfinite(norms)):
        raise ComplexityError("Non-finite Jacobian norm")
    integrand = norms if protocol.conventional_length else np.sqrt(norms)
    return float(integrand.sum() * 2 * math.pi / protocol.samples)


def length_distortion_curv(net: Callable, basis: CircleBasis, protocol: EvalProtocol) -> float:
    """Integral of sqrt(||d/dtheta v_hat||), v_hat the unit tangent.

    Raises:
        ComplexityError: If the tangent vanishes next to any sample.
    """
    step = protocol.step
    total = 0.0
    for theta in protocol.thetas:
        v = _tangents(net, basis, np.array([theta - step, theta + step]), step)
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms < DEGENERATE_NORM) or not np.all(np.isfinite(norms)):
            raise ComplexityError(f"Degenerate tangent at theta={theta:.4f}: v_hat is undefined")
        v_hat = v / norms[:, None]
        dv_hat = (v_hat[1] - v_hat[0]) / (2 * step)
        total += math.sqrt(float(np.linalg.norm(dv_hat)))
    return total * 2 * math.pi / protocol.samples


def ntk_matrix(net: torch.nn.Module, batch: Sequence[torch.Tensor]) -> np.ndarray:
    """Gram matrix of per-sample parameter gradients."""
    grads = torch.stack([param_gradients(net, x.unsqueeze(0)) for x in batch])
    return (grads @ grads.T).double().cpu().numpy()


def ntk_condition(net: torch.nn.Module, batch: Sequence[torch.Tensor]) -> float:
    """lambda_max / lambda_min of the empirical NTK.

    Raises:
        ComplexityError: For fewer than two inputs, or a singular or indefinite kernel.
    """
    if len(batch) < 2:
        raise ComplexityError(f"NTK condition number needs at least 2 inputs, got {len(batch)}")
    eigenvalues = np.linalg.eigvalsh(ntk_matrix(net, batch))
    lam_min, lam_max = float(eigenvalues[0]), float(eigenvalues[-1])
    if not np.isfinite(lam_max) or lam_max <= 0:
        raise ComplexityError("NTK matrix is zero or non-finite")
    if lam_min <= PSD_TOLERANCE * lam_max:
        raise ComplexityError(
            f"NTK matrix is singular or indefinite (lambda_min={lam_min:.3e}, lambda_max={lam_max:.3e})"
        )
    return lam_max / lam_min


def ntk_inputs(dim: int, size: int, seed: int) -> List[torch.Tensor]:
    """Standard-normal NTK batch."""
    rng = seeding.generator(seed, "ntk")
    data = rng.standard_normal((size, dim))
    return [torch.from_numpy(row) for row in data]


def evaluate(
    net_factory: Callable[[int], torch.nn.Module],
    protocol: EvalProtocol,
    input_dim: Optional[int] = None,
    basis: Optional[CircleBasis] = None,
    ntk_batch: Optional[Sequence[torch.Tensor]] = None,
    jobs: int = 1,
) -> ComplexityReport:
    """Average the selected metrics over `protocol.seeds` initializations.

    Args:
        net_factory: Builds a network for an initialization seed.
        protocol: Sampling protocol.
        input_dim: Input dimensionality N; read from the network when omitted.
        basis: Circle basis; derived from the "basis" stream when omitted.
        ntk_batch: NTK inputs; derived from the "ntk" stream when omitted.
        jobs: Worker threads for the per-seed evaluations.

    Raises:
        ComplexityError: If any metric fails; the message names the seed index.
    """
    init_seeds = [seeding.derive_seed(protocol.seed, "init", k) for k in range(protocol.seeds)]
    if input_dim is None:
        input_dim = int(net_factory(init_seeds[0]).input_dim)
    basis = basis or CircleBasis.from_seed(input_dim, seeding.derive_seed(protocol.seed, "basis"))
    if ntk_batch is None and "kappa_theta" in protocol.metrics:
        ntk_batch = ntk_inputs(input_dim, protocol.ntk_batch, protocol.seed)

    def run(index: int) -> Dict[str, float]:
        try:
            return _evaluate_one(net_factory(init_seeds[index]), basis, ntk_batch, protocol)
        except EvaluationError as e:
            raise ComplexityError(f"seed index {index}: {e}") from e

    if jobs > 1 and protocol.seeds > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run, range(protocol.seeds)))
    else:
        rows = [run(k) for k in range(protocol.seeds)]

    per_seed = pd.DataFrame(rows, columns=["seed", *METRICS, "wall_ms"])
    per_seed["seed"] = init_seeds
    means = per_seed[list(METRICS)].mean(axis=0)
    for index, row in per_seed.iterrows():
        logger.debug("seed %d: %s", index, {m: row[m] for m in METRICS})
    return ComplexityReport(
        kappa=float(means["kappa"]),
        LE=float(means["LE"]),
        LE_kappa=float(means["LE_kappa"]),
        kappa_theta=float(means["kappa_theta"]),
        per_seed=per_seed,
    )


def report_rows(report: ComplexityReport, key: str) -> pd.DataFrame:
    """Per-seed rows in results-CSV column order."""
    rows = report.per_seed.copy()
    rows.insert(0, "spec_hash", key)
    return rows[["spec_hash", "seed", *METRICS, "wall_ms"]]


class ProxyEvaluator:
    """Scores architectures with a fixed basis and NTK batch for paired comparisons.

    Args:
        protocol: Sampling protocol, shared by every call.
        input_res: Network input resolution.
        jobs: Worker threads per evaluation.
    """

    def __init__(self, protocol: EvalProtocol, input_res: int = 32, jobs: int = 1):
        self.protocol = protocol
        self.input_res = input_res
        self.jobs = jobs
        input_dim = 3 * input_res * input_res
        self.basis = CircleBasis.from_seed(input_dim, seeding.derive_seed(protocol.seed, "basis"))
        self.ntk_batch = ntk_inputs(input_dim, protocol.ntk_batch, protocol.seed)
        self.calls = 0

    def __call__(self, topology: TopologySpec, scale: ScaleSpec) -> ComplexityReport:
        self.calls += 1

        def factory(seed: int):
            return build_network(topology, scale, seed=seed, input_res=self.input_res)

        report = evaluate(
            factory,
            self.protocol,
            input_dim=3 * self.input_res * self.input_res,
            basis=self.basis,
            ntk_batch=self.ntk_batch,
            jobs=self.jobs,
        )
        logger.debug("%s LE=%.4g kappa_theta=%.4g", spec_hash(topology, scale), report.LE, report.kappa_theta)
        return report

    def with_protocol(self, **changes) -> "ProxyEvaluator":
        """Same basis and NTK batch, different protocol settings (e.g. seeds=5)."""
        clone = copy.copy(self)
        clone.protocol = replace(self.protocol, **changes)
        clone.calls = 0
        return clone


def _evaluate_one(net, basis, ntk_batch, protocol: EvalProtocol) -> Dict[str, float]:
    started = time.perf_counter()
    row = {metric: float("nan") for metric in METRICS}
    if "kappa" in protocol.metrics:
        row["kappa"] = curvature(net, basis, protocol)
    if "LE" in protocol.metrics:
        row["LE"] = length_distortion(net, basis, protocol)
    if "LE_kappa" in protocol.metrics:
        row["LE_kappa"] = length_distortion_curv(net, basis, protocol)
    if "kappa_theta" in protocol.metrics:
        row["kappa_theta"] = ntk_condition(net, ntk_batch)
    row["wall_ms"] = (time.perf_counter() - started) * 1000
    return row


def _circle_points(basis: CircleBasis, thetas: np.ndarray) -> torch.Tensor:
    scale = math.sqrt(basis.dim)
    points = scale * (np.cos(thetas)[:, None] * basis.u0 + np.sin(thetas)[:, None] * basis.u1)
    return torch.from_numpy(points)


def _outputs(net: Callable, basis: CircleBasis, thetas: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        out = net(_circle_points(basis, thetas))
    out = out.double().reshape(len(thetas), -1).cpu().numpy()
    if not np.all(np.isfinite(out)):
        raise ComplexityError("Non-finite network output on the input circle")
    return out


def _tangents(net: Callable, basis: CircleBasis, thetas: np.ndarray, step: float) -> np.ndarray:
    """Central-difference tangents v(theta) for every theta, one batched pass."""
    points = np.concatenate([thetas - step, thetas + step])
    out = _outputs(net, basis, points)
    count = len(thetas)
    return (out[count:] - out[:count]) / (2 * step)


class ComplexityError(EvaluationError):
    """Raised when a complexity metric is undefined or non-finite."""
