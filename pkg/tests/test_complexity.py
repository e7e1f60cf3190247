"""Tests for the curve metrics and the NTK condition number."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from vitgauge.complexity import (
    METRICS,
    CircleBasis,
    ComplexityError,
    EvalProtocol,
    ProxyEvaluator,
    circle_point,
    curvature,
    evaluate,
    jacobians_theta,
    length_distortion,
    length_distortion_curv,
    ntk_condition,
    ntk_inputs,
    ntk_matrix,
    report_rows,
)
from vitgauge.topology import SEED_TOPOLOGY, ScaleSpec

DIM = 16
TINY = ScaleSpec(depths=(1, 1, 1, 1), width=8)


class DiagonalGain(nn.Module):
    """f(x) = g * x with a trainable gain per coordinate; its NTK is the Gram matrix."""

    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim, dtype=torch.float64))

    def forward(self, x):
        return x * self.gain


class Constant(nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


class Scaled(nn.Module):
    def __init__(self, factor: float):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return self.factor * x


def _tanh_net(seed: int = 0) -> nn.Module:
    """Two-layer tanh MLP whose pre-activations swing a few units around the input circle."""
    generator = torch.Generator().manual_seed(seed)
    net = nn.Sequential(nn.Linear(DIM, 32), nn.Tanh(), nn.Linear(32, 8)).double()
    with torch.no_grad():
        for layer, std in ((net[0], 0.5), (net[2], 32 ** -0.5)):
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator, dtype=torch.float64) * std)
            layer.bias.copy_(torch.randn(layer.bias.shape, generator=generator, dtype=torch.float64) * 0.5)
    return net


def _fd_gradient(net: nn.Module, x: torch.Tensor, step: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of the summed output w.r.t. every parameter."""
    grads = []
    with torch.no_grad():
        for param in net.parameters():
            flat = param.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                plus = net(x).sum().item()
                flat[i] = original - step
                minus = net(x).sum().item()
                flat[i] = original
                grads.append((plus - minus) / (2 * step))
    return torch.tensor(grads, dtype=torch.float64)


def _basis() -> CircleBasis:
    return CircleBasis.from_seed(DIM, 3)


def _unit(index: int, scale: float = 1.0) -> torch.Tensor:
    x = torch.zeros(DIM, dtype=torch.float64)
    x[index] = scale
    return x


class TestCircle:
    def test_basis_is_orthonormal(self):
        basis = _basis()
        assert basis.u0 @ basis.u0 == pytest.approx(1.0)
        assert basis.u1 @ basis.u1 == pytest.approx(1.0)
        assert basis.u0 @ basis.u1 == pytest.approx(0.0, abs=1e-12)

    def test_circle_radius_is_sqrt_dim(self):
        point = circle_point(_basis(), 1.3)
        assert torch.linalg.norm(point).item() == pytest.approx(math.sqrt(DIM))

    def test_non_positive_step_raises(self):
        with pytest.raises(ComplexityError, match="positive"):
            jacobians_theta(nn.Identity(), _basis(), 0.0, 0.0)


class TestIdentityOracle:
    @pytest.mark.parametrize("samples,rel", [(10, 1e-2), (1000, 1e-4)])
    def test_curvature(self, samples, rel):
        protocol = EvalProtocol(samples=samples)
        assert curvature(nn.Identity(), _basis(), protocol) == pytest.approx(2 * math.pi / 4, rel=rel)

    @pytest.mark.parametrize("samples,rel", [(10, 1e-2), (1000, 1e-4)])
    def test_length_distortion(self, samples, rel):
        protocol = EvalProtocol(samples=samples)
        assert length_distortion(nn.Identity(), _basis(), protocol) == pytest.approx(4 * math.pi, rel=rel)

    @pytest.mark.parametrize("samples,rel", [(10, 1e-2), (1000, 1e-4)])
    def test_length_distortion_curv(self, samples, rel):
        protocol = EvalProtocol(samples=samples)
        assert length_distortion_curv(nn.Identity(), _basis(), protocol) == pytest.approx(2 * math.pi, rel=rel)

    @pytest.mark.parametrize("factor", [0.25, 3.0])
    def test_unit_tangent_ignores_output_scale(self, factor):
        protocol = EvalProtocol(samples=10)
        plain = length_distortion_curv(nn.Identity(), _basis(), protocol)
        assert length_distortion_curv(Scaled(factor), _basis(), protocol) == pytest.approx(plain, rel=1e-9)

    def test_conventional_length_is_circumference(self):
        protocol = EvalProtocol(samples=100, conventional_length=True)
        expected = 2 * math.pi * math.sqrt(DIM)
        assert length_distortion(nn.Identity(), _basis(), protocol) == pytest.approx(expected, rel=1e-4)

    def test_tangent_is_orthogonal_to_acceleration(self):
        v, a = jacobians_theta(nn.Identity(), _basis(), 0.7, 1e-4)
        assert np.linalg.norm(v) == pytest.approx(math.sqrt(DIM), rel=1e-6)
        assert abs(v @ a) / (np.linalg.norm(v) * np.linalg.norm(a)) < 1e-4


class TestQuadrature:
    @pytest.mark.parametrize("metric", [curvature, length_distortion, length_distortion_curv])
    def test_refinement_settles(self, metric):
        net = _tanh_net()
        coarse, medium, fine = (metric(net, _basis(), EvalProtocol(samples=m)) for m in (10, 30, 100))
        assert abs(fine - medium) < abs(medium - coarse)
        assert fine == pytest.approx(medium, rel=1e-3)


class TestDegenerate:
    def test_constant_net_curvature_raises(self):
        with pytest.raises(ComplexityError, match="Degenerate tangent"):
            curvature(Constant(), _basis(), EvalProtocol())

    def test_constant_net_unit_tangent_raises(self):
        with pytest.raises(ComplexityError, match="Degenerate tangent"):
            length_distortion_curv(Constant(), _basis(), EvalProtocol())

    def test_constant_net_has_zero_length(self):
        assert length_distortion(Constant(), _basis(), EvalProtocol()) == 0.0


class TestNtk:
    def test_matrix_is_gram_matrix(self):
        rng = np.random.default_rng(0)
        batch = [torch.from_numpy(row) for row in rng.standard_normal((5, DIM))]
        gram = np.stack([x.numpy() for x in batch])
        gram = gram @ gram.T
        assert np.allclose(ntk_matrix(DiagonalGain(DIM), batch), gram, atol=1e-10)

    def test_orthonormal_batch_is_perfectly_conditioned(self):
        batch = [_unit(0), _unit(1), _unit(2)]
        assert ntk_condition(DiagonalGain(DIM), batch) == pytest.approx(1.0)

    def test_scaled_batch(self):
        assert ntk_condition(DiagonalGain(DIM), [_unit(0), _unit(1, 2.0)]) == pytest.approx(4.0)

    def test_condition_ignores_batch_order(self):
        net = _tanh_net()
        batch = ntk_inputs(DIM, 5, seed=2)
        shuffled = [batch[i] for i in (2, 0, 4, 1, 3)]
        assert ntk_condition(net, shuffled) == pytest.approx(ntk_condition(net, batch), rel=1e-9)

    def test_matrix_matches_finite_differences(self):
        net = _tanh_net(seed=1)
        batch = ntk_inputs(DIM, 3, seed=4)
        grads = torch.stack([_fd_gradient(net, x) for x in batch])
        expected = (grads @ grads.T).numpy()
        np.testing.assert_allclose(ntk_matrix(net, batch), expected, rtol=1e-6)

    def test_single_input_raises(self):
        with pytest.raises(ComplexityError, match="at least 2"):
            ntk_condition(DiagonalGain(DIM), [_unit(0)])

    def test_duplicate_inputs_are_singular(self):
        with pytest.raises(ComplexityError, match="singular or indefinite"):
            ntk_condition(DiagonalGain(DIM), [_unit(0), _unit(0)])


class TestEvaluate:
    def test_identity_report(self):
        report = evaluate(
            lambda seed: DiagonalGain(DIM),
            EvalProtocol(samples=50, seeds=2, ntk_batch=4),
            input_dim=DIM,
        )
        assert report.LE == pytest.approx(4 * math.pi, rel=1e-3)
        assert report.kappa == pytest.approx(math.pi / 2, rel=1e-3)
        assert len(report.per_seed) == 2
        assert np.isfinite(report.kappa_theta)

    def test_metric_selection_leaves_nan(self):
        report = evaluate(lambda seed: DiagonalGain(DIM), EvalProtocol(seeds=1, metrics=("LE",)), input_dim=DIM)
        assert np.isfinite(report.LE)
        assert math.isnan(report.kappa)
        assert math.isnan(report.kappa_theta)

    def test_failure_names_seed_index(self):
        with pytest.raises(ComplexityError, match="seed index 0"):
            evaluate(lambda seed: Constant(), EvalProtocol(seeds=1, metrics=("kappa",)), input_dim=DIM)

    def test_report_rows_column_order(self):
        report = evaluate(lambda seed: DiagonalGain(DIM), EvalProtocol(seeds=3, metrics=("LE",)), input_dim=DIM)
        rows = report_rows(report, "abc123")
        assert list(rows.columns) == ["spec_hash", "seed", *METRICS, "wall_ms"]
        assert len(rows) == 3
        assert set(rows["spec_hash"]) == {"abc123"}


class TestProxyEvaluator:
    def test_row_count_follows_seeds(self):
        evaluator = ProxyEvaluator(EvalProtocol(samples=4, seeds=1, ntk_batch=3))
        one = evaluator(SEED_TOPOLOGY, TINY)
        two = evaluator.with_protocol(seeds=2)(SEED_TOPOLOGY, TINY)
        assert len(one.per_seed) == 1
        assert len(two.per_seed) == 2
        assert all(np.isfinite(value) for value in one.as_dict().values())

    def test_is_deterministic(self):
        protocol = EvalProtocol(samples=4, seeds=1, ntk_batch=3, seed=9)
        a = ProxyEvaluator(protocol)(SEED_TOPOLOGY, TINY)
        b = ProxyEvaluator(protocol)(SEED_TOPOLOGY, TINY)
        assert a.as_dict() == b.as_dict()

    def test_with_protocol_shares_basis_and_batch(self):
        evaluator = ProxyEvaluator(EvalProtocol(samples=4, seeds=1, ntk_batch=3))
        evaluator(SEED_TOPOLOGY, TINY)
        clone = evaluator.with_protocol(seeds=5)
        assert clone.basis is evaluator.basis
        assert clone.ntk_batch is evaluator.ntk_batch
        assert clone.protocol.seeds == 5
        assert clone.calls == 0
        assert evaluator.calls == 1

    def test_threads_match_serial(self):
        protocol = EvalProtocol(samples=4, seeds=4, ntk_batch=3)
        serial = ProxyEvaluator(protocol, jobs=1)(SEED_TOPOLOGY, TINY)
        threaded = ProxyEvaluator(protocol, jobs=4)(SEED_TOPOLOGY, TINY)
        columns = list(METRICS)
        np.testing.assert_allclose(threaded.per_seed[columns].to_numpy(), serial.per_seed[columns].to_numpy(), rtol=1e-10)
        assert threaded.as_dict() == pytest.approx(serial.as_dict(), rel=1e-10)
