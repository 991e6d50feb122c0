from dataclasses import dataclass, field

import numpy as np

from forelem.apps import (
    check_statistics,
    kmeans_assignment,
    kmeans_statistics,
    lloyd_margins,
    matmul_result,
    oracle_dense_matmul,
    oracle_power_iteration,
    pagerank_residual,
    pagerank_vector,
    sort_result,
    wcss,
)
from forelem.executor import RunStatus


@dataclass
class VerifyResult:
    passed: bool
    residual: float
    details: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return "pass" if self.passed else "fail"


class Verifier:
    def __init__(self, runner):
        self.runner = runner

    @property
    def state(self):
        return self.runner.result.state

    @property
    def status(self) -> RunStatus:
        return self.runner.result.status

    def verify(self) -> VerifyResult:
        raise NotImplementedError

    def eval(self) -> VerifyResult:
        """
        Check the finished run against its oracle and log the outcome.
        """
        result = self.verify()
        extra = " ".join(f"{k}={v}" for k, v in result.details.items())
        self.runner.log(f"Verification: {result.label} residual={result.residual:.3g} {extra}".rstrip())
        return result


class PageRankVerifier(Verifier):
    """
    Compares the terminated ranks with pull-style power iteration.
    """

    tolerance = 1e-6

    def verify(self) -> VerifyResult:
        prob = self.runner.problem
        pr = pagerank_vector(self.state, prob.vertices)
        oracle = oracle_power_iteration(prob)
        residual = float(np.abs(pr - oracle).max()) if prob.vertices else 0.0
        return VerifyResult(
            residual <= self.tolerance,
            residual,
            {"fixed_point_residual": f"{pagerank_residual(prob, pr):.3g}", "rank_sum": f"{pr.sum():.6f}"},
        )


class KMeansVerifier(Verifier):
    """
    Lloyd fixed-point recheck plus recount of the maintained cluster statistics.

    The fixed-point part only applies to runs that terminated; early-stopped
    runs are checked for consistent statistics alone.
    """

    tolerance = 1e-9

    def verify(self) -> VerifyResult:
        prob = self.runner.problem
        assign = kmeans_assignment(self.state, prob.n)
        sums, sizes = kmeans_statistics(self.state, prob.k, prob.dim)
        problems = check_statistics(prob.points, assign, sums, sizes)
        margins = lloyd_margins(prob.points, assign, prob.k)
        violators = np.flatnonzero(margins > self.tolerance)
        fixed_point_required = self.status == RunStatus.TERMINATED
        passed = not problems and (len(violators) == 0 or not fixed_point_required)
        details = {"wcss": f"{wcss(prob.points, assign, prob.k):.6g}", "movable_points": len(violators)}
        if problems:
            details["statistics"] = "; ".join(problems[:3])
        residual = float(margins.max()) if len(margins) else 0.0
        return VerifyResult(passed, residual, details)


class MatmulVerifier(Verifier):
    """Elementwise comparison with the dense triple-loop product."""

    def verify(self) -> VerifyResult:
        A, B = self.runner.problem
        expected = oracle_dense_matmul(A, B)
        got = matmul_result(self.state, expected.shape)
        residual = float(np.abs(got - expected).max()) if expected.size else 0.0
        return VerifyResult(bool(np.array_equal(got, expected)) or residual <= 1e-9, residual)


class SortVerifier(Verifier):
    def verify(self) -> VerifyResult:
        original = np.asarray(self.runner.problem, dtype=np.float64)
        got = sort_result(self.state, len(original))
        descents = int((np.diff(got) < 0).sum())
        passed = descents == 0 and np.array_equal(np.sort(got), np.sort(original))
        return VerifyResult(bool(passed), float(descents), {"n": len(original)})
