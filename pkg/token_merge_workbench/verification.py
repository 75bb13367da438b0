#!/usr/bin/env python3
"""
기준 구현 대비 무작위 동치성 검증 스위트
verify 명령과 테스트가 함께 사용합니다. 같은 시드면 같은 보고서 문자열이 나옵니다.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np

import settings
from core_model import (
    MergeMap,
    RopeConfig,
    UniqueSequence,
    causal_mask,
    expand,
    init_attention_weights,
    init_block_weights,
    layer_norm,
    mlp,
)
from dtome_engine import size_weighted_attention
from oracle_reference import (
    duplicated_attention,
    full_rope_similarity,
    reference_pointwise,
    reference_threshold,
    reference_vtu,
)
from threshold_calibrator import calibrate_layer
from vtu_attention import flops_model, lift_pointwise, vtu_attention, vtu_similarity

logger = logging.getLogger(__name__)

# (n, n_un) → (열, 공개된 MFLOPs, 비교 자릿수), heads=32, head_dim=128
# "1dp": 소수 첫째 자리, "4sig": 유효숫자 4자리 (공개 표가 정수로 반올림한 행)
PUBLISHED_FLOPS = {
    (576, 576): ("full", 1359.0, "1dp"),
    (576, 89): ("vtu", 64.9, "1dp"),
    (576, 195): ("vtu", 311.5, "1dp"),
    (576, 394): ("vtu", 1272.0, "4sig"),
}

PERTURBATION = 1e-3


def random_merge_map(rng: np.random.Generator, n: int, n_un: int) -> MergeMap:
    """정확히 n_un 개 그룹을 갖는 무작위 분할"""
    if not 1 <= n_un <= n:
        raise ValueError(f"1 ≤ n_un ≤ n 이어야 합니다: n={n}, n_un={n_un}")
    labels = rng.integers(0, n_un, size=n)
    labels[rng.permutation(n)[:n_un]] = np.arange(n_un)
    return MergeMap.from_group_index(labels)


def relative_error(actual, expected) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(np.linalg.norm(expected), np.finfo(np.float64).tiny)
    return float(np.linalg.norm(actual - expected) / scale)


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{self.name:<24} cases={self.cases:<5d} max_err={self.max_error:.3e} tol={self.tolerance:.0e}  {mark}"


@dataclass
class VerificationReport:
    seed: int
    results: List[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def text(self) -> str:
        lines = [f"seed={self.seed}"] + [r.line() for r in self.results]
        lines.append("ALL PASS" if self.passed else "FAILED")
        return "\n".join(lines)


# ==================== 스위트 ====================
def suite_similarity(rng: np.random.Generator, cases: int, max_n: int = 128,
                     head_dims=(2, 4, 64), perturb: bool = False) -> SuiteResult:
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, max_n + 1))
        n_un = int(rng.integers(1, n + 1))
        head_dim = int(rng.choice(head_dims))
        m = random_merge_map(rng, n, n_un)
        angles = RopeConfig(head_dim, base=settings.ROPE_BASE).angles(np.arange(n))
        q_un = rng.normal(size=(n_un, head_dim))
        k_un = rng.normal(size=(n_un, head_dim))
        got = vtu_similarity(q_un, k_un, m, angles)
        if perturb:
            got = got + PERTURBATION * np.abs(got).max()
        want = full_rope_similarity(expand(m, q_un), expand(m, k_un), angles)
        worst = max(worst, relative_error(got, want))
    return SuiteResult("vtu_similarity", cases, worst, 1e-10)


def suite_attention(rng: np.random.Generator, cases: int, max_n: int = 48,
                    perturb: bool = False) -> SuiteResult:
    """짝수 번째 케이스는 인과 마스크를 씁니다."""
    worst = 0.0
    for case in range(cases):
        n = int(rng.integers(1, max_n + 1))
        n_un = int(rng.integers(1, n + 1))
        heads = int(rng.choice([1, 4]))
        head_dim = int(rng.choice([2, 4]))
        dim = heads * head_dim
        weights = init_attention_weights(rng, dim, heads)
        seq = UniqueSequence(rng.normal(size=(n_un, dim)), random_merge_map(rng, n, n_un))
        rope = RopeConfig(head_dim, base=settings.ROPE_BASE)
        mask = causal_mask(n) if case % 2 == 0 else None
        got = vtu_attention(seq, weights, rope, mask).e_un
        if perturb:
            got = got + PERTURBATION * np.abs(got).max()
        want = reference_vtu(seq, weights, rope.angles(seq.positions), mask)
        worst = max(worst, relative_error(got, want))
    return SuiteResult("vtu_attention", cases, worst, 1e-8)


def suite_size_weighted(rng: np.random.Generator, cases: int, max_size: int = 64) -> SuiteResult:
    worst = 0.0
    for _ in range(cases):
        n_un = int(rng.integers(1, 9))
        head_dim = int(rng.choice([2, 4, 8]))
        sizes = rng.integers(1, max_size + 1, size=n_un)
        q = rng.normal(size=(1, head_dim))
        k = rng.normal(size=(n_un, head_dim))
        v = rng.normal(size=(n_un, head_dim))
        scale = 1.0 / np.sqrt(head_dim)
        got = size_weighted_attention(q, k, v, sizes, scale)[0]
        want = duplicated_attention(q[0], k, v, sizes, scale)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return SuiteResult("size_weighted", cases, worst, 1e-10)


def suite_pointwise(rng: np.random.Generator, cases: int, max_n: int = 48) -> SuiteResult:
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, max_n + 1))
        n_un = int(rng.integers(1, n + 1))
        dim = int(rng.choice([4, 8, 16]))
        blk = init_block_weights(rng, dim, 1, 2 * dim)
        seq = UniqueSequence(rng.normal(size=(n_un, dim)), random_merge_map(rng, n, n_un))

        def op(e, blk=blk):
            return mlp(layer_norm(e, blk.ln1_gain, blk.ln1_bias), blk)

        got = lift_pointwise(op, seq).e_un
        worst = max(worst, relative_error(got, reference_pointwise(seq, op)))
    return SuiteResult("pointwise_lifting", cases, worst, 1e-12)


def suite_threshold(rng: np.random.Generator, cases: int, max_len: int = 64) -> SuiteResult:
    """모든 k 에 대해 불일치 수를 셉니다."""
    mismatches = 0
    for _ in range(cases):
        scores = rng.normal(size=int(rng.integers(1, max_len + 1)))
        for k in range(scores.size + 2):
            if calibrate_layer(scores, k) != reference_threshold(scores, k):
                mismatches += 1
    return SuiteResult("threshold_order_stat", cases, float(mismatches), 0.0)


def matches_published(value: float, published: float, precision: str) -> bool:
    if precision == "1dp":
        return round(value, 1) == published
    if precision == "4sig":
        return float(f"{value:.4g}") == float(f"{published:.4g}")
    raise ValueError(f"알 수 없는 비교 자릿수: {precision}")


def suite_flops() -> SuiteResult:
    """행마다 기록된 자릿수로만 공개 값과 비교합니다."""
    mismatches = 0
    for (n, n_un), (column, published, precision) in PUBLISHED_FLOPS.items():
        report = flops_model(n, n_un, heads=32, head_dim=128)
        value = report.full_mflops if column == "full" else report.vtu_mflops
        if not matches_published(value, published, precision):
            mismatches += 1
            logger.warning("FLOPs 불일치 (%d, %d): %.1f != %.1f", n, n_un, value, published)
    return SuiteResult("flops_table", len(PUBLISHED_FLOPS), float(mismatches), 0.0)


def run_verification(seed: int = 0, cases: int = 20, max_n: int = 32,
                     perturb: bool = False) -> VerificationReport:
    """스위트마다 독립된 하위 난수 생성기를 씁니다."""
    children = np.random.SeedSequence(seed).spawn(5)
    rngs = [np.random.default_rng(child) for child in children]
    suites: List[Callable[[], SuiteResult]] = [
        lambda: suite_similarity(rngs[0], cases, max_n=max_n, perturb=perturb),
        lambda: suite_attention(rngs[1], cases, max_n=max_n, perturb=perturb),
        lambda: suite_size_weighted(rngs[2], cases),
        lambda: suite_pointwise(rngs[3], cases, max_n=max_n),
        lambda: suite_threshold(rngs[4], cases),
        suite_flops,
    ]
    report = VerificationReport(seed=seed)
    for suite in suites:
        result = suite()
        logger.info(result.line())
        report.results.append(result)
    return report
