"""
oracle_reference 테스트: 기준 구현 자체의 정확성과 독립성
"""

import ast
import math
from pathlib import Path

import numpy as np
import pytest

from core_model import MergeMap, RopeConfig, UniqueSequence, init_attention_weights, merge_map_identity
from oracle_reference import (
    _rotate,
    duplicated_attention,
    full_rope_attention,
    loop_attention,
    reference_threshold,
    reference_vtu,
)


class TestFullRopeAttention:
    """펼친 시퀀스의 RoPE 어텐션"""

    def test_zero_angles_match_textbook(self, rng):
        for _ in range(3):
            weights = init_attention_weights(rng, 8, 2)
            e = rng.normal(size=(5, 8))
            angles = RopeConfig(4).angles(np.zeros(5))
            heads = []
            for h in range(2):
                cols = weights.head_slice(h)
                heads.append(loop_attention(e @ weights.wq[:, cols], e @ weights.wk[:, cols],
                                            e @ weights.wv[:, cols], 0.5))
            np.testing.assert_allclose(full_rope_attention(e, angles, weights), np.hstack(heads) @ weights.wo,
                                       rtol=1e-12, atol=1e-13)

    def test_single_token_returns_projected_value(self, rng):
        weights = init_attention_weights(rng, 4, 1)
        e = rng.normal(size=(1, 4))
        got = full_rope_attention(e, RopeConfig(4).angles([0]), weights)
        np.testing.assert_allclose(got, e @ weights.wv @ weights.wo, rtol=1e-12)

    def test_rotation_preserves_component_norms(self, rng):
        x = rng.normal(size=(8, 4))
        rotated = _rotate(x, RopeConfig(4).angles(np.arange(8)))
        for k in range(2):
            np.testing.assert_allclose(np.hypot(rotated[:, 2 * k], rotated[:, 2 * k + 1]),
                                       np.hypot(x[:, 2 * k], x[:, 2 * k + 1]), rtol=1e-12)

    def test_causal_mask_in_loop_reference(self, rng):
        q, k, v = (rng.normal(size=(4, 2)) for _ in range(3))
        mask = np.triu(np.full((4, 4), -np.inf), k=1)
        out = loop_attention(q, k, v, 1.0, mask)
        np.testing.assert_allclose(out[0], v[0])


class TestReferenceVtu:
    """그룹 평균 정답"""

    def test_identity_map(self, rng):
        weights = init_attention_weights(rng, 8, 2)
        e = rng.normal(size=(6, 8))
        angles = RopeConfig(4).angles(np.arange(6))
        got = reference_vtu(UniqueSequence(e, merge_map_identity(6)), weights, angles)
        np.testing.assert_allclose(got, full_rope_attention(e, angles, weights), rtol=1e-12)

    def test_single_group_constant_output(self, rng):
        """모든 위치가 0이면 출력 행이 모두 같고 평균도 그 행"""
        weights = init_attention_weights(rng, 4, 1)
        seq = UniqueSequence(rng.normal(size=(1, 4)), MergeMap(3, ((0, 1, 2),)), positions=np.zeros(3))
        angles = RopeConfig(4).angles(seq.positions)
        full = full_rope_attention(np.repeat(seq.e_un, 3, axis=0), angles, weights)
        np.testing.assert_allclose(reference_vtu(seq, weights, angles), full[:1], rtol=1e-12)


class TestDuplicatedAttention:
    """키/값 복제 기준"""

    def test_unit_sizes_standard(self, rng):
        q = rng.normal(size=3)
        k, v = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        logits = k @ q * 0.7
        weights = np.exp(logits - logits.max())
        np.testing.assert_allclose(duplicated_attention(q, k, v, [1, 1, 1, 1], 0.7),
                                   weights / weights.sum() @ v, rtol=1e-12)

    def test_two_to_one(self):
        out = duplicated_attention(np.zeros(2), np.zeros((2, 2)), np.eye(2), [2, 1], 1.0)
        np.testing.assert_allclose(out, [2 / 3, 1 / 3])

    def test_uniform_scaling(self, rng):
        q = rng.normal(size=2)
        k, v = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        np.testing.assert_allclose(duplicated_attention(q, k, v, [1, 2, 3], 1.0),
                                   duplicated_attention(q, k, v, [3, 6, 9], 1.0), rtol=1e-12)


class TestReferenceThreshold:
    """정렬 기반 순서 통계량"""

    def test_examples(self):
        assert reference_threshold([3, 1, 2], 2) == 2
        assert reference_threshold([3, 1, 2], 0) == math.inf
        assert reference_threshold([3, 1, 2], 3) == -math.inf

    def test_negative_k(self):
        with pytest.raises(ValueError):
            reference_threshold([1.0], -1)


class TestIndependence:
    """기준 구현은 최적화 경로 모듈을 가져오지 않습니다."""

    def test_imports_only_core_model(self):
        tree = ast.parse(Path(__file__).with_name("oracle_reference.py").read_text(encoding="utf-8"))
        imported = set()
        for node in ast.walk(tree):
            if isinstance(node, ast.ImportFrom):
                imported.add(node.module)
            elif isinstance(node, ast.Import):
                imported.update(alias.name for alias in node.names)
        assert imported <= {"math", "typing", "numpy", "core_model"}
