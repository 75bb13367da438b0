#!/usr/bin/env python3
"""
무차별 대입(펼친 뒤 계산) 기준 구현
최적화 경로와 코드를 공유하지 않고 core_model 의 타입과 밀집 원-핫 행렬만 씁니다.
검증 명령과 테스트의 정답으로 사용합니다.
"""

import math
from typing import Optional, Sequence

import numpy as np

from core_model import BlockWeights, AttentionWeights, RopeAngles, UniqueSequence


def _softmax(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits)
    for i, row in enumerate(logits):
        peak = np.max(row)
        e = np.exp(row - peak)
        out[i] = e / e.sum()
    return out


def _rotate(x: np.ndarray, angles: RopeAngles) -> np.ndarray:
    """각 위치의 (2k, 2k+1) 쌍을 θ[m][k] 만큼 회전"""
    out = np.empty_like(x)
    for m in range(x.shape[0]):
        for k in range(x.shape[1] // 2):
            c, s = math.cos(angles.theta[m, k]), math.sin(angles.theta[m, k])
            a, b = x[m, 2 * k], x[m, 2 * k + 1]
            out[m, 2 * k] = a * c - b * s
            out[m, 2 * k + 1] = a * s + b * c
    return out


def _dense_expand(seq: UniqueSequence) -> np.ndarray:
    return seq.map.as_matrix() @ seq.e_un


def _dense_remerge(seq: UniqueSequence, y: np.ndarray) -> np.ndarray:
    m = seq.map.as_matrix()
    return np.linalg.solve(m.T @ m, m.T @ y)


def full_rope_similarity(q: np.ndarray, k: np.ndarray, angles: RopeAngles) -> np.ndarray:
    return _rotate(np.asarray(q, dtype=np.float64), angles) @ _rotate(np.asarray(k, dtype=np.float64), angles).T


def full_rope_attention(e, angles: RopeAngles, weights: AttentionWeights,
                        mask: Optional[np.ndarray] = None) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != weights.dim:
        raise ValueError(f"입력 크기 {e.shape} 가 가중치 차원 {weights.dim} 과 맞지 않습니다")
    if angles.n_positions != e.shape[0] or angles.head_dim != weights.head_dim:
        raise ValueError("각도 표 크기가 입력과 맞지 않습니다")
    head_dim = weights.head_dim
    heads = []
    for h in range(weights.heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        q = e @ weights.wq[:, cols]
        k = e @ weights.wk[:, cols]
        v = e @ weights.wv[:, cols]
        logits = full_rope_similarity(q, k, angles) / math.sqrt(head_dim)
        if mask is not None:
            logits = logits + mask
        heads.append(_softmax(logits) @ v)
    return np.hstack(heads) @ weights.wo


def reference_vtu(seq: UniqueSequence, weights: AttentionWeights, angles: RopeAngles,
                  mask: Optional[np.ndarray] = None) -> np.ndarray:
    """(MᵀM)⁻¹Mᵀ · Attention(M·e_un)"""
    return _dense_remerge(seq, full_rope_attention(_dense_expand(seq), angles, weights, mask))


def reference_pointwise(seq: UniqueSequence, op) -> np.ndarray:
    """펼침 → 행별 연산 → 그룹 평균"""
    return _dense_remerge(seq, op(_dense_expand(seq)))


def duplicated_attention(q_row, k_un, v_un, sizes: Sequence[int], scale: float) -> np.ndarray:
    """키/값 j 를 sizes[j] 번 복제한 표준 어텐션 한 행"""
    q_row = np.asarray(q_row, dtype=np.float64)
    keys, values = [], []
    for j, count in enumerate(sizes):
        keys.extend([k_un[j]] * int(count))
        values.extend([v_un[j]] * int(count))
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    return _softmax((keys @ q_row * scale)[None, :])[0] @ values


def reference_threshold(scores, k: int) -> float:
    """전체 내림차순 정렬 후 k번째 값 (k=0 → +∞, k > 개수 → -∞)"""
    if k < 0:
        raise ValueError(f"k는 0 이상이어야 합니다: {k}")
    if k == 0:
        return math.inf
    ordered = sorted((float(s) for s in np.ravel(scores)), reverse=True)
    if k >= len(ordered):
        return -math.inf
    return ordered[k - 1]


def loop_attention(q, k, v, scale: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """교과서식 이중 루프 scaled dot-product 어텐션 (두 번째 독립 구현)"""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [sum(q[i, d] * k[j, d] for d in range(q.shape[1])) * scale for j in range(k.shape[0])]
        if mask is not None:
            logits = [value + mask[i, j] for j, value in enumerate(logits)]
        peak = max(logits)
        weights = [math.exp(value - peak) for value in logits]
        total = sum(weights)
        for j, w in enumerate(weights):
            out[i] += (w / total) * v[j]
    return out


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    sigma2 = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(sigma2 + eps) * gain + bias


def _mlp(x, blk: BlockWeights):
    h = x @ blk.w1 + blk.b1
    h = 0.5 * h * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (h + 0.044715 * h ** 3)))
    return h @ blk.w2 + blk.b2


def full_decoder_layer(e, weights: BlockWeights, angles: RopeAngles,
                       mask: Optional[np.ndarray] = None) -> np.ndarray:
    """재병합 없는 전체 길이 프리-노름 디코더 블록"""
    e = np.asarray(e, dtype=np.float64)
    x = e + full_rope_attention(_layer_norm(e, weights.ln1_gain, weights.ln1_bias), angles, weights.attention, mask)
    return x + _mlp(_layer_norm(x, weights.ln2_gain, weights.ln2_bias), weights)


def reference_decoder_layer(seq: UniqueSequence, weights: BlockWeights, angles: RopeAngles,
                            mask: Optional[np.ndarray] = None) -> np.ndarray:
    """펼친 시퀀스에서 어텐션 출력만 그룹 평균한 뒤 고유 행 잔차와 MLP 를 적용"""
    expanded = _dense_expand(seq)
    attended = full_rope_attention(_layer_norm(expanded, weights.ln1_gain, weights.ln1_bias),
                                   angles, weights.attention, mask)
    x = seq.e_un + _dense_remerge(seq, attended)
    return x + _mlp(_layer_norm(x, weights.ln2_gain, weights.ln2_bias), weights)
