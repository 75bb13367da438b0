#!/usr/bin/env python3
"""
가상 토큰 언머징(VTU) 어텐션
고유 토큰 e_un 과 원-핫 매핑 M 만으로 전체 시퀀스의 RoPE 어텐션을 정확히 재구성합니다.

성분 k (좌표 2k, 2k+1) 마다
    A_k = (c cᵀ + s sᵀ) ⊙ M·QK_k·Mᵀ + (s cᵀ − c sᵀ) ⊙ M·QxK_k·Mᵀ
를 더하며, M·G·Mᵀ 는 그룹 인덱스로 행/열을 펼쳐 얻습니다.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from core_model import (
    AttentionWeights,
    BlockWeights,
    MergeMap,
    RopeAngles,
    RopeConfig,
    UniqueSequence,
    as_token_matrix,
    layer_norm,
    merge_map_identity,
    mlp,
    remerge_average,
    validate_mask,
)
from dtome_engine import softmax_rows
from errors import InvalidArgumentError, ShapeError

logger = logging.getLogger(__name__)

FLOPS_CSV_HEADER = "n_full,n_unique,d_total,full_mflops,vtu_mflops"


# ==================== 계측 ====================
@dataclass
class SimilarityCounter:
    """유사도 단계별 스칼라 곱셈 수와 투영된 Q/K 행 수"""

    gram: int = 0
    phase: int = 0
    projected_rows: int = 0


# ==================== 기본 항등식 ====================
def rope_similarity_entry(q_pair, k_pair, dtheta: float) -> float:
    """(q1k1+q2k2)·cos dθ + (q1k2−q2k1)·sin dθ,  dθ = θ_q − θ_k"""
    q1, q2 = float(q_pair[0]), float(q_pair[1])
    k1, k2 = float(k_pair[0]), float(k_pair[1])
    return (q1 * k1 + q2 * k2) * np.cos(dtheta) + (q1 * k2 - q2 * k1) * np.sin(dtheta)


def _check_pair_inputs(q_un, k_un) -> Tuple[np.ndarray, np.ndarray]:
    q_un = as_token_matrix(q_un, "q_un")
    k_un = as_token_matrix(k_un, "k_un")
    if q_un.shape != k_un.shape:
        raise ShapeError(f"q_un {q_un.shape} 와 k_un {k_un.shape} 크기가 다릅니다")
    if q_un.shape[1] % 2:
        raise ShapeError(f"헤드 차원이 홀수입니다: {q_un.shape[1]}")
    return q_un, k_un


def component_grams(q_un, k_un, counter: Optional[SimilarityCounter] = None) -> Tuple[np.ndarray, np.ndarray]:
    """성분별 (QK_k, QxK_k), 각각 (D_head/2, N_un, N_un)"""
    q_un, k_un = _check_pair_inputs(q_un, k_un)
    q1, q2 = q_un[:, 0::2].T, q_un[:, 1::2].T
    k1, k2 = k_un[:, 0::2].T, k_un[:, 1::2].T
    qk = q1[:, :, None] * k1[:, None, :] + q2[:, :, None] * k2[:, None, :]
    qxk = q1[:, :, None] * k2[:, None, :] - q2[:, :, None] * k1[:, None, :]
    if counter is not None:
        n_un, head_dim = q_un.shape
        counter.gram += 2 * n_un * n_un * head_dim
    return qk, qxk


def gram_pair(q_un, k_un) -> Tuple[np.ndarray, np.ndarray]:
    """모든 성분을 합친 (QK, QxK). 위치와 무관한(dθ 공통) 경우에만 그대로 쓸 수 있습니다."""
    qk, qxk = component_grams(q_un, k_un)
    return qk.sum(axis=0), qxk.sum(axis=0)


# ==================== 유사도 ====================
def vtu_similarity(q_un, k_un, m: MergeMap, angles: RopeAngles,
                   counter: Optional[SimilarityCounter] = None) -> np.ndarray:
    """
    RoPE(M·Q_un)·RoPE(M·K_un)ᵀ 를 N×D 중간 행렬 없이 계산한 N×N 유사도

    그램 단계만 N_un² 에 비례합니다. 위상 결합 단계는 헤드마다 3·N²·D_head 로
    전체 길이에 비례하며, flops_model 은 그램 단계만 셉니다.
    """
    q_un, k_un = _check_pair_inputs(q_un, k_un)
    n_un, head_dim = q_un.shape
    if n_un != m.n_unique:
        raise ShapeError(f"고유 행 수 {n_un} != 그룹 수 {m.n_unique}")
    if angles.head_dim != head_dim or angles.n_positions != m.n_full:
        raise ShapeError(f"각도 표 {angles.theta.shape} 가 N={m.n_full}, D_head={head_dim} 과 맞지 않습니다")

    qk, qxk = component_grams(q_un, k_un, counter)
    idx = m.group_index
    n = m.n_full
    cos, sin = angles.cos, angles.sin
    similarity = np.zeros((n, n))
    for comp in range(head_dim // 2):
        c, s = cos[:, comp], sin[:, comp]
        g = qk[comp][np.ix_(idx, idx)]
        x = qxk[comp][np.ix_(idx, idx)]
        similarity += (np.outer(c, c) + np.outer(s, s)) * g + (np.outer(s, c) - np.outer(c, s)) * x
    if counter is not None:
        counter.phase += 3 * n * n * head_dim
        counter.projected_rows = max(counter.projected_rows, n_un)
    return similarity


# ==================== 어텐션 ====================
def vtu_attention_core(q_un, k_un, v_un, m: MergeMap, angles: RopeAngles,
                       mask: Optional[np.ndarray] = None,
                       counter: Optional[SimilarityCounter] = None) -> np.ndarray:
    """한 헤드: softmax(A/√D_head + mask)·M·V_un 을 그룹 평균해 N_un×D_head 로 돌려줍니다."""
    v_un = as_token_matrix(v_un, "v_un")
    if v_un.shape[0] != m.n_unique:
        raise ShapeError(f"v_un 행 수 {v_un.shape[0]} != 그룹 수 {m.n_unique}")
    head_dim = np.asarray(q_un).shape[1]
    logits = vtu_similarity(q_un, k_un, m, angles, counter) / np.sqrt(head_dim)
    if mask is not None:
        logits = logits + mask
    probs = softmax_rows(logits)

    # P·M : 같은 그룹 열끼리 합산
    grouped = np.zeros((m.n_unique, m.n_full))
    np.add.at(grouped, m.group_index, probs.T)
    return remerge_average(m, grouped.T) @ v_un


def vtu_attention(seq: UniqueSequence, weights: AttentionWeights, rope: RopeConfig,
                  mask: Optional[np.ndarray] = None,
                  counter: Optional[SimilarityCounter] = None) -> UniqueSequence:
    """다중 헤드 VTU 어텐션. 재병합된 출력과 같은 MergeMap 을 돌려줍니다."""
    if rope.dim != weights.head_dim:
        raise ShapeError(f"RoPE 차원 {rope.dim} != 헤드 차원 {weights.head_dim}")
    e_un = seq.e_un
    if e_un.shape[1] != weights.dim:
        raise ShapeError(f"임베딩 차원 {e_un.shape[1]} != 가중치 차원 {weights.dim}")
    mask = validate_mask(mask, seq.n_full)
    angles = rope.angles(seq.positions)

    outputs = []
    for h in range(weights.heads):
        cols = weights.head_slice(h)
        q_un = e_un @ weights.wq[:, cols]
        k_un = e_un @ weights.wk[:, cols]
        v_un = e_un @ weights.wv[:, cols]
        outputs.append(vtu_attention_core(q_un, k_un, v_un, seq.map, angles, mask, counter))
    return seq.replace_embeddings(np.hstack(outputs) @ weights.wo)


def rope_rotate(x: np.ndarray, angles: RopeAngles) -> np.ndarray:
    """각 행의 (2k, 2k+1) 쌍을 θ[m][k] 만큼 회전"""
    x = as_token_matrix(x, "x")
    out = np.empty_like(x)
    even, odd = x[:, 0::2], x[:, 1::2]
    out[:, 0::2] = even * angles.cos - odd * angles.sin
    out[:, 1::2] = even * angles.sin + odd * angles.cos
    return out


def full_attention_core(q, k, v, angles: RopeAngles, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """표준 경로 한 헤드: softmax(RoPE(Q)·RoPE(K)ᵀ/√D_head + mask)·V"""
    q = as_token_matrix(q, "q")
    logits = rope_rotate(q, angles) @ rope_rotate(k, angles).T / np.sqrt(q.shape[1])
    if mask is not None:
        logits = logits + mask
    return softmax_rows(logits) @ np.asarray(v, dtype=np.float64)


def lift_pointwise(op: Callable[[np.ndarray], np.ndarray], seq: UniqueSequence) -> UniqueSequence:
    """f(M·e_un) = M·f(e_un) : 행별 연산은 고유 행에만 적용합니다."""
    return seq.replace_embeddings(op(seq.e_un))


def decoder_layer_vtu(seq: UniqueSequence, weights: BlockWeights, rope: RopeConfig,
                      mask: Optional[np.ndarray] = None) -> UniqueSequence:
    """
    프리-노름 디코더 블록.
    어텐션 출력을 재병합한 뒤 고유 행 잔차에 더합니다 (재병합 후 잔차).
    """
    normed = lift_pointwise(lambda e: layer_norm(e, weights.ln1_gain, weights.ln1_bias), seq)
    attended = vtu_attention(normed, weights.attention, rope, mask)
    hidden = seq.replace_embeddings(seq.e_un + attended.e_un)
    return lift_pointwise(
        lambda e: e + mlp(layer_norm(e, weights.ln2_gain, weights.ln2_bias), weights), hidden)


# ==================== 멀티모달 시퀀스 ====================
def build_multimodal_sequence(prefix, visual: UniqueSequence, suffix=None) -> UniqueSequence:
    """
    텍스트 접두부 + 고유 시각 토큰 + 텍스트 접미부.
    텍스트 토큰은 단일 원소 그룹이 되고 위치는 0..N-1 로 다시 매깁니다.
    """
    dim = visual.e_un.shape[1]
    parts, maps = [], []
    for name, block in (("prefix", prefix), ("suffix", suffix)):
        if block is not None and np.asarray(block).size and np.asarray(block).shape[-1] != dim:
            raise ShapeError(f"{name} 차원 {np.asarray(block).shape[-1]} != 시각 토큰 차원 {dim}")

    def add_text(block):
        if block is None or np.asarray(block).size == 0:
            return
        block = as_token_matrix(block, "text")
        parts.append(block)
        maps.append(merge_map_identity(block.shape[0]))

    add_text(prefix)
    parts.append(visual.e_un)
    maps.append(visual.map)
    add_text(suffix)
    return UniqueSequence(e_un=np.vstack(parts), map=MergeMap.concat(maps))


# ==================== FLOPs ====================
@dataclass(frozen=True)
class FlopsReport:
    """유사도 그람 행렬의 곱-누산만 센 분석적 비용 (MFLOPs)"""

    n_full: int
    n_unique: int
    d_total: int
    full_mflops: float
    vtu_mflops: float

    def to_csv_line(self) -> str:
        return f"{self.n_full},{self.n_unique},{self.d_total},{self.full_mflops:.1f},{self.vtu_mflops:.1f}"


def flops_model(n: int, n_un: int, heads: int, head_dim: int) -> FlopsReport:
    """full = N²·D/1e6 (QKᵀ),  vtu = 2·N_un²·D/1e6 (QKᵀ 와 Q×Kᵀ)"""
    if n < 1 or n_un < 1 or heads < 1 or head_dim < 1:
        raise InvalidArgumentError("n, n_un, heads, head_dim 은 모두 1 이상이어야 합니다")
    if n_un > n:
        raise InvalidArgumentError(f"n_un={n_un} 이 n={n} 보다 큽니다")
    d_total = heads * head_dim
    return FlopsReport(
        n_full=n,
        n_unique=n_un,
        d_total=d_total,
        full_mflops=n * n * d_total / 1e6,
        vtu_mflops=2 * n_un * n_un * d_total / 1e6,
    )
