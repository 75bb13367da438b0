#!/usr/bin/env python3
"""
동적 토큰 병합(DToMe) 레이어 연산
교대 이분 분할 → 키 유사도 간선 → 임계값/top-r 선택 → 크기 가중 병합
"""

import logging
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence, Tuple, Union

import numpy as np

from core_model import MergeMap, SizeVector, as_token_matrix, merge_map_identity
from errors import InvalidArgumentError, MergeLogicError, ShapeError

logger = logging.getLogger(__name__)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """최댓값을 빼서 안정화한 마지막 축 softmax"""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=-1, keepdims=True)


def similarity_keys(keys_per_head: np.ndarray) -> np.ndarray:
    """헤드 평균 후 L2 정규화한 키 (코사인 유사도용). 입력 (heads, N, D_head)"""
    keys = np.asarray(keys_per_head, dtype=np.float64)
    if keys.ndim == 2:
        keys = keys[None]
    mean_keys = keys.mean(axis=0)
    norms = np.linalg.norm(mean_keys, axis=-1, keepdims=True)
    return mean_keys / np.maximum(norms, np.finfo(np.float64).tiny)


# ==================== 이분 분할 ====================
@dataclass(frozen=True)
class BipartiteSplit:
    """set_a: 병합 가능한 쪽(소스), set_b: 목적지 쪽"""

    set_a: Tuple[int, ...]
    set_b: Tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.set_a) + len(self.set_b)


def split_alternating(n: int) -> BipartiteSplit:
    """짝수 위치 → B, 홀수 위치 → A. 위치 0(CLS)은 항상 B에 있어 소스가 되지 않습니다."""
    if n < 2:
        raise InvalidArgumentError(f"분할에는 토큰이 2개 이상 필요합니다: {n}")
    set_a = tuple(range(1, n, 2))
    set_b = tuple(range(0, n, 2))
    return BipartiteSplit(set_a=set_a, set_b=set_b)


# ==================== 간선 ====================
class Edge(NamedTuple):
    src: int
    dst: int
    score: float


@dataclass(frozen=True, eq=False)
class EdgeSet:
    """src 오름차순으로 정렬된 간선 배열"""

    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray

    @classmethod
    def empty(cls) -> "EdgeSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def from_edges(cls, edges: Sequence[Tuple[int, int, float]]) -> "EdgeSet":
        if not edges:
            return cls.empty()
        src, dst, scores = zip(*edges)
        return cls(np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64), np.asarray(scores, dtype=np.float64))

    def __len__(self) -> int:
        return int(self.src.size)

    def __iter__(self) -> Iterator[Edge]:
        for s, d, score in zip(self.src, self.dst, self.scores):
            yield Edge(int(s), int(d), float(score))

    def subset(self, keep: np.ndarray) -> "EdgeSet":
        """불리언 마스크 또는 정렬된 인덱스로 부분집합 (순서 유지)"""
        return EdgeSet(self.src[keep], self.dst[keep], self.scores[keep])


def bipartite_scores(keys, split: BipartiteSplit) -> EdgeSet:
    """A의 각 토큰을 가장 비슷한 키를 가진 B 토큰에 잇습니다. 동점은 낮은 dst 우선."""
    keys = as_token_matrix(keys, "keys")
    if keys.shape[0] != split.n:
        raise ShapeError(f"키 행 수 {keys.shape[0]} != |A|+|B| {split.n}")
    if not split.set_a:
        return EdgeSet.empty()
    set_a = np.asarray(split.set_a, dtype=np.int64)
    set_b = np.asarray(split.set_b, dtype=np.int64)
    scores = keys[set_a] @ keys[set_b].T
    best = np.argmax(scores, axis=1)
    return EdgeSet(src=set_a, dst=set_b[best], scores=scores[np.arange(set_a.size), best])


def select_edges_threshold(edges: EdgeSet, tau: float) -> EdgeSet:
    """점수 ≥ τ 인 간선만 남깁니다."""
    return edges.subset(edges.scores >= tau)


def select_edges_topr(edges: EdgeSet, r: int) -> EdgeSet:
    """점수 상위 min(r, |edges|)개 (동점은 낮은 src 우선)"""
    if r <= 0 or len(edges) == 0:
        return EdgeSet.empty()
    ranked = np.lexsort((edges.src, -edges.scores))[:r]
    return edges.subset(np.sort(ranked))


# ==================== 병합 ====================
def _validate_edges(selected: EdgeSet, n: int):
    src, dst = selected.src, selected.dst
    if np.any(src < 0) or np.any(src >= n) or np.any(dst < 0) or np.any(dst >= n):
        raise MergeLogicError(f"범위를 벗어난 간선 위치 (토큰 수 {n})")
    if np.unique(src).size != src.size:
        raise MergeLogicError("같은 소스가 두 번 이상 병합됩니다")
    if np.intersect1d(src, dst).size:
        raise MergeLogicError("소스이면서 목적지인 위치가 있습니다")


def apply_merge(x, layer_sizes: SizeVector, selected: EdgeSet) -> Tuple[np.ndarray, MergeMap]:
    """
    각 간선 t → t_B 에 대해 크기 가중 평균으로 목적지를 갱신하고 소스를 제거합니다.
    한 목적지에 여러 소스가 오면 src 오름차순으로 순차 누적합니다.
    반환 맵은 이 레이어 입력 위치 → 생존 토큰이며, 행 순서는 그룹 최솟값 순입니다.
    """
    x = as_token_matrix(x, "x")
    n = x.shape[0]
    if len(layer_sizes) != n:
        raise ShapeError(f"크기 벡터 길이 {len(layer_sizes)} != 토큰 수 {n}")
    if len(selected) == 0:
        return x.copy(), merge_map_identity(n)
    _validate_edges(selected, n)

    merged = x.copy()
    weight = layer_sizes.array.copy()
    members = {p: [p] for p in range(n)}
    for i in np.argsort(selected.src, kind="stable"):
        s, d = int(selected.src[i]), int(selected.dst[i])
        total = weight[s] + weight[d]
        merged[d] = (merged[s] * weight[s] + merged[d] * weight[d]) / total
        weight[d] = total
        members[d].extend(members.pop(s))

    survivors = sorted(members, key=lambda p: min(members[p]))
    layer_map = MergeMap.from_groups(n, (members[p] for p in survivors))
    return merged[survivors], layer_map


def size_weighted_attention(q, k, v, sizes: Union[SizeVector, Sequence[float]], scale: float) -> np.ndarray:
    """softmax(q·kᵀ·scale + log|P|) · v. k, v 는 (..., N, D_head), q 행 수는 자유"""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    size_array = sizes.array if isinstance(sizes, SizeVector) else np.asarray(sizes, dtype=np.float64)
    n = size_array.size
    if k.shape[-2] != n or v.shape[-2] != n:
        raise ShapeError(f"k/v 행 수 ({k.shape[-2]}, {v.shape[-2]}) != 크기 벡터 길이 {n}")
    logits = (q @ np.swapaxes(k, -1, -2)) * scale + np.log(size_array)
    return softmax_rows(logits) @ v
