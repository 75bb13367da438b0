#!/usr/bin/env python3
"""
공용 도메인 타입과 원-핫 매핑 대수
MergeMap(M)은 원래 위치들을 고유 토큰 그룹으로 나눈 분할이며 e = M · e_un 을 만족합니다.
M의 모든 곱은 행마다 1이 하나뿐이므로 위치 리스트만으로 O(N)에 계산합니다.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError, SchemaViolationError, ShapeError

# TokenMatrix: (행 = 토큰, 열 = 임베딩 차원) float64 2차원 배열
TokenMatrix = np.ndarray


def as_token_matrix(data, name: str = "x") -> TokenMatrix:
    """입력을 검증된 float64 토큰 행렬로 변환합니다."""
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f"{name}: 2차원 행렬이 필요합니다 (받은 차원 {matrix.ndim})")
    if matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise ShapeError(f"{name}: 빈 행렬입니다 {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError(f"{name}: 유한하지 않은 값이 포함되어 있습니다")
    return matrix


# ==================== MergeMap ====================
@dataclass(frozen=True)
class MergeMap:
    """원래 위치 {0..N-1}의 분할. 그룹은 최소 위치 순으로 정렬됩니다."""

    n_full: int
    groups: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        if self.n_full < 1:
            raise InvalidArgumentError(f"n_full은 1 이상이어야 합니다: {self.n_full}")
        previous_head = -1
        seen = 0
        members = []
        for group in self.groups:
            if not group:
                raise InvalidArgumentError("빈 그룹은 허용되지 않습니다")
            if any(b <= a for a, b in zip(group, group[1:])):
                raise InvalidArgumentError(f"그룹 원소가 정렬되어 있지 않습니다: {group}")
            if group[0] <= previous_head:
                raise InvalidArgumentError("그룹이 대표 위치(최솟값) 순으로 정렬되어 있지 않습니다")
            previous_head = group[0]
            seen += len(group)
            members.extend(group)
        if seen != self.n_full or sorted(members) != list(range(self.n_full)):
            raise InvalidArgumentError("그룹들이 {0..N-1}의 분할이 아닙니다")

    # ---------- 생성자 ----------
    @classmethod
    def from_groups(cls, n_full: int, groups: Iterable[Iterable[int]]) -> "MergeMap":
        """임의 순서의 그룹 목록을 정규화(원소 정렬, 최솟값 순 정렬)하여 생성합니다."""
        normalized = [tuple(sorted(int(p) for p in group)) for group in groups]
        if any(not group for group in normalized):
            raise InvalidArgumentError("빈 그룹은 허용되지 않습니다")
        normalized.sort(key=lambda group: group[0])
        return cls(int(n_full), tuple(normalized))

    @classmethod
    def from_group_index(cls, labels: Sequence[int]) -> "MergeMap":
        """위치별 그룹 라벨 배열로부터 생성합니다. 라벨 값 자체는 의미가 없습니다."""
        labels = np.asarray(labels)
        if labels.ndim != 1 or labels.size == 0:
            raise InvalidArgumentError("라벨은 비어 있지 않은 1차원 배열이어야 합니다")
        _, inverse = np.unique(labels, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse)
        chunks = np.split(order, np.cumsum(counts)[:-1])
        return cls.from_groups(labels.size, (chunk.tolist() for chunk in chunks))

    @classmethod
    def concat(cls, maps: Sequence["MergeMap"]) -> "MergeMap":
        """여러 맵을 위치를 이어 붙여 하나의 시퀀스 맵으로 합칩니다."""
        groups = []
        offset = 0
        for m in maps:
            groups.extend(tuple(p + offset for p in group) for group in m.groups)
            offset += m.n_full
        return cls(offset, tuple(groups))

    # ---------- 파생 뷰 ----------
    @property
    def n_unique(self) -> int:
        return len(self.groups)

    @cached_property
    def group_index(self) -> np.ndarray:
        """위치 p가 속한 그룹 번호 (길이 N). M의 행별 1의 열 위치와 같습니다."""
        index = np.empty(self.n_full, dtype=np.int64)
        for j, group in enumerate(self.groups):
            index[list(group)] = j
        index.setflags(write=False)
        return index

    @cached_property
    def size_array(self) -> np.ndarray:
        sizes_ = np.array([len(group) for group in self.groups], dtype=np.int64)
        sizes_.setflags(write=False)
        return sizes_

    def as_matrix(self) -> np.ndarray:
        """원-핫 행렬 M ∈ {0,1}^{N×N_un} (테스트/디버깅용 밀집 뷰)"""
        matrix = np.zeros((self.n_full, self.n_unique))
        matrix[np.arange(self.n_full), self.group_index] = 1.0
        return matrix

    def is_identity(self) -> bool:
        return self.n_unique == self.n_full

    # ---------- 직렬화 ----------
    def to_dict(self) -> dict:
        return {"n_full": self.n_full, "groups": [list(group) for group in self.groups]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MergeMap":
        try:
            payload = json.loads(text)
            return cls(int(payload["n_full"]), tuple(tuple(int(p) for p in g) for g in payload["groups"]))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaViolationError(f"MergeMap 형식 위반: {e}") from e


@dataclass(frozen=True)
class SizeVector:
    """그룹 크기 |P[j]| 목록"""

    values: Tuple[int, ...]

    def __post_init__(self):
        if not self.values or any(v < 1 for v in self.values):
            raise InvalidArgumentError(f"그룹 크기는 모두 1 이상이어야 합니다: {self.values}")

    @classmethod
    def ones(cls, n: int) -> "SizeVector":
        return cls((1,) * n)

    @property
    def total(self) -> int:
        return sum(self.values)

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)


# ==================== RoPE ====================
@dataclass(frozen=True, eq=False)
class RopeAngles:
    """θ[m][k] = pos_m · base^(-2k/D_head), 성분 k ∈ {0..D_head/2-1}"""

    theta: np.ndarray
    head_dim: int

    @cached_property
    def cos(self) -> np.ndarray:
        return np.cos(self.theta)

    @cached_property
    def sin(self) -> np.ndarray:
        return np.sin(self.theta)

    @property
    def n_positions(self) -> int:
        return self.theta.shape[0]


@dataclass(frozen=True)
class RopeConfig:
    """회전 위치 임베딩 설정. 인접 좌표 (2k, 2k+1)가 복소 성분 k를 이룹니다."""

    dim: int
    base: float = 10000.0
    pairing: str = "adjacent"

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise InvalidArgumentError(f"RoPE 차원은 짝수여야 합니다: {self.dim}")
        if not self.base > 1:
            raise InvalidArgumentError(f"RoPE base는 1보다 커야 합니다: {self.base}")
        if self.pairing != "adjacent":
            raise InvalidArgumentError(f"지원하지 않는 pairing: {self.pairing}")

    @property
    def frequencies(self) -> np.ndarray:
        return self.base ** (-2.0 * np.arange(self.dim // 2) / self.dim)

    def angles(self, positions: Sequence[int]) -> RopeAngles:
        positions = np.asarray(positions, dtype=np.float64)
        return RopeAngles(theta=np.outer(positions, self.frequencies), head_dim=self.dim)


# ==================== 어텐션 마스크 ====================
def causal_mask(n: int) -> np.ndarray:
    """원래 위치 기준 가산 인과 마스크 (0 또는 -inf)"""
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def validate_mask(mask: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n, n):
        raise ShapeError(f"마스크 크기 {mask.shape}가 시퀀스 길이 {n}과 맞지 않습니다")
    if not np.all((mask == 0.0) | (mask == -np.inf)):
        raise InvalidArgumentError("마스크 원소는 0 또는 -inf여야 합니다")
    return mask


# ==================== 가중치 ====================
@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """다중 헤드 어텐션 투영 (행 벡터 규약: Q = x · Wq)"""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def __post_init__(self):
        dim = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (dim, dim):
                raise ShapeError(f"{name} 크기가 ({dim}, {dim})가 아닙니다")
        if self.heads < 1 or dim % self.heads:
            raise ShapeError(f"헤드 수 {self.heads}가 차원 {dim}을 나누지 않습니다")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def head_slice(self, h: int) -> slice:
        return slice(h * self.head_dim, (h + 1) * self.head_dim)


@dataclass(frozen=True, eq=False)
class BlockWeights:
    """프리-노름 트랜스포머 블록 파라미터 (ViT 인코더와 디코더 공용)"""

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    attention: AttentionWeights
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def dim(self) -> int:
        return self.attention.dim


def init_attention_weights(rng: np.random.Generator, dim: int, heads: int) -> AttentionWeights:
    """단위 분산 스케일 초기화 (표준편차 1/sqrt(fan_in))"""
    scale = 1.0 / np.sqrt(dim)
    wq, wk, wv, wo = (rng.normal(0.0, scale, size=(dim, dim)) for _ in range(4))
    return AttentionWeights(wq=wq, wk=wk, wv=wv, wo=wo, heads=heads)


def init_block_weights(rng: np.random.Generator, dim: int, heads: int, hidden: int) -> BlockWeights:
    attention = init_attention_weights(rng, dim, heads)
    return BlockWeights(
        ln1_gain=1.0 + 0.1 * rng.normal(size=dim),
        ln1_bias=0.1 * rng.normal(size=dim),
        attention=attention,
        ln2_gain=1.0 + 0.1 * rng.normal(size=dim),
        ln2_bias=0.1 * rng.normal(size=dim),
        w1=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, hidden)),
        b1=0.1 * rng.normal(size=hidden),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, dim)),
        b2=0.1 * rng.normal(size=dim),
    )


# ==================== 위치별(pointwise) 연산 ====================
# 아래 연산은 각 행에 독립적으로 적용되므로 f(M·e_un) = M·f(e_un) 이 성립합니다.
def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh 근사 GELU"""
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def mlp(x: np.ndarray, blk: BlockWeights) -> np.ndarray:
    return gelu(x @ blk.w1 + blk.b1) @ blk.w2 + blk.b2


# ==================== 고유 시퀀스 ====================
@dataclass(frozen=True, eq=False)
class UniqueSequence:
    """고유 토큰 e_un (N_un×D)과 매핑 M, 그리고 N개의 절대 위치"""

    e_un: np.ndarray
    map: MergeMap
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        e_un = as_token_matrix(self.e_un, "e_un")
        if e_un.shape[0] != self.map.n_unique:
            raise ShapeError(f"e_un 행 수 {e_un.shape[0]} != 그룹 수 {self.map.n_unique}")
        object.__setattr__(self, "e_un", e_un)
        positions = np.arange(self.map.n_full) if self.positions is None else np.asarray(self.positions)
        if positions.shape != (self.map.n_full,):
            raise ShapeError(f"위치 배열 길이가 N={self.map.n_full}과 다릅니다")
        object.__setattr__(self, "positions", positions)

    @property
    def n_full(self) -> int:
        return self.map.n_full

    @property
    def n_unique(self) -> int:
        return self.map.n_unique

    def replace_embeddings(self, e_un: np.ndarray) -> "UniqueSequence":
        return UniqueSequence(e_un=e_un, map=self.map, positions=self.positions)


# ==================== 매핑 연산 ====================
def merge_map_identity(n: int) -> MergeMap:
    """N개의 단일 원소 그룹"""
    if n < 1:
        raise InvalidArgumentError(f"n은 1 이상이어야 합니다: {n}")
    return MergeMap(n, tuple((j,) for j in range(n)))


def expand(m: MergeMap, e_un) -> TokenMatrix:
    """e = M · e_un : 각 위치에 자기 그룹의 행을 복사합니다."""
    e_un = as_token_matrix(e_un, "e_un")
    if e_un.shape[0] != m.n_unique:
        raise ShapeError(f"e_un 행 수 {e_un.shape[0]} != 그룹 수 {m.n_unique}")
    return e_un[m.group_index]


def remerge_average(m: MergeMap, y) -> TokenMatrix:
    """(MᵀM)⁻¹ Mᵀ y : 그룹별 평균으로 고유 시퀀스를 복원합니다."""
    y = as_token_matrix(y, "y")
    if y.shape[0] != m.n_full:
        raise ShapeError(f"y 행 수 {y.shape[0]} != N {m.n_full}")
    sums = np.zeros((m.n_unique, y.shape[1]))
    np.add.at(sums, m.group_index, y)
    return sums / m.size_array[:, None]


def compose(outer: MergeMap, inner: MergeMap) -> MergeMap:
    """inner(원래 위치 → 중간 그룹) 뒤에 outer(중간 그룹 → 최종 그룹)를 잇습니다."""
    if outer.n_full != inner.n_unique:
        raise ShapeError(f"outer.n_full {outer.n_full} != inner 그룹 수 {inner.n_unique}")
    return MergeMap.from_group_index(outer.group_index[inner.group_index])


def sizes(m: MergeMap) -> SizeVector:
    return SizeVector(tuple(len(group) for group in m.groups))
