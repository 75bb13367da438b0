#!/usr/bin/env python3
"""
배치 단위 임계값 보정기
이미지 배치를 레이어 순서대로 추론 모드로 통과시키며, 배치 전체의 간선 점수를 모아
B·r_i 개가 병합되도록 하는 순서 통계량을 레이어별 임계값 τ_i 로 고릅니다.
여러 배치의 τ_i 를 평균해 ThresholdProfile 을 만듭니다.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, List, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

import settings
from core_model import MergeMap, compose, merge_map_identity, sizes
from dtome_engine import apply_merge, select_edges_threshold
from errors import CalibrationError, InvalidArgumentError, SchemaViolationError

if TYPE_CHECKING:
    from toy_vit import ToyViTEncoder

logger = logging.getLogger(__name__)


# ==================== 스케줄 ====================
class MergeSchedule(BaseModel):
    """레이어별 병합 목표 r_i 의 모양 (총량 L·r_bar 고정)"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["constant", "linear", "reverse_linear"] = "constant"
    r_bar: int = Field(0, ge=0)

    @classmethod
    def for_target_tokens(cls, n_tokens: int, layers: int, target: float,
                          kind: str = "constant") -> "MergeSchedule":
        """평균 출력 토큰 수가 target 근처가 되도록 r_bar = round((N - target) / L)"""
        r_bar = max(0, int(round((n_tokens - target) / layers)))
        return cls(kind=kind, r_bar=r_bar)


def schedule_targets(s: MergeSchedule, layers: int) -> List[int]:
    """
    constant: 모든 레이어 r_bar
    linear: 2·r_bar·(L-1-i)/(L-1) 램프를 최대 잔차 우선으로 반올림해 합계 L·r_bar 유지
    reverse_linear: linear 의 역순
    """
    if layers < 1:
        raise InvalidArgumentError(f"레이어 수는 1 이상이어야 합니다: {layers}")
    if s.kind == "constant" or layers == 1:
        return [s.r_bar] * layers

    ramp = np.array([2.0 * s.r_bar * (layers - 1 - i) / (layers - 1) for i in range(layers)])
    targets = np.floor(ramp).astype(int)
    remainder = ramp - targets
    deficit = layers * s.r_bar - int(targets.sum())
    # 잔차가 큰 레이어부터, 동률이면 앞 레이어부터
    for i in sorted(range(layers), key=lambda i: (-remainder[i], i))[:deficit]:
        targets[i] += 1
    targets = [int(t) for t in targets]
    return targets[::-1] if s.kind == "reverse_linear" else targets


# ==================== 프로파일 ====================
class ThresholdProfile(BaseModel):
    """레이어별 임계값과 보정 메타데이터"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    version: int = settings.PROFILE_VERSION
    taus: List[float]
    schedule: MergeSchedule
    batch_size: int = Field(ge=1)
    num_batches: int = Field(ge=1)
    corpus_id: str
    similarity: str = settings.SIMILARITY_CONVENTION

    @field_validator("taus", mode="before")
    @classmethod
    def _parse_infinities(cls, value):
        if not isinstance(value, (list, tuple)):
            return value
        return [_decode_tau(v) for v in value]

    @property
    def layers(self) -> int:
        return len(self.taus)

    def to_json_dict(self) -> dict:
        """필드 순서가 고정된 JSON 객체 (±∞ 는 "inf"/"-inf")"""
        return {
            "version": self.version,
            "taus": [_encode_tau(t) for t in self.taus],
            "schedule": {"kind": self.schedule.kind, "r_bar": self.schedule.r_bar},
            "batch_size": self.batch_size,
            "num_batches": self.num_batches,
            "corpus_id": self.corpus_id,
            "similarity": self.similarity,
        }


def _encode_tau(tau: float):
    if math.isinf(tau):
        return "inf" if tau > 0 else "-inf"
    return tau


def _decode_tau(value):
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return value


def save_profile(p: ThresholdProfile, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(p.to_json_dict(), f, indent=2)
        f.write("\n")


def load_profile(path) -> ThresholdProfile:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaViolationError(f"프로파일 JSON 파싱 실패: {e}") from e
    if not isinstance(payload, dict) or payload.get("version") != settings.PROFILE_VERSION:
        raise SchemaViolationError(f"지원하지 않는 프로파일 버전: {payload.get('version') if isinstance(payload, dict) else None}")
    try:
        profile = ThresholdProfile.model_validate(payload)
    except ValidationError as e:
        raise SchemaViolationError(f"프로파일 형식 위반: {e}") from e
    if profile.similarity != settings.SIMILARITY_CONVENTION:
        raise SchemaViolationError(
            f"유사도 정의가 다릅니다: {profile.similarity} != {settings.SIMILARITY_CONVENTION}")
    return profile


# ==================== 순서 통계량 ====================
def calibrate_layer(scores: Sequence[float], k: int) -> float:
    """풀링된 점수 중 k번째로 큰 값. k=0 → +∞, k ≥ |scores| → -∞"""
    if k < 0:
        raise InvalidArgumentError(f"k는 0 이상이어야 합니다: {k}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if k == 0:
        return math.inf
    if k >= scores.size:
        return -math.inf
    return float(-np.partition(-scores, k - 1)[k - 1])


def average_thresholds(per_batch: Sequence[Sequence[float]]) -> List[float]:
    """유한값만 산술평균. 모두 무한이면 그 무한대를 유지합니다."""
    averaged = []
    for layer_taus in zip(*per_batch):
        finite = [t for t in layer_taus if math.isfinite(t)]
        if finite:
            averaged.append(float(np.mean(finite)))
        else:
            averaged.append(math.inf if any(t > 0 for t in layer_taus) else -math.inf)
    return averaged


# ==================== 보정기 ====================
@dataclass
class _ImageState:
    x: np.ndarray
    cumulative: MergeMap


@dataclass
class BatchStats:
    """한 배치의 보정 기록"""

    taus: List[float]
    targets: List[int]
    merged: List[int]
    token_counts: List[int]
    ties: int = 0
    shortages: int = 0

    @property
    def mean_tokens(self) -> float:
        return float(np.mean(self.token_counts))


@dataclass
class CalibrationResult:
    profile: ThresholdProfile
    batches: List[BatchStats] = field(default_factory=list)

    def mean_merged_per_image(self) -> List[float]:
        """레이어별 이미지당 평균 병합 수"""
        batch_size = self.profile.batch_size
        return [float(np.mean(layer)) / batch_size for layer in zip(*(b.merged for b in self.batches))]

    @property
    def mean_tokens(self) -> float:
        return float(np.mean([b.mean_tokens for b in self.batches]))


class ThresholdCalibrator:
    """배치 단위 임계값 탐색 (추론 모드만 사용, 학습 없음)"""

    def __init__(self, encoder: "ToyViTEncoder", schedule: MergeSchedule, batch_size: int,
                 num_batches: int, seed: int = 0, corpus_id: str = "synthetic",
                 workers: int = 1):
        if batch_size < 1 or num_batches < 1:
            raise InvalidArgumentError("batch_size와 num_batches는 1 이상이어야 합니다")
        self.encoder = encoder
        self.schedule = schedule
        self.batch_size = batch_size
        self.num_batches = num_batches
        self.seed = seed
        self.corpus_id = corpus_id
        self.workers = max(1, workers)
        self.targets = schedule_targets(schedule, encoder.cfg.layers)

    def run(self, corpus: Sequence[np.ndarray]) -> CalibrationResult:
        needed = self.batch_size * self.num_batches
        if len(corpus) == 0:
            raise CalibrationError("보정 코퍼스가 비어 있습니다")
        if len(corpus) < needed:
            raise CalibrationError(f"이미지 {needed}장이 필요하지만 {len(corpus)}장뿐입니다")

        order = np.random.default_rng(self.seed).permutation(len(corpus))[:needed]
        batches = []
        for b in range(self.num_batches):
            indices = order[b * self.batch_size:(b + 1) * self.batch_size]
            stats = self._calibrate_batch([corpus[i] for i in indices])
            logger.info("배치 %d/%d: 평균 토큰 %.3f", b + 1, self.num_batches, stats.mean_tokens)
            batches.append(stats)

        profile = ThresholdProfile(
            taus=average_thresholds([s.taus for s in batches]),
            schedule=self.schedule,
            batch_size=self.batch_size,
            num_batches=self.num_batches,
            corpus_id=self.corpus_id,
        )
        return CalibrationResult(profile=profile, batches=batches)

    def _calibrate_batch(self, images: Sequence[np.ndarray]) -> BatchStats:
        encoder = self.encoder
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            states = [_ImageState(x, merge_map_identity(x.shape[0]))
                      for x in pool.map(encoder.embed, images)]
            stats = BatchStats(taus=[], targets=list(self.targets), merged=[], token_counts=[])

            for layer, r_i in enumerate(self.targets):
                stepped = list(pool.map(
                    lambda st: encoder.attention_step(layer, st.x, sizes(st.cumulative)), states))
                edge_sets = [encoder.propose_edges(keys) for _, keys in stepped]
                pooled = np.concatenate([e.scores for e in edge_sets])
                k = len(images) * r_i
                tau = calibrate_layer(pooled, k)

                selected = [select_edges_threshold(e, tau) for e in edge_sets]
                merged = sum(len(s) for s in selected)
                if k > pooled.size:
                    stats.shortages += 1
                    logger.warning("레이어 %d: 간선 %d개 < 목표 %d, 전부 병합", layer, pooled.size, k)
                elif merged > k:
                    stats.ties += 1
                    logger.warning("레이어 %d: 동점으로 목표 %d개보다 많은 %d개 병합", layer, k, merged)

                for state, (x, _), chosen in zip(states, stepped, selected):
                    x, layer_map = apply_merge(x, sizes(state.cumulative), chosen)
                    state.cumulative = compose(layer_map, state.cumulative)
                    state.x = x
                for state, x in zip(states, pool.map(lambda st: encoder.mlp_step(layer, st.x), states)):
                    state.x = x

                stats.taus.append(tau)
                stats.merged.append(merged)
                logger.debug("레이어 %d: τ=%s, 병합 %d", layer, tau, merged)

        stats.token_counts = [state.x.shape[0] for state in states]
        return stats


def calibrate(encoder: "ToyViTEncoder", corpus: Sequence[np.ndarray], s: MergeSchedule,
              batch_size: int, num_batches: int, seed: int = 0,
              corpus_id: str = "synthetic", workers: int = 1) -> ThresholdProfile:
    calibrator = ThresholdCalibrator(encoder, s, batch_size, num_batches, seed=seed,
                                     corpus_id=corpus_id, workers=workers)
    return calibrator.run(corpus).profile
