#!/usr/bin/env python3
"""
시드 고정 토이 ViT 인코더
프리-노름 블록마다 어텐션과 MLP 사이에서 DToMe 병합을 수행하여
이미지마다 길이가 다른 토큰 시퀀스와 누적 MergeMap 을 만듭니다.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core_model import (
    AttentionWeights,
    BlockWeights,
    MergeMap,
    SizeVector,
    compose,
    init_block_weights,
    layer_norm,
    merge_map_identity,
    mlp,
    sizes,
)
from dtome_engine import (
    EdgeSet,
    apply_merge,
    bipartite_scores,
    select_edges_threshold,
    select_edges_topr,
    similarity_keys,
    size_weighted_attention,
    split_alternating,
)
from errors import ConfigError, SchemaViolationError, ShapeError
from threshold_calibrator import ThresholdProfile

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = "toy-vit-weights"


# ==================== 설정 ====================
class ViTConfig(BaseModel):
    """인코더 구조와 병합 모드"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: int = Field(4, ge=1)
    dim: int = Field(32, ge=2)
    heads: int = Field(4, ge=1)
    image_height: int = Field(32, ge=1)
    image_width: int = Field(32, ge=1)
    patch_size: int = Field(4, ge=1)
    cls_token: bool = True
    mlp_ratio: int = Field(2, ge=1)
    seed: int = 0
    position_scale: float = Field(0.02, ge=0.0)

    merge_mode: Literal["off", "fixed_topr", "dynamic"] = "off"
    topr: Optional[Union[int, List[int]]] = None
    profile: Optional[ThresholdProfile] = None

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads}가 dim={self.dim}을 나누지 않습니다")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("이미지 크기가 패치 크기로 나누어떨어지지 않습니다")
        if self.merge_mode == "fixed_topr" and self.topr is None:
            raise ValueError("fixed_topr 모드에는 topr 값이 필요합니다")
        if self.merge_mode == "dynamic" and self.profile is None:
            raise ValueError("dynamic 모드에는 임계값 프로파일이 필요합니다")
        return self

    @classmethod
    def load(cls, path) -> "ViTConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.model_validate(json.load(f))
        except (ValidationError, json.JSONDecodeError) as e:
            raise ConfigError(f"설정 파일 오류 ({path}): {e}") from e

    # ---------- 파생 값 ----------
    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def n_tokens(self) -> int:
        return self.n_patches + (1 if self.cls_token else 0)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    # ---------- 병합 모드 전환 ----------
    def with_merge_off(self) -> "ViTConfig":
        return self.model_copy(update={"merge_mode": "off", "topr": None, "profile": None})

    def with_topr(self, r: Union[int, List[int]]) -> "ViTConfig":
        return self.model_copy(update={"merge_mode": "fixed_topr", "topr": r, "profile": None})

    def with_profile(self, profile: ThresholdProfile) -> "ViTConfig":
        return self.model_copy(update={"merge_mode": "dynamic", "topr": None, "profile": profile})

    def topr_schedule(self) -> List[int]:
        if isinstance(self.topr, int):
            return [self.topr] * self.layers
        if self.topr is None or len(self.topr) != self.layers:
            raise ConfigError(f"topr 목록 길이가 레이어 수 {self.layers}와 다릅니다")
        return list(self.topr)


# ==================== 가중치 ====================
@dataclass(frozen=True, eq=False)
class ViTWeights:
    """패치 투영, CLS, 위치 임베딩, 블록 파라미터"""

    patch_proj: np.ndarray
    patch_bias: np.ndarray
    cls_embed: np.ndarray
    pos_embed: np.ndarray
    blocks: Tuple[BlockWeights, ...]
    seed: int

    @classmethod
    def generate(cls, cfg: ViTConfig) -> "ViTWeights":
        """cfg.seed 로 결정되는 단위 분산 스케일 초기화"""
        rng = np.random.default_rng(cfg.seed)
        patch_len = cfg.patch_size ** 2
        patch_proj = rng.normal(0.0, 1.0 / np.sqrt(patch_len), size=(patch_len, cfg.dim))
        patch_bias = rng.normal(0.0, 0.1, size=cfg.dim)
        cls_embed = rng.normal(0.0, 1.0, size=cfg.dim)
        pos_embed = rng.normal(0.0, cfg.position_scale, size=(cfg.n_tokens, cfg.dim))
        blocks = tuple(init_block_weights(rng, cfg.dim, cfg.heads, cfg.hidden) for _ in range(cfg.layers))
        return cls(patch_proj, patch_bias, cls_embed, pos_embed, blocks, cfg.seed)

    def _tensors(self) -> List[Tuple[str, np.ndarray]]:
        items = [("patch_proj", self.patch_proj), ("patch_bias", self.patch_bias),
                 ("cls_embed", self.cls_embed), ("pos_embed", self.pos_embed)]
        for i, blk in enumerate(self.blocks):
            att = blk.attention
            items += [(f"blocks.{i}.{name}", value) for name, value in (
                ("ln1_gain", blk.ln1_gain), ("ln1_bias", blk.ln1_bias),
                ("wq", att.wq), ("wk", att.wk), ("wv", att.wv), ("wo", att.wo),
                ("ln2_gain", blk.ln2_gain), ("ln2_bias", blk.ln2_bias),
                ("w1", blk.w1), ("b1", blk.b1), ("w2", blk.w2), ("b2", blk.b2))]
        return items

    def save(self, path) -> None:
        """첫 줄 JSON 헤더 + little-endian float64 본문"""
        tensors = self._tensors()
        header = {
            "format": WEIGHTS_FORMAT,
            "version": 1,
            "seed": self.seed,
            "heads": self.blocks[0].attention.heads if self.blocks else 1,
            "tensors": [[name, list(value.shape)] for name, value in tensors],
        }
        with open(path, "wb") as f:
            f.write(json.dumps(header).encode("utf-8") + b"\n")
            for _, value in tensors:
                f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ViTWeights":
        with open(path, "rb") as f:
            header_line = f.readline()
            payload = np.frombuffer(f.read(), dtype="<f8")
        try:
            header = json.loads(header_line)
            if header.get("format") != WEIGHTS_FORMAT:
                raise SchemaViolationError(f"가중치 파일 형식이 아닙니다: {header.get('format')}")
            named = {}
            offset = 0
            for name, shape in header["tensors"]:
                count = int(np.prod(shape)) if shape else 1
                named[name] = payload[offset:offset + count].reshape(shape).astype(np.float64)
                offset += count
        except (KeyError, ValueError, TypeError) as e:
            raise SchemaViolationError(f"가중치 헤더 오류: {e}") from e
        if offset != payload.size:
            raise SchemaViolationError("가중치 본문 길이가 헤더와 맞지 않습니다")

        blocks = []
        i = 0
        while f"blocks.{i}.wq" in named:
            prefix = f"blocks.{i}."

            def p(key, prefix=prefix):
                return named[prefix + key]

            attention = AttentionWeights(wq=p("wq"), wk=p("wk"), wv=p("wv"), wo=p("wo"), heads=int(header["heads"]))
            blocks.append(BlockWeights(
                ln1_gain=p("ln1_gain"), ln1_bias=p("ln1_bias"), attention=attention,
                ln2_gain=p("ln2_gain"), ln2_bias=p("ln2_bias"),
                w1=p("w1"), b1=p("b1"), w2=p("w2"), b2=p("b2")))
            i += 1
        return cls(named["patch_proj"], named["patch_bias"], named["cls_embed"],
                   named["pos_embed"], tuple(blocks), int(header["seed"]))


# ==================== 패치 임베딩 ====================
def embed_patches(image, cfg: ViTConfig, weights: ViTWeights) -> np.ndarray:
    """위치 항과 CLS 없이 패치만 투영 (행 = 패치, 행 우선 순서)"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"단일 채널 2차원 이미지가 필요합니다: {image.shape}")
    height, width = image.shape
    p = cfg.patch_size
    if height % p or width % p:
        raise ShapeError(f"이미지 {height}×{width}가 패치 {p}로 나누어떨어지지 않습니다")
    if (height, width) != (cfg.image_height, cfg.image_width):
        raise ShapeError(f"이미지 {height}×{width} != 설정 {cfg.image_height}×{cfg.image_width}")
    pixels = (image / 255.0 - 0.5) / 0.5
    patches = pixels.reshape(height // p, p, width // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)
    return patches @ weights.patch_proj + weights.patch_bias


def patchify(image, cfg: ViTConfig, weights: ViTWeights) -> np.ndarray:
    tokens = embed_patches(image, cfg, weights)
    if cfg.cls_token:
        tokens = np.vstack([weights.cls_embed[None, :], tokens])
    return tokens + weights.pos_embed


# ==================== 인코더 ====================
@dataclass(frozen=True, eq=False)
class EncodeResult:
    tokens: np.ndarray
    merge_map: MergeMap
    per_layer_counts: Tuple[int, ...]

    @property
    def token_count(self) -> int:
        return self.tokens.shape[0]


class ToyViTEncoder:
    """인코더 핸들. 보정기는 레이어 단위 메서드를 직접 호출합니다."""

    def __init__(self, cfg: ViTConfig, weights: Optional[ViTWeights] = None):
        self.cfg = cfg
        self.weights = weights if weights is not None else ViTWeights.generate(cfg)
        if len(self.weights.blocks) != cfg.layers:
            raise ConfigError(f"가중치 블록 수 {len(self.weights.blocks)} != 레이어 수 {cfg.layers}")
        expected = (cfg.patch_size ** 2, cfg.dim)
        if self.weights.patch_proj.shape != expected or self.weights.pos_embed.shape != (cfg.n_tokens, cfg.dim):
            raise ConfigError(f"가중치 크기 {self.weights.patch_proj.shape} 가 설정 {expected} 와 맞지 않습니다")

    def embed(self, image) -> np.ndarray:
        return patchify(image, self.cfg, self.weights)

    def attention_step(self, layer: int, x: np.ndarray, token_sizes: SizeVector) -> Tuple[np.ndarray, np.ndarray]:
        """x ← x + SWA(LN(x)). 병합 판단용 정규화 키도 함께 반환합니다."""
        blk = self.weights.blocks[layer]
        att = blk.attention
        n = x.shape[0]
        h = layer_norm(x, blk.ln1_gain, blk.ln1_bias)

        def heads(w):
            return (h @ w).reshape(n, att.heads, att.head_dim).transpose(1, 0, 2)

        q, k, v = heads(att.wq), heads(att.wk), heads(att.wv)
        out = size_weighted_attention(q, k, v, token_sizes, 1.0 / np.sqrt(att.head_dim))
        out = out.transpose(1, 0, 2).reshape(n, att.dim) @ att.wo
        return x + out, similarity_keys(k)

    def mlp_step(self, layer: int, x: np.ndarray) -> np.ndarray:
        blk = self.weights.blocks[layer]
        return x + mlp(layer_norm(x, blk.ln2_gain, blk.ln2_bias), blk)

    def propose_edges(self, keys: np.ndarray) -> EdgeSet:
        if keys.shape[0] < 2:
            return EdgeSet.empty()
        return bipartite_scores(keys, split_alternating(keys.shape[0]))

    def _selector(self) -> Callable[[int, EdgeSet], EdgeSet]:
        cfg = self.cfg
        if cfg.merge_mode == "off":
            return lambda layer, edges: EdgeSet.empty()
        if cfg.merge_mode == "fixed_topr":
            targets = cfg.topr_schedule()
            return lambda layer, edges: select_edges_topr(edges, targets[layer])
        if cfg.profile.layers != cfg.layers:
            raise ConfigError(f"프로파일 레이어 수 {cfg.profile.layers} != 인코더 레이어 수 {cfg.layers}")
        taus = cfg.profile.taus
        return lambda layer, edges: select_edges_threshold(edges, taus[layer])

    def encode(self, image) -> EncodeResult:
        select = self._selector()
        x = self.embed(image)
        cumulative = merge_map_identity(x.shape[0])
        counts = []
        for layer in range(self.cfg.layers):
            token_sizes = sizes(cumulative)
            x, keys = self.attention_step(layer, x, token_sizes)
            if self.cfg.merge_mode != "off":
                chosen = select(layer, self.propose_edges(keys))
                x, layer_map = apply_merge(x, token_sizes, chosen)
                cumulative = compose(layer_map, cumulative)
            x = self.mlp_step(layer, x)
            counts.append(x.shape[0])
            logger.debug("레이어 %d: 토큰 %d개", layer, x.shape[0])
        return EncodeResult(tokens=x, merge_map=cumulative, per_layer_counts=tuple(counts))


def encode(image, cfg: ViTConfig, weights: Optional[ViTWeights] = None) -> EncodeResult:
    return ToyViTEncoder(cfg, weights).encode(image)


def encode_batch(images: Sequence[np.ndarray], cfg: ViTConfig, weights: Optional[ViTWeights] = None,
                 workers: int = 1) -> List[EncodeResult]:
    """이미지별 병렬 인코딩. 결과 순서는 입력 순서와 같습니다."""
    encoder = ToyViTEncoder(cfg, weights)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(encoder.encode, images))


# ==================== 비용 / 내보내기 ====================
def encoder_mflops(per_layer_counts: Sequence[int], cfg: ViTConfig) -> float:
    """
    레이어 i 에 들어오는 토큰 n_in, 병합 후 토큰 n_out 에 대해
    4·n_in·D² (QKV, 출력 투영) + 2·n_in²·D (QKᵀ, AV) + 2·n_out·D·H (MLP) 의 곱-누산 수
    """
    d, hidden = cfg.dim, cfg.hidden
    entering = [cfg.n_tokens] + list(per_layer_counts[:-1])
    total = 0
    for n_in, n_out in zip(entering, per_layer_counts):
        total += 4 * n_in * d * d + 2 * n_in * n_in * d + 2 * n_out * d * hidden
    return total / 1e6


def save_tokens_csv(tokens: np.ndarray, path) -> Path:
    """토큰 한 개당 한 행"""
    path = Path(path)
    frame = pd.DataFrame(tokens, columns=[f"d{i}" for i in range(tokens.shape[1])])
    frame.to_csv(path, index=False, float_format="%.6g")
    return path
