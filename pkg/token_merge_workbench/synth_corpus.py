#!/usr/bin/env python3
"""
합성 코퍼스 생성과 이미지 복잡도 점수
이미지는 무작위 상수 사각형 R개 + 가우시안 잡음으로 만들고 8비트 그레이스케일 원시 파일로 저장합니다.
"""

import hashlib
import json
import logging
import zlib
from pathlib import Path
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError, InvalidArgumentError, SchemaViolationError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
IMAGE_SEED_STRIDE = 1_000_000


class SynthSpec(BaseModel):
    """코퍼스 생성 파라미터. rects 는 이미지 순서대로 순환 적용됩니다."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    height: int = Field(32, ge=1)
    width: int = Field(32, ge=1)
    patch_size: int = Field(4, ge=1)
    count: int = Field(12, ge=1)
    rects: List[int] = Field(default_factory=lambda: [0, 2, 4, 8, 16, 32])
    noise_sigma: float = Field(0.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("이미지 크기가 패치 크기로 나누어떨어지지 않습니다")
        if not self.rects or any(r < 0 for r in self.rects):
            raise ValueError("rects 는 0 이상의 정수 목록이어야 합니다")
        return self

    def image_seed(self, index: int) -> int:
        return self.seed * IMAGE_SEED_STRIDE + index

    def rect_count(self, index: int) -> int:
        return self.rects[index % len(self.rects)]


def generate_image(height: int, width: int, rect_count: int, noise_sigma: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    image = np.full((height, width), float(rng.integers(0, 256)))
    for _ in range(rect_count):
        top, bottom = sorted(rng.integers(0, height + 1, size=2))
        left, right = sorted(rng.integers(0, width + 1, size=2))
        image[top:max(bottom, top + 1), left:max(right, left + 1)] = float(rng.integers(0, 256))
    if noise_sigma > 0:
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def cmd_synth(spec: SynthSpec, out_dir) -> dict:
    """이미지 파일과 manifest.json 을 쓰고 manifest 를 반환합니다."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.count):
        seed = spec.image_seed(i)
        r = spec.rect_count(i)
        image = generate_image(spec.height, spec.width, r, spec.noise_sigma, seed)
        name = f"img_{i:05d}.gray"
        (out_dir / name).write_bytes(image.tobytes())
        entries.append({"path": name, "h": spec.height, "w": spec.width, "r": r, "seed": seed})
        logger.debug("이미지 %s 생성 (R=%d)", name, r)

    manifest = {"images": entries}
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


# ==================== 코퍼스 읽기 ====================
def resolve_manifest_path(path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def load_manifest(path) -> Tuple[dict, Path]:
    """(manifest, 이미지 기준 디렉터리)"""
    path = resolve_manifest_path(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaViolationError(f"manifest JSON 파싱 실패: {e}") from e
    images = manifest.get("images") if isinstance(manifest, dict) else None
    if not isinstance(images, list):
        raise SchemaViolationError("manifest 에 images 목록이 없습니다")
    for entry in images:
        if not isinstance(entry, dict) or not {"path", "h", "w"} <= entry.keys():
            raise SchemaViolationError(f"manifest 항목 형식 위반: {entry}")
    return manifest, path.parent


def load_image(entry: dict, base_dir) -> np.ndarray:
    raw = (Path(base_dir) / entry["path"]).read_bytes()
    h, w = int(entry["h"]), int(entry["w"])
    if len(raw) != h * w:
        raise SchemaViolationError(f"{entry['path']}: 바이트 수 {len(raw)} != {h}×{w}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w)


def load_corpus(path) -> Tuple[List[dict], List[np.ndarray]]:
    manifest, base_dir = load_manifest(path)
    entries = manifest["images"]
    return entries, [load_image(entry, base_dir) for entry in entries]


def corpus_id(path) -> str:
    """manifest 파일 내용의 sha256 앞 16자리"""
    return hashlib.sha256(resolve_manifest_path(path).read_bytes()).hexdigest()[:16]


# ==================== 복잡도 ====================
def complexity_score(image_bytes: bytes, height: int, width: int) -> float:
    """무손실 압축 크기 / (H·W). 압축 수준 9 고정으로 결정적입니다."""
    image_bytes = bytes(image_bytes)
    if height * width == 0 or not image_bytes:
        raise InvalidArgumentError("빈 이미지의 복잡도는 정의되지 않습니다")
    if len(image_bytes) != height * width:
        raise InvalidArgumentError(f"바이트 수 {len(image_bytes)} != {height}×{width}")
    return len(zlib.compress(image_bytes, 9)) / (height * width)


def load_synth_spec(path) -> SynthSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return SynthSpec.model_validate(json.load(f))
    except (ValidationError, json.JSONDecodeError) as e:
        raise ConfigError(f"합성 설정 오류 ({path}): {e}") from e
