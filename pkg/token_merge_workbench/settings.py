"""
워크벤치 환경 설정
.env 파일과 환경변수에서 기본값을 읽습니다.
"""

import os

from dotenv import load_dotenv

load_dotenv()

# ==================== 실행 설정 ====================
DEFAULT_SEED = int(os.getenv("DTOME_SEED", "0"))
WORKERS = int(os.getenv("DTOME_WORKERS", "1"))
LOG_LEVEL = os.getenv("DTOME_LOG_LEVEL", "WARNING")
OUTPUT_DIR = os.getenv("DTOME_OUTPUT_DIR", "results")

# ==================== 수치 설정 ====================
ROPE_BASE = float(os.getenv("DTOME_ROPE_BASE", "10000"))
VERIFY_CASES = int(os.getenv("DTOME_VERIFY_CASES", "20"))

# 유사도 정의 (보정과 추론이 반드시 같은 정의를 사용)
SIMILARITY_CONVENTION = "cosine-headmean"
PROFILE_VERSION = 1

# 프리셋 변형: 목표 평균 토큰 수 / 전체 토큰 수
VARIANT_FRACTIONS = {
    "low": 0.155,
    "mid": 0.339,
    "high": 0.684,
}
