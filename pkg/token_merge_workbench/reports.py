#!/usr/bin/env python3
"""
인코딩 결과 리포트 (CSV / XLSX / 요약 통계)
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import pandas as pd
from openpyxl.styles import Alignment, Font, PatternFill

logger = logging.getLogger(__name__)

ENCODE_COLUMNS = ["image_id", "complexity_score", "token_count", "per_layer_counts"]
SHEET_NAME = "토큰 통계"


def build_encode_frame(image_ids: Sequence[str], scores: Sequence[float],
                       per_layer_counts: Sequence[Sequence[int]], n_tokens: int) -> pd.DataFrame:
    """레이어가 0개면 token_count 는 입력 토큰 수 N 입니다."""
    rows = []
    for image_id, score, counts in zip(image_ids, scores, per_layer_counts):
        rows.append({
            "image_id": image_id,
            "complexity_score": float(score),
            "token_count": int(counts[-1]) if counts else n_tokens,
            "per_layer_counts": ";".join(str(int(c)) for c in counts),
        })
    return pd.DataFrame(rows, columns=ENCODE_COLUMNS)


def save_encode_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")
    return path


def save_encode_xlsx(frame: pd.DataFrame, path) -> Path:
    """헤더 색상과 열 너비를 맞춘 엑셀 파일"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        frame.to_excel(writer, sheet_name=SHEET_NAME, index=False)
        worksheet = writer.sheets[SHEET_NAME]

        header_fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
        header_font = Font(color="FFFFFF", bold=True)
        for cell in worksheet[1]:
            cell.fill = header_fill
            cell.font = header_font
            cell.alignment = Alignment(horizontal="center")

        for column in worksheet.columns:
            max_length = max(len(str(cell.value)) for cell in column if cell.value is not None)
            worksheet.column_dimensions[column[0].column_letter].width = min(max_length + 2, 50)
    logger.info("엑셀 파일 생성: %s", path)
    return path


# ==================== 요약 ====================
@dataclass(frozen=True)
class TokenSummary:
    count: int
    mean: float
    std: float
    spearman: float
    by_group: Dict[int, float]

    def mean_std_text(self) -> str:
        return f"{self.mean:.6g}±{self.std:.6g}"

    def spearman_text(self) -> str:
        return "nan" if math.isnan(self.spearman) else f"{self.spearman:.6g}"


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """평균 순위(동점 평균)의 피어슨 상관. 한쪽이 상수면 nan."""
    frame = pd.DataFrame({"x": list(x), "y": list(y)}, dtype=float)
    if len(frame) < 2:
        return math.nan
    return float(frame.rank().corr().loc["x", "y"])


def summarize_tokens(frame: pd.DataFrame, groups: Optional[Sequence[int]] = None) -> TokenSummary:
    """groups 가 있으면 (예: 사각형 수 R) 그룹별 평균 토큰 수도 계산합니다."""
    tokens = frame["token_count"].astype(float)
    by_group = {}
    if groups is not None:
        by_group = {int(k): float(v) for k, v in tokens.groupby(list(groups)).mean().items()}
    return TokenSummary(
        count=len(frame),
        mean=float(tokens.mean()) if len(frame) else math.nan,
        std=float(tokens.std(ddof=0)) if len(frame) else math.nan,
        spearman=spearman(frame["complexity_score"], tokens),
        by_group=by_group,
    )
