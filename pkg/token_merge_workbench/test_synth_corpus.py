"""
synth_corpus / reports 테스트: 코퍼스 생성, 복잡도 점수, CSV 리포트
"""

import json
import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from errors import InvalidArgumentError, SchemaViolationError
from reports import build_encode_frame, save_encode_csv, save_encode_xlsx, spearman, summarize_tokens
from synth_corpus import SynthSpec, cmd_synth, complexity_score, corpus_id, generate_image, load_corpus


class TestSynthSpec:
    """생성 파라미터 검증"""

    def test_indivisible_size(self):
        with pytest.raises(ValidationError):
            SynthSpec(height=10, width=16, patch_size=4)

    def test_negative_rects(self):
        with pytest.raises(ValidationError):
            SynthSpec(rects=[0, -1])

    def test_rect_cycle(self):
        spec = SynthSpec(rects=[0, 5])
        assert [spec.rect_count(i) for i in range(4)] == [0, 5, 0, 5]


class TestCmdSynth:
    """코퍼스 파일 생성"""

    def test_constant_images(self, tmp_path):
        cmd_synth(SynthSpec(height=8, width=8, patch_size=4, count=3, rects=[0], noise_sigma=0.0), tmp_path)
        _, images = load_corpus(tmp_path)
        for image in images:
            assert np.unique(image).size == 1

    def test_manifest_entries(self, tmp_path):
        spec = SynthSpec(height=8, width=8, patch_size=4, count=100, rects=list(range(33)))
        manifest = cmd_synth(spec, tmp_path)
        assert len(manifest["images"]) == 100
        on_disk = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
        assert on_disk == manifest
        assert set(manifest["images"][0]) == {"path", "h", "w", "r", "seed"}

    def test_byte_identical_reruns(self, tmp_path):
        spec = SynthSpec(height=8, width=8, patch_size=4, count=5, noise_sigma=3.0, seed=9)
        cmd_synth(spec, tmp_path / "a")
        cmd_synth(spec, tmp_path / "b")
        for name in ["manifest.json"] + [f"img_{i:05d}.gray" for i in range(5)]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert corpus_id(tmp_path / "a") == corpus_id(tmp_path / "b")

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"files": []}', encoding="utf-8")
        with pytest.raises(SchemaViolationError):
            load_corpus(tmp_path)

    def test_truncated_image(self, tmp_path):
        cmd_synth(SynthSpec(height=8, width=8, patch_size=4, count=1), tmp_path)
        (tmp_path / "img_00000.gray").write_bytes(b"\x00" * 10)
        with pytest.raises(SchemaViolationError):
            load_corpus(tmp_path)


class TestComplexityScore:
    """무손실 압축률"""

    def test_constant_below_noise(self):
        constant = generate_image(32, 32, 0, 0.0, seed=1)
        noise = np.random.default_rng(0).integers(0, 256, size=(32, 32), dtype=np.uint8)
        c = complexity_score(constant.tobytes(), 32, 32)
        n = complexity_score(noise.tobytes(), 32, 32)
        assert 0 < c < n
        assert n > 0.9

    def test_deterministic(self):
        image = generate_image(16, 16, 8, 2.0, seed=4)
        assert complexity_score(image.tobytes(), 16, 16) == complexity_score(image.tobytes(), 16, 16)

    def test_empty_image(self):
        with pytest.raises(InvalidArgumentError):
            complexity_score(b"", 0, 0)

    def test_size_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            complexity_score(b"\x00" * 5, 2, 2)


class TestReports:
    """CSV 와 요약 통계"""

    def test_frame_columns(self):
        frame = build_encode_frame(["a", "b"], [0.5, 0.25], [(17, 12), (17, 9)], 17)
        assert list(frame.columns) == ["image_id", "complexity_score", "token_count", "per_layer_counts"]
        assert frame["token_count"].tolist() == [12, 9]
        assert frame["per_layer_counts"].tolist() == ["17;12", "17;9"]

    def test_csv_six_significant_digits(self, tmp_path):
        frame = build_encode_frame(["a"], [1 / 3], [(5,)], 5)
        path = save_encode_csv(frame, tmp_path / "out.csv")
        assert path.read_text(encoding="utf-8").splitlines()[1] == "a,0.333333,5,5"

    def test_xlsx_written(self, tmp_path):
        frame = build_encode_frame(["a"], [0.5], [(5, 4)], 5)
        path = save_encode_xlsx(frame, tmp_path / "out.xlsx")
        assert pd.read_excel(path).shape == (1, 4)

    def test_spearman_monotone(self):
        assert spearman([0.1, 0.2, 0.3, 0.4], [5, 7, 8, 20]) == pytest.approx(1.0)
        assert spearman([0.1, 0.2, 0.3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_spearman_constant_is_nan(self):
        assert math.isnan(spearman([1, 2, 3], [4, 4, 4]))

    def test_summary(self):
        frame = build_encode_frame(list("abcd"), [0.1, 0.2, 0.3, 0.4], [(9,), (11,), (13,), (15,)], 17)
        summary = summarize_tokens(frame, groups=[0, 0, 32, 32])
        assert summary.mean == 12.0
        assert summary.std == pytest.approx(math.sqrt(5.0))
        assert summary.by_group == {0: 10.0, 32: 14.0}
        assert summary.mean_std_text() == "12±2.23607"
