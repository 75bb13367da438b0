"""
threshold_calibrator 테스트: 스케줄, 순서 통계량, 배치 보정, 프로파일 입출력
"""

import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from dtome_engine import EdgeSet
from errors import CalibrationError, InvalidArgumentError, SchemaViolationError
from oracle_reference import reference_threshold
from synth_corpus import load_corpus
from threshold_calibrator import (
    MergeSchedule,
    ThresholdCalibrator,
    ThresholdProfile,
    average_thresholds,
    calibrate,
    calibrate_layer,
    load_profile,
    save_profile,
    schedule_targets,
)
from toy_vit import ToyViTEncoder


class StubEncoder:
    """이미지 번호별로 고정된 간선 풀을 내는 1레이어 인코더"""

    def __init__(self, pools, layers=1):
        self.cfg = SimpleNamespace(layers=layers)
        self.pools = pools
        self.embedded = []

    def embed(self, image):
        self.embedded.append(image)
        return np.full((5, 2), float(image))

    def attention_step(self, layer, x, token_sizes):
        return x, x

    def propose_edges(self, keys):
        return EdgeSet.from_edges(self.pools[int(keys[0, 0])])

    def mlp_step(self, layer, x):
        return x


class TestScheduleTargets:
    """레이어별 병합 목표"""

    def test_constant(self):
        assert schedule_targets(MergeSchedule(kind="constant", r_bar=3), 4) == [3, 3, 3, 3]

    def test_linear(self):
        assert schedule_targets(MergeSchedule(kind="linear", r_bar=3), 4) == [6, 4, 2, 0]

    def test_reverse_linear(self):
        assert schedule_targets(MergeSchedule(kind="reverse_linear", r_bar=3), 4) == [0, 2, 4, 6]

    def test_single_layer_falls_back_to_constant(self):
        assert schedule_targets(MergeSchedule(kind="linear", r_bar=5), 1) == [5]

    @pytest.mark.parametrize("r_bar, layers", [(3, 4), (7, 12), (1, 5), (10, 3), (0, 6)])
    def test_budget_parity(self, r_bar, layers):
        """세 스케줄 모두 Σ r_i = L·r_bar"""
        for kind in ("constant", "linear", "reverse_linear"):
            targets = schedule_targets(MergeSchedule(kind=kind, r_bar=r_bar), layers)
            assert sum(targets) == layers * r_bar
            assert all(t >= 0 for t in targets)

    def test_invalid_layers(self):
        with pytest.raises(InvalidArgumentError):
            schedule_targets(MergeSchedule(), 0)

    def test_for_target_tokens(self):
        schedule = MergeSchedule.for_target_tokens(n_tokens=65, layers=4, target=17)
        assert schedule.r_bar == 12
        assert MergeSchedule.for_target_tokens(10, 2, target=20).r_bar == 0


class TestCalibrateLayer:
    """k번째로 큰 점수"""

    def test_second_largest(self):
        assert calibrate_layer([0.9, 0.8, 0.95, 0.2], 2) == 0.9

    def test_zero_is_plus_infinity(self):
        assert calibrate_layer([0.1, 0.2], 0) == math.inf

    def test_all_is_minus_infinity(self):
        assert calibrate_layer([0.9, 0.8, 0.95, 0.2], 4) == -math.inf

    def test_negative_k(self):
        with pytest.raises(InvalidArgumentError):
            calibrate_layer([0.1], -1)

    def test_matches_sort_oracle(self, rng):
        for _ in range(1000):
            scores = rng.normal(size=int(rng.integers(1, 30)))
            for k in range(scores.size + 2):
                assert calibrate_layer(scores, k) == reference_threshold(scores, k)

    def test_threshold_retains_exactly_k(self, rng):
        scores = rng.normal(size=50)
        for k in range(1, 50):
            assert int(np.sum(scores >= calibrate_layer(scores, k))) == k


class TestAverageThresholds:
    """배치 평균"""

    def test_finite_mean(self):
        assert average_thresholds([[1.0, 2.0], [3.0, 4.0]]) == [2.0, 3.0]

    def test_infinite_values_skipped(self):
        assert average_thresholds([[1.0, -math.inf], [3.0, 2.0]]) == [2.0, 2.0]

    def test_all_infinite_kept(self):
        assert average_thresholds([[math.inf], [math.inf]]) == [math.inf]
        assert average_thresholds([[-math.inf], [-math.inf]]) == [-math.inf]


class TestCalibratorWithStub:
    """고정 간선 풀로 확인하는 배치 보정 절차"""

    def test_pooled_order_statistic(self):
        pools = {0: [(1, 0, 0.9), (3, 2, 0.8)], 1: [(1, 0, 0.95), (3, 2, 0.2)]}
        encoder = StubEncoder(pools)
        result = ThresholdCalibrator(encoder, MergeSchedule(r_bar=1), batch_size=2, num_batches=1).run([0, 1])
        assert result.profile.taus == [0.9]
        assert result.batches[0].merged == [2]
        assert result.batches[0].token_counts == [4, 4]

    def test_consumes_each_image_once(self):
        pools = {i: [(1, 0, 0.1 * i), (3, 2, 0.05 * i)] for i in range(4)}
        encoder = StubEncoder(pools)
        ThresholdCalibrator(encoder, MergeSchedule(r_bar=1), batch_size=2, num_batches=2, seed=5).run([0, 1, 2, 3])
        assert sorted(encoder.embedded) == [0, 1, 2, 3]

    def test_shortage_merges_everything(self):
        encoder = StubEncoder({0: [(1, 0, 0.5)]})
        result = ThresholdCalibrator(encoder, MergeSchedule(r_bar=3), batch_size=1, num_batches=1).run([0])
        assert result.profile.taus == [-math.inf]
        assert result.batches[0].shortages == 1
        assert result.batches[0].merged == [1]

    def test_ties_logged(self):
        encoder = StubEncoder({0: [(1, 0, 0.5), (3, 2, 0.5)]})
        result = ThresholdCalibrator(encoder, MergeSchedule(r_bar=1), batch_size=1, num_batches=1).run([0])
        assert result.batches[0].ties == 1
        assert result.batches[0].merged == [2]

    def test_empty_corpus(self):
        with pytest.raises(CalibrationError):
            ThresholdCalibrator(StubEncoder({}), MergeSchedule(r_bar=1), 1, 1).run([])

    def test_too_few_images(self):
        with pytest.raises(CalibrationError):
            ThresholdCalibrator(StubEncoder({}), MergeSchedule(r_bar=1), 2, 2).run([0, 1, 2])


class TestCalibratorWithToyViT:
    """토이 ViT 위에서의 보정"""

    def test_zero_budget_profile_is_infinite(self, small_cfg, small_corpus):
        _, images = load_corpus(small_corpus)
        profile = calibrate(ToyViTEncoder(small_cfg), images, MergeSchedule(r_bar=0), 2, 2)
        assert profile.taus == [math.inf, math.inf]

    def test_exact_merge_budget_per_batch(self, small_cfg, small_corpus):
        """동점이 없으면 레이어 i 에서 정확히 B·r_i 개 병합"""
        _, images = load_corpus(small_corpus)
        schedule = MergeSchedule(kind="linear", r_bar=3)
        result = ThresholdCalibrator(ToyViTEncoder(small_cfg), schedule, 3, 2, seed=1).run(images)
        targets = schedule_targets(schedule, small_cfg.layers)
        for stats in result.batches:
            if stats.ties == 0 and stats.shortages == 0:
                assert stats.merged == [3 * r for r in targets]
                assert stats.mean_tokens == small_cfg.n_tokens - sum(targets)

    @pytest.mark.parametrize("kind", ["constant", "linear", "reverse_linear"])
    def test_all_schedules_calibrate(self, small_cfg, small_corpus, kind):
        _, images = load_corpus(small_corpus)
        profile = calibrate(ToyViTEncoder(small_cfg), images, MergeSchedule(kind=kind, r_bar=2), 2, 3)
        assert profile.layers == small_cfg.layers
        assert profile.schedule.kind == kind

    def test_deterministic_across_workers(self, small_cfg, small_corpus):
        _, images = load_corpus(small_corpus)
        encoder = ToyViTEncoder(small_cfg)
        schedule = MergeSchedule(r_bar=3)
        one = calibrate(encoder, images, schedule, 3, 2, seed=4, workers=1)
        many = calibrate(encoder, images, schedule, 3, 2, seed=4, workers=3)
        assert one == many


class TestProfileIO:
    """프로파일 JSON"""

    def make_profile(self, taus):
        return ThresholdProfile(taus=taus, schedule=MergeSchedule(r_bar=2), batch_size=4,
                                num_batches=3, corpus_id="abc")

    def test_round_trip_with_infinities(self, tmp_path):
        profile = self.make_profile([math.inf, 0.123456789012345, -math.inf])
        path = tmp_path / "profile.json"
        save_profile(profile, path)
        assert load_profile(path) == profile
        payload = json.loads(path.read_text(encoding="utf-8"))
        assert payload["taus"][0] == "inf" and payload["taus"][2] == "-inf"

    def test_field_order(self, tmp_path):
        path = tmp_path / "profile.json"
        save_profile(self.make_profile([0.5]), path)
        keys = list(json.loads(path.read_text(encoding="utf-8")).keys())
        assert keys == ["version", "taus", "schedule", "batch_size", "num_batches", "corpus_id", "similarity"]

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "profile.json"
        payload = self.make_profile([0.5]).to_json_dict()
        payload["version"] = 99
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(SchemaViolationError):
            load_profile(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "profile.json"
        path.write_text(json.dumps({"version": 1, "taus": [0.1]}), encoding="utf-8")
        with pytest.raises(SchemaViolationError):
            load_profile(path)

    def test_foreign_similarity_convention(self, tmp_path):
        path = tmp_path / "profile.json"
        payload = self.make_profile([0.5]).to_json_dict()
        payload["similarity"] = "dot-raw"
        path.write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(SchemaViolationError):
            load_profile(path)
