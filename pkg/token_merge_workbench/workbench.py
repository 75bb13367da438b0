#!/usr/bin/env python3
"""
DToMe / VTU 워크벤치 명령행 도구

    python workbench.py synth     --out corpus/
    python workbench.py calibrate --corpus corpus/ --out profile.json --variant mid
    python workbench.py encode    --corpus corpus/ --profile profile.json --out tokens.csv
    python workbench.py verify    --seed 0
    python workbench.py bench     --n 576 --n-un 89,195,394

종료 코드: 0 성공, 1 검증/보정 실패, 2 사용법/설정 오류, 3 입출력 오류
"""

import argparse
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

import settings
from core_model import RopeConfig, expand
from errors import CalibrationError, ConfigError, WorkbenchError
from reports import build_encode_frame, save_encode_csv, save_encode_xlsx, summarize_tokens
from synth_corpus import SynthSpec, cmd_synth, complexity_score, corpus_id, load_corpus, load_synth_spec
from threshold_calibrator import MergeSchedule, ThresholdCalibrator, load_profile, save_profile
from toy_vit import ToyViTEncoder, ViTConfig, ViTWeights, encode_batch, encoder_mflops, save_tokens_csv
from verification import random_merge_map, run_verification
from vtu_attention import FLOPS_CSV_HEADER, flops_model, full_attention_core, vtu_attention_core

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3


def banner(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


def _parse_int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"정수 목록이 아닙니다: {text}") from e


def load_vit_config(path: Optional[str]) -> ViTConfig:
    return ViTConfig.load(path) if path else ViTConfig()


# ==================== synth ====================
def run_synth(args) -> int:
    if args.config:
        spec = load_synth_spec(args.config)
    else:
        spec = SynthSpec(height=args.height, width=args.width, patch_size=args.patch_size,
                         count=args.count, rects=args.rects, noise_sigma=args.noise, seed=args.seed)
    banner("합성 코퍼스 생성")
    manifest = cmd_synth(spec, args.out)
    print(f"✓ 이미지 {len(manifest['images'])}장 → {args.out}")
    print(f"  크기 {spec.height}×{spec.width}, R 순환 {spec.rects}, σ={spec.noise_sigma}")
    return EXIT_OK


# ==================== calibrate ====================
def resolve_schedule(args, cfg: ViTConfig) -> MergeSchedule:
    """--r-bar > --target-tokens > --variant 순으로 적용합니다."""
    if args.r_bar is not None:
        return MergeSchedule(kind=args.schedule, r_bar=args.r_bar)
    if args.target_tokens is not None:
        target = args.target_tokens
    else:
        target = settings.VARIANT_FRACTIONS[args.variant] * cfg.n_tokens
    return MergeSchedule.for_target_tokens(cfg.n_tokens, cfg.layers, target, kind=args.schedule)


def cmd_calibrate(args) -> int:
    cfg = load_vit_config(args.config)
    schedule = resolve_schedule(args, cfg)
    _, images = load_corpus(args.corpus)

    banner("레이어별 임계값 보정")
    print(f"토큰 N={cfg.n_tokens}, 레이어 L={cfg.layers}, 스케줄 {schedule.kind} r̄={schedule.r_bar}")
    print(f"배치 {args.batch_size} × {args.num_batches}, 코퍼스 {len(images)}장")

    encoder = ToyViTEncoder(cfg)
    calibrator = ThresholdCalibrator(encoder, schedule, args.batch_size, args.num_batches,
                                     seed=args.seed, corpus_id=corpus_id(args.corpus),
                                     workers=args.workers)
    result = calibrator.run(images)
    save_profile(result.profile, args.out)

    print("\n레이어   τ            이미지당 병합")
    for layer, (tau, merged) in enumerate(zip(result.profile.taus, result.mean_merged_per_image())):
        print(f"  {layer:<5d} {tau:<12.6g} {merged:.6g}")
    ties = sum(b.ties for b in result.batches)
    shortages = sum(b.shortages for b in result.batches)
    print(f"\n평균 출력 토큰 {result.mean_tokens:.6g} / {cfg.n_tokens}")
    if ties or shortages:
        print(f"⚠️  동점 {ties}회, 간선 부족 {shortages}회")
    print(f"✓ 프로파일 저장: {args.out}")
    return EXIT_OK


# ==================== encode ====================
def resolve_encode_config(args) -> ViTConfig:
    cfg = load_vit_config(args.config)
    if sum([bool(args.profile), args.topr is not None, args.off]) > 1:
        raise ConfigError("--profile, --topr, --off 중 하나만 지정할 수 있습니다")
    if args.off:
        return cfg.with_merge_off()
    if args.topr is not None:
        return cfg.with_topr(args.topr)
    if args.profile:
        return cfg.with_profile(load_profile(args.profile))
    return cfg


def cmd_encode(args) -> int:
    cfg = resolve_encode_config(args)
    entries, images = load_corpus(args.corpus)

    banner("토큰 인코딩")
    print(f"병합 모드 {cfg.merge_mode}, 이미지 {len(images)}장, workers={args.workers}")
    weights = ViTWeights.load(args.weights) if args.weights else ViTWeights.generate(cfg)
    if args.save_weights:
        weights.save(args.save_weights)
        print(f"✓ 가중치 저장: {args.save_weights}")
    results = encode_batch(images, cfg, weights, workers=args.workers)
    if args.tokens_dir:
        tokens_dir = Path(args.tokens_dir)
        tokens_dir.mkdir(parents=True, exist_ok=True)
        for entry, result in zip(entries, results):
            save_tokens_csv(result.tokens, tokens_dir / f"{Path(entry['path']).stem}.csv")
        print(f"✓ 이미지별 토큰 저장: {tokens_dir}")

    scores = [complexity_score(img.tobytes(), img.shape[0], img.shape[1]) for img in images]
    frame = build_encode_frame([Path(e["path"]).stem for e in entries], scores,
                               [r.per_layer_counts for r in results], cfg.n_tokens)
    save_encode_csv(frame, args.out)
    if args.xlsx:
        save_encode_xlsx(frame, Path(args.out).with_suffix(".xlsx"))

    groups = [int(e.get("r", -1)) for e in entries]
    summary = summarize_tokens(frame, groups)
    full_cost = encoder_mflops([cfg.n_tokens] * cfg.layers, cfg)
    merged_cost = float(np.mean([encoder_mflops(r.per_layer_counts, cfg) for r in results]))

    print(f"\n토큰 수 {summary.mean_std_text()} (N={cfg.n_tokens})")
    print(f"Spearman(복잡도, 토큰 수) = {summary.spearman_text()}")
    for r, mean_tokens in sorted(summary.by_group.items()):
        print(f"  R={r:<4d} 평균 토큰 {mean_tokens:.6g}")
    print(f"인코더 MFLOPs {merged_cost:.1f} / 전체 {full_cost:.1f}")
    if cfg.profile is not None:
        print(f"프로파일 코퍼스 {cfg.profile.corpus_id}, 인코딩 코퍼스 {corpus_id(args.corpus)}")
    print(f"✓ CSV 저장: {args.out}")
    return EXIT_OK


# ==================== verify ====================
def cmd_verify(args) -> int:
    banner("기준 구현 동치성 검증")
    report = run_verification(seed=args.seed, cases=args.cases, max_n=args.n, perturb=args.perturb)
    for result in report.results:
        mark = "✓" if result.passed else "❌"
        print(f"{mark} {result.line()}")
    print("=" * 60)
    if report.passed:
        print("✅ 모든 스위트 통과")
        return EXIT_OK
    print("❌ 검증 실패")
    return EXIT_FAILURE


# ==================== bench ====================
def _time_ms(fn, reps: int) -> np.ndarray:
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return np.asarray(samples)


def cmd_bench(args) -> int:
    """MFLOPs 는 분석 모델, 시간은 헤드 하나의 어텐션 코어 측정값입니다."""
    rng = np.random.default_rng(args.seed)
    angles = RopeConfig(args.head_dim, base=settings.ROPE_BASE).angles(np.arange(args.n))
    rows = []
    banner("FLOPs / 시간 벤치마크")
    print(FLOPS_CSV_HEADER + ",vtu_ms_mean,vtu_ms_std,full_ms_mean,full_ms_std")
    for n_un in args.n_un:
        report = flops_model(args.n, n_un, args.heads, args.head_dim)
        m = random_merge_map(rng, args.n, n_un)
        q_un, k_un, v_un = (rng.normal(size=(n_un, args.head_dim)) for _ in range(3))
        q, k, v = (expand(m, a) for a in (q_un, k_un, v_un))
        vtu = _time_ms(lambda: vtu_attention_core(q_un, k_un, v_un, m, angles), args.reps)
        full = _time_ms(lambda: full_attention_core(q, k, v, angles), args.reps)
        print(f"{report.to_csv_line()},{vtu.mean():.6g},{vtu.std():.6g},{full.mean():.6g},{full.std():.6g}")
        rows.append({**asdict(report), "vtu_ms_mean": vtu.mean(), "vtu_ms_std": vtu.std(),
                     "full_ms_mean": full.mean(), "full_ms_std": full.std()})
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows).to_csv(args.out, index=False, float_format="%.6g", lineterminator="\n")
        print(f"✓ 결과 저장: {args.out}")
    return EXIT_OK


# ==================== 파서 ====================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="workbench", description="DToMe / VTU 토큰 병합 워크벤치")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="합성 코퍼스 생성", parents=[common])
    synth.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "corpus"))
    synth.add_argument("--config", help="SynthSpec JSON")
    synth.add_argument("--count", type=int, default=12)
    synth.add_argument("--rects", type=_parse_int_list, default=[0, 2, 4, 8, 16, 32])
    synth.add_argument("--noise", type=float, default=0.0)
    synth.add_argument("--height", type=int, default=32)
    synth.add_argument("--width", type=int, default=32)
    synth.add_argument("--patch-size", type=int, default=4)
    synth.set_defaults(func=run_synth)

    calibrate = sub.add_parser("calibrate", help="레이어별 임계값 보정", parents=[common])
    calibrate.add_argument("--corpus", required=True)
    calibrate.add_argument("--config", help="ViTConfig JSON")
    calibrate.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "profile.json"))
    calibrate.add_argument("--schedule", choices=["constant", "linear", "reverse_linear"], default="constant")
    calibrate.add_argument("--r-bar", type=int)
    calibrate.add_argument("--target-tokens", type=float)
    calibrate.add_argument("--variant", choices=sorted(settings.VARIANT_FRACTIONS), default="mid")
    calibrate.add_argument("--batch-size", type=int, default=4)
    calibrate.add_argument("--num-batches", type=int, default=2)
    calibrate.add_argument("--workers", type=int, default=settings.WORKERS)
    calibrate.set_defaults(func=cmd_calibrate)

    encode = sub.add_parser("encode", help="코퍼스 인코딩과 토큰 통계", parents=[common])
    encode.add_argument("--corpus", required=True)
    encode.add_argument("--config", help="ViTConfig JSON")
    encode.add_argument("--profile")
    encode.add_argument("--topr", type=int)
    encode.add_argument("--off", action="store_true")
    encode.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "tokens.csv"))
    encode.add_argument("--xlsx", action="store_true")
    encode.add_argument("--weights", help="저장된 가중치 파일 (없으면 seed 로 생성)")
    encode.add_argument("--save-weights", help="사용한 가중치를 파일로 저장")
    encode.add_argument("--tokens-dir", help="이미지별 최종 토큰 CSV 디렉터리")
    encode.add_argument("--workers", type=int, default=settings.WORKERS)
    encode.set_defaults(func=cmd_encode)

    verify = sub.add_parser("verify", help="기준 구현 동치성 검증", parents=[common])
    verify.add_argument("--cases", type=int, default=settings.VERIFY_CASES)
    verify.add_argument("--n", type=int, default=32, help="무작위 시퀀스 최대 길이")
    verify.add_argument("--perturb", action="store_true", help=argparse.SUPPRESS)
    verify.set_defaults(func=cmd_verify)

    bench = sub.add_parser("bench", help="FLOPs 모델과 시간 측정", parents=[common])
    bench.add_argument("--n", type=int, default=576)
    bench.add_argument("--n-un", type=_parse_int_list, default=[89, 195, 394])
    bench.add_argument("--heads", type=int, default=32)
    bench.add_argument("--head-dim", type=int, default=128)
    bench.add_argument("--reps", type=int, default=3)
    bench.add_argument("--out")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CalibrationError as e:
        print(f"❌ 보정 실패: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (WorkbenchError, ValidationError) as e:
        print(f"❌ 설정/입력 오류: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"❌ 입출력 오류: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
