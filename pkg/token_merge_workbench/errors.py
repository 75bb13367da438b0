"""
워크벤치 예외 정의
"""


class WorkbenchError(Exception):
    """모든 워크벤치 예외의 기반 클래스"""


class InvalidArgumentError(WorkbenchError, ValueError):
    """허용 범위를 벗어난 인자"""


class ShapeError(WorkbenchError, ValueError):
    """행렬/시퀀스 크기 불일치"""


class MergeLogicError(WorkbenchError):
    """잘못된 병합 간선 (소스 중복, 범위 밖 위치 등)"""


class ConfigError(WorkbenchError):
    """모델/실행 설정 오류"""


class CalibrationError(WorkbenchError):
    """임계값 보정 실패"""


class SchemaViolationError(WorkbenchError):
    """저장 파일 형식 위반"""
