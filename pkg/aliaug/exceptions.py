class AliAugError(Exception):
    """Базовое исключение пакета."""


class ConfigError(AliAugError, ValueError):
    pass


class ManifestError(AliAugError, ValueError):
    pass


class CheckpointError(AliAugError, ValueError):
    pass


class TrainingDivergedError(AliAugError, RuntimeError):
    """Лосс стал NaN/Inf: шаг обучения прерывается."""

    def __init__(self, step: int, detail: str):
        self.step = step
        super().__init__(f"Обучение разошлось на шаге {step}: {detail}")
