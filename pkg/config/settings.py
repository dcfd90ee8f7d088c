import os
from dataclasses import dataclass, fields
from typing import Dict, List, Optional

from dotenv import dotenv_values, find_dotenv, load_dotenv

from modules.decoder import DecoderConfig, build_topology
from modules.evaluation import EvalConfig
from modules.frontend import FrontendConfig
from modules.mae import MaeConfig
from modules.pipeline import BenchConfig, GradcheckConfig
from modules.resampler import ResamplerConfig
from modules.synth import DataConfig
from modules.trainer import TextConfig, TrainConfig


class ConfigError(ValueError):
    """Run configuration has unknown keys or invalid values."""


@dataclass
class RunConfig:
    seed: int = 0
    output_directory: str = "output"
    thread_count: int = 1
    log_every: int = 50
    export_format: str = "json"
    text_checkpoint: str = "text_decoder.jmla"
    mae_checkpoint: str = "mae_encoder.jmla"
    jmla_checkpoint: str = "jmla.jmla"

    @property
    def export_formats(self) -> List[str]:
        return [f.strip() for f in self.export_format.split(",") if f.strip()]

    def validate(self):
        for fmt in self.export_formats:
            if fmt not in ("json", "html"):
                raise ValueError(f"Неверный формат экспорта: {fmt}. Допустимые значения: json, html")
        if self.thread_count < 1 or self.thread_count > 20:
            raise ValueError("Количество потоков должно быть от 1 до 20")
        if self.log_every < 0:
            raise ValueError("run.log_every не может быть отрицательным")


SECTIONS = {
    "run": RunConfig,
    "frontend": FrontendConfig,
    "data": DataConfig,
    "mae": MaeConfig,
    "resampler": ResamplerConfig,
    "decoder": DecoderConfig,
    "text": TextConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "gradcheck": GradcheckConfig,
    "bench": BenchConfig,
}

ENV_OVERRIDES = {
    "JMLA_OUTPUT_DIRECTORY": "run.output_directory",
    "JMLA_THREAD_COUNT": "run.thread_count",
}


def _coerce(key: str, raw: Optional[str], current):
    if raw is None:
        raise ConfigError(f"Ключ '{key}' без значения")
    text = raw.strip()
    try:
        if isinstance(current, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(f"ожидалось true/false, получено '{text}'")
            return text.lower() == "true"
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"Неверное значение для '{key}': {e}") from None
    return text


class Config:
    """
    Run configuration: `key = value` lines with dotted section paths.

    Precedence: dataclass defaults < config file < JMLA_* environment
    variables < command-line overrides.
    """

    def __init__(self, path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None):
        load_dotenv(find_dotenv(usecwd=True))
        self.path = path or os.getenv("JMLA_CONFIG")
        self.sections = {name: cls() for name, cls in SECTIONS.items()}

        values: Dict[str, Optional[str]] = {}
        if self.path:
            if not os.path.exists(self.path):
                raise ConfigError(f"Файл конфигурации не найден: {self.path}")
            values.update(dotenv_values(self.path, interpolate=False))
        for env_var, key in ENV_OVERRIDES.items():
            if os.getenv(env_var):
                values[key] = os.getenv(env_var)
        values.update(overrides or {})

        for key, raw in values.items():
            self.set(key, raw)
        self._validate_config()

    def set(self, key: str, raw: Optional[str]):
        section, _, name = key.partition(".")
        if section not in self.sections or not name:
            raise ConfigError(f"Неизвестный ключ конфигурации: {key}")
        target = self.sections[section]
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"Неизвестный ключ конфигурации: {key}")
        setattr(target, name, _coerce(key, raw, getattr(target, name)))

    def __getattr__(self, name: str):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def _validate_config(self):
        """Validate every section, then the constraints that span sections."""
        for name, section in self.sections.items():
            try:
                section.validate()
            except ValueError as e:
                raise ConfigError(f"[{name}] {e}") from None
        if self.decoder.width % self.resampler.heads:
            raise ConfigError("decoder.width должен делиться на resampler.heads")
        try:
            build_topology(self.train.topology, self.mae.encoder_layers, self.decoder.layers)
        except ValueError as e:
            raise ConfigError(f"[train] {e}") from None

    def path_for(self, filename: str) -> str:
        return os.path.join(self.run.output_directory, filename)

    def as_dict(self) -> Dict[str, object]:
        return {
            f"{section}.{f.name}": getattr(obj, f.name)
            for section, obj in self.sections.items()
            for f in fields(obj)
        }

    def dump(self, path: str):
        """Write the effective configuration in the same `key = value` format."""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for key, value in self.as_dict().items():
                text = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
                f.write(f"{key} = {text}\n")

    def print_config_summary(self):
        """Print configuration summary."""
        print("=== Конфигурация ===")
        print(f"Файл: {self.path or '(значения по умолчанию)'}")
        print(f"Seed: {self.run.seed}")
        print(f"Директория вывода: {self.run.output_directory}")
        print(f"Количество потоков: {self.run.thread_count}")
        print(f"Энкодер MAE: {self.mae.encoder_layers} слоёв, ширина {self.mae.width}")
        print(f"Декодер: {self.decoder.layers} слоёв, ширина {self.decoder.width}")
        print(f"Ресэмплер: {self.resampler.latents} латентов, глубина {self.resampler.depth}")
        print(f"Топология: {self.train.topology}, данные: {self.train.data_mode}")
        print(f"Клипов: {self.data.n_clips} обучение / {self.data.n_eval_clips} оценка")
        print("==================\n")
