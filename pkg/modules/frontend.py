"""
Waveform -> log-mel spectrogram -> 16x16 patches.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import librosa
import numpy as np
import soundfile as sf

PATCH = 16


class FrontendError(ValueError):
    """Input audio does not satisfy the frontend contract."""


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    window: int = 400
    hop: int = 160
    n_mels: int = 64
    log_floor: float = 1e-10

    def validate(self):
        if self.sample_rate <= 0 or self.window <= 0 or self.hop <= 0:
            raise ValueError("Частота дискретизации, окно и шаг должны быть положительными")
        if self.n_mels <= 0 or self.n_mels % PATCH:
            raise ValueError(f"Число мел-полос должно быть кратно {PATCH}: {self.n_mels}")
        if self.log_floor <= 0:
            raise ValueError("log_floor должен быть положительным")

    def samples_for_frames(self, frames: int) -> int:
        """Waveform length that yields exactly `frames` STFT frames."""
        return self.window + (frames - 1) * self.hop


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise FrontendError("Ожидался непустой моно-сигнал")
        if self.sample_rate <= 0:
            raise FrontendError(f"Неверная частота дискретизации: {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)) or np.abs(self.samples).max() > 1.0:
            raise FrontendError("Отсчёты сигнала должны быть конечными и лежать в [-1, 1]")


@dataclass
class Spectrogram:
    """T x F log-energy matrix; rows past `valid_frames` are floor padding."""

    values: np.ndarray
    valid_frames: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or not np.all(np.isfinite(self.values)):
            raise FrontendError("Спектрограмма должна быть конечной матрицей T x F")
        if self.valid_frames is None:
            self.valid_frames = self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass
class PatchSequence:
    """P flattened 16x16 patches with their (time, freq) grid coordinates."""

    patches: np.ndarray
    coords: np.ndarray
    grid: Tuple[int, int]

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    def subset(self, indices: np.ndarray) -> "PatchSequence":
        return PatchSequence(self.patches[indices], self.coords[indices], self.grid)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """HTK-spaced triangles with area normalisation, shape (n_mels, 1 + window // 2)."""
    return librosa.filters.mel(
        sr=cfg.sample_rate,
        n_fft=cfg.window,
        n_mels=cfg.n_mels,
        fmin=0.0,
        fmax=cfg.sample_rate / 2.0,
        htk=True,
        norm="slaney",
        dtype=np.float64,
    )


def mel_band_centers(cfg: FrontendConfig) -> np.ndarray:
    """Centre frequency (Hz) of every mel band."""
    edges = librosa.mel_frequencies(n_mels=cfg.n_mels + 2, fmin=0.0, fmax=cfg.sample_rate / 2.0, htk=True)
    return edges[1:-1]


def _pad_to_patch(values: np.ndarray, fill: float) -> np.ndarray:
    frames, bins = values.shape
    pad_t = (-frames) % PATCH
    pad_f = (-bins) % PATCH
    if pad_t or pad_f:
        values = np.pad(values, ((0, pad_t), (0, pad_f)), constant_values=fill)
    return values


def log_mel(w: Waveform, cfg: Optional[FrontendConfig] = None) -> Spectrogram:
    """STFT magnitude -> mel filterbank -> log(x + floor), padded to multiples of 16."""
    cfg = cfg or FrontendConfig()
    if w.sample_rate != cfg.sample_rate:
        raise FrontendError(f"Частота {w.sample_rate} Гц не совпадает с настроенной {cfg.sample_rate} Гц")
    if w.samples.size < cfg.window:
        raise FrontendError(f"Сигнал короче одного окна ({w.samples.size} < {cfg.window})")

    stft = librosa.stft(
        w.samples,
        n_fft=cfg.window,
        hop_length=cfg.hop,
        win_length=cfg.window,
        window="hann",
        center=False,
    )
    energy = mel_filterbank(cfg) @ np.abs(stft)
    values = np.log(energy.T + cfg.log_floor)
    frames = values.shape[0]
    return Spectrogram(_pad_to_patch(values, np.log(cfg.log_floor)), valid_frames=frames)


def standardize(spec: Spectrogram) -> Spectrogram:
    """Zero-mean, unit-variance scaling using the statistics of the unpadded frames."""
    valid = spec.values[: spec.valid_frames]
    std = valid.std()
    scaled = (spec.values - valid.mean()) / (std if std > 0 else 1.0)
    return Spectrogram(scaled, valid_frames=spec.valid_frames)


def patchify(X: Spectrogram) -> PatchSequence:
    """Row-major over the (time-patch, freq-patch) grid; each patch flattened row-major."""
    frames, bins = X.values.shape
    if frames % PATCH or bins % PATCH:
        raise FrontendError(f"Размеры спектрограммы {frames}x{bins} не кратны {PATCH}")
    grid = (frames // PATCH, bins // PATCH)
    patches = (
        X.values.reshape(grid[0], PATCH, grid[1], PATCH)
        .transpose(0, 2, 1, 3)
        .reshape(grid[0] * grid[1], PATCH * PATCH)
    )
    coords = np.array([(t, f) for t in range(grid[0]) for f in range(grid[1])], dtype=np.int64)
    return PatchSequence(np.ascontiguousarray(patches), coords, grid)


def unpatchify(p: PatchSequence, frames: int, bins: int) -> Spectrogram:
    """Exact inverse of patchify."""
    if p.patches.shape != (p.count, PATCH * PATCH) or p.count * PATCH * PATCH != frames * bins:
        raise FrontendError(f"{p.count} патчей не собираются в {frames}x{bins}")
    if frames % PATCH or bins % PATCH or (frames // PATCH) * (bins // PATCH) != p.count:
        raise FrontendError(f"Сетка патчей не соответствует {frames}x{bins}")
    grid_t, grid_f = frames // PATCH, bins // PATCH
    values = p.patches.reshape(grid_t, grid_f, PATCH, PATCH).transpose(0, 2, 1, 3).reshape(frames, bins)
    return Spectrogram(values)


def read_wav(path: str) -> Waveform:
    """Read a mono PCM WAV file."""
    try:
        samples, sample_rate = sf.read(path, dtype="float64", always_2d=False)
    except RuntimeError as e:
        raise FrontendError(f"Не удалось прочитать WAV {path}: {e}") from e
    if samples.ndim != 1:
        raise FrontendError(f"Поддерживается только моно, в {path} каналов: {samples.shape[1]}")
    return Waveform(samples, int(sample_rate))
