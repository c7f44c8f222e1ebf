"""Signal utilities: STFT, inter-channel phase difference, SiSDR, reverberation, WAV I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.signal import fftconvolve

from .errors import InvalidArgumentError

DEFAULT_SR = 8000
SISDR_EPS = 1e-8
SISDR_CLAMP = 60.0


@dataclass(frozen=True)
class Waveform:
    """Mono sample sequence at a fixed rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise InvalidArgumentError(f"waveform must be 1-D, got shape {arr.shape}")
        if self.sample_rate <= 0:
            raise InvalidArgumentError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _samples(w: Union[Waveform, np.ndarray]) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def _rate(w: Union[Waveform, np.ndarray]) -> int:
    return w.sample_rate if isinstance(w, Waveform) else DEFAULT_SR


def stft_geometry(sample_rate: int, window_ms: float, hop_ms: float) -> tuple:
    """Return ``(win, hop, fft_size)`` in samples for the given durations."""
    if not (window_ms >= hop_ms > 0):
        raise InvalidArgumentError(f"need window_ms >= hop_ms > 0, got {window_ms}, {hop_ms}")
    win = int(round(window_ms * sample_rate / 1000.0))
    hop = int(round(hop_ms * sample_rate / 1000.0))
    fft_size = 1 << (win - 1).bit_length()
    return win, hop, fft_size


def stft(w: Union[Waveform, np.ndarray], window_ms: float = 32.0, hop_ms: float = 16.0,
         sample_rate: int = None) -> np.ndarray:
    """Hann-windowed STFT without centering; returns complex ``[F x T_f]``."""
    x = _samples(w)
    sr = sample_rate or _rate(w)
    win, hop, nfft = stft_geometry(sr, window_ms, hop_ms)
    if x.shape[0] < win:
        raise InvalidArgumentError(f"waveform of {x.shape[0]} samples shorter than one {win}-sample window")
    n_frames = (x.shape[0] - win) // hop + 1
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames] * window
    return np.fft.rfft(frames, n=nfft, axis=1).T


def wrap_phase(phi: np.ndarray) -> np.ndarray:
    """Map angles into ``(-pi, pi]``."""
    out = np.mod(phi + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return out


def ipd(ch1: Waveform, ch2: Waveform, window_ms: float = 32.0, hop_ms: float = 16.0) -> np.ndarray:
    """Inter-channel phase difference ``angle(X1) - angle(X2)`` wrapped to ``(-pi, pi]``."""
    if len(ch1) != len(ch2):
        raise InvalidArgumentError(f"channel lengths differ: {len(ch1)} vs {len(ch2)}")
    if _rate(ch1) != _rate(ch2):
        raise InvalidArgumentError("channel sample rates differ")
    s1 = stft(ch1, window_ms, hop_ms)
    s2 = stft(ch2, window_ms, hop_ms)
    return wrap_phase(np.angle(s1) - np.angle(s2))


def sisdr(estimate: Union[Waveform, np.ndarray], reference: Union[Waveform, np.ndarray],
          clamp: bool = True) -> float:
    """Scale-invariant SDR in dB, clamped to ``[-60, 60]``.

    Both signals are zero-meaned first. The stabilizer is ``eps * ||estimate||^2``
    so that rescaling the estimate leaves the value unchanged.
    """
    est = _samples(estimate)
    ref = _samples(reference)
    if est.shape != ref.shape:
        raise InvalidArgumentError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = ref @ ref
    if ref_energy <= 0:
        raise InvalidArgumentError("reference has zero energy")
    est_energy = est @ est
    if est_energy == 0:
        return -SISDR_CLAMP if clamp else -math.inf
    target = (est @ ref / ref_energy) * ref
    noise = est - target
    num = target @ target
    den = noise @ noise + SISDR_EPS * est_energy
    with np.errstate(divide="ignore"):
        val = 10.0 * math.log10(num / den) if num > 0 else -math.inf
    if clamp:
        val = min(max(val, -SISDR_CLAMP), SISDR_CLAMP)
    return val


def reverb_ir(rt60: float, sample_rate: int = DEFAULT_SR, seed: int = 0, tail_gain: float = 0.1) -> np.ndarray:
    """Unit impulse followed by exponentially decaying uniform noise.

    The decay reaches -60 dB at ``rt60`` seconds, where the response is cut.
    """
    if rt60 < 0 or rt60 > 1:
        raise InvalidArgumentError(f"rt60 must lie in [0, 1], got {rt60}")
    n = int(round(rt60 * sample_rate))
    ir = np.zeros(n + 1)
    ir[0] = 1.0
    if n == 0:
        return ir
    rng = np.random.default_rng(seed)
    t = np.arange(1, n + 1) / sample_rate
    decay = np.exp(-3.0 * math.log(10.0) * t / rt60)
    ir[1:] = tail_gain * rng.uniform(-1.0, 1.0, n) * decay
    return ir


def apply_reverb(dry: Waveform, rt60: float, seed: int, tail_gain: float = 0.1) -> Waveform:
    """Convolve with :func:`reverb_ir`; output keeps the input length."""
    if rt60 < 0:
        raise InvalidArgumentError(f"rt60 must be non-negative, got {rt60}")
    if rt60 == 0:
        return dry
    ir = reverb_ir(rt60, dry.sample_rate, seed, tail_gain)
    wet = fftconvolve(dry.samples, ir)[: len(dry)]
    return Waveform(wet, dry.sample_rate)


# ---------------------------------------------------------------------------
# WAV files


def write_wav(path: Union[str, Path], channels, sample_rate: int = DEFAULT_SR, fmt: str = "float32") -> None:
    """Write one or two channels as 32-bit float (default) or 16-bit PCM RIFF/WAVE."""
    if isinstance(channels, (Waveform, np.ndarray)) and np.asarray(_samples(channels)).ndim == 1:
        channels = [channels]
    data = np.stack([_samples(c) for c in channels], axis=1)
    n_ch = data.shape[1]
    if fmt == "float32":
        payload = data.astype("<f4").tobytes()
        fmt_tag, width = 3, 4
    elif fmt == "pcm16":
        payload = (np.clip(data, -1.0, 1.0 - 1 / 32768) * 32768).round().astype("<i2").tobytes()
        fmt_tag, width = 1, 2
    else:
        raise InvalidArgumentError(f"unsupported wav format {fmt!r}")
    block = n_ch * width
    fmt_chunk = (
        fmt_tag.to_bytes(2, "little")
        + n_ch.to_bytes(2, "little")
        + int(sample_rate).to_bytes(4, "little")
        + (int(sample_rate) * block).to_bytes(4, "little")
        + block.to_bytes(2, "little")
        + (width * 8).to_bytes(2, "little")
    )
    body = b"WAVE" + b"fmt " + len(fmt_chunk).to_bytes(4, "little") + fmt_chunk
    body += b"data" + len(payload).to_bytes(4, "little") + payload
    Path(path).write_bytes(b"RIFF" + len(body).to_bytes(4, "little") + body)


def read_wav(path: Union[str, Path]) -> tuple:
    """Read a RIFF/WAVE file into ``(list of Waveform, sample_rate)``.

    Only 16-bit PCM and 32-bit IEEE float, mono or stereo, are accepted.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise InvalidArgumentError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = int.from_bytes(raw[pos + 4:pos + 8], "little")
        chunk = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = chunk
        elif cid == b"data":
            data = chunk
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise InvalidArgumentError(f"{path}: missing fmt or data chunk")
    tag = int.from_bytes(fmt[0:2], "little")
    n_ch = int.from_bytes(fmt[2:4], "little")
    sr = int.from_bytes(fmt[4:8], "little")
    bits = int.from_bytes(fmt[14:16], "little")
    if tag == 0xFFFE and len(fmt) >= 26:  # WAVE_FORMAT_EXTENSIBLE: real tag in the subformat GUID
        tag = int.from_bytes(fmt[24:26], "little")
    if n_ch not in (1, 2):
        raise InvalidArgumentError(f"{path}: {n_ch} channels unsupported (mono or stereo only)")
    if tag == 1 and bits == 16:
        arr = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        arr = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise InvalidArgumentError(f"{path}: encoding tag={tag} bits={bits} unsupported (16-bit PCM or 32-bit float)")
    arr = arr[: (arr.size // n_ch) * n_ch].reshape(-1, n_ch)
    return [Waveform(arr[:, c].copy(), sr) for c in range(n_ch)], sr

