"""Deterministic synthetic two-talker corpus.

Speakers are parametric harmonic sources (fundamental plus three formant
resonances). Each mixture sums a target and an interferer utterance at a given
SIR, optionally reverberated, and is paired with a different, anechoic
utterance of the target speaker for adaptation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dsp import DEFAULT_SR, Waveform, apply_reverb, read_wav, write_wav
from .errors import InvalidArgumentError

MIX_SECONDS = 4.0
ADAPT_SECONDS = 2.0
HARD_F0_GAP = 30.0
SPLITS = ("train", "val", "test")
DEFAULT_COUNTS = {"train": 40, "val": 10, "test": 10}


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    f0: float
    formants: tuple       # three centre frequencies, Hz
    bandwidths: tuple     # three bandwidths, Hz
    jitter_seed: int

    def formant_gain(self, freqs: np.ndarray) -> np.ndarray:
        """Spectral envelope: flat floor plus one resonance bump per formant."""
        gain = np.ones_like(freqs)
        for fc, bw, weight in zip(self.formants, self.bandwidths, (2.0, 1.5, 1.0)):
            gain = gain + weight / (1.0 + ((freqs - fc) / (bw / 2.0)) ** 2)
        return gain


def make_speakers(n: int, seed: int) -> list:
    """Draw ``n`` speakers whose f0 differ by >= 10 Hz or F1 by >= 100 Hz pairwise."""
    rng = np.random.default_rng([seed, 0x5EED])
    speakers = []
    attempts = 0
    while len(speakers) < n:
        attempts += 1
        if attempts > 10000:
            raise InvalidArgumentError(f"cannot draw {n} distinct speakers")
        f0 = float(rng.uniform(90.0, 250.0))
        f1 = float(rng.uniform(300.0, 900.0))
        f2 = float(rng.uniform(900.0, 2200.0))
        f3 = float(rng.uniform(2200.0, 3400.0))
        if any(abs(f0 - s.f0) < 10.0 and abs(f1 - s.formants[0]) < 100.0 for s in speakers):
            continue
        bws = tuple(float(b) for b in rng.uniform([60, 90, 120], [120, 180, 250]))
        speakers.append(SyntheticSpeaker(len(speakers), f0, (f1, f2, f3), bws, int(rng.integers(2**31))))
    return speakers


def synth_utterance(speaker: SyntheticSpeaker, duration_s: float, seed: int,
                    sample_rate: int = DEFAULT_SR) -> Waveform:
    """Harmonic voice of ``speaker`` with pitch jitter and syllabic amplitude envelope, RMS 0.1."""
    if duration_s < 0.5:
        raise InvalidArgumentError(f"duration must be >= 0.5 s, got {duration_s}")
    rng = np.random.default_rng([speaker.jitter_seed, seed])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    # zero-mean pitch movement: slow drift plus smoothed jitter, about 1 % of f0
    drift = 0.008 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi))
    jitter = np.convolve(rng.normal(0.0, 1.0, n), np.ones(200) / 200, mode="same") * 0.02
    f_inst = speaker.f0 * (1.0 + drift + jitter)
    phase = 2 * np.pi * np.cumsum(f_inst) / sample_rate
    n_harm = int((sample_rate / 2 - 100) // speaker.f0)
    k = np.arange(1, n_harm + 1)
    amps = speaker.formant_gain(k * speaker.f0) / k ** 2
    phases0 = rng.uniform(0, 2 * np.pi, n_harm)
    x = np.zeros(n)
    for kk, a, p0 in zip(k, amps, phases0):
        x += a * np.sin(kk * phase + p0)
    # syllable-rate envelope: sum of raised-cosine bursts at 2-6 Hz
    env = np.zeros(n)
    pos = rng.uniform(0, 0.1)
    while pos < duration_s:
        rate = rng.uniform(2.0, 6.0)
        width = 1.0 / rate
        centre = pos + width / 2
        burst = np.clip(1 - ((t - centre) / (width / 2)) ** 2, 0, None)
        env += rng.uniform(0.5, 1.0) * burst
        pos += width
    env = 0.15 + env
    x *= env
    x *= 0.1 / np.sqrt(np.mean(x ** 2))
    return Waveform(x, sample_rate)


@dataclass(frozen=True)
class MixtureRecord:
    mixture: str
    target: str
    interferer: str
    adaptation: str
    speaker: int
    sir_db: float
    rt60: float
    interferer_speaker: int = -1
    condition: str = "easy"
    channels: int = 1
    target_source: str = ""       # dry utterances that went into the mixture
    interferer_source: str = ""

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


def make_mixture(target_utt: Waveform, interferer_utt: Waveform, sir_db: float, rt60: float,
                 channels: int = 1, seed: int = 0, identical_channels: bool = False) -> dict:
    """Mix two utterances; returns arrays ``mixture [C x L]``, ``target`` and ``interferer`` (channel 1 images).

    For two channels each source gets its own reverberation seed and a small
    inter-microphone delay per channel, unless ``identical_channels``.
    """
    if not -10.0 <= sir_db <= 10.0:
        raise InvalidArgumentError(f"SIR must lie in [-10, 10] dB, got {sir_db}")
    if channels not in (1, 2):
        raise InvalidArgumentError("channels must be 1 or 2")
    n = min(len(target_utt), len(interferer_utt))
    sr = target_utt.sample_rate
    tgt = Waveform(target_utt.samples[:n], sr)
    itf = Waveform(interferer_utt.samples[:n], sr)
    rng = np.random.default_rng([seed, 0xA11])
    delays = rng.integers(-3, 4, size=2)  # per-source inter-mic delay, samples
    imgs = []  # imgs[c] = (target image, interferer image)
    for c in range(channels):
        cs = 0 if identical_channels else c
        pair = []
        for s, src in enumerate((tgt, itf)):
            wet = apply_reverb(src, rt60, seed=int(seed) * 7919 + 2 * cs + s).samples
            if cs and delays[s]:
                wet = np.roll(wet, int(delays[s]))
            pair.append(wet)
        imgs.append(pair)
    gain = math.sqrt(np.mean(imgs[0][0] ** 2) / (np.mean(imgs[0][1] ** 2) * 10 ** (sir_db / 10.0)))
    mix = np.stack([t_img + gain * i_img for t_img, i_img in imgs])
    return {"mixture": mix, "target": imgs[0][0], "interferer": gain * imgs[0][1]}


def condition_of(a: SyntheticSpeaker, b: SyntheticSpeaker) -> str:
    return "hard" if abs(a.f0 - b.f0) < HARD_F0_GAP else "easy"


def gen_dataset(out_dir: Union[str, Path], num_speakers: int = 8, utts_per_speaker: int = 24,
                splits: Sequence[float] = (4 / 6, 1 / 6, 1 / 6), num_mixtures: int = 60,
                seed: int = 0, channels: int = 1, rt60_range: tuple = (0.2, 0.6),
                sir_range: tuple = (-5.0, 5.0)) -> dict:
    """Write the corpus under ``out_dir`` and return ``{split: [MixtureRecord]}``.

    Each speaker's utterance pool and the mixture count are divided between the
    splits in the given proportions, so test mixtures never reuse a training
    utterance. Manifests are ``<split>.tsv`` next to the audio.
    """
    if num_speakers < 4:
        raise InvalidArgumentError("need at least 4 speakers for disjoint target/interferer pairing")
    splits = tuple(float(s) for s in splits)
    if len(splits) != 3 or abs(sum(splits) - 1.0) > 1e-9 or min(splits) < 0:
        raise InvalidArgumentError(f"splits must be three non-negative fractions summing to 1, got {splits}")
    utt_counts = _apportion(utts_per_speaker, splits)
    if min(utt_counts) < 2:
        raise InvalidArgumentError("each split needs >= 2 utterances per speaker (mixture + adaptation)")
    mix_counts = _apportion(num_mixtures, splits)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    speakers = make_speakers(num_speakers, seed)
    (out / "speakers.json").write_text(json.dumps([asdict(s) for s in speakers], indent=1))
    rng = np.random.default_rng([seed, 0xDA7A])
    utt_cache: dict = {}

    def utterance(spk: int, idx: int, seconds: float) -> str:
        key = (spk, idx, seconds)
        if key not in utt_cache:
            rel = f"utts/s{spk:02d}_u{idx:03d}_{int(seconds * 1000)}ms.wav"
            (out / "utts").mkdir(exist_ok=True)
            write_wav(out / rel, synth_utterance(speakers[spk], seconds, seed=idx))
            utt_cache[key] = rel
        return utt_cache[key]

    manifests = {}
    first = 0
    for split, n_utt, n_mix in zip(SPLITS, utt_counts, mix_counts):
        pool = range(first, first + n_utt)
        first += n_utt
        (out / split).mkdir(exist_ok=True)
        records = []
        for i in range(n_mix):
            tgt_spk, itf_spk = (int(v) for v in rng.choice(num_speakers, size=2, replace=False))
            tgt_idx, adapt_idx = (int(v) for v in rng.choice(list(pool), size=2, replace=False))
            itf_idx = int(rng.choice(list(pool)))
            sir = float(np.round(rng.uniform(*sir_range), 3))
            rt60 = float(np.round(rng.uniform(*rt60_range), 3))
            mix_seed = int(rng.integers(2**31))
            tgt_rel = utterance(tgt_spk, tgt_idx, MIX_SECONDS)
            itf_rel = utterance(itf_spk, itf_idx, MIX_SECONDS)
            adapt_rel = utterance(tgt_spk, adapt_idx, ADAPT_SECONDS)
            parts = make_mixture(read_wav(out / tgt_rel)[0][0], read_wav(out / itf_rel)[0][0],
                                 sir, rt60, channels, mix_seed)
            stem = f"{split}/m{i:04d}"
            write_wav(out / f"{stem}_mix.wav", list(parts["mixture"]))
            write_wav(out / f"{stem}_target.wav", parts["target"])
            write_wav(out / f"{stem}_interferer.wav", parts["interferer"])
            records.append(MixtureRecord(
                mixture=f"{stem}_mix.wav", target=f"{stem}_target.wav", interferer=f"{stem}_interferer.wav",
                adaptation=adapt_rel, speaker=tgt_spk, sir_db=sir, rt60=rt60, interferer_speaker=itf_spk,
                condition=condition_of(speakers[tgt_spk], speakers[itf_spk]), channels=channels,
                target_source=tgt_rel, interferer_source=itf_rel,
            ))
        write_manifest(out / f"{split}.tsv", records)
        manifests[split] = records
    return manifests


def _apportion(total: int, fractions: Sequence[float]) -> list:
    """Split an integer total by fractions, largest remainders first."""
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def write_manifest(path: Union[str, Path], records: Sequence[MixtureRecord]) -> None:
    names = MixtureRecord.field_names()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("#" + "\t".join(names) + "\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in records:
            writer.writerow([getattr(r, n) for n in names])


def read_manifest(path: Union[str, Path]) -> list:
    names = MixtureRecord.field_names()
    types = {f.name: f.type for f in fields(MixtureRecord)}
    casts = {"int": int, "float": float, "str": str}
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            values = line.rstrip("\n").split("\t")
            if len(values) != len(names):
                raise InvalidArgumentError(f"{path}: expected {len(names)} fields, got {len(values)}")
            records.append(MixtureRecord(**{n: casts[types[n]](v) for n, v in zip(names, values)}))
    return records


@dataclass
class Example:
    """Audio of one manifest record, loaded into memory."""

    record: MixtureRecord
    mixture: list            # channel Waveforms
    target: np.ndarray
    adaptation: Waveform


def load_split(root: Union[str, Path], split: str, limit: Optional[int] = None) -> list:
    root = Path(root)
    records = read_manifest(root / f"{split}.tsv")[:limit]
    out = []
    for r in records:
        mix, _ = read_wav(root / r.mixture)
        tgt, _ = read_wav(root / r.target)
        adapt, _ = read_wav(root / r.adaptation)
        out.append(Example(r, mix, tgt[0].samples, adapt[0]))
    return out
