"""Time-domain target speaker extraction network.

Encoder -> temporal convolution stack with a speaker adaptation layer between
the first and second repeat -> sigmoid mask -> transposed-convolution decoder.
The speaker embedding comes from an auxiliary branch (shared encoder, its own
bottleneck and convolution block, time average).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .adaptation import AsaConfig, build_adapter
from .autodiff import ParamRegistry, Tensor
from .dsp import Waveform, ipd, stft_geometry
from .errors import InvalidArgumentError, InvalidShapeError, InvalidStateError

CHANNEL_MODES = ("single", "parallel-2ch", "ipd-2ch")
ADAPTATIONS = ("SA", "ASA", "none")
IPD_WINDOW_MS = 32.0
IPD_HOP_MS = 16.0


@dataclass(frozen=True)
class NetConfig:
    n_filters: int = 64        # encoder channels
    kernel: int = 20           # encoder window, samples
    stride: int = 10           # encoder hop, samples
    bottleneck: int = 32       # channels inside the convolution stack; also the embedding size
    hidden: int = 64           # channels inside each convolution block
    block_kernel: int = 3
    blocks: int = 4            # blocks per repeat, dilations 1, 2, 4, ...
    repeats: int = 2
    adaptation: str = "ASA"
    asa: AsaConfig = field(default_factory=AsaConfig)
    channels: str = "single"
    num_speakers: int = 0      # > 0 adds the speaker classification head
    sample_rate: int = 8000

    def __post_init__(self):
        for name in ("n_filters", "kernel", "stride", "bottleneck", "hidden", "block_kernel", "blocks", "repeats"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.block_kernel % 2 == 0:
            raise InvalidArgumentError("block_kernel must be odd")
        if self.repeats < 2:
            raise InvalidArgumentError("need at least two repeats to place the adaptation layer between them")
        if self.adaptation not in ADAPTATIONS:
            raise InvalidArgumentError(f"adaptation must be one of {ADAPTATIONS}")
        if self.channels not in CHANNEL_MODES:
            raise InvalidArgumentError(f"channels must be one of {CHANNEL_MODES}")
        if self.num_speakers < 0:
            raise InvalidArgumentError("num_speakers must be >= 0")
        if isinstance(self.asa, dict):
            object.__setattr__(self, "asa", AsaConfig(**self.asa))

    @property
    def n_inputs(self) -> int:
        return 1 if self.channels == "single" else 2

    def frames(self, length: int) -> int:
        return (length - self.kernel) // self.stride + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "asa" in d and isinstance(d["asa"], dict):
            d["asa"] = AsaConfig(**d["asa"])
        return cls(**d)


class ForwardResult(NamedTuple):
    estimate: Tensor                # [1 x L]
    embedding: Tensor               # [bottleneck x 1]
    mask: Tensor                    # [n_filters x T]
    encoding: Tensor                # [n_filters x T]
    weights: Optional[np.ndarray]   # [T_m] attention weights for ASA


def _paired_codec(n: int, k: int, stride: int, rng: np.random.Generator) -> tuple:
    """Encoder filters in +/- pairs and a decoder that inverts their rectified output.

    With ReLU(g.f) - ReLU(-g.f) = g.f the frame is recovered through the
    pseudo-inverse of the filter bank; the decoder is scaled so that overlap-add
    of a unit mask reproduces interior samples exactly.
    """
    half = n // 2
    g = rng.normal(0.0, 1.0 / np.sqrt(k), size=(half, k))
    enc = np.concatenate([g, -g, rng.normal(0.0, 1.0 / np.sqrt(k), size=(n - 2 * half, k))], axis=0)
    pinv = np.linalg.pinv(g)  # [k x half]
    overlap = stride / k
    dec = np.concatenate([pinv.T, -pinv.T, np.zeros((n - 2 * half, k))], axis=0) * overlap
    return enc[:, None, :], dec[:, None, :]


class Extractor:
    """Parameters plus forward computation for one :class:`NetConfig`."""

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        self.cfg = cfg
        self.params = ParamRegistry()
        self._adapter = build_adapter(cfg.adaptation, cfg.asa)
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.cfg
        p = self.params
        enc, dec = _paired_codec(c.n_filters, c.kernel, c.stride, rng)
        p.add("encoder.kernel", enc)
        self._add_norm("sep.norm", c.n_filters)
        self._add_conv1x1("sep.bottleneck", c.bottleneck, c.n_filters, rng)
        for r in range(c.repeats):
            for x in range(c.blocks):
                self._add_block(f"sep.r{r}.b{x}", c.bottleneck, rng)
        if c.channels == "ipd-2ch":
            n_freq = stft_geometry(c.sample_rate, IPD_WINDOW_MS, IPD_HOP_MS)[2] // 2 + 1
            self._add_conv1x1("ipd.proj", c.bottleneck, n_freq, rng)
            self._add_block("ipd.block", 2 * c.bottleneck, rng)
        p.add("sep.mask.prelu", np.array([0.25]))
        # small mask weights keep the untrained mask near 0.5, i.e. a pass-through
        p.add("sep.mask.weight", rng.normal(0.0, 1e-2 / np.sqrt(c.bottleneck), size=(c.n_filters, c.bottleneck)))
        p.add("sep.mask.bias", np.zeros((c.n_filters, 1)))
        p.add("decoder.kernel", dec)
        self._add_norm("aux.norm", c.n_filters)
        self._add_conv1x1("aux.bottleneck", c.bottleneck, c.n_filters, rng)
        self._add_block("aux.block", c.bottleneck, rng)
        if c.num_speakers:
            p.add("speaker_head.weight", rng.normal(0.0, 1.0 / np.sqrt(c.bottleneck), size=(c.num_speakers, c.bottleneck)))

    def _add_norm(self, name: str, ch: int) -> None:
        self.params.add(f"{name}.gain", np.ones(ch))
        self.params.add(f"{name}.bias", np.zeros(ch))

    def _add_conv1x1(self, name: str, c_out: int, c_in: int, rng) -> None:
        self.params.add(f"{name}.weight", rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(c_out, c_in)))
        self.params.add(f"{name}.bias", np.zeros((c_out, 1)))

    def _add_block(self, name: str, c_in: int, rng) -> None:
        c = self.cfg
        self._add_conv1x1(f"{name}.in", c.hidden, c_in, rng)
        self.params.add(f"{name}.prelu1", np.array([0.25]))
        self._add_norm(f"{name}.norm1", c.hidden)
        self.params.add(f"{name}.dconv.weight", rng.normal(0.0, 1.0 / np.sqrt(c.block_kernel), size=(c.hidden, c.block_kernel)))
        self.params.add(f"{name}.dconv.bias", np.zeros((c.hidden, 1)))
        self.params.add(f"{name}.prelu2", np.array([0.25]))
        self._add_norm(f"{name}.norm2", c.hidden)
        self._add_conv1x1(f"{name}.out", c.bottleneck, c.hidden, rng)

    def parameter_count(self) -> int:
        return self.params.parameter_count()

    # -- building blocks ----------------------------------------------------

    def _conv1x1(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        return ad.add(ad.matmul(p[f"{name}.weight"], x), p[f"{name}.bias"])

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ad.global_layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _block(self, name: str, x: Tensor, dilation: int, residual: Tensor) -> Tensor:
        p = self.params
        h = self._conv1x1(f"{name}.in", x)
        h = self._norm(f"{name}.norm1", ad.prelu(h, p[f"{name}.prelu1"]))
        h = ad.add(ad.depthwise_conv1d(h, p[f"{name}.dconv.weight"], dilation), p[f"{name}.dconv.bias"])
        h = self._norm(f"{name}.norm2", ad.prelu(h, p[f"{name}.prelu2"]))
        return ad.add(residual, self._conv1x1(f"{name}.out", h))

    def _repeat(self, r: int, x: Tensor) -> Tensor:
        for b in range(self.cfg.blocks):
            x = self._block(f"sep.r{r}.b{b}", x, 2 ** b, x)
        return x

    # -- public operations --------------------------------------------------

    def _as_channels(self, mix) -> list:
        chans = [mix] if isinstance(mix, (Waveform, np.ndarray)) and np.ndim(getattr(mix, "samples", mix)) == 1 else list(mix)
        chans = [c if isinstance(c, Waveform) else Waveform(c, self.cfg.sample_rate) for c in chans]
        if len(chans) != self.cfg.n_inputs:
            raise InvalidArgumentError(f"{self.cfg.channels} expects {self.cfg.n_inputs} channel(s), got {len(chans)}")
        if len({len(c) for c in chans}) != 1:
            raise InvalidArgumentError("channels differ in length")
        if len(chans[0]) < self.cfg.kernel:
            raise InvalidArgumentError(f"input of {len(chans[0])} samples shorter than encoder window {self.cfg.kernel}")
        return chans

    def encode(self, mix, rectify: bool = True) -> Tensor:
        """Encoder output ``[n_filters x T]``; parallel-2ch sums per-channel encodings."""
        chans = self._as_channels(mix)
        kern = self.params["encoder.kernel"]
        used = chans if self.cfg.channels == "parallel-2ch" else chans[:1]
        pre = None
        for ch in used:
            z = ad.conv1d(Tensor(ch.samples[None, :]), kern, self.cfg.stride)
            pre = z if pre is None else ad.add(pre, z)
        return ad.relu(pre) if rectify else pre

    def aux_embed(self, utt) -> Tensor:
        """Speaker embedding ``[bottleneck x 1]`` of an adaptation utterance."""
        utt = utt if isinstance(utt, Waveform) else Waveform(utt, self.cfg.sample_rate)
        if len(utt) < self.cfg.kernel:
            raise InvalidArgumentError(f"adaptation utterance of {len(utt)} samples shorter than encoder window")
        enc = ad.relu(ad.conv1d(Tensor(utt.samples[None, :]), self.params["encoder.kernel"], self.cfg.stride))
        h = self._conv1x1("aux.bottleneck", self._norm("aux.norm", enc))
        h = self._block("aux.block", h, 1, h)
        return ad.mean_time(h)

    def classify_speaker(self, e: Tensor) -> Tensor:
        """Speaker logits ``W e`` as ``[num_speakers x 1]``; softmax belongs to the loss."""
        if "speaker_head.weight" not in self.params:
            raise InvalidStateError("model has no speaker classification head (num_speakers=0)")
        return ad.matmul(self.params["speaker_head.weight"], e)

    def _ipd_features(self, chans: list, n_frames: int) -> Tensor:
        feats = ipd(chans[0], chans[1], IPD_WINDOW_MS, IPD_HOP_MS)
        win, hop, _ = stft_geometry(self.cfg.sample_rate, IPD_WINDOW_MS, IPD_HOP_MS)
        # nearest IPD frame for every encoder frame, matched on window centres
        centres = np.arange(n_frames) * self.cfg.stride + self.cfg.kernel / 2.0
        idx = np.clip(np.rint((centres - win / 2.0) / hop), 0, feats.shape[1] - 1).astype(np.int64)
        return Tensor(feats[:, idx])

    def forward(self, mix, adaptation_utt=None, embedding: Optional[Tensor] = None) -> ForwardResult:
        """Full extraction graph.

        ``embedding`` overrides the auxiliary branch (used for diagnostics).
        """
        c = self.cfg
        chans = self._as_channels(mix)
        length = len(chans[0])
        if embedding is None:
            if adaptation_utt is None:
                raise InvalidArgumentError("need an adaptation utterance or an explicit embedding")
            embedding = self.aux_embed(adaptation_utt)
        if embedding.shape != (c.bottleneck, 1):
            raise InvalidShapeError(f"embedding must be [{c.bottleneck} x 1], got {embedding.shape}")
        enc = self.encode(chans)
        h = self._conv1x1("sep.bottleneck", self._norm("sep.norm", enc))
        h = self._repeat(0, h)
        h, weights = self._adapter(h, embedding)
        if c.channels == "ipd-2ch":
            if length < stft_geometry(c.sample_rate, IPD_WINDOW_MS, IPD_HOP_MS)[0]:
                raise InvalidArgumentError("input shorter than one IPD window")
            proj = self._conv1x1("ipd.proj", self._ipd_features(chans, enc.shape[1]))
            h = self._block("ipd.block", ad.concat_rows([h, proj]), 1, h)
        for r in range(1, c.repeats):
            h = self._repeat(r, h)
        logits = self._conv1x1("sep.mask", ad.prelu(h, self.params["sep.mask.prelu"]))
        mask = ad.sigmoid(logits)
        wave = ad.conv_transpose1d(ad.mul(enc, mask), self.params["decoder.kernel"], c.stride)
        est = ad.fit_length(wave, length)
        w = None if weights is None else weights.data.reshape(-1).copy()
        return ForwardResult(est, embedding, mask, enc, w)

    def extract(self, mix, adaptation_utt) -> tuple:
        """Inference helper: ``(Waveform, attention weights or None)``."""
        res = self.forward(mix, adaptation_utt)
        return Waveform(res.estimate.data.reshape(-1).copy(), self.cfg.sample_rate), res.weights

    def copy(self) -> "Extractor":
        twin = Extractor.__new__(Extractor)
        twin.cfg = self.cfg
        twin._adapter = build_adapter(self.cfg.adaptation, self.cfg.asa)
        twin.params = ParamRegistry()
        for name, t in self.params:
            twin.params.add(name, t.data.copy())
        return twin

    def with_config(self, **changes) -> "Extractor":
        """Same parameters under a config that differs only in parameter-free fields."""
        twin = self.copy()
        twin.cfg = replace(self.cfg, **changes)
        twin._adapter = build_adapter(twin.cfg.adaptation, twin.cfg.asa)
        if twin.params.parameter_count() != Extractor(twin.cfg).parameter_count():
            raise InvalidArgumentError("config change alters the parameter layout")
        return twin


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic, u32 version, u64 header length, UTF-8 JSON header
# (config and per-parameter name/shape/offset), then little-endian float64 data.

CKPT_MAGIC = b"ASACKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path: Union[str, Path], model: Extractor, extra: Optional[dict] = None) -> None:
    entries, offset = [], 0
    for name, t in model.params:
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size
    header = {"version": CKPT_VERSION, "config": model.cfg.to_dict(), "params": entries, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in model.params)
    blob = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + payload
    Path(path).write_bytes(blob)


def read_checkpoint(path: Union[str, Path]) -> tuple:
    """Return ``(NetConfig, {name: array}, extra)`` after validating the container."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise InvalidStateError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise InvalidStateError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    data = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    cfg = NetConfig.from_dict(header["config"])
    state = {}
    for ent in header["params"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        if ent["offset"] + n > data.size:
            raise InvalidStateError(f"{path}: truncated data for {ent['name']}")
        state[ent["name"]] = data[ent["offset"]:ent["offset"] + n].reshape(ent["shape"]).astype(np.float64)
    return cfg, state, header.get("extra", {})


def load_checkpoint(path: Union[str, Path], expect: Optional[NetConfig] = None) -> Extractor:
    """Rebuild the model; shapes must match what the stored config implies."""
    cfg, state, _ = read_checkpoint(path)
    if expect is not None and expect != cfg:
        raise InvalidStateError("checkpoint config differs from the expected config")
    model = Extractor(cfg)
    try:
        model.params.load_state(state)
    except InvalidShapeError as err:
        raise InvalidStateError(f"{path}: {err}") from err
    return model
