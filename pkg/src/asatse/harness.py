"""Training loop, evaluation reports and the attention cost benchmark."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .adaptation import asa_attention, asa_macs, attention_entropy, matrix_attention, matrix_attention_macs
from .autodiff import Tensor
from .data import Example, load_split
from .dsp import sisdr
from .errors import InvalidArgumentError, InvalidStateError, NumericError
from .losses import mtl_loss
from .network import Extractor, NetConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 30
    clip_norm: float = 5.0
    patience: int = 5
    seed: int = 0
    alpha: float = 0.0                       # weight of the speaker cross-entropy term
    segment_seconds: Optional[float] = 1.0   # random training crop; None trains on whole mixtures

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_epochs", "clip_norm", "patience"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be non-negative")
        if self.segment_seconds is not None and self.segment_seconds <= 0:
            raise InvalidArgumentError("segment_seconds must be positive")


class Adam:
    """Adam over a :class:`ParamRegistry`, in registry order."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params}
        self.v = {n: np.zeros_like(t.data) for n, t in params}

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, t in self.params:
            if t.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * t.grad
            v *= self.b2
            v += (1.0 - self.b2) * t.grad ** 2
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale all gradients jointly so their L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(t.grad, t.grad)) for _, t in params if t.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for _, t in params:
            if t.grad is not None:
                t.grad *= factor
    return total


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    record: str
    condition: str
    sisdr_est: float
    sisdr_mix: float
    improvement: float
    entropy: Optional[float] = None


@dataclass
class EvalReport:
    rows: list
    aggregates: dict = field(default_factory=dict)   # tag -> {sisdr_est, sisdr_mix, improvement, count}
    entropy: Optional[dict] = None                   # mean/min/max attention entropy, ASA only

    @classmethod
    def from_rows(cls, rows: Sequence[EvalRow]) -> "EvalReport":
        rows = list(rows)
        aggs = {}
        for tag in ("hard", "easy", "all"):
            members = [r for r in rows if tag == "all" or r.condition == tag]
            if not members:
                continue
            aggs[tag] = {
                "sisdr_est": float(np.mean([r.sisdr_est for r in members])),
                "sisdr_mix": float(np.mean([r.sisdr_mix for r in members])),
                "improvement": float(np.mean([r.improvement for r in members])),
                "count": len(members),
            }
        ent = [r.entropy for r in rows if r.entropy is not None]
        entropy = {"mean": float(np.mean(ent)), "min": float(np.min(ent)), "max": float(np.max(ent))} if ent else None
        return cls(rows, aggs, entropy)

    @property
    def mean_improvement(self) -> float:
        return self.aggregates["all"]["improvement"]

    @property
    def mean_sisdr(self) -> float:
        return self.aggregates["all"]["sisdr_est"]

    def table(self) -> str:
        lines = [f"{'condition':<10}{'count':>6}{'SiSDR est':>12}{'SiSDR mix':>12}{'improvement':>13}"]
        for tag, a in self.aggregates.items():
            lines.append(f"{tag:<10}{a['count']:>6}{a['sisdr_est']:>12.3f}{a['sisdr_mix']:>12.3f}{a['improvement']:>13.3f}")
        if self.entropy:
            lines.append(f"attention entropy (nats): mean {self.entropy['mean']:.4f} "
                         f"min {self.entropy['min']:.4f} max {self.entropy['max']:.4f}")
        return "\n".join(lines)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("record,condition,sisdr_est,sisdr_mix,improvement,entropy\n")
            for r in self.rows:
                ent = "" if r.entropy is None else repr(r.entropy)
                fh.write(f"{r.record},{r.condition},{r.sisdr_est!r},{r.sisdr_mix!r},{r.improvement!r},{ent}\n")


Estimator = Callable[[list, object], tuple]


def evaluate(model: Union[Extractor, Estimator], examples: Sequence[Example]) -> EvalReport:
    """SiSDR of each estimate and of the raw first mixture channel against the target."""
    run = model.extract if isinstance(model, Extractor) else model
    rows = []
    for ex in examples:
        est, weights = run(ex.mixture, ex.adaptation)
        est = est.samples if hasattr(est, "samples") else np.asarray(est)
        s_est = sisdr(est, ex.target)
        s_mix = sisdr(ex.mixture[0].samples, ex.target)
        ent = attention_entropy(weights) if weights is not None else None
        rows.append(EvalRow(ex.record.mixture, ex.record.condition, s_est, s_mix, s_est - s_mix, ent))
    return EvalReport.from_rows(rows)


def evaluate_checkpoint(path: Union[str, Path], data_root: Union[str, Path], split: str = "test",
                        expect: Optional[NetConfig] = None) -> EvalReport:
    model = load_checkpoint(path, expect)
    examples = load_split(data_root, split)
    if examples and len(examples[0].mixture) != model.cfg.n_inputs:
        raise InvalidStateError(
            f"data has {len(examples[0].mixture)} channel(s), model expects {model.cfg.n_inputs}")
    return evaluate(model, examples)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Extractor
    best_epoch: int
    best_val: float
    history: list            # (epoch, train_loss, val_improvement, seconds)
    checkpoint: Optional[Path] = None


class TrainingDiverged(NumericError):
    pass


def _crop(ex: Example, seg: Optional[int], rng: np.random.Generator) -> tuple:
    length = len(ex.target)
    if seg is None or seg >= length:
        return [c.samples for c in ex.mixture], ex.target
    start = int(rng.integers(0, length - seg + 1))
    return [c.samples[start:start + seg] for c in ex.mixture], ex.target[start:start + seg]


def train(net_cfg: NetConfig, train_cfg: TrainConfig, train_set: Sequence[Example],
          val_set: Sequence[Example], out_dir: Optional[Union[str, Path]] = None,
          init_seed: Optional[int] = None) -> TrainResult:
    """Minimize negative SiSDR (plus ``alpha`` x speaker CE) with Adam.

    Keeps the parameters of the epoch with the best validation SiSDR
    improvement and stops after ``patience`` epochs without progress. When
    ``out_dir`` is given, writes ``best.ckpt`` and ``train_log.tsv`` there.
    """
    if train_cfg.alpha > 0 and net_cfg.num_speakers == 0:
        raise InvalidArgumentError("multi-task loss needs num_speakers > 0")
    if not train_set:
        raise InvalidArgumentError("empty training set")
    model = Extractor(net_cfg, seed=train_cfg.seed if init_seed is None else init_seed)
    params = model.params
    opt = Adam(params, train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps)
    rng = np.random.default_rng([train_cfg.seed, 0x7A1])
    seg = None
    if train_cfg.segment_seconds is not None:
        seg = int(round(train_cfg.segment_seconds * net_cfg.sample_rate))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.tsv", "w", encoding="utf-8")
        log_fh.write("#epoch\ttrain_loss\tval_sisdr_impr\tseconds\n")
    best_val, best_epoch, best_state = -math.inf, 0, params.state()
    history = []
    try:
        for epoch in range(1, train_cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), train_cfg.batch_size):
                batch = [train_set[i] for i in order[start:start + train_cfg.batch_size]]
                params.zero_grad()
                batch_loss = 0.0
                crops = []
                for ex in batch:
                    mix, tgt = _crop(ex, seg, rng)
                    crops.append((mix, tgt))
                    res = model.forward(mix, ex.adaptation)
                    logits = model.classify_speaker(res.embedding) if train_cfg.alpha > 0 else None
                    total, report = mtl_loss(res.estimate, tgt, logits, ex.record.speaker, train_cfg.alpha)
                    if not math.isfinite(report.total):
                        _dump_batch(out, crops, epoch, start)
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start // train_cfg.batch_size}")
                    ad.backward(ad.scale(total, 1.0 / len(batch)))
                    batch_loss += report.total / len(batch)
                clip_grad_norm(params, train_cfg.clip_norm)
                opt.step()
                losses.append(batch_loss)
            params.zero_grad()
            val = evaluate(model, val_set).mean_improvement if val_set else -float(np.mean(losses))
            seconds = time.perf_counter() - t0
            history.append((epoch, float(np.mean(losses)), val, seconds))
            log.info("epoch %d loss %.4f val %.4f (%.1fs)", epoch, history[-1][1], val, seconds)
            if out is not None:
                log_fh.write(f"{epoch}\t{history[-1][1]:.6f}\t{val:.6f}\t{seconds:.2f}\n")
                log_fh.flush()
            if val > best_val:
                best_val, best_epoch, best_state = val, epoch, params.state()
            elif epoch - best_epoch >= train_cfg.patience:
                break
    finally:
        if out is not None:
            log_fh.close()
    params.load_state(best_state)
    ckpt = None
    if out is not None:
        ckpt = out / "best.ckpt"
        save_checkpoint(ckpt, model, extra={"best_epoch": best_epoch, "best_val": best_val})
    return TrainResult(model, best_epoch, best_val, history, ckpt)


def _dump_batch(out: Optional[Path], crops: list, epoch: int, start: int) -> None:
    if out is None:
        return
    arrays = {}
    for i, (mix, tgt) in enumerate(crops):
        arrays[f"mix{i}"] = np.stack(mix)
        arrays[f"target{i}"] = tgt
    np.savez(out / f"diverged_e{epoch}_b{start}.npz", **arrays)


# ---------------------------------------------------------------------------
# attention cost benchmark


@dataclass
class BenchReport:
    n: int
    t: int
    pool: int
    pooled_frames: int
    asa_macs: int             # similarity + bias products
    score_macs: int           # the [T_m x T_m] score product of two-matrix attention
    matrix_macs: int          # score plus value aggregation
    asa_counted: int
    matrix_counted: int
    asa_seconds: float
    matrix_seconds: float
    asa_floats: int
    matrix_floats: int

    @property
    def mac_ratio(self) -> float:
        """Score-matrix multiply-adds over the whole vector-matrix attention."""
        return self.score_macs / self.asa_macs

    @property
    def full_mac_ratio(self) -> float:
        return self.matrix_macs / self.asa_macs

    @property
    def time_ratio(self) -> float:
        return self.matrix_seconds / self.asa_seconds

    def table(self) -> str:
        rows = [
            ("vector-matrix", self.asa_macs, self.asa_counted, self.asa_seconds, self.asa_floats),
            ("matrix-matrix", self.matrix_macs, self.matrix_counted, self.matrix_seconds, self.matrix_floats),
        ]
        lines = [f"N={self.n} T={self.t} M={self.pool} T_m={self.pooled_frames}",
                 f"{'method':<16}{'mult-adds':>14}{'counted':>14}{'seconds':>14}{'transient floats':>18}"]
        for name, macs, counted, sec, floats in rows:
            lines.append(f"{name:<16}{macs:>14}{counted:>14}{sec:>14.3e}{floats:>18}")
        lines.append(f"mult-add ratio (score matrix): {self.mac_ratio:.2f}x  ({self.score_macs} / {self.asa_macs})")
        lines.append(f"mult-add ratio (with value aggregation): {self.full_mac_ratio:.2f}x")
        lines.append(f"wall-time ratio: {self.time_ratio:.2f}x")
        lines.append(f"transient memory ratio: {self.matrix_floats / self.asa_floats:.2f}x")
        return "\n".join(lines)


def bench_attention(n: int = 64, t: int = 3199, m: int = 20, reps: int = 200, seed: int = 0) -> BenchReport:
    """Time and count vector-matrix attention against attention between two matrices.

    Both act on pooled ``[N x T_m]`` matrices and produce an ``[N x T_m]``
    result. The two methods are timed alternately and the fastest repetition
    of each is kept, so background load affects both alike.
    """
    if min(n, t, m, reps) < 1:
        raise InvalidArgumentError("sizes must be positive")
    rng = np.random.default_rng(seed)
    tm = -(-t // m)
    u = Tensor(rng.normal(size=(n, tm)))
    q = Tensor(rng.normal(size=(n, tm)))
    e = Tensor(rng.normal(size=(n, 1)) / math.sqrt(n))

    with ad.count_ops() as c_asa:
        asa_attention(u, e)
    with ad.count_ops() as c_mat:
        matrix_attention(u, q)

    asa_fn = lambda: asa_attention(u, e)  # noqa: E731
    mat_fn = lambda: matrix_attention(u, q)  # noqa: E731
    asa_fn(), mat_fn()
    asa_best = mat_best = math.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        asa_fn()
        t1 = time.perf_counter()
        mat_fn()
        t2 = time.perf_counter()
        asa_best = min(asa_best, t1 - t0)
        mat_best = min(mat_best, t2 - t1)
    return BenchReport(
        n=n, t=t, pool=m, pooled_frames=tm,
        asa_macs=asa_macs(n, t, m), score_macs=matrix_attention_macs(n, t, m),
        matrix_macs=matrix_attention_macs(n, t, m, with_aggregation=True),
        asa_counted=sum(c_asa.values()), matrix_counted=sum(c_mat.values()),
        asa_seconds=asa_best, matrix_seconds=mat_best,
        asa_floats=2 * tm + n * tm, matrix_floats=2 * tm * tm + n * tm,
    )
