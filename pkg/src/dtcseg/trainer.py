"""Semi-supervised training loop with SGD + momentum and step-decay learning rate.

Each iteration draws a labeled and an unlabeled sub-batch, runs both heads,
combines the mode's loss terms and takes one SGD step on every parameter.
Iterations run ``t = 0 .. t_max`` inclusive, so the warm-up weight reaches 1
on the final update.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .losses import MODES, LossBreakdown, total_loss
from .lsf import DEFAULT_K
from .nn import DualTaskNet, NetConfig

log = logging.getLogger(__name__)

STATE_MAGIC = b"DTCS"
STATE_VERSION = 1
LOG_COLUMNS = ("t", "lr", "lambda_d", "loss_seg", "loss_lsf", "loss_dtc", "loss_total")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "seg+lsf+dtc"
    t_max: int = 2000
    lr0: float = 0.01
    lr_decay: float = 0.1
    # None -> round(t_max * 2500 / 6000)
    lr_milestone: int | None = None
    momentum: float = 0.9
    k: float = DEFAULT_K
    labeled_batch: int = 2
    unlabeled_batch: int = 2
    seed: int = 0
    augment: bool = True
    # False keeps the unlabeled pool out of training even in the full mode (labeled-only ablation)
    use_unlabeled: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.t_max <= 0 or self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("need t_max > 0, lr0 > 0 and 0 < lr_decay <= 1")
        if self.k <= 0 or self.momentum < 0:
            raise ValueError("need k > 0 and momentum >= 0")
        if self.labeled_batch < 1 or self.unlabeled_batch < 0:
            raise ValueError("need labeled_batch >= 1 and unlabeled_batch >= 0")

    @property
    def milestone(self) -> int:
        if self.lr_milestone is not None:
            return max(1, self.lr_milestone)
        return max(1, int(round(self.t_max * 2500 / 6000)))

    @property
    def uses_dtc(self) -> bool:
        return self.mode == "seg+lsf+dtc"


def lr_schedule(t: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay ** (t // config.milestone)


def sgd_step(params, grads, lr: float, momentum: float, buffers, iteration: int = -1) -> None:
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``. ``params``/``buffers`` are parallel lists."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at iteration {iteration}")
    for p, g, v in zip(params, grads, buffers):
        v *= momentum
        v += g
        p.data -= lr * v


@dataclass
class LogRow:
    t: int
    lr: float
    lambda_d: float
    loss_seg: float
    loss_lsf: float
    loss_dtc: float
    loss_total: float

    @classmethod
    def of(cls, t: int, lr: float, b: LossBreakdown) -> LogRow:
        return cls(t, lr, b.lambda_d, b.seg, b.lsf, b.dtc, b.total)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit: next iteration, weights, momentum, rng."""

    t: int
    net: DualTaskNet
    buffers: list[np.ndarray]
    rng: np.random.Generator
    history: list[LogRow] = field(default_factory=list)

    @classmethod
    def fresh(cls, net_config: NetConfig, config: TrainConfig) -> TrainState:
        net = DualTaskNet.init(net_config)
        buffers = [np.zeros_like(p.data) for p in net.params.values()]
        return cls(0, net, buffers, np.random.default_rng(config.seed))

    def state_bytes(self) -> bytes:
        rng_state = json.dumps(self.rng.bit_generator.state, sort_keys=True).encode()
        parts = [STATE_MAGIC, struct.pack("<III", STATE_VERSION, self.t, len(rng_state)), rng_state]
        parts.append(struct.pack("<I", len(self.buffers)))
        parts += [np.ascontiguousarray(b, dtype="<f8").tobytes() for b in self.buffers]
        return b"".join(parts)

    def save(self, checkpoint_path, state_path) -> None:
        self.net.save(checkpoint_path)
        Path(state_path).write_bytes(self.state_bytes())

    @classmethod
    def load(cls, checkpoint_path, state_path, history: list[LogRow] | None = None) -> TrainState:
        net = DualTaskNet.load(checkpoint_path)
        buf = Path(state_path).read_bytes()
        if buf[:4] != STATE_MAGIC:
            raise TrainingError("bad state-file magic at offset 0")
        version, t, n = struct.unpack_from("<III", buf, 4)
        if version != STATE_VERSION:
            raise TrainingError(f"unsupported state-file version {version}")
        off = 16
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(buf[off : off + n])
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        if count != len(net.params):
            raise TrainingError(f"state has {count} momentum buffers, checkpoint has {len(net.params)} tensors")
        buffers = []
        for p in net.params.values():
            buffers.append(np.frombuffer(buf, dtype="<f8", count=p.size, offset=off).reshape(p.shape).copy())
            off += 8 * p.size
        if off != len(buf):
            raise TrainingError(f"state file size mismatch at offset {off}")
        return cls(t, net, buffers, rng, list(history or []))


def _check_compatible(dataset: D.Dataset, net_config: NetConfig, config: TrainConfig) -> None:
    if not dataset.labeled_ids:
        raise TrainingError("dataset has no labeled samples")
    unit = 2**net_config.depth
    size = dataset[dataset.labeled_ids[0]].image.shape
    if size[0] % unit or size[1] % unit:
        raise TrainingError(f"image size {size} not divisible by 2^depth = {unit}")
    if config.mode != "seg":
        missing = [sid for sid in dataset.labeled_ids if dataset[sid].lsf_target is None]
        if missing:
            raise TrainingError(f"mode {config.mode!r} needs level-set targets; missing for ids {missing[:5]}")


def train(
    dataset: D.Dataset,
    net_config: NetConfig,
    config: TrainConfig,
    state: TrainState | None = None,
    stop_after: int | None = None,
    out_dir=None,
) -> tuple[DualTaskNet, list[LogRow], TrainState]:
    """Run (or continue) training.

    ``stop_after`` ends the run early once iteration ``stop_after - 1`` is done;
    the returned state resumes from there. With ``out_dir`` the log CSV and the
    final checkpoint/state are written there (plus periodic ones if
    ``checkpoint_every`` is set).
    """
    _check_compatible(dataset, net_config, config)
    if state is None:
        state = TrainState.fresh(net_config, config)
    net = state.net
    params = list(net.params.values())
    supervised = not (config.uses_dtc and config.use_unlabeled)
    end = config.t_max + 1 if stop_after is None else min(stop_after, config.t_max + 1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    while state.t < end:
        t = state.t
        lr = lr_schedule(t, config)
        lab, unl = D.sample_batch(
            dataset, state.rng, config.labeled_batch, config.unlabeled_batch, supervised=supervised
        )
        batch = [D.augment(s, state.rng, config.augment) for s in lab + unl]
        lab_aug = batch[: len(lab)]
        images = D.stack_images(batch)
        masks = D.stack_masks(lab_aug)
        targets = D.stack_lsf(lab_aug) if config.mode != "seg" else None

        seg, lsf = net(images)
        loss, breakdown = total_loss(seg, lsf, masks, targets, len(lab), t, config.t_max, config.k, config.mode)
        net.zero_grad()
        try:
            grads = T.backward(loss, params)
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite loss at iteration {t}") from exc
        sgd_step(params, grads, lr, config.momentum, state.buffers, iteration=t)
        state.history.append(LogRow.of(t, lr, breakdown))
        state.t = t + 1
        if t % 100 == 0:
            log.debug("t=%d lr=%.4g total=%.5f", t, lr, breakdown.total)
        if out is not None and config.checkpoint_every and state.t % config.checkpoint_every == 0:
            state.save(out / f"checkpoint_{state.t:06d}.dtcn", out / f"state_{state.t:06d}.dtcs")

    if out is not None:
        write_log(state.history, out / "train_log.csv")
        state.save(out / "checkpoint.dtcn", out / "state.dtcs")
    return net, state.history, state


def write_log(rows: list[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            d = asdict(r)
            writer.writerow([d["t"]] + [repr(float(d[c])) for c in LOG_COLUMNS[1:]])


def read_log(path) -> list[LogRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [LogRow(int(r["t"]), *(float(r[c]) for c in LOG_COLUMNS[1:])) for r in reader]
