"""Dataset assembly, seeded batching and the training loop."""
from __future__ import annotations

import csv
import ctypes
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import EmptyDataset, NumericalFault, OutOfBounds
from .nn.adam import AdamState, adam_step
from .nn.model import AutoencoderModel, mae_loss, model_backward, model_forward
from .rng import Pcg32, derive_seed
from .spectra import SPMap, crop_fov, normalize_batch

log = logging.getLogger(__name__)

# samples per gradient work unit; fixed so results do not depend on the thread count
CHUNK = 64

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def keep_freed_memory() -> bool:
    """Ask glibc to recycle freed buffers instead of returning them to the OS.

    Every layer allocates multi-megabyte temporaries; without this each one
    is a fresh mmap and the page faults cost more than the arithmetic.
    Returns False where the call is unavailable (non-glibc platforms).
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        return bool(libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30) and libc.mallopt(_M_MMAP_THRESHOLD, 32 << 20))
    except (OSError, AttributeError):
        return False



@dataclass
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 1000
    lr: float = 1e-3
    lr_plateau_patience: int = 50
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    early_stop_patience: int = 100
    min_delta: float = 0.0
    seed: int = 0
    threads: int = 1
    normalization: str = "per-spectrum"
    architecture: str | None = None  # path to a JSON architecture; None = default

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class StopReason(str, Enum):
    MAX_EPOCHS = "MaxEpochs"
    EARLY_STOPPED = "EarlyStopped"


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    stop_reason: StopReason | None = None
    best_epoch: int = 0

    def __len__(self):
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for k, row in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
                w.writerow([k, *(repr(float(q)) for q in row)])

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "lr": self.lr,
                "stop_reason": self.stop_reason.value if self.stop_reason else None,
                "best_epoch": self.best_epoch}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        reason = d.get("stop_reason")
        return cls([float(q) for q in d["train_loss"]], [float(q) for q in d["val_loss"]],
                   [float(q) for q in d["lr"]], StopReason(reason) if reason else None,
                   int(d.get("best_epoch", 0)))


@dataclass
class Dataset:
    x: np.ndarray            # (N, 2, n) normalized spectra
    norm: np.ndarray         # (N, 3): i_min, i_max, v_mean
    source: np.ndarray       # (N, 3): map index, x, y
    skipped: int = 0

    def __len__(self):
        return self.x.shape[0]


def build_dataset(maps: list[SPMap], crops=None, mode: str = "per-spectrum") -> Dataset:
    """Normalize every pixel of every (cropped) map into one sample array.

    ``crops`` is ``None`` or a per-map list of ``(x0, y0, w, h)`` / ``None``.
    Pixels with constant Stokes I are skipped and counted.
    """
    if crops is None:
        crops = [None] * len(maps)
    if len(crops) != len(maps):
        raise ValueError("crops must align with maps")
    xs, norms, srcs = [], [], []
    skipped = 0
    for k, (m, rect) in enumerate(zip(maps, crops)):
        x0 = y0 = 0
        if rect is not None:
            x0, y0 = rect[0], rect[1]
            m = crop_fov(m, *rect)
        xn, params, valid = normalize_batch(m.stacked(), mode)
        skipped += int((~valid).sum())
        yy, xx = np.divmod(np.arange(m.n_pixels), m.width)
        xs.append(xn[valid])
        norms.append(params[valid])
        srcs.append(np.stack([np.full(valid.sum(), k), xx[valid] + x0, yy[valid] + y0], axis=1))
    if skipped:
        log.warning("skipped %d degenerate spectra (constant Stokes I)", skipped)
    if not xs or sum(len(a) for a in xs) == 0:
        raise EmptyDataset("no usable spectra")
    return Dataset(np.concatenate(xs), np.concatenate(norms), np.concatenate(srcs), skipped)


def make_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded Fisher-Yates permutation of ``0..n-1`` split into batches."""
    perm = Pcg32(derive_seed(seed, epoch), seq=0xBA7C).permutation(n)
    return [perm[k:k + batch_size] for k in range(0, n, batch_size)]


def tree_sum(items: list):
    """Pairwise sum in a fixed order, independent of how items were produced."""
    items = list(items)
    if not items:
        raise ValueError("nothing to sum")
    while len(items) > 1:
        nxt = [items[k] + items[k + 1] for k in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def _chunk_grad(model: AutoencoderModel, xb: np.ndarray, total: int):
    recon, _, cache = model_forward(model, xb)
    loss, g, _ = mae_loss(xb, recon)
    scale = xb.shape[0] / total
    grads = model_backward(model, cache, g * scale)
    flat = []
    for gw, gb in grads:
        flat.extend([gw, gb])
    return loss * scale, flat


def batch_gradient(model: AutoencoderModel, xb: np.ndarray, pool: ThreadPoolExecutor | None = None):
    """Loss and flat gradient list for one batch, reduced over fixed-size chunks."""
    chunks = [xb[k:k + CHUNK] for k in range(0, xb.shape[0], CHUNK)]
    n = xb.shape[0]
    if pool is None or len(chunks) == 1:
        results = [_chunk_grad(model, c, n) for c in chunks]
    else:
        results = list(pool.map(lambda c: _chunk_grad(model, c, n), chunks))
    loss = tree_sum([r[0] for r in results])
    grads = [tree_sum([r[1][k] for r in results]) for k in range(len(results[0][1]))]
    return loss, grads


def evaluate_loss(model: AutoencoderModel, x: np.ndarray, pool: ThreadPoolExecutor | None = None) -> float:
    """Mean Eq.-style MAE_I + MAE_V over a whole sample array."""
    n = x.shape[0]

    def part(c):
        recon, _, _ = model_forward(model, c, keep_cache=False)
        return mae_loss(c, recon)[0] * (c.shape[0] / n)

    chunks = [x[k:k + CHUNK] for k in range(0, n, CHUNK)]
    parts = list(pool.map(part, chunks)) if pool is not None and len(chunks) > 1 else [part(c) for c in chunks]
    return float(tree_sum(parts))


class PlateauTracker:
    """Validation-driven LR plateau and early-stopping counters.

    An epoch improves when ``val < best - min_delta``. After
    ``plateau_patience`` consecutive non-improving epochs the learning rate is
    multiplied by ``factor`` (floored at ``min_lr``, never raised) and that counter resets;
    after ``early_stop_patience`` consecutive non-improving epochs training
    stops.
    """

    def __init__(self, lr, plateau_patience=50, factor=0.5, min_lr=1e-6,
                 early_stop_patience=100, min_delta=0.0):
        self.lr = lr
        self.plateau_patience = plateau_patience
        self.factor = factor
        self.min_lr = min_lr
        self.early_stop_patience = early_stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self.plateau_wait = 0
        self.stop_wait = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Record one epoch; returns ``(improved, stop)``. ``self.lr`` applies to the next epoch."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.plateau_wait = 0
            self.stop_wait = 0
            return True, False
        self.plateau_wait += 1
        self.stop_wait += 1
        if self.plateau_wait >= self.plateau_patience:
            # the floor never raises a rate that started below it
            self.lr = min(self.lr, max(self.lr * self.factor, self.min_lr))
            self.plateau_wait = 0
        return False, self.stop_wait >= self.early_stop_patience


def train(dataset, valset, cfg: TrainConfig, model: AutoencoderModel | None = None,
          checkpoint_path=None, progress=None):
    """Train with Adam on MAE_I + MAE_V; returns ``(best_model, history, adam_state)``.

    ``dataset``/``valset`` are :class:`Dataset` or ``(N, 2, n)`` arrays of
    normalized spectra. If ``checkpoint_path`` is given the best model so
    far is saved after every improving epoch.
    """
    from .nn.checkpoint import save_checkpoint
    from .nn.model import load_architecture

    x = dataset.x if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.float64)
    xv = valset.x if isinstance(valset, Dataset) else np.asarray(valset, dtype=np.float64)
    if x.shape[0] == 0 or xv.shape[0] == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    if model is None:
        specs, latent = load_architecture(cfg.architecture) if cfg.architecture else (None, None)
        model = AutoencoderModel.create(specs, latent, seed=cfg.seed, n_points=x.shape[2])
    params = model.flat_params()
    state = AdamState.for_params(params, lr=cfg.lr)
    tracker = PlateauTracker(cfg.lr, cfg.lr_plateau_patience, cfg.lr_factor, cfg.min_lr,
                             cfg.early_stop_patience, cfg.min_delta)
    hist = TrainHistory()
    best = model.copy()
    best_state = state.copy()
    keep_freed_memory()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            for epoch in range(1, cfg.max_epochs + 1):
                lr = tracker.lr
                state.lr = lr
                losses = []
                for idx in make_batches(x.shape[0], cfg.batch_size, cfg.seed, epoch):
                    loss, grads = batch_gradient(model, x[idx], pool)
                    if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads)):
                        raise NumericalFault(f"non-finite loss or gradient in epoch {epoch}")
                    adam_step(params, grads, state)
                    losses.append(loss * len(idx))
                train_loss = float(math.fsum(losses) / x.shape[0])
                val_loss = evaluate_loss(model, xv, pool)
                if not math.isfinite(val_loss):
                    raise NumericalFault(f"non-finite validation loss in epoch {epoch}")
                hist.train_loss.append(train_loss)
                hist.val_loss.append(val_loss)
                hist.lr.append(lr)
                improved, stop = tracker.update(val_loss)
                if improved:
                    best = model.copy()
                    best_state = state.copy()
                    hist.best_epoch = epoch
                    if checkpoint_path is not None:
                        save_checkpoint(best, best_state, hist, checkpoint_path)
                if progress is not None:
                    progress(epoch, train_loss, val_loss, lr)
                if stop:
                    hist.stop_reason = StopReason.EARLY_STOPPED
                    break
            else:
                hist.stop_reason = StopReason.MAX_EPOCHS
    finally:
        if pool is not None:
            pool.shutdown()
    return best, hist, best_state
