"""Loss, AdamW, the training loop with early stopping, and k-fold evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .metrics import ConfusionCounts, Report, ScoreRow, confusion, f1, make_report
from .nets import NetworkConfig, Parameters, build, forward, predict_masks
from .pipeline import evaluate_raster
from .preprocess import AugmentationConfig, BandSelection, augment, select_bands, standardize
from .raster import DatasetManifest
from .tensor import NonFiniteError
from .tiler import Tile, filter_training_tiles, mask_tiles, split

log = logging.getLogger(__name__)

ARCH_LABELS = {"segnet": "SegNet", "unet": "U-Net", "modsegnet": "ModSegNet"}


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


# ---------------------------------------------------------------------- loss


def _softplus_neg(z: np.ndarray) -> np.ndarray:
    """``log(1 + exp(-z))`` without overflow."""
    return np.maximum(-z, 0) + np.log1p(np.exp(-np.abs(z)))


def weighted_bce_loss(
    logits,
    targets,
    pos_weight: float,
    weights: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Mean of ``-[w*y*log(sigmoid(z)) + (1-y)*log(1-sigmoid(z))]`` and its gradient.

    ``weights`` optionally restricts the mean to a subset of pixels (a 0/1
    grid broadcastable to ``logits``).
    """
    z = np.asarray(logits.data if hasattr(logits, "data") else logits)
    y = np.asarray(targets)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch: logits {z.shape} vs targets {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be binary")
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    z64 = z.astype(np.float64)
    y64 = y.astype(np.float64)
    coef = 1.0 + (pos_weight - 1.0) * y64
    per_pixel = (1.0 - y64) * z64 + coef * _softplus_neg(z64)
    sig = np.exp(-_softplus_neg(z64))
    # d/dz of (1-y) z + c softplus(-z)
    dper = (1.0 - y64) - coef * (1.0 - sig)
    if weights is None:
        count = z.size
        loss = per_pixel.sum() / count
        grad = dper / count
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), z.shape)
        count = max(w.sum(), 1.0)
        loss = (per_pixel * w).sum() / count
        grad = dper * w / count
    return float(loss), grad.astype(z.dtype)


def bce_with_logits(logits, targets) -> float:
    """Unweighted mean binary cross-entropy on logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return float(((1.0 - y) * z + _softplus_neg(z)).mean())


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class AdamWConfig:
    learning_rate: float = 0.000171
    weight_decay: float = 0.00061
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, Optional[np.ndarray]],
    state: AdamWState,
    cfg: AdamWConfig,
) -> None:
    """One AdamW update, in place. Decay is applied to the weights directly,
    outside the moment estimates."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        p *= p.dtype.type(1.0 - cfg.learning_rate * cfg.weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.dtype)


# ------------------------------------------------------------------- configs


@dataclass(frozen=True)
class EarlyStopConfig:
    monitor: str = "val_f1"
    patience: Optional[int] = None
    keep_best: bool = True


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.000171
    weight_decay: float = 0.00061
    pos_weight: float = 5.0
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    early_stop: EarlyStopConfig = EarlyStopConfig()
    val_fraction: float = 0.15
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.pos_weight <= 0:
            raise ValueError("pos_weight must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.learning_rate, self.weight_decay)


@dataclass(frozen=True)
class FoldSpec:
    name: str
    train_plots: tuple[str, ...]
    test_plot: str

    def __post_init__(self) -> None:
        if self.test_plot in self.train_plots:
            raise ValueError(f"fold {self.name}: test plot {self.test_plot} is also a training plot")
        if not self.train_plots:
            raise ValueError(f"fold {self.name} has no training plots")

    def validate(self, manifest: DatasetManifest) -> None:
        known = set(manifest.plot_names)
        unknown = [p for p in (*self.train_plots, self.test_plot) if p not in known]
        if unknown:
            raise ValueError(f"fold {self.name} references unknown plot(s) {unknown}")


# Train/test plot split of the four cross-validation folds on the public dataset.
STANDARD_FOLDS = (
    FoldSpec("T1", ("Esac1", "Esac2"), "Valdoeiro"),
    FoldSpec("T2", ("Esac1", "Valdoeiro"), "Esac2"),
    FoldSpec("T3", ("Esac2", "Valdoeiro"), "Esac1"),
    FoldSpec("T4", ("Esac1", "Esac2", "Valdoeiro"), "QtaBaixo"),
)


# ---------------------------------------------------------------- run record


@dataclass
class RunRecord:
    fold: str
    selection: str
    arch: str
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_f1: Optional[float] = None
    test_f1: Optional[float] = None
    test_counts: Optional[dict] = None
    checkpoint: Optional[str] = None
    repetition: int = 0
    n_train_tiles: int = 0
    n_val_tiles: int = 0
    params: Optional[Parameters] = field(default=None, repr=False, compare=False)

    def score_row(self) -> ScoreRow:
        if self.test_f1 is None:
            raise ValueError("run has no test score")
        return ScoreRow(self.selection, ARCH_LABELS.get(self.arch, self.arch), self.fold,
                        self.test_f1, self.repetition)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "params"}

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "params"}
        return cls(**d)

    def save(self, path: "str | Path") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path


def load_records(paths: Sequence["str | Path"]) -> list[RunRecord]:
    return [RunRecord.from_json(json.loads(Path(p).read_text(encoding="utf-8"))) for p in paths]


# -------------------------------------------------------------- data loading


def load_training_pairs(
    manifest: DatasetManifest, plots: Sequence[str], bands: BandSelection
) -> list[tuple[Tile, Tile]]:
    """Band-selected (image, mask) tile pairs holding at least one vine pixel."""
    pairs = []
    for name in plots:
        image, mask = manifest.plot(name).load()
        img_grid = split(image, manifest.tile_size)
        msk_grid = mask_tiles(mask, manifest.tile_size)
        for img, msk in filter_training_tiles(img_grid, msk_grid):
            valid = img.valid & msk.valid
            img = select_bands(img.replace(valid=valid), bands)
            pairs.append((img, msk.replace(valid=valid)))
    return pairs


def _batch(pairs: Sequence[tuple[Tile, Tile]], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([p[0].data for p in pairs]).astype(dtype)
    y = np.stack([p[1].data[:1] for p in pairs]).astype(dtype)
    w = np.stack([p[1].valid[None] for p in pairs]).astype(dtype)
    return x, y, w


def validation_f1(
    params: Parameters, cfg: NetworkConfig, pairs: Sequence[tuple[Tile, Tile]], threshold: float
) -> tuple[float, ConfusionCounts]:
    preds = predict_masks(params, cfg, [p[0] for p in pairs], threshold=threshold)
    counts = ConfusionCounts()
    for pred, (img, msk) in zip(preds, pairs):
        counts = counts + confusion(pred, msk.data[0], msk.valid)
    return f1(counts), counts


# -------------------------------------------------------------------- train


def fit(
    pairs: Sequence[tuple[Tile, Tile]],
    val_pairs: Sequence[tuple[Tile, Tile]],
    netcfg: NetworkConfig,
    traincfg: TrainConfig,
    augcfg: Optional[AugmentationConfig] = None,
    params: Optional[Parameters] = None,
) -> tuple[Parameters, list[float], list[float], Optional[int]]:
    """Optimize on already band-selected (image, mask) pairs.

    Returns parameters (best validation epoch restored when configured), the
    per-epoch mean training loss, per-epoch validation F1 and the best epoch.
    """
    augcfg = augcfg or AugmentationConfig.identity()
    if params is None:
        params = build(netcfg, traincfg.seed)
    dtype = next(iter(params.tensors.values())).dtype
    root = np.random.SeedSequence(traincfg.seed)
    data_rng, drop_rng = (np.random.default_rng(s) for s in root.spawn(2))
    opt_state = AdamWState()
    adamw = traincfg.adamw()
    prepared_val = [(standardize(img), msk) for img, msk in val_pairs]

    losses: list[float] = []
    val_scores: list[float] = []
    best_epoch: Optional[int] = None
    best_score = -1.0
    best_state = None
    stale = 0
    patience = traincfg.early_stop.patience

    for epoch in range(traincfg.epochs):
        order = data_rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), traincfg.batch_size):
            batch = []
            for k in order[start : start + traincfg.batch_size]:
                img, msk = augment(pairs[k][0], pairs[k][1], augcfg, data_rng)
                if not img.valid.any():
                    img, msk = pairs[k]
                batch.append((standardize(img), msk))
            x, y, w = _batch(batch, dtype)
            params.zero_grad()
            logits = forward(params, netcfg, x, mode="train", draw=drop_rng)
            loss, grad = weighted_bce_loss(logits, y, traincfg.pos_weight, w)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {start}")
            logits.backward(grad)
            optimizer_step(
                {k: t.data for k, t in params}, params.grads(), opt_state, adamw
            )
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
        score, _ = validation_f1(params, netcfg, prepared_val, traincfg.threshold)
        val_scores.append(score)
        log.info("epoch %d loss %.4f val_f1 %.4f", epoch + 1, losses[-1], score)
        if score > best_score:
            best_score, best_epoch, stale = score, epoch + 1, 0
            best_state = params.state()
        else:
            stale += 1
            if patience is not None and stale >= patience:
                log.info("early stop after epoch %d", epoch + 1)
                break

    if traincfg.early_stop.keep_best and best_state is not None:
        params.load_state(best_state)
    return params, losses, val_scores, best_epoch


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded hold-out of ``round(val_fraction * n)`` items (at least 1 when n >= 2)."""
    if n == 0:
        return [], []
    if n == 1:
        return [0], [0]
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def train(
    manifest: DatasetManifest,
    fold: FoldSpec,
    bands: "BandSelection | Sequence[str]",
    netcfg: NetworkConfig,
    traincfg: TrainConfig,
    augcfg: Optional[AugmentationConfig] = None,
    checkpoint_dir: Optional["str | Path"] = None,
    repetition: int = 0,
) -> RunRecord:
    """Train on the fold's training plots and score the held-out test plot."""
    if not isinstance(bands, BandSelection):
        bands = BandSelection.of(bands)
    fold.validate(manifest)
    if len(bands) != netcfg.in_channels:
        raise ValueError(
            f"band selection {bands.label} has {len(bands)} channels, "
            f"network expects {netcfg.in_channels}"
        )
    netcfg.check_tile_size(manifest.tile_size)
    assert fold.test_plot not in fold.train_plots

    pairs = load_training_pairs(manifest, fold.train_plots, bands)
    if not pairs:
        raise TrainingError(f"fold {fold.name}: empty training set (no tile holds a vine pixel)")
    train_idx, val_idx = split_train_val(len(pairs), traincfg.val_fraction, traincfg.seed)
    train_pairs = [pairs[i] for i in train_idx]
    val_pairs = [pairs[i] for i in val_idx]
    log.info(
        "fold %s %s %s: %d train / %d val tiles",
        fold.name, netcfg.arch, bands.label, len(train_pairs), len(val_pairs),
    )

    try:
        params, losses, val_scores, best_epoch = fit(
            train_pairs, val_pairs, netcfg, traincfg, augcfg
        )
    except NonFiniteError as exc:
        raise TrainingDiverged(f"fold {fold.name}: {exc}") from exc

    image, mask = manifest.plot(fold.test_plot).load()
    counts = evaluate_raster(params, netcfg, image, mask, bands, manifest.tile_size, traincfg.threshold)

    record = RunRecord(
        fold=fold.name,
        selection=bands.label,
        arch=netcfg.arch,
        seed=traincfg.seed,
        train_loss=losses,
        val_f1=val_scores,
        best_epoch=best_epoch,
        best_val_f1=max(val_scores) if val_scores else None,
        test_f1=f1(counts),
        test_counts=counts.as_dict(),
        repetition=repetition,
        n_train_tiles=len(train_pairs),
        n_val_tiles=len(val_pairs),
        params=params,
    )
    if checkpoint_dir is not None:
        ck = Path(checkpoint_dir) / f"{fold.name}_{netcfg.arch}_{bands.label}_r{repetition}.ckpt"
        save_checkpoint(
            ck, params, netcfg,
            {"bands": [b.value for b in bands.bands], "tile_size": manifest.tile_size,
             "threshold": traincfg.threshold, "fold": fold.name},
        )
        record.checkpoint = str(ck)
    return record


def derive_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def cross_validate(
    manifest: DatasetManifest,
    folds: Sequence[FoldSpec],
    bands: "BandSelection | Sequence[str]",
    netcfg: NetworkConfig,
    traincfg: TrainConfig,
    repetitions: int = 5,
    augcfg: Optional[AugmentationConfig] = None,
    checkpoint_dir: Optional["str | Path"] = None,
) -> tuple[Report, list[RunRecord]]:
    """Run every fold ``repetitions`` times with distinct seeds and tabulate test F1."""
    if not folds:
        raise ValueError("cross_validate needs at least one fold")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    for fold in folds:
        fold.validate(manifest)
    records = []
    for fi, fold in enumerate(folds):
        for rep in range(repetitions):
            cfg = dataclasses.replace(traincfg, seed=derive_seed(traincfg.seed, fi, rep))
            records.append(
                train(manifest, fold, bands, netcfg, cfg, augcfg, checkpoint_dir, repetition=rep)
            )
    return make_report(records), records
