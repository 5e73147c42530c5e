"""Training loop, evaluation and fine-tuning regimes."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import metrics
from . import tensor_core as tc
from .byte_image import ByteImage, RawCapture, encode_image, load_capture
from .errors import InvalidArgument, NumericError, SingleClassError
from .model_zoo import (
    ArchitectureSpec,
    ModelState,
    backward,
    forward_batch,
    init_params,
    new_version_id,
    predict_scores,
    set_frozen,
)

log = logging.getLogger(__name__)

MODES = ("scratch", "finetune_dense", "finetune_full", "zeroshot")
FINETUNE_LR_FACTOR = 0.1
THRESHOLD_MARGIN = 1e-6


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 16
    learning_rate: float = 0.0005
    batch_size: int = 8
    seed: int = 0
    mode: str = "scratch"
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise InvalidArgument("max_epochs >= 0, patience >= 1 and batch_size >= 1 required")
        if self.max_epochs and self.patience >= self.max_epochs:
            raise InvalidArgument("patience must be smaller than max_epochs")


@dataclass
class LabeledSet:
    """Labeled images; items are (RawCapture | ByteImage | path | bytes, label)."""

    items: list
    split_name: str = "train"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for _, y in self.items:
            if y not in (0, 1):
                raise InvalidArgument(f"labels must be 0 or 1, got {y!r}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.items], dtype=np.int64)

    def images(self, height: int, width: int) -> np.ndarray:
        """uint8 stack ``(N, height, width)``, encoded once per size."""
        key = (height, width)
        if key not in self._cache:
            stack = np.zeros((len(self.items), height, width), dtype=np.uint8)
            for i, (src, _) in enumerate(self.items):
                stack[i] = _to_pixels(src, height, width)
            self._cache[key] = stack
        return self._cache[key]

    @classmethod
    def from_arrays(cls, images: np.ndarray, labels: Sequence[int], split_name: str = "train") -> "LabeledSet":
        ls = cls([(images[i], int(y)) for i, y in enumerate(labels)], split_name)
        if images.ndim == 3 and images.dtype == np.uint8:
            ls._cache[images.shape[1:]] = images
        return ls

    def subset(self, indices: Iterable[int], split_name: str | None = None) -> "LabeledSet":
        idx = list(indices)
        out = LabeledSet([self.items[i] for i in idx], split_name or self.split_name)
        for key, stack in self._cache.items():
            out._cache[key] = stack[idx]
        return out


def _to_pixels(src, height: int, width: int) -> np.ndarray:
    if isinstance(src, ByteImage):
        if (src.height, src.width) != (height, width):
            src = encode_image(src.flat().tobytes()[: src.source_len], width, height)
        return src.pixels
    if isinstance(src, np.ndarray):
        if src.shape == (height, width):
            return src
        return encode_image(src.astype(np.uint8).tobytes(), width, height).pixels
    if isinstance(src, (bytes, bytearray)):
        return encode_image(bytes(src), width, height).pixels
    if isinstance(src, RawCapture):
        return encode_image(src, width, height).pixels
    return encode_image(load_capture(src), width, height).pixels


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_loss: float | None = None
    best_epoch: int = 0
    best_val_loss: float | None = None
    stopped_early: bool = False
    learning_rate: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"epoch": 0, "train_loss": None, "val_loss": self.initial_val_loss})]
        for e, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(json.dumps({"epoch": e, "train_loss": tl, "val_loss": vl}))
        return "\n".join(lines) + "\n"


def _two_class(labels: np.ndarray, what: str) -> None:
    if len(labels) == 0 or labels.min() == labels.max():
        raise SingleClassError(f"{what} set must contain both classes")


def dataset_loss(model: ModelState, data: LabeledSet, batch_size: int = 16) -> float:
    spec = model.spec
    scores = predict_scores(model, data.images(spec.input_height, spec.input_width), batch_size)
    return tc.bce_loss(scores, data.labels)


def train(
    spec_or_model: ArchitectureSpec | ModelState,
    train_set: LabeledSet,
    val_set: LabeledSet,
    cfg: TrainConfig,
    val_loss_hook: Callable[[int, float], float] | None = None,
) -> tuple[ModelState, TrainHistory]:
    """Minibatch Adam on mean BCE with early stopping on validation loss.

    Epoch 0 is the starting parameters; the returned model carries the
    parameters of the best epoch.  ``val_loss_hook(epoch, loss)`` may replace
    the measured validation loss (used to script early-stopping tests).
    """
    rng = tc.make_rng(cfg.seed)
    if isinstance(spec_or_model, ArchitectureSpec):
        model = init_params(spec_or_model, rng)
    elif cfg.mode == "scratch":
        model = init_params(spec_or_model.spec, rng)
    else:
        model = spec_or_model.copy()
    history = TrainHistory(learning_rate=cfg.learning_rate)
    if cfg.mode == "zeroshot":
        history.initial_val_loss = history.best_val_loss = dataset_loss(model, val_set)
        return model, history

    y_train = train_set.labels
    _two_class(y_train, "training")
    if len(val_set) == 0:
        raise InvalidArgument("validation set is empty")
    spec = model.spec
    x_train = train_set.images(spec.input_height, spec.input_width)
    opt = tc.OptimizerConfig(learning_rate=cfg.learning_rate)

    def measure(epoch: int) -> float:
        loss = dataset_loss(model, val_set)
        if val_loss_hook is not None:
            loss = float(val_loss_hook(epoch, loss))
        if not np.isfinite(loss):
            raise NumericError(f"validation loss is not finite at epoch {epoch}", epoch)
        return loss

    best = measure(0)
    history.initial_val_loss = best
    best_params = {k: v.copy() for k, v in model.flat_params().items()}
    since_best = 0
    trainable = model.trainable()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_train))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_train[idx].astype(np.float32) / np.float32(255.0)
            yb = y_train[idx]
            probs, tape = forward_batch(model, xb, training=True, rng=rng, record=True)
            loss = tc.bce_loss(probs, yb)
            if not np.isfinite(loss):
                raise NumericError(f"training loss is not finite at epoch {epoch}", epoch)
            total += loss * len(idx)
            count += len(idx)
            grads = backward(model, tape, tc.bce_grad(probs, yb))
            try:
                tc.adam_step(trainable, grads, opt)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch}", epoch) from exc
        history.train_loss.append(total / count)
        val = measure(epoch)
        history.val_loss.append(val)
        log.debug("epoch %d train %.5f val %.5f", epoch, total / count, val)
        if val < best - cfg.min_delta:
            best = val
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.flat_params().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stopped_early = epoch < cfg.max_epochs
                break

    for key, value in best_params.items():
        layer, name = key.split(".")
        model.params[int(layer)][name][...] = value
    history.best_val_loss = best
    return model, history


def evaluate(model: ModelState, data: LabeledSet, threshold: float | None = None) -> metrics.MetricsReport:
    if len(data) == 0:
        raise InvalidArgument("cannot evaluate an empty set")
    if threshold is None:
        threshold = model.calibrated_threshold if model.calibrated_threshold is not None else 0.5
    scores = predict_scores(model, data.images(model.spec.input_height, model.spec.input_width))
    return metrics.evaluate_scores(scores, data.labels, threshold)


def scores_for(model: ModelState, data: LabeledSet) -> np.ndarray:
    return predict_scores(model, data.images(model.spec.input_height, model.spec.input_width))


def attachable_threshold(t: float) -> float:
    """Keep calibrated thresholds strictly inside (0, 1) so they can be stored on a model."""
    return float(min(max(t, THRESHOLD_MARGIN), 1 - THRESHOLD_MARGIN))


def calibrate(model: ModelState, val_set: LabeledSet, beta: float = 2.0) -> tuple[float, float]:
    t, f = metrics.calibrate_threshold(scores_for(model, val_set), val_set.labels, beta)
    return attachable_threshold(t), f


def fine_tune(
    champion: ModelState,
    data: LabeledSet,
    val: LabeledSet,
    mode: str = "finetune_dense",
    cfg: TrainConfig | None = None,
) -> tuple[ModelState, float]:
    """Continue training a copy of ``champion`` at a tenth of the base learning rate.

    ``finetune_dense`` freezes every conv layer; ``finetune_full`` trains all
    layers.  The result gets a fresh version id and an F2-optimal threshold
    calibrated on ``val`` (the champion's threshold is kept when ``val`` has a
    single class).
    """
    if mode not in ("finetune_dense", "finetune_full"):
        raise InvalidArgument(f"fine-tune mode must be finetune_dense or finetune_full, got {mode!r}")
    cfg = cfg or TrainConfig()
    ft_cfg = dataclasses.replace(cfg, mode=mode, learning_rate=cfg.learning_rate * FINETUNE_LR_FACTOR)
    start = set_frozen(champion.copy(), "conv" if mode == "finetune_dense" else ())
    model, history = train(start, data, val, ft_cfg)
    rng = tc.make_rng(cfg.seed + 1)
    try:
        threshold, _ = calibrate(model, val)
    except SingleClassError:
        threshold = champion.calibrated_threshold if champion.calibrated_threshold is not None else 0.5
    model.frozen = frozenset()
    model.calibrated_threshold = threshold
    model.version_id = new_version_id(rng)
    model.metadata = {
        **champion.metadata,
        "parent": champion.version_id,
        "mode": mode,
        "learning_rate": ft_cfg.learning_rate,
        "best_epoch": history.best_epoch,
        "epochs_run": history.epochs_run,
    }
    return model, threshold


def train_and_calibrate(spec: ArchitectureSpec, train_set: LabeledSet, val_set: LabeledSet, cfg: TrainConfig):
    """Scratch training followed by F2 threshold calibration on the validation set."""
    model, history = train(spec, train_set, val_set, dataclasses.replace(cfg, mode="scratch"))
    model.calibrated_threshold, _ = calibrate(model, val_set)
    model.version_id = new_version_id(tc.make_rng(cfg.seed + 1))
    model.metadata = {
        **model.metadata,
        "mode": "scratch",
        "learning_rate": cfg.learning_rate,
        "best_epoch": history.best_epoch,
        "epochs_run": history.epochs_run,
    }
    return model, history


def prior_baseline_scores(test: LabeledSet, seed: int) -> tuple[np.ndarray, float]:
    """Seeded Bernoulli predictor firing with the test set's positive rate."""
    rate = float(test.labels.mean())
    preds = (tc.make_rng(seed).random(len(test)) < rate).astype(np.float64)
    return preds, rate


def prior_baseline_expected(n_pos: int, n_total: int) -> dict:
    """Expected precision/recall/F2 of the prior predictor (ratio of expected counts)."""
    r = n_pos / n_total
    e_tp, e_fp, e_fn = r * n_pos, r * (n_total - n_pos), (1 - r) * n_pos
    p = e_tp / (e_tp + e_fp)
    rec = e_tp / (e_tp + e_fn)
    return {"rate": r, "precision": p, "recall": rec, "f2": metrics.fbeta(p, rec, 2.0)}


TRANSFER_MODES = ("prior-baseline", "zeroshot", "finetune_dense", "scratch", "finetune_full")


def transfer_eval(
    pretrained: ModelState,
    train_set: LabeledSet,
    val_set: LabeledSet,
    test_set: LabeledSet,
    modes: Sequence[str] = TRANSFER_MODES,
    cfg: TrainConfig | None = None,
) -> dict[str, float]:
    """Test-set F2 on a new domain for each transfer strategy."""
    cfg = cfg or TrainConfig()
    out = {}
    for mode in modes:
        if mode == "prior-baseline":
            preds, _ = prior_baseline_scores(test_set, cfg.seed)
            out[mode] = metrics.evaluate_scores(preds, test_set.labels, 0.5).f2
        elif mode == "zeroshot":
            out[mode] = evaluate(pretrained, test_set).f2
        elif mode in ("finetune_dense", "finetune_full"):
            model, _ = fine_tune(pretrained, train_set, val_set, mode, cfg)
            out[mode] = evaluate(model, test_set).f2
        elif mode == "scratch":
            model, _ = train_and_calibrate(pretrained.spec, train_set, val_set, dataclasses.replace(cfg, seed=cfg.seed + 7919))
            out[mode] = evaluate(model, test_set).f2
        else:
            raise InvalidArgument(f"unknown transfer mode {mode!r}")
    return out
