"""Training loop (Nesterov momentum, polynomial LR decay, L2 weight decay,
pixelwise cross-entropy), evaluation against reference contours, and the
ablation harness."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .augment import Sample
from .dataio import ManifestEntry, load_contour_text, load_sample, read_manifest, split_entries
from .errors import CheckpointError, ConfigError, InvalidArgument, NumericalError
from .metrics import ContourSet, MetricsReport, aggregate_report, evaluate_slices, mask_to_contour
from .model import Model, ModelConfig, build_model
from .params import ParamStore
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    power: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_iter: int = 1000
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    model: ModelConfig = field(default_factory=ModelConfig)
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_iter < 0:
            raise ConfigError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.power <= 0:
            raise ConfigError(f"power must be positive, got {self.power}")
        self.model.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        cfg = cls(model=model, **data)
        cfg.validate()
        return cfg


def load_train_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return TrainConfig.from_dict(doc)


def save_train_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """Polynomial decay: base_lr * (1 - iter/max_iter) ** power."""
    if iteration < 0 or iteration > cfg.max_iter:
        raise InvalidArgument(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    if cfg.max_iter == 0:
        return cfg.base_lr
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


@dataclass
class OptimizerState:
    velocities: dict[str, np.ndarray]
    iteration: int = 0

    @classmethod
    def for_store(cls, store: ParamStore) -> "OptimizerState":
        return cls({name: np.zeros_like(e.tensor.data) for name, e in store.trainable()})


def nesterov_step(
    store: ParamStore,
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Look-ahead Nesterov update on every trainable parameter.

    With the effective gradient g' = g + weight_decay * w (decayed
    parameters only): v <- mu*v - lr*g'; w <- w + mu*v - lr*g'.
    Reduces to vanilla SGD at mu = 0.
    """
    for name, entry in store.trainable():
        t = entry.tensor
        if t.grad is None:
            raise InvalidArgument(f"parameter {name!r} has no gradient; run backward first")
        g = t.grad
        if not np.isfinite(g).all():
            raise NumericalError(
                f"non-finite gradient for parameter {name!r} at iteration {state.iteration}"
            )
        if weight_decay != 0.0 and entry.decayed:
            g = g + weight_decay * t.data
        v = state.velocities[name]
        v *= momentum
        v -= lr * g
        t.data += momentum * v - lr * g
    state.iteration += 1


def l2_penalty(store: ParamStore) -> float:
    """0.5 * sum of squared weights over decayed parameters (logging aid;
    the decay itself enters through the optimizer update)."""
    total = 0.0
    for _, entry in store.trainable():
        if entry.decayed:
            total += float((entry.tensor.data.astype(np.float64) ** 2).sum())
    return 0.5 * total


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def samples_to_batch(samples: Sequence[Sample]) -> tuple[Tensor, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(np.float32)[:, None]
    labels = np.stack([s.mask for s in samples]).astype(np.int64)
    return Tensor(images), labels


def batch_order(n: int, batch_size: int, max_iter: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffled batches, reshuffling every epoch, until max_iter
    batches have been produced."""
    batches: list[np.ndarray] = []
    while len(batches) < max_iter:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            batches.append(perm[i : i + batch_size])
            if len(batches) == max_iter:
                break
    return batches


def data_fingerprint(samples: Sequence[Sample]) -> str:
    """Order-sensitive hash of the training data, for controlled comparisons."""
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
        h.update(np.ascontiguousarray(s.mask).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    log: list[tuple[int, float, float]]  # (iteration, lr, loss)
    checkpoint_path: Path
    data_hash: str


def train(
    cfg: TrainConfig,
    run_dir,
    samples: Optional[Sequence[Sample]] = None,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> TrainResult:
    """Run the full training loop; deterministic for a fixed config and seed.

    Writes ``training_log.csv`` plus periodic and final checkpoints into
    ``run_dir``.  On a non-finite loss the run aborts with the last
    checkpoint retained.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if samples is None:
        if cfg.train_manifest is None:
            raise ConfigError("train config has no train_manifest and no samples were given")
        entries = split_entries(read_manifest(cfg.train_manifest), "train")
        if not entries:
            raise ConfigError(f"{cfg.train_manifest}: no entries with split=train")
        samples = [load_sample(e, classes=cfg.model.classes) for e in entries]
    for s in samples:
        if s.image.shape != (cfg.model.input_size, cfg.model.input_size):
            raise ConfigError(
                f"sample {s.id!r} is {s.image.shape}, model expects "
                f"{cfg.model.input_size}x{cfg.model.input_size}"
            )

    model = build_model(cfg.model, seed=cfg.seed)
    state = OptimizerState.for_store(model.store)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    shuffle_rng = np.random.default_rng(cfg.seed + 2)
    batches = batch_order(len(samples), cfg.batch_size, cfg.max_iter, shuffle_rng)
    trainables = [e.tensor for _, e in model.store.trainable()]
    data_hash = data_fingerprint(samples)

    log: list[tuple[int, float, float]] = []
    log_path = run_dir / "training_log.csv"
    final_path = run_dir / "checkpoint_final.msfc"
    with log_path.open("w") as fh:
        fh.write(f"# data_hash={data_hash}\n")
        fh.write("iter,lr,loss\n")
        for it, idx in enumerate(batches):
            lr = poly_lr(it, cfg)
            x, labels = samples_to_batch([samples[i] for i in idx])
            tape = Tape()
            logits = model.forward(x, mode="train", tape=tape, rng=dropout_rng)
            loss = ops.softmax_cross_entropy(logits, labels, tape=tape)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                fh.write(f"{it},{lr:.8e},nan\n")
                raise NumericalError(
                    f"non-finite loss at iteration {it}; last checkpoint retained in {run_dir}"
                )
            backward(tape, loss, params=trainables)
            nesterov_step(model.store, state, lr, cfg.momentum, cfg.weight_decay)
            log.append((it, lr, loss_val))
            fh.write(f"{it},{lr:.8e},{loss_val:.8e}\n")
            if progress is not None:
                progress(it, lr, loss_val)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                model.store.save(run_dir / f"checkpoint_{it + 1:06d}.msfc")
    model.store.save(final_path)
    return TrainResult(model=model, log=log, checkpoint_path=final_path, data_hash=data_hash)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def load_model_from_checkpoint(model_cfg: ModelConfig, checkpoint_path) -> Model:
    model = build_model(model_cfg, seed=0)
    try:
        model.store.load(checkpoint_path)
    except CheckpointError as exc:
        raise CheckpointError(f"checkpoint does not fit the configured model: {exc}") from exc
    return model


def predict_masks(model: Model, samples: Sequence[Sample], batch_size: int = 4) -> dict[str, np.ndarray]:
    """Eval-mode forward and per-pixel argmax for each sample."""
    preds: dict[str, np.ndarray] = {}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x, _ = samples_to_batch(chunk)
        logits = model.forward(x, mode="eval")
        if not np.isfinite(logits.data).all():
            raise NumericalError(f"non-finite logits while predicting {chunk[0].id!r}")
        masks = logits.data.argmax(axis=1)
        for s, m in zip(chunk, masks):
            preds[s.id] = m.astype(np.int64)
    return preds


def reference_contours(entry: ManifestEntry, sample: Sample) -> ContourSet:
    """Ground-truth contours for one entry: stored contour files when the
    manifest has them, otherwise boundaries extracted from the stored mask."""
    if entry.contour_endo_path or entry.contour_epi_path:
        endo = load_contour_text(entry.contour_endo_path) if entry.contour_endo_path else None
        epi = load_contour_text(entry.contour_epi_path) if entry.contour_epi_path else None
    else:
        endo = mask_to_contour(sample.mask, "cavity")
        epi = mask_to_contour(sample.mask, "epicardial")
    return ContourSet(
        slice_id=entry.id,
        endo=endo,
        epi=epi,
        spacing=entry.spacing,
        case_id=entry.case_id,
        mask=sample.mask if entry.mask_path is not None else None,
    )


def evaluate(model: Model, entries: Sequence[ManifestEntry], batch_size: int = 4) -> MetricsReport:
    """Predict every entry and score it against the reference labels."""
    if not entries:
        raise InvalidArgument("evaluate: no entries to score")
    samples = [load_sample(e, classes=model.config.classes) for e in entries]
    preds = predict_masks(model, samples, batch_size=batch_size)
    gts = {e.id: reference_contours(e, s) for e, s in zip(entries, samples)}
    records = evaluate_slices(preds, gts)
    spacings = {tuple(e.spacing) for e in entries}
    if len(spacings) == 1:
        sy, sx = next(iter(spacings))
        note = f"spacing {sy:g}x{sx:g} mm/px"
    else:
        note = "spacing mixed mm/px"
    return aggregate_report(records, spacing_note=note)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_SUITES: dict[str, list[tuple[str, dict]]] = {
    "ms_pooling": [
        ("Pooling layer", {"ms_pooling": False}),
        ("Multi-scale pooling module", {"ms_pooling": True}),
    ],
    "upsample_mode": [
        ("Bilinear interpolation", {"ms_upsample_mode": "bilinear"}),
        ("Deconvolution", {"ms_upsample_mode": "deconv"}),
        ("Group deconvolution", {"ms_upsample_mode": "group_deconv"}),
    ],
    "dense_decoder": [
        ("Without", {"dense_decoder": False}),
        ("With", {"dense_decoder": True}),
    ],
}

_TABLE_ROWS = [
    ("Dice", "Endo", "dice_endo", 1.0, 3),
    ("Dice", "Epi", "dice_epi", 1.0, 3),
    ("APD(mm)", "Endo", "apd_endo", 1.0, 2),
    ("APD(mm)", "Epi", "apd_epi", 1.0, 2),
    ("Good Contours(%)", "Endo", "good_endo", 1.0, 2),
    ("Good Contours(%)", "Epi", "good_epi", 1.0, 2),
]


@dataclass
class AblationResult:
    suite: str
    columns: list[str]
    reports: dict[str, Optional[MetricsReport]]  # None marks a failed preset
    data_hashes: dict[str, str]
    errors: dict[str, str]

    def format_table(self) -> str:
        def cell(report: Optional[MetricsReport], key: str, digits: int) -> str:
            if report is None:
                return "failed"
            agg = report.overall.get(key)
            if agg is None:
                return "-"
            mean, std = agg
            return f"{mean:.{digits}f}({std:.{digits}f})" if std is not None else f"{mean:.{digits}f}(-)"

        width = max(len(c) for c in self.columns) + 2
        head = f"{'metric':<18}{'region':<8}" + "".join(f"{c:<{width}}" for c in self.columns)
        lines = [f"ablation suite: {self.suite}", head, "-" * len(head)]
        for metric, region, key, _, digits in _TABLE_ROWS:
            cells = "".join(f"{cell(self.reports[c], key, digits):<{width}}" for c in self.columns)
            lines.append(f"{metric:<18}{region:<8}{cells}")
        return "\n".join(lines)


def run_ablation(
    suite: str,
    base_cfg: TrainConfig,
    run_dir,
    train_samples: Optional[Sequence[Sample]] = None,
    test_entries: Optional[Sequence[ManifestEntry]] = None,
    progress: Optional[Callable[[str, int, float, float], None]] = None,
) -> AblationResult:
    """Train and evaluate every preset of one ablation suite with identical
    seed and data; failures mark their column and the others continue."""
    if suite not in ABLATION_SUITES:
        raise InvalidArgument(f"unknown suite {suite!r}; choose from {sorted(ABLATION_SUITES)}")
    if test_entries is None:
        if base_cfg.test_manifest is None:
            raise ConfigError("ablation needs a test manifest or explicit test entries")
        test_entries = split_entries(read_manifest(base_cfg.test_manifest), "test")
    run_dir = Path(run_dir)
    columns: list[str] = []
    reports: dict[str, Optional[MetricsReport]] = {}
    hashes: dict[str, str] = {}
    errors: dict[str, str] = {}
    for label, overrides in ABLATION_SUITES[suite]:
        columns.append(label)
        preset_model = ModelConfig.from_dict({**base_cfg.model.to_dict(), **overrides})
        preset_cfg = TrainConfig.from_dict(
            {**base_cfg.to_dict(), "model": preset_model.to_dict()}
        )
        safe = label.lower().replace(" ", "_").replace("-", "_")
        try:
            result = train(
                preset_cfg,
                run_dir / safe,
                samples=train_samples,
                progress=(lambda it, lr, ls, _l=label: progress(_l, it, lr, ls)) if progress else None,
            )
            hashes[label] = result.data_hash
            reports[label] = evaluate(result.model, test_entries)
        except Exception as exc:  # keep the other presets running
            reports[label] = None
            errors[label] = f"{type(exc).__name__}: {exc}"
    return AblationResult(suite=suite, columns=columns, reports=reports,
                          data_hashes=hashes, errors=errors)
