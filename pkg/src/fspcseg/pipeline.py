"""Run orchestration: configuration, pretrain/train/eval entry points,
checkpoint and run-directory formats, and the IoU evaluation harness.

Run directory layout:
  config        resolved configuration, JSON
  loss_curve    pretrain runs: one '<iteration> <loss>' line per step
  metrics       few-shot runs: one '<episode> <L_l> <L_r> <L>' line per episode
  report        evaluation result, JSON
  checkpoints/  parameter archives
  predictions/  PLY exports on demand
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ClassSplit, LabeledCloud, sample_episode
from .encoder import PointEncoder
from .errors import ConfigurationError, DegenerateGraphError, InputError
from .io import load_archive, load_cloud, save_archive, save_cloud
from .model import EpisodeSettings, SegmentationModel, predict_episode
from .validation import check_in_range

log = logging.getLogger(__name__)


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).lower() in ("1", "true", "yes")


@dataclass
class RunConfig:
    """All run hyperparameters; defaults are the desk-scale operating point.

    Reference-scale values kept for the record: encoder_knn 200,
    mra_neighbors 250, pretrain_epochs 120, train iterations 40000. The
    learning rates, batch size, gamma=0.9, center_weight=0.1, center_eta=1.0
    and mra_fps_ratio=0.4 are the reference settings themselves.
    """

    seed: int = 0
    threads: int = 0  # 0 = leave torch defaults
    data_dir: str | None = None
    # episodes
    ways: int = 2
    shots: int = 1
    query_count: int = 1
    min_class_points: int = 1
    train_episodes: int = 2000
    eval_episodes: int = 200
    # encoder
    feature_dim: int = 64
    hidden_dim: int = 64
    encoder_layers: int = 2
    encoder_knn: int = 16
    edge_relative_only: bool = False
    # pretrain
    pretrain_epochs: int = 30
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-3
    augmentor_lr: float = 1e-3
    augmentor_embed_dim: int = 64
    augmentor_noise_dim: int = 16
    augment_max_shift: float = 0.1
    augment_jitter_sigma: float = 0.01
    deform_weight: float = 1.0
    freeze_augmentor: bool = False
    feature_space_contrast: bool = False
    contrast_temperature: float = 1.0
    # few-shot blocks
    use_mra: bool = True
    mra_neighbors: int = 32
    mra_fps_ratio: float = 0.4
    scaled_attention: bool = False
    attention_heads: int = 1
    use_center_loss: bool = True
    center_weight: float = 0.1
    center_eta: float = 1.0
    backprop_centers: bool = False
    proto_count: int = 100
    gamma: float = 0.9
    sparsify_k: int | None = None
    encoder_lr: float = 5e-4
    module_lr: float = 1e-3

    def __post_init__(self):
        for name in (
            "ways",
            "shots",
            "query_count",
            "train_episodes",
            "eval_episodes",
            "feature_dim",
            "hidden_dim",
            "encoder_layers",
            "encoder_knn",
            "pretrain_epochs",
            "pretrain_batch",
            "proto_count",
            "attention_heads",
        ):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        check_in_range(self.mra_fps_ratio, 0.0, 1.0, "mra_fps_ratio", lo_open=True)
        check_in_range(self.gamma, 0.0, 1.0, "gamma", hi_open=True)
        check_in_range(self.contrast_temperature, 0.0, float("inf"), "contrast_temperature", lo_open=True)
        for name in ("pretrain_lr", "augmentor_lr", "encoder_lr", "module_lr"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.center_eta <= 0:
            raise ConfigurationError("center_eta must be > 0")
        if self.mra_neighbors < 0:
            raise ConfigurationError("mra_neighbors must be >= 0")
        if self.sparsify_k is not None and int(self.sparsify_k) < 1:
            raise ConfigurationError("sparsify_k must be >= 1 or null")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="ascii")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="ascii"))

    def settings(self) -> EpisodeSettings:
        return EpisodeSettings(
            proto_count=self.proto_count,
            gamma=self.gamma,
            sparsify_k=self.sparsify_k,
            use_center_loss=self.use_center_loss,
            center_weight=self.center_weight,
            center_eta=self.center_eta,
            backprop_centers=self.backprop_centers,
        )


@dataclass
class EvalReport:
    """Per-class IoU plus the foreground mean; background reported separately."""

    per_class_iou: dict[str, float]
    foreground_mean_iou: float
    background_iou: float | None
    episode_count: int
    seed: int
    ways: int = 0
    shots: int = 0

    def __post_init__(self):
        for key, v in self.per_class_iou.items():
            check_in_range(v, 0.0, 1.0, f"iou[{key}]")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="ascii")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="ascii"))


class IouAccumulator:
    """Confusion counts per episode-label (0 = background, 1..N = ways)."""

    def __init__(self, n_labels: int):
        self.tp = np.zeros(n_labels, dtype=np.int64)
        self.fp = np.zeros(n_labels, dtype=np.int64)
        self.fn = np.zeros(n_labels, dtype=np.int64)

    def add(self, predicted: np.ndarray, truth: np.ndarray) -> None:
        for c in range(len(self.tp)):
            p = predicted == c
            t = truth == c
            self.tp[c] += int(np.sum(p & t))
            self.fp[c] += int(np.sum(p & ~t))
            self.fn[c] += int(np.sum(~p & t))

    def iou(self) -> dict[int, float]:
        out = {}
        for c in range(len(self.tp)):
            denom = self.tp[c] + self.fp[c] + self.fn[c]
            if denom > 0:  # classes absent from both sides are excluded
                out[c] = float(self.tp[c] / denom)
        return out


def report_from_accumulator(acc: IouAccumulator, episode_count, seed, ways, shots) -> EvalReport:
    iou = acc.iou()
    foreground = [v for c, v in iou.items() if c > 0]
    return EvalReport(
        per_class_iou={str(c): v for c, v in iou.items()},
        foreground_mean_iou=float(np.mean(foreground)) if foreground else 0.0,
        background_iou=iou.get(0),
        episode_count=episode_count,
        seed=int(seed),
        ways=ways,
        shots=shots,
    )


def evaluate(
    model: SegmentationModel,
    settings: EpisodeSettings,
    dataset: list[LabeledCloud],
    split: ClassSplit,
    *,
    ways: int,
    shots: int,
    query_count: int = 1,
    episode_count: int = 200,
    seed: int = 0,
    use: str = "test",
    min_class_points: int = 1,
    predictor=None,
) -> EvalReport:
    """IoU over seeded episodes; ``predictor`` defaults to graph propagation."""
    predictor = predictor or predict_episode
    acc = IouAccumulator(ways + 1)
    evaluated = 0
    for i in range(episode_count):
        episode = sample_episode(
            dataset,
            split,
            ways,
            shots,
            query_count,
            [seed, 202, i],
            use=use,
            min_class_points=min_class_points,
        )
        try:
            preds = predictor(model, episode, settings)
        except (InputError, DegenerateGraphError) as exc:
            log.warning("eval episode %d skipped: %s", i, exc)
            continue
        for pred, qc in zip(preds, episode.query):
            acc.add(pred, qc.labels)
        evaluated += 1
    return report_from_accumulator(acc, evaluated, seed, ways, shots)


# ---------------------------------------------------------------- checkpoints


def _state_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for key, tensor in module.state_dict().items():
        name = prefix + key
        if name not in arrays:
            raise ConfigurationError(f"checkpoint is missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, expected {tuple(tensor.shape)}"
            )
        state[key] = torch.as_tensor(arr, dtype=tensor.dtype)
    module.load_state_dict(state)


def save_encoder_checkpoint(path, encoder: PointEncoder, *, encoder_knn: int, pretrain_classes: int, extra: dict | None = None) -> None:
    manifest = {
        "feature_dim": encoder.feature_dim,
        "encoder_layers": len(encoder.layers),
        "encoder_knn": encoder_knn,
        "pretrain_classes": pretrain_classes,
        "in_channels": encoder.in_channels,
        "hidden_dim": encoder.project.in_features,
        "edge_relative_only": encoder.layers[0].edge_relative_only,
    }
    if extra:
        manifest.update(extra)
    save_archive(path, _state_arrays(encoder), manifest)


def load_encoder_into(encoder: PointEncoder, source) -> None:
    """Load pretrained encoder weights, checking the manifest for shape drift."""
    arrays, manifest = load_archive(source)
    checks = {
        "feature_dim": encoder.feature_dim,
        "encoder_layers": len(encoder.layers),
        "in_channels": encoder.in_channels,
        "hidden_dim": encoder.project.in_features,
    }
    for key, expected in checks.items():
        if key in manifest and int(manifest[key]) != int(expected):
            raise ConfigurationError(
                f"encoder checkpoint {key}={manifest[key]} does not match model {key}={expected}"
            )
    if "edge_relative_only" in manifest:
        if _bool(manifest["edge_relative_only"]) != encoder.layers[0].edge_relative_only:
            raise ConfigurationError("encoder checkpoint edge_relative_only mismatch")
    _load_state(encoder, arrays)


def save_model_checkpoint(path, model: SegmentationModel, config: RunConfig) -> None:
    arrays = _state_arrays(model)
    manifest = {
        "feature_dim": config.feature_dim,
        "hidden_dim": config.hidden_dim,
        "encoder_layers": config.encoder_layers,
        "encoder_knn": config.encoder_knn,
        "edge_relative_only": config.edge_relative_only,
        "use_mra": model.attention is not None,
        "attention_heads": config.attention_heads,
        "scaled_attention": config.scaled_attention,
        "mra_neighbors": config.mra_neighbors,
        "mra_fps_ratio": config.mra_fps_ratio,
        "in_channels": model.encoder.in_channels,
    }
    save_archive(path, arrays, manifest)


def load_model_checkpoint(path) -> SegmentationModel:
    arrays, manifest = load_archive(path)
    model = SegmentationModel(
        in_channels=int(manifest["in_channels"]),
        hidden_dim=int(manifest["hidden_dim"]),
        feature_dim=int(manifest["feature_dim"]),
        encoder_layers=int(manifest["encoder_layers"]),
        encoder_knn=int(manifest["encoder_knn"]),
        edge_relative_only=_bool(manifest["edge_relative_only"]),
        use_attention=_bool(manifest["use_mra"]),
        attention_heads=int(manifest["attention_heads"]),
        scaled_attention=_bool(manifest["scaled_attention"]),
        mra_neighbors=int(manifest["mra_neighbors"]),
        mra_fps_ratio=float(manifest["mra_fps_ratio"]),
    )
    _load_state(model, arrays)
    return model


# ------------------------------------------------------------- dataset on disk


@dataclass
class DatasetBundle:
    train: list[LabeledCloud]
    test: list[LabeledCloud]
    split: ClassSplit
    manifest: dict = field(default_factory=dict)

    @property
    def all_clouds(self) -> list[LabeledCloud]:
        return self.train + self.test


def save_dataset(out_dir, bundle: DatasetBundle) -> None:
    out = Path(out_dir)
    for side, clouds in (("train", bundle.train), ("test", bundle.test)):
        side_dir = out / side
        side_dir.mkdir(parents=True, exist_ok=True)
        for i, lc in enumerate(clouds):
            save_cloud(side_dir / f"scene_{i:06d}.fspc", lc)
    manifest = dict(bundle.manifest)
    manifest["train_classes"] = sorted(bundle.split.train_classes)
    manifest["test_classes"] = sorted(bundle.split.test_classes)
    manifest["n_train"] = len(bundle.train)
    manifest["n_test"] = len(bundle.test)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(data_dir) -> DatasetBundle:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"{root} is not a dataset directory (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    split = ClassSplit(frozenset(manifest["train_classes"]), frozenset(manifest["test_classes"]))
    sides = {}
    for side in ("train", "test"):
        files = sorted((root / side).glob("scene_*.fspc"))
        sides[side] = [load_cloud(f) for f in files]
    return DatasetBundle(train=sides["train"], test=sides["test"], split=split, manifest=manifest)


# ------------------------------------------------------------------ run phases


def _format_float(v: float) -> str:
    return repr(float(v))


def apply_threads(config: RunConfig) -> None:
    if config.threads and config.threads > 0:
        torch.set_num_threads(int(config.threads))


def run_pretrain(config: RunConfig, dataset: list[LabeledCloud], out_dir):
    """Pretrain encoder/head/augmentor; write config, loss curve, checkpoints.

    Only the encoder checkpoint is consumed by the few-shot phase.
    """
    from .estimators import ContrastivePretrainer

    apply_threads(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    config.save(out / "config")

    trainer = ContrastivePretrainer(
        feature_dim=config.feature_dim,
        hidden_dim=config.hidden_dim,
        encoder_layers=config.encoder_layers,
        encoder_knn=config.encoder_knn,
        epochs=config.pretrain_epochs,
        batch_size=config.pretrain_batch,
        lr=config.pretrain_lr,
        augmentor_lr=config.augmentor_lr,
        embed_dim=config.augmentor_embed_dim,
        noise_dim=config.augmentor_noise_dim,
        max_shift=config.augment_max_shift,
        jitter_sigma=config.augment_jitter_sigma,
        deform_weight=config.deform_weight,
        freeze_augmentor=config.freeze_augmentor,
        feature_space_contrast=config.feature_space_contrast,
        temperature=config.contrast_temperature,
        edge_relative_only=config.edge_relative_only,
        random_state=config.seed,
    )
    trainer.fit(dataset)

    lines = [f"{i} {_format_float(v)}" for i, v in trainer.loss_curve_]
    (out / "loss_curve").write_text("\n".join(lines) + "\n", encoding="ascii")
    save_encoder_checkpoint(
        out / "checkpoints" / "encoder.ckpt",
        trainer.encoder_,
        encoder_knn=config.encoder_knn,
        pretrain_classes=trainer.n_classes_,
    )
    save_archive(
        out / "checkpoints" / "classifier.ckpt",
        _state_arrays(trainer.head_),
        {"feature_dim": config.feature_dim, "pretrain_classes": trainer.n_classes_},
    )
    save_archive(
        out / "checkpoints" / "augmentor.ckpt",
        _state_arrays(trainer.augmentor_, prefix="augmentor/"),
        {
            "embed_dim": config.augmentor_embed_dim,
            "noise_dim": config.augmentor_noise_dim,
            "max_shift": config.augment_max_shift,
            "jitter_sigma": config.augment_jitter_sigma,
        },
    )
    return trainer


def run_fewshot_train(
    config: RunConfig,
    dataset: list[LabeledCloud],
    split: ClassSplit,
    out_dir,
    encoder_checkpoint=None,
):
    """Episodic training; writes config, per-episode metrics and the model."""
    from .estimators import FewShotSegmenter

    apply_threads(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "predictions").mkdir(exist_ok=True)
    config.save(out / "config")

    segmenter = FewShotSegmenter(
        ways=config.ways,
        shots=config.shots,
        query_count=config.query_count,
        episodes=config.train_episodes,
        feature_dim=config.feature_dim,
        hidden_dim=config.hidden_dim,
        encoder_layers=config.encoder_layers,
        encoder_knn=config.encoder_knn,
        use_mra=config.use_mra,
        mra_neighbors=config.mra_neighbors,
        mra_fps_ratio=config.mra_fps_ratio,
        attention_heads=config.attention_heads,
        scaled_attention=config.scaled_attention,
        proto_count=config.proto_count,
        use_center_loss=config.use_center_loss,
        center_weight=config.center_weight,
        center_eta=config.center_eta,
        backprop_centers=config.backprop_centers,
        gamma=config.gamma,
        sparsify_k=config.sparsify_k,
        encoder_lr=config.encoder_lr,
        module_lr=config.module_lr,
        encoder_init=encoder_checkpoint,
        edge_relative_only=config.edge_relative_only,
        min_class_points=config.min_class_points,
        random_state=config.seed,
    )
    segmenter.fit(dataset, split=split)

    lines = [
        f"{i} {_format_float(ll)} {_format_float(lr)} {_format_float(total)}"
        for i, ll, lr, total in segmenter.metrics_
    ]
    (out / "metrics").write_text("\n".join(lines) + "\n", encoding="ascii")
    save_model_checkpoint(out / "checkpoints" / "model.ckpt", segmenter.model_, config)
    if segmenter.skipped_:
        log.info("skipped %d degenerate episodes", segmenter.skipped_)
    return segmenter


def evaluate_run(
    run_dir,
    dataset: list[LabeledCloud],
    split: ClassSplit,
    *,
    episode_count: int | None = None,
    ways: int | None = None,
    shots: int | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Evaluate a trained run directory on the test side of the split."""
    run = Path(run_dir)
    config = RunConfig.load(run / "config")
    apply_threads(config)
    model = load_model_checkpoint(run / "checkpoints" / "model.ckpt")
    report = evaluate(
        model,
        config.settings(),
        dataset,
        split,
        ways=ways or config.ways,
        shots=shots or config.shots,
        query_count=config.query_count,
        episode_count=episode_count or config.eval_episodes,
        seed=config.seed if seed is None else seed,
        min_class_points=config.min_class_points,
    )
    return report
