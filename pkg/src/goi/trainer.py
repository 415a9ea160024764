"""Semantic-field optimization over a frozen Gaussian scene.

One iteration: pick a training view (round-robin over a seed-shuffled
order), gather a batch of surface pixels (accumulated alpha > 0.5),
evaluate the combined codebook loss against the view's ground-truth
feature map, and apply plain gradient-descent steps to the per-Gaussian
features, codebook entries and decoder. Geometry never changes, which
also means the per-view composite weight matrices can be computed once
up front and reused every iteration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, ValidationError
from .formats import read_feature_map
from .rasterizer import composite_weights
from .scene import Camera, Scene, load_camera, load_scene, save_scene
from .codebook import (Codebook, Decoder, LossWeights, load_codebook, load_decoder,
                   save_codebook, save_decoder, total_loss)

ALPHA_SURFACE = 0.5
TRACE_EVERY = 10
MIN_ENTRY_NORM = 1e-8


@dataclass
class TrainConfig:
    iterations: int = 1500
    lambda_ent: float = 0.3
    lambda_max: float = 1.0
    lambda_joint: float = 1.0
    lambda_e2e: float = 1.0
    tau_start: float = 1.0
    tau_end: float = 2.0
    tau_switch_iter: int = 1000
    lr_feature: float = 0.3
    lr_codebook: float = 1.0
    lr_decoder: float = 0.5
    pixels_per_iter: int = 4096
    temp_dec: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        # zero rates are legal so parameter groups can be frozen individually
        if min(self.lr_feature, self.lr_codebook, self.lr_decoder) < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.iterations >= 1 and self.tau_switch_iter > self.iterations:
            raise ValidationError("tau_switch_iter must be <= iterations")
        if self.pixels_per_iter < 1:
            raise ValidationError("pixels_per_iter must be >= 1")

    def loss_weights(self) -> LossWeights:
        return LossWeights(ent=self.lambda_ent, max=self.lambda_max,
                           joint=self.lambda_joint, e2e=self.lambda_e2e)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    """Training views: cameras paired with ground-truth feature maps."""

    views: list  # list of (Camera, np.ndarray of shape (Hg, Wg, D_high))
    feature_dim_high: int

    def __post_init__(self):
        if not self.views:
            raise ValidationError("dataset needs at least one view")
        for cam, gt in self.views:
            if gt.shape[2] != self.feature_dim_high:
                raise ValidationError("GT map dimension mismatch in dataset")

    @classmethod
    def load_manifest(cls, path) -> "Dataset":
        path = Path(path)
        d = json.loads(path.read_text())
        dim = int(d["feature_dim_high"])
        views = []
        for v in d["views"]:
            cam = load_camera(path.parent / v["camera"])
            gt = read_feature_map(path.parent / v["features"])
            views.append((cam, gt))
        return cls(views=views, feature_dim_high=dim)


@dataclass
class TrainedModel:
    scene: Scene
    codebook: Codebook
    decoder: Decoder
    meta: dict = field(default_factory=dict)


def tau_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Step annealing: tau_start until the switch iteration, then tau_end."""
    return cfg.tau_start if iteration < cfg.tau_switch_iter else cfg.tau_end


def init_decoder(n_entries: int, feature_dim: int, seed: int) -> Decoder:
    """Random-weight, zero-bias decoder.

    With zero-initialized features a zero weight matrix would be a fixed
    point (no gradient reaches either the features or the weights), so
    the weights start at small random values to break the symmetry.
    """
    rng = np.random.default_rng([seed, 0xDEC0])
    return Decoder(weight=rng.normal(0.0, 0.5, size=(n_entries, feature_dim)),
                   bias=np.zeros(n_entries))


def _nearest_gt_lookup(cam: Camera, gt: np.ndarray) -> np.ndarray:
    """Flat render-pixel -> flat GT-pixel index map (nearest neighbor)."""
    gh, gw = gt.shape[:2]
    rows = np.minimum((np.arange(cam.height) * gh) // cam.height, gh - 1)
    cols = np.minimum((np.arange(cam.width) * gw) // cam.width, gw - 1)
    return (rows[:, None] * gw + cols[None, :]).ravel()


def train_semantic_field(scene: Scene, dataset: Dataset, cb0: Codebook,
                         cfg: TrainConfig | None = None,
                         log=None) -> TrainedModel:
    if cfg is None:
        cfg = TrainConfig()
    if dataset.feature_dim_high != cb0.dim:
        raise ValidationError("dataset / codebook dimension mismatch")
    scene = scene.copy()
    features = scene.features.astype(np.float64)
    entries = cb0.entries.copy()
    dec = init_decoder(cb0.n_entries, scene.feature_dim, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    weights = cfg.loss_weights()

    # geometry is frozen: per-view splat weights are computed once
    view_weights = []
    view_valid = []
    view_gt_flat = []
    for cam, gt in dataset.views:
        wmat = composite_weights(scene, cam)
        alpha = np.asarray(wmat.sum(axis=1)).ravel()
        lut = _nearest_gt_lookup(cam, gt)
        view_weights.append(wmat)
        view_valid.append(np.where(alpha > ALPHA_SURFACE)[0])
        view_gt_flat.append(gt.reshape(-1, gt.shape[2]).astype(np.float64)[lut])

    order = rng.permutation(len(dataset.views))
    trace = []
    for it in range(cfg.iterations):
        vi = int(order[it % len(order)])
        valid = view_valid[vi]
        if valid.size == 0:
            if log:
                log(f"iteration {it}: view {vi} has no surface pixels, skipped")
            continue
        if valid.size > cfg.pixels_per_iter:
            pixels = rng.choice(valid, size=cfg.pixels_per_iter, replace=False)
        else:
            pixels = valid
        wrows = view_weights[vi][pixels]
        fhat = wrows @ features
        v_gt = view_gt_flat[vi][pixels]

        tau = tau_schedule(it, cfg)
        cb = Codebook(entries=entries)
        value, grads = total_loss(v_gt, fhat, cb, dec, tau, weights,
                                  temp_dec=cfg.temp_dec)
        if not np.isfinite(value.total):
            raise NumericError(f"non-finite training loss at iteration {it}")

        features -= cfg.lr_feature * (wrows.T @ grads.fhat)
        entries -= cfg.lr_codebook * grads.entries
        dec.weight -= cfg.lr_decoder * grads.dec_weight
        dec.bias -= cfg.lr_decoder * grads.dec_bias

        # degenerate entries are reseeded with random unit vectors
        norms = np.linalg.norm(entries, axis=1)
        dead = norms < MIN_ENTRY_NORM
        if np.any(dead):
            fresh = rng.normal(size=(int(dead.sum()), entries.shape[1]))
            entries[dead] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)

        if it % TRACE_EVERY == 0:
            trace.append([it, value.total, value.ent, value.max,
                          value.joint, value.e2e])
            if log:
                log(f"iteration {it}: loss {value.total:.6f}")

    scene.features = features.astype(np.float32)
    meta = {"config": asdict(cfg), "loss_trace": trace}
    return TrainedModel(scene=scene, codebook=Codebook(entries=entries),
                        decoder=dec, meta=meta)


# ---------------------------------------------------------------------------
# Model directory I/O
# ---------------------------------------------------------------------------

_MODEL_FILES = ("scene.gois", "codebook.goic", "decoder.goid", "meta.json")


def save_model(model: TrainedModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_scene(model.scene, directory / "scene.gois")
    save_codebook(model.codebook, directory / "codebook.goic")
    save_decoder(model.decoder, directory / "decoder.goid")
    (directory / "meta.json").write_text(
        json.dumps(model.meta, indent=1, sort_keys=True))


def load_model(directory) -> TrainedModel:
    directory = Path(directory)
    for name in _MODEL_FILES:
        if not (directory / name).exists():
            raise ValidationError(f"model directory is missing {name}")
    scene = load_scene(directory / "scene.gois")
    cb = load_codebook(directory / "codebook.goic")
    dec = load_decoder(directory / "decoder.goid")
    meta = json.loads((directory / "meta.json").read_text())
    if dec.weight.shape[0] != cb.n_entries:
        raise ValidationError(
            f"decoder outputs {dec.weight.shape[0]} logits but codebook "
            f"has {cb.n_entries} entries")
    if dec.weight.shape[1] != scene.feature_dim:
        raise ValidationError(
            f"decoder input dim {dec.weight.shape[1]} does not match scene "
            f"feature dim {scene.feature_dim}")
    return TrainedModel(scene=scene, codebook=cb, decoder=dec, meta=meta)
