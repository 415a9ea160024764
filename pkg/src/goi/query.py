"""Open-vocabulary querying and scene manipulation.

A query renders the low-dimensional feature map from the requested
view, hard-decodes every surface pixel back to a codebook entry,
normalizes, and classifies against the hyperplane built from the query
embedding. With OSH enabled the plane is first refined on this view
against a pseudo-mask; the refined plane is also what selects the 3D
Gaussians, so one refinement serves all later views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .osh import (Hyperplane, OSHConfig, classify_map, finetune_osh,
                  init_hyperplane, scores)
from .rasterizer import render
from .scene import Camera, Scene
from .codebook import Codebook, Decoder, decode_hard, decode_logits
from .trainer import TrainedModel

ALPHA_SURFACE = 0.5


@dataclass
class QueryResult:
    mask: np.ndarray           # (H, W) bool
    goi_indices: np.ndarray    # strictly increasing indices into the scene
    hyperplane: Hyperplane
    stats: dict


def decode_gaussian_features(scene: Scene, cb: Codebook, dec: Decoder):
    """Hard-decode every Gaussian's stored feature to a codebook entry.

    Returns (entry indices (G,), decoded vectors (G, D_high)) in scene
    order.
    """
    if len(scene) == 0:
        return np.zeros(0, dtype=int), np.zeros((0, cb.dim))
    logits = decode_logits(scene.features.astype(np.float64), dec)
    return decode_hard(logits, cb)


def select_goi(scene: Scene, cb: Codebook, dec: Decoder,
               h: Hyperplane) -> np.ndarray:
    """Indices of Gaussians whose normalized decoded feature is positive."""
    _, decoded = decode_gaussian_features(scene, cb, dec)
    if decoded.shape[0] == 0:
        return np.zeros(0, dtype=int)
    norms = np.linalg.norm(decoded, axis=1, keepdims=True)
    unit = decoded / np.maximum(norms, 1e-300)
    return np.where(scores(h, unit) > 0.0)[0]


def decode_pixel_features(model: TrainedModel, cam: Camera):
    """Render a view and hard-decode each pixel; returns (decoded, valid).

    decoded is (H, W, D_high) with unit rows on valid pixels; valid is
    the alpha > 0.5 surface mask.
    """
    out = render(model.scene, cam)
    flat = out.ld_features.reshape(-1, model.scene.feature_dim).astype(np.float64)
    logits = decode_logits(flat, model.decoder)
    _, decoded = decode_hard(logits, model.codebook)
    norms = np.linalg.norm(decoded, axis=1, keepdims=True)
    decoded = decoded / np.maximum(norms, 1e-300)
    valid = out.alpha > ALPHA_SURFACE
    return decoded.reshape(cam.height, cam.width, -1), valid


def open_vocab_query(model: TrainedModel, cam: Camera,
                     text_embedding: np.ndarray,
                     pseudo_mask: np.ndarray | None = None, *,
                     use_osh: bool = True, threshold: float = 0.6,
                     osh_cfg: OSHConfig | None = None) -> QueryResult:
    """Full query pipeline: 2D mask plus the selected 3D Gaussian set."""
    emb = np.asarray(text_embedding, dtype=np.float64).reshape(-1)
    if emb.size == 0 or np.linalg.norm(emb) == 0.0:
        raise ValidationError("query embedding must be non-empty and non-zero")
    if emb.size != model.codebook.dim:
        raise ValidationError(
            f"embedding dim {emb.size} does not match codebook "
            f"dim {model.codebook.dim}")
    decoded, valid = decode_pixel_features(model, cam)
    h = init_hyperplane(emb, threshold)
    if use_osh:
        if pseudo_mask is None:
            raise ValidationError("OSH refinement requires a pseudo-mask")
        if osh_cfg is None:
            osh_cfg = OSHConfig(init_threshold=threshold)
        h, _ = finetune_osh(h, decoded, valid, pseudo_mask, osh_cfg)
    mask = classify_map(h, decoded, valid)
    goi = select_goi(model.scene, model.codebook, model.decoder, h)
    return QueryResult(mask=mask, goi_indices=goi, hyperplane=h,
                       stats={"positive_pixels": int(mask.sum()),
                              "selected_gaussians": int(goi.size)})


def overlay_image(rgb: np.ndarray, mask: np.ndarray,
                  color=(1.0, 0.2, 0.2)) -> np.ndarray:
    """Alpha-blend selected pixels 50% toward a highlight color."""
    out = np.asarray(rgb, dtype=np.float64).copy()
    out[mask] = 0.5 * out[mask] + 0.5 * np.asarray(color, dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Scene manipulation
# ---------------------------------------------------------------------------

def manipulate(scene: Scene, indices, action: str, *, delta=None,
               color=None) -> Scene:
    """Return a new scene with the indexed Gaussians edited.

    action: "delete", "extract", "translate" (needs delta) or
    "highlight" (needs color). Feature vectors are never altered.
    """
    indices = np.asarray(indices, dtype=int).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= len(scene)):
        raise ValidationError("manipulation index out of range")
    out = scene.copy()
    if action == "delete":
        keep = np.setdiff1d(np.arange(len(scene)), indices)
        return _subset(out, keep)
    if action == "extract":
        return _subset(out, np.unique(indices))
    if action == "translate":
        if delta is None:
            raise ValidationError("translate requires a 3-vector delta")
        out.centroids[indices] += np.asarray(delta, dtype=np.float32).reshape(3)
        return out
    if action == "highlight":
        if color is None:
            raise ValidationError("highlight requires an rgb color")
        out.rgbs[indices] = np.asarray(color, dtype=np.float32).reshape(3)
        return out
    raise ValidationError(f"unknown manipulation action {action!r}")


def _subset(scene: Scene, keep: np.ndarray) -> Scene:
    return Scene.from_arrays(scene.centroids[keep], scene.rotations[keep],
                             scene.scales[keep], scene.opacities[keep],
                             scene.rgbs[keep], scene.features[keep])
