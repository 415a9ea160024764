"""Synthetic labeled scenes and oracle supervision.

Everything a real pipeline would get from 2D foundation models is
produced here with known ground truth: spatially separated Gaussian
blobs with per-cluster unit embeddings (pairwise near-orthogonal by
rejection sampling), per-view pseudo ground-truth feature maps with
independently redrawn noise (the stand-in for encoder multi-view
inconsistency), oracle target masks, and a text-to-embedding table.

All generators are deterministic functions of (preset, seed, view id).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ValidationError
from .formats import write_feature_map, write_mask
from .osh import EmbeddingTable
from .rasterizer import composite_weights
from .scene import Camera, Scene, look_at_camera, save_camera, save_scene
from .trainer import Dataset

BLOB_RADIUS = 0.5
MIN_CENTER_SPACING = 4.0 * BLOB_RADIUS
EMBED_DIM = 256
MAX_PAIRWISE_COS = 0.3
REJECTION_TRIES = 10_000


@dataclass
class LabeledScene:
    scene: Scene
    labels: np.ndarray              # (G,) cluster id per Gaussian
    cluster_embeddings: np.ndarray  # (K, D_high) unit rows
    label_names: list
    cluster_centers: np.ndarray     # (K, 3)
    background_embedding: np.ndarray  # (D_high,) unit, for empty pixels


def _sample_embeddings(rng: np.random.Generator, count: int,
                       dim: int) -> np.ndarray:
    """Unit vectors with pairwise |cosine| <= MAX_PAIRWISE_COS."""
    out = np.zeros((count, dim))
    n = 0
    for _ in range(REJECTION_TRIES):
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if n == 0 or np.max(np.abs(out[:n] @ v)) <= MAX_PAIRWISE_COS:
            out[n] = v
            n += 1
            if n == count:
                return out
    raise ValidationError("embedding rejection sampling failed")


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _shell_offsets(rng: np.random.Generator, n: int) -> np.ndarray:
    """Offsets on a jittered sphere of roughly BLOB_RADIUS."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radii = BLOB_RADIUS * rng.uniform(0.85, 1.0, size=(n, 1))
    return d * radii


def generate_scene(preset: str = "blocks", n_clusters: int = 5,
                   gaussians_per_cluster: int = 200, seed: int = 0,
                   feature_dim: int = 10,
                   embed_dim: int = EMBED_DIM) -> LabeledScene:
    """Labeled multi-blob scene with well-separated cluster embeddings.

    "blocks" scatters each cluster's Gaussians on a jittered spherical
    shell around its center, "rings" lays them on a circle around it.
    Shell placement plus moderate opacity keeps every Gaussian visible
    from some orbit view, so each one actually receives supervision.
    Cluster centers sit on a ring wide enough that centers stay >= 4
    blob radii apart.
    """
    if preset not in ("blocks", "rings"):
        raise ValidationError(f"unknown scene preset {preset!r}")
    if n_clusters < 2:
        raise ValidationError("need at least 2 clusters")
    rng = np.random.default_rng([seed, {"blocks": 0, "rings": 1}[preset]])
    ring = max(3.0, MIN_CENTER_SPACING / (2.0 * np.sin(np.pi / n_clusters)))
    angles = 2.0 * np.pi * np.arange(n_clusters) / n_clusters
    centers = np.stack([ring * np.cos(angles), ring * np.sin(angles),
                        np.zeros(n_clusters)], axis=1)

    embeddings = _sample_embeddings(rng, n_clusters + 1, embed_dim)
    background = embeddings[-1]
    embeddings = embeddings[:-1]

    per = gaussians_per_cluster
    total = n_clusters * per
    centroids = np.zeros((total, 3))
    labels = np.repeat(np.arange(n_clusters), per)
    rgbs = np.zeros((total, 3))
    for k in range(n_clusters):
        sl = slice(k * per, (k + 1) * per)
        if preset == "blocks":
            offset = _shell_offsets(rng, per)
        else:
            theta = rng.uniform(0.0, 2.0 * np.pi, size=per)
            offset = np.stack([BLOB_RADIUS * 0.7 * np.cos(theta),
                               BLOB_RADIUS * 0.7 * np.sin(theta),
                               rng.normal(0.0, 0.05, size=per)], axis=1)
            offset += rng.normal(0.0, 0.05, size=(per, 3))
        centroids[sl] = centers[k] + offset
        rgbs[sl] = rng.uniform(0.2, 0.9, size=3)

    scene = Scene.from_arrays(
        centroids,
        _random_quaternions(rng, total),
        rng.uniform(0.06, 0.12, size=(total, 3)),
        rng.uniform(0.35, 0.55, size=total),
        rgbs,
        np.zeros((total, feature_dim), dtype=np.float32))
    names = [f"cluster {k}" for k in range(n_clusters)]
    return LabeledScene(scene=scene, labels=labels,
                        cluster_embeddings=embeddings, label_names=names,
                        cluster_centers=centers,
                        background_embedding=background)


def generate_adversarial_pair(base: LabeledScene, target_label: int = 0,
                              distractor_cosine: float = 0.8,
                              seed: int = 0) -> LabeledScene:
    """Add a distractor cluster at exact cosine to the target embedding.

    A fixed 0.6 threshold accepts both target and distractor while a
    refined hyperplane can still separate them. The distractor sits at
    the ring center, spatially disjoint from every existing cluster.
    """
    k = base.cluster_embeddings.shape[0]
    if not 0 <= target_label < k:
        raise ValidationError(f"target label {target_label} does not exist")
    rng = np.random.default_rng([seed, 0xAD7E])
    e_t = base.cluster_embeddings[target_label]
    # Gram-Schmidt a random direction against the target, then mix
    w = rng.normal(size=e_t.shape[0])
    u = w - (w @ e_t) * e_t
    u /= np.linalg.norm(u)
    e_d = distractor_cosine * e_t + np.sqrt(1.0 - distractor_cosine ** 2) * u

    center = np.zeros(3)
    dists = np.linalg.norm(base.cluster_centers - center, axis=1)
    if np.any(dists < MIN_CENTER_SPACING):
        raise ValidationError("no disjoint location for the distractor")

    per = int(np.bincount(base.labels).max())
    offset = _shell_offsets(rng, per)
    scene = base.scene
    merged = Scene.from_arrays(
        np.concatenate([scene.centroids, (center + offset).astype(np.float32)]),
        np.concatenate([scene.rotations,
                        _random_quaternions(rng, per).astype(np.float32)]),
        np.concatenate([scene.scales,
                        rng.uniform(0.06, 0.12, size=(per, 3)).astype(np.float32)]),
        np.concatenate([scene.opacities,
                        rng.uniform(0.35, 0.55, size=per).astype(np.float32)]),
        np.concatenate([scene.rgbs,
                        np.tile(rng.uniform(0.2, 0.9, size=3),
                                (per, 1)).astype(np.float32)]),
        np.concatenate([scene.features,
                        np.zeros((per, scene.feature_dim), dtype=np.float32)]))
    return LabeledScene(
        scene=merged,
        labels=np.concatenate([base.labels, np.full(per, k)]),
        cluster_embeddings=np.vstack([base.cluster_embeddings, e_d]),
        label_names=base.label_names + ["distractor"],
        cluster_centers=np.vstack([base.cluster_centers, center]),
        background_embedding=base.background_embedding)


def orbit_cameras(count: int, *, radius: float = 8.0, height: float = 5.0,
                  width: int = 64, image_height: int = 64, fx: float = 60.0,
                  phase: float = 0.0) -> list[Camera]:
    """Evenly spaced look-at cameras on a ring above the scene plane."""
    cams = []
    for i in range(count):
        a = 2.0 * np.pi * i / count + phase
        eye = (radius * np.cos(a), radius * np.sin(a), height)
        cams.append(look_at_camera(eye, (0.0, 0.0, 0.0), width=width,
                                   height=image_height, fx=fx))
    return cams


def label_weight_sums(ls: LabeledScene, cam: Camera,
                      weights: sparse.csr_matrix | None = None) -> np.ndarray:
    """(H*W, K) composited weight received from each cluster per pixel."""
    if weights is None:
        weights = composite_weights(ls.scene, cam)
    k = ls.cluster_embeddings.shape[0]
    onehot = np.zeros((len(ls.scene), k))
    onehot[np.arange(len(ls.scene)), ls.labels] = 1.0
    return weights @ onehot


def generate_gt_features(ls: LabeledScene, cam: Camera,
                         noise_sigma: float = 0.1, seed: int = 0,
                         view_id: int = 0) -> np.ndarray:
    """Per-pixel pseudo ground-truth features with per-view noise.

    Each covered pixel takes its front-most cluster's embedding (by
    composited weight share) plus an isotropic Gaussian perturbation of
    expected norm noise_sigma (per-coordinate std noise_sigma/sqrt(D))
    redrawn independently per view, renormalized to unit length; empty
    pixels get the fixed background embedding.
    """
    rng = np.random.default_rng([seed, 0x6F, view_id])
    shares = label_weight_sums(ls, cam)
    covered = shares.sum(axis=1) > 0.0
    label = np.argmax(shares, axis=1)
    dim = ls.cluster_embeddings.shape[1]
    out = np.tile(ls.background_embedding, (shares.shape[0], 1))
    base = ls.cluster_embeddings[label[covered]]
    if noise_sigma > 0:
        base = base + rng.normal(0.0, noise_sigma / np.sqrt(dim),
                                 size=(int(covered.sum()), dim))
        base = base / np.linalg.norm(base, axis=1, keepdims=True)
    out[covered] = base
    return out.reshape(cam.height, cam.width, dim).astype(np.float32)


def oracle_mask(ls: LabeledScene, cam: Camera, target_label: int,
                weights: sparse.csr_matrix | None = None) -> np.ndarray:
    """Pixels where the target cluster's composited weight exceeds 0.5."""
    if not 0 <= target_label < ls.cluster_embeddings.shape[0]:
        raise ValidationError(f"unknown label {target_label}")
    shares = label_weight_sums(ls, cam, weights)
    return (shares[:, target_label] > 0.5).reshape(cam.height, cam.width)


def embedding_table(ls: LabeledScene) -> EmbeddingTable:
    entries = {name: ls.cluster_embeddings[i]
               for i, name in enumerate(ls.label_names)}
    return EmbeddingTable(dim=ls.cluster_embeddings.shape[1], entries=entries)


# ---------------------------------------------------------------------------
# Self-contained experiment directories
# ---------------------------------------------------------------------------

@dataclass
class Experiment:
    directory: Path
    labeled: LabeledScene
    train_cams: list
    eval_cams: list
    dataset: Dataset
    scene_path: Path
    manifest_path: Path
    testset_path: Path
    embeddings_path: Path


PRESETS = {
    # name: (scene preset, n_clusters, per cluster, adversarial)
    "blocks5": ("blocks", 5, 200, False),
    "rings3": ("rings", 3, 200, False),
    "adversarial": ("blocks", 5, 200, True),
}


def write_experiment(preset: str, seed: int, outdir, *, n_train_views: int = 20,
                     n_eval_views: int = 3, noise_sigma: float = 0.1,
                     image_size: int = 64) -> Experiment:
    """Generate and persist a complete synthetic experiment directory."""
    if preset not in PRESETS:
        raise ValidationError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    scene_preset, n_clusters, per, adversarial = PRESETS[preset]
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    ls = generate_scene(scene_preset, n_clusters, per, seed)
    if adversarial:
        ls = generate_adversarial_pair(ls, target_label=0, seed=seed)
    train_cams = orbit_cameras(n_train_views, width=image_size,
                               image_height=image_size)
    eval_cams = orbit_cameras(n_eval_views, width=image_size,
                              image_height=image_size,
                              phase=np.pi / max(n_train_views, 1), height=5.5)

    scene_path = outdir / "scene.gois"
    save_scene(ls.scene, scene_path)
    (outdir / "labels.json").write_text(json.dumps({
        "labels": [int(v) for v in ls.labels],
        "names": ls.label_names,
    }))
    table = embedding_table(ls)
    embeddings_path = outdir / "embeddings.json"
    table.save(embeddings_path)

    views = []
    dataset_views = []
    for i, cam in enumerate(train_cams):
        cam_file = f"cam_train_{i:02d}.json"
        feat_file = f"features_train_{i:02d}.goif"
        save_camera(cam, outdir / cam_file)
        gt = generate_gt_features(ls, cam, noise_sigma, seed, view_id=i)
        write_feature_map(outdir / feat_file, gt)
        views.append({"camera": cam_file, "features": feat_file})
        dataset_views.append((cam, gt))
    manifest_path = outdir / "train_manifest.json"
    manifest_path.write_text(json.dumps(
        {"feature_dim_high": ls.cluster_embeddings.shape[1], "views": views},
        indent=1))

    # evaluation cases: each held-out view queried with each cluster name
    # (adversarial preset queries only the contested target)
    query_labels = [0] if adversarial else list(range(n_clusters))
    cases = []
    for i, cam in enumerate(eval_cams):
        cam_file = f"cam_eval_{i}.json"
        save_camera(cam, outdir / cam_file)
        weights = composite_weights(ls.scene, cam)
        for lab in query_labels:
            mask_file = f"mask_eval_{i}_label{lab}.pgm"
            write_mask(outdir / mask_file, oracle_mask(ls, cam, lab, weights))
            cases.append({"camera": cam_file, "gt_mask": mask_file,
                          "text": ls.label_names[lab],
                          "pseudo_mask": mask_file})
    testset_path = outdir / "testset.json"
    testset_path.write_text(json.dumps({"cases": cases}, indent=1))

    (outdir / "experiment.json").write_text(json.dumps(
        {"preset": preset, "seed": seed, "noise_sigma": noise_sigma,
         "n_train_views": n_train_views, "n_eval_views": n_eval_views}))
    dataset = Dataset(views=dataset_views,
                      feature_dim_high=ls.cluster_embeddings.shape[1])
    return Experiment(directory=outdir, labeled=ls, train_cams=train_cams,
                      eval_cams=eval_cams, dataset=dataset,
                      scene_path=scene_path, manifest_path=manifest_path,
                      testset_path=testset_path,
                      embeddings_path=embeddings_path)
