"""Independent reference implementations used to check the library.

Everything here is deliberately naive: per-pixel full evaluation, plain
loops, no shared code with the package beyond the documented constants.
"""

import numpy as np

NEAR_PLANE = 0.01
DILATION = 0.3
ALPHA_CLAMP = 0.99
ALPHA_CUTOFF = 1.0 / 255.0
T_STOP = 1e-4


def quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def naive_render(scene, cam):
    """Full per-pixel evaluation of every Gaussian, 64-bit throughout.

    Returns (rgb, ld_features, alpha) as float64 arrays.
    """
    w2c = np.asarray(cam.world_to_camera, dtype=np.float64)
    n = len(scene)
    splats = []  # (depth, index, mean2d, inv_cov, opacity)
    for i in range(n):
        c = scene.centroids[i].astype(np.float64)
        t = w2c[:3, :3] @ c + w2c[:3, 3]
        if t[2] <= NEAR_PLANE:
            continue
        R = quat_to_rot(scene.rotations[i].astype(np.float64))
        S = np.diag(scene.scales[i].astype(np.float64))
        sigma = R @ S @ S.T @ R.T
        tx, ty, tz = t
        J = np.array([[cam.fx / tz, 0.0, -cam.fx * tx / tz ** 2],
                      [0.0, cam.fy / tz, -cam.fy * ty / tz ** 2]])
        M = J @ w2c[:3, :3]
        cov = M @ sigma @ M.T + DILATION * np.eye(2)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
        if det <= 0 or cov[0, 0] <= 0 or cov[1, 1] <= 0:
            continue
        mean2d = np.array([cam.fx * tx / tz + cam.cx,
                           cam.fy * ty / tz + cam.cy])
        splats.append((tz, i, mean2d, np.linalg.inv(cov),
                       float(scene.opacities[i])))
    splats.sort(key=lambda s: (s[0], s[1]))

    h, wid = cam.height, cam.width
    d = scene.feature_dim
    rgb = np.zeros((h, wid, 3))
    feat = np.zeros((h, wid, d))
    alpha_map = np.zeros((h, wid))
    px, py = np.meshgrid(np.arange(wid, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    # dense front-to-back compositing: every splat evaluated on every
    # pixel (no bounding boxes), transmittance tracked per pixel
    T = np.ones((h, wid))
    for tz, i, mean2d, inv_cov, op in splats:
        dx = px - mean2d[0]
        dy = py - mean2d[1]
        q = (inv_cov[0, 0] * dx * dx + 2.0 * inv_cov[0, 1] * dx * dy
             + inv_cov[1, 1] * dy * dy)
        a = np.minimum(op * np.exp(-0.5 * q), ALPHA_CLAMP)
        a[a < ALPHA_CUTOFF] = 0.0
        w = np.where(T >= T_STOP, a * T, 0.0)
        rgb += w[:, :, None] * scene.rgbs[i]
        feat += w[:, :, None] * scene.features[i]
        alpha_map += w
        T = np.where(T >= T_STOP, T * (1.0 - a), T)
    return rgb, feat, alpha_map


def naive_weights(scene, cam):
    """Dense (H*W, G) composite weight matrix by full evaluation."""
    n = len(scene)
    saved = scene.features
    weights = np.zeros((cam.height * cam.width, n))
    # probe one gaussian at a time through the feature channel
    for i in range(n):
        probe = np.zeros((n, 1), dtype=np.float32)
        probe[i] = 1.0
        scene.features = probe
        _, feat, _ = naive_render(scene, cam)
        weights[:, i] = feat.reshape(-1)
    scene.features = saved
    return weights


def mc_covariance(g_rotation, g_scale, centroid, cam, n_samples=100_000,
                  seed=0):
    """Monte-Carlo screen-space covariance of a projected Gaussian.

    Samples 3D points from the Gaussian, projects each through the full
    (nonlinear) pinhole model, and returns the sample covariance of the
    2D projections. For small Gaussians this approaches J W Sigma Wt Jt.
    """
    rng = np.random.default_rng(seed)
    R = quat_to_rot(np.asarray(g_rotation, dtype=np.float64))
    pts = (R @ np.diag(g_scale) @ rng.normal(size=(3, n_samples))).T + centroid
    w2c = np.asarray(cam.world_to_camera, dtype=np.float64)
    t = pts @ w2c[:3, :3].T + w2c[:3, 3]
    uv = np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx,
                   cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)
    return np.cov(uv.T)


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def random_scene(seed, n_gaussians, feature_dim=4, spread=2.0):
    """Random valid scene for fuzz tests (import kept local on purpose)."""
    from goi.scene import Scene
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n_gaussians, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Scene.from_arrays(
        rng.uniform(-spread, spread, size=(n_gaussians, 3)),
        q,
        rng.uniform(0.05, 0.4, size=(n_gaussians, 3)),
        rng.uniform(0.05, 1.0, size=n_gaussians),
        rng.uniform(0.0, 1.0, size=(n_gaussians, 3)),
        rng.normal(size=(n_gaussians, feature_dim)).astype(np.float32))
