"""Feature clustering codebook: entry table, affine decoder, and losses.

The codebook compresses a scene's high-dimensional semantic space into N
entries; low-dimensional per-Gaussian features reach it through a single
affine layer whose argmax logit selects an entry. Training combines four
terms: a clustering self-entropy, a best-entry cosine pull, a squared
logit alignment to the assigned entry, and an end-to-end cosine
regularizer evaluated through a softmax relaxation of the hard decode
(temperature DECODE_SOFT_TEMP) so gradients can cross the argmax.

All gradient formulas here are analytic and are checked against central
finite differences in the test suite. Argmax ties always break to the
lowest index. The assigned index d is a constant under differentiation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax, xlogy

from .errors import FormatError, ValidationError
from .formats import check_magic, ensure_parent, read_exact

CODEBOOK_MAGIC = b"GOIC"
DECODER_MAGIC = b"GOID"
FORMAT_VERSION = 1

DEFAULT_ENTRIES = 300
DEFAULT_HIGH_DIM = 256
DECODE_SOFT_TEMP = 10.0
MIN_ENTRY_NORM = 1e-8


@dataclass
class Codebook:
    entries: np.ndarray  # (N, D_high)

    def __post_init__(self):
        self.entries = np.atleast_2d(np.asarray(self.entries, dtype=np.float64))

    @property
    def n_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def validate(self) -> None:
        if self.n_entries < 2:
            raise ValidationError("codebook needs at least 2 entries")
        if np.any(np.linalg.norm(self.entries, axis=1) < MIN_ENTRY_NORM):
            raise ValidationError("codebook contains a (near-)zero entry")


@dataclass
class Decoder:
    """Single affine layer mapping D_low features to N entry logits."""

    weight: np.ndarray  # (N, D_low)
    bias: np.ndarray    # (N,)

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValidationError("decoder weight/bias row mismatch")


@dataclass
class LossWeights:
    ent: float = 0.3
    max: float = 1.0
    joint: float = 1.0
    e2e: float = 1.0


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _normalize_rows(v: np.ndarray, name: str = "vector") -> np.ndarray:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < MIN_ENTRY_NORM):
        raise ValidationError(f"zero-norm {name}")
    return v / norms


def kmeans_init(samples: np.ndarray, n_entries: int = DEFAULT_ENTRIES,
                iters: int = 10, seed: int = 0) -> Codebook:
    """Spherical k-means over sampled ground-truth features.

    Cosine-similarity Lloyd iterations with unit-renormalized centroids;
    seeding is k-means++ style on cosine distance. An emptied cluster is
    reseeded with the sample farthest (lowest max-similarity) from all
    current centroids.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValidationError("samples must be a 2D array")
    if samples.shape[0] < n_entries:
        raise ValidationError(
            f"need at least {n_entries} samples, got {samples.shape[0]}")
    unit = _normalize_rows(samples, "sample")
    rng = np.random.default_rng(seed)

    # k-means++ seeding on cosine distance
    m = unit.shape[0]
    centroids = np.empty((n_entries, unit.shape[1]))
    first = int(rng.integers(m))
    centroids[0] = unit[first]
    best_sim = unit @ centroids[0]
    for k in range(1, n_entries):
        dist = np.maximum(0.0, 1.0 - best_sim)
        total = dist.sum()
        if total <= 0:
            pick = int(rng.integers(m))
        else:
            pick = int(rng.choice(m, p=dist / total))
        centroids[k] = unit[pick]
        best_sim = np.maximum(best_sim, unit @ centroids[k])

    for _ in range(max(1, iters)):
        sims = unit @ centroids.T
        assign = np.argmax(sims, axis=1)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, unit)
        counts = np.bincount(assign, minlength=n_entries)
        norms = np.linalg.norm(sums, axis=1)
        empty = (counts == 0) | (norms < MIN_ENTRY_NORM)
        ok = ~empty
        centroids[ok] = sums[ok] / norms[ok, None]
        if np.any(empty):
            far = np.argsort(np.max(sims, axis=1))  # least covered first
            for j, k in zip(far, np.where(empty)[0]):
                centroids[k] = unit[j]
    return Codebook(entries=centroids)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode_logits(f: np.ndarray, dec: Decoder) -> np.ndarray:
    """Entry logits e = W f + b for one feature or a batch of them."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != dec.weight.shape[1]:
        raise ValidationError(
            f"feature dim {f.shape[-1]} does not match decoder "
            f"input dim {dec.weight.shape[1]}")
    return f @ dec.weight.T + dec.bias


def decode_hard(e: np.ndarray, cb: Codebook):
    """Highest-logit entry: returns (index, entry vector). Ties -> lowest."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != cb.n_entries:
        raise ValidationError("logit length does not match codebook size")
    d = np.argmax(e, axis=-1)
    return d, cb.entries[d]


def decode_soft(e: np.ndarray, cb: Codebook,
                temp: float = DECODE_SOFT_TEMP) -> np.ndarray:
    """Softmax-weighted entry mixture; the differentiable decode relaxation."""
    if temp <= 0:
        raise ValidationError("softmax decode temperature must be positive")
    s = softmax(temp * np.asarray(e, dtype=np.float64), axis=-1)
    return s @ cb.entries


def assign_entry(v_gt: np.ndarray, cb: Codebook) -> int | np.ndarray:
    """Index of the entry with the highest cosine similarity to v_gt."""
    u = _normalize_rows(np.asarray(v_gt, dtype=np.float64), "target feature")
    tn = _normalize_rows(cb.entries, "codebook entry")
    d = np.argmax(u @ tn.T, axis=-1)
    return int(d) if d.ndim == 0 else d


# ---------------------------------------------------------------------------
# Losses (scalar forms; the batched path lives in total_loss)
# ---------------------------------------------------------------------------

def _cosine_and_grad(v_fixed_unit: np.ndarray, t: np.ndarray):
    """cos<v, t> and its gradient w.r.t. t, for unit v_fixed_unit."""
    tn = np.linalg.norm(t)
    if tn < MIN_ENTRY_NORM:
        raise ValidationError("zero-norm vector in cosine")
    cos = float(v_fixed_unit @ t / tn)
    grad = v_fixed_unit / tn - cos * t / tn ** 2
    return cos, grad


def loss_ent(v_gt: np.ndarray, cb: Codebook, tau: float):
    """Clustering self-entropy over softmax(tau * cosine similarities).

    Returns (loss, gradient w.r.t. every entry row).
    """
    if tau <= 0:
        raise ValidationError("annealing temperature must be positive")
    v_gt = np.asarray(v_gt, dtype=np.float64)
    u = _normalize_rows(v_gt, "target feature")
    t = cb.entries
    tn = np.linalg.norm(t, axis=1)
    if np.any(tn < MIN_ENTRY_NORM):
        raise ValidationError("zero-norm codebook entry")
    cos = (t @ u) / tn
    p = softmax(tau * cos)
    loss = float(-np.sum(xlogy(p, p)))
    # dH/dz_i = -p_i (log p_i + H), z = tau * cos
    dz = -p * (np.log(p) + loss) * tau
    grad = dz[:, None] * (u[None, :] / tn[:, None] - cos[:, None] * t / (tn ** 2)[:, None])
    return loss, grad


def loss_max(v_gt: np.ndarray, cb: Codebook):
    """1 - cosine to the best-matching entry; gradient only on that row.

    Returns (loss, d, gradient w.r.t. entries[d]).
    """
    d = assign_entry(v_gt, cb)
    u = _normalize_rows(np.asarray(v_gt, dtype=np.float64), "target feature")
    cos, dcos = _cosine_and_grad(u, cb.entries[d])
    return 1.0 - cos, d, -dcos


def loss_joint(e: np.ndarray, d: int):
    """Squared L2 distance of the logits to onehot(d)."""
    e = np.asarray(e, dtype=np.float64)
    if not 0 <= d < e.shape[-1]:
        raise ValidationError(f"entry index {d} out of range")
    r = e.copy()
    r[..., d] -= 1.0
    return float(np.sum(r * r)), 2.0 * r


def loss_e2e(v_gt: np.ndarray, v: np.ndarray):
    """1 - cosine between a decoded feature and its ground truth."""
    u = _normalize_rows(np.asarray(v_gt, dtype=np.float64), "target feature")
    cos, dcos = _cosine_and_grad(u, np.asarray(v, dtype=np.float64))
    return 1.0 - cos, -dcos


# ---------------------------------------------------------------------------
# Combined batched loss
# ---------------------------------------------------------------------------

@dataclass
class LossValue:
    total: float
    ent: float
    max: float
    joint: float
    e2e: float


@dataclass
class LossGrads:
    entries: np.ndarray     # (N, D_high)
    dec_weight: np.ndarray  # (N, D_low)
    dec_bias: np.ndarray    # (N,)
    fhat: np.ndarray        # (B, D_low)


def total_loss(v_gt: np.ndarray, fhat: np.ndarray, cb: Codebook, dec: Decoder,
               tau: float, weights: LossWeights | None = None,
               temp_dec: float = DECODE_SOFT_TEMP):
    """Batch-mean combined loss with gradients for all trainable groups.

    v_gt is (B, D_high) target features, fhat is (B, D_low) rendered
    features. The e2e term decodes through decode_soft so its gradient
    reaches the decoder and the features; the assigned index d is held
    fixed. Returns (LossValue, LossGrads).
    """
    if weights is None:
        weights = LossWeights()
    if tau <= 0 or temp_dec <= 0:
        raise ValidationError("temperatures must be positive")
    v_gt = np.atleast_2d(np.asarray(v_gt, dtype=np.float64))
    fhat = np.atleast_2d(np.asarray(fhat, dtype=np.float64))
    if v_gt.shape[0] != fhat.shape[0] or v_gt.shape[0] == 0:
        raise ValidationError("batch shapes inconsistent or empty")
    if v_gt.shape[1] != cb.dim:
        raise ValidationError("v_gt dimension does not match codebook")
    bsz = v_gt.shape[0]
    n = cb.n_entries

    u = _normalize_rows(v_gt, "target feature")              # (B, Dh)
    t = cb.entries                                           # (N, Dh)
    tn = np.linalg.norm(t, axis=1)
    if np.any(tn < MIN_ENTRY_NORM):
        raise ValidationError("zero-norm codebook entry")
    cos = (u @ t.T) / tn                                     # (B, N)
    d = np.argmax(cos, axis=1)                               # assignments

    grad_entries = np.zeros_like(t)

    # --- entropy term ------------------------------------------------------
    p = softmax(tau * cos, axis=1)
    ent_each = -np.sum(xlogy(p, p), axis=1)
    l_ent = float(ent_each.mean())
    gz = -p * (np.log(p) + ent_each[:, None]) * tau          # dH/d(cos) (B, N)
    grad_entries += (gz.T @ u) / tn[:, None]
    grad_entries -= (np.sum(gz * cos, axis=0)[:, None] * t) / (tn ** 2)[:, None]

    # --- best-entry term ---------------------------------------------------
    cd = cos[np.arange(bsz), d]
    l_max = float(np.mean(1.0 - cd))
    g_rows = -(u / tn[d, None] - cd[:, None] * t[d] / (tn[d] ** 2)[:, None])
    gmax = np.zeros_like(t)
    np.add.at(gmax, d, g_rows)
    grad_entries = weights.ent * grad_entries / bsz + weights.max * gmax / bsz

    # --- logit alignment ---------------------------------------------------
    e = decode_logits(fhat, dec)                             # (B, N)
    r = e.copy()
    r[np.arange(bsz), d] -= 1.0
    l_joint = float(np.mean(np.sum(r * r, axis=1)))
    grad_e = weights.joint * 2.0 * r / bsz                   # (B, N)

    # --- end-to-end term through the soft decode ---------------------------
    s = softmax(temp_dec * e, axis=1)                        # (B, N)
    v = s @ t                                                # (B, Dh)
    vn = np.linalg.norm(v, axis=1)
    if np.any(vn < MIN_ENTRY_NORM):
        raise ValidationError("soft-decoded feature collapsed to zero")
    cos_v = np.sum(u * v, axis=1) / vn
    l_e2e = float(np.mean(1.0 - cos_v))
    gv = -(u / vn[:, None] - (cos_v / vn ** 2)[:, None] * v)  # dL/dv (B, Dh)
    grad_entries += weights.e2e * (s.T @ gv) / bsz
    a = gv @ t.T                                             # (B, N)
    ge_e2e = temp_dec * s * (a - np.sum(s * a, axis=1, keepdims=True))
    grad_e += weights.e2e * ge_e2e / bsz

    value = LossValue(
        total=(weights.ent * l_ent + weights.max * l_max
               + weights.joint * l_joint + weights.e2e * l_e2e),
        ent=l_ent, max=l_max, joint=l_joint, e2e=l_e2e)
    grads = LossGrads(
        entries=grad_entries,
        dec_weight=grad_e.T @ fhat,
        dec_bias=grad_e.sum(axis=0),
        fhat=grad_e @ dec.weight)
    return value, grads


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_codebook(cb: Codebook, path) -> None:
    ensure_parent(path)
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, cb.n_entries, cb.dim))
        f.write(np.ascontiguousarray(cb.entries, dtype="<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        check_magic(f, CODEBOOK_MAGIC)
        version, n, dim = struct.unpack("<III", read_exact(f, 12, "GOIC header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported GOIC version {version}")
        data = read_exact(f, n * dim * 4, "GOIC entries")
        if f.read(1):
            raise FormatError("trailing bytes after GOIC entries")
    cb = Codebook(entries=np.frombuffer(data, dtype="<f4")
                  .reshape(n, dim).astype(np.float64))
    cb.validate()
    return cb


def save_decoder(dec: Decoder, path) -> None:
    ensure_parent(path)
    out_dim, in_dim = dec.weight.shape
    with open(path, "wb") as f:
        f.write(DECODER_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, in_dim, out_dim))
        f.write(np.ascontiguousarray(dec.weight, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(dec.bias, dtype="<f4").tobytes())


def load_decoder(path) -> Decoder:
    with open(path, "rb") as f:
        check_magic(f, DECODER_MAGIC)
        version, in_dim, out_dim = struct.unpack(
            "<III", read_exact(f, 12, "GOID header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported GOID version {version}")
        wdata = read_exact(f, out_dim * in_dim * 4, "GOID weights")
        bdata = read_exact(f, out_dim * 4, "GOID bias")
        if f.read(1):
            raise FormatError("trailing bytes after GOID bias")
    return Decoder(
        weight=np.frombuffer(wdata, dtype="<f4").reshape(out_dim, in_dim)
        .astype(np.float64),
        bias=np.frombuffer(bdata, dtype="<f4").astype(np.float64))
