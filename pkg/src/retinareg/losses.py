"""Training losses and the toy embedder that exercises them.

Covers the two-class detector cross-entropy, the bidirectional quadruplet
descriptor loss with in-batch hard-negative mining, their weighted
combination, balanced batch sampling, and a small MLP embedder trained with
Adam.  Every loss returns analytic gradients; the test suite checks them
against central finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BatchTooSmallError,
    DimensionMismatchError,
    EmptyDatasetError,
    EmptyStratumError,
    FormatError,
    IndivisibleBatchError,
)

VESSEL = 0
BACKGROUND = 1


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    lambda_det: float = 1.0
    lambda_desc: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lambda_det < 0 or self.lambda_desc < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ToyTrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_detector: int = 576
    batch_descriptor: int = 288
    patience: int = 5
    hidden: int = 64
    descriptor_dim: int = 32
    seed: int = 0


# ---------------------------------------------------------------------------
# losses

def bce_detector_loss(logits, labels):
    """Mean two-class cross-entropy and its gradient w.r.t. the logits.

    Stable log-sum-exp form; grad = (softmax - onehot) / B.
    """
    logits = np.asarray(logits, np.float64)
    labels = np.asarray(labels, np.int64)
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"expected (B, 2) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    b = logits.shape[0]
    rows = np.arange(b)
    # two-class form: -log softmax[label] = log(1 + exp(l_other - l_label)),
    # stable for both tails and exact for tiny losses
    diff = logits[rows, 1 - labels] - logits[rows, labels]
    loss = float(np.logaddexp(0.0, diff).mean())
    lse = logits.max(axis=1) + np.log1p(np.exp(logits.min(axis=1) - logits.max(axis=1)))
    grad = np.exp(logits - lse[:, None])
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


def pairwise_distances(x, y) -> np.ndarray:
    """Euclidean distance matrix, squared form clamped at zero before sqrt."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionMismatchError(f"incompatible shapes {x.shape} and {y.shape}")
    sq = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ y.T) + (y * y).sum(axis=1)[None, :]
    np.maximum(sq, 0.0, out=sq)
    return np.sqrt(sq)


def hard_negative_mining(anchors, positives):
    """Closest non-matching descriptor in both directions within the batch.

    n_a_idx[i]: index j != i minimizing d(anchor_i, positive_j).
    n_p_idx[i]: index j != i minimizing d(positive_i, anchor_j).
    Ties break to the smallest index.
    """
    anchors = np.asarray(anchors, np.float64)
    positives = np.asarray(positives, np.float64)
    b = anchors.shape[0]
    if b < 2 or positives.shape[0] != b:
        raise BatchTooSmallError(f"mining needs >= 2 aligned pairs, got {anchors.shape[0]}/{positives.shape[0]}")
    d = pairwise_distances(anchors, positives)
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    n_a_idx = masked.argmin(axis=1)
    n_p_idx = masked.argmin(axis=0)
    return n_a_idx, n_p_idx


def _safe_unit(diff, dist):
    """diff / dist rows, zero where dist is zero (norm gradient at 0 is 0)."""
    out = np.zeros_like(diff)
    nz = dist > 0
    out[nz] = diff[nz] / dist[nz, None]
    return out


def quadruplet_loss(anchors, positives, n_a_idx, n_p_idx, margin: float = 1.0):
    """Bidirectional quadruplet hinge loss and gradients.

    Per pair i with hard negatives n_a = positives[n_a_idx[i]] and
    n_p = anchors[n_p_idx[i]]:

        max(0, m + d(a, p) - d(a, n_a)) + max(0, m + d(p, a) - d(p, n_p))

    averaged over the batch.  Mined indices are constants (no gradient
    through the argmin).
    """
    a = np.asarray(anchors, np.float64)
    p = np.asarray(positives, np.float64)
    n_a_idx = np.asarray(n_a_idx, np.int64)
    n_p_idx = np.asarray(n_p_idx, np.int64)
    b = a.shape[0]

    diff_ap = a - p
    d_ap = np.sqrt((diff_ap * diff_ap).sum(axis=1))
    diff_an = a - p[n_a_idx]
    d_an = np.sqrt((diff_an * diff_an).sum(axis=1))
    diff_pn = p - a[n_p_idx]
    d_pn = np.sqrt((diff_pn * diff_pn).sum(axis=1))

    h1 = margin + d_ap - d_an
    h2 = margin + d_ap - d_pn
    loss = float((np.maximum(h1, 0.0) + np.maximum(h2, 0.0)).mean())

    s1 = (h1 > 0).astype(np.float64)
    s2 = (h2 > 0).astype(np.float64)
    u_ap = _safe_unit(diff_ap, d_ap)
    u_an = _safe_unit(diff_an, d_an)
    u_pn = _safe_unit(diff_pn, d_pn)

    grad_a = (s1 + s2)[:, None] * u_ap - s1[:, None] * u_an
    grad_p = -(s1 + s2)[:, None] * u_ap - s2[:, None] * u_pn
    # the mined negatives live on the opposite side of the batch
    np.add.at(grad_p, n_a_idx, s1[:, None] * u_an)
    np.add.at(grad_a, n_p_idx, s2[:, None] * u_pn)
    grad_a /= b
    grad_p /= b
    return loss, grad_a, grad_p


@dataclass
class MultitaskResult:
    loss: float
    detector_loss: float
    descriptor_loss: float
    grad_logits: np.ndarray
    grad_anchors: np.ndarray
    grad_positives: np.ndarray


def multitask_loss(logits, labels, anchors, positives, cfg: LossConfig = LossConfig()) -> MultitaskResult:
    """Weighted sum of the detector and descriptor losses with gradients."""
    det_loss, det_grad = bce_detector_loss(logits, labels)
    n_a_idx, n_p_idx = hard_negative_mining(anchors, positives)
    desc_loss, grad_a, grad_p = quadruplet_loss(anchors, positives, n_a_idx, n_p_idx, cfg.margin)
    total = cfg.lambda_det * det_loss + cfg.lambda_desc * desc_loss
    return MultitaskResult(
        loss=float(total),
        detector_loss=det_loss,
        descriptor_loss=desc_loss,
        grad_logits=cfg.lambda_det * det_grad,
        grad_anchors=cfg.lambda_desc * grad_a,
        grad_positives=cfg.lambda_desc * grad_p,
    )


def balanced_batch_sampler(pool, batch_size: int, seed) -> np.ndarray:
    """Equal per-stratum draw of sample ids, deterministic for a seed.

    pool maps each (class, modality) stratum to its sample ids.  Draws are
    without replacement, falling back to replacement only when the stratum is
    smaller than its quota.
    """
    strata = sorted(pool.keys())
    if not strata:
        raise EmptyStratumError("no strata")
    for key in strata:
        if len(pool[key]) == 0:
            raise EmptyStratumError(f"stratum {key} is empty")
    if batch_size % len(strata) != 0:
        raise IndivisibleBatchError(f"batch size {batch_size} not divisible by {len(strata)} strata")
    quota = batch_size // len(strata)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for key in strata:
        ids = np.asarray(pool[key])
        replace = ids.shape[0] < quota
        out.append(rng.choice(ids, size=quota, replace=replace))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# toy embedder: flatten -> affine -> relu -> affine -> relu -> two heads

@dataclass
class ToyParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wd: np.ndarray  # logits head
    bd: np.ndarray
    we: np.ndarray  # descriptor head
    be: np.ndarray

    def names(self):
        return ("w1", "b1", "w2", "b2", "wd", "bd", "we", "be")

    def arrays(self):
        return [getattr(self, n) for n in self.names()]

    def copy(self) -> "ToyParams":
        return ToyParams(*[a.copy() for a in self.arrays()])


PATCH_SHAPE = (32, 32, 3)
PATCH_SIZE = 32 * 32 * 3


def init_toy_params(seed: int = 0, hidden: int = 64, descriptor_dim: int = 32) -> ToyParams:
    rng = np.random.default_rng(seed)
    def he(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
    return ToyParams(
        w1=he(PATCH_SIZE, hidden), b1=np.zeros(hidden),
        w2=he(hidden, hidden), b2=np.zeros(hidden),
        wd=he(hidden, 2), bd=np.zeros(2),
        we=he(hidden, descriptor_dim), be=np.zeros(descriptor_dim),
    )


def _flatten_patches(patches) -> np.ndarray:
    arr = np.asarray(patches, np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1:] != PATCH_SHAPE:
        raise ValueError(f"expected {PATCH_SHAPE} patches, got {arr.shape[1:]}")
    # center the [0, 1] pixels; mostly-bright patches otherwise drown the
    # first layer in a shared constant component
    return arr.reshape(arr.shape[0], PATCH_SIZE) - 0.5


def toy_forward(params: ToyParams, patches):
    """Batched forward pass: (logits, l2-normalized descriptors, cache)."""
    x = _flatten_patches(patches)
    h1 = np.maximum(x @ params.w1 + params.b1, 0.0)
    h2 = np.maximum(h1 @ params.w2 + params.b2, 0.0)
    logits = h2 @ params.wd + params.bd
    raw = h2 @ params.we + params.be
    norms = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
    big = norms > 1e-12
    desc = np.where(big, raw / np.where(norms > 0, norms, 1.0), 0.0)
    cache = (x, h1, h2, raw, norms, big, desc)
    return logits, desc, cache


def toy_backward(params: ToyParams, cache, grad_logits=None, grad_desc=None) -> dict:
    """Parameter gradients for upstream gradients on either head."""
    x, h1, h2, raw, norms, big, desc = cache
    b = x.shape[0]
    if grad_logits is None:
        grad_logits = np.zeros((b, params.wd.shape[1]))
    if grad_desc is None:
        grad_desc = np.zeros((b, params.we.shape[1]))

    # through the L2 normalization (zero rows stay zero)
    inner = (desc * grad_desc).sum(axis=1, keepdims=True)
    draw = np.where(big, (grad_desc - desc * inner) / np.where(norms > 0, norms, 1.0), 0.0)

    grads = {}
    grads["wd"] = h2.T @ grad_logits
    grads["bd"] = grad_logits.sum(axis=0)
    grads["we"] = h2.T @ draw
    grads["be"] = draw.sum(axis=0)
    dh2 = grad_logits @ params.wd.T + draw @ params.we.T
    dh2 = dh2 * (h2 > 0)
    grads["w2"] = h1.T @ dh2
    grads["b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ params.w2.T) * (h1 > 0)
    grads["w1"] = x.T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    return grads


def toy_multitask_step(params: ToyParams, det_patches, det_labels,
                       anchor_patches, positive_patches, loss_cfg: LossConfig):
    """Forward + analytic backward of the multitask loss through the embedder."""
    logits, _, det_cache = toy_forward(params, det_patches)
    _, desc_a, cache_a = toy_forward(params, anchor_patches)
    _, desc_p, cache_p = toy_forward(params, positive_patches)
    result = multitask_loss(logits, det_labels, desc_a, desc_p, loss_cfg)

    grads = toy_backward(params, det_cache, grad_logits=result.grad_logits)
    for name, g in toy_backward(params, cache_a, grad_desc=result.grad_anchors).items():
        grads[name] += g
    for name, g in toy_backward(params, cache_p, grad_desc=result.grad_positives).items():
        grads[name] += g
    return result, grads


def toy_multitask_value(params: ToyParams, det_patches, det_labels,
                        anchor_patches, positive_patches, loss_cfg: LossConfig) -> float:
    """Loss value only (used for finite differences and epoch evaluation)."""
    logits, _, _ = toy_forward(params, det_patches)
    _, desc_a, _ = toy_forward(params, anchor_patches)
    _, desc_p, _ = toy_forward(params, positive_patches)
    return multitask_loss(logits, det_labels, desc_a, desc_p, loss_cfg).loss


# ---------------------------------------------------------------------------
# Adam + training loop

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ToyParams, grads: dict) -> None:
        self.t += 1
        for name in params.names():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[name] / (1.0 - self.beta1 ** self.t)
            vhat = self.v[name] / (1.0 - self.beta2 ** self.t)
            arr = getattr(params, name)
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class ToyTrainResult:
    params: ToyParams
    curve: list          # [(train_loss, val_loss), ...] one entry per epoch
    best_epoch: int      # 1-based epoch of the best validation loss


def _pool_eval(params, det_pool, pair_pool, loss_cfg) -> float:
    return toy_multitask_value(params, det_pool.patches, det_pool.labels,
                               pair_pool.anchors, pair_pool.positives, loss_cfg)


def toy_train(dataset, cfg: ToyTrainConfig = ToyTrainConfig(),
              loss_cfg: LossConfig = LossConfig()) -> ToyTrainResult:
    """Adam training of the toy embedder on balanced multitask batches.

    The recorded curve holds full-pool train and validation losses evaluated
    at each epoch end, so a zero learning rate yields a constant curve.
    Early stopping keeps the best-validation parameters (patience epochs
    without improvement stop the loop).
    """
    det_tr, pairs_tr = dataset.det_train, dataset.desc_train
    det_va, pairs_va = dataset.det_val, dataset.desc_val
    if (det_tr.patches.shape[0] == 0 or pairs_tr.anchors.shape[0] == 0
            or det_va.patches.shape[0] == 0 or pairs_va.anchors.shape[0] == 0):
        raise EmptyDatasetError("training pools must be non-empty")

    params = init_toy_params(cfg.seed, cfg.hidden, cfg.descriptor_dim)
    adam = AdamState(lr=cfg.learning_rate)
    n_pairs = pairs_tr.anchors.shape[0]
    steps = max(1, det_tr.patches.shape[0] // cfg.batch_detector)

    curve = []
    best_val = np.inf
    best_params = params.copy()
    best_epoch = 0
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        for step in range(steps):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, step]))
            det_ids = balanced_batch_sampler(det_tr.strata, cfg.batch_detector, rng)
            pair_ids = rng.choice(n_pairs, size=cfg.batch_descriptor,
                                  replace=n_pairs < cfg.batch_descriptor)
            _, grads = toy_multitask_step(
                params,
                det_tr.patches[det_ids], det_tr.labels[det_ids],
                pairs_tr.anchors[pair_ids], pairs_tr.positives[pair_ids],
                loss_cfg)
            adam.step(params, grads)
        train_loss = _pool_eval(params, det_tr, pairs_tr, loss_cfg)
        val_loss = _pool_eval(params, det_va, pairs_va, loss_cfg)
        curve.append((train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return ToyTrainResult(params=best_params, curve=curve, best_epoch=best_epoch)


def write_loss_curve(path, curve) -> None:
    """CSV loss curve: epoch,train_loss,val_loss at 9 significant digits."""
    lines = ["epoch,train_loss,val_loss"]
    for i, (tr, va) in enumerate(curve, start=1):
        lines.append(f"{i},{tr:.9g},{va:.9g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# parameter file: magic + version + json manifest + raw little-endian blobs

_PARAMS_MAGIC = b"RTTP"
_PARAMS_VERSION = 1


def save_params(params: ToyParams, path) -> None:
    names = sorted(params.names())  # blobs follow the sorted manifest order
    manifest = {n: {"shape": list(getattr(params, n).shape), "dtype": "<f8"}
                for n in names}
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<BI", _PARAMS_VERSION, len(mbytes)))
        fh.write(mbytes)
        for n in names:
            fh.write(np.ascontiguousarray(getattr(params, n), "<f8").tobytes())


def load_params(path) -> ToyParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _PARAMS_MAGIC:
        raise FormatError("bad params magic")
    version, mlen = struct.unpack_from("<BI", blob, 4)
    if version != _PARAMS_VERSION:
        raise FormatError(f"unsupported params version {version}")
    manifest = json.loads(blob[9:9 + mlen])
    offset = 9 + mlen
    arrays = {}
    for name in sorted(manifest):
        shape = tuple(manifest[name]["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, "<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return ToyParams(**arrays)
