"""Losses and evaluation metrics for occupancy, latents and LiDAR clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, rel_entr, softplus

from .errors import AllMasked, BinMismatch, DimMismatch, NotNormalized, ShapeMismatch
from .voxgrid import UNKNOWN, SemanticOccupancyGrid

_NORM_TOL = 1e-6


# --------------------------------------------------------------------------- IoU


@dataclass(frozen=True)
class ConfusionTally:
    """Per-class TP/FP/FN counts; tallies add, so partial results can be merged."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionTally":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z, z.copy(), z.copy())

    @classmethod
    def from_labels(cls, pred, gt, num_classes: int, ignore: int = UNKNOWN) -> "ConfusionTally":
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        keep = gt != ignore
        pred, gt = pred[keep], gt[keep]
        k = num_classes
        hit = pred == gt
        tp = np.bincount(gt[hit], minlength=k)[:k]
        # predictions of the ignore code (or out of range) never count as a class
        pv = (pred >= 0) & (pred < k)
        fp = np.bincount(pred[~hit & pv], minlength=k)[:k]
        fn = np.bincount(gt[~hit], minlength=k)[:k]
        return cls(tp, fp, fn)

    def __add__(self, other: "ConfusionTally") -> "ConfusionTally":
        if other.num_classes != self.num_classes:
            raise DimMismatch("tallies have different class counts")
        return ConfusionTally(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def iou(self) -> np.ndarray:
        """IoU per class; NaN where the class is absent from both sides."""
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)


@dataclass(frozen=True)
class IouReport:
    per_class: np.ndarray  # index = class code, NaN when undefined
    miou: float
    iou: float  # occupied vs free


def iou_miou(pred: SemanticOccupancyGrid, gt: SemanticOccupancyGrid) -> IouReport:
    """Per-class IoU, mIoU over the semantic classes (1..K-1) and binary occupancy IoU.

    Cells labelled unknown in ``gt`` are excluded everywhere.
    """
    if pred.dims != gt.dims:
        raise DimMismatch(f"grid dims differ: {pred.dims} vs {gt.dims}")
    k = max(pred.num_classes, gt.num_classes)
    tally = ConfusionTally.from_labels(pred.labels, gt.labels, k)
    per = tally.iou()
    sem = per[1:]
    sem = sem[~np.isnan(sem)]
    miou = float(sem.mean()) if len(sem) else float("nan")

    keep = gt.labels != UNKNOWN
    po = pred.occupied[keep]
    go = gt.occupied[keep]
    union = np.count_nonzero(po | go)
    iou = np.count_nonzero(po & go) / union if union else float("nan")
    return IouReport(per, miou, float(iou))


# --------------------------------------------------------------------------- segmentation losses


def _flat_logits(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    k = logits.shape[-1]
    logits = logits.reshape(-1, k)
    labels = labels.ravel()
    if len(labels) != len(logits):
        raise ShapeMismatch(f"{len(logits)} logit rows vs {len(labels)} labels")
    return logits, labels


def cross_entropy(logits, labels, ignore: int = UNKNOWN) -> float:
    """Mean ``-log softmax`` at the true class over voxels not labelled ``ignore``."""
    logits, labels = _flat_logits(logits, labels)
    keep = labels != ignore
    if not keep.any():
        raise AllMasked("every voxel is masked")
    lp = log_softmax(logits[keep], axis=1)
    return float(-lp[np.arange(keep.sum()), labels[keep]].mean())


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss along a sorted order."""
    gts = fg_sorted.sum()
    inter = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs, labels, ignore: int = UNKNOWN) -> float:
    """Lovasz-softmax averaged over the classes present in ``labels``."""
    probs, labels = _flat_logits(probs, labels)
    keep = labels != ignore
    probs, labels = probs[keep], labels[keep]
    if len(labels) == 0:
        raise AllMasked("every voxel is masked")
    if (probs < -_NORM_TOL).any() or np.abs(probs.sum(axis=1) - 1.0).max() > _NORM_TOL:
        raise NotNormalized("probability rows must be non-negative and sum to 1")
    losses = []
    for c in np.unique(labels):
        if not 0 <= c < probs.shape[1]:
            raise DimMismatch(f"label {c} has no probability column")
        fg = (labels == c).astype(np.float64)
        err = np.abs(fg - probs[:, c])
        order = np.argsort(-err, kind="stable")
        losses.append(float(err[order] @ lovasz_grad(fg[order])))
    return float(np.mean(losses))


def kl_diag_gauss(mu, logvar) -> float:
    """KL to the standard normal, summed over the last axis and averaged over the rest."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"{mu.shape} vs {logvar.shape}")
    kl = 0.5 * (mu ** 2 + np.exp(logvar) - logvar - 1.0)
    if kl.ndim == 0:
        return float(kl)
    return float(kl.sum(axis=-1).mean())


def vae_loss(logits, labels, mu, logvar, lam1: float = 1.0, lam2: float = 1e-4) -> float:
    """Cross-entropy plus weighted Lovasz-softmax and KL terms."""
    probs = np.exp(log_softmax(np.asarray(logits, dtype=np.float64), axis=-1))
    return (cross_entropy(logits, labels) + lam1 * lovasz_softmax(probs, labels)
            + lam2 * kl_diag_gauss(mu, logvar))


# --------------------------------------------------------------------------- latent losses


def _frame_sq(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    diff = (pred - target).reshape(len(pred), -1) if pred.ndim else (pred - target).reshape(1, 1)
    return (diff ** 2).sum(axis=1)


def masked_mse(pred, target, mask) -> float:
    """Squared error summed over frames with mask 0, divided by their count."""
    se = _frame_sq(pred, target)
    mask = np.asarray(mask, dtype=np.float64).ravel()
    if len(mask) != len(se):
        raise ShapeMismatch(f"{len(mask)} mask entries for {len(se)} frames")
    live = 1.0 - mask
    if live.sum() <= 0:
        raise AllMasked("every frame is masked")
    return float((live * se).sum() / live.sum())


def noise_pred_loss(eps_hat, eps) -> float:
    """Mean over frames of the squared noise-prediction error."""
    return float(_frame_sq(eps_hat, eps).mean())


# --------------------------------------------------------------------------- LiDAR loss


@dataclass(frozen=True)
class LidarLoss:
    total: float
    depth: float
    intensity: float
    drop: float


def lidar_loss(depth_pred, depth_gt, inten_pred, inten_gt, drop_logit, drop_gt,
               lam1: float = 1.0, lam2: float = 1.0) -> LidarLoss:
    """L1 depth + ``lam1`` * L1 intensity + ``lam2`` * BCE on drop logits."""
    arrs = [np.asarray(a, dtype=np.float64).ravel()
            for a in (depth_pred, depth_gt, inten_pred, inten_gt, drop_logit, drop_gt)]
    if len({len(a) for a in arrs}) != 1:
        raise ShapeMismatch(f"ray counts differ: {[len(a) for a in arrs]}")
    dp, dg, ip, ig, logit, flag = arrs
    if len(dp) == 0:
        raise AllMasked("no rays")
    ld = float(np.abs(dp - dg).mean())
    li = float(np.abs(ip - ig).mean())
    # BCE with logits: softplus(x) - y x is stable for either sign
    lb = float((softplus(logit) - flag * logit).mean())
    return LidarLoss(ld + lam1 * li + lam2 * lb, ld, li, lb)


# --------------------------------------------------------------------------- distribution metrics


DEFAULT_BINS = (100, 100)
DEFAULT_RANGE = ((-50.0, 50.0), (-50.0, 50.0))


@dataclass(frozen=True)
class BevHistogram:
    counts: np.ndarray
    range: tuple
    discarded: int = 0

    @property
    def bins(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def mass(self) -> np.ndarray:
        t = self.total
        return self.counts / t if t > 0 else np.zeros(self.counts.shape)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        (x0, x1), (y0, y1) = self.range
        nx, ny = self.bins
        return (x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx,
                y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny)


def bev_histogram(points, bins=DEFAULT_BINS, range=DEFAULT_RANGE) -> BevHistogram:
    """Top-down counts; bins are right-open except the last one along each axis."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = pts.reshape(0, 2)
    bins = (int(bins), int(bins)) if np.isscalar(bins) else tuple(int(b) for b in bins)
    if min(bins) < 1:
        raise DimMismatch(f"bins must be >= 1, got {bins}")
    rng = tuple((float(a), float(b)) for a, b in range)
    if any(not b > a for a, b in rng):
        raise DimMismatch(f"degenerate range {rng}")
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=rng)
    counts = counts.astype(np.int64)
    return BevHistogram(counts, rng, int(len(pts) - counts.sum()))


def _check_bins(hists):
    ref = hists[0]
    for h in hists[1:]:
        if h.bins != ref.bins or h.range != ref.range:
            raise BinMismatch(f"histograms differ: {h.bins}/{h.range} vs {ref.bins}/{ref.range}")


def _gauss_matrix(centers, sigma):
    d = centers[:, None] - centers[None, :]
    return np.exp(-(d ** 2) / (2.0 * sigma ** 2))


def histogram_kernel(hists_a, hists_b, sigma: float) -> np.ndarray:
    """Gram matrix of mean embeddings under a Gaussian kernel on bin centres.

    ``K(P, Q) = sum_ij P_i Q_j exp(-|c_i - c_j|^2 / (2 sigma^2))``; the 2-D
    Gaussian factorises over the axes, so it is two small matrix products.
    """
    cx, cy = hists_a[0].centers()
    gx, gy = _gauss_matrix(cx, sigma), _gauss_matrix(cy, sigma)
    A = np.stack([h.mass for h in hists_a])
    B = np.stack([h.mass for h in hists_b])
    smoothed = np.einsum("ij,njk,kl->nil", gx, B, gy)
    return np.einsum("mil,nil->mn", A, smoothed)


def median_bandwidth(hists) -> float:
    """Median pairwise distance between histogram centroids, floored at one bin width."""
    cx, cy = hists[0].centers()
    (x0, x1), (y0, y1) = hists[0].range
    width = max((x1 - x0) / hists[0].bins[0], (y1 - y0) / hists[0].bins[1])
    cents = []
    for h in hists:
        m = h.mass
        if m.sum() > 0:
            cents.append((m.sum(axis=1) @ cx, m.sum(axis=0) @ cy))
    if len(cents) < 2:
        return width
    c = np.asarray(cents)
    d = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))[np.triu_indices(len(c), 1)]
    return float(max(np.median(d), width))


def mmd(set_a, set_b, bandwidth: float | None = None) -> float:
    """Squared MMD between two sets of BEV histograms, clamped at 0.

    Within-set terms are unbiased (diagonal excluded) for sets of two or more,
    and fall back to the plain average for singletons.
    """
    set_a, set_b = list(set_a), list(set_b)
    if not set_a or not set_b:
        raise DimMismatch("histogram sets must be non-empty")
    _check_bins(set_a + set_b)
    sigma = median_bandwidth(set_a + set_b) if bandwidth is None else float(bandwidth)

    def within(s):
        k = histogram_kernel(s, s, sigma)
        n = len(s)
        if n == 1:
            return float(k[0, 0])
        return float((k.sum() - np.trace(k)) / (n * (n - 1)))

    cross = float(histogram_kernel(set_a, set_b, sigma).mean())
    return max(within(set_a) + within(set_b) - 2.0 * cross, 0.0)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats between two normalized histograms."""
    if isinstance(p, BevHistogram) and isinstance(q, BevHistogram):
        _check_bins([p, q])
    pm = p.mass if isinstance(p, BevHistogram) else np.asarray(p, dtype=np.float64)
    qm = q.mass if isinstance(q, BevHistogram) else np.asarray(q, dtype=np.float64)
    if pm.shape != qm.shape:
        raise BinMismatch(f"{pm.shape} vs {qm.shape}")
    for m in (pm, qm):
        if (m < 0).any() or abs(m.sum() - 1.0) > _NORM_TOL:
            raise NotNormalized("histogram mass must be non-negative and sum to 1")
    mid = 0.5 * (pm + qm)
    val = 0.5 * rel_entr(pm, mid).sum() + 0.5 * rel_entr(qm, mid).sum()
    return float(min(max(val, 0.0), np.log(2.0)))
