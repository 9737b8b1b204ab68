"""Dataset handling, contrastive training and verification metrics."""

import logging
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, SplitError, TrainingError
from .model import IMAGE_SIZE, FaceImage, SiameseNet, save_checkpoint
from .numerics import SGD
from .pgm import read_pgm, resize_bilinear

log = logging.getLogger(__name__)


def _natural_key(name):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", name)]


@dataclass
class FaceDataset:
    subjects: dict
    source_size: tuple = None  # (width, height) of the files on disk

    def __post_init__(self):
        for sid, imgs in self.subjects.items():
            if len(imgs) < 1:
                raise DatasetError(f"subject {sid!r} has no images")

    @property
    def subject_ids(self):
        return list(self.subjects)

    def __len__(self):
        return sum(len(v) for v in self.subjects.values())

    def items(self):
        for sid, imgs in self.subjects.items():
            for img in imgs:
                yield sid, img

    def head(self, n_subjects):
        """The first ``n_subjects`` subjects, in dataset order."""
        keep = self.subject_ids[:n_subjects]
        return FaceDataset({k: self.subjects[k] for k in keep}, self.source_size)


def image_from_raster(raster, source_id=None):
    """Resize a [0, 1] raster of any size to a network-ready FaceImage."""
    return FaceImage(resize_bilinear(raster, (IMAGE_SIZE, IMAGE_SIZE)).clip(0, 1), source_id)


def load_orl(dir_path, max_subjects=None):
    """Load an ORL-style tree: one sub-directory of P5 PGM files per subject."""
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    subject_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: _natural_key(d.name))
    if max_subjects is not None:
        subject_dirs = subject_dirs[:max_subjects]
    subjects, size = {}, None
    for sdir in subject_dirs:
        files = sorted(sdir.glob("*.pgm"), key=lambda f: _natural_key(f.name))
        imgs = []
        for f in files:
            raster = read_pgm(f)
            size = size or (raster.shape[1], raster.shape[0])
            imgs.append(image_from_raster(raster, f"{sdir.name}/{f.name}"))
        if len(imgs) < 2:
            raise DatasetError(f"subject {sdir.name} has {len(imgs)} image(s); at least 2 are required")
        subjects[sdir.name] = imgs
    if not subjects:
        raise DatasetError(f"no subject directories with PGM files under {root}")
    return FaceDataset(subjects, size)


def split(ds, fraction=0.9, seed=0):
    """Per-subject image split: floor(fraction * n) images of each subject train."""
    if not 0 < fraction < 1:
        raise SplitError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for sid, imgs in ds.subjects.items():
        n_train = math.floor(fraction * len(imgs) + 1e-9)
        if n_train == 0 or n_train == len(imgs):
            raise SplitError(
                f"fraction {fraction} leaves subject {sid!r} ({len(imgs)} images) empty on one side")
        order = rng.permutation(len(imgs))
        train[sid] = [imgs[i] for i in sorted(order[:n_train])]
        test[sid] = [imgs[i] for i in sorted(order[n_train:])]
    return FaceDataset(train, ds.source_size), FaceDataset(test, ds.source_size)


@dataclass
class TrainingPair:
    a: FaceImage
    b: FaceImage
    dissimilar: int  # 0 same person, 1 different


def sample_pairs(ds, count, seed=0):
    """Draw ``count`` pairs, half genuine and half impostor, in random order.

    The genuine/impostor split is exact (the odd pair goes either way at
    random) rather than a coin flip per pair. With a single subject every
    pair is genuine.
    """
    if count < 1:
        raise ValueError("pair count must be at least 1")
    rng = np.random.default_rng(seed)
    ids = ds.subject_ids
    pairable = [s for s in ids if len(ds.subjects[s]) >= 2]
    if len(ids) == 1:
        n_same = count
    else:
        n_same = count // 2 + (int(rng.integers(2)) if count % 2 else 0)
    if n_same and not pairable:
        raise DatasetError("no subject has two images to form a genuine pair")

    labels = np.array([0] * n_same + [1] * (count - n_same))
    rng.shuffle(labels)
    pairs = []
    for y in labels:
        if y == 0:
            sid = pairable[rng.integers(len(pairable))]
            i, j = rng.choice(len(ds.subjects[sid]), size=2, replace=False)
            pairs.append(TrainingPair(ds.subjects[sid][i], ds.subjects[sid][j], 0))
        else:
            s1, s2 = rng.choice(len(ids), size=2, replace=False)
            imgs1, imgs2 = ds.subjects[ids[s1]], ds.subjects[ids[s2]]
            pairs.append(TrainingPair(imgs1[rng.integers(len(imgs1))],
                                      imgs2[rng.integers(len(imgs2))], 1))
    return pairs


def contrastive_loss(emb_a, emb_b, dissimilar, margin=2.0):
    """Contrastive loss for one pair or a batch of pairs.

    loss = (1 - y) * d^2 + y * max(0, margin - d)^2 with d the Euclidean
    distance. Returns (loss, grad_a, grad_b); for batched input the loss is
    per pair and the gradients are per row, unscaled. The gradient of d is
    taken as zero when d < 1e-12.
    """
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    single = a.ndim == 1
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    y = np.broadcast_to(np.asarray(dissimilar, dtype=np.float64), a.shape[:1])
    diff = a - b
    d = np.sqrt((diff * diff).sum(axis=1))
    hinge = np.maximum(0.0, margin - d)
    loss = (1 - y) * d * d + y * hinge * hinge
    safe = np.where(d < 1e-12, np.inf, d)
    coef = 2 * (1 - y) - 2 * y * hinge / safe
    grad_a = coef[:, None] * diff
    if single:
        return float(loss[0]), grad_a[0], -grad_a[0]
    return loss, grad_a, -grad_a


@dataclass
class TrainConfig:
    epochs: int = 100
    pairs_per_epoch: int = 360
    batch_size: int = 16
    margin: float = 2.0
    lr: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    split_fraction: float = 0.9
    eval_threshold: float = 1.0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.epochs < 1 or self.pairs_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, pairs_per_epoch and batch_size must be >= 1")


@dataclass
class TrainReport:
    losses: list
    seconds: float
    best_epoch: int
    evaluation: "EvalStats" = None

    @property
    def final_loss(self):
        return self.losses[-1]

    def to_csv(self, path):
        lines = ["epoch,mean_loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(self.losses)]
        Path(path).write_text("\n".join(lines) + "\n")


def _batch_array(images):
    return np.stack([im.pixels for im in images])[:, None]


def train(ds, cfg=None, checkpoint_path=None, on_epoch=None):
    """Train a fresh network on the training split of ``ds``.

    Each epoch samples new pairs, runs ``ceil(pairs_per_epoch / batch_size)``
    SGD steps on the mean batch loss and records the epoch's mean pair
    loss. Returns the parameters of the lowest-loss epoch together with a
    report (including an evaluation of the held-out split against the
    training images).
    """
    cfg = cfg or TrainConfig()
    start = time.perf_counter()
    train_set, test_set = split(ds, cfg.split_fraction, cfg.seed)
    net = SiameseNet(seed=cfg.seed)
    opt = SGD(net.trainable(), lr=cfg.lr, momentum=cfg.momentum)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.epochs)

    losses, best, best_epoch = [], None, 0
    for epoch in range(cfg.epochs):
        pairs = sample_pairs(train_set, cfg.pairs_per_epoch, seeds[epoch])
        total = 0.0
        for b, lo in enumerate(range(0, len(pairs), cfg.batch_size)):
            batch = pairs[lo:lo + cfg.batch_size]
            n = len(batch)
            x = _batch_array([p.a for p in batch] + [p.b for p in batch])
            y = np.array([p.dissimilar for p in batch])
            out = net.forward(x, training=True)
            pair_loss, ga, gb = contrastive_loss(out[:n], out[n:], y, cfg.margin)
            batch_loss = float(pair_loss.mean())
            if not math.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss {batch_loss} at epoch {epoch + 1}, batch {b + 1}")
            net.backward(np.concatenate([ga, gb]) / n)
            opt.step()
            total += float(pair_loss.sum())
        mean_loss = total / len(pairs)
        losses.append(mean_loss)
        if best is None or mean_loss < losses[best_epoch - 1]:
            best, best_epoch = net.snapshot(), epoch + 1
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, cfg.epochs, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)

    net.restore(best)
    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
    stats = evaluate(net, test_set, cfg.eval_threshold, reference=train_set)
    return net, TrainReport(losses, time.perf_counter() - start, best_epoch, stats)


# -- evaluation -------------------------------------------------------------

def embed_dataset(net, ds, batch=64):
    labels, images = zip(*ds.items()) if len(ds) else ((), ())
    out = [net.forward(_batch_array(images[i:i + batch]), training=False)
           for i in range(0, len(images), batch)]
    return list(labels), np.concatenate(out).astype(np.float64) if out else np.zeros((0, 5))


@dataclass
class DistanceSummary:
    count: int
    mean: float
    min: float
    max: float

    @classmethod
    def of(cls, d):
        if len(d) == 0:
            return cls(0, math.nan, math.nan, math.nan)
        return cls(len(d), float(d.mean()), float(d.min()), float(d.max()))


@dataclass
class EvalStats:
    genuine: DistanceSummary
    impostor: DistanceSummary
    threshold: float
    accuracy: float
    balanced_accuracy: float
    best_threshold: float
    best_balanced_accuracy: float
    distances: np.ndarray = field(repr=False)
    same: np.ndarray = field(repr=False)
    pair_index: np.ndarray = field(repr=False)

    def as_dict(self):
        return {
            "genuine": vars(self.genuine), "impostor": vars(self.impostor),
            "threshold": self.threshold, "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "best_threshold": self.best_threshold,
            "best_balanced_accuracy": self.best_balanced_accuracy,
        }


def _rates(distances, same, tau):
    pred_same = distances < tau
    acc = float(np.mean(pred_same == same)) if len(same) else math.nan
    parts = []
    if same.any():
        parts.append(np.mean(pred_same[same]))
    if (~same).any():
        parts.append(np.mean(~pred_same[~same]))
    return acc, float(np.mean(parts)) if parts else math.nan


def best_threshold(distances, same):
    """Threshold maximising balanced accuracy (ties: smallest threshold)."""
    cands = np.unique(distances)
    cands = np.concatenate([[0.0], (cands[:-1] + cands[1:]) / 2, [cands[-1] + 1.0]]) if len(cands) else [0.0]
    best = (-1.0, 0.0)
    for tau in cands:
        bal = _rates(distances, same, tau)[1]
        if bal > best[0]:
            best = (bal, float(tau))
    return best[1], best[0]


def threshold_sweep(stats, taus):
    """Rows of (tau, predicted_same, accuracy, balanced_accuracy)."""
    rows = []
    for tau in taus:
        acc, bal = _rates(stats.distances, stats.same, tau)
        rows.append((float(tau), int(np.sum(stats.distances < tau)), acc, bal))
    return rows


def evaluate(net, test, threshold=1.0, reference=None):
    """Genuine/impostor distance statistics and verification accuracy.

    Without ``reference`` every unordered pair of test images is scored;
    with it, every (test image, reference image) pair is scored instead,
    which is what a one-image-per-subject held-out split needs to produce
    genuine pairs at all. A pair is predicted "same" iff its distance is
    below ``threshold``. ``accuracy`` is the plain fraction of correct
    decisions; ``balanced_accuracy`` averages the genuine-accept and
    impostor-reject rates.
    """
    if len(test) == 0:
        raise DatasetError("cannot evaluate on an empty test set")
    q_labels, q_emb = embed_dataset(net, test)
    if reference is None:
        i, j = np.triu_indices(len(q_labels), k=1)
        d = np.linalg.norm(q_emb[i] - q_emb[j], axis=1)
        same = np.array(q_labels)[i] == np.array(q_labels)[j]
        index = np.stack([i, j], axis=1)
    else:
        r_labels, r_emb = embed_dataset(net, reference)
        d = np.linalg.norm(q_emb[:, None, :] - r_emb[None, :, :], axis=2).ravel()
        same = (np.array(q_labels)[:, None] == np.array(r_labels)[None, :]).ravel()
        i = np.repeat(np.arange(len(q_labels)), len(r_labels))
        index = np.stack([i, np.full_like(i, -1)], axis=1)
    acc, bal = _rates(d, same, threshold)
    best_tau, best_bal = best_threshold(d, same)
    return EvalStats(DistanceSummary.of(d[same]), DistanceSummary.of(d[~same]),
                     threshold, acc, bal, best_tau, best_bal, d, same, index)


def bootstrap_separation(stats, n_test, resamples=1000, seed=0):
    """Fraction of bootstrap resamples of the test images in which every
    genuine distance is below every impostor distance."""
    rng = np.random.default_rng(seed)
    first, second = stats.pair_index[:, 0], stats.pair_index[:, 1]
    hits = 0
    for _ in range(resamples):
        chosen = np.zeros(n_test, dtype=bool)
        chosen[rng.integers(n_test, size=n_test)] = True
        keep = chosen[first] & ((second < 0) | chosen[np.maximum(second, 0)])
        gen, imp = stats.distances[keep & stats.same], stats.distances[keep & ~stats.same]
        if len(gen) == 0 or len(imp) == 0 or gen.max() < imp.min():
            hits += 1
    return hits / resamples
