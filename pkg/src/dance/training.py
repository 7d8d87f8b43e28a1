"""Losses, synthetic data, the training loop, evaluation, and robustness benches.

The hard opacity filter used at inference passes no gradient, so training
supervises opacities with a binary cross-entropy against distance-derived
targets (refined point within opacity_tau of the ground truth) and computes
the Chamfer term over the observed input joined with the candidates whose
target is 1. Nearest-neighbor assignments are held constant within a step;
gradients flow through the distances only.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .errors import CategoryError, EmptyCloud, LabelError
from .geometry import (PointCloud, Role, assemble_output, build_view_rig,
                       generate_candidates, normalize_cloud, union_prediction)
from .metrics import MetricReport, add_gaussian_noise, metric_report
from .model import ModelConfig, ModelParams, forward, init_model_params


@dataclass
class TrainConfig:
    lambda_: float = 0.9        # completion-vs-classification mix
    opacity_tau: float = 0.03   # distance bound for positive opacity targets
    opacity_beta: float = 1.0   # weight of the opacity term
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    use_classification: bool = True
    use_face_attention: bool = True
    # per-sample subsampling caps keep single-core steps cheap; None disables
    max_input_points: int = 1024
    loss_gt_points: int = 1024

    def validate(self):
        if not 0 <= self.lambda_ <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.opacity_tau <= 0:
            raise ValueError("opacity_tau must be positive")
        if self.opacity_beta < 0 or self.lr <= 0:
            raise ValueError("opacity_beta must be >= 0 and lr > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        return self


@dataclass
class Sample:
    partial: PointCloud
    complete: PointCloud
    label: int
    category_name: str
    sample_id: str = ""
    shape_params: dict = field(default_factory=dict)


def worker_count():
    """Worker cap for parallel sections: DANCE_THREADS or the core count."""
    env = os.environ.get("DANCE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _parallel_map(fn, items):
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


def nearest_indices(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Index of each query's nearest target, exhaustively, lowest index on ties."""
    out = np.empty(len(queries), dtype=np.int64)
    t2 = np.einsum("ij,ij->i", targets, targets)
    for start in range(0, len(queries), 512):
        q = queries[start:start + 512]
        d2 = (np.einsum("ij,ij->i", q, q)[:, None] + t2[None, :] - 2.0 * (q @ targets.T))
        out[start:start + 512] = d2.argmin(axis=1)
    return out


def nearest_dists(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    idx = nearest_indices(queries, targets)
    return np.linalg.norm(queries - targets[idx], axis=1)


def completion_loss(pred, gt):
    """Differentiable symmetric l1 Chamfer between a predicted cloud and a target.

    pred is an (N, 3) tensor (gradients flow into it); gt is a constant array.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    pred_np = np.asarray(pred, dtype=np.float64)
    if pred_np.size == 0 or gt.size == 0:
        raise EmptyCloud("completion loss requires non-empty clouds")
    pred = pred if isinstance(pred, Tensor) else Tensor(pred_np)
    idx_pg = nearest_indices(pred_np, gt)
    idx_gp = nearest_indices(gt, pred_np)
    d_pg = ad.l2norm_rows(ad.sub(pred, Tensor(gt[idx_pg])))
    d_gp = ad.l2norm_rows(ad.sub(ad.take_rows(pred, idx_gp), Tensor(gt)))
    return ad.scale(ad.add(ad.mean_all(d_pg), ad.mean_all(d_gp)), 0.5)


def _bce(opacities, targets: np.ndarray):
    s = ad.clip(opacities, 1e-12, 1.0 - 1e-12)
    pos = ad.mul(Tensor(targets), ad.log(s))
    neg = ad.mul(Tensor(1.0 - targets), ad.log(ad.sub(Tensor(np.ones_like(targets)), s)))
    return ad.neg(ad.mean_all(ad.add(pos, neg)))


def opacity_loss(pred, refined_points, gt, tau):
    """BCE between opacities and binary targets: refined point within tau of gt."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    refined = np.asarray(refined_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    targets = (nearest_dists(refined, gt) < tau).astype(np.float64)
    opac = pred.opacities if isinstance(pred.opacities, Tensor) else Tensor(pred.opacities)
    return _bce(opac, targets)


def classification_loss(p_cls, label: int):
    probs = p_cls.probs if isinstance(p_cls.probs, Tensor) else Tensor(p_cls.probs)
    c = probs.size
    if not 0 <= label < c:
        raise LabelError(f"label {label} outside [0, {c})")
    p = ad.take_rows(ad.reshape(probs, (c,)), np.array([label]))
    return ad.mean_all(ad.neg(ad.log(ad.clip(p, 1e-12, 1.0))))


def total_loss(l_cd, l_opacity, l_cls, config: TrainConfig):
    """lambda * (completion + beta * opacity) + (1 - lambda) * classification."""
    lam = 1.0 if not config.use_classification else config.lambda_
    completion = ad.add(l_cd, ad.scale(l_opacity, config.opacity_beta))
    return ad.add(ad.scale(completion, lam), ad.scale(l_cls, 1.0 - lam))


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

CATEGORIES = ("sphere", "cuboid", "cylinder", "cone", "torus")


def _unit_vector(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _draw_shape_params(category, rng):
    if category == "sphere":
        return {"radius": rng.uniform(0.3, 0.6)}
    if category == "cuboid":
        return {"half_extents": rng.uniform(0.2, 0.5, size=3).tolist()}
    if category == "cylinder":
        return {"radius": rng.uniform(0.15, 0.4), "half_height": rng.uniform(0.3, 0.6)}
    if category == "cone":
        return {"radius": rng.uniform(0.2, 0.45), "height": rng.uniform(0.4, 0.9)}
    if category == "torus":
        major = rng.uniform(0.25, 0.4)
        return {"major": major, "minor": rng.uniform(0.08, min(0.18, 0.8 * major))}
    raise CategoryError(f"unknown category {category!r}")


def _sample_surface(category, p, n, rng):
    if category == "sphere":
        v = rng.normal(size=(n, 3))
        return p["radius"] * v / np.linalg.norm(v, axis=1)[:, None]

    if category == "cuboid":
        a, b, c = p["half_extents"]
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        half = np.array([a, b, c])
        for f in range(6):
            m = face == f
            axis, sign = divmod(f, 2)
            others = [k for k in range(3) if k != axis]
            pts[m, axis] = half[axis] * (1.0 if sign == 0 else -1.0)
            pts[m, others[0]] = uv[m, 0] * half[others[0]]
            pts[m, others[1]] = uv[m, 1] * half[others[1]]
        return pts

    if category == "cylinder":
        r, h = p["radius"], p["half_height"]
        areas = np.array([2 * np.pi * r * 2 * h, np.pi * r ** 2, np.pi * r ** 2])
        part = rng.choice(3, size=n, p=areas / areas.sum())
        theta = rng.uniform(0, 2 * np.pi, size=n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(part == 0, rng.uniform(-h, h, size=n), np.where(part == 1, h, -h))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)

    if category == "cone":
        r, h = p["radius"], p["height"]
        slant = np.sqrt(r ** 2 + h ** 2)
        areas = np.array([np.pi * r * slant, np.pi * r ** 2])
        part = rng.choice(2, size=n, p=areas / areas.sum())
        theta = rng.uniform(0, 2 * np.pi, size=n)
        # sqrt makes both the slant and the base disc uniform in area
        u = np.sqrt(rng.uniform(size=n))
        rad = u * r
        z = np.where(part == 0, h * (1.0 - u), 0.0)
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
        pts[:, 2] -= h / 2.0
        return pts

    if category == "torus":
        major, minor = p["major"], p["minor"]
        phi = rng.uniform(0, 2 * np.pi, size=n)
        theta = np.empty(n)
        have = 0
        while have < n:  # rejection keeps the surface density uniform
            cand = rng.uniform(0, 2 * np.pi, size=2 * (n - have))
            accept = rng.uniform(size=cand.size) < (major + minor * np.cos(cand)) / (major + minor)
            got = cand[accept][: n - have]
            theta[have:have + got.size] = got
            have += got.size
        ring = major + minor * np.cos(theta)
        return np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)], axis=1)

    raise CategoryError(f"unknown category {category!r}")


def generate_synthetic_dataset(n_per_class, categories, points_per_shape=2048, seed=0):
    """Complete/partial sample pairs over parametric shapes.

    Each partial cloud drops the fraction (uniform in [0.25, 0.5]) of points
    that sit deepest along a random occlusion direction; original point order
    is preserved for the survivors. Deterministic given seed.
    """
    for cat in categories:
        if cat not in CATEGORIES:
            raise CategoryError(f"unknown category {cat!r}; options: {', '.join(CATEGORIES)}")
    if points_per_shape < 256:
        raise ValueError("points_per_shape must be >= 256")
    samples = []
    for ci, cat in enumerate(categories):
        for k in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), ci, k)))
            p = _draw_shape_params(cat, rng)
            complete = _sample_surface(cat, p, points_per_shape, rng)
            direction = _unit_vector(rng)
            frac = rng.uniform(0.25, 0.5)
            scores = (complete - complete.mean(axis=0)) @ direction
            n_keep = points_per_shape - int(round(frac * points_per_shape))
            keep = np.sort(np.argsort(scores, kind="stable")[:n_keep])
            samples.append(Sample(
                partial=PointCloud(complete[keep], role=Role.INPUT),
                complete=PointCloud(complete, role=Role.GROUND_TRUTH),
                label=ci,
                category_name=cat,
                sample_id=f"{cat}_{k:03d}",
                shape_params=p,
            ))
    return samples


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _subsample(points: np.ndarray, cap, rng) -> np.ndarray:
    if cap is None or len(points) <= cap:
        return points
    return points[np.sort(rng.choice(len(points), size=cap, replace=False))]


def _sample_step(sample: Sample, params: ModelParams, rig, tcfg: TrainConfig, seed_parts):
    """Forward + losses for one sample; returns scalar stats, grads on the tape."""
    partial_n, tfm = normalize_cloud(sample.partial)
    gt_n = tfm.apply(sample.complete.points)
    rng_in = np.random.default_rng(np.random.SeedSequence((*seed_parts, 1)))
    rng_gt = np.random.default_rng(np.random.SeedSequence((*seed_parts, 2)))
    inp = _subsample(partial_n.points, tcfg.max_input_points, rng_in)
    gt_loss = _subsample(gt_n, tcfg.loss_gt_points, rng_gt)
    cands = generate_candidates(rig, PointCloud(inp), _derive_seed(*seed_parts, 3))

    with Tape() as tape:
        pred, p_cls = forward(PointCloud(inp), cands, params,
                              use_classification=tcfg.use_classification,
                              use_face_attention=tcfg.use_face_attention)
        refined = ad.add(ad.batched_matvec(cands.local_frames, pred.offsets),
                         Tensor(cands.points))
        targets = (nearest_dists(refined.data, gt_loss) < tcfg.opacity_tau)
        sel = np.flatnonzero(targets)
        parts = [Tensor(inp)]
        if sel.size:
            parts.append(ad.take_rows(refined, sel))
        l_cd = completion_loss(ad.concat_rows(parts), gt_loss)
        l_op = _bce(pred.opacities, targets.astype(np.float64))
        if tcfg.use_classification:
            l_cls = classification_loss(p_cls, sample.label)
        else:
            l_cls = Tensor(0.0)
        loss = total_loss(l_cd, l_op, l_cls, tcfg)
        tape.backward(loss)

    correct = p_cls.argmax() == sample.label
    return loss.item(), l_cd.item(), correct


def train(dataset, model_config: ModelConfig, train_config: TrainConfig, spread=0.25):
    """Optimize the model on (partial, complete) pairs; returns (params, history).

    history holds one {loss, cd, cls_accuracy} dict per epoch, averaged over
    the samples seen that epoch. Deterministic given train_config.seed.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    model_config.validate()
    train_config.validate()
    if max(s.label for s in dataset) >= model_config.c:
        raise LabelError("dataset labels exceed the configured category count")
    params = init_model_params(model_config, train_config.seed)
    opt = Adam(params.parameters(), lr=train_config.lr)
    rig = build_view_rig(model_config.v_count, model_config.r, spread)
    seed = train_config.seed
    history = []
    for epoch in range(train_config.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence((seed, 7, epoch))).permutation(len(dataset))
        losses, cds, hits = [], [], 0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            for idx in batch:
                loss, cd, correct = _sample_step(
                    dataset[idx], params, rig, train_config, (seed, epoch, int(idx)))
                losses.append(loss)
                cds.append(cd)
                hits += bool(correct)
            for p in opt.params:
                if p.grad is not None:
                    p.grad /= len(batch)
            opt.step()
            opt.zero_grad()
        history.append({
            "loss": float(np.mean(losses)),
            "cd": float(np.mean(cds)),
            "cls_accuracy": hits / len(order),
        })
    return params, history


# ---------------------------------------------------------------------------
# evaluation and benches
# ---------------------------------------------------------------------------

def complete_cloud(partial: PointCloud, params: ModelParams, rig, threshold=0.5, seed=0,
                   use_classification=True, use_face_attention=True):
    """Run inference on one partial cloud.

    Returns (P_out, P_pred, class distribution) in the partial cloud's
    original coordinate frame.
    """
    partial_n, tfm = normalize_cloud(partial)
    cands = generate_candidates(rig, partial_n, seed)
    pred, p_cls = forward(partial_n, cands, params,
                          use_classification=use_classification,
                          use_face_attention=use_face_attention)
    out_n = assemble_output(cands, pred, threshold)
    out = PointCloud(tfm.invert(out_n.points), role=Role.OUTPUT)
    return out, union_prediction(partial, out), p_cls


def evaluate(params: ModelParams, dataset, rig, threshold=0.5, seed=0,
             use_classification=True, use_face_attention=True):
    """Per-sample metric reports plus their mean.

    Each sample is completed at the given opacity threshold, joined with its
    observed input, and scored against the full ground truth in the original
    frame. Returns (rows, aggregate) where rows are (sample_id, MetricReport).
    """
    def one(pair):
        i, s = pair
        _, p_pred, _ = complete_cloud(
            s.partial, params, rig, threshold, _derive_seed(seed, 11, i),
            use_classification, use_face_attention)
        return s.sample_id or f"sample_{i:05d}", metric_report(p_pred.points, s.complete.points)

    rows = _parallel_map(one, list(enumerate(dataset)))
    agg = MetricReport(*(float(np.mean([getattr(r, f) for _, r in rows]))
                         for f in ("cd_l1", "cd_l2", "dcd", "f1_at_1pct", "precision", "recall")))
    return rows, agg


def classification_accuracy(params: ModelParams, dataset, rig, seed=0):
    def one(pair):
        i, s = pair
        partial_n, _ = normalize_cloud(s.partial)
        cands = generate_candidates(rig, partial_n, _derive_seed(seed, 11, i))
        _, p_cls = forward(partial_n, cands, params)
        return p_cls.argmax() == s.label

    hits = _parallel_map(one, list(enumerate(dataset)))
    return float(np.mean(hits))


def noise_bench(params: ModelParams, dataset, sigmas=(0.0, 0.005, 0.01, 0.02), seed=0,
                spread=0.25, threshold=0.5):
    """Mean CD after perturbing the partial inputs at each noise level."""
    cfg = params.config
    rig = build_view_rig(cfg.v_count, cfg.r, spread)
    rows = []
    for sigma in sigmas:
        noisy = [Sample(add_gaussian_noise(s.partial, sigma, _derive_seed(seed, 23, i)),
                        s.complete, s.label, s.category_name, s.sample_id)
                 for i, s in enumerate(dataset)]
        _, agg = evaluate(params, noisy, rig, threshold, seed)
        rows.append({"sigma": float(sigma), "cd_avg": agg.cd_l1})
    return rows


def density_bench(params: ModelParams, dataset, r_values=(17, 21, 29),
                  n_input_values=(512, 1024, 2048), seed=0, spread=0.25, threshold=0.5):
    """Inference sweep over output grid resolution and input density.

    The rig is rebuilt per R value (grid embeddings resample automatically);
    inputs are subsampled, or resampled with replacement, to each N.
    """
    cfg = params.config
    rows = []
    for r in r_values:
        rig = build_view_rig(cfg.v_count, int(r), spread)
        for n in n_input_values:
            counts = []

            def one(pair, rig=rig, n=int(n)):
                i, s = pair
                rng = np.random.default_rng(np.random.SeedSequence((seed, 31, i, n)))
                pts = s.partial.points
                pick = rng.choice(len(pts), size=n, replace=len(pts) < n)
                part = PointCloud(pts[np.sort(pick)], role=Role.INPUT)
                out, p_pred, _ = complete_cloud(part, params, rig, threshold,
                                                _derive_seed(seed, 37, i))
                counts.append(len(out))
                return metric_report(p_pred.points, s.complete.points).cd_l1

            cds = [one(pair) for pair in enumerate(dataset)]
            rows.append({"r": int(r), "n": int(n), "cd_avg": float(np.mean(cds)),
                         "output_count": float(np.mean(counts))})
    return rows
