"""The completion network.

A shared point-wise MLP encodes both the observed cloud and the candidate
points; the observed features are max-pooled into one global feature vector.
Candidate features then pass through a per-viewpoint transformer (cross
attention against the single global token, self attention within the group),
a small classifier predicts the shape category from the global feature, and
a bottlenecked fusion head merges features with the class distribution to
emit a bounded 3D offset and an opacity per candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyCloud, GroupingError
from .geometry import CandidateSet, PointCloud, Prediction, Role

OFFSET_CAP = 0.5  # tanh-bounded offsets stay within half the normalized bbox


@dataclass
class ModelConfig:
    d_en: int = 64        # encoder feature width
    n_heads: int = 4
    n_layers: int = 1     # attention blocks per stage
    c: int = 3            # category count
    v_count: int = 6
    r: int = 12           # training-time grid resolution
    mlp_widths: tuple = (64, 128)

    def validate(self):
        if self.d_en < 1 or self.d_en % self.n_heads != 0:
            raise ValueError("d_en must be positive and divisible by n_heads")
        if self.c < 2:
            raise ValueError("c must be at least 2")
        if self.v_count < 1 or self.r < 1 or self.n_layers < 1:
            raise ValueError("v_count, r, and n_layers must be >= 1")
        if any(w < 1 for w in self.mlp_widths):
            raise ValueError("encoder widths must be >= 1")
        return self


@dataclass
class ModelParams:
    """Named weight tensors plus the config that fixes their shapes."""

    config: ModelConfig
    tensors: dict

    def parameters(self):
        return [self.tensors[k] for k in sorted(self.tensors)]

    def __getitem__(self, name):
        return self.tensors[name]


@dataclass
class ClassDistribution:
    probs: object  # (c,) nonnegative, sums to 1

    def numpy(self):
        return np.asarray(self.probs, dtype=np.float64).reshape(-1)

    def argmax(self):
        return int(self.numpy().argmax())


def init_model_params(config: ModelConfig, seed: int) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(seed)
    t = {}

    def lin(name, n_in, n_out, gain):
        t[name + ".w"] = Tensor(rng.normal(0.0, gain / np.sqrt(n_in), (n_in, n_out)),
                                requires_grad=True)
        t[name + ".b"] = Tensor(np.zeros(n_out), requires_grad=True)

    widths = [3, *config.mlp_widths, config.d_en]
    for k in range(len(widths) - 1):
        lin(f"encoder.l{k}", widths[k], widths[k + 1], gain=np.sqrt(2.0))

    d = config.d_en
    t["fpos"] = Tensor(rng.normal(0.0, 0.02, (config.v_count, d)), requires_grad=True)
    t["pos"] = Tensor(rng.normal(0.0, 0.02, (config.r ** 2, d)), requires_grad=True)

    for stage in ("cross", "self"):
        for i in range(config.n_layers):
            p = f"{stage}{i}"
            for proj in ("q", "k", "v", "o"):
                lin(f"{p}.{proj}", d, d, gain=1.0)
            t[f"{p}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
            t[f"{p}.ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
            lin(f"{p}.ffn.l0", d, 2 * d, gain=np.sqrt(2.0))
            lin(f"{p}.ffn.l1", 2 * d, d, gain=1.0)
            t[f"{p}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
            t[f"{p}.ln2.b"] = Tensor(np.zeros(d), requires_grad=True)

    lin("cls.l0", d, 64, gain=np.sqrt(2.0))
    lin("cls.l1", 64, config.c, gain=1.0)

    lin("fuse.compress", d, 4, gain=np.sqrt(2.0))
    lin("fuse.expand", 4, d, gain=np.sqrt(2.0))
    lin("fuse.head", d + config.c, 4, gain=1.0)

    return ModelParams(config=config, tensors=t)


def _linear(x, params, name):
    return ad.add_bias(ad.matmul(x, params[name + ".w"]), params[name + ".b"])


def encode(cloud: PointCloud, params: ModelParams):
    """Shared point-wise MLP: (N, 3) points to (N, d_en) features."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot encode an empty cloud")
    h = Tensor(cloud.points)
    n_layers = len(params.config.mlp_widths) + 1
    for k in range(n_layers):
        h = _linear(h, params, f"encoder.l{k}")
        if k < n_layers - 1:
            h = ad.relu(h)
    return h


def global_feature(cloud: PointCloud, params: ModelParams):
    """Columnwise max over the encoded points: a (1, d_en) shape summary."""
    return ad.maxpool_over_rows(encode(cloud, params))


def _split_heads(x, n_heads):
    n, d = x.shape
    return ad.swap_axes(ad.reshape(x, (n, n_heads, d // n_heads)), 0, 1)


def _merge_heads(x):
    h, n, hd = x.shape
    return ad.reshape(ad.swap_axes(x, 0, 1), (n, h * hd))


def _mha(q_in, k_in, v_in, params, prefix, n_heads):
    q = _split_heads(_linear(q_in, params, prefix + ".q"), n_heads)
    k = _split_heads(_linear(k_in, params, prefix + ".k"), n_heads)
    v = _split_heads(_linear(v_in, params, prefix + ".v"), n_heads)
    att = _merge_heads(ad.scaled_dot_product_attention(q, k, v))
    return _linear(att, params, prefix + ".o")


def _block(x, attended, params, prefix):
    """Residual + layer norm around attention, then around the feed-forward."""
    x = ad.layer_norm(ad.add(x, attended), params[prefix + ".ln1.g"], params[prefix + ".ln1.b"])
    f = _linear(ad.relu(_linear(x, params, prefix + ".ffn.l0")), params, prefix + ".ffn.l1")
    return ad.layer_norm(ad.add(x, f), params[prefix + ".ln2.g"], params[prefix + ".ln2.b"])


def resample_grid_embedding(pos: np.ndarray, r_from: int, r_to: int) -> np.ndarray:
    """Bilinearly resample an (r_from^2, d) grid embedding to r_to^2 slots.

    Lets a model trained at one grid resolution run inference at another; at
    r_to == r_from the result is an exact copy.
    """
    d = pos.shape[1]
    grid = pos.reshape(r_from, r_from, d)
    if r_to == 1:
        coords = np.array([(r_from - 1) / 2.0])
    else:
        coords = np.arange(r_to) * (r_from - 1) / (r_to - 1)
    i0 = np.clip(np.floor(coords).astype(int), 0, max(r_from - 2, 0))
    fr = coords - i0
    i1 = np.minimum(i0 + 1, r_from - 1)

    rows = grid[i0] * (1 - fr)[:, None, None] + grid[i1] * fr[:, None, None]
    out = (rows[:, i0] * (1 - fr)[None, :, None]
           + rows[:, i1] * fr[None, :, None])
    return out.reshape(r_to * r_to, d)


def face_transformer(f_s, f_i, candidates: CandidateSet, params: ModelParams):
    """Per-viewpoint decoding of candidate features.

    Each viewpoint group first cross-attends (queries are the group features
    plus that viewpoint's embedding) against the single global token, then
    self-attends with a per-slot grid embedding added; groups never mix.
    """
    cfg = params.config
    m = f_s.shape[0]
    if m % cfg.v_count != 0:
        raise GroupingError(f"{m} candidate rows do not split into {cfg.v_count} groups")
    group = m // cfg.v_count
    if np.any(np.diff(candidates.view_index) < 0):
        raise GroupingError("candidate rows must be grouped by view index")

    pos_data = params["pos"].data
    if group == cfg.r ** 2:
        pos = params["pos"]
    else:
        r_to = int(round(np.sqrt(group)))
        if r_to * r_to != group:
            raise GroupingError(f"group size {group} is not a square grid")
        pos = Tensor(resample_grid_embedding(pos_data, cfg.r, r_to))

    outs = []
    for v in range(cfg.v_count):
        rows = np.arange(v * group, (v + 1) * group)
        x = ad.take_rows(f_s, rows)
        vpos = ad.tile_rows(ad.take_rows(params["fpos"], np.array([v])), group)
        for i in range(cfg.n_layers):
            a = _mha(ad.add(x, vpos), f_i, f_i, params, f"cross{i}", cfg.n_heads)
            x = _block(x, a, params, f"cross{i}")
        for i in range(cfg.n_layers):
            xp = ad.add(x, pos)
            a = _mha(xp, xp, xp, params, f"self{i}", cfg.n_heads)
            x = _block(x, a, params, f"self{i}")
        outs.append(x)
    return ad.concat_rows(outs)


def classify(f_i, params: ModelParams) -> ClassDistribution:
    h = ad.relu(_linear(f_i, params, "cls.l0"))
    logits = _linear(h, params, "cls.l1")
    probs = ad.reshape(ad.softmax_lastdim(logits), (params.config.c,))
    return ClassDistribution(probs)


def fuse(f_s, p_cls: ClassDistribution, params: ModelParams) -> Prediction:
    """Bottleneck the features, append the class distribution, predict offset+opacity."""
    cfg = params.config
    m = f_s.shape[0]
    h = ad.relu(_linear(f_s, params, "fuse.compress"))
    h = ad.relu(_linear(h, params, "fuse.expand"))
    probs = p_cls.probs if isinstance(p_cls.probs, Tensor) else Tensor(p_cls.probs)
    cls_rows = ad.tile_rows(ad.reshape(probs, (1, cfg.c)), m)
    out = _linear(ad.concat_lastdim(h, cls_rows), params, "fuse.head")
    offsets = ad.scale(ad.tanh(ad.take_cols(out, 0, 3)), OFFSET_CAP)
    opacities = ad.reshape(ad.sigmoid(ad.take_cols(out, 3, 4)), (m,))
    return Prediction(offsets=offsets, opacities=opacities)


def forward(input_cloud: PointCloud, candidates: CandidateSet, params: ModelParams,
            use_classification=True, use_face_attention=True):
    """Full pipeline: returns (Prediction, ClassDistribution).

    The ablation flags bypass the face transformer (identity pass-through)
    and feed the fusion head a constant uniform class vector respectively.
    """
    cfg = params.config
    f_i = global_feature(input_cloud, params)
    f_s = encode(PointCloud(candidates.points, role=Role.CANDIDATE), params)
    if use_face_attention:
        f_s = face_transformer(f_s, f_i, candidates, params)
    p_cls = classify(f_i, params)
    fusion_cls = p_cls if use_classification else ClassDistribution(np.full(cfg.c, 1.0 / cfg.c))
    pred = fuse(f_s, fusion_cls, params)
    return pred, p_cls
