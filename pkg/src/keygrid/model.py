"""Autoencoder: hierarchical point encoder, keypoint heads, heatmap-conditioned decoder.

The encoder is a stack of set-abstraction levels (farthest point sampling +
kNN grouping + shared MLP + max pool) followed by feature propagation back to
full resolution. Keypoints are a softmax-weighted combination of the input
points; skeleton-segment weights come from the globally pooled feature. The
decoder walks the hierarchy coarse-to-fine, at each level fusing the heatmap
sampled at that level's coordinates, the encoder skip features, and features
projected from the previous decoder level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .geometry import (
    Frame,
    GridHeatmap,
    GridSpec,
    PointCloud,
    all_pair_segments,
    build_heatmap,
    farthest_point_sampling,
    sample_heatmap,
)

ZERO_DISTANCE_EPS = 1e-8


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_points: int = 2048
    num_keypoints: int = 10
    level_sizes: tuple[int, ...] = (2048, 512, 128, 32)
    level_widths: tuple[int, ...] = (64, 128, 256, 512)
    group_size: int = 16
    group_radii: tuple[float, ...] | None = None
    n_neig: int = 3
    grid_m: int = 16
    sigma: float = 1.0
    negate_exponent: bool = False
    use_heatmap: bool = True
    use_encoder_skip: bool = True

    def __post_init__(self):
        if self.num_keypoints < 2:
            raise ModelError("need at least 2 keypoints")
        if len(self.level_sizes) != len(self.level_widths):
            raise ModelError("level_sizes and level_widths must have equal length")
        if len(self.level_sizes) < 2:
            raise ModelError("need at least 2 encoder levels")
        if self.level_sizes[0] != self.num_points:
            raise ModelError("first level size must equal num_points")
        if any(a < b for a, b in zip(self.level_sizes, self.level_sizes[1:])):
            raise ModelError("level sizes must be non-increasing")
        if self.level_sizes[-1] < self.num_keypoints:
            raise ModelError("coarsest level must keep at least num_keypoints points")
        if self.n_neig < 1:
            raise ModelError("n_neig must be >= 1")
        if self.group_radii is not None:
            if len(self.group_radii) != len(self.level_sizes):
                raise ModelError("group_radii must give one radius per level")
            if any(r <= 0 for r in self.group_radii):
                raise ModelError("group radii must be positive")

    @property
    def num_levels(self) -> int:
        return len(self.level_sizes)

    @property
    def num_segments(self) -> int:
        k = self.num_keypoints
        return k * (k - 1) // 2

    def grid_spec(self) -> GridSpec:
        return GridSpec(m=self.grid_m)


@dataclass
class EncoderHierarchy:
    """Per-level (coords, features) plus features propagated back to full resolution."""

    input_coords: torch.Tensor                      # N x 3
    levels: list[tuple[torch.Tensor, torch.Tensor]]  # [(N_i x 3, N_i x F_i)]
    level_indices: list[torch.Tensor]               # indices into the parent level
    full_res_features: torch.Tensor                 # N x F0


@dataclass
class KeypointPrediction:
    weights: torch.Tensor          # K x N, rows sum to 1
    keypoints: torch.Tensor        # K x 3
    segment_weights: torch.Tensor  # K(K-1)/2, each in (0, 1)


def project_features(f_ori: torch.Tensor, x_ori: torch.Tensor, x_targ: torch.Tensor,
                     n_neig: int) -> torch.Tensor:
    """Inverse-squared-distance weighted average of each target's nearest features.

    A target point coinciding with an original point (distance < 1e-8) copies
    that original feature exactly.
    """
    if x_ori.shape[0] < n_neig:
        raise ModelError(f"need at least {n_neig} original points, got {x_ori.shape[0]}")
    d2 = torch.cdist(x_targ, x_ori).pow(2)  # (N_t, N_o)
    near_d2, near_idx = d2.topk(n_neig, dim=1, largest=False)
    near_f = f_ori[near_idx]  # (N_t, n_neig, F)

    exact = near_d2[:, 0] < ZERO_DISTANCE_EPS**2
    w = 1.0 / near_d2.clamp(min=ZERO_DISTANCE_EPS**2)
    blended = (w.unsqueeze(-1) * near_f).sum(dim=1) / w.sum(dim=1, keepdim=True)
    return torch.where(exact.unsqueeze(-1), near_f[:, 0], blended)


class _BatchNorm(nn.Module):
    """Batch normalization over the point dimension with learned affine.

    Statistics always come from the points being processed (train and eval
    alike), so normalization matches the shape at hand. They are accumulated
    in float64, which makes the result independent of point order at
    float32 resolution.
    """

    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))

    def forward(self, x):
        xd = x.double()
        mu = xd.mean(dim=0)
        var = xd.var(dim=0, unbiased=False)
        out = (xd - mu) / torch.sqrt(var + self.eps)
        return (out * self.weight.double() + self.bias.double()).to(x.dtype)


def _mlp(widths: list[int]) -> nn.Sequential:
    layers = []
    for w_in, w_out in zip(widths, widths[1:]):
        layers += [nn.Linear(w_in, w_out), _BatchNorm(w_out), nn.ReLU()]
    return nn.Sequential(*layers)


class _PointwiseMLP(nn.Module):
    """Shared MLP over the last dim; BatchNorm runs over all points of the batch."""

    def __init__(self, widths):
        super().__init__()
        self.net = _mlp(list(widths))

    def forward(self, x):
        shape = x.shape
        return self.net(x.reshape(-1, shape[-1])).reshape(*shape[:-1], -1)


class SetAbstraction(nn.Module):
    """FPS subsampling + neighborhood grouping + shared MLP + max pool.

    Groups are the `group_size` nearest neighbors of each center; when a
    `radius` is given, neighbors beyond it are replaced by the nearest one,
    which keeps the pooled neighborhood at a fixed metric scale regardless
    of sampling density.
    """

    def __init__(self, in_width: int, out_width: int, group_size: int,
                 radius: float | None = None):
        super().__init__()
        self.group_size = group_size
        self.radius = radius
        self.mlp = _PointwiseMLP([in_width + 3, out_width, out_width])

    def forward(self, coords, feats, target_size):
        n = coords.shape[0]
        target_size = min(target_size, n)
        if target_size == n:
            idx = torch.arange(n)
        else:
            idx = torch.as_tensor(farthest_point_sampling(coords, target_size))
        centers = coords[idx]
        k = min(self.group_size, n)
        dist, nbr = torch.cdist(centers, coords).topk(k, dim=1, largest=False)
        if self.radius is not None:
            nbr = torch.where(dist <= self.radius, nbr, nbr[:, :1])
        rel = coords[nbr] - centers.unsqueeze(1)  # (S, k, 3)
        grouped = rel if feats is None else torch.cat([rel, feats[nbr]], dim=-1)
        out = self.mlp(grouped).max(dim=1).values
        return centers, out, idx


class KeyGridNet(nn.Module):
    """End-to-end keypoint detector + heatmap-conditioned reconstructor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.level_widths

        self.sa_layers = nn.ModuleList()
        in_w = 3  # the first level's point features are the absolute coordinates
        radii = cfg.group_radii or (None,) * cfg.num_levels
        for w, r in zip(widths, radii):
            self.sa_layers.append(SetAbstraction(in_w, w, cfg.group_size, radius=r))
            in_w = w

        # feature propagation back to full resolution for the keypoint head
        self.fp_layers = nn.ModuleList()
        fp_out = list(widths[:-1][::-1]) + [widths[0]]
        fp_in = widths[-1]
        for skip_w, out_w in zip(list(widths[:-1][::-1]) + [0], fp_out):
            self.fp_layers.append(_PointwiseMLP([fp_in + skip_w, out_w]))
            fp_in = out_w

        # the head sees each point's propagated feature plus its coordinates,
        # so the logits can localize even on geometry with uniform local shape
        self.keypoint_head = nn.Linear(widths[0] + 3, cfg.num_keypoints)
        self.segment_head = nn.Sequential(
            nn.Linear(widths[-1], widths[-1]),
            nn.ReLU(),
            nn.Linear(widths[-1], cfg.num_segments),
            nn.Sigmoid(),
        )

        # decoder: one fusion MLP per level, coarse to fine
        self.dec_layers = nn.ModuleList()
        dec_w = widths[-1]
        prev = 0
        for w in widths[::-1]:
            self.dec_layers.append(_PointwiseMLP([1 + w + prev, dec_w]))
            prev = dec_w
        self.coord_head = nn.Sequential(
            nn.Linear(dec_w, dec_w), nn.ReLU(), nn.Linear(dec_w, 3)
        )

    # --- encoder -----------------------------------------------------------

    def encode(self, cloud: PointCloud) -> EncoderHierarchy:
        coords = cloud.points.to(torch.get_default_dtype())
        levels, indices = [], []
        feats = coords  # absolute positions seed the feature hierarchy
        cur = coords
        for sa, size in zip(self.sa_layers, self.cfg.level_sizes):
            cur, feats, idx = sa(cur, feats, size)
            levels.append((cur, feats))
            indices.append(idx)

        # propagate coarse features back down the hierarchy
        f = levels[-1][1]
        x = levels[-1][0]
        skips = levels[:-1][::-1] + [(coords, None)]
        for fp, (x_fine, f_fine) in zip(self.fp_layers, skips):
            interp = project_features(f, x, x_fine, min(3, x.shape[0]))
            if f_fine is not None:
                interp = torch.cat([interp, f_fine], dim=-1)
            f = fp(interp)
            x = x_fine
        return EncoderHierarchy(
            input_coords=coords, levels=levels, level_indices=indices, full_res_features=f
        )

    # --- keypoint prediction -----------------------------------------------

    def predict_keypoints(self, h: EncoderHierarchy) -> KeypointPrediction:
        head_in = torch.cat([h.full_res_features, h.input_coords], dim=-1)
        logits = self.keypoint_head(head_in)  # N x K
        w = torch.softmax(logits.t(), dim=1)  # K x N, softmax across points
        keypoints = w @ h.input_coords
        pooled = h.levels[-1][1].max(dim=0).values
        seg_w = self.segment_head(pooled)
        return KeypointPrediction(weights=w, keypoints=keypoints, segment_weights=seg_w)

    def build_heatmap(self, pred: KeypointPrediction) -> GridHeatmap:
        segments = all_pair_segments(self.cfg.num_keypoints, list(pred.segment_weights))
        return build_heatmap(
            pred.keypoints,
            segments,
            self.cfg.grid_spec(),
            self.cfg.sigma,
            negate_exponent=self.cfg.negate_exponent,
        )

    # --- decoder -------------------------------------------------------------

    def decode(self, h: EncoderHierarchy, heatmap: GridHeatmap) -> torch.Tensor:
        if len(h.levels) != self.cfg.num_levels:
            raise ModelError("hierarchy depth does not match config")
        prev_f = None
        prev_x = None
        for dec, (x, f_enc) in zip(self.dec_layers, h.levels[::-1]):
            if self.cfg.use_heatmap:
                grid_f = sample_heatmap(heatmap, x).unsqueeze(-1).to(x.dtype)
            else:
                grid_f = torch.zeros(x.shape[0], 1, dtype=x.dtype)
            skip_f = f_enc if self.cfg.use_encoder_skip else torch.zeros_like(f_enc)
            parts = [grid_f, skip_f]
            if prev_f is not None:
                parts.append(project_features(prev_f, prev_x, x, min(self.cfg.n_neig, prev_x.shape[0])))
            prev_f = dec(torch.cat(parts, dim=-1))
            prev_x = x
        full = project_features(prev_f, prev_x, h.input_coords,
                                min(self.cfg.n_neig, prev_x.shape[0]))
        return self.coord_head(full)

    def forward(self, cloud: PointCloud) -> tuple[KeypointPrediction, torch.Tensor]:
        if len(cloud) < self.cfg.level_sizes[-1]:
            raise ModelError(
                f"cloud of {len(cloud)} points is smaller than the coarsest level "
                f"({self.cfg.level_sizes[-1]})"
            )
        h = self.encode(cloud)
        pred = self.predict_keypoints(h)
        heatmap = self.build_heatmap(pred)
        recon = self.decode(h, heatmap)
        return pred, recon


def detect_keypoints(model: KeyGridNet, cloud: PointCloud) -> KeypointPrediction:
    """Keypoints for a normalized cloud in eval mode, without gradients."""
    if cloud.frame != Frame.UNIT_CUBE:
        raise ModelError("detect_keypoints expects a unit_cube cloud")
    model.eval()
    with torch.no_grad():
        h = model.encode(cloud)
        return model.predict_keypoints(h)
