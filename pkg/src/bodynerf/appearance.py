"""Geometry-guided appearance blending: for each sample point and viewing
direction, an appearance code is registered directly from the multi-view
image features, with the interpolated geometric code acting as the query
proxy. Values carry the per-view feature concatenated with the sampled RGB;
keys carry the feature concatenated with the view's optical axis.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .embedding import ViewSet
from .nets import AttentionFusion, PerView


class AppearanceBlend:
    def __init__(self, rng, feat_channels=32, code_dim=32, dim=32, out_dim=32):
        self.feat_channels = feat_channels
        self.fusion = AttentionFusion("appearance", q_dim=code_dim + 3,
                                      k_dim=feat_channels + 3,
                                      v_dim=feat_channels + 3, rng=rng,
                                      dim=dim, out_dim=out_dim)

    def __call__(self, points, directions, geo_codes, feature_maps=None,
                 images=None, cams=None, views=None, downsample=4,
                 mode="attention", return_weights=False):
        """Appearance codes for sample points.

        points: (P,3) world positions; directions: (P,3) unit target-ray
        directions; geo_codes: (P,C_g) Tensor. Views can come pre-bundled
        (`views`) or as (feature_maps, images, cams). mode "attention" or
        "avgpool". Points invalid in every view get the zero code.
        """
        if views is None:
            views = ViewSet(cams, feature_maps, images=images, downsample=downsample)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        p = len(points)
        feats, colors, valid = views.sample(points, want_colors=True)
        values = [feats, ad.Tensor(colors)]
        if mode == "avgpool":
            out = self.fusion.pooled(values, valid)
            if return_weights:
                return out, None, valid
            return out
        if mode != "attention":
            raise ValueError(f"unknown fusion mode {mode!r}")
        keys = [feats, PerView(views.axes)]
        query = [geo_codes, ad.Tensor(directions)]
        out, weights = self.fusion(query, keys, values, valid)
        if return_weights:
            return out, weights.data, valid
        return out

    def params(self):
        return self.fusion.params()
