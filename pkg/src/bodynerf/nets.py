"""Trainable network components: parameter layers, the image encoder, the
2-D neural renderer, the frozen perceptual feature network, the shared
single-head attention fusion kernel, and plain MLPs.

Initialization is Kaiming-uniform (fan-in) with zero biases so runs are
reproducible under fixed seeds.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class PerView:
    """Marks a (views, d) constant shared by every query point, so a split
    projection can project it once and broadcast instead of tiling it."""

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)


class Linear:
    def __init__(self, name, d_in, d_out, rng, trainable=True, bias_init=0.0):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        self.w = ad.Tensor(kaiming_uniform(rng, (d_in, d_out), d_in),
                           requires_grad=trainable, name=f"{name}.w")
        self.b = ad.Tensor(np.full(d_out, bias_init, dtype=np.float64),
                           requires_grad=trainable, name=f"{name}.b")

    def __call__(self, x):
        x = ad.as_tensor(x)
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.d_in)) if x.ndim != 2 else x
        out = ad.matmul(flat, self.w) + self.b
        if x.ndim != 2:
            out = out.reshape(lead + (self.d_out,))
        return out

    def apply_concat(self, parts):
        """Same result as self(concat(parts, axis=-1)) without materializing
        the concatenation: each part multiplies its row block of the weight.

        Parts share lead dimensions; PerView parts are (views, d) constants
        projected once and broadcast over points.
        """
        off = 0
        total = None
        view_term = None
        lead = None
        for part in parts:
            if isinstance(part, PerView):
                arr = ad.Tensor(part.data)
                d = arr.shape[-1]
                term = ad.matmul(arr, self.w[off:off + d, :])
                view_term = term if view_term is None else view_term + term
            else:
                arr = ad.as_tensor(part)
                d = arr.shape[-1]
                lead = arr.shape[:-1]
                flat = arr.reshape((-1, d)) if arr.ndim != 2 else arr
                term = ad.matmul(flat, self.w[off:off + d, :])
                total = term if total is None else total + term
            off += d
        if off != self.d_in:
            raise ad.ShapeError(f"{self.name}: parts supply {off} features, expected {self.d_in}")
        if view_term is not None:
            view_term = view_term + self.b
            out = total.reshape(lead + (self.d_out,)) + view_term.reshape(
                (1,) * (len(lead) - 1) + view_term.shape)
        else:
            out = total + self.b
            if len(lead) != 1:
                out = out.reshape(lead + (self.d_out,))
        return out

    def params(self):
        return {self.w.name: self.w, self.b.name: self.b}


class Conv2d:
    def __init__(self, name, c_in, c_out, rng, k=3, trainable=True):
        self.name = name
        fan_in = k * k * c_in
        self.w = ad.Tensor(kaiming_uniform(rng, (k, k, c_in, c_out), fan_in),
                           requires_grad=trainable, name=f"{name}.w")
        self.b = ad.Tensor(np.zeros(c_out), requires_grad=trainable, name=f"{name}.b")

    def __call__(self, x, stride=1):
        return ad.conv2d(x, self.w, self.b, stride=stride)

    def params(self):
        return {self.w.name: self.w, self.b.name: self.b}


class LayerNorm:
    def __init__(self, name, dim, trainable=True):
        self.name = name
        self.gamma = ad.Tensor(np.ones(dim), requires_grad=trainable, name=f"{name}.gamma")
        self.beta = ad.Tensor(np.zeros(dim), requires_grad=trainable, name=f"{name}.beta")

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)

    def params(self):
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}


def collect_params(*components):
    out = {}
    for comp in components:
        for name, p in comp.params().items():
            if name in out:
                raise ValueError(f"duplicate parameter name {name}")
            out[name] = p
    return out


class Encoder:
    """Image encoder: one stride-2 stage per entry of `stage_channels`
    (downsample 4 with the default two stages), then a stride-1 head emitting
    `out_channels` feature channels. Input sides must divide by the factor."""

    def __init__(self, rng, stage_channels=(16, 32), out_channels=32):
        self.stage_channels = tuple(stage_channels)
        self.downsample = 2 ** len(self.stage_channels)
        self.out_channels = out_channels
        self.convs = []
        self.norms = []
        c_prev = 3
        for i, c in enumerate(self.stage_channels):
            self.convs.append(Conv2d(f"encoder.stage{i}", c_prev, c, rng))
            self.norms.append(LayerNorm(f"encoder.norm{i}", c))
            c_prev = c
        self.head = Conv2d("encoder.head", c_prev, out_channels, rng)

    def __call__(self, image):
        """(H,W,3) in [0,1] -> (H/f, W/f, C) feature map, f = downsample."""
        image = ad.as_tensor(image)
        h, w, _ = image.shape
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"image size {h}x{w} not divisible by {self.downsample}")
        x = image
        for conv, norm in zip(self.convs, self.norms):
            x = norm(ad.relu(conv(x, stride=2)))
        return self.head(x, stride=1)

    def params(self):
        return collect_params(*self.convs, *self.norms, self.head)


class NeuralRenderer:
    """Feature image at half resolution -> RGB at full resolution in (0,1).

    Upsampling is exactly x2 (nearest + conv); final sigmoid keeps outputs
    strictly inside (0,1)."""

    def __init__(self, rng, in_channels=16, hidden=(32, 16)):
        self.in_channels = in_channels
        h0, h1 = hidden
        self.conv0 = Conv2d("renderer.conv0", in_channels, h0, rng)
        self.norm0 = LayerNorm("renderer.norm0", h0)
        self.conv1 = Conv2d("renderer.conv1", h0, h1, rng)
        self.norm1 = LayerNorm("renderer.norm1", h1)
        self.conv2 = Conv2d("renderer.conv2", h1, 3, rng)

    def __call__(self, feat):
        x = self.norm0(ad.relu(self.conv0(feat)))
        x = ad.nearest_upsample2(x)
        x = self.norm1(ad.relu(self.conv1(x)))
        return ad.sigmoid(self.conv2(x))

    def params(self):
        return collect_params(self.conv0, self.norm0, self.conv1, self.norm1, self.conv2)


class PerceptualNet:
    """Frozen random convolutional feature pyramid used by the perceptual
    loss: three conv+relu stages at scales 1, 1/2, 1/4.

    Parameters are drawn once from `seed` and never receive gradients;
    gradients still flow to the input image.
    """

    def __init__(self, seed=42, channels=(8, 16, 16)):
        rng = np.random.default_rng(seed)
        c0, c1, c2 = channels
        self.seed = seed
        self.conv0 = Conv2d("perceptual.conv0", 3, c0, rng, trainable=False)
        self.conv1 = Conv2d("perceptual.conv1", c0, c1, rng, trainable=False)
        self.conv2 = Conv2d("perceptual.conv2", c1, c2, rng, trainable=False)

    def __call__(self, image):
        a0 = ad.relu(self.conv0(ad.as_tensor(image), stride=1))
        a1 = ad.relu(self.conv1(a0, stride=2))
        a2 = ad.relu(self.conv2(a1, stride=2))
        return [a0, a1, a2]


class AttentionFusion:
    """Single-head scaled dot-product fusion over m views.

    query:  (P, q_dim)        -> projected to `dim`
    keys:   (P, m, k_dim)     -> projected to `dim`
    values: (P, m, v_dim)     -> projected to `dim`
    valid:  (P, m) bool; invalid views get weight exactly 0, and points with
    no valid view produce the zero vector.
    """

    def __init__(self, name, q_dim, k_dim, v_dim, rng, dim=32, out_dim=32):
        self.dim = dim
        self.q_proj = Linear(f"{name}.q", q_dim, dim, rng)
        self.k_proj = Linear(f"{name}.k", k_dim, dim, rng)
        self.v_proj = Linear(f"{name}.v", v_dim, dim, rng)
        self.out_proj = Linear(f"{name}.out", dim, out_dim, rng)

    @staticmethod
    def _project(proj, x):
        if isinstance(x, (list, tuple)):
            return proj.apply_concat(x)
        return proj(x)

    def weights(self, query, keys, valid):
        q = self._project(self.q_proj, query)
        k = self._project(self.k_proj, keys)
        p, m, _ = k.shape
        logits = ad.tsum(q.reshape((p, 1, self.dim)) * k, axis=-1)
        logits = logits * (1.0 / np.sqrt(self.dim))
        return ad.softmax(logits, mask=valid)

    def __call__(self, query, keys, values, valid):
        w = self.weights(query, keys, valid)
        v = self._project(self.v_proj, values)
        p, m, _ = v.shape
        att = ad.tsum(w.reshape((p, m, 1)) * v, axis=1)
        out = self.out_proj(att)
        any_valid = valid.any(axis=1).astype(np.float64)
        return out * ad.Tensor(any_valid[:, None]), w

    def pooled(self, values, valid):
        """AvgPool variant: masked mean of projected values, same output head."""
        v = self._project(self.v_proj, values)
        mask = valid.astype(np.float64)[..., None]
        count = np.maximum(mask.sum(axis=1), 1.0)
        mean = ad.tsum(v * ad.Tensor(mask), axis=1) * ad.Tensor(1.0 / count)
        out = self.out_proj(mean)
        any_valid = valid.any(axis=1).astype(np.float64)
        return out * ad.Tensor(any_valid[:, None])

    def params(self):
        return collect_params(self.q_proj, self.k_proj, self.v_proj, self.out_proj)


class MLP:
    """Plain relu MLP; the final layer is linear."""

    def __init__(self, name, d_in, widths, d_out, rng, out_bias_init=0.0):
        self.layers = []
        prev = d_in
        for i, w in enumerate(widths):
            self.layers.append(Linear(f"{name}.fc{i}", prev, w, rng))
            prev = w
        self.head = Linear(f"{name}.head", prev, d_out, rng, bias_init=out_bias_init)

    def hidden(self, x):
        for layer in self.layers:
            x = ad.relu(layer(x))
        return x

    def __call__(self, x):
        return self.head(self.hidden(x))

    def params(self):
        return collect_params(*self.layers, self.head)
