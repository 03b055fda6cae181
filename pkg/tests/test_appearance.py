import numpy as np
import pytest

from bodynerf import autodiff as ad
from bodynerf.appearance import AppearanceBlend
from bodynerf.cameras import Camera


def make_view(rng, h=16, w=16, c=4, dist=5.0, rotation=None):
    cam = Camera(fx=40.0, fy=40.0, cx=(w - 1) / 2, cy=(h - 1) / 2,
                 rotation=np.eye(3) if rotation is None else rotation,
                 translation=np.array([0.0, 0.0, dist]), height=h, width=w)
    fmap = ad.Tensor(rng.normal(size=(h // 4, w // 4, c)))
    img = rng.uniform(size=(h, w, 3))
    return cam, fmap, img


def make_blend(rng, c=4):
    return AppearanceBlend(rng, feat_channels=c, code_dim=c, dim=c + 3, out_dim=c)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def query_points(n=10, scale=0.2, seed=1):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, 3))


def unit_dirs(n, seed=2):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestAppearanceAttention:
    def test_single_view_passthrough(self, rng):
        blend = make_blend(rng)
        cam, fmap, img = make_view(rng)
        pts = query_points()
        dirs = unit_dirs(len(pts))
        g = ad.Tensor(rng.normal(size=(len(pts), 4)))
        out, w, valid = blend(pts, dirs, g, [fmap], [img], [cam],
                              return_weights=True)
        assert np.all(w[valid[:, 0], 0] == 1.0)
        from bodynerf.embedding import ViewSet
        views = ViewSet([cam], [fmap], images=[img], downsample=4)
        feats, colors, _ = views.sample(pts, want_colors=True)
        v_in = np.concatenate([feats.data[:, 0], colors[:, 0]], axis=-1)
        expect = (v_in @ blend.fusion.v_proj.w.data + blend.fusion.v_proj.b.data) \
            @ blend.fusion.out_proj.w.data + blend.fusion.out_proj.b.data
        ok = valid[:, 0]
        assert np.abs(out.data[ok] - expect[ok]).max() < 1e-12

    def test_identical_views_uniform_weights(self, rng):
        blend = make_blend(rng)
        cam, fmap, img = make_view(rng)
        pts = query_points()
        dirs = unit_dirs(len(pts))
        g = ad.Tensor(rng.normal(size=(len(pts), 4)))
        out, w, valid = blend(pts, dirs, g, [fmap] * 3, [img] * 3, [cam] * 3,
                              return_weights=True)
        ok = valid.all(axis=1)
        assert np.abs(w[ok] - 1.0 / 3.0).max() < 1e-12

    def test_two_view_identity_oracle(self):
        """2-dim identity layers match the hand softmax-attention oracle."""
        rng = np.random.default_rng(3)
        c = 2
        blend = AppearanceBlend(rng, feat_channels=c, code_dim=c, dim=c, out_dim=c)
        for lin in (blend.fusion.q_proj, blend.fusion.k_proj,
                    blend.fusion.v_proj, blend.fusion.out_proj):
            lin.w.data[...] = 0.0
            lin.w.data[:min(lin.w.shape), :min(lin.w.shape)] = np.eye(min(lin.w.shape))[
                :lin.w.shape[0], :lin.w.shape[1]]
            lin.b.data[...] = 0.0
        cam1, fmap1, img1 = make_view(rng, c=c)
        rot = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        cam2 = Camera(fx=40, fy=40, cx=7.5, cy=7.5, rotation=rot,
                      translation=np.array([0.0, 0.0, 5.0]), height=16, width=16)
        fmap2 = ad.Tensor(rng.normal(size=(4, 4, c)))
        img2 = rng.uniform(size=(16, 16, 3))
        pts = query_points(6, scale=0.1)
        dirs = unit_dirs(6)
        g = ad.Tensor(rng.normal(size=(6, c)))
        out, w, valid = blend(pts, dirs, g, [fmap1, fmap2], [img1, img2],
                              [cam1, cam2], return_weights=True)

        from bodynerf.embedding import ViewSet
        views = ViewSet([cam1, cam2], [fmap1, fmap2], images=[img1, img2], downsample=4)
        feats, colors, _ = views.sample(pts, want_colors=True)
        for i in range(6):
            if not valid[i].all():
                continue
            # identity projections truncate/embed to dim 2
            q = np.concatenate([g.data[i], dirs[i]])[:c]
            logits = []
            for k in range(2):
                key = np.concatenate([feats.data[i, k], views.axes[k]])[:c]
                logits.append(q @ key / np.sqrt(c))
            e = np.exp(logits - np.max(logits))
            ww = e / e.sum()
            assert np.abs(ww - w[i]).max() < 1e-12

    def test_zero_query_weights_make_output_direction_independent(self, rng):
        blend = make_blend(rng)
        blend.fusion.q_proj.w.data[...] = 0.0
        blend.fusion.q_proj.b.data[...] = 0.0
        cam, fmap, img = make_view(rng)
        cam2, fmap2, img2 = make_view(rng, dist=5.5)
        pts = query_points()
        g = ad.Tensor(rng.normal(size=(len(pts), 4)))
        a1 = blend(pts, unit_dirs(len(pts), seed=10), g, [fmap, fmap2],
                   [img, img2], [cam, cam2])
        a2 = blend(pts, unit_dirs(len(pts), seed=20), g, [fmap, fmap2],
                   [img, img2], [cam, cam2])
        assert np.array_equal(a1.data, a2.data)

    def test_view_permutation_equivariance(self, rng):
        blend = make_blend(rng)
        views = [make_view(rng, dist=5.0 + 0.3 * i) for i in range(3)]
        cams = [v[0] for v in views]
        fmaps = [v[1] for v in views]
        imgs = [v[2] for v in views]
        pts = query_points()
        dirs = unit_dirs(len(pts))
        g = ad.Tensor(rng.normal(size=(len(pts), 4)))
        a = blend(pts, dirs, g, fmaps, imgs, cams)
        perm = [1, 2, 0]
        b = blend(pts, dirs, g, [fmaps[i] for i in perm],
                  [imgs[i] for i in perm], [cams[i] for i in perm])
        assert np.abs(a.data - b.data).max() < 1e-12

    def test_weights_sum_to_one(self, rng):
        blend = make_blend(rng)
        views = [make_view(rng, dist=5.0 + 0.2 * i) for i in range(4)]
        pts = query_points(40, scale=0.4)
        dirs = unit_dirs(40)
        g = ad.Tensor(rng.normal(size=(40, 4)))
        _, w, valid = blend(pts, dirs, g, [v[1] for v in views],
                            [v[2] for v in views], [v[0] for v in views],
                            return_weights=True)
        rows = valid.any(axis=1)
        assert np.abs(w[rows].sum(axis=1) - 1.0).max() < 1e-12

    def test_zero_views_rejected(self, rng):
        blend = make_blend(rng)
        with pytest.raises(ValueError):
            blend(query_points(), unit_dirs(10), ad.Tensor(np.zeros((10, 4))),
                  [], [], [])


class TestAvgPool:
    def test_identical_values_mean_of_equals(self, rng):
        blend = make_blend(rng)
        cam, fmap, img = make_view(rng)
        pts = query_points()
        dirs = unit_dirs(len(pts))
        g = ad.Tensor(rng.normal(size=(len(pts), 4)))
        one = blend(pts, dirs, g, [fmap], [img], [cam], mode="avgpool")
        three = blend(pts, dirs, g, [fmap] * 3, [img] * 3, [cam] * 3, mode="avgpool")
        assert np.abs(one.data - three.data).max() < 1e-12

    def test_one_valid_one_invalid_equals_valid(self, rng):
        """With identity output head, the pooled result is the valid view's
        projected value."""
        c = 4
        blend = make_blend(rng, c=c)
        blend.fusion.out_proj.w.data[...] = np.eye(c + 3)[:c + 3, :c]
        blend.fusion.out_proj.b.data[...] = 0.0
        cam, fmap, img = make_view(rng, c=c)
        away = Camera(fx=40, fy=40, cx=7.5, cy=7.5, rotation=np.eye(3),
                      translation=np.array([0.0, 0.0, -5.0]), height=16, width=16)
        fmap2 = ad.Tensor(rng.normal(size=(4, 4, c)))
        img2 = rng.uniform(size=(16, 16, 3))
        pts = query_points()
        dirs = unit_dirs(len(pts))
        g = ad.Tensor(rng.normal(size=(len(pts), c)))
        both = blend(pts, dirs, g, [fmap, fmap2], [img, img2], [cam, away],
                     mode="avgpool")
        solo = blend(pts, dirs, g, [fmap], [img], [cam], mode="avgpool")
        assert np.abs(both.data - solo.data).max() < 1e-12

    def test_mean_oracle_on_random_inputs(self, rng):
        blend = make_blend(rng)
        views = [make_view(rng, dist=5.0 + 0.2 * i) for i in range(3)]
        pts = query_points(20)
        dirs = unit_dirs(20)
        g = ad.Tensor(rng.normal(size=(20, 4)))
        out = blend(pts, dirs, g, [v[1] for v in views], [v[2] for v in views],
                    [v[0] for v in views], mode="avgpool")
        from bodynerf.embedding import ViewSet
        vs = ViewSet([v[0] for v in views], [v[1] for v in views],
                     images=[v[2] for v in views], downsample=4)
        feats, colors, valid = vs.sample(pts, want_colors=True)
        f = blend.fusion
        for i in range(20):
            if not valid[i].any():
                assert np.all(out.data[i] == 0.0)
                continue
            vals = []
            for k in range(3):
                if valid[i, k]:
                    vin = np.concatenate([feats.data[i, k], colors[i, k]])
                    vals.append(vin @ f.v_proj.w.data + f.v_proj.b.data)
            mean = np.sum(vals, axis=0) / len(vals)
            expect = mean @ f.out_proj.w.data + f.out_proj.b.data
            assert np.abs(out.data[i] - expect).max() < 1e-12
