import math

import numpy as np
import pytest

from sonomap.errors import ContractError
from sonomap.geometry import Pose
from sonomap.image import ImageGray
from sonomap.localizer import (ConvEncoder, Gallery, LocalizerConfig, add_black_blocks,
                               augment, binarize, class_predictions, encode_image,
                               evaluate_retrieval, hamming, loss_dhl, loss_hpl, loss_local,
                               loss_ql, resize_area, retrieve, similarity_score,
                               train_localizer)


def toy_image(seed=0, h=64, w=64):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8)
    yy, xx = np.mgrid[0:h, 0:w]
    stripes = 0.15 * np.sin(2 * np.pi * (xx + (seed % 5) * yy) / (5 + seed % 11))
    data = np.clip(base + stripes + 0.1 * rng.standard_normal((h, w)), 0, 1)
    return ImageGray(data.astype(np.float32))


class TestAugment:
    def test_deterministic_per_seed(self):
        img = toy_image(1)
        a = augment(img, "strong", seed=5)
        b = augment(img, "strong", seed=5)
        assert np.array_equal(a.data, b.data)
        c = augment(img, "strong", seed=6)
        assert not np.array_equal(a.data, c.data)

    def test_weak_never_writes_black_blocks(self):
        # away from the translation border, weak never creates exact zeros
        img = ImageGray(np.full((64, 64), 0.5, dtype=np.float32))
        for seed in range(20):
            out = augment(img, "weak", seed=seed)
            interior = out.data[4:-4, 4:-4]
            assert np.count_nonzero(interior == 0.0) == 0

    def test_strong_forced_block_zeroes_rectangle(self):
        rng = np.random.default_rng(3)
        data = np.full((64, 64), 0.7)
        out = add_black_blocks(data, rng, count=1, max_area_frac=0.10)
        zeros = out == 0.0
        assert 0 < zeros.sum() <= 0.10 * 64 * 64
        ys, xs = np.nonzero(zeros)
        # zeroed region is exactly one solid rectangle
        assert zeros[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1].all()
        assert zeros.sum() == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)

    def test_output_clamped(self):
        img = toy_image(2)
        for mode in ("weak", "strong"):
            out = augment(img, mode, seed=0)
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestResize:
    def test_block_mean_when_divisible(self):
        rng = np.random.default_rng(4)
        data = rng.uniform(0, 1, (128, 128)).astype(np.float32)
        img = ImageGray(data)
        out = resize_area(img, 64, 64)
        expected = data.reshape(64, 2, 64, 2).mean(axis=(1, 3))
        assert np.abs(out - expected).max() < 1e-6

    def test_preserves_mean(self):
        img = toy_image(5, h=96, w=128)
        out = resize_area(img)
        assert out.mean() == pytest.approx(float(img.data.mean()), abs=1e-6)


class TestEncoder:
    def test_zero_weights_give_zero_code(self):
        enc = ConvEncoder(q=16, seed=0)
        for p in enc.params():
            p[:] = 0
        h = encode_image(toy_image(6), enc)
        assert np.all(h == 0.0)

    def test_identical_images_identical_codes(self):
        enc = ConvEncoder(q=16, seed=1)
        a = encode_image(toy_image(7), enc)
        b = encode_image(toy_image(7), enc)
        assert np.array_equal(a, b)

    def test_hand_computed_single_conv(self):
        # 1 output channel, known 3x3 kernel: check one stride-2 window by hand
        enc = ConvEncoder(q=4, seed=2)
        x = np.arange(64 * 64, dtype=np.float64).reshape(64, 64) / (64 * 64)
        w0 = np.zeros((16, 9))
        w0[0] = [0, 1, 0, 1, -4, 1, 0, 1, 0]  # Laplacian-like taps (kh, kw) order
        enc.conv_w[0] = w0.astype(np.float32)
        enc.conv_b[0][:] = 0.25
        out, cache = enc.forward(x[None], want_cache=True)
        cols, z, idx, c_in, size = cache[0][0]
        # window at output position (oy=1, ox=1) covers padded coords rows 2..4, cols 2..4
        xp = np.zeros((66, 66))
        xp[1:-1, 1:-1] = x
        patch = xp[2:5, 2:5]
        expected = (patch * w0[0].reshape(3, 3)).sum() + 0.25
        p_idx = 1 * 32 + 1
        assert z[0, p_idx, 0] == pytest.approx(expected, abs=1e-5)

    def test_finite_input_required(self):
        enc = ConvEncoder(q=8, seed=3)
        with pytest.raises(ContractError):
            enc.forward(np.full((1, 64, 64), np.nan))


class TestLosses:
    def test_dhl_trivials(self):
        h = np.array([1.0, 2.0, -1.0])
        assert loss_dhl(h, h) == pytest.approx(0.0, abs=1e-12)
        assert loss_dhl(h, -h) == pytest.approx(2.0, abs=1e-12)
        assert loss_dhl([1.0, 0.0], [0.0, 3.0]) == pytest.approx(1.0, abs=1e-12)

    def test_dhl_scale_invariant(self):
        rng = np.random.default_rng(8)
        a, b = rng.standard_normal(16), rng.standard_normal(16)
        assert loss_dhl(a, b) == pytest.approx(loss_dhl(5 * a, 0.25 * b), abs=1e-12)

    def test_dhl_zero_vector_rejected(self):
        with pytest.raises(ContractError):
            loss_dhl(np.zeros(4), np.ones(4))

    def test_class_predictions_identity_case(self):
        proxies = np.eye(3)
        h = np.array([1.0, 0.0, 0.0])
        p = class_predictions(h, proxies)
        assert np.allclose(p, [1.0, 0.0, 0.0], atol=1e-12)
        assert np.allclose(class_predictions(5 * h, proxies), p, atol=1e-12)

    def test_class_predictions_hand_case(self):
        proxies = np.array([[1.0, 0.0], [1.0, 1.0]])
        h = np.array([1.0, 1.0])
        p = class_predictions(h, proxies)
        assert p[0] == pytest.approx(1 / math.sqrt(2), abs=1e-12)
        assert p[1] == pytest.approx(1.0, abs=1e-12)

    def test_hpl_uniform_predictions(self):
        n = 7
        y = np.zeros(n)
        y[2] = 1.0
        p = np.full(n, 0.37)
        for tau in (0.1, 0.5, 2.0):
            # each path contributes ln(n) regardless of temperature
            assert loss_hpl(y, p, p, tau, tau) == pytest.approx(2 * math.log(n), abs=1e-9)

    def test_hpl_low_temperature_limit(self):
        y = np.array([1.0, 0.0, 0.0])
        p = np.array([0.9, 0.1, -0.2])
        assert loss_hpl(y, p, p, 0.01, 0.01) == pytest.approx(0.0, abs=1e-9)

    def test_hpl_numeric_case(self):
        # direct softmax arithmetic oracle
        y = np.array([1.0, 0.0, 0.0])
        p = np.array([0.9, 0.1, -0.2])
        tau = 0.2
        e = np.exp(p / tau)
        expected = -math.log(e[0] / e.sum())
        assert loss_hpl(y, p, p, tau, tau) == pytest.approx(2 * expected, rel=1e-12)

    def test_hpl_rejects_non_onehot(self):
        with pytest.raises(ContractError):
            loss_hpl(np.array([0.5, 0.5]), np.zeros(2), np.zeros(2), 0.2, 0.2)

    def test_ql_at_zero_is_ln2(self):
        assert loss_ql(np.zeros(8)) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_ql_monotone_toward_unit(self):
        assert loss_ql(np.full(8, 0.5)) > loss_ql(np.full(8, 0.9))
        grid = np.linspace(0.0, 1.0, 100)
        vals = [loss_ql(np.array([g])) for g in grid]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_ql_minimum_at_one_over_unit_interval(self):
        grid = np.linspace(0.0, 1.0, 101)
        vals = np.array([loss_ql(np.array([g])) for g in grid])
        assert vals.argmin() == 100  # h = +1

    def test_ql_symmetric(self):
        assert loss_ql(np.array([0.7])) == pytest.approx(loss_ql(np.array([-0.7])), abs=1e-12)


class TestLossLocal:
    def make_batch(self, n=4):
        return [(toy_image(i), np.eye(n)[i]) for i in range(n)]

    def test_lambda_zero_reduces_to_hpl(self):
        enc = ConvEncoder(q=8, seed=4)
        rng = np.random.default_rng(9)
        proxies = rng.standard_normal((4, 8))
        batch = self.make_batch()
        loss, _, _ = loss_local(batch, enc, proxies, 0.0, 0.0, 0.2, 0.2, seed=3,
                                teacher_mode="weak", student_mode="weak")
        # same augmentation both paths: h_t == h_s, so hpl halves match
        h = np.stack([enc.forward(resize_area(augment(img, "weak", 3 + i))[None])[0]
                      for i, (img, _) in enumerate(batch)])
        pt = class_predictions(h, proxies)
        y = np.eye(4)
        expected = loss_hpl(y, pt, pt, 0.2, 0.2)
        assert loss == pytest.approx(expected, rel=1e-6)

    def test_identical_transforms_kill_dhl(self):
        enc = ConvEncoder(q=8, seed=5)
        rng = np.random.default_rng(10)
        proxies = rng.standard_normal((4, 8))
        batch = self.make_batch()
        base, _, _ = loss_local(batch, enc, proxies, 0.0, 0.0, 0.2, 0.2, seed=4,
                                teacher_mode="weak", student_mode="weak")
        with_dhl, _, _ = loss_local(batch, enc, proxies, 100.0, 0.0, 0.2, 0.2, seed=4,
                                    teacher_mode="weak", student_mode="weak")
        assert with_dhl == pytest.approx(base, abs=1e-9)

    def test_finite_difference_gradients(self):
        # 64-bit mode: float32 forward noise would swamp the central difference
        enc = ConvEncoder(q=8, seed=6, dtype=np.float64)
        rng = np.random.default_rng(11)
        # zero biases put zero-padded ReLU inputs exactly on their kink, which
        # makes the loss one-sidedly non-differentiable in the biases; check
        # at a generic parameter point instead
        for b in enc.conv_b:
            b += rng.uniform(0.01, 0.05, b.shape)
        proxies = rng.standard_normal((3, 8))
        batch = [(toy_image(20 + i), np.eye(3)[i]) for i in range(3)]
        kw = dict(seed=7, teacher_mode="weak", student_mode="strong")
        loss, enc_grads, d_p = loss_local(batch, enc, proxies, 1.0, 0.5, 0.2, 0.2, **kw)

        def loss_at():
            val, _, _ = loss_local(batch, enc, proxies, 1.0, 0.5, 0.2, 0.2, **kw)
            return val

        errs = []
        params = enc.params()
        for arr, grad in list(zip(params, enc_grads)) + [(proxies, d_p)]:
            flat, gflat = arr.ravel(), np.asarray(grad).ravel()
            for i in rng.choice(arr.size, size=min(12, arr.size), replace=False):
                old = flat[i]
                h = 1e-6  # 64-bit mode: small step stays clear of ReLU kinks
                flat[i] = old + h
                lp = loss_at()
                flat[i] = old - h
                lm = loss_at()
                flat[i] = old
                fd = (lp - lm) / (2 * h)
                an = gflat[i]
                scale = max(abs(fd), abs(an), 1e-10)
                errs.append(abs(fd - an) / scale)
        errs = np.asarray(errs)
        assert (errs <= 1e-4).mean() >= 0.99
        assert np.median(errs) < 1e-6


class TestCodes:
    def test_binarize_sign_zero_positive(self):
        assert np.array_equal(binarize(np.array([0.0, -0.5, 0.5])), [1, -1, 1])

    def test_hamming_cosine_identity(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            a = binarize(rng.standard_normal(32)).astype(np.float64)
            b = binarize(rng.standard_normal(32)).astype(np.float64)
            cos = float(a @ b) / 32.0
            assert hamming(a, b) == round(32 * (1 - cos) / 2)

    def test_gallery_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        codes = binarize(rng.standard_normal((5, 24)))
        poses = [Pose(rng.uniform(-10, 10, 3), rng.uniform(-1, 1, 3)) for _ in range(5)]
        g = Gallery(codes, poses, np.arange(5))
        p = tmp_path / "g.aiag"
        g.save(p)
        h = Gallery.load(p)
        assert np.array_equal(g.codes, h.codes)
        assert np.array_equal(g.classes, h.classes)
        for a, b in zip(g.poses, h.poses):
            assert np.allclose(a.position, b.position)
            assert np.allclose(a.euler_zyx, b.euler_zyx)

    def test_gallery_bit_packing_lsb_first(self, tmp_path):
        codes = np.array([[1, -1, -1, -1, -1, -1, -1, -1, 1]], dtype=np.int8)
        g = Gallery(codes, [Pose.identity()], np.array([0]))
        p = tmp_path / "bits.aiag"
        g.save(p)
        raw = p.read_bytes()
        header = 4 + 4 + 4 + 4
        assert raw[header] == 0b00000001  # bit 0 set
        assert raw[header + 1] == 0b00000001  # bit 8 set


def thermometer_encoder(q=16):
    """Hand-built encoder: center-tap convolutions pass a subsampled mean
    through to GAP, and the affine layer thresholds it at q levels, so the
    binary code is a thermometer code of image brightness."""
    enc = ConvEncoder(q=q, seed=0)
    for w, b in zip(enc.conv_w, enc.conv_b):
        w[:] = 0
        b[:] = 0
        w[0, 4] = 1.0  # center tap of input channel 0
    enc.fc_w[:] = 0
    enc.fc_w[:, 0] = 1.0
    enc.fc_b[:] = -np.linspace(0.05, 0.95, q, dtype=np.float32)
    return enc


class TestRetrieval:
    def test_self_retrieval_zero_distance(self):
        enc = thermometer_encoder()
        imgs = [ImageGray(np.full((64, 64), (i + 1) / 6, dtype=np.float32)) for i in range(5)]
        codes = np.stack([binarize(encode_image(im, enc)) for im in imgs])
        assert len({tuple(c) for c in codes}) == 5
        poses = [Pose([i, 0, 0], [0, 0, 0]) for i in range(5)]
        g = Gallery(codes, poses, np.arange(5))
        pose, cls, dist = retrieve(imgs[3], enc, g)
        assert cls == 3 and dist == 0
        assert pose.position[0] == 3

    def test_tie_break_lowest_class(self):
        enc = ConvEncoder(q=8, seed=8)
        for p in enc.params():
            p[:] = 0
        # all-zero encoder -> query code all +1 (sign(0) = +1)
        codes = np.full((4, 8), -1, dtype=np.int8)
        g = Gallery(codes, [Pose([i, 0, 0], [0, 0, 0]) for i in range(4)], np.arange(4))
        pose, cls, dist = retrieve(toy_image(40), enc, g)
        assert dist == 8
        assert cls == 0

    def test_gallery_order_invariance(self):
        enc = ConvEncoder(q=16, seed=9)
        imgs = [toy_image(50 + i) for i in range(6)]
        codes = np.stack([binarize(encode_image(im, enc)) for im in imgs])
        poses = [Pose([i, 0, 0], [0, 0, 0]) for i in range(6)]
        g1 = Gallery(codes, poses, np.arange(6))
        perm = np.array([3, 1, 5, 0, 2, 4])
        g2 = Gallery(codes[perm], [poses[i] for i in perm], np.arange(6)[perm])
        q = toy_image(52)
        r1 = retrieve(q, enc, g1)
        r2 = retrieve(q, enc, g2)
        assert r1[1] == r2[1] and r1[2] == r2[2]


class TestSimilarityScore:
    def test_same_class(self):
        y = np.eye(5)
        assert similarity_score(y[2], y[2]) == 1.0

    def test_positional_difference(self):
        y = np.eye(8)
        assert similarity_score(y[3], y[7]) == pytest.approx(0.25)

    def test_adjacent_positions_distance_branch(self):
        y = np.eye(4)
        assert similarity_score(y[0], y[1]) == pytest.approx(1.0)
        # equals 1 only through the 1/|0-1| branch, positions differ
        assert np.argmax(y[0]) != np.argmax(y[1])

    def test_rejects_non_onehot(self):
        with pytest.raises(ContractError):
            similarity_score(np.array([1.0, 1.0]), np.array([1.0, 0.0]))


class TestTrainLocalizer:
    def make_separable_set(self, n=4):
        # classes separable by mean intensity; stripe structure keeps them
        # separable under the strong brightness augmentation too
        imgs, poses = [], []
        yy, xx = np.mgrid[0:64, 0:64]
        phases = [xx, yy, xx + yy, xx - yy]
        for i in range(n):
            level = (i + 1) / (n + 1)
            rng = np.random.default_rng(100 + i)
            data = np.clip(level + 0.2 * np.sin(2 * np.pi * phases[i % 4] / (6 + 3 * i))
                           + 0.03 * rng.standard_normal((64, 64)), 0, 1)
            imgs.append(ImageGray(data.astype(np.float32)))
            poses.append(Pose([0, 0, 0], [math.radians(10 * i), 0, 0]))
        return imgs, poses

    def test_toy_training_reduces_loss_10x(self):
        imgs, poses = self.make_separable_set()
        cfg = LocalizerConfig(q=16, batch_size=8, iterations=400, seed=0, lr=5e-3)
        _, _, gallery, trace = train_localizer(imgs, poses, cfg)
        start = float(np.mean(trace[:5]))
        end = float(np.mean(trace[-5:]))
        assert end < start / 10.0
        assert gallery.codes.shape[0] == len(imgs)

    def test_deterministic_per_seed(self):
        imgs, poses = self.make_separable_set()
        cfg = LocalizerConfig(q=8, batch_size=4, iterations=20, seed=3)
        _, _, g1, t1 = train_localizer(imgs, poses, cfg)
        _, _, g2, t2 = train_localizer(imgs, poses, cfg)
        assert t1 == t2
        assert np.array_equal(g1.codes, g2.codes)

    def test_proxies_stay_unit_norm(self):
        imgs, poses = self.make_separable_set()
        cfg = LocalizerConfig(q=8, batch_size=4, iterations=10, seed=4)
        _, proxies, _, _ = train_localizer(imgs, poses, cfg)
        assert np.abs(np.linalg.norm(proxies, axis=1) - 1.0).max() < 1e-9

    def test_evaluate_retrieval_self_queries(self):
        imgs, poses = self.make_separable_set()
        cfg = LocalizerConfig(q=16, batch_size=8, iterations=400, seed=5, lr=5e-3)
        enc, _, gallery, _ = train_localizer(imgs, poses, cfg)
        mean_err, success = evaluate_retrieval(list(zip(imgs, poses)), enc, gallery)
        assert mean_err == pytest.approx(0.0, abs=1e-9)
        assert success == 1.0
