import numpy as np
import pytest

from ctjbf.errors import DomainError, ShapeError
from ctjbf.guidance import (
    GuidanceTrainConfig,
    build_guidance_net,
    build_training_pairs,
    estimate_guidance,
    train_guidance,
)
from ctjbf.simulate import DoseModel, PhantomSpec, body_phantom_spec, make_phantom, simulate_low_dose
from ctjbf.volume import CtVolume


def smooth_phantom(seed, dims=(112, 112, 12)):
    """Soft-contrast phantom: no air/bone extremes, gentle interior edges."""
    c = ((dims[0] - 1) / 2, (dims[1] - 1) / 2, (dims[2] - 1) / 2)
    return make_phantom(
        PhantomSpec(
            seed=seed, dims=dims, background=0.0,
            ellipsoids=(
                ((c), (0.45 * dims[0], 0.42 * dims[1], 2.0 * dims[2]), 45.0),
                ((c[0] - 0.15 * dims[0], c[1], c[2]), (0.12 * dims[0], 0.1 * dims[1], dims[2]), 20.0),
                ((c[0] + 0.18 * dims[0], c[1] + 0.1 * dims[1], c[2]), (0.1 * dims[0], 0.08 * dims[1], dims[2]), 75.0),
            ),
        )
    )


@pytest.fixture(scope="module")
def identity_trained():
    """Short run on noisy == clean pairs; the net must learn to output the
    central slice unchanged. Returns (net, history, pairs)."""
    pairs = []
    for seed in range(3):
        vol = simulate_low_dose(
            make_phantom(body_phantom_spec(seed, dims=(64, 64, 9))),
            DoseModel(0.25, base_sigma=15.0),
            seed=seed,
        )
        for patch, _ in build_training_pairs(vol, vol):
            pairs.append((patch, patch.data[4]))
    config = GuidanceTrainConfig(iterations=160, batch=4, lr=3e-4, seed=1)
    net, history = train_guidance(pairs, config)
    return net, history, pairs


@pytest.fixture(scope="module")
def denoise_trained():
    """Short run on real 25%-dose pairs for estimation-quality checks."""
    pairs = []
    for seed in range(4):
        clean = make_phantom(body_phantom_spec(seed, dims=(128, 128, 9)))
        noisy = simulate_low_dose(clean, DoseModel(0.25, base_sigma=15.0), seed=seed + 50)
        pairs.extend(build_training_pairs(clean, noisy))
    config = GuidanceTrainConfig(iterations=220, batch=6, lr=3e-4, seed=2)
    net, history = train_guidance(pairs, config)
    return net, history


class TestTopology:
    def test_output_shape(self):
        net = build_guidance_net(0)
        out = net.forward(np.zeros((1, 1, 9, 64, 64)))
        assert out.shape == (1, 1, 1, 64, 64)

    def test_bottleneck_shape(self):
        net = build_guidance_net(0)
        net.forward(np.zeros((1, 1, 9, 64, 64)))
        # output of the last encoder activation, channel-first internal layout
        assert net._outs[7].shape == (32, 1, 1, 56, 56)

    def test_same_seed_identical_weights(self):
        a, b = build_guidance_net(7), build_guidance_net(7)
        for ta, tb in zip(a.params(), b.params()):
            assert np.array_equal(ta.data, tb.data)

    def test_zero_weights_pass_input_through(self):
        net = build_guidance_net(0)
        for p in net.params():
            p.data[...] = 0.0
        x = np.random.default_rng(0).uniform(-1, 1, size=(2, 1, 9, 64, 64))
        out = net.forward(x)
        assert np.allclose(out[:, 0, 0], x[:, 0, 4], atol=1e-12)

    def test_gradient_support_box(self):
        net = build_guidance_net(3)
        x = np.random.default_rng(1).standard_normal((1, 1, 9, 64, 64))
        out = net.forward(x)
        dy = np.zeros_like(out)
        dy[0, 0, 0, 30, 33] = 1.0
        din = net.backward(dy).data[0, 0]
        nz = np.argwhere(np.abs(din) > 0)
        z_ext = nz[:, 0].max() - nz[:, 0].min() + 1
        y_ext = nz[:, 1].max() - nz[:, 1].min() + 1
        x_ext = nz[:, 2].max() - nz[:, 2].min() + 1
        assert (x_ext, y_ext, z_ext) == (17, 17, 9)
        # centered on the probed output pixel
        assert nz[:, 1].min() == 30 - 8 and nz[:, 2].min() == 33 - 8


class TestTraining:
    def test_empty_pairs_rejected(self):
        with pytest.raises(DomainError):
            train_guidance([], GuidanceTrainConfig(iterations=1))

    def test_identity_learning_converges(self, identity_trained):
        _, history, pairs = identity_trained
        targets = np.stack([t for _, t in pairs]) / 1000.0
        threshold = 1e-3 * float(targets.var())
        assert history[-1] < threshold

    def test_loss_history_finite_and_descending(self, identity_trained):
        _, history, _ = identity_trained
        history = np.asarray(history)
        assert np.all(np.isfinite(history))
        window = 100
        ma = np.convolve(history, np.ones(window) / window, mode="valid")
        tail = ma[len(ma) // 2 :]
        assert np.all(np.diff(tail) <= 1e-12)

    def test_full_scale_batch_shape(self):
        net = build_guidance_net(0)
        out = net.forward(np.zeros((48, 1, 9, 64, 64)))
        assert out.shape == (48, 1, 1, 64, 64)


class TestEstimation:
    def test_output_dims_match_input(self, identity_trained):
        net, _, _ = identity_trained
        vol = simulate_low_dose(
            make_phantom(body_phantom_spec(9)), DoseModel(0.25, base_sigma=15.0), seed=3
        )
        est = estimate_guidance(net, vol)
        assert est.dims == vol.dims

    def test_determinism(self, identity_trained):
        net, _, _ = identity_trained
        vol = simulate_low_dose(
            make_phantom(body_phantom_spec(10, dims=(64, 64, 9))),
            DoseModel(0.25, base_sigma=15.0),
            seed=4,
        )
        a = estimate_guidance(net, vol)
        b = estimate_guidance(net, vol)
        assert np.array_equal(a.data, b.data)

    def test_thin_volume_rejected(self, identity_trained):
        net, _, _ = identity_trained
        vol = CtVolume((64, 64, 8), (1, 1, 1), np.zeros(64 * 64 * 8))
        with pytest.raises(ShapeError):
            estimate_guidance(net, vol)

    def test_constant_volume_nearly_constant(self, identity_trained):
        net, _, _ = identity_trained
        vol = CtVolume((64, 64, 9), (1, 1, 1), np.full(64 * 64 * 9, 60.0))
        est = estimate_guidance(net, vol)
        assert np.max(np.abs(est.data - 60.0)) < 1.0

    def test_uncovered_borders_keep_noisy_values(self, identity_trained):
        net, _, _ = identity_trained
        vol = simulate_low_dose(
            make_phantom(body_phantom_spec(11, dims=(80, 80, 10))),
            DoseModel(0.25, base_sigma=15.0),
            seed=5,
        )
        est = estimate_guidance(net, vol)
        # in-plane coverage is [0, 64); z coverage is slice 4..nz-5
        assert np.array_equal(est.data[:, :, 64:], vol.data[:, :, 64:])
        assert np.array_equal(est.data[:4], vol.data[:4])
        assert np.array_equal(est.data[-4:], vol.data[-4:])

    def test_overlap_seams_are_small(self, denoise_trained):
        net, _ = denoise_trained
        clean = smooth_phantom(21)
        noisy = simulate_low_dose(clean, DoseModel(0.25, base_sigma=15.0), seed=6)
        est = estimate_guidance(net, noisy).data
        band = est[5:7]  # predicted slices
        # scan across the window-boundary columns/rows (multiples of 48/64)
        for boundary in (48, 64):
            col_jump = np.max(np.abs(band[:, :, boundary] - band[:, :, boundary - 1]))
            row_jump = np.max(np.abs(band[:, boundary, :] - band[:, boundary - 1, :]))
            assert col_jump < 5.0
            assert row_jump < 5.0

    def test_denoising_actually_denoises(self, denoise_trained):
        net, _ = denoise_trained
        clean = make_phantom(body_phantom_spec(22, dims=(64, 64, 9)))
        noisy = simulate_low_dose(clean, DoseModel(0.25, base_sigma=15.0), seed=7)
        est = estimate_guidance(net, noisy)
        err_noisy = float(np.mean((noisy.data[4] - clean.data[4]) ** 2))
        err_est = float(np.mean((est.data[4] - clean.data[4]) ** 2))
        assert err_est < err_noisy


def test_training_pairs_alignment():
    clean = make_phantom(body_phantom_spec(30, dims=(128, 128, 9)))
    noisy = simulate_low_dose(clean, DoseModel(0.5, base_sigma=15.0), seed=8)
    pairs = build_training_pairs(clean, noisy)
    assert len(pairs) == 4
    patch, target = pairs[1]
    x0, y0, z0 = patch.origin
    assert np.array_equal(target, clean.data[z0 + 4, y0 : y0 + 64, x0 : x0 + 64])
