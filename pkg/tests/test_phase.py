import numpy as np
import pytest

from agentreg.errors import DegenerateInputError, DimensionError
from agentreg.numerics import (
    ConvLayer, ConvStackWeights, finite_diff_gradient, init_conv_stack,
    relative_gradient_error, zero_conv_stack,
)
from agentreg.phase import (
    area_downsample, extract_phase_map, fuse_phase_backward,
    fuse_phase_features, fuse_phase_features_cached,
)
from agentreg.rng import Rng


def phase_reconstruction_loop(channel):
    # Independent oracle: build c * e^{i phase} elementwise, invert by loops.
    h, w = channel.shape
    spectrum = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for i in range(h):
                for j in range(w):
                    acc += channel[i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w))
            spectrum[u, v] = acc
    amp = np.abs(spectrum)
    c = amp.mean()
    unit = np.where(amp > 1e-12 * amp.max(), spectrum / np.where(amp == 0, 1, amp), 0)
    recon = np.zeros((h, w), dtype=np.complex128)
    for i in range(h):
        for j in range(w):
            acc = 0j
            for u in range(h):
                for v in range(w):
                    acc += c * unit[u, v] * np.exp(2j * np.pi * (u * i / h + v * j / w))
            recon[i, j] = acc / (h * w)
    return recon.real, c


class TestExtract:
    def test_constant_image_stays_constant(self):
        img = np.full((4, 4, 3), 3.0)
        pm = extract_phase_map(img)
        for ch in range(3):
            tex = pm.texture[:, :, ch]
            assert np.max(np.abs(tex - tex[0, 0])) < 1e-9

    def test_brightness_scaling_only_changes_constant(self):
        rng = Rng(0)
        img = rng.uniform(0.1, 1.0, (8, 8, 3))
        pm1 = extract_phase_map(img)
        pm2 = extract_phase_map(2.0 * img)
        np.testing.assert_allclose(pm2.amplitude_constant,
                                   2.0 * pm1.amplitude_constant, rtol=1e-12)
        np.testing.assert_allclose(pm2.texture, 2.0 * pm1.texture, atol=1e-9)

    def test_matches_loop_oracle(self):
        rng = Rng(1)
        img = rng.normal(size=(8, 8, 3))
        pm = extract_phase_map(img)
        tex0, c0 = phase_reconstruction_loop(img[:, :, 0])
        np.testing.assert_allclose(pm.texture[:, :, 0], tex0, atol=1e-9)
        assert pm.amplitude_constant[0] == pytest.approx(c0)

    def test_flat_amplitude_roundtrip(self):
        # If the amplitude spectrum is already constant the reconstruction
        # must reproduce the image.
        rng = Rng(2)
        h, w = 6, 6
        phase = rng.uniform(-np.pi, np.pi, (h, w))
        # enforce conjugate symmetry so the spatial image is real
        spectrum = np.exp(1j * phase)
        for u in range(h):
            for v in range(w):
                if ((h - u) % h, (w - v) % w) == (u, v):
                    spectrum[u, v] = 1.0  # self-conjugate bins must be real
                else:
                    spectrum[(h - u) % h, (w - v) % w] = np.conj(spectrum[u, v])
        from agentreg.numerics import idft2
        img1 = idft2(3.0 * spectrum).real
        img = np.stack([img1, img1, img1], axis=2)
        pm = extract_phase_map(img)
        np.testing.assert_allclose(pm.texture, img, atol=1e-9)

    def test_zero_channel_rejected(self):
        img = np.ones((4, 4, 3))
        img[:, :, 1] = 0.0
        with pytest.raises(DegenerateInputError):
            extract_phase_map(img)

    def test_shape_contract(self):
        with pytest.raises(DimensionError):
            extract_phase_map(np.zeros((4, 4)))
        with pytest.raises(DimensionError):
            extract_phase_map(np.zeros((1, 4, 3)))


class TestDownsample:
    def test_block_means(self):
        x = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = area_downsample(x, 2, 2)
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]])

    def test_non_integer_factor_rejected(self):
        with pytest.raises(DimensionError):
            area_downsample(np.zeros((5, 4)), 2, 2)


class TestFusion:
    def make_inputs(self, seed=3, c=4):
        rng = Rng(seed)
        img = rng.uniform(0.1, 1.0, (16, 16, 3))
        pm = extract_phase_map(img)
        base = rng.derive(1).normal(size=(4, 4, c))
        return pm, base

    def test_zero_adaptor_is_identity(self):
        pm, base = self.make_inputs()
        out = fuse_phase_features(base, pm, zero_conv_stack((3, 4, 4, 4)))
        np.testing.assert_array_equal(out, base)

    def test_zero_base_gives_adaptor_output(self):
        pm, base = self.make_inputs()
        w = init_conv_stack((3, 4, 4, 4), Rng(9), scale=0.3)
        out = fuse_phase_features(np.zeros_like(base), pm, w)
        other = fuse_phase_features(base, pm, w)
        np.testing.assert_allclose(other - base, out, atol=1e-12)

    def test_deterministic(self):
        pm, base = self.make_inputs()
        w = init_conv_stack((3, 4, 4, 4), Rng(9), scale=0.3)
        a = fuse_phase_features(base, pm, w)
        b = fuse_phase_features(base, pm, w)
        assert a.tobytes() == b.tobytes()

    def test_channel_mismatch(self):
        pm, base = self.make_inputs()
        with pytest.raises(DimensionError):
            fuse_phase_features(base, pm, zero_conv_stack((3, 4, 4, 5)))

    def test_adaptor_gradients_match_fd(self):
        pm, base = self.make_inputs(seed=5, c=3)
        rng = Rng(21)
        w = init_conv_stack((3, 3, 3, 3), rng, scale=0.4)
        readout = rng.derive(1).normal(size=base.shape)

        _, cache = fuse_phase_features_cached(base, pm, w)
        grads, dbase = fuse_phase_backward(w, cache, readout)
        np.testing.assert_array_equal(dbase, readout)

        for li in range(3):
            def f(kernel, li=li):
                trial = ConvStackWeights(
                    layers=[ConvLayer(kernel=(kernel if i == li else w.layers[i].kernel),
                                      bias=w.layers[i].bias)
                            for i in range(3)],
                    negative_slope=w.negative_slope)
                return float(np.sum(fuse_phase_features(base, pm, trial) * readout))
            fd = finite_diff_gradient(f, w.layers[li].kernel)
            assert relative_gradient_error(grads[li][0], fd) < 1e-4

            def fb(bias, li=li):
                trial = ConvStackWeights(
                    layers=[ConvLayer(kernel=w.layers[i].kernel,
                                      bias=(bias if i == li else w.layers[i].bias))
                            for i in range(3)],
                    negative_slope=w.negative_slope)
                return float(np.sum(fuse_phase_features(base, pm, trial) * readout))
            fd_b = finite_diff_gradient(fb, w.layers[li].bias)
            assert relative_gradient_error(grads[li][1], fd_b) < 1e-4
