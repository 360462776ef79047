"""Scheduler algebra, mock determinism, noise init, wire protocol.

The scheduler closed forms used below:
    step(z, eps, t) = sqrt(abar_{t-1}/abar_t) * z
                      + (sqrt(1-abar_{t-1}) - sqrt(abar_{t-1}) sqrt(1-abar_t)/sqrt(abar_t)) * eps
so with eps = 0 the whole chain is the rescaling z / sqrt(abar_{T-1}).
"""

from __future__ import annotations

import http.server
import threading

import numpy as np
import pytest

from spherefuse.backend import (
    MockCodec,
    MockDenoiser,
    RemoteDenoiser,
    Scheduler,
    decode_predict_request,
    encode_predict_request,
    init_noise,
)

SHAPE = (4, 8, 16)


def _latent(seed=0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(SHAPE).astype(np.float32)


class TestScheduler:
    def test_zero_residual_chain_is_rescaling(self):
        sched = Scheduler(num_steps=10)
        z = _latent(1)
        out = z.copy()
        zero = np.zeros_like(z)
        for t in reversed(range(10)):
            out = sched.step(out, zero, t)
        expected = z / np.sqrt(sched.alphas_cumprod[-1])
        np.testing.assert_allclose(out, expected.astype(np.float32), rtol=1e-5)

    def test_single_step_closed_form(self):
        sched = Scheduler(num_steps=1)
        z = _latent(2)
        eps = _latent(3)
        abar = sched.alphas_cumprod[0]
        x0 = (z - np.sqrt(1 - abar) * eps) / np.sqrt(abar)
        np.testing.assert_allclose(sched.step(z, eps, 0), x0.astype(np.float32), rtol=1e-6)

    def test_mask_combination_commutes_with_step(self):
        # binary-mask combination of inputs == combination of outputs, bitwise
        sched = Scheduler(num_steps=20)
        mask = (np.random.default_rng(4).random(SHAPE[-2:]) > 0.5).astype(np.float32)
        za, zb = _latent(5), _latent(6)
        ea, eb = _latent(7), _latent(8)
        z_mix = mask * za + (1 - mask) * zb
        e_mix = mask * ea + (1 - mask) * eb
        left = sched.step(z_mix, e_mix, 13)
        right = mask * sched.step(za, ea, 13) + (1 - mask) * sched.step(zb, eb, 13)
        np.testing.assert_array_equal(left, right.astype(np.float32))

    def test_add_noise_levels(self):
        sched = Scheduler(num_steps=50)
        clean = np.ones(SHAPE, dtype=np.float32)
        noise = _latent(9)
        noised = sched.add_noise(clean, noise, 49)
        abar = sched.alphas_cumprod[49]
        np.testing.assert_allclose(
            noised, (np.sqrt(abar) * clean + np.sqrt(1 - abar) * noise).astype(np.float32), rtol=1e-6
        )

    def test_t_out_of_range(self):
        sched = Scheduler(num_steps=5)
        z = _latent(0)
        with pytest.raises(ValueError):
            sched.step(z, z, 5)
        with pytest.raises(ValueError):
            sched.step(z, z, -1)


class TestMockDenoiser:
    def test_deterministic(self):
        mock = MockDenoiser()
        z = _latent(10)
        a = mock.predict(z, 3, "cow", {"branch": "pano"})
        b = mock.predict(z, 3, "cow", {"branch": "pano"})
        np.testing.assert_array_equal(a, b)

    def test_prompt_sensitivity(self):
        mock = MockDenoiser()
        z = _latent(11)
        r_cow = mock.predict(z, 3, "cow", None)
        r_car = mock.predict(z, 3, "car", None)
        assert np.linalg.norm(r_cow - r_car) > 0

    def test_context_sensitivity(self):
        mock = MockDenoiser()
        z = _latent(12)
        a = mock.predict(z, 3, "cow", {"branch": "pano"})
        b = mock.predict(z, 3, "cow", {"branch": "persp", "view": 0})
        assert np.linalg.norm(a - b) > 0

    def test_zero_latent_beta_zero_gives_zero(self):
        mock = MockDenoiser(alpha=0.1, beta=0.0)
        z = np.zeros(SHAPE, dtype=np.float32)
        np.testing.assert_array_equal(mock.predict(z, 0, "anything", None), z)

    def test_pointwise_locality(self):
        # default mock has no receptive field: changing one cell only
        # changes that cell's residual
        mock = MockDenoiser()
        z = _latent(13)
        z2 = z.copy()
        z2[:, 3, 7] += 1.0
        diff = mock.predict(z2, 1, "p", None) - mock.predict(z, 1, "p", None)
        changed = np.nonzero(np.any(diff != 0, axis=0))
        assert set(zip(*changed)) == {(3, 7)}

    def test_mixing_adds_receptive_field(self):
        mock = MockDenoiser(mixing=0.5)
        z = _latent(14)
        z2 = z.copy()
        z2[:, 3, 7] += 1.0
        diff = mock.predict(z2, 1, "p", None) - mock.predict(z, 1, "p", None)
        changed = set(zip(*np.nonzero(np.any(diff != 0, axis=0))))
        assert (2, 6) in changed and (4, 8) in changed


class TestInitNoise:
    def test_coupled_paths_bitwise_equal(self):
        noises = init_noise(SHAPE, 42, coupled=True, n_paths=3)
        assert len(noises) == 3
        np.testing.assert_array_equal(noises[0], noises[1])
        np.testing.assert_array_equal(noises[0], noises[2])
        assert noises[0] is not noises[1]

    def test_uncoupled_reproducible(self):
        a = init_noise(SHAPE, 42, coupled=False, n_paths=3)
        b = init_noise(SHAPE, 42, coupled=False, n_paths=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_uncoupled_pairwise_distinct(self):
        noises = init_noise(SHAPE, 42, coupled=False, n_paths=3)
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(noises[i] - noises[j]) > 0


class TestMockCodec:
    def test_round_trip_exact(self):
        codec = MockCodec()
        img = _latent(15)
        np.testing.assert_array_equal(codec.decode(codec.encode(img)), img)

    def test_latent_shape(self):
        codec = MockCodec()
        assert codec.latent_shape(512, 1024) == (4, 64, 128)
        with pytest.raises(ValueError):
            codec.latent_shape(100, 200)

    def test_color_to_latent_constant_field(self):
        codec = MockCodec()
        field = codec.color_to_latent((0.2, 0.4, 0.6), (4, 8, 16))
        assert field.shape == (4, 8, 16)
        for c, expected in enumerate([0.2, 0.4, 0.6, 0.4]):
            assert np.all(field[c] == np.float32(expected))


class _MockServer(http.server.BaseHTTPRequestHandler):
    """Test double for an out-of-process denoiser: residual = -latent * t."""

    def do_POST(self):
        payload = self.rfile.read(int(self.headers["Content-Length"]))
        latent, t_index, prompt, context = decode_predict_request(payload)
        residual = (-latent * np.float32(t_index)).astype("<f4")
        assert context.get("branch") == "pano"
        assert prompt == "a green field"
        body = residual.tobytes()
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


class TestWireProtocol:
    def test_request_encoding_round_trip(self):
        latent = _latent(16)
        payload = encode_predict_request(latent, 7, "cow", {"branch": "persp", "view": 3})
        decoded, t, prompt, context = decode_predict_request(payload)
        np.testing.assert_array_equal(decoded, latent)
        assert t == 7 and prompt == "cow"
        assert context == {"branch": "persp", "view": 3}

    def test_byte_layout_is_le_float32_c_order(self):
        latent = np.arange(8, dtype=np.float32).reshape(1, 2, 4)
        payload = encode_predict_request(latent, 0, "", None)
        header_len = int.from_bytes(payload[:4], "little")
        blob = payload[4 + header_len :]
        np.testing.assert_array_equal(
            np.frombuffer(blob, dtype="<f4"), np.arange(8, dtype=np.float32)
        )

    def test_remote_denoiser_round_trip(self):
        server = http.server.HTTPServer(("127.0.0.1", 0), _MockServer)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            endpoint = f"http://127.0.0.1:{server.server_port}/predict"
            remote = RemoteDenoiser(endpoint)
            latent = _latent(17)
            residual = remote.predict(latent, 5, "a green field", {"branch": "pano"})
            np.testing.assert_allclose(residual, -latent * 5.0, rtol=1e-6)
        finally:
            server.shutdown()
            thread.join(timeout=5)
