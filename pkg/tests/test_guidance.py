"""Noise schedule, surrogate score-distillation algebra, the wire codec,
and the loopback mock server."""

import json

import numpy as np
import pytest

import kinetype.guidance as G


# -- schedule ------------------------------------------------------------------


def test_schedule_endpoints():
    s = G.NoiseSchedule()
    assert s.T == 1000
    assert s.alpha_bar(1) == pytest.approx(0.9999)
    assert s.alpha_bar(1000) == pytest.approx(0.01)


def test_schedule_linear_interior():
    s = G.NoiseSchedule()
    for tau in (2, 137, 500, 999):
        expected = 0.9999 + (0.01 - 0.9999) * (tau - 1) / 999
        assert s.alpha_bar(tau) == pytest.approx(expected, rel=1e-14)


def test_alpha_sigma_pythagorean():
    s = G.NoiseSchedule()
    for tau in (1, 50, 500, 950, 1000):
        assert s.alpha(tau) ** 2 + s.sigma(tau) ** 2 == pytest.approx(1.0)
        assert s.alpha(tau) == pytest.approx(np.sqrt(s.alpha_bar(tau)))


def test_tau_range_five_percent_margins():
    assert G.NoiseSchedule().tau_range == (50, 950)
    assert G.NoiseSchedule(T=200).tau_range == (10, 190)


def test_schedule_validation():
    with pytest.raises(ValueError):
        G.NoiseSchedule(T=1)


def test_noise_image_formula(rng):
    s = G.NoiseSchedule()
    x = rng.uniform(0, 1, (2, 4, 4))
    eps = rng.standard_normal(x.shape)
    z = G.noise_image(x, 333, s, eps)
    assert np.allclose(z, s.alpha(333) * x + s.sigma(333) * eps, atol=1e-15)


def test_noise_image_shape_mismatch_errors(rng):
    s = G.NoiseSchedule()
    with pytest.raises(G.GuidanceError):
        G.noise_image(np.zeros((2, 4, 4)), 100, s, np.zeros((2, 4, 5)))


# -- surrogate backend ---------------------------------------------------------


def test_surrogate_residual_closed_form(rng):
    # epsilon-hat minus epsilon collapses to (alpha/sigma)(x - target):
    # the injected noise cancels exactly
    s = G.NoiseSchedule()
    target = rng.uniform(0, 1, (3, 8, 8))
    x = rng.uniform(0, 1, (3, 8, 8))
    eps = rng.standard_normal(x.shape)
    backend = G.SurrogateBackend(target, s)
    for tau in (50, 444, 950):
        grads, tau_used = backend.pixel_grads(x, "prompt", tau, eps,
                                              np.random.default_rng(0))
        expected = (s.alpha(tau) / s.sigma(tau)) * (x - target)
        assert tau_used == tau
        rel = np.abs(grads - expected).max() / np.abs(expected).max()
        assert rel < 1e-12


def test_surrogate_weighting_options(rng):
    s = G.NoiseSchedule()
    target = np.zeros((1, 4, 4))
    x = rng.uniform(0.2, 1, (1, 4, 4))
    eps = np.zeros_like(x)
    one = G.SurrogateBackend(target, s, w_tau="one")
    sig = G.SurrogateBackend(target, s, w_tau="sigma2")
    tau = 300
    g1, _ = one.pixel_grads(x, "", tau, eps, np.random.default_rng(0))
    g2, _ = sig.pixel_grads(x, "", tau, eps, np.random.default_rng(0))
    assert np.allclose(g2, g1 * s.sigma(tau) ** 2, atol=1e-15)


def test_surrogate_unknown_weighting_rejected():
    with pytest.raises(ValueError):
        G.SurrogateBackend(np.zeros((1, 2, 2)), w_tau="cube")


def test_sds_pixel_grad_draws_tau_then_eps(rng):
    s = G.NoiseSchedule()
    target = np.zeros((2, 4, 4))
    x = np.full((2, 4, 4), 0.5)
    backend = G.SurrogateBackend(target, s)
    out = G.sds_pixel_grad(x, backend, "p", np.random.default_rng(9), s)
    # replicate the draw order independently
    r = np.random.default_rng(9)
    tau = int(r.integers(50, 951))
    eps = r.standard_normal(x.shape)
    assert out.tau_used == tau
    expected = (s.alpha(tau) / s.sigma(tau)) * (x - target)
    assert np.allclose(out.grads, expected, atol=1e-12)


def test_sds_pixel_grad_honors_supplied_tau_eps(rng):
    s = G.NoiseSchedule()
    backend = G.SurrogateBackend(np.zeros((1, 4, 4)), s)
    x = np.full((1, 4, 4), 0.25)
    eps = rng.standard_normal(x.shape)
    out = G.sds_pixel_grad(x, backend, "p", np.random.default_rng(0), s,
                           tau=777, eps=eps)
    assert out.tau_used == 777


def test_sds_tau_bounds_inclusive():
    # over many draws tau stays inside [50, 950] and hits both halves
    s = G.NoiseSchedule()
    backend = G.SurrogateBackend(np.zeros((1, 2, 2)), s)
    taus = []
    r = np.random.default_rng(3)
    for _ in range(200):
        out = G.sds_pixel_grad(np.zeros((1, 2, 2)), backend, "", r, s)
        taus.append(out.tau_used)
    assert min(taus) >= 50 and max(taus) <= 950
    assert min(taus) < 300 and max(taus) > 700


# -- wire codec ----------------------------------------------------------------


def test_request_round_trip_bytes_identical(rng):
    frames = rng.uniform(0, 1, (2, 3, 3))
    raw = G.encode_request(frames, "dance", 123, 42)
    assert raw.endswith(b"\n")
    msg = G.decode_request(raw)
    # re-encoding the decoded payload reproduces the bytes exactly
    again = G.encode_request(np.asarray(msg["frames"], dtype=np.float64)
                             .reshape(msg["shape"]), msg["prompt"],
                             msg["tau"], msg["seed"])
    assert again == raw


def test_response_round_trip_bytes_identical(rng):
    grads = rng.standard_normal((2, 3, 3))
    raw = G.encode_response(grads, 500, "surrogate")
    out = G.decode_response(raw, (2, 3, 3))
    again = G.encode_response(out.grads, out.tau_used, out.backend)
    assert again == raw


def test_request_fields_and_version():
    raw = G.encode_request(np.zeros((1, 2, 2)), "p", None, 7)
    msg = json.loads(raw.decode())
    assert msg["version"] == 1
    assert msg["shape"] == [1, 2, 2]
    assert msg["tau"] is None
    assert msg["seed"] == 7
    assert len(msg["frames"]) == 4


def test_float_formatting_nine_significant_digits():
    raw = G.encode_request(np.array([[[1.0 / 3.0]]]), "", None, 0)
    assert b"0.333333333" in raw


def test_decode_request_missing_field_named():
    raw = b'{"version":1,"prompt":"p","shape":[1,1,1],"frames":[0],"seed":1}\n'
    with pytest.raises(G.GuidanceError) as e:
        G.decode_request(raw)
    assert "tau" in str(e.value)


def test_decode_request_bad_version():
    raw = b'{"version":9,"prompt":"p","shape":[1,1,1],"frames":[0],"tau":null,"seed":1}\n'
    with pytest.raises(G.GuidanceError):
        G.decode_request(raw)


def test_decode_request_frame_count_mismatch():
    raw = b'{"version":1,"prompt":"p","shape":[1,2,2],"frames":[0,0],"tau":null,"seed":1}\n'
    with pytest.raises(G.GuidanceError):
        G.decode_request(raw)


def test_decode_response_shape_mismatch():
    raw = G.encode_response(np.zeros((1, 2, 2)), 100, "x")
    with pytest.raises(G.GuidanceError):
        G.decode_response(raw, (1, 2, 3))


def test_decode_response_nan_rejected():
    raw = b'{"version":1,"shape":[1,1,1],"grads":[NaN],"tau_used":5,"backend":"x"}\n'
    with pytest.raises(G.GuidanceError):
        G.decode_response(raw, (1, 1, 1))


def test_error_reply_raises_with_message():
    raw = G.encode_error("model exploded")
    with pytest.raises(G.GuidanceError) as e:
        G.decode_response(raw, (1, 1, 1))
    assert "model exploded" in str(e.value)


# -- mock server / external backend --------------------------------------------


def test_mock_server_round_trip(rng):
    server = G.MockGuidanceServer()
    server.start()
    try:
        backend = G.ExternalBackend("127.0.0.1", server.port)
        x = rng.uniform(0, 1, (2, 4, 4))
        eps = np.zeros_like(x)
        grads, tau_used = backend.pixel_grads(x, "p", 321, eps,
                                              np.random.default_rng(0))
        assert grads.shape == x.shape
        assert np.array_equal(grads, np.zeros_like(x))
        assert tau_used == 321
    finally:
        server.stop()


def test_mock_server_constant_mode(rng):
    server = G.MockGuidanceServer(constant=0.25)
    server.start()
    try:
        backend = G.ExternalBackend("127.0.0.1", server.port)
        x = rng.uniform(0, 1, (1, 3, 3))
        grads, _ = backend.pixel_grads(x, "p", 100, np.zeros_like(x),
                                       np.random.default_rng(0))
        assert np.allclose(grads, 0.25)
    finally:
        server.stop()


def test_mock_server_null_tau_defaults_to_500():
    import socket
    server = G.MockGuidanceServer()
    server.start()
    try:
        with socket.create_connection(("127.0.0.1", server.port)) as sock:
            sock.sendall(G.encode_request(np.zeros((1, 2, 2)), "p", None, 1))
            buf = b""
            while not buf.endswith(b"\n"):
                buf += sock.recv(65536)
        out = G.decode_response(buf, (1, 2, 2))
        assert out.tau_used == 500
    finally:
        server.stop()


def test_mock_server_multiple_requests_per_connection():
    import socket
    server = G.MockGuidanceServer()
    server.start()
    try:
        with socket.create_connection(("127.0.0.1", server.port)) as sock:
            for tau in (60, 70):
                sock.sendall(G.encode_request(np.zeros((1, 2, 2)), "p",
                                              tau, 1))
                buf = b""
                while not buf.endswith(b"\n"):
                    buf += sock.recv(65536)
                assert G.decode_response(buf, (1, 2, 2)).tau_used == tau
    finally:
        server.stop()


def test_mock_server_malformed_request_gets_error_reply():
    import socket
    server = G.MockGuidanceServer()
    server.start()
    try:
        with socket.create_connection(("127.0.0.1", server.port)) as sock:
            sock.sendall(b'{"version":1,"nope":true}\n')
            buf = b""
            while not buf.endswith(b"\n"):
                chunk = sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
        msg = json.loads(buf.decode())
        assert "error" in msg
    finally:
        server.stop()


def test_external_backend_connection_refused():
    backend = G.ExternalBackend("127.0.0.1", 1, timeout=0.5)
    with pytest.raises(G.GuidanceError):
        backend.pixel_grads(np.zeros((1, 2, 2)), "p", 100,
                            np.zeros((1, 2, 2)), np.random.default_rng(0))


def test_external_backend_draws_one_request_seed():
    # the extra seed draw advances the stream by exactly one integers() call
    server = G.MockGuidanceServer()
    server.start()
    try:
        backend = G.ExternalBackend("127.0.0.1", server.port)
        r1 = np.random.default_rng(5)
        backend.pixel_grads(np.zeros((1, 2, 2)), "p", 100,
                            np.zeros((1, 2, 2)), r1)
        r2 = np.random.default_rng(5)
        r2.integers(0, 2 ** 31 - 1)
        assert r1.integers(0, 1000) == r2.integers(0, 1000)
    finally:
        server.stop()


def test_sds_pixel_grad_validates_response_shape():
    class BadBackend:
        def pixel_grads(self, frames, prompt, tau, eps, rng):
            return np.zeros((1, 2, 3)), tau

    with pytest.raises(G.GuidanceError):
        G.sds_pixel_grad(np.zeros((1, 2, 2)), BadBackend(), "p",
                         np.random.default_rng(0))
