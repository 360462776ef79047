"""Denoiser, scheduler and latent codec contracts plus deterministic mocks.

The orchestration layers never import a real diffusion model; they talk to
three small contracts:

  * Denoiser  -- predict(latent, t_index, prompt, context) -> residual
  * Scheduler -- step(latent, residual, t_index) -> latent at t_index - 1
  * Codec     -- encode(image) -> latent, decode(latent) -> image,
                color_to_latent(rgb) -> constant-field latent

MockDenoiser / MockCodec implement them deterministically so the full
pipelines are bit-reproducible and testable without model weights.
RemoteDenoiser speaks a documented byte protocol to an out-of-process
server hosting the real model.
"""

from __future__ import annotations

import hashlib
import json
import struct
import urllib.request
from dataclasses import dataclass

import numpy as np

LATENT_CHANNELS = 4
LATENT_DOWNSCALE = 8


@dataclass
class DiffusionState:
    """One denoising path's latent plus its timestep and RNG lineage."""

    latent: np.ndarray
    t_index: int
    path_id: int = 0
    rng_seed: int = 0


class Scheduler:
    """Deterministic DDIM-style sampler (eta = 0, epsilon prediction).

    The classic 1000-step linear beta schedule is subsampled down to
    num_steps timesteps (standard DDIM striding), so few-step runs keep
    realistic per-step noise removal. step() is linear in (latent,
    residual) with scalar per-step coefficients, which makes mask-wise
    combination commute with stepping exactly.
    """

    TRAIN_STEPS = 1000

    def __init__(self, num_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if not 1 <= num_steps <= self.TRAIN_STEPS:
            raise ValueError(f"num_steps must be in [1, {self.TRAIN_STEPS}], got {num_steps}")
        self.num_steps = num_steps
        betas = np.linspace(beta_start, beta_end, self.TRAIN_STEPS, dtype=np.float64)
        abar_full = np.cumprod(1.0 - betas)
        stride = np.round(np.linspace(0, self.TRAIN_STEPS - 1, num_steps)).astype(int)
        self.alphas_cumprod = abar_full[stride]
        self.init_sigma = 1.0

    def _check_t(self, t_index: int) -> None:
        if not 0 <= t_index < self.num_steps:
            raise ValueError(f"t_index {t_index} out of range [0, {self.num_steps})")

    def step(self, latent: np.ndarray, residual: np.ndarray, t_index: int) -> np.ndarray:
        self._check_t(t_index)
        abar_t = self.alphas_cumprod[t_index]
        abar_prev = self.alphas_cumprod[t_index - 1] if t_index > 0 else 1.0
        x0 = (latent - np.sqrt(1.0 - abar_t) * residual) / np.sqrt(abar_t)
        out = np.sqrt(abar_prev) * x0 + np.sqrt(1.0 - abar_prev) * residual
        return out.astype(latent.dtype)

    def add_noise(self, clean: np.ndarray, noise: np.ndarray, t_index: int) -> np.ndarray:
        """Forward-noise a clean latent to the level of timestep t_index."""
        self._check_t(t_index)
        abar_t = self.alphas_cumprod[t_index]
        out = np.sqrt(abar_t) * clean + np.sqrt(1.0 - abar_t) * noise
        return out.astype(clean.dtype)


def init_noise(shape: tuple, seed: int, coupled: bool, n_paths: int) -> list[np.ndarray]:
    """Initial Gaussian latents for n_paths, reproducible from `seed`.

    coupled=True gives every path the same draw (independent copies);
    coupled=False draws per-path noise from per-path child seeds.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if coupled:
        rng = np.random.default_rng([seed, 0])
        base = rng.standard_normal(shape).astype(np.float32)
        return [base.copy() for _ in range(n_paths)]
    return [
        np.random.default_rng([seed, i]).standard_normal(shape).astype(np.float32)
        for i in range(n_paths)
    ]


def _stable_seed(*parts) -> int:
    """64-bit seed from string/int parts, stable across processes."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _context_tag(context: dict | None) -> str:
    if not context:
        return ""
    return json.dumps({k: context[k] for k in sorted(context)}, sort_keys=True, default=str)


def _smooth_field(shape: tuple, seed: int, cell: int = 4) -> np.ndarray:
    """Seeded smooth pseudo-random field via bilinear upsampling of a
    coarse Gaussian grid (cell x cell latent cells per coarse node)."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    ch = h // cell + 2
    cw = w // cell + 2
    coarse = rng.standard_normal((c, ch, cw))
    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    g00 = coarse[:, y0][:, :, x0]
    g01 = coarse[:, y0][:, :, x0 + 1]
    g10 = coarse[:, y0 + 1][:, :, x0]
    g11 = coarse[:, y0 + 1][:, :, x0 + 1]
    top = g00 * (1 - fx) + g01 * fx
    bot = g10 * (1 - fx) + g11 * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


class MockDenoiser:
    """Deterministic, prompt-sensitive stand-in for a diffusion model.

    residual = alpha * latent + beta * field(prompt, context, t), where
    the field is a seeded smooth pseudo-random pattern. The prediction is
    strictly pointwise in the latent, so region-fusion locality tests can
    assert bitwise equalities. A nonzero `mixing` adds a 3x3 neighborhood
    mean of the latent, giving the model a small receptive field for
    experiments where spatial coupling matters.
    """

    def __init__(self, alpha: float = 0.1, beta: float = 1.0, mixing: float = 0.0):
        self.alpha = alpha
        self.beta = beta
        self.mixing = mixing

    def predict(
        self, latent: np.ndarray, t_index: int, prompt: str, context: dict | None = None
    ) -> np.ndarray:
        field = self.prompt_field(latent.shape, t_index, prompt, context)
        residual = self.alpha * latent + self.beta * field
        if self.mixing:
            residual = residual + self.mixing * _box3(latent)
        return residual.astype(latent.dtype)

    def prompt_field(self, shape, t_index: int, prompt: str, context: dict | None = None) -> np.ndarray:
        seed = _stable_seed("field", prompt, _context_tag(context), t_index)
        return _smooth_field(tuple(shape), seed)


def _box3(x: np.ndarray) -> np.ndarray:
    """3x3 box mean with edge replication on the two trailing axes."""
    padded = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    out = np.zeros_like(x, dtype=np.float64)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[..., dy : dy + x.shape[-2], dx : dx + x.shape[-1]]
    return (out / 9.0).astype(x.dtype)


class MockCodec:
    """Identity codec on the 4-channel latent grid.

    Under the mock backend "images" live at latent resolution with
    LATENT_CHANNELS channels, so encode/decode are exact inverses and
    color_to_latent is an exact constant field.
    """

    channels = LATENT_CHANNELS
    downscale = LATENT_DOWNSCALE

    def latent_shape(self, image_height: int, image_width: int) -> tuple:
        if image_height % self.downscale or image_width % self.downscale:
            raise ValueError(
                f"image {image_height}x{image_width} not divisible by {self.downscale}"
            )
        return (self.channels, image_height // self.downscale, image_width // self.downscale)

    def encode(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(image, dtype=np.float32).copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float32).copy()

    def color_to_latent(self, rgb, shape: tuple) -> np.ndarray:
        r, g, b = (float(v) for v in rgb)
        channel_values = np.array([r, g, b, (r + g + b) / 3.0], dtype=np.float32)
        out = np.empty(shape, dtype=np.float32)
        out[:] = channel_values[:, None, None]
        return out


# ---------------------------------------------------------------------------
# Out-of-process denoiser adapter
#
# Wire format (HTTP POST to the endpoint):
#   request body  = [4-byte LE uint32 header length]
#                   [UTF-8 JSON header {"shape", "t_index", "prompt", "context"}]
#                   [latent as little-endian float32, C-order]
#   response body = residual as little-endian float32, C-order, same shape.


def encode_predict_request(latent: np.ndarray, t_index: int, prompt: str, context: dict | None) -> bytes:
    header = json.dumps(
        {
            "shape": list(latent.shape),
            "t_index": int(t_index),
            "prompt": prompt,
            "context": context or {},
        }
    ).encode("utf-8")
    blob = np.ascontiguousarray(latent, dtype="<f4").tobytes()
    return struct.pack("<I", len(header)) + header + blob


def decode_predict_request(payload: bytes):
    (header_len,) = struct.unpack("<I", payload[:4])
    header = json.loads(payload[4 : 4 + header_len].decode("utf-8"))
    shape = tuple(header["shape"])
    latent = np.frombuffer(payload[4 + header_len :], dtype="<f4").reshape(shape)
    return latent, header["t_index"], header["prompt"], header.get("context") or {}


class RemoteDenoiser:
    """Denoiser backed by an out-of-process server speaking the byte
    protocol above. Endpoint example: http://127.0.0.1:8787/predict"""

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def predict(
        self, latent: np.ndarray, t_index: int, prompt: str, context: dict | None = None
    ) -> np.ndarray:
        payload = encode_predict_request(latent, t_index, prompt, context)
        request = urllib.request.Request(
            self.endpoint, data=payload, headers={"Content-Type": "application/octet-stream"}
        )
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            body = response.read()
        residual = np.frombuffer(body, dtype="<f4").reshape(latent.shape)
        return residual.astype(np.float32)
