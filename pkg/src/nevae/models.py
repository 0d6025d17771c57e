"""Diagonal-Gaussian MLP encoder, factorized Bernoulli MLP decoder, checkpoints."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "identity": lambda t: t,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
}
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_ACT_NAMES = {i: name for name, i in _ACT_CODES.items()}

MAGIC = b"NEVAE001"


class CheckpointError(ValueError):
    pass


@dataclass
class MLPParams:
    """Layer stack; ``activations[i]`` is applied after layer ``i``."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for name in self.activations:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.in_width] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return type(self)([Tensor(w.data) for w in self.weights],
                          [Tensor(b.data) for b in self.biases],
                          list(self.activations))

    def forward(self, x) -> Tensor:
        h = ad.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.in_width:
            raise ad.ShapeError(f"input shape {h.shape} does not match layer width {self.in_width}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = ACTIVATIONS[act](h @ w + b)
        return h


class EncoderParams(MLPParams):
    @property
    def n_z(self) -> int:
        return self.out_width // 2


class DecoderParams(MLPParams):
    """Output layer activation is left to ``decode``; ``activations[-1]`` is
    normally ``identity`` (logits)."""

    @property
    def n_z(self) -> int:
        return self.in_width


@dataclass
class GaussianCode:
    mu: Tensor
    log_var: Tensor
    z: Tensor
    eps: np.ndarray

    @property
    def n_z(self) -> int:
        return self.mu.shape[1]


@dataclass
class Reconstruction:
    logits: Tensor
    probs: Tensor


@dataclass
class VAE:
    encoder: EncoderParams
    decoder: DecoderParams
    # decoder mean link; "identity" gives a linear-Gaussian style mean (used by LSO tests)
    output: str = "sigmoid"

    @property
    def n_z(self) -> int:
        return self.decoder.n_z

    @property
    def pixels(self) -> int:
        return self.encoder.in_width

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def copy(self) -> "VAE":
        return VAE(self.encoder.copy(), self.decoder.copy(), self.output)


def _uniform_layers(widths: Sequence[int], rng: np.random.Generator, zero_last: bool):
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if zero_last and i == len(widths) - 2:
            w = np.zeros_like(w)
        weights.append(Tensor(w))
        biases.append(Tensor(np.zeros(fan_out)))
    return weights, biases


def init_vae(pixels: int = 784, n_z: int = 32, hidden: Sequence[int] = (512, 512),
             activation: str = "tanh", seed: int = 0, zero_head: bool = False) -> VAE:
    """MLP VAE with uniform(+-1/sqrt(fan_in)) weights and zero biases.

    ``zero_head`` zeroes both output layers, giving mu = 0, log_var = 0 and
    decoder probabilities of 0.5 before any training.
    """
    rng = np.random.default_rng(seed)
    hidden = list(hidden)
    acts = [activation] * len(hidden) + ["identity"]
    ew, eb = _uniform_layers([pixels] + hidden + [2 * n_z], rng, zero_head)
    dw, db = _uniform_layers([n_z] + hidden[::-1] + [pixels], rng, zero_head)
    return VAE(EncoderParams(ew, eb, list(acts)), DecoderParams(dw, db, list(acts)))


def encode(x, params: EncoderParams, rng: np.random.Generator) -> GaussianCode:
    """Posterior parameters and one reparameterized draw z = mu + exp(log_var/2) * eps."""
    h = params.forward(x)
    n_z = params.n_z
    mu = h[:, :n_z]
    log_var = h[:, n_z:]
    eps = rng.standard_normal(mu.shape)
    z = mu + ad.exp(0.5 * log_var) * eps
    return GaussianCode(mu, log_var, z, eps)


def decode(z, params: DecoderParams, output: str = "sigmoid") -> Reconstruction:
    z = ad.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != params.n_z:
        raise ad.ShapeError(f"latent shape {z.shape} does not match n_z={params.n_z}")
    logits = params.forward(z)
    return Reconstruction(logits, ACTIVATIONS[output](logits))


def reencode(recon: Reconstruction, params: EncoderParams, rng: np.random.Generator,
             binarize: bool = False) -> GaussianCode:
    """Encode the decoder mean again.

    With ``binarize`` the mean is thresholded at 0.5 and enters as a constant,
    cutting the gradient path through the decoder.
    """
    if binarize:
        x_hat = Tensor._wrap((recon.probs.data >= 0.5).astype(np.float64))
    else:
        x_hat = recon.probs
    return encode(x_hat, params, rng)


# --- checkpoint container ---------------------------------------------------
#
# little-endian layout:
#   8s   magic "NEVAE001"
#   u32  n_z
#   u8   output link code
#   u32  n encoder layers, then per layer (u32 in, u32 out, u8 activation)
#   u32  n decoder layers, same per-layer record
#   f8[] encoder W0, b0, W1, b1, ..., decoder W0, b0, ... (row-major)

_OUTPUT_CODES = {"sigmoid": 0, "identity": 1}
_OUTPUT_NAMES = {v: k for k, v in _OUTPUT_CODES.items()}


def _write_stack(buf: io.BytesIO, p: MLPParams) -> None:
    buf.write(struct.pack("<I", len(p.weights)))
    for w, act in zip(p.weights, p.activations):
        buf.write(struct.pack("<IIB", w.shape[0], w.shape[1], _ACT_CODES[act]))


def checkpoint_bytes(model: VAE) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IB", model.n_z, _OUTPUT_CODES[model.output]))
    _write_stack(buf, model.encoder)
    _write_stack(buf, model.decoder)
    for t in model.parameters():
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: VAE, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def _read(buf: memoryview, pos: int, fmt: str):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise CheckpointError("checkpoint truncated in header")
    return struct.unpack_from(fmt, buf, pos), pos + size


def _read_stack(buf, pos):
    (n,), pos = _read(buf, pos, "<I")
    specs = []
    for _ in range(n):
        (fi, fo, code), pos = _read(buf, pos, "<IIB")
        if code not in _ACT_NAMES:
            raise CheckpointError(f"unknown activation code {code}")
        specs.append((fi, fo, _ACT_NAMES[code]))
    return specs, pos


def load_checkpoint_bytes(raw: bytes) -> VAE:
    buf = memoryview(raw)
    if bytes(buf[:8]) != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(buf[:8])!r}")
    (n_z, out_code), pos = _read(buf, 8, "<IB")
    if out_code not in _OUTPUT_NAMES:
        raise CheckpointError(f"unknown output code {out_code}")
    enc_spec, pos = _read_stack(buf, pos)
    dec_spec, pos = _read_stack(buf, pos)

    def tensors(specs):
        nonlocal pos
        ws, bs, acts = [], [], []
        for fi, fo, act in specs:
            for shape in ((fi, fo), (fo,)):
                n = int(np.prod(shape)) * 8
                if pos + n > len(buf):
                    raise CheckpointError("checkpoint truncated in parameter block")
                arr = np.frombuffer(buf[pos:pos + n], dtype="<f8").reshape(shape)
                (ws if len(shape) == 2 else bs).append(Tensor(arr.astype(np.float64)))
                pos += n
            acts.append(act)
        return ws, bs, acts

    enc = EncoderParams(*tensors(enc_spec))
    dec = DecoderParams(*tensors(dec_spec))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after parameters")
    if enc.n_z != n_z or dec.n_z != n_z:
        raise CheckpointError("layer layout disagrees with header n_z")
    return VAE(enc, dec, _OUTPUT_NAMES[out_code])


def load_checkpoint(path) -> VAE:
    return load_checkpoint_bytes(Path(path).read_bytes())
