"""Multimodal encoder/decoder and the embedding losses.

Image branches use non-overlapping stride-2 convolutions; the number of
layers scales with the image side so the last feature map is 2x2:

    image_size   encoder convs   decoder transposed convs
        16             3                  3
        32             4                  4
        64             5                  5
       128             6                  6
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class TripletConfig:
    epsilon: int = 4
    beta1: float = 0.04
    beta2: float = 0.04
    alpha: float = 0.2

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not (self.beta1 > 0 and self.beta2 > 0 and self.alpha >= 0):
            raise ValueError("beta1, beta2 must be positive and alpha non-negative")

    def to_dict(self):
        return asdict(self)


# F/T readings are divided by these before entering a network
FT_SCALE = (500.0, 500.0, 5000.0)


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    ft_len: int = 8
    ft_channels: int = 3
    latent_dim: int = 128
    use_ft: bool = True
    image_feat: int = 64
    ft_feat: int = 32
    hidden: int = 128
    channels: tuple = (16, 32, 32, 32, 32, 32)
    ft_conv_channels: int = 16
    ft_conv_layers: int = 4
    decoder_channels: tuple = (32, 32, 16, 16, 8, 8)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        n = self.image_size
        if n < 8 or n & (n - 1):
            raise ValueError("image_size must be a power of two >= 8")
        if self.image_layers > len(self.channels) or self.image_layers > len(self.decoder_channels):
            raise ValueError("not enough channel entries for this image size")

    @property
    def image_layers(self):
        return int(math.log2(self.image_size)) - 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Reconstruction:
    fixed_logits: Tensor
    wrist_logits: Tensor
    ft: Tensor | None

    @property
    def fixed_image(self):
        return T.sigmoid(self.fixed_logits)

    @property
    def wrist_image(self):
        return T.sigmoid(self.wrist_logits)


class ImageEncoder(nn.Module):
    def __init__(self, arch, rng, dtype=np.float32):
        c = 3
        self.convs = []
        for co in arch.channels[: arch.image_layers]:
            self.convs.append(nn.Conv2d(c, co, 2, rng, stride=2, dtype=dtype))
            c = co
        self.proj = nn.Linear(4 * c, arch.image_feat, rng, dtype=dtype)

    def forward(self, x):
        for conv in self.convs:
            x = T.relu(conv(x))
        return self.proj(x.reshape(x.shape[0], -1))


class FTEncoder(nn.Module):
    """Stack of dilated causal convolutions over the F/T window."""

    def __init__(self, arch, rng, dtype=np.float32):
        c = arch.ft_channels
        self.convs = []
        for i in range(arch.ft_conv_layers):
            self.convs.append(nn.CausalConv1d(c, arch.ft_conv_channels, 2, rng, dilation=2**i, dtype=dtype))
            c = arch.ft_conv_channels
        self.proj = nn.Linear(arch.ft_len * c, arch.ft_feat, rng, dtype=dtype)

    def sequence(self, x):
        for conv in self.convs:
            x = T.relu(conv(x))
        return x

    def forward(self, x):
        x = self.sequence(x)
        return self.proj(x.reshape(x.shape[0], -1))


class Encoder(nn.Module):
    def __init__(self, arch, rng, dtype=np.float32):
        self.arch = arch
        self.fixed = ImageEncoder(arch, rng, dtype)
        self.wrist = ImageEncoder(arch, rng, dtype)
        self.ft = FTEncoder(arch, rng, dtype) if arch.use_ft else None
        fused = 2 * arch.image_feat + (arch.ft_feat if arch.use_ft else 0)
        self.fc1 = nn.Linear(fused, arch.hidden, rng, dtype=dtype)
        self.fc2 = nn.Linear(arch.hidden, arch.latent_dim, rng, dtype=dtype)
        self.dtype = dtype

    def forward(self, fixed, wrist, ft=None):
        parts = [self.fixed(fixed), self.wrist(wrist)]
        if self.ft is not None:
            parts.append(self.ft(ft))
        return self.fc2(T.relu(self.fc1(T.concat(parts, axis=-1))))


class ImageDecoder(nn.Module):
    def __init__(self, arch, rng, dtype=np.float32):
        chans = arch.decoder_channels[: arch.image_layers]
        self.c0 = chans[0]
        self.fc = nn.Linear(arch.latent_dim, 4 * self.c0, rng, dtype=dtype)
        self.deconvs = []
        outs = list(chans[1:]) + [3]
        c = self.c0
        for co in outs:
            self.deconvs.append(nn.ConvTranspose2d(c, co, 2, rng, stride=2, dtype=dtype))
            c = co

    def forward(self, h):
        x = T.relu(self.fc(h)).reshape(h.shape[0], 2, 2, self.c0)
        last = len(self.deconvs) - 1
        for i, d in enumerate(self.deconvs):
            x = d(x)
            if i < last:
                x = T.relu(x)
        return x


class FTDecoder(nn.Module):
    """Three 1-D transposed convolutions back to the F/T window."""

    def __init__(self, arch, rng, dtype=np.float32):
        c = arch.ft_conv_channels
        self.c = c
        self.t0 = max(1, math.ceil(arch.ft_len / 4))
        self.ft_len = arch.ft_len
        self.fc = nn.Linear(arch.latent_dim, self.t0 * c, rng, dtype=dtype)
        self.up1 = nn.ConvTranspose1d(c, c, 2, rng, stride=2, dtype=dtype)
        self.up2 = nn.ConvTranspose1d(c, c, 2, rng, stride=2, dtype=dtype)
        self.out = nn.ConvTranspose1d(c, arch.ft_channels, 1, rng, stride=1, dtype=dtype)

    def forward(self, h):
        x = T.relu(self.fc(h)).reshape(h.shape[0], self.t0, self.c)
        x = T.relu(self.up1(x))
        x = T.relu(self.up2(x))
        x = self.out(x)
        if x.shape[1] != self.ft_len:
            x = x[:, : self.ft_len]
        return x


class Decoder(nn.Module):
    def __init__(self, arch, rng, dtype=np.float32):
        self.arch = arch
        self.fixed = ImageDecoder(arch, rng, dtype)
        self.wrist = ImageDecoder(arch, rng, dtype)
        self.ft = FTDecoder(arch, rng, dtype) if arch.use_ft else None

    def forward(self, h):
        return Reconstruction(self.fixed(h), self.wrist(h), self.ft(h) if self.ft is not None else None)


# -- batching ----------------------------------------------------------------------------
def stack_observations(observations, dtype=np.float32):
    fixed = np.stack([o.fixed_image for o in observations]).astype(dtype, copy=False)
    wrist = np.stack([o.wrist_image for o in observations]).astype(dtype, copy=False)
    ft = (np.stack([o.ft_history for o in observations]) / np.asarray(FT_SCALE)).astype(dtype, copy=False)
    return fixed, wrist, ft


def _check_obs_shapes(arch, fixed, wrist, ft):
    n = arch.image_size
    if fixed.shape[1:] != (n, n, 3) or wrist.shape[1:] != (n, n, 3):
        raise T.ShapeError(f"image shape {fixed.shape[1:]} does not match image_size {n}")
    if arch.use_ft and ft.shape[1:] != (arch.ft_len, arch.ft_channels):
        raise T.ShapeError(f"F/T window shape {ft.shape[1:]} does not match ({arch.ft_len}, {arch.ft_channels})")


def encode_arrays(encoder, fixed, wrist, ft):
    _check_obs_shapes(encoder.arch, fixed, wrist, ft)
    return encoder(Tensor(fixed), Tensor(wrist), Tensor(ft) if encoder.arch.use_ft else None)


def encode(obs, encoder):
    """Latent vector (latent_dim,) for one observation."""
    with T.no_grad():
        h = encode_arrays(encoder, *stack_observations([obs], encoder.dtype))
    return h.data[0].astype(np.float64)


def encode_batch(observations, encoder):
    with T.no_grad():
        h = encode_arrays(encoder, *stack_observations(observations, encoder.dtype))
    return h.data.astype(np.float64)


def _open_unit(logits):
    z = logits.astype(np.float64)
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), 1e-12, 1.0 - 1e-12)


def decode(h, decoder):
    """Reconstructed observation (numpy) from a latent vector."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (decoder.arch.latent_dim,):
        raise T.ShapeError(f"latent of shape {h.shape}, expected ({decoder.arch.latent_dim},)")
    from .sim import Observation

    with T.no_grad():
        rec = decoder(Tensor(h[None].astype(decoder.fixed.fc.weight.dtype)))
        # float64 sigmoid, kept inside the open interval (0, 1)
        fixed = _open_unit(rec.fixed_logits.data[0])
        wrist = _open_unit(rec.wrist_logits.data[0])
        ft = rec.ft.data[0] * np.asarray(FT_SCALE) if rec.ft is not None else np.zeros((decoder.arch.ft_len, 3))
    return Observation(fixed, wrist, ft)


# -- distances and losses -----------------------------------------------------------------
def cosine_distance(a, b, eps=1e-12):
    """Row-wise ``1 - <a/|a|, b/|b|>``; b may be a single row that broadcasts.

    ``eps`` sits under the square root so the gradient stays finite at a zero row.
    """
    na = T.sqrt((a * a).sum(axis=-1, keepdims=True) + eps)
    nb = T.sqrt((b * b).sum(axis=-1, keepdims=True) + eps)
    return 1.0 - ((a / na) * (b / nb)).sum(axis=-1)


def latent_distance(h_a, h_b):
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    if not np.any(h_a) or not np.any(h_b):
        raise DegenerateInputError("latent distance of a zero vector is undefined")
    with T.no_grad():
        d = cosine_distance(Tensor(h_a[None]), Tensor(h_b[None]), eps=0.0)
    return float(d.data[0])


def triplet_terms(d1, d2, t1, t2, cfg):
    """Per-pair triplet loss given latent distances of both states to the goal."""
    dt = np.asarray(t2, dtype=np.float64) - np.asarray(t1, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError("triplet loss requires t1 <= t2")
    far = (dt > cfg.epsilon).astype(d1.dtype)
    near = 1.0 - far
    g = d1 - d2
    far_term = T.relu(Tensor((cfg.beta1 * dt).astype(d1.dtype)) - g)
    near_term = T.relu(-g) + T.relu(g - cfg.beta2)
    return far_term * far + near_term * near


def triplet_loss(h_t1, h_t2, h_goal, t1, t2, cfg):
    """Scalar triplet loss for one pair of embeddings."""
    if t1 > t2:
        raise ValueError("triplet loss requires t1 <= t2")
    h1, h2, hg = (Tensor(np.asarray(v, dtype=np.float64)[None]) for v in (h_t1, h_t2, h_goal))
    with T.no_grad():
        loss = triplet_terms(cosine_distance(h1, hg), cosine_distance(h2, hg), [t1], [t2], cfg)
    return float(loss.data[0])


def reconstruction_terms(rec, fixed, wrist, ft):
    """Mean BCE over both images plus mean squared error over the (scaled) F/T window."""
    if rec.fixed_logits.shape != fixed.shape or rec.wrist_logits.shape != wrist.shape:
        raise T.ShapeError("reconstruction and target image shapes differ")
    bce = 0.5 * (T.bce_with_logits(rec.fixed_logits, fixed) + T.bce_with_logits(rec.wrist_logits, wrist))
    if rec.ft is None:
        return bce
    if rec.ft.shape != ft.shape:
        raise T.ShapeError("reconstruction and target F/T shapes differ")
    diff = rec.ft - Tensor(ft)
    return bce + (diff * diff).mean()


def reconstruction_loss(obs, recon_logits):
    """Reconstruction loss of one observation against a :class:`Reconstruction`."""
    fixed = obs.fixed_image[None].astype(np.float64)
    wrist = obs.wrist_image[None].astype(np.float64)
    ft = (np.asarray(obs.ft_history) / np.asarray(FT_SCALE))[None]
    with T.no_grad():
        return float(reconstruction_terms(recon_logits, fixed, wrist, ft).data)


def batch_loss(encoder, decoder, fixed, wrist, ft, idx_a, idx_b, t_a, t_b, cfg, goal_index=0):
    """Combined objective on pre-stacked arrays.

    Row ``goal_index`` holds the goal observation; ``idx_a``/``idx_b`` index the
    pair members.  Returns (total, triplet, reconstruction) tensors.  The
    reconstruction mean runs over every row except the goal.
    """
    h = encode_arrays(encoder, fixed, wrist, ft)
    hg = h[goal_index : goal_index + 1]
    d = cosine_distance(h, hg)
    trip = triplet_terms(d[idx_a], d[idx_b], t_a, t_b, cfg).mean()
    if cfg.alpha == 0:
        return trip, trip, None
    rows = np.array([i for i in range(fixed.shape[0]) if i != goal_index])
    rec = decoder(h[rows])
    recon = reconstruction_terms(rec, fixed[rows], wrist[rows], ft[rows])
    return trip + cfg.alpha * recon, trip, recon


def total_loss(batch, encoder, decoder, cfg):
    """Mean triplet loss over pairs plus ``alpha`` times mean reconstruction loss.

    The goal embedding is computed once per batch from the pairs' goal
    observation; reconstruction covers every distinct pair observation.
    """
    if not batch:
        raise ValueError("empty batch")
    goal = batch[0].goal_obs
    if goal is None:
        raise ValueError("training pairs must carry the goal observation")
    rows = [goal]
    keys = {}
    idx_a, idx_b = [], []
    for p in batch:
        for obs, node, dest in ((p.obs_a, p.node_a, idx_a), (p.obs_b, p.node_b, idx_b)):
            key = ("node", node) if node is not None else ("obj", id(obs))
            if key not in keys:
                keys[key] = len(rows)
                rows.append(obs)
            dest.append(keys[key])
    fixed, wrist, ft = stack_observations(rows, encoder.dtype)
    t_a = np.array([p.t_a for p in batch])
    t_b = np.array([p.t_b for p in batch])
    total, _, _ = batch_loss(encoder, decoder, fixed, wrist, ft, np.array(idx_a), np.array(idx_b), t_a, t_b, cfg)
    return total
