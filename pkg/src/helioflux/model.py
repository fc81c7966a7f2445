"""Inverse surface-reconstruction network and its training loop.

Encoder-decoder: a small Vision Transformer digests each flux image into a
feature vector, positional information (sun direction, heliostat position,
aim offset) is embedded and summed in, a second attention stack fuses the
up-to-eight observation vectors into a per-block latent (w+), and a
style-based convolutional generator decodes the latent into the 4x8x8 grid
of surface control points (millimeters).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import DatasetSample
from .geometry import MAX_CONTROL_Z_MM, HeliostatSurface

DEMOD_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. Defaults are the desk-scale ("toy") widths."""

    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    fusion_depth: int = 4
    fusion_heads: int = 4
    latent_blocks: int = 3
    latent_dim: int = 32
    gen_channels: int = 32
    pos_features: int = 12
    dropout: float = 0.2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.encoder_heads or self.embed_dim % self.fusion_heads:
            raise ValueError("embed_dim must be divisible by the head counts")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule."""

    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    lr_gamma: float = 0.995
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-7
    randomize: bool = True


class Mlp(nn.Module):
    def __init__(self, dim_in, dim_hidden, dim_out, dropout=0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim_in, dim_hidden)
        self.fc2 = nn.Linear(dim_hidden, dim_out)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(F.gelu(self.fc1(x))))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over a token sequence."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None, return_weights=False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        if return_weights:
            return out, weights
        return out


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP, both with residual connections."""

    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim, dim, dropout)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    """Split an image into patches and map each through a shared MLP."""

    def __init__(self, config):
        super().__init__()
        self.patch = config.patch_size
        self.mlp = Mlp(config.patch_size**2, config.embed_dim, config.embed_dim, config.dropout)

    def forward(self, images):
        b, h, w = images.shape
        p = self.patch
        patches = images.reshape(b, h // p, p, w // p, p).permute(0, 1, 3, 2, 4)
        patches = patches.reshape(b, (h // p) * (w // p), p * p)
        return self.mlp(patches)


class ImageEncoder(nn.Module):
    """ViT over one flux image; the class-token output is the image feature."""

    def __init__(self, config):
        super().__init__()
        self.patch_embed = PatchEmbed(config)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_patches + 1, config.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.encoder_heads, config.dropout)
            for _ in range(config.encoder_depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def tokens(self, images):
        tok = self.patch_embed(images)
        cls = self.cls_token.expand(tok.shape[0], -1, -1)
        return torch.cat([cls, tok], dim=1) + self.pos_embed

    def forward(self, images):
        x = self.tokens(images)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[:, 0]


class FusionEncoder(nn.Module):
    """Attention stack over the observation sequence; order-agnostic.

    No positional embedding is added over observations, so the fused output
    is invariant to observation order (set semantics).
    """

    def __init__(self, config):
        super().__init__()
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.fusion_heads, config.dropout)
            for _ in range(config.fusion_depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.latent_blocks * config.latent_dim)
        self.latent_shape = (config.latent_blocks, config.latent_dim)

    def forward(self, feats, mask):
        x = feats
        for block in self.blocks:
            x = block(x, key_mask=mask)
        x = self.norm(x)
        weights = mask.float().unsqueeze(-1)
        pooled = (x * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1e-9)
        return self.head(pooled).reshape(-1, *self.latent_shape)


def demodulation_scale(modulated):
    """Per-output-channel demodulation factor 1/sqrt(sum(w^2) + eps).

    Args:
        modulated: Style-modulated kernels, shape (..., C_out, C_in, k, k).

    Returns:
        Scales of shape (..., C_out).
    """
    return torch.rsqrt(modulated.pow(2).sum(dim=(-3, -2, -1)) + DEMOD_EPS)


class ModulatedConv2d(nn.Module):
    """3x3 convolution with per-sample style modulation and weight demodulation."""

    def __init__(self, c_in, c_out, latent_dim, kernel=3):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel, kernel) / math.sqrt(c_in * kernel**2))
        # Random affine weights keep the latent-to-output path live from the
        # first step; bias 1 centers styles at identity modulation.
        self.affine = nn.Linear(latent_dim, c_in)
        nn.init.normal_(self.affine.weight, std=1.0 / math.sqrt(latent_dim))
        nn.init.ones_(self.affine.bias)
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x, w_latent):
        b = x.shape[0]
        style = self.affine(w_latent)
        modulated = self.weight[None] * style[:, None, :, None, None]
        demod = demodulation_scale(modulated)
        kernels = modulated * demod[:, :, None, None, None]
        x = x.reshape(1, b * self.c_in, *x.shape[2:])
        out = F.conv2d(x, kernels.reshape(b * self.c_out, self.c_in, self.kernel, self.kernel),
                       padding=self.kernel // 2, groups=b)
        out = out.reshape(b, self.c_out, *out.shape[2:])
        return out + self.bias[None, :, None, None]


class StyleGenerator(nn.Module):
    """Style-block decoder: learnable constant input, modulated convolutions,
    bilinear upsampling, and a linear scalar head with learnable gain."""

    def __init__(self, config):
        super().__init__()
        c = config.gen_channels
        self.const = nn.Parameter(torch.randn(1, c, 4, 4))
        self.blocks = nn.ModuleList(
            ModulatedConv2d(c, c, config.latent_dim) for _ in range(config.latent_blocks)
        )
        self.to_scalar = nn.Conv2d(c, 1, kernel_size=1)
        self.gain = nn.Parameter(torch.ones(1))  # output scale, millimeters

    def forward(self, w_plus):
        b = w_plus.shape[0]
        x = self.const.expand(b, -1, -1, -1)
        for k, block in enumerate(self.blocks):
            if k > 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.leaky_relu(block(x, w_plus[:, k]), 0.2)
        return self.gain * self.to_scalar(x).squeeze(1)


def grid_to_facets(grid):
    """Split a (B, 16, 16) map into facet control grids (B, 4, 8, 8).

    Quadrant order matches the facet layout (LL, LR, UL, UR) with the map's
    rows running bottom to top; each quadrant is transposed so control index
    i runs along the facet x-axis.
    """
    quads = [grid[:, :8, :8], grid[:, :8, 8:], grid[:, 8:, :8], grid[:, 8:, 8:]]
    return torch.stack([q.transpose(-1, -2) for q in quads], dim=1)


class IdlrModel(nn.Module):
    """Full encoder-generator: flux observations in, control points out."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.pos_mlp = Mlp(config.pos_features, config.embed_dim, config.embed_dim, config.dropout)
        self.fusion = FusionEncoder(config)
        self.generator = StyleGenerator(config)

    def encode(self, images, pos_feats, mask):
        """Fuse observations into the per-block latent.

        Args:
            images: (B, O, S, S) normalized flux grids.
            pos_feats: (B, O, pos_features) positional descriptors.
            mask: (B, O) booleans, True where the observation is real.

        Returns:
            (B, latent_blocks, latent_dim) latent.
        """
        if images.ndim != 4:
            raise ValueError("images must be (batch, observations, H, W)")
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every sample needs at least one observation")
        b, o, h, w = images.shape
        feats = self.image_encoder(images.reshape(b * o, h, w)).reshape(b, o, -1)
        feats = feats + self.pos_mlp(pos_feats)
        return self.fusion(feats, mask)

    def generate(self, w_plus):
        return grid_to_facets(self.generator(w_plus))

    def forward(self, images, pos_feats, mask):
        return self.generate(self.encode(images, pos_feats, mask))

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


def loss_mae(pred, truth):
    """Mean absolute error over control points, millimeters.

    The mean over a facet's 8x8 grid, averaged over facets; with equal-size
    facets this equals the flat mean over all 256 points.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    return (pred - truth).abs().mean()


def observation_features(obs, heliostat_pos):
    """Positional descriptor of one observation (12 floats).

    Sun direction, heliostat position (scaled), the aim offset from the
    target center in in-plane coordinates (so it aligns with image axes),
    the target center (scaled; it distinguishes the calibration targets),
    and the circumsolar ratio (it sets the blur width).
    """
    geo = obs.flux.geometry
    center = np.asarray(getattr(geo, "center", np.zeros(3)))
    offset = np.asarray(obs.aim) - center
    if hasattr(geo, "right"):
        in_plane = np.array([float(offset @ geo.right), float(offset @ geo.up)])
    else:
        in_plane = np.array([float(offset[0]), float(offset[2])])
    return np.concatenate(
        [
            obs.sun.direction,
            np.asarray(heliostat_pos) / 100.0,
            in_plane,
            center / 100.0,
            [obs.sun.csr],
        ]
    ).astype(np.float32)


def featurize(sample, max_obs=8):
    """Tensors for one sample: images (O, S, S), features (O, 12), truth (4, 8, 8)."""
    images = np.stack([obs.flux.normalized for obs in sample.observations]).astype(np.float32)
    feats = np.stack(
        [observation_features(obs, sample.heliostat.position) for obs in sample.observations]
    )
    truth = sample.truth.as_array().astype(np.float32)
    return images[:max_obs], feats[:max_obs], truth


def collate(batch_samples):
    """Pad a list of featurized samples into batch tensors with a mask."""
    o_max = max(images.shape[0] for images, _, _ in batch_samples)
    b = len(batch_samples)
    s = batch_samples[0][0].shape[-1]
    nfeat = batch_samples[0][1].shape[-1]
    images = np.zeros((b, o_max, s, s), dtype=np.float32)
    feats = np.zeros((b, o_max, nfeat), dtype=np.float32)
    mask = np.zeros((b, o_max), dtype=bool)
    truths = np.zeros((b, 4, 8, 8), dtype=np.float32)
    for i, (img, ft, truth) in enumerate(batch_samples):
        o = img.shape[0]
        images[i, :o] = img
        feats[i, :o] = ft
        mask[i, :o] = True
        truths[i] = truth
    return (
        torch.from_numpy(images),
        torch.from_numpy(feats),
        torch.from_numpy(mask),
        torch.from_numpy(truths),
    )


def _evaluate_mae(model, samples, batch_size=32):
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images, feats, mask, truths = collate([featurize(s) for s in chunk])
            total += float(loss_mae(model(images, feats, mask), truths)) * len(chunk)
    model.train()
    return total / max(len(samples), 1)


def train(train_samples, val_samples, model_config, randomization_config, hyper, seed,
          log_fn=None):
    """Train a model on in-memory samples.

    Each batch sample passes through the domain-randomization pipeline
    before featurization when ``hyper.randomize`` is on. The optimizer is
    Adam with decoupled weight decay; the learning rate decays by
    ``lr_gamma`` per epoch. Deterministic for a fixed seed in single-worker
    mode (numpy batch order, torch dropout, and initialization all derive
    from ``seed``).

    Args:
        train_samples: Nonempty list of DatasetSample.
        val_samples: Held-out samples for the per-epoch validation MAE.
        model_config: ModelConfig.
        randomization_config: RandomizationConfig used when randomizing.
        hyper: TrainConfig.
        seed: Master seed.
        log_fn: Optional callable receiving one dict per epoch.

    Returns:
        (model, history): trained IdlrModel and the list of epoch records.

    Raises:
        TrainingDiverged: If the loss becomes non-finite.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    from .degrade import randomize_sample

    torch.manual_seed(seed)
    model = IdlrModel(model_config)
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=hyper.lr, betas=hyper.betas, eps=hyper.eps,
        weight_decay=hyper.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=hyper.lr_gamma)
    order_rng = np.random.default_rng(seed)
    history = []

    for epoch in range(hyper.epochs):
        order = order_rng.permutation(len(train_samples))
        aug_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), hyper.batch_size):
            chunk = order[start : start + hyper.batch_size]
            prepared = []
            for idx in chunk:
                sample = train_samples[idx]
                if hyper.randomize:
                    sample = randomize_sample(sample, randomization_config, aug_rng)
                prepared.append(featurize(sample))
            images, feats, mask, truths = collate(prepared)
            pred = model(images, feats, mask)
            loss = loss_mae(pred, truths)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss)
            n_batches += 1
        scheduler.step()
        record = {
            "epoch": epoch,
            "train_mae": epoch_loss / max(n_batches, 1),
            "val_mae": _evaluate_mae(model, val_samples) if val_samples else float("nan"),
            "lr": optimizer.param_groups[0]["lr"],
        }
        history.append(record)
        if log_fn:
            log_fn(record)

    model.eval()
    return model, history


def predict_surface(model, sample):
    """Deterministic surface prediction for one sample (dropout disabled).

    Returns a HeliostatSurface; control points are clamped to the surface
    sanity bound.
    """
    model.eval()
    with torch.no_grad():
        images, feats, mask, _ = collate([featurize(sample)])
        pred = model(images, feats, mask)[0].numpy().astype(np.float64)
    return HeliostatSurface.from_array(np.clip(pred, -MAX_CONTROL_Z_MM, MAX_CONTROL_Z_MM))


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, extra=None):
    """Write named parameter tensors plus JSON metadata."""
    arrays = {f"param/{name}": tensor.detach().cpu().numpy()
              for name, tensor in model.state_dict().items()}
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, meta)."""
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
    config = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in meta["config"].items()})
    model = IdlrModel(config)
    state = {
        name[len("param/"):]: torch.from_numpy(np.array(data[name]))
        for name in data.files
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    model.eval()
    return model, meta
