"""Cycle-consistent adversarial stain transfer.

Two generators map between staining appearance domains A and H; two patch
discriminators judge realism in each domain. Training minimizes the summed
adversarial losses plus a weighted l1 cycle-reconstruction loss. Inference
is reference-free: apply() takes only a trained model and an image.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .image import RasterImage
from .nn import (
    Adam,
    Conv2d,
    InstanceNorm2d,
    Module,
    ShapeError,
    Tensor,
    bce_with_logits,
    l1_loss,
    leaky_relu,
    load_checkpoint,
    mse_loss,
    relu,
    save_checkpoint,
    tanh_act,
    upsample_nearest2,
)

DOWNSAMPLE_FACTOR = 4  # two stride-2 stages in the generator

GAN_MODES = ("log", "least_squares")


@dataclass(frozen=True)
class GanArch:
    n_res_blocks: int = 3
    base_filters: int = 16
    patchgan_depth: int = 2

    def __post_init__(self):
        if self.n_res_blocks < 1 or self.base_filters < 1 or self.patchgan_depth < 1:
            raise ConfigError("architecture extents must be positive")

    def to_json(self):
        return {
            "n_res_blocks": self.n_res_blocks,
            "base_filters": self.base_filters,
            "patchgan_depth": self.patchgan_depth,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass(frozen=True)
class TrainConfig:
    lambda_cycle: float = 10.0
    lr: float = 2e-4
    batch: int = 4
    epochs: int = 1
    pool_size: int = 50
    gan_mode: str = "log"
    seed: int = 0

    def __post_init__(self):
        if self.lambda_cycle <= 0:
            raise ConfigError("lambda_cycle must be positive")
        if self.batch < 1:
            raise ConfigError("batch must be at least 1")
        if self.gan_mode not in GAN_MODES:
            raise ConfigError(f"gan_mode must be one of {GAN_MODES}")
        if self.pool_size < 0:
            raise ConfigError("pool_size must be non-negative")

    def to_json(self):
        return {
            "lambda_cycle": self.lambda_cycle,
            "lr": self.lr,
            "batch": self.batch,
            "epochs": self.epochs,
            "pool_size": self.pool_size,
            "gan_mode": self.gan_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step objective terms; total = adv_a + adv_h + lambda*cycle."""

    adv_a: float
    adv_h: float
    cycle: float
    total: float

    def consistent(self, lambda_cycle, tol=1e-6):
        return abs(self.total - (self.adv_a + self.adv_h + lambda_cycle * self.cycle)) <= tol


class ResBlock(Module):
    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, "reflect", rng)
        self.norm1 = InstanceNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, "reflect", rng)
        self.norm2 = InstanceNorm2d(channels)

    def __call__(self, x):
        y = relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return x + y


class Generator(Module):
    """c7s1 head, two stride-2 stages, residual core, two upsample stages."""

    def __init__(self, base_filters=16, n_res_blocks=3, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        f = base_filters
        self.head = Conv2d(3, f, 7, 1, 3, "reflect", rng)
        self.norm_head = InstanceNorm2d(f)
        self.down1 = Conv2d(f, 2 * f, 3, 2, 1, "zeros", rng)
        self.norm_d1 = InstanceNorm2d(2 * f)
        self.down2 = Conv2d(2 * f, 4 * f, 3, 2, 1, "zeros", rng)
        self.norm_d2 = InstanceNorm2d(4 * f)
        self.blocks = [ResBlock(4 * f, rng) for _ in range(n_res_blocks)]
        self.up1 = Conv2d(4 * f, 2 * f, 3, 1, 1, "zeros", rng)
        self.norm_u1 = InstanceNorm2d(2 * f)
        self.up2 = Conv2d(2 * f, f, 3, 1, 1, "zeros", rng)
        self.norm_u2 = InstanceNorm2d(f)
        self.tail = Conv2d(f, 3, 7, 1, 3, "reflect", rng)

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        n, c, h, w = x.data.shape
        if c != 3:
            raise ShapeError("generator expects 3-channel input")
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ShapeError(
                f"spatial extent {h}x{w} must be divisible by {DOWNSAMPLE_FACTOR}"
            )
        y = x * 2.0 - 1.0
        y = relu(self.norm_head(self.head(y)))
        y = relu(self.norm_d1(self.down1(y)))
        y = relu(self.norm_d2(self.down2(y)))
        for block in self.blocks:
            y = block(y)
        y = relu(self.norm_u1(self.up1(upsample_nearest2(y))))
        y = relu(self.norm_u2(self.up2(upsample_nearest2(y))))
        y = tanh_act(self.tail(y))
        return (y + 1.0) * 0.5


class Discriminator(Module):
    """PatchGAN: stride-2 conv stack emitting a spatial realism logit map."""

    def __init__(self, base_filters=16, depth=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng()
        f = base_filters
        self.stages = [Conv2d(3, f, 4, 2, 1, "zeros", rng)]
        self.norms = [None]
        for _ in range(depth - 1):
            nf = min(2 * f, 8 * base_filters)
            self.stages.append(Conv2d(f, nf, 4, 2, 1, "zeros", rng))
            self.norms.append(InstanceNorm2d(nf))
            f = nf
        nf = min(2 * f, 8 * base_filters)
        self.penult = Conv2d(f, nf, 4, 1, 1, "zeros", rng)
        self.norm_penult = InstanceNorm2d(nf)
        self.final = Conv2d(nf, 1, 4, 1, 1, "zeros", rng)

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        y = x * 2.0 - 1.0
        for stage, norm in zip(self.stages, self.norms):
            y = stage(y)
            if norm is not None:
                y = norm(y)
            y = leaky_relu(y, 0.2)
        y = leaky_relu(self.norm_penult(self.penult(y)), 0.2)
        return self.final(y)


class GanModel(Module):
    """Generator/discriminator pairs for the two stain domains."""

    def __init__(self, arch=GanArch(), seed=0):
        rng = np.random.default_rng(seed)
        self.arch = arch
        self.g_h = Generator(arch.base_filters, arch.n_res_blocks, rng)
        self.g_a = Generator(arch.base_filters, arch.n_res_blocks, rng)
        self.d_h = Discriminator(arch.base_filters, arch.patchgan_depth, rng)
        self.d_a = Discriminator(arch.base_filters, arch.patchgan_depth, rng)

    def named_parameters(self, prefix=""):
        for name, net in (("g_h", self.g_h), ("g_a", self.g_a),
                          ("d_h", self.d_h), ("d_a", self.d_a)):
            yield from net.named_parameters(f"{prefix}{name}.")

    def save(self, path):
        save_checkpoint(path, self.state_arrays(), {"arch": self.arch.to_json()})

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        arch = GanArch(**meta["arch"])
        model = cls(arch)
        model.load_state_arrays(arrays)
        return model


# -- batch plumbing ----------------------------------------------------------


def images_to_batch(images, dtype=np.float32):
    """Stack RasterImages into an NCHW float batch."""
    arrs = [np.transpose(img.data, (2, 0, 1)).astype(dtype) for img in images]
    return np.stack(arrs, axis=0)


def batch_to_images(batch):
    """NCHW float batch back to a list of RasterImages."""
    out = []
    for arr in batch:
        rgb = np.clip(np.transpose(np.asarray(arr, np.float64), (1, 2, 0)), 0.0, 1.0)
        out.append(RasterImage(rgb))
    return out


def generator_forward(g, batch):
    """Run a generator over an NCHW batch or one RasterImage."""
    if isinstance(batch, RasterImage):
        out = g(images_to_batch([batch]))
        return batch_to_images(out.data)[0]
    out = g(batch if isinstance(batch, Tensor) else Tensor(batch))
    return out.data


# -- losses ------------------------------------------------------------------


def _real_target(logits):
    return Tensor(np.ones_like(logits.data))


def _fake_target(logits):
    return Tensor(np.zeros_like(logits.data))


def _adv_generator(logits, mode):
    # Non-saturating: the generator maximizes realism of its fakes
    # rather than minimizing log(1 - D(fake)).
    if mode == "log":
        return bce_with_logits(logits, _real_target(logits))
    return mse_loss(logits, _real_target(logits))


def _adv_discriminator(logits_real, logits_fake, mode):
    if mode == "log":
        term_real = bce_with_logits(logits_real, _real_target(logits_real))
        term_fake = bce_with_logits(logits_fake, _fake_target(logits_fake))
    else:
        term_real = mse_loss(logits_real, _real_target(logits_real))
        term_fake = mse_loss(logits_fake, _fake_target(logits_fake))
    return (term_real + term_fake) * 0.5


def gan_loss(d, real_batch, fake_batch, mode="log", pooled_fakes=None):
    """Adversarial (d_loss, g_loss) for one domain.

    The generator loss judges the fresh fakes through d with gradients
    attached; the discriminator loss uses pooled_fakes when given (detached
    history samples), otherwise the detached fresh fakes.
    """
    if mode not in GAN_MODES:
        raise ConfigError(f"gan_mode must be one of {GAN_MODES}")
    real = real_batch if isinstance(real_batch, Tensor) else Tensor(real_batch)
    fake = fake_batch if isinstance(fake_batch, Tensor) else Tensor(fake_batch)
    g_loss = _adv_generator(d(fake), mode)
    d_fake = pooled_fakes if pooled_fakes is not None else fake.detach()
    if not isinstance(d_fake, Tensor):
        d_fake = Tensor(d_fake)
    d_loss = _adv_discriminator(d(real), d(d_fake), mode)
    return d_loss, g_loss


def cycle_loss(g_a, g_h, batch_a, batch_h):
    """Mean l1 of both round-trip reconstructions (A->H->A and H->A->H)."""
    a = batch_a if isinstance(batch_a, Tensor) else Tensor(batch_a)
    h = batch_h if isinstance(batch_h, Tensor) else Tensor(batch_h)
    return l1_loss(g_a(g_h(a)), a) + l1_loss(g_h(g_a(h)), h)


# -- history pool ------------------------------------------------------------


class ImagePool:
    """Buffer of past fakes; once full, each fresh fake swaps in with p=1/2."""

    def __init__(self, capacity, seed=0):
        self.capacity = capacity
        self.items = []
        self.rng = np.random.default_rng(seed)

    def sample(self, fresh):
        if self.capacity == 0:
            return np.array(fresh, copy=True)
        out = []
        for img in fresh:
            if len(self.items) < self.capacity:
                self.items.append(np.array(img, copy=True))
                out.append(np.array(img, copy=True))
            elif self.rng.random() < 0.5:
                slot = int(self.rng.integers(len(self.items)))
                out.append(self.items[slot])
                self.items[slot] = np.array(img, copy=True)
            else:
                out.append(np.array(img, copy=True))
        return np.stack(out, axis=0)


def pool_sample(pool, fresh_fakes):
    """Route a batch of fresh fakes through the history pool."""
    return pool.sample(fresh_fakes)


# -- training ----------------------------------------------------------------


class GanTrainer:
    """Owns the optimizers and fake pools for one training run."""

    def __init__(self, model, config):
        self.model = model
        self.config = config
        gen_params = model.g_h.parameters() + model.g_a.parameters()
        self.opt_g = Adam(gen_params, lr=config.lr, beta1=0.5)
        self.opt_d_a = Adam(model.d_a.parameters(), lr=config.lr, beta1=0.5)
        self.opt_d_h = Adam(model.d_h.parameters(), lr=config.lr, beta1=0.5)
        self.pool_a = ImagePool(config.pool_size, seed=config.seed * 2 + 1)
        self.pool_h = ImagePool(config.pool_size, seed=config.seed * 2 + 2)

    def step(self, batch_a, batch_h):
        cfg = self.config
        model = self.model
        a = Tensor(batch_a)
        h = Tensor(batch_h)
        fake_h = model.g_h(a)
        fake_a = model.g_a(h)
        # Generator phase: adversarial terms plus weighted cycle loss.
        adv_a = _adv_generator(model.d_a(fake_a), cfg.gan_mode)
        adv_h = _adv_generator(model.d_h(fake_h), cfg.gan_mode)
        cyc = l1_loss(model.g_a(fake_h), a) + l1_loss(model.g_h(fake_a), h)
        total = adv_a + adv_h + cyc * cfg.lambda_cycle
        total.backward()
        self.opt_g.step()
        # The generator backward also deposited gradients into the
        # discriminators; clear them before their own phase.
        self.opt_d_a.zero_grad()
        self.opt_d_h.zero_grad()
        pooled_a = Tensor(self.pool_a.sample(fake_a.data))
        pooled_h = Tensor(self.pool_h.sample(fake_h.data))
        d_loss_a = _adv_discriminator(model.d_a(a), model.d_a(pooled_a), cfg.gan_mode)
        d_loss_a.backward()
        self.opt_d_a.step()
        d_loss_h = _adv_discriminator(model.d_h(h), model.d_h(pooled_h), cfg.gan_mode)
        d_loss_h.backward()
        self.opt_d_h.step()
        return LossBreakdown(adv_a.item(), adv_h.item(), cyc.item(), total.item())


def train_step(trainer, batch_a, batch_h):
    """One optimization step: generators on the full objective, then each
    discriminator on its adversarial loss against pooled fakes."""
    return trainer.step(batch_a, batch_h)


def train(model, config, data_a, data_h, log_path=None):
    """Train over unpaired images for config.epochs; returns history.

    Each domain is either an NCHW float array or a list of equally sized
    RasterImages. Batches are drawn by seeded shuffling per epoch; the
    optional CSV log records one LossBreakdown per step.
    """
    if not isinstance(data_a, np.ndarray):
        data_a = images_to_batch(data_a)
    if not isinstance(data_h, np.ndarray):
        data_h = images_to_batch(data_h)
    if len(data_a) < config.batch or len(data_h) < config.batch:
        raise ConfigError("need at least one full batch per domain")
    trainer = GanTrainer(model, config)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = min(len(data_a), len(data_h)) // config.batch
    history = []
    for _ in range(config.epochs):
        idx_a = rng.permutation(len(data_a))
        idx_h = rng.permutation(len(data_h))
        for s in range(steps_per_epoch):
            sel_a = idx_a[s * config.batch : (s + 1) * config.batch]
            sel_h = idx_h[s * config.batch : (s + 1) * config.batch]
            history.append(trainer.step(data_a[sel_a], data_h[sel_h]))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "adv_a", "adv_h", "cycle", "total"])
            for i, item in enumerate(history):
                writer.writerow(
                    [i, f"{item.adv_a:.8f}", f"{item.adv_h:.8f}",
                     f"{item.cycle:.8f}", f"{item.total:.8f}"]
                )
    return history


# -- inference ---------------------------------------------------------------


def _pad_multiple(data, factor):
    h, w = data.shape[:2]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return data, h, w
    padded = np.pad(data, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return padded, h, w


def _feather_profile(length, overlap):
    ramp = np.minimum(np.arange(length) + 1, np.arange(length)[::-1] + 1)
    return np.minimum(ramp / (overlap + 1.0), 1.0)


def _run_tile(g, tile_hwc):
    batch = np.transpose(tile_hwc, (2, 0, 1))[None].astype(np.float32)
    out = g(Tensor(batch))
    return np.transpose(out.data[0], (1, 2, 0)).astype(np.float64)


def apply(model, img, tile=64, overlap=8):
    """Stain-transfer an image through G_H with tiled, feathered inference.

    The image is covered with tile x tile crops advancing by tile-overlap;
    each crop runs through the generator and the outputs are blended with a
    linear feather across overlaps. A tile at least as large as the image
    collapses to one full pass. No reference image is involved.
    """
    if tile % DOWNSAMPLE_FACTOR:
        raise ShapeError(f"tile must be divisible by {DOWNSAMPLE_FACTOR}")
    if overlap < 0 or overlap >= tile:
        raise ShapeError("overlap must satisfy 0 <= overlap < tile")
    data = img.data
    h, w = data.shape[:2]
    if tile >= h and tile >= w:
        padded, oh, ow = _pad_multiple(data, DOWNSAMPLE_FACTOR)
        out = _run_tile(model.g_h, padded)
        return RasterImage(np.clip(out[:oh, :ow], 0.0, 1.0))
    # Clamp the tile to short image sides, keeping it generator-compatible.
    t = min(tile, h - h % DOWNSAMPLE_FACTOR, w - w % DOWNSAMPLE_FACTOR)
    ov = min(overlap, t - 1)
    stride = t - ov
    starts_h = sorted({min(s, h - t) for s in range(0, h - t + stride, stride)})
    starts_w = sorted({min(s, w - t) for s in range(0, w - t + stride, stride)})
    weight_1d = _feather_profile(t, ov)
    weight = np.outer(weight_1d, weight_1d)[:, :, None]
    acc = np.zeros_like(data)
    norm = np.zeros((h, w, 1))
    for sy in starts_h:
        for sx in starts_w:
            out = _run_tile(model.g_h, data[sy : sy + t, sx : sx + t])
            acc[sy : sy + t, sx : sx + t] += out * weight
            norm[sy : sy + t, sx : sx + t] += weight
    return RasterImage(np.clip(acc / norm, 0.0, 1.0))
