"""The four sub-networks: shared encoder, semantic classifier, two domain
decoders with semantic rendering layers, and two patch discriminators.

The decoders modulate their feature maps with an encoding of the class
probability map: at each upsampling level, out = raw + raw * sem(p). The
last layer of every semantic branch is zero-initialized, so a fresh decoder
ignores the probability map exactly and behaves as a plain image decoder
until training pushes the rendering weights off zero.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Image, LatentFeature, ProbMap

CHECKPOINT_VERSION = 1
LATENT_STRIDE = 8


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Channel widths for all sub-networks. Spatial latent stride is fixed at 8."""

    num_classes: int = 9
    enc_widths: tuple[int, int, int] = (16, 32, 64)
    cls_width: int = 48
    dec_widths: tuple[int, ...] = (32, 24, 16, 12)  # entry stage + one width per level
    sem_width: int = 8
    render_levels: int = 3
    disc_width: int = 16

    def __post_init__(self):
        if self.render_levels < 2:
            raise ValueError("need at least 2 rendering levels")
        if len(self.dec_widths) != self.render_levels + 1:
            raise ValueError("dec_widths must hold entry width plus one width per level")
        for w in (*self.enc_widths, self.cls_width, *self.dec_widths, self.sem_width, self.disc_width):
            if w % 4:
                raise ValueError("channel widths must be divisible by 4 (group norm)")


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(4, ch)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.n1 = _gn(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.n2 = _gn(ch)

    def forward(self, x):
        h = F.leaky_relu(self.n1(self.conv1(x)), 0.2)
        h = self.n2(self.conv2(h))
        return F.leaky_relu(x + h, 0.2)


class Encoder(nn.Module):
    """Three-stage residual encoder, overall stride 8, shared by all domains."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w0, w1, w2 = arch.enc_widths
        self.stem = nn.Sequential(nn.Conv2d(3, w0, 3, stride=2, padding=1), _gn(w0), nn.LeakyReLU(0.2))
        self.stage1 = ResBlock(w0)
        self.down1 = nn.Sequential(nn.Conv2d(w0, w1, 3, stride=2, padding=1), _gn(w1), nn.LeakyReLU(0.2))
        self.stage2 = ResBlock(w1)
        self.down2 = nn.Sequential(nn.Conv2d(w1, w2, 3, stride=2, padding=1), _gn(w2), nn.LeakyReLU(0.2))
        self.stage3 = ResBlock(w2)
        self.out_channels = w2

    def forward(self, x):
        if x.shape[-1] % LATENT_STRIDE or x.shape[-2] % LATENT_STRIDE:
            raise ValueError(f"input dims must be divisible by {LATENT_STRIDE}, got {tuple(x.shape)}")
        return self.stage3(self.down2(self.stage2(self.down1(self.stage1(self.stem(x))))))


class Classifier(nn.Module):
    """Latent-resolution logits with a small two-scale pooling context module."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        cf, cw = arch.enc_widths[-1], arch.cls_width
        pw = 8
        self.proj = nn.Sequential(nn.Conv2d(cf, cw, 1), _gn(cw), nn.LeakyReLU(0.2))
        self.pool1 = nn.Conv2d(cf, pw, 1)
        self.pool2 = nn.Conv2d(cf, pw, 1)
        self.fuse = nn.Sequential(nn.Conv2d(cw + 2 * pw, cw, 3, padding=1), _gn(cw), nn.LeakyReLU(0.2))
        self.head = nn.Conv2d(cw, arch.num_classes, 1)

    def forward(self, z):
        h, w = z.shape[-2:]
        p1 = F.interpolate(self.pool1(F.adaptive_avg_pool2d(z, 1)), size=(h, w), mode="bilinear", align_corners=False)
        p2 = F.interpolate(self.pool2(F.adaptive_avg_pool2d(z, 4)), size=(h, w), mode="bilinear", align_corners=False)
        return self.head(self.fuse(torch.cat([self.proj(z), p1, p2], dim=1)))


class SemBranch(nn.Module):
    """Two-layer encoder of the probability map; last layer starts at zero."""

    def __init__(self, num_classes: int, sem_width: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(num_classes, sem_width, 3, padding=1)
        self.conv2 = nn.Conv2d(sem_width, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, p):
        return self.conv2(F.leaky_relu(self.conv1(p), 0.2))


class Decoder(nn.Module):
    """Latent-to-image decoder with per-level semantic rendering and skip."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        widths = arch.dec_widths
        self.entry = nn.Sequential(
            nn.Conv2d(arch.enc_widths[-1], widths[0], 3, padding=1), _gn(widths[0]), nn.LeakyReLU(0.2)
        )
        self.raw_convs = nn.ModuleList()
        self.sem_branches = nn.ModuleList()
        for lo, hi in zip(widths[:-1], widths[1:]):
            self.raw_convs.append(
                nn.Sequential(nn.Conv2d(lo, hi, 3, padding=1), _gn(hi), nn.LeakyReLU(0.2))
            )
            self.sem_branches.append(SemBranch(arch.num_classes, arch.sem_width, hi))
        self.final = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(self, z, p, render: bool = True):
        h = self.entry(z)
        for raw_conv, sem_branch in zip(self.raw_convs, self.sem_branches):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            raw = raw_conv(h)
            if render:
                p_l = F.interpolate(p, size=raw.shape[-2:], mode="bilinear", align_corners=False)
                h = raw + raw * sem_branch(p_l)
            else:
                h = raw
        return torch.tanh(self.final(h))


class PatchDiscriminator(nn.Module):
    """Four-layer fully-convolutional least-squares discriminator; raw scores."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.disc_width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            _gn(2 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
            _gn(4 * w),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class ScoreMap:
    """Patch discriminator output, 1 x h_s x w_s."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 1:
            raise ValueError(f"score map must be 1xhxw, got {tuple(self.data.shape)}")


@dataclass
class ModelBundle:
    """All trainable sub-networks plus their architecture description."""

    arch: ArchConfig
    enc: Encoder
    cls: Classifier
    dec_day: Decoder
    dec_night: Decoder
    disc_day: PatchDiscriminator
    disc_night: PatchDiscriminator

    def modules_by_name(self) -> dict[str, nn.Module]:
        return {
            "enc": self.enc,
            "cls": self.cls,
            "dec_day": self.dec_day,
            "dec_night": self.dec_night,
            "disc_day": self.disc_day,
            "disc_night": self.disc_night,
        }

    def generator_parameters(self):
        for m in (self.enc, self.cls, self.dec_day, self.dec_night):
            yield from m.parameters()

    def discriminator_parameters(self):
        for m in (self.disc_day, self.disc_night):
            yield from m.parameters()

    def seg_parameters(self):
        for m in (self.enc, self.cls):
            yield from m.parameters()

    def decoder_parameters(self):
        for m in (self.dec_day, self.dec_night):
            yield from m.parameters()

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for m in self.modules_by_name().values():
            m.to(dtype)
        return self

    def train(self) -> "ModelBundle":
        for m in self.modules_by_name().values():
            m.train()
        return self

    def eval(self) -> "ModelBundle":
        for m in self.modules_by_name().values():
            m.eval()
        return self

    def param_digest(self, names: tuple[str, ...] | None = None) -> str:
        """Order-stable hash of selected sub-networks' parameters."""
        import hashlib

        h = hashlib.sha256()
        for name, m in sorted(self.modules_by_name().items()):
            if names is not None and name not in names:
                continue
            for pname, p in sorted(m.state_dict().items()):
                h.update(pname.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def init_model_bundle(arch: ArchConfig | None = None, seed: int = 0) -> ModelBundle:
    arch = arch or ArchConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ModelBundle(
            arch=arch,
            enc=Encoder(arch),
            cls=Classifier(arch),
            dec_day=Decoder(arch),
            dec_night=Decoder(arch),
            disc_day=PatchDiscriminator(arch),
            disc_night=PatchDiscriminator(arch),
        )


# ---------------------------------------------------------------------------
# single-image operation surface
# ---------------------------------------------------------------------------


def encode(x: Image, bundle: ModelBundle) -> LatentFeature:
    return LatentFeature(bundle.enc(x.data.unsqueeze(0)).squeeze(0))


def classify(z: LatentFeature, bundle: ModelBundle) -> ProbMap:
    return ProbMap(classify_batch(z.data.unsqueeze(0), bundle).squeeze(0))


def classify_batch(z: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    """Logits at latent resolution, bilinear x8 upsample, per-pixel softmax."""
    logits = bundle.cls(z)
    logits = F.interpolate(logits, scale_factor=LATENT_STRIDE, mode="bilinear", align_corners=False)
    return torch.softmax(logits, dim=1)


def decode(z: LatentFeature, p: ProbMap, which: str, bundle: ModelBundle,
           render: bool = True) -> Image:
    if z.data.shape[-1] * LATENT_STRIDE != p.data.shape[-1] or z.data.shape[-2] * LATENT_STRIDE != p.data.shape[-2]:
        raise ValueError(
            f"latent {tuple(z.data.shape)} and prob map {tuple(p.data.shape)} disagree on spatial size"
        )
    dec = bundle.dec_day if which == "day" else bundle.dec_night
    out = dec(z.data.unsqueeze(0), p.data.unsqueeze(0), render=render).squeeze(0)
    return Image(out, "translated")


def discriminate(x: Image, which: str, bundle: ModelBundle) -> ScoreMap:
    disc = bundle.disc_day if which == "day" else bundle.disc_night
    return ScoreMap(disc(x.data.unsqueeze(0)).squeeze(0))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, bundle: ModelBundle, stage: str, step: int,
                    extra: dict | None = None) -> None:
    """Atomically write a versioned checkpoint (tmp file + rename)."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(bundle.arch),
        "stage": stage,
        "step": step,
        "state": {k: m.state_dict() for k, m in bundle.modules_by_name().items()},
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path, arch: ArchConfig | None = None) -> tuple[ModelBundle, dict]:
    """Load a checkpoint into a fresh bundle; reject architecture mismatches."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    saved_arch = ArchConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in payload["arch"].items()
    })
    if arch is not None and saved_arch != arch:
        raise CheckpointError(
            f"architecture mismatch: checkpoint has {saved_arch}, expected {arch}"
        )
    bundle = init_model_bundle(saved_arch, seed=0)
    for k, m in bundle.modules_by_name().items():
        m.load_state_dict(payload["state"][k])
    meta = {"stage": payload["stage"], "step": payload["step"], "extra": payload["extra"],
            "torch_rng": payload["torch_rng"]}
    return bundle, meta
