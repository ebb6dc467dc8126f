"""Procedural day/night paired-scene generator plus a Cityscapes-format adapter.

Each sample couples two independently drawn scenes:

  * a labelled "source" scene rendered in daylight (x_day, y_day), and
  * a "target" scene rendered twice: once at night from the base camera pose
    (x_night, with held-out y_night), and once in daylight from a rigidly
    shifted pose (x_day_ref).

Dynamic objects (car, person) are re-sampled between the night view and the
day reference view whenever the pose shift is nonzero, mimicking the fact
that traffic does not wait around between two capture passes. The thin
shift-sensitive classes (pole, sign, light) are drawn deliberately small so
a few pixels of pose shift destroys their overlap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (
    ClassTaxonomy,
    Image,
    LabelMap,
    PairedSample,
    default_taxonomy,
    load_image,
    load_label,
    save_image,
    save_label,
)

# class ids in the default taxonomy
ROAD, BUILDING, SKY, VEGETATION, POLE, SIGN, LIGHT, CAR, PERSON = range(9)

DAY_COLORS = {
    ROAD: (0.36, 0.36, 0.40),
    BUILDING: (0.56, 0.44, 0.38),
    SKY: (0.56, 0.72, 0.92),
    VEGETATION: (0.22, 0.48, 0.24),
    POLE: (0.28, 0.28, 0.30),
    SIGN: (0.88, 0.76, 0.16),
    LIGHT: (0.96, 0.82, 0.38),
    CAR: (0.62, 0.16, 0.18),
    PERSON: (0.78, 0.56, 0.44),
}

# Night visibility multipliers: the broad background classes go near-black
# while emissive/reflective classes stay readable.
DEFAULT_VISIBILITY = {
    ROAD: 0.45,
    BUILDING: 0.22,
    SKY: 0.06,
    VEGETATION: 0.18,
    POLE: 0.30,
    SIGN: 0.55,
    LIGHT: 0.95,
    CAR: 0.50,
    PERSON: 0.38,
}
DEFAULT_GAMMA = 1.5
DEFAULT_NOISE = 0.015


@dataclass(frozen=True)
class NightParams:
    """Per-class visibility in [0,1], a global gamma and additive noise level."""

    visibility: tuple[float, ...] = tuple(DEFAULT_VISIBILITY[c] for c in range(9))
    gamma: float = DEFAULT_GAMMA
    noise: float = DEFAULT_NOISE

    def __post_init__(self):
        for v in self.visibility:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"visibility factor {v} outside [0, 1]")


@dataclass(frozen=True)
class ShapeSpec:
    """One painted primitive in canvas pixel coordinates.

    kind: 'band' (y0..y1 full width), 'rect' (x0,y0,x1,y1),
    'ellipse' (cx,cy,rx,ry) or 'vbar' (cx,y0,y1,width).
    """

    kind: str
    params: tuple[float, ...]


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one paired sample.

    ``layout`` describes the target scene as (class_id, shape, depth) tuples
    painted in increasing depth order; the labelled source scene is derived
    from ``seed`` internally. ``pose_shift`` moves the day-reference camera.
    """

    seed: int
    height: int = 128
    width: int = 128
    layout: tuple[tuple[int, ShapeSpec, int], ...] = ()
    pose_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    night_params: NightParams = field(default_factory=NightParams)

    def __post_init__(self):
        dx, dy, dtheta = self.pose_shift
        if abs(dx) > self.width / 4 or abs(dy) > self.width / 4:
            raise ValueError(
                f"pose shift ({dx}, {dy}) exceeds the +/-{self.width / 4:.0f} px range"
            )
        if abs(dtheta) > 10:
            raise ValueError(f"pose rotation {dtheta} exceeds the +/-10 degree range")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    day: str
    day_label: str
    night: str | None = None
    day_ref: str | None = None
    night_label: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Index of one dataset split; eval splits additionally carry night labels."""

    split: str
    eval_split: bool
    entries: tuple[ManifestEntry, ...]

    @property
    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    def check_paths(self, root: str | Path) -> None:
        root = Path(root)
        for e in self.entries:
            for p in (e.day, e.day_label, e.night, e.day_ref, e.night_label):
                if p is not None and not (root / p).exists():
                    raise FileNotFoundError(f"manifest path missing: {p}")
            if self.eval_split and e.night_label is None:
                raise ValueError(f"eval split entry {e.sample_id} lacks a night label")
            if not self.eval_split and e.night_label is not None:
                raise ValueError(f"train split entry {e.sample_id} carries a night label")

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "eval_split": self.eval_split,
                "entries": [
                    {k: v for k, v in vars(e).items() if v is not None}
                    for e in self.entries
                ],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            split=d["split"],
            eval_split=d["eval_split"],
            entries=tuple(ManifestEntry(**e) for e in d["entries"]),
        )


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------


def _sample_static_layout(rng: np.random.Generator, h: int, w: int,
                          margin: int) -> tuple[list, float]:
    """Static scene geometry on a padded canvas; view window starts at `margin`."""
    shapes = []
    ch, cw = h + 2 * margin, w + 2 * margin
    horizon = margin + h * rng.uniform(0.42, 0.58)

    shapes.append((SKY, ShapeSpec("band", (0.0, horizon)), 0))
    shapes.append((ROAD, ShapeSpec("band", (horizon, float(ch))), 1))

    for _ in range(rng.integers(2, 5)):
        bw = w * rng.uniform(0.14, 0.30)
        bx = margin + rng.uniform(0, w - bw)
        bh = h * rng.uniform(0.18, 0.45)
        shapes.append((BUILDING, ShapeSpec("rect", (bx, horizon - bh, bx + bw, horizon + 2)), 2))

    for _ in range(rng.integers(2, 4)):
        rx = w * rng.uniform(0.05, 0.13)
        ry = h * rng.uniform(0.05, 0.11)
        cx = margin + rng.uniform(0, w)
        cy = horizon - rng.uniform(0.0, 0.12) * h
        shapes.append((VEGETATION, ShapeSpec("ellipse", (cx, cy, rx, ry)), 3))

    n_poles = int(rng.integers(2, 5))
    pole_tops = []
    for _ in range(n_poles):
        px = margin + rng.uniform(0.05, 0.95) * w
        top = horizon - h * rng.uniform(0.22, 0.42)
        bot = horizon + h * rng.uniform(0.0, 0.04)
        width = float(rng.uniform(1.0, 2.2))
        shapes.append((POLE, ShapeSpec("vbar", (px, top, bot, width)), 4))
        pole_tops.append((px, top))

    for px, top in pole_tops[: rng.integers(1, 3)]:
        s = rng.uniform(3.0, 6.5)
        shapes.append((SIGN, ShapeSpec("rect", (px - s / 2, top, px + s / 2, top + s)), 5))

    for px, top in pole_tops[-int(rng.integers(1, 3)):]:
        r = rng.uniform(1.5, 3.0)
        off = rng.uniform(-3, 3)
        shapes.append((LIGHT, ShapeSpec("ellipse", (px + off, top - r - 1, r, r)), 5))

    return shapes, horizon


def _sample_dynamic_layout(rng: np.random.Generator, h: int, w: int, margin: int,
                           horizon: float) -> list:
    shapes = []
    room = (margin + h) - horizon  # vertical space below the horizon inside the view
    for _ in range(rng.integers(1, 3)):
        cw_ = w * rng.uniform(0.12, 0.20)
        ch_ = cw_ * rng.uniform(0.40, 0.55)
        cx = margin + rng.uniform(0.0, w - cw_)
        cy = horizon + rng.uniform(0.25, 0.95) * room
        shapes.append((CAR, ShapeSpec("rect", (cx, cy - ch_, cx + cw_, cy)), 6))
    for _ in range(rng.integers(1, 3)):
        ph = h * rng.uniform(0.10, 0.18)
        pw = ph * rng.uniform(0.25, 0.4)
        px = margin + rng.uniform(0.0, w - pw)
        py = horizon + rng.uniform(0.15, 0.8) * room
        shapes.append((PERSON, ShapeSpec("rect", (px, py - ph, px + pw, py)), 7))
    return shapes


def _paint(labels: np.ndarray, shapes: list) -> None:
    ch, cw = labels.shape
    yy, xx = np.mgrid[0:ch, 0:cw]
    for class_id, shape, _depth in sorted(shapes, key=lambda s: s[2]):
        k, p = shape.kind, shape.params
        if k == "band":
            m = (yy >= p[0]) & (yy < p[1])
        elif k == "rect":
            m = (xx >= p[0]) & (xx < p[2]) & (yy >= p[1]) & (yy < p[3])
        elif k == "ellipse":
            cx, cy, rx, ry = p
            m = ((xx - cx) / max(rx, 1e-6)) ** 2 + ((yy - cy) / max(ry, 1e-6)) ** 2 <= 1.0
        elif k == "vbar":
            cx, y0, y1, width = p
            m = (np.abs(xx + 0.5 - cx) <= width / 2) & (yy >= y0) & (yy < y1)
        else:
            raise ValueError(f"unknown shape kind {k!r}")
        labels[m] = class_id


def _colorize(labels: np.ndarray, jitter: np.ndarray, texture: np.ndarray) -> np.ndarray:
    """Label map -> day RGB in [0,1] with per-class jitter and a soft texture field."""
    table = np.zeros((9, 3), dtype=np.float32)
    for c, rgb in DAY_COLORS.items():
        table[c] = rgb
    table = np.clip(table + jitter, 0.02, 0.98)
    rgb = table[labels]
    return np.clip(rgb + texture[..., None], 0.0, 1.0)


def _texture_field(rng: np.random.Generator, ch: int, cw: int, amp: float = 0.04) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(ch // 8 + 2, cw // 8 + 2)).astype(np.float32)
    t = torch.from_numpy(coarse)[None, None]
    t = torch.nn.functional.interpolate(t, size=(ch, cw), mode="bilinear", align_corners=False)
    return amp * t[0, 0].numpy()


def _warp_nearest(src: np.ndarray, dx: float, dy: float, dtheta: float, out_h: int, out_w: int, margin: int) -> np.ndarray:
    """Sample the shifted/rotated view window from a padded canvas (nearest)."""
    th = math.radians(dtheta)
    cos_t, sin_t = math.cos(th), math.sin(th)
    cy0 = margin + out_h / 2.0
    cx0 = margin + out_w / 2.0
    yy, xx = np.mgrid[0:out_h, 0:out_w]
    # view pixel -> canvas coordinate of the same world point under the new pose
    rel_x = xx + margin - cx0
    rel_y = yy + margin - cy0
    sx = cos_t * rel_x - sin_t * rel_y + cx0 + dx
    sy = sin_t * rel_x + cos_t * rel_y + cy0 + dy
    si = np.clip(np.rint(sy).astype(np.int64), 0, src.shape[0] - 1)
    sj = np.clip(np.rint(sx).astype(np.int64), 0, src.shape[1] - 1)
    return src[si, sj]


def night_render(day: Image, labels: LabelMap, params: NightParams,
                 rng: np.random.Generator | None = None) -> Image:
    """Darken a day rendering: per-class visibility scaling, then global gamma
    and additive noise. Identity when visibility==1, gamma==1, noise==0."""
    vis = torch.tensor(params.visibility, dtype=day.data.dtype)
    vmap = vis[labels.data.clamp(min=0, max=len(params.visibility) - 1)]
    b = (day.data + 1.0) / 2.0
    b = (b * vmap.unsqueeze(0)) ** params.gamma
    if params.noise > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = torch.from_numpy(
            rng.normal(0.0, params.noise, size=tuple(b.shape)).astype(np.float32)
        ).to(b.dtype)
        b = b + noise
    out = (b.clamp(0.0, 1.0) * 2.0 - 1.0)
    return Image(out, "night")


@dataclass(frozen=True)
class SceneViews:
    """All rendered maps for one paired sample (reference labels included for
    alignment diagnostics; they are never written to train splits)."""

    x_day: Image
    y_day: LabelMap
    x_night: Image
    y_night: LabelMap
    x_day_ref: Image
    y_day_ref: LabelMap


def random_scene_spec(seed: int, height: int = 128, width: int = 128,
                      pose_shift_max: float = 12.0, pose_rot_max: float = 5.0,
                      night_params: NightParams | None = None) -> SceneSpec:
    """Draw a concrete target-scene layout and pose shift from a seed."""
    rng = np.random.default_rng([seed, 0xA11CE])
    margin = _margin_for(width)
    static, horizon = _sample_static_layout(rng, height, width, margin)
    dynamic = _sample_dynamic_layout(rng, height, width, margin, horizon)
    dx = float(rng.uniform(-pose_shift_max, pose_shift_max))
    dy = float(rng.uniform(-pose_shift_max, pose_shift_max))
    dtheta = float(rng.uniform(-pose_rot_max, pose_rot_max))
    return SceneSpec(
        seed=seed,
        height=height,
        width=width,
        layout=tuple(static + dynamic),
        pose_shift=(dx, dy, dtheta),
        night_params=night_params or NightParams(),
    )


def _margin_for(width: int) -> int:
    return width // 4 + 8


def synth_views(spec: SceneSpec) -> SceneViews:
    """Deterministically render every view of one paired sample."""
    h, w, m = spec.height, spec.width, _margin_for(spec.width)
    ch, cw = h + 2 * m, w + 2 * m

    rng_src = np.random.default_rng([spec.seed, 1])
    rng_dyn_ref = np.random.default_rng([spec.seed, 2])
    rng_jit = np.random.default_rng([spec.seed, 3])
    rng_noise = np.random.default_rng([spec.seed, 4])

    jitter = rng_jit.uniform(-0.05, 0.05, size=(9, 3)).astype(np.float32)
    texture = _texture_field(rng_jit, ch, cw)

    # target scene: static layout shared between the two views
    static = [s for s in spec.layout if s[0] not in (CAR, PERSON)]
    dyn_base = [s for s in spec.layout if s[0] in (CAR, PERSON)]

    base_canvas = np.full((ch, cw), SKY, dtype=np.int64)
    _paint(base_canvas, static + dyn_base)

    dx, dy, dtheta = spec.pose_shift
    if dx == 0 and dy == 0 and dtheta == 0:
        # identical capture instants: the reference view sees the same scene
        ref_canvas = base_canvas
    else:
        horizon = _estimate_horizon(static, m)
        dyn_ref = _sample_dynamic_layout(rng_dyn_ref, h, w, m, horizon)
        ref_canvas = np.full((ch, cw), SKY, dtype=np.int64)
        _paint(ref_canvas, static + dyn_ref)

    base_rgb = _colorize(base_canvas, jitter, texture)
    ref_rgb = _colorize(ref_canvas, jitter, texture)

    y_night_arr = base_canvas[m : m + h, m : m + w]
    day_base = base_rgb[m : m + h, m : m + w]
    y_ref_arr = _warp_nearest(ref_canvas, dx, dy, dtheta, h, w, m)
    day_ref = np.stack(
        [_warp_nearest(ref_rgb[..., k], dx, dy, dtheta, h, w, m) for k in range(3)],
        axis=-1,
    )

    # independent labelled source scene
    src_static, src_horizon = _sample_static_layout(rng_src, h, w, m)
    src_dyn = _sample_dynamic_layout(rng_src, h, w, m, src_horizon)
    src_canvas = np.full((ch, cw), SKY, dtype=np.int64)
    _paint(src_canvas, src_static + src_dyn)
    src_jitter = rng_src.uniform(-0.05, 0.05, size=(9, 3)).astype(np.float32)
    src_rgb = _colorize(src_canvas, src_jitter, _texture_field(rng_src, ch, cw))
    y_day_arr = src_canvas[m : m + h, m : m + w]
    day_src = src_rgb[m : m + h, m : m + w]

    def to_img(a: np.ndarray, tag: str) -> Image:
        t = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).float()
        return Image(t * 2.0 - 1.0, tag)

    y_night = LabelMap(torch.from_numpy(y_night_arr.copy()))
    x_night = night_render(to_img(day_base, "day"), y_night, spec.night_params, rng_noise)

    return SceneViews(
        x_day=to_img(day_src, "day"),
        y_day=LabelMap(torch.from_numpy(y_day_arr.copy())),
        x_night=x_night,
        y_night=y_night,
        x_day_ref=to_img(day_ref, "day_ref"),
        y_day_ref=LabelMap(torch.from_numpy(y_ref_arr.copy())),
    )


def _estimate_horizon(static_shapes: list, margin: int) -> float:
    for class_id, shape, _ in static_shapes:
        if class_id == ROAD and shape.kind == "band":
            return shape.params[0]
    return margin + 64.0


def synth_sample(spec: SceneSpec) -> tuple[PairedSample, LabelMap]:
    """Render one sample; the night label map is returned separately because
    train splits must not see it."""
    v = synth_views(spec)
    sample = PairedSample(
        x_day=v.x_day,
        y_day=v.y_day,
        x_night=v.x_night,
        x_day_ref=v.x_day_ref,
        sample_id=f"s{spec.seed:06d}",
    )
    return sample, v.y_night


# ---------------------------------------------------------------------------
# dataset writing / loading
# ---------------------------------------------------------------------------

ROLE_DIRS = ("day", "day_label", "night", "day_ref", "night_label")


def generate_dataset(out_dir: str | Path, n_train: int = 200, n_val: int = 50,
                     seed: int = 17, size: int = 128, pose_shift_max: float = 12.0,
                     taxonomy: ClassTaxonomy | None = None) -> dict[str, DatasetManifest]:
    """Write a full synthetic corpus: train and val splits plus taxonomy file."""
    out_dir = Path(out_dir)
    taxonomy = taxonomy or default_taxonomy()
    out_dir.mkdir(parents=True, exist_ok=True)
    taxonomy.save(out_dir / "taxonomy.json")

    manifests = {}
    offset = 0
    for split, n, is_eval in (("train", n_train, False), ("val", n_val, True)):
        entries = []
        for i in range(n):
            spec = random_scene_spec(seed * 1_000_003 + offset + i, size, size, pose_shift_max)
            sample, y_night = synth_sample(spec)
            sid = f"{split}_{i:05d}"
            paths = {}
            for role, obj in (
                ("day", sample.x_day),
                ("day_label", sample.y_day),
                ("night", sample.x_night),
                ("day_ref", sample.x_day_ref),
                ("night_label", y_night if is_eval else None),
            ):
                if obj is None:
                    paths[role] = None
                    continue
                d = out_dir / split / role
                d.mkdir(parents=True, exist_ok=True)
                rel = f"{split}/{role}/{sid}.png"
                if isinstance(obj, Image):
                    save_image(obj, out_dir / rel)
                else:
                    save_label(obj, out_dir / rel)
                paths[role] = rel
            entries.append(
                ManifestEntry(sid, paths["day"], paths["day_label"], paths["night"],
                              paths["day_ref"], paths["night_label"])
            )
        offset += n
        man = DatasetManifest(split, is_eval, tuple(entries))
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        (out_dir / split / "manifest.json").write_text(man.to_json())
        manifests[split] = man
    return manifests


def load_manifest(data_dir: str | Path, split: str) -> DatasetManifest:
    man = DatasetManifest.from_json((Path(data_dir) / split / "manifest.json").read_text())
    man.check_paths(data_dir)
    return man


def load_sample(data_dir: str | Path, entry: ManifestEntry,
                taxonomy: ClassTaxonomy) -> tuple[PairedSample, LabelMap | None]:
    root = Path(data_dir)
    sample = PairedSample(
        x_day=load_image(root / entry.day, "day"),
        y_day=load_label(root / entry.day_label, taxonomy),
        x_night=load_image(root / entry.night, "night"),
        x_day_ref=load_image(root / entry.day_ref, "day_ref"),
        sample_id=entry.sample_id,
    )
    y_night = load_label(root / entry.night_label, taxonomy) if entry.night_label else None
    return sample, y_night


# ---------------------------------------------------------------------------
# Cityscapes-format directory adapter
# ---------------------------------------------------------------------------


def load_cityscapes_tree(root: str | Path, taxonomy: ClassTaxonomy,
                         split: str = "train") -> tuple[DatasetManifest, list[str]]:
    """Ingest a leftImg8bit/gtFine tree into a day-only manifest.

    Images lacking a label counterpart (or labels lacking an image) are
    reported in the skipped list rather than failing the ingest. Label files
    are mapped lazily via :func:`load_label_mapped`, which sends unknown ids
    to the ignore id.
    """
    root = Path(root)
    img_root = root / "leftImg8bit" / split
    lbl_root = root / "gtFine" / split
    entries: list[ManifestEntry] = []
    skipped: list[str] = []

    images = sorted(img_root.glob("*/*_leftImg8bit.png")) if img_root.exists() else []
    seen_labels = set()
    for img in images:
        base = img.name[: -len("_leftImg8bit.png")]
        lbl = lbl_root / img.parent.name / f"{base}_gtFine_labelIds.png"
        if not lbl.exists():
            skipped.append(str(img.relative_to(root)))
            continue
        seen_labels.add(lbl)
        entries.append(
            ManifestEntry(
                sample_id=base,
                day=str(img.relative_to(root)),
                day_label=str(lbl.relative_to(root)),
            )
        )
    if lbl_root.exists():
        for lbl in sorted(lbl_root.glob("*/*_gtFine_labelIds.png")):
            if lbl not in seen_labels:
                skipped.append(str(lbl.relative_to(root)))

    man = DatasetManifest(split, False, tuple(entries))
    return man, skipped


def load_label_mapped(path: str | Path, taxonomy: ClassTaxonomy) -> LabelMap:
    """Load an 8-bit label file, mapping ids outside the taxonomy to ignore."""
    from PIL import Image as PILImage

    arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.int64)
    t = torch.from_numpy(arr.copy())
    known = (t >= 0) & (t < taxonomy.num_classes)
    t = torch.where(known, t, torch.full_like(t, taxonomy.ignore_id))
    return LabelMap(t)


def export_cityscapes_layout(data_dir: str | Path, manifest: DatasetManifest,
                             out_root: str | Path, city: str = "synth") -> DatasetManifest:
    """Re-export a split's day/label pairs into the leftImg8bit/gtFine layout."""
    data_dir, out_root = Path(data_dir), Path(out_root)
    img_dir = out_root / "leftImg8bit" / manifest.split / city
    lbl_dir = out_root / "gtFine" / manifest.split / city
    img_dir.mkdir(parents=True, exist_ok=True)
    lbl_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest.entries:
        img_path = img_dir / f"{e.sample_id}_leftImg8bit.png"
        lbl_path = lbl_dir / f"{e.sample_id}_gtFine_labelIds.png"
        img_path.write_bytes((data_dir / e.day).read_bytes())
        lbl_path.write_bytes((data_dir / e.day_label).read_bytes())
        entries.append(
            ManifestEntry(
                sample_id=e.sample_id,
                day=str(img_path.relative_to(out_root)),
                day_label=str(lbl_path.relative_to(out_root)),
            )
        )
    return DatasetManifest(manifest.split, False, tuple(entries))
