"""Two-stage training orchestration.

Warm-up: every step runs the labelled day pipeline (segmentation, inner
reconstruction, day-to-night translation with adversarial + perceptual +
cross-domain segmentation terms, outer reconstruction), the unlabelled night
pipeline (inner/outer loops, night-to-day translation), and an inner loop on
the day reference image. Generator-side networks update first on the
weighted total, then the discriminators update on fresh scores with the
translations treated as constants.

Self-training: the same step plus two pseudo-supervised terms, one from the
offline store and one from the online static/agreement selection.

Gradient-flow conventions: the probability maps rendered in the *day*
decoder are fused with ground truth and detached, so the day inner loop
cannot move the classifier; the night and reference probability maps stay
attached everywhere, so their loops fine-tune the classifier directly.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .core import (
    ClassTaxonomy,
    LabelMap,
    PairedSample,
    ProbMap,
    argmax_labels,
    onehot,
    restrict,
)
from .datagen import load_manifest, load_sample
from .losses import (
    SELFTRAIN_TERMS,
    WARMUP_TERMS,
    LossReport,
    LossWeights,
    fuse_probs,
    lsgan_disc,
    lsgan_gen,
    perceptual,
    recon_l1,
    seg_ce,
    total_loss,
)
from .nets import (
    ArchConfig,
    ModelBundle,
    classify_batch,
    init_model_bundle,
    load_checkpoint,
    save_checkpoint,
)
from .selftrain import (
    PseudoLabelStore,
    SelfTrainConfig,
    coteach_target,
    dna,
    lor,
    select_online,
    static_map,
)

POLY_POWER = 0.9
CLIP_NORM = 10.0

STAGES = ("warmup", "selftrain")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "warmup"
    steps: int = 1000
    batch_size: int = 2
    lr_seg: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_aux: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 500
    crop_size: int | None = None
    fuse_alpha: float = 0.8
    weights: LossWeights = field(default_factory=LossWeights)
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    warmup_checkpoint: str | None = None
    pseudo_dir: str | None = None
    # ablation switches (all on for the full method)
    enable_inner: bool = True
    enable_outer: bool = True
    enable_rendering: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.lr_seg <= 0 or self.lr_aux <= 0:
            raise ValueError("learning rates must be positive")
        if self.stage == "selftrain" and (not self.warmup_checkpoint or not self.pseudo_dir):
            raise ValueError(
                "selftrain stage requires a warm-up checkpoint path and a pseudo-label directory"
            )

    def to_json(self) -> str:
        d = asdict(self)
        st = d["selftrain"]
        for k in ("offline_classes", "online_classes"):
            if st[k] is not None:
                st[k] = sorted(st[k])
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "selftrain" in d:
            st = dict(d["selftrain"])
            for k in ("offline_classes", "online_classes"):
                if st.get(k) is not None:
                    st[k] = frozenset(st[k])
            d["selftrain"] = SelfTrainConfig(**st)
        if "arch" in d:
            a = {k: tuple(v) if isinstance(v, list) else v for k, v in d["arch"].items()}
            d["arch"] = ArchConfig(**a)
        return cls(**d)


@dataclass
class BatchTensors:
    """One training batch stacked into [B, ...] tensors."""

    x_day: torch.Tensor
    y_day: torch.Tensor
    x_night: torch.Tensor
    x_day_ref: torch.Tensor
    sample_ids: tuple[str, ...]


def collate(batch: Sequence[PairedSample], crop_size: int | None = None,
            rng: random.Random | None = None) -> BatchTensors:
    xs, ys, xn, xr, ids = [], [], [], [], []
    for s in batch:
        x_d, y_d, x_n, x_r = s.x_day.data, s.y_day.data, s.x_night.data, s.x_day_ref.data
        if crop_size and crop_size < x_d.shape[-1]:
            if crop_size % 8:
                raise ValueError("crop_size must be divisible by 8")
            r = rng or random.Random(0)
            top = r.randrange(0, x_d.shape[-2] - crop_size + 1)
            left = r.randrange(0, x_d.shape[-1] - crop_size + 1)
            x_d = x_d[:, top : top + crop_size, left : left + crop_size]
            y_d = y_d[top : top + crop_size, left : left + crop_size]
            x_n = x_n[:, top : top + crop_size, left : left + crop_size]
            x_r = x_r[:, top : top + crop_size, left : left + crop_size]
        xs.append(x_d)
        ys.append(y_d)
        xn.append(x_n)
        xr.append(x_r)
        ids.append(s.sample_id)
    return BatchTensors(torch.stack(xs), torch.stack(ys), torch.stack(xn),
                        torch.stack(xr), tuple(ids))


def _fuse_detached(p: torch.Tensor, y: torch.Tensor, alpha: float,
                   taxonomy: ClassTaxonomy) -> torch.Tensor:
    """Batched fuse + detach for rendering in the day decoder."""
    out = []
    for b in range(p.shape[0]):
        out.append(fuse_probs(ProbMap(p[b]), LabelMap(y[b]), alpha, taxonomy).data)
    return torch.stack(out).detach()


def _onehot_batch(y: torch.Tensor, taxonomy: ClassTaxonomy) -> torch.Tensor:
    return torch.stack([onehot(LabelMap(y[b]), taxonomy).data for b in range(y.shape[0])])


def compute_warmup_losses(batch: BatchTensors, bundle: ModelBundle, cfg: TrainConfig,
                          taxonomy: ClassTaxonomy) -> tuple[dict, dict]:
    """All generator-side warm-up terms plus the tensors the discriminator
    half-step needs. Disabled terms are reported as zero constants."""
    w = cfg.weights
    render = cfg.enable_rendering
    zero = torch.zeros(())
    terms = {k: zero for k in WARMUP_TERMS}
    aux: dict = {"x_d2n": None, "x_n2d": None}

    oh_d = _onehot_batch(batch.y_day, taxonomy)

    if not cfg.enable_inner and not cfg.enable_outer:
        # source-only baseline: supervised day segmentation alone
        z_d = bundle.enc(batch.x_day)
        p_d = classify_batch(z_d, bundle)
        terms["seg_d"] = seg_ce(p_d, oh_d)
        aux["p_n"] = aux["p_ud"] = None
        return terms, aux

    x_all = torch.cat([batch.x_day, batch.x_night, batch.x_day_ref])
    z_all = bundle.enc(x_all)
    p_all = classify_batch(z_all, bundle)
    b = batch.x_day.shape[0]
    z_d, z_n, z_ud = z_all[:b], z_all[b : 2 * b], z_all[2 * b :]
    p_d, p_n, p_ud = p_all[:b], p_all[b : 2 * b], p_all[2 * b :]

    terms["seg_d"] = seg_ce(p_d, oh_d)
    fused_d = _fuse_detached(p_d, batch.y_day, cfg.fuse_alpha, taxonomy)

    if cfg.enable_inner:
        rec = torch.cat([
            bundle.dec_day(torch.cat([z_d, z_ud]), torch.cat([fused_d, p_ud]), render=render),
            bundle.dec_night(z_n, p_n, render=render),
        ])
        terms["inner_d"] = recon_l1(rec[:b], batch.x_day)
        terms["inner_ud"] = recon_l1(rec[b : 2 * b], batch.x_day_ref)
        terms["inner_n"] = recon_l1(rec[2 * b :], batch.x_night)

    if cfg.enable_outer:
        x_d2n = bundle.dec_night(z_d, p_d, render=render)
        x_n2d = bundle.dec_day(z_n, p_n, render=render)
        aux["x_d2n"], aux["x_n2d"] = x_d2n, x_n2d

        terms["adv_d2n"] = lsgan_gen(bundle.disc_night(x_d2n))
        terms["adv_n2d"] = lsgan_gen(bundle.disc_day(x_n2d))

        z2 = bundle.enc(torch.cat([x_d2n, x_n2d]))
        p2 = classify_batch(z2, bundle)
        z_d2n, z_n2d = z2[:b], z2[b:]
        p_d2n, p_n2d = p2[:b], p2[b:]

        terms["seg_d2n"] = seg_ce(p_d2n, oh_d)
        terms["percep_d"] = perceptual(x_d2n, batch.x_day, z_d2n, z_d, w)
        terms["percep_n"] = perceptual(x_n2d, batch.x_night, z_n2d, z_n, w)

        fused_d2n = _fuse_detached(p_d2n, batch.y_day, cfg.fuse_alpha, taxonomy)
        terms["outer_d"] = recon_l1(bundle.dec_day(z_d2n, fused_d2n, render=render), batch.x_day)
        terms["outer_n"] = recon_l1(bundle.dec_night(z_n2d, p_n2d, render=render), batch.x_night)

    aux["p_n"], aux["p_ud"] = p_n, p_ud
    return terms, aux


def compute_selftrain_losses(batch: BatchTensors, bundle: ModelBundle, cfg: TrainConfig,
                             taxonomy: ClassTaxonomy,
                             pseudo_store: PseudoLabelStore) -> tuple[dict, dict, list]:
    """Warm-up terms plus the two pseudo-supervised terms; also returns the
    per-sample online-selection trace [(lor, 'static'|'dna'), ...]."""
    terms, aux = compute_warmup_losses(batch, bundle, cfg, taxonomy)
    st = cfg.selftrain
    p_n, p_ud = aux["p_n"], aux["p_ud"]
    if p_n is None:
        # loops disabled: the pseudo terms still need night/reference predictions
        z2 = bundle.enc(torch.cat([batch.x_night, batch.x_day_ref]))
        p2 = classify_batch(z2, bundle)
        b = batch.x_night.shape[0]
        p_n, p_ud = p2[:b], p2[b:]

    y_ud_off = torch.stack(
        [pseudo_store.load(PseudoLabelStore.DAY_REF, sid).data for sid in batch.sample_ids]
    )
    terms = dict(terms)
    terms["seg_ud_pseudo"] = seg_ce(p_ud, y_ud_off)

    online_cls = st.resolve_online(taxonomy)
    targets, trace = [], []
    for i, sid in enumerate(batch.sample_ids):
        y_off = pseudo_store.load(PseudoLabelStore.NIGHT, sid)
        pn_i, pud_i = ProbMap(p_n[i].detach()), ProbMap(p_ud[i].detach())
        y_static = static_map(pud_i, pn_i, taxonomy)
        y_agree = dna(y_static, pn_i)
        lor_v = lor(argmax_labels(pn_i), argmax_labels(pud_i), taxonomy.ssc_ids)
        y_on = select_online(lor_v, y_static, y_agree, st.tau)
        trace.append((lor_v, "static" if y_on is y_static else "dna"))
        if st.disable_online:
            y_on = restrict(y_on, ())
        elif online_cls != taxonomy.static_ids:
            y_on = restrict(y_on, online_cls)
        targets.append(coteach_target(y_off, y_on, st.mutually_exclusive))
    terms["seg_n_coteach"] = seg_ce(p_n, torch.stack(targets))
    return terms, aux, trace


@dataclass
class TrainState:
    bundle: ModelBundle
    taxonomy: ClassTaxonomy
    seg_opt: torch.optim.Optimizer
    dec_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer
    step: int = 0
    total_steps: int = 1


def init_train_state(cfg: TrainConfig, taxonomy: ClassTaxonomy,
                     bundle: ModelBundle | None = None) -> TrainState:
    bundle = bundle or init_model_bundle(cfg.arch, seed=cfg.seed)
    seg_opt = torch.optim.SGD(list(bundle.seg_parameters()), lr=cfg.lr_seg,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    dec_opt = torch.optim.Adam(list(bundle.decoder_parameters()), lr=cfg.lr_aux)
    disc_opt = torch.optim.Adam(list(bundle.discriminator_parameters()), lr=cfg.lr_aux)
    return TrainState(bundle, taxonomy, seg_opt, dec_opt, disc_opt, step=0,
                      total_steps=cfg.steps)


def _poly_lr(base: float, step: int, total: int) -> float:
    return base * (1.0 - min(step, total - 1) / max(total, 1)) ** POLY_POWER


def _apply_step(state: TrainState, cfg: TrainConfig, terms: dict, aux: dict,
                batch: BatchTensors) -> dict:
    """One generator update then one discriminator update; returns extra
    scalars for the metrics record."""
    bundle = state.bundle
    lr = _poly_lr(cfg.lr_seg, state.step, state.total_steps)
    for g in state.seg_opt.param_groups:
        g["lr"] = lr

    total = total_loss(terms, cfg.weights)
    state.seg_opt.zero_grad(set_to_none=True)
    state.dec_opt.zero_grad(set_to_none=True)
    state.disc_opt.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(list(bundle.generator_parameters()), CLIP_NORM)
    state.seg_opt.step()
    state.dec_opt.step()

    extras = {"lr": lr, "total": float(total.detach())}
    if cfg.enable_outer and aux["x_d2n"] is not None:
        state.disc_opt.zero_grad(set_to_none=True)
        d_night = lsgan_disc([bundle.disc_night(batch.x_night)],
                             bundle.disc_night(aux["x_d2n"].detach()))
        d_day = lsgan_disc([bundle.disc_day(batch.x_day), bundle.disc_day(batch.x_day_ref)],
                           bundle.disc_day(aux["x_n2d"].detach()))
        (d_night + d_day).backward()
        torch.nn.utils.clip_grad_norm_(list(bundle.discriminator_parameters()), CLIP_NORM)
        state.disc_opt.step()
        extras["disc_day"] = float(d_day.detach())
        extras["disc_night"] = float(d_night.detach())
    else:
        extras["disc_day"] = 0.0
        extras["disc_night"] = 0.0
    state.step += 1
    return extras


def _report(terms: dict, total: float, keys: tuple[str, ...]) -> LossReport:
    out = {k: float(terms[k].detach() if isinstance(terms[k], torch.Tensor) else terms[k])
           for k in keys}
    out["total"] = total
    return LossReport(out)


def warmup_step(batch: Sequence[PairedSample] | BatchTensors, state: TrainState,
                cfg: TrainConfig) -> LossReport:
    bt = batch if isinstance(batch, BatchTensors) else collate(batch)
    terms, aux = compute_warmup_losses(bt, state.bundle, cfg, state.taxonomy)
    extras = _apply_step(state, cfg, terms, aux, bt)
    return _report(terms, extras["total"], WARMUP_TERMS)


def selftrain_step(batch: Sequence[PairedSample] | BatchTensors, state: TrainState,
                   cfg: TrainConfig, pseudo_store: PseudoLabelStore) -> LossReport:
    bt = batch if isinstance(batch, BatchTensors) else collate(batch)
    terms, aux, _trace = compute_selftrain_losses(bt, state.bundle, cfg, state.taxonomy,
                                                  pseudo_store)
    extras = _apply_step(state, cfg, terms, aux, bt)
    return _report(terms, extras["total"], SELFTRAIN_TERMS)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    run_dir: str
    final_checkpoint: str
    metrics_path: str
    steps: int


def generate_offline_pseudo(bundle: ModelBundle, data_dir: str | Path, cfg: TrainConfig,
                            taxonomy: ClassTaxonomy, out_dir: str | Path,
                            checkpoint_path: str | Path | None = None,
                            split: str = "train") -> PseudoLabelStore:
    """Run the frozen model over a split and write the offline pseudo-label
    store: night labels restricted to dynamic + shift-sensitive classes,
    day-reference labels over all classes."""
    from .selftrain import offline_pseudo

    store = PseudoLabelStore(out_dir, taxonomy)
    st = cfg.selftrain
    night_classes = st.resolve_offline(taxonomy)
    all_classes = frozenset(range(taxonomy.num_classes))
    manifest = load_manifest(data_dir, split)
    bundle.eval()
    with torch.no_grad():
        for entry in manifest.entries:
            sample, _ = load_sample(data_dir, entry, taxonomy)
            x = torch.stack([sample.x_night.data, sample.x_day_ref.data])
            p = classify_batch(bundle.enc(x), bundle)
            store.write(PseudoLabelStore.NIGHT, entry.sample_id,
                        offline_pseudo(ProbMap(p[0]), night_classes, st.confidence_threshold))
            store.write(PseudoLabelStore.DAY_REF, entry.sample_id,
                        offline_pseudo(ProbMap(p[1]), all_classes, st.confidence_threshold))
    bundle.train()
    if checkpoint_path is not None:
        store.write_sidecar(st.confidence_threshold, checkpoint_path)
    return store


def run(cfg: TrainConfig, data_dir: str | Path, out_dir: str | Path,
        resume: str | Path | None = None, deterministic: bool = False) -> RunResult:
    """Train to cfg.steps, logging one metrics record per step and writing
    atomic checkpoints; deterministic given (seed, dataset) in single-thread
    mode. Resuming restores parameters, optimizers and RNG streams."""
    if deterministic:
        torch.set_num_threads(1)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    taxonomy = ClassTaxonomy.load(Path(data_dir) / "taxonomy.json")
    manifest = load_manifest(data_dir, "train")
    samples = [load_sample(data_dir, e, taxonomy)[0] for e in manifest.entries]
    if not samples:
        raise ValueError("train split is empty")

    torch.manual_seed(cfg.seed)
    data_rng = random.Random(cfg.seed * 7919 + 13)
    start_step = 0

    if resume is not None:
        bundle, meta = load_checkpoint(resume, arch=cfg.arch)
        if meta["stage"] != cfg.stage:
            raise ValueError(f"checkpoint stage {meta['stage']!r} does not match {cfg.stage!r}")
        state = init_train_state(cfg, taxonomy, bundle)
        extra = meta["extra"]
        state.seg_opt.load_state_dict(extra["optim"]["seg"])
        state.dec_opt.load_state_dict(extra["optim"]["dec"])
        state.disc_opt.load_state_dict(extra["optim"]["disc"])
        data_rng.setstate(extra["data_rng"])
        torch.set_rng_state(meta["torch_rng"])
        start_step = meta["step"]
        state.step = start_step
    elif cfg.stage == "selftrain":
        if not Path(cfg.warmup_checkpoint).exists():
            raise FileNotFoundError(f"warm-up checkpoint not found: {cfg.warmup_checkpoint}")
        bundle, _ = load_checkpoint(cfg.warmup_checkpoint, arch=cfg.arch)
        state = init_train_state(cfg, taxonomy, bundle)
    else:
        state = init_train_state(cfg, taxonomy)

    pseudo_store = None
    if cfg.stage == "selftrain":
        pseudo_store = PseudoLabelStore(cfg.pseudo_dir, taxonomy)

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume is not None and metrics_path.exists() else "w"
    (out_dir / "config.json").write_text(cfg.to_json())

    last_ckpt = None
    with open(metrics_path, mode) as log:
        for step in range(start_step, cfg.steps):
            idx = (data_rng.sample(range(len(samples)), cfg.batch_size)
                   if cfg.batch_size <= len(samples)
                   else data_rng.choices(range(len(samples)), k=cfg.batch_size))
            bt = collate([samples[i] for i in idx], cfg.crop_size, data_rng)

            if cfg.stage == "warmup":
                terms, aux = compute_warmup_losses(bt, state.bundle, cfg, taxonomy)
                trace = []
                keys = WARMUP_TERMS
            else:
                terms, aux, trace = compute_selftrain_losses(bt, state.bundle, cfg,
                                                             taxonomy, pseudo_store)
                keys = SELFTRAIN_TERMS
            extras = _apply_step(state, cfg, terms, aux, bt)
            report = _report(terms, extras["total"], keys)

            record = {"step": step, "stage": cfg.stage, "lr": extras["lr"],
                      **report.terms,
                      "disc_day": extras["disc_day"], "disc_night": extras["disc_night"]}
            if trace:
                record["lor"] = [round(t[0], 6) for t in trace]
                record["online_sel"] = [t[1] for t in trace]
            log.write(json.dumps(record) + "\n")

            if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.steps:
                last_ckpt = ckpt_dir / f"step_{step + 1:06d}.pt"
                save_checkpoint(
                    last_ckpt, state.bundle, cfg.stage, step + 1,
                    extra={
                        "optim": {
                            "seg": state.seg_opt.state_dict(),
                            "dec": state.dec_opt.state_dict(),
                            "disc": state.disc_opt.state_dict(),
                        },
                        "data_rng": data_rng.getstate(),
                    },
                )

    return RunResult(str(out_dir), str(last_ckpt), str(metrics_path), cfg.steps)
