"""Generator/discriminator training loop, ablation switches and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np
import torch

from .imaging import ColorSpace, Image, gamma_decode, load_image
from .losses import (
    FeatureExtractor,
    LossReport,
    LossWeights,
    adversarial_loss_d,
    compute_losses,
)
from .model import IBCLN, Discriminator, SubnetConfig, build_discriminator
from .synthesis import (
    TrainTriple,
    list_images,
    load_triple,
    read_manifest,
    real_triple,
    residual_reflection,
)

log = logging.getLogger(__name__)

STRUCTURAL_ABLATIONS = frozenset({"no_GR", "no_iteration"})
LOSS_ABLATIONS = frozenset({"drop_adv", "drop_residual", "drop_mp", "pixel_only"})
ABLATIONS = STRUCTURAL_ABLATIONS | LOSS_ABLATIONS
LOG_COLUMNS = ("step", "residual", "mp", "pixel", "adv", "total")


class AblationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 2
    learning_rate: float = 2e-4
    n_steps: int = 3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    subnet: SubnetConfig = field(default_factory=SubnetConfig)
    seed: int = 0
    mix: float | None = None
    ablation: tuple[str, ...] = ()
    patch_size: int | None = None
    hflip: bool = True
    condition: str = "transmission"
    pretrained_features: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.mix is not None and not (0.0 <= self.mix <= 1.0):
            raise ValueError("mix must lie in [0, 1]")
        if self.condition not in ("transmission", "input"):
            raise ValueError("condition must be 'transmission' or 'input'")
        object.__setattr__(self, "ablation", tuple(sorted(set(self.ablation))))
        check_ablation(self.ablation)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = list(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "subnet" in d:
            d["subnet"] = SubnetConfig(**d["subnet"])
        if "ablation" in d:
            d["ablation"] = tuple(d["ablation"])
        return cls(**d)


def check_ablation(flags) -> None:
    flags = set(flags)
    unknown = flags - ABLATIONS
    if unknown:
        raise AblationError(f"unknown ablation(s): {sorted(unknown)}")
    if len(flags & STRUCTURAL_ABLATIONS) > 1:
        raise AblationError(f"at most one structural ablation at a time, got {sorted(flags & STRUCTURAL_ABLATIONS)}")
    if "pixel_only" in flags and len(flags & LOSS_ABLATIONS) > 1:
        raise AblationError("pixel_only cannot be combined with other loss ablations")


def resolve_ablation(config: TrainConfig) -> TrainConfig:
    """Fold the ablation flags into the step count and loss weights."""
    flags = set(config.ablation)
    w = config.loss_weights
    n_steps = config.n_steps
    if "no_iteration" in flags:
        n_steps = 1
    if "no_GR" in flags:
        w = replace(w, lambda_residual=0.0)
    if "drop_adv" in flags:
        w = replace(w, lambda_adv=0.0)
    if "drop_residual" in flags:
        w = replace(w, lambda_residual=0.0)
    if "drop_mp" in flags:
        w = replace(w, lambda_mp=0.0)
    if "pixel_only" in flags:
        w = replace(w, lambda_residual=0.0, lambda_mp=0.0, lambda_adv=0.0)
    return replace(config, n_steps=n_steps, loss_weights=w)


def apply_ablation(config: TrainConfig):
    """Return ``(build_model, loss_weights)`` for the ablated configuration."""
    resolved = resolve_ablation(config)
    builder = partial(
        IBCLN, resolved.subnet, resolved.n_steps, use_reflection_net="no_GR" not in resolved.ablation
    )
    return builder, resolved.loss_weights


# ---------------------------------------------------------------------------
# data

def _triple_ok(t: TrainTriple) -> bool:
    arrays = (t.input.pixels, t.transmission.pixels, t.residual.pixels)
    if not (arrays[0].shape == arrays[1].shape == arrays[2].shape):
        return False
    return all(np.isfinite(a).all() for a in arrays) and np.isfinite(t.alpha)


class TripleSource:
    """Lazily loaded triples from one dataset directory.

    A directory with ``manifest.csv`` is a synthetic set with stored residuals
    and alphas. Otherwise ``input/`` and ``transmission/`` hold real pairs
    whose alpha is estimated and residual computed on load.
    """

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.csv"
        if manifest.is_file():
            self.synthetic = True
            self.rows = read_manifest(manifest)
        elif (self.root / "input").is_dir() and (self.root / "transmission").is_dir():
            self.synthetic = False
            gt = {p.name: p for p in list_images(self.root / "transmission")}
            self.rows = [(p, gt[p.name]) for p in list_images(self.root / "input") if p.name in gt]
        else:
            raise FileNotFoundError(f"{root}: neither a manifest nor input/ + transmission/ pairs")

    def __len__(self):
        return len(self.rows)

    def load(self, i: int) -> TrainTriple:
        if self.synthetic:
            row = self.rows[i]
            return load_triple(self.root, row["index"], row["alpha"])
        inp, gt = self.rows[i]
        return real_triple(load_image(inp), load_image(gt))


class InMemorySource:
    def __init__(self, triples, synthetic=True):
        self.triples = list(triples)
        self.synthetic = synthetic

    def __len__(self):
        return len(self.triples)

    def load(self, i):
        return self.triples[i]


def epoch_order(sources, mix, rng) -> list[tuple[int, int]]:
    """(source, item) pairs for one epoch.

    Without ``mix`` every item appears once. With ``mix`` the epoch keeps its
    natural length but a ``mix`` fraction is drawn from synthetic sources.
    """
    items = [(s, i) for s, src in enumerate(sources) for i in range(len(src))]
    syn = [it for it in items if sources[it[0]].synthetic]
    real = [it for it in items if not sources[it[0]].synthetic]
    if mix is None or not syn or not real:
        order = rng.permutation(len(items))
        return [items[k] for k in order]
    n_syn = int(round(mix * len(items)))
    picks = [syn[k] for k in rng.choice(len(syn), n_syn, replace=n_syn > len(syn))]
    n_real = len(items) - n_syn
    picks += [real[k] for k in rng.choice(len(real), n_real, replace=n_real > len(real))]
    return [picks[k] for k in rng.permutation(len(picks))]


def _augment(arrays, patch_size, hflip, rng):
    h, w = arrays[0].shape[:2]
    if patch_size is not None and patch_size < min(h, w):
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        arrays = [a[top:top + patch_size, left:left + patch_size] for a in arrays]
    if hflip and rng.random() < 0.5:
        arrays = [a[:, ::-1] for a in arrays]
    return arrays


def collate(triples, patch_size=None, hflip=False, rng=None):
    """Stack triples into ``(I, T, R_tilde, alpha)`` tensors, cropping to a common size."""
    rng = rng if rng is not None else np.random.default_rng(0)
    per = [_augment([t.input.pixels, t.transmission.pixels, t.residual.pixels], patch_size, hflip, rng)
           for t in triples]
    h = min(p[0].shape[0] for p in per)
    w = min(p[0].shape[1] for p in per)

    def stack(k):
        arr = np.stack([np.ascontiguousarray(p[k][:h, :w], dtype=np.float32) for p in per])
        return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy())

    alpha = torch.tensor([t.alpha for t in triples], dtype=torch.float32)
    return stack(0), stack(1), stack(2), alpha


# ---------------------------------------------------------------------------
# optimization

class Trainer:
    """Owns the generator pair, the discriminator and their optimizers."""

    def __init__(self, config: TrainConfig, extractor: FeatureExtractor | None = None):
        self.config = config
        self.resolved = resolve_ablation(config)
        torch.manual_seed(config.seed)
        build, self.weights = apply_ablation(config)
        self.model = build()
        self.D: Discriminator | None = build_discriminator() if self.weights.lambda_adv > 0 else None
        if extractor is None and self.weights.lambda_mp > 0:
            extractor = FeatureExtractor(pretrained=config.pretrained_features, seed=config.seed)
        self.extractor = extractor
        betas = (0.9, 0.999)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate, betas=betas, eps=1e-8)
        self.opt_d = (torch.optim.Adam(self.D.parameters(), lr=config.learning_rate, betas=betas, eps=1e-8)
                      if self.D is not None else None)
        self.step_count = 0

    def _condition(self, I, T):
        return T if self.config.condition == "transmission" else I

    def step(self, I, T, R_tilde, alpha) -> tuple[LossReport, float | None]:
        self.model.train()
        if self.D is not None:
            self.D.requires_grad_(False)
        trace = self.model(I)
        report = compute_losses(trace, I, T, R_tilde, alpha, self.weights, extractor=self.extractor,
                                D=self.D, condition=self._condition(I, T))
        self.opt_g.zero_grad(set_to_none=True)
        report.total.backward()
        self.opt_g.step()

        d_value = None
        if self.D is not None:
            self.D.requires_grad_(True)
            d_loss = adversarial_loss_d(self.D, self._condition(I, T), T, trace.final)
            self.opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            self.opt_d.step()
            d_value = float(d_loss.detach())
        self.step_count += 1
        return _detach(report), d_value

    def state_dict(self) -> dict:
        state = {"model": self.model.state_dict(), "opt_g": self.opt_g.state_dict(), "step": self.step_count}
        if self.D is not None:
            state["D"] = self.D.state_dict()
            state["opt_d"] = self.opt_d.state_dict()
        return state


def _detach(report: LossReport) -> LossReport:
    return LossReport(*(getattr(report, k).detach() for k in ("residual", "mp", "pixel", "adv", "total")))


# ---------------------------------------------------------------------------
# checkpoints

def _atomic_write(path: Path, write):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(trainer: Trainer, path, epoch: int | None = None) -> Path:
    """Write the weight blob and its JSON sidecar (same stem, ``.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, lambda tmp: torch.save(trainer.state_dict(), tmp))
    meta = {
        "subnet": trainer.resolved.subnet.to_dict(),
        "n_steps": trainer.resolved.n_steps,
        "use_reflection_net": trainer.model.use_reflection_net,
        "step": trainer.step_count,
        "epoch": epoch,
        "loss_weights": trainer.weights.to_dict(),
        "config": trainer.config.to_dict(),
    }
    sidecar = path.with_suffix(".json")
    _atomic_write(sidecar, lambda tmp: Path(tmp).write_text(json.dumps(meta, indent=2)))
    return path


def load_model(path) -> IBCLN:
    """Rebuild the generator pair from a checkpoint, in eval mode."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    model = IBCLN(SubnetConfig(**meta["subnet"]), meta["n_steps"], meta["use_reflection_net"])
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state["model"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# driver

def _load_batch(sources, items):
    good = []
    for s, i in items:
        try:
            t = sources[s].load(i)
        except (OSError, ValueError) as exc:
            log.warning("skipping triple %d of %s: %s", i, getattr(sources[s], "root", "memory"), exc)
            continue
        if not _triple_ok(t):
            log.warning("skipping corrupt triple %d of %s", i, getattr(sources[s], "root", "memory"))
            continue
        good.append(t)
    return good


def fit(trainer: Trainer, sources, epochs: int | None = None, log_path=None, checkpoint_dir=None,
        on_step=None) -> list[Path]:
    """Run the epoch loop over ``sources``; returns the checkpoints written."""
    cfg = trainer.config
    rng = np.random.default_rng(cfg.seed)
    checkpoints = []
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(1, (epochs or cfg.epochs) + 1):
            order = epoch_order(sources, cfg.mix, rng)
            used = 0
            for start in range(0, len(order), cfg.batch_size):
                triples = _load_batch(sources, order[start:start + cfg.batch_size])
                if not triples:
                    continue
                used += len(triples)
                batch = collate(triples, cfg.patch_size, cfg.hflip, rng)
                report, d_loss = trainer.step(*batch)
                vals = report.as_floats()
                if writer:
                    writer.writerow([trainer.step_count] + [repr(vals[k]) for k in LOG_COLUMNS[1:]])
                if on_step is not None:
                    on_step(trainer, report, d_loss)
            if used == 0:
                raise RuntimeError(f"epoch {epoch}: every triple was corrupt or unreadable")
            if log_fh:
                log_fh.flush()
            if checkpoint_dir is not None:
                checkpoints.append(save_checkpoint(trainer, Path(checkpoint_dir) / f"epoch_{epoch:03d}.pt", epoch))
            log.info("epoch %d done, step %d", epoch, trainer.step_count)
    finally:
        if log_fh:
            log_fh.close()
    return checkpoints


def train(config: TrainConfig, dataset_manifests, out_dir) -> Path:
    """Train on the given dataset directories (or manifest paths); returns the last checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = []
    for m in dataset_manifests:
        m = Path(m)
        sources.append(TripleSource(m.parent if m.name == "manifest.csv" else m))
    if sum(len(s) for s in sources) == 0:
        raise ValueError("no training triples found")
    trainer = Trainer(config)
    ckpts = fit(trainer, sources, log_path=out / "train_log.csv", checkpoint_dir=out / "checkpoints")
    return ckpts[-1]


def triples_from_arrays(inputs, transmissions, alphas=None) -> list[TrainTriple]:
    """Build triples from gamma-encoded ``H x W x 3`` arrays; alphas are estimated when absent."""
    out = []
    for k, (i, t) in enumerate(zip(inputs, transmissions)):
        I = gamma_decode(Image(np.asarray(i), ColorSpace.GAMMA))
        T = gamma_decode(Image(np.asarray(t), ColorSpace.GAMMA))
        if alphas is None:
            out.append(real_triple(I, T))
        else:
            out.append(TrainTriple(I, T, residual_reflection(I, T, float(alphas[k])), float(alphas[k])))
    return out
