"""Command-line interface.

    corrdiff gen-data|train|sample|evaluate|counterfactual|plot \
        [--preset NAME] [--config FILE] [--set section.key=value]... --out DIR

Every command writes its artifacts, ``config.yaml`` (the effective config)
and ``manifest.txt`` into ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, RunConfig, load_config
from .diffusion import GuidanceParams, counterfactual, make_schedule, sample
from .metrics import evaluate_suite, format_report_table, write_report_csv
from .network import NetworkConfig, NoisePredictor
from .pca import PcaModel, explained_variance, pca_fit, pca_sample
from .plotting import diverging_colors, index_colormap, projection_svg
from .pointset import (
    PointSetFormatError,
    ShapeDataset,
    SyntheticFamilyConfig,
    center_scale,
    gen_synthetic,
    group_difference,
    knn_mask,
    load_dataset,
    load_pointset,
    mean_shape,
    outward_normals,
    save_dataset,
)
from .training import (
    Classifier,
    ClassifierConfig,
    DiffusionTrainer,
    TrainConfig,
    classification_report,
    train_classifier,
    write_classification_csv,
    write_loss_csv,
)

log = logging.getLogger("corrdiff")

COMMANDS = ("gen-data", "train", "sample", "evaluate", "counterfactual", "plot")


class CommandError(RuntimeError):
    pass


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, entries: dict):
    lines = [f"command: {command}", f"version: {__version__}"]
    lines += [f"{k}: {v}" for k, v in entries.items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(path: str, what: str) -> Path:
    if not path:
        raise CommandError(f"{what} is not set")
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} {p} does not exist")
    return p


def synthetic_config(cfg: RunConfig, test: bool = False) -> SyntheticFamilyConfig:
    d = cfg.data
    return SyntheticFamilyConfig(
        n_points=d.n_points,
        n_subjects=d.test_subjects if test else d.n_subjects,
        radii=tuple(d.radii),
        radius_jitter=d.radius_jitter,
        atrophy_indices=None if d.atrophy_indices is None else tuple(d.atrophy_indices),
        atrophy_depth=d.atrophy_depth,
        depth_jitter=d.depth_jitter,
        surface_noise=d.surface_noise,
        seed=d.test_seed if test else d.seed,
    )


def schedule_from(d: dict):
    return make_schedule(d["schedule"], int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def network_config(cfg: RunConfig, n_points: int) -> NetworkConfig:
    n = cfg.network
    base = NetworkConfig(
        n_points=n_points,
        widths=tuple(n.widths),
        k=n.k,
        use_correspondence_embeddings=n.use_correspondence_embeddings,
        mask_all_true=n.mask_all_true,
        n_classes=2 if n.conditional else 0,
        activation=n.activation,
        time_dim=n.time_dim,
        n_steps=cfg.diffusion.T,
    )
    return train_config(cfg).network_config(base)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs, t.batch_size, t.lr, t.beta1, t.beta2, t.eps, t.ema_decay, t.seed,
                       t.disable_correspondence, t.mask_all_true)


def classifier_config(cfg: RunConfig) -> ClassifierConfig:
    c = cfg.classifier
    return ClassifierConfig(tuple(c.widths), 2, c.noise_aware, c.time_dim, cfg.diffusion.T, c.activation,
                            c.epochs, c.batch_size, c.lr, c.seed)


# ---------------------------------------------------------------------------
# loading trained artifacts


def load_model_dir(path: Path, use_ema: bool = True):
    """Returns ``(kind, model, info)`` for a ``train`` output directory."""
    meta_path = path / "model.json"
    if not meta_path.exists():
        raise CommandError(f"{path} holds no model.json (not a train output directory)")
    info = json.loads(meta_path.read_text(encoding="utf-8"))
    kind = info["kind"]
    if kind == "diffusion":
        from .autodiff import load_checkpoint

        tensors = load_checkpoint(path / info["checkpoint"])
        net = NetworkConfig.from_dict(info["network"])
        model = NoisePredictor.from_state(net, tensors)
        if use_ema:
            missing = [k for k in model.params if f"ema.{k}" not in tensors]
            if missing:
                raise CommandError(f"checkpoint lacks EMA tensor {'ema.' + missing[0]!r}")
            model.params = {k: tensors[f"ema.{k}"].copy() for k in model.params}
        return kind, model, info
    if kind == "pca":
        return kind, PcaModel.load(path / info["checkpoint"]), info
    if kind == "classifier":
        c = dict(info["classifier"])
        c["widths"] = tuple(c["widths"])
        return kind, Classifier.load(ClassifierConfig(**c), path / info["checkpoint"]), info
    raise CommandError(f"{meta_path}: unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out: Path):
    train_raw = gen_synthetic(synthetic_config(cfg))
    train = center_scale(train_raw)
    test_raw = gen_synthetic(synthetic_config(cfg, test=True))
    nz = train.normalization
    test = dataclasses.replace(test_raw, points=nz.apply(test_raw.points), normalization=nz)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    atrophy = synthetic_config(cfg).resolved_atrophy_indices()
    (out / "atrophy_indices.txt").write_text(" ".join(map(str, atrophy)) + "\n", encoding="ascii")
    write_manifest(out, "gen-data", {
        "seed": cfg.data.seed,
        "test_seed": cfg.data.test_seed,
        "n_points": cfg.data.n_points,
        "train_shapes": len(train),
        "test_shapes": len(test),
        "normalization_shift": " ".join(repr(v) for v in nz.shift),
        "normalization_scale": repr(nz.scale),
        "atrophy_indices": " ".join(map(str, atrophy)),
    })


def cmd_train(cfg: RunConfig, out: Path):
    data_path = _require(cfg.train.data, "train.data")
    ds = load_dataset(data_path)
    kind = cfg.train.kind
    entries = {"kind": kind, "data": data_path, "shapes": len(ds), "n_points": ds.n_points}
    if kind == "diffusion":
        net = network_config(cfg, ds.n_points)
        if not net.n_classes:
            ds = dataclasses.replace(ds, labels=np.full(len(ds), -1))
        mask = None if net.mask_all_true else knn_mask(mean_shape(ds), net.k)
        model = NoisePredictor(net, mask, seed=cfg.network.seed)
        sched = schedule_from(dataclasses.asdict(cfg.diffusion))
        tcfg = train_config(cfg)
        trainer = DiffusionTrainer(model, ds, sched, tcfg)
        ckpt = out / "model.ckpt"
        every = cfg.train.checkpoint_every_epochs * trainer.steps_per_epoch
        t0 = time.time()
        try:
            trainer.run(checkpoint=ckpt, checkpoint_every=every, log_every=trainer.steps_per_epoch * 10)
        finally:
            write_loss_csv(trainer.losses, out / "loss.csv")
        trainer.save(ckpt)
        info = {
            "kind": "diffusion",
            "checkpoint": "model.ckpt",
            "network": net.to_dict(),
            "diffusion": dataclasses.asdict(cfg.diffusion),
            "normalization": dataclasses.asdict(ds.normalization),
        }
        entries.update({
            "seed": tcfg.seed,
            "schedule": sched.kind,
            "T": sched.T,
            "beta_start": cfg.diffusion.beta_start,
            "beta_end": cfg.diffusion.beta_end,
            "steps": trainer.step,
            "initial_loss": trainer.losses[0],
            "final_loss_mean50": float(np.mean(trainer.losses[-50:])),
            "parameters": model.n_parameters,
            "seconds": round(time.time() - t0, 1),
            "checkpoint_sha256": sha256(ckpt),
        })
    elif kind == "pca":
        model = pca_fit(ds, cfg.train.pca_components)
        model.save(out / "pca.ckpt")
        _, cum = explained_variance(model, ds)
        info = {"kind": "pca", "checkpoint": "pca.ckpt", "n_points": ds.n_points}
        entries.update({"components": model.n_components, "explained_variance": float(cum[-1]),
                        "checkpoint_sha256": sha256(out / "pca.ckpt")})
    elif kind == "classifier":
        ccfg = classifier_config(cfg)
        sched = schedule_from(dataclasses.asdict(cfg.diffusion)) if ccfg.noise_aware else None
        clf = train_classifier(ds, ccfg, sched)
        clf.save(out / "classifier.ckpt")
        c = dataclasses.asdict(clf.config)
        c["widths"] = list(c["widths"])
        info = {"kind": "classifier", "checkpoint": "classifier.ckpt", "classifier": c,
                "diffusion": dataclasses.asdict(cfg.diffusion)}
        if not ccfg.noise_aware:
            entries["train_accuracy"] = float(np.mean(clf.predict(ds.points) == ds.labels))
        entries["checkpoint_sha256"] = sha256(out / "classifier.ckpt")
    else:
        raise CommandError(f"train.kind must be diffusion, pca or classifier, got {kind!r}")
    (out / "model.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "train", entries)


def _sample_labels(choice: str, count: int, conditional: bool):
    if not conditional:
        if choice not in ("none", "balanced", ""):
            raise CommandError("sample.labels given for an unconditional model")
        return None
    if choice == "balanced":
        return np.arange(count) * 2 // max(count, 1)
    if choice in ("0", "1"):
        return np.full(count, int(choice))
    raise CommandError(f"sample.labels must be balanced, 0 or 1 for a conditional model, got {choice!r}")


def cmd_sample(cfg: RunConfig, out: Path):
    s = cfg.sample
    model_dir = _require(s.model, "sample.model")
    kind, model, info = load_model_dir(model_dir, s.use_ema)
    entries = {"model": model_dir, "kind": kind, "seed": s.seed, "count": s.count}
    if kind == "diffusion":
        sched = schedule_from(info["diffusion"])
        labels = _sample_labels(s.labels, s.count, model.config.n_classes > 0)
        gen = sample(model, sched, s.count, seed=s.seed, labels=labels, batch_size=s.batch_size)
        entries.update({
            "schedule": sched.kind, "T": sched.T,
            "beta_start": info["diffusion"]["beta_start"], "beta_end": info["diffusion"]["beta_end"],
            "checkpoint_sha256": sha256(model_dir / info["checkpoint"]),
        })
    elif kind == "pca":
        gen = pca_sample(model, np.random.default_rng(s.seed), s.count)
        entries["checkpoint_sha256"] = sha256(model_dir / info["checkpoint"])
    else:
        raise CommandError(f"cannot sample from a {kind} model")
    save_dataset(gen, out / "samples")
    write_manifest(out, "sample", entries)


def _load_set(path: Path, what: str) -> ShapeDataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise CommandError(f"{what}: {exc}") from exc


def cmd_evaluate(cfg: RunConfig, out: Path):
    e = cfg.evaluate
    real_path = _require(e.real, "evaluate.real")
    if not e.gen:
        raise CommandError("evaluate.gen lists no generated sets")
    real = _load_set(real_path, "evaluate.real")
    gens = {}
    for name, p in e.gen.items():
        gens[name] = _load_set(_require(p, f"evaluate.gen.{name}"), f"evaluate.gen.{name}")
        if gens[name].n_points != real.n_points:
            raise CommandError(
                f"N mismatch: real set has {real.n_points} points, generated set {name!r} has {gens[name].n_points}"
            )
    from .metrics import pairwise

    kinds = tuple(e.kinds)
    real_real = {k: pairwise(real.points, real.points, k) for k in kinds}
    reports = {name: evaluate_suite(real.points, g.points, e.k, kinds, real_real) for name, g in gens.items()}
    if e.real_reference:
        # interleaved halves keep the class mix of a class-sorted set
        reports["real (disjoint halves)"] = evaluate_suite(real.points[0::2], real.points[1::2], e.k, kinds)
    write_report_csv(reports, out / "report.csv")
    (out / "report.txt").write_text(format_report_table(reports), encoding="utf-8")
    entries = {"real": real_path, "k": e.k, **{f"gen.{n}": p for n, p in e.gen.items()}}
    if e.classifier:
        kind, clf, _ = load_model_dir(_require(e.classifier, "evaluate.classifier"))
        if kind != "classifier" or clf.noise_aware:
            raise CommandError("evaluate.classifier must be a clean (not noise-aware) classifier")
        cls_reports = {}
        for name, ds in {"real": real, **gens}.items():
            if np.all(ds.labels >= 0):
                cls_reports[name] = classification_report(ds.labels, clf.predict(ds.points))
        if cls_reports:
            write_classification_csv(cls_reports, out / "confusion.csv", out / "classification.csv")
    write_manifest(out, "evaluate", entries)


def cmd_counterfactual(cfg: RunConfig, out: Path):
    c = cfg.counterfactual
    model_dir = _require(c.model, "counterfactual.model")
    kind, model, info = load_model_dir(model_dir, c.use_ema)
    if kind != "diffusion":
        raise CommandError("counterfactual.model must be a diffusion model")
    ckind, clf, _ = load_model_dir(_require(c.classifier, "counterfactual.classifier"))
    if ckind != "classifier":
        raise CommandError("counterfactual.classifier must be a classifier")
    src = _load_set(_require(c.input, "counterfactual.input"), "counterfactual.input")
    if src.n_points != model.config.n_points:
        raise CommandError(f"N mismatch: model expects {model.config.n_points} points, input has {src.n_points}")
    if np.any(src.labels >= 0):
        src = src.with_class(c.source_label)
    if c.max_inputs:
        src = src.subset(np.arange(min(c.max_inputs, len(src))))
    if len(src) == 0:
        raise CommandError(f"no input shapes with label {c.source_label}")
    sched = schedule_from(info["diffusion"])
    g = GuidanceParams(c.classifier_scale, c.similarity_scale, c.t_start)
    result = counterfactual(model, clf, src.points, c.target_label, g, sched, np.random.default_rng(c.seed))
    cf = ShapeDataset(result, np.full(len(src), c.target_label), [f"cf_{sid}" for sid in src.subject_ids],
                      src.normalization)
    save_dataset(cf, out / "counterfactuals")
    disp = result - src.points
    signed = np.stack([np.sum(d * outward_normals(x), axis=1) for d, x in zip(disp, src.points)])
    rows = ["index,mean_signed,mean_magnitude"]
    for i in range(src.n_points):
        rows.append(f"{i},{float(signed[:, i].mean())!r},{float(np.linalg.norm(disp[:, i], axis=1).mean())!r}")
    (out / "displacement.csv").write_text("\n".join(rows) + "\n", encoding="ascii")
    write_manifest(out, "counterfactual", {
        "model": model_dir, "classifier": c.classifier, "inputs": len(src), "seed": c.seed,
        "classifier_scale": c.classifier_scale, "similarity_scale": c.similarity_scale,
        "t_start": g.start(sched.T), "target_label": c.target_label,
        "checkpoint_sha256": sha256(model_dir / info["checkpoint"]),
    })


def _collect(paths: list[str]) -> list[tuple[str, np.ndarray]]:
    items = []
    for p in paths:
        path = _require(p, "plot input")
        if path.is_dir():
            ds = load_dataset(path)
            items += [(f"{path.name}_{i:04d}", ds.points[i]) for i in range(len(ds))]
        else:
            items.append((path.stem, load_pointset(path).points))
    return items


def cmd_plot(cfg: RunConfig, out: Path):
    pc = cfg.plot
    written = []
    if pc.reference:
        ref = _load_set(_require(pc.reference, "plot.reference"), "plot.reference")
        mean = mean_shape(ref).points
        colors = index_colormap(mean)
        extent = float(np.max(np.abs(ref.points))) * 1.05
        (out / "reference_mean.svg").write_text(projection_svg(mean, colors, "mean shape", pc.size, extent))
        written.append("reference_mean.svg")
        for name, pts in _collect(pc.inputs)[: pc.max_shapes or None]:
            if pts.shape[0] != mean.shape[0]:
                raise CommandError(f"N mismatch: reference has {mean.shape[0]} points, {name} has {pts.shape[0]}")
            (out / f"{name}.svg").write_text(projection_svg(pts, colors, name, pc.size, extent))
            written.append(f"{name}.svg")
    elif pc.inputs:
        raise CommandError("plot.reference is required to color shapes by index")
    if pc.difference:
        if len(pc.difference) != 2:
            raise CommandError("plot.difference must name two datasets: [from, to]")
        a = _load_set(_require(pc.difference[0], "plot.difference[0]"), "plot.difference[0]")
        b = _load_set(_require(pc.difference[1], "plot.difference[1]"), "plot.difference[1]")
        if a.n_points != b.n_points:
            raise CommandError(f"N mismatch: {a.n_points} vs {b.n_points} points")
        diff = group_difference(a, b)
        ref = mean_shape(a).points
        (out / "difference.svg").write_text(
            projection_svg(ref, diverging_colors(diff.signed), "group difference", pc.size)
        )
        rows = ["index,signed,dx,dy,dz"] + [
            ",".join([str(i), *(repr(float(v)) for v in (diff.signed[i], *diff.field[i]))])
            for i in range(len(ref))
        ]
        (out / "difference.csv").write_text("\n".join(rows) + "\n", encoding="ascii")
        written.append("difference.svg")
    if not written:
        raise CommandError("nothing to plot: set plot.reference/plot.inputs or plot.difference")
    write_manifest(out, "plot", {"files": " ".join(written)})


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "counterfactual": cmd_counterfactual,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrdiff", description="Correspondence-preserving shape diffusion.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="named preset applied before --config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, cfg: RunConfig, out: str | Path) -> Path:
    """Run a command with an already-built config (used by the tests)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    HANDLERS[command](cfg, out)
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.preset)
        run(args.command, cfg, args.out)
    except (CommandError, ConfigError, PointSetFormatError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"corrdiff {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
