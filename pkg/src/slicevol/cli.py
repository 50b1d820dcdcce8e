"""``slicevol`` command-line entry point.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error. Every
subcommand writes ``run.manifest`` next to its output (inside ``--out`` when
that is a directory) recording the argv, resolved settings, seeds and FNV-1a
digests of inputs and outputs.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .codec import (
    TrainConfig, encode_volume, load_codec, reconstruction_mse, save_codec, train_linear_codec, train_vae_codec,
)
from .config import (
    PIPELINE_SCHEMA, REG_SCHEMA, TRAIN_SCHEMA, describe, format_value, load_config, parse_dims,
)
from .errors import SlicevolError, ValidationError
from .latent import fit_pipeline, load_latent_model, save_latent_model, synthesize_volume
from .metrics import MmdConfig, MsSsimConfig, dice, mmd2_batch, ms_ssim_diversity, stderr
from .phantom import PhantomParams, generate_cohort, philox
from .ras import (
    format_report, load_segmenter, parse_pairing, ras_score, save_segmenter, segment, train_segmenter,
)
from .registration import RegConfig, load_transform, register_affine, save_transform, warp_labels, warp_volume
from .volume import (
    extract_slices, load_labels, load_volume, percentile_normalize, resample_labels, resample_volume, save_labels,
    save_volume,
)

MANIFEST_NAME = "run.manifest"
DEFAULT_CLASS_MEANS = {2: (1.0,), 3: (0.5, 1.0), 4: (0.33, 0.66, 1.0), 5: (0.25, 0.5, 0.75, 1.0)}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a digest."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def file_digest(path) -> str:
    return f"{fnv1a64(Path(path).read_bytes()):016x}"


class Run:
    """Collects provenance for one subcommand and writes its manifest."""

    def __init__(self, subcommand: str, argv, out: Path, out_is_dir: bool):
        self.subcommand = subcommand
        self.argv = list(argv)
        self.out = out
        self.manifest_dir = out if out_is_dir else out.parent
        self.settings: dict = {}
        self.seeds: dict = {}
        self.inputs: list = []
        self.outputs: list = []

    def input(self, path):
        self.inputs.append(Path(path))
        return path

    def output(self, path):
        self.outputs.append(Path(path))
        return path

    def write_manifest(self):
        lines = [
            f"tool = slicevol {__version__}",
            f"subcommand = {self.subcommand}",
            f"argv = {json.dumps(self.argv)}",
            f"timestamp = {datetime.datetime.now(datetime.timezone.utc).isoformat()}",
        ]
        lines += [f"config.{k} = {format_value(v)}" for k, v in self.settings.items()]
        lines += [f"seed.{k} = {v}" for k, v in self.seeds.items()]
        lines += [f"input {p} fnv1a64={file_digest(p)}" for p in self.inputs]
        lines += [f"output {p} fnv1a64={file_digest(p)}" for p in self.outputs]
        self.manifest_dir.mkdir(parents=True, exist_ok=True)
        (self.manifest_dir / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def _volume_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    files = sorted(d.glob("*.svol"))
    if not files:
        raise ValidationError(f"{d}: no .svol volumes found")
    return files


def _load_volumes(directory, run: Run | None = None):
    files = _volume_files(directory)
    if run:
        for f in files:
            run.input(f)
    return files, [load_volume(f) for f in files]


def _labels_for(volume_file: Path, label_dir=None, run: Run | None = None):
    d = Path(label_dir) if label_dir else volume_file.parent
    path = d / (volume_file.stem + ".slab")
    if not path.exists():
        return None
    if run:
        run.input(path)
    return load_labels(path)


def _reg_config(path, run: Run) -> RegConfig:
    values = load_config(run.input(path), REG_SCHEMA) if path else {k: d for k, (_, d, _) in REG_SCHEMA.items()}
    run.settings.update({f"reg.{k}": v for k, v in values.items()})
    return RegConfig(**values)


def _phantom_params(dims, classes, seed, noise, bias, deform) -> PhantomParams:
    if classes not in DEFAULT_CLASS_MEANS:
        raise ValidationError(f"classes must be in {sorted(DEFAULT_CLASS_MEANS)}, got {classes}")
    return PhantomParams(
        dims=tuple(dims), num_foreground_classes=classes - 1, class_mean_intensities=DEFAULT_CLASS_MEANS[classes],
        noise_sigma=noise, bias_amplitude=bias, deform_amplitude=deform, seed=seed,
    )


# -------------------------------------------------------------- subcommands


def cmd_phantom(args, run: Run):
    params = _phantom_params(args.dims, args.classes, args.seed, args.noise, args.bias, args.deform)
    run.settings.update(dims=tuple(args.dims), count=args.count, classes=args.classes, noise_sigma=args.noise,
                        bias_amplitude=args.bias, deform_amplitude=args.deform)
    run.seeds["phantom"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(params, args.count, threads=args.threads)
    manifest = [f"dims = {format_value(tuple(args.dims))}", f"count = {args.count}", f"seed = {args.seed}",
                f"classes = {args.classes}", f"class_means = {format_value(params.class_mean_intensities)}",
                f"noise_sigma = {args.noise!r}", f"bias_amplitude = {args.bias!r}",
                f"deform_amplitude = {args.deform!r}"]
    for i, (v, m) in enumerate(cohort):
        save_volume(v, run.output(out / f"phantom_{i:04d}.svol"))
        save_labels(m, run.output(out / f"phantom_{i:04d}.slab"))
        manifest.append(f"phantom_{i:04d} seed = {args.seed + i}")
    (out / "phantoms.txt").write_text("\n".join(manifest) + "\n")
    run.output(out / "phantoms.txt")
    print(f"wrote {args.count} phantoms to {out}")


def cmd_preprocess(args, run: Run):
    files, vols = _load_volumes(args.input, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.settings.update(lo_pct=args.lo, hi_pct=args.hi, dims=tuple(args.dims) if args.dims else "unchanged")
    for f, v in zip(files, vols):
        nv = percentile_normalize(v, args.lo, args.hi)
        if args.dims and tuple(args.dims) != v.dims:
            nv = resample_volume(nv, args.dims)
        save_volume(nv, run.output(out / f.name))
        labels = _labels_for(f, None, run)
        if labels is not None:
            if labels.dims != nv.dims:
                labels = resample_labels(labels, nv.dims)
            save_labels(labels, run.output(out / (f.stem + ".slab")))
    print(f"preprocessed {len(files)} volumes into {out}")


def _train_config(path, run: Run) -> TrainConfig:
    values = load_config(run.input(path), TRAIN_SCHEMA) if path else {k: d for k, (_, d, _) in TRAIN_SCHEMA.items()}
    run.settings.update({f"train.{k}": v for k, v in values.items()})
    run.seeds["train"] = values["seed"]
    return TrainConfig(**values)


def cmd_train_codec(args, run: Run):
    _, vols = _load_volumes(args.slices, run)
    slices = [s for v in vols for s in extract_slices(v, args.axis)]
    run.settings.update(kind=args.kind, latent=args.latent, axis=args.axis, slices=len(slices))
    if args.kind == "linear":
        model = train_linear_codec(slices, args.latent)
        print(f"linear codec L={args.latent} training mse={reconstruction_mse(model, slices):.6g}")
    else:
        model, report = train_vae_codec(slices, args.latent, _train_config(args.config, run))
        run.settings["selected_lr"] = report.selected_lr
        print(f"vae codec L={args.latent} lr={report.selected_lr} val_loss={report.selected.val_loss[-1]:.6g}")
    save_codec(model, run.output(Path(args.out)))


def cmd_encode(args, run: Run):
    codec = load_codec(run.input(args.codec))
    files, vols = _load_volumes(args.volumes, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = philox(args.seed)
    run.settings.update(axis=args.axis, mode=args.mode)
    run.seeds["encode"] = args.seed
    for f, v in zip(files, vols):
        seq = encode_volume(codec, v, args.axis, args.mode, rng)
        np.save(run.output(out / (f.stem + ".npy")), seq)
    print(f"encoded {len(files)} volumes into {out}")


def cmd_fit_latent(args, run: Run):
    codec = load_codec(run.input(args.codec))
    _, vols = _load_volumes(args.volumes, run)
    run.settings.update(axis=args.axis, mode=args.mode, rank_tol=args.rank_tol)
    run.seeds["encode"] = args.seed
    model = fit_pipeline(vols, codec, args.axis, args.mode, philox(args.seed), args.rank_tol)
    save_latent_model(model, run.output(Path(args.out)))
    print(f"fitted latent model N={model.num_train} T={model.num_slices} L={model.latent_dim}")


def cmd_sample(args, run: Run):
    model = load_latent_model(run.input(args.latent))
    codec = load_codec(run.input(args.codec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.settings.update(count=args.count, axis=args.axis)
    run.seeds["sample"] = args.seed
    rng = philox(args.seed)
    for i in range(args.count):
        v = synthesize_volume(model, codec, rng, args.axis)
        save_volume(v, run.output(out / f"sample_{i:04d}.svol"))
    print(f"wrote {args.count} samples to {out}")


def cmd_metrics(args, run: Run):
    if args.metric == "mmd":
        _, gen = _load_volumes(args.generated, run)
        _, real = _load_volumes(args.real, run)
        cfg = MmdConfig(args.kernel, "median", args.tests, args.batch, args.seed)
        mean, values = mmd2_batch(gen, real, cfg)
        name = "mmd"
    elif args.metric == "msssim":
        _, samples = _load_volumes(args.generated, run)
        cfg = MsSsimConfig(num_pairs=args.pairs, seed=args.seed)
        mean, values = ms_ssim_diversity(samples, cfg)
        name = "msssim"
    else:
        files_a = _volume_files(args.generated)
        files_b = _volume_files(args.real)
        if len(files_a) != len(files_b):
            raise ValidationError("dice needs equally many label maps in both directories")
        values = []
        for fa, fb in zip(files_a, files_b):
            la, lb = _labels_for(fa, None, run), _labels_for(fb, None, run)
            if la is None or lb is None:
                raise ValidationError(f"missing .slab for {fa.name} or {fb.name}")
            values.append(dice(la, lb)[1])
        values = np.array(values)
        mean = float(values.mean())
        name = "dice"
    run.settings.update(metric=name)
    run.seeds["metric"] = args.seed
    lines = [f"test={i} value={float(v)!r}" for i, v in enumerate(values)]
    lines.append(f"metric={name} mean={mean!r} stderr={stderr(values)!r}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
        run.output(args.out)


def cmd_segment_train(args, run: Run):
    files, vols = _load_volumes(args.volumes, run)
    pairs = []
    for f, v in zip(files, vols):
        labels = _labels_for(f, args.labels, run)
        if labels is None:
            raise ValidationError(f"{f}: no matching .slab label map")
        pairs.append((v, labels))
    run.settings.update(smoothing=args.smoothing, volumes=len(pairs))
    seg = train_segmenter(pairs, None, args.smoothing)
    save_segmenter(seg, run.output(Path(args.out)))
    print("class means: " + " ".join(f"{m:.4f}" for m in seg.means))


def cmd_segment(args, run: Run):
    seg = load_segmenter(run.input(args.segmenter))
    files, vols = _load_volumes(args.input, run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, v in zip(files, vols):
        save_labels(segment(seg, v), run.output(out / (f.stem + ".slab")))
    print(f"segmented {len(files)} volumes into {out}")


def cmd_register(args, run: Run):
    moving = load_volume(run.input(args.moving))
    fixed = load_volume(run.input(args.fixed))
    result = register_affine(moving, fixed, _reg_config(args.reg_config, run))
    save_transform(result.transform, run.output(Path(args.out)))
    print(f"objective={result.objective!r}")


def cmd_warp(args, run: Run):
    t = load_transform(run.input(args.transform))
    src = Path(run.input(args.input))
    out_dims = None
    if args.like:
        out_dims = load_volume(run.input(args.like)).dims
    elif args.dims:
        out_dims = tuple(args.dims)
    if src.suffix == ".slab":
        save_labels(warp_labels(load_labels(src), t, out_dims), run.output(Path(args.out)))
    else:
        save_volume(warp_volume(load_volume(src), t, out_dims), run.output(Path(args.out)))


def cmd_ras(args, run: Run):
    gen_files, gen = _load_volumes(args.generated, run)
    real_files, real_vols = _load_volumes(args.real, run)
    real = [(v, _labels_for(f, args.labels, run)) for f, v in zip(real_files, real_vols)]
    seg = load_segmenter(run.input(args.segmenter))
    reg = _reg_config(args.reg_config, run)
    pairing, k = parse_pairing(args.pairs)
    run.settings.update(pairs=args.pairs, reference=args.reference)
    run.seeds["pairs"] = args.seed
    report = ras_score(gen, real, seg, reg, pairing, k, args.reference, args.seed, args.threads)
    text = format_report(report, [f.name for f in gen_files], [f.name for f in real_files])
    Path(args.out).write_text(text)
    run.output(args.out)
    print(text.splitlines()[-1])


def run_pipeline(cfg: dict, run: Run, threads: int = 1) -> dict:
    """Phantoms -> preprocess -> codec -> latent fit -> samples -> scores."""
    out = Path(cfg["out_dir"])
    stage = "phantom"
    try:
        dims = cfg["dims"]
        params = _phantom_params(dims, cfg["classes"], cfg["seed"], cfg["noise_sigma"], cfg["bias_amplitude"],
                                 cfg["deform_amplitude"])
        train = generate_cohort(params, cfg["count"], threads)
        holdout = generate_cohort(PhantomParams(**{**params.__dict__, "seed": cfg["holdout_seed"]}),
                                  cfg["holdout_count"], threads)
        run.seeds.update(phantom=cfg["seed"], holdout=cfg["holdout_seed"], sample=cfg["sample_seed"])

        stage = "preprocess"

        def prep(items):
            return [(percentile_normalize(v, cfg["lo_pct"], cfg["hi_pct"]), m) for v, m in items]

        train, holdout = prep(train), prep(holdout)
        for name, items in (("real", train), ("holdout", holdout)):
            d = out / name
            d.mkdir(parents=True, exist_ok=True)
            for i, (v, m) in enumerate(items):
                save_volume(v, run.output(d / f"phantom_{i:04d}.svol"))
                save_labels(m, run.output(d / f"phantom_{i:04d}.slab"))

        stage = "train-codec"
        vols = [v for v, _ in train]
        slices = [s for v in vols for s in extract_slices(v, cfg["axis"])]
        if cfg["codec"] == "linear":
            codec = train_linear_codec(slices, cfg["latent_dim"])
        elif cfg["codec"] == "vae":
            tc = TrainConfig(cfg["vae_learning_rates"], cfg["vae_beta_kl"], cfg["vae_epochs"], cfg["vae_batch_size"],
                             cfg["vae_hidden"], seed=cfg["vae_seed"])
            codec, _ = train_vae_codec(slices, cfg["latent_dim"], tc)
        else:
            raise ValidationError(f"codec must be linear or vae, got {cfg['codec']!r}")
        save_codec(codec, run.output(out / "codec.scdc"))

        stage = "fit-latent"
        model = fit_pipeline(vols, codec, cfg["axis"])
        save_latent_model(model, run.output(out / "latent.slgm"))

        stage = "sample"
        rng = philox(cfg["sample_seed"])
        samples = [synthesize_volume(model, codec, rng, cfg["axis"], vols[0].spacing) for _ in range(cfg["num_samples"])]
        (out / "samples").mkdir(parents=True, exist_ok=True)
        for i, v in enumerate(samples):
            save_volume(v, run.output(out / "samples" / f"sample_{i:04d}.svol"))

        stage = "segment-train"
        seg = train_segmenter(train, cfg["classes"], cfg["smoothing"])
        save_segmenter(seg, run.output(out / "segmenter.sseg"))

        stage = "ras"
        reg = RegConfig(cfg["reg_levels"], cfg["reg_iters"], objective=cfg["reg_objective"])
        pairing, k = parse_pairing(cfg["ras_pairs"])
        report = ras_score(samples, holdout, seg, reg, pairing, k, cfg["reference_mode"], cfg["ras_seed"], threads)
        ras_text = format_report(report, [f"sample_{i:04d}.svol" for i in range(len(samples))],
                                 [f"phantom_{i:04d}.svol" for i in range(len(holdout))])
        (out / "ras_report.txt").write_text(ras_text)
        run.output(out / "ras_report.txt")

        stage = "metrics"
        mmd, mmd_values = mmd2_batch(samples, vols, MmdConfig(cfg["mmd_kernel"], "median", cfg["mmd_tests"],
                                                              cfg["mmd_batch"], cfg["mmd_seed"]))
        msssim, msssim_values = ms_ssim_diversity(samples, MsSsimConfig(num_pairs=cfg["msssim_pairs"],
                                                                       seed=cfg["msssim_seed"]))
    except SlicevolError as exc:
        raise type(exc)(f"pipeline stage {stage} failed: {exc}") from exc
    except OSError as exc:
        raise OSError(f"pipeline stage {stage} failed: {exc}") from exc

    summary = {
        "ras": report.ras,
        "ras_failed": report.failed,
        "mmd": mmd,
        "mmd_stderr": stderr(mmd_values),
        "msssim": msssim,
        "msssim_stderr": stderr(msssim_values),
    }
    lines = [f"artifact {Path(p).relative_to(out).as_posix()}" for p in run.outputs]  # relative, so the summary is relocatable
    lines += [f"{k} = {v!r}" for k, v in summary.items()]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    run.output(out / "summary.txt")
    return summary


def cmd_pipeline(args, run: Run):
    cfg = load_config(run.input(args.config), PIPELINE_SCHEMA)
    if args.out:
        cfg["out_dir"] = args.out
    run.settings.update(cfg)
    run.out = run.manifest_dir = Path(cfg["out_dir"])
    summary = run_pipeline(cfg, run, args.threads)
    for k in ("ras", "mmd", "msssim"):
        print(f"{k}={summary[k]!r}")


# ------------------------------------------------------------------- parser


def _dims_arg(text):
    try:
        return parse_dims(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("SLICEVOL_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slicevol", description="Slice-codec volume models, sampling and evaluation.")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help="worker cap (default: $SLICEVOL_THREADS or 1); results do not depend on it")
    p.add_argument("--version", action="version", version=f"slicevol {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate labelled phantom volumes")
    s.add_argument("--dims", type=_dims_arg, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--bias", type=float, default=0.1)
    s.add_argument("--deform", type=float, default=0.08)
    s.add_argument("--out", required=True)

    s = sub.add_parser("preprocess", help="percentile-normalize and optionally resample volumes")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lo", type=float, default=1.0)
    s.add_argument("--hi", type=float, default=99.0)
    s.add_argument("--dims", type=_dims_arg)

    s = sub.add_parser("train-codec", help="train a linear or VAE slice codec",
                       epilog="config keys:\n" + describe(TRAIN_SCHEMA),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--kind", choices=["linear", "vae"], required=True)
    s.add_argument("--latent", type=int, required=True)
    s.add_argument("--config")
    s.add_argument("--slices", required=True, help="directory of .svol volumes to slice")
    s.add_argument("--axis", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("encode", help="encode volumes into latent sequences (.npy)")
    s.add_argument("--codec", required=True)
    s.add_argument("--volumes", required=True)
    s.add_argument("--axis", type=int, default=0)
    s.add_argument("--mode", choices=["mean", "sample"], default="mean")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("fit-latent", help="fit the per-dimension slice Gaussian model")
    s.add_argument("--codec", required=True)
    s.add_argument("--volumes", required=True)
    s.add_argument("--axis", type=int, default=0)
    s.add_argument("--mode", choices=["mean", "sample"], default="mean")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rank-tol", type=float, default=1e-10)
    s.add_argument("--out", required=True)

    s = sub.add_parser("sample", help="synthesize volumes")
    s.add_argument("--latent", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--axis", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("metrics", help="MMD, MS-SSIM diversity or Dice")
    s.add_argument("metric", choices=["mmd", "msssim", "dice"])
    s.add_argument("--generated", required=True, help="generated volumes (or label maps for dice)")
    s.add_argument("--real", help="real volumes (or reference label maps for dice)")
    s.add_argument("--kernel", choices=["dot", "rbf"], default="dot")
    s.add_argument("--tests", type=int, default=100)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--pairs", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    s = sub.add_parser("segment-train", help="fit the intensity segmenter")
    s.add_argument("--volumes", required=True)
    s.add_argument("--labels", help="directory of .slab files (default: next to volumes)")
    s.add_argument("--smoothing", type=int, default=3)
    s.add_argument("--out", required=True)

    s = sub.add_parser("segment", help="segment volumes")
    s.add_argument("--segmenter", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("register", help="affine registration", epilog="reg-config keys:\n" + describe(REG_SCHEMA),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--reg-config")
    s.add_argument("--out", required=True)

    s = sub.add_parser("warp", help="apply a transform to a volume or label map")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--transform", required=True)
    s.add_argument("--like", help="volume whose dims define the output grid")
    s.add_argument("--dims", type=_dims_arg)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ras", help="Realistic Atlas Score")
    s.add_argument("--generated", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--labels", help="ground-truth .slab directory for real volumes")
    s.add_argument("--segmenter", required=True)
    s.add_argument("--reg-config")
    s.add_argument("--pairs", default="all")
    s.add_argument("--reference", choices=["predicted", "ground-truth"], default="predicted")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("pipeline", help="end-to-end run from a config file",
                       epilog="config keys:\n" + describe(PIPELINE_SCHEMA),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="overrides out_dir")
    return p


COMMANDS = {
    "phantom": (cmd_phantom, True),
    "preprocess": (cmd_preprocess, True),
    "train-codec": (cmd_train_codec, False),
    "encode": (cmd_encode, True),
    "fit-latent": (cmd_fit_latent, False),
    "sample": (cmd_sample, True),
    "metrics": (cmd_metrics, False),
    "segment-train": (cmd_segment_train, False),
    "segment": (cmd_segment, True),
    "register": (cmd_register, False),
    "warp": (cmd_warp, False),
    "ras": (cmd_ras, False),
    "pipeline": (cmd_pipeline, True),
}


def run(argv=None) -> int:
    """Execute one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        func, out_is_dir = COMMANDS[args.command]
        out = Path(getattr(args, "out", None) or ".")
        r = Run(args.command, argv, out, out_is_dir)
        if getattr(args, "out", None) and not out_is_dir:
            out.parent.mkdir(parents=True, exist_ok=True)
        func(args, r)
        r.write_manifest()
        return 0
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SlicevolError as exc:
        print(f"slicevol: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"slicevol: I/O error: {exc}", file=sys.stderr)
        return 2


def replay(manifest_path) -> int:
    """Re-run the command recorded in a ``run.manifest``."""
    for line in Path(manifest_path).read_text().splitlines():
        if line.startswith("argv = "):
            return run(json.loads(line[len("argv = "):]))
    raise ValidationError(f"{manifest_path}: no argv line")


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
