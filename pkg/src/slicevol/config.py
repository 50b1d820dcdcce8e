"""Line-based ``key = value`` configuration files.

Each schema entry is ``key -> (parser, default, help)``. Unknown and
duplicate keys are rejected; missing keys take their defaults.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ValidationError


def parse_dims(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in str(text).split(",")]
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValidationError(f"dims must look like D,H,W, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError(f"dims must be three positive integers, got {text!r}")
    return dims


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


TRAIN_SCHEMA = {
    "learning_rates": (parse_floats, (1e-3, 1e-4, 1e-5), "Adam learning-rate sweep"),
    "beta_kl": (float, 0.2, "weight of the KL term"),
    "epochs": (int, 50, "training epochs per learning rate"),
    "batch_size": (int, 32, "slices per minibatch"),
    "hidden": (int, 128, "hidden layer width"),
    "val_fraction": (float, 0.05, "held-out fraction for model selection"),
    "seed": (int, 0, "initialization and shuffling seed"),
}

REG_SCHEMA = {
    "pyramid_levels": (int, 3, "resolution levels (x2 downsampling each)"),
    "iters_per_level": (int, 200, "optimizer iterations per level"),
    "step_size": (float, 0.01, "initial Adam step size"),
    "objective": (str, "ncc", "ncc or ssd"),
    "convergence_tol": (float, 1e-6, "relative change that ends a level"),
}

PIPELINE_SCHEMA = {
    "out_dir": (str, "pipeline_out", "directory receiving every artifact"),
    "dims": (parse_dims, (16, 16, 16), "phantom grid D,H,W"),
    "count": (int, 30, "training phantoms"),
    "holdout_count": (int, 5, "held-out real phantoms used as RAS references"),
    "seed": (int, 1, "seed of the first training phantom"),
    "holdout_seed": (int, 100000, "seed of the first held-out phantom"),
    "classes": (int, 5, "label classes including background"),
    "noise_sigma": (float, 0.02, "phantom noise"),
    "bias_amplitude": (float, 0.1, "phantom bias-field amplitude"),
    "deform_amplitude": (float, 0.08, "phantom shape deformation"),
    "lo_pct": (float, 1.0, "lower normalization percentile"),
    "hi_pct": (float, 99.0, "upper normalization percentile"),
    "axis": (int, 0, "slicing axis"),
    "codec": (str, "linear", "linear or vae"),
    "latent_dim": (int, 16, "latent dimension L"),
    "vae_epochs": (int, 50, "VAE epochs per learning rate"),
    "vae_hidden": (int, 128, "VAE hidden width"),
    "vae_beta_kl": (float, 0.2, "VAE KL weight"),
    "vae_learning_rates": (parse_floats, (1e-3, 1e-4, 1e-5), "VAE learning-rate sweep"),
    "vae_batch_size": (int, 32, "VAE minibatch size"),
    "vae_seed": (int, 0, "VAE seed"),
    "num_samples": (int, 10, "volumes to synthesize"),
    "sample_seed": (int, 2, "sampling seed"),
    "smoothing": (int, 3, "segmenter mode-filter width"),
    "reference_mode": (str, "ground-truth", "predicted or ground-truth"),
    "ras_pairs": (str, "k:10", "all, matched or k:N"),
    "ras_seed": (int, 0, "pair-selection seed"),
    "reg_levels": (int, 3, "registration pyramid levels"),
    "reg_iters": (int, 200, "registration iterations per level"),
    "reg_objective": (str, "ncc", "registration objective"),
    "mmd_kernel": (str, "dot", "dot or rbf"),
    "mmd_tests": (int, 100, "MMD minibatch tests"),
    "mmd_batch": (int, 8, "MMD batch size"),
    "mmd_seed": (int, 0, "MMD batch seed"),
    "msssim_pairs": (int, 20, "MS-SSIM sample pairs"),
    "msssim_seed": (int, 0, "MS-SSIM pair seed"),
}


def parse_config(text: str, schema: dict, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines against ``schema``; ``#`` starts a comment."""
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in schema:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ValidationError(f"{source}:{lineno}: duplicate key {key!r}")
        parser = schema[key][0]
        try:
            seen[key] = parser(value)
        except ValidationError as exc:
            raise ValidationError(f"{source}:{lineno}: {key}: {exc}") from None
        except ValueError:
            raise ValidationError(f"{source}:{lineno}: bad value for {key!r}: {value!r}") from None
    return {key: seen.get(key, default) for key, (_, default, _) in schema.items()}


def load_config(path, schema: dict) -> dict:
    return parse_config(Path(path).read_text(), schema, str(path))


def describe(schema: dict) -> str:
    return "\n".join(f"  {k} = {format_value(d)}    # {h}" for k, (_, d, h) in schema.items())
