"""Command-line pipeline: ``ssae synth|train|segment|eval|pyramid --config FILE [flags]``.

Every command merges its defaults, the JSON config file and command-line
flags (flags win), writes the effective settings to ``run_config.json`` in
its output directory and exits with the code of the error class it raised.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io
from .anomaly import aggregate, residual_stack, score_map, to_native
from .data import ANOMALY_KINDS, SynthConfig, inject_anomaly, synth_healthy
from .errors import ConfigError, DataError, SSAEError
from .metrics import evaluate, pr_curve, pr_curve_svg, recon_error_stats, reports_to_csv, reports_to_json
from .models import EncoderDecoder, ModelConfig, build_scale_space_model, load_bundle, reconstruct_levels, save_bundle
from .pyramid import build_pyramid, gaussian_kernel, level_images, reconstruct
from .training import TrainConfig, split_indices, train_all, train_baseline_ae

log = logging.getLogger("ssae")

OUTPUT_ROOT_ENV = "SSAE_OUTPUT_ROOT"

DEFAULTS = {
    "synth": {
        "count": 100,
        "seed": 0,
        "anomalous_fraction": 0.0,
        "anomaly": "small-multifocal",
        "pgm": False,
        "synth": {},
    },
    "train": {
        "data": None,
        "model": "ssae",
        "variant": "dense",
        "levels": 3,
        "coverage": 0.99,
        "model_base": True,
        "seed": 0,
        "fidelity_data": None,
        "train": {},
        "model_config": {},
    },
    "segment": {
        "model": None,
        "data": None,
        "filter_radius": 2,
        "sign": "abs",
        "per_level_abs": False,
        "resolutions": None,
        "threshold": None,
        "pgm": False,
    },
    "eval": {
        "segments": [],
        "svg": True,
    },
    "pyramid": {
        "input": None,
        "levels": 3,
        "coverage": 0.99,
        "seed": 0,
        "synth": {},
    },
}


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags < ``--set key=value``."""
    cfg = copy.deepcopy(DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for key in ("seed", "data", "model", "variant", "levels", "count", "input", "threshold"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "segments", None):
        cfg["segments"] = args.segments
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(cfg, key, _parse_value(value))
    unknown = set(cfg) - set(DEFAULTS[command]) - {"out"}
    if unknown:
        raise ConfigError(f"unknown {command} config keys: {sorted(unknown)}")
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    cfg["out"] = str(args.out or cfg.get("out") or Path(root) / command)
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "run_config.json", cfg)
    return out


def load_dataset(manifest_path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Images, ground-truth masks (zeros where absent) and the manifest document."""
    manifest_path = Path(manifest_path)
    doc = io.read_manifest(manifest_path)
    root = manifest_path.parent
    images, gts = [], []
    for s in doc["samples"]:
        img = io.load_image(root / s["path"])
        images.append(img)
        gts.append(io.load_image(root / s["gt_path"]) if s.get("gt_path") else np.zeros_like(img))
    if not images:
        raise DataError(f"{manifest_path}: no samples")
    return np.stack(images), np.stack(gts), doc


# --- commands -----------------------------------------------------------------


def cmd_synth(cfg: dict) -> dict:
    out = _out_dir(cfg)
    count = int(cfg["count"])
    frac = float(cfg["anomalous_fraction"])
    if count < 1 or not 0.0 <= frac <= 1.0:
        raise ConfigError("synth needs count >= 1 and 0 <= anomalous_fraction <= 1")
    if cfg["anomaly"] not in ANOMALY_KINDS[1:]:
        raise ConfigError(f"anomaly must be one of {ANOMALY_KINDS[1:]}")
    base = SynthConfig.from_dict(cfg["synth"])
    seed = int(cfg["seed"])
    n_anom = int(round(frac * count))
    anomalous = set(np.random.default_rng([seed, 11]).permutation(count)[:n_anom].tolist())
    (out / "images").mkdir(exist_ok=True)
    samples = []
    for i in range(count):
        sample = synth_healthy(base, seed=seed + i)
        if i in anomalous:
            sample = inject_anomaly(sample, replace(base, anomaly=cfg["anomaly"]), seed=seed + i)
        entry = {"path": f"images/{i:05d}.raw", "seed": seed + i, "kind": sample.meta["kind"]}
        io.save_raw(out / entry["path"], sample.image, seed=seed + i, kind=entry["kind"])
        if entry["kind"] != "none":
            entry["gt_path"] = f"images/{i:05d}_gt.raw"
            io.save_raw(out / entry["gt_path"], sample.gt_mask, seed=seed + i, kind="gt")
        if cfg["pgm"]:
            io.save_pgm(out / f"images/{i:05d}.pgm", sample.image, bits=16, vmax=1.0)
        samples.append(entry)
    io.write_manifest(out / "manifest.json", samples, synth=base.to_dict(), seed=seed)
    summary = {"count": count, "anomalous": n_anom, "healthy": count - n_anom}
    _dump(out / "synth_summary.json", summary)
    return summary


def _fidelity(ssae, ae, images) -> dict:
    """Mean per-pixel l1 statistics of each trained model on healthy images."""
    out = {"n_images": len(images)}
    if ssae is not None:
        targets = level_images(images, ssae.levels, ssae.kernel)
        recons = reconstruct_levels(ssae, images)
        out["ssae"] = {f"level{k}": _stats(t, r) for k, (t, r) in enumerate(zip(targets, recons))}
    if ae is not None:
        out["ae"] = {"level0": _stats(images, ae(images))}
    if ssae is not None and ae is not None:
        out["ssae_lower_native"] = out["ssae"]["level0"]["mean"] < out["ae"]["level0"]["mean"]
    return out


def _stats(inputs, recons) -> dict:
    stats = recon_error_stats(list(inputs), list(recons))
    stats.pop("per_image")
    return stats


def cmd_train(cfg: dict) -> dict:
    out = _out_dir(cfg)
    if not cfg["data"]:
        raise ConfigError("train needs a data manifest")
    if cfg["model"] not in ("ssae", "ae", "both"):
        raise ConfigError("model must be ssae, ae or both")
    images, _, _ = load_dataset(cfg["data"])
    tcfg = TrainConfig.from_dict({"seed": cfg["seed"], **cfg["train"]})
    mcfg = ModelConfig.from_dict(cfg["model_config"])
    reports, ssae, ae = {}, None, None
    template = build_scale_space_model(
        cfg["variant"], images.shape[-1], int(cfg["levels"]), mcfg, cfg["coverage"], int(cfg["seed"]), cfg["model_base"]
    )
    if cfg["model"] in ("ssae", "both"):
        ssae = template
        reports["ssae"] = train_all(ssae, images, tcfg).to_dict()
        save_bundle(out / "ssae", ssae)
    if cfg["model"] in ("ae", "both"):
        ae, rep = train_baseline_ae(cfg["variant"], images, tcfg, mcfg, seed=int(cfg["seed"]), match=template)
        reports["ae"] = asdict(rep)
        save_bundle(out / "ae", ae)
    _dump(out / "train_report.json", reports)
    if cfg["fidelity_data"]:
        held_out, _, _ = load_dataset(cfg["fidelity_data"])
    else:
        held_out = images[split_indices(len(images), tcfg)[1]]
    fidelity = _fidelity(ssae, ae, held_out)
    _dump(out / "fidelity.json", fidelity)
    return {"reports": reports, "fidelity": fidelity}


def _segment_arrays(model, images, cfg) -> tuple[dict, dict]:
    """Signed residual dumps and score maps keyed by resolution name."""
    radius, sign = int(cfg["filter_radius"]), cfg["sign"]
    if isinstance(model, EncoderDecoder):
        residuals = {"level0": images - model(images)}
        return residuals, {"level0": score_map(residuals["level0"], radius, "level0", sign)}
    stack = residual_stack(model, images)
    residuals = {f"level{k}": r for k, r in enumerate(stack.residuals)}
    residuals["aggregated"] = aggregate(stack, cfg["per_level_abs"])
    maps = {}
    for key, r in residuals.items():
        sm = score_map(r, radius, key, sign)
        level = 0 if key == "aggregated" else int(key[5:])
        if level:
            sm.scores = to_native(sm.scores, level)
            sm.postprocessing.append(f"bilinear-x{2**level}")
        maps[key] = sm
    return residuals, maps


def cmd_segment(cfg: dict) -> dict:
    out = _out_dir(cfg)
    if not cfg["model"] or not cfg["data"]:
        raise ConfigError("segment needs a model bundle and a data manifest")
    model = load_bundle(cfg["model"])
    bundle = json.loads((Path(cfg["model"]) / "manifest.json").read_text())
    images, _, doc = load_dataset(cfg["data"])
    residuals, maps = _segment_arrays(model, images, cfg)
    keys = cfg["resolutions"] or list(maps)
    unknown = set(keys) - set(maps)
    if unknown:
        raise ConfigError(f"unknown resolutions {sorted(unknown)}; available {list(maps)}")
    threshold = cfg["threshold"]
    entries = []
    for i, s in enumerate(doc["samples"]):
        sdir = out / "maps" / f"{i:05d}"
        sdir.mkdir(parents=True, exist_ok=True)
        entry = {"source": s["path"], "seed": s["seed"], "kind": s["kind"], "residuals": {}, "scores": {}, "masks": {}}
        for key, r in residuals.items():
            name = f"residual_{key}.raw"
            io.save_raw(sdir / name, r[i], provenance=key, signed=True)
            entry["residuals"][key] = f"maps/{i:05d}/{name}"
        for key in keys:
            sm = maps[key]
            name = f"score_{key}.raw"
            io.save_raw(sdir / name, sm.scores[i], provenance=sm.provenance, postprocessing=sm.postprocessing,
                        filter_radius=int(cfg["filter_radius"]))
            entry["scores"][key] = f"maps/{i:05d}/{name}"
            if cfg["pgm"]:
                io.save_pgm(sdir / f"score_{key}.pgm", sm.scores[i], bits=16)
            if threshold is not None:
                mask = (sm.scores[i] > float(threshold)).astype(np.float64)
                io.save_raw(sdir / f"mask_{key}.raw", mask, provenance=sm.provenance, threshold=float(threshold))
                io.save_pgm(sdir / f"mask_{key}.pgm", mask, bits=8, vmax=1.0)
                entry["masks"][key] = f"maps/{i:05d}/mask_{key}.raw"
        entries.append(entry)
    summary = {
        "model_kind": bundle["kind"],
        "variant": bundle["variant"],
        "bundle": str(Path(cfg["model"]).resolve()),
        "data": str(Path(cfg["data"]).resolve()),
        "resolutions": keys,
        "filter_radius": int(cfg["filter_radius"]),
        "samples": entries,
    }
    _dump(out / "segment.json", summary)
    return summary


def cmd_eval(cfg: dict) -> dict:
    out = _out_dir(cfg)
    if not cfg["segments"]:
        raise ConfigError("eval needs at least one segment output directory")
    reports, curves = [], {}
    for seg_dir in cfg["segments"]:
        seg_dir = Path(seg_dir)
        try:
            seg = json.loads((seg_dir / "segment.json").read_text())
        except OSError as exc:
            raise DataError(f"cannot read {seg_dir / 'segment.json'}: {exc}") from None
        _, gts, _ = load_dataset(seg["data"])
        for key in seg["resolutions"]:
            scores = [io.load_raw(seg_dir / e["scores"][key])[0] for e in seg["samples"]]
            rkey = "level0" if key == "aggregated" else key
            res = [io.load_raw(seg_dir / e["residuals"][rkey])[0] for e in seg["samples"]]
            rep = evaluate(scores, list(gts), model=seg["model_kind"], variant=seg["variant"], resolution=key)
            rep.recon_error_stats = _stats(res, [np.zeros_like(r) for r in res])
            reports.append(rep)
            curves[f"{seg['model_kind']}-{seg['variant']}-{key}"] = pr_curve(np.stack(scores), gts)
    (out / "eval_report.json").write_text(reports_to_json(reports) + "\n")
    (out / "eval_report.csv").write_text(reports_to_csv(reports))
    if cfg["svg"]:
        (out / "pr_curves.svg").write_text(pr_curve_svg(curves))
    return {"reports": [r.to_dict() for r in reports]}


def cmd_pyramid(cfg: dict) -> dict:
    out = _out_dir(cfg)
    levels = int(cfg["levels"])
    if cfg["input"]:
        x = io.load_image(cfg["input"])
        if x.ndim != 2:
            raise DataError(f"pyramid expects a 2D image, got shape {x.shape}")
    else:
        x = synth_healthy(SynthConfig.from_dict(cfg["synth"]), seed=int(cfg["seed"])).image
    kernel = gaussian_kernel(cfg["coverage"])
    pyr = build_pyramid(x, levels, kernel)
    err = float(np.max(np.abs(reconstruct(pyr) - x)))
    gauss = level_images(x, levels, kernel)
    dumps = []
    for k, img in enumerate(gauss):
        io.save_pgm(out / f"I{k}.pgm", img, bits=16, vmax=max(float(img.max()), 1e-12))
        dumps.append({"name": f"I{k}", "shape": list(img.shape)})
    energy = {}
    for k, h in enumerate(pyr.highs):
        io.save_raw(out / f"H{k}.raw", h, provenance=f"band{k}")
        energy[f"H{k}"] = float(np.sum(h * h))
    io.save_raw(out / f"I{levels}_base.raw", pyr.base, provenance="base")
    report = {
        "levels": levels,
        "kernel_sigma": kernel.sigma,
        "roundtrip_max_error": err,
        "band_energy": energy,
        "base_energy": float(np.sum(pyr.base**2)),
        "dumps": dumps,
    }
    _dump(out / "pyramid.json", report)
    return report


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "pyramid": cmd_pyramid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssae", description="Scale-space autoencoder pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/{name})")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, dotted for nesting")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            p.add_argument("--count", type=int)
        if name in ("train", "segment"):
            p.add_argument("--data", help="dataset manifest")
        if name == "train":
            p.add_argument("--model", choices=["ssae", "ae", "both"])
            p.add_argument("--variant", choices=["dense", "spatial", "variational"])
            p.add_argument("--levels", type=int)
        if name == "segment":
            p.add_argument("--model", help="model bundle directory")
            p.add_argument("--threshold", type=float)
        if name == "eval":
            p.add_argument("--segments", nargs="+")
        if name == "pyramid":
            p.add_argument("--input", help="image file (.pgm, .raw, .nii)")
            p.add_argument("--levels", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except SSAEError as exc:
        print(f"ssae {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(cfg["out"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
