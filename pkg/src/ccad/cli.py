"""Command-line pipeline: synth-data, build-bank, train, reconstruct, score, evaluate, report.

Artifacts land in ``out_dir``::

    bank.ccadbnk      coarse feature bank
    model.ckpt        denoiser (+ FCM and codec) with the config echo
    train_log.json    per-step losses and frozen-block hashes
    recon.npz         reconstructions, plus recon/*.png
    maps.npz          anomaly maps, plus maps/*.png (16-bit)
    report.json       ScoreReport

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from . import feature_bank as fb
from . import scoring
from . import training as tr
from .backbone import DenoiserModel, frozen_hash
from .config import ConfigError, RunConfig, from_mapping, load_config, parse_override
from .data import IngestError, ingest, load_split, synth_generate
from .fine_compression import AttentionParams, ConfigurationError

log = logging.getLogger("ccad")

PATH_KEYS = ("data_dir", "out_dir", "bank_path", "checkpoint_path", "extractor_path")
# keys that fix the trained architecture; reconstruct takes them from the checkpoint
ARCH_KEYS = ("variant", "widths", "heads", "codec", "codec_latent_ch", "fcm_d_k", "fcm_heads", "extractor_kind",
             "extractor_seed", "extractor_layers", "extractor_d", "extractor_m", "extractor_widths", "T",
             "beta_start", "beta_end")


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def config_echo(rc: RunConfig) -> dict:
    """Config without path keys, so relocated runs stay comparable."""
    return {k: v for k, v in asdict(rc).items() if k not in PATH_KEYS}


def seeds_of(rc: RunConfig) -> dict:
    return {k: getattr(rc, k) for k in ("seed", "synth_seed", "extractor_seed", "psi_seed")}


# -- data helpers -------------------------------------------------------------------

def _category(rc: RunConfig):
    root = Path(rc.data_dir)
    if not root.is_dir():
        raise ConfigError(f"data_dir: {root} does not exist")
    return ingest(root, categories=[rc.category], mask_suffix=rc.mask_suffix)[rc.category]


def _split(rc: RunConfig):
    return load_split(_category(rc), rc.image_size)


def _nchw(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


def _load_bank(rc: RunConfig, variant: str) -> fb.CoarseFeatureBank:
    if not rc.bank_file.is_file():
        raise ConfigurationError(f"bank required for variant {variant}: no bank file at {rc.bank_file}")
    return fb.load_bank(rc.bank_file)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _flat_name(name: str) -> str:
    return name.replace("/", "_").rsplit(".", 1)[0] + ".png"


# -- subcommands ---------------------------------------------------------------------

def cmd_synth_data(rc: RunConfig) -> None:
    manifest = synth_generate(rc.synth_spec(), rc.data_dir)
    cat = manifest[rc.category]
    log.info("wrote %d train / %d test images under %s", len(cat.train), len(cat.test), rc.data_dir)


def cmd_build_bank(rc: RunConfig) -> None:
    train_imgs = _split(rc)[0]
    ecfg = rc.extractor()
    if rc.xi == 0:
        bank = fb.empty_bank(ecfg.d, ecfg.fingerprint())
    else:
        if ecfg.kind == "imported":
            train_imgs = [np.array([i]) for i in range(len(train_imgs))]
        bank = fb.coreset_compress(fb.extract_features(train_imgs, ecfg), rc.xi, rc.coreset_init)
    for w in bank.warnings:
        log.warning("%s", w)
    rc.out.mkdir(parents=True, exist_ok=True)
    fb.save_bank(bank, rc.bank_file)
    log.info("bank: %d x %d from %d patches -> %s", bank.xi, bank.vectors.shape[1], bank.source_M, rc.bank_file)


def build_modules(rc: RunConfig, image_ch: int, bank_dim: int):
    codec = rc.make_codec(image_ch)
    fcm = AttentionParams(bank_dim, rc.fcm_d_k, rc.fcm_heads, seed=rc.seed) if rc.variant == "F" else None
    in_ch = image_ch if rc.variant == "V" else codec.latent_ch
    model = DenoiserModel(rc.variant, in_ch=in_ch, bank_dim=bank_dim, widths=rc.model_widths(), heads=rc.heads,
                          image_ch=image_ch, hint_factor=codec.factor if codec else 1, seed=rc.seed)
    return model, fcm, codec


def cmd_train(rc: RunConfig) -> None:
    bank = _load_bank(rc, rc.variant)
    data = _nchw(_split(rc)[0])
    model, fcm, codec = build_modules(rc, data.shape[1], bank.vectors.shape[1])
    codec_mae = None
    if codec is not None and codec.mode != "identity":
        codec_mae = codec.fit(data, steps=rc.codec_steps, seed=rc.seed)
        codec.requires_grad_(False)
        log.info("codec MAE %.4f", codec_mae)
    before = frozen_hash(model)
    model, state, _ = tr.train(rc.variant, data, bank, rc.train_config(), model=model, fcm=fcm,
                               encoder=rc.extractor() if rc.variant == "F" else None, codec=codec,
                               log_every=max(1, len(range(rc.steps or 1)) // 10))
    after = frozen_hash(model)
    if before != after:
        raise RuntimeError("frozen blocks changed during training")
    rc.out.mkdir(parents=True, exist_ok=True)
    echo = {"config": config_echo(rc), "image_ch": int(data.shape[1]), "bank_dim": int(bank.vectors.shape[1])}
    tr.save_checkpoint(rc.checkpoint_file, rc.variant, echo, {"model": model, "fcm": fcm, "codec": codec})
    (rc.out / "train_log.json").write_text(json.dumps(
        {"losses": state.losses, "steps": state.step, "frozen_hash": after, "codec_mae": codec_mae,
         "seeds": seeds_of(rc)}, indent=2, sort_keys=True) + "\n")
    log.info("trained %d steps, loss %.4f -> %.4f", state.step, np.mean(state.losses[:50]),
             np.mean(state.losses[-50:]))


def load_trained(rc: RunConfig):
    """Rebuild model, FCM and codec from the checkpoint; returns (arch config, modules)."""
    if not rc.checkpoint_file.is_file():
        raise ConfigError(f"checkpoint: no file at {rc.checkpoint_file} (run train first)")
    variant, echo, tensors = tr.read_checkpoint(rc.checkpoint_file)
    arch = from_mapping({k: echo["config"][k] for k in ARCH_KEYS}, base=rc)
    model, fcm, codec = build_modules(arch, echo["image_ch"], echo["bank_dim"])
    tr.load_into(model, "model", tensors)
    if fcm is not None:
        tr.load_into(fcm, "fcm", tensors)
    if codec is not None:
        tr.load_into(codec, "codec", tensors)
    model.eval()
    return arch, model, fcm, codec


def cmd_reconstruct(rc: RunConfig) -> None:
    arch, model, fcm, codec = load_trained(rc)
    bank = _load_bank(rc, arch.variant)
    _, test, _, _, names = _split(rc)
    x = _nchw(test)
    s = arch.train_config().schedule()
    seeds = [rc.seed * 100003 + i for i in range(len(x))]
    parts = []
    # chunks only bound memory; per-image noise streams keep results independent of chunking
    for lo in range(0, len(x), rc.recon_chunk):
        xs, sd = x[lo:lo + rc.recon_chunk], seeds[lo:lo + rc.recon_chunk]
        if arch.variant == "V":
            out = tr.reconstruct_v(model, xs, bank, s, rc.guidance_w, rc.inference_steps, noise_seeds=sd)
        else:
            out = tr.reconstruct_fc(model, xs, bank, fcm, s, rc.inference_steps, codec=codec,
                                    encoder=arch.extractor() if fcm is not None else None, noise_seeds=sd)
        parts.append(out.float())
    recon = torch.cat(parts).permute(0, 2, 3, 1).numpy()
    rc.out.mkdir(parents=True, exist_ok=True)
    np.savez(rc.out / "recon.npz", recon=recon, names=np.array(names))
    png_dir = rc.out / "recon"
    png_dir.mkdir(exist_ok=True)
    for img, name in zip(recon, names):
        Image.fromarray(_to_u8(img)).save(png_dir / _flat_name(name))
    log.info("reconstructed %d test images, MAE %.4f", len(recon), float(np.abs(recon - test).mean()))


def cmd_score(rc: RunConfig) -> None:
    if not (rc.out / "recon.npz").is_file():
        cmd_reconstruct(rc)
    _, test, _, _, names = _split(rc)
    with np.load(rc.out / "recon.npz") as z:
        recon, rnames = z["recon"], list(z["names"])
    if rnames != names:
        raise ConfigError("recon.npz does not match the test split (rerun reconstruct)")
    maps = scoring.anomaly_maps(test, recon, rc.psi(), rc.psi_layers, rc.psi_sigma)
    np.savez(rc.out / "maps.npz", maps=maps, names=np.array(names))
    png_dir = rc.out / "maps"
    png_dir.mkdir(exist_ok=True)
    upper = 2.0 * float(sum(rc.psi_sigma))
    for m, name in zip(maps, names):
        scoring.save_map_png(m, png_dir / _flat_name(name), upper)
    log.info("wrote %d anomaly maps", len(maps))


def cmd_evaluate(rc: RunConfig) -> scoring.ScoreReport:
    if not (rc.out / "maps.npz").is_file():
        cmd_score(rc)
    _, _, masks, labels, names = _split(rc)
    with np.load(rc.out / "maps.npz") as z:
        maps, mnames = z["maps"], list(z["names"])
    if mnames != names:
        raise ConfigError("maps.npz does not match the test split (rerun score)")
    meta = {"version": version_string(), "seeds": seeds_of(rc), "config": config_echo(rc)}
    if rc.checkpoint_file.is_file():
        meta["trained_variant"] = tr.read_checkpoint(rc.checkpoint_file)[0]
    report = scoring.evaluate_maps(maps, masks, labels, rc.smooth_sigma, names, meta)
    rc.out.mkdir(parents=True, exist_ok=True)
    scoring.write_report(report, rc.out / "report.json")
    log.info("class AUROC %.4f  pixel AUROC %.4f", report.class_auroc, report.pixel_auroc)
    return report


def cmd_report(rc: RunConfig) -> None:
    path = rc.out / "report.json"
    if not path.is_file():
        raise ConfigError(f"report: no file at {path} (run evaluate first)")
    rep = scoring.ScoreReport.from_json(path.read_text(encoding="utf-8"))
    lines = [f"report {path}  version {rep.meta.get('version', '?')}"]
    for level in ("class", "pixel"):
        lines.append(f"{level:>6}  AUROC {getattr(rep, level + '_auroc'):.4f}  "
                     f"F1-max {getattr(rep, level + '_f1_max'):.4f}  AP {getattr(rep, level + '_ap'):.4f}")
    n_def = sum(rep.image_labels)
    lines.append(f"images {len(rep.image_labels)} ({n_def} defective)")
    print("\n".join(lines))


COMMANDS = {
    "synth-data": cmd_synth_data,
    "build-bank": cmd_build_bank,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file with flat keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--variant", help="F, C or V")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir")
    common.add_argument("--out-dir")
    common.add_argument("--bank", dest="bank_path")
    common.add_argument("--checkpoint", dest="checkpoint_path")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="ccad", description="Globally conditioned diffusion anomaly detection")
    p.add_argument("--version", action="version", version=f"ccad {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def config_from_args(args) -> RunConfig:
    overrides = dict(parse_override(item) for item in args.set)
    for key in ("variant", "seed", "data_dir", "out_dir", "bank_path", "checkpoint_path"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="ccad: %(message)s", stream=sys.stderr, force=True)
    # late in training, tiny weights and Adam moments go subnormal and CPU math slows down a lot.
    # The flag is process-global, so put it back (off is the default) for in-process callers.
    torch.set_flush_denormal(True)
    try:
        rc = config_from_args(args)
        COMMANDS[args.command](rc)
    except (ConfigurationError, IngestError, fb.BankDecodeError, FileNotFoundError, ValueError) as e:
        print(f"ccad {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"ccad {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    finally:
        torch.set_flush_denormal(False)
    return 0


if __name__ == "__main__":
    sys.exit(main())
