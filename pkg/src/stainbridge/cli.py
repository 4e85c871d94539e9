"""Command-line entry point: ``stainbridge {preprocess,train,infer,evaluate,downstream}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from stainbridge.config import RunConfig
from stainbridge.errors import (
    ConfigurationError,
    DatasetValidationError,
    InputValidationError,
    NormalizationSkipped,
    NumericError,
)
from stainbridge.imageio import atomic_write_text, read_rgb, to_tensor, to_uint8, write_png

log = logging.getLogger("stainbridge")

HANDLED_ERRORS = (ConfigurationError, DatasetValidationError, InputValidationError,
                  NumericError, FileNotFoundError)


class CommandFailed(Exception):
    """A command finished with per-item errors; the message summarizes them."""


# -- preprocess --------------------------------------------------------------

def cmd_preprocess(raw_dir, out_dir, cfg: RunConfig) -> dict:
    """Trim, tile and (optionally) stain-normalize registered block pairs.

    ``raw_dir`` holds ``hne/<block>.png`` and ``mihc/<block>.png`` plus an
    optional ``patients.json`` mapping block names to patient ids (blocks
    without an entry count as their own patient).
    """
    from stainbridge.data import assign_splits, crop_patches, macenko_normalize, trim_margin
    from stainbridge.data.dataset import MANIFEST_NAME, SPLITS
    from stainbridge.data.macenko import StainBasis

    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    hne_dir, mihc_dir = raw_dir / "hne", raw_dir / "mihc"
    for d in (hne_dir, mihc_dir):
        if not d.is_dir():
            raise DatasetValidationError(f"missing input directory {d}")
    hne_files = {p.stem: p for p in sorted(hne_dir.glob("*.png"))}
    mihc_files = {p.stem: p for p in sorted(mihc_dir.glob("*.png"))}
    orphans = sorted(set(hne_files) ^ set(mihc_files))
    if orphans:
        raise DatasetValidationError(
            "unpaired blocks: " + ", ".join(
                f"{'hne' if o in hne_files else 'mihc'}/{o}.png" for o in orphans)
        )
    if not hne_files:
        raise DatasetValidationError(f"no PNG blocks under {hne_dir}")
    patients_path = raw_dir / "patients.json"
    block_patients = json.loads(patients_path.read_text()) if patients_path.exists() else {}

    margin, size, overlap = cfg["data.margin"], cfg["data.patch_size"], cfg["data.overlap"]
    reference = StainBasis.reference()
    patches: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    patch_patients: dict[str, str] = {}
    skipped, dropped = [], []
    for block in sorted(hne_files):
        hne, mihc = read_rgb(hne_files[block]), read_rgb(mihc_files[block])
        if hne.shape != mihc.shape:
            raise DatasetValidationError(f"{block}: H&E {hne.shape} vs mIHC {mihc.shape}")
        hne, mihc = trim_margin(hne, margin), trim_margin(mihc, margin)
        for ((r, c), h_patch), (_, m_patch) in zip(crop_patches(hne, size, overlap),
                                                   crop_patches(mihc, size, overlap)):
            name = f"{block}_r{r:05d}_c{c:05d}"
            if cfg["data.normalize"]:
                try:
                    h_patch = macenko_normalize(
                        h_patch, reference, od_threshold=cfg["data.od_threshold"],
                        alpha=cfg["data.alpha"], min_tissue_fraction=cfg["data.min_tissue_fraction"],
                    )
                except NormalizationSkipped:
                    if cfg["data.drop_background"]:
                        dropped.append(name)
                        continue
                    skipped.append(name)
            patches[name] = (np.ascontiguousarray(h_patch), np.ascontiguousarray(m_patch))
            patch_patients[name] = str(block_patients.get(block, block))

    manifest = assign_splits(patch_patients, seed=int(cfg["seed"]))
    split_of = manifest.split_of()
    for split in SPLITS:
        for kind in ("hne", "mihc"):
            (out_dir / split / kind).mkdir(parents=True, exist_ok=True)
    for name, (h_patch, m_patch) in patches.items():
        split = split_of[name]
        write_png(out_dir / split / "hne" / f"{name}.png", h_patch)
        write_png(out_dir / split / "mihc" / f"{name}.png", m_patch)
    manifest.write(out_dir / MANIFEST_NAME)
    report = {"patches": len(patches), "counts": dict(zip(SPLITS, manifest.counts)),
              "normalization_skipped": skipped, "dropped_background": dropped}
    atomic_write_text(out_dir / "preprocess_report.json", json.dumps(report, indent=2))
    return report


# -- train -------------------------------------------------------------------

class PatchPairs(torch.utils.data.Dataset):
    """Paired samples as [-1, 1] tensors, randomly co-cropped to ``crop``."""

    def __init__(self, samples, crop: int = 0, seed: int = 0):
        self.samples = list(samples)
        self.crop = crop
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        hne, mihc = self.samples[i].load()
        if self.crop:
            h, w = hne.shape[:2]
            if h < self.crop or w < self.crop:
                raise InputValidationError(
                    f"{self.samples[i].sample_id}: {h}x{w} smaller than crop {self.crop}"
                )
            rng = np.random.default_rng((self.seed, self.epoch, i))
            r = int(rng.integers(0, h - self.crop + 1))
            c = int(rng.integers(0, w - self.crop + 1))
            hne = hne[r:r + self.crop, c:c + self.crop]
            mihc = mihc[r:r + self.crop, c:c + self.crop]
        return to_tensor(hne), to_tensor(mihc)


def _center_crop(img: np.ndarray, size: int) -> np.ndarray:
    if not size:
        return img
    h, w = img.shape[:2]
    r, c = (h - size) // 2, (w - size) // 2
    return img[r:r + size, c:c + size]


def _make_validator(samples, crop: int, device):
    from stainbridge.metrics import evaluate_dataset

    def validate(generator):
        if not samples:
            return {}
        was_training = generator.training
        generator.eval()
        triples = []
        with torch.no_grad():
            for s in samples:
                hne, mihc = s.load()
                hne, mihc = _center_crop(hne, crop), _center_crop(mihc, crop)
                fake = generator(to_tensor(hne).unsqueeze(0).to(device))[0]
                triples.append((s.sample_id, to_uint8(fake), mihc))
        generator.train(was_training)
        avg = evaluate_dataset(triples).averages
        return {"val_ssim": avg["ssim"], "val_r": avg["pearson_r"],
                "val_psnr": avg["psnr_channel_mean"]}

    return validate


def cmd_train(data_dir, out_dir, cfg: RunConfig, resume=None):
    from stainbridge.data import load_dataset
    from stainbridge.training import Trainer

    samples, manifest = load_dataset(data_dir)
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise DatasetValidationError(f"{data_dir}: no training samples")
    val = [s for s in samples if s.split == "val"][: int(cfg["train.val_limit"])]
    train_cfg = cfg.train_config()
    device = cfg["device"]
    if resume:
        trainer = Trainer.resume(resume, train_cfg, device)
        log.info("resuming after epoch %d", trainer.epoch)
    else:
        gen_cfg = cfg.generator_config()
        trainer = Trainer.create(gen_cfg, train_cfg, cfg.discriminator_config(gen_cfg), device)

    dataset = PatchPairs(train, train_cfg.crop_size, train_cfg.seed)
    workers = max(0, int(cfg["workers"]) - 1)

    def batches(epoch):
        dataset.epoch = epoch
        loader = torch.utils.data.DataLoader(
            dataset, batch_size=train_cfg.batch_size, shuffle=True, num_workers=workers,
            generator=torch.Generator().manual_seed(train_cfg.seed * 100003 + epoch),
        )
        yield from loader

    validate = _make_validator(val, train_cfg.crop_size, trainer.device)
    return trainer.fit(batches, out_dir, train_cfg.total_epochs, validate)


# -- infer -------------------------------------------------------------------

def cmd_infer(checkpoint, input_dir, out_dir, cfg: RunConfig) -> dict:
    from stainbridge.training import load_generator

    model = load_generator(checkpoint, expected=cfg.generator_overrides()).to(cfg["device"]).eval()
    inputs = sorted(Path(input_dir).glob("*.png"))
    if not inputs:
        raise InputValidationError(f"no PNG inputs under {input_dir}")
    out_dir = Path(out_dir)
    errors = {}
    with torch.no_grad():
        for path in inputs:
            try:
                hne = read_rgb(path)
                fake = model(to_tensor(hne).unsqueeze(0).to(cfg["device"]))[0]
                write_png(out_dir / path.name, to_uint8(fake))
            except (InputValidationError, OSError) as exc:
                errors[path.name] = str(exc)
                log.error("%s: %s", path.name, exc)
    if errors:
        raise CommandFailed(f"{len(errors)} of {len(inputs)} inputs failed: {sorted(errors)}")
    return {"written": len(inputs)}


# -- evaluate / downstream -----------------------------------------------------

def _matched_pngs(dir_a, dir_b) -> list[str]:
    a = {p.name for p in Path(dir_a).glob("*.png")}
    b = {p.name for p in Path(dir_b).glob("*.png")}
    if not a and not b:
        raise InputValidationError(f"no PNG files in {dir_a} or {dir_b}")
    unmatched = sorted(a ^ b)
    if unmatched:
        listed = ", ".join(f"{n} (only in {dir_a if n in a else dir_b})" for n in unmatched[:20])
        raise InputValidationError(f"unmatched files: {listed}")
    return sorted(a)


def cmd_evaluate(generated_dir, reference_dir, out_dir, cfg: RunConfig):
    from stainbridge.metrics import evaluate_dataset

    names = _matched_pngs(generated_dir, reference_dir)
    triples = [
        (Path(n).stem,
         lambda n=n: read_rgb(Path(generated_dir) / n),
         lambda n=n: read_rgb(Path(reference_dir) / n))
        for n in names
    ]
    report = evaluate_dataset(triples, workers=int(cfg["workers"]))
    report.write(out_dir, plot=bool(cfg["report.plot"]))
    return report


def cmd_downstream(real_dir, generated_dir, out_dir, cfg: RunConfig, detections=None):
    from stainbridge.downstream import (
        BlobDetector,
        DetectorParams,
        ExternalDetector,
        read_detections_csv,
        run_downstream,
    )

    names = _matched_pngs(real_dir, generated_dir)
    if detections:
        detector = ExternalDetector(read_detections_csv(detections))
    else:
        detector = BlobDetector(DetectorParams(
            sigma=cfg["downstream.sigma"], min_cell_area=cfg["downstream.min_cell_area"],
            max_cell_area=cfg["downstream.max_cell_area"], bins=cfg["downstream.bins"],
        ))
    triples = [
        (Path(n).stem,
         lambda n=n: read_rgb(Path(real_dir) / n),
         lambda n=n: read_rgb(Path(generated_dir) / n))
        for n in names
    ]
    result = run_downstream(triples, detector, bins=int(cfg["downstream.bins"]),
                            workers=int(cfg["workers"]))
    result.write(out_dir, plot=bool(cfg["report.plot"]))
    return result


# -- argument parsing ------------------------------------------------------------

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainbridge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="trim, tile and normalize registered block pairs")
    p.add_argument("raw_dir")
    _shared(p)
    p.add_argument("--margin", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--overlap", type=float)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--drop-background", action="store_true")

    p = sub.add_parser("train", help="train the generator")
    p.add_argument("data_dir")
    _shared(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-l1", type=float)
    p.add_argument("--small", action="store_true", help="narrow generator preset for CPU runs")
    p.add_argument("--device")
    p.add_argument("--resume", help="training checkpoint to continue from")

    p = sub.add_parser("infer", help="translate H&E patches")
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    _shared(p)
    p.add_argument("--device")

    p = sub.add_parser("evaluate", help="SSIM / R / PSNR report")
    p.add_argument("generated_dir")
    p.add_argument("reference_dir")
    _shared(p)
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("downstream", help="cell positivity comparison")
    p.add_argument("real_dir")
    p.add_argument("generated_dir")
    _shared(p)
    p.add_argument("--detections", help="external detections CSV")
    p.add_argument("--plot", action="store_true")
    return parser


def _overrides(args) -> dict:
    from stainbridge.config import parse_value

    o = {"seed": args.seed, "workers": args.workers}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        o[k.strip()] = parse_value(v)
    flag_keys = {
        "margin": "data.margin", "patch_size": "data.patch_size", "overlap": "data.overlap",
        "epochs": "train.total_epochs", "crop": "train.crop_size",
        "batch_size": "train.batch_size", "lr": "train.initial_lr",
        "lambda_l1": "train.lambda_l1", "device": "device",
    }
    for attr, key in flag_keys.items():
        if getattr(args, attr, None) is not None:
            o[key] = getattr(args, attr)
    if getattr(args, "no_normalize", False):
        o["data.normalize"] = False
    if getattr(args, "drop_background", False):
        o["data.drop_background"] = True
    if getattr(args, "small", False):
        o["generator.preset"] = "small"
    if getattr(args, "plot", False):
        o["report.plot"] = True
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(args)
        if args.command == "train":
            epochs = overrides.get("train.total_epochs")
            if epochs is not None and "train.constant_lr_epochs" not in overrides:
                # keep the constant/decay split proportional when only the length changes
                overrides["train.constant_lr_epochs"] = epochs // 2
        cfg = RunConfig.resolve(args.config, overrides)
        torch.manual_seed(int(cfg["seed"]))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.write_snapshot(out)
        if args.command == "preprocess":
            report = cmd_preprocess(args.raw_dir, out, cfg)
            log.info("wrote %d patch pairs %s", report["patches"], report["counts"])
        elif args.command == "train":
            path = cmd_train(args.data_dir, out, cfg, resume=args.resume)
            log.info("final checkpoint %s", path)
        elif args.command == "infer":
            cmd_infer(args.checkpoint, args.input_dir, out, cfg)
        elif args.command == "evaluate":
            report = cmd_evaluate(args.generated_dir, args.reference_dir, out, cfg)
            log.info("averages %s", report.averages)
        elif args.command == "downstream":
            result = cmd_downstream(args.real_dir, args.generated_dir, out, cfg, args.detections)
            log.info("agreement %s", json.dumps(result.summary()))
    except (CommandFailed, *HANDLED_ERRORS) as exc:
        print(f"stainbridge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
