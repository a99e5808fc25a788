#!/usr/bin/env python3
"""
🎨 rcdmkit CLI - Command Line Interface

Main entry point for the representation-conditioned diffusion toolkit.
Trains encoders and denoisers, samples from representations, and runs the
matching, manipulation, attack and evaluation experiments. Every command
writes its artifacts and a run manifest into ``--out``.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from rcdmkit import __description__, __version__
from rcdmkit.analysis import advprobe, faitheval, repmatch, repops
from rcdmkit.config import Config
from rcdmkit.diffusion.denoiser import DenoiserConfig
from rcdmkit.diffusion.sampling import (
    interpolate,
    kde_fit,
    kde_sample,
    sample_conditional,
    sample_grid_rows,
)
from rcdmkit.diffusion.schedule import NoiseSchedule
from rcdmkit.diffusion.training import schedule_from_config, train_rcdm
from rcdmkit.encoders.augment import policy_from_config
from rcdmkit.encoders.models import (
    EncoderConfig,
    EncoderModel,
    Provenance,
    Source,
    build_encoder,
    encode_source,
)
from rcdmkit.encoders.training import train_ssl, train_supervised
from rcdmkit.exceptions import (
    ArtifactError,
    ConfigurationError,
    FingerprintMismatchError,
    IndexOutOfRangeError,
    IntegrityError,
    RcdmError,
)
from rcdmkit.runtime import checkpoint
from rcdmkit.runtime.cache import RepresentationCache
from rcdmkit.runtime.data import ImageDataset, dataset_from_config, load_image
from rcdmkit.runtime.grids import default_layout, emit_grid, emit_rows
from rcdmkit.runtime.manifest import (
    OutputLock,
    RunRecorder,
    load_manifest,
    replay_argv,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class RcdmArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors follow the one-line error format."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error kind=usage exit=2 reason={message}\n")
        sys.exit(2)


class RunContext:
    """Resolved config, seeded generators and the run recorder of one command."""

    def __init__(self, command: str, argv: List[str], config: Config, out_dir: Path):
        self.command = command
        self.config = config
        self.out_dir = out_dir
        self.seed = int(config.get("runtime.seed", 0))
        self.generator = torch.Generator().manual_seed(self.seed)
        self.rng = np.random.default_rng(self.seed)
        self.recorder = RunRecorder(
            command, argv, config.to_dict(), self.seed, out_dir, version=__version__
        )
        self.cache = RepresentationCache(config.get("runtime.cache_dir"))

    @property
    def progress(self) -> bool:
        return bool(self.config.get("runtime.progress", True)) and sys.stderr.isatty()

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_json(self, name: str, data: Any) -> Path:
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        return self.recorder.artifact(name, path)

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        path.write_text(text, encoding="utf-8")
        return self.recorder.artifact(name, path)

    def write_array(self, name: str, array: Any) -> Path:
        path = self.path(name)
        with open(path, "wb") as f:
            np.save(f, np.asarray(array))
        return self.recorder.artifact(name, path)

    def write_grid(
        self, name: str, images: torch.Tensor, layout: Optional[Tuple[int, int]] = None
    ) -> Path:
        path = emit_grid(
            images, layout or default_layout(images.shape[0]), self.path(name)
        )
        return self.recorder.artifact(name, path)

    def write_rows(self, name: str, rows: List[torch.Tensor]) -> Path:
        return self.recorder.artifact(name, emit_rows(rows, self.path(name)))


class RcdmCLI:
    """Main CLI interface for rcdmkit."""

    def __init__(self):
        self._argv: List[str] = []

    def create_parser(self) -> argparse.ArgumentParser:
        """Create the main argument parser."""
        parser = RcdmArgumentParser(
            prog="rcdmkit",
            description=__description__,
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  rcdmkit train-encoder --flavor ssl --out runs/ssl
  rcdmkit train-rcdm --encoder runs/ssl/encoder.ckpt --out runs/rcdm
  rcdmkit sample --encoder runs/ssl/encoder.ckpt --denoiser runs/rcdm/denoiser.ckpt
  rcdmkit match --encoder runs/ssl/encoder.ckpt --distances l2 cosine
  rcdmkit evaluate --suite faithfulness --encoder ... --denoiser ...
  rcdmkit replay runs/rcdm/manifest.json --out runs/rcdm-replay
            """,
        )

        parser.add_argument(
            "--version", action="version", version=f"rcdmkit {__version__}"
        )
        parser.add_argument(
            "--verbose", "-v", action="store_true", help="Enable verbose output"
        )
        parser.add_argument("--debug", action="store_true", help="Enable debug mode")

        subparsers = parser.add_subparsers(
            dest="command", help="Available commands", metavar="COMMAND"
        )

        self._add_training_commands(subparsers)
        self._add_generation_commands(subparsers)
        self._add_analysis_commands(subparsers)
        self._add_utility_commands(subparsers)

        return parser

    @staticmethod
    def _add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=str, help="YAML configuration file")
        sub.add_argument(
            "--seed", type=int, help="Random seed (overrides runtime.seed)"
        )
        sub.add_argument(
            "--out", type=str, help="Output directory (default: runs/<command>)"
        )
        sub.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="Override one config value (repeatable)",
        )

    @staticmethod
    def _add_conditioning(sub: argparse.ArgumentParser) -> None:
        group = sub.add_mutually_exclusive_group()
        group.add_argument("--index", type=int, help="Validation image index")
        group.add_argument("--id", type=str, help="Validation image id")
        group.add_argument("--image", type=str, help="Image file to encode")
        group.add_argument(
            "--h-file", type=str, help="Representation file (.npy or JSON list)"
        )

    def _add_training_commands(self, subparsers):
        """Add encoder and denoiser training commands."""

        enc_parser = subparsers.add_parser("train-encoder", help="Train a toy encoder")
        enc_parser.add_argument(
            "--flavor",
            choices=[p.value for p in Provenance],
            default=Provenance.SSL.value,
            help="random initialization, supervised or self-supervised",
        )
        enc_parser.add_argument("--steps", type=int, help="Training steps")
        self._add_common(enc_parser)

        rcdm_parser = subparsers.add_parser(
            "train-rcdm", help="Train a denoiser conditioned on a frozen encoder"
        )
        rcdm_parser.add_argument("--encoder", required=True, help="Encoder checkpoint")
        rcdm_parser.add_argument(
            "--source",
            choices=[s.value for s in Source],
            help="Conditioning encoder output",
        )
        rcdm_parser.add_argument("--steps", type=int, help="Training steps")
        self._add_common(rcdm_parser)

    def _add_generation_commands(self, subparsers):
        """Add sampling commands."""

        sample_parser = subparsers.add_parser(
            "sample", help="Sample images conditioned on h"
        )
        sample_parser.add_argument(
            "--encoder", required=True, help="Encoder checkpoint"
        )
        sample_parser.add_argument(
            "--denoiser", required=True, help="Denoiser checkpoint"
        )
        self._add_conditioning(sample_parser)
        sample_parser.add_argument(
            "--heldout", type=int, help="Sample rows for the first N validation images"
        )
        sample_parser.add_argument("--count", type=int, help="Samples per conditioning")
        self._add_common(sample_parser)

        interp_parser = subparsers.add_parser(
            "interpolate", help="Sample along a line between two representations"
        )
        interp_parser.add_argument(
            "--encoder", required=True, help="Encoder checkpoint"
        )
        interp_parser.add_argument(
            "--denoiser", required=True, help="Denoiser checkpoint"
        )
        interp_parser.add_argument(
            "--a", required=True, help="First validation id or index"
        )
        interp_parser.add_argument(
            "--b", required=True, help="Second validation id or index"
        )
        interp_parser.add_argument(
            "--steps", type=int, help="Interpolation weights incl. endpoints"
        )
        interp_parser.add_argument("--count", type=int, help="Samples per weight")
        self._add_common(interp_parser)

        kde_parser = subparsers.add_parser(
            "kde-sample",
            help="Unconditional sampling through a KDE over representations",
        )
        kde_parser.add_argument("--encoder", required=True, help="Encoder checkpoint")
        kde_parser.add_argument("--denoiser", required=True, help="Denoiser checkpoint")
        kde_parser.add_argument(
            "--sigma", type=float, help="KDE bandwidth (standard deviation)"
        )
        kde_parser.add_argument("--count", type=int, help="Number of samples")
        self._add_common(kde_parser)

    def _add_analysis_commands(self, subparsers):
        """Add matching, manipulation, attack and evaluation commands."""

        match_parser = subparsers.add_parser(
            "match", help="Gradient-based representation matching (J-table)"
        )
        match_parser.add_argument("--encoder", required=True, help="Encoder checkpoint")
        match_parser.add_argument(
            "--source", choices=[s.value for s in Source], default="backbone"
        )
        match_parser.add_argument(
            "--index", type=int, default=0, help="Validation image to match"
        )
        match_parser.add_argument(
            "--distances", nargs="+", choices=[d.value for d in repmatch.DistanceKind]
        )
        match_parser.add_argument(
            "--optimizers", nargs="+", choices=[o.value for o in repmatch.OptimizerKind]
        )
        match_parser.add_argument(
            "--schedules", nargs="+", choices=[s.value for s in repmatch.LrSchedule]
        )
        match_parser.add_argument(
            "--steps", type=int, help="Optimization steps per run"
        )
        match_parser.add_argument(
            "--nullspace",
            action="store_true",
            help="Also report the Jacobian nullspace dimension",
        )
        self._add_common(match_parser)

        manip_parser = subparsers.add_parser(
            "manipulate", help="Zero, swap or add representation dimensions and sample"
        )
        manip_parser.add_argument("--encoder", required=True, help="Encoder checkpoint")
        manip_parser.add_argument(
            "--denoiser", required=True, help="Denoiser checkpoint"
        )
        manip_parser.add_argument(
            "--op", choices=["zero", "swap", "algebra"], required=True
        )
        self._add_conditioning(manip_parser)
        manip_parser.add_argument(
            "--donor", help="Validation id or index donating values (swap)"
        )
        manip_parser.add_argument(
            "--plus", help="Validation id or index added (algebra)"
        )
        manip_parser.add_argument(
            "--minus", help="Validation id or index subtracted (algebra)"
        )
        dims_group = manip_parser.add_mutually_exclusive_group()
        dims_group.add_argument(
            "--dims", type=int, nargs="*", help="Explicit dimensions"
        )
        dims_group.add_argument(
            "--common",
            action="store_true",
            help="Most common non-zero dims of the neighborhood",
        )
        dims_group.add_argument(
            "--least",
            action="store_true",
            help="Least common non-zero dims of the neighborhood",
        )
        manip_parser.add_argument("--k", type=int, help="Neighborhood size")
        manip_parser.add_argument(
            "--top-m", type=int, help="Number of dimensions to mask"
        )
        manip_parser.add_argument(
            "--count", type=int, help="Samples per representation"
        )
        self._add_common(manip_parser)

        attack_parser = subparsers.add_parser("attack", help="FGSM epsilon sweep")
        attack_parser.add_argument(
            "--encoder", required=True, help="Encoder checkpoint"
        )
        attack_parser.add_argument(
            "--probe", help="Probe checkpoint (trained inline if omitted)"
        )
        attack_parser.add_argument(
            "--denoiser", help="Denoiser checkpoint for conditional samples"
        )
        attack_parser.add_argument(
            "--index", type=int, default=0, help="Validation image to attack"
        )
        attack_parser.add_argument(
            "--epsilons", type=float, nargs="+", help="Attack strengths"
        )
        attack_parser.add_argument(
            "--target", type=int, help="Target class (targeted attack)"
        )
        self._add_common(attack_parser)

        eval_parser = subparsers.add_parser(
            "evaluate", help="Quantitative evaluation suites"
        )
        eval_parser.add_argument(
            "--suite",
            choices=["faithfulness", "distance", "invariance", "fid"],
            required=True,
        )
        eval_parser.add_argument("--encoder", required=True, help="Encoder checkpoint")
        eval_parser.add_argument(
            "--denoiser", help="Denoiser checkpoint (faithfulness)"
        )
        eval_parser.add_argument(
            "--samples", help="Generated samples .npy (distance, fid)"
        )
        eval_parser.add_argument(
            "--probe", help="Classifier probe for the entropy score (fid)"
        )
        eval_parser.add_argument(
            "--index", type=int, default=0, help="Conditioning validation image"
        )
        eval_parser.add_argument(
            "--items", type=int, help="Conditioning items or probed images"
        )
        eval_parser.add_argument(
            "--count", type=int, help="Samples per conditioning item"
        )
        self._add_common(eval_parser)

    def _add_utility_commands(self, subparsers):
        """Add utility commands."""

        replay_parser = subparsers.add_parser(
            "replay", help="Re-run a command from its manifest and compare checksums"
        )
        replay_parser.add_argument("manifest", help="Manifest file or run directory")
        replay_parser.add_argument(
            "--out", required=True, help="Output directory for the replay"
        )

        subparsers.add_parser(
            "info", aliases=["version"], help="Show version and features"
        )

    def run(self, args: Optional[List[str]] = None) -> int:
        """Run the CLI with given arguments."""
        argv = list(sys.argv[1:] if args is None else args)
        parser = self.create_parser()
        parsed_args = parser.parse_args(argv)
        self._argv = argv
        self._configure_logging(parsed_args.verbose, parsed_args.debug)

        if not parsed_args.command:
            parser.print_help()
            return 0

        try:
            return self._handle_command(parsed_args)
        except KeyboardInterrupt:
            print("\n⚠️ Operation cancelled by user")
            return 1
        except RcdmError as e:
            if parsed_args.debug:
                raise
            reason = " ".join(str(e).split())
            sys.stderr.write(
                f"error kind={e.kind} exit={e.exit_code} reason={reason}\n"
            )
            return e.exit_code

    @staticmethod
    def _configure_logging(verbose: bool, debug: bool) -> None:
        level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
        logging.basicConfig(level=level, format=LOG_FORMAT, force=True)

    def _handle_command(self, args) -> int:
        """Handle specific command execution."""
        command = args.command

        if command in ("info", "version"):
            return self._cmd_info(args)
        if command == "replay":
            return self._cmd_replay(args)

        handlers = {
            "train-encoder": self._cmd_train_encoder,
            "train-rcdm": self._cmd_train_rcdm,
            "sample": self._cmd_sample,
            "interpolate": self._cmd_interpolate,
            "kde-sample": self._cmd_kde_sample,
            "match": self._cmd_match,
            "manipulate": self._cmd_manipulate,
            "attack": self._cmd_attack,
            "evaluate": self._cmd_evaluate,
        }
        if command not in handlers:
            print(f"❌ Unknown command: {command}")
            return 2

        config = Config.load(args.config, args.set, self._flags(args))
        if config.get("runtime.threads"):
            torch.set_num_threads(int(config.get("runtime.threads")))
        out_dir = Path(args.out or Path("runs") / command)
        with OutputLock(out_dir):
            ctx = RunContext(command, self._argv, config, out_dir)
            code = handlers[command](args, ctx)
            ctx.recorder.finish()
        print(f"📁 Artifacts and manifest written to {out_dir}")
        return code

    @staticmethod
    def _flags(args) -> Dict[str, Any]:
        """Dedicated flags as dotted config keys; unset flags are ``None``."""
        flags: Dict[str, Any] = {"runtime.seed": args.seed}
        steps = getattr(args, "steps", None)
        command = args.command
        if command == "train-encoder":
            section = "ssl" if args.flavor == Provenance.SSL.value else "supervised"
            flags[f"{section}.steps"] = steps
        elif command == "train-rcdm":
            flags["rcdm.steps"] = steps
            flags["rcdm.source"] = args.source
        elif command == "interpolate":
            flags["sample.interpolation_steps"] = steps
        elif command == "match":
            flags["match.steps"] = steps
        if command in ("sample", "interpolate", "kde-sample", "manipulate", "evaluate"):
            flags["sample.count"] = getattr(args, "count", None)
        if command == "kde-sample":
            flags["kde.sigma"] = args.sigma
        if command == "manipulate":
            flags["repops.k"] = args.k
            flags["repops.top_m"] = args.top_m
        if command == "attack":
            flags["attack.epsilons"] = args.epsilons
            flags["attack.target"] = args.target
            flags["attack.targeted"] = True if args.target is not None else None
        if command == "evaluate":
            flags["sample.heldout"] = args.items
        return flags

    # Shared helpers
    @staticmethod
    def _dataset(ctx: RunContext, split: str) -> ImageDataset:
        return dataset_from_config(ctx.config.section("data"), split)

    @staticmethod
    def _load_encoder(ctx: RunContext, path: str) -> EncoderModel:
        encoder = checkpoint.load_encoder(path)
        ctx.recorder.fingerprint("encoder", encoder.fingerprint())
        return encoder

    @staticmethod
    def _load_denoiser(ctx: RunContext, path: str, encoder: EncoderModel):
        net = checkpoint.load_denoiser(path)
        expected = net.metadata.get("encoder_fingerprint")
        if expected and expected != encoder.fingerprint():
            raise FingerprintMismatchError(
                f"denoiser {path} was trained on a different encoder than the one given"
            )
        ctx.recorder.fingerprint("denoiser_encoder", expected or "")
        return net

    @staticmethod
    def _schedule(ctx: RunContext, net) -> NoiseSchedule:
        stored = net.metadata.get("schedule")
        if stored:
            return NoiseSchedule.from_dict(stored)
        return schedule_from_config(ctx.config.section("schedule"))

    @staticmethod
    def _item(dataset: ImageDataset, ref: Any) -> int:
        """Resolve a validation reference (id or integer index) to a row."""
        if isinstance(ref, int) or (isinstance(ref, str) and ref.lstrip("-").isdigit()):
            index = int(ref)
            if not 0 <= index < len(dataset):
                raise IndexOutOfRangeError(f"index {index} outside [0, {len(dataset)})")
            return index
        return dataset.index_of(str(ref))

    def _conditioning(
        self, ctx: RunContext, args, encoder: EncoderModel, source: Source
    ) -> Tuple[torch.Tensor, Dict[str, Any], Optional[torch.Tensor]]:
        """The representation named by ``--index/--id/--image/--h-file``.

        Returns:
            Tuple: (h of shape (K,), description, conditioning image or None)
        """
        h_file = getattr(args, "h_file", None)
        if h_file:
            path = Path(h_file)
            if not path.is_file():
                raise ArtifactError(f"missing representation file: {path}")
            if path.suffix == ".npy":
                values = np.load(path)
            else:
                values = np.asarray(
                    json.loads(path.read_text(encoding="utf-8")), dtype=np.float32
                )
            h = torch.as_tensor(values, dtype=torch.float32).reshape(-1)
            return h, {"kind": "h-file", "path": str(path)}, None

        if getattr(args, "image", None):
            size = int(ctx.config.get("data.image_size", 32))
            image = torch.from_numpy(load_image(args.image, size)).unsqueeze(0)
            h = encode_source(image, encoder, source).values[0]
            return h, {"kind": "image", "path": str(args.image)}, image

        dataset = self._dataset(ctx, "val")
        ref = args.id if getattr(args, "id", None) else args.index
        index = self._item(dataset, 0 if ref is None else ref)
        image = dataset.images[index : index + 1]
        h = encode_source(image, encoder, source).values[0]
        return h, {"kind": "dataset", "id": dataset.ids[index], "index": index}, image

    # Command implementations
    def _cmd_train_encoder(self, args, ctx: RunContext) -> int:
        """Train or initialize an encoder."""
        dataset = self._dataset(ctx, "train")
        encoder_config = EncoderConfig(
            image_channels=dataset.images.shape[1],
            image_size=dataset.images.shape[-1],
            **ctx.config.section("encoder"),
        )
        flavor = Provenance(args.flavor)
        print(f"🧠 Training {flavor.value} encoder on {len(dataset)} images")

        if flavor is Provenance.SSL:
            encoder = train_ssl(
                dataset,
                ctx.config.section("ssl"),
                ctx.generator,
                encoder_config,
                policy_from_config(ctx.config.section("augment")),
                progress=ctx.progress,
            )
        elif flavor is Provenance.SUPERVISED:
            encoder = train_supervised(
                dataset,
                ctx.config.section("supervised"),
                ctx.generator,
                encoder_config,
                ctx.progress,
            )
        else:
            encoder = build_encoder(encoder_config, Provenance.RANDOM, ctx.seed)

        path = checkpoint.save_encoder(encoder, ctx.path("encoder.ckpt"))
        ctx.recorder.artifact("encoder", path)
        ctx.recorder.fingerprint("encoder", encoder.fingerprint())
        ctx.write_json("training_log.json", encoder.training_log)

        print(f"✅ Encoder saved: {path}")
        for key in ("heldout_loss", "random_init_heldout_loss", "train_accuracy"):
            if key in encoder.metadata:
                print(f"   {key}: {encoder.metadata[key]:.4f}")
        return 0

    def _cmd_train_rcdm(self, args, ctx: RunContext) -> int:
        """Train a denoiser on a frozen encoder."""
        encoder = self._load_encoder(ctx, args.encoder)
        source = encoder.check_source(ctx.config.get("rcdm.source"))
        dataset = self._dataset(ctx, "train")

        section = ctx.config.section("denoiser")
        rep_dim = encoder.output_dim(source)
        if section.get("rep_dim") is not None and int(section["rep_dim"]) != rep_dim:
            raise FingerprintMismatchError(
                f"encoder {source.value} output has K={rep_dim}, "
                f"denoiser config expects K={section['rep_dim']}"
            )
        section["rep_dim"] = rep_dim
        denoiser_config = DenoiserConfig(
            image_channels=dataset.images.shape[1],
            image_size=dataset.images.shape[-1],
            **section,
        )
        schedule = schedule_from_config(ctx.config.section("schedule"))
        bank = ctx.cache.representation(dataset, encoder, source)

        print(
            f"🌫️ Training RCDM on {len(dataset)} images ({source.value}, K={rep_dim})"
        )
        net = train_rcdm(
            encoder,
            dataset,
            ctx.config.section("rcdm"),
            ctx.generator,
            schedule,
            denoiser_config,
            source,
            bank=bank,
            progress=ctx.progress,
        )
        path = checkpoint.save_denoiser(net, ctx.path("denoiser.ckpt"))
        ctx.recorder.artifact("denoiser", path)
        ctx.write_json("training_log.json", net.training_log)
        print(f"✅ Denoiser saved: {path}")
        return 0

    def _cmd_sample(self, args, ctx: RunContext) -> int:
        """Sample images conditioned on one or several representations."""
        encoder = self._load_encoder(ctx, args.encoder)
        net = self._load_denoiser(ctx, args.denoiser, encoder)
        source = Source(net.metadata.get("source", "backbone"))
        schedule = self._schedule(ctx, net)
        count = int(ctx.config.get("sample.count"))

        if args.heldout:
            dataset = self._dataset(ctx, "val")
            n = min(int(args.heldout), len(dataset))
            images = dataset.images[:n]
            reps = encode_source(images, encoder, source).values
            rows = sample_grid_rows(net, list(reps), schedule, ctx.generator, count)
            samples = torch.cat(rows)
            conditioning = {"kind": "heldout", "ids": dataset.ids[:n]}
            ctx.write_rows(
                "samples.png",
                [torch.cat([images[i : i + 1], r]) for i, r in enumerate(rows)],
            )
        else:
            h, conditioning, image = self._conditioning(ctx, args, encoder, source)
            samples = sample_conditional(net, h, schedule, ctx.generator, count)
            row = samples if image is None else torch.cat([image, samples])
            ctx.write_grid("samples.png", row, (1, row.shape[0]))
            conditioning["h"] = h.tolist()

        conditioning.update(
            {"source": source.value, "count": count, "seed": ctx.seed, "T": schedule.T}
        )
        ctx.write_array("samples.npy", samples.numpy())
        ctx.write_json("conditioning.json", conditioning)
        print(f"✅ Generated {samples.shape[0]} samples")
        return 0

    def _cmd_interpolate(self, args, ctx: RunContext) -> int:
        """Sample along the segment between two validation representations."""
        encoder = self._load_encoder(ctx, args.encoder)
        net = self._load_denoiser(ctx, args.denoiser, encoder)
        source = Source(net.metadata.get("source", "backbone"))
        schedule = self._schedule(ctx, net)
        dataset = self._dataset(ctx, "val")
        ia, ib = self._item(dataset, args.a), self._item(dataset, args.b)
        reps = encode_source(dataset.images[[ia, ib]], encoder, source).numpy()

        steps = max(2, int(ctx.config.get("sample.interpolation_steps")))
        count = int(ctx.config.get("sample.count"))
        lambdas = np.linspace(0.0, 1.0, steps)
        rows = [
            sample_conditional(
                net,
                interpolate(reps[0], reps[1], float(lam)).astype(np.float32),
                schedule,
                ctx.generator,
                count,
            )
            for lam in lambdas
        ]
        # one column per weight, one row per noise draw
        columns = torch.stack(rows, dim=1)
        ctx.write_grid(
            "interpolation.png", columns.reshape(-1, *columns.shape[2:]), (count, steps)
        )
        ctx.write_array("samples.npy", torch.cat(rows).numpy())
        ctx.write_json(
            "conditioning.json",
            {
                "a": dataset.ids[ia],
                "b": dataset.ids[ib],
                "lambdas": lambdas.tolist(),
                "source": source.value,
            },
        )
        print(
            f"✅ Interpolated {dataset.ids[ia]} -> {dataset.ids[ib]} in {steps} steps"
        )
        return 0

    def _cmd_kde_sample(self, args, ctx: RunContext) -> int:
        """Unconditional samples from a KDE over training representations."""
        encoder = self._load_encoder(ctx, args.encoder)
        net = self._load_denoiser(ctx, args.denoiser, encoder)
        source = Source(net.metadata.get("source", "backbone"))
        schedule = self._schedule(ctx, net)
        bank = ctx.cache.bank(self._dataset(ctx, "train"), encoder, source)

        kde = kde_fit(bank.reps, float(ctx.config.get("kde.sigma")))
        count = int(ctx.config.get("sample.count"))
        h = kde_sample(kde, ctx.rng, count).astype(np.float32)
        samples = sample_conditional(net, h, schedule, ctx.generator, count)

        ctx.write_array("kde_representations.npy", h)
        ctx.write_array("samples.npy", samples.numpy())
        ctx.write_grid("samples.png", samples)
        ctx.write_json(
            "conditioning.json",
            {"kind": "kde", "sigma": kde.sigma, "bank_size": kde.size},
        )
        print(f"✅ Generated {count} unconditional samples (sigma={kde.sigma})")
        return 0

    def _cmd_match(self, args, ctx: RunContext) -> int:
        """Match a validation image's representation from a random start."""
        encoder = self._load_encoder(ctx, args.encoder)
        source = Source(args.source)
        dataset = self._dataset(ctx, "val")
        index = self._item(dataset, args.index)
        image = dataset.images[index : index + 1]
        f = encoder.representation_fn(source)
        with torch.no_grad():
            h_target = f(image)[0]

        section = ctx.config.section("match")
        base = repmatch.MatchConfig.from_dict(section)
        x_init = repmatch.random_init(image.shape, ctx.generator)
        results = repmatch.run_jtable(
            f,
            h_target,
            x_init,
            base,
            args.distances or [section["distance"]],
            args.optimizers or [section["optimizer"]],
            args.schedules or [section["lr_schedule"]],
            source_image=image,
        )
        rows = [repmatch.JTableRow.from_result(r) for r in results]
        ctx.write_text("jtable.tsv", repmatch.render_jtable(rows))
        ctx.write_text("jtable.json", repmatch.jtable_json(rows))
        ctx.write_json(
            "matches.json",
            {"id": dataset.ids[index], "runs": [r.summary() for r in results]},
        )
        ctx.write_grid(
            "matched.png",
            torch.cat([image] + [r.x_final.clamp(-1, 1) for r in results]),
        )

        if args.nullspace:
            null = repmatch.nullspace_dimension(f, image)
            d, k = image.numel(), encoder.output_dim(source)
            ctx.write_json(
                "nullspace.json",
                {"D": d, "K": k, "nullspace_dimension": null, "bound": d - k},
            )
            print(f"📐 Nullspace dimension {null} (D - K = {d - k})")

        print(repmatch.render_jtable(rows), end="")
        return 0

    def _cmd_manipulate(self, args, ctx: RunContext) -> int:
        """Edit a representation and sample from both the original and the edit."""
        encoder = self._load_encoder(ctx, args.encoder)
        net = self._load_denoiser(ctx, args.denoiser, encoder)
        source = Source(net.metadata.get("source", "backbone"))
        schedule = self._schedule(ctx, net)
        h, conditioning, image = self._conditioning(ctx, args, encoder, source)
        val = self._dataset(ctx, "val")
        section = ctx.config.section("repops")

        def rep_of(ref: Optional[str], flag: str) -> np.ndarray:
            if ref is None:
                raise ConfigurationError(f"--op {args.op} needs {flag}")
            index = self._item(val, ref)
            rep = encode_source(val.images[index : index + 1], encoder, source)
            return rep.numpy()[0]

        report: Dict[str, Any] = {"op": args.op, "conditioning": conditioning}
        if args.op == "algebra":
            edited = repops.rep_algebra(
                h.numpy(), rep_of(args.plus, "--plus"), rep_of(args.minus, "--minus")
            )
            report.update({"plus": args.plus, "minus": args.minus})
        else:
            donor = rep_of(args.donor, "--donor") if args.op == "swap" else None
            if args.common or args.least:
                bank = ctx.cache.bank(self._dataset(ctx, "train"), encoder, source)
                edited, dims, neighbors = repops.neighborhood_mask(
                    h.numpy(),
                    bank,
                    int(section["k"]),
                    section.get("top_m"),
                    float(section["zero_tol"]),
                    least=args.least,
                    donor=donor,
                )
                report["neighbors"] = neighbors
            else:
                dims = list(args.dims or [])
                if donor is None:
                    edited = repops.zero_dims(h.numpy(), dims)
                else:
                    edited = repops.swap_dims(h.numpy(), donor, dims)
            report["dims"] = dims

        count = int(ctx.config.get("sample.count"))
        original = sample_conditional(net, h, schedule, ctx.generator, count)
        manipulated = sample_conditional(
            net, edited.astype(np.float32), schedule, ctx.generator, count
        )
        ctx.write_rows("manipulation.png", [original, manipulated])
        ctx.write_array("manipulated.npy", edited)
        ctx.write_array("samples.npy", manipulated.numpy())
        ctx.write_json("manipulation.json", report)
        print(f"✅ {args.op} manipulation sampled ({count} per row)")
        return 0

    def _cmd_attack(self, args, ctx: RunContext) -> int:
        """FGSM sweep on one validation image plus accuracy degradation on the split."""
        encoder = self._load_encoder(ctx, args.encoder)
        if args.probe:
            probe = checkpoint.load_probe(args.probe)
        else:
            probe = advprobe.train_probe(
                encoder,
                self._dataset(ctx, "train"),
                ctx.config.section("probe"),
                ctx.generator,
            )
            ctx.recorder.artifact(
                "probe", checkpoint.save_probe(probe, ctx.path("probe.ckpt"))
            )
        probe.check_encoder(encoder)

        val = self._dataset(ctx, "val")
        if val.labels is None:
            raise ConfigurationError("attacks need a labeled dataset")
        index = self._item(val, args.index)
        section = ctx.config.section("attack")
        target = section.get("target") if section.get("targeted") else None

        net, schedule = None, None
        if args.denoiser:
            net = self._load_denoiser(ctx, args.denoiser, encoder)
            schedule = self._schedule(ctx, net)
        bank = ctx.cache.bank(val, encoder, probe.source)

        records = advprobe.attack_sweep(
            val.images[index : index + 1],
            int(val.labels[index]),
            encoder,
            probe,
            section["epsilons"],
            bank=bank,
            conditioning_id=val.ids[index],
            denoiser=net,
            schedule=schedule,
            generator=ctx.generator,
            samples_per_epsilon=int(section["samples_per_epsilon"]),
            grid_dir=ctx.out_dir,
            target=target,
        )
        for record in records:
            if record.grid:
                ctx.recorder.artifact(Path(record.grid).name, record.grid)
        degradation = advprobe.degradation_report(
            val.images, val.labels, encoder, probe, section["epsilons"]
        )
        ctx.write_json(
            "attack.json",
            {
                "id": val.ids[index],
                "records": [r.to_dict() for r in records],
                "degradation": degradation,
            },
        )
        for row in degradation:
            print(f"🎯 epsilon {row['epsilon']:.3f}: accuracy {row['accuracy']:.3f}")
        return 0

    def _cmd_evaluate(self, args, ctx: RunContext) -> int:
        """Run one evaluation suite."""
        encoder = self._load_encoder(ctx, args.encoder)
        suite = args.suite
        if suite == "faithfulness":
            return self._eval_faithfulness(args, ctx, encoder)
        if suite == "distance":
            return self._eval_distance(args, ctx, encoder)
        if suite == "invariance":
            return self._eval_invariance(args, ctx, encoder)
        return self._eval_fid(args, ctx, encoder)

    @staticmethod
    def _load_samples(path: Optional[str]) -> torch.Tensor:
        if not path or not Path(path).is_file():
            raise ArtifactError(f"missing generated samples: {path or 'none given'}")
        samples = torch.from_numpy(np.load(path)).float()
        if samples.ndim != 4 or samples.shape[0] == 0:
            raise ArtifactError(f"no generated samples in {path}")
        return samples

    def _eval_faithfulness(self, args, ctx: RunContext, encoder: EncoderModel) -> int:
        if not args.denoiser:
            raise ArtifactError("faithfulness evaluation needs --denoiser")
        net = self._load_denoiser(ctx, args.denoiser, encoder)
        source = Source(net.metadata.get("source", "backbone"))
        schedule = self._schedule(ctx, net)
        metric = ctx.config.get("evaluate.metric")

        val = self._dataset(ctx, "val")
        bank = ctx.cache.bank(val, encoder, source)
        bank = repops.RepresentationBank(
            bank.reps, bank.ids, bank.labels, metric, bank.metadata
        )
        items = min(int(ctx.config.get("sample.heldout")), len(bank))
        ids = [bank.ids[i] for i in ctx.rng.permutation(len(bank))[:items]]
        report, samples = faitheval.sample_and_rank(
            net,
            encoder,
            bank,
            ids,
            schedule,
            ctx.generator,
            int(ctx.config.get("sample.count")),
            source,
        )
        sample_reps = encode_source(samples, encoder, source).numpy()
        null_ranks = faitheval.null_model_ranks(
            sample_reps, report.conditioning_ids, bank, ctx.rng
        )
        null = faitheval.FaithfulnessReport.from_ranks(null_ranks, len(bank), metric)
        train_bank = ctx.cache.bank(self._dataset(ctx, "train"), encoder, source)
        neighbors = faitheval.nearest_training_neighbors(
            sample_reps[: min(16, len(sample_reps))],
            train_bank,
            int(ctx.config.get("evaluate.nearest_k")),
        )

        ctx.write_json(
            "faithfulness.json",
            {
                "rcdm": report.to_dict(),
                "null_model": null.to_dict(),
                "nearest_training": neighbors,
            },
        )
        table = faitheval.render_rank_table([("rcdm", report), ("null model", null)])
        ctx.write_text("rank_table.txt", table)
        ctx.write_array("samples.npy", samples.numpy())
        print(table, end="")
        return 0

    def _eval_distance(self, args, ctx: RunContext, encoder: EncoderModel) -> int:
        samples = self._load_samples(args.samples)
        val = self._dataset(ctx, "val")
        index = self._item(val, args.index)
        section = ctx.config.section("evaluate")
        report = faitheval.distance_reference_suite(
            val.images[index : index + 1],
            encoder,
            val,
            self._dataset(ctx, "train"),
            samples,
            policy_from_config(ctx.config.section("augment")),
            ctx.generator,
            label=int(val.labels[index]) if val.labels is not None else None,
            random_count=int(section["random_count"]),
            nearest_k=int(section["nearest_k"]),
            num_augmentations=int(section["num_augmentations"]),
        )
        ctx.write_json("distance.json", {"id": val.ids[index], **report.to_dict()})
        table = faitheval.render_distance_table(report)
        ctx.write_text("distance_table.txt", table)
        print(table, end="")
        return 0

    def _eval_invariance(self, args, ctx: RunContext, encoder: EncoderModel) -> int:
        val = self._dataset(ctx, "val")
        transforms = ctx.config.get("evaluate.transforms")
        index = self._item(val, args.index)
        rows = faitheval.invariance_probe(
            val.images[index : index + 1], transforms, encoder
        )
        items = min(int(args.items or 1), len(val))
        summary = faitheval.invariance_summary(val.images[:items], transforms, encoder)
        ctx.write_json(
            "invariance.json",
            {
                "id": val.ids[index],
                "rows": [vars(r) for r in rows],
                "summary": summary,
                "factors": {k: v[index].tolist() for k, v in val.factors.items()},
            },
        )
        for row in rows:
            print(f"🔍 {row.transform:<16} {row.source:<10} {row.distance:.6f}")
        return 0

    def _eval_fid(self, args, ctx: RunContext, encoder: EncoderModel) -> int:
        samples = self._load_samples(args.samples)
        val = self._dataset(ctx, "val")
        real = encode_source(val.images, encoder, Source.BACKBONE).numpy()
        fake = encode_source(samples, encoder, Source.BACKBONE).numpy()
        fid = faitheval.frechet_distance(real, fake)

        if args.probe:
            probe = checkpoint.load_probe(args.probe)
        else:
            probe = advprobe.train_probe(
                encoder,
                self._dataset(ctx, "train"),
                ctx.config.section("probe"),
                ctx.generator,
            )
        probe.check_encoder(encoder)
        probabilities = faitheval.class_probabilities(samples, encoder, probe)
        score = faitheval.inception_style_score(probabilities)

        ctx.write_json(
            "fid.json",
            {
                "fid": fid,
                "inception_style_score": score,
                "extractor_fingerprint": encoder.fingerprint(),
                "real_count": len(real),
                "sample_count": len(fake),
            },
        )
        table = faitheval.render_fid_table([("rcdm", fid, score)])
        ctx.write_text("fid_table.txt", table)
        print(table, end="")
        return 0

    def _cmd_replay(self, args) -> int:
        """Re-run a recorded command from its config snapshot and compare checksums."""
        manifest = load_manifest(args.manifest)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        snapshot = Config(manifest.config)
        snapshot_path = out_dir / "replay_config.yaml"
        snapshot.save(snapshot_path)

        print(f"🔁 Replaying {manifest.command} (seed {manifest.seed})")
        self._argv = replay_argv(manifest, snapshot_path, out_dir)
        code = self._handle_command(self.create_parser().parse_args(self._argv))
        if code != 0:
            return code

        replayed = load_manifest(out_dir)
        if replayed.checksums() != manifest.checksums():
            differing = sorted(
                name
                for name in set(manifest.checksums()) | set(replayed.checksums())
                if manifest.checksums().get(name) != replayed.checksums().get(name)
            )
            raise IntegrityError(f"replay checksums differ for {', '.join(differing)}")
        print(
            f"✅ Replay reproduced {len(manifest.artifacts)} artifacts byte-for-byte"
        )
        return 0

    def _cmd_info(self, args) -> int:
        """Show version and feature information."""
        from rcdmkit import check_features

        print(f"🎨 rcdmkit {__version__}")
        print(f"   {__description__}")
        print(f"   torch {torch.__version__}, numpy {np.__version__}")
        for name, available in check_features().items():
            print(f"   {'✅' if available else '❌'} {name}")
        return 0


def main(args: Optional[List[str]] = None) -> int:
    """Main entry point for rcdmkit CLI."""
    cli = RcdmCLI()
    return cli.run(args)


if __name__ == "__main__":
    sys.exit(main())
