"""Command-line entry point wiring all modules into reproducible runs.

Every command writes a JSON manifest (resolved configuration, seed, input
and output hashes) alongside its outputs, refuses to overwrite without
--force, and reads LWM_SEED as the default seed. Exit codes: 0 success,
1 usage, 2 data/format error, 3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .channels import (
    DftCodebook,
    ScenarioConfig,
    generate_channels,
    label_beams,
    read_dataset,
    write_dataset,
)
from .downstream import (
    FeatureKind,
    LabelKind,
    extract_features,
    export_embeddings,
    run_benchmark,
)
from .errors import LwmError
from .figures import (
    render_attention_grid,
    render_f1_lines,
    render_heatmap,
    render_loss_curves,
)
from .gradcheck import grad_check
from .model import LwmParameters, ModelConfig, capture_attention, forward_pretrain, micro_config
from .patches import PatchSequence, apply_mask, draw_mask, patchify
from .pretrain import Checkpoint, TrainConfig, load_checkpoint, run_pretraining, save_checkpoint
from .rng import substream

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _default_seed() -> int:
    return int(os.environ.get("LWM_SEED", "0"))


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _check_outputs(paths, force: bool) -> None:
    for p in paths:
        if Path(p).exists() and not force:
            raise UsageError(f"output {p} exists; pass --force to overwrite")


def _write_manifest(manifest_path, command: str, config: dict, seed: int,
                    inputs, outputs) -> None:
    manifest = {
        "tool": f"lwm {__version__}",
        "command": command,
        "config": config,
        "master_seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _csv_write(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def _parse_list(text: str, cast):
    try:
        return [cast(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    if not 0.0 <= args.los_prob <= 1.0:
        raise UsageError("--los-prob must lie in [0, 1]")
    cfg = ScenarioConfig(
        antennas=args.antennas, subcarriers=args.subcarriers, num_paths=args.paths,
        los_probability=args.los_prob, delay_spread=args.delay_spread,
        angle_spread=args.angle_spread, carrier_spacing=args.carrier_spacing,
        seed=args.seed)
    out = Path(args.out)
    manifest = out.with_suffix(out.suffix + ".manifest.json")
    _check_outputs([out, manifest], args.force)
    channels = generate_channels(cfg, args.count)
    if args.beams > 0 and channels:
        channels = label_beams(channels, DftCodebook.build(args.beams, cfg.antennas))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, channels)
    config = {"scenario": cfg.__dict__, "count": args.count, "beams": args.beams}
    _write_manifest(manifest, "gen-data", config, args.seed, [], [out])
    print(f"wrote {args.count} channels to {out}")
    return EXIT_OK


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_pretrain(args) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise FileNotFoundError(f"dataset {data_path} does not exist")
    overrides = _load_json(args.config) if args.config else {}
    model_cfg = ModelConfig(**overrides.get("model", {}))
    train_kwargs = dict(overrides.get("train", {}))
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    train_kwargs["master_seed"] = args.seed
    train_cfg = TrainConfig(**train_kwargs)

    out = Path(args.out)
    log_csv = Path(str(out) + ".log.csv")
    loss_png = Path(str(out) + ".loss.png")
    manifest = Path(str(out) + ".manifest.json")
    _check_outputs([out, log_csv, loss_png, manifest], args.force)

    channels = read_dataset(data_path)
    result = run_pretraining(channels, model_cfg, train_cfg,
                             progress=lambda s: print(
                                 f"epoch {s.epoch}: lr {s.lr:.3g} train {s.train_loss:.5f} "
                                 f"val {s.val_loss:.5f} nmse {s.val_nmse:.5f}"))
    ckpt = Checkpoint(model_cfg=model_cfg, train_cfg=train_cfg,
                      norm_constant=result.norm_constant, params=result.params,
                      epoch=train_cfg.epochs,
                      val_history=[s.val_nmse for s in result.history],
                      optimizer=result.opt)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, ckpt)
    _csv_write(log_csv,
               ["epoch", "lr", "train_loss", "val_loss", "val_nmse", "baseline_nmse"],
               [[s.epoch, repr(s.lr), repr(s.train_loss), repr(s.val_loss),
                 repr(s.val_nmse), repr(result.baseline)] for s in result.history])
    if result.history:
        render_loss_curves(result.history, loss_png)
        figures = [loss_png]
    else:
        figures = []
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
              "norm_constant": result.norm_constant, "baseline_nmse": result.baseline}
    _write_manifest(manifest, "pretrain", config, args.seed,
                    [data_path], [out, log_csv] + figures)
    print(f"checkpoint written to {out} (baseline NMSE {result.baseline:.4f})")
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    channels = read_dataset(args.data)
    if not channels:
        raise UsageError("dataset is empty")
    label_kind = LabelKind.BEAM if args.label == "beam" else LabelKind.LOS
    kinds = {"cls": [FeatureKind.CLS], "channel": [FeatureKind.CHANNEL_EMB],
             "both": [FeatureKind.CLS, FeatureKind.CHANNEL_EMB]}[args.kind]
    out = Path(args.out)
    outputs = []
    if len(kinds) == 1:
        paths = [out]
    else:
        paths = [out.with_name(out.stem + "_cls" + out.suffix),
                 out.with_name(out.stem + "_channel" + out.suffix)]
    manifest = Path(str(out) + ".manifest.json")
    _check_outputs(paths + [manifest], args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    for kind, path in zip(kinds, paths):
        feats = extract_features(channels, ckpt, kind, label_kind, snr_db=args.snr_db)
        export_embeddings(feats, path)
        outputs.append(path)
    config = {"kind": args.kind, "label": args.label, "snr_db": args.snr_db}
    _write_manifest(manifest, "embed", config, args.seed,
                    [args.checkpoint, args.data], outputs)
    print(f"wrote embeddings for {len(channels)} channels")
    return EXIT_OK


def cmd_downstream(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    channels = read_dataset(args.data)
    task = LabelKind.BEAM if args.task == "beam" else LabelKind.LOS
    kinds = _parse_list(args.features, str)
    fractions = _parse_list(args.train_frac, float)
    seeds = _parse_list(args.seeds, int)
    codebooks = _parse_list(args.codebook, int) if args.codebook else []

    out_dir = Path(args.out)
    results_csv = out_dir / "results.csv"
    summary_csv = out_dir / "summary.csv"
    manifest = out_dir / "manifest.json"
    _check_outputs([results_csv, summary_csv, manifest], args.force)
    out_dir.mkdir(parents=True, exist_ok=True)

    bench = run_benchmark(channels, ckpt, task, kinds, fractions, seeds,
                          codebook_sizes=codebooks or None,
                          noise_snr_db=args.noise_snr_db, epochs=args.epochs,
                          jobs=args.jobs, finetune_k=args.finetune_k)

    _csv_write(results_csv,
               ["task", "feature_kind", "codebook_size", "train_fraction", "seed", "f1"],
               [[r.task, r.feature_kind, r.codebook_size if r.codebook_size else "",
                 repr(r.train_fraction), r.seed, repr(r.f1)] for r in bench.rows])
    stats = bench.cell_stats()
    _csv_write(summary_csv,
               ["feature_kind", "codebook_size", "train_fraction", "mean_f1", "std_f1", "runs"],
               [[fk, cb if cb else "", repr(frac), repr(mean), repr(std), n]
                for (fk, cb, frac), (mean, std, n) in sorted(stats.items(),
                                                             key=lambda kv: (kv[0][0], kv[0][1] or 0, kv[0][2]))])
    outputs = [results_csv, summary_csv]

    grids = bench.grids_vs_raw()
    for kind, tables in grids.items():
        for table_name, cells in tables.items():
            path = out_dir / f"{table_name}_{kind}.csv"
            _csv_write(path, ["codebook_size", "train_fraction", "value"],
                       [[cb if cb else "", repr(frac), repr(val)]
                        for (cb, frac), val in sorted(cells.items(),
                                                      key=lambda kv: (kv[0][0] or 0, kv[0][1]))])
            outputs.append(path)

    outputs.extend(_downstream_figures(bench, task, kinds, fractions, codebooks, out_dir))

    with open(out_dir / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(bench.metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(out_dir / "metadata.json")

    config = {"task": args.task, "features": kinds, "train_fractions": fractions,
              "codebooks": codebooks, "seeds": seeds, "epochs": args.epochs,
              "noise_snr_db": args.noise_snr_db, "finetune_k": args.finetune_k}
    _write_manifest(manifest, "downstream", config, seeds[0] if seeds else 0,
                    [args.checkpoint, args.data], outputs)
    print(f"benchmark grid written to {out_dir}")
    return EXIT_OK


def _downstream_figures(bench, task, kinds, fractions, codebooks, out_dir) -> list:
    stats = bench.cell_stats()
    outputs = []
    if task is LabelKind.BEAM:
        for kind in kinds:
            grid = np.full((len(codebooks), len(fractions)), np.nan)
            for i, cb in enumerate(codebooks):
                for j, frac in enumerate(fractions):
                    cell = stats.get((kind, cb, float(frac)))
                    if cell:
                        grid[i, j] = cell[0]
            path = out_dir / f"f1_{kind}.png"
            render_heatmap(grid, codebooks, fractions, path, title=f"{kind} macro-F1")
            outputs.append(path)
        for kind, tables in bench.grids_vs_raw().items():
            for table_name, cells in tables.items():
                grid = np.full((len(codebooks), len(fractions)), np.nan)
                for (cb, frac), val in cells.items():
                    grid[codebooks.index(cb), fractions.index(frac)] = val
                path = out_dir / f"{table_name}_{kind}.png"
                render_heatmap(grid, codebooks, fractions, path,
                               title=f"{kind} {table_name.replace('_', ' ')} vs raw")
                outputs.append(path)
    else:
        series = {}
        for kind in kinds:
            values = [stats.get((kind, None, float(f)), (np.nan,))[0] for f in fractions]
            series[kind] = values
        path = out_dir / "f1_vs_fraction.png"
        render_f1_lines(fractions, series, path, title="LoS/NLoS macro-F1")
        outputs.append(path)
    return outputs


def cmd_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    channels = read_dataset(args.data)
    if not 0 <= args.channel_index < len(channels):
        raise UsageError(f"--channel-index must address one of {len(channels)} channels")
    ch = channels[args.channel_index].scaled(ckpt.norm_constant)
    capture = capture_attention(ch, ckpt.params, ckpt.model_cfg)
    out_dir = Path(args.out)
    manifest = out_dir / "manifest.json"
    _check_outputs([manifest], args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    layers, heads = capture.maps.shape[0], capture.maps.shape[1]
    for li in range(layers):
        for hi in range(heads):
            path = out_dir / f"attn_l{li}_h{hi}.csv"
            np.savetxt(path, capture.maps[li, hi], delimiter=",", fmt="%.9g")
            outputs.append(path)
    png = out_dir / "attention.png"
    render_attention_grid(capture.maps, png)
    outputs.append(png)
    config = {"channel_index": args.channel_index}
    _write_manifest(manifest, "attention", config, args.seed,
                    [args.checkpoint, args.data], outputs)
    print(f"wrote {layers * heads} attention maps to {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = micro_config()
    rng = substream(args.seed, "init")
    params = LwmParameters.init(cfg, rng)
    patches = substream(args.seed, "data").standard_normal(
        (1, cfg.num_patches, cfg.patch_len))
    seq = PatchSequence(patches[0])
    spec = draw_mask(cfg.num_patches, None, substream(args.seed, "mask"), count=2)
    masked, targets = apply_mask(seq, spec, substream(args.seed, "mask-fill"))
    idx = np.array(sorted(targets), dtype=np.intp)[None, :]
    vals = np.stack([targets[i] for i in sorted(targets)])[None, :, :]
    masked_batch = masked.patches[None, :, :]

    def loss_fn():
        return forward_pretrain(masked_batch, idx, vals, params, cfg,
                                training=True, rng=substream(args.seed, "dropout"))

    names = [name for name, _ in params.named_tensors()]
    report = grad_check(params.all_tensors(), loss_fn, tol=args.tol, step=args.step,
                        names=names)
    print(report)
    return EXIT_OK if report.passed else EXIT_CHECK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="lwm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"lwm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled synthetic channel dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--antennas", type=int, default=32)
    p.add_argument("--subcarriers", type=int, default=32)
    p.add_argument("--paths", type=int, default=8)
    p.add_argument("--los-prob", type=float, default=0.4)
    p.add_argument("--delay-spread", type=float, default=2e-7)
    p.add_argument("--angle-spread", type=float, default=0.5)
    p.add_argument("--carrier-spacing", type=float, default=120e3)
    p.add_argument("--beams", type=int, default=64,
                   help="codebook size for beam labels (0 disables)")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--config", default=None, help="JSON file with model/train overrides")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="export inference embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("cls", "channel", "both"), default="cls")
    p.add_argument("--label", choices=("los", "beam"), default="los")
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("downstream", help="benchmark heads on features vs raw channels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("los", "beam"), required=True)
    p.add_argument("--features", default="raw,cls",
                   help="comma list from raw,cls,channel,cls_noisy,finetune")
    p.add_argument("--train-frac", default="1.0", help="comma list of fractions")
    p.add_argument("--codebook", default="", help="comma list of codebook sizes (beam)")
    p.add_argument("--seeds", default="0", help="comma list of seeds")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--noise-snr-db", type=float, default=5.0)
    p.add_argument("--finetune-k", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_downstream)

    p = sub.add_parser("attention", help="export attention maps for one channel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--channel-index", type=int, default=0)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LwmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
