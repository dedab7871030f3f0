"""Command line interface.

Subcommands: phantom (synthesize and write NIfTI + bvals/bvecs), pretrain,
reconstruct (apply a checkpoint under a mask), eval (PSNR/SSIM/FA/MD CSV),
probe (frozen summary-vector probing), inspect (dump a NIfTI header).
Configuration comes from a flat ``key = value`` text file plus flag
overrides; ``--no-drope`` disables the relative rotary encoding for
ablation runs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .dmri_io import (DWIVolumeSet, PhantomSpec, crop_to_patch_grid,
                      default_region_layout, generate_phantom, normalize_by_b0,
                      read_bvals_bvecs, read_nifti, write_nifti)
from .mae import MAEModel, ModelConfig, encode_cls, make_mask, mae_forward
from .metrics import ProbeHead, fa_md_error, fit_dti, psnr, ssim, train_probe
from .trainkit import (TrainConfig, apply_config, load_checkpoint,
                       load_config_file, restore_model, run_pretrain)

S0_VALUE = 1000.0


def _parse_ints(text: str, n: int) -> tuple:
    parts = [int(tok) for tok in text.replace(",", " ").split()]
    if len(parts) == 1:
        parts = parts * n
    if len(parts) != n:
        raise ValueError(f"expected {n} integers, got {text!r}")
    return tuple(parts)


def _stem(path: str) -> str:
    return path[:-4] if path.endswith(".nii") else path


def _load_dwi(nii_path: str, bvals: str = None, bvecs: str = None) -> DWIVolumeSet:
    stem = _stem(nii_path)
    table = read_bvals_bvecs(bvals or stem + ".bval", bvecs or stem + ".bvec")
    raw, header = read_nifti(nii_path)
    if raw.ndim != 4:
        raise ValueError(f"{nii_path}: expected a 4D series, got shape {raw.shape}")
    if raw.shape[3] == table.n_volumes:
        return normalize_by_b0(raw, table, spacing=header.spacing)
    if raw.shape[3] == table.n_dwi:
        from .dmri_io import GradientTable
        return DWIVolumeSet(signal=np.clip(raw.astype(np.float64), 0.0, 2.0),
                            table=GradientTable.from_points(table.points),
                            spacing=header.spacing)
    raise ValueError(f"{nii_path}: {raw.shape[3]} volumes but the gradient table has "
                     f"{table.n_volumes} entries ({table.n_dwi} diffusion-weighted)")


def _crop_all(vols, patch) -> list:
    """Crop volumes whose extents don't divide the patch size."""
    out = []
    for v in vols:
        c = crop_to_patch_grid(v, patch)
        if c.extents != v.extents:
            print(f"note: cropped {v.extents} -> {c.extents} to fit patch {tuple(patch)}")
        out.append(c)
    return out


def _phantom_spec(size, dirs, shells, noise, seed) -> PhantomSpec:
    tensors, boxes = default_region_layout(size)
    return PhantomSpec(extents=size, region_tensors=tensors, region_boxes=boxes,
                       shells=tuple(shells), dirs_per_shell=dirs,
                       noise_sigma=noise, seed=seed)


def cmd_phantom(args) -> int:
    if args.spec:
        from .dmri_io import load_phantom_spec
        spec = load_phantom_spec(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    else:
        size = _parse_ints(args.size, 3)
        shells = tuple(float(tok) for tok in args.shells.replace(",", " ").split())
        spec = _phantom_spec(size, args.dirs, shells, args.noise, args.seed or 0)
    vol, _ = generate_phantom(spec)
    size = spec.extents
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, args.name)

    # raw-style series: one constant b=0 reference followed by S0 * attenuation
    raw = np.concatenate([np.full(tuple(size) + (1,), S0_VALUE),
                          S0_VALUE * vol.signal], axis=3)
    write_nifti(raw, args.spacing, stem + ".nii")
    bvals = [0.0] + [p.b for p in vol.table.points]
    vecs = [(0.0, 0.0, 0.0)] + [(p.dir.x, p.dir.y, p.dir.z) for p in vol.table.points]
    with open(stem + ".bval", "w") as f:
        f.write(" ".join(f"{b:g}" for b in bvals) + "\n")
    with open(stem + ".bvec", "w") as f:
        for axis in range(3):
            f.write(" ".join(f"{v[axis]:.8f}" for v in vecs) + "\n")
    print(f"wrote {stem}.nii, {stem}.bval, {stem}.bvec "
          f"({size[0]}x{size[1]}x{size[2]}, {len(bvals)} volumes)")
    return 0


def _build_configs(args) -> tuple:
    """Defaults <- config file <- --set pairs <- dedicated flags, validated
    once after the whole override stack is merged."""
    model_cfg = ModelConfig()
    train_cfg = TrainConfig()
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    for key in ("epochs", "seed", "strategy", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            values[key] = str(val)
    if getattr(args, "no_drope", False):
        values["drope"] = "false"
    apply_config(values, model_cfg, train_cfg)
    return model_cfg, train_cfg, set(values)


def _derive_b_fields(model_cfg, explicit, vols) -> None:
    """b_scale and b_max default to the dataset's maximum b-value."""
    max_b = max(v.table.max_b for v in vols)
    if "b_max" not in explicit:
        model_cfg.b_max = max_b
    if "b_scale" not in explicit:
        model_cfg.b_scale = max_b


def _write_resolved_config(path, model_cfg, train_cfg) -> None:
    import dataclasses
    with open(path, "w") as f:
        for cfg in (model_cfg, train_cfg):
            for key, val in dataclasses.asdict(cfg).items():
                if isinstance(val, tuple):
                    val = ",".join(str(v) for v in val)
                f.write(f"{key} = {val}\n")


def cmd_pretrain(args) -> int:
    model_cfg, train_cfg, explicit = _build_configs(args)
    vols = [_load_dwi(p) for p in args.data or []]
    val = [_load_dwi(p) for p in args.val or []]
    if args.synthetic:
        size = _parse_ints(args.synthetic_size, 3)
        shells = tuple(float(tok) for tok in args.synthetic_shells.replace(",", " ").split())
        for i in range(args.synthetic):
            spec = _phantom_spec(size, args.synthetic_dirs, shells,
                                 args.synthetic_noise, train_cfg.seed + 1000 + i)
            vols.append(generate_phantom(spec)[0])
        for i in range(args.synthetic_val):
            spec = _phantom_spec(size, args.synthetic_dirs, shells,
                                 args.synthetic_noise, train_cfg.seed + 5000 + i)
            val.append(generate_phantom(spec)[0])
    if not vols:
        print("pretrain: no training data (use --data or --synthetic)", file=sys.stderr)
        return 1
    vols = _crop_all(vols, model_cfg.patch)
    val = _crop_all(val, model_cfg.patch)
    _derive_b_fields(model_cfg, explicit, vols + val)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(os.path.join(args.out, "config.txt"), model_cfg, train_cfg)
    model, rows = run_pretrain(model_cfg, train_cfg, vols, val, out_dir=args.out,
                               log=(None if args.quiet else print))
    print(f"finished {len(rows)} epochs; checkpoint and metrics.csv in {args.out}")
    return 0


def _restore(args) -> tuple:
    model_cfg = ModelConfig()
    train_cfg = TrainConfig()
    apply_config(load_config_file(args.config), model_cfg, train_cfg)
    if getattr(args, "no_drope", False):
        model_cfg.drope = False
    model = MAEModel(model_cfg, seed=train_cfg.seed)
    restore_model(model, load_checkpoint(args.checkpoint))
    return model, model_cfg, train_cfg


def cmd_reconstruct(args) -> int:
    model, model_cfg, train_cfg = _restore(args)
    vol = _crop_all([_load_dwi(args.input, args.bvals, args.bvecs)],
                    model_cfg.patch)[0]
    gs = tuple(n // p for n, p in zip(vol.extents, model_cfg.patch))
    strategy = args.strategy or train_cfg.strategy
    plan = make_mask(int(np.prod(gs)), vol.n_dirs, strategy, args.epoch, args.seed)
    recon = mae_forward(model, vol, plan)
    write_nifti(recon.data.astype(np.float64), vol.spacing, args.out)
    hidden = int(plan.mask.sum())
    print(f"wrote {args.out} (masked {hidden}/{plan.mask.size} tokens, {strategy})")
    return 0


def cmd_eval(args) -> int:
    recon = _load_dwi(args.recon, args.bvals, args.bvecs)
    ref = _load_dwi(args.reference, args.bvals, args.bvecs)
    if recon.signal.shape != ref.signal.shape:
        raise ValueError(f"shape mismatch: {recon.signal.shape} vs {ref.signal.shape}")
    rows = []
    for j, p in enumerate(ref.table.points):
        rows.append({
            "volume": j, "b": p.b,
            "psnr": psnr(recon.signal[..., j], ref.signal[..., j]),
            "ssim": ssim(recon.signal[..., j], ref.signal[..., j]),
            "fa_mae": "", "md_mae": "",
        })
    fa_mae = md_mae = ""
    if ref.n_dirs >= 6:
        fa_mae, md_mae = fa_md_error(fit_dti(recon), fit_dti(ref))
    rows.append({"volume": "all", "b": "",
                 "psnr": psnr(recon.signal, ref.signal),
                 "ssim": float(np.mean([r["ssim"] for r in rows])),
                 "fa_mae": fa_mae, "md_mae": md_mae})
    with open(args.out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["volume", "b", "psnr", "ssim",
                                               "fa_mae", "md_mae"])
        writer.writeheader()
        writer.writerows(rows)
    summary = rows[-1]
    print(f"psnr {summary['psnr']}  ssim {summary['ssim']:.6f}"
          + (f"  fa_mae {fa_mae:.6f}  md_mae {md_mae:.3e}" if fa_mae != "" else ""))
    return 0


def cmd_probe(args) -> int:
    model, model_cfg, _ = _restore(args)
    feats, targets = [], []
    for path in args.data:
        vol = _crop_all([_load_dwi(path)], model_cfg.patch)[0]
        feats.append(encode_cls(model, vol))
        fit = fit_dti(vol)
        targets.append(float(fit.fa.mean() if args.target == "mean-fa" else fit.md.mean()))
    head = ProbeHead(kind=args.head, task="regression", seed=args.seed)
    metrics = train_probe(np.stack(feats), np.array(targets), head, folds=args.folds)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fold", "head", "task", "target", "rho", "mse"])
        for fi, fm in enumerate(metrics.per_fold):
            writer.writerow([fi, args.head, "regression", args.target, fm.rho, fm.mse])
        writer.writerow(["pooled", args.head, "regression", args.target,
                         metrics.rho, metrics.mse])
    print(f"probe rho {metrics.rho:.4f}  mse {metrics.mse:.6f}  ({args.out})")
    return 0


def cmd_inspect(args) -> int:
    _, header = read_nifti(args.path)
    order = "little" if header.byte_order == "<" else "big"
    print(f"sizeof_hdr : {header.sizeof_hdr}")
    print(f"byte order : {order}-endian")
    print(f"dim        : {list(header.dim)}")
    print(f"shape      : {list(header.shape)}")
    print(f"datatype   : {header.datatype} (bitpix {header.bitpix})")
    print(f"pixdim     : {[round(v, 6) for v in header.pixdim]}")
    print(f"vox_offset : {header.vox_offset}")
    print(f"scl_slope  : {header.scl_slope}   scl_inter : {header.scl_inter}")
    print(f"magic      : {header.magic!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dropemae",
                                     description="Diffusion-MRI masked autoencoder with "
                                                 "diffusion-space rotary attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic tensor phantom")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="phantom")
    p.add_argument("--spec", help="phantom blueprint text file (overrides geometry flags)")
    p.add_argument("--size", default="32,32,8")
    p.add_argument("--dirs", type=int, default=15, help="directions per shell")
    p.add_argument("--shells", default="1000")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--spacing", type=float, nargs=3, default=(2.0, 2.0, 2.0))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    p.add_argument("--data", nargs="*", default=[], help=".nii paths with .bval/.bvec stems")
    p.add_argument("--val", nargs="*", default=[])
    p.add_argument("--synthetic", type=int, default=0, help="generate N phantoms")
    p.add_argument("--synthetic-val", type=int, default=0)
    p.add_argument("--synthetic-size", default="32,32,8")
    p.add_argument("--synthetic-dirs", type=int, default=15)
    p.add_argument("--synthetic-shells", default="1000,2000")
    p.add_argument("--synthetic-noise", type=float, default=0.02)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=["spatial", "diffusion", "alternating"])
    p.add_argument("--no-drope", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("reconstruct", help="apply a checkpoint under a mask")
    p.add_argument("--input", required=True)
    p.add_argument("--bvals")
    p.add_argument("--bvecs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", choices=["spatial", "diffusion", "alternating"])
    p.add_argument("--epoch", type=int, default=0, help="parity for alternating masks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-drope", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="reconstruction quality metrics CSV")
    p.add_argument("--recon", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--bvals")
    p.add_argument("--bvecs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="cross-validated probe on frozen features")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--target", choices=["mean-fa", "mean-md"], default="mean-fa")
    p.add_argument("--head", choices=["linear", "mlp"], default="linear")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inspect", help="dump a NIfTI-1 header")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def cli(argv) -> int:
    """Parse and dispatch; returns a process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
