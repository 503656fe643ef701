"""Command line interface: ``hubvae {synth,train,eval,hubs,generate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .clustering import kmeans, knn_purity, v_measure
from .model import encode_means, generate
from .numerics import load_checkpoint, save_checkpoint
from .training import TrainConfig, build_epoch_pool, fit

log = logging.getLogger("hubvae")

ABLATIONS = ("no_selection", "no_contrastive", "baseline_gaussian")
# CLI flag -> config key, for values that may override the config file
OVERRIDES = {
    "batch_size": int, "m": int, "latent_dim": int, "lam": float, "beta_mode": str,
    "max_epochs": int, "lookahead": int, "K": int, "lr": float, "tau_init": float,
}


# ---------------------------------------------------------------------------
# data arguments shared by every subcommand that reads a dataset
# ---------------------------------------------------------------------------

def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file or IDX images file")
    p.add_argument("--labels", help="IDX labels file (IDX data only)")
    p.add_argument("--test-data", help="separate IDX test images")
    p.add_argument("--test-labels", help="separate IDX test labels")
    p.add_argument("--no-labels", action="store_true", help="CSV has no label column")
    p.add_argument("--no-scale", action="store_true", help="skip CSV min-max scaling")
    p.add_argument("--split-seed", type=int, default=0)


def _is_idx(path: str) -> bool:
    name = Path(path).name
    return "ubyte" in name or name.endswith(".idx") or name.endswith(".idx.gz")


def load_dataset(args) -> dataio.Dataset:
    if _is_idx(args.data):
        ds = dataio.load_idx(args.data, args.labels)
        if args.test_data:
            test = dataio.load_idx(args.test_data, args.test_labels)
            n_train = len(ds.X)
            inner = dataio.default_splits(n_train, args.split_seed, fractions=(0.9, 0.1, 0.0))
            labels = None
            if ds.labels is not None and test.labels is not None:
                labels = np.concatenate([ds.labels, test.labels])
            return dataio.Dataset(
                name=ds.name, X=np.vstack([ds.X, test.X]), labels=labels, image_shape=ds.image_shape,
                splits={"train": inner["train"], "val": inner["val"],
                        "test": np.arange(n_train, n_train + len(test.X))},
            )
    else:
        ds = dataio.load_csv(args.data, has_labels=not args.no_labels, scale=not args.no_scale)
    ds.splits = dataio.default_splits(len(ds.X), args.split_seed)
    return ds


def build_config(args) -> TrainConfig:
    values = dataio.load_config(args.config) if args.config else {}
    for key, cast in OVERRIDES.items():
        v = getattr(args, key, None)
        if v is not None:
            values[key] = cast(v)
    if args.hidden:
        values["hidden"] = [int(h) for h in args.hidden.split(",")]
    if args.seed is not None:
        values["seed"] = args.seed
    for flag in args.ablation or []:
        values[flag] = True
    if args.dynamic_binarization:
        values["dynamic_binarization"] = True
    if args.fixed_tau:
        values["learn_tau"] = False
    return TrainConfig.from_dict(values)


# ---------------------------------------------------------------------------
# checkpoint helpers
# ---------------------------------------------------------------------------

def _checkpoint_tensors(result) -> dict:
    tensors = dict(result.params)
    if result.pool_inputs is not None:
        tensors["pool_inputs"] = np.asarray(result.pool_inputs, dtype=np.float64)
        tensors["pool_index"] = np.asarray(result.pool.hubs, dtype=np.float64)[None, :]
    return tensors


def _split_checkpoint(tensors: dict):
    params = {k: v for k, v in tensors.items() if not k.startswith("pool_")}
    return params, tensors.get("pool_inputs"), tensors.get("pool_index")


# ---------------------------------------------------------------------------
# hub diagnostics CSV
# ---------------------------------------------------------------------------

HUB_CSV_FIELDS = ("index", "hubness", "hubness_z", "good_score", "bad_hubness", "in_pool")


def write_hub_csv(path, build, labels=None, train_rows=None) -> None:
    """One row per hub candidate. ``index`` is the dataset row when
    ``train_rows`` maps training positions back to the dataset."""
    pool = set(build.pool.hubs)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HUB_CSV_FIELDS)
        for c in build.candidates:
            bad = ""
            if labels is not None:
                bad = repr(float(np.mean(labels[c.rknn] != labels[c.index])))
            index = int(train_rows[c.index]) if train_rows is not None else c.index
            writer.writerow([index, c.hubness, repr(c.hubness_z), repr(c.good_score), bad, int(c.index in pool)])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = dataio.SyntheticSpec(clusters=args.clusters, dim=args.dim, per_cluster=args.per_cluster,
                                spread=args.spread, std=args.std, seed=args.seed)
    dataio.save_csv(dataio.make_synthetic(spec), args.out)
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args)
    config = build_config(args)
    if config.uses_contrastive and config.K is None:
        raise ValueError("set K in the config or with --K")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_labels = ds.split_labels("train")
    train_rows = ds.splits["train"]

    on_epoch = None
    if args.hubs_dir:
        hubs_dir = Path(args.hubs_dir)
        hubs_dir.mkdir(parents=True, exist_ok=True)

        def on_epoch(epoch, build):
            write_hub_csv(hubs_dir / f"hubs_epoch{epoch:03d}.csv", build, train_labels, train_rows)

    result = fit(ds.split("train"), ds.split("val"), config, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint.bin", _checkpoint_tensors(result))
    result.log.write(out / "trainlog.jsonl")
    (out / "config.json").write_text(json.dumps(_config_dict(config), sort_keys=True, indent=2) + "\n")
    print(json.dumps({"best_epoch": result.best_epoch, "epochs_run": len(result.log.records),
                      "checkpoint": str(out / "checkpoint.bin")}))
    return 0


def _config_dict(config: TrainConfig) -> dict:
    values = dict(config.__dict__)
    values["hidden"] = list(config.hidden)
    return values


def evaluate_embeddings(emb, labels, K: int, seed: int, runs: int = 10, n_init: int = 10) -> dict:
    """k-means V-measure over ``runs`` seeded runs plus KNN purity, k = sqrt(n)."""
    scores = [v_measure(kmeans(emb, K, seed=seed + r, n_init=n_init), labels) for r in range(runs)]
    n = len(emb)
    k = max(1, int(round(math.sqrt(n))))
    k = min(k, n - 1)
    return {
        "v_measure": float(np.mean(scores)),
        "v_measure_mean": float(np.mean(scores)),
        "v_measure_std": float(np.std(scores)),
        "v_measure_runs": [float(s) for s in scores],
        "knn_purity": knn_purity(emb, labels, k),
        "k_used": k,
        "K": K,
        "seed": seed,
        "n_test": n,
    }


def cmd_eval(args) -> int:
    ds = load_dataset(args)
    if ds.labels is None:
        raise ValueError("evaluation needs labels")
    params, _, _ = _split_checkpoint(load_checkpoint(args.checkpoint))
    x_test = ds.split("test")
    y_test = ds.split_labels("test")
    emb = encode_means(params, x_test)
    K = args.K if args.K is not None else ds.n_classes
    report = evaluate_embeddings(emb, y_test, K, args.seed, runs=args.runs)
    if args.embeddings_out:
        np.savetxt(args.embeddings_out, np.column_stack([emb, y_test]), delimiter=",", fmt="%.17g")
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_hubs(args) -> int:
    ds = load_dataset(args)
    params, _, _ = _split_checkpoint(load_checkpoint(args.checkpoint))
    values = dataio.load_config(args.config) if args.config else {}
    values.setdefault("latent_dim", params["enc_Wmu"].shape[1])
    values.setdefault("K", 1)
    if args.batch_size is not None:
        values["batch_size"] = args.batch_size
    config = TrainConfig.from_dict(values)
    build = build_epoch_pool(params, ds.split("train"), config, epoch=0)
    write_hub_csv(args.out, build, ds.split_labels("train"), ds.splits["train"])
    return 0


def cmd_generate(args) -> int:
    params, pool_inputs, _ = _split_checkpoint(load_checkpoint(args.checkpoint))
    if pool_inputs is None:
        raise ValueError("checkpoint has no hub pool (baseline model?)")
    probs, samples = generate(params, pool_inputs, args.hub, args.count, seed=args.seed)
    np.savetxt(args.out, probs, delimiter=",", fmt="%.17g")
    if args.samples_out:
        np.savetxt(args.samples_out, samples, delimiter=",", fmt="%d")
    if args.pgm_dir:
        side = int(round(math.sqrt(probs.shape[1])))
        if side * side != probs.shape[1]:
            raise ValueError(f"cannot shape {probs.shape[1]} values into a square image")
        pgm_dir = Path(args.pgm_dir)
        pgm_dir.mkdir(parents=True, exist_ok=True)
        for i, row in enumerate(probs):
            write_pgm(pgm_dir / f"hub{args.hub}_{i:03d}.pgm", row.reshape(side, side))
    return 0


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit greyscale image from values in [0, 1]."""
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hubvae", description="Hub-based VAE regularization")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic blob dataset as CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--per-cluster", type=int, default=100)
    p.add_argument("--spread", type=float, default=6.0)
    p.add_argument("--std", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model, write checkpoint and train log")
    _add_data_args(p)
    p.add_argument("--config")
    p.add_argument("--out", default="run")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--hidden", help="comma separated hidden widths, e.g. 300,300")
    p.add_argument("--lam", type=float)
    p.add_argument("--beta-mode", dest="beta_mode", choices=("constant", "linear"))
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--lookahead", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau-init", dest="tau_init", type=float)
    p.add_argument("--fixed-tau", action="store_true", help="keep the prior variance at its initial value")
    p.add_argument("--ablation", action="append", choices=ABLATIONS)
    p.add_argument("--dynamic-binarization", action="store_true")
    p.add_argument("--hubs-dir", help="write a hub diagnostics CSV per epoch here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-means V-measure and KNN purity on the test split")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--K", type=int, help="number of clusters (default: number of classes)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out")
    p.add_argument("--embeddings-out", help="CSV of test embeddings with the label as last column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hubs", help="hub diagnostics CSV for a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hubs)

    p = sub.add_parser("generate", help="conditional generation from a pool hub")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hub", type=int, required=True, help="position in the checkpoint's hub pool")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV of generated probabilities")
    p.add_argument("--samples-out", help="CSV of Bernoulli samples")
    p.add_argument("--pgm-dir", help="also dump square images as PGM")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, IndexError) as exc:
        print(f"hubvae {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
