"""``lagkit`` command line.

Exit codes: 0 success, 1 other failure, 2 malformed configuration or
arguments, 3 missing input files, 4 unreadable container. Failures print a
one-line JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .classify import (
    NapModel,
    nap_project,
    predict_index,
    train_nap,
    train_nc,
)
from .config import RunConfig
from .errors import ConfigError, ContainerError, LagkitError
from .evaluation import DESK_K_GRID, FULL_K_GRID, Dataset, evaluate, sweep_k
from .gmm import DiagonalGmm, train_ubm_em
from .manifest import DatasetManifest, ManifestEntry, MissingFileError, read_image
from .pipeline import (
    PatchSet,
    PcaModel,
    append_coords,
    apply_pca,
    extract_patches,
    fit_pca,
    image_to_supervectors,
)
from .synth import SyntheticSpec, generate_synthetic
from .vectorize import Method, SupervectorBundle

log = logging.getLogger("lagkit")

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CONTAINER = 4


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_CONFIG, "usage", message)


def _fail(code: int, kind: str, message: str, **extra):
    payload = {"error": kind, "message": message, **extra}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    raise SystemExit(code)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError({item: "override must look like key=value"})
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if getattr(args, "K", None):
        overrides["K"] = args.K
    if getattr(args, "workers", None):
        overrides["workers"] = args.workers
    if getattr(args, "scale_down", False):
        overrides["split.allow_scale_down"] = True
    if getattr(args, "seed", None) is not None and "seed" not in overrides:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _parse_methods(value: str):
    if value.lower() == "all":
        return list(Method)
    return [Method.parse(v) for v in value.split(",")]


def _final_patches(patches: PatchSet, pca: PcaModel | None, cfg: RunConfig) -> PatchSet:
    if pca is not None:
        patches = apply_pca(pca, patches)
    if cfg.descriptor.append_coords:
        patches = append_coords(patches)
    return patches


def _report_csv(report) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\predicted", *report.classes])
    for cls, row in zip(report.classes, report.confusion):
        w.writerow([cls, *(f"{x:.4f}" for x in row)])
    return buf.getvalue()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    spec = SyntheticSpec(
        classes=args.classes,
        K_gen=args.K_gen,
        D=args.dim,
        separation=args.separation,
        patches_per_item=args.patches_per_item,
        items_per_class=args.items_per_class,
        seed=args.seed,
    )
    m = generate_synthetic(spec, args.out)
    print(f"wrote {len(m.entries)} items in {len(m.classes)} classes to {Path(args.out) / 'manifest.json'}")


def cmd_extract(args):
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    d = cfg.descriptor
    out = Path(args.out)
    entries = []
    for e in manifest.entries:
        if not e.is_image:
            raise LagkitError(f"extract expects image entries, got {e.path}")
        patches = extract_patches(read_image(manifest.resolve(e)), d.patch_sizes, d.step, max_side=d.max_side)
        rel = f"patches/{e.id}.lagp"
        io.save_patches(out / rel, patches)
        entries.append(ManifestEntry(e.id, e.label, rel))
    DatasetManifest(out, entries, manifest.classes, features="raw").save(out / "manifest.json")
    print(f"extracted {len(entries)} patch sets to {out}")


def cmd_train_ubm(args):
    cfg = load_config(args)
    ds = Dataset.from_manifest(DatasetManifest.load(args.manifest), cfg)
    pca = None
    feats = np.vstack([p.features for p in ds.patches])
    if ds.features == "raw":
        if cfg.descriptor.pca_dim < feats.shape[1]:
            pca = fit_pca(feats, cfg.descriptor.pca_dim)
        feats = np.vstack([_final_patches(p, pca, cfg).features for p in ds.patches])
    rng = np.random.default_rng(cfg.seed)
    if feats.shape[0] > cfg.em.ubm_max_patches:
        feats = feats[np.sort(rng.choice(feats.shape[0], cfg.em.ubm_max_patches, replace=False))]
    em_cfg = cfg.em_config(cfg.seed)
    ubm, trace = train_ubm_em(feats, cfg.K, em_cfg)
    meta = {
        "seed": cfg.seed,
        "relevance": cfg.adaptation.relevance,
        "variance_floor": cfg.adaptation.variance_floor,
        "iterations": len(trace),
        "final_log_likelihood": round(trace[-1], 6),
        "patches": int(feats.shape[0]),
    }
    io.save_gmm(args.out, ubm, meta)
    if pca is not None:
        pca_path = args.pca_out or str(args.out) + ".lagc"
        io.save_pca(pca_path, pca)
        print(f"PCA model: {pca_path}")
    print(f"UBM K={ubm.K} D={ubm.D} after {len(trace)} EM iterations -> {args.out}")


def cmd_vectorize(args):
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    ds = Dataset.from_manifest(manifest, cfg)
    ubm = io.load_gmm(args.ubm)
    pca = io.load_pca(args.pca) if args.pca else None
    methods = _parse_methods(args.method or cfg.method)
    out = Path(args.out)
    per_method = {m: [] for m in methods}
    for item_id, label, p in zip(ds.ids, ds.labels, ds.patches):
        if ds.features == "raw":
            p = _final_patches(p, pca, cfg)
        bundles = image_to_supervectors(p, ubm, cfg.pyramid(), cfg.adaptation_config(), methods)
        for m, b in bundles.items():
            rel = f"{m.value.lower()}/{item_id}.lagv"
            io.save_supervector(out / rel, b)
            per_method[m].append(ManifestEntry(item_id, label, rel))
    for m, entries in per_method.items():
        path = out / f"vectors_{m.value.lower()}.json"
        DatasetManifest(out, entries, ds.classes, features="final", meta={"method": m.value}).save(path)
        print(f"{m.value}: {len(entries)} supervectors -> {path}")


def _load_vectors(path):
    manifest = DatasetManifest.load(path)
    bundles = [io.load_supervector(manifest.resolve(e)) for e in manifest.entries]
    if not bundles:
        raise LagkitError(f"no supervectors listed in {path}")
    X = np.vstack([b.values for b in bundles])
    return manifest, X


def cmd_nap_train(args):
    manifest, X = _load_vectors(args.vectors)
    nap = train_nap(X, manifest.labels(), min(args.rank, X.shape[1] - 1))
    io.save_nap(args.out, nap)
    print(f"NAP dim={nap.dim} rank={nap.rank} -> {args.out}")


def cmd_classify(args):
    train_m, Xtr = _load_vectors(args.train)
    test_m, Xte = _load_vectors(args.test)
    nap = io.load_nap(args.nap) if args.nap else NapModel(Xtr.mean(axis=0), np.zeros((0, Xtr.shape[1])))
    nc = train_nc(nap_project(nap, Xtr), train_m.labels(), classes=train_m.classes)
    pred = predict_index(nc, nap_project(nap, Xte))
    rows = [
        {"id": e.id, "label": e.label, "predicted": nc.classes[i]} for e, i in zip(test_m.entries, pred)
    ]
    correct = sum(r["label"] == r["predicted"] for r in rows)
    result = {"accuracy": round(100.0 * correct / len(rows), 6), "predictions": rows}
    text = _dump_json(result)
    if args.out:
        io.atomic_write_text(args.out, text)
    print(f"accuracy {result['accuracy']:.2f}% on {len(rows)} items")


def cmd_evaluate(args):
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    ds = Dataset.from_manifest(manifest, cfg)
    methods = _parse_methods(args.method or cfg.method)
    ev = evaluate(ds, cfg, methods, workers=cfg.workers)
    out = Path(args.out)
    for m, report in ev.reports.items():
        io.atomic_write_text(out / f"report_{m.value.lower()}.json", _dump_json(report.to_dict()))
        io.atomic_write_text(out / f"confusion_{m.value.lower()}.csv", _report_csv(report))
        print(f"{m.value}: {report.mean:.2f} +- {report.std:.2f} % over {len(report.accuracies)} trials")


def cmd_sweep_k(args):
    cfg = load_config(args)
    ds = Dataset.from_manifest(DatasetManifest.load(args.manifest), cfg)
    if args.grid:
        ks = [int(k) for k in args.grid.split(",")]
    else:
        ks = FULL_K_GRID if args.full_grid else DESK_K_GRID
    methods = list(Method)
    table = sweep_k(ds, cfg, ks, methods, workers=cfg.workers)
    rows = []
    lines = ["K      " + "".join(f"{m.value:>18}" for m in methods)]
    for K, reports in table.items():
        rows.append({"K": K, **{m.value: {"mean": round(r.mean, 6), "std": round(r.std, 6)} for m, r in reports.items()}})
        lines.append(f"{K:<7}" + "".join(f"{reports[m].mean:>10.2f} +-{reports[m].std:>5.2f}" for m in methods))
    out = Path(args.out)
    io.atomic_write_text(out / "sweep_k.json", _dump_json({"rows": rows, "trials": cfg.split.trials}))
    io.atomic_write_text(out / "sweep_k.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_inspect(args):
    obj = io.load_any(args.path)
    if isinstance(obj, DiagonalGmm):
        print(f"DiagonalGmm K={obj.K} D={obj.D}")
        print(f"weights: min={obj.weights.min():.6g} max={obj.weights.max():.6g} sum={obj.weights.sum():.12f}")
        print(f"stds: min={obj.stds.min():.6g} max={obj.stds.max():.6g}")
        meta = io.load_gmm_metadata(args.path)
        floor = meta.get("variance_floor")
        if floor is not None:
            ok = obj.stds.min() >= np.sqrt(floor)
            print(f"variance floor {floor:g}: min std >= sqrt(floor): {'yes' if ok else 'NO'}")
        if meta:
            print("metadata: " + json.dumps(meta, sort_keys=True))
    elif isinstance(obj, SupervectorBundle):
        print(f"Supervector method={obj.method.value} K={obj.K} D={obj.D} regions={obj.regions} length={len(obj)}")
        print(f"norm={np.linalg.norm(obj.values):.6g} max|v|={np.abs(obj.values).max():.6g}")
    elif isinstance(obj, PatchSet):
        print(f"PatchSet T={obj.T} D={obj.D}")
    elif isinstance(obj, PcaModel):
        print(f"PcaModel {obj.input_dim} -> {obj.output_dim}")
    elif isinstance(obj, NapModel):
        print(f"NapModel dim={obj.dim} rank={obj.rank}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _ArgumentParser(prog="lagkit", description="Lie algebrized Gaussian supervectors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. split.trials=3")
        sp.add_argument("--seed", type=int)
        return sp

    sp = sub.add_parser("synth", help="generate a synthetic patch dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=5)
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--K-gen", dest="K_gen", type=int, default=4)
    sp.add_argument("--separation", type=float, default=SyntheticSpec.separation)
    sp.add_argument("--patches-per-item", type=int, default=200)
    sp.add_argument("--items-per-class", type=int, default=60)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = with_config(sub.add_parser("extract", help="dense raw-pixel patches from images"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract)

    sp = with_config(sub.add_parser("train-ubm", help="fit the universal background model"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pca-out")
    sp.add_argument("--K", type=int)
    sp.set_defaults(func=cmd_train_ubm)

    sp = with_config(sub.add_parser("vectorize", help="adapt and vectorize every item"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--pca")
    sp.add_argument("--method", help="LAG, RLAG, KLVEC, comma list or 'all'")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_vectorize)

    sp = sub.add_parser("nap-train", help="fit a nuisance attribute projection")
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--rank", type=int, default=32)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_nap_train)

    sp = sub.add_parser("classify", help="nearest-centroid classification of supervectors")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--nap")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_classify)

    sp = with_config(sub.add_parser("evaluate", help="repeated random-split evaluation"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--method", help="LAG, RLAG, KLVEC, comma list or 'all'")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--scale-down", action="store_true", help="shrink the split for small datasets")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("sweep-k", help="evaluate all methods over mixture sizes"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--grid", help="comma-separated K values")
    sp.add_argument("--full-grid", action="store_true", help="K in 32..1024")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--scale-down", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep_k)

    sp = sub.add_parser("inspect", help="describe a lagkit container")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except ConfigError as e:
        _fail(EXIT_CONFIG, "config", str(e), fields=e.fields)
    except (MissingFileError, FileNotFoundError) as e:
        _fail(EXIT_MISSING, "missing-file", str(e))
    except ContainerError as e:
        _fail(EXIT_CONTAINER, e.code, str(e))
    except (LagkitError, ValueError) as e:
        _fail(EXIT_FAILURE, type(e).__name__, str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
