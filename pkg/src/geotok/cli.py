"""Command-line entry point: ``geotok {precompute, spectrum-check, partition, train, eval, export}``.

Every command writes a ``manifest.json`` into its output directory
recording the command, the resolved config, input hashes, the package
version, the seed and timestamps. Exit codes: 0 success, 1 user error,
2 internal or numeric error.
"""

import argparse
import colorsys
import json
import math
import sys
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .cache import cache_root, cached_fine_basis, mesh_bundle
from .datasets import generate_toy_dataset
from .errors import (
    ConfigError, DegenerateGeometryError, DomainError, GeotokError, MeshFormatError, MeshValidationError,
    StaleCacheError,
)
from .mesh import file_hash, load_mesh, normalize_mesh, write_ply
from .model import ModelConfig, build_model, predict
from .tokenize import build_partition, load_assignment, save_assignment, spectral_preservation_report
from .train import evaluate, load_checkpoint, save_checkpoint, train, write_log

USER_ERRORS = (ConfigError, DomainError, MeshFormatError, MeshValidationError, DegenerateGeometryError,
               StaleCacheError, FileNotFoundError, IsADirectoryError, tomllib.TOMLDecodeError)
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
DATA_DEFAULTS = {"octant_seg": {"kind": "octant_seg", "n_items": 20, "seed": 0, "subdivisions": [3]},
                 "primitive_cls": {"kind": "primitive_cls", "n_items": 12, "seed": 0}}

# JSON schema of the spectrum-check report; tests validate emitted reports against it
_NUM_LIST = {"type": "array", "items": {"type": "number"}}
METHOD_REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_vertices", "P", "K", "n_eigenpairs", "fine_eigenvalues", "coarse_eigenvalues", "aligned_errors",
                 "principal_angles", "mean_principal_angle", "max_principal_angle", "hks_relative_error",
                 "time_samples", "patch_sizes"],
    "properties": {
        "n_vertices": {"type": "integer", "minimum": 1},
        "P": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 1},
        "n_eigenpairs": {"type": "integer", "minimum": 1},
        "fine_eigenvalues": _NUM_LIST,
        "coarse_eigenvalues": _NUM_LIST,
        "aligned_errors": _NUM_LIST,
        "principal_angles": _NUM_LIST,
        "mean_principal_angle": {"type": "number", "minimum": 0},
        "max_principal_angle": {"type": "number", "minimum": 0},
        "hks_relative_error": {"type": "number", "minimum": 0},
        "time_samples": _NUM_LIST,
        "patch_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
    },
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["mesh", "mesh_hash", "P", "K", "methods", "rns_le_baseline"],
    "properties": {
        "mesh": {"type": "string"},
        "mesh_hash": {"type": "string"},
        "P": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 1},
        "methods": {"type": "object", "required": ["rns", "baseline"],
                    "additionalProperties": METHOD_REPORT_SCHEMA},
        "rns_le_baseline": {"type": "object", "required": ["mean_principal_angle", "hks_relative_error"],
                            "additionalProperties": {"type": "boolean"}},
    },
}


class UsageError(GeotokError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config resolution


def builtin_configs():
    return sorted(p.name[:-5] for p in resources.files("geotok.configs").iterdir() if p.name.endswith(".toml"))


def read_config(spec):
    """Parse a TOML config given as a path or a built-in name. Returns ``(dict, text)``."""
    path = Path(spec)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    elif spec in builtin_configs():
        text = resources.files("geotok.configs").joinpath(f"{spec}.toml").read_text(encoding="utf-8")
    else:
        raise FileNotFoundError(f"config {spec!r} is neither a file nor a built-in ({', '.join(builtin_configs())})")
    return tomllib.loads(text), text


def resolve_config(args):
    """ModelConfig and dataset spec from ``--config`` plus flag overrides (flags win)."""
    raw = {}
    if getattr(args, "config", None):
        raw, _ = read_config(args.config)
    raw = dict(raw)
    data = raw.pop("data", None)
    cfg = ModelConfig.from_dict(raw)
    changes = {}
    if getattr(args, "partitions", None) is not None:
        changes["partitions"] = args.partitions
        changes["multi_res"] = ()
    if getattr(args, "method", None) in ("rns", "baseline"):
        changes["partitioner"] = args.method
    if getattr(args, "mask_radius", None) is not None:
        changes["mask_radius"] = args.mask_radius
    if getattr(args, "k_eig", None) is not None:
        changes["k_eig"] = args.k_eig
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if changes:
        try:
            cfg = cfg.replace(**changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    if data is None:
        data = DATA_DEFAULTS["octant_seg" if cfg.task == "segmentation" else "primitive_cls"]
    return cfg, dict(data)


def make_dataset(data):
    data = dict(data)
    kind = data.pop("kind", None)
    n_items = data.pop("n_items", 20)
    known = {"seed", "subdivisions", "jitter"}
    if set(data) - known:
        raise ConfigError(f"unknown [data] keys: {sorted(set(data) - known)}")
    if "subdivisions" in data:
        data["subdivisions"] = tuple(data["subdivisions"])
    return generate_toy_dataset(kind, n_items, **data)


# --------------------------------------------------------------------------
# output helpers


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command, cfg=None, inputs=None, seed=None, started=None, extra=None,
                   name="manifest.json"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
        "inputs": inputs or {},
        "version": __version__,
        "seed": seed if seed is not None else (cfg.seed if cfg is not None else None),
        "timestamps": {"started": started or _now(), "finished": _now()},
    }
    manifest.update(extra or {})
    (out_dir / name).write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def palette(n):
    """Deterministic categorical RGB palette: hues spaced by the golden ratio."""
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    cols = [colorsys.hsv_to_rgb((k * golden) % 1.0, 0.65, 0.95) for k in range(n)]
    return np.rint(np.array(cols).reshape(n, 3) * 255).astype(np.uint8)


def label_colors(labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise DomainError("labels must be non-negative integers")
    return palette(int(labels.max()) + 1 if labels.size else 0)[labels]


def scalar_colors(values):
    """Diverging blue-white-red map, symmetric about zero."""
    v = np.asarray(values, dtype=np.float64)
    scale = np.abs(v).max()
    t = v / scale if scale > 0 else np.zeros_like(v)
    white = np.array([255.0, 255.0, 255.0])
    red, blue = np.array([200.0, 30.0, 30.0]), np.array([30.0, 60.0, 200.0])
    pos = np.clip(t, 0, 1)[:, None]
    neg = np.clip(-t, 0, 1)[:, None]
    return white + pos * (red - white) + neg * (blue - white)


def _mesh_inputs(paths):
    return {str(p): file_hash(p) for p in paths}


# --------------------------------------------------------------------------
# commands


def _precompute_one(job):
    path, cfg, root, assignment = job
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mesh = load_mesh(path) if isinstance(path, (str, Path)) else path
        bundle, status = mesh_bundle(mesh, cfg, root, compute=True, assignment_path=assignment,
                                     source=path if isinstance(path, (str, Path)) else None)
    return bundle.mesh_hash, status, [str(w.message) for w in caught]


def cmd_precompute(args):
    started = _now()
    cfg, data = resolve_config(args)
    root = cache_root(args.cache_dir)
    if args.method == "import" and not args.assignment:
        raise UsageError("--method import needs --assignment FILE")
    if args.mesh:
        items = [(str(p), str(p)) for p in args.mesh]
        inputs = {}
    else:
        ds = make_dataset(data)
        items = [(f"{data['kind']}[{i}]", m) for i, m in enumerate(ds.meshes)]
        inputs = {"dataset": ds.fingerprint()}
    jobs = [(src, cfg, str(root), args.assignment) for _, src in items]
    errors, results = [], {}
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_precompute_one, j) for j in jobs]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append((f.result(), None))
                except Exception as exc:  # collected per file, reported below
                    outcomes.append((None, exc))
    else:
        outcomes = []
        for j in jobs:
            try:
                outcomes.append((_precompute_one(j), None))
            except Exception as exc:
                outcomes.append((None, exc))
    for (name, _), (res, exc) in zip(items, outcomes):
        if exc is not None:
            if not isinstance(exc, (GeotokError,) + USER_ERRORS):
                raise exc
            errors.append(f"{name}: {exc}")
            print(f"error: {name}: {exc}", file=sys.stderr)
            continue
        mesh_hash, status, warns = res
        for w in warns:
            print(f"warning: {name}: {w}", file=sys.stderr)
        results[name] = {"mesh_hash": mesh_hash, "status": status}
        print(f"{name}  {mesh_hash[:12]}  " + " ".join(f"{k}={v}" for k, v in status.items()))
    if args.mesh:
        inputs.update(_mesh_inputs([p for p in args.mesh if Path(p).is_file()]))
    write_manifest(args.out_dir, "precompute", cfg, inputs, started=started,
                   extra={"cache_dir": str(root), "results": results, "errors": errors})
    return EXIT_USER if errors else EXIT_OK


def cmd_partition(args):
    started = _now()
    cfg, _ = resolve_config(args)
    if args.method == "import" and not args.assignment:
        raise UsageError("--method import needs --assignment FILE")
    mesh = load_mesh(args.mesh)
    m = normalize_mesh(mesh)
    p = cfg.partitions
    method = args.method or cfg.partitioner
    part = build_partition(m, p, method=method, seed=cfg.seed, clamp_mode=cfg.clamp_mode,
                           assignment_path=args.assignment)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_assignment(out / "assignment.json", part)
    write_ply(out / "partition.ply", mesh, colors=label_colors(part.assignment))
    sizes = part.sizes()
    print(f"P={part.P} method={method} patch sizes min={sizes.min()} max={sizes.max()} mean={sizes.mean():.2f}")
    write_manifest(out, "partition", cfg, _mesh_inputs([args.mesh]), started=started, extra={"method": method})
    return EXIT_OK


def cmd_spectrum_check(args):
    started = _now()
    cfg, _ = resolve_config(args)
    mesh = load_mesh(args.mesh)
    m = normalize_mesh(mesh)
    p, K = cfg.partitions, args.K
    if K > p:
        raise DomainError(f"K={K} exceeds the patch count P={p}")
    fine = cached_fine_basis(mesh, args.cache_dir, min_k=min(p, m.n_vertices))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = {}
    for method in ("rns", "baseline"):
        part = build_partition(m, p, method=method, seed=cfg.seed, clamp_mode=cfg.clamp_mode)
        rep, phi_f, phi_c = spectral_preservation_report(m, part, K=K, fine_basis=fine, return_fields=True)
        rep["patch_sizes"] = part.sizes().tolist()
        methods[method] = rep
        write_ply(out / f"partition_{method}.ply", mesh, colors=label_colors(part.assignment))
        for j in range(K):
            write_ply(out / f"eigfn{j + 1}_{method}.ply", mesh, colors=scalar_colors(phi_c[:, j]))
            if method == "rns":
                write_ply(out / f"eigfn{j + 1}_fine.ply", mesh, colors=scalar_colors(phi_f[:, j]))
    report = {
        "mesh": str(args.mesh), "mesh_hash": mesh.fingerprint(), "P": p, "K": K, "methods": methods,
        "rns_le_baseline": {key: bool(methods["rns"][key] <= methods["baseline"][key])
                            for key in ("mean_principal_angle", "hks_relative_error")},
    }
    write_json(out / "report.json", report)
    for method, rep in methods.items():
        print(f"{method:9s} mean angle {rep['mean_principal_angle']:.4f}  HKS error {rep['hks_relative_error']:.4f}")
    write_manifest(out, "spectrum-check", cfg, _mesh_inputs([args.mesh]), started=started, extra={"K": K})
    return EXIT_OK


def _load_bundles(ds, cfg, root):
    return [mesh_bundle(mesh, cfg, root, compute=False)[0] for mesh in ds.meshes]


def cmd_train(args):
    started = _now()
    cfg, data = resolve_config(args)
    if args.dry_run:
        model = build_model(cfg)
        print(json.dumps(_jsonable({"config": cfg.to_dict(), "data": data, "n_parameters": model.n_parameters()}),
                         indent=2, sort_keys=True))
        return EXIT_OK
    ds = make_dataset(data)
    bundles = _load_bundles(ds, cfg, cache_root(args.cache_dir))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, ds, bundles)
    write_log(out / "log.csv", res.history)
    save_checkpoint(out / "checkpoint", res.model, extra={"data": data, "best_epoch": res.best_epoch})
    metrics = {"train": evaluate(res.model, ds, bundles, "train"), "best_epoch": res.best_epoch}
    if ds.indices("test"):
        metrics["test"] = evaluate(res.model, ds, bundles, "test")
    write_json(out / "metrics.json", metrics)
    line = f"train accuracy {metrics['train']['accuracy']:.4f}"
    if "test" in metrics:
        line += f"  test accuracy {metrics['test']['accuracy']:.4f}"
    print(line)
    write_manifest(out, "train", cfg, {"dataset": ds.fingerprint()}, started=started, extra={"data": data})
    return EXIT_OK


def cmd_eval(args):
    started = _now()
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out_dir) / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run `geotok train` first")
    model, manifest = load_checkpoint(ckpt)
    cfg = model.cfg
    data = manifest.get("data") or DATA_DEFAULTS["octant_seg" if cfg.task == "segmentation" else "primitive_cls"]
    if args.config:
        _, data = resolve_config(args)
    ds = make_dataset(data)
    bundles = _load_bundles(ds, cfg, cache_root(args.cache_dir))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = evaluate(model, ds, bundles, args.split)
    write_json(out / f"eval_{args.split}.json", rep)
    if cfg.task == "segmentation":
        for i in ds.indices(args.split):
            pred = predict(model, bundles[i])
            np.savetxt(out / f"pred_{i}.txt", pred, fmt="%d")
            write_ply(out / f"pred_{i}.ply", ds.meshes[i], colors=label_colors(pred))
    print(f"{args.split} accuracy {rep['accuracy']:.4f} on {rep['n_samples']} samples")
    write_manifest(out, "eval", cfg, {"checkpoint": str(ckpt), "dataset": ds.fingerprint()}, started=started,
                   name=f"manifest_eval_{args.split}.json")
    return EXIT_OK


def read_labels(path):
    """Integer labels from ``.npy``, an assignment JSON, a JSON list or whitespace-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
    elif path.suffix == ".json":
        obj = json.loads(path.read_text(encoding="utf-8"))
        arr = obj["assignment"] if isinstance(obj, dict) else obj
    else:
        arr = path.read_text(encoding="utf-8").split()
    try:
        out = np.asarray(arr, dtype=np.int64).ravel()
    except (TypeError, ValueError):
        raise DomainError(f"{path}: labels must be integers") from None
    return out


def cmd_export(args):
    started = _now()
    mesh = load_mesh(args.mesh)
    labels = read_labels(args.labels)
    n = mesh.n_vertices
    if len(labels) != n:
        if not args.assignment:
            raise DomainError(f"{len(labels)} labels for a mesh with {n} vertices; pass --assignment to expand "
                              "patch labels")
        part = load_assignment(args.assignment, n)
        if len(labels) != part.P:
            raise DomainError(f"{len(labels)} labels match neither N={n} nor P={part.P}")
        labels = labels[part.assignment]
    out = Path(args.out) if args.out else Path(args.out_dir) / "export.ply"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, mesh, colors=label_colors(labels))
    print(f"wrote {out}")
    inputs = _mesh_inputs([args.mesh, args.labels] + ([args.assignment] if args.assignment else []))
    write_manifest(out.parent, "export", None, inputs, seed=None, started=started, extra={"output": str(out)})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="geotok", description="Spectral mesh tokenization and patch transformers.")
    parser.add_argument("--version", action="version", version=f"geotok {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file or built-in name (" + ", ".join(builtin_configs()) + ")")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default="geotok-out", help="directory for outputs and the run manifest")
    common.add_argument("--cache-dir", help="cache root (default: $GEOTOK_CACHE_DIR or ~/.cache/geotok)")

    model_flags = _Parser(add_help=False)
    model_flags.add_argument("--partitions", type=int)
    model_flags.add_argument("--method", choices=("rns", "baseline", "import"))
    model_flags.add_argument("--mask-radius", type=float)
    model_flags.add_argument("--k-eig", type=int)

    p = sub.add_parser("precompute", parents=[common, model_flags], help="fill the per-mesh cache")
    p.add_argument("--mesh", nargs="+", help="mesh files; the config's dataset when omitted")
    p.add_argument("--assignment", help="assignment JSON for --method import")
    p.add_argument("--jobs", type=int, default=1, help="worker processes across meshes")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("spectrum-check", parents=[common, model_flags], help="RNS vs baseline spectral audit")
    p.add_argument("--mesh", required=True)
    p.add_argument("-K", type=int, default=8, help="number of nonzero eigenfunctions compared")
    p.set_defaults(func=cmd_spectrum_check)

    p = sub.add_parser("partition", parents=[common, model_flags], help="partition one mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--assignment", help="assignment JSON for --method import")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", parents=[common, model_flags], help="train on the config's dataset")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and parameter count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, model_flags], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint directory (default: <out-dir>/checkpoint)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", parents=[common], help="write a label-colored PLY")
    p.add_argument("--mesh", required=True)
    p.add_argument("--labels", required=True, help="per-vertex or per-patch labels (.npy, .json, text)")
    p.add_argument("--assignment", help="assignment JSON mapping patch labels to vertices")
    p.add_argument("--out", help="output PLY (default: <out-dir>/export.ply)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            build_parser().print_help(sys.stderr)
            return EXIT_USER
        return args.func(args)
    except (UsageError,) + USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except GeotokError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
