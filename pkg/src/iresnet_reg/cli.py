"""Command-line driver.

Subcommands: ``train``, ``reconstruct``, ``filters``, ``approx-study`` and
``convergence-study``. Settings come from built-in defaults, then an
optional YAML/JSON config file, then flags (flags win). Every command
writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (
    APPROX_COLUMNS,
    StudyResult,
    approx_study,
    argmin_L,
    best_by_increasing_delta,
    convergence_study,
    lipschitz_grid,
    loglog_decay_fit,
    mse_reco,
    noise_levels,
    std_mnist,
    trend_violations,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import (
    IMAGE_MAGIC,
    cached_singular_system,
    file_digest,
    load_mnist_idx,
    read_idx,
    synthetic_dataset,
)
from .exceptions import IResNetError
from .iresnet_core import MLPDiagonalNet, OneParameterNet, invert
from .operator_core import (
    NoiseModel,
    SingularSystem,
    normalize_operator,
    radon_matrix,
)
from .spectral_filters import FAMILIES, closed_form_affine, filter_curve, write_filter_csv
from .training import TrainConfig, TrainSet, make_targets, train_diagonal, write_loss_trace

log = logging.getLogger("iresnet_reg")

DEFAULT_CONFIG = {
    "operator": {"kind": "radon", "img_side": 28, "n_angles": 30, "n_detectors": 41,
                 "eig_method": "jacobi"},
    "dataset": {
        "kind": "mnist",
        "images": "data/mnist5k-images-idx3-ubyte.gz",
        "labels": None,
        "n_train": 2000,
        "n_test": 500,
        "full": False,
    },
    "train": {
        "architecture": "mlp",
        "epochs": 20,
        "batch_size": 100,
        "lr": 0.01,
        "decay": 0.5,
        "L": [0.9],
        "noise": [0.0],
    },
    "seed": 0,
    "out": "runs",
    "cache_dir": ".cache",
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in (extra or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    """Resolved settings for one CLI invocation."""

    data: dict

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise FileNotFoundError(f"config file {p} not found")
            cfg = _merge(cfg, yaml.safe_load(p.read_text()) or {})
        cfg = _merge(cfg, overrides or {})
        run = cls(cfg)
        run.validate()
        return run

    def validate(self):
        t = self.data["train"]
        Ls = t["L"] if isinstance(t["L"], list) else [t["L"]]
        if not Ls or any(not 0.0 <= float(L) < 1.0 for L in Ls):
            raise ValueError(f"L values must be a non-empty list in [0, 1), got {Ls}")
        noise = t["noise"] if isinstance(t["noise"], list) else [t["noise"]]
        if not noise or any(float(d) < 0 for d in noise):
            raise ValueError("noise levels must be a non-empty list of nonnegative values")
        t["L"], t["noise"] = [float(L) for L in Ls], [float(d) for d in noise]
        ds = self.data["dataset"]
        if ds["kind"] == "mnist":
            for key in ("images", "labels"):
                if ds.get(key) is not None and not Path(ds[key]).exists():
                    raise FileNotFoundError(f"dataset {key} file {ds[key]} not found")
        elif ds["kind"] != "synthetic":
            raise ValueError(f"unknown dataset kind {ds['kind']!r}")
        if self.data["operator"]["kind"] not in ("radon", "diagonal", "matrix"):
            raise ValueError(f"unknown operator kind {self.data['operator']['kind']!r}")

    def __getitem__(self, key):
        return self.data[key]

    def digest(self, extra: dict | None = None) -> str:
        payload = json.dumps({"config": self.data, **(extra or {})}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()


def build_operator(op: dict) -> np.ndarray:
    kind = op["kind"]
    if kind == "radon":
        return radon_matrix(op.get("img_side", 28), op.get("n_angles", 30), op.get("n_detectors", 41))
    if kind == "diagonal":
        return np.diag(np.sqrt(np.asarray(op["sigma_sq"], dtype=np.float64)))
    path = Path(op["path"])
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def prepare(run: RunConfig):
    """Operator, singular system, train/test signals and a dataset digest."""
    A, _ = normalize_operator(build_operator(run["operator"]))
    method = run["operator"].get("eig_method", "jacobi")
    system = cached_singular_system(A, run["cache_dir"], method=method)
    ds = run["dataset"]
    if ds["kind"] == "mnist":
        n_train, n_test = int(ds["n_train"]), int(ds["n_test"])
        if ds.get("full"):
            total = read_idx(ds["images"], IMAGE_MAGIC).shape[0]
            n_train = total - n_test
        X_train = load_mnist_idx(ds["images"], limit=n_train)
        X_test = load_mnist_idx(ds["images"], limit=n_test, offset=n_train)
        digest = file_digest(ds["images"])
    else:
        n = int(ds.get("n_train", 200)) + int(ds.get("n_test", 50))
        X = synthetic_dataset(system, n, ds.get("distribution", "gaussian"),
                              seed=int(ds.get("seed", run["seed"])), mean=ds.get("mean", 1.0),
                              scale=ds.get("scale", 0.5), source_power=ds.get("source_power", 0.0))
        n_train = int(ds.get("n_train", 200))
        X_train, X_test = X[:n_train], X[n_train:]
        digest = hashlib.sha256(X.tobytes()).hexdigest()
    if X_train.shape[1] != system.dim:
        raise ValueError(f"signals have {X_train.shape[1]} entries, operator expects {system.dim}")
    return A, system, X_train, X_test, digest


def _seed_for(master: int, *keys) -> int:
    """Child seed derived from the master seed and a path of keys."""
    h = hashlib.sha256(json.dumps([master, *keys]).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def train_net(system: SingularSystem, X_train, L: float, delta: float, run: RunConfig):
    t = run["train"]
    arch = t.get("architecture", "mlp")
    seed = int(run["seed"])
    init_seed = _seed_for(seed, "init", L)
    C = system.coefficients(X_train)
    if arch == "closed_form_affine":
        return closed_form_affine(system, L, C.mean(axis=0)), None
    if arch == "mlp":
        net = MLPDiagonalNet.init(system, L, seed=init_seed)
    elif arch == "affine":
        net = MLPDiagonalNet.affine(system, L, seed=init_seed)
    elif arch == "one_parameter":
        net = OneParameterNet(system, L)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    noise = NoiseModel(delta, _seed_for(seed, "noise", L, delta))
    targets = make_targets(system, C, noise)
    cfg = TrainConfig(L, epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), lr=float(t["lr"]),
                      decay=float(t.get("decay", 0.5)), seed=_seed_for(seed, "batches", L, delta),
                      noise_delta=delta)
    result = train_diagonal(net, TrainSet(C, targets), cfg)
    if not result.certified:
        raise IResNetError(f"Lipschitz certificate failed for L={L}: max {result.lipschitz.max()}")
    return net, result


def write_manifest(out: Path, command: str, run: RunConfig | None, args: dict, digest: str | None):
    extra = {"command": command, "args": args, "dataset_digest": digest}
    manifest = {
        "command": command,
        "args": args,
        "config": run.data if run else None,
        "config_hash": run.digest(extra) if run else hashlib.sha256(
            json.dumps(extra, sort_keys=True, default=str).encode()).hexdigest(),
        "dataset_digest": digest,
        "seed": run["seed"] if run else args.get("seed"),
        "versions": {"iresnet_reg": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _tag(x: float) -> str:
    return f"{x:.6g}"


def cmd_train(args) -> int:
    overrides = {"train": {}}
    if args.L:
        overrides["train"]["L"] = args.L
    if args.noise is not None:
        overrides["train"]["noise"] = [args.noise]
    if args.epochs is not None:
        overrides["train"]["epochs"] = args.epochs
    if args.out:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = RunConfig.load(args.config, overrides)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    _, system, X_train, _, digest = prepare(run)
    for L in run["train"]["L"]:
        for delta in run["train"]["noise"]:
            log.info("training L=%s delta=%s", L, delta)
            net, result = train_net(system, X_train, L, delta, run)
            stem = f"net_L{_tag(L)}_noise{_tag(delta)}"
            save_checkpoint(net, out / f"{stem}.ckpt")
            if result is not None:
                write_loss_trace(out / f"{stem}_loss.csv", result.trace)
    write_manifest(out, "train", run, vars_clean(args), digest)
    return 0


def _load_signals(path: str) -> np.ndarray:
    p = Path(path)
    if p.name.endswith((".idx", ".gz", "ubyte")):
        return load_mnist_idx(p)
    return np.loadtxt(p, delimiter=",", ndmin=2)


def cmd_reconstruct(args) -> int:
    net = load_checkpoint(args.ckpt)
    X = _load_signals(args.input)
    system = net.basis
    if X.shape[1] != system.dim:
        raise ValueError(f"input has {X.shape[1]} columns, checkpoint expects {system.dim}")
    noise = NoiseModel(args.noise, args.seed)
    Z = system.apply_normal(X)
    if noise.delta > 0:
        Z = Z + noise.delta * noise.rng().standard_normal(Z.shape)
    recon = invert(net, Z, k_max=args.k_max, tol=0.0).x
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "reconstruction.csv", recon, delimiter=",", fmt="%.17g")
    mse = mse_reco(net, system, X, noise, k_max=args.k_max)
    (out / "mse.txt").write_text(f"{mse!r}\n")
    print(f"mse_reco {mse:.6g}")
    write_manifest(out, "reconstruct", None, vars_clean(args),
                   file_digest(args.ckpt, args.input))
    return 0


def cmd_filters(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = np.linspace(1.0 / args.points, 1.0, args.points)
    rows = []
    for L in args.L:
        rows.extend(filter_curve(args.family, L, grid, gamma=args.gamma,
                                 alpha_over_p=args.alpha_over_p))
    write_filter_csv(out / f"filter_{args.family}.csv", rows)
    write_manifest(out, "filters", None, vars_clean(args), None)
    return 0


def cmd_approx_study(args) -> int:
    overrides = {"out": args.out} if args.out else {}
    if args.architecture:
        overrides["train"] = {"architecture": args.architecture}
    run = RunConfig.load(args.config, overrides)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    _, system, X_train, X_test, digest = prepare(run)
    grid = lipschitz_grid(args.grid, args.max_m)
    nets = {float(L): train_net(system, X_train, float(L), 0.0, run)[0] for L in grid}
    records = approx_study(nets, system, X_test)
    table = StudyResult(APPROX_COLUMNS, metadata={"grid": args.grid})
    for m, rec in enumerate(records, start=1):
        e = np.concatenate([rec.E_x, [np.nan, np.nan]])
        table.append(m=m, L=rec.L, E_mean=rec.E_mean, E_x1=float(e[0]), E_x2=float(e[1]))
    table.to_csv(out / "loc_approx.csv")
    fit = loglog_decay_fit(grid, [r.E_mean for r in records])
    print(f"E_mean log-log slope {fit.slope:.4g} (r2 {fit.r2:.4g})")
    write_manifest(out, "approx-study", run, vars_clean(args), digest)
    return 0


def cmd_convergence_study(args) -> int:
    overrides = {"out": args.out} if args.out else {}
    run = RunConfig.load(args.config, overrides)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    _, system, X_train, X_test, digest = prepare(run)
    grid = lipschitz_grid("pow3", args.max_m)
    std = std_mnist(system.coefficients(X_train))
    _, abs_levels = noise_levels(std, args.levels)
    clean = [train_net(system, X_train, float(L), 0.0, run)[0] for L in grid]
    matched = None
    if args.pairing == "matched":
        matched = {}
        for m, L in enumerate(grid, start=1):
            for ell, delta in enumerate(abs_levels):
                matched[(m, ell)] = clean[m - 1] if delta == 0 else \
                    train_net(system, X_train, float(L), float(delta), run)[0]
    result = convergence_study(clean, system, X_test, std, grid, n_levels=args.levels,
                               seed=int(run["seed"]), matched_nets=matched)
    if args.pairing == "matched":
        result.rows = [r for r in result.rows if r["pairing"] == "matched"]
    result.to_csv(out / "mse_reco.csv")
    best = argmin_L(result, args.pairing)
    print("best m per noise level:", best)
    print("trend violations:", trend_violations(best_by_increasing_delta(best)))
    write_manifest(out, "convergence-study", run, vars_clean(args), digest)
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iresnet-reg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train diagonal iResNets and write checkpoints")
    p.add_argument("--config")
    p.add_argument("--L", type=float, nargs="+")
    p.add_argument("--noise", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct signals from simulated noisy data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="CSV of signals (rows) or an IDX image file")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-max", type=int, default=30)
    p.add_argument("--out", default="reconstruction")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("filters", help="write filter curves sigma^2 r(sigma^2, s)")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--L", type=float, nargs="+", required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--alpha-over-p", type=float, default=0.1)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--out", default="filters")
    p.set_defaults(func=cmd_filters)

    p = sub.add_parser("approx-study", help="local approximation error over an L grid")
    p.add_argument("--grid", choices=("pow2", "pow3"), default="pow2")
    p.add_argument("--max-m", type=int, default=8)
    p.add_argument("--architecture", choices=("mlp", "affine", "one_parameter", "closed_form_affine"))
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_approx_study)

    p = sub.add_parser("convergence-study", help="reconstruction error over (L, noise) grids")
    p.add_argument("--pairing", choices=("clean", "matched"), default="clean")
    p.add_argument("--max-m", type=int, default=5)
    p.add_argument("--levels", type=int, default=7)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_convergence_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (IResNetError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
