"""Command-line entry points: dataset generation, Laplace validation, training,
rollout, evaluation and snapshot export. Every command writes into a fresh
output directory together with a run manifest."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .autodiff import NonFiniteGradient, save_checkpoint, module_to_arrays
from .bc_padding import load_bc, save_bc
from .datasets import (
    BurgersConfig,
    BurgersDataset,
    CFLViolation,
    LaplaceDataset,
    NonFiniteState,
    SyntheticLaplaceConfig,
    gen_burgers_dataset,
    gen_laplace_dataset,
    self_convergence,
)
from .integrator import SCHEMES, Trajectory, TrajectoryFormatError, read_trajectory, rollout, write_trajectory
from .laplace_fit import (
    LaplaceFitConfig,
    LaplaceProblem,
    block_predictions,
    fit_laplace_block,
    load_fit_config,
    mesh_predictions,
)
from .mesh import load_mesh, save_mesh
from .metrics import evaluate, write_report
from .model import load_model, save_model
from .trainer import load_train_config, train, write_history

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CLIError(Exception):
    code = EXIT_CONFIG


class ConfigError(CLIError):
    code = EXIT_CONFIG


class OutputError(CLIError):
    code = EXIT_IO


# --- run bookkeeping ---------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def revision() -> str:
    """Version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+src.{h.hexdigest()[:12]}"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def prepare_out(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise OutputError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputError(f"{path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, command: str, config: dict, seed, started: str, outputs: list[Path]) -> Path:
    missing = [str(p) for p in outputs if not p.exists()]
    if missing:
        raise OutputError(f"declared outputs were not written: {missing[:3]}")
    doc = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "revision": revision(),
        "started": started,
        "finished": _now(),
        "outputs": [
            {"path": str(p.relative_to(out)), "sha256": _sha256(p), "bytes": p.stat().st_size} for p in outputs
        ],
    }
    path = out / "manifest.json"
    write_json(path, doc)
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise OutputError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise OutputError(f"missing input {p}")
    return p


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma separated list of integers, got {text!r}") from None


# --- dataset directories -----------------------------------------------------------


def save_laplace_dir(ds: LaplaceDataset, out: Path, cfg: SyntheticLaplaceConfig) -> list[Path]:
    (out / "samples").mkdir()
    files = []
    for s in range(len(ds.inputs)):
        p = out / "samples" / f"sample_{s:05d}.pmpg"
        vals = np.stack([ds.inputs[s], ds.targets[s]], axis=-1)[None]
        write_trajectory(p, Trajectory(vals, 0.0))
        files.append(p)
    save_mesh(ds.mesh, out / "mesh.json")
    save_bc(ds.bc, out / "bc.json")
    index = {
        "kind": "laplace",
        "config": _dataclass_json(cfg),
        "mesh": "mesh.json",
        "bc": "bc.json",
        "seeds": [int(s) for s in ds.seeds],
        "split": {k: [int(i) for i in v] for k, v in ds.split.items()},
        "grid_index": ds.grid_index.tolist(),
        "samples": [str(p.relative_to(out)) for p in files],
        "channels": ["field", "laplacian"],
    }
    write_json(out / "dataset.json", index)
    return files + [out / "mesh.json", out / "bc.json", out / "dataset.json"]


def load_laplace_dir(path) -> LaplaceDataset:
    root = _need(path)
    index = _read_json(root / "dataset.json")
    if index.get("kind") != "laplace":
        raise ConfigError(f"{root} does not hold a Laplace dataset")
    vals = np.stack([read_trajectory(root / f).values[0] for f in index["samples"]])
    return LaplaceDataset(
        load_mesh(root / index["mesh"]),
        load_bc(root / index["bc"]),
        np.asarray(index["grid_index"], dtype=np.int64),
        vals[..., 0],
        vals[..., 1],
        np.asarray(index["seeds"], dtype=np.int64),
        {k: np.asarray(v, dtype=np.int64) for k, v in index["split"].items()},
    )


def save_burgers_dir(ds: BurgersDataset, out: Path, cfg: BurgersConfig, extra: dict | None = None) -> list[Path]:
    files = []
    for k, t in enumerate(ds.trajectories):
        p = out / f"traj_{k:03d}.pmpg"
        write_trajectory(p, Trajectory(t, ds.dt))
        files.append(p)
    save_mesh(ds.mesh, out / "mesh.json")
    save_bc(ds.bc, out / "bc.json")
    index = {
        "kind": "burgers",
        "config": _dataclass_json(cfg),
        "mesh": "mesh.json",
        "bc": "bc.json",
        "dt": ds.dt,
        "seeds": [int(s) for s in ds.seeds],
        "grid_index": ds.grid_index.tolist(),
        "trajectories": [p.name for p in files],
        **(extra or {}),
    }
    write_json(out / "dataset.json", index)
    return files + [out / "mesh.json", out / "bc.json", out / "dataset.json"]


def load_burgers_dir(path) -> BurgersDataset:
    root = _need(path)
    index = _read_json(root / "dataset.json")
    if index.get("kind") != "burgers":
        raise ConfigError(f"{root} does not hold a Burgers dataset")
    trajs = [read_trajectory(root / f).values for f in index["trajectories"]]
    return BurgersDataset(
        load_mesh(root / index["mesh"]),
        load_bc(root / index["bc"]),
        np.asarray(index["grid_index"], dtype=np.int64),
        trajs,
        np.asarray(index["seeds"], dtype=np.int64),
        float(index["dt"]),
    )


def _dataclass_json(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


# --- commands ----------------------------------------------------------------------


def cmd_gen_laplace(args) -> list[Path]:
    if args.samples < 1 or args.grid < 3 or args.coarse_nodes < 3:
        raise ConfigError("need --samples >= 1, --grid >= 3 and --coarse-nodes >= 3")
    cfg = SyntheticLaplaceConfig(
        cutoff=args.cutoff, grid=args.grid, samples=args.samples, seed=args.seed, coarse_nodes=args.coarse_nodes
    )
    ds = gen_laplace_dataset(cfg)
    return save_laplace_dir(ds, args.out_path, cfg)


def _laplace_rows(ds: LaplaceDataset, pred: np.ndarray) -> tuple[list, dict]:
    split_of = {int(i): k for k, v in ds.split.items() for i in v}
    err = pred - ds.targets
    rows = []
    for s in range(len(pred)):
        norm = np.linalg.norm(ds.targets[s])
        r = np.linalg.norm(err[s]) / norm if norm > 0 else (0.0 if not np.any(err[s]) else np.inf)
        rows.append((s, split_of.get(s, ""), float(np.mean(err[s] ** 2)), float(r)))
    summary = {}
    for name, idx in ds.split.items():
        if len(idx) == 0:
            continue
        t, e = ds.targets[idx], err[idx]
        norm = np.linalg.norm(t)
        summary[name] = {
            "samples": int(len(idx)),
            "mse": float(np.mean(e**2)),
            "rne": float(np.linalg.norm(e) / norm) if norm > 0 else float(np.linalg.norm(e) > 0),
        }
    return rows, summary


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def cmd_validate_laplace(args) -> list[Path]:
    from .plotting import plot_history, plot_laplace_errors

    ds = load_laplace_dir(args.data)
    problem = LaplaceProblem(ds)
    out = args.out_path
    outputs = []
    mesh_pred = mesh_predictions(problem)
    mesh_rows, mesh_summary = _laplace_rows(ds, mesh_pred)
    doc = {"mode": args.mode, "mesh_laplace": mesh_summary}
    hist = {"mesh laplace": np.array([r[3] for r in mesh_rows if r[1] == "test"])}
    rows = mesh_rows
    if args.mode == "learned":
        fit_cfg = load_fit_config(args.train_config) if args.train_config else LaplaceFitConfig()
        if args.seed is not None:
            fit_cfg.seed = args.seed
        res = fit_laplace_block(problem, fit_cfg, log=_log)
        pred = block_predictions(res.block, problem)[..., 0].numpy()
        rows, summary = _laplace_rows(ds, pred)
        doc.update(
            learned=summary,
            best_epoch=res.best_epoch,
            fit_config=fit_cfg.to_json(),
            block_parameters=sum(p.numel() for p in res.block.parameters()),
        )
        write_history(out / "history.csv", res.history)
        save_checkpoint(out / "laplace_block.pmpn", module_to_arrays(res.block))
        outputs += [out / "history.csv", out / "laplace_block.pmpn"]
        if res.history:
            plot_history(res.history, out / "history.png")
            outputs.append(out / "history.png")
        hist["learned"] = np.array([r[3] for r in rows if r[1] == "test"])
    _write_rows(out / "errors.csv", ["sample", "split", "mse", "rne"], rows)
    write_json(out / "summary.json", doc)
    plot_laplace_errors(hist, out / "errors.png")
    return outputs + [out / "errors.csv", out / "summary.json", out / "errors.png"]


def cmd_gen_burgers(args) -> list[Path]:
    fields = dict(
        nu=args.nu,
        grid=args.grid,
        dt_fine=args.dt_fine,
        dt_out=args.dt_out,
        steps=args.steps,
        trajectories=args.trajectories,
        seed=args.seed,
        ic_cutoff=args.ic_cutoff,
        coarse_nodes=args.coarse_nodes,
    )
    try:
        cfg = BurgersConfig(**fields)
        cfg.thin
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.trajectories < 1 or args.steps < 1:
        raise ConfigError("need --trajectories >= 1 and --steps >= 1")
    extra = {}
    if args.zero_ic:
        ds = gen_burgers_dataset(BurgersConfig(**{**fields, "steps": 1, "trajectories": 1}))
        zeros = np.zeros((cfg.steps, ds.mesh.n_nodes, 2))
        ds = BurgersDataset(ds.mesh, ds.bc, ds.grid_index, [zeros] * cfg.trajectories, ds.seeds, cfg.dt_out)
        extra["zero_ic"] = True
    else:
        ds = gen_burgers_dataset(cfg)
    outputs = save_burgers_dir(ds, args.out_path, cfg, extra)
    if args.self_convergence:
        report = self_convergence(cfg, int(ds.seeds[0]) if len(ds.seeds) else cfg.seed)
        write_json(args.out_path / "convergence.json", report)
        outputs.append(args.out_path / "convergence.json")
    return outputs


def cmd_train(args) -> list[Path]:
    from .plotting import plot_history

    try:
        cfg = load_train_config(_need(args.config))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    ds = load_burgers_dir(args.data)
    use = _int_list(args.trajectories) if args.trajectories else list(range(len(ds.trajectories)))
    if not use or max(use) >= len(ds.trajectories) or min(use) < 0:
        raise ConfigError(f"trajectory selection {use} out of range")
    res = train([ds.trajectories[k] for k in use], ds.mesh, ds.bc, ds.dt, cfg, log=_log)
    out = args.out_path
    save_model(res.model, out / "model.pmpn")
    write_history(out / "history.csv", res.history)
    write_json(out / "train_config.json", cfg.to_json())
    write_json(
        out / "train_summary.json",
        {
            "best_epoch": res.best_epoch,
            "parameters": res.model.n_params(),
            "skipped_segments": res.skipped,
            "trajectories": use,
        },
    )
    outputs = [out / "model.pmpn", out / "model.model.json", out / "model.mesh.json", out / "model.bc.json"]
    outputs += [out / "history.csv", out / "train_config.json", out / "train_summary.json"]
    if res.history:
        plot_history(res.history, out / "history.png")
        outputs.append(out / "history.png")
    return outputs


def cmd_rollout(args) -> list[Path]:
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    model = load_model(_need(args.model))
    ic = read_trajectory(_need(args.ic))
    if not 0 <= args.frame < ic.steps:
        raise ConfigError(f"--frame {args.frame} outside the {ic.steps}-frame file")
    u0 = ic.values[args.frame]
    if u0.shape != (model.n_true, model.cfg.channels):
        raise ConfigError(f"initial state shape {u0.shape} does not fit the model mesh")
    dt = args.dt if args.dt is not None else ic.dt
    if not dt > 0:
        raise ConfigError("time step must be positive; pass --dt")
    traj = rollout(model, u0, args.steps, dt, args.scheme, model.apply_bc)
    path = args.out_path / "rollout.pmpg"
    write_trajectory(path, traj)
    return [path]


def cmd_evaluate(args) -> list[Path]:
    from .plotting import plot_report

    pred = read_trajectory(_need(args.pred))
    truth = read_trajectory(_need(args.truth))
    if pred.values.shape[1:] != truth.values.shape[1:]:
        raise ConfigError(f"node/channel layout differs: {pred.values.shape} vs {truth.values.shape}")
    T = pred.steps
    if truth.steps < T:
        raise ConfigError(f"truth has {truth.steps} frames, prediction {T}")
    report = evaluate(pred.values, truth.values[:T], skip_initial=args.skip_initial)
    out = args.out_path
    write_report(report, out / "report.csv", out / "summary.json")
    plot_report(report.mse, report.rne, report.corr, out / "report.png", pred.dt or None)
    return [out / "report.csv", out / "summary.json", out / "report.png"]


def cmd_export_snapshots(args) -> list[Path]:
    from .plotting import plot_snapshot

    traj = read_trajectory(_need(args.traj))
    mesh = load_mesh(_need(args.mesh))
    if mesh.n_nodes != traj.n_nodes:
        raise ConfigError(f"mesh has {mesh.n_nodes} nodes, trajectory {traj.n_nodes}")
    steps = _int_list(args.steps)
    bad = [k for k in steps if not 0 <= k < traj.steps]
    if bad or not steps:
        raise ConfigError(f"steps {bad or steps} outside 0..{traj.steps - 1}")
    out = args.out_path
    outputs = []
    header = ["x", "y"] + [f"c{c}" for c in range(traj.channels)]
    for k in steps:
        path = out / f"snapshot_{k:05d}.csv"
        rows = [[float(x), float(y)] + [float(v) for v in vals] for (x, y), vals in zip(mesh.nodes, traj.values[k])]
        _write_rows(path, header, rows)
        outputs.append(path)
        if args.images:
            img = out / f"snapshot_{k:05d}.png"
            plot_snapshot(mesh.nodes, mesh.cells, traj.values[k], img, title=f"step {k}")
            outputs.append(img)
    return outputs


# --- argument parsing --------------------------------------------------------------


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshgnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory (must be empty unless --force)")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("gen-laplace", cmd_gen_laplace, "synthetic periodic fields and their Laplacians")
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--grid", type=int, default=129)
    sp.add_argument("--coarse-nodes", type=int, default=983)
    sp.add_argument("--cutoff", type=int, default=12)
    sp.add_argument("--seed", type=int, default=0)

    sp = command("validate-laplace", cmd_validate_laplace, "mesh Laplace or learned Laplace block accuracy")
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=["mesh", "learned"], default="mesh")
    sp.add_argument("--train-config", help="JSON LaplaceFitConfig for --mode learned")
    sp.add_argument("--seed", type=int)

    sp = command("gen-burgers", cmd_gen_burgers, "fine-grid Burgers trajectories sampled on a coarse mesh")
    sp.add_argument("--trajectories", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=1600, help="output frames including the initial state")
    sp.add_argument("--grid", type=int, default=128)
    sp.add_argument("--dt-out", type=float, default=1e-3)
    sp.add_argument("--dt-fine", type=float, default=5e-4)
    sp.add_argument("--nu", type=float, default=5e-3)
    sp.add_argument("--ic-cutoff", type=int, default=4)
    sp.add_argument("--coarse-nodes", type=int, default=503)
    sp.add_argument("--zero-ic", action="store_true", help="smoke test: all-zero trajectories")
    sp.add_argument("--self-convergence", action="store_true", help="also run the grid refinement check")

    sp = command("train", cmd_train, "train a model on a Burgers dataset directory")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--trajectories", help="comma separated trajectory indices (default: all)")
    sp.add_argument("--seed", type=int)

    sp = command("rollout", cmd_rollout, "autoregressive prediction from an initial state")
    sp.add_argument("--model", required=True)
    sp.add_argument("--ic", required=True, help="trajectory file holding the initial state")
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--scheme", choices=sorted(SCHEMES), default="rk2")
    sp.add_argument("--dt", type=float)

    sp = command("evaluate", cmd_evaluate, "per-step MSE, RNE and correlation of a prediction")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--skip-initial", action="store_true")

    sp = command("export-snapshots", cmd_export_snapshots, "per-step CSV (and PNG) snapshots")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--steps", required=True, help="comma separated frame indices")
    sp.add_argument("--images", action=argparse.BooleanOptionalAction, default=True)
    return p


def main(argv=None) -> int:
    torch.set_num_threads(max(1, int(os.environ.get("PMPGN_THREADS", "1"))))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    started = _now()
    config = {k: v for k, v in vars(args).items() if k not in ("fn", "force", "out")}
    try:
        args.out_path = prepare_out(args.out, args.force)
        outputs = args.fn(args)
        write_manifest(args.out_path, args.command, config, config.get("seed"), started, outputs)
    except CLIError as exc:
        _log(f"error: {exc}")
        return exc.code
    except (NonFiniteState, NonFiniteGradient, CFLViolation, FloatingPointError) as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (TrajectoryFormatError, KeyError, json.JSONDecodeError) as exc:
        _log(f"bad input: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _log(f"I/O error: {exc}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
