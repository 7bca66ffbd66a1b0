"""``flexpose`` command line: file-based pipeline stages with a checksummed run manifest.

Every stage reads and writes files under the output directory::

    data/     source.jsonl  target_shots.jsonl  target_holdout.jsonl
    models/   source.fxp  adapted.fxp
    logs/     source_loss.csv  adapt_loss.csv  sweep.csv
    samples/  adapted.jsonl  source.jsonl
    eval/     eval.csv  eval.json
    render/   pose_*.png  pose_*.svg
    report/   figures, embedding.csv, summary.json
    manifest.json
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericalError
from .generator import CheckpointError, GeneratorConfig, init_generator, load_checkpoint, save_checkpoint
from .metrics import (MetricError, MetricReport, frechet_distance, median_bandwidth, mmd2, mse, pck,
                      write_embedding_csv, write_reports_csv, write_reports_json)
from .pose import PoseFormatError, PoseSet, load_poses, save_poses
from .render import export_poses
from .synth import (PoseDistributionSpec, ShiftSpec, default_source_spec, global_rotation_shift,
                    make_shifted_dataset, sample_poses)
from .train import AdaptConfig, SourceTrainConfig, adapt, build_guidance, layer_sweep, sample_target, train_source

log = logging.getLogger("flexpose")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

COMMANDS = ("gen-data", "train-source", "adapt", "sweep-layers", "sample", "eval", "render", "report")


class ConfigError(ValueError):
    pass


class MissingArtifactError(ConfigError):
    pass


class ChecksumError(ConfigError):
    pass


# -- configuration -------------------------------------------------------

def default_config() -> dict:
    """Fully materialized default run configuration."""
    adapt_cfg = AdaptConfig().to_json()
    adapt_cfg.pop("seed")
    train_cfg = asdict(SourceTrainConfig())
    train_cfg.pop("seed")
    train_cfg["bandwidth_multipliers"] = list(train_cfg["bandwidth_multipliers"])
    return {
        "seed": 0,
        "out": "flexpose-run",
        "generator": asdict(GeneratorConfig()),
        "source": {"spec": default_source_spec().to_json(), "file": None, "n": 5000},
        "target": {"shift": global_rotation_shift(30.0, 30.0).to_json(), "file": None,
                   "holdout_file": None, "holdout": 5000},
        "train_source": train_cfg,
        "adapt": adapt_cfg,
        "sweep": {"layer_sets": [[l] for l in range(1, 9)]},
        "sample": {"n": 5000},
        "eval": {"a": None, "b": None, "bandwidth": None, "pck_rho": 0.05, "canvas_px": 64, "paired": None},
        "render": {"poses": None, "width": 64, "height": 64, "limit": None},
        "report": {"max_points": 2000},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("spec", "shift"):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def resolve_config(raw: dict | None, seed: int | None = None, out: str | None = None) -> dict:
    """Merge user settings over the defaults, apply overrides and validate."""
    raw = dict(raw or {})
    src_raw, tgt_raw = raw.get("source", {}), raw.get("target", {})
    cfg = _merge(default_config(), raw)
    # a user-supplied file replaces the default generative description on that side
    if isinstance(src_raw, dict) and src_raw.get("file") and "spec" not in src_raw:
        cfg["source"]["spec"] = None
    if isinstance(tgt_raw, dict) and tgt_raw.get("file") and "shift" not in tgt_raw:
        cfg["target"]["shift"] = None
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for side, gen_key in (("source", "spec"), ("target", "shift")):
        block = cfg[side]
        if (block[gen_key] is None) == (block["file"] is None):
            raise ConfigError(f"{side}: set exactly one of '{gen_key}' and 'file'")
        for key in ("file", "holdout_file"):
            if block.get(key) is not None and not Path(block[key]).is_file():
                raise ConfigError(f"{side}.{key}: no such file {block[key]}")
    try:
        GeneratorConfig(**cfg["generator"])
        if cfg["source"]["spec"] is not None:
            PoseDistributionSpec.from_json(cfg["source"]["spec"])
        if cfg["target"]["shift"] is not None:
            ShiftSpec.from_json(cfg["target"]["shift"])
        SourceTrainConfig(**cfg["train_source"])
        _adapt_cfg(cfg)
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    for key in ("n",):
        if cfg["source"][key] < 1 or cfg["sample"][key] < 1:
            raise ConfigError("n must be ≥ 1")
    if cfg["target"]["holdout"] < 1:
        raise ConfigError("n must be ≥ 1")


def _adapt_cfg(cfg: dict, **overrides) -> AdaptConfig:
    kw = dict(cfg["adapt"])
    kw["betas"] = tuple(kw["betas"])
    kw.update(overrides)
    kw.setdefault("seed", stream(cfg["seed"], "adapt"))
    return AdaptConfig(**kw)


def stream(seed: int, name: str) -> int:
    """Independent integer seed for a named stage."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def load_config_file(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return obj


# -- manifest ------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class Run:
    """Output directory plus its manifest."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["out"])
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            try:
                self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"corrupt manifest {self.manifest_path}: {exc}") from exc
        else:
            self.manifest = {"stages": {}}
        self.manifest["tool_version"] = __version__
        self.manifest["config"] = cfg

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _recorded(self) -> dict[str, str]:
        out = {}
        for stage in self.manifest["stages"].values():
            out.update(stage.get("outputs", {}))
        return out

    def require(self, rel: str) -> Path:
        """An upstream artifact; it must exist and match any checksum the manifest holds."""
        p = self.root / rel
        if not p.exists():
            raise MissingArtifactError(f"missing upstream artifact: expected {p}")
        want = self._recorded().get(rel)
        if want is not None and sha256_file(p) != want:
            raise ChecksumError(f"checksum mismatch for {p}: file changed since it was written")
        return p

    def record(self, stage: str, started: str, outputs: list[Path], inputs: list[Path] = ()) -> None:
        def rel(p):
            p = Path(p)
            try:
                return str(p.resolve().relative_to(self.root.resolve()))
            except ValueError:
                return str(p)

        self.manifest["stages"][stage] = {
            "started": started,
            "finished": _now(),
            "inputs": {rel(p): sha256_file(p) for p in inputs},
            "outputs": {rel(p): sha256_file(p) for p in sorted(outputs, key=str)},
        }
        atomic_write_text(self.manifest_path, json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


# -- stages --------------------------------------------------------------

def _source_spec(cfg: dict) -> PoseDistributionSpec:
    return PoseDistributionSpec.from_json(cfg["source"]["spec"])


def cmd_gen_data(run: Run, args) -> list[Path]:
    cfg, seed = run.cfg, run.cfg["seed"]
    outs = [run.path("data/source.jsonl"), run.path("data/target_shots.jsonl")]
    if cfg["source"]["file"]:
        source = load_poses(cfg["source"]["file"])
    else:
        source = sample_poses(_source_spec(cfg), cfg["source"]["n"], stream(seed, "source"), label="source")
    save_poses(source, outs[0])
    shots_n = cfg["adapt"]["shots"]
    if cfg["target"]["file"]:
        shots = load_poses(cfg["target"]["file"])
        holdout = load_poses(cfg["target"]["holdout_file"]) if cfg["target"]["holdout_file"] else None
    else:
        if cfg["source"]["spec"] is None:
            raise ConfigError("a target shift needs a generative source spec")
        spec, shift = _source_spec(cfg), ShiftSpec.from_json(cfg["target"]["shift"])
        shots = make_shifted_dataset(spec, shift, shots_n, stream(seed, "shots"), label="target")
        holdout = make_shifted_dataset(spec, shift, cfg["target"]["holdout"], stream(seed, "holdout"),
                                       label="target")
    save_poses(shots, outs[1])
    if holdout is not None:
        outs.append(run.path("data/target_holdout.jsonl"))
        save_poses(holdout, outs[2])
    return outs


def cmd_train_source(run: Run, args) -> list[Path]:
    cfg, seed = run.cfg, run.cfg["seed"]
    from .report import write_loss_csv

    source = load_poses(run.require("data/source.jsonl"))
    g = init_generator(GeneratorConfig(**cfg["generator"]), stream(seed, "init"))
    tcfg = SourceTrainConfig(**{**cfg["train_source"], "seed": stream(seed, "train")})
    every = max(1, tcfg.iterations // 20)
    g, losses = train_source(g, source, tcfg,
                             callback=lambda i, v: log.info("train-source %d %.6g", i, v) if i % every == 0 else None)
    ck, trace = run.path("models/source.fxp"), run.path("logs/source_loss.csv")
    save_checkpoint(g, None, ck)
    write_loss_csv(losses, trace)
    return [ck, trace]


def _guidance(run: Run):
    cfg = run.cfg
    shots = load_poses(run.require("data/target_shots.jsonl"))
    acfg = _adapt_cfg(cfg)
    return shots, acfg


def cmd_adapt(run: Run, args) -> list[Path]:
    from .report import write_loss_csv

    g, _ = load_checkpoint(run.require("models/source.fxp"))
    shots, acfg = _guidance(run)
    guidance, latents = build_guidance(shots, acfg, stream(run.cfg["seed"], "guidance"), g.config.d_z)
    tau, losses = adapt(g, guidance, latents, acfg)
    ck, trace = run.path("models/adapted.fxp"), run.path("logs/adapt_loss.csv")
    save_checkpoint(g, tau, ck)
    write_loss_csv(losses, trace)
    return [ck, trace]


def cmd_sweep(run: Run, args) -> list[Path]:
    g, _ = load_checkpoint(run.require("models/source.fxp"))
    shots, acfg = _guidance(run)
    guidance, latents = build_guidance(shots, acfg, stream(run.cfg["seed"], "guidance"), g.config.d_z)
    out = run.path("logs/sweep.csv")
    results = layer_sweep(g, guidance, latents, run.cfg["sweep"]["layer_sets"], acfg, csv_path=out)
    for ls, loss in results:
        print(f"layers={'+'.join(map(str, ls))}\tfinal_loss={loss:.6g}")
    return [out]


def cmd_sample(run: Run, args) -> list[Path]:
    n, seed = run.cfg["sample"]["n"], stream(run.cfg["seed"], "sample")
    g, tau = load_checkpoint(run.require("models/adapted.fxp"))
    outs = [run.path("samples/adapted.jsonl"), run.path("samples/source.jsonl")]
    save_poses(sample_target(g, tau, n, seed), outs[0])
    # same latents through the unadapted generator, as a baseline
    save_poses(sample_target(g, None, n, seed), outs[1])
    return outs


def _aligned(a: PoseSet, b: PoseSet, paired) -> bool:
    if paired is not None:
        if paired and len(a) != len(b):
            raise ConfigError("eval.paired is set but the pose files differ in length")
        return bool(paired)
    return len(a) == len(b) and all(la is not None and la == lb for la, lb in zip(a.labels, b.labels))


def evaluate(a: PoseSet, b: PoseSet, ecfg: dict, seed: int | None = None) -> list[MetricReport]:
    """Distribution distances between two pose sets, plus PCK/MSE when they are aligned."""
    if a.topology.m != b.topology.m:
        raise ConfigError("pose files have different joint counts")
    x, y = a.flat(), b.flat()
    sigma = ecfg["bandwidth"] or median_bandwidth(x, y)
    same = x.shape == y.shape and np.array_equal(x, y)
    # identical inputs report exactly zero, as for duplicated sets
    value = 0.0 if same else mmd2(x, y, sigma)
    reports = [
        MetricReport("mmd2", value, {"sigma": sigma, "kernel": "rbf", "identical": same}, len(x), len(y), seed),
        MetricReport("fd", frechet_distance(x, y), {}, len(x), len(y), seed),
    ]
    if _aligned(a, b, ecfg["paired"]):
        rho, px = ecfg["pck_rho"], ecfg["canvas_px"]
        reports.append(MetricReport("pck", pck(a.coords, b.coords, rho), {"rho": rho}, len(x), len(y), seed))
        reports.append(MetricReport("mse", mse(a.coords, b.coords, px), {"canvas_px": px}, len(x), len(y), seed))
    return reports


def _input_path(run: Run, given, default_rel: str) -> Path:
    if given:
        p = Path(given)
        if not p.exists():
            raise MissingArtifactError(f"missing input: expected {p}")
        return p
    return run.require(default_rel)


def cmd_eval(run: Run, args) -> tuple[list[Path], list[Path]]:
    ecfg = run.cfg["eval"]
    pa = _input_path(run, args.a or ecfg["a"], "samples/adapted.jsonl")
    pb = _input_path(run, args.b or ecfg["b"], "data/target_holdout.jsonl")
    reports = evaluate(load_poses(pa), load_poses(pb), ecfg, run.cfg["seed"])
    csv_path, json_path = run.path("eval/eval.csv"), run.path("eval/eval.json")
    write_reports_csv(reports, csv_path)
    write_reports_json(reports, json_path)
    for r in reports:
        print(f"{r.metric}\t{r.value:.6g}\t{json.dumps(r.params, sort_keys=True)}")
    return [csv_path, json_path], [pa, pb]


def cmd_render(run: Run, args) -> tuple[list[Path], list[Path]]:
    rcfg = run.cfg["render"]
    src = _input_path(run, args.poses or rcfg["poses"], "samples/adapted.jsonl")
    poses = load_poses(src)
    if rcfg["limit"]:
        poses = poses.subset(range(min(rcfg["limit"], len(poses))))
    written = export_poses(poses, run.path("render/.keep").parent, rcfg["width"], rcfg["height"])
    return written, [src]


def cmd_report(run: Run, args) -> list[Path]:
    from . import report as rep

    out_dir = run.path("report/.keep").parent
    outs = []
    traces = {}
    for name, rel in (("source", "logs/source_loss.csv"), ("adapt", "logs/adapt_loss.csv")):
        if (run.root / rel).exists():
            traces[name] = rep.read_loss_csv(run.require(rel))
            outs.append(rep.plot_losses({name: traces[name]}, out_dir / f"loss_{name}.png"))
    if (run.root / "logs/sweep.csv").exists():
        outs.append(rep.plot_sweep(rep.read_sweep_csv(run.require("logs/sweep.csv")), out_dir / "sweep.png"))
    sets = {}
    for name, rel in (("source data", "data/source.jsonl"), ("target holdout", "data/target_holdout.jsonl"),
                      ("source samples", "samples/source.jsonl"), ("adapted samples", "samples/adapted.jsonl")):
        if (run.root / rel).exists():
            sets[name] = load_poses(run.require(rel))
    summary = {"losses": {k: {"first": float(v[0]), "last": float(v[-1]), "n": len(v)}
                          for k, v in traces.items() if len(v)}}
    if len(sets) >= 1 and sum(len(s) for s in sets.values()) >= 3:
        mp = run.cfg["report"]["max_points"]
        fig, pts = rep.plot_embedding(sets, out_dir / "embedding.png", mp)
        emb = out_dir / "embedding.csv"
        write_embedding_csv(pts, list(sets), emb)
        outs += [fig, emb]
        last = list(sets)[-1]
        outs.append(rep.plot_pose_grid(sets[last], out_dir / "poses.png"))
    if (run.root / "eval/eval.json").exists():
        summary["eval"] = json.loads(run.require("eval/eval.json").read_text(encoding="utf-8"))
    sp = out_dir / "summary.json"
    sp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outs.append(sp)
    for name, s in summary["losses"].items():
        print(f"loss_{name}\t{s['first']:.6g}\t{s['last']:.6g}\t{s['n']}")
    for row in summary.get("eval", []):
        print(f"{row['metric']}\t{row['value']:.6g}")
    for p in outs:
        print(f"file\t{p.relative_to(run.root).as_posix()}")
    return outs


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "sweep-layers": cmd_sweep,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "render": cmd_render,
    "report": cmd_report,
}


# -- entry point ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flexpose", description="Few-shot pose distribution adaptation.")
    ap.add_argument("--version", action="version", version=f"flexpose {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration (defaults are used for missing keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "render":
            sp.add_argument("--poses", help="pose file to render (default: adapted samples)")
        if name == "eval":
            sp.add_argument("--a", help="first pose file (default: adapted samples)")
            sp.add_argument("--b", help="second pose file (default: target holdout)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(raw, args.seed, args.out)
        run = Run(cfg)
        started = _now()
        result = HANDLERS[args.command](run, args)
        outputs, inputs = result if isinstance(result, tuple) else (result, [])
        run.record(args.command, started, outputs, inputs)
    except (ConfigError, PoseFormatError, MetricError, CheckpointError) as exc:
        print(f"flexpose: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"flexpose: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
