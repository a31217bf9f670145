"""``pdet`` command line: gen, train, eval and sample.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import fields, inference, spectral, training
from .model import ModelConfig, build, preset

log = logging.getLogger("pdet")


class ConfigError(ValueError):
    """Invalid user input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def worker_cap(requested):
    """Limit worker processes to ``PDET_THREADS`` when it is set."""
    env = os.environ.get("PDET_THREADS")
    if not env:
        return max(1, requested)
    try:
        cap = int(env)
    except ValueError:
        raise ConfigError(f"PDET_THREADS must be a positive integer, got {env!r}") from None
    if cap < 1:
        raise ConfigError(f"PDET_THREADS must be a positive integer, got {env!r}")
    return max(1, min(requested, cap))


# -- configuration ------------------------------------------------------------------------

def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(value):
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


RUN_DEFAULTS = {"seed": 0, "out": "runs/default", "ckpt_every": 0, "horizons": (1, 10, 20),
                "sampler_steps": 25}
DATA_DEFAULTS = {"paths": (), "fractions": (0.7, 0.15, 0.15)}


def _tuple(v):
    if v is None:
        return ()
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


@dataclass
class RunConfig:
    run: dict = field(default_factory=lambda: dict(RUN_DEFAULTS))
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    model: ModelConfig = field(default_factory=lambda: preset("TEST"))
    train: training.TrainConfig = field(default_factory=training.TrainConfig)

    @classmethod
    def from_sections(cls, sections):
        """Build from ``{section: {key: raw value}}``; every problem is reported at once."""
        errors = []
        known = {"run", "data", "model", "train"}
        for name in sections:
            if name not in known:
                errors.append(f"unknown section [{name}] (expected one of {sorted(known)})")
        run = dict(RUN_DEFAULTS)
        data = dict(DATA_DEFAULTS)
        for target, name in ((run, "run"), (data, "data")):
            for key, value in sections.get(name, {}).items():
                if key not in target:
                    errors.append(f"{name}.{key}: unknown key (accepted: {sorted(target)})")
                else:
                    target[key] = value
        run["horizons"] = tuple(int(h) for h in _tuple(run["horizons"]))
        data["paths"] = tuple(str(p) for p in _tuple(data["paths"]))
        data["fractions"] = tuple(float(f) for f in _tuple(data["fractions"]))
        for key in ("seed", "ckpt_every", "sampler_steps"):
            if not isinstance(run[key], int) or isinstance(run[key], bool) or run[key] < 0:
                errors.append(f"run.{key}: must be a non-negative integer, got {run[key]!r}")

        msec = dict(sections.get("model", {}))
        base = msec.pop("preset", "TEST")
        mnames = {f.name for f in dc_fields(ModelConfig)}
        for key in [k for k in msec if k not in mnames]:
            errors.append(f"model.{key}: unknown key (accepted: preset, {', '.join(sorted(mnames))})")
            msec.pop(key)
        if "depths" in msec:
            msec["depths"] = tuple(_tuple(msec["depths"]))
        model_cfg = None
        try:
            model_cfg = preset(str(base), **msec)
        except (ValueError, TypeError) as exc:
            errors.append(f"model: {exc}")

        tsec = dict(sections.get("train", {}))
        tnames = {f.name for f in dc_fields(training.TrainConfig)}
        for key in [k for k in tsec if k not in tnames]:
            errors.append(f"train.{key}: unknown key (accepted: {', '.join(sorted(tnames))})")
            tsec.pop(key)
        if "betas" in tsec:
            tsec["betas"] = tuple(_tuple(tsec["betas"]))
        train_cfg = None
        try:
            train_cfg = training.TrainConfig(**tsec).validate()
        except (ValueError, TypeError) as exc:
            errors.append(f"train: {exc}")
        if model_cfg is not None and train_cfg is not None:
            if (train_cfg.objective == "flow_matching") != model_cfg.diffusion:
                # the objective decides whether the model takes x_t and t
                from dataclasses import replace
                model_cfg = replace(model_cfg, diffusion=train_cfg.objective == "flow_matching")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return cls(run, data, model_cfg, train_cfg)

    def sections(self):
        model = self.model.to_dict()
        model["preset"] = model.pop("name")
        return {"run": dict(self.run), "data": dict(self.data), "model": model,
                "train": self.train.to_dict()}

    def to_ini(self):
        cp = configparser.ConfigParser()
        for name, sec in self.sections().items():
            cp[name] = {k: format_value(v) for k, v in sec.items()}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def read_sections(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return {s: {k: parse_value(v) for k, v in cp[s].items()} for s in cp.sections()}


def apply_overrides(sections, overrides):
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        sections.setdefault(sec.strip(), {})[key.strip()] = parse_value(value)
    return sections


def load_run_config(path=None, overrides=None):
    return RunConfig.from_sections(apply_overrides(read_sections(path), overrides))


# -- gen -------------------------------------------------------------------------------------------

def cmd_gen(args):
    if args.pde not in spectral.PDE_KINDS:
        raise ConfigError(f"--pde: unknown kind {args.pde!r}; expected one of {', '.join(spectral.PDE_KINDS)}")
    if args.res < 4 or args.res & (args.res - 1) or args.res > 256:
        raise ConfigError(f"--res must be a power of two in [4, 256], got {args.res}")
    if args.traj < 1 or args.steps < 1:
        raise ConfigError("--traj and --steps must be >= 1")
    out = Path(args.out)
    path = out if out.suffix == ".pdet" else out / f"{args.pde}.pdet"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"--out: cannot create {path.parent}: {exc}") from exc
    workers = worker_cap(args.workers)
    trajs = spectral.generate_dataset(args.pde, args.traj, args.steps, args.res, args.seed,
                                      args.substeps, workers=workers)
    fields.write_dataset(trajs, path)
    summary = {"pde": args.pde, "path": str(path), "shape": [len(trajs), *trajs[0].data.shape],
               "field_types": trajs[0].field_types, "seed": args.seed, "workers": workers}
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {path} shape={summary['shape']}")
    return 0


# -- train ----------------------------------------------------------------------------------------

def load_datasets(paths):
    if not paths:
        raise ConfigError("data.paths: at least one dataset is required")
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"data.paths: missing dataset files {missing}")
    trajs = []
    for p in paths:
        trajs.extend(fields.read_dataset(p))
    shapes = {tr.data.shape[1:] for tr in trajs}
    if len(shapes) != 1:
        raise ConfigError(f"data.paths: datasets disagree in field/resolution shape {sorted(shapes)}")
    return trajs


def prepare_data(cfg: RunConfig):
    trajs = load_datasets(cfg.data["paths"])
    sp = fields.split(trajs, cfg.run["seed"], cfg.data["fractions"])
    if not sp.train:
        raise ConfigError("data.fractions leave no training trajectories")
    stats = fields.compute_stats([trajs[i] for i in sp.train])
    return trajs, sp, stats


def _trim_metrics(path, step):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep))


def run_train(cfg: RunConfig, resume=None):
    run_dir = Path(cfg.run["out"])
    (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    (run_dir / "report").mkdir(exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.to_ini())

    trajs, sp, stats = prepare_data(cfg)
    train = training.PairDataset([trajs[i] for i in sp.train], cfg.model.time_depth, stats=stats)
    if len(train) < cfg.train.effective_batch:
        raise ConfigError(f"train.effective_batch={cfg.train.effective_batch} exceeds the "
                          f"{len(train)} training pairs available")
    model = build(cfg.model, cfg.run["seed"])
    metrics = run_dir / "metrics.jsonl"
    trainer = training.Trainer(model, cfg.train, metrics_path=metrics)
    extra = {"stats": stats.to_dict(), "split": sp.to_dict(), "datasets": list(cfg.data["paths"]),
             "config": cfg.sections()}
    if resume is not None:
        manifest, _ = training.read_checkpoint(resume)
        try:
            training.check_compatible(manifest, cfg.model)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        trainer.load(resume)
        _trim_metrics(metrics, trainer.step)
        log.info("resumed from %s at step %d", resume, trainer.step)
    elif metrics.exists():
        metrics.unlink()

    every = cfg.run["ckpt_every"]
    if every:
        def save_periodic(tr, rec):
            if tr.step % every == 0:
                tr.save(run_dir / "ckpt" / f"step-{tr.step:07d}.pdet-ckpt", extra)
        trainer.step_hooks.append(save_periodic)
    periodic = tuple(trajs[0].meta.get("periodic", (True, True)))
    trainer.fit(train, periodic=periodic)
    final = run_dir / "ckpt" / "final.pdet-ckpt"
    trainer.save(final, extra)

    test = [trajs[i] for i in sp.test] or [trajs[i] for i in sp.val]
    report = None
    if test:
        trainer.ema.swap()
        report = inference.evaluate_suite(model, {"test": test}, cfg.run["horizons"], run_dir / "report",
                                          stats, cfg.run["sampler_steps"], cfg.run["seed"])
        trainer.ema.swap()
    last = trainer.history[-1]["loss"] if trainer.history else float("nan")
    print(f"trained {trainer.step} steps, final loss {last:.6g}; checkpoint {final}")
    return trainer, report


def cmd_train(args):
    overrides = list(args.set or [])
    if args.out:
        overrides.append(f"run.out={args.out!r}")
    if args.steps is not None:
        overrides.append(f"train.max_steps={args.steps}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    cfg = load_run_config(args.config, overrides)
    run_train(cfg, args.resume)
    return 0


# -- eval / sample ------------------------------------------------------------------------------------

def load_checkpoint_model(ckpt, config=None):
    if not Path(ckpt).exists():
        raise ConfigError(f"--ckpt: {ckpt} does not exist")
    model, manifest = training.load_model(ckpt)
    if config is not None:
        cfg = load_run_config(config)
        try:
            training.check_compatible(manifest, cfg.model)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    extra = manifest.get("extra", {})
    stats = fields.FieldStats.from_dict(extra["stats"]) if "stats" in extra else None
    return model, manifest, stats


def _horizons(text):
    try:
        hs = tuple(int(h) for h in str(text).split(","))
    except ValueError:
        raise ConfigError(f"--horizons must be comma-separated integers, got {text!r}") from None
    if not hs or min(hs) < 1:
        raise ConfigError(f"--horizons must be positive, got {text!r}")
    return hs


def _select(trajs, split_name, manifest, path):
    if split_name == "all":
        return trajs
    extra = manifest.get("extra", {})
    if str(path) not in [str(p) for p in extra.get("datasets", [])] or len(extra.get("datasets", [])) != 1:
        log.warning("%s was not the training dataset; evaluating every trajectory", path)
        return trajs
    ids = extra["split"][split_name]
    return [trajs[i] for i in ids if i < len(trajs)]


def cmd_eval(args):
    model, manifest, stats = load_checkpoint_model(args.ckpt, args.config)
    horizons = _horizons(args.horizons)
    datasets = {}
    for p in args.dataset:
        name = Path(p).stem
        if not Path(p).exists():
            datasets[name] = p  # reported as skipped
            continue
        datasets[name] = _select(fields.read_dataset(p), args.split, manifest, p)
    report = inference.evaluate_suite(model, datasets, horizons, args.out, stats, args.sampler_steps, args.seed)
    for row in report["rows"]:
        print(f"{row['dataset']:>16s}  h={row['horizon']:<3d} nRMSE={row['nRMSE']:.4f}  "
              f"n={row['n_trajectories']} truncated={row['truncated_count']}")
    for s in report["skipped"]:
        print(f"skipped {s['dataset']}: {s['reason']}")
    return 0


def cmd_sample(args):
    model, manifest, stats = load_checkpoint_model(args.ckpt, args.config)
    if not Path(args.dataset).exists():
        raise ConfigError(f"--dataset: {args.dataset} does not exist")
    trajs = fields.read_dataset(args.dataset)
    if not 0 <= args.index < len(trajs):
        raise ConfigError(f"--index must lie in [0, {len(trajs)}), got {args.index}")
    if args.steps < 1 or args.rollout < 1:
        raise ConfigError("--steps and --rollout must be >= 1")
    tr = trajs[args.index]
    depth = model.cfg.time_depth
    first = tr.data[:depth].astype(np.float64)
    if stats is not None:
        first = fields.normalize_array(first, stats)
    cond = inference.conditioning_for(tr, model.cfg.mode)
    step_fn = inference.make_step_fn(model, cond, args.steps, np.random.default_rng(args.seed))
    res = inference.rollout(step_fn, first.astype(model.dtype)[None], args.rollout)
    pred = res.predictions[0]
    if stats is not None:
        pred = fields.denormalize_array(pred, stats)
    data = np.concatenate([tr.data[:depth].astype(np.float64), pred], axis=0)
    meta = dict(tr.meta, sampled_from=str(args.ckpt), sampler_steps=args.steps, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fields.write_dataset([fields.Trajectory(data, tr.field_types, tr.dt, tr.t0, meta)], out)
    print(f"wrote {out} with {args.rollout} predicted steps (sampler steps {args.steps})")
    return 0


# -- entry point -------------------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="pdet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="simulate a dataset")
    g.add_argument("--pde", required=True)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--traj", type=int, default=60)
    g.add_argument("--steps", type=int, default=30)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--substeps", type=int, default=None)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from an INI config")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="nRMSE report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", action="append", required=True)
    e.add_argument("--horizons", default="1,10,20")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--sampler-steps", type=int, default=25)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config")
    e.add_argument("--out", default="report")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="roll out one trajectory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--steps", type=int, default=25, help="Euler steps per sample (flow matching)")
    s.add_argument("--rollout", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--out", default="sample.pdet")
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise ConfigError("pdet: a subcommand is required (gen, train, eval, sample)")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
