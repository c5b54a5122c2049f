"""Command-line entry point: ``patchar {gen-data,train,sample,ablate,flops,verify}``.

All commands read one flat key-value config (YAML file via ``--config``,
overridden by ``--<key>`` flags). Every file a command writes carries the
resolved config and its hash; ``verify`` recomputes that hash.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import flops as fl
from . import io
from .model import ModelConfig, PatchARModel, generate_batch, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig
from .training import (
    NumericAbort,
    TaskClasses,
    TrainConfig,
    classes_from_record,
    continuation_metrics,
    diversity_table,
    evaluate,
    load_dataset,
    make_dataset,
    make_optimizer,
    save_dataset,
    train,
)

log = logging.getLogger("patchar")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

RECORD_VERSION = 1
# keys that only locate files; they do not change any computed number
PATH_KEYS = ("out", "data", "heldout", "checkpoint", "resume")
SAMPLING_KEYS = ("tau", "nfe", "w", "solver", "time_grid")


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    data: str | None = None
    heldout: str | None = None
    checkpoint: str | None = None
    resume: str | None = None
    # task / dataset
    count: int = 2000
    freqs: list = field(default_factory=lambda: list(TaskClasses.freqs))
    amps: list = field(default_factory=lambda: list(TaskClasses.amps))
    lengths: list = field(default_factory=lambda: list(TaskClasses.lengths))
    # model
    token_dim: int = 8
    patch_size: int = 4
    history: int = 1
    lm_dim: int = 128
    lm_layers: int = 4
    lm_ffn: int = 128
    lm_heads: int = 2
    enc_dim: int = 64
    enc_layers: int = 2
    enc_ffn: int = 128
    enc_heads: int = 2
    dit_dim: int = 64
    dit_layers: int = 2
    dit_ffn: int = 128
    dit_heads: int = 2
    time_features: int = 32
    precision: str = "float64"
    # training
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    cond_dropout: float = 0.1
    log_every: int = 100
    # sampling and evaluation
    tau: float = 1.0
    nfe: int = 10
    w: float = 1.0
    solver: str = "ddim"
    time_grid: list | None = None
    n_prompts: int = 100
    prompt_tokens: int = 8
    max_patches: int | None = None
    taus: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    repeats: int = 100
    dispersion_patches: int = 2
    dispersion_prompt_tokens: int = 0  # a token prompt pins the phase, leaving nothing to disperse
    # ablation
    sweep: dict = field(default_factory=dict)
    # flops
    arch: str = "0.6b"
    layers: int = 1
    hidden: int = 1
    length: int = 1
    ffn: int = 1
    kernel: int = 1
    prefix: int = 0
    heads: int = 1
    guidance: bool = True
    quadratic_attention: bool = False
    check_oracle: bool = False
    audio_prompt_tokens: int = 120
    target_tokens: int = 400
    text_tokens: int = 91

    def resolved(self) -> dict:
        return asdict(self)

    def hashable(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in PATH_KEYS}

    @property
    def hash(self) -> str:
        return io.config_hash(self.hashable())

    def classes(self) -> TaskClasses:
        return TaskClasses(tuple(self.freqs), tuple(self.amps), tuple(self.lengths), self.token_dim, self.patch_size)

    def model_config(self, classes: TaskClasses) -> ModelConfig:
        keys = {f.name for f in fields(ModelConfig)} - {"text_vocab"}
        return ModelConfig(text_vocab=classes.vocab_size, **{k: getattr(self, k) for k in keys})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            cond_dropout=self.cond_dropout,
            seed=self.seed,
        )

    def sampler_config(self, **overrides) -> SamplerConfig:
        grid = tuple(self.time_grid) if self.time_grid else None
        kw = dict(tau=self.tau, nfe=self.nfe, w=self.w, solver=self.solver, time_grid=grid) | overrides
        return SamplerConfig(**kw)


def _coerce(name: str, value, default):
    """Check a config value against the type of its default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-4 as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{name} must be a list")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{name} must be a mapping")
    return value


_DEFAULTS = RunConfig()


def build_config(doc: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v, getattr(_DEFAULTS, k)) for k, v in doc.items()}
    cfg = RunConfig(**values)
    for k in cfg.sweep:
        if k not in known or k in PATH_KEYS or k in ("sweep", "seed"):
            raise ConfigError(f"cannot sweep over {k!r}")
    return cfg


def load_config(path: str | None, overrides: dict) -> RunConfig:
    doc = {}
    if path:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a key-value mapping")
    doc.update(overrides)
    return build_config(doc)


# -- output helpers ---------------------------------------------------------------------

def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, "format_version": RECORD_VERSION}


def _header(cfg: RunConfig) -> dict:
    return {"config": cfg.resolved(), **_stamp(cfg)}


class MetricsWriter:
    """Line-delimited JSON to a file and to stdout; the first line holds the config."""

    def __init__(self, path: Path, cfg: RunConfig, echo: bool = True):
        self.cfg, self.echo = cfg, echo
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w")
        self._write({"event": "config", **_header(cfg)}, echo=False)

    def _write(self, rec: dict, echo: bool) -> None:
        line = json.dumps(rec, sort_keys=True)
        self.fh.write(line + "\n")
        self.fh.flush()
        if echo:
            print(line, flush=True)

    def emit(self, event: str, **payload) -> None:
        self._write({"event": event, **payload, **_stamp(self.cfg)}, self.echo)

    def close(self) -> None:
        self.fh.close()


def write_json(path: Path, cfg: RunConfig, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**payload, **_header(cfg)}, sort_keys=True, indent=1) + "\n")


def write_table(path: Path, cfg: RunConfig, columns: list[str], rows: list[dict]) -> None:
    """Whitespace-separated columns under ``#`` comment lines carrying the config."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# format_version: {RECORD_VERSION}",
        f"# config_hash: {cfg.hash}",
        f"# config: {json.dumps(cfg.resolved(), sort_keys=True)}",
        "\t".join(columns),
    ]
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _load_data(path: str | None, what: str):
    if not path:
        raise ConfigError(f"{what} path is required")
    try:
        examples, meta = load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"{what} file not found: {path}") from exc
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"cannot read {what} file {path}: {exc}") from exc
    return examples, meta


def _load_model(path: str | None):
    if not path:
        raise ConfigError("checkpoint path is required")
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> Path:
    if cfg.count <= 0:
        raise ConfigError("count must be positive")
    try:
        classes = cfg.classes()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg.out)
    examples = make_dataset(cfg.seed, cfg.count, classes)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(out, examples, cfg.seed, classes, extra_meta=_header(cfg))
    except OSError as exc:
        raise DataError(f"cannot write dataset {out}: {exc}") from exc
    print(json.dumps({"event": "dataset", "path": str(out), "count": cfg.count, **_stamp(cfg)}, sort_keys=True))
    return out


def _ckpt_meta(cfg: RunConfig, step: int, data_hash: str | None, **extra) -> dict:
    return {**_header(cfg), "step": step, "data_config_hash": data_hash, **extra}


def cmd_train(cfg: RunConfig) -> dict:
    """Train from scratch (or from ``resume``) and write checkpoint, metrics and record."""
    examples, meta = _load_data(cfg.data, "training data")
    classes = classes_from_record(meta["classes"])
    try:
        mcfg = cfg.model_config(classes)
        tcfg = cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if mcfg.token_dim != classes.token_dim:
        raise ConfigError("token_dim does not match the dataset")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"

    model = PatchARModel(mcfg, seed=cfg.seed)
    opt = make_optimizer(model, tcfg)
    start = 0
    if cfg.resume:
        model, extra, rmeta = _load_model(cfg.resume)
        if model.cfg != mcfg:
            raise ConfigError("resume checkpoint was trained with a different model config")
        opt = make_optimizer(model, tcfg)
        opt.load_state({k[4:]: v for k, v in extra.items() if k.startswith("opt/")})
        start = int(rmeta["step"])
        if start > tcfg.steps:
            raise ConfigError(f"checkpoint is at step {start}, beyond steps={tcfg.steps}")

    data_hash = meta.get("config_hash")
    writer = MetricsWriter(out / "metrics.jsonl", cfg)
    series = []

    def on_step(i, losses):
        if i % cfg.log_every == 0 or i == tcfg.steps - 1:
            rec = {"step": i, "l_diff": losses.l_diff, "l_stop": losses.l_stop, "total": losses.total}
            series.append(rec)
            writer.emit("train", **rec)

    def save(step, **extra_meta):
        opt_state = {f"opt/{k}": v for k, v in opt.state().items()}
        save_checkpoint(ckpt_path, model, opt_state, _ckpt_meta(cfg, step, data_hash, **extra_meta))

    try:
        history = train(model, examples, tcfg, opt, start_step=start, callback=on_step)
    except NumericAbort as exc:
        # parameters are untouched by the failing step, so they are the last good state
        step = exc.diagnostics.get("step", start)
        save(step, aborted=True)
        writer.emit("abort", message=str(exc), step=step)
        writer.close()
        raise
    save(tcfg.steps)
    totals = [h.total for h in history]
    final = {
        "steps": tcfg.steps,
        "start_step": start,
        "first_100_mean": float(np.mean(totals[:100])) if totals else None,
        "last_100_mean": float(np.mean(totals[-100:])) if totals else None,
        "final_total": totals[-1] if totals else None,
        "n_parameters": model.num_parameters(),
    }
    writer.emit("final", **final)
    writer.close()
    record = {"kind": "train", "metrics": series, "final": final, "checkpoint": str(ckpt_path)}
    write_json(out / "record.json", cfg, record)
    return record


def cmd_sample(cfg: RunConfig) -> dict:
    """Continue held-out prompts and tabulate dispersion over temperatures."""
    model, _, _ = _load_model(cfg.checkpoint)
    examples, meta = _load_data(cfg.heldout or cfg.data, "held-out data")
    classes = classes_from_record(meta["classes"])
    try:
        scfg = cfg.sampler_config()
        for tau in cfg.taus:
            cfg.sampler_config(tau=float(tau))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.n_prompts <= 0 or cfg.prompt_tokens < 0 or cfg.dispersion_prompt_tokens < 0:
        raise ConfigError("n_prompts must be positive and prompt token counts non-negative")
    chosen = examples[: cfg.n_prompts]
    out = Path(cfg.out)
    writer = MetricsWriter(out / "metrics.jsonl", cfg)

    p = model.cfg.patch_size
    longest = max(e.tokens.shape[0] for e in chosen)
    max_patches = cfg.max_patches or math.ceil((longest - cfg.prompt_tokens) / p) + 2
    rng = np.random.default_rng(cfg.seed)
    results = []
    for lo in range(0, len(chosen), 50):
        chunk = chosen[lo : lo + 50]
        prompts = np.stack([e.tokens[: cfg.prompt_tokens] for e in chunk]) if cfg.prompt_tokens else None
        results += generate_batch(model, np.stack([e.text_ids for e in chunk]), prompts, scfg, max_patches, rng)

    metrics = continuation_metrics(chosen, results, classes, cfg.prompt_tokens) if cfg.prompt_tokens >= 2 else None
    tokens = np.zeros((len(results), max_patches * p, model.cfg.token_dim))
    for i, r in enumerate(results):
        tokens[i, : r.tokens.shape[0]] = r.tokens
    arrays = {
        "tokens": tokens,
        "n_patches": np.array([r.n_patches for r in results], dtype=np.int64),
        "stopped": np.array([r.stopped for r in results], dtype=bool),
        "finite": np.array([np.isfinite(r.tokens).all() for r in results], dtype=bool),
    }
    out.mkdir(parents=True, exist_ok=True)
    io.write_container(out / "samples.bin", "samples", arrays, {**_header(cfg), "checkpoint": cfg.checkpoint})

    rows = diversity_table(
        model,
        chosen[0],
        taus=[float(t) for t in cfg.taus],
        repeats=cfg.repeats,
        nfe=cfg.nfe,
        w=cfg.w,
        n_patches=cfg.dispersion_patches,
        seed=cfg.seed,
        prompt_tokens=cfg.dispersion_prompt_tokens,
        solver=cfg.solver,
    )
    write_table(out / "dispersion.tsv", cfg, ["tau", "std", "mean_abs"], rows)
    for r in rows:
        writer.emit("dispersion", **r)
    gen = [r.tokens for r in results if r.tokens.size]
    summary = {
        "all_finite": bool(arrays["finite"].all()),
        "max_abs": float(max((np.abs(g).max() for g in gen), default=0.0)),
        "metrics": metrics.as_dict() if metrics else None,
    }
    writer.emit("sample", **summary)
    writer.close()
    record = {"kind": "sample", "final": summary, "dispersion": rows, "checkpoint": cfg.checkpoint}
    write_json(out / "record.json", cfg, record)
    return record


def _arm_name(combo: dict) -> str:
    return ",".join(f"{k}={json.dumps(v, separators=(',', ':'))}" for k, v in combo.items())


def cmd_ablate(cfg: RunConfig) -> list[dict]:
    """One training (and evaluation) run per point of the sweep grid, same seeds throughout."""
    if not cfg.sweep:
        raise ConfigError("ablate needs a non-empty 'sweep' mapping")
    for k, vals in cfg.sweep.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep values for {k!r} must be a non-empty list")
    keys = list(cfg.sweep)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*cfg.sweep.values())]
    names = [_arm_name(c) for c in combos]
    if len(set(names)) != len(names):
        raise ConfigError("sweep arms overlap: duplicate values give the same output directory")
    out = Path(cfg.out)
    arm_dirs = [out / n for n in names]
    for d in arm_dirs:
        if d.exists() and any(d.iterdir()):
            raise ConfigError(f"arm output directory {d} already exists and is not empty")
    if cfg.heldout is None:
        raise ConfigError("ablate needs a held-out dataset to score the arms")
    heldout, hmeta = _load_data(cfg.heldout, "held-out data")
    classes = classes_from_record(hmeta["classes"])

    sampling_only = all(k in SAMPLING_KEYS for k in keys)
    shared_ckpt = cfg.checkpoint
    if sampling_only and not shared_ckpt:
        base = dataclasses.replace(cfg, out=str(out / "base"), sweep={})
        cmd_train(base)
        shared_ckpt = str(out / "base" / "model.ckpt")

    records, rows = [], []
    for combo, name, d in zip(combos, names, arm_dirs):
        arm = build_config({**cfg.resolved(), **combo, "out": str(d), "sweep": {}})
        if sampling_only:
            ckpt = shared_ckpt
        else:
            cmd_train(arm)
            ckpt = str(d / "model.ckpt")
        model, _, _ = _load_model(ckpt)
        try:
            scfg = arm.sampler_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        m = evaluate(model, heldout[: arm.n_prompts], classes, scfg, seed=arm.seed, prompt_tokens=arm.prompt_tokens)
        rec = {"kind": "ablate-arm", "arm": combo, "checkpoint": ckpt, "final": m.as_dict()}
        write_json(d / "eval.json", arm, rec)
        print(json.dumps({"event": "arm", "arm": combo, **m.as_dict(), **_stamp(arm)}, sort_keys=True), flush=True)
        records.append(rec)
        rows.append({**{k: combo[k] for k in keys}, **{k: v for k, v in m.as_dict().items() if k != "extra"}})
    cols = keys + ["freq_accuracy", "stop_accuracy", "boundary_discontinuity", "continuation_error", "runaway_rate", "n"]
    write_table(out / "ablation.tsv", cfg, cols, rows)
    return records


def cmd_flops(cfg: RunConfig) -> fl.CostReport | dict:
    try:
        if cfg.arch == "0.6b":
            report = fl.reference_report(cfg.nfe, cfg.guidance, cfg.quadratic_attention)
        elif cfg.arch == "custom":
            cm = fl.CostModel(
                fl.StackDims(cfg.enc_layers, cfg.enc_dim, cfg.enc_ffn),
                fl.StackDims(cfg.lm_layers, cfg.lm_dim, cfg.lm_ffn),
                fl.StackDims(cfg.dit_layers, cfg.dit_dim, cfg.dit_ffn),
                cfg.patch_size,
                cfg.history,
            )
            report = fl.composite_report(
                cm, cfg.audio_prompt_tokens, cfg.target_tokens, cfg.nfe, cfg.guidance, cfg.text_tokens, cfg.quadratic_attention
            )
        else:
            spec = fl.ArchSpec(cfg.arch, cfg.layers, cfg.hidden, cfg.length, cfg.ffn, cfg.kernel, cfg.prefix, cfg.heads)
            count = fl.causal_transformer_flops(spec, cfg.quadratic_attention) if cfg.arch == "causal_transformer" else fl.flops(spec)
            rec = {"event": "flops", "arch": cfg.arch, "flops": count, **_stamp(cfg)}
            if cfg.check_oracle:
                rec["oracle"] = fl.measure_flops(spec, seed=cfg.seed)
                rec["oracle_match"] = rec["oracle"] == count
            print(json.dumps(rec, sort_keys=True))
            return rec
    except ValueError as exc:
        raise ConfigError(f"malformed FLOPs spec: {exc}") from exc
    print(report.table(), file=sys.stderr)
    print(json.dumps({"event": "flops", **report.to_record(), **_stamp(cfg)}, sort_keys=True))
    return report


# -- verification ------------------------------------------------------------------------

def _recompute(config: dict) -> str:
    return build_config(config).hash


def verify_file(path: Path) -> tuple[bool, str]:
    """Check that the config embedded in ``path`` hashes to the recorded value."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(io.MAGIC))
        if magic == io.MAGIC:
            meta = io.read_header(path)["meta"]
            pairs = [(meta.get("config"), meta.get("config_hash"))]
        elif path.suffix == ".tsv":
            lines = [line[2:] for line in path.read_text().splitlines() if line.startswith("# ")]
            head = dict(line.split(": ", 1) for line in lines)
            pairs = [(json.loads(head["config"]), head["config_hash"])]
        elif path.suffix == ".jsonl":
            recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
            first = recs[0]
            pairs = [(first.get("config"), first.get("config_hash"))]
            pairs += [(first.get("config"), r.get("config_hash")) for r in recs[1:]]
        else:
            rec = json.loads(path.read_text())
            pairs = [(rec.get("config"), rec.get("config_hash"))]
    except (OSError, ValueError, KeyError) as exc:
        return False, f"unreadable: {exc}"
    for config, recorded in pairs:
        if config is None or recorded is None:
            return False, "no embedded config"
        try:
            actual = _recompute(config)
        except ConfigError as exc:
            return False, f"embedded config invalid: {exc}"
        if actual != recorded:
            return False, f"hash mismatch: recorded {recorded}, recomputed {actual}"
    return True, pairs[0][1]


def cmd_verify(paths: list[str]) -> bool:
    ok_all = True
    for p in paths:
        ok, detail = verify_file(Path(p))
        ok_all &= ok
        print(json.dumps({"event": "verify", "path": p, "ok": ok, "detail": detail}, sort_keys=True))
    return ok_all


# -- argument parsing ---------------------------------------------------------------------

def _flag_value(text: str):
    """Flags accept YAML scalars and flow collections, e.g. ``--taus '[0, 0.5, 1]'``."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


HELP = {
    "gen-data": "write a toy sinusoid dataset",
    "train": "train a model on a dataset",
    "sample": "continue held-out prompts and tabulate dispersion over temperature",
    "ablate": "train and evaluate every arm of a config sweep",
    "flops": "closed-form FLOPs report",
    "verify": "check the config hash stamped into output files",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchar",
        description="Train, sample and cost a patch-level autoregressive diffusion model on a toy task.",
        epilog="Every command except verify takes --config FILE plus one --key-name flag per config key.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "sample", "ablate", "flops"):
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", help="YAML file with RunConfig keys")
        for f in fields(RunConfig):
            sp.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=_flag_value, default=argparse.SUPPRESS)
    vp = sub.add_parser("verify", help=HELP["verify"])
    vp.add_argument("paths", nargs="+")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "ablate": cmd_ablate, "flops": cmd_flops}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "verify":
        return EXIT_OK if cmd_verify(args.paths) else EXIT_DATA
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
