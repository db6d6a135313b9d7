"""Command-line entry point: train, eval, predict, dump-selections, bench, gradcheck, ablation.

Exit codes: 0 ok, 1 runtime failure, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import MhaBlockParams, self_mha
from .data import (
    KINDS,
    DataError,
    Sample,
    load_cloud,
    load_manifest,
    normalize_unit_sphere,
    random_rotation_matrix,
    rotate,
    save_cloud,
    synthetic_dataset,
)
from .model import CheckpointError, ConfigError, ModelConfig, forward, init_params, load_checkpoint
from .training import TrainConfig, cross_entropy, evaluate, parts_table, train_loop

log = logging.getLogger("point_transformer")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

# Hyperparameter-table names accepted in config files, mapped onto config fields.
TABLE_KEYS = {
    "batch_size": ("train", "batch_size"),
    "learning_rate": ("train", "lr"),
    "weight_decay": ("train", "weight_decay"),
    "num_points": ("model", "n"),
    "input_dim": ("model", "d"),
    "latent_dim": ("model", "d_m"),
    "num_heads": ("model", "heads"),
    "num_sortnets": ("model", "m"),
    "top_k": ("model", "k"),
    "reduced_point_set": ("model", "n_prime"),
    "reduced_dim": ("model", "d_m_prime"),
    "segmentation_dim": ("model", "d_m_dprime"),
    "local_global_layers": ("model", "lg_layers"),
}
# rFF rows written with their output width included, as in the hyperparameter table
LAYER_KEYS = {
    "local_rff_dims": ("local_rff", "d_m"),
    "sortnet_rff_dims": ("sortnet_rff", "d_m"),
    "segmentation_rff_dims": ("seg_rff", "d_m_dprime"),
}
DATA_DEFAULTS = {"train_size": 800, "test_size": 200, "kinds": KINDS, "noise": 0.01}


@dataclass
class RunConfig:
    """Config-file overrides, split by the object they configure."""

    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    layer_rows: dict = field(default_factory=dict)

    def model_config(self, task: str) -> ModelConfig:
        over = dict(self.model)
        over.setdefault("task", task)
        for key, (fld, _) in LAYER_KEYS.items():
            if key in self.layer_rows:
                over[fld] = tuple(self.layer_rows[key][:-1])
        try:
            cfg = ModelConfig.desk(**over)
        except TypeError as err:
            raise ConfigError(str(err)) from None
        for key, (_, width) in LAYER_KEYS.items():
            if key in self.layer_rows and self.layer_rows[key][-1] != getattr(cfg, width):
                raise ConfigError(f"{key} must end with {width}={getattr(cfg, width)}")
        return cfg

    def train_config(self, seed: int, epochs: int | None, task: str = "classification") -> TrainConfig:
        over = dict(self.train)
        over["seed"] = seed
        if epochs is not None:
            over["epochs"] = epochs
        try:
            return TrainConfig.segmentation(**over) if task == "segmentation" else TrainConfig(**over)
        except TypeError as err:
            raise ConfigError(str(err)) from None

    def data_settings(self) -> dict:
        return {**DATA_DEFAULTS, **self.data}


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Read ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
    run = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        value = _parse_value(raw)
        if key in TABLE_KEYS:
            section, name = TABLE_KEYS[key]
            getattr(run, section)[name] = value
        elif key in LAYER_KEYS:
            run.layer_rows[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        elif key in model_fields:
            run.model[key] = value
        elif key in train_fields:
            run.train[key] = value
        elif key in DATA_DEFAULTS:
            run.data[key] = tuple(value) if key == "kinds" and not isinstance(value, str) else value
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
    if isinstance(run.data.get("kinds"), str):
        run.data["kinds"] = (run.data["kinds"],)
    return run


def dump_config(cfg: ModelConfig, train: TrainConfig, data: dict) -> str:
    """Effective settings as a config file that reproduces the run."""
    lines = [f"{k} = {v!r}" for k, v in cfg.to_dict().items()]
    lines += [f"{k} = {v!r}" for k, v in dataclasses.asdict(train).items() if k != "seed"]
    lines += [f"{k} = {v!r}" for k, v in data.items()]
    return "\n".join(lines) + "\n"


def _load_run_config(args) -> RunConfig:
    if not args.config:
        return RunConfig()
    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text, str(path))


def _datasets(args, run: RunConfig, cfg: ModelConfig, seed: int):
    """Train and test samples from ``--synthetic`` or from manifest files."""
    settings = run.data_settings()
    if args.synthetic:
        kinds = tuple(settings["kinds"])
        bad = [k for k in kinds if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown synthetic kinds {bad}")
        if cfg.n < 64:
            raise ConfigError(f"synthetic shapes need num_points >= 64, got {cfg.n}")
        if cfg.task == "classification" and cfg.num_classes != len(kinds):
            raise ConfigError(f"num_classes={cfg.num_classes} but {len(kinds)} synthetic kinds")
        if cfg.task == "segmentation":
            n_parts = len({p for parts in parts_table(kinds).values() for p in parts})
            if cfg.num_classes != n_parts or cfg.num_categories != len(kinds):
                raise ConfigError(
                    f"synthetic kinds {kinds} need num_classes={n_parts}, num_categories={len(kinds)}"
                )
        tr, te = synthetic_dataset(
            settings["train_size"], settings["test_size"], cfg.n, seed, kinds, settings["noise"]
        )
        return tr, te, settings
    if not getattr(args, "data", None):
        raise DataError("no dataset: pass --synthetic or --data MANIFEST")
    tr = [normalize_unit_sphere(s) for s in load_manifest(args.data)]
    te = [normalize_unit_sphere(s) for s in load_manifest(args.test_data)] if args.test_data else []
    return tr, te, {"manifest": str(args.data)}


def _check_task(args, cfg: ModelConfig) -> None:
    if args.task and args.task != cfg.task:
        raise ConfigError(f"checkpoint is a {cfg.task} model, --task says {args.task}")


def _parts(cfg: ModelConfig, extra: dict):
    kinds = extra.get("data", {}).get("kinds")
    if cfg.task == "segmentation" and kinds:
        return parts_table(tuple(kinds))
    return None


def _report(metrics, cfg: ModelConfig) -> None:
    print(f"accuracy\t{metrics.accuracy:.6f}")
    if cfg.task == "segmentation":
        print(f"miou\t{metrics.mean_iou:.6f}")
    for c, v in sorted(metrics.per_class.items()):
        print(f"class {c}\t{v:.6f}")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run = _load_run_config(args)
    cfg = run.model_config(args.task or "classification")
    train_cfg = run.train_config(args.seed, args.epochs, cfg.task)
    tr, te, settings = _datasets(args, run, cfg, args.seed)
    out = Path(args.out or "run")
    t0 = time.perf_counter()
    extra = {"data": {**settings, "seed": args.seed}}
    res = train_loop(cfg, train_cfg, tr, te, out, extra=extra)
    (out / "config.txt").write_text(dump_config(cfg, train_cfg, {k: v for k, v in settings.items() if k in DATA_DEFAULTS}))
    if res.history:
        epoch, loss, acc, miou = res.history[-1]
        print(f"epoch {epoch}\tloss {loss:.6f}\taccuracy {acc:.6f}\tmiou {miou:.6f}")
    print(f"checkpoint\t{res.checkpoint}")
    print(f"seconds\t{time.perf_counter() - t0:.1f}")
    return EXIT_OK


def _load(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    cfg, params, extra = load_checkpoint(path)
    _check_task(args, cfg)
    if args.config:
        run = _load_run_config(args)
        expected = run.model_config(cfg.task)
        requested = {**run.model}
        for key, (fld, _) in LAYER_KEYS.items():
            if key in run.layer_rows:
                requested[fld] = getattr(expected, fld)
        clash = {k: v for k, v in requested.items() if getattr(cfg, k) != getattr(expected, k)}
        if clash:
            raise ConfigError(f"config disagrees with checkpoint on {sorted(clash)}")
    return cfg, params, extra


def _eval_samples(args, cfg: ModelConfig, extra: dict) -> list[Sample]:
    if args.synthetic:
        data = extra.get("data", {})
        settings = {**DATA_DEFAULTS, **{k: v for k, v in data.items() if k in DATA_DEFAULTS}}
        _, te = synthetic_dataset(
            settings["train_size"], settings["test_size"], cfg.n, data.get("seed", 0),
            tuple(settings["kinds"]), settings["noise"],
        )
        return te
    if not args.data:
        raise DataError("no dataset: pass --synthetic or --data MANIFEST")
    return [normalize_unit_sphere(s) for s in load_manifest(args.data)]


def cmd_eval(args) -> int:
    cfg, params, extra = _load(args)
    samples = _eval_samples(args, cfg, extra)
    rot_rng = np.random.default_rng(args.seed) if args.rotate else None
    perm_rng = np.random.default_rng(args.seed + 1) if args.permute else None
    metrics = evaluate(params, cfg, samples, rotate_rng=rot_rng, permute_rng=perm_rng, parts=_parts(cfg, extra))
    _report(metrics, cfg)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, params, _ = _load(args)
    if not args.inputs:
        raise DataError("predict needs at least one point-cloud file")
    for path in args.inputs:
        sample = normalize_unit_sphere(load_cloud(path))
        if cfg.task == "classification":
            logits = forward(sample.cloud[None], params, cfg).logits.data[0]
            p = np.exp(logits - logits.max())
            p /= p.sum()
            best = int(np.argmax(p))
            print(f"{path}\t{best}\t{p[best]:.6f}")
        else:
            if not 0 <= sample.category < cfg.num_categories:
                raise DataError(f"{path}: category {sample.category} outside [0, {cfg.num_categories})")
            logits = forward(sample.cloud[None], params, cfg, [sample.category]).logits.data[0]
            labels = np.argmax(logits, axis=-1)
            print(f"{path}\t" + " ".join(str(int(v)) for v in labels))
    return EXIT_OK


def cmd_dump_selections(args) -> int:
    cfg, params, extra = _load(args)
    if args.inputs:
        sample = normalize_unit_sphere(load_cloud(args.inputs[0]))
    else:
        samples = _eval_samples(args, cfg, extra)
        if not 0 <= args.index < len(samples):
            raise DataError(f"sample index {args.index} outside [0, {len(samples)})")
        sample = samples[args.index]
    out = Path(args.out or "selections")
    out.mkdir(parents=True, exist_ok=True)
    rot = np.eye(3)
    if args.rotate:
        rot = random_rotation_matrix(np.random.default_rng(args.seed))
        sample = rotate(sample, rot)
    np.savetxt(out / "rotation.txt", rot, fmt="%.17g")
    cats = [sample.category] if cfg.task == "segmentation" else None
    result = forward(sample.cloud[None], params, cfg, cats)
    save_cloud(out / "cloud.txt", Sample(sample.cloud, sample.label, sample.category))
    for m, part in enumerate(result.local):
        picked = Sample(part.source_points[0], sample.label, sample.category)
        save_cloud(out / f"sortnet{m}.txt", picked)
        print(f"sortnet{m}\t{len(part.indices[0])} points\t{out / f'sortnet{m}.txt'}")
    return EXIT_OK


def bench_self_attention(sizes, d_m: int = 64, heads: int = 4, repeats: int = 7, seed: int = 0):
    """Best-of-``repeats`` forward time of one self-attention block per cloud size."""
    rng = np.random.default_rng(seed)
    block = MhaBlockParams.create("bench", d_m, heads, rng)
    times = []
    for n in sizes:
        x = rng.normal(size=(n, d_m))
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            self_mha(x, block)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    exponent = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    return times, exponent


def cmd_bench(args) -> int:
    run = _load_run_config(args)
    d_m = int(run.model.get("d_m", 64))
    heads = int(run.model.get("heads", 4))
    sizes = [int(s) for s in args.sizes.split(",")]
    times, exponent = bench_self_attention(sizes, d_m, heads, args.repeats, args.seed)
    print("n\tseconds")
    for n, t in zip(sizes, times):
        print(f"{n}\t{t:.6f}")
    print(f"exponent\t{exponent:.3f}")
    return EXIT_OK


def gradcheck(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Relative gradient error of every parameter of the tiny model on a random batch."""
    cfg = ModelConfig.tiny()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    clouds = rng.uniform(-1, 1, size=(2, cfg.n, cfg.d))
    labels = rng.integers(0, cfg.num_classes, size=2)
    return nx.gradient_errors(lambda _: cross_entropy(forward(clouds, params, cfg).logits, labels), params.parameters(), eps)


def cmd_gradcheck(args) -> int:
    errors = gradcheck(args.seed)
    worst = max(errors, key=errors.get)
    print(f"parameters\t{len(errors)}")
    print(f"worst\t{worst}\t{errors[worst]:.3e}")
    ok = errors[worst] < 1e-4
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_RUNTIME


def run_ablation(cfg: ModelConfig, train_cfg: TrainConfig, tr, te, variants=("learned", "fps", "random")):
    """Train one model per selection rule on the same data and seed; returns ``{variant: accuracy}``."""
    out = {}
    for v in variants:
        res = train_loop(dataclasses.replace(cfg, selection=v), train_cfg, tr, te)
        out[v] = res.history[-1][2] if res.history else float("nan")
    return out


def cmd_ablation(args) -> int:
    run = _load_run_config(args)
    cfg = run.model_config(args.task or "classification")
    if cfg.task != "classification":
        raise ConfigError("the selection ablation is a classification experiment")
    train_cfg = run.train_config(args.seed, args.epochs)
    if not args.synthetic and not args.data:
        args.synthetic = True
    tr, te, _ = _datasets(args, run, cfg, args.seed)
    results = run_ablation(cfg, train_cfg, tr, te)
    lines = ["variant\taccuracy"] + [f"{k}\t{v:.6f}" for k, v in results.items()]
    print("\n".join(lines))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.tsv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--checkpoint", help="model checkpoint (.ptfm)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--synthetic", action="store_true", help="use the synthetic shape benchmark")
    common.add_argument("--task", choices=("classification", "segmentation"))
    common.add_argument("--rotate", action="store_true", help="randomly rotate every input cloud")
    common.add_argument("--permute", action="store_true", help="shuffle the points of every input cloud")
    common.add_argument("--data", help="manifest of 'path label category' lines")
    common.add_argument("--test-data", help="evaluation manifest for train")
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="point-transformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint").set_defaults(func=cmd_eval)
    p = sub.add_parser("predict", parents=[common], help="classify or segment cloud files")
    p.add_argument("inputs", nargs="*")
    p.set_defaults(func=cmd_predict)
    p = sub.add_parser("dump-selections", parents=[common], help="write each SortNet's top-K points")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--index", type=int, default=0, help="test sample to dump with --synthetic")
    p.set_defaults(func=cmd_dump_selections)
    p = sub.add_parser("bench", parents=[common], help="time self-attention against cloud size")
    p.add_argument("--sizes", default="128,256,512,1024")
    p.add_argument("--repeats", type=int, default=7)
    p.set_defaults(func=cmd_bench)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check on the tiny model").set_defaults(
        func=cmd_gradcheck
    )
    sub.add_parser("ablation", parents=[common], help="learned vs FPS vs random selection").set_defaults(
        func=cmd_ablation
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
