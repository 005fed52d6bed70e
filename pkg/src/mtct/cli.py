"""Command-line entry point.

Subcommands: gen-data, train, eval, compare, sweep, gradcheck. Options come
from an optional key=value config file plus flags; flags win. Exit codes:
0 success, 1 usage/config error, 2 contract error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from .checks import run_gradcheck_suite
from .data import (DEFAULT_SCHEMA, Dataset, NoiseProfile, generate_dataset,
                   load_dataset, save_dataset)
from .errors import ConfigError, ContractError, NumericError
from .metrics import evaluate_report
from .model import AttributeSchema, load_checkpoint, save_checkpoint
from .train import REGIMES, Hyperparameters, train_regime

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3

_HYPER_KEYS = {f.name for f in fields(Hyperparameters)}
_DATA_KEYS = {"n_source", "n_target", "n_pairs", "schema"}
_RUN_KEYS = {"data", "test_data", "out", "checkpoint", "regime", "threshold",
             "seeds", "regimes", "fractions", "include_ranking"}
_KNOWN_KEYS = _HYPER_KEYS | _DATA_KEYS | _RUN_KEYS


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_config_file(path: str) -> dict:
    cfg = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"unknown config key: {key!r}")
            cfg[key] = val
    return cfg


def _parse_schema(text: str) -> AttributeSchema:
    attrs = []
    for part in text.split(","):
        name, _, card = part.partition(":")
        if not card:
            raise ConfigError(f"schema entries must be name:cardinality, got {part!r}")
        attrs.append((name.strip(), int(card)))
    return AttributeSchema(tuple(attrs))


def _resolved(args, extra: dict | None = None) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(_read_config_file(args.config))
    for key, val in vars(args).items():
        if key in ("config", "func") or val is None:
            continue
        cfg[key] = val
    if extra:
        cfg.update(extra)
    return cfg


def _hyper_from(cfg: dict) -> Hyperparameters:
    kwargs = {}
    for f in fields(Hyperparameters):
        if f.name in cfg:
            raw = cfg[f.name]
            if f.type == "bool" or isinstance(f.default, bool):
                kwargs[f.name] = raw in (True, "true", "1", "yes")
            else:
                kwargs[f.name] = type(f.default)(raw)
    return Hyperparameters(**kwargs)


def _echo_config(out_dir: str, command: str, cfg: dict, hyper: Hyperparameters | None):
    os.makedirs(out_dir, exist_ok=True)
    record = {"command": command, "config": {k: str(v) for k, v in sorted(cfg.items())}}
    if hyper is not None:
        record["hyperparameters"] = asdict(hyper)
    with open(os.path.join(out_dir, "runrecord.jsonl"), "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _append_records(out_dir: str, dicts: list[dict]):
    with open(os.path.join(out_dir, "runrecord.jsonl"), "a") as f:
        for d in dicts:
            f.write(json.dumps(d, sort_keys=True) + "\n")


def _default_out(cfg: dict) -> str:
    if cfg.get("out"):
        return str(cfg["out"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return f"runs/{stamp}-seed{cfg.get('seed', 0)}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolved(args)
    out = _default_out(cfg)
    schema = _parse_schema(cfg["schema"]) if "schema" in cfg else DEFAULT_SCHEMA
    seed = int(cfg.get("seed", 0))
    n_source = int(cfg.get("n_source", 2000))
    n_target = int(cfg.get("n_target", 400))
    n_pairs = int(cfg.get("n_pairs", 200))
    _echo_config(out, "gen-data", cfg, None)
    ds = generate_dataset(schema, n_source, n_target, n_pairs, NoiseProfile(), seed)
    save_dataset(ds, out)
    manifest = {
        "seed": seed, "n_source": n_source, "n_target": n_target, "n_pairs": n_pairs,
        "schema": [list(a) for a in schema.attributes],
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    print(f"wrote dataset to {out}: {n_source} source, {n_target} target, {n_pairs} pairs")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolved(args)
    out = _default_out(cfg)
    hyper = _hyper_from(cfg)
    regime = str(cfg.get("regime", "MTCT")).upper()
    if regime not in REGIMES:
        print(f"error: invalid regime {regime!r}; valid regimes: {', '.join(REGIMES)}",
              file=sys.stderr)
        return EXIT_USAGE
    dataset = load_dataset(str(cfg["data"]))
    _echo_config(out, "train", cfg, hyper)
    stage1_model = None
    if regime in ("FTT", "MTCT"):
        from .model import build_mtn
        from .train import train_stage1
        stage1_model = build_mtn(dataset.schema, init_seed=hyper.seed)
        train_stage1(stage1_model, dataset, hyper)
        save_checkpoint(os.path.join(out, "stage1.ckpt"), stage1_model, stage="stage1")
    model, record = train_regime(regime, dataset, hyper, stage1_model=stage1_model)
    save_checkpoint(os.path.join(out, "final.ckpt"), model, stage=regime.lower())
    _append_records(out, record.to_dicts())
    print(f"trained {regime}; checkpoint at {os.path.join(out, 'final.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    out = _default_out(cfg)
    model, stage = load_checkpoint(str(cfg["checkpoint"]))
    dataset = load_dataset(str(cfg["data"]))
    if model.schema != dataset.schema:
        raise ContractError("checkpoint schema does not match dataset schema")
    threshold = float(cfg.get("threshold", 0.5))
    _echo_config(out, "eval", cfg, None)
    report = evaluate_report(model, dataset, threshold,
                             metadata={"stage": stage, "threshold": threshold,
                                       "dataset_seed": dataset.seed})
    with open(os.path.join(out, "report.csv"), "w") as f:
        f.write(report.to_csv())
    table = report.to_table()
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return EXIT_OK


def _run_regimes(train_ds: Dataset, test_ds: Dataset, regimes, seeds, hyper_cfg,
                 threshold: float):
    """mAP per (regime label, seed), sharing stage-1 across regimes per seed."""
    from .model import build_mtn
    from .train import train_stage1, clone_to_target
    results: dict[str, dict[int, float]] = {r: {} for r in regimes}
    for seed in seeds:
        hyper = _hyper_from({**hyper_cfg, "seed": seed})
        stage1_model = None
        if any(r in ("NOADPT", "FTT", "MTCT", "MTCT_RANK") for r in regimes):
            stage1_model = build_mtn(train_ds.schema, init_seed=hyper.seed)
            train_stage1(stage1_model, train_ds, hyper)
        for label in regimes:
            regime = "MTCT" if label == "MTCT_RANK" else label
            h = hyper if label != "MTCT_RANK" else _hyper_from(
                {**hyper_cfg, "seed": seed, "stage2_loss": "ranking"})
            s1 = stage1_model if regime in ("NOADPT", "FTT", "MTCT") else None
            model, _ = train_regime(regime, train_ds, h, stage1_model=s1)
            report = evaluate_report(model, test_ds, threshold)
            results[label][seed] = report.map_cls
    return results


def _format_compare(results: dict[str, dict[int, float]]) -> str:
    means = {r: float(np.mean(list(v.values()))) for r, v in results.items()}
    stds = {r: float(np.std(list(v.values()))) for r, v in results.items()}
    base = means.get("NOADPT")
    lines = [f"{'regime':12}{'mAP_cls':>10}{'std':>8}{'d_vs_NOADPT':>13}"]
    for r in sorted(results, key=lambda k: -means[k]):
        delta = "" if base is None else f"{means[r] - base:+.2f}"
        lines.append(f"{r:12}{means[r]:10.2f}{stds[r]:8.2f}{delta:>13}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    cfg = _resolved(args)
    out = _default_out(cfg)
    seeds = [int(s) for s in str(cfg.get("seeds", "1,2,3")).split(",")]
    regimes = [r.strip().upper() for r in
               str(cfg.get("regimes", ",".join(REGIMES))).split(",")]
    if cfg.get("include_ranking"):
        regimes.append("MTCT_RANK")
    for r in regimes:
        if r != "MTCT_RANK" and r not in REGIMES:
            print(f"error: invalid regime {r!r}; valid regimes: {', '.join(REGIMES)}",
                  file=sys.stderr)
            return EXIT_USAGE
    train_ds = load_dataset(str(cfg["data"]))
    test_ds = load_dataset(str(cfg["test_data"]))
    threshold = float(cfg.get("threshold", 0.0))
    _echo_config(out, "compare", cfg, _hyper_from(cfg))
    results = _run_regimes(train_ds, test_ds, regimes, seeds, cfg, threshold)
    table = _format_compare(results)
    with open(os.path.join(out, "compare.txt"), "w") as f:
        f.write(table + "\n")
    with open(os.path.join(out, "compare.json"), "w") as f:
        json.dump(results, f, sort_keys=True, indent=1)
    print(table)
    return EXIT_OK


def subsample_target(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded sub-selection of the target training split; sources kept whole.

    Paired target images are retained first: under a shrinking annotation
    budget the cross-domain couples are the most informative images to keep,
    and dropping them would silently remove the transfer signal along with
    the labels.
    """
    targets = dataset.by_domain("TARGET")
    keep_n = max(1, int(round(len(targets) * fraction / 100.0)))
    rng = np.random.default_rng((seed, 50))
    paired = [s for s in targets if s.pair_id is not None]
    unpaired = [s for s in targets if s.pair_id is None]
    ranked = ([paired[i] for i in rng.permutation(len(paired))]
              + [unpaired[i] for i in rng.permutation(len(unpaired))])
    keep_ids = {s.sample_id for s in ranked[:keep_n]}
    samples = [s for s in dataset.samples
               if s.domain == "SOURCE" or s.sample_id in keep_ids]
    sub = Dataset(dataset.schema, samples, dataset.seed, dataset.noise)
    if not sub.pairs():
        raise ContractError(f"fraction {fraction}% leaves zero cross-domain pairs")
    return sub


def cmd_sweep(args) -> int:
    cfg = _resolved(args)
    out = _default_out(cfg)
    seeds = [int(s) for s in str(cfg.get("seeds", "1,2,3")).split(",")]
    fractions = [int(x) for x in str(cfg.get("fractions", "100,75,50,10")).split(",")]
    regimes = [r.strip().upper() for r in
               str(cfg.get("regimes", "NOADPT,FTT,MTCT")).split(",")]
    train_ds = load_dataset(str(cfg["data"]))
    test_ds = load_dataset(str(cfg["test_data"]))
    threshold = float(cfg.get("threshold", 0.0))
    _echo_config(out, "sweep", cfg, _hyper_from(cfg))
    table: dict[str, dict[int, float]] = {r: {} for r in regimes}
    for frac in fractions:
        per_seed = {r: [] for r in regimes}
        for seed in seeds:
            sub = subsample_target(train_ds, frac, seed)
            res = _run_regimes(sub, test_ds, regimes, [seed], cfg, threshold)
            for r in regimes:
                per_seed[r].append(res[r][seed])
        for r in regimes:
            table[r][frac] = float(np.mean(per_seed[r]))
    lines = ["regime     " + "".join(f"{f:>9}%" for f in fractions)]
    for r in regimes:
        lines.append(f"{r:11}" + "".join(f"{table[r][f]:10.2f}" for f in fractions))
    text = "\n".join(lines)
    with open(os.path.join(out, "sweep.txt"), "w") as f:
        f.write(text + "\n")
    with open(os.path.join(out, "sweep.json"), "w") as f:
        json.dump(table, f, sort_keys=True, indent=1)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(inject_bug=getattr(args, "inject_bug", False))
    ok = True
    for name, err, passed in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name:28} max rel err {err:.3e}")
        ok &= passed
    print(f"gradcheck: {'all passed' if ok else 'FAILURES detected'}")
    return EXIT_OK if ok else EXIT_CONTRACT


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="mtct", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file; flags override it")
        sp.add_argument("--out", help="output directory (default: runs/<timestamp>-seed<seed>)")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate a synthetic cross-domain dataset")
    common(g)
    g.add_argument("--n-source", dest="n_source", type=int)
    g.add_argument("--n-target", dest="n_target", type=int)
    g.add_argument("--n-pairs", dest="n_pairs", type=int)
    g.add_argument("--schema", help="e.g. color:4,pattern:3,shape:3,collar:2")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one regime")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--regime")
    for key in sorted(_HYPER_KEYS - {"seed"}):
        t.add_argument(f"--{key.replace('_', '-')}", dest=key)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", type=float)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="run all regimes and tabulate mAP")
    common(c)
    c.add_argument("--data", required=True)
    c.add_argument("--test-data", dest="test_data", required=True)
    c.add_argument("--seeds")
    c.add_argument("--regimes")
    c.add_argument("--threshold", type=float)
    c.add_argument("--include-ranking", dest="include_ranking", action="store_true",
                   default=None)
    for key in sorted(_HYPER_KEYS - {"seed"}):
        c.add_argument(f"--{key.replace('_', '-')}", dest=key)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="target-data sparsity sweep")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--test-data", dest="test_data", required=True)
    s.add_argument("--seeds")
    s.add_argument("--regimes")
    s.add_argument("--fractions")
    s.add_argument("--threshold", type=float)
    for key in sorted(_HYPER_KEYS - {"seed"}):
        s.add_argument(f"--{key.replace('_', '-')}", dest=key)
    s.set_defaults(func=cmd_sweep)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--inject-bug", dest="inject_bug", action="store_true",
                    help="double one analytic gradient to demonstrate detection")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, NumericError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
