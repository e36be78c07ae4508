"""Command-line driver.

Subcommands: build, synth-corpus, train-toy, prune, eval, ablate, report.
Every subcommand that writes a directory also writes ``config.json`` (the fully
resolved options) there; run timings go to ``meta.json`` so the other outputs
are byte-reproducible.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error,
5 infeasible sparsity plan.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .calibration import CalibConfig, read_corpus, sample_corpus, synthetic_corpus, write_corpus
from .checkpoint import load_model, save_model
from .errors import ColpruneError, DataError
from .evaluation import output_fidelity, perplexity
from .model import ArchSpec, build_model
from .prune import DEFAULT_DELTA_REL, PruneMode, plan_sparsity, prune_model

log = logging.getLogger("colprune")

EXIT_USAGE = 2

DEFAULTS = {
    "build": {
        "family": "opt", "d_model": 64, "d_hidden": 256, "n_heads": 4, "n_blocks": 2,
        "vocab": 512, "max_seq": 128, "seed": 0,
    },
    "synth-corpus": {"vocab": 512, "tokens": 200_000, "seed": 0, "stream": 0},
    "train-toy": {"steps": 1000, "lr": 1.0, "seed": 0, "batch_size": 16, "seq_len": 64},
    "prune": {
        "sparsity": 0.2, "mode": "fasp", "skip_qk": True, "delta_rel": DEFAULT_DELTA_REL,
        "calib_samples": 32, "calib_seq": 128, "calib_seed": 0, "pooled_heads": False,
    },
    "eval": {"seq_len": 128, "reference": None, "fidelity_samples": 8, "seed": 0},
    "ablate": {
        "sparsities": [0.1, 0.2, 0.3], "modes": [m.value for m in PruneMode], "skip_qk": True,
        "delta_rel": DEFAULT_DELTA_REL, "calib_samples": 32, "calib_seq": 128, "calib_seed": 0,
        "seq_len": 128,
    },
    "report": {
        "sparsities": [0.0, 0.1, 0.2, 0.3], "modes": ["fasp"], "skip_qk": True,
        "delta_rel": DEFAULT_DELTA_REL, "calib_samples": 32, "calib_seq": 128, "calib_seed": 0,
        "seq_len": 128,
    },
}


def _float_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _str_list(text: str) -> list:
    return [x.strip() for x in text.split(",") if x.strip()]


def _add_calib(p):
    p.add_argument("--corpus", help="calibration corpus (.tokens or .txt)")
    p.add_argument("--calib-samples", type=int)
    p.add_argument("--calib-seq", type=int)
    p.add_argument("--calib-seed", type=int)
    p.add_argument("--delta-rel", type=float, help="ridge damping relative to mean Gram diagonal")
    p.add_argument("--skip-qk", dest="skip_qk", action="store_true", default=None)
    p.add_argument("--no-skip-qk", dest="skip_qk", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--config", help="JSON file with option values (flags take precedence)")
    parser = argparse.ArgumentParser(prog="colprune", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common])

    p = add("build", "create a randomly initialised toy model")
    p.add_argument("--family", choices=["opt", "llama"])
    for flag in ("d-model", "d-hidden", "n-heads", "n-blocks", "vocab", "max-seq", "seed"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--out", required=True)

    p = add("synth-corpus", "write a seeded synthetic Zipf token corpus")
    for flag in ("vocab", "tokens", "seed", "stream"):
        p.add_argument(f"--{flag}", type=int)
    p.add_argument("--out", required=True, help="output file (.tokens or .txt)")

    p = add("train-toy", "train a toy model with deterministic SGD")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--out", required=True)

    p = add("prune", "calibrate, prune and restore a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--mode", choices=[m.value for m in PruneMode])
    p.add_argument("--pooled-heads", dest="pooled_heads", action="store_true", default=None,
                   help="treat attention V/O channels as one pool instead of per-head equal splits")
    _add_calib(p)
    p.add_argument("--out", required=True)

    p = add("eval", "perplexity (and optional fidelity against a reference)")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", help="evaluation corpus")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--reference", help="reference checkpoint for fidelity metrics")
    p.add_argument("--fidelity-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    for name, help_text in (("ablate", "compare pruning modes (CSV + Markdown table)"),
                            ("report", "sparsity sweep (CSV + SVG/PNG figure)")):
        p = add(name, help_text)
        p.add_argument("--model", required=True)
        p.add_argument("--eval-corpus", help="evaluation corpus (defaults to --corpus)")
        p.add_argument("--sparsities", type=_float_list)
        p.add_argument("--modes", type=_str_list)
        p.add_argument("--seq-len", type=int)
        _add_calib(p)
        p.add_argument("--out", required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS.get(args.command, {}))
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose") or value is None:
            continue
        cfg[key] = value
    cfg["command"] = args.command
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    return out


def _calib_samples(cfg, model):
    if not cfg.get("corpus"):
        raise DataError("--corpus is required")
    calib = CalibConfig(cfg["calib_samples"], cfg["calib_seq"], cfg["calib_seed"], cfg["corpus"])
    if calib.seq_len > model.spec.max_seq:
        raise DataError(f"calib seq {calib.seq_len} exceeds model max_seq {model.spec.max_seq}")
    return sample_corpus(calib, model.spec.vocab)


# ---------------------------------------------------------------- commands


def cmd_build(cfg) -> int:
    spec = ArchSpec(cfg["family"], cfg["d_model"], cfg["d_hidden"], cfg["n_heads"],
                    cfg["n_blocks"], cfg["vocab"], cfg["max_seq"])
    out = _out_dir(cfg)
    save_model(build_model(spec, cfg["seed"]), out)
    log.info("wrote %s", out)
    return 0


def cmd_synth_corpus(cfg) -> int:
    tokens = synthetic_corpus(cfg["tokens"], cfg["vocab"], seed=cfg["seed"], stream=cfg["stream"])
    write_corpus(tokens, cfg["out"])
    return 0


def cmd_train_toy(cfg) -> int:
    from .training import train_toy

    model = load_model(cfg["model"])
    corpus = read_corpus(cfg["corpus"])
    trained, losses = train_toy(model, corpus, cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
                                batch_size=cfg["batch_size"], seq_len=cfg["seq_len"], return_losses=True)
    out = _out_dir(cfg)
    save_model(trained, out)
    if losses:
        _write_json(out / "train_log.json", {"first_loss": losses[0], "last_loss": losses[-1], "steps": len(losses)})
        log.info("loss %.4f -> %.4f", losses[0], losses[-1])
    return 0


def cmd_prune(cfg) -> int:
    model = load_model(cfg["model"])
    samples = _calib_samples(cfg, model)
    mode = PruneMode(cfg["mode"])
    t0 = time.perf_counter()
    plan = plan_sparsity(model, cfg["sparsity"], skip_qk=cfg["skip_qk"], mode=mode,
                         head_aligned=not cfg["pooled_heads"])
    pruned, report = prune_model(model, plan, samples, mode=mode, delta_rel=cfg["delta_rel"])
    out = _out_dir(cfg)
    save_model(pruned, out)
    (out / "prune_report.json").write_text(report.to_json())
    _write_json(out / "meta.json", {**report.meta(), "wall_s": time.perf_counter() - t0})
    log.info("achieved sparsity %.4f (target %.4f)", report.achieved_sparsity, cfg["sparsity"])
    return 0


def cmd_eval(cfg) -> int:
    model = load_model(cfg["model"])
    if not cfg.get("corpus"):
        raise DataError("--corpus is required")
    tokens = read_corpus(cfg["corpus"])
    result = perplexity(model, tokens, cfg["seq_len"])
    if cfg.get("reference"):
        ref = load_model(cfg["reference"])
        seq = min(cfg["seq_len"], model.spec.max_seq)
        rng = np.random.default_rng(cfg["seed"])
        starts = rng.integers(0, max(tokens.size - seq, 0) + 1, size=cfg["fidelity_samples"])
        fid = output_fidelity(ref, model, [tokens[s : s + seq] for s in starts])
        result.block_cosine = fid["block_cosine"]
        result.mean_logit_frobenius_gap = fid["mean_logit_frobenius_gap"]
    out = _out_dir(cfg)
    (out / "eval.json").write_text(result.to_json())
    log.info("perplexity %.4f over %d tokens", result.perplexity, result.token_count)
    return 0


def run_sweep(model, samples, eval_tokens, sparsities, modes, skip_qk, delta_rel, seq_len) -> list:
    rows = []
    for mode in modes:
        mode = PruneMode(mode)
        for s in sparsities:
            plan = plan_sparsity(model, s, skip_qk=skip_qk, mode=mode)
            pruned, report = prune_model(model, plan, samples, mode=mode, delta_rel=delta_rel)
            ppl = perplexity(pruned, eval_tokens, seq_len).perplexity
            rows.append({
                "mode": mode.value,
                "sparsity": s,
                "achieved_sparsity": report.achieved_sparsity,
                "perplexity": ppl,
            })
    return rows


def _sweep_inputs(cfg):
    model = load_model(cfg["model"])
    samples = _calib_samples(cfg, model)
    eval_tokens = read_corpus(cfg.get("eval_corpus") or cfg["corpus"])
    return model, samples, eval_tokens


def _write_csv(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["mode", "sparsity", "achieved_sparsity", "perplexity"],
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "achieved_sparsity": f"{r['achieved_sparsity']:.6f}",
                             "perplexity": f"{r['perplexity']:.6f}"})


def monotone_violations(rows: list) -> list:
    """(mode, s_lo, s_hi) triples where perplexity dropped as sparsity rose."""
    bad = []
    by_mode: dict = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append((r["sparsity"], r["perplexity"]))
    for mode, pts in by_mode.items():
        pts.sort()
        for (s0, p0), (s1, p1) in zip(pts, pts[1:]):
            if p1 < p0:
                bad.append((mode, s0, s1))
    return bad


def cmd_ablate(cfg) -> int:
    model, samples, eval_tokens = _sweep_inputs(cfg)
    t0 = time.perf_counter()
    rows = run_sweep(model, samples, eval_tokens, cfg["sparsities"], cfg["modes"],
                     cfg["skip_qk"], cfg["delta_rel"], cfg["seq_len"])
    dense = perplexity(model, eval_tokens, cfg["seq_len"]).perplexity
    out = _out_dir(cfg)
    _write_csv(out / "ablation.csv", rows)
    sps = list(cfg["sparsities"])
    lines = ["| mode | " + " | ".join(f"{100 * s:g}%" for s in sps) + " |",
             "|---|" + "---|" * len(sps)]
    for mode in cfg["modes"]:
        vals = {r["sparsity"]: r["perplexity"] for r in rows if r["mode"] == PruneMode(mode).value}
        lines.append(f"| {PruneMode(mode).value} | " + " | ".join(f"{vals[s]:.2f}" for s in sps) + " |")
    lines.append("")
    lines.append(f"Dense perplexity: {dense:.2f}")
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    _write_json(out / "meta.json", {"wall_s": time.perf_counter() - t0})
    return 0


def cmd_report(cfg) -> int:
    from .plotting import plot_sweep

    model, samples, eval_tokens = _sweep_inputs(cfg)
    t0 = time.perf_counter()
    rows = run_sweep(model, samples, eval_tokens, cfg["sparsities"], cfg["modes"],
                     cfg["skip_qk"], cfg["delta_rel"], cfg["seq_len"])
    out = _out_dir(cfg)
    _write_csv(out / "sweep.csv", rows)
    plot_sweep(rows, out / "sweep", title=f"{model.spec.family.value}-style toy model")
    for mode, s0, s1 in monotone_violations(rows):
        log.warning("%s: perplexity decreased from sparsity %g to %g", mode, s0, s1)
    _write_json(out / "meta.json", {"wall_s": time.perf_counter() - t0})
    return 0


COMMANDS = {
    "build": cmd_build,
    "synth-corpus": cmd_synth_corpus,
    "train-toy": cmd_train_toy,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ColpruneError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
