"""Command-line entry point: ``python -m cifalign <subcommand> [flags]``.

Every subcommand resolves one flat configuration (defaults, then the
``--config`` JSON file, then ``--set`` overrides, then the dedicated flags)
and writes only below ``--out``.  Exit status is 0 on success, 2 for a
configuration or usage problem and 3 for a failure while running.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .cif import (AlignmentWeights, CifConfig, FrameSequence, TailPolicy, firing_signature,
                  integrate_and_fire, predict_weights, quantity_loss, scale_weights)
from .errors import CifAlignError, ConfigError
from .evalmetrics import (pca_project, similarity_heatmap, write_heatmap_csv, write_heatmap_pgm,
                          write_pca_csv, write_report)
from .losses import (LossConfig, aligned_token_similarity_loss, align_loss, cosine_align_loss,
                     info_nce, logits_cross_entropy, subword_loss, total_loss)
from .models import (GRAFT_DEPTHS, GraftedModel, encode_acoustic, graft_forward,
                     linguistic_targets, load_checkpoint, save_checkpoint)
from .synthdata import SynthConfig, generate_corpus, generate_utterances, load_corpus, split_corpus
from .train import (TrainConfig, evaluate_checkpoint, finetune_downstream, teacher_forced_forward,
                    train_align)

log = logging.getLogger("cifalign")

SUBCOMMANDS = ("gen-data", "train-align", "finetune", "eval", "heatmap", "pca", "ablate",
               "gradcheck")
COMPARE_COLUMNS = ("mae_ms", "median_ms", "acc_50", "acc_100", "acc_500", "acc_1000",
                   "diagonality", "recall_weighted", "f1_weighted")


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    kind: type
    help: str


def _dataclass_keys(cls, skip=(), notes=None):
    notes = notes or {}
    out = []
    for f in fields(cls):
        if f.name in skip:
            continue
        kind = type(f.default) if f.default is not None else object
        out.append(Key(f.name, f.default, kind, notes.get(f.name, "")))
    return out


CONFIG_KEYS = {k.name: k for k in [
    *_dataclass_keys(SynthConfig, notes={
        "sentiment_map": "per-token valence in {-1,0,1}; null picks vocab/8 of each sign",
        "seed": "seed for data, initialisation and shuffling"}),
    Key("count", 500, int, "utterances to generate"),
    Key("split", (0.8, 0.1, 0.1), tuple, "train/dev/test fractions"),
    Key("dim", 32, int, "shared speech and text width"),
    Key("hidden", 64, int, "feed-forward hidden width"),
    Key("attention", False, bool, "add a single-head attention block to each text layer"),
    Key("lm_seed", None, int, "seed of the frozen text model; null reuses seed"),
    Key("beta", 1.0, float, "firing threshold"),
    Key("tail_policy", TailPolicy.FIRE_IF_AT_LEAST_HALF.value, str,
        "leftover weight at inference: fire_if_at_least_half, always_fire or discard"),
    *_dataclass_keys(TrainConfig, skip=("seed",), notes={
        "total_steps": "null means epochs x batches per epoch"}),
    Key("corpus", None, str, "corpus directory from gen-data; null regenerates in memory"),
    Key("checkpoint", None, str, "input checkpoint for finetune/eval/heatmap/pca"),
    Key("eval_split", "dev", str, "split scored by eval/heatmap/pca: train, dev, test or all"),
    Key("utterance", 0, int, "index within the eval split drawn by heatmap"),
    Key("pca_utterances", 20, int, "utterances pooled into the pca export"),
    Key("ablate_depths", tuple(GRAFT_DEPTHS), tuple, "graft depths swept by ablate"),
    Key("ablate_modes", ("cos", "infonce"), tuple, "alignment losses swept by ablate"),
]}


def config_help():
    lines = ["configuration keys (set with --set KEY=VALUE or a --config JSON file):"]
    for key in CONFIG_KEYS.values():
        default = json.dumps(list(key.default) if isinstance(key.default, tuple) else key.default)
        note = f"  {key.help}" if key.help else ""
        lines.append(f"  {key.name} = {default}{note}")
    return "\n".join(lines)


def _coerce(key: Key, value):
    if value is None:
        return None
    try:
        if key.kind is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if key.kind is int:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError(value)
            return int(float(value))
        if key.kind is float:
            return float(value)
        if key.kind is tuple:
            if isinstance(value, str):
                value = json.loads(value)
            return tuple(value)
        if key.kind is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key.name}: {value!r}") from exc
    return value


def resolve_config(config_path=None, overrides=(), flags=None):
    """Merge defaults, file, ``--set`` pairs and flags (later wins)."""
    cfg = {name: key.default for name, key in CONFIG_KEYS.items()}
    layers = []
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        layers.append(data)
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        name, raw = item.split("=", 1)
        try:
            pairs[name.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            pairs[name.strip()] = raw
    layers.append(pairs)
    layers.append({k: v for k, v in (flags or {}).items() if v is not None})
    for layer in layers:
        for name, value in layer.items():
            if name not in CONFIG_KEYS:
                raise ConfigError(f"unknown configuration key {name!r}")
            cfg[name] = _coerce(CONFIG_KEYS[name], value)
    validate_config(cfg)
    return cfg


def synth_config(cfg):
    names = {f.name for f in fields(SynthConfig)}
    return SynthConfig(**{k: cfg[k] for k in names})


def train_config(cfg):
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: cfg[k] for k in names})


def validate_config(cfg):
    try:
        synth_config(cfg)
        train_config(cfg).loss_config()
        TailPolicy(cfg["tail_policy"])
    except (ValueError, CifAlignError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["graft_depth"] not in range(0, 13):
        raise ConfigError("graft_depth must lie in [0, 12]")
    if cfg["eval_split"] not in ("train", "dev", "test", "all"):
        raise ConfigError("eval_split must be train, dev, test or all")
    if cfg["beta"] <= 0:
        raise ConfigError("beta must be positive")
    for d in cfg["ablate_depths"]:
        if d not in range(0, 13):
            raise ConfigError(f"ablate depth {d} outside [0, 12]")
    for m in cfg["ablate_modes"]:
        if m not in ("cos", "infonce"):
            raise ConfigError(f"ablate mode {m!r} is not cos or infonce")


def worker_limit():
    raw = os.environ.get("WABERT_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"WABERT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"WABERT_THREADS must be a positive integer, got {raw!r}")
    return n


# ----------------------------------------------------------------------
# shared plumbing
# ----------------------------------------------------------------------
def build_model(cfg):
    model = GraftedModel.build(vocab=cfg["vocab"], d_in=cfg["d_in"], dim=cfg["dim"],
                               hidden=cfg["hidden"], graft_depth=cfg["graft_depth"],
                               seed=cfg["seed"], lm_seed=cfg["lm_seed"],
                               attention=cfg["attention"], raw_hop_ms=cfg["raw_hop_ms"])
    model.cif_config = CifConfig(cfg["beta"], TailPolicy(cfg["tail_policy"]))
    return model


def corpus_splits(cfg):
    if cfg["corpus"]:
        utts = list(load_corpus(cfg["corpus"]))
    else:
        utts = generate_utterances(synth_config(cfg), cfg["count"])
    return split_corpus(utts, cfg["split"], cfg["seed"])


def eval_utterances(cfg):
    train, dev, test = corpus_splits(cfg)
    return {"train": train, "dev": dev, "test": test, "all": train + dev + test}[cfg["eval_split"]]


def require_checkpoint(cfg):
    if not cfg["checkpoint"]:
        raise ConfigError("this subcommand needs --set checkpoint=PATH")
    return load_checkpoint(cfg["checkpoint"])


def write_config(cfg, out_dir):
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}, fh,
                  sort_keys=True, indent=1)
        fh.write("\n")


def _progress(step, total, values):
    if step % 50 == 0 or step == total:
        log.info("step %d/%d total=%.4f align=%.4f quantity=%.4f", step, total,
                 values["total"], values["align"], values["quantity"])


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_gen_data(cfg, out_dir):
    utts = generate_corpus(synth_config(cfg), cfg["count"], out_dir)
    print(f"wrote {len(utts)} utterances to {out_dir}")


def cmd_train_align(cfg, out_dir):
    train, _, _ = corpus_splits(cfg)
    model = build_model(cfg)
    write_config(cfg, out_dir)
    _, train_log = train_align(train, model, train_config(cfg),
                               checkpoint_path=os.path.join(out_dir, "checkpoint.wabt"),
                               log_path=os.path.join(out_dir, "train_log.csv"),
                               progress=_progress)
    print(f"trained {len(train_log.rows)} steps; checkpoint {out_dir}/checkpoint.wabt")


def cmd_finetune(cfg, out_dir):
    model = require_checkpoint(cfg)
    train, _, _ = corpus_splits(cfg)
    write_config(cfg, out_dir)
    model, losses = finetune_downstream(train, model, train_config(cfg))
    save_checkpoint(model, os.path.join(out_dir, "classifier.wabt"))
    with open(os.path.join(out_dir, "finetune_log.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("step,loss\n" + "".join(f"{i + 1},{v:.10g}\n" for i, v in enumerate(losses)))
    print(f"fine-tuned {len(losses)} steps; checkpoint {out_dir}/classifier.wabt")


def cmd_eval(cfg, out_dir):
    model = require_checkpoint(cfg)
    metrics = evaluate_checkpoint(eval_utterances(cfg), model)
    write_report(metrics, os.path.join(out_dir, "metrics.json"))
    for key in COMPARE_COLUMNS:
        print(f"{key}: {_fmt(metrics.get(key))}")


def cmd_heatmap(cfg, out_dir):
    model = require_checkpoint(cfg)
    utts = eval_utterances(cfg)
    if not 0 <= cfg["utterance"] < len(utts):
        raise ConfigError(f"utterance index {cfg['utterance']} outside [0, {len(utts)})")
    utt = utts[cfg["utterance"]]
    _, _, fired = teacher_forced_forward(model, utt)
    target = linguistic_targets(model, utt.token_ids).states
    heat = similarity_heatmap(fired.aligned.data, target.data)
    write_heatmap_csv(heat, os.path.join(out_dir, "heatmap.csv"))
    write_heatmap_pgm(heat, os.path.join(out_dir, "heatmap.pgm"))
    print(f"{utt.utterance_id}: {heat.rows}x{heat.cols} heatmap in {out_dir}")


def cmd_pca(cfg, out_dir):
    model = require_checkpoint(cfg)
    utts = eval_utterances(cfg)[: cfg["pca_utterances"]]
    points, tags = [], []
    for utt in utts:
        _, _, fired = teacher_forced_forward(model, utt)
        points.append(fired.aligned.data)
        tags += ["acoustic"] * fired.aligned.shape[0]
        points.append(linguistic_targets(model, utt.token_ids).states.data)
        tags += ["linguistic"] * utt.token_ids.size
    proj = pca_project(np.vstack(points))
    write_pca_csv(proj.points, tags, os.path.join(out_dir, "pca.csv"))
    print(f"{len(tags)} points; explained variance {proj.explained_variance[0]:.6f}, "
          f"{proj.explained_variance[1]:.6f}")


def _ablate_one(cfg, depth, mode, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    run_cfg = dict(cfg, graft_depth=depth, align_mode=mode)
    train, dev, test = corpus_splits(run_cfg)
    model = build_model(run_cfg)
    write_config(run_cfg, run_dir)
    train_align(train, model, train_config(run_cfg),
                checkpoint_path=os.path.join(run_dir, "checkpoint.wabt"),
                log_path=os.path.join(run_dir, "train_log.csv"))
    split = {"train": train, "dev": dev, "test": test, "all": train + dev + test}
    metrics = evaluate_checkpoint(split[run_cfg["eval_split"]], model)
    write_report(metrics, os.path.join(run_dir, "metrics.json"))
    return {"depth": depth, "align_mode": mode, **metrics}


def cmd_ablate(cfg, out_dir):
    jobs = [(d, m) for d in cfg["ablate_depths"] for m in cfg["ablate_modes"]]
    workers = min(len(jobs), worker_limit())
    runs = []
    if workers <= 1:
        for d, m in jobs:
            log.info("ablate depth=%d mode=%s", d, m)
            runs.append(_ablate_one(cfg, d, m, os.path.join(out_dir, f"depth{d}_{m}")))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_ablate_one, cfg, d, m, os.path.join(out_dir, f"depth{d}_{m}"))
                       for d, m in jobs]
            runs = [f.result() for f in futures]
    text, table_csv = compare_table(runs)
    with open(os.path.join(out_dir, "compare.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    with open(os.path.join(out_dir, "compare.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table_csv)
    print(text, end="")


def gradient_suite(seed=0, epsilon=1e-5):
    """Finite-difference reports for every loss and the CIF-composed objective."""
    rng = np.random.default_rng(seed)
    reports = {}

    a, b = dc.Tensor(rng.normal(size=(4, 8))), dc.Tensor(rng.normal(size=(4, 8)))
    head = dc.Tensor(rng.normal(size=(12, 8)))
    ids = rng.integers(0, 12, 4)
    alpha = dc.Tensor(rng.uniform(0.1, 0.9, 10))
    cfg = LossConfig(weights=(1.0, 0.7, 1.3))
    reports["cosine_align"] = dc.finite_diff_check(lambda: cosine_align_loss(a, b), [a, b], epsilon)
    reports["info_nce"] = dc.finite_diff_check(lambda: info_nce(a, b, 0.1), [a, b], epsilon)
    reports["aligned_token_similarity"] = dc.finite_diff_check(
        lambda: aligned_token_similarity_loss(a, b, 0.1), [a, b], epsilon)
    reports["quantity"] = dc.finite_diff_check(
        lambda: quantity_loss(AlignmentWeights(alpha), 3), [alpha], epsilon)
    reports["subword"] = dc.finite_diff_check(lambda: subword_loss(a, head, ids), [a, head], epsilon)
    reports["total"] = dc.finite_diff_check(
        lambda: total_loss(align_loss(a, b, cfg), quantity_loss(AlignmentWeights(alpha), 3),
                           subword_loss(a, head, ids), cfg).total, [a, alpha, head], epsilon)

    # full teacher-forced objective through encoder, weights, CIF and frozen blocks
    model = GraftedModel.build(vocab=12, d_in=4, dim=8, hidden=8, graft_depth=3, seed=seed)
    raw = rng.normal(size=(24, 4))
    tokens = rng.integers(0, 12, 3)
    target = linguistic_targets(model, tokens).states
    params = list(model.trainable_parameters().values())

    def scaled_alpha():
        frames = encode_acoustic(raw, model.acoustic)
        return frames, predict_weights(frames, model.predictor)

    def objective():
        frames, w = scaled_alpha()
        fired = integrate_and_fire(frames, scale_weights(w, tokens.size), model.cif_config)
        _, logits = graft_forward(fired.aligned, model)
        return total_loss(align_loss(fired.aligned, target, cfg), quantity_loss(w, tokens.size),
                          logits_cross_entropy(logits, tokens), cfg).total

    def signature():
        _, w = scaled_alpha()
        return firing_signature(scale_weights(w, tokens.size).alpha.data, model.cif_config,
                                tokens.size)

    reports["cif_composed"] = dc.finite_diff_check(
        objective, params, epsilon, exclusion=dc.signature_exclusion(params, signature, epsilon))
    return reports


def cmd_gradcheck(cfg, out_dir, tol=1e-4):
    reports = gradient_suite(cfg["seed"])
    summary = {}
    for name, rep in reports.items():
        summary[name] = {"max_rel_error": rep.max_abs_rel_error, "checked": rep.checked,
                         "excluded": rep.excluded, "passed": rep.passed(tol)}
        print(f"{name:26s} max_rel_error={rep.max_abs_rel_error:.3e} checked={rep.checked} "
              f"excluded={rep.excluded} {'PASS' if rep.passed(tol) else 'FAIL'}")
    with open(os.path.join(out_dir, "gradcheck.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    failed = [n for n, s in summary.items() if not s["passed"]]
    if failed:
        raise GradientCheckFailed(f"gradient mismatch in {', '.join(failed)}")


class GradientCheckFailed(CifAlignError):
    module = "cli"


# ----------------------------------------------------------------------
# comparison table
# ----------------------------------------------------------------------
def _fmt(value, places=4):
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "n/a"
    return f"{float(value):.{places}f}"


def compare_table(runs):
    """Aligned text plus CSV, one row per (depth, align_mode), sorted."""
    if not runs:
        raise ValueError("compare_table needs at least one run")
    runs = sorted(runs, key=lambda r: (r["depth"], r["align_mode"]))
    header = ("depth", "align_mode") + COMPARE_COLUMNS
    rows = [[str(r["depth"]), r["align_mode"]] + [_fmt(r.get(c)) for c in COMPARE_COLUMNS]
            for r in runs]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows]
    text = "\n".join(lines) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in runs:
        writer.writerow([r["depth"], r["align_mode"]] + [_fmt(r.get(c), 6) for c in COMPARE_COLUMNS])
    return text, buf.getvalue()


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------
COMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic corpus"),
    "train-align": (cmd_train_align, "train the speech path against frozen targets"),
    "finetune": (cmd_finetune, "fit the three-class head on a trained checkpoint"),
    "eval": (cmd_eval, "score a checkpoint and write metrics.json"),
    "heatmap": (cmd_heatmap, "export one utterance's similarity heatmap (CSV and PGM)"),
    "pca": (cmd_pca, "export a 2-D projection of speech and text token vectors"),
    "ablate": (cmd_ablate, "train and score every graft depth with both losses"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every objective"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON object of configuration keys")
    common.add_argument("--seed", type=int, help="seed (overrides the seed key)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--align-mode", choices=("cos", "infonce"))
    common.add_argument("--graft-depth", type=int, choices=GRAFT_DEPTHS)
    common.add_argument("--tau", type=float)
    common.add_argument("--count", type=int, help="utterances to generate")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    epilog = config_help()
    parser = _Parser(prog="cifalign", description="Speech-to-text alignment by grafting.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, summary) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=summary, description=summary, epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        flags = {"seed": args.seed, "align_mode": args.align_mode,
                 "graft_depth": args.graft_depth, "tau": args.tau, "count": args.count}
        cfg = resolve_config(args.config, args.set, flags)
        worker_limit()
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command][0](cfg, args.out)
    except ConfigError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except CifAlignError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3
    except OSError as exc:
        sys.stderr.write(f"error: [io] {exc}\n")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
