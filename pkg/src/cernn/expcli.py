"""Experiment runner.

    cernn run CONFIG.json [--seed S] [--max-steps K] [--out DIR]
    cernn compare DIR [DIR ...] [--json PATH]
    cernn diag CHECKPOINT [--out CSV]
    cernn audit --model {urnn,cernn} --n N

Exit codes: 0 ok, 2 configuration / input error, 3 diverged run,
4 output directory not writable.
"""
import argparse
import csv
from dataclasses import asdict, dataclass, fields
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import cells, linops, tasks, training

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

REGRESSION = "regression"
COPY = "copy"
EXPERIMENTS = (REGRESSION, COPY)
MODELS = {REGRESSION: ("dense", "urnn", "cernn"), COPY: ("urnn", "cernn", "lstm")}

METRICS_HEADER = ["step", "loss", "loss_avg", "grad_norm"]
DIAGNOSTICS_HEADER = ["step", "loss", "angle_norm_U1", "max_modulus_dev"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str
    model: str
    N: int = None
    T_len: int = 10
    N_fill: int = 100
    noise_std: float = 0.1
    learning_rate: float = None
    batch_size: int = None
    max_steps: int = None
    seed: int = 0
    truncate_to: int = None
    metrics_interval: int = 100
    output_dir: str = "runs/latest"
    # LSTM hidden size; by default matched to the parameter budget of a uRNN of size N
    lstm_hidden: int = None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("unknown config fields: %s" % ", ".join(unknown))
        for key in ("experiment", "model"):
            if key not in data:
                raise ConfigError("missing required config field %r" % key)
        cfg = cls(**data)
        cfg.resolve()
        return cfg

    def resolve(self):
        """Fill experiment-dependent defaults and validate every field."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment must be one of %s, got %r" % (EXPERIMENTS, self.experiment))
        if self.model not in MODELS[self.experiment]:
            raise ConfigError("model %r is not valid for the %s experiment (choose from %s)"
                              % (self.model, self.experiment, ", ".join(MODELS[self.experiment])))
        reg = self.experiment == REGRESSION
        if self.N is None:
            self.N = 32 if reg else 64
        if self.learning_rate is None:
            self.learning_rate = 1e-2 if reg and self.model != "dense" else 1e-3
        if self.batch_size is None:
            self.batch_size = 32 if reg else 128
        if self.max_steps is None:
            self.max_steps = 20000 if reg else 50000
        for name in ("N", "batch_size", "metrics_interval"):
            _positive_int(name, getattr(self, name))
        for name in ("T_len", "N_fill", "max_steps", "seed"):
            _nonneg_int(name, getattr(self, name))
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            raise ConfigError("learning_rate must be a positive number")
        if not (isinstance(self.noise_std, (int, float)) and self.noise_std >= 0):
            raise ConfigError("noise_std must be >= 0")
        if self.truncate_to is not None:
            if self.model not in ("urnn", "cernn") or reg:
                raise ConfigError("truncate_to applies to urnn/cernn copy-task cells only")
            _positive_int("truncate_to", self.truncate_to)
            if self.truncate_to > self.N:
                raise ConfigError("truncate_to (%d) exceeds N (%d)" % (self.truncate_to, self.N))
        if self.lstm_hidden is not None:
            if self.model != "lstm":
                raise ConfigError("lstm_hidden only applies to model=lstm")
            _positive_int("lstm_hidden", self.lstm_hidden)
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigError("output_dir must be a non-empty string")
        return self

    def task_key(self):
        if self.experiment == REGRESSION:
            return (REGRESSION, self.N, float(self.noise_std))
        return (COPY, self.T_len, self.N_fill)


def _positive_int(name, value):
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError("%s must be a positive integer, got %r" % (name, value))


def _nonneg_int(name, value):
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ConfigError("%s must be a non-negative integer, got %r" % (name, value))


def load_config(path, overrides=None):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config %s is not valid JSON: %s" % (path, exc)) from exc
    if isinstance(data, dict):
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(data)


def complex_cell_param_count(n, inputs=tasks.N_SYMBOLS, outputs=tasks.N_SYMBOLS, flavor="urnn"):
    structured = (7 if flavor == "urnn" else 10) * n
    return structured + n + 2 * n * inputs + outputs * 2 * n + outputs


def lstm_param_count(h, inputs=tasks.N_SYMBOLS, outputs=tasks.N_SYMBOLS):
    return 4 * h * (inputs + h + 1) + outputs * h + outputs


def matched_lstm_hidden(n):
    """LSTM width whose parameter count is closest to a uRNN of size ``n``."""
    target = complex_cell_param_count(n)
    h = 1
    while lstm_param_count(h + 1) <= target:
        h += 1
    if abs(lstm_param_count(h + 1) - target) < abs(lstm_param_count(h) - target):
        h += 1
    return h


def build(cfg):
    """Task, model and data generator for a resolved config."""
    init_rng, data_rng = training.make_rngs(cfg.seed)
    if cfg.experiment == REGRESSION:
        task = tasks.RegressionTaskSpec(cfg.N, cfg.noise_std, seed=cfg.seed)
        if cfg.model == "dense":
            model = cells.DenseRegressor(cfg.N, init_rng)
        else:
            flavor = linops.UNITARY if cfg.model == "urnn" else linops.COMPLEX_EVOLUTION
            model = cells.CascadeRegressor(cfg.N, flavor, init_rng)
        return task, model, data_rng
    task = tasks.CopyTaskSpec(cfg.T_len, cfg.N_fill, seed=cfg.seed)
    if cfg.model == "lstm":
        hidden = cfg.lstm_hidden or matched_lstm_hidden(cfg.N)
        cell_cfg = cells.RecurrentCellConfig(hidden, tasks.N_SYMBOLS, cells.LSTM, tasks.N_SYMBOLS)
    else:
        cell_cfg = cells.RecurrentCellConfig(cfg.N, tasks.N_SYMBOLS, cfg.model, tasks.N_SYMBOLS,
                                             truncate_to=cfg.truncate_to)
    return task, cells.make_cell(cell_cfg, init_rng), data_rng


def params_audit(cfg, model):
    block = training.ParamBlock(model.params, model.owners)
    audit = {
        "model": cfg.model,
        "N": cfg.N,
        "total_reals": block.size,
        "by_owner": block.owner_counts(),
        "segments": {s.name: s.size for s in block.segments},
        "structured_reals": model.structured_parameter_count(),
    }
    if cfg.model in ("urnn", "cernn"):
        audit["structured_formula"] = "7N" if cfg.model == "urnn" else "10N"
    if cfg.model == "lstm":
        audit["lstm_hidden"] = model.cfg.hidden_size
    return audit


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def run_experiment(cfg):
    """Train per ``cfg`` and write all artifacts; returns an exit code."""
    out = cfg.output_dir
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        logger.error("output directory %s is not writable: %s", out, exc)
        return EXIT_IO

    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

    task, model, data_rng = build(cfg)
    with open(os.path.join(out, "params_audit.json"), "w") as fh:
        json.dump(params_audit(cfg, model), fh, indent=2, sort_keys=True)
        fh.write("\n")

    logger.info("training %s on %s for %d steps", cfg.model, cfg.experiment, cfg.max_steps)
    result = training.train(task, model, cfg.seed, cfg.max_steps, lr=cfg.learning_rate,
                            batch_size=cfg.batch_size, metrics_interval=cfg.metrics_interval,
                            data_rng=data_rng)
    recs = result.records
    _write_csv(os.path.join(out, "metrics.csv"), METRICS_HEADER,
               [(r.step, r.loss, r.loss_avg, r.grad_norm) for r in recs])
    _write_csv(os.path.join(out, "diagnostics.csv"), DIAGNOSTICS_HEADER,
               [(r.step, r.loss, r.diagnostics.get("angle_norm_U1"), r.diagnostics.get("max_modulus_dev"))
                for r in recs])
    _write_csv(os.path.join(out, "timing.csv"), ["step", "wall_ms"], [(r.step, r.wall_ms) for r in recs])

    header = {
        "seed": cfg.seed,
        "step": recs[-1].step,
        "model": cfg.model,
        "experiment": cfg.experiment,
        "n": cfg.N,
        "perm": model.cascade.perm.tolist() if hasattr(model, "cascade") else None,
        "config": asdict(cfg),
    }
    training.save_checkpoint(os.path.join(out, "checkpoint.bin"), result.block, result.params, header)
    summary = {
        "final_window_loss": result.final_window_loss(),
        "steps": recs[-1].step,
        "diverged": result.diverged,
        "reference": reference_loss(cfg),
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.diverged:
        logger.error("run diverged at step %d", recs[-1].step)
        return EXIT_DIVERGED
    return EXIT_OK


def reference_loss(cfg):
    """Memoryless CE baseline (copy) or irreducible MSE (regression)."""
    if cfg.experiment == COPY:
        return tasks.memoryless_baseline_ce(tasks.CopyTaskSpec(cfg.T_len, cfg.N_fill))
    return tasks.regression_mse_floor(tasks.RegressionTaskSpec(cfg.N, cfg.noise_std, W_m=np.zeros((1, 1))))


# -- compare -------------------------------------------------------------------

class MetricsError(ValueError):
    pass


def read_metrics(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise MetricsError("cannot read %s: %s" % (path, exc)) from exc
    if not rows or rows[0] != METRICS_HEADER:
        raise MetricsError("%s: expected header %s" % (path, ",".join(METRICS_HEADER)))
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise MetricsError("%s: malformed row (%s)" % (path, exc)) from exc
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != len(METRICS_HEADER):
        raise MetricsError("%s: no usable metric rows" % path)
    return {name: data[:, i] for i, name in enumerate(METRICS_HEADER)}


def metrics_final_window(m, fraction=0.05):
    """Step-weighted mean of interval-averaged losses over the last ``fraction`` of steps."""
    steps, avg = m["step"], m["loss_avg"]
    last = steps[-1]
    if last == 0:
        return float(avg[-1])
    start = last - fraction * last
    prev = np.concatenate(([steps[0]], steps[:-1]))
    lo = np.maximum(prev, start)
    weight = np.clip(steps - lo, 0, None)
    if weight.sum() == 0:
        return float(avg[-1])
    return float(np.sum(avg * weight) / weight.sum())


def compare_runs(run_dirs, threshold=None):
    """Summary rows and ordering verdicts for a set of run directories."""
    runs = []
    for d in run_dirs:
        metrics = read_metrics(os.path.join(d, "metrics.csv"))
        cfg_path = os.path.join(d, "config.json")
        try:
            with open(cfg_path) as fh:
                cfg = RunConfig.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise MetricsError("%s: cannot read persisted config (%s)" % (d, exc)) from exc
        runs.append((d, cfg, metrics))
    keys = {cfg.task_key() for _, cfg, _ in runs}
    if len(keys) > 1:
        raise MetricsError("refusing to compare runs from different tasks: %s" % sorted(map(str, keys)))

    rows = []
    for d, cfg, m in runs:
        ref = reference_loss(cfg)
        thr = threshold if threshold is not None else (ref if cfg.experiment == COPY else 2 * ref)
        hit = np.flatnonzero(m["loss_avg"] <= thr)
        rows.append({
            "dir": d,
            "model": cfg.model,
            "seed": cfg.seed,
            "final_window_loss": metrics_final_window(m),
            "reference_loss": ref,
            "threshold": thr,
            "step_to_threshold": int(m["step"][hit[0]]) if hit.size else None,
        })

    verdicts = {}
    if len(rows) > 1:
        ranked = sorted(rows, key=lambda r: r["final_window_loss"])
        verdicts["ordering"] = " < ".join(r["model"] for r in ranked)
        by_model = {cfg.model: m for _, cfg, m in runs}
        if "urnn" in by_model and "cernn" in by_model:
            a, b = by_model["urnn"], by_model["cernn"]
            steps = np.intersect1d(a["step"], b["step"])
            ia = np.searchsorted(a["step"], steps)
            ib = np.searchsorted(b["step"], steps)
            verdicts["max_gap_urnn_cernn"] = float(np.max(np.abs(a["loss_avg"][ia] - b["loss_avg"][ib])))
        verdicts["below_reference"] = {r["model"]: r["final_window_loss"] < r["reference_loss"] for r in rows}
    return {"runs": rows, "verdicts": verdicts}


def format_table(summary):
    lines = ["%-28s %-6s %5s %14s %12s %10s" % ("run", "model", "seed", "final_loss", "reference", "hit_step")]
    for r in summary["runs"]:
        lines.append("%-28s %-6s %5d %14.6g %12.6g %10s" % (
            os.path.basename(os.path.normpath(r["dir"]))[:28], r["model"], r["seed"],
            r["final_window_loss"], r["reference_loss"],
            "-" if r["step_to_threshold"] is None else r["step_to_threshold"]))
    for k, v in summary["verdicts"].items():
        lines.append("%s: %s" % (k, v))
    return "\n".join(lines)


# -- diagonal scatter ----------------------------------------------------------

def diag_entries_from_checkpoint(header, params):
    if "theta" in params:
        return np.exp(-1j * params["theta"])
    if "diag_re" in params:
        return params["diag_re"] + 1j * params["diag_im"]
    raise training.CheckpointError("checkpoint for model %r has no structured diagonals" % header.get("model"))


def dump_diag_scatter(checkpoint, out=None):
    """CSV rows (diagonal, index, re, im, modulus); returns the CSV text."""
    header, params = training.load_checkpoint(checkpoint)
    d = diag_entries_from_checkpoint(header, params)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["diagonal", "index", "re", "im", "modulus"])
    for j in range(d.shape[0]):
        for i in range(d.shape[1]):
            z = d[j, i]
            w.writerow([j + 1, i, repr(float(z.real)), repr(float(z.imag)), repr(float(abs(z)))])
    text = buf.getvalue()
    if out is not None:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    return text


# -- command line ----------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="cernn", description="uRNN / ceRNN experiment runner")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--max-steps", type=int, dest="max_steps")
    r.add_argument("--out", dest="output_dir")
    c = sub.add_parser("compare", help="compare finished runs")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--json", dest="json_out")
    d = sub.add_parser("diag", help="dump realized diagonal entries of a checkpoint")
    d.add_argument("checkpoint")
    d.add_argument("--out")
    a = sub.add_parser("audit", help="structured parameter count of a cascade")
    a.add_argument("--model", choices=("urnn", "cernn"), required=True)
    a.add_argument("--n", type=int, required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "run":
        try:
            cfg = load_config(args.config, {"seed": args.seed, "max_steps": args.max_steps,
                                            "output_dir": args.output_dir})
        except (ConfigError, TypeError) as exc:
            print("config error: %s" % exc, file=sys.stderr)
            return EXIT_CONFIG
        return run_experiment(cfg)
    if args.command == "compare":
        try:
            summary = compare_runs(args.dirs)
        except (MetricsError, ConfigError) as exc:
            print("error: %s" % exc, file=sys.stderr)
            return EXIT_CONFIG
        print(format_table(summary))
        if args.json_out:
            with open(args.json_out, "w") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
        return EXIT_OK
    if args.command == "diag":
        try:
            text = dump_diag_scatter(args.checkpoint, args.out)
        except training.CheckpointError as exc:
            print("error: %s" % exc, file=sys.stderr)
            return EXIT_CONFIG
        if args.out is None:
            sys.stdout.write(text)
        return EXIT_OK
    if args.command == "audit":
        if args.n < 1:
            print("error: --n must be positive", file=sys.stderr)
            return EXIT_CONFIG
        flavor = linops.UNITARY if args.model == "urnn" else linops.COMPLEX_EVOLUTION
        c = linops.Cascade(args.n, flavor, np.random.default_rng(0))
        print(json.dumps({"model": args.model, "N": args.n, "structured_reals": c.parameter_count()}))
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
