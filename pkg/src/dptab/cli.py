"""Command-line interface: train, sample, evaluate, accountant, sweep, labs.

All configuration is JSON; row data is CSV. Commands are deterministic given
their flags and seeds. Failures print one machine-readable JSON object
{code, message, context} to stderr and exit 2 for usage/input problems or 1
for runtime failures. Report-producing commands render a PNG figure next to
their output file unless --no-figures is given.
"""

from __future__ import annotations

import json
import statistics
import sys
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from . import dyck as dyck_mod
from . import figures, maxent, metrics, model as model_mod, privacy, trainer
from .errors import ConfigError, DptabError


def _fail(err: DptabError) -> None:
    click.echo(json.dumps(err.to_json_dict(), sort_keys=True), err=True)
    sys.exit(err.exit_code)


def _guard(fn):
    """Convert DptabError into the JSON-on-stderr exit contract."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DptabError as err:
            _fail(err)

    return wrapper


def _require_file(path: str | None, code: str, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path is required", code=code)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}", code=code, path=str(path))
    return p


def _load_json(path: Path, code: str) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})", code=code) from exc


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


@click.group()
def main():
    """Differentially private autoregressive synthetic tabular data."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _build_train_config(raw: dict, seed: int | None = None) -> trainer.TrainRunConfig:
    model_block = raw.get("model", {})
    train_block = raw.get("training", {})
    privacy_block = raw.get("privacy", {})
    if not privacy_block:
        raise ConfigError("config needs a privacy block "
                          "(epsilon, sigma, or non_private)")
    try:
        return trainer.TrainRunConfig(
            epochs=train_block.get("epochs", 1.0),
            n_layers=model_block.get("n_layers", 3),
            d_model=model_block.get("d_model", 128),
            n_heads=model_block.get("n_heads", 4),
            batch_size=train_block.get("batch_size", 256),
            learning_rate=train_block.get("learning_rate", 3e-4),
            clip_norm=train_block.get("clip_norm", 1.0),
            adam_beta1=train_block.get("adam_beta1", 0.9),
            adam_beta2=train_block.get("adam_beta2", 0.999),
            adam_eps=train_block.get("adam_eps", 1e-8),
            delta=privacy_block.get("delta", 1e-9),
            epsilon=privacy_block.get("epsilon"),
            sigma=privacy_block.get("sigma"),
            non_private=bool(privacy_block.get("non_private", False)),
            eval_interval=train_block.get("eval_interval", 50),
            seed=seed if seed is not None else raw.get("seed", 0),
            val_frac=train_block.get("val_frac", 0.01),
            dtype=train_block.get("dtype", "float32"),
            column_order=train_block.get("column_order", "given"),
            micro_batch=train_block.get("micro_batch", 32),
        )
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def _prepare_dataset(data_path: Path, schema_path: Path, raw_config: dict,
                     column_order: str):
    """Load + reorder + encode; returns (dataset, permutation)."""
    schema = data_mod.Schema.load(schema_path)
    bins = raw_config.get("bins", data_mod.DEFAULT_BINS)
    share = bool(raw_config.get("share_tokens", False))
    rows = data_mod.load_csv(data_path, schema)
    ordered_schema, perm = data_mod.order_columns(schema, column_order, bins=bins)
    if perm != list(range(len(schema))):
        rows = [[row[j] for j in perm] for row in rows]
    vocab = data_mod.build_vocab(ordered_schema, bins=bins, share_tokens=share)
    return data_mod.encode_table(rows, ordered_schema, vocab), perm


def _run_training(config_path: str, data_path: str | None, schema_path: str | None,
                  seed: int | None = None):
    raw = _load_json(_require_file(config_path, "config_not_found", "config"),
                     "config_invalid")
    data_file = _require_file(data_path or raw.get("data"), "data_not_found", "data file")
    schema_file = _require_file(schema_path or raw.get("schema"),
                                "schema_not_found", "schema file")
    config = _build_train_config(raw, seed=seed)
    dataset, perm = _prepare_dataset(data_file, schema_file, raw, config.column_order)
    result = trainer.train(config, dataset)
    return raw, config, dataset, perm, result


@main.command("train")
@click.option("--config", "config_path", required=True, help="JSON run config")
@click.option("--data", "data_path", default=None, help="CSV data (overrides config)")
@click.option("--schema", "schema_path", default=None, help="schema JSON (overrides config)")
@click.option("--out", "out_path", required=True, help="checkpoint output path")
@click.option("--log", "log_path", default=None, help="JSON-lines training log")
@click.option("--figures/--no-figures", "render_figures", default=True)
@_guard
def cmd_train(config_path, data_path, schema_path, out_path, log_path, render_figures):
    """Train a model with the configured privacy mode; save the best-val checkpoint."""
    raw, config, dataset, perm, result = _run_training(config_path, data_path, schema_path)
    meta = {
        "steps": result.steps,
        "sigma": result.sigma,
        "spent_epsilon": result.spent_epsilon,
        "best_val_nll": result.best_val_nll,
        "best_step": result.best_step,
        "seed": config.seed,
    }
    model_mod.save_checkpoint(out_path, result.best_params, dataset.schema,
                              dataset.vocab, column_order=perm, meta=meta)
    if log_path:
        with Path(log_path).open("w", encoding="utf-8") as fh:
            for record in result.log:
                fh.write(record.to_json_line() + "\n")
        if render_figures and result.log:
            figures.training_curve(
                [json.loads(r.to_json_line()) for r in result.log],
                figures.sibling_path(log_path, "curve"),
            )
    _echo_json({**meta, "n_train": result.n_train, "n_val": result.n_val,
                "out": str(out_path)})


@main.command("sample")
@click.option("--model", "model_path", required=True, help="checkpoint path")
@click.option("--n", "n_rows", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", required=True, help="CSV output path")
@click.option("--schema", "schema_path", default=None,
              help="optional schema to validate against the checkpoint hash")
@_guard
def cmd_sample(model_path, n_rows, seed, out_path, schema_path):
    """Decode n schema-valid rows sampled from a trained checkpoint."""
    ckpt = model_mod.load_checkpoint(_require_file(model_path, "model_not_found",
                                                   "checkpoint"))
    if schema_path is not None:
        external = data_mod.Schema.load(_require_file(schema_path, "schema_not_found",
                                                      "schema file"))
        hashes = {external.sha256()}
        # the checkpoint schema may be a column reordering of the given one
        for strategy in ("by-cardinality-desc", "by-cardinality-asc"):
            reordered, _ = data_mod.order_columns(external, strategy,
                                                  bins=ckpt.vocab.bins)
            hashes.add(reordered.sha256())
        if ckpt.schema_sha256 not in hashes:
            raise ConfigError("schema does not match the checkpoint",
                              code="schema_hash_mismatch")
    tokens = model_mod.sample_rows(ckpt.params, ckpt.vocab, n_rows, seed=seed)
    k = len(ckpt.schema)
    original_columns: list = [None] * k
    for i, orig in enumerate(ckpt.column_order):
        original_columns[orig] = ckpt.schema.columns[i]
    original_schema = data_mod.Schema(tuple(original_columns))
    out_rows = []
    for row in tokens:
        decoded = data_mod.decode_row(row, ckpt.schema, ckpt.vocab)
        restored: list = [None] * k
        for i, orig in enumerate(ckpt.column_order):
            restored[orig] = decoded[i]
        out_rows.append(restored)
    data_mod.write_csv(out_path, out_rows, original_schema)
    _echo_json({"n": n_rows, "out": str(out_path)})


@main.command("evaluate")
@click.option("--real", "real_path", required=True)
@click.option("--synth", "synth_path", required=True)
@click.option("--schema", "schema_path", required=True)
@click.option("--target", default=None, help="target column for ML efficacy")
@click.option("--task", type=click.Choice(["clf", "reg"]), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", default=None, help="report JSON path (default stdout)")
@click.option("--figures/--no-figures", "render_figures", default=True)
@_guard
def cmd_evaluate(real_path, synth_path, schema_path, target, task, seed, out_path,
                 render_figures):
    """Metric report comparing a synthetic table against the real one."""
    schema = data_mod.Schema.load(_require_file(schema_path, "schema_not_found",
                                                "schema file"))
    real = data_mod.load_csv(_require_file(real_path, "data_not_found", "real table"),
                             schema)
    synth = data_mod.load_csv(_require_file(synth_path, "data_not_found",
                                            "synthetic table"), schema)
    if (target is None) != (task is None):
        raise ConfigError("--target and --task must be given together")
    report = metrics.compute_report(real, synth, schema, target=target, task=task,
                                    seed=seed)
    payload = report.to_json()
    if out_path:
        Path(out_path).write_text(payload + "\n", encoding="utf-8")
        if render_figures:
            figures.marginal_grid(real, synth, schema,
                                  figures.sibling_path(out_path, "marginals"))
        _echo_json({"out": str(out_path)})
    else:
        click.echo(payload)


@main.command("accountant")
@click.option("--n", "dataset_size", type=int, required=True)
@click.option("--batch", "batch_size", type=int, required=True)
@click.option("--steps", type=int, required=True)
@click.option("--delta", type=float, required=True)
@click.option("--sigma", type=float, default=None, help="forward mode: sigma -> epsilon")
@click.option("--epsilon", type=float, default=None, help="calibration mode: epsilon -> sigma")
@_guard
def cmd_accountant(dataset_size, batch_size, steps, delta, sigma, epsilon):
    """Convert between noise multiplier and spent privacy budget."""
    if (sigma is None) == (epsilon is None):
        raise ConfigError("give exactly one of --sigma or --epsilon")
    q = min(batch_size, dataset_size) / dataset_size
    if sigma is not None:
        if steps == 0:
            _echo_json({"epsilon": 0.0})
            return
        _echo_json({"epsilon": privacy.compute_epsilon(q, sigma, steps, delta)})
    else:
        _echo_json({"sigma": privacy.calibrate_sigma(epsilon, delta, q, steps)})


SWEEPABLE = ("epsilon", "sigma", "learning_rate", "clip_norm", "batch_size", "epochs")


@main.command("sweep")
@click.option("--config", "config_path", required=True)
@click.option("--param", required=True)
@click.option("--values", required=True, help="comma-separated values")
@click.option("--seeds", required=True, help="comma-separated seeds")
@click.option("--samples", type=int, default=2000, help="synthetic rows per run")
@click.option("--out", "out_path", default=None, help="JSON-lines results path")
@click.option("--figures/--no-figures", "render_figures", default=True)
@_guard
def cmd_sweep(config_path, param, values, seeds, samples, out_path, render_figures):
    """One train+sample+evaluate cycle per (value, seed); emits medians."""
    if param not in SWEEPABLE:
        raise ConfigError(f"parameter '{param}' is not sweepable "
                          f"(choose from {', '.join(SWEEPABLE)})",
                          code="param_not_sweepable")
    raw = _load_json(_require_file(config_path, "config_not_found", "config"),
                     "config_invalid")
    data_file = _require_file(raw.get("data"), "data_not_found", "data file")
    schema_file = _require_file(raw.get("schema"), "schema_not_found", "schema file")
    value_list = [float(v) for v in values.split(",") if v]
    seed_list = [int(s) for s in seeds.split(",") if s]
    if not value_list or not seed_list:
        raise ConfigError("values and seeds must be nonempty")

    schema = data_mod.Schema.load(schema_file)
    real_rows = data_mod.load_csv(data_file, schema)
    records = []
    for value in value_list:
        for seed in seed_list:
            run_raw = json.loads(json.dumps(raw))  # deep copy
            if param == "epsilon":
                run_raw["privacy"] = {"epsilon": value,
                                      "delta": raw.get("privacy", {}).get("delta", 1e-9)}
            elif param == "sigma":
                run_raw["privacy"] = {"sigma": value,
                                      "delta": raw.get("privacy", {}).get("delta", 1e-9)}
            else:
                block = run_raw.setdefault("training", {})
                block[param] = int(value) if param == "batch_size" else value
            config = _build_train_config(run_raw, seed=seed)
            dataset, perm = _prepare_dataset(data_file, schema_file, run_raw,
                                             config.column_order)
            result = trainer.train(config, dataset)
            tokens = model_mod.sample_rows(result.best_params, dataset.vocab,
                                           samples, seed=seed)
            inv = [0] * len(perm)
            for i, orig in enumerate(perm):
                inv[orig] = i
            synth_rows = [
                [None] * len(perm) for _ in range(len(tokens))
            ]
            for r, row in enumerate(tokens):
                decoded = data_mod.decode_row(row, dataset.schema, dataset.vocab)
                for i, orig in enumerate(perm):
                    synth_rows[r][orig] = decoded[i]
            report = metrics.compute_report(real_rows, synth_rows, schema, seed=seed)
            records.append({
                "param": param, "value": value, "seed": seed,
                "sigma": result.sigma, "spent_epsilon": result.spent_epsilon,
                "steps": result.steps, "best_val_nll": result.best_val_nll,
                "metrics": {k: v for k, v in report.to_json_dict().items()
                            if k != "columns"},
            })

    lines = [json.dumps(r, sort_keys=True) for r in records]
    if out_path:
        Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        for line in lines:
            click.echo(line)

    aggregates = []
    for value in value_list:
        runs = [r for r in records if r["value"] == value]
        metric_keys = [k for k in runs[0]["metrics"] if runs[0]["metrics"][k] is not None]
        aggregates.append({
            "value": value,
            "runs": len(runs),
            "median_best_val_nll": statistics.median(r["best_val_nll"] for r in runs),
            "median_metrics": {
                k: statistics.median(r["metrics"][k] for r in runs) for k in metric_keys
            },
        })
    if out_path and render_figures:
        figures.sweep_trend(aggregates, param, figures.sibling_path(out_path, "trend"))
    _echo_json({"param": param, "aggregates": aggregates})


@main.group("maxent")
def maxent_group():
    """Exact marginal-game laboratory."""


@maxent_group.command("verify")
@click.option("--cards", required=True, help="comma-separated column cardinalities")
@click.option("--m", "order", type=int, required=True, help="marginal order")
@click.option("--trials", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.option("--tol", type=float, default=1e-5)
@click.option("--out", "out_path", default=None)
@_guard
def cmd_maxent_verify(cards, order, trials, seed, tol, out_path):
    """Divergence identity on random strictly positive joints."""
    card_list = tuple(int(c) for c in cards.split(",") if c)
    if not card_list or any(c < 2 for c in card_list):
        raise ConfigError("cards must be integers >= 2")
    if not (1 <= order <= len(card_list)):
        raise ConfigError(f"m must lie in [1, {len(card_list)}]")
    rng = np.random.default_rng(seed)
    worst_identity, worst_marginal = 0.0, 0.0
    all_ok = True
    for _ in range(trials):
        table = rng.gamma(1.0, size=card_list) + 0.01
        joint = maxent.DenseJoint(table / table.sum())
        report = maxent.verify_maxent_identity(joint, order, tol=tol)
        worst_identity = max(worst_identity, report["identity_residual"])
        worst_marginal = max(worst_marginal, report["marginal_residual"])
        all_ok = all_ok and report["corollary_ok"]
    payload = {
        "k": len(card_list), "cards": list(card_list), "m": order,
        "trials": trials, "seed": seed, "tol": tol,
        "max_identity_residual": worst_identity,
        "max_marginal_residual": worst_marginal,
        "corollary_ok": all_ok,
        "pass": bool(worst_identity <= tol and all_ok),
    }
    if out_path:
        Path(out_path).write_text(json.dumps(payload, sort_keys=True) + "\n",
                                  encoding="utf-8")
        _echo_json({"out": str(out_path), "pass": payload["pass"]})
    else:
        _echo_json(payload)


@main.group("dyck")
def dyck_group():
    """Balanced-parenthesis benchmark dataset."""


@dyck_group.command("gen")
@click.option("--k", type=int, required=True, help="string length (even)")
@click.option("--out", "out_path", required=True, help="CSV output path")
@_guard
def cmd_dyck_gen(k, out_path):
    """Write the full Dyck-k enumeration as a k-column CSV."""
    strings = dyck_mod.generate_dyck(k)
    schema = dyck_mod.dyck_schema(k)
    data_mod.write_csv(out_path, [list(s) for s in strings], schema)
    _echo_json({"k": k, "n": len(strings), "out": str(out_path)})


@dyck_group.command("score")
@click.option("--in", "in_path", required=True, help="CSV of single-character columns")
@_guard
def cmd_dyck_score(in_path):
    """Fraction of rows that parse as balanced parentheses."""
    path = _require_file(in_path, "data_not_found", "input file")
    import csv as csv_lib

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv_lib.reader(fh)
        next(reader, None)  # header
        rows = ["".join(cells) for cells in reader]
    rate = dyck_mod.validity_rate(rows)
    _echo_json({"n": len(rows), "valid": int(round(rate * len(rows))), "rate": rate})


if __name__ == "__main__":
    main()
