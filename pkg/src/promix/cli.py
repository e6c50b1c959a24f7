"""Command-line surface: one JSON config, one command per pipeline stage.

Commands: gen (write synthetic embedding files), tune (prompt tuning),
weights (mixture-weight fitting), eval (base/new comparison from the
tuned artifacts), fscil / assume / bound / losses (self-contained
harnesses), report (merge run outputs). Exit codes: 0 success, 1
validation or precondition error, 2 runtime failure.

Every output lands under the config's out_dir and is byte-reproducible
for a fixed config and seed: reports are canonical JSON (sorted keys, no
timestamps). PROMIX_SEED overrides the config's top-level seed.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from promix.config import ConfigError, RunConfig, load_config
from promix.embedspace import (
    generate_synthetic,
    partition_classes,
    prototype_set,
    read_embedding_file,
    write_embedding_file,
)
from promix.evaluation import (
    CONFIG_NAMES,
    EvalReport,
    accuracy,
    assumption_check,
    base_to_new_csv,
    bound_sweep,
    fit_weights,
    fscil_csv,
    fscil_run,
    initial_weights,
    score_base_new_configs,
    tune_on_subset,
)
from promix.head import PromptHead, load_head, save_head
from promix.losses import LOSS_KINDS
from promix.mixture import MixtureModel, load_weights, save_weights
from promix.outclass import generate_outclass, generate_vocab_pool


class ArtifactError(RuntimeError):
    """A required checkpoint from an earlier stage is missing."""


def _effective_config(path: str, overrides: tuple[str, ...]) -> RunConfig:
    cfg = load_config(path, list(overrides))
    env_seed = os.environ.get("PROMIX_SEED")
    if env_seed is not None:
        try:
            cfg = replace(cfg, seed=int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"PROMIX_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_manifest(cfg: RunConfig, out: Path, command: str, payload: dict) -> None:
    manifest = {"command": command, "config_hash": cfg.config_hash(), **payload}
    _write_json(out / f"manifest_{command}.json", manifest)


def _domain(cfg: RunConfig, seed: int):
    """(train, test, anchors) for one seed from the configured source."""
    if cfg.synthetic is not None:
        dom = generate_synthetic(replace(cfg.synthetic, seed=seed))
        return dom.train, dom.test, dom.generalized_prototypes
    files = cfg.files
    train = read_embedding_file(files["train"])
    test = read_embedding_file(files["test"])
    anchors = read_embedding_file(files["anchors"])
    if anchors.class_names != train.class_names:
        raise ConfigError("anchor file class list differs from the train file", "/data/files")
    if not np.array_equal(np.sort(anchors.labels), np.arange(len(anchors.class_names))):
        raise ConfigError("anchor file must hold exactly one row per class", "/data/files")
    return train, test, anchors.vectors[np.argsort(anchors.labels)]


def _partition_for(cfg: RunConfig, n_classes: int, seed: int):
    spec = cfg.partition or {"kind": "base_new_even_split"}
    return partition_classes(
        n_classes,
        spec["kind"],
        seed=spec.get("seed") if spec.get("seed") is not None else seed,
        base_size=spec.get("base_size"),
        way=spec.get("way"),
        sets=spec.get("sets"),
    )


def _head_paths(out: Path, seed: int) -> dict[str, Path]:
    heads = out / "heads"
    return {"ce": heads / f"seed{seed}_ce.json", "conf": heads / f"seed{seed}_conf.json"}


def _weight_path(out: Path, seed: int) -> Path:
    return out / "weights" / f"seed{seed}.json"


def _out_anchor_source(cfg: RunConfig, dim: int, seed: int, in_class_size: int) -> np.ndarray:
    if cfg.pool_file is not None:
        pool = read_embedding_file(cfg.pool_file).vectors
    else:
        pool = generate_vocab_pool(dim, cfg.pool_size, seed=seed + 7919)
    return generate_outclass(
        cfg.outclass, dim, seed=seed + 104729, vocab_pool=pool, in_class_size=in_class_size
    )


@click.group()
def cli() -> None:
    """Confusion-aware prompt tuning and prompt mixtures over embeddings."""


_config_opt = click.option(
    "--config", "config_path", required=True, type=click.Path(), help="Run config JSON."
)
_set_opt = click.option(
    "--set", "overrides", multiple=True, metavar="PATH=VALUE",
    help="Override a config entry, e.g. --set optimizer.epochs=10",
)


@cli.command()
@_config_opt
@_set_opt
def gen(config_path: str, overrides: tuple[str, ...]) -> None:
    """Write the synthetic domain as embedding files."""
    cfg = _effective_config(config_path, overrides)
    if cfg.synthetic is None:
        raise ConfigError("gen requires a synthetic data source", "/data")
    out = _out_dir(cfg)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    dom = generate_synthetic(replace(cfg.synthetic, seed=cfg.seed))
    names = dom.train.class_names
    write_embedding_file(dom.train, data_dir / "train.emb")
    write_embedding_file(dom.test, data_dir / "test.emb")
    write_embedding_file(prototype_set(dom.generalized_prototypes, names), data_dir / "anchors.emb")
    write_embedding_file(prototype_set(dom.true_prototypes, names), data_dir / "true_prototypes.emb")
    _write_manifest(
        cfg, out, "gen",
        {"seed": cfg.seed, "files": ["train.emb", "test.emb", "anchors.emb", "true_prototypes.emb"]},
    )
    click.echo(f"wrote 4 embedding files under {data_dir}")


@cli.command()
@_config_opt
@_set_opt
def tune(config_path: str, overrides: tuple[str, ...]) -> None:
    """Tune the baseline (plain CE) and confusion-aware heads per seed."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    (out / "heads").mkdir(exist_ok=True)
    traces = {}
    for seed in sorted(cfg.seeds):
        train, _test, anchors = _domain(cfg, seed)
        partition = _partition_for(cfg, len(train.class_names), seed)
        base_classes = partition.subsets[1]
        opt = replace(cfg.optimizer, seed=seed)
        paths = _head_paths(out, seed)
        for label, loss in (
            ("ce", replace(cfg.loss, kind="ce")),
            ("conf", replace(cfg.loss, kind="ce_conf", w=cfg.hyper.conf_weight)),
        ):
            head = tune_on_subset(
                anchors, train.class_names, train, base_classes, loss, opt,
                cfg.hyper.context_len, seed, cfg.tau,
            )
            save_head(head, cfg.tau, paths[label])
            train_acc = accuracy(head, train.with_labels_in(base_classes), classes=base_classes)
            traces[f"seed{seed}_{label}"] = {"train_accuracy": train_acc}
    _write_manifest(cfg, out, "tune", {"seeds": sorted(cfg.seeds), "metrics": traces})
    click.echo(f"tuned {2 * len(cfg.seeds)} heads under {out / 'heads'}")


@cli.command()
@_config_opt
@_set_opt
def weights(config_path: str, overrides: tuple[str, ...]) -> None:
    """Fit the in/out mixture weights from the tuned heads."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    (out / "weights").mkdir(exist_ok=True)
    fitted = {}
    for seed in sorted(cfg.seeds):
        head_path = _head_paths(out, seed)["conf"]
        if not head_path.exists():
            raise ArtifactError(f"missing head checkpoint {head_path}; run `tune` first")
        head_conf, tau = load_head(head_path)
        train, _test, anchors = _domain(cfg, seed)
        partition = _partition_for(cfg, len(train.class_names), seed)
        base_classes = partition.subsets[1]
        t0 = PromptHead.frozen_from(anchors, train.class_names)
        model = MixtureModel(
            (t0, head_conf), initial_weights(cfg.parameterization, 1, tau), partition, tau=tau
        )
        out_anchors = _out_anchor_source(cfg, train.dim, seed, len(base_classes))
        model = fit_weights(
            model, train.with_labels_in(base_classes), out_anchors, cfg.hyper,
            replace(cfg.optimizer, seed=seed), classes=base_classes,
        )
        save_weights(model.weights, _weight_path(out, seed))
        fitted[f"seed{seed}"] = model.weights.to_dict()
    _write_manifest(cfg, out, "weights", {"seeds": sorted(cfg.seeds), "weights": fitted})
    click.echo(f"fitted weights for {len(cfg.seeds)} seeds under {out / 'weights'}")


@cli.command(name="eval")
@_config_opt
@_set_opt
def eval_cmd(config_path: str, overrides: tuple[str, ...]) -> None:
    """Score the four comparison configurations from saved artifacts."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    per_seed = []
    for seed in sorted(cfg.seeds):
        paths = _head_paths(out, seed)
        wpath = _weight_path(out, seed)
        for p in (*paths.values(), wpath):
            if not Path(p).exists():
                raise ArtifactError(f"missing checkpoint {p}; run `tune` and `weights` first")
        head_ce, tau = load_head(paths["ce"])
        head_conf, _ = load_head(paths["conf"])
        fitted = load_weights(wpath)
        train, test, anchors = _domain(cfg, seed)
        partition = _partition_for(cfg, len(train.class_names), seed)
        if len(partition.subsets[0]) == 0 or len(partition.subsets[1]) == 0:
            raise ConfigError(
                "eval needs a partition with non-empty tuning and held-out subsets",
                "/partition",
            )
        t0 = PromptHead.frozen_from(anchors, train.class_names)
        per_seed.append(
            score_base_new_configs(t0, head_ce, head_conf, fitted, partition, test, tau=tau)
        )
    per_config = {
        name: {
            key: float(np.mean([row[name][key] for row in per_seed]))
            for key in ("base", "new", "h")
        }
        for name in CONFIG_NAMES
    }
    report = EvalReport(
        kind="base_to_new",
        config_hash=cfg.config_hash(),
        per_config=per_config,
        extra={"seeds": sorted(cfg.seeds), "per_seed": per_seed},
    )
    report.write(out / "report_eval.json")
    (out / "report_eval.csv").write_text(base_to_new_csv(report))
    _write_manifest(cfg, out, "eval", {"seeds": sorted(cfg.seeds), "per_config": per_config})
    click.echo(f"wrote {out / 'report_eval.json'}")


@cli.command()
@_config_opt
@_set_opt
@click.option("--jobs", type=int, default=None, help="Parallel seed workers.")
def fscil(config_path: str, overrides: tuple[str, ...], jobs: int | None) -> None:
    """Run the class-incremental session benchmark."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    harness = cfg.harness()
    if jobs is not None:
        harness = replace(harness, jobs=jobs)
    spec = cfg.partition or {}
    if spec.get("kind") == "session_schedule":
        harness = replace(
            harness, fscil_base_size=spec.get("base_size"), fscil_way=spec.get("way") or 5
        )
    report = fscil_run(harness, config_hash=cfg.config_hash())
    report.write(out / "report_fscil.json")
    (out / "report_fscil.csv").write_text(fscil_csv(report))
    _write_manifest(
        cfg, out, "fscil",
        {"mean": report.mean_acc, "pd": report.pd, "sessions": report.session_acc},
    )
    click.echo(f"wrote {out / 'report_fscil.json'}")


@cli.command()
@_config_opt
@_set_opt
@click.option("--splits", type=int, default=10, show_default=True)
@click.option("--jobs", type=int, default=None, help="Parallel split workers.")
def assume(config_path: str, overrides: tuple[str, ...], splits: int, jobs: int | None) -> None:
    """Validate the specialization assumption with paired t-tests."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    harness = cfg.harness()
    if jobs is not None:
        harness = replace(harness, jobs=jobs)
    report = assumption_check(harness, splits=splits, config_hash=cfg.config_hash())
    report.write(out / "report_assume.json")
    _write_manifest(cfg, out, "assume", {"t_tests": report.t_tests})
    click.echo(f"wrote {out / 'report_assume.json'}")
    click.echo(f"validated: {report.t_tests['validated']}")


@cli.command()
@_config_opt
@_set_opt
@click.option("--trials", type=int, default=1000, show_default=True)
def bound(config_path: str, overrides: tuple[str, ...], trials: int) -> None:
    """Sweep random ensembles against the mixture error bound."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    result = bound_sweep(trials=trials, seed=cfg.seed)
    payload = {"config_hash": cfg.config_hash(), **result}
    _write_json(out / "report_bound.json", payload)
    _write_manifest(cfg, out, "bound", result)
    click.echo(f"min gap over {trials} trials: {result['min_gap']:.3e}")
    if not result["all_non_negative"]:
        raise RuntimeError("mixture error bound violated beyond tolerance")


@cli.command(name="losses")
@_config_opt
@_set_opt
def losses_cmd(config_path: str, overrides: tuple[str, ...]) -> None:
    """Compare tuning-domain accuracy across the loss zoo."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    rows = {}
    for kind in LOSS_KINDS:
        accs = []
        for seed in sorted(cfg.seeds):
            train, test, anchors = _domain(cfg, seed)
            partition = _partition_for(cfg, len(train.class_names), seed)
            base_classes = partition.subsets[1]
            loss = replace(cfg.loss, kind=kind)
            head = tune_on_subset(
                anchors, train.class_names, train, base_classes, loss,
                replace(cfg.optimizer, seed=seed), cfg.hyper.context_len, seed, cfg.tau,
            )
            accs.append(
                accuracy(head, test.with_labels_in(base_classes), classes=base_classes)
            )
        rows[kind] = {"base_accuracy": float(np.mean(accs))}
    payload = {"config_hash": cfg.config_hash(), "losses": rows, "seeds": sorted(cfg.seeds)}
    _write_json(out / "report_losses.json", payload)
    csv = "loss,base_accuracy\n" + "".join(
        f"{kind},{rows[kind]['base_accuracy']:.4f}\n" for kind in LOSS_KINDS
    )
    (out / "report_losses.csv").write_text(csv)
    _write_manifest(cfg, out, "losses", {"losses": rows})
    click.echo(f"wrote {out / 'report_losses.json'}")


@cli.command()
@_config_opt
@_set_opt
def report(config_path: str, overrides: tuple[str, ...]) -> None:
    """Merge the run directory's manifests and reports into a summary."""
    cfg = _effective_config(config_path, overrides)
    out = _out_dir(cfg)
    merged: dict = {"config_hash": cfg.config_hash(), "runs": {}}
    for path in sorted(out.glob("manifest_*.json")) + sorted(out.glob("report_*.json")):
        merged["runs"][path.name] = json.loads(path.read_text())
    _write_json(out / "summary.json", merged)
    click.echo(f"merged {len(merged['runs'])} artifacts into {out / 'summary.json'}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except (ConfigError, ArtifactError, ValueError, click.UsageError) as exc:
        # precondition violations (bad config, bad partition, bad inputs)
        message = exc.format_message() if isinstance(exc, click.UsageError) else str(exc)
        click.echo(f"error: {message}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        click.echo(f"runtime failure: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
