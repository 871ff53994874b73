import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Any, NoReturn, Optional

from counterfactual_recsys._logging import logger, set_verbosity, timed
from counterfactual_recsys._run_dir import LockedRunDirectory, RunDirectory
from counterfactual_recsys.checkpoint import load_model, read_metadata, save_model
from counterfactual_recsys.data import (
    SplitDataset,
    all_interactions,
    filter_items,
    filter_users,
    leave_last_split,
    load_interactions,
    read_split,
    write_split,
)
from counterfactual_recsys.error import ConfigurationError, CounterfactualRecsysError, DataError, DivergenceError
from counterfactual_recsys.evaluation import (
    OraclePropensity,
    PopularityPropensity,
    PropensitySource,
    RobustPropensity,
    Weighting,
    evaluate,
)
from counterfactual_recsys.models import RecModel
from counterfactual_recsys.propensity import PropensityHead, RegularizerKind
from counterfactual_recsys.reporting import aggregate, collect_reports, to_csv, to_text
from counterfactual_recsys.settings import RunConfig
from counterfactual_recsys.simulation import OracleDataset, generate_semi_synthetic, read_oracle, write_oracle
from counterfactual_recsys.training import TrainLog, TrainMode, acl_train, build_model, erm_train, ps_train


def _print_info(info: dict[str, object], format_name: str) -> None:
    if format_name == "text":
        for k, v in info.items():
            print(f"{k}: {v}")
    elif format_name == "json":
        print(json.dumps(info))
    else:
        raise ValueError(format_name)


def _open_run(config: RunConfig) -> RunDirectory:
    root = None if config.output.directory is None else Path(config.output.directory)
    return RunDirectory(root, config.output.lock_timeout_seconds)


def _write_resolved_config(run: LockedRunDirectory, config: RunConfig) -> None:
    run.write_json(run.resolved_config_path, config.to_json())


def _prepared_split(run: LockedRunDirectory, config: RunConfig) -> SplitDataset:
    if config.train.dataset == "simulated":
        return read_split(run.oracle_dir / "split")
    return read_split(run.split_dir)


def _simulated_split(oracle: OracleDataset) -> SplitDataset:
    # users need three clicks for a leave-last-two-out split
    clicks = filter_users(oracle.clicks, 3, max(len(oracle.clicks), 3) + 1)
    if clicks.n_users == 0:
        msg = "no simulated user has three or more clicks; lower relevance_shift or use a denser dataset"
        raise DataError(msg)
    return leave_last_split(clicks)


def _action_prepare(config: RunConfig, format_name: str) -> None:
    settings = config.data
    if settings.path is None:
        msg = "data.path is required for `prepare`"
        raise ConfigurationError(msg)
    log = load_interactions(
        Path(settings.path), separator=settings.separator, implicit=settings.implicit, skip_header=settings.skip_header
    )
    if len(log) == 0:
        msg = f"no interactions found in '{settings.path}'"
        raise DataError(msg)
    filtered = filter_users(log, settings.min_n, settings.max_n)
    if settings.min_item_n > 1:
        filtered = filter_users(filter_items(filtered, settings.min_item_n), settings.min_n, settings.max_n)
    if len(filtered) == 0:
        msg = f"no user has between {settings.min_n} and {settings.max_n} interactions"
        raise DataError(msg)
    split = leave_last_split(filtered)
    with _open_run(config).lock() as run:
        write_split(split, run.split_dir)
        _write_resolved_config(run, config)
    _print_info(filtered.summary(), format_name)


def _action_simulate(config: RunConfig, format_name: str, sweep: Optional[int]) -> None:
    with _open_run(config).lock() as run:
        explicit = read_split(run.split_dir)
        if explicit.values is None:
            msg = "simulation needs an explicit-rating dataset (prepare with data.implicit = false)"
            raise DataError(msg)
        log = all_interactions(explicit)
        targets = [(run.oracle_dir, config.sim.seed)]
        if sweep is not None:
            targets = [(run.sweep_dir(k), config.sim.seed + k) for k in range(sweep)]
        info: dict[str, object] = {}
        for directory, seed in targets:
            oracle = generate_semi_synthetic(log, dataclasses.replace(config.sim, seed=seed))
            write_oracle(oracle, directory)
            write_split(_simulated_split(oracle), directory / "split")
            info = {
                "directory": str(directory),
                "n_users": oracle.shape[0],
                "n_items": oracle.shape[1],
                "clicks": len(oracle.clicks),
                "stage2_identical": bool((oracle.p_exposure == oracle.stage1_exposure).all()),
            }
            if sweep is not None:
                logger.info("seed %d written to %s", seed, directory)
        _write_resolved_config(run, config)
    if sweep is not None:
        info = {"sweep": sweep, "directory": str(run.oracle_dir)}
    _print_info(info, format_name)


def _save_last_good(run: LockedRunDirectory, error: DivergenceError, extra: dict[str, Any]) -> None:
    head = error.last_good.get("head")
    for role in ("f", "g"):
        model = error.last_good.get(role)
        if isinstance(model, RecModel):
            path = run.checkpoint_dir / f"{role}.last_good.npz"
            save_model(path, model, head if role == "g" else None, extra)
            logger.error("saved last good %s checkpoint to %s", role, path)


def _action_train(config: RunConfig, format_name: str) -> None:
    settings = config.train
    cfg = settings.config
    for key in config.ignored_keys():
        logger.warning("%s is ignored in %s mode", key, settings.mode.value)
    with _open_run(config).lock() as run:
        split = _prepared_split(run, config)
        extra = {"mode": settings.mode.value, "f_kind": settings.f_kind.value, "g_kind": settings.g_kind.value}
        _write_resolved_config(run, config)
        with TrainLog(run.train_log_path) as log:
            try:
                if settings.mode is TrainMode.ERM:
                    extra["g_kind"] = None
                    f, state = erm_train(build_model(settings.f_kind, split, cfg, "f"), split, cfg, log)
                    save_model(run.checkpoint_dir / "f.npz", f, None, extra)
                elif settings.mode is TrainMode.PS:
                    f, g, head, state = ps_train(settings.f_kind, settings.g_kind, split, cfg, log)
                    save_model(run.checkpoint_dir / "f.npz", f, head, extra)
                    save_model(run.checkpoint_dir / "g.npz", g, head, extra)
                else:
                    exposure = None
                    if cfg.reg_kind is RegularizerKind.EXPOSURE_LOSS:
                        if settings.dataset != "simulated":
                            msg = "the exposure_loss regularizer needs train.dataset = \"simulated\""
                            raise ConfigurationError(msg)
                        exposure = read_oracle(run.oracle_dir).exposure_data(split)
                    f, g, head, state = acl_train(
                        build_model(settings.f_kind, split, cfg, "f"),
                        build_model(settings.g_kind, split, cfg, "g"),
                        PropensityHead(mu=cfg.mu),
                        split,
                        cfg,
                        log,
                        exposure,
                    )
                    save_model(run.checkpoint_dir / "f.npz", f, None, extra)
                    save_model(run.checkpoint_dir / "g.npz", g, head, extra)
            except DivergenceError as e:
                _save_last_good(run, e, extra)
                raise
        run.write_json(run.root / "train_state.json", state.to_json())
    _print_info(
        {
            "mode": settings.mode.value,
            "epochs": state.epochs_run,
            "best_epoch": state.best_epoch,
            "stopped_early": state.stopped_early,
            "final_val_hit@10": state.val_history[-1] if state.val_history else None,
        },
        format_name,
    )


def _robust_source(run: LockedRunDirectory, config: RunConfig) -> PropensitySource:
    if config.eval.g_checkpoint is not None:
        path = Path(config.eval.g_checkpoint)
    else:
        path = run.checkpoint_dir / "g.npz"
    if not path.is_file():
        msg = (
            "robust evaluation needs a paired g model with its propensity head: train with mode \"acl\" or \"ps\", "
            "or point eval.g_checkpoint at a g checkpoint"
        )
        raise ConfigurationError(msg)
    g, head = load_model(path)
    if head is None:
        msg = f"'{path}' holds no propensity head; robust evaluation needs the g checkpoint of an acl/ps run"
        raise ConfigurationError(msg)
    return RobustPropensity(g, head)


def _oracle_source(run: LockedRunDirectory, config: RunConfig, split: SplitDataset) -> PropensitySource:
    if config.train.dataset != "simulated":
        msg = "oracle_unbiased evaluation needs simulated data (set train.dataset = \"simulated\")"
        raise ConfigurationError(msg)
    if not (run.oracle_dir / "manifest.json").is_file():
        msg = f"oracle_unbiased evaluation needs the oracle tables in '{run.oracle_dir}' (run `simulate` first)"
        raise DataError(msg)
    return OraclePropensity(read_oracle(run.oracle_dir).p_exposure, split)


def _action_evaluate(config: RunConfig, format_name: str) -> None:
    with _open_run(config).lock() as run:
        checkpoint = run.checkpoint_dir / "f.npz"
        if not checkpoint.is_file():
            msg = f"no trained model in '{run.root}' (run the `train` command first)"
            raise DataError(msg)
        model, _ = load_model(checkpoint)
        extra = read_metadata(checkpoint)["extra"]
        split = _prepared_split(run, config)
        _write_resolved_config(run, config)
        summary: dict[str, object] = {}
        for weighting in config.eval.weighting:
            source: Optional[PropensitySource] = None
            if weighting is Weighting.ROBUST:
                source = _robust_source(run, config)
            elif weighting is Weighting.ORACLE_UNBIASED:
                source = _oracle_source(run, config, split)
            elif weighting is Weighting.POPULARITY_DEBIASED:
                source = PopularityPropensity(split)
            protocol = config.eval.protocol_for(weighting, config.seed)
            report = evaluate(model, split, protocol, source)
            report.label = {"model": model.kind.value, "mode": extra.get("mode", "?")}
            run.write_json(run.report_dir / f"{weighting.value}.json", report.to_json())
            (run.report_dir / f"{weighting.value}.txt").write_text(report.to_text() + "\n", encoding="utf-8")
            if format_name == "text":
                print(report.to_text())
            summary[weighting.value] = {name: report.primary(name) for name in report.raw}
    if format_name == "json":
        _print_info(summary, format_name)


def _action_report(run_dirs: list[Path], out: Optional[Path], format_name: str) -> None:
    rows = aggregate(collect_reports(run_dirs))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(to_csv(rows), encoding="utf-8")
        (out / "comparison.txt").write_text(to_text(rows) + "\n", encoding="utf-8")
    if format_name == "json":
        table = [{"model": r.model, "mode": r.mode, "weighting": r.weighting, "cells": r.cells} for r in rows]
        print(json.dumps(table))
    else:
        print(to_text(rows))


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the configuration-error code."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(ConfigurationError.exit_code, f"{self.prog}: error: {message}\n")


def _main() -> None:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="the run configuration (TOML, or a resolved_config.json)")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", type=Path, help="the run directory (overrides output.directory)")
    common.add_argument(
        "-f", "--format", choices=["text", "json"], default="text", help="the format to output the data in"
    )
    common.add_argument("-v", "--verbose", action="count", default=0, help="print debug output")

    parser = _ArgumentParser(prog="-m counterfactual_recsys", description="counterfactual recommender toolkit")
    subparsers = parser.add_subparsers(dest="action", parser_class=_ArgumentParser)
    subparsers.add_parser("prepare", parents=[common], help="load, filter and split an interaction log")
    simulate = subparsers.add_parser(
        "simulate", parents=[common], help="generate semi-synthetic clicks with known exposure probabilities"
    )
    simulate.add_argument("--sweep", type=int, help="generate this many datasets with consecutive seeds")
    subparsers.add_parser("train", parents=[common], help="train a recommender (erm, ps or acl)")
    subparsers.add_parser("evaluate", parents=[common], help="evaluate the trained recommender")
    report = subparsers.add_parser("report", help="aggregate the evaluation reports of several runs")
    report.add_argument("run_dirs", nargs="+", type=Path, help="run directories holding evaluation reports")
    report.add_argument("--out", type=Path, help="directory to write comparison.csv and comparison.txt to")
    report.add_argument(
        "-f", "--format", choices=["text", "json"], default="text", help="the format to output the data in"
    )

    args = parser.parse_args()
    set_verbosity(getattr(args, "verbose", 0))

    try:
        if args.action == "report":
            _action_report(args.run_dirs, args.out, args.format)
        elif args.action is None:
            parser.print_help()
        else:
            sweep = getattr(args, "sweep", None)
            if sweep is not None and sweep < 1:
                msg = f"--sweep must be >= 1, got {sweep}"
                raise ConfigurationError(msg)
            config = RunConfig.load(args.config).with_overrides(seed=args.seed, out=args.out)
            with timed(args.action):
                if args.action == "prepare":
                    _action_prepare(config, args.format)
                elif args.action == "simulate":
                    _action_simulate(config, args.format, sweep)
                elif args.action == "train":
                    _action_train(config, args.format)
                elif args.action == "evaluate":
                    _action_evaluate(config, args.format)
    except CounterfactualRecsysError as e:
        logger.error("%s", e)  # noqa: TRY400
        sys.exit(e.exit_code)


if __name__ == "__main__":
    _main()
