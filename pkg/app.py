import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import click

from models import AttributeSchema
from repair_core.config import CliConfig, Settings, configure_logging, load_settings, read_json_file
from repair_core.encoding import EncoderSet, fit_encoders
from repair_core.errors import InvalidFlag, handle_errors, parse_positive_int
from repair_core.evaluation import RunReport, compare_reports, evaluate_multi_run, repair_log
from repair_core.eventlog import (
    CsvOptions,
    SchemaHints,
    infer_schema,
    parse_csv_log,
    repair_schema,
    split_log,
    write_csv_log,
)
from repair_core.io_utils import atomic_output, require_file, require_writable_dir, write_json
from repair_core.masking import MaskStrategy, mask_log, training_strategies
from repair_core.metrics import write_metrics
from repair_core.model import ModelConfig, load_params, save_params
from repair_core.synthetic import generate_synthetic_log, load_process_spec
from repair_core.training import SearchSpace, TrainConfig, random_search, train_model, validation_objective, write_history_csv

log = logging.getLogger("repair_core.cli")

PARAMS_FILE = "params.sgrf"
ENCODERS_FILE = "encoders.json"
HISTORY_FILE = "history.csv"


@dataclass
class RunContext:
    """Everything a subcommand needs once env, --config and flags are merged."""

    settings: Settings
    cfg: CliConfig
    seed: int
    missing_token: str
    deterministic: bool
    workers: int
    metrics_file: str | None

    @property
    def csv(self) -> CsvOptions:
        return CsvOptions(missing_token=self.missing_token)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.cfg.model, "seed": self.seed})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.cfg.train, "seed": self.seed})

    def finish(self) -> None:
        if self.metrics_file:
            write_metrics(self.metrics_file)


def _compose(*decorators):
    def apply(fn):
        for d in reversed(decorators):
            fn = d(fn)
        return fn
    return apply


run_options = _compose(
    click.option("--seed", type=int, default=None, help="Random seed (default 123)."),
    click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                 help="JSON file with model/train/search/paths sections."),
    click.option("--missing-token", default=None, help="Token for missing cells (default '-')."),
    click.option("--deterministic/--no-deterministic", default=None),
    click.option("--workers", type=int, default=None),
    click.option("--metrics-file", type=click.Path(dir_okay=False), default=None),
)

schema_options = _compose(
    click.option("--schema", "schema_path", type=click.Path(dir_okay=False), default=None,
                 help="Schema JSON; inferred from the log when absent."),
    click.option("--case-column", default="case_id"),
    click.option("--activity-column", default="activity"),
    click.option("--timestamp-column", default="timestamp"),
    click.option("--categorical", multiple=True, help="Force a column to be categorical."),
    click.option("--attributes", type=click.Choice(["full", "at"]), default="full",
                 help="'at' keeps only activity and timestamp."),
)

model_options = _compose(
    click.option("--layers", type=int, default=None),
    click.option("--hidden", type=int, default=None),
    click.option("--aggregator", type=click.Choice(["sum", "mean", "max"]), default=None),
    click.option("--lr", type=float, default=None),
    click.option("--lr-gamma", type=float, default=None, help="Per-epoch learning-rate multiplier."),
    click.option("--batch-size", type=int, default=None),
    click.option("--weight-decay", type=float, default=None),
    click.option("--max-epochs", type=int, default=None),
    click.option("--patience", type=int, default=None, help="0 disables early stopping."),
)


def _context(settings: Settings, opts: dict) -> RunContext:
    cfg = CliConfig.build(
        settings,
        opts.get("config_path"),
        model={"n_layers": opts.get("layers"), "hidden_size": opts.get("hidden")},
        train={
            "learning_rate": opts.get("lr"),
            "lr_gamma": opts.get("lr_gamma"),
            "batch_size": opts.get("batch_size"),
            "weight_decay": opts.get("weight_decay"),
            "aggregator": opts.get("aggregator"),
            "max_epochs": opts.get("max_epochs"),
            "patience": opts.get("patience"),
        },
    )
    seed = opts.get("seed")
    workers = opts.get("workers")
    deterministic = opts.get("deterministic")
    return RunContext(
        settings=settings,
        cfg=cfg,
        seed=settings.seed if seed is None else seed,
        missing_token=opts.get("missing_token") or settings.missing_token,
        deterministic=settings.deterministic if deterministic is None else deterministic,
        workers=settings.workers if workers is None else parse_positive_int(workers, "workers"),
        metrics_file=opts.get("metrics_file") or settings.metrics_file,
    )


def _schema(log_path: str, opts: dict, csv: CsvOptions) -> AttributeSchema:
    if opts.get("schema_path"):
        schema = AttributeSchema.from_dict(read_json_file(require_file(opts["schema_path"], "schema")))
    else:
        hints = SchemaHints(
            case_id_column=opts["case_column"],
            activity_column=opts["activity_column"],
            timestamp_column=opts["timestamp_column"],
            categorical=tuple(opts.get("categorical") or ()),
        )
        schema = infer_schema(log_path, hints, csv)
    return schema.select(opts.get("attributes") or "full")


def _read_log(path: str, opts: dict, ctx: RunContext):
    require_file(path, "log")
    return parse_csv_log(path, _schema(path, opts, ctx.csv), ctx.csv)


def _artifact_files(cfg: CliConfig, artifacts: str | None) -> tuple:
    base = cfg.path("artifacts", artifacts)
    enc_path = cfg.path("encoders") if artifacts is None else None
    params_path = cfg.path("params") if artifacts is None else None
    if base is not None:
        enc_path = enc_path or Path(base) / ENCODERS_FILE
        params_path = params_path or Path(base) / PARAMS_FILE
    if enc_path is None or params_path is None:
        raise InvalidFlag("repair needs --artifacts or paths.artifacts in --config")
    return enc_path, params_path


def _write_log(log_, path, csv: CsvOptions) -> None:
    with atomic_output(path, "w", newline="", encoding="utf-8") as fh:
        write_csv_log(log_, fh, csv)


def create_cli() -> click.Group:
    @click.group(context_settings={"help_option_names": ["-h", "--help"]})
    @click.option("--log-level", default=None, help="Overrides SAGEREPAIR_LOG_LEVEL.")
    @click.pass_context
    @handle_errors
    def cli(ctx, log_level):
        """SageRepair: repair event logs with a heterogeneous SAGE network."""
        settings = load_settings()
        configure_logging((log_level or settings.log_level).upper())
        ctx.obj = settings

    @cli.command()
    @click.argument("spec_path", type=click.Path(dir_okay=False))
    @click.argument("out_csv", type=click.Path(dir_okay=False))
    @click.option("--traces", type=int, default=1000, show_default=True)
    @run_options
    @click.pass_obj
    @handle_errors
    def generate(settings, spec_path, out_csv, traces, **opts):
        """Sample a CSV log from a ProcessSpec JSON document."""
        ctx = _context(settings, opts)
        spec = load_process_spec(require_file(spec_path, "process spec"))
        n = parse_positive_int(traces, "traces")
        require_writable_dir(out_csv)
        _write_log(generate_synthetic_log(spec, n, ctx.seed), out_csv, ctx.csv)
        ctx.finish()

    @cli.command()
    @click.argument("in_csv", type=click.Path(dir_okay=False))
    @click.argument("out_csv", type=click.Path(dir_okay=False))
    @click.option("--strategy", required=True, help="odd | even | window | random")
    @click.option("--random-p", type=float, default=0.5, show_default=True)
    @schema_options
    @run_options
    @click.pass_obj
    @handle_errors
    def mask(settings, in_csv, out_csv, strategy, random_p, **opts):
        """Blank whole events of every trace."""
        ctx = _context(settings, opts)
        chosen = MaskStrategy.parse(strategy, random_p)
        log_ = _read_log(in_csv, opts, ctx)
        require_writable_dir(out_csv)
        _write_log(mask_log(log_, chosen, ctx.seed), out_csv, ctx.csv)
        ctx.finish()

    @cli.command()
    @click.argument("log_csv", type=click.Path(dir_okay=False))
    @click.argument("out_json", type=click.Path(dir_okay=False))
    @click.option("--trials", type=int, default=20, show_default=True)
    @schema_options
    @model_options
    @run_options
    @click.pass_obj
    @handle_errors
    def tune(settings, log_csv, out_json, trials, **opts):
        """Random search; writes the best configuration as JSON."""
        ctx = _context(settings, opts)
        base, model_cfg = ctx.train_config(), ctx.model_config()
        space = SearchSpace.from_dict(ctx.cfg.search)
        budget = parse_positive_int(trials, "trials")
        train, val, _ = split_log(_read_log(log_csv, opts, ctx), seed=ctx.seed)
        require_writable_dir(out_json)
        enc = fit_encoders(train)
        workers = 1 if ctx.deterministic else ctx.workers
        best = random_search(space, budget, ctx.seed, validation_objective(train, val, enc, model_cfg), base, workers)
        write_json(out_json, {"train": best.to_dict(), "model": asdict(model_cfg)})
        ctx.finish()

    @cli.command()
    @click.argument("log_csv", type=click.Path(dir_okay=False))
    @click.argument("out_dir", type=click.Path(file_okay=False))
    @schema_options
    @model_options
    @run_options
    @click.pass_obj
    @handle_errors
    def train(settings, log_csv, out_dir, **opts):
        """Train on the 60% split; writes params, encoders and history."""
        ctx = _context(settings, opts)
        cfg, model_cfg = ctx.train_config(), ctx.model_config()
        train_log, val_log, _ = split_log(_read_log(log_csv, opts, ctx), seed=ctx.seed)
        out = require_writable_dir(out_dir)
        enc = fit_encoders(train_log)
        params, history = train_model(train_log, val_log, enc, cfg, model_cfg)
        save_params(params, Path(out) / PARAMS_FILE)
        enc.save(Path(out) / ENCODERS_FILE)
        write_history_csv(history, Path(out) / HISTORY_FILE)
        log.info("best epoch %d, validation loss %.5f", history.best_epoch, history.best_val_loss)
        ctx.finish()

    @cli.command()
    @click.argument("log_csv", type=click.Path(dir_okay=False))
    @click.argument("out_json", type=click.Path(dir_okay=False))
    @click.option("--runs", type=int, default=10, show_default=True)
    @click.option("--random-p", type=float, default=0.5, show_default=True)
    @schema_options
    @model_options
    @run_options
    @click.pass_obj
    @handle_errors
    def evaluate(settings, log_csv, out_json, runs, random_p, **opts):
        """Train `runs` models and score each strategy on the test split."""
        ctx = _context(settings, opts)
        cfg, model_cfg = ctx.train_config(), ctx.model_config()
        n_runs = parse_positive_int(runs, "runs")
        strategies = training_strategies(MaskStrategy.random(random_p).p)
        splits = split_log(_read_log(log_csv, opts, ctx), seed=ctx.seed)
        require_writable_dir(out_json)
        report = evaluate_multi_run(cfg, model_cfg, splits, n_runs=n_runs, strategies=strategies,
                                    workers=ctx.workers, deterministic=ctx.deterministic)
        report.to_json(out_json)
        ctx.finish()

    @cli.command()
    @click.argument("damaged_csv", type=click.Path(dir_okay=False))
    @click.argument("out_csv", type=click.Path(dir_okay=False))
    @click.option("--artifacts", type=click.Path(file_okay=False), default=None,
                  help="Directory written by `train` (or paths.artifacts in --config).")
    @run_options
    @click.pass_obj
    @handle_errors
    def repair(settings, damaged_csv, out_csv, artifacts, **opts):
        """Fill every missing cell of a damaged log."""
        ctx = _context(settings, opts)
        enc_path, params_path = _artifact_files(ctx.cfg, artifacts)
        enc = EncoderSet.load(require_file(enc_path, "encoders"))
        params = load_params(require_file(params_path, "parameters"), enc)
        require_file(damaged_csv, "log")
        # columns the model never saw are carried through as read
        damaged = parse_csv_log(damaged_csv, repair_schema(damaged_csv, enc.schema, ctx.csv), ctx.csv)
        require_writable_dir(out_csv)
        _write_log(repair_log(damaged, params, enc), out_csv, ctx.csv)
        ctx.finish()

    @cli.command()
    @click.argument("full_json", type=click.Path(dir_okay=False))
    @click.argument("at_json", type=click.Path(dir_okay=False))
    @click.argument("out_json", type=click.Path(dir_okay=False))
    @handle_errors
    def compare(full_json, at_json, out_json):
        """Per strategy and attribute: mean(all attributes) - mean(activity/time only)."""
        full = RunReport.from_json(require_file(full_json, "report"))
        at = RunReport.from_json(require_file(at_json, "report"))
        require_writable_dir(out_json)
        write_json(out_json, compare_reports(full, at))

    return cli


def run(argv=None) -> int:
    """Entry point returning the exit status: 0 ok, 1 bad input or usage, 2 runtime failure."""
    cli = create_cli()
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name="sagerepair",
                      standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(run())
