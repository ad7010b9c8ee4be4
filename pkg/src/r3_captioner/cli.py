"""
Command-line interface: dataset generation, training, generation,
evaluation and role analysis as reproducible batch commands.

Typical Usage:

$ r3 gen-data --config run.conf
$ r3 train --config run.conf --variant baseline
$ r3 generate checkpoints/latest.ckpt data/eval.r3f --out traces.jsonl
$ r3 evaluate traces.jsonl --compare baseline.jsonl
$ r3 analyze-roles traces.jsonl --site dec0.cross --head 0
"""

from contextlib import contextmanager
from pathlib import Path
from typing import Optional
import logging
import sys

import numpy as np
import typer
from pydantic import ValidationError

from r3_captioner.config import RunConfig, RunConfigLoader, cli_overrides, dump_run_config
from r3_captioner.errors import ContractError, FormatError, R3Error
from r3_captioner.metrics import (
    STRATA,
    GenerationTrace,
    evaluate_corpus,
    improvement_report,
    report_lines,
    role_word_probability,
    word_frequency,
    write_frequency,
    write_improvement,
    write_report,
    write_roles,
)
from r3_captioner.model import (
    R3Captioner,
    R3Config,
    generate_greedy,
    make_batch,
    token_accuracy,
    train_step,
)
from r3_captioner.optim import Adam
from r3_captioner.storage import (
    load_checkpoint,
    load_feature_file,
    load_traces,
    restore,
    save_checkpoint,
    save_feature_file,
    save_traces,
    write_split_manifest,
)
from r3_captioner.tensor import make_rng
from r3_captioner.world import Vocabulary, generate_dataset, make_splits

logger = logging.getLogger(__name__)

app = typer.Typer(help="Role-quantized relativity transformer captioner.", no_args_is_help=True)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def configure_logging(run_dir: Path, command: str):
    """
    Sends package logs to stderr and appends them to
    <run_dir>/<command>.log.
    """

    run_dir.mkdir(parents=True, exist_ok=True)
    package = logging.getLogger("r3_captioner")

    for handler in list(package.handlers):
        package.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)

    for handler in (
        logging.StreamHandler(sys.stderr),
        logging.FileHandler(run_dir / f"{command}.log", mode="a"),
    ):
        handler.setFormatter(formatter)
        package.addHandler(handler)

    package.setLevel(logging.INFO)


@contextmanager
def diagnostics():
    """
    Turns any package, validation or IO error into a one-line
    message and exit code 1.
    """

    try:
        yield
    except (R3Error, ValidationError, OSError) as error:
        message = str(error).splitlines()[0] if str(error) else type(error).__name__
        logger.error("command failed error=%s", type(error).__name__)
        typer.echo(f"error: {type(error).__name__}: {message}", err=True)
        raise typer.Exit(code=1)


def _load_run(config: Optional[Path], seed=None, variant=None) -> RunConfig:
    return RunConfigLoader(config).load(cli_overrides(seed, variant))


def _model_config(run: RunConfig, vocabulary: Vocabulary) -> R3Config:
    return R3Config(**{**run.model.model_dump(), "vocab_size": len(vocabulary)})


ConfigOption = typer.Option(None, "--config", help="key=value run configuration file.")
SeedOption = typer.Option(None, "--seed", help="Overrides the run, model and world seed.")


@app.command("gen-data")
def gen_data(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory."),
):
    """
    Generates synthetic episodes, splits them and writes feature files.
    """

    with diagnostics():
        run = _load_run(config, seed)
        out = out or run.data_dir
        configure_logging(out, "gen-data")

        records = generate_dataset(run.world, run.episodes)
        splits = make_splits(
            records, (run.train_fraction, 1.0 - run.train_fraction), run.seed
        )

        save_feature_file(out / "episodes.r3f", records)
        save_feature_file(out / "train.r3f", splits.train)
        save_feature_file(out / "eval.r3f", splits.eval)
        write_split_manifest(
            out / "splits.txt", {"train": splits.train_indices, "eval": splits.eval_indices}
        )
        dump_run_config(run, out / "run.conf")

        typer.echo(f"records={len(records)}")
        typer.echo(f"train={len(splits.train)} eval={len(splits.eval)}")

        for m in STRATA:
            count = sum(r.predicates >= m for r in records)
            typer.echo(f"min{m}={count}")
            logger.info("stratum min_predicates=%d records=%d", m, count)


@app.command()
def train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    variant: Optional[str] = typer.Option(None, "--variant", help="r3 or baseline."),
    data: Optional[Path] = typer.Option(None, "--data", help="Directory holding train.r3f."),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to continue."),
):
    """
    Trains with Adam at a fixed learning rate, logging losses and
    codebook perplexity and writing checkpoints.
    """

    with diagnostics():
        run = _load_run(config, seed, variant)
        run_dir = run.checkpoint_dir
        configure_logging(run_dir, "train")

        vocabulary = Vocabulary.from_spec(run.world)
        records = load_feature_file((data or run.data_dir) / "train.r3f")

        if not records:
            raise ContractError("training set is empty")

        if resume is not None:
            checkpoint = load_checkpoint(resume)
            if checkpoint.config.vocab_size != len(vocabulary):
                raise ContractError(
                    f"checkpoint vocabulary {checkpoint.config.vocab_size} does not "
                    f"match the world vocabulary {len(vocabulary)}"
                )
            model, optimizer, rng = restore(checkpoint)
            logger.info("resumed path=%s step=%d", resume, optimizer.step_count)
        else:
            model = R3Captioner(_model_config(run, vocabulary))
            optimizer = Adam(model.named_parameters(), lr=model.config.learning_rate)
            rng = make_rng(run.seed)
            save_checkpoint(run_dir / "step000000.ckpt", model, optimizer, rng)
            save_checkpoint(run_dir / "latest.ckpt", model, optimizer, rng)

        dump_run_config(run, run_dir / "run.conf")
        batch_size = min(run.batch_size, len(records))

        with open(run_dir / "loss.log", "a") as loss_log:
            while optimizer.step_count < run.steps:
                picks = rng.choice(len(records), size=batch_size, replace=False)
                batch = make_batch([records[i] for i in picks], model.config)
                record = train_step(model, optimizer, batch, rng)

                loss_log.write(
                    f"step={record.step} total={record.total!r} ce={record.ce!r} "
                    f"l_q={record.l_q!r}\n"
                )

                if record.step % run.log_every == 0:
                    logger.info(
                        "step=%d total=%.4f ce=%.4f l_q=%.4f perplexity=%.2f",
                        record.step,
                        record.total,
                        record.ce,
                        record.l_q,
                        record.perplexity.get("all", 0.0),
                    )

                if record.step % run.eval_every == 0 or record.step == run.steps:
                    save_checkpoint(run_dir / f"step{record.step:06d}.ckpt", model, optimizer, rng)
                    save_checkpoint(run_dir / "latest.ckpt", model, optimizer, rng)

        accuracy = token_accuracy(model, make_batch(records[: run.batch_size], model.config))
        logger.info("finished step=%d token_accuracy=%.4f", optimizer.step_count, accuracy)
        typer.echo(f"step={optimizer.step_count} token_accuracy={accuracy:.4f}")


@app.command()
def generate(
    checkpoint: Path = typer.Argument(..., help="Checkpoint file."),
    data: Path = typer.Argument(..., help="Feature file to caption."),
    out: Path = typer.Option(Path("traces.jsonl"), "--out", help="Trace dump to write."),
    config: Optional[Path] = ConfigOption,
    max_len: int = typer.Option(50, "--max-len", help="Generated token limit."),
    batch_size: int = typer.Option(16, "--batch-size", min=1),
):
    """
    Greedy captions with role traces for every record of a feature file.
    """

    with diagnostics():
        run = _load_run(config)
        configure_logging(out.parent, "generate")

        saved = load_checkpoint(checkpoint)
        model = restore(saved)[0]
        vocabulary = Vocabulary.from_spec(run.world)

        if saved.config.vocab_size != len(vocabulary):
            raise FormatError(
                f"checkpoint vocabulary {saved.config.vocab_size} does not match the "
                f"world vocabulary {len(vocabulary)}"
            )

        records = load_feature_file(data)
        traces = []

        if not records:
            logger.warning("evaluation set is empty path=%s", data)

        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            generations = generate_greedy(model, make_batch(chunk, model.config), max_len)

            for offset, (record, generation) in enumerate(zip(chunk, generations)):
                words = [vocabulary.words[i] for i in generation.tokens]
                reference = record.caption

                traces.append(
                    GenerationTrace(
                        example_id=start + offset,
                        generated_ids=generation.tokens,
                        generated_words=words,
                        generated_tags=[vocabulary.tag_of(w) for w in words],
                        reference_ids=reference,
                        reference_words=(
                            None if reference is None else vocabulary.id_words(reference)
                        ),
                        reference_tags=record.pos_tags,
                        roles=generation.roles,
                        encoder_roles=generation.encoder_roles,
                    )
                )

        save_traces(out, traces)
        logger.info("traces written path=%s count=%d", out, len(traces))
        typer.echo(f"traces={len(traces)}")


def _attach_references(traces, records, vocabulary: Vocabulary):
    for trace in traces:
        if not 0 <= trace.example_id < len(records):
            raise ContractError(f"example {trace.example_id} has no reference record")

        record = records[trace.example_id]
        if record.caption is None:
            raise ContractError(f"reference record {trace.example_id} has no caption")

        trace.reference_ids = record.caption
        trace.reference_words = vocabulary.id_words(record.caption)
        trace.reference_tags = record.pos_tags


@app.command()
def evaluate(
    traces: Path = typer.Argument(..., help="Trace dump of the model."),
    refs: Optional[Path] = typer.Option(None, "--refs", help="Feature file of references."),
    compare: Optional[Path] = typer.Option(None, "--compare", help="Baseline trace dump."),
    min_predicates: Optional[int] = typer.Option(
        None, "--min-predicates", min=1, max=4, help="Report only this stratum."
    ),
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = typer.Option(None, "--out", help="Report directory."),
):
    """
    BLEU-1..4, ROUGE-L and CIDEr on the full set and per predicate
    stratum, optionally against a baseline dump.
    """

    with diagnostics():
        run = _load_run(config)
        out = out or run.report_dir
        configure_logging(out, "evaluate")

        dumps = {"model": load_traces(traces)}
        if compare is not None:
            dumps["baseline"] = load_traces(compare)

        if refs is not None:
            records = load_feature_file(refs)
            vocabulary = Vocabulary.from_spec(run.world)
            for dump in dumps.values():
                _attach_references(dump, records, vocabulary)

        strata = STRATA if min_predicates is None else (min_predicates,)
        report = evaluate_corpus(dumps["model"], strata)
        write_report(out / "report.txt", report)

        for line in report_lines(report):
            typer.echo(line)

        if compare is not None:
            ours = sorted(t.example_id for t in dumps["model"])
            theirs = sorted(t.example_id for t in dumps["baseline"])

            if ours != theirs:
                raise ContractError("model and baseline dumps cover different examples")

            baseline = evaluate_corpus(dumps["baseline"], strata)
            write_report(out / "baseline_report.txt", baseline)

            table = improvement_report(report, baseline)
            write_improvement(out / "improvement.csv", table)

            for stratum, row in table.items():
                typer.echo(
                    f"improvement.{stratum}.bleu4="
                    + ("undefined" if row["bleu4"] is None else f"{row['bleu4']:.2f}")
                )


@app.command("analyze-roles")
def analyze_roles(
    traces: Path = typer.Argument(..., help="Trace dump with role traces."),
    site: str = typer.Option("dec0.cross", "--site", help="Attention site to analyse."),
    head: int = typer.Option(0, "--head", min=0, help="Head of the site."),
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = typer.Option(None, "--out", help="Report directory."),
):
    """
    Writes the word -> (role, probability) table and the reference
    word frequencies as CSV files.
    """

    with diagnostics():
        run = _load_run(config)
        out = out or run.report_dir
        configure_logging(out, "analyze-roles")

        dump = load_traces(traces)

        if not dump:
            raise FormatError(f"{traces}: trace dump is empty")

        if not any(t.roles for t in dump):
            raise FormatError(f"{traces}: dump carries no role traces")

        table = role_word_probability(dump, site, head)
        frequency = word_frequency(dump)
        tags = {w: tag for t in dump for w, tag in zip(t.generated_words, t.generated_tags)}

        write_roles(out / "roles.csv", table, frequency, tags)
        write_frequency(out / "word_frequency.csv", frequency)

        mean = float(np.mean([p for _, p in table.values()])) if table else 0.0
        logger.info(
            "roles analysed site=%s head=%d words=%d mean=%.4f", site, head, len(table), mean
        )
        typer.echo(f"words={len(table)} mean_probability={mean:.4f}")
