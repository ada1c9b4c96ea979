"""The revlm command line interface.

Subcommands train and evaluate models, run the verification suites, the
stability analysis, the residual-to-reversible conversion and the memory
benchmark. Exit codes: 0 on success, 1 when a check fails or a run
diverges, 2 on usage, configuration or IO errors.
"""
import argparse
import csv
import logging
import math
import os
import sys
import time
import traceback

import attr
import numpy as np

from . import checkpoint
from .bench import format_table, run_bench, write_bench_csv
from .blocks import BLOCK_KINDS, REVERSIBLE_KINDS
from .checkpoint import TrainingState, capture, restore
from .data import load_corpus, sample_batch
from .engine import engine_for, generate, train_step
from .exceptions import (
    CarrierMismatchError, CheckpointError, CorpusError, DivergenceError, DTypeError,
    InvalidConfigError, NoConfigFoundError, NonFiniteError, NotInvertibleError,
    ReconstructionError, ShapeError, TokenRangeError,
)
from .model import init_model
from .numerics import DTYPES, Rng, cross_entropy
from .optim import AdamWState
from .retrofit import (
    A_MODES, convert, kl_finetune, write_report_csv, write_report_summary, report_summary,
)
from .runconfig import load_run_config
from .stability import (
    A_VARIANCE_ASSERTED, GRID_COLUMNS, HamiltonianLinearQuery, StabilityQuery, char_roots,
    default_grid, grid_sweep, hamiltonian_agreement, hamiltonian_linear_stability, midpoint_a_moments,
    sample_hamiltonian_queries, stability_condition, write_grid_csv,
)
from .stepreporter import StepReporter
from .util import diff_dict
from .verify import grad_check, invert_check, random_batch

log = logging.getLogger("cli")

METRICS_COLUMNS = ('step', 'loss', 'val_loss', 'tokens_per_sec', 'activations_stored')
GRID_AGREEMENT = 0.99

USAGE_ERRORS = (
    NoConfigFoundError, InvalidConfigError, CorpusError, CheckpointError, ShapeError,
    DTypeError, TokenRangeError, NotInvertibleError,
)
RUN_ERRORS = (NonFiniteError, ReconstructionError, DivergenceError, CarrierMismatchError)


class Failure(Exception):
    """A verification command found a failing check."""


def complex_value(text):
    """Parses numbers like ``-0.5``, ``2i`` or ``0+2i``."""
    try:
        return complex(text.strip().replace('i', 'j'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a complex number") from None


def int_list(text):
    try:
        values = [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a comma separated list of integers") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def kind_list(text):
    kinds = [v.strip() for v in text.split(',') if v.strip()]
    unknown = [k for k in kinds if k not in BLOCK_KINDS]
    if unknown or not kinds:
        raise argparse.ArgumentTypeError(
            f"unknown block kind(s) {', '.join(unknown)} (use {', '.join(BLOCK_KINDS)})"
        )
    return kinds


class CommandSession:
    """Runs one subcommand; the parsed arguments are available as ``self.args``."""

    def __init__(self, args):
        self.args = args

    def overrides(self, **extra):
        """Command line flags that replace values from the defaults and the config file."""
        args = self.args
        options = {
            'data': getattr(args, 'data', None),
            'out': getattr(args, 'out', None),
            'block_kind': getattr(args, 'block', None),
            'seed': getattr(args, 'seed', None),
            'dtype': getattr(args, 'dtype', None),
        }
        options.update(extra)
        return options

    def run_config(self, **extra):
        return load_run_config(self.args.config, self.overrides(**extra))

    # train

    def _check_corpus(self, corpus, seq_len):
        for part, ids in (('training', corpus.train), ('validation', corpus.val)):
            if len(ids) < seq_len + 1:
                raise CorpusError(
                    f"{part} split has {len(ids)} tokens, sequences of length {seq_len} need "
                    f"at least {seq_len + 1}"
                )

    def _val_loss(self, model, corpus, run, forward):
        rng = Rng(run.seed, (8,))
        losses = []
        for i in range(run.eval_batches):
            x, y = sample_batch(corpus.val, run.batch_size, run.context_length, rng.child(i))
            losses.append(cross_entropy(forward(x, model).logits, y)[0])
        return float(np.mean(losses))

    def train(self):
        args = self.args
        if args.resume:
            state = restore(checkpoint.load(args.resume))
            changes = {k: v for k, v in self.overrides(max_steps=args.steps).items()
                       if v is not None and k in ('data', 'out', 'max_steps')}
            run = attr.evolve(state.run_config, **changes)
            for key, old, new in diff_dict(attr.asdict(state.run_config), attr.asdict(run)):
                log.info("resume: %s changed from %r to %r", key, old, new)
            if state.optimizer is None:
                raise CheckpointError(f"checkpoint {args.resume} holds no optimizer state")
            state.optimizer.config = run.optim_config()
        else:
            run = self.run_config(max_steps=args.steps)
            state = None
        if not run.data:
            raise InvalidConfigError("no corpus given (use --data or run.data in the config file)")

        # the corpus is checked before anything is written
        tokenizer = state.tokenizer if state is not None else run.tokenizer
        corpus = load_corpus(run.data, tokenizer, run.val_fraction)
        self._check_corpus(corpus, run.context_length)

        if state is None:
            model = init_model(run.model_config(corpus.vocab_size), run.seed)
            state = TrainingState(run, model, corpus.tokenizer, AdamWState(run.optim_config()))
        else:
            state.run_config = run
            if state.model.config.vocab_size != corpus.vocab_size:
                raise CorpusError("corpus vocabulary does not match the checkpoint")

        os.makedirs(run.out, exist_ok=True)
        with open(os.path.join(run.out, 'config.txt'), 'w') as f:
            f.write(run.to_text())

        metrics_path = os.path.join(run.out, 'metrics.csv')
        append = state.step > 0 and os.path.exists(metrics_path)
        forward, _ = engine_for(state.model, run.engine)
        batch_rng = Rng(run.seed, (7,))
        log.info("training %s model with %d parameters for %d steps", run.block_kind,
                 state.model.parameter_count(), run.max_steps - state.step)
        with open(metrics_path, 'a' if append else 'w', newline='') as f:
            writer = csv.writer(f)
            if not append:
                writer.writerow(METRICS_COLUMNS)
            while state.step < run.max_steps:
                x, y = sample_batch(corpus.train, run.batch_size, run.context_length,
                                    batch_rng.child(state.step))
                start = time.monotonic()
                result = train_step(x, y, state.model, state.optimizer, run.engine)
                elapsed = time.monotonic() - start
                state.model = result.model
                state.step += 1
                val_loss = ''
                if (run.eval_interval and state.step % run.eval_interval == 0) or state.step == run.max_steps:
                    val_loss = repr(self._val_loss(state.model, corpus, run, forward))
                writer.writerow([state.step, repr(result.loss), val_loss,
                                 f"{x.size / max(elapsed, 1e-9):.1f}",
                                 result.ledger.tensors_stored])
                f.flush()
                if run.log_interval and state.step % run.log_interval == 0:
                    log.info("step %d: loss %.4f, grad norm %.3f", state.step, result.loss,
                             result.grad_norm)
                if run.checkpoint_interval and state.step % run.checkpoint_interval == 0:
                    checkpoint.save(os.path.join(run.out, f"checkpoint-{state.step}.rvlm"),
                                    capture(state))
        checkpoint.save(os.path.join(run.out, 'checkpoint.rvlm'), capture(state))

    # eval

    def evaluate(self):
        args = self.args
        state = restore(checkpoint.load(args.checkpoint))
        run = state.run_config
        data = args.data or run.data
        if not data:
            raise InvalidConfigError("no corpus given (use --data)")
        corpus = load_corpus(data, state.tokenizer, run.val_fraction)
        self._check_corpus(corpus, run.context_length)
        forward, _ = engine_for(state.model, run.engine)
        loss = self._val_loss(state.model, corpus, run, forward)
        print(f"step={state.step}")
        print(f"val_loss={loss!r}")
        print(f"perplexity={math.exp(loss)!r}")
        if args.sample_length:
            prompt = corpus.val[:min(8, len(corpus.val))]
            ids = generate(state.model, prompt, args.sample_length, args.temperature,
                           Rng(run.seed, (9,)))
            print(f"sample={state.tokenizer.decode(ids)!r}")

    # verification suites

    def _check_model(self):
        args = self.args
        if args.checkpoint:
            return restore(checkpoint.load(args.checkpoint)).model, args.seed or 0
        extra = {'dtype': args.dtype or 'float64', 'width': args.width, 'layers': args.layers,
                 'heads': args.heads, 'context_length': args.seq_len, 'init_std': args.init_std}
        run = self.run_config(**extra)
        return init_model(run.model_config(args.vocab), run.seed), run.seed

    def grad_check(self):
        args = self.args
        model, seed = self._check_model()
        tokens, targets = random_batch(model, args.seq_len, args.batch_size, seed)
        report = grad_check(model, tokens, targets, fd_entries=args.fd_entries, seed=seed,
                            tolerance=args.tolerance)
        print(report.format())
        if not report.passed:
            raise Failure(f"{len(report.failures())} gradient check(s) failed")

    def invert_check(self):
        args = self.args
        model, seed = self._check_model()
        tokens, _ = random_batch(model, args.seq_len, args.batch_size, seed)
        report = invert_check(model, tokens, tolerance=args.tolerance, corrupt=args.corrupt)
        print(report.format())
        if not report.passed:
            layers = sorted({c.layer for c in report.failures() if c.layer is not None})
            where = f" at layer(s) {', '.join(map(str, layers))}" if layers else ""
            raise Failure(f"reconstruction check failed{where}")

    # stability

    def stability(self):
        args = self.args
        if args.grid:
            self._stability_grid()
        elif args.moments:
            if args.hlambda.imag != 0:
                raise InvalidConfigError("--moments needs a real --hlambda")
            report = midpoint_a_moments(args.trials, args.layers, args.hlambda.real,
                                        Rng(args.seed or 0))
            print(f"max_z={report.max_z!r}")
            print(f"var_a={report.a_variance!r}")
            print(f"var_a_asserted={A_VARIANCE_ASSERTED!r}")
            print(f"conditional_variance={report.conditional_variance!r}")
            print(f"predicted_variance={report.predicted_variance!r}")
            print(f"variance_rel_error={report.variance_rel_error!r}")
        elif args.queries:
            fraction, compared = hamiltonian_agreement(
                sample_hamiltonian_queries(Rng(args.seed or 0), args.queries))
            print(f"compared={compared}")
            print(f"agreement={fraction!r}")
            if fraction < 1.0:
                raise Failure("eigenvalue classification and closed-form predicate disagree")
        elif args.hamiltonian:
            q = HamiltonianLinearQuery(args.a, args.b, args.alpha, args.beta)
            report = hamiltonian_linear_stability(q)
            _print_report(report)
            print(f"predicate={'stable' if report.predicate else 'unstable'}")
        else:
            q = StabilityQuery(args.a, args.b, args.hlambda)
            report = char_roots(q)
            _print_report(report)
            print(f"condition={'stable' if stability_condition(q) else 'unstable'}")

    def _stability_grid(self):
        args = self.args
        sweep = grid_sweep(n_steps=args.n_steps, **default_grid())
        if args.csv:
            write_grid_csv(args.csv, sweep)
        else:
            writer = csv.DictWriter(sys.stdout, fieldnames=GRID_COLUMNS)
            writer.writeheader()
            for row in sweep.rows():
                writer.writerow(row)
        agreement = sweep.agreement()
        print(f"points={len(sweep.a)} compared={int(sweep.comparable.sum())} "
              f"agreement={agreement:.6f}", file=sys.stderr)
        if agreement < GRID_AGREEMENT:
            raise Failure(f"grid agreement {agreement:.4f} is below {GRID_AGREEMENT}")

    # retrofit

    def retrofit(self):
        args = self.args
        state = restore(checkpoint.load(args.checkpoint))
        teacher_run = state.run_config
        changes = {k: v for k, v in {
            'retrofit_k': args.k, 'a_mode': args.a_mode, 'kl_steps': args.kl_steps,
            'retrofit_skip': args.skip, 'a_seed': args.a_seed, 'out': args.out,
            'data': args.data, 'seed': args.seed,
        }.items() if v is not None}
        run = attr.evolve(teacher_run, **changes)
        if not run.data:
            raise InvalidConfigError("no corpus given (use --data)")
        corpus = load_corpus(run.data, state.tokenizer, run.val_fraction)
        self._check_corpus(corpus, run.context_length)

        config = run.retrofit_config()
        student = convert(state.model, config)
        student, report = kl_finetune(state.model, student, corpus, config, seed=run.seed)

        os.makedirs(run.out, exist_ok=True)
        write_report_csv(os.path.join(run.out, 'retrofit.csv'), report)
        write_report_summary(os.path.join(run.out, 'retrofit.txt'), report)
        student_run = attr.evolve(run, block_kind='retrofit')
        checkpoint.save(os.path.join(run.out, 'student.rvlm'),
                        capture(TrainingState(student_run, student, state.tokenizer)))
        print(report_summary(report), end='')

    # bench

    def bench(self):
        args = self.args
        rows = run_bench(args.depths, args.blocks, width=args.width, heads=args.heads,
                         seq_len=args.seq_len, budget_bytes=args.budget_bytes,
                         dtype=args.dtype or 'float32', seed=args.seed or 0,
                         repeats=args.repeats)
        print(format_table(rows))
        if args.csv:
            write_bench_csv(args.csv, rows)


def _print_report(report):
    for i, (root, modulus) in enumerate(zip(report.roots, report.moduli), start=1):
        print(f"r{i}={root.real:.12g}{root.imag:+.12g}i |r{i}|={modulus:.12g}")
    print(f"verdict={report.verdict}")


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', type=str, default=os.environ.get("REVLM_CONFIG"),
                        help="YAML configuration file")
    common.add_argument('--data', type=str, help="UTF-8 text corpus")
    common.add_argument('--out', type=str, help="output directory")
    common.add_argument('--block', type=str, choices=BLOCK_KINDS, help="block kind")
    common.add_argument('--seed', type=int, help="random seed (default: $REVLM_SEED or 0)")
    common.add_argument('--dtype', type=str, choices=tuple(DTYPES), help="tensor dtype")
    return common


def _check_parser(subparsers, name, help, func, common):
    subparser = subparsers.add_parser(name, help=help, parents=[common])
    subparser.add_argument('--checkpoint', type=str, help="check this model instead of a random one")
    subparser.add_argument('--width', type=int, default=16)
    subparser.add_argument('--heads', type=int, default=2)
    subparser.add_argument('--layers', type=int, default=4)
    subparser.add_argument('--vocab', type=int, default=16)
    subparser.add_argument('--init-std', type=float, default=0.2)
    subparser.add_argument('--seq-len', type=int, default=16)
    subparser.add_argument('--batch-size', type=int, default=2)
    subparser.add_argument('--tolerance', type=float, help="override the dtype's tolerance")
    subparser.set_defaults(func=func)
    return subparser


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='revlm')
    parser.add_argument(
        '-d',
        '--debug',
        action='store_true',
        default=False,
        help="enable debug mode (show python tracebacks)"
    )
    parser.add_argument(
        '-v',
        '--verbose',
        action='count',
        default=0,
        help="report finished steps (twice: debug logging)"
    )
    subparsers = parser.add_subparsers(
        dest='command',
        title='available subcommands',
        metavar="COMMAND",
    )

    subparser = subparsers.add_parser('train', help="train a model on a text corpus",
                                      parents=[common])
    subparser.add_argument('--steps', type=int, help="total number of optimizer steps")
    subparser.add_argument('--resume', type=str, metavar='CHECKPOINT',
                           help="continue the run stored in this checkpoint")
    subparser.set_defaults(func=CommandSession.train)

    subparser = subparsers.add_parser('eval', help="validation loss and a sample of a checkpoint",
                                      parents=[common])
    subparser.add_argument('--checkpoint', type=str, required=True)
    subparser.add_argument('--sample-length', type=int, default=64,
                           help="number of generated tokens, 0 disables sampling")
    subparser.add_argument('--temperature', type=float, default=0.0)
    subparser.set_defaults(func=CommandSession.evaluate)

    subparser = _check_parser(subparsers, 'grad-check',
                              "compare reversible, stored and finite-difference gradients",
                              CommandSession.grad_check, common)
    subparser.add_argument('--fd-entries', type=int, default=2,
                           help="finite-difference checks per tensor (float64 only)")

    subparser = _check_parser(subparsers, 'invert-check',
                              "compare reconstructed states with a stored forward pass",
                              CommandSession.invert_check, common)
    subparser.add_argument('--corrupt', type=float,
                           help="perturb the final carrier by this relative amount")

    subparser = subparsers.add_parser('stability', help="linear stability of the update rules",
                                      parents=[common])
    subparser.add_argument('--a', type=float, default=1.0)
    subparser.add_argument('--b', type=float, default=0.0)
    subparser.add_argument('--hlambda', type=complex_value, default=0j,
                           help="h·λ, e.g. -0.5 or 0+2i")
    subparser.add_argument('--alpha', type=float, default=0.0)
    subparser.add_argument('--beta', type=float, default=0.0)
    mode = subparser.add_mutually_exclusive_group()
    mode.add_argument('--grid', action='store_true', help="sweep the default grid")
    mode.add_argument('--hamiltonian', action='store_true',
                      help="classify the staggered update given by --a --b --alpha --beta")
    mode.add_argument('--queries', type=int, help="compare predicate and eigenvalues on random queries")
    mode.add_argument('--moments', action='store_true',
                      help="Monte Carlo moments of the random-coefficient midpoint rule")
    subparser.add_argument('--n-steps', type=int, default=20000)
    subparser.add_argument('--trials', type=int, default=100000)
    subparser.add_argument('--layers', type=int, default=8)
    subparser.add_argument('--csv', type=str, help="write the grid to this file")
    subparser.set_defaults(func=CommandSession.stability)

    subparser = subparsers.add_parser('retrofit', help="convert a baseline model and fine-tune it",
                                      parents=[common])
    subparser.add_argument('--checkpoint', type=str, required=True, help="baseline teacher")
    subparser.add_argument('--k', type=int, help="fixed point iterations")
    subparser.add_argument('--a-mode', type=str, choices=A_MODES)
    subparser.add_argument('--a-seed', type=int)
    subparser.add_argument('--skip', type=str, choices=('carrier', 'estimate'))
    subparser.add_argument('--kl-steps', type=int)
    subparser.set_defaults(func=CommandSession.retrofit)

    subparser = subparsers.add_parser('bench', help="activation memory and step time by depth",
                                      parents=[common])
    subparser.add_argument('--depths', type=int_list, default=[2, 4, 8, 16, 32])
    subparser.add_argument('--blocks', type=kind_list, default=['baseline'] + list(REVERSIBLE_KINDS))
    subparser.add_argument('--width', type=int, default=64)
    subparser.add_argument('--heads', type=int, default=4)
    subparser.add_argument('--seq-len', type=int, default=64)
    subparser.add_argument('--budget-bytes', type=int, default=2**30)
    subparser.add_argument('--repeats', type=int, default=1)
    subparser.add_argument('--csv', type=str, help="also write the table to this file")
    subparser.set_defaults(func=CommandSession.bench)

    return parser


def _report(args, prog, e):
    if args.debug:
        traceback.print_exc()
    else:
        print(f"{prog}: error: {getattr(e, 'msg', None) or e}", file=sys.stderr)


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO,
        format='%(levelname)7s %(name)-20s %(message)s',
        stream=sys.stderr,
    )

    parser = build_parser()
    args = parser.parse_args(argv)

    if args.debug or args.verbose > 1:
        logging.getLogger().setLevel(logging.DEBUG)

    if not args.command:
        parser.print_help()
        sys.exit(2)

    if args.verbose:
        StepReporter.start()
    exitcode = 0
    try:
        args.func(CommandSession(args))
    except Failure as e:
        print(f"{parser.prog}: {e}", file=sys.stderr)
        exitcode = 1
    except RUN_ERRORS as e:
        _report(args, parser.prog, e)
        exitcode = 1
    except USAGE_ERRORS as e:
        _report(args, parser.prog, e)
        exitcode = 2
    except OSError as e:
        _report(args, parser.prog, e)
        exitcode = 2
    except KeyboardInterrupt:
        exitcode = 1
    except Exception:  # pylint: disable=broad-except
        traceback.print_exc()
        exitcode = 2
    finally:
        if args.verbose:
            StepReporter.stop()
    sys.exit(exitcode)


if __name__ == "__main__":
    main()
