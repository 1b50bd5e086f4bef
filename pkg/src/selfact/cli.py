"""``selfact`` command line: pretrain, run (one session) and eval (LOSO sweep).

Exit codes: 0 success, 1 usage or configuration, 2 data, 3 pipeline.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import clusterstore as cs
from . import config as cfgmod
from . import dataset as ds
from . import harness, params
from .encoder import ConvBackend, EncoderModel, StatisticalBackend, pretrain
from .errors import ConfigError, DataError, PipelineError, SelfActError
from .finetune import fine_tune
from .metrics import al_rate, weighted_f1
from .session import Session

OUT_ENV = "SELFACT_OUT"
DEFAULT_OUT = "selfact-out"

log = logging.getLogger("selfact")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help=f"{out_help} (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--seed", type=int, help="root seed (key: seed)")
    p.add_argument("--jobs", type=int, help="parallel folds (key: jobs)")
    p.add_argument("--thresholds", help="comma-separated accumulation thresholds (key: eval.thresholds)")
    p.add_argument("--backend", choices=("statistical", "conv"), help="encoder backend (key: session.backend)")
    p.add_argument("--acc-th", help="accumulation threshold for run: count or fraction (key: session.acc_th)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration keys and defaults:\n" + cfgmod.render_defaults() + \
        f"\n\nenvironment: {OUT_ENV} sets the default output location.\n" \
        "exit codes: 0 success, 1 usage/config error, 2 data error, 3 pipeline error."
    parser = _Parser(prog="selfact", description="Self-supervised activity recognition with density-triggered "
                     "active learning, replayed over recorded or synthetic data.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="{pretrain,run,eval}", parser_class=_Parser)
    sub.required = True
    p = sub.add_parser("pretrain", help="contrastive pre-training of the conv encoder on all configured data",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p, "model file to write")
    p = sub.add_parser("run", help="replay one labelled stream through a session and fine-tune",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p, "output directory")
    p.add_argument("--model", help="pre-trained encoder (required for the conv backend)")
    p.add_argument("--stream", help="single-user CSV stream; default: first configured user")
    p = sub.add_parser("eval", help="leave-one-subject-out sweep over accumulation thresholds",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p, "report directory")
    return parser


def _values(args) -> dict:
    file_values = cfgmod.read_file(args.config) if args.config else {}
    overrides = cfgmod.parse_overrides(args.set)
    for flag, key in (("seed", "seed"), ("jobs", "jobs"), ("thresholds", "eval.thresholds"),
                      ("backend", "session.backend"), ("acc_th", "session.acc_th")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = str(val)
    return cfgmod.resolve(file_values, overrides)


def _out(args, default_name: str = "") -> Path:
    if args.out:
        return Path(args.out)
    base = Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)
    return base / default_name if default_name else base


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise PipelineError(f"cannot write {path}: {exc.strerror or exc}") from None


def _created() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_pretrain(args) -> int:
    values = _values(args)
    config = cfgmod.build_experiment(values)
    out = _out(args, "encoder.params")
    recs = harness.load_recordings(config, require_labels=False)
    windows = [w for r in recs for w in ds.segment(r, config.data.window_len, config.data.overlap)]
    if not windows:
        raise DataError(f"no complete window of {config.data.window_len} samples in the configured data")
    pcfg = dataclasses.replace(config.pretrain, seed=harness.derive_seed(config.seed, "pretrain"))
    t0 = time.perf_counter()
    model = pretrain(windows, pcfg)
    wall = time.perf_counter() - t0
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        model.save(out)
    except OSError as exc:
        raise PipelineError(f"cannot write {out}: {exc.strerror or exc}") from None
    print(f"final loss {model.loss_history[-1]:.6f} after {len(model.loss_history)} epochs on "
          f"{len(windows)} windows; wall time {wall:.2f} s")
    print(f"model {out} hash {params.param_hash(model.state_dict())}")
    return 0


def _stream_recording(args, config) -> ds.Recording:
    if args.stream:
        recs = ds.load_csv(args.stream, config.data)
        if len(recs) != 1:
            raise DataError(f"{args.stream}: stream must hold exactly one user, found {len(recs)}")
        return recs[0]
    recs = harness.load_recordings(config, require_labels=False)
    return recs[0]


def cmd_run(args) -> int:
    values = _values(args)
    config = cfgmod.build_experiment(values)
    out = _out(args)
    if config.session.backend == "conv":
        if not args.model:
            raise ConfigError("the conv backend needs --model (see `selfact pretrain`)")
        backend = ConvBackend(EncoderModel.load(args.model))
    else:
        if args.model:
            log.warning("--model ignored by the statistical backend")
        backend = StatisticalBackend()
    rec = _stream_recording(args, config)
    windows = ds.segment(rec, config.data.window_len, config.data.overlap)
    acc_th = cfgmod.resolve_acc_th(values["session.acc_th"], len(windows))
    scfg = dataclasses.replace(config.session, acc_th=acc_th)
    session = Session(scfg, backend)
    t0 = time.perf_counter()
    for w in windows:
        session.process_sample(w)
    if session.store is None:
        raise PipelineError(f"accumulation never completed: stream has {len(windows)} windows, acc_th is {acc_th}")
    outcome = session.finish()
    session_time = time.perf_counter() - t0

    _write(out / "trace.csv", "\n".join(session.trace_lines()) + "\n")
    _write(out / "points.csv", "\n".join(session.point_lines()) + "\n")
    _write(out / "store.txt", session.store.dump())
    labeled = ["seq,user,start_index,label"]
    for ev in session.events:
        if ev.queried:
            labeled.append(f"{ev.seq},{ev.window.user_id},{ev.window.start_index},{ev.label}")
    _write(out / "labeled.csv", "\n".join(labeled) + "\n")

    rate = al_rate(outcome.queries_issued, outcome.stream_samples_in_al_phase)
    summary = [f"run.created = {_created()}",
               f"run.config_hash = {config.config_hash()}",
               f"run.backend = {backend.name}",
               f"run.user = {rec.user_id}",
               f"run.windows = {len(windows)}",
               f"run.acc_th = {acc_th}",
               f"run.eps = {session.eps!r}",
               f"run.clusters = {session.cluster_count}",
               f"run.noise = {session.store.noise_count}",
               f"run.queries = {outcome.queries_issued}",
               f"run.al_stream_len = {outcome.stream_samples_in_al_phase}",
               f"run.al_rate = {rate!r}"]
    if not outcome.labeled_samples:
        _write(out / "summary.txt", "\n".join(summary) + "\n")
        raise PipelineError("no active-learning queries; nothing to fine-tune on")
    fcfg = dataclasses.replace(config.finetune, seed=harness.derive_seed(config.seed, "finetune", rec.user_id))
    try:
        clf = fine_tune(backend, outcome.labeled_samples, fcfg)
    except PipelineError as exc:
        log.warning("validation disabled: %s", exc)
        clf = fine_tune(backend, outcome.labeled_samples, dataclasses.replace(fcfg, validation_fraction=0.0))
    try:
        clf.save(out / "classifier.params")
    except OSError as exc:
        raise PipelineError(f"cannot write {out / 'classifier.params'}: {exc.strerror or exc}") from None
    summary += [f"run.labels = {','.join(clf.labels)}",
                f"run.finetune_epochs = {clf.history['epochs_run']}"]
    queried = {ev.seq for ev in session.events if ev.queried}
    rest = [w for i, w in enumerate(windows) if i + 1 not in queried and w.oracle_label is not None]
    if rest:
        preds = [lab for lab, _ in clf.predict_batch(rest)]
        f1 = weighted_f1(preds, [w.oracle_label for w in rest])
        summary.append(f"run.f1 = {f1!r}")
    _write(out / "summary.txt", "\n".join(summary) + "\n")
    print(f"{len(windows)} windows, {session.cluster_count} clusters, {outcome.queries_issued} queries "
          f"(al_rate {rate:.3f}), session {session_time:.2f} s; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    values = _values(args)
    config = cfgmod.build_experiment(values)
    out = _out(args)
    t0 = time.perf_counter()
    report = harness.run_loso(config, jobs=values["jobs"])
    harness.emit_report(report, out)
    for thr, avg in report.averages.items():
        print(f"threshold {thr:g}: mean F1 {avg['f1']:.4f}, al_rate {avg['al_rate']:.4f}, "
              f"clusters {avg['clusters']:.2f}, folds {avg['folds']}")
    print(f"backend {config.session.backend}; report in {out}; wall time {time.perf_counter() - t0:.2f} s")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "run": cmd_run, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SelfActError as exc:
        print(f"selfact {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"selfact {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code


def console() -> None:
    sys.exit(main())
