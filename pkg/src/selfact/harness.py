"""Leave-one-subject-out replay of labelled recordings through full sessions."""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataset as ds
from .encoder import ConvBackend, PretrainConfig, StatisticalBackend, pretrain
from .errors import ConfigError, DataError, PipelineError
from .finetune import FineTuneConfig, fine_tune
from .metrics import al_rate, per_class_f1, weighted_f1
from .session import Session, SessionConfig

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.50, 0.75, 0.90, 0.95)


def derive_seed(root: int, *names) -> int:
    """Stable sub-seed for a named component; independent of other components."""
    key = "/".join([str(int(root))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class SynthSpec:
    users: int = 3
    activities: int = 4
    windows_per_activity: int = 50
    noise_std: float = 0.3
    sample_rate: float = 50.0
    rounds: int = 8
    wobble_std: float = 0.4
    posture_std: float = 0.5
    names: tuple = ()  # built-in patterns by name; empty takes the first ``activities``

    def __post_init__(self):
        known = [a.name for a in ds.DEFAULT_ACTIVITIES]
        if self.names:
            unknown = [n for n in self.names if n not in known]
            if unknown:
                raise ConfigError(f"unknown synthetic activity {unknown[0]!r}; known: {', '.join(known)}")
            if len(set(self.names)) != len(self.names) or len(self.names) < 2:
                raise ConfigError("synth names must list at least 2 distinct activities")
        elif not 2 <= self.activities <= len(known):
            raise ConfigError(f"synth activities must lie in [2, {len(known)}]")

    def patterns(self) -> tuple:
        if self.names:
            by_name = {a.name: a for a in ds.DEFAULT_ACTIVITIES}
            return tuple(by_name[n] for n in self.names)
        return ds.DEFAULT_ACTIVITIES[:self.activities]


@dataclass(frozen=True)
class ExperimentConfig:
    data: ds.DatasetSpec = ds.DatasetSpec()
    session: SessionConfig = SessionConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FineTuneConfig = FineTuneConfig()
    thresholds: tuple = DEFAULT_THRESHOLDS
    seed: int = 0
    source: str = "synth"
    csv_paths: tuple = ()
    synth: SynthSpec = SynthSpec()

    def __post_init__(self):
        for t in self.thresholds:
            if not 0 < t < 1:
                raise ConfigError(f"accumulation threshold {t} must lie strictly within (0, 1)")
        if self.source not in ("synth", "csv"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.csv_paths:
            raise ConfigError("data.source=csv needs data.paths")

    def config_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FoldResult:
    user: str
    threshold: float
    status: str = "ok"  # ok | skipped
    note: str = ""
    acc_th: int = 0
    n_windows: int = 0
    cluster_count: int = 0
    queries: int = 0
    al_stream_len: int = 0
    al_rate: float = 0.0
    weighted_f1: float = 0.0
    per_class: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)
    trace: list = field(default_factory=list, repr=False)
    eval_seqs: list = field(default_factory=list, repr=False)
    labeled_seqs: list = field(default_factory=list, repr=False)


@dataclass
class Report:
    folds: list
    averages: dict  # threshold -> {"f1", "al_rate", "clusters", "queries", "folds"}
    metadata: dict


def load_recordings(config: ExperimentConfig, require_labels: bool = True) -> list[ds.Recording]:
    if config.source == "csv":
        recs = ds.load_many(config.csv_paths, config.data)
    else:
        s = config.synth
        recs = ds.synth_generate(s.users, s.patterns(), s.windows_per_activity,
                                 s.noise_std, derive_seed(config.seed, "synth"), config.data.window_len,
                                 s.sample_rate, s.rounds, wobble_std=s.wobble_std,
                                 posture_std=s.posture_std)
    if require_labels and any(r.labels is None for r in recs):
        raise DataError("leave-one-subject-out evaluation needs labelled recordings")
    return recs


def _run_user(config: ExperimentConfig, windows_by_user: dict, user: str) -> list[FoldResult]:
    test = windows_by_user[user]
    results = []
    t0 = time.perf_counter()
    if config.session.backend == "conv":
        train = [w for u, ws in windows_by_user.items() if u != user for w in ws]
        pcfg = dataclasses.replace(config.pretrain, seed=derive_seed(config.seed, "pretrain", user))
        backend = ConvBackend(pretrain(train, pcfg))
    else:
        backend = StatisticalBackend()
    pretrain_time = time.perf_counter() - t0
    for thr in config.thresholds:
        res = FoldResult(user, thr, n_windows=len(test))
        res.runtimes["pretrain"] = pretrain_time
        results.append(res)
        acc_th = int(math.floor(thr * len(test)))
        res.acc_th = acc_th
        min_acc = max(config.session.out_dim + 1, 1)
        if acc_th < min_acc or acc_th >= len(test):
            res.status, res.note = "skipped", f"test stream of {len(test)} windows too short for threshold {thr}"
            continue
        scfg = dataclasses.replace(config.session, acc_th=acc_th)
        session = Session(scfg, backend)
        t1 = time.perf_counter()
        try:
            for w in test:
                session.process_sample(w)
        except PipelineError as exc:
            res.status, res.note = "skipped", str(exc)
            continue
        outcome = session.finish()
        res.runtimes["session"] = time.perf_counter() - t1
        res.cluster_count = session.cluster_count
        res.queries = outcome.queries_issued
        res.al_stream_len = outcome.stream_samples_in_al_phase
        res.al_rate = al_rate(res.queries, res.al_stream_len)
        res.trace = session.trace_lines()
        if not outcome.labeled_samples:
            res.status, res.note = "skipped", "no active-learning queries; nothing to fine-tune on"
            continue
        fcfg = dataclasses.replace(config.finetune, seed=derive_seed(config.seed, "finetune", user, thr))
        t2 = time.perf_counter()
        try:
            clf = fine_tune(backend, outcome.labeled_samples, fcfg)
        except PipelineError as exc:
            # too few labelled samples for a validation split
            clf = fine_tune(backend, outcome.labeled_samples, dataclasses.replace(fcfg, validation_fraction=0.0))
            res.note = f"validation disabled: {exc}"
        res.runtimes["finetune"] = time.perf_counter() - t2
        queried = {ev.seq for ev in session.events if ev.queried}
        res.labeled_seqs = sorted(queried)
        eval_idx = [i for i in range(len(test)) if i + 1 not in queried]
        res.eval_seqs = [i + 1 for i in eval_idx]
        t3 = time.perf_counter()
        preds = [lab for lab, _ in clf.predict_batch([test[i] for i in eval_idx])]
        truths = [test[i].oracle_label for i in eval_idx]
        res.runtimes["evaluate"] = time.perf_counter() - t3
        res.weighted_f1 = weighted_f1(preds, truths)
        res.per_class = per_class_f1(preds, truths)
    return results


def _averages(folds: Sequence[FoldResult], thresholds) -> dict:
    out = {}
    for thr in thresholds:
        ok = [f for f in folds if f.threshold == thr and f.status == "ok"]
        if not ok:
            out[thr] = {"f1": float("nan"), "al_rate": float("nan"), "clusters": float("nan"),
                        "queries": float("nan"), "folds": 0}
            continue
        out[thr] = {
            "f1": float(np.mean([f.weighted_f1 for f in ok])),
            "al_rate": float(np.mean([f.al_rate for f in ok])),
            "clusters": float(np.mean([f.cluster_count for f in ok])),
            "queries": float(np.mean([f.queries for f in ok])),
            "folds": len(ok),
        }
    return out


def run_loso(config: ExperimentConfig, recordings: Optional[Sequence[ds.Recording]] = None,
             jobs: int = 1) -> Report:
    """Hold out each user once; sweep every accumulation threshold per held-out user."""
    if recordings is None:
        recordings = load_recordings(config)
    if len(recordings) < 2:
        raise DataError(f"leave-one-subject-out needs at least 2 users, got {len(recordings)}")
    windows_by_user = {r.user_id: ds.segment(r, config.data.window_len, config.data.overlap) for r in recordings}
    users = sorted(windows_by_user)
    if jobs > 1 and len(users) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_user, [config] * len(users), [windows_by_user] * len(users), users))
    else:
        parts = [_run_user(config, windows_by_user, u) for u in users]
    folds = [f for part in parts for f in part]
    metadata = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "backend": config.session.backend,
        "thresholds": list(config.thresholds),
        "users": users,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    return Report(folds, _averages(folds, config.thresholds), metadata)


# ---------------------------------------------------------------- output


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.10g}"
    return str(x)


def summary_text(report: Report) -> str:
    m = report.metadata
    lines = ["# selfact leave-one-subject-out report",
             f"meta.created = {m.get('created', '')}",
             f"meta.config_hash = {m.get('config_hash', '')}",
             f"meta.seed = {m.get('seed', '')}",
             f"meta.backend = {m.get('backend', '')}",
             f"meta.thresholds = {','.join(_fmt(float(t)) for t in m.get('thresholds', []))}",
             f"meta.folds = {len(report.folds)}"]
    for f in report.folds:
        lines += ["", "[fold]",
                  f"fold.user = {f.user}",
                  f"fold.threshold = {_fmt(float(f.threshold))}",
                  f"fold.status = {f.status}",
                  f"fold.acc_th = {f.acc_th}",
                  f"fold.f1 = {_fmt(float(f.weighted_f1))}",
                  f"fold.al_rate = {_fmt(float(f.al_rate))}",
                  f"fold.clusters = {f.cluster_count}",
                  f"fold.queries = {f.queries}",
                  f"fold.note = {f.note}"]
    for thr, avg in report.averages.items():
        lines += ["", "[mean]",
                  f"mean.threshold = {_fmt(float(thr))}",
                  f"mean.f1 = {_fmt(avg['f1'])}",
                  f"mean.al_rate = {_fmt(avg['al_rate'])}",
                  f"mean.clusters = {_fmt(avg['clusters'])}",
                  f"mean.queries = {_fmt(avg['queries'])}",
                  f"mean.folds = {avg['folds']}"]
    return "\n".join(lines) + "\n"


def _svg_plot(title: str, ylabel: str, xs, ys) -> str:
    w, h, left, right, top, bottom = 480, 320, 60, 20, 40, 50
    pw, ph = w - left - right, h - top - bottom
    pts = [(x, y) for x, y in zip(xs, ys) if not math.isnan(y)]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 0.05, x1 + 0.05
    yv = [y for _, y in pts] or [0.0]
    y0, y1 = min(0.0, min(yv)), max(yv)
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left + pw / 2:.1f}" y="{h - 10}" text-anchor="middle" font-size="12">accumulation threshold</text>',
           f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 15 {top + ph / 2:.1f})">{ylabel}</text>']
    for x in xs:
        out.append(f'<text x="{sx(x):.2f}" y="{top + ph + 18}" text-anchor="middle" font-size="10">{x:g}</text>')
    for frac in (0.0, 0.5, 1.0):
        y = y0 + frac * (y1 - y0)
        out.append(f'<text x="{left - 6}" y="{sy(y) + 4:.2f}" text-anchor="end" font-size="10">{y:.3g}</text>')
    if pts:
        poly = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>')
        for x, y in pts:
            out.append(f'<circle class="point" cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="steelblue">'
                       f'<title>{x:g}: {y:.6g}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


PLOTS = (("f1_vs_threshold.svg", "Weighted F1", "f1"),
         ("clusters_vs_threshold.svg", "Clusters found", "clusters"),
         ("al_rate_vs_threshold.svg", "Active learning rate", "al_rate"))


def emit_report(report: Report, out_dir) -> list[Path]:
    """Write summary.txt, folds.csv, per_class.csv, timings.csv, traces/ and one SVG per metric."""
    out = Path(out_dir)
    written = []

    def put(name, text):
        p = out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        written.append(p)

    try:
        out.mkdir(parents=True, exist_ok=True)
        put("summary.txt", summary_text(report))
        rows = ["user,threshold,status,acc_th,n_windows,clusters,queries,al_stream_len,al_rate,f1"]
        pc = ["user,threshold,label,f1,support"]
        tm = ["user,threshold,stage,seconds"]
        for f in report.folds:
            rows.append(",".join([f.user, _fmt(float(f.threshold)), f.status, str(f.acc_th), str(f.n_windows),
                                  str(f.cluster_count), str(f.queries), str(f.al_stream_len),
                                  _fmt(float(f.al_rate)), _fmt(float(f.weighted_f1))]))
            for label, (f1, support) in sorted(f.per_class.items()):
                pc.append(f"{f.user},{_fmt(float(f.threshold))},{label},{_fmt(float(f1))},{support}")
            for stage, secs in f.runtimes.items():
                tm.append(f"{f.user},{_fmt(float(f.threshold))},{stage},{secs:.4f}")
            if f.trace:
                put(f"traces/{f.user}_{_fmt(float(f.threshold))}.csv", "\n".join(f.trace) + "\n")
        put("folds.csv", "\n".join(rows) + "\n")
        put("per_class.csv", "\n".join(pc) + "\n")
        put("timings.csv", "\n".join(tm) + "\n")
        thresholds = sorted(report.averages)
        if thresholds:
            for name, ylabel, key in PLOTS:
                put(name, _svg_plot(f"{ylabel} vs accumulation threshold", ylabel,
                                    [float(t) for t in thresholds],
                                    [float(report.averages[t][key]) for t in thresholds]))
    except OSError as exc:
        raise PipelineError(f"cannot write report to {out}: {exc.strerror or exc}") from None
    return written
