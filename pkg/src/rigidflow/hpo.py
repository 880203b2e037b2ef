"""Asynchronous successive halving over loss weights and learning rate.

Trials run at increasing budgets (fit iterations); completing in the top
1/eta of a rung earns promotion to the next budget, subject to a
cumulative quota of floor(n/eta) promotions per rung, so from 16
completed rung-0 trials with eta=4 exactly 4 are ever promoted.  A
single coordinator owns all scheduler state; workers only evaluate the
objective.  With one worker the trial log is bit-reproducible.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .errors import ValidationError
from .metrics import psnr_from_mse
from .rng import subsystem_rng


@dataclass
class LogUniform:
    """Log-uniform sampling range for a positive hyperparameter."""

    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ValidationError("need 0 < low < high for a log-uniform range")

    def sample(self, rng) -> float:
        return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))


@dataclass
class Categorical:
    """Uniform choice among a fixed set of values."""

    values: tuple

    def __post_init__(self):
        if len(self.values) < 1:
            raise ValidationError("categorical needs at least one value")

    def sample(self, rng):
        return self.values[int(rng.integers(0, len(self.values)))]


class SearchSpace:
    """Named hyperparameter ranges; sampling order is alphabetical."""

    def __init__(self, params: dict):
        if not params:
            raise ValidationError("empty search space")
        self.params = dict(sorted(params.items()))

    def sample(self, rng) -> dict:
        return {name: spec.sample(rng) for name, spec in self.params.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "SearchSpace":
        params = {}
        for name, spec in data.items():
            if isinstance(spec, dict) and spec.get("type") == "categorical":
                params[name] = Categorical(tuple(spec["values"]))
            elif isinstance(spec, dict):
                params[name] = LogUniform(spec["low"], spec["high"])
            else:
                raise ValidationError(f"malformed search space entry {name!r}")
        return cls(params)


@dataclass
class RungLadder:
    """Increasing evaluation budgets with reduction factor eta."""

    budgets: tuple = (2, 8, 50, 200)
    eta: int = 4

    def __post_init__(self):
        self.budgets = tuple(int(b) for b in self.budgets)
        if len(self.budgets) < 1 or any(
            b2 < self.eta * b1 for b1, b2 in zip(self.budgets, self.budgets[1:])
        ):
            raise ValidationError("budgets must grow by at least eta per rung")
        if self.eta < 2:
            raise ValidationError("eta must be at least 2")


@dataclass
class TrialRecord:
    """One configuration's history across budgets."""

    trial_id: int
    config: dict
    metrics: dict = field(default_factory=dict)  # budget -> metric
    status: str = "running"  # running | stopped | promoted | completed | failed
    submitted_at: int = 0
    events: list = field(default_factory=list)  # (budget, metric, logical time)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.config, sort_keys=True).encode()
        ).hexdigest()[:16]


class _Coordinator:
    """Owns rungs and records; the only writer of scheduler state."""

    def __init__(self, space, ladder, max_trials, seed):
        self.space = space
        self.ladder = ladder
        self.max_trials = max_trials
        self.rng = subsystem_rng(seed, "hpo-sampler")
        self.trials: list[TrialRecord] = []
        self.clock = 0
        # per rung: list of (trial_id, metric, completion time); and ids promoted
        self.completed: list[list] = [[] for _ in ladder.budgets]
        self.promoted: list[set] = [set() for _ in ladder.budgets]
        self.in_flight = 0
        self.lock = threading.Lock()
        self.wakeup = threading.Condition(self.lock)

    def _promotable(self):
        """Best promotable (trial, rung) under the top-1/eta quota rule."""
        for rung in range(len(self.ladder.budgets) - 2, -1, -1):
            done = self.completed[rung]
            quota = len(done) // self.ladder.eta - len(self.promoted[rung])
            if quota <= 0:
                continue
            top = sorted(
                done,
                key=lambda e: (-e[1], e[2], self.trials[e[0]].config_hash),
            )[: len(done) // self.ladder.eta]
            for tid, _, _ in top:
                if tid not in self.promoted[rung]:
                    return tid, rung + 1
        return None

    def next_job(self):
        """(trial_id, rung) to run next, None to wait, 'done' to exit."""
        promo = self._promotable()
        if promo is not None:
            tid, rung = promo
            self.promoted[rung - 1].add(tid)
            self.trials[tid].status = "promoted"
            self.in_flight += 1
            return tid, rung
        if len(self.trials) < self.max_trials:
            trial = TrialRecord(
                trial_id=len(self.trials),
                config=self.space.sample(self.rng),
                submitted_at=self.clock,
            )
            self.clock += 1
            self.trials.append(trial)
            self.in_flight += 1
            return trial.trial_id, 0
        return None if self.in_flight > 0 else "done"

    def report(self, tid, rung, metric, failed):
        trial = self.trials[tid]
        self.clock += 1
        self.in_flight -= 1
        budget = self.ladder.budgets[rung]
        if failed:
            trial.status = "failed"
        else:
            trial.metrics[budget] = metric
            trial.events.append((budget, metric, self.clock))
            self.completed[rung].append((tid, metric, self.clock))
            if rung == len(self.ladder.budgets) - 1:
                trial.status = "completed"
            else:
                trial.status = "stopped"  # until promoted


def asha_run(
    space: SearchSpace,
    objective,
    ladder: RungLadder | None = None,
    workers: int = 1,
    max_trials: int = 32,
    seed: int = 0,
) -> tuple[dict, list[TrialRecord]]:
    """Run ASHA; returns (best config, all trial records).

    ``objective(config, budget)`` returns a metric to maximize; an
    exception marks the trial failed without stopping the scheduler.
    The best config is the highest metric at the deepest budget reached.
    """
    ladder = ladder or RungLadder()
    if workers < 1:
        raise ValidationError("need at least one worker")
    coord = _Coordinator(space, ladder, max_trials, seed)

    def worker_loop():
        while True:
            with coord.lock:
                job = coord.next_job()
                while job is None:
                    coord.wakeup.wait()
                    job = coord.next_job()
                if job == "done":
                    coord.wakeup.notify_all()
                    return
                tid, rung = job
                config = dict(coord.trials[tid].config)
            budget = ladder.budgets[rung]
            failed = False
            metric = None
            try:
                metric = float(objective(config, budget))
            except Exception:
                failed = True
            with coord.lock:
                coord.report(tid, rung, metric, failed)
                coord.wakeup.notify_all()

    if workers == 1:
        worker_loop()
    else:
        threads = [threading.Thread(target=worker_loop) for _ in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    best = None
    for rung in range(len(ladder.budgets) - 1, -1, -1):
        done = coord.completed[rung]
        if done:
            done = sorted(
                done, key=lambda e: (-e[1], e[2], coord.trials[e[0]].config_hash)
            )
            best = coord.trials[done[0][0]]
            break
    if best is None:
        raise ValidationError("no trial completed any budget")
    return dict(best.config), coord.trials


def hpo_metric(predicted, gt) -> float:
    """Mean over frames of PSNR(rgb) + PSNR(depth).

    Depth maps are scaled by the largest valid ground-truth depth of
    the sequence so both terms share the unit-peak PSNR formula.
    """
    if len(predicted) != len(gt) or len(gt) == 0:
        raise ValidationError("need equal-length non-empty frame sequences")
    d_max = max(
        float(g.depth[g.valid].max()) if g.valid.any() else 1.0 for g in gt
    )
    d_max = max(d_max, 1e-9)
    total = 0.0
    for p, g in zip(predicted, gt):
        mse_rgb = float(((p.rgb - g.rgb) ** 2).mean())
        mask = g.valid
        if not mask.any():
            raise ValidationError("ground-truth frame with no valid depth")
        mse_depth = float((((p.depth - g.depth) / d_max)[mask] ** 2).mean())
        total += psnr_from_mse(mse_rgb) + psnr_from_mse(mse_depth)
    return total / len(gt)


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks on ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rx = _ranks(x)
    ry = _ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    den = np.sqrt((sx * sx).sum() * (sy * sy).sum())
    if den == 0:
        return 0.0
    return float((sx * sy).sum() / den)


def _ranks(v):
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    ranks[order] = np.arange(1, v.size + 1)
    # average ranks over ties
    for val in np.unique(v):
        sel = v == val
        if sel.sum() > 1:
            ranks[sel] = ranks[sel].mean()
    return ranks


def _spearman_pvalue(x, y, r: float) -> float:
    """Two-sided p-value: exact permutation for n <= 8, else t-approx."""
    n = len(x)
    if n <= 8:
        count = 0
        total = 0
        y = np.asarray(y, dtype=np.float64)
        for perm in itertools.permutations(range(n)):
            rp = spearman(x, y[list(perm)])
            total += 1
            if abs(rp) >= abs(r) - 1e-12:
                count += 1
        return count / total
    if abs(r) >= 1.0:
        return 0.0
    t2 = r * r * (n - 2) / (1.0 - r * r)
    # survival of the t distribution via the regularized incomplete beta
    return float(betainc(0.5 * (n - 2), 0.5, (n - 2) / ((n - 2) + t2)))


def budget_correlation(trials: list[TrialRecord]) -> list[dict]:
    """Spearman rank correlation of metrics across budget pairs.

    One row per (budget_low, budget_high) pair with at least two common
    configurations: r, the permutation/t-approximated p-value, and the
    common count n.
    """
    budgets = sorted({b for t in trials for b in t.metrics})
    table = []
    for i, b1 in enumerate(budgets):
        for b2 in budgets[i + 1 :]:
            xs, ys = [], []
            for t in trials:
                if b1 in t.metrics and b2 in t.metrics:
                    xs.append(t.metrics[b1])
                    ys.append(t.metrics[b2])
            if len(xs) < 2:
                continue
            r = spearman(xs, ys)
            p = _spearman_pvalue(xs, ys, r)
            table.append(
                {"budget_low": b1, "budget_high": b2, "r": r, "p": p, "n": len(xs)}
            )
    return table


# ---------------------------------------------------------------------------
# trial log persistence (line-delimited JSON)


def write_trial_log(trials: list[TrialRecord], path) -> None:
    with open(path, "w") as f:
        for t in trials:
            for budget, metric, clock in t.events:
                f.write(
                    json.dumps(
                        {
                            "trial": t.trial_id,
                            "config": t.config,
                            "budget": budget,
                            "metric": metric,
                            "status": t.status,
                            "submitted_at": t.submitted_at,
                            "completed_at": clock,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


def read_trial_log(path) -> list[TrialRecord]:
    trials: dict[int, TrialRecord] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            tid = rec["trial"]
            if tid not in trials:
                trials[tid] = TrialRecord(
                    trial_id=tid,
                    config=rec["config"],
                    submitted_at=rec.get("submitted_at", 0),
                )
            t = trials[tid]
            t.metrics[int(rec["budget"])] = rec["metric"]
            t.events.append((int(rec["budget"]), rec["metric"], rec["completed_at"]))
            t.status = rec.get("status", t.status)
    return [trials[k] for k in sorted(trials)]
