"""Analyses of fitted (or ground-truth) learning rules.

* update-function slices over (stimulus, stimulus weight, outcome)
* history-conditioned update gaps for recurrent models
* recovery RMSE against simulator latents
* animal-held-out and future-holdout cross-validation with paired t-tests
* the standard-error scaling check for pooled initial-update estimates
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from learnrule import model as M
from learnrule.glm import ContractError
from learnrule.inference import (
    FitConfig,
    FittedModel,
    chance_model,
    fit,
    heldout_log_likelihood,
)
from learnrule.rules import RuleParams, batch_rule_updates

DEFAULT_STIMULI = tuple(s for s in np.round(np.arange(-2.0, 2.0001, 0.25), 2) if s != 0)
DEFAULT_W_LEVELS = (-2.0, -1.0, 0.0, 1.0, 2.0, 3.0)


class MissingLatentsError(ContractError):
    pass


# -- models usable by the analyses ---------------------------------------------------


class GroundTruthModel:
    """A closed-form rule exposed through the same teacher-forced interface as fits."""

    kind = "ground_truth"
    d = 2

    def __init__(self, rule: RuleParams, fix_bias: Optional[bool] = None):
        self.rule = rule
        self.fix_bias = rule.markovian if fix_bias is None else fix_bias

    @property
    def recurrent(self) -> bool:
        return not self.rule.markovian

    def teacher_forced(self, W, stimulus, choice, reward) -> np.ndarray:
        s = np.asarray(stimulus, dtype=np.float64)
        y = np.asarray(choice)
        r = np.asarray(reward)
        # label implied by choice and outcome
        label = np.where(r == 1, y, 1 - y)
        return batch_rule_updates(self.rule, W, s, y, label, fix_bias=self.fix_bias)


class MarkovAdapter:
    """Lets a Markovian model through APIs that expect a history-aware one."""

    def __init__(self, model):
        self.model = model
        self.d = model.d
        self.kind = model.kind

    recurrent = True

    def teacher_forced(self, W, stimulus, choice, reward):
        return self.model.teacher_forced(W, stimulus, choice, reward)


def _pad_w(model, W2):
    """Embed [w_stim, w_bias] into the model's weight dimension (extra entries 0)."""
    d = getattr(model, "d", 2)
    if d == W2.shape[-1]:
        return W2
    out = np.zeros(W2.shape[:-1] + (d,))
    out[..., : W2.shape[-1]] = W2
    return out


def _outcome_choice(s, correct: bool):
    label = (np.asarray(s) > 0).astype(np.int64)
    return label if correct else 1 - label


# -- slices ------------------------------------------------------------------------


@dataclass
class SliceGrid:
    stimuli: tuple = DEFAULT_STIMULI
    w_levels: tuple = DEFAULT_W_LEVELS
    bias: float = 0.0
    outcomes: tuple = ("correct", "incorrect")
    n_histories: int = 100
    history_length: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.stimuli or not self.w_levels:
            raise ContractError("slice grid needs stimuli and weight levels")
        if any(not math.isfinite(w) for w in self.w_levels):
            raise ContractError("weight levels must be finite")
        for o in self.outcomes:
            if o not in ("correct", "incorrect"):
                raise ContractError(f"unknown outcome {o!r}")


def random_histories(n, length, stimuli, rng):
    """Random stimulus sequences with fair-coin rewarded/unrewarded outcomes."""
    stim = np.asarray(stimuli, dtype=np.float64)[rng.integers(len(stimuli), size=(n, length))]
    rewarded = rng.integers(2, size=(n, length))
    label = (stim > 0).astype(np.int64)
    choice = np.where(rewarded == 1, label, 1 - label)
    return stim, choice, rewarded


def _probe(model, hist, w_probe, s, correct):
    """Mean update at a probe trial appended to each history; w held at ``w_probe`` throughout."""
    stim, choice, reward = hist
    n, L = stim.shape
    y = int(_outcome_choice(s, correct))
    S = np.concatenate([stim, np.full((n, 1), s)], axis=1)
    Y = np.concatenate([choice, np.full((n, 1), y)], axis=1)
    R = np.concatenate([reward, np.full((n, 1), int(correct))], axis=1)
    W = np.broadcast_to(_pad_w(model, np.asarray(w_probe, dtype=np.float64)), (n, L + 1, getattr(model, "d", 2)))
    dw = model.teacher_forced(np.array(W), S, Y, R)
    return dw[:, -1].mean(axis=0)


def update_slices(model, grid: Optional[SliceGrid] = None) -> list[dict]:
    """Tidy rows (stimulus, w_stim, outcome, dw_stim, dw_bias).

    Markovian models are evaluated directly. Recurrent models are averaged
    over ``grid.n_histories`` random histories (seeded) that precede the probe.
    """
    grid = grid or SliceGrid()
    s = np.asarray(grid.stimuli, dtype=np.float64)
    rows = []
    recurrent = getattr(model, "recurrent", False)
    hist = None
    if recurrent:
        rng = np.random.default_rng(grid.seed)
        hist = random_histories(grid.n_histories, grid.history_length, grid.stimuli, rng)
    for w_stim in grid.w_levels:
        for outcome in grid.outcomes:
            correct = outcome == "correct"
            if recurrent:
                dws = np.stack([_probe(model, hist, [w_stim, grid.bias], si, correct) for si in s])
            else:
                W = _pad_w(model, np.tile([w_stim, grid.bias], (len(s), 1)))[:, None, :]
                y = _outcome_choice(s, correct)[:, None]
                r = np.full((len(s), 1), int(correct))
                dws = model.teacher_forced(W, s[:, None], y, r)[:, 0]
            for si, dw in zip(s, dws):
                rows.append(
                    {
                        "stimulus": float(si),
                        "w_stim": float(w_stim),
                        "outcome": outcome,
                        "dw_stim": float(dw[0]),
                        "dw_bias": float(dw[1]),
                    }
                )
    return rows


def slice_rmse(rows_a, rows_b) -> float:
    """RMSE between two slice tables over matching (stimulus, w_stim, outcome) keys."""
    key = lambda r: (r["stimulus"], r["w_stim"], r["outcome"])
    b = {key(r): r for r in rows_b}
    diffs = []
    for r in rows_a:
        o = b.get(key(r))
        if o is None:
            raise ContractError(f"slice row {key(r)} missing from second table")
        diffs += [r["dw_stim"] - o["dw_stim"], r["dw_bias"] - o["dw_bias"]]
    return float(np.sqrt(np.mean(np.square(diffs))))


# -- history conditioning ------------------------------------------------------------


@dataclass
class HistoryCondition:
    k: int = 3
    offset: int = 0
    w_stim: float = 0.0
    bias: float = 0.0
    n_draws: int = 100
    pad: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k < 0 or self.offset < 0:
            raise ContractError("k and offset must be nonnegative")


def history_gap(model, cond: HistoryCondition, stimuli=DEFAULT_STIMULI) -> np.ndarray:
    """dw_stim after a rewarded block minus after an unrewarded block, per probe stimulus.

    The conditioned block of ``k`` trials ends ``offset`` trials before the
    probe; every other history trial is random (fair-coin outcome) and shared
    between the two conditions, then averaged over ``n_draws`` draws. Weights
    are held at (w_stim, bias) and the probe trial is a correct choice.
    """
    if not getattr(model, "recurrent", False):
        raise M.UnsupportedModelError(
            "history_gap needs a history-dependent model; wrap Markovian ones in MarkovAdapter"
        )
    L = cond.pad + cond.k + cond.offset
    rng = np.random.default_rng(cond.seed)
    stim, choice, reward = random_histories(cond.n_draws, L, stimuli, rng)
    lo, hi = L - cond.offset - cond.k, L - cond.offset
    label = (stim > 0).astype(np.int64)
    means = {}
    for name, rewarded in (("rewarded", 1), ("unrewarded", 0)):
        c, r = choice.copy(), reward.copy()
        r[:, lo:hi] = rewarded
        c[:, lo:hi] = label[:, lo:hi] if rewarded else 1 - label[:, lo:hi]
        means[name] = np.array(
            [_probe(model, (stim, c, r), [cond.w_stim, cond.bias], s, True)[0] for s in stimuli]
        )
    return means["rewarded"] - means["unrewarded"]


# -- recovery ------------------------------------------------------------------------------


NEG_INF = float("-inf")


def recovery_rmse(model, animals, rule: Optional[RuleParams] = None) -> dict:
    """RMSE between model and true updates at the visited (w, s, y, r) tuples.

    ``animals`` are simulator outputs carrying latent weights. The target is the
    recorded latent update (including any injected noise) unless ``rule`` is
    given, in which case the noise-free rule output at the same tuples is used.
    """
    animals = list(animals)
    if not animals or any(getattr(a, "w", None) is None for a in animals):
        raise MissingLatentsError("recovery_rmse needs simulator latents")
    T = max(len(a.session) for a in animals)
    n = len(animals)
    S = np.zeros((n, T))
    Y = np.zeros((n, T), dtype=np.int64)
    R = np.zeros((n, T), dtype=np.int64)
    Z = np.zeros((n, T), dtype=np.int64)
    W = np.zeros((n, T, 2))
    DW = np.zeros((n, T, 2))
    mask = np.zeros((n, T), dtype=bool)
    for i, a in enumerate(animals):
        L = len(a.session)
        S[i, :L] = a.session.stimulus
        Y[i, :L] = a.session.choice
        R[i, :L] = a.session.reward
        Z[i, :L] = a.session.label
        W[i, :L] = a.w[:-1]
        DW[i, :L] = a.dw
        mask[i, :L] = True
    pred = model.teacher_forced(_pad_w(model, W), S, Y, R)[..., :2]
    if rule is not None:
        fix = animals[0].fixed_bias
        DW = batch_rule_updates(rule, W, S, Y, Z, fix_bias=fix)
    err = (pred - DW)[mask]
    rmse = float(np.sqrt(np.mean(err**2)))
    return {
        "rmse": rmse,
        "log10_rmse": math.log10(rmse) if rmse > 0 else NEG_INF,
        "rmse_stim": float(np.sqrt(np.mean(err[:, 0] ** 2))),
        "rmse_bias": float(np.sqrt(np.mean(err[:, 1] ** 2))),
    }


# -- significance tests --------------------------------------------------------------------


def paired_ttest(a, b) -> dict:
    """Two-sided paired t-test of a - b. Zero-variance differences are flagged degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired samples must be 1-d and equal length")
    d = a - b
    n = len(d)
    if n < 2:
        return {"t": float("nan"), "p": 1.0, "df": n - 1, "mean_diff": float(d.mean()) if n else 0.0, "degenerate": True}
    sd = d.std(ddof=1)
    if sd == 0:
        return {"t": 0.0 if d.mean() == 0 else math.copysign(math.inf, d.mean()),
                "p": 1.0 if d.mean() == 0 else 0.0, "df": n - 1, "mean_diff": float(d.mean()), "degenerate": True}
    t = d.mean() / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return {"t": float(t), "p": min(p, 1.0), "df": n - 1, "mean_diff": float(d.mean()), "degenerate": False}


# -- cross-validation -------------------------------------------------------------------------


@dataclass
class EvalReport:
    protocol: str
    kinds: list
    per_animal: dict  # kind -> {animal_id: mean LL across seeds}
    per_animal_per_trial: dict
    per_seed: dict  # kind -> {seed: {animal_id: LL}}
    tests: list
    totals: dict
    metadata: dict = field(default_factory=dict)
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "protocol": self.protocol,
            "kinds": list(self.kinds),
            "per_animal": self.per_animal,
            "per_animal_per_trial": self.per_animal_per_trial,
            "per_seed": {k: {str(s): v for s, v in d.items()} for k, d in self.per_seed.items()},
            "tests": self.tests,
            "totals": self.totals,
            "degenerate": self.degenerate,
            "metadata": self.metadata,
        }


def _summarize(protocol, kinds, per_seed, n_trials, metadata) -> EvalReport:
    per_animal = {}
    per_trial = {}
    totals = {}
    for kind in kinds:
        seeds = per_seed[kind]
        ids = sorted(next(iter(seeds.values())).keys()) if seeds else []
        # seeds first, then animals
        means = {a: float(np.mean([seeds[s][a] for s in seeds])) for a in ids}
        per_animal[kind] = means
        per_trial[kind] = {a: means[a] / n_trials[a] if n_trials[a] else float("nan") for a in ids}
        # animals first, then seeds
        by_seed = [math.fsum(seeds[s].values()) for s in seeds]
        totals[kind] = {
            "seeds_then_animals": math.fsum(means.values()),
            "animals_then_seeds": float(np.mean(by_seed)) if by_seed else 0.0,
            "per_trial_mean": math.fsum(means.values()) / max(sum(n_trials.values()), 1),
            "seed_se": float(np.std(by_seed, ddof=1) / math.sqrt(len(by_seed))) if len(by_seed) > 1 else 0.0,
        }
    tests = []
    for ka, kb in combinations(kinds, 2):
        ids = sorted(per_animal[ka])
        res = paired_ttest([per_animal[ka][a] for a in ids], [per_animal[kb][a] for a in ids])
        tests.append({"a": ka, "b": kb, **res})
    degenerate = sum(n_trials.values()) == 0
    return EvalReport(protocol, list(kinds), per_animal, per_trial, per_seed, tests, totals, metadata, degenerate)


def _kind_label(kind):
    return kind if isinstance(kind, str) else getattr(kind, "label", str(kind))


def fold_assignment(n: int, K: int, seed: int) -> np.ndarray:
    if K > n:
        raise ContractError(f"K={K} folds but only {n} animals")
    if K < 2:
        raise ContractError("need at least 2 folds")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(order, K)):
        folds[chunk] = f
    return folds


def _fit_job(args):
    train, kind, config = args
    if kind == "chance":
        return chance_model()
    return fit(train, kind, config)


def _run_jobs(jobs, n_jobs):
    if n_jobs and n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(_fit_job, jobs))
    return [_fit_job(j) for j in jobs]


def crossval_animals(
    dataset,
    kinds: Sequence[str],
    K: int = 5,
    seeds: Sequence[int] = (0,),
    config: Optional[FitConfig] = None,
    split_seed: int = 0,
    folds: Optional[Sequence[int]] = None,
    n_jobs: int = 1,
) -> EvalReport:
    """Animal-held-out K-fold cross-validation.

    Folds come from ``split_seed`` and stay fixed across fitting seeds. Passing
    ``folds`` restricts evaluation to those fold indices (e.g. a single split).
    The kind "chance" is accepted as a no-learning baseline.
    """
    dataset = list(dataset)
    config = config or FitConfig()
    assign = fold_assignment(len(dataset), K, split_seed)
    use = range(K) if folds is None else folds
    jobs, keys = [], []
    for f in use:
        train = [s for s, g in zip(dataset, assign) if g != f]
        for kind in kinds:
            for seed in seeds:
                cfg = FitConfig(**{**config.to_dict(), "seed": int(seed)})
                jobs.append((train, kind, cfg))
                keys.append((f, kind, seed))
    models = _run_jobs(jobs, n_jobs)
    per_seed = {k: {s: {} for s in seeds} for k in kinds}
    n_trials = {}
    for (f, kind, seed), m in zip(keys, models):
        test = [s for s, g in zip(dataset, assign) if g == f]
        ll = heldout_log_likelihood(m, test)
        per_seed[kind][seed].update(ll["per_animal"])
        n_trials.update(ll["n_trials"])
    meta = {"K": K, "folds_used": list(use), "split_seed": split_seed, "seeds": list(seeds),
            "fit_config": config.to_dict(), "fold_of": {s.animal_id: int(g) for s, g in zip(dataset, assign)}}
    return _summarize("animals", kinds, per_seed, n_trials, meta)


def crossval_future(
    dataset,
    kinds: Sequence[str],
    split_trial: int,
    horizon: int = 500,
    seeds: Sequence[int] = (0,),
    config: Optional[FitConfig] = None,
    n_jobs: int = 1,
) -> EvalReport:
    """Train on trials [0, split) of every animal, score [split, split + horizon).

    The fitted rule is rolled forward from each animal's starting weights
    through its own training trials, so the held-out segment starts from the
    predicted weights at ``split_trial``.
    """
    dataset = list(dataset)
    config = config or FitConfig()
    short = [s.animal_id for s in dataset if len(s) < split_trial + horizon]
    if short:
        raise ContractError(f"sessions shorter than split + horizon: {short[:5]}")
    train = [s.head(split_trial) for s in dataset]
    jobs, keys = [], []
    for kind in kinds:
        for seed in seeds:
            jobs.append((train, kind, FitConfig(**{**config.to_dict(), "seed": int(seed)})))
            keys.append((kind, seed))
    models = _run_jobs(jobs, n_jobs)
    per_seed = {k: {s: {} for s in seeds} for k in kinds}
    n_trials = {}
    for (kind, seed), m in zip(keys, models):
        res = future_log_likelihood(m, dataset, split_trial, horizon)
        per_seed[kind][seed] = res["per_animal"]
        n_trials = res["n_trials"]
    meta = {"split_trial": split_trial, "horizon": horizon, "seeds": list(seeds), "fit_config": config.to_dict()}
    return _summarize("future", kinds, per_seed, n_trials, meta)


def future_log_likelihood(model: FittedModel, sessions, split_trial: int, horizon: int) -> dict:
    sessions = [s.head(split_trial + horizon) for s in sessions]
    per_animal, n_trials = {}, {}
    if horizon <= 0:
        return {"per_animal": {s.animal_id: 0.0 for s in sessions},
                "n_trials": {s.animal_id: 0 for s in sessions}, "total": 0.0}
    batch = model.batch(sessions)
    w0 = np.stack([model.initial_weights(s) for s in sessions])
    tape = M.forward(model.kind, model.params, batch, w0, record=False)
    terms = M.bce_terms(tape.logits, batch.choice)
    for i, s in enumerate(sessions):
        per_animal[s.animal_id] = -math.fsum(terms[i, split_trial : split_trial + horizon])
        n_trials[s.animal_id] = horizon
    return {"per_animal": per_animal, "n_trials": n_trials, "total": math.fsum(per_animal.values())}


def holdout_report(train, test, kinds, seeds=(0,), config: Optional[FitConfig] = None, n_jobs: int = 1):
    """Fit each kind on ``train`` for every seed and score ``test``; also returns the models."""
    config = config or FitConfig()
    jobs, keys = [], []
    for kind in kinds:
        for seed in seeds:
            jobs.append((list(train), kind, FitConfig(**{**config.to_dict(), "seed": int(seed)})))
            keys.append((kind, seed))
    models = _run_jobs(jobs, n_jobs)
    per_seed = {k: {s: {} for s in seeds} for k in kinds}
    n_trials = {}
    fitted = {}
    for (kind, seed), m in zip(keys, models):
        ll = heldout_log_likelihood(m, test)
        per_seed[kind][seed] = ll["per_animal"]
        n_trials = ll["n_trials"]
        fitted[(kind, seed)] = m
    meta = {"n_train": len(train), "n_test": len(test), "seeds": list(seeds), "fit_config": config.to_dict()}
    return _summarize("holdout", kinds, per_seed, n_trials, meta), fitted


# -- standard-error scaling -------------------------------------------------------------------


def se_scaling_check(
    n_values=(100, 400, 1600, 6400),
    repetitions: int = 500,
    w0: float = 0.5,
    w1: float = 1.0,
    eps: float = 0.01,
    seed: int = 0,
) -> dict:
    """Slope of log SE(estimated w1 - w0) against log N in the idealized setting.

    Scalar weight, inputs uniform on {-1, 1}, one shared starting weight; N
    independent first and second trials are drawn per repetition and each
    weight is fitted by maximum likelihood. With x in {-1, 1} the MLE only
    depends on the fraction of choices agreeing with sign(x), so it is
    logit(fraction); fractions are clamped to [eps, 1 - eps].
    """
    rng = np.random.default_rng(seed)
    n_values = [int(n) for n in n_values]
    ses, clamped = [], 0
    for N in n_values:
        est = []
        for w in (w0, w1):
            x = rng.choice([-1.0, 1.0], size=(repetitions, N))
            y = rng.random((repetitions, N)) < 1.0 / (1.0 + np.exp(-w * x))
            frac = np.mean(y == (x > 0), axis=1)
            clamped += int(np.sum((frac < eps) | (frac > 1 - eps)))
            frac = np.clip(frac, eps, 1.0 - eps)
            est.append(np.log(frac) - np.log1p(-frac))
        delta = est[1] - est[0]
        ses.append(float(np.std(delta, ddof=1)))
    logn = np.log(n_values)
    logse = np.log(ses)
    slope, intercept = np.polyfit(logn, logse, 1)
    # var(log sample sd) ~ 1 / (2 (R - 1))
    slope_se = math.sqrt(1.0 / (2 * (repetitions - 1)) / np.sum((logn - logn.mean()) ** 2))
    return {
        "slope": float(slope),
        "slope_se": slope_se,
        "intercept": float(intercept),
        "n_values": n_values,
        "se": ses,
        "clamped": clamped,
    }


def report_from_models(models: dict, sessions, protocol="holdout", split_trial=0, horizon=0) -> EvalReport:
    """Score already-fitted models (label -> model) on ``sessions`` without refitting."""
    sessions = list(sessions)
    per_seed, n_trials = {}, {}
    for label, m in models.items():
        if protocol == "future":
            short = [s.animal_id for s in sessions if len(s) < split_trial + horizon]
            if short:
                raise ContractError(f"sessions shorter than split + horizon: {short[:5]}")
            ll = future_log_likelihood(m, sessions, split_trial, horizon)
        else:
            ll = heldout_log_likelihood(m, sessions)
        per_seed[label] = {0: ll["per_animal"]}
        n_trials = ll["n_trials"]
    meta = {"split_trial": split_trial, "horizon": horizon} if protocol == "future" else {}
    return _summarize(protocol, list(models), per_seed, n_trials, meta)
