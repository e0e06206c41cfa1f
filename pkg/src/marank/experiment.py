"""Config-driven offline simulation runs and multi-run comparisons.

A run splits a LETOR dataset, stands up a budgeted oracle on the training
sessions and then alternates rounds of

* collection: query one batch of (session, ranking) pairs chosen by the
  exploration policy,
* surrogate training: warm-started noise-aware joint training on everything
  observed so far,
* policy training: sampled policy-gradient steps against the surrogate, mixed
  with a pairwise label loss on an optional auxiliary labelled split,

recording the held-out true metric of the policy's modal rankings after each
round. Reports are written with fixed float formatting so that reruns with
the same config are byte-identical.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_dataset, minmax_normalize, minmax_stats, split_dataset
from .exploration import (
    MixSchedule,
    active_select,
    multitask_update,
    pairwise_label_loss,
    phi,
    presentation_policy,
)
from .numeric import make_rng, mc_dropout_stats, sample_dropout_masks
from .oracle import BudgetExhausted, MetricOracle, MetricSpec, peek_true_metric
from .ranking import RankingHead, RankingPolicy, expected_reward_gradient, modal_ranking
from .surrogate import EmptyPairsError, NoiseObservationModel, ObservationSet, SurrogateModel, joint_train

CONFIG_VERSION = 1
EXPLORATION_KINDS = ("top_k", "random", "uncertainty_aware", "active")
REPORT_FIELDS = ("step", "budget_used", "objective", "phi", "heldout_metric")


class ConfigError(ValueError):
    """The config file is malformed or inconsistent."""


class StageError(RuntimeError):
    """A pipeline stage failed; the message starts with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------- config

DEFAULTS = {
    "dataset": {"path": None, "fractions": {"train": 0.8, "aux": 0.0, "test": 0.2}, "normalize": True},
    "metric": {"kind": "ndcg", "k": 10, "noise_sigma": 0.0},
    "oracle": {"budget": 200},
    "exploration": {"kind": "uncertainty_aware", "queries_per_round": 20, "n_dropout": 8,
                    "std_scale": 1.0},
    "surrogate": {"hidden": [16], "noise_hidden": [8], "epochs_per_round": 5, "lr": 0.05,
                  "uniform_weights": False},
    "policy": {"hidden": [], "dropout": 0.1, "temperature": 1.0, "n_samples": 16,
               "steps_per_round": 10, "batch_sessions": 16, "lr": 0.1,
               "schedule": {"kind": "constant", "value": 1.0}},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key != "fractions" and key != "schedule":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """Validated run settings; ``raw`` is the fully defaulted JSON document."""

    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def dataset_path(self) -> Path:
        path = Path(self.raw["dataset"]["path"])
        return path if path.is_absolute() else self.base_dir / path

    @property
    def metric(self) -> MetricSpec:
        return MetricSpec.from_dict(self.raw["metric"])

    @property
    def schedule(self) -> MixSchedule:
        return MixSchedule(**self.raw["policy"]["schedule"])


def parse_config(doc: dict, base_dir=None) -> ExperimentConfig:
    """Fill defaults into a run config document and validate it."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    if doc.pop("version", None) != CONFIG_VERSION:
        raise ConfigError(f"config needs \"version\": {CONFIG_VERSION}")
    if "seed" not in doc:
        raise ConfigError("config needs an explicit integer \"seed\"")
    seed = doc.pop("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    doc.pop("name", None)
    raw = _merge(DEFAULTS, doc, "")
    raw["seed"] = seed
    raw["version"] = CONFIG_VERSION
    _validate(raw)
    return ExperimentConfig(raw, Path(base_dir) if base_dir is not None else Path.cwd())


def _positive_int(value, name: str, minimum: int = 1) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}")


def _positive(value, name: str, allow_zero: bool = False) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise ConfigError(f"{name} must be a number")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'>= 0' if allow_zero else '> 0'}")


def _widths(value, name: str) -> None:
    if not isinstance(value, list) or not all(isinstance(w, int) and w >= 1 for w in value):
        raise ConfigError(f"{name} must be a list of positive integers")


def _validate(raw: dict) -> None:
    data = raw["dataset"]
    if not isinstance(data["path"], str):
        raise ConfigError("dataset.path is required")
    fr = data["fractions"]
    if not isinstance(fr, dict) or set(fr) - {"train", "aux", "test"} or not {"train", "test"} <= set(fr):
        raise ConfigError("dataset.fractions needs train and test (and optionally aux)")
    values = [fr.get(k, 0.0) for k in ("train", "aux", "test")]
    if any(not isinstance(v, (int, float)) or v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-9:
        raise ConfigError("dataset.fractions must be non-negative and sum to 1")
    if fr["train"] <= 0 or fr["test"] <= 0:
        raise ConfigError("dataset.fractions.train and .test must be positive")
    try:
        MetricSpec.from_dict(raw["metric"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"metric: {exc}") from None
    _positive_int(raw["oracle"]["budget"], "oracle.budget", 0)
    ex = raw["exploration"]
    if ex["kind"] not in EXPLORATION_KINDS:
        raise ConfigError(f"exploration.kind must be one of {EXPLORATION_KINDS}")
    _positive_int(ex["queries_per_round"], "exploration.queries_per_round")
    _positive_int(ex["n_dropout"], "exploration.n_dropout", 2)
    _positive(ex["std_scale"], "exploration.std_scale", allow_zero=True)
    sur = raw["surrogate"]
    _widths(sur["hidden"], "surrogate.hidden")
    _widths(sur["noise_hidden"], "surrogate.noise_hidden")
    _positive_int(sur["epochs_per_round"], "surrogate.epochs_per_round")
    _positive(sur["lr"], "surrogate.lr")
    if not isinstance(sur["uniform_weights"], bool):
        raise ConfigError("surrogate.uniform_weights must be true or false")
    pol = raw["policy"]
    _widths(pol["hidden"], "policy.hidden")
    _positive(pol["dropout"], "policy.dropout", allow_zero=True)
    if pol["dropout"] >= 1:
        raise ConfigError("policy.dropout must be < 1")
    if ex["kind"] == "uncertainty_aware" and (pol["dropout"] == 0 or not pol["hidden"]):
        raise ConfigError("uncertainty_aware exploration needs policy.hidden layers with dropout > 0")
    _positive(pol["temperature"], "policy.temperature")
    _positive_int(pol["n_samples"], "policy.n_samples", 2)
    _positive_int(pol["steps_per_round"], "policy.steps_per_round", 0)
    _positive_int(pol["batch_sessions"], "policy.batch_sessions")
    _positive(pol["lr"], "policy.lr", allow_zero=True)
    sched = pol["schedule"]
    if not isinstance(sched, dict):
        raise ConfigError("policy.schedule must be an object")
    try:
        MixSchedule(**sched)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"policy.schedule: {exc}") from None
    if fr.get("aux", 0.0) == 0 and (sched.get("kind") != "constant" or sched.get("value", 0.5) != 1.0):
        raise ConfigError("a schedule other than constant 1.0 needs an aux split for the label loss")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_config(doc, path.parent)


# ---------------------------------------------------------------- report

@dataclass
class RunReport:
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for rec in self.records:
            writer.writerow([_fmt(rec[k]) for k in REPORT_FIELDS])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "curve.csv").write_text(self.curve_csv(), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


# ---------------------------------------------------------------- run

def _load_splits(cfg: ExperimentConfig, rng):
    try:
        dataset = load_dataset(cfg.dataset_path)
    except (OSError, ValueError) as exc:
        raise StageError("data_ingest", str(exc)) from exc
    fr = cfg.raw["dataset"]["fractions"]
    train, aux, test = split_dataset(dataset, [fr["train"], fr.get("aux", 0.0), fr["test"]], rng)
    if not train.sessions or not test.sessions:
        raise StageError("data_ingest", "train or test split is empty")
    if cfg.raw["dataset"]["normalize"]:
        stats = minmax_stats(train)
        train, test = minmax_normalize(train, stats), minmax_normalize(test, stats)
        aux = minmax_normalize(aux, stats) if aux.sessions else aux
    return train, aux, test


def _heldout(policy: RankingPolicy, spec: MetricSpec, test_sessions) -> float:
    values = [peek_true_metric(spec, s, modal_ranking(policy.head, policy.scores(s.features)))
              for s in test_sessions]
    return float(np.mean(values))


def _collect(kind: str, cfg: dict, oracle: MetricOracle, obs: ObservationSet, visible, order,
             policy: RankingPolicy, surrogate: SurrogateModel | None, rng) -> bool:
    """Spend up to one round of queries; returns False once the budget is gone."""
    n_query = cfg["queries_per_round"]
    if kind == "active" and surrogate is not None:
        feats = [visible[i].features for i in range(len(visible))]
        picks, _ = active_select(feats, policy, surrogate, n_query, "sampled", rng,
                                 n_dropout=cfg["n_dropout"], n_support=32)
    else:
        picks = []
        for _ in range(n_query):
            idx = order.pop(0)
            order.append(idx)
            picks.append((idx, None))
    for idx, perm in picks:
        session = visible[idx]
        if perm is None:
            scores = policy.scores(session.features)
            if kind in ("top_k", "active"):
                perm = presentation_policy("top_k", scores)
            elif kind == "random":
                perm = presentation_policy("random", scores, rng=rng)
            else:
                _, var = mc_dropout_stats(policy.scorer, session.features, cfg["n_dropout"], rng)
                stds = cfg["std_scale"] * np.sqrt(var[:, 0])
                perm = presentation_policy("uncertainty_aware", scores, stds)
        try:
            score = oracle.query(session.query_id, perm)
        except BudgetExhausted:
            return False
        obs.add(session, perm, score)
    return oracle.budget > 0


def _label_grad(policy: RankingPolicy, aux_sessions, batch: int, rng) -> np.ndarray:
    """Ascent direction of the pair-averaged pairwise label loss on a minibatch of aux sessions."""
    idx = rng.choice(len(aux_sessions), size=min(batch, len(aux_sessions)), replace=False)
    total = np.zeros(policy.scorer.n_params)
    for i in np.sort(idx):
        s = aux_sessions[i]
        n_pairs = int(np.sum(s.labels[:, None] > s.labels[None, :]))
        if n_pairs:
            total -= pairwise_label_loss(policy.scorer, s.features, s.labels)[1].flat() / n_pairs
    return total / idx.size


def _policy_round(policy, surrogate, visible, aux_sessions, pcfg, schedule, t0, rng):
    objective = float("nan")
    t = t0
    for _ in range(pcfg["steps_per_round"]):
        idx = np.sort(rng.choice(len(visible), size=min(pcfg["batch_sessions"], len(visible)),
                                 replace=False))
        grad_c = np.zeros(policy.scorer.n_params)
        values = []
        for i in idx:
            feats = visible[i].features
            # train under dropout so MC-dropout spreads reflect what the scorer learned
            masks = sample_dropout_masks(policy.scorer, rng, (feats.shape[0],)) if pcfg["dropout"] else None
            g = expected_reward_gradient(policy, lambda p, f=feats: surrogate.predict(f, p), feats,
                                         "sampled", rng, pcfg["n_samples"], masks)
            grad_c += g.scorer.flat()
            values.append(g.value)
        grad_c /= idx.size
        objective = float(np.mean(values))
        grad_s = _label_grad(policy, aux_sessions, pcfg["batch_sessions"], rng) if aux_sessions else grad_c
        theta = multitask_update(policy.scorer.flat(), grad_c, grad_s, t, schedule, pcfg["lr"])
        policy.scorer = policy.scorer.with_flat(theta)
        t += 1
    return objective, t


def run(cfg: ExperimentConfig, out_dir=None) -> RunReport:
    """Execute one seeded simulation and, if ``out_dir`` is given, write its artifacts.

    Artifacts: ``curve.csv`` (one row per round), ``summary.json``,
    ``oracle_log.jsonl``, ``surrogate.json`` and ``policy.json``.
    """
    raw = cfg.raw
    seed = cfg.seed
    spec = cfg.metric
    train, aux, test = _load_splits(cfg, make_rng(seed, 0))
    oracle = MetricOracle(spec, train.sessions, raw["oracle"]["budget"], make_rng(seed, 1))
    visible = train.without_labels()
    aux_sessions = aux.sessions
    init_rng = make_rng(seed, 2)
    pcfg, scfg, ecfg = raw["policy"], raw["surrogate"], raw["exploration"]
    head = RankingHead(np.array([pcfg["temperature"]]))
    policy = RankingPolicy.create(train.feature_dim, pcfg["hidden"], init_rng, max_len=1,
                                  dropout=pcfg["dropout"], head=head)
    g0 = SurrogateModel.create(train.feature_dim, scfg["hidden"], init_rng)
    o0 = NoiseObservationModel.create(scfg["noise_hidden"], init_rng)
    collect_rng, sur_rng, pol_rng = make_rng(seed, 3), make_rng(seed, 4), make_rng(seed, 5)
    order = [int(i) for i in collect_rng.permutation(len(visible))]
    schedule = cfg.schedule

    obs = ObservationSet()
    report = RunReport()
    surrogate, noise_model = None, None
    t = 0
    report.records.append({"step": 0, "budget_used": 0, "objective": float("nan"),
                           "phi": phi(0, schedule), "heldout_metric": _heldout(policy, spec, test.sessions)})
    step = 0
    more = oracle.budget > 0
    while True:
        if more:
            more = _collect(ecfg["kind"], ecfg, oracle, obs, visible, order, policy, surrogate, collect_rng)
        try:
            surrogate, noise_model, _ = joint_train(
                surrogate or g0, noise_model or o0, obs, scfg["epochs_per_round"], scfg["lr"], sur_rng,
                uniform_weights=scfg["uniform_weights"])
        except EmptyPairsError as exc:
            if more:
                # no comparable pair yet; keep collecting with the current policy
                surrogate = None
            elif surrogate is None:
                raise StageError("surrogate_lab", str(exc)) from exc
        objective = float("nan")
        if surrogate is not None:
            objective, t = _policy_round(policy, surrogate, visible, aux_sessions, pcfg, schedule, t, pol_rng)
        step += 1
        report.records.append({"step": step, "budget_used": oracle.used, "objective": objective,
                               "phi": phi(t, schedule),
                               "heldout_metric": _heldout(policy, spec, test.sessions)})
        if not more:
            break

    report.summary = {
        "seed": seed,
        "exploration": ecfg["kind"],
        "final_heldout_metric": report.records[-1]["heldout_metric"],
        "oracle_queries": oracle.used,
        "oracle_log_length": len(oracle.log),
        "n_observations": len(obs),
        "n_rounds": step,
        "policy_steps": t,
        "n_train_sessions": len(train),
        "n_aux_sessions": len(aux),
        "n_test_sessions": len(test),
    }
    if out_dir is not None:
        out = Path(out_dir)
        report.write(out)
        oracle.export_log(out / "oracle_log.jsonl")
        if surrogate is not None:
            (out / "surrogate.json").write_text(json.dumps(surrogate.to_dict(), sort_keys=True), encoding="utf-8")
        policy.save(out / "policy.json")
    return report


# ---------------------------------------------------------------- compare

def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[f"{prefix}{key}"] = value
    return out


def check_confounds(configs: list[ExperimentConfig], declared) -> list[str]:
    """Dotted keys on which the configs differ; raises if any is undeclared.

    A declared key also covers everything nested below it.
    """
    flat = [_flatten(dict(c.raw, dataset=dict(c.raw["dataset"], path=str(c.dataset_path.resolve()))))
            for c in configs]
    keys = sorted(set().union(*flat))
    differing = [k for k in keys if any(f.get(k) != flat[0].get(k) for f in flat[1:])]
    covered = lambda k: any(k == d or k.startswith(d + ".") for d in declared)
    bad = [k for k in differing if not covered(k)]
    if bad:
        raise ConfigError(f"configs differ in undeclared fields: {', '.join(bad)}")
    return differing


def _align(records: list[dict], grid: list[int], metric: str) -> list[float]:
    out, j = [], 0
    for b in grid:
        while j + 1 < len(records) and records[j + 1]["budget_used"] <= b:
            j += 1
        out.append(records[j][metric])
    return out


def parse_compare_config(doc: dict, base_dir=None) -> dict:
    """Validate a comparison document.

    ``{"version": 1, "metric": "heldout_metric", "declared": [...],
    "seeds": [...], "base": {...}, "variants": {"name": {overrides}}}``
    or, instead of ``base``/``variants``, an explicit ``"runs": [{"name", "config"}]`` list.
    """
    if not isinstance(doc, dict) or doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"compare config needs \"version\": {CONFIG_VERSION}")
    unknown = set(doc) - {"version", "metric", "declared", "seeds", "base", "variants", "runs"}
    if unknown:
        raise ConfigError(f"unknown compare keys {sorted(unknown)}")
    metric = doc.get("metric", "heldout_metric")
    if metric not in REPORT_FIELDS[2:]:
        raise ConfigError(f"metric must be one of {REPORT_FIELDS[2:]}")
    declared = doc.get("declared", [])
    if not isinstance(declared, list) or not all(isinstance(d, str) for d in declared):
        raise ConfigError("declared must be a list of dotted config keys")
    seeds = doc.get("seeds")
    if seeds is not None and (not isinstance(seeds, list) or not seeds
                              or not all(isinstance(s, int) and s >= 0 for s in seeds)):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    runs = []
    if "runs" in doc:
        if "base" in doc or "variants" in doc:
            raise ConfigError("use either runs or base/variants, not both")
        for entry in doc["runs"]:
            if not isinstance(entry, dict) or set(entry) != {"name", "config"}:
                raise ConfigError("each run needs exactly a name and a config")
            runs.append((entry["name"], entry["config"]))
    else:
        base, variants = doc.get("base"), doc.get("variants")
        if not isinstance(base, dict) or not isinstance(variants, dict):
            raise ConfigError("compare config needs base and variants (or runs)")
        for name, override in variants.items():
            merged = copy.deepcopy(base)
            for section, value in override.items():
                if isinstance(value, dict) and isinstance(merged.get(section), dict):
                    merged[section] = {**merged[section], **value}
                else:
                    merged[section] = value
            runs.append((name, merged))
    if len(runs) < 2:
        raise ConfigError("compare needs at least two runs")
    names = [n for n, _ in runs]
    if len(set(names)) != len(names) or not all(isinstance(n, str) and n for n in names):
        raise ConfigError("run names must be distinct non-empty strings")
    parsed = []
    for name, run_doc in runs:
        if seeds is not None:
            run_doc = dict(run_doc, seed=seeds[0])
        parsed.append((name, parse_config(run_doc, base_dir)))
    check_confounds([c for _, c in parsed], declared)
    return {"metric": metric, "declared": declared, "seeds": seeds, "runs": parsed}


def compare(spec: dict, out_dir=None) -> dict:
    """Run every member config (once per seed) and join the curves on oracle budget used.

    Writes ``curves.csv`` (one row per run, seed and budget point),
    ``median_curves.csv`` (median over seeds) and ``summary.json`` with the
    final median per run.
    """
    metric = spec["metric"]
    out = Path(out_dir) if out_dir is not None else None
    results = {}
    for name, cfg in spec["runs"]:
        seeds = spec["seeds"] or [cfg.seed]
        for seed in seeds:
            member = ExperimentConfig(dict(copy.deepcopy(cfg.raw), seed=seed), cfg.base_dir)
            sub = out / "runs" / f"{name}_seed{seed}" if out is not None else None
            results[(name, seed)] = run(member, sub).records
    grid = sorted({r["budget_used"] for recs in results.values() for r in recs})
    aligned = {key: _align(recs, grid, metric) for key, recs in results.items()}
    names = [name for name, _ in spec["runs"]]
    medians = {}
    for name in names:
        rows = np.array([v for (n, _), v in aligned.items() if n == name], dtype=np.float64)
        medians[name] = np.median(rows, axis=0).tolist()
    summary = {
        "metric": metric,
        "declared": spec["declared"],
        "seeds": spec["seeds"],
        "final_median": {name: medians[name][-1] for name in names},
        "final": {f"{n}_seed{s}": v[-1] for (n, s), v in aligned.items()},
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "seed", "budget_used", metric])
        for (name, seed), values in aligned.items():
            for b, v in zip(grid, values):
                writer.writerow([name, seed, b, _fmt(v)])
        (out / "curves.csv").write_text(buf.getvalue(), encoding="utf-8")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["budget_used", *names])
        for i, b in enumerate(grid):
            writer.writerow([b, *(_fmt(medians[n][i]) for n in names)])
        (out / "median_curves.csv").write_text(buf.getvalue(), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def load_compare_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_compare_config(doc, path.parent)
