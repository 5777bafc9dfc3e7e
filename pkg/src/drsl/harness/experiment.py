"""Seeded experiment runner: train every loss arm on every seed, attack, analyse.

Artifacts under ``output.dir``:

    metrics.csv        per-seed rows plus mean/std aggregate rows
    train_log.csv      per-epoch training loss
    summary.json       histograms, correlations, second-argmax breakdowns, checks
    pca.csv            2-D PCA of softmax outputs (clean / adversarial / noisy)
    checkpoints/*.ckpt trained parameters in the DRSL container format
"""

import csv
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import container
from ..analysis import (
    evaluate_attack,
    pca_project,
    pearson_correlation,
    predict_probs,
    second_argmax_report,
    stochasticity_from_probs,
)
from ..data import inject_label_noise, load_dataset
from ..errors import ComparisonError, ContractError
from ..models import init_model, load_checkpoint, save_checkpoint
from ..training import param_checksum, train

log = logging.getLogger(__name__)

COLUMNS = ["run_id", "seed", "loss_kind", "tau", "metric", "epoch_or_eps", "phase", "clean_acc",
           "robust_acc", "asr", "stoch_mean", "second_argmax_rate", "noise_rate"]
NUMERIC = COLUMNS[7:]
MATCHED_ACCURACY_GAP = 0.005
INCOMPLETE_MARKER = "RUN_INCOMPLETE"


@dataclass
class MetricsReport:
    config_hash: str
    rows: list = field(default_factory=list)  # per-seed rows, dicts keyed by COLUMNS
    train_log: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    pca: list = field(default_factory=list)  # (arm, kind, label, pc1, pc2)

    def arms(self):
        seen = []
        for r in self.rows:
            if r["run_id"] not in seen:
                seen.append(r["run_id"])
        return seen

    def select(self, run_id=None, phase=None):
        return [r for r in self.rows
                if (run_id is None or r["run_id"] == run_id) and (phase is None or r["phase"] == phase)]

    def aggregate_rows(self):
        return aggregate(self.rows)


def arm_id(config_hash, spec):
    return f"{config_hash}-{spec.label}"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _row(run_id, seed, spec, epoch_or_eps, phase, **metrics):
    row = {"run_id": run_id, "seed": seed, "loss_kind": spec.kind,
           "tau": spec.tau if spec.kind == "drsl" else (spec.q if spec.kind == "gce" else 0.0),
           "metric": spec.metric if spec.kind == "drsl" else "", "epoch_or_eps": epoch_or_eps, "phase": phase}
    for col in NUMERIC:
        row[col] = metrics.get(col, float("nan"))
    return row


def aggregate(rows):
    """Mean and population std over seeds for every (run_id, phase, epoch_or_eps)."""
    groups = {}
    for r in rows:
        if r["seed"] in ("mean", "std"):
            continue
        groups.setdefault((r["run_id"], r["phase"], r["epoch_or_eps"]), []).append(r)
    out = []
    for (_, _, _), members in groups.items():
        first = members[0]
        for stat in ("mean", "std"):
            agg = {k: first[k] for k in COLUMNS[:7]}
            agg["seed"] = stat
            for col in NUMERIC:
                vals = np.array([float(m[col]) for m in members])
                agg[col] = float(np.mean(vals)) if stat == "mean" else float(np.std(vals))
            out.append(agg)
    return out


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if r["seed"] not in ("mean", "std"):
            r["seed"] = int(r["seed"])
        for col in ["tau", "epoch_or_eps"] + NUMERIC:
            r[col] = float(r[col]) if r[col] != "" else float("nan")
        if r["phase"] == "train":
            r["epoch_or_eps"] = int(r["epoch_or_eps"])
    return rows


# ---------------------------------------------------------------------------
# the runner
# ---------------------------------------------------------------------------

_DATA = {}


def _datasets(config):
    key = (config.dataset, config["data.dir"], config["data.subset_size"], config["data.test_subset_size"])
    if key not in _DATA:
        train_set = load_dataset(config.dataset, config["data.dir"], "train").take(config["data.subset_size"])
        test_set = load_dataset(config.dataset, config["data.dir"], "test").take(config["data.test_subset_size"])
        _DATA.clear()
        _DATA[key] = (train_set, test_set)
    return _DATA[key]


def _ckpt_path(out_dir, spec, seed, noisy=False):
    return os.path.join(out_dir, "checkpoints", f"{spec.label}-seed{seed}{'-noisy' if noisy else ''}.ckpt")


def _train_job(args):
    """Train one (arm, seed) pair; returns rows and the trained models."""
    config, spec, seed, out_dir = args
    train_set, test_set = _datasets(config)
    metric = config["analysis.metric"]
    bins = config["analysis.bins"]
    run_id = arm_id(config.config_hash, spec)
    rows, train_log = [], []

    model = init_model(config.model_config(seed), seed)

    def snapshot(epoch, loss):
        probs = predict_probs(model, test_set)
        acc = float(np.mean(np.argmax(probs, axis=1) == test_set.labels))
        st = stochasticity_from_probs(probs, metric, bins)
        rows.append(_row(run_id, seed, spec, epoch, "train", clean_acc=acc, stoch_mean=st.mean, noise_rate=0.0))
        if loss is not None:
            train_log.append({"run_id": run_id, "seed": seed, "epoch": epoch, "train_loss": loss})

    snapshot(0, None)
    train(model, train_set, spec, config.train_config(), shuffle_seed=seed, on_epoch=snapshot)
    model.freeze()
    save_checkpoint(model, _ckpt_path(out_dir, spec, seed), extra={"loss": spec.label, "seed": seed})

    noisy_model = None
    noise = config.noise_spec()
    if noise.rate > 0:
        noisy_set, _ = inject_label_noise(train_set, noise)
        noisy_model = init_model(config.model_config(seed), seed)
        train(noisy_model, noisy_set, spec, config.train_config(), shuffle_seed=seed)
        noisy_model.freeze()
        probs = predict_probs(noisy_model, test_set)
        acc = float(np.mean(np.argmax(probs, axis=1) == test_set.labels))
        st = stochasticity_from_probs(probs, metric, bins)
        rows.append(_row(run_id, seed, spec, config.train_config().epochs, "noise", clean_acc=acc,
                         stoch_mean=st.mean, noise_rate=noise.rate))
        save_checkpoint(noisy_model, _ckpt_path(out_dir, spec, seed, noisy=True),
                        extra={"loss": spec.label, "seed": seed, "noise_rate": noise.rate})
    return rows, train_log


def _attack_job(args):
    config, spec, seed, out_dir = args
    _, test_set = _datasets(config)
    attack_set = test_set.take(config["data.attack_subset_size"])
    run_id = arm_id(config.config_hash, spec)
    model = load_checkpoint(_ckpt_path(out_dir, spec, seed)).freeze()
    before = param_checksum(model)
    rows, details = [], {}
    for eps in config.epsilons:
        ev = evaluate_attack(model, attack_set, config.attack_spec(eps), training_loss=spec)
        if not ev.identity_holds():
            raise ContractError(f"robust = clean * (1 - ASR) violated for {run_id} seed {seed} eps {eps}")
        sa = second_argmax_report(ev, model.config.num_classes)
        rows.append(_row(run_id, seed, spec, eps, "attack", clean_acc=ev.clean_accuracy,
                         robust_acc=ev.robust_accuracy, asr=ev.asr, second_argmax_rate=sa.overall, noise_rate=0.0))
        details[repr(eps)] = {"success_counts": sa.success_counts.tolist(),
                              "match_counts": sa.match_counts.tolist(), "chance": sa.chance}
        if config["attack.dump"]:
            dump = os.path.join(out_dir, "adversarial", f"{spec.label}-seed{seed}-eps{eps:g}.drsl")
            container.write(dump, {"kind": "adversarial-batch", "loss": spec.label, "seed": seed, "epsilon": eps},
                            {"original": ev.adv.original, "adversarial": ev.adv.adversarial,
                             "labels": ev.labels.astype(np.float64), "predicted": ev.adv.predicted.astype(np.float64)})
    if param_checksum(model) != before:
        raise ContractError(f"attack mutated the parameters of {run_id} seed {seed}")
    return rows, details


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


class Experiment:
    """Stateful view of one config and its output directory."""

    def __init__(self, config, output_dir=None):
        self.config = config
        self.out = output_dir or config.output_dir
        self.workers = int(config["runtime.workers"])

    def _jobs(self):
        return [(self.config, spec, seed, self.out) for spec in self.config.loss_specs() for seed in self.config.seeds]

    # -- phases ------------------------------------------------------------
    def train(self):
        _datasets(self.config)
        results = _map(_train_job, self._jobs(), self.workers)
        rows = [r for rs, _ in results for r in rs]
        logs = [entry for _, lg in results for entry in lg]
        self._replace_rows(("train", "noise"), rows)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run_id", "seed", "epoch", "train_loss"])
        for e in logs:
            w.writerow([e["run_id"], e["seed"], e["epoch"], repr(e["train_loss"])])
        container.atomic_write_bytes(os.path.join(self.out, "train_log.csv"), buf.getvalue().encode())
        return rows

    def attack(self):
        for spec in self.config.loss_specs():
            for seed in self.config.seeds:
                if not os.path.exists(_ckpt_path(self.out, spec, seed)):
                    raise ContractError(f"missing checkpoint for {spec.label} seed {seed}; run `train` first")
        _datasets(self.config)
        results = _map(_attack_job, self._jobs(), self.workers)
        rows = [r for rs, _ in results for r in rs]
        details = {}
        for (cfg, spec, seed, _), (_, d) in zip(self._jobs(), results):
            details.setdefault(spec.label, {})[str(seed)] = d
        self._replace_rows(("attack",), rows)
        self._update_summary({"second_argmax_counts": details})
        return rows

    def analyze(self):
        """Histograms, per-epoch correlation, PCA and the matched-accuracy check."""
        cfg = self.config
        _, test_set = _datasets(cfg)
        rows = self.rows()
        metric, bins = cfg["analysis.metric"], cfg["analysis.bins"]
        summary = {"config_hash": cfg.config_hash, "config": cfg.semantic_dict(), "arms": {}, "warnings": []}
        pca_rows = []
        first_seed = cfg.seeds[0]
        n_pca = int(cfg["analysis.pca_points"])
        pca_set = test_set.take(n_pca)
        for spec in cfg.loss_specs():
            run_id = arm_id(cfg.config_hash, spec)
            model = load_checkpoint(_ckpt_path(self.out, spec, first_seed)).freeze()
            probs = predict_probs(model, test_set)
            st = stochasticity_from_probs(probs, metric, bins)
            train_rows = [r for r in rows if r["run_id"] == run_id and r["phase"] == "train" and r["seed"] == first_seed]
            accs = [r["clean_acc"] for r in train_rows]
            dists = [r["stoch_mean"] for r in train_rows]
            try:
                r_epoch = pearson_correlation(accs, dists)
            except (ValueError, ArithmeticError):
                r_epoch = None
            final = [r for r in rows if r["run_id"] == run_id and r["phase"] == "train"
                     and r["epoch_or_eps"] == cfg.train_config().epochs]
            arm = {
                "label": spec.label,
                "loss": {"kind": spec.kind, "q": spec.q, "tau": spec.tau, "metric": spec.metric},
                "stochasticity": {"seed": first_seed, "metric": metric, "mean": st.mean, "std": st.std,
                                  "histogram": st.histogram.tolist(), "bin_edges": st.bin_edges.tolist()},
                "epoch_correlation": {"seed": first_seed, "accuracy": accs, "distance": dists, "pearson_r": r_epoch},
                "final_clean_acc_mean": float(np.mean([r["clean_acc"] for r in final])) if final else None,
            }
            # PCA of clean softmax, with adversarial and noisy outputs projected into the same plane
            fit = pca_project(probs[:n_pca])
            for lab, (a, b) in zip(pca_set.labels, fit.projected):
                pca_rows.append((spec.label, "clean", int(lab), float(a), float(b)))
            ev = evaluate_attack(model, pca_set, cfg.attack_spec(cfg.pca_epsilon), training_loss=spec)
            adv_probs = predict_probs(model, pca_set.__class__(ev.adv.adversarial, pca_set.labels, pca_set.name, "test"))
            for lab, (a, b) in zip(pca_set.labels[ev.succeeded], fit.transform(adv_probs[ev.succeeded])):
                pca_rows.append((spec.label, "adversarial", int(lab), float(a), float(b)))
            noisy_path = _ckpt_path(self.out, spec, first_seed, noisy=True)
            if os.path.exists(noisy_path):
                noisy_probs = predict_probs(load_checkpoint(noisy_path).freeze(), pca_set)
                for lab, (a, b) in zip(pca_set.labels, fit.transform(noisy_probs)):
                    pca_rows.append((spec.label, "noisy", int(lab), float(a), float(b)))
            arm["pca"] = {"seed": first_seed, "epsilon": cfg.pca_epsilon, "n_clean": len(pca_set),
                          "n_adversarial": int(ev.succeeded.sum()), "explained_ratio": fit.explained_ratio.tolist()}
            summary["arms"][spec.label] = arm

        summary["matched_accuracy"] = self._matched_accuracy(summary)
        for entry in summary["matched_accuracy"]:
            if not entry["ok"]:
                msg = (f"clean-accuracy gap {entry['gap']:.4f} between {entry['arm']} and {entry['reference']} "
                       f"exceeds {MATCHED_ACCURACY_GAP}")
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
                summary["warnings"].append(msg)
        noise_arms = {}
        for s in cfg.loss_specs():
            accs = [r["clean_acc"] for r in rows if r["run_id"] == arm_id(cfg.config_hash, s) and r["phase"] == "noise"]
            if accs:
                noise_arms[s.label] = np.mean(accs)
        if noise_arms:
            summary["noise"] = {"rate": cfg.noise_spec().rate, "model": "symmetric",
                                "mean_test_acc": {k: float(v) for k, v in noise_arms.items()}}
        self._update_summary(summary)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "kind", "label", "pc1", "pc2"])
        for r in pca_rows:
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4])])
        container.atomic_write_bytes(os.path.join(self.out, "pca.csv"), buf.getvalue().encode())
        return summary

    def _matched_accuracy(self, summary):
        arms = list(summary["arms"].values())
        if not arms:
            return []
        ref = next((a for a in arms if a["loss"]["kind"] == "ce"), arms[0])
        out = []
        for a in arms:
            if a is ref or a["final_clean_acc_mean"] is None:
                continue
            gap = abs(a["final_clean_acc_mean"] - ref["final_clean_acc_mean"])
            out.append({"arm": a["label"], "reference": ref["label"], "gap": gap,
                        "ok": gap <= MATCHED_ACCURACY_GAP + 1e-12})  # accuracies are ratios; absorb rounding
        return out

    # -- files -------------------------------------------------------------
    @property
    def metrics_path(self):
        return os.path.join(self.out, "metrics.csv")

    def rows(self):
        if not os.path.exists(self.metrics_path):
            return []
        return [r for r in read_metrics_csv(self.metrics_path) if r["seed"] not in ("mean", "std")]

    def _replace_rows(self, phases, new_rows):
        kept = [r for r in self.rows() if r["phase"] not in phases]
        order = {"train": 0, "noise": 1, "attack": 2}
        arm_order = {arm_id(self.config.config_hash, s): i for i, s in enumerate(self.config.loss_specs())}
        rows = sorted(kept + list(new_rows), key=lambda r: (arm_order.get(r["run_id"], len(arm_order)), r["seed"],
                                                             order[r["phase"]], r["epoch_or_eps"]))
        payload = rows_to_csv(rows + aggregate(rows))
        container.atomic_write_bytes(self.metrics_path, payload.encode())

    def _update_summary(self, patch):
        path = os.path.join(self.out, "summary.json")
        current = {}
        if os.path.exists(path):
            with open(path) as fh:
                current = json.load(fh)
        current.update(patch)
        blob = json.dumps(_jsonable(current), indent=2, sort_keys=True, allow_nan=True) + "\n"
        container.atomic_write_bytes(path, blob.encode())

    def report(self):
        return load_report(self.out)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def load_report(output_dir):
    path = os.path.join(output_dir, "metrics.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no metrics.csv in {output_dir}")
    rows = [r for r in read_metrics_csv(path) if r["seed"] not in ("mean", "std")]
    summary, pca, train_log = {}, [], []
    spath = os.path.join(output_dir, "summary.json")
    if os.path.exists(spath):
        with open(spath) as fh:
            summary = json.load(fh)
    ppath = os.path.join(output_dir, "pca.csv")
    if os.path.exists(ppath):
        with open(ppath, newline="") as fh:
            pca = [(r["arm"], r["kind"], int(r["label"]), float(r["pc1"]), float(r["pc2"])) for r in csv.DictReader(fh)]
    tpath = os.path.join(output_dir, "train_log.csv")
    if os.path.exists(tpath):
        with open(tpath, newline="") as fh:
            train_log = list(csv.DictReader(fh))
    config_hash = rows[0]["run_id"].split("-", 1)[0] if rows else summary.get("config_hash", "")
    return MetricsReport(config_hash, rows, train_log, summary, pca)


def run_experiment(config, output_dir=None):
    """Train, attack and analyse every loss arm on every seed; returns the report.

    A ``RUN_INCOMPLETE`` marker sits in the output directory while the run is
    in progress and is left behind (with the error) if it fails.
    """
    exp = Experiment(config, output_dir)
    os.makedirs(exp.out, exist_ok=True)
    marker = os.path.join(exp.out, INCOMPLETE_MARKER)
    with open(marker, "w") as fh:
        fh.write(f"config {config.config_hash}: run started\n")
    for stale in ("metrics.csv", "summary.json", "pca.csv", "train_log.csv"):
        p = os.path.join(exp.out, stale)
        if os.path.exists(p):
            os.unlink(p)
    try:
        exp.train()
        exp.attack()
        exp.analyze()
    except BaseException as exc:
        with open(marker, "a") as fh:
            fh.write(f"failed: {type(exc).__name__}: {exc}\n")
        raise
    os.unlink(marker)
    return exp.report()


# ---------------------------------------------------------------------------
# comparisons
# ---------------------------------------------------------------------------

def _attack_table(report, run_id):
    table = {}
    for r in report.rows:
        if r["phase"] == "attack" and r["run_id"] == run_id:
            table.setdefault(r["epoch_or_eps"], {})[r["seed"]] = r["robust_acc"]
    return table


def _pick_arm(report, run_id):
    arms = [a for a in report.arms() if any(r["phase"] == "attack" and r["run_id"] == a for r in report.rows)]
    if run_id is None:
        if len(arms) != 1:
            raise ComparisonError(f"report holds {len(arms)} attacked arms; name one explicitly")
        return arms[0]
    matches = [a for a in arms if a == run_id or a.split("-", 1)[1] == run_id]
    if not matches:
        raise ComparisonError(f"arm {run_id!r} not found among {arms}")
    return matches[0]


def compare_runs(report_a, report_b, arm_a=None, arm_b=None):
    """Per-epsilon mean robust-accuracy difference (a - b) with per-seed sign counts."""
    ta = _attack_table(report_a, _pick_arm(report_a, arm_a))
    tb = _attack_table(report_b, _pick_arm(report_b, arm_b))
    if sorted(ta) != sorted(tb):
        raise ComparisonError(f"epsilon grids differ: {sorted(ta)} vs {sorted(tb)}")
    out = []
    for eps in sorted(ta):
        seeds_a, seeds_b = sorted(ta[eps]), sorted(tb[eps])
        if seeds_a != seeds_b:
            raise ComparisonError(f"seed sets differ at eps={eps}: {seeds_a} vs {seeds_b}")
        diffs = np.array([ta[eps][s] - tb[eps][s] for s in seeds_a])
        mean_a = float(np.mean([ta[eps][s] for s in seeds_a]))
        mean_b = float(np.mean([tb[eps][s] for s in seeds_a]))
        out.append({"epsilon": eps, "mean_a": mean_a, "mean_b": mean_b, "diff": mean_a - mean_b,
                    "seeds_a_better": int((diffs > 0).sum()), "seeds_b_better": int((diffs < 0).sum()),
                    "seeds_tied": int((diffs == 0).sum())})
    return out
