"""Prune / gradient-norm / train / NTK / report pipelines driven by a validated config.

All outputs go under ``cfg["out"]``. Every file written is recorded, with its
SHA-256, in ``manifest.json`` next to it. Scores are cached under
``cache/scores`` keyed by a hash of everything they depend on, so later
commands reuse what ``prune`` computed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .container import read_container, write_container
from .criteria import (
    Mask,
    POLARITY,
    ScoreVector,
    compute_mask,
    compute_scores,
    dataset_gradient_flow,
    ones_mask,
    weight_gradient,
)
from .data import (
    Dataset,
    ScoringBatchPolicy,
    load_digits_images,
    load_idx,
    sample_scoring_batch,
    sample_scoring_batches,
    synthetic_gaussian_mixture,
)
from .nn import ModelSpec, ReLU, Tanh, init_params, mlp, reference_spec
from .ntk import (
    compute_ntk,
    eigen,
    gd_residual_curve,
    gradient_norm_decomposition,
    linearized_error_curve,
    network_outputs,
    output_gradient,
)
from .train import TrainConfig, train

MANIFEST = "manifest.json"
STREAMS = {"init": 0, "scoring": 1, "baseline": 2, "train": 3, "ntk": 4}


def derive_seed(base: int, trial: int, stream: str) -> int:
    """Independent 32-bit seed per (base seed, trial, purpose)."""
    return int(np.random.SeedSequence([base, trial, STREAMS[stream]]).generate_state(1)[0])


def code_hash() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".yaml") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ratio_tag(ratio: float) -> str:
    return f"p{ratio:g}"


def write_csv(path: Path, header: list[str], rows) -> Path:
    """Write rows with ``repr`` floats so values survive a text round trip."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def mean_ci(values, level: float = 0.95) -> tuple[float, float, float]:
    """Mean and a Student-t confidence interval (NaN bounds for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if len(v) < 2:
        return m, float("nan"), float("nan")
    half = float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / np.sqrt(len(v)))
    return m, m - half, m + half


def format_cell(mean_pct: float, std_pct: float) -> str:
    """Accuracy cell in the ``93.04(0.2)`` style."""
    return f"{mean_pct:.2f}({std_pct:.1f})"


def build_model(cfg: dict, dataset: Dataset) -> ModelSpec:
    shape = tuple(dataset.images.shape[1:])
    model = cfg["model"]
    if isinstance(model, str):
        return reference_spec(model, input_shape=shape, num_classes=dataset.num_classes)
    act = {"relu": ReLU, "tanh": Tanh}[model["activation"]]
    return mlp(model["sizes"], name="mlp-" + "-".join(map(str, model["sizes"])), activation=act, input_shape=shape)


def load_datasets(ds: dict) -> tuple[Dataset, Dataset]:
    source = ds["source"]
    if source == "digits":
        train_set = load_digits_images(ds["side"], "train", ds["n_train"])
        return train_set, load_digits_images(ds["side"], "test", ds["n_train"], stats=train_set.stats)
    if source == "synthetic":
        args = (ds["k"], ds["dim"], ds["separation"])
        tr = synthetic_gaussian_mixture(args[0], ds["n_per_class"], args[1], args[2], ds["seed"], "train")
        te = synthetic_gaussian_mixture(args[0], ds["test_per_class"], args[1], args[2], ds["seed"], "test")
        return tr, te
    if source == "idx":
        tr = load_idx(ds["train_images"], ds["train_labels"], "train")
        return tr, load_idx(ds["test_images"], ds["test_labels"], "test", stats=tr.stats, num_classes=tr.num_classes)
    if source == "container":
        return Dataset.load(ds["train"]), Dataset.load(ds["test"])
    raise ValueError(f"unknown dataset source {source!r}")


def _run_jobs(fn, cfg: dict, jobs: list, workers: int) -> list:
    """Run ``fn(cfg, job)`` for every job; results come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(cfg, job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(jobs), jobs))


class Experiment:
    """Shared state for one config: datasets, model, seeds, caches and the output record."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.train_set, self.test_set = load_datasets(cfg["dataset"])
        self.spec = build_model(cfg, self.train_set)
        self.written: dict[str, str] = {}
        self.cache_stats = {"score_hits": 0, "score_misses": 0}
        self._params: dict[int, object] = {}

    # ------------------------------------------------------------ seeds & inputs

    def seed(self, trial: int, stream: str) -> int:
        return derive_seed(self.cfg["seed"], trial, stream)

    def seeds(self) -> dict:
        return {str(t): {s: self.seed(t, s) for s in STREAMS} for t in range(self.cfg["trials"])}

    def params(self, trial: int):
        if trial not in self._params:
            self._params[trial] = init_params(self.spec, self.cfg["init"], self.seed(trial, "init"))
        return self._params[trial]

    def scoring_batches(self, trial: int):
        sc = self.cfg["scoring"]
        policy = ScoringBatchPolicy(sc["per_class"], self.seed(trial, "scoring"), sc["balanced"])
        return sample_scoring_batches(self.train_set, policy, sc["batches"])

    def record(self, path: Path) -> Path:
        self.written[path.relative_to(self.out).as_posix()] = file_hash(path)
        return path

    # ---------------------------------------------------------- scores & masks

    def score_temperature(self, criterion: str) -> float | None:
        return {"grasp": self.cfg["temperature"], "snip": self.cfg["snip_temperature"]}.get(criterion)

    def score_key(self, criterion: str, trial: int) -> str:
        params = self.params(trial)
        h = hashlib.sha256()
        h.update(json.dumps({
            "criterion": criterion,
            "model": self.spec.name,
            "layout": [[n, list(s), p] for n, s, p in params.layout()],
            "temperature": self.score_temperature(criterion),
            "seed": self.seed(trial, "baseline") if criterion == "random" else None,
        }, sort_keys=True).encode())
        for t in params.tensors:
            h.update(np.ascontiguousarray(t).tobytes())
        if criterion in ("grasp", "snip"):
            for b in self.scoring_batches(trial):
                h.update(b.fingerprint.encode())
        return h.hexdigest()[:24]

    def scores(self, criterion: str, trial: int) -> ScoreVector:
        key = self.score_key(criterion, trial)
        path = self.out / "cache" / "scores" / f"{criterion}-{key}.fsct"
        params = self.params(trial)
        if path.exists():
            _, arrays = read_container(path, kind="scores")
            self.cache_stats["score_hits"] += 1
            return ScoreVector(arrays["scores"], criterion, params.layout())
        self.cache_stats["score_misses"] += 1
        batches = self.scoring_batches(trial) if criterion in ("grasp", "snip") else None
        sv = compute_scores(criterion, self.spec, params, batches, self.score_temperature(criterion) or 1.0,
                            seed=self.seed(trial, "baseline"))
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        write_container(tmp, "scores", [{"name": "scores", "array": sv.values}],
                        {"criterion": criterion, "key": key, "polarity": POLARITY[criterion].value})
        os.replace(tmp, path)
        return sv

    def mask_path(self, criterion: str, ratio: float, trial: int) -> Path:
        return self.out / "masks" / criterion / f"{ratio_tag(ratio)}_t{trial}.fsct"

    def mask(self, criterion: str, ratio: float, trial: int, save: bool = False) -> Mask:
        """Mask for one grid cell: loaded from disk if a matching file exists."""
        path = self.mask_path(criterion, ratio, trial)
        key = self.score_key(criterion, trial)
        if path.exists():
            header, _ = read_container(path, kind="mask")
            if header["meta"].get("score_key") == key:
                return Mask.load(path)
        m = compute_mask(self.scores(criterion, trial), ratio, seed=self.seed(trial, "baseline"),
                         fingerprint=self.train_set.fingerprint)
        if save:
            path.parent.mkdir(parents=True, exist_ok=True)
            m.save(path, {"score_key": key, "trial": trial, "balanced_scoring": self.cfg["scoring"]["balanced"]})
        return m

    # ---------------------------------------------------------------- manifest

    def assumptions(self) -> dict:
        """Settings the method description leaves open, recorded with every run."""
        tc = self.cfg["train"]
        return {
            "momentum": {"value": tc["momentum"], "note": "not specified by the method; assumed"},
            "weight_decay": {"value": tc["weight_decay"], "note": "not specified by the method; assumed"},
            "scoring_temperature": {"value": self.cfg["temperature"], "note": "value not specified; assumed"},
            "training_temperature": {"value": 1.0, "note": "scoring temperature is not applied in training"},
            "class_balanced_scoring": {"value": self.cfg["scoring"]["balanced"],
                                       "note": "balance of the scoring batch is not specified"},
        }

    def write_manifest(self, command: str) -> Path:
        """Merge this command's outputs into ``manifest.json`` (the only writer)."""
        path = self.out / MANIFEST
        manifest = json.loads(path.read_text()) if path.exists() else {}
        if manifest.get("config") not in (None, self.cfg):
            manifest = {}  # a different config owned this directory before
        manifest.update({
            "manifest_version": 1,
            "code_version": __version__,
            "code_hash": code_hash(),
            "config": self.cfg,
            "seeds": self.seeds(),
            "dataset_fingerprints": {"train": self.train_set.fingerprint, "test": self.test_set.fingerprint},
            "model": self.spec.name,
            "assumptions": self.assumptions(),
        })
        commands = manifest.setdefault("commands", {})
        commands[command] = {"outputs": dict(sorted(self.written.items())), "cache": dict(self.cache_stats)}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ======================================================================= prune


def run_prune(exp: Experiment, bins: int = 50) -> dict:
    cfg = exp.cfg
    survival_rows, hist_rows = [], []
    for trial in range(cfg["trials"]):
        params = exp.params(trial)
        exp.record(params.save(exp.out / "params" / f"init_t{trial}.fsct", {"trial": trial}))
        for criterion in cfg["criteria"]:
            sv = exp.scores(criterion, trial)
            counts, edges = np.histogram(sv.values, bins=bins)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                hist_rows.append([criterion, trial, float(lo), float(hi), int(c)])
            for ratio in cfg["ratios"]:
                m = exp.mask(criterion, ratio, trial, save=True)
                exp.record(exp.mask_path(criterion, ratio, trial))
                for name, kept, size in m.survival():
                    survival_rows.append([criterion, ratio, trial, name, kept, size, kept / size])
    exp.record(write_csv(
        exp.out / "prune" / "survival.csv",
        ["criterion", "ratio[fraction]", "trial", "layer", "kept[weights]", "size[weights]", "survival[fraction]"],
        survival_rows,
    ))
    exp.record(write_csv(
        exp.out / "prune" / "score_histogram.csv",
        ["criterion", "trial", "bin_lo[score]", "bin_hi[score]", "count[weights]"],
        hist_rows,
    ))
    return {"masks": len(cfg["criteria"]) * len(cfg["ratios"]) * cfg["trials"]}


# ==================================================================== gradnorm


def run_gradnorm(exp: Experiment) -> dict:
    """Full-dataset gradient flow after pruning, relative to the unpruned network."""
    cfg = exp.cfg
    gn = cfg["gradnorm"]
    per_trial = []
    for trial in range(cfg["trials"]):
        params = exp.params(trial)
        dense = dataset_gradient_flow(exp.spec, params, exp.train_set, gn["temperature"], None, gn["batch_size"])
        for criterion in cfg["criteria"]:
            for ratio in cfg["ratios"]:
                m = exp.mask(criterion, ratio, trial)
                flow = dataset_gradient_flow(exp.spec, params, exp.train_set, gn["temperature"], m, gn["batch_size"])
                per_trial.append([criterion, ratio, trial, dense, flow, flow / dense, float(np.sqrt(flow / dense))])
    exp.record(write_csv(
        exp.out / "gradnorm" / "trials.csv",
        ["criterion", "ratio[fraction]", "trial", "dense_flow[squared_l2]", "pruned_flow[squared_l2]",
         "flow_ratio[1]", "norm_ratio[1]"],
        per_trial,
    ))
    summary = []
    for criterion in cfg["criteria"]:
        for ratio in cfg["ratios"]:
            rows = [r for r in per_trial if r[0] == criterion and r[1] == ratio]
            nm, nlo, nhi = mean_ci([r[6] for r in rows])
            fm, flo, fhi = mean_ci([r[5] for r in rows])
            summary.append([criterion, ratio, len(rows), nm, nlo, nhi, fm, flo, fhi])
    exp.record(write_csv(
        exp.out / "gradnorm" / "summary.csv",
        ["criterion", "ratio[fraction]", "trials", "norm_ratio_mean[1]", "norm_ratio_ci95_lo[1]",
         "norm_ratio_ci95_hi[1]", "flow_ratio_mean[1]", "flow_ratio_ci95_lo[1]", "flow_ratio_ci95_hi[1]"],
        summary,
    ))
    return {"cells": len(summary)}


# ======================================================================= train


def _train_job(cfg: dict, job: tuple):
    exp = Experiment(cfg)
    return _train_cell(exp, *job)


def _train_cell(exp: Experiment, criterion: str, ratio: float, trial: int):
    tc = exp.cfg["train"]
    config = TrainConfig(tc["epochs"], tc["batch_size"], tc["lr"], tc["momentum"], tc["weight_decay"],
                         tuple(tc["milestones"]), tc["gamma"], exp.seed(trial, "train"))
    mask = exp.mask(criterion, ratio, trial)
    monitor = sample_scoring_batch(exp.train_set, ScoringBatchPolicy(exp.cfg["scoring"]["per_class"],
                                                                     exp.seed(trial, "scoring")))
    _, record = train(exp.spec, exp.params(trial), mask, exp.train_set, config, exp.test_set, monitor)
    path = exp.out / "train" / criterion / f"{ratio_tag(ratio)}_t{trial}.csv"
    record.write_csv(path)
    return path, record.test_acc[-1] if record.test_acc else float("nan"), dict(exp.cache_stats)


def run_train(exp: Experiment) -> dict:
    cfg = exp.cfg
    jobs = [(c, r, t) for c in cfg["criteria"] for r in cfg["ratios"] for t in range(cfg["trials"])]
    if cfg["workers"] > 1:
        results = _run_jobs(_train_job, cfg, jobs, cfg["workers"])
        for *_, cache in results:
            for k in exp.cache_stats:
                exp.cache_stats[k] += cache[k]
    else:
        results = [_train_cell(exp, *job) for job in jobs]
    acc = {}
    for job, (path, final_acc, _) in zip(jobs, results):
        exp.record(path)
        acc[job] = final_acc
    rows, table = [], {}
    for c in cfg["criteria"]:
        for r in cfg["ratios"]:
            vals = np.array([acc[(c, r, t)] for t in range(cfg["trials"])]) * 100.0
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            cell = format_cell(float(vals.mean()), std)
            table[(c, r)] = cell
            rows.append([c, r, len(vals), float(vals.mean()), std, cell])
    exp.record(write_csv(
        exp.out / "train" / "accuracy.csv",
        ["criterion", "ratio[fraction]", "trials", "test_acc_mean[percent]", "test_acc_std[percent]", "cell"],
        rows,
    ))
    lines = ["| criterion | " + " | ".join(f"{r:g}" for r in cfg["ratios"]) + " |",
             "|---" * (len(cfg["ratios"]) + 1) + "|"]
    for c in cfg["criteria"]:
        lines.append(f"| {c} | " + " | ".join(table[(c, r)] for r in cfg["ratios"]) + " |")
    path = exp.out / "train" / "accuracy_table.md"
    path.write_text("\n".join(lines) + "\n")
    exp.record(path)
    return {"runs": len(jobs)}


# ========================================================================= ntk


def ntk_inputs(exp: Experiment):
    policy = ScoringBatchPolicy(exp.cfg["ntk"]["per_class"], exp.seed(0, "ntk"))
    return sample_scoring_batch(exp.train_set, policy)


def run_ntk(exp: Experiment) -> dict:
    """Spectra and gradient-norm decompositions per mask, plus the linearized-dynamics check."""
    cfg, nk = exp.cfg, exp.cfg["ntk"]
    batch = ntk_inputs(exp)
    params = exp.params(0)
    check_rows = []
    cells = [("dense", 0.0)] + [(c, r) for c in cfg["criteria"] for r in nk["ratios"] if r > 0]
    for criterion, ratio in cells:
        mask = ones_mask(params) if criterion == "dense" else exp.mask(criterion, ratio, 0)
        eig = eigen(compute_ntk(exp.spec, params, mask, batch.x, nk["budget"]))
        tag = "dense" if criterion == "dense" else f"{criterion}_{ratio_tag(ratio)}"
        exp.record(write_csv(exp.out / "ntk" / f"spectrum_{tag}.csv", ["index", "eigenvalue[1]"],
                             [[i, float(v)] for i, v in enumerate(eig.values)]))
        gz = output_gradient(exp.spec, params, mask, batch.x, batch.y)
        proj = eig.vectors.T @ gz
        contrib = gradient_norm_decomposition(eig, gz)
        exp.record(write_csv(
            exp.out / "ntk" / f"gradnorm_terms_{tag}.csv",
            ["index", "eigenvalue[1]", "projection[1]", "contribution[squared_l2]"],
            [[i, float(l), float(p), float(c)] for i, (l, p, c) in enumerate(zip(eig.values, proj, contrib))],
        ))
        direct = float(sum(np.vdot(g, g) for g in weight_gradient(exp.spec, params, batch, 1.0, mask)))
        total = float(contrib.sum())
        check_rows.append([tag, ratio, len(eig.values), total, direct, abs(total - direct) / direct])
    exp.record(write_csv(
        exp.out / "ntk" / "gradnorm_identity.csv",
        ["mask", "ratio[fraction]", "eigenvalues", "sum_of_terms[squared_l2]", "gradient_norm_sq[squared_l2]",
         "rel_error[1]"],
        check_rows,
    ))
    result = {"masks": len(cells)}
    if nk["dynamics"] is not None:
        result["dynamics_max_rel_error"] = _run_dynamics(exp, nk["dynamics"])
    return result


def linearized_dynamics(width: int, n: int, dim: int, steps: int, lr_scale: float, seed: int):
    """Predicted and actual residual norms for a wide two-layer ReLU MLP with scalar output."""
    rng = np.random.default_rng(seed)
    spec = mlp([dim, width, 1], name=f"wide-{width}", input_shape=(1, 1, dim))
    params = init_params(spec, "kaiming", derive_seed(seed, 0, "init"))
    x = rng.normal(size=(n, 1, 1, dim))
    y = rng.normal(size=(n, 1))
    eig = eigen(compute_ntk(spec, params, None, x))
    lr = lr_scale / eig.lambda_max
    predicted = linearized_error_curve(eig, y, lr, steps, network_outputs(spec, params, x))
    actual = gd_residual_curve(spec, params, x, y, lr, steps)
    return predicted, actual, lr, eig


def _run_dynamics(exp: Experiment, dyn: dict) -> float:
    predicted, actual, lr, eig = linearized_dynamics(**dyn)
    rel = np.abs(predicted - actual) / np.abs(actual)
    exp.record(write_csv(
        exp.out / "ntk" / "dynamics.csv",
        ["step", "predicted_residual[l2]", "actual_residual[l2]", "rel_error[1]"],
        [[t, float(p), float(a), float(r)] for t, (p, a, r) in enumerate(zip(predicted, actual, rel))],
    ))
    exp.record(write_csv(
        exp.out / "ntk" / "dynamics_setup.csv",
        ["width", "n", "dim", "steps", "lr[1]", "lambda_max[1]", "lr_times_lambda_max[1]"],
        [[dyn["width"], dyn["n"], dyn["dim"], dyn["steps"], float(lr), eig.lambda_max, float(lr * eig.lambda_max)]],
    ))
    return float(rel.max())


# ====================================================================== report


def layer_profile(survival_rows: list[dict]) -> tuple[list, list]:
    """Per-layer survival averaged over trials, and the mean per-trial minimum."""
    groups: dict = {}
    for r in survival_rows:
        key = (r["criterion"], float(r["ratio[fraction]"]))
        groups.setdefault(key, {}).setdefault(int(r["trial"]), []).append((r["layer"], float(r["survival[fraction]"])))
    profile, minima = [], []
    for (criterion, ratio), trials in sorted(groups.items()):
        layers = [name for name, _ in trials[min(trials)]]
        fr = np.array([[f for _, f in trials[t]] for t in sorted(trials)])
        for name, mean in zip(layers, fr.mean(axis=0)):
            profile.append([criterion, ratio, name, float(mean)])
        mins = fr.min(axis=1)
        minima.append([criterion, ratio, len(mins), float(mins.mean()), layers[int(np.argmin(fr.mean(axis=0)))]])
    return profile, minima


def run_report(exp: Experiment) -> dict:
    """Collect whatever the other commands produced into summary tables."""
    out = exp.out
    lines = [f"# {exp.cfg['name']}", "", f"model: {exp.spec.name}; train fingerprint {exp.train_set.fingerprint}", ""]
    summary: dict = {}
    survival = out / "prune" / "survival.csv"
    if survival.exists():
        profile, minima = layer_profile(read_csv(survival))
        exp.record(write_csv(out / "report" / "layer_profile.csv",
                             ["criterion", "ratio[fraction]", "layer", "survival_mean[fraction]"], profile))
        exp.record(write_csv(out / "report" / "layer_min_survival.csv",
                             ["criterion", "ratio[fraction]", "trials", "min_survival_mean[fraction]", "argmin_layer"],
                             minima))
        lines += ["## Minimum per-layer survival", "", "| criterion | ratio | mean min survival | layer |",
                  "|---|---|---|---|"]
        lines += [f"| {c} | {r:g} | {m:.4f} | {name} |" for c, r, _, m, name in minima]
        lines.append("")
        summary["layer_min_survival"] = {f"{c}@{r:g}": m for c, r, _, m, _ in minima}
    gradnorm = out / "gradnorm" / "summary.csv"
    if gradnorm.exists():
        rows = read_csv(gradnorm)
        lines += ["## Gradient norm after pruning (relative to dense)", "",
                  "| criterion | ratio | mean | 95% CI |", "|---|---|---|---|"]
        for r in rows:
            lines.append(f"| {r['criterion']} | {float(r['ratio[fraction]']):g} | "
                         f"{float(r['norm_ratio_mean[1]']):.4f} | "
                         f"[{float(r['norm_ratio_ci95_lo[1]']):.4f}, {float(r['norm_ratio_ci95_hi[1]']):.4f}] |")
        lines.append("")
        summary["gradnorm"] = {f"{r['criterion']}@{float(r['ratio[fraction]']):g}": float(r["norm_ratio_mean[1]"])
                               for r in rows}
    table = out / "train" / "accuracy_table.md"
    if table.exists():
        lines += ["## Test accuracy, mean(std) over trials", "", table.read_text()]
        summary["accuracy"] = {f"{r['criterion']}@{float(r['ratio[fraction]']):g}": r["cell"]
                               for r in read_csv(out / "train" / "accuracy.csv")}
    identity = out / "ntk" / "gradnorm_identity.csv"
    if identity.exists():
        rows = read_csv(identity)
        worst = max(float(r["rel_error[1]"]) for r in rows)
        lines += ["## Kernel decomposition of the gradient norm", "", f"max relative error {worst:.3g}", ""]
        summary["gradnorm_identity_max_rel_error"] = worst
    dyn = out / "ntk" / "dynamics.csv"
    if dyn.exists():
        worst = max(float(r["rel_error[1]"]) for r in read_csv(dyn))
        lines += ["## Linearized dynamics", "", f"max relative error over all steps {worst:.3g}", ""]
        summary["dynamics_max_rel_error"] = worst
    path = out / "report" / "report.md"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines).rstrip() + "\n")
    exp.record(path)
    jpath = out / "report" / "summary.json"
    jpath.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    exp.record(jpath)
    return summary


COMMANDS = {
    "prune": run_prune,
    "gradnorm": run_gradnorm,
    "train": run_train,
    "ntk": run_ntk,
    "report": run_report,
}


def run(command: str, cfg: dict) -> tuple[Experiment, dict]:
    exp = Experiment(cfg)
    result = COMMANDS[command](exp)
    exp.write_manifest(command)
    return exp, result
