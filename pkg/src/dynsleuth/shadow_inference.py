"""Which of N known dynamics was a policy trained on?

Shadow policies are trained on every candidate, each is summarised by the
mean and variance of its returns on every candidate, and a one-vs-rest
linear SVM learns to map those summaries back to the training candidate.
"""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .env_families import CandidateSet, DynamicsCandidate
from .neuralnet import MlpPolicy
from .trainers import GaussianPgConfig, PgConfig, evaluate_policy, train_dqn, train_gaussian_pg, train_pg

SCHEMA_VERSION = 1
_DEGENERATE_STD = 1e-12


def default_trainer(family: str):
    """(algo, config) used for shadow policies of a family."""
    if family == "pointbot":
        return "gpg", GaussianPgConfig()
    if family == "slipgrid":
        # a fixed, modest budget: the point is a policy shaped by its dynamics,
        # not a fully converged one
        return "pg", PgConfig(total_episodes=2_000, entropy_anneal_episodes=2_000)
    raise ValueError(f"unknown family {family!r}")


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def train_one(candidate: DynamicsCandidate, seed: int, algo: str, cfg) -> MlpPolicy:
    env = candidate.make_env()
    if algo == "gpg":
        pol = train_gaussian_pg(env, cfg, seed=seed)
    elif algo == "pg":
        pol = train_pg(env, cfg, seed=seed)
    elif algo == "dqn":
        pol = train_dqn(env, cfg, seed=seed)
    else:
        raise ValueError(f"unknown shadow trainer {algo!r}")
    pol.meta.update({"candidate": candidate.label, "shadow_seed": seed})
    return pol


def _train_task(args):
    i, j, candidate, seed, algo, cfg = args
    try:
        return i, j, train_one(candidate, seed, algo, cfg)
    except Exception as exc:  # name the failing pair, keep the cause
        raise RuntimeError(f"shadow training failed for candidate {i} ({candidate.label}), seed {j}") from exc


def _pool_map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def train_shadow_policies(candidates: CandidateSet, m: int, trainer=None, seed: int = 0,
                          jobs: int = 1) -> list[list[MlpPolicy]]:
    """``policies[i][j]``: seed ``j`` trained on candidate ``i``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    algo, cfg = trainer or default_trainer(candidates.family)
    tasks = [(i, j, c, derive_seed(seed, i, j), algo, cfg)
             for i, c in enumerate(candidates) for j in range(m)]
    out: list[list] = [[None] * m for _ in candidates]
    for i, j, pol in _pool_map(_train_task, tasks, jobs):
        pol.meta["provenance"] = [i, j]
        out[i][j] = pol
    return out


def extract_features(policy: MlpPolicy, candidates: CandidateSet, k: int = 20, seed: int = 0,
                     deterministic: bool = False, with_returns: bool = False):
    """[mean_1, var_1, ..., mean_N, var_N] of ``k`` episodic returns per candidate.

    Variances are population variances. With ``with_returns`` the raw
    per-candidate returns come back as well.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    feats, logs = [], []
    for i, cand in enumerate(candidates):
        stats = evaluate_policy(policy, cand.make_env(), k, seed=derive_seed(seed, i), deterministic=deterministic)
        feats += [stats.mean, stats.variance]
        logs.append(stats.returns)
    vec = np.array(feats)
    return (vec, logs) if with_returns else vec


def _feature_task(args):
    i, j, policy, candidates, k, seed = args
    return i, j, extract_features(policy, candidates, k, seed)


# ---------------------------------------------------------------------------
# feature tables


@dataclass
class FeatureTable:
    labels: list[str]          # candidate order
    rows_label: np.ndarray     # (R,) candidate index of the training dynamics
    rows_seed: np.ndarray      # (R,) shadow seed index
    rows_split: list[str]      # "train" | "test"
    X: np.ndarray              # (R, 2N)

    def __post_init__(self):
        self.rows_label = np.asarray(self.rows_label, dtype=np.int64)
        self.rows_seed = np.asarray(self.rows_seed, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.rows_label), -1)
        if self.X.shape[1] != 2 * len(self.labels):
            raise ValueError(f"feature width {self.X.shape[1]} != 2N = {2 * len(self.labels)}")
        if set(self.rows_split) - {"train", "test"}:
            raise ValueError("split must be 'train' or 'test'")

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = np.array([s == name for s in self.rows_split], dtype=bool)
        return self.X[mask], self.rows_label[mask]


def save_features(table: FeatureTable, path) -> None:
    n = len(table.labels)
    header = ["label", "seed", "split"] + [f"{p}{i + 1}" for i in range(n) for p in ("m", "v")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for lab, seed, split, x in zip(table.rows_label, table.rows_seed, table.rows_split, table.X):
            w.writerow([table.labels[lab], int(seed), split] + [repr(float(v)) for v in x])


def load_features(path, labels: list[str] | None = None) -> FeatureTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["label", "seed", "split"]:
        raise ValueError(f"{path}: not a feature table")
    n = (len(rows[0]) - 3) // 2
    if labels is None:
        labels = []
        for r in rows[1:]:
            if r[0] not in labels:
                labels.append(r[0])
    if len(labels) != n:
        raise ValueError(f"{path}: {n} candidates in header but {len(labels)} labels known")
    index = {lab: i for i, lab in enumerate(labels)}
    body = rows[1:]
    return FeatureTable(
        list(labels),
        [index[r[0]] for r in body],
        [int(r[1]) for r in body],
        [r[2] for r in body],
        np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), 2 * n),
    )


# ---------------------------------------------------------------------------
# linear SVM, one-vs-rest, hinge subgradient descent


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    epochs: int = 200
    lr: float = 0.1
    seed: int = 0
    batch_size: int | None = 16  # None: full-batch subgradient steps
    standardize: bool = True

    def __post_init__(self):
        if not (self.C > 0 and self.lr > 0 and self.epochs >= 1):
            raise ValueError("need C > 0, lr > 0, epochs >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LinearSvmModel:
    labels: list[str]
    mean: np.ndarray
    std: np.ndarray
    active: np.ndarray         # False for degenerate (constant) feature dims
    weights: np.ndarray        # (N_classes, d)
    biases: np.ndarray         # (N_classes,)
    config: dict = field(default_factory=dict)
    objective_trace: list[float] = field(default_factory=list)

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.mean):
            raise ValueError(f"feature length {X.shape[1]} != model's {len(self.mean)}")
        return np.where(self.active, (X - self.mean) / self.std, 0.0)

    def decision(self, X) -> np.ndarray:
        return self.transform(X) @ self.weights.T + self.biases

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision(X), axis=1)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "labels": self.labels,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "active": self.active.tolist(),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "config": self.config,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LinearSvmModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema_version {d.get('schema_version')}")
        return cls(
            list(d["labels"]),
            np.array(d["mean"], dtype=np.float64),
            np.array(d["std"], dtype=np.float64),
            np.array(d["active"], dtype=bool),
            np.array(d["weights"], dtype=np.float64).reshape(len(d["biases"]), len(d["mean"])),
            np.array(d["biases"], dtype=np.float64),
            dict(d.get("config", {})),
        )


def save_model(model: LinearSvmModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=2)


def load_model(path) -> LinearSvmModel:
    with open(path) as fh:
        return LinearSvmModel.from_json(json.load(fh))


def svm_objective(W, b, Z, Y, lam) -> float:
    """Sum over classes of lam/2 |w|^2 + mean hinge, with Y in {-1, +1}."""
    margins = Y * (Z @ W.T + b)
    return float(0.5 * lam * np.sum(W * W) + np.maximum(0.0, 1.0 - margins).mean(axis=0).sum())


def fit_classifier(X, y, n_classes: int | None = None, cfg: SvmConfig = SvmConfig(),
                   labels: list[str] | None = None) -> LinearSvmModel:
    """One-vs-rest linear SVM on (optionally) standardized features.

    Minimises ``1/(2 C n) |w|^2 + mean(hinge)`` per class with step size
    ``lr / sqrt(t)``. The returned weights are the running average of all
    iterates, which is what the per-epoch objective trace records.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    k = int(n_classes if n_classes is not None else y.max() + 1)
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two classes to fit a classifier")
    if cfg.standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
    else:
        mean, std = np.zeros(d), np.ones(d)
    active = std > _DEGENERATE_STD if cfg.standardize else np.ones(d, dtype=bool)
    std = np.where(active, std, 1.0)
    Z = np.where(active, (X - mean) / std, 0.0)
    Y = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)

    lam = 1.0 / (cfg.C * n)
    W = np.zeros((k, d))
    b = np.zeros(k)
    W_avg, b_avg = W.copy(), b.copy()
    rng = np.random.default_rng(cfg.seed)
    t = 0
    trace = []
    for _ in range(cfg.epochs):
        if cfg.batch_size is None:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for idx in batches:
            t += 1
            Zb, Yb = Z[idx], Y[idx]
            viol = (Yb * (Zb @ W.T + b)) < 1.0            # (B, k)
            coef = np.where(viol, -Yb, 0.0) / len(idx)
            gW = lam * W + coef.T @ Zb
            gb = coef.sum(axis=0)
            eta = cfg.lr / np.sqrt(t)
            W = W - eta * gW
            b = b - eta * gb
            W[:, ~active] = 0.0
            W_avg += (W - W_avg) / t
            b_avg += (b - b_avg) / t
        trace.append(svm_objective(W_avg, b_avg, Z, Y, lam))
    return LinearSvmModel(
        list(labels) if labels is not None else [str(i) for i in range(k)],
        mean, std, active, W_avg, b_avg, asdict(cfg), trace,
    )


def infer_candidate(model: LinearSvmModel, feature) -> tuple[int, np.ndarray]:
    """Predicted candidate index and per-class decision values (ties: lowest index)."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise ValueError("infer_candidate takes one feature vector")
    scores = model.decision(feature)[0]
    return int(np.argmax(scores)), scores


# ---------------------------------------------------------------------------
# end-to-end experiment


def check_split_hygiene(table: FeatureTable, model: LinearSvmModel, train_seed_count: int) -> None:
    """Fail unless the model saw exactly the train rows and those come from
    the first ``train_seed_count`` seeds of every candidate."""
    train_mask = np.array([s == "train" for s in table.rows_split], dtype=bool)
    if np.any(table.rows_seed[train_mask] >= train_seed_count):
        raise AssertionError("a train row comes from a held-out seed")
    if np.any(table.rows_seed[~train_mask] < train_seed_count):
        raise AssertionError("a test row comes from a training seed")
    keys_train = set(zip(table.rows_label[train_mask].tolist(), table.rows_seed[train_mask].tolist()))
    keys_test = set(zip(table.rows_label[~train_mask].tolist(), table.rows_seed[~train_mask].tolist()))
    if keys_train & keys_test:
        raise AssertionError("a shadow policy appears in both splits")
    if model.config.get("standardize", True):
        Xtr = table.X[train_mask]
        std = Xtr.std(axis=0)
        if not (np.array_equal(model.mean, Xtr.mean(axis=0))
                and np.array_equal(model.std, np.where(std > _DEGENERATE_STD, std, 1.0))):
            raise AssertionError("standardization statistics do not match the train split")


def accuracy_summary(y_true, y_pred, n_classes: int) -> dict:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    per = conf.diagonal() / np.maximum(conf.sum(axis=1), 1)
    return {
        "per_candidate_accuracy": per.tolist(),
        "macro_accuracy": float(per.mean()),
        "confusion_matrix": conf.tolist(),
    }


def build_feature_table(candidates: CandidateSet, policies, train_seed_count: int, k: int,
                        seed: int = 0, jobs: int = 1) -> FeatureTable:
    tasks = [(i, j, pol, candidates, k, derive_seed(seed, 1_000_003, i, j))
             for i, row in enumerate(policies) for j, pol in enumerate(row)]
    results = sorted(_pool_map(_feature_task, tasks, jobs), key=lambda r: (r[0], r[1]))
    return FeatureTable(
        candidates.labels,
        [i for i, _, _ in results],
        [j for _, j, _ in results],
        ["train" if j < train_seed_count else "test" for _, j, _ in results],
        np.array([f for _, _, f in results]),
    )


def evaluate_table(table: FeatureTable, svm_cfg: SvmConfig, train_seed_count: int) -> tuple[dict, LinearSvmModel]:
    Xtr, ytr = table.split("train")
    Xte, yte = table.split("test")
    model = fit_classifier(Xtr, ytr, len(table.labels), svm_cfg, table.labels)
    check_split_hygiene(table, model, train_seed_count)
    return accuracy_summary(yte, model.predict(Xte), len(table.labels)), model


def run_inference_experiment(
    candidates: CandidateSet,
    m: int = 32,
    train_seed_count: int = 8,
    k: int = 20,
    trainer=None,
    svm_cfg: SvmConfig = SvmConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> tuple[dict, FeatureTable, LinearSvmModel]:
    """Shadow training, features, fit on the first seeds, test on the rest.

    Returns the accuracy report, the feature table and the fitted model.
    The report carries both the standardized (primary) and raw-feature
    results.
    """
    if not 0 < train_seed_count < m:
        raise ValueError("need 0 < train_seed_count < m")
    t0 = time.perf_counter()
    algo, tcfg = trainer or default_trainer(candidates.family)
    policies = train_shadow_policies(candidates, m, (algo, tcfg), seed, jobs)
    t_train = time.perf_counter() - t0
    table = build_feature_table(candidates, policies, train_seed_count, k, seed, jobs)
    t_feat = time.perf_counter() - t0 - t_train
    primary_cfg = SvmConfig(**{**asdict(svm_cfg), "standardize": True})
    raw_cfg = SvmConfig(**{**asdict(svm_cfg), "standardize": False})
    primary, model = evaluate_table(table, primary_cfg, train_seed_count)
    raw, _ = evaluate_table(table, raw_cfg, train_seed_count)
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "inference",
        "family": candidates.family,
        "labels": candidates.labels,
        **primary,
        "raw_features": raw,
        "config": {
            "m": m, "train_seed_count": train_seed_count, "k": k, "seed": seed,
            "trainer": {"algo": algo, **asdict(tcfg)}, "svm": asdict(svm_cfg),
        },
        "seconds": {"train": t_train, "features": t_feat, "total": time.perf_counter() - t0},
    }
    return report, table, model


__all__ = [
    "FeatureTable",
    "LinearSvmModel",
    "SvmConfig",
    "accuracy_summary",
    "build_feature_table",
    "check_split_hygiene",
    "default_trainer",
    "extract_features",
    "fit_classifier",
    "infer_candidate",
    "load_features",
    "load_model",
    "run_inference_experiment",
    "save_features",
    "save_model",
    "svm_objective",
    "train_shadow_policies",
]
