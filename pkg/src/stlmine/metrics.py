"""
Classification and retrieval metrics, the retrieval-effectiveness harness and
the cross-validation driver.
"""
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold, train_test_split

from utils.logging_utils import get_logger, progress_enabled
from utils.parallel import parallel_map
from .kernel import FDistParams, FormulaSampler, KernelError, embed, kernel
from .parser import format_formula
from .semantics import EvaluationError, robustness_batch, satisfaction_batch
from .trajectories import sample_mu0_batch

logger = get_logger("metrics")

DEFAULT_BUCKET_EDGES = (0, 5, 10, 15, 20)
QUANTILES = {"q25": 0.25, "median": 0.5, "q75": 0.75, "q99": 0.99}


class MetricError(ValueError):
    """Raised for invalid metric arguments."""


@dataclass(frozen=True)
class ConfusionCounts:
    """Strict-sign confusion counts; zero-robustness trajectories are counted apart."""

    tp: int
    tn: int
    fp: int
    fn: int
    zero_pos: int = 0
    zero_neg: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn + self.zero_pos + self.zero_neg


@dataclass(frozen=True)
class ClassificationMetrics:
    mcr: float
    precision: float
    recall: float
    counts: ConfusionCounts

    def to_dict(self):
        return {"mcr": self.mcr, "precision": self.precision, "recall": self.recall, "counts": asdict(self.counts)}


def metrics_from_robustness(rho_pos, rho_neg):
    """
    MCR, precision and recall from robustness values of each class.

    Zero robustness counts as a misclassification and is excluded from
    TP/FP/TN/FN; undefined precision or recall is None.
    """
    rho_pos, rho_neg = np.asarray(rho_pos), np.asarray(rho_neg)
    counts = ConfusionCounts(
        tp=int(np.sum(rho_pos > 0)),
        fn=int(np.sum(rho_pos < 0)),
        fp=int(np.sum(rho_neg > 0)),
        tn=int(np.sum(rho_neg < 0)),
        zero_pos=int(np.sum(rho_pos == 0)),
        zero_neg=int(np.sum(rho_neg == 0)),
    )
    if counts.total == 0:
        raise MetricError("cannot classify an empty dataset")
    mcr = (counts.fn + counts.fp + counts.zero_pos + counts.zero_neg) / counts.total
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else None
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    return ClassificationMetrics(mcr, precision, recall, counts)


def classify_metrics(f, d):
    """Classify every trajectory of d by the sign of f's robustness at t = 0."""
    rho_pos = robustness_batch(f, d.positives, dt=d.dt) if d.n_pos else np.empty(0)
    rho_neg = robustness_batch(f, d.negatives, dt=d.dt) if d.n_neg else np.empty(0)
    return metrics_from_robustness(rho_pos, rho_neg)


def agreement(query, hit, trajectories, dt=None, query_verdicts=None):
    """Fraction of trajectories on which both formulae get the same Boolean verdict."""
    if query_verdicts is None:
        query_verdicts = satisfaction_batch(query, trajectories, dt=dt)
    return float(np.mean(query_verdicts == satisfaction_batch(hit, trajectories, dt=dt)))


def relevant(query, hit, trajectories, omega=0.9, dt=None, query_verdicts=None):
    """hit is relevant to query iff their verdicts agree on at least a fraction omega (inclusive)."""
    return agreement(query, hit, trajectories, dt, query_verdicts) >= omega


def _check_k(values, k):
    if k < 1:
        raise MetricError(f"K must be >= 1, got {k}")
    if k > len(values):
        raise MetricError(f"K={k} exceeds the {len(values)} available results")


def ap_at_k(rels, k):
    """Average precision over the top k: sum(P@i * rel_i) / sum(rel_i), 0 when nothing is relevant."""
    _check_k(rels, k)
    rels = np.asarray(rels[:k], dtype=np.float64)
    hits = rels.sum()
    if hits == 0:
        return 0.0
    precision_at = np.cumsum(rels) / np.arange(1, k + 1)
    return float(np.sum(precision_at * rels) / hits)


def ndcg_at_k(gains, k):
    """DCG@k / IDCG@k with discount log2(i + 1); 1 when every gain is zero."""
    _check_k(gains, k)
    gains = np.asarray(gains, dtype=np.float64)
    discounts = np.log2(np.arange(2, k + 2))
    ideal = np.sum(np.sort(gains)[::-1][:k] / discounts)
    if ideal == 0:
        return 1.0
    return float(np.sum(gains[:k] / discounts) / ideal)


def bucket_label(node_count, edges=DEFAULT_BUCKET_EDGES):
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo < node_count <= hi:
            return f"({lo},{hi}]"
    return f">{edges[-1]}"


def bucket_labels(edges=DEFAULT_BUCKET_EDGES):
    return [f"({lo},{hi}]" for lo, hi in zip(edges[:-1], edges[1:])] + [f">{edges[-1]}"]


def quantile_summary(frame, columns, order=None, group="bucket"):
    """Quantile rows per group (in the given order, empty groups omitted) plus an `all` row."""
    summary = {}
    names = order or sorted(frame[group].unique())
    groups = [(name, frame[frame[group] == name]) for name in names if (frame[group] == name).any()]
    groups.append(("all", frame))
    for name, part in groups:
        entry = {"count": int(len(part))}
        for column in columns:
            values = part[column].dropna().to_numpy(dtype=np.float64)
            entry[column] = {label: (float(np.quantile(values, q)) if len(values) else None)
                             for label, q in QUANTILES.items()}
        summary[str(name)] = entry
    return summary


@dataclass
class EffectivenessReport:
    rows: pd.DataFrame
    summary: dict
    skipped_queries: int = 0

    def to_dict(self):
        return {"summary": self.summary, "skipped_queries": self.skipped_queries, "n_queries": int(len(self.rows))}

    def write_csv(self, path):
        self.rows.to_csv(path, index=False)


def retrieval_effectiveness(db, reference, n_queries=1000, fparams=None, omega=0.9, k=5, seed=0, n_traj=10_000,
                            keys=None, bucket_edges=DEFAULT_BUCKET_EDGES, threads=None, query_formulas=None):
    """
    Measure how well nearest-neighbor retrieval returns semantically relevant formulae.

    Queries are drawn from the formula distribution (or given), embedded and
    searched; for each query AP@k and NDCG@k use relevance judged on n_traj
    mu0 trajectories, and the kernel similarity to the top hit is recorded.

    Args:
        db: SemanticDb
        reference: ReferenceSet used to build db
        n_queries: Number of sampled queries
        fparams: FDistParams for queries (default: the database variables, at most 4 nodes)
        omega: Relevance agreement threshold
        k: Results per query
        seed: Seed for queries and relevance trajectories
        n_traj: Number of relevance trajectories
        keys: Shards to search (default: every shard at the largest node budget)
        bucket_edges: Node-count bucket edges
        threads: Worker cap
        query_formulas: Explicit queries instead of sampling

    Returns:
        EffectivenessReport with per-query rows and the quantile summary
    """
    start_time = time.time()
    db_vars = max((key.n_vars for key in db.keys()), default=reference.dim)
    fparams = fparams or FDistParams(n_vars=min(db_vars, reference.dim), max_nodes=4)
    query_seq, traj_seq = np.random.SeedSequence(seed).spawn(2)
    trajectories = sample_mu0_batch(reference.mu0, n_traj, reference.dim, traj_seq)
    keys = keys or [key for key in db.keys() if key.max_nodes == db.node_limits[-1]]

    skipped = 0
    if query_formulas is None:
        sampler, queries = FormulaSampler(fparams, query_seq), []
        while len(queries) < n_queries:
            candidate = sampler.sample()
            try:
                queries.append((candidate, embed(candidate, reference)))
            except KernelError:
                skipped += 1
    else:
        queries = [(f, embed(f, reference)) for f in query_formulas]

    def evaluate(item):
        query, embedding = item
        results = db.query(embedding, k, keys)
        if not results:
            return None
        verdicts = satisfaction_batch(query, trajectories)
        rels = []
        for hit in results:
            try:
                rels.append(relevant(query, hit.formula, trajectories, omega, query_verdicts=verdicts))
            except EvaluationError:
                rels.append(False)
        depth = len(results)
        try:
            similarity = kernel(query, results[0].formula, reference)
        except KernelError:
            similarity = math.nan
        nodes = query.node_count()
        return {
            "query": format_formula(query),
            "nodes": nodes,
            "bucket": bucket_label(nodes, bucket_edges),
            "ap": ap_at_k(rels, depth),
            "ndcg": ndcg_at_k([float(r) for r in rels], depth),
            "kernel_top": similarity,
            "top_hit": results[0].text,
            "top_distance": results[0].distance,
            "relevant_hits": int(sum(rels)),
        }

    rows = [row for row in parallel_map(evaluate, queries, threads=threads, desc="queries",
                                        show_progress=progress_enabled(logger)) if row is not None]
    frame = pd.DataFrame(rows, columns=["query", "nodes", "bucket", "ap", "ndcg", "kernel_top", "top_hit",
                                        "top_distance", "relevant_hits"])
    summary = quantile_summary(frame, ["ap", "ndcg", "kernel_top"], bucket_labels(bucket_edges)) if len(frame) else {}
    elapsed = time.time() - start_time
    logger.info(f"Retrieval effectiveness over {len(frame)} queries (k={k}, omega={omega}) in {elapsed:.2f}s")
    return EffectivenessReport(frame, summary, skipped)


@dataclass
class FoldResult:
    fold: int
    formula: str
    node_count: int
    objective: float
    train: ClassificationMetrics
    test: ClassificationMetrics
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"fold": self.fold, "formula": self.formula, "node_count": self.node_count,
                "objective": self.objective, "train": self.train.to_dict(), "test": self.test.to_dict(),
                **self.details}


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(values)), "std": float(np.std(values))}


@dataclass
class CrossValidationReport:
    folds: list

    @property
    def best(self):
        """Fold with the lowest test MCR; fewer nodes break ties."""
        return min(self.folds, key=lambda r: (r.test.mcr, r.node_count, r.fold))

    def summary(self):
        return {metric: _mean_std([getattr(r.test, metric) for r in self.folds])
                for metric in ("mcr", "precision", "recall")}

    def to_dict(self):
        best = self.best
        return {"folds": [r.to_dict() for r in self.folds], "test_summary": self.summary(),
                "best": {"fold": best.fold, "formula": best.formula, "node_count": best.node_count}}


def fold_indices(d, n_folds=5, single_fold=False, fold_seed=0, test_fraction=0.2):
    """
    Stratified (train, test) index pairs over the stacked dataset (positives first).

    Returns:
        List of (train_index, test_index) arrays
    """
    values, labels = d.stacked()
    index = np.arange(len(labels))
    if single_fold:
        train, test = train_test_split(index, test_size=test_fraction, stratify=labels, random_state=fold_seed)
        return [(np.sort(train), np.sort(test))]
    if min(d.n_pos, d.n_neg) < n_folds:
        raise MetricError(f"{n_folds}-fold cross-validation needs at least {n_folds} trajectories per class")
    splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=fold_seed)
    return [(train, test) for train, test in splitter.split(values.reshape(len(labels), -1), labels)]


def split_dataset(d, index):
    index = np.asarray(index)
    pos = index[index < d.n_pos]
    neg = index[index >= d.n_pos] - d.n_pos
    return d.subset(pos, neg)


def cross_validate(d, mine_fold, n_folds=5, single_fold=False, fold_seed=0, test_fraction=0.2):
    """
    Run a mining procedure on every training fold and score its formula on the held-out fold.

    Args:
        d: LabeledDataset (raw units)
        mine_fold: Callable (train_dataset, fold_index) -> MiningResult
        n_folds: Number of stratified folds
        single_fold: Use one stratified train/test split instead
        fold_seed: Seed of the splitter
        test_fraction: Held-out share for the single split

    Returns:
        CrossValidationReport
    """
    d.require_both_classes()
    folds = []
    for fold, (train_idx, test_idx) in enumerate(fold_indices(d, n_folds, single_fold, fold_seed, test_fraction)):
        train, test = split_dataset(d, train_idx), split_dataset(d, test_idx)
        start_time = time.time()
        result = mine_fold(train, fold)
        formula = result.formula
        folds.append(FoldResult(
            fold=fold,
            formula=format_formula(formula),
            node_count=formula.node_count(),
            objective=result.best_g,
            train=classify_metrics(formula, train),
            test=classify_metrics(formula, test),
            details={"iterations": result.iterations, "stored_formula": result.stored_text},
        ))
        elapsed = time.time() - start_time
        logger.info(f"Fold {fold}: {folds[-1].formula} test MCR={folds[-1].test.mcr:.3f} in {elapsed:.2f}s")
    return CrossValidationReport(folds)
