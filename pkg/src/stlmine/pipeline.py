"""
Facade over the mining modules, one method per command-line operation.
"""
import time
from pathlib import Path

import torch

from utils.json_utils import dumps
from utils.logging_utils import get_logger, log_stage_end, log_stage_start
from .kernel import FDistParams, build_reference_set, embed, load_reference_set, save_reference_set
from .metrics import bucket_labels, cross_validate, retrieval_effectiveness
from .miner import Miner, MiningError
from .parser import format_formula, parse_formula
from .trajectories import gen_linear_dataset, read_dataset_csv, write_dataset_csv
from .vector_db import SemanticDb, VectorDbError, build_db

DATASET_KINDS = ("linear",)

LINEAR_BENCHMARK_SETTINGS = {
    "enumeration.max_nodes": 4,
    "enumeration.n_vars": 1,
    "enumeration.n_values": 10,
    "enumeration.n_times": 10,
    "enumeration.cap": 2000,
    "embedding.n_train": 500,
    "embedding.n_mc": 2000,
    "embedding.n_vars": 1,
    "database.node_limits": [4, 5],
}


class StlMiningPipeline:
    """
    Runs the build, mining, query and evaluation steps under one RunConfig.

    Every method returns the JSON-ready report it wrote (if any), so the
    command-line layer only prints and sets the exit status.
    """

    def __init__(self, config):
        self.config = config
        self.logger = get_logger("pipeline")
        if config.threads:
            torch.set_num_threads(config.threads)

    def _write_report(self, payload, path):
        if path:
            Path(path).write_text(dumps(payload) + "\n")
            self.logger.info(f"Wrote report to {path}")

    # ------------------------------------------------------------------
    # Datasets
    # ------------------------------------------------------------------

    def gen_data(self, kind, out_path):
        """
        Generate a benchmark dataset CSV plus a JSON manifest next to it.

        Raises:
            ValueError: unknown dataset kind
        """
        if kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {kind!r} (available: {', '.join(DATASET_KINDS)})")
        cfg = self.config.trajectories
        dataset = gen_linear_dataset(cfg.n_pos, cfg.n_neg, cfg.n_points, seed=self.config.seed, x0=cfg.x0,
                                     rate=cfg.rate, noise_variance=cfg.noise_variance)
        write_dataset_csv(dataset, out_path)
        manifest = {
            "kind": kind,
            "seed": self.config.seed,
            "n_pos": dataset.n_pos,
            "n_neg": dataset.n_neg,
            "n_points": dataset.n_points,
            "dt": dataset.dt,
            "generator": {"x0": cfg.x0, "rate": cfg.rate, "noise_variance": cfg.noise_variance},
        }
        self._write_report(manifest, f"{out_path}.manifest.json")
        self.logger.info(f"Wrote {dataset.n_pos + dataset.n_neg} {kind} trajectories to {out_path}")
        return manifest

    # ------------------------------------------------------------------
    # Database
    # ------------------------------------------------------------------

    def build(self, out_path, reference_path=None):
        """
        Build the reference set and the semantic database and write both files.

        Returns:
            Summary dict (per-shard counts, build metadata)
        """
        cfg = self.config
        reference_path = reference_path or cfg.paths.reference_path(out_path)
        start_time = time.time()
        log_stage_start(self.logger, "Build DB", out=out_path, max_nodes=cfg.enumeration.max_nodes,
                        n_vars=cfg.enumeration.n_vars)
        try:
            reference = build_reference_set(
                n_train=cfg.embedding.n_train,
                n_mc=cfg.embedding.n_mc,
                fparams=cfg.embedding.fdist_params(),
                mu0params=cfg.trajectories.mu0_params(),
                seed=cfg.seed,
                squash=cfg.embedding.squash,
                threads=cfg.threads,
            )
            enum = cfg.enumeration
            db = build_db(
                enum.max_nodes, enum.n_vars, enum.grid(), enum.tau_sim, reference,
                cap=enum.cap, seed=cfg.seed, node_limits=cfg.database.node_limits,
                signature_size=enum.signature_size, threads=cfg.threads,
                metadata={"config": cfg.to_dict()},
            )
            if cfg.database.search_mode.startswith("ivf"):
                db.train_ivf(cfg.database.nlist, cfg.database.nprobe, seed=cfg.seed,
                             max_iter=cfg.database.ivf_max_iter)
            if cfg.database.search_mode.endswith("pq"):
                db.train_pq(cfg.database.pq_m, cfg.database.pq_nbits, seed=cfg.seed)
            save_reference_set(reference, reference_path)
            db.save(out_path)
        except Exception as exc:
            elapsed = time.time() - start_time
            self.logger.error(f"Database build failed after {elapsed:.2f}s: {exc}")
            raise
        elapsed = time.time() - start_time
        summary = {**db.summary(), "index": str(out_path), "reference": reference_path, "elapsed": round(elapsed, 2)}
        log_stage_end(self.logger, "Build DB", elapsed, entries=db.total_entries(), shards=len(db.shards))
        return summary

    def load(self, db_path, reference_path=None):
        """Load a database and its reference set, checking that they belong together."""
        reference_path = reference_path or self.config.paths.reference_path(db_path)
        db = SemanticDb.load(db_path)
        reference = load_reference_set(reference_path)
        if reference.n_train != db.dim:
            raise VectorDbError(f"reference set {reference_path} has {reference.n_train} anchors, "
                                f"database embeddings have dimension {db.dim}")
        return db, reference

    # ------------------------------------------------------------------
    # Benchmarks
    # ------------------------------------------------------------------

    def linear_benchmark(self, workdir):
        """
        Generate the linear dataset, build its database and mine it with cross-validation.

        Args:
            workdir: Directory receiving linear.csv, linear.stldb, linear.ref and mine_report.json

        Returns:
            (build summary, mining report)
        """
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        data_path, db_path = workdir / "linear.csv", workdir / "linear.stldb"
        start_time = time.time()
        log_stage_start(self.logger, "Linear benchmark", workdir=workdir)
        self.gen_data("linear", str(data_path))
        summary = self.build(str(db_path))
        report = self.mine(str(data_path), str(db_path), str(workdir / "mine_report.json"))
        elapsed = time.time() - start_time
        mcr = report["cross_validation"]["test_summary"]["mcr"]["mean"]
        log_stage_end(self.logger, "Linear benchmark", elapsed, mean_test_mcr=f"{mcr:.3f}")
        return summary, report

    # ------------------------------------------------------------------
    # Mining
    # ------------------------------------------------------------------

    def mine(self, data_path, db_path, out_path=None):
        """
        Cross-validated mining on a dataset CSV.

        Returns:
            Report dict with per-fold metrics, mean and std, and the best formula
        """
        cfg = self.config
        dataset = read_dataset_csv(data_path)
        db, _ = self.load(db_path)
        db_vars = max((key.n_vars for key in db.keys()), default=0)
        if dataset.dim > db_vars:
            self.logger.warning(f"Dataset has {dataset.dim} variables, database formulae use at most {db_vars}")
        if not db.eligible_keys(max_vars=dataset.dim, max_nodes=cfg.bo.max_nodes):
            raise MiningError(f"database {db_path} has no shard usable for {dataset.dim}-dimensional data")

        start_time = time.time()
        log_stage_start(self.logger, "Cross-validation", data=data_path, n_pos=dataset.n_pos, n_neg=dataset.n_neg)
        runs = {}

        def mine_fold(train, fold):
            result = Miner(db, cfg.bo, seed=cfg.seed + fold).mine_with_escalation(train)
            runs[fold] = result
            return result

        cv = cross_validate(dataset, mine_fold, n_folds=cfg.cross_validation.n_folds,
                            single_fold=cfg.cross_validation.single_fold,
                            fold_seed=cfg.cross_validation.fold_seed,
                            test_fraction=cfg.cross_validation.test_fraction)
        best = cv.best
        report = {
            "config": cfg.to_dict(),
            "dataset": {"path": str(data_path), "n_pos": dataset.n_pos, "n_neg": dataset.n_neg,
                        "dim": dataset.dim, "n_points": dataset.n_points, "dt": dataset.dt},
            "cross_validation": cv.to_dict(),
            "runs": {fold: result.to_dict() for fold, result in sorted(runs.items())},
            "best_formula": best.formula,
        }
        elapsed = time.time() - start_time
        summary = cv.summary()
        log_stage_end(self.logger, "Cross-validation", elapsed, content=best.formula,
                      mean_mcr=f"{summary['mcr']['mean']:.3f}")
        self._write_report(report, out_path)
        return report

    # ------------------------------------------------------------------
    # Retrieval
    # ------------------------------------------------------------------

    def query(self, db_path, formula_text, k=5, max_nodes=None):
        """
        Nearest stored formulae to a formula given in grammar text.

        Args:
            db_path: Index file
            formula_text: Query formula
            k: Number of results
            max_nodes: Restrict to shards of this node budget (default: the largest budget)

        Returns:
            List of QueryResult
        """
        formula = parse_formula(formula_text)
        db, reference = self.load(db_path)
        budget = max_nodes or db.node_limits[-1]
        if budget not in db.node_limits:
            raise VectorDbError(f"--max-nodes {budget} is not a shard budget of this database {db.node_limits}")
        keys = db.eligible_keys(max_nodes=budget)
        start_time = time.time()
        results = db.query(embed(formula, reference), k, keys, mode=self.config.database.search_mode)
        elapsed = time.time() - start_time
        self.logger.info(f"Query '{format_formula(formula)}' returned {len(results)} results in {elapsed:.2f}s")
        return results

    def eval_retrieval(self, db_path, out_path=None, csv_path=None):
        """
        Retrieval-effectiveness harness over formulae sampled from the anchor distribution.

        Returns:
            Report dict with the quantile summary by node bucket
        """
        cfg = self.config
        ev = cfg.retrieval_eval
        db, reference = self.load(db_path)
        db_vars = max((key.n_vars for key in db.keys()), default=reference.dim)
        emb = cfg.embedding
        fparams = FDistParams(p_leaf=emb.p_leaf, n_vars=min(db_vars, reference.dim), value_range=emb.value_range,
                              time_range=emb.time_range, max_depth=emb.max_depth, p_unbounded=emb.p_unbounded,
                              max_nodes=ev.max_query_nodes)
        effectiveness = retrieval_effectiveness(db, reference, n_queries=ev.n_queries, fparams=fparams,
                                                omega=ev.omega, k=ev.k, seed=cfg.seed, n_traj=ev.n_traj,
                                                bucket_edges=ev.bucket_edges, threads=cfg.threads)
        report = {
            "config": cfg.to_dict(),
            "index": str(db_path),
            "buckets": bucket_labels(ev.bucket_edges),
            **effectiveness.to_dict(),
        }
        self._write_report(report, out_path)
        if csv_path:
            effectiveness.write_csv(csv_path)
            self.logger.info(f"Wrote per-query rows to {csv_path}")
        return report
