"""
Requirement mining by Bayesian optimization over the semantic embedding space.

The loop fits a GP to (embedding, G) pairs, maximizes the UCB acquisition,
maps each acquired point back to a stored formula by nearest-neighbor
retrieval, evaluates the discriminative objective G on the (normalized)
training data and repeats until the budget is spent or G plateaus.
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from utils.logging_utils import get_logger, log_stage_end, log_stage_start
from .gp import GaussianProcess, GpConfig, GpFitError, beta_schedule, ucb
from .metrics import classify_metrics
from .parser import format_formula, parse_formula
from .semantics import EvaluationError, robustness_batch
from .trajectories import denormalize_thresholds, normalize, rescale_time_bounds

EPS_DEN = 1e-9
ACQUISITION_STRATEGIES = ("candidate-set", "gradient")


class MiningError(ValueError):
    """Raised when mining cannot start or proceed (no eligible formulae, empty class)."""


@dataclass(frozen=True)
class BoConfig:
    """Bayesian-optimization loop settings."""

    maxiter: int = 50
    epsilon: float = 1e-3
    patience: int = 5
    burn_in: int = 10
    initial_batch: int = 10
    batch_size: int = 1
    retrieval_depth: int = 10
    acquisition: str = "candidate-set"
    candidate_pool: int = 4096
    beta: float = None
    beta_cap: float = 16.0
    gradient_steps: int = 50
    gradient_lr: float = 0.05
    gradient_starts: int = 4
    max_nodes: int = 4
    escalate_mcr: float = None
    gp: GpConfig = field(default_factory=GpConfig)

    def __post_init__(self):
        if self.maxiter < 1:
            raise ValueError(f"maxiter must be >= 1, got {self.maxiter}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.initial_batch < 2:
            raise ValueError(f"initial_batch must be >= 2, got {self.initial_batch}")
        if self.batch_size < 1 or self.retrieval_depth < 1 or self.patience < 1:
            raise ValueError("batch_size, retrieval_depth and patience must be >= 1")
        if self.acquisition not in ACQUISITION_STRATEGIES:
            raise ValueError(f"acquisition must be one of {ACQUISITION_STRATEGIES}, got {self.acquisition!r}")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")


def robustness_moments(f, d):
    """Mean and population std of robustness at t = 0 over each class."""
    rho_pos = robustness_batch(f, d.positives, dt=d.dt)
    rho_neg = robustness_batch(f, d.negatives, dt=d.dt)
    return rho_pos.mean(), rho_pos.std(), rho_neg.mean(), rho_neg.std()


def objective_g(f, d):
    """
    Discriminative objective G = (mean_p - mean_n) / (std_p + std_n).

    Standard deviations are population estimates; a degenerate denominator
    is floored at 1e-9.
    """
    d.require_both_classes()
    mean_p, std_p, mean_n, std_n = robustness_moments(f, d)
    return float((mean_p - mean_n) / max(std_p + std_n, EPS_DEN))


@dataclass
class TraceEntry:
    iteration: int
    formula: str
    objective: float
    embedding: np.ndarray = field(repr=False)

    def to_dict(self):
        return {"iteration": self.iteration, "formula": self.formula, "objective": self.objective}


@dataclass
class MiningResult:
    """Best formula (data domain), the stored formula it came from, and the optimization trace."""

    formula: object
    stored_text: str
    best_g: float
    trace: list
    opt: list
    stats: object
    node_budget: int
    stop_reason: str
    train_metrics: object = None
    skipped: int = 0
    escalated: bool = False

    @property
    def iterations(self):
        return len(self.opt) - 1

    def to_dict(self):
        return {
            "formula": format_formula(self.formula),
            "stored_formula": self.stored_text,
            "best_g": self.best_g,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "node_budget": self.node_budget,
            "escalated": self.escalated,
            "unevaluable_retrievals": self.skipped,
            "opt": self.opt,
            "trace": [entry.to_dict() for entry in self.trace],
            "normalization": self.stats.to_dict(),
            "train_metrics": self.train_metrics.to_dict() if self.train_metrics else None,
        }


class Miner:
    """One mining run is a sequential state machine over a fixed database and dataset."""

    def __init__(self, db, config=None, seed=0):
        self.db = db
        self.config = config or BoConfig()
        self.seed = seed
        self.logger = get_logger("miner")

    # ------------------------------------------------------------------
    # Objective
    # ------------------------------------------------------------------

    def _evaluate(self, text, data):
        """G of a stored formula on normalized data, after rescaling its time bounds; None if unevaluable."""
        formula = rescale_time_bounds(parse_formula(text), data.n_points, data.dt)
        try:
            value = objective_g(formula, data)
        except EvaluationError as exc:
            self.logger.debug(f"Skipping '{text}': {exc}")
            return None
        return value if math.isfinite(value) else None

    # ------------------------------------------------------------------
    # Acquisition
    # ------------------------------------------------------------------

    def acquire(self, model, selection, evaluated, neighbors, beta, rng):
        """
        Points to evaluate next, by the configured strategy.

        Returns:
            List of embedding vectors (at most batch_size)
        """
        if self.config.acquisition == "gradient":
            return self._acquire_gradient(model, beta, rng)
        return self._acquire_candidates(model, selection, evaluated, neighbors, beta, rng)

    def _acquire_candidates(self, model, selection, evaluated, neighbors, beta, rng):
        cfg = self.config
        total = len(selection.texts)
        pool = rng.choice(total, size=min(cfg.candidate_pool, total), replace=False)
        index = np.union1d(pool, np.fromiter(neighbors, dtype=np.int64, count=len(neighbors)))
        index = np.array([i for i in index if selection.texts[i] not in evaluated], dtype=np.int64)
        if not len(index):
            return []
        mean, var = model.posterior(selection.embeddings[index].astype(np.float64))
        scores = ucb(mean, var, beta)
        order = np.argsort(-scores, kind="stable")[:cfg.batch_size]
        return [selection.embeddings[index[i]].astype(np.float64) for i in order]

    def _acquire_gradient(self, model, beta, rng):
        cfg = self.config
        X = model.X
        starts = np.argsort(-model.y, kind="stable")[:cfg.gradient_starts]
        noise = rng.normal(0.0, 0.05, size=(len(starts), X.shape[1]))
        x = torch.as_tensor(np.clip(X[starts] + noise, -1.0, 1.0), dtype=torch.float64).requires_grad_(True)
        optimizer = torch.optim.SGD([x], lr=cfg.gradient_lr)
        root_beta = math.sqrt(beta)
        for _ in range(cfg.gradient_steps):
            optimizer.zero_grad()
            mean, var = model.posterior_torch(x, differentiable=True)
            loss = -(mean + root_beta * torch.sqrt(var + 1e-12)).sum()
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                x.clamp_(-1.0, 1.0)
        with torch.no_grad():
            mean, var = model.posterior_torch(x)
            scores = (mean + root_beta * torch.sqrt(var)).numpy()
        order = np.argsort(-scores, kind="stable")[:cfg.batch_size]
        return [x[i].detach().numpy().copy() for i in order]

    # ------------------------------------------------------------------
    # Retrieval
    # ------------------------------------------------------------------

    def _retrieve(self, target, keys, max_var_index, evaluated, limit):
        """First unevaluated formula in the ranked neighbors of target; depth doubles when all are taken."""
        depth = self.config.retrieval_depth
        while True:
            for hit in self.db.query(target, depth, keys, max_var_index=max_var_index):
                if hit.text not in evaluated:
                    return hit
            if depth >= limit:
                return None
            self.logger.debug(f"All {depth} nearest formulae already evaluated; widening retrieval")
            depth = min(depth * 2, limit)

    # ------------------------------------------------------------------
    # Loop
    # ------------------------------------------------------------------

    def mine(self, data, node_budget=None):
        """
        Mine a formula separating data.positives from data.negatives.

        Args:
            data: LabeledDataset in raw units (normalized internally)
            node_budget: Shard node budget (default: config.max_nodes)

        Returns:
            MiningResult whose formula is denormalized and time-rescaled to the data
        """
        cfg = self.config
        data.require_both_classes()
        budget = node_budget or cfg.max_nodes
        start_time = time.time()
        log_stage_start(self.logger, "Mining", n_pos=data.n_pos, n_neg=data.n_neg, dim=data.dim, budget=budget)

        normalized, stats = normalize(data)
        keys = self.db.eligible_keys(max_vars=data.dim, max_nodes=budget)
        max_var_index = data.dim - 1
        selection = self.db.collect(keys, max_var_index=max_var_index) if keys else None
        if selection is None or not selection.texts:
            raise MiningError(f"no stored formulae compatible with {data.dim}-dimensional data "
                              f"in shards with node budget {budget}")
        position = {text: i for i, text in enumerate(selection.texts)}

        init_seq, acq_seq = np.random.SeedSequence(self.seed).spawn(2)
        init_rng, acq_rng = np.random.default_rng(init_seq), np.random.default_rng(acq_seq)
        gp = GaussianProcess(cfg.gp)

        evaluated, trace, neighbors = {}, [], set()
        X, y = [], []
        skipped = 0

        def record(text, iteration):
            nonlocal skipped
            value = self._evaluate(text, normalized)
            evaluated[text] = value
            if value is None:
                skipped += 1
                return
            embedding = selection.embeddings[position[text]].astype(np.float64)
            X.append(embedding)
            y.append(value)
            trace.append(TraceEntry(iteration, text, value, embedding))
            for hit in self.db.query(embedding, cfg.retrieval_depth, keys, max_var_index=max_var_index):
                neighbors.add(position[hit.text])

        order = init_rng.permutation(len(selection.texts))
        cursor = 0
        while cursor < len(order) and (len(evaluated) < cfg.initial_batch or len(y) < 2):
            record(selection.texts[order[cursor]], 0)
            cursor += 1
        if len(y) < 2:
            raise MiningError("fewer than two stored formulae can be evaluated on this dataset")

        opt = [max(y)]
        stop_reason = "maxiter"
        iteration = 1
        while True:
            if iteration > cfg.maxiter:
                stop_reason = "maxiter"
                break
            if iteration > cfg.burn_in and len(opt) > cfg.patience and opt[-1] - opt[-1 - cfg.patience] < cfg.epsilon:
                stop_reason = "plateau"
                break
            if len(evaluated) >= len(selection.texts):
                stop_reason = "exhausted"
                break
            try:
                model = gp.fit(np.stack(X), np.asarray(y))
            except GpFitError as exc:
                self.logger.error(f"GP fit failed at iteration {iteration}: {exc}")
                raise
            beta = beta_schedule(iteration, cfg.beta_cap, cfg.beta)
            targets = self.acquire(model, selection, evaluated, neighbors, beta, acq_rng)
            added = 0
            for target in targets:
                hit = self._retrieve(target, keys, max_var_index, evaluated, len(selection.texts))
                if hit is None:
                    continue
                record(hit.text, iteration)
                added += 1
            if not added:
                self.logger.warning(f"Retrieval stalled at iteration {iteration}: every neighbor already evaluated")
                stop_reason = "stalled"
                break
            opt.append(max(y))
            self.logger.debug(f"Iteration {iteration}: beta={beta:.3f}, best G={opt[-1]:.4f}")
            iteration += 1

        best = max(trace, key=lambda e: (e.objective, -parse_formula(e.formula).node_count(), -e.iteration))
        stored = parse_formula(best.formula)
        formula = rescale_time_bounds(denormalize_thresholds(stored, stats), data.n_points, data.dt)
        result = MiningResult(
            formula=formula,
            stored_text=best.formula,
            best_g=best.objective,
            trace=trace,
            opt=opt,
            stats=stats,
            node_budget=budget,
            stop_reason=stop_reason,
            train_metrics=classify_metrics(formula, data),
            skipped=skipped,
        )
        elapsed = time.time() - start_time
        log_stage_end(self.logger, "Mining", elapsed, content=format_formula(formula),
                      best_g=f"{best.objective:.4f}", iterations=result.iterations, stop=stop_reason)
        return result

    def mine_with_escalation(self, data):
        """
        Mine on the smallest node budget; when escalate_mcr is set and the
        training MCR exceeds it, rerun on the next budget and keep the better result.
        """
        cfg = self.config
        result = self.mine(data, cfg.max_nodes)
        if cfg.escalate_mcr is None or result.train_metrics.mcr <= cfg.escalate_mcr:
            return result
        larger = [m for m in self.db.node_limits if m > result.node_budget]
        if not larger:
            return result
        self.logger.info(f"Training MCR {result.train_metrics.mcr:.3f} > {cfg.escalate_mcr}; "
                         f"escalating to {larger[0]}-node shards")
        try:
            wider = self.mine(data, larger[0])
        except MiningError as exc:
            self.logger.warning(f"Escalation skipped: {exc}")
            return result
        wider.escalated = True
        if (wider.train_metrics.mcr, -wider.best_g) < (result.train_metrics.mcr, -result.best_g):
            return wider
        return result


def mine(data, db, reference=None, config=None, seed=0):
    """
    Mine a formula for a labeled dataset (see Miner.mine_with_escalation).

    The reference set is not consulted: stored embeddings already live in its space.
    """
    return Miner(db, config, seed).mine_with_escalation(data)


def acquire(model, db, keys, beta, strategy="candidate-set", seed=0, max_var_index=None, q=1, evaluated=()):
    """
    Acquisition over the stored formulae of the selected shards.

    Args:
        model: Fitted GpModel
        db: SemanticDb
        keys: Shards to draw candidates from
        beta: UCB exploration weight
        strategy: "candidate-set" or "gradient"
        seed: Seed for the candidate subsample or gradient starts
        max_var_index: Skip formulae using variables above this index
        q: Number of points returned
        evaluated: Formula texts to exclude

    Returns:
        List of at most q embedding vectors
    """
    miner = Miner(db, BoConfig(acquisition=strategy, batch_size=q), seed)
    selection = db.collect(keys, max_var_index=max_var_index)
    if not selection.texts:
        raise MiningError("no stored formulae in the selected shards")
    return miner.acquire(model, selection, set(evaluated), set(), beta, np.random.default_rng(seed))
