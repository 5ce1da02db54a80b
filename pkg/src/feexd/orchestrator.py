"""Federated round loop for personalized early-exit training.

One :class:`Federation` owns the server state and every client's model.  The
strategy decides what is shared:

* ``cafedistill``    shared backbone, matched cross-client teacher, scheduled students
* ``fedper_ee``      shared backbone, all exits personal, joint CE only
* ``joint_local_kd`` ``fedper_ee`` plus distillation from the client's own final exit
* ``fedavg_ee``      backbone and every exit averaged into one global model
* ``local_only``     no communication at all
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import ExperimentConfig
from .data import ClientPartition, Dataset, dirichlet_partition, generate_synthetic, load_csv
from .distill import AggregatedTeacher, aggregate_teacher, local_objective, teacher_gap
from .een_model import ArchSpec, EENParams, exit_names, exit_weights, init_model, value_and_grad
from .inference import EvalReport, combine_reports, evaluate_many
from .matching import TeacherWeights, match_teachers, self_weights
from .selection import RoundPlan, select_students, similarity_matrix
from .tensor_nn import OptimizerState, ParamSet, sgd_step

log = logging.getLogger(__name__)


class StrategyKind(str, Enum):
    CAFEDISTILL = "cafedistill"
    LOCAL_ONLY = "local_only"
    FEDAVG_EE = "fedavg_ee"
    FEDPER_EE = "fedper_ee"
    JOINT_LOCAL_KD = "joint_local_kd"

    @classmethod
    def parse(cls, name: str) -> "StrategyKind":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown strategy {name!r}; valid strategies: {valid}") from None


@dataclass
class CommCost:
    up: int
    down: int

    @property
    def total(self) -> int:
        return self.up + self.down


@dataclass
class CommLedger:
    per_round: list[CommCost] = field(default_factory=list)
    total_up: int = 0
    total_down: int = 0

    def record(self, cost: CommCost) -> None:
        if cost.up < 0 or cost.down < 0:
            raise ValueError("communication counts must be non-negative")
        self.per_round.append(cost)
        self.total_up += cost.up
        self.total_down += cost.down


@dataclass
class ServerState:
    round: int
    global_backbone: ParamSet
    exit_registry: dict[int, ParamSet]
    rng: np.random.Generator
    lr: float
    global_exits: dict[int, ParamSet] | None = None
    ledger: CommLedger = field(default_factory=CommLedger)


@dataclass
class ClientState:
    client_id: int
    model: EENParams
    partition: ClientPartition
    optimizer: OptimizerState | None = None


def backbone_size(arch: ArchSpec) -> int:
    return sum(a * b + b for a, b in (arch.block_shape(j) for j in range(1, arch.m + 1)))


def exit_size(arch: ArchSpec, j: int) -> int:
    a, b = arch.exit_shape(j)
    return a * b + b


def comm_cost(arch: ArchSpec, strategy: StrategyKind | str) -> CommCost:
    """Parameters moved per sampled client per round."""
    strategy = StrategyKind(strategy)
    phi = backbone_size(arch)
    head = exit_size(arch, arch.m)
    all_heads = sum(exit_size(arch, j) for j in range(1, arch.m + 1))
    if strategy is StrategyKind.LOCAL_ONLY:
        return CommCost(0, 0)
    if strategy is StrategyKind.CAFEDISTILL:
        return CommCost(up=phi + head, down=phi + head)
    if strategy is StrategyKind.FEDAVG_EE:
        return CommCost(up=phi + all_heads, down=phi + all_heads)
    return CommCost(up=phi, down=phi)


def sample_clients(n: int, rate: float, rng: np.random.Generator) -> list[int]:
    if not 0 < rate <= 1:
        raise ValueError("sample rate must lie in (0, 1]")
    count = max(1, int(np.floor(rate * n + 0.5)))
    return sorted(int(c) for c in rng.choice(n, size=min(count, n), replace=False))


def aggregate_backbone(backbones: dict[int, ParamSet], p: dict[int, float], renormalize: bool = True) -> ParamSet:
    ids = sorted(backbones)
    weights = np.array([p[i] for i in ids], dtype=np.float64)
    if renormalize:
        weights = weights / weights.sum()
    # offsets from the heaviest input keep identical inputs (and n = 1) exact
    anchor = backbones[ids[int(np.argmax(weights))]]
    mass = 1.0 if renormalize else weights.sum()
    out = ParamSet((name, np.array(v, dtype=np.float64) * mass) for name, v in anchor.items())
    for cid, wt in zip(ids, weights):
        for name in out:
            v = np.asarray(backbones[cid][name])
            if v.shape != out[name].shape:
                raise ValueError(f"backbone of client {cid} has mismatched shape for {name}")
            out[name] += wt * (v - anchor[name])
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FEEXD_THREADS", "1")))
    except ValueError:
        return 1


def local_train(client: ClientState, global_backbone: ParamSet | None, teacher: AggregatedTeacher | None,
                S, config: ExperimentConfig, lr: float, rng: np.random.Generator,
                lam: float | None = None) -> tuple[ParamSet, ParamSet]:
    """Run the local epochs for one client; returns (backbone, final exit) copies."""
    model = client.model
    m = model.m
    train = client.partition.train
    if len(train) == 0:
        raise ValueError(f"client {client.client_id} has no training data")
    if global_backbone is not None:
        model.set_backbone(global_backbone)
    if teacher is not None:
        if not teacher.frozen:
            raise ValueError("teacher must be frozen")
        model.set_exit(m, teacher.head)
    lam = config.lambda_ if lam is None else lam
    S = sorted(set(S))
    w = exit_weights(m, S, config.w_renormalize)
    trainable = model.backbone_names() + [n for j in S for n in exit_names(j)]
    client.optimizer = OptimizerState.for_params(
        model.params.subset(trainable), learning_rate=lr, momentum=config.momentum,
        weight_decay=config.weight_decay, lr_decay=config.lr_decay)
    x_all, y_all = train.features, train.labels
    for _ in range(config.local_epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            xb, yb = x_all[idx], y_all[idx]
            _, grads = value_and_grad(
                lambda mdl: local_objective(mdl, teacher, xb, yb, S, w, lam), model)
            sgd_step(model.params.subset(trainable), grads.subset(trainable), client.optimizer)
    return model.backbone().copy(), model.exit(m).copy()


def build_dataset(config: ExperimentConfig) -> Dataset:
    d = config.data
    if d.kind == "csv":
        return load_csv(d.path)
    return generate_synthetic(d.num_classes, d.dim, d.per_class, d.class_sep, seed=config.seed)


class Federation:
    def __init__(self, config: ExperimentConfig, strategy: StrategyKind | str | None = None,
                 partitions: list[ClientPartition] | None = None):
        self.config = config
        self.strategy = StrategyKind.parse(strategy or config.strategy)
        if partitions is None:
            ds = build_dataset(config)
            partitions = dirichlet_partition(ds, config.n_clients, config.alpha,
                                             config.data.min_per_client, seed=config.seed + 1)
        self.partitions = partitions
        sample = partitions[0].train
        self.arch = ArchSpec(sample.features.shape[1], tuple(config.hidden_dims), sample.num_classes)
        base = init_model(self.arch, seed=config.seed + 2)
        self.clients = [ClientState(p.client_id, base.copy(), p) for p in partitions]
        self.p = {p.client_id: p.p for p in partitions}
        self.server = ServerState(
            round=0,
            global_backbone=base.backbone().copy(),
            exit_registry={c.client_id: c.model.exit(self.arch.m).copy() for c in self.clients},
            rng=np.random.default_rng([config.seed, 3]),
            lr=config.lr,
            global_exits=({j: base.exit(j).copy() for j in range(1, self.arch.m + 1)}
                          if self.strategy is StrategyKind.FEDAVG_EE else None),
        )
        self.client_cost = comm_cost(self.arch, self.strategy)
        # server-side record of each client's last final-exit update (uploaded minus sent)
        self.exit_updates: dict[int, np.ndarray] = {}

    @property
    def m(self) -> int:
        return self.arch.m

    def _client_rng(self, t: int, cid: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 4, t, cid])

    def _registry_vectors(self) -> dict[int, np.ndarray]:
        heads = {cid: head.flat() for cid, head in self.server.exit_registry.items()}
        if self.config.similarity_source == "params":
            return heads
        # clients that have not uploaded yet fall back to their registered head
        out = {}
        for cid, vec in heads.items():
            upd = self.exit_updates.get(cid)
            out[cid] = upd if upd is not None and np.any(upd) else vec
        return out

    def plan_round(self, sampled: list[int], t: int) -> RoundPlan:
        cfg = self.config
        if self.strategy is StrategyKind.CAFEDISTILL and cfg.student_schedule == "progressive":
            delta = similarity_matrix(self._registry_vectors(), sampled)
            return select_students(sampled, t, cfg.rounds, self.m, delta)
        full = list(range(1, self.m + 1))
        return RoundPlan(t, 1.0, self.m - 1, 0, {c: full for c in sampled})

    def teacher_for(self, cid: int) -> tuple[TeacherWeights | None, AggregatedTeacher | None]:
        vectors = self._registry_vectors()
        bb = self.server.global_backbone
        if self.strategy is StrategyKind.CAFEDISTILL:
            if self.config.teacher_weights == "self":
                k = self_weights(cid, vectors, self.config.mu)
            else:
                k = match_teachers(cid, vectors, self.config.mu)
            return k, aggregate_teacher(self.server.exit_registry, k, bb)
        if self.strategy is StrategyKind.JOINT_LOCAL_KD:
            own = {cid: self.clients[cid].model.exit(self.m).copy()}
            k = TeacherWeights(np.array([1.0]), [cid], self.config.mu, np.array([1.0]))
            return k, aggregate_teacher(own, k, bb)
        return None, None

    def _train_one(self, cid: int, S, teacher, t: int, lr: float):
        client = self.clients[cid]
        strat = self.strategy
        if strat is StrategyKind.LOCAL_ONLY:
            global_bb = None
        elif strat is StrategyKind.FEDAVG_EE:
            global_bb = self.server.global_backbone
            for j, head in self.server.global_exits.items():
                client.model.set_exit(j, head)
        else:
            global_bb = self.server.global_backbone
        return local_train(client, global_bb, teacher, S, self.config, lr, self._client_rng(t, cid))

    def run_round(self) -> dict:
        cfg = self.config
        srv = self.server
        t = srv.round + 1
        sampled = sample_clients(len(self.clients), cfg.sample_rate, srv.rng)
        plan = self.plan_round(sampled, t)

        k_vectors, teachers, gaps = {}, {}, {}
        for cid in sampled:
            k, teacher = self.teacher_for(cid)
            teachers[cid] = teacher
            if k is not None and self.strategy is StrategyKind.CAFEDISTILL:
                k_vectors[cid] = k.to_json()
                gaps[cid] = teacher_gap(srv.exit_registry, k, teacher,
                                        self.clients[cid].partition.train.features)

        def work(cid):
            return cid, self._train_one(cid, plan.students[cid], teachers[cid], t, srv.lr)

        if _threads() > 1 and len(sampled) > 1:
            with ThreadPoolExecutor(max_workers=_threads()) as pool:
                results = dict(pool.map(work, sampled))
        else:
            results = dict(map(work, sampled))

        strat = self.strategy
        if strat is not StrategyKind.LOCAL_ONLY:
            backbones = {cid: bb for cid, (bb, _) in results.items()}
            srv.global_backbone = aggregate_backbone(backbones, self.p, cfg.p_renormalize)
        if strat is StrategyKind.CAFEDISTILL:
            for cid, (_, head) in results.items():
                self.exit_updates[cid] = head.flat() - teachers[cid].head.flat()
                srv.exit_registry[cid] = head
        if strat is StrategyKind.FEDAVG_EE:
            for j in range(1, self.m + 1):
                heads = {cid: self.clients[cid].model.exit(j) for cid in sampled}
                srv.global_exits[j] = aggregate_backbone(heads, self.p, cfg.p_renormalize)

        cost = CommCost(self.client_cost.up * len(sampled), self.client_cost.down * len(sampled))
        srv.ledger.record(cost)
        srv.round = t
        srv.lr *= cfg.lr_decay
        return {
            "round": t,
            "sampled": sampled,
            "plan": plan.to_json(),
            "k_vectors": {str(c): v for c, v in k_vectors.items()},
            "teacher_gap": {str(c): v for c, v in gaps.items()},
            "comm": {"up": cost.up, "down": cost.down},
        }

    def deployed_model(self, cid: int) -> EENParams:
        """The model a client would run: shared parts from the server, personal exits local."""
        client = self.clients[cid]
        model = client.model.copy()
        if self.strategy is StrategyKind.LOCAL_ONLY:
            return model
        model.set_backbone(self.server.global_backbone)
        if self.strategy is StrategyKind.FEDAVG_EE:
            for j, head in self.server.global_exits.items():
                model.set_exit(j, head)
        return model

    def evaluate(self, epsilons=None) -> tuple[list[EvalReport], dict[int, list[EvalReport]]]:
        """Combined report per threshold plus the per-client reports behind it."""
        eps = list(self.config.epsilon_grid if epsilons is None else epsilons)
        per_client = {}
        for c in self.clients:
            test = c.partition.test
            per_client[c.client_id] = evaluate_many(self.deployed_model(c.client_id), test.features,
                                                    test.labels, eps)
        combined = [combine_reports([per_client[cid][i] for cid in per_client]) for i in range(len(eps))]
        return combined, per_client


@dataclass
class RunHistory:
    strategy: StrategyKind
    rounds: list[dict]
    metrics: list[tuple[int, EvalReport]]
    federation: Federation

    def final_reports(self) -> list[EvalReport]:
        last = max((r for r, _ in self.metrics), default=None)
        return [rep for r, rep in self.metrics if r == last]


def run_strategy(strategy: StrategyKind | str, config: ExperimentConfig,
                 partitions: list[ClientPartition] | None = None, on_round=None) -> RunHistory:
    fed = Federation(config, strategy, partitions)
    rounds, metrics = [], []
    for _ in range(config.rounds):
        record = fed.run_round()
        t = record["round"]
        if t % config.eval_every == 0 or t == config.rounds:
            combined, _ = fed.evaluate()
            metrics.extend((t, rep) for rep in combined)
            record["metrics"] = [{"epsilon": r.epsilon, "accuracy": r.accuracy,
                                  "averaged_accuracy": r.averaged_accuracy,
                                  "per_exit_accuracy": r.per_exit_accuracy,
                                  "mean_macs": r.mean_macs} for r in combined]
            log.info("%s round %d: averaged accuracy %.4f", fed.strategy.value, t,
                     combined[0].averaged_accuracy)
        rounds.append(record)
        if on_round is not None:
            on_round(record)
    return RunHistory(fed.strategy, rounds, metrics, fed)


def run_round(federation: Federation) -> dict:
    return federation.run_round()
