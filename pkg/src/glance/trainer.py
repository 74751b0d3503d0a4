"""Router + refiner training with counterfactual advantage rewards over frozen
experts, and budgeted routed inference."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ArtifactHashError, ConfigError, DivergenceError, MissingArtifactError, ProviderError
from .gnn import GCNClassifier, GcnModel, mc_dropout_uncertainty, normalize_adjacency
from .graph import TextAttributedGraph
from .homophily import HomophilyEstimator
from .llm import embed_bundles, serialize_prompts
from .nn import AdamW, clip_gradients, softmax, softmax_cross_entropy
from .refiner import Refiner, refiner_loss_grad
from .router import (
    PROB_CLAMP, BudgetSchedule, FeatureLayout, FeatureStats, RouterPolicy, assemble_features, normalize_ablation, router_loss,
    schedule_k, select_topk,
)
from .utils import file_sha256, make_rng, sha256_hex

log = logging.getLogger(__name__)


@dataclass
class RewardRecord:
    node: int
    routed: bool
    loss_gnn: float
    loss_llm: float | None
    reward: float
    score: float
    loss_route: float


@dataclass
class BatchResult:
    records: list[RewardRecord]
    objective: float  # mean prediction loss + lambda_router * mean router loss
    routed: np.ndarray


@dataclass
class RoutingTrace:
    nodes: np.ndarray
    predictions: np.ndarray
    gnn_predictions: np.ndarray
    routed: np.ndarray  # bool per entry of ``nodes``
    scores: np.ndarray  # a_v per entry
    batches: list = field(default_factory=list)  # routed node ids per batch
    provider_calls: int = 0


@dataclass
class ExpertSignals:
    z_G: np.ndarray
    gnn_logits: np.ndarray
    uncertainty: np.ndarray
    soft_h: np.ndarray
    features: np.ndarray
    degree: np.ndarray

    @property
    def p_H(self):
        return softmax(self.gnn_logits)


class EmbeddingStore:
    """Per-run memo of z_L by node; only misses reach the provider."""

    def __init__(self, provider, graph, sampler_seed, per_node_cap=5, empty_segments="fallback"):
        self.provider = provider
        self.graph = graph
        self.sampler_seed = sampler_seed
        self.per_node_cap = per_node_cap
        self.empty_segments = empty_segments
        self._z: dict[int, np.ndarray] = {}
        self.seconds = 0.0
        self.prompts = 0  # prompts handed to the provider, cache hits included

    def get(self, nodes) -> np.ndarray:
        nodes = [int(v) for v in nodes]
        missing = [v for v in dict.fromkeys(nodes) if v not in self._z]
        if missing:
            t0 = time.perf_counter()
            bundles = [serialize_prompts(self.graph, v, seed=self.sampler_seed, per_node_cap=self.per_node_cap)
                       for v in missing]
            self.prompts += len({p for b in bundles for p in b.prompts})
            z = embed_bundles(self.provider, bundles, self.empty_segments)
            self.seconds += time.perf_counter() - t0
            self._z.update(zip(missing, z))
        if not nodes:
            return np.zeros((0, 3 * self.provider.dim))
        return np.stack([self._z[v] for v in nodes])


def sampler_seed(seed: int) -> int:
    """Seed of the neighbour sampler used when serialising prompts."""
    return int(make_rng(seed, "sampler").integers(2**31))


def expert_hash(est) -> str:
    return sha256_hex(est.to_json())


class GlanceClassifier(ClassifierMixin, BaseEstimator):
    """Per-node router over a frozen GCN and a frozen text-embedding provider.

    ``gnn`` and ``homophily`` must already be fitted. Only the router policy and
    the refiner are trained by ``fit``; the experts are hash-checked before and
    after. Inference routes the ``k_test`` highest-scoring nodes of each batch
    through the refiner and keeps the GCN head's prediction for the rest.
    """

    def __init__(self, gnn=None, homophily=None, provider=None, beta=0.1, lambda_router=1.0,
                 lambda_ent=0.01, batch_size=32, k_start=32, k_end=8, decay=0.5, k_test=12,
                 train_cap=3000, max_epochs=20, patience=2, router_lr=3e-3, refiner_lr=1e-2,
                 weight_decay=1e-4, clip_norm=1.0, refiner_hidden=128, ablate=(),
                 router_loss="as_written", empty_segments="fallback", mc_passes=5, mc_rate=0.3,
                 uncertainty="entropy", per_node_cap=5, seed=0):
        self.gnn = gnn
        self.homophily = homophily
        self.provider = provider
        self.beta = beta
        self.lambda_router = lambda_router
        self.lambda_ent = lambda_ent
        self.batch_size = batch_size
        self.k_start = k_start
        self.k_end = k_end
        self.decay = decay
        self.k_test = k_test
        self.train_cap = train_cap
        self.max_epochs = max_epochs
        self.patience = patience
        self.router_lr = router_lr
        self.refiner_lr = refiner_lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.refiner_hidden = refiner_hidden
        self.ablate = ablate
        self.router_loss = router_loss
        self.empty_segments = empty_segments
        self.mc_passes = mc_passes
        self.mc_rate = mc_rate
        self.uncertainty = uncertainty
        self.per_node_cap = per_node_cap
        self.seed = seed

    # setup

    @property
    def schedule(self) -> BudgetSchedule:
        return BudgetSchedule(self.k_start, self.k_end, self.decay, self.k_test).validate(self.batch_size)

    def _check_setup(self):
        if not isinstance(self.gnn, GCNClassifier) or not hasattr(self.gnn, "model_"):
            raise ConfigError("GlanceClassifier needs a fitted GCNClassifier as gnn")
        if not isinstance(self.homophily, HomophilyEstimator) or not hasattr(self.homophily, "model_"):
            raise ConfigError("GlanceClassifier needs a fitted HomophilyEstimator as homophily")
        if self.provider is None:
            raise ConfigError("GlanceClassifier needs an embedding provider")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.router_loss not in ("as_written", "action"):
            raise ConfigError("router_loss must be 'as_written' or 'action'")
        normalize_ablation(self.ablate)
        self.schedule  # noqa: B018 - validates the budget settings

    def expert_signals(self, graph: TextAttributedGraph) -> ExpertSignals:
        """Everything the frozen experts contribute, computed once per graph."""
        cache = getattr(self, "_signals", None)
        if cache is not None and cache[0] is graph:
            return cache[1]
        A_hat = normalize_adjacency(graph)
        z, logits = self.gnn.forward(graph)
        unc = mc_dropout_uncertainty(self.gnn.model_, A_hat, graph.features, self.mc_passes, self.mc_rate,
                                     seed=make_rng(self.seed, "mc").integers(2**31), statistic=self.uncertainty)
        sig = ExpertSignals(z, logits, unc, self.homophily.soft_homophily(graph), graph.features,
                            graph.degrees.astype(np.float64))
        self._signals = (graph, sig)
        return sig

    def routing_features(self, graph) -> np.ndarray:
        check_is_fitted(self, "policy_")
        s = self.expert_signals(graph)
        F, layout = assemble_features(s.z_G, s.uncertainty, s.soft_h, s.features, s.degree, self.stats_, self.ablate)
        if layout != self.layout_:
            raise ConfigError("routing feature layout differs from the trained layout")
        return F

    # training

    def batch_step(self, batch, F, sig: ExpertSignals, y, K: int, store: EmbeddingStore) -> BatchResult:
        """Score, route top-K, embed, reward, then one update each for C and the router."""
        batch = np.asarray(batch, dtype=np.int64)
        B = len(batch)
        Fb = F[batch]
        logits = self.policy_.logits(Fb)
        scores = 1.0 / (1.0 + np.exp(-logits))
        pos = select_topk(logits, K)
        if len(pos) != min(K, B):
            raise AssertionError("routed set size violates the top-k contract")
        routed = np.zeros(B, dtype=bool)
        routed[pos] = True
        routed_nodes = batch[pos]

        # barrier: all embeddings for the routed set arrive before any loss is computed
        for attempt in (0, 1):
            try:
                z_L = store.get(routed_nodes)
                break
            except ProviderError as exc:
                if attempt == 1 or not exc.retryable:
                    raise
                log.warning("provider failure (%s); retrying batch once", exc)

        loss_gnn, _ = softmax_cross_entropy(sig.gnn_logits[batch], y[batch])
        loss_llm = np.full(B, np.nan)
        if len(pos):
            # C steps on the mean prediction loss over the routed set
            ll, c_grads = refiner_loss_grad(self.refiner_.model_, sig.z_G[routed_nodes], z_L, y[routed_nodes])
            loss_llm[pos] = ll
        rewards = reward(routed, loss_gnn, np.nan_to_num(loss_llm), self.beta)
        l_route, dz = router_loss(logits, rewards, self.lambda_ent, routed, self.router_loss)
        l_pred = np.where(routed, np.nan_to_num(loss_llm), loss_gnn)
        objective = float(l_pred.mean() + self.lambda_router * l_route.mean())
        if not np.isfinite(objective):
            raise DivergenceError("GLANCE objective is not finite")

        if len(pos):
            self.refiner_.optimizer_.step(self.refiner_.model_.params(), clip_gradients(c_grads, self.clip_norm))
        coef = dz * self.lambda_router / B
        r_grads = [Fb.T @ coef, np.array([coef.sum()])]
        self.router_opt_.step(self.policy_.params(), clip_gradients(r_grads, self.clip_norm))

        records = [
            RewardRecord(int(v), bool(routed[i]), float(loss_gnn[i]),
                         float(loss_llm[i]) if routed[i] else None, float(rewards[i]), float(scores[i]),
                         float(l_route[i]))
            for i, v in enumerate(batch)
        ]
        return BatchResult(records, objective, routed_nodes)

    def _init_trainables(self, sig: ExpertSignals, F, layout, num_classes):
        self.layout_ = layout
        self.policy_ = RouterPolicy.zeros(layout)
        self.router_opt_ = AdamW(self.router_lr, self.weight_decay)
        self.refiner_ = Refiner(self.refiner_hidden, self.refiner_lr, self.weight_decay, self.clip_norm,
                                seed=self.seed).initialize(sig.z_G.shape[1], 3 * self.provider.dim, num_classes)

    def fit(self, graph: TextAttributedGraph, y=None):
        self._check_setup()
        schedule = self.schedule
        hashes_before = {"gnn": expert_hash(self.gnn), "q": expert_hash(self.homophily)}
        calls_before = self.provider.calls
        t0 = time.perf_counter()
        self._signals = None
        sig = self.expert_signals(graph)
        t_experts = time.perf_counter() - t0

        train = graph.nodes_in("train")
        val = graph.nodes_in("val")
        if len(train) == 0 or len(val) == 0:
            raise ConfigError("GLANCE training needs non-empty train and val splits")
        if len(train) > self.train_cap:
            train = np.sort(make_rng(self.seed, "train-cap").choice(train, self.train_cap, replace=False))
        self.stats_ = FeatureStats.fit({"uncertainty": sig.uncertainty, "homophily": sig.soft_h,
                                        "degree": sig.degree}, train)
        F, layout = assemble_features(sig.z_G, sig.uncertainty, sig.soft_h, sig.features, sig.degree,
                                      self.stats_, self.ablate)
        self._init_trainables(sig, F, layout, graph.num_classes)
        self.sampler_seed_ = sampler_seed(self.seed)
        store = EmbeddingStore(self.provider, graph, self.sampler_seed_, self.per_node_cap, self.empty_segments)

        y_all = graph.labels
        epochs, best, best_acc, since = [], None, -1.0, 0
        t_train = time.perf_counter()
        for epoch in range(1, self.max_epochs + 1):
            K = schedule_k(schedule, epoch)
            order = make_rng(self.seed, "shuffle", epoch).permutation(train)
            routed_counts, rewards, routed_rewards, objectives = [], [], [], []
            for start in range(0, len(order), self.batch_size):
                batch = order[start:start + self.batch_size]
                try:
                    res = self.batch_step(batch, F, sig, y_all, K, store)
                except DivergenceError as exc:
                    exc.epoch = epoch
                    raise
                routed_counts.append(len(res.routed))
                rewards.extend(r.reward for r in res.records)
                routed_rewards.extend(r.reward for r in res.records if r.routed)
                objectives.append(res.objective)
            trace = self._route(graph, val, self.k_test, store)
            val_acc = float(np.mean(trace.predictions == y_all[val]))
            epochs.append({
                "epoch": epoch, "k": K, "routed_per_batch": routed_counts,
                "mean_reward": float(np.mean(rewards)),
                "mean_routed_reward": float(np.mean(routed_rewards)) if routed_rewards else None,
                "mean_objective": float(np.mean(objectives)), "val_accuracy": val_acc,
                "provider_calls": self.provider.calls - calls_before,
            })
            log.info("glance epoch %d: K=%d val_acc=%.4f", epoch, K, val_acc)
            if val_acc > best_acc:
                best = (copy.deepcopy(self.policy_), copy.deepcopy(self.refiner_.model_))
                best_acc, since = val_acc, 0
            else:
                since += 1
                if since >= self.patience:
                    break
        self.policy_, self.refiner_.model_ = best
        t_loop = time.perf_counter() - t_train

        hashes_after = {"gnn": expert_hash(self.gnn), "q": expert_hash(self.homophily)}
        if hashes_after != hashes_before:
            raise AssertionError("a frozen expert changed during GLANCE training")
        self.classes_ = np.arange(graph.num_classes)
        self.report_ = {
            "epochs": epochs,
            "best_val_accuracy": best_acc,
            "train_nodes": int(len(train)),
            "provider_calls": self.provider.calls - calls_before,
            "expert_hashes": hashes_before,
            "timings": {
                "gnn_and_experts": t_experts,
                "provider": store.seconds,
                "router_refiner": max(t_loop - store.seconds, 0.0),
            },
        }
        return self

    # inference

    def _route(self, graph, nodes, k_test, store) -> RoutingTrace:
        nodes = np.asarray(nodes, dtype=np.int64)
        sig = self.expert_signals(graph)
        F = self.routing_features(graph)
        gnn_pred = np.argmax(sig.gnn_logits[nodes], axis=1) if len(nodes) else np.zeros(0, dtype=np.int64)
        preds = gnn_pred.copy()
        routed = np.zeros(len(nodes), dtype=bool)
        scores = np.zeros(len(nodes))
        batches = []
        calls_before = self.provider.calls
        for start in range(0, len(nodes), self.batch_size):
            batch = nodes[start:start + self.batch_size]
            logits = self.policy_.logits(F[batch])
            scores[start:start + len(batch)] = 1.0 / (1.0 + np.exp(-logits))
            pos = select_topk(logits, k_test)
            batches.append(batch[pos].tolist())
            if len(pos) == 0:
                continue
            z_L = store.get(batch[pos])
            p_C = self.refiner_.predict_proba(sig.z_G[batch[pos]], z_L)
            preds[start + pos] = np.argmax(p_C, axis=1)
            routed[start + pos] = True
        return RoutingTrace(nodes, preds, gnn_pred, routed, scores, batches, self.provider.calls - calls_before)

    def route(self, graph, nodes=None, k_test=None, store: EmbeddingStore | None = None) -> RoutingTrace:
        """Routed predictions for ``nodes`` (default: test split) in id-ordered batches."""
        check_is_fitted(self, "policy_")
        if nodes is None:
            nodes = graph.nodes_in("test")
        k = self.k_test if k_test is None else k_test
        if store is None:
            store = EmbeddingStore(self.provider, graph, self.sampler_seed_, self.per_node_cap, self.empty_segments)
        return self._route(graph, np.sort(np.asarray(nodes, dtype=np.int64)), k, store)

    def predict(self, graph, nodes=None, k_test=None):
        return self.route(graph, nodes, k_test).predictions

    def score(self, graph, y=None, nodes=None):
        trace = self.route(graph, nodes)
        return float(np.mean(trace.predictions == graph.labels[trace.nodes]))

    def hyperparams(self) -> dict:
        params = self.get_params(deep=False)
        for key in ("gnn", "homophily", "provider"):
            params.pop(key)
        params["ablate"] = list(normalize_ablation(params["ablate"]))
        return params


def reward(routed, loss_gnn, loss_llm, beta: float):
    """Advantage of querying the text expert net of its cost; -loss_gnn when not queried."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    routed = np.asarray(routed, dtype=bool)
    loss_gnn = np.asarray(loss_gnn, dtype=np.float64)
    return np.where(routed, loss_gnn - np.asarray(loss_llm, dtype=np.float64) - beta, -loss_gnn)


def counterfactual_losses(p_H, p_C, y):
    """Cross-entropy of the GCN head and of the refiner for the same labels."""
    y = np.asarray(y)
    rows = np.arange(len(y))
    with np.errstate(divide="ignore"):
        return -np.log(np.asarray(p_H)[rows, y]), -np.log(np.asarray(p_C)[rows, y])


def records_objective(records, lambda_router: float, lambda_ent: float, mode: str = "as_written") -> float:
    """Recompute the batch objective from stored reward records and routing probabilities."""
    a = np.clip([r.score for r in records], PROB_CLAMP, 1.0 - PROB_CLAMP)
    rew = np.array([r.reward for r in records])
    routed = np.array([r.routed for r in records])
    ent = -(a * np.log(a) + (1 - a) * np.log(1 - a))
    log_p = np.log(a) if mode == "as_written" else np.where(routed, np.log(a), np.log(1 - a))
    l_route = -rew * log_p - lambda_ent * ent
    l_pred = [r.loss_llm if r.routed else r.loss_gnn for r in records]
    return float(np.mean(l_pred) + lambda_router * np.mean(l_route))


def record_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]


# bundle persistence

BUNDLE_FILES = ("router.json", "refiner.json", "manifest.json")


def save_bundle(est: GlanceClassifier, out_dir, expert_paths: dict, provider_cfg: dict | None = None) -> dict:
    """Write router and refiner checkpoints plus a manifest pinning every checkpoint hash.

    ``expert_paths`` maps ``gnn`` and ``q`` to the frozen checkpoints on disk.
    """
    check_is_fitted(est, "policy_")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "router.json").write_text(est.policy_.to_json())
    (out / "refiner.json").write_text(est.refiner_.to_json())
    manifest = {
        "schema": 1,
        "experts": {k: {"path": str(Path(p).resolve()), "sha256": file_sha256(p)} for k, p in expert_paths.items()},
        "components": {name: file_sha256(out / name) for name in ("router.json", "refiner.json")},
        "hyperparams": est.hyperparams(),
        "feature_stats": est.stats_.to_json(),
        "layout": est.layout_.to_json(),
        "sampler_seed": est.sampler_seed_,
        "provider": provider_cfg or {},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _verified_text(path: Path, expected: str) -> str:
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint {path}")
    data = path.read_bytes()
    if sha256_hex(data) != expected:
        raise ArtifactHashError(f"{path} does not match the hash pinned in the manifest")
    return data.decode("utf-8")


def load_bundle(bundle_dir, provider) -> GlanceClassifier:
    """Rebuild a trained GlanceClassifier; every checkpoint is hash-checked against the manifest."""
    bundle = Path(bundle_dir)
    path = bundle / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"missing bundle manifest {path}")
    manifest = json.loads(path.read_text())
    gnn_meta, q_meta = manifest["experts"]["gnn"], manifest["experts"]["q"]
    gnn = GCNClassifier.from_model(GcnModel.from_json(_verified_text(Path(gnn_meta["path"]), gnn_meta["sha256"])))
    q = HomophilyEstimator.from_json(_verified_text(Path(q_meta["path"]), q_meta["sha256"]))
    params = dict(manifest["hyperparams"])
    params["ablate"] = tuple(params["ablate"])
    est = GlanceClassifier(gnn=gnn, homophily=q, provider=provider, **params)
    est.policy_ = RouterPolicy.from_json(_verified_text(bundle / "router.json", manifest["components"]["router.json"]))
    est.refiner_ = Refiner.from_json(_verified_text(bundle / "refiner.json", manifest["components"]["refiner.json"]),
                                     learning_rate=est.refiner_lr, weight_decay=est.weight_decay,
                                     clip_norm=est.clip_norm, seed=est.seed)
    est.stats_ = FeatureStats.from_json(manifest["feature_stats"])
    est.layout_ = FeatureLayout.from_json(manifest["layout"])
    est.sampler_seed_ = int(manifest["sampler_seed"])
    est.classes_ = np.arange(gnn.model_.num_classes)
    if provider.dim * 3 != est.refiner_.dims_[1]:
        raise ConfigError(f"provider dim {provider.dim} does not match the bundle's refiner")
    return est
