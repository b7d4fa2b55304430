"""
Federation: the protocol orchestrator.

Runs the two protocol phases over simulated clients:

Phase 1 (per round): select clients, local masked-autoencoder training,
aggregate encoder (+ decoder) uploads into the server's online encoder,
EMA the target network, broadcast, report reconstruction loss.

Phase 2 (per round): select clients, local fine-tuning with private
classifiers, aggregate encoder uploads, optionally one server contrastive
step, broadcast, report linear-probe test accuracy.

Selected clients train concurrently (up to ``workers`` at a time); every
client draws from its own derived stream and updates are reduced in
client-id order, so parallel and sequential runs give identical results.

Usage:
    fed = Federation(cfg, clients, params, server_pool, test_set)
    reports = await fed.run(RunMode.FULL)
"""

import asyncio
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .aggregation import aggregate_fedavg, aggregate_selffed, aggregation_weights
from .client import ClientState, FinetuneUpdate, PretrainUpdate, local_finetune, local_pretrain
from .config import (
    AggregationMode,
    ExperimentConfig,
    FederationConfig,
    FrequencyScope,
    RunMode,
    SelectionSchedule,
    ViewSource,
)
from .contrastive import TwinNetworks, build_view_pairs, ema_update, server_contrastive_step, warm_queue
from .datalab import Dataset
from .errors import EmptyLabeledShardError
from .logging import get_logger, round_logger
from .metrics import RoundReport
from .microtensor import AdamW, Graph, ModelParams, Tensor, build_optimizer, lr_at, no_grad, ops, save_params
from .patching import MaskPlan, PatchGrid, sample_mask
from .seeding import derive_rng
from .ssl_losses import MemoryQueue, cross_entropy, masked_mse
from .swinlite import DECODER, extract_features, reconstruct

logger = get_logger("federation")


def select_clients(
    round_index: int,
    cfg: FederationConfig,
    clients: Sequence[ClientState],
    rng: np.random.Generator,
) -> List[ClientState]:
    """
    Draw this round's participants (without replacement) and bump their F_t.

    The uniform schedule draws every subset equally; the skewed schedule
    draws proportionally to ``cfg.selection_weights``. Returns clients in
    id order.
    """
    m, k = len(clients), cfg.clients_per_round
    if k > m:
        raise ValueError(f"clients_per_round={k} exceeds {m} clients")
    if cfg.selection == SelectionSchedule.SKEWED:
        p = np.asarray([cfg.selection_weights[c.client_id] for c in clients], dtype=np.float64)
        chosen = rng.choice(m, size=k, replace=False, p=p / p.sum())
    else:
        chosen = rng.choice(m, size=k, replace=False)
    chosen = sorted(int(i) for i in chosen)
    for i in chosen:
        clients[i].frequency += 1
    return [clients[i] for i in chosen]


# -- linear probe -----------------------------------------------------------

@dataclass
class LinearProbe:
    """Softmax regression on standardized frozen features."""
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).argmax(axis=-1)


def fit_linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    steps: int = 200,
    lr: float = 0.05,
    weight_decay: float = 1e-4,
) -> LinearProbe:
    """Full-batch AdamW softmax regression from zero weights."""
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise EmptyLabeledShardError("Linear probe needs labeled samples")
    mean = features.mean(axis=0)
    scale = features.std(axis=0) + 1e-8
    x = Tensor.wrap((features - mean) / scale)

    params = ModelParams()
    weight = params.add("probe.weight", np.zeros((features.shape[1], num_classes)))
    bias = params.add("probe.bias", np.zeros(num_classes))
    optimizer = AdamW(params, weight_decay=weight_decay)
    for _ in range(steps):
        params.zero_grad()
        with Graph() as graph:
            loss = cross_entropy(ops.linear(x, weight, bias), labels)
        graph.backward(loss, leaves=[weight, bias])
        optimizer.step(params.grads(), lr)
    return LinearProbe(weight.data.copy(), bias.data.copy(), mean, scale)


def probe_accuracy(probe: LinearProbe, features: np.ndarray, labels: np.ndarray) -> float:
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if len(features) == 0:
        return 0.0
    return float((probe.predict(features) == np.asarray(labels)).mean())


# -- orchestrator -----------------------------------------------------------

class Federation:
    """
    Server state plus the simulated clients.

    The server holds the online/target twins (encoder + projector), the
    online predictor, the global decoder, the memory queue and a labeled
    calibration pool used for the linear probe and as the image source
    for contrastive views.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        clients: List[ClientState],
        params: ModelParams,
        server_pool: Dataset,
        test_set: Dataset,
        run_id: str = "",
        checkpoint_dir: Optional[Path] = None,
        on_report: Optional[Callable[[RoundReport], None]] = None,
    ):
        self.cfg = cfg
        self.arch = cfg.arch
        self.seed = cfg.seed
        self.clients = clients
        self.server_pool = server_pool
        self.test_set = test_set
        self.run_id = run_id
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.on_report = on_report

        self.twins = TwinNetworks.from_params(params, cfg.contrastive.decay)
        self.decoder = params.section(DECODER).copy()
        self.queue = MemoryQueue(cfg.contrastive.queue_size, cfg.arch.proj_dim)
        self.server_optimizer = build_optimizer(
            cfg.optim.name, self.twins.trainable(), cfg.optim.weight_decay, cfg.optim.betas
        )
        self.grid = PatchGrid(cfg.arch.image_size, cfg.arch.image_size, cfg.arch.channels, cfg.arch.patch_size)
        self.reports: List[RoundReport] = []
        self.checkpoints: List[Path] = []
        self._eval_plans: Optional[List[MaskPlan]] = None

    # -- views of the global model --

    def encoder(self) -> ModelParams:
        return self.twins.encoder()

    def autoencoder(self) -> ModelParams:
        """Online encoder with the global decoder (shared tensors)."""
        return self.twins.encoder().merged(self.decoder)

    def global_params(self) -> ModelParams:
        """Everything the server holds; the checkpoint content."""
        return self.twins.online.merged(self.twins.predictor).merged(self.decoder)

    # -- round plumbing --

    async def _run_clients(self, selected: List[ClientState], fn: Callable[[ClientState], object]) -> list:
        semaphore = asyncio.Semaphore(self.cfg.workers)

        async def run_with_limit(client: ClientState):
            async with semaphore:
                return await asyncio.to_thread(fn, client)

        return await asyncio.gather(*(run_with_limit(c) for c in selected))

    def _aggregate(self, updates) -> Tuple[ModelParams, np.ndarray]:
        fed = self.cfg.federation
        updates = sorted(updates, key=lambda u: u.client_id)
        sizes = [u.num_samples for u in updates]
        freqs = [u.frequency for u in updates]
        weights = aggregation_weights(sizes, freqs, fed.beta, fed.aggregation)
        if fed.aggregation == AggregationMode.FEDAVG:
            merged = aggregate_fedavg([(u.params, u.num_samples) for u in updates])
        else:
            merged = aggregate_selffed([(u.params, u.num_samples, u.frequency) for u in updates],
                                       fed.beta, fed.aggregation)
        return merged, weights

    def _broadcast(self, params: ModelParams) -> None:
        for client in self.clients:
            client.params.load_(params)

    def _lr(self, round_index: int, total: int) -> float:
        o = self.cfg.optim
        return lr_at(round_index, total, self.cfg.federation.lr, o.warmup_rounds, o.schedule, o.min_lr_ratio)

    def _checkpoint(self, phase: int, round_index: int, total: int) -> None:
        if self.checkpoint_dir is None:
            return
        every = self.cfg.federation.checkpoint_every
        last = round_index == total - 1
        if last or (every > 0 and (round_index + 1) % every == 0):
            path = save_params(self.global_params(), self.checkpoint_dir / f"round_{phase}_{round_index}.sfwt")
            self.checkpoints.append(path)

    def _emit(self, report: RoundReport) -> None:
        self.reports.append(report)
        log = round_logger(logger, self.run_id, report.phase, report.round)
        metric = report.eval_loss if report.phase == 1 else report.test_accuracy
        label = "eval_loss" if report.phase == 1 else "accuracy"
        shown = "n/a" if metric is None else f"{metric:.4g}"
        log.info(
            f"Clients {report.selected} merged, weight sum {report.weight_sum:.4g}, {label} {shown}",
            extra={"duration": report.wall_time},
        )
        if self.on_report:
            self.on_report(report)

    def _report(self, phase, round_index, updates, weights, lr, start, **metrics) -> RoundReport:
        records = [u.to_dict() for u in updates]
        log = round_logger(logger, self.run_id, phase, round_index)
        for rec in records:
            log.debug(
                f"Client update: {rec['num_samples']} samples, F_t={rec['frequency']}, {rec['upload_bytes']} bytes",
                extra={"client_id": rec["client_id"], "loss": rec["mean_loss"]},
            )
        return RoundReport(
            phase=phase,
            round=round_index,
            selected=[rec["client_id"] for rec in records],
            client_losses={rec["client_id"]: rec["mean_loss"] for rec in records},
            weights=[float(w) for w in weights],
            weight_sum=float(np.sum(weights)),
            frequencies=[rec["frequency"] for rec in records],
            lr=lr,
            upload_bytes=int(sum(rec["upload_bytes"] for rec in records)),
            wall_time=time.perf_counter() - start,
            **metrics,
        )

    # -- phases --

    async def run_phase1(self) -> List[RoundReport]:
        """Federated masked-autoencoder pre-training."""
        cfg, fed = self.cfg, self.cfg.federation
        total = fed.rounds_pretrain
        reports = []
        for r in range(total):
            start = time.perf_counter()
            selected = select_clients(r, fed, self.clients, derive_rng(self.seed, "select", 1, r))
            lr = self._lr(r, total)
            received = self.autoencoder()

            def work(client: ClientState) -> PretrainUpdate:
                return local_pretrain(
                    client, received, cfg.arch, cfg.masking, cfg.augment.pretrain,
                    fed.local_epochs, lr, fed.batch_size,
                    derive_rng(self.seed, "client", 1, r, client.client_id),
                    cfg.optim, fed.share_decoder,
                )

            updates = await self._run_clients(selected, work)
            merged, weights = self._aggregate(updates)
            self.twins.online.load_(merged)
            self.decoder.load_(merged)
            ema_update(self.twins)
            self._broadcast(self.autoencoder())

            report = self._report(1, r, updates, weights, lr, start, eval_loss=self.evaluate_reconstruction())
            self._checkpoint(1, r, total)
            self._emit(report)
            reports.append(report)
        return reports

    async def run_phase2(self, contrastive: bool = True) -> List[RoundReport]:
        """Federated fine-tuning with optional server contrastive steps."""
        cfg, fed = self.cfg, self.cfg.federation
        empty = [c.client_id for c in self.clients if len(c.labeled) == 0]
        if empty and fed.rounds_finetune > 0:
            raise EmptyLabeledShardError(f"Clients {empty} hold no labeled samples")
        if fed.frequency_scope == FrequencyScope.PER_PHASE:
            for client in self.clients:
                client.frequency = 0
        total = fed.rounds_finetune
        every = fed.contrastive_every if (contrastive and cfg.contrastive.enabled) else 0
        reports = []
        for r in range(total):
            start = time.perf_counter()
            selected = select_clients(r, fed, self.clients, derive_rng(self.seed, "select", 2, r))
            lr = self._lr(r, total)
            received = self.encoder()

            def work(client: ClientState) -> FinetuneUpdate:
                return local_finetune(
                    client, received, cfg.arch, cfg.augment.finetune,
                    fed.local_epochs, lr, fed.batch_size,
                    derive_rng(self.seed, "client", 2, r, client.client_id),
                    cfg.optim,
                )

            updates = await self._run_clients(selected, work)
            merged, weights = self._aggregate(updates)
            self.twins.online.load_(merged)

            contrastive_loss = None
            if every and (r + 1) % every == 0:
                contrastive_loss = self.contrastive_round(r)
            self._broadcast(self.encoder())

            report = self._report(
                2, r, updates, weights, lr, start,
                test_accuracy=self.evaluate_accuracy(),
                contrastive_loss=contrastive_loss,
            )
            self._checkpoint(2, r, total)
            self._emit(report)
            reports.append(report)
        return reports

    async def run(self, mode: RunMode = RunMode.FULL) -> List[RoundReport]:
        mode = RunMode(mode)
        if mode in (RunMode.FULL, RunMode.PRETRAIN_ONLY, RunMode.CENTRALIZED):
            await self.run_phase1()
        if mode != RunMode.PRETRAIN_ONLY:
            await self.run_phase2(contrastive=mode != RunMode.SCRATCH_BASELINE)
        return self.reports

    # -- server contrastive step --

    def contrastive_round(self, round_index: int) -> Optional[float]:
        """One server step on views of calibration-pool images."""
        cc = self.cfg.contrastive
        pool = self.server_pool.images
        if len(pool) == 0:
            logger.warning("Server pool is empty; skipping contrastive step")
            return None
        rng = derive_rng(self.seed, "contrastive", round_index)
        if len(self.queue) == 0:
            warm = np.sort(rng.choice(len(pool), size=min(cc.queue_size, len(pool)), replace=False))
            warm_queue(self.twins, pool[warm], self.queue, self.arch)

        idx = np.sort(rng.choice(len(pool), size=min(cc.batch_size, len(pool)), replace=False))
        sources = pool[idx]
        if cc.view_source == ViewSource.DECODER:
            plans = [sample_mask(self.grid.num_patches, self.cfg.masking.ratio, rng) for _ in idx]
            with no_grad():
                sources = np.clip(reconstruct(sources, plans, self.autoencoder(), self.arch).data, 0.0, 1.0)
        ids = self.server_pool.ids[idx]
        streams = [derive_rng(self.seed, "views", round_index, int(i)) for i in ids]
        pairs = build_view_pairs(sources, self.cfg.augment.finetune, streams, ids)
        _, _, loss = server_contrastive_step(
            self.twins, pairs, self.queue, cc.temperature, self.server_optimizer,
            self.arch, cc.lr, cc.negatives,
        )
        return loss

    # -- evaluation --

    def evaluate_reconstruction(self, batch_size: int = 64) -> Optional[float]:
        """Masked MSE of the global autoencoder on the test set (fixed masks)."""
        images = self.test_set.images
        if len(images) == 0:
            return None
        if self._eval_plans is None:
            self._eval_plans = [
                sample_mask(self.grid.num_patches, self.cfg.masking.ratio, derive_rng(self.seed, "eval-mask", int(i)))
                for i in self.test_set.ids
            ]
        if not self._eval_plans[0].masked:
            return None
        model = self.autoencoder()
        total = 0.0
        with no_grad():
            for start in range(0, len(images), batch_size):
                chunk = images[start: start + batch_size]
                plans = self._eval_plans[start: start + batch_size]
                recon = reconstruct(chunk, plans, model, self.arch)
                total += masked_mse(recon, chunk, plans, self.grid).item() * len(chunk)
        return total / len(images)

    def evaluate_accuracy(self) -> Optional[float]:
        """Linear probe fit on the calibration pool, scored on the test set."""
        if len(self.server_pool) == 0 or len(self.test_set) == 0:
            return None
        encoder = self.encoder()
        probe = fit_linear_probe(
            extract_features(self.server_pool.images, encoder, self.arch),
            self.server_pool.labels,
            self.server_pool.num_classes,
            steps=self.cfg.probe_steps,
        )
        return probe_accuracy(probe, extract_features(self.test_set.images, encoder, self.arch), self.test_set.labels)
