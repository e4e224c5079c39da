"""AdamW, train state and the training loop with early stopping."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import DatasetSplit, FeatureCache, VideoRecord, worker_count
from .metrics import micro_f1_from_masks
from .model import Batch, TwoStreamModel, make_batch
from .numerics import ContractError, NumericError, ParameterStore
from .objectives import distill_loss, stream_loss, total_objective

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    patience_left: int = 5
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, store: ParameterStore, seed: int = 0, patience: int = 5) -> TrainState:
        st = cls(patience_left=patience, rng=np.random.default_rng(seed))
        for name, t in store.items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st


def adamw_step(
    store: ParameterStore,
    state: TrainState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update with decoupled weight decay and bias correction."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in store.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_t: float
    loss_nt: float
    loss_distill: float
    val_f1: float
    val_stream_distance: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    best_val_f1: float
    stopped_early: bool
    best_params: dict[str, np.ndarray] | None = None

    def loss_trace(self) -> list[tuple[float, float, float, float]]:
        return [(e.loss_total, e.loss_t, e.loss_nt, e.loss_distill) for e in self.epochs]


def _find_nonfinite(model: TwoStreamModel) -> str:
    for name, t in model.store.items():
        if not np.isfinite(t.data).all():
            return f"parameter {name}"
        if t.grad is not None and not np.isfinite(t.grad).all():
            return f"gradient of {name}"
    return "an intermediate tensor"


def forward_losses(model: TwoStreamModel, batch: Batch, weights, train: bool):
    """Both streams, the three objective terms and the total."""
    sheet_t = model.temporal_scores(batch, train)
    sheet_nt = model.nontemporal_scores(batch, train)
    j_t = stream_loss(sheet_t, batch.positives1, batch.positives2, weights)
    j_nt = stream_loss(sheet_nt, batch.positives1, batch.positives2, weights)
    j_d = distill_loss(sheet_t, sheet_nt, weights)
    return total_objective(j_t, j_nt, j_d, weights), j_t, j_nt, j_d, sheet_t, sheet_nt


def evaluate_validation(
    model: TwoStreamModel, records: list[VideoRecord], cache: FeatureCache, batch_size: int = 64
) -> tuple[float, float]:
    """Validation micro-F1 (temporal refined level 2, threshold 0) and mean stream distance."""
    if not records:
        return 0.0, 0.0
    preds, truth, dists = [], [], []
    with nx.no_grad():
        for start in range(0, len(records), batch_size):
            batch = make_batch(records[start : start + batch_size], cache, model.hierarchy)
            st = model.temporal_scores(batch)
            snt = model.nontemporal_scores(batch)
            preds.append(st.refined_level2.data >= 0.0)
            truth.append(batch.positives2)
            a = np.concatenate([st.refined_level1.data, st.refined_level2.data], axis=-1)
            b = np.concatenate([snt.refined_level1.data, snt.refined_level2.data], axis=-1)
            dists.append(np.sqrt(((a - b) ** 2).sum(axis=-1)))
    f1, _, _ = micro_f1_from_masks(np.concatenate(preds), np.concatenate(truth))
    return f1, float(np.concatenate(dists).mean())


@contextlib.contextmanager
def thread_limit(deterministic: bool):
    """One BLAS thread in deterministic mode, else at most ``SCENEFORGE_THREADS`` when set."""
    import os

    from threadpoolctl import threadpool_limits

    if deterministic:
        limit = 1
    elif "SCENEFORGE_THREADS" in os.environ:
        limit = worker_count()
    else:
        yield
        return
    with threadpool_limits(limits=limit):
        yield


def snapshot(store: ParameterStore) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in store.items()}


def restore(store: ParameterStore, params: dict[str, np.ndarray]) -> None:
    for name, values in params.items():
        store[name].data[...] = values


def train(
    config: RunConfig,
    dataset: DatasetSplit,
    model: TwoStreamModel,
    state: TrainState | None = None,
    cache: FeatureCache | None = None,
    on_epoch=None,
) -> TrainReport:
    """Mini-batch training of both streams with early stopping on validation F1.

    The best parameters (by validation F1) are kept in the report and restored
    into the model at the end.
    """
    config.validate()
    tc, weights = config.train, config.weights
    store = model.store
    state = state or TrainState.fresh(store, tc.seed, tc.patience)
    cache = cache or FeatureCache(store.dtype)
    cache.preload([*dataset.train, *dataset.validation])
    if not dataset.train:
        raise ContractError("training split is empty")

    epochs: list[EpochRecord] = []
    best = snapshot(store)
    stopped = False
    with thread_limit(tc.deterministic):
        while state.epoch < tc.max_epochs:
            t0 = time.perf_counter()
            order = state.rng.permutation(len(dataset.train))
            sums = np.zeros(4)
            n_batches = 0
            for start in range(0, len(order), tc.batch_size):
                recs = [dataset.train[i] for i in order[start : start + tc.batch_size]]
                batch = make_batch(recs, cache, model.hierarchy)
                store.zero_grad()
                try:
                    total, j_t, j_nt, j_d, _, _ = forward_losses(model, batch, weights, train=True)
                    total.backward()
                except NumericError as exc:
                    raise NumericError(f"epoch {state.epoch + 1}: {exc}; first bad tensor: {_find_nonfinite(model)}") from exc
                for name, t in store.items():
                    if not np.isfinite(t.grad).all():
                        raise NumericError(f"epoch {state.epoch + 1}: non-finite gradient of {name}")
                adamw_step(store, state, tc.lr, (tc.beta1, tc.beta2), tc.adam_eps, tc.weight_decay)
                sums += [total.item(), j_t.item(), j_nt.item(), j_d.item()]
                n_batches += 1
            state.epoch += 1
            val_f1, val_dist = evaluate_validation(model, dataset.validation, cache)
            means = sums / max(n_batches, 1)
            rec = EpochRecord(state.epoch, *means.tolist(), val_f1, val_dist, time.perf_counter() - t0)
            epochs.append(rec)
            log.info(
                "epoch %d loss %.4f (t %.4f nt %.4f distill %.4f) val_f1 %.4f dist %.3f [%.1fs]",
                rec.epoch, rec.loss_total, rec.loss_t, rec.loss_nt, rec.loss_distill, val_f1, val_dist, rec.seconds,
            )
            if val_f1 > state.best_metric:
                state.best_metric = val_f1
                state.best_epoch = state.epoch
                state.patience_left = tc.patience
                best = snapshot(store)
            else:
                state.patience_left -= 1
            if on_epoch is not None:
                on_epoch(rec, model, state)
            if state.patience_left <= 0:
                stopped = True
                break
    restore(store, best)
    return TrainReport(epochs, state.best_epoch, state.best_metric, stopped, best_params=copy.deepcopy(best))
