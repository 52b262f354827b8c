"""Self-critic policy-gradient training with asynchronous loss updates.

Two optimizers run side by side on disjoint parameter groups:

* the ``rl`` group (embedding, fusion, decoder) descends a REINFORCE
  surrogate once per batch, with a frozen greedy copy of the policy as
  the cost baseline;
* the ``hg`` group (hyperedge selection and reconstruction projection)
  descends the encoder's reconstruction loss, whose gradients are
  accumulated over the whole epoch and applied in a single step, so the
  hyperedge structure stays fixed while a batch of routes is scored.

The baseline is refreshed from the actor only when a one-sided paired
t-test over a fixed validation set says the actor is better with
p below the configured threshold.

Every epoch is checkpointed with enough state — weights of both models,
both optimizers' moments, and the exact bit-generator states of the
data and sampling streams — that resuming reproduces the original run
bit for bit.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import reduce
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats as _scipy_stats

from . import autodiff as ad
from .autodiff import Tensor, backward
from .decoder import DecoderParams, build_decoder_params, rollout
from .encoder import (
    EncodedGraph,
    EncoderParams,
    ModelConfig,
    build_encoder_params,
    encode_batch,
)
from .errors import CheckpointFormatError
from .instances import Instance, atomic_write_text, generate_instance
from .params import (
    AdamState,
    ParameterStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    stats_arrays,
)
from .routes import Solution

__all__ = [
    "EpochStats",
    "Model",
    "StepInfo",
    "TrainConfig",
    "TrainResult",
    "TRAIN_CSV_COLUMNS",
    "best_of_k",
    "build_model",
    "greedy_costs",
    "learning_rate",
    "load_model",
    "model_config_from_dict",
    "model_config_to_dict",
    "paired_t_pvalue",
    "policy_gradient_loss",
    "train",
    "train_config_from_dict",
    "train_config_to_dict",
    "validation_instances",
]


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------

@dataclass
class Model:
    """One policy: configuration, parameter store, and typed handles."""

    cfg: ModelConfig
    store: ParameterStore
    encoder: EncoderParams
    decoder: DecoderParams


def build_model(cfg: ModelConfig, seed: int = 0,
                rng: np.random.Generator | None = None) -> Model:
    """Fresh model with a fixed parameter registration and draw order."""
    if rng is None:
        rng = np.random.default_rng(seed)
    store = ParameterStore()
    enc = build_encoder_params(store, cfg, rng)
    dec = build_decoder_params(store, cfg, rng)
    return Model(cfg=cfg, store=store, encoder=enc, decoder=dec)


def _copy_model_state(dst: Model, src: Model) -> None:
    """Make ``dst`` an exact copy of ``src``: weights and the batch-norm
    running statistics."""
    dst.store.copy_values_from(src.store)
    dst.encoder.bn_running.copy_from(src.encoder.bn_running)


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        hidden_dim=int(d["hidden_dim"]),
        heads=int(d["heads"]),
        delta=float(d["delta"]),
        lam=float(d["lam"]),
        gamma=float(d["gamma"]),
        constraints=tuple(d["constraints"]),
        r_prox=float(d["r_prox"]),
        clip=float(d["clip"]),
        variant=str(d["variant"]),
    )


# ---------------------------------------------------------------------------
# Loss pieces
# ---------------------------------------------------------------------------

def policy_gradient_loss(log_probs: Sequence[Tensor],
                         advantages: np.ndarray) -> Tensor:
    """REINFORCE surrogate ``mean(advantage * log_prob)``.

    With ``advantage = actor_cost - baseline_cost`` the surrogate's
    gradient points uphill in expected cost for positive advantages, so
    minimizing it drives the policy toward cheaper tours than the
    baseline's.
    """
    if len(log_probs) != len(advantages):
        raise ValueError("one advantage per log-probability required")
    if len(log_probs) == 0:
        raise ValueError("empty batch")
    terms = [ad.scale(lp, float(a)) for lp, a in zip(log_probs, advantages)]
    return ad.scale(reduce(ad.add, terms), 1.0 / len(terms))


def paired_t_pvalue(diffs: np.ndarray) -> float:
    """One-sided paired t-test p-value for ``mean(diffs) < 0``.

    ``diffs`` holds per-instance cost differences (actor minus
    baseline); a small p-value means the actor is significantly
    cheaper.  A degenerate sample with zero spread short-circuits to 0
    when every difference favors the actor and 1 otherwise.
    """
    diffs = np.asarray(diffs, dtype=np.float64)
    b = diffs.size
    if b < 2:
        raise ValueError("a paired t-test needs at least two pairs")
    mean = diffs.mean()
    sd = diffs.std(ddof=1)
    if sd == 0.0:
        return 0.0 if mean < 0.0 else 1.0
    t = mean / (sd / math.sqrt(b))
    return float(_scipy_stats.t.cdf(t, b - 1))


def learning_rate(lr0: float, decay: float, epoch: int) -> float:
    """Exponentially decayed rate, computed fresh from the epoch index
    so a resumed run sees the exact same floats."""
    return lr0 * decay ** epoch


# ---------------------------------------------------------------------------
# Training configuration and bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines one training run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 20
    batches_per_epoch: int = 156
    batch_size: int = 64
    val_size: int = 128
    customers: int = 20
    capacity: int = 30
    lr0: float = 1e-4
    lr_decay: float = 0.96
    swap_epsilon: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs and batches_per_epoch must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.val_size < 2:
            raise ValueError("val_size must be at least 2 for the paired "
                             "t-test")
        if self.customers < 1:
            raise ValueError("customers must be positive")
        if self.capacity < 9:
            raise ValueError("capacity must cover the largest demand (9)")
        if not (self.lr0 > 0.0 and 0.0 < self.lr_decay <= 1.0):
            raise ValueError("need lr0 > 0 and 0 < lr_decay <= 1")
        if not 0.0 <= self.swap_epsilon <= 1.0:
            raise ValueError("swap_epsilon must lie in [0, 1]")


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(
        model=model_config_from_dict(d["model"]),
        epochs=int(d["epochs"]),
        batches_per_epoch=int(d["batches_per_epoch"]),
        batch_size=int(d["batch_size"]),
        val_size=int(d["val_size"]),
        customers=int(d["customers"]),
        capacity=int(d["capacity"]),
        lr0=float(d["lr0"]),
        lr_decay=float(d["lr_decay"]),
        swap_epsilon=float(d["swap_epsilon"]),
        seed=int(d["seed"]),
    )


TRAIN_CSV_COLUMNS = (
    "epoch", "lr", "mean_actor_cost", "mean_baseline_cost",
    "L_node", "L_rec", "L_con", "L_hg",
    "ttest_p", "baseline_swapped", "wallclock_s",
)


@dataclass(frozen=True)
class EpochStats:
    """One epoch's log row plus the validation curve entries."""

    epoch: int
    lr: float
    mean_actor_cost: float          # over the epoch's training batches
    mean_baseline_cost: float
    l_node: float
    l_rec: float
    l_con: float
    l_hg: float
    ttest_p: float
    baseline_swapped: bool
    wallclock_s: float
    val_actor_cost: float           # greedy mean on the validation set
    val_baseline_cost: float

    def csv_row(self) -> dict:
        return {
            "epoch": self.epoch, "lr": self.lr,
            "mean_actor_cost": self.mean_actor_cost,
            "mean_baseline_cost": self.mean_baseline_cost,
            "L_node": self.l_node, "L_rec": self.l_rec,
            "L_con": self.l_con, "L_hg": self.l_hg,
            "ttest_p": self.ttest_p,
            "baseline_swapped": self.baseline_swapped,
            "wallclock_s": self.wallclock_s,
        }


def _stats_from_row(row: dict) -> EpochStats:
    return EpochStats(
        epoch=int(row["epoch"]), lr=float(row["lr"]),
        mean_actor_cost=float(row["mean_actor_cost"]),
        mean_baseline_cost=float(row["mean_baseline_cost"]),
        l_node=float(row["L_node"]), l_rec=float(row["L_rec"]),
        l_con=float(row["L_con"]), l_hg=float(row["L_hg"]),
        ttest_p=float(row["ttest_p"]),
        baseline_swapped=bool(row["baseline_swapped"]),
        wallclock_s=float(row["wallclock_s"]),
        val_actor_cost=float(row["val_actor_cost"]),
        val_baseline_cost=float(row["val_baseline_cost"]),
    )


def _row_from_stats(s: EpochStats) -> dict:
    row = s.csv_row()
    row["val_actor_cost"] = s.val_actor_cost
    row["val_baseline_cost"] = s.val_baseline_cost
    return row


def training_csv_text(history: Iterable[EpochStats]) -> str:
    """Render the training log exactly as it is written to disk."""
    lines = [",".join(TRAIN_CSV_COLUMNS)]
    for s in history:
        row = s.csv_row()
        cells = []
        for col in TRAIN_CSV_COLUMNS:
            v = row[col]
            if isinstance(v, bool):
                cells.append("true" if v else "false")
            elif isinstance(v, int):
                cells.append(str(v))
            else:
                cells.append(repr(float(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class StepInfo:
    """Handed to the per-batch hook; the store is live — do not mutate."""

    epoch: int
    batch: int
    mean_actor_cost: float
    mean_baseline_cost: float
    store: ParameterStore


@dataclass
class TrainResult:
    """Outcome of a training run (or of a resumed remainder of one)."""

    history: tuple[EpochStats, ...]
    actor: Model
    baseline: Model
    best_epoch: int
    best_val_cost: float
    csv_path: Path | None = None
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None

    @property
    def val_costs(self) -> tuple[float, ...]:
        return tuple(s.val_actor_cost for s in self.history)


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def greedy_costs(model: Model, instances: Sequence[Instance]) -> np.ndarray:
    """Greedy rollout cost per instance, in evaluation mode (running
    batch-norm statistics, so results are independent of batching)."""
    graphs = encode_batch(instances, model.encoder, model.cfg, training=False)
    return np.array([rollout(g, model.decoder, model.cfg, mode="greedy")
                     .solution.cost for g in graphs])


def best_of_k(model: Model, inst: Instance, k: int,
              rng: np.random.Generator) -> Solution:
    """Best of ``k`` sampled tours for one instance (evaluation mode)."""
    if k < 1:
        raise ValueError("k must be positive")
    graph = encode_batch([inst], model.encoder, model.cfg, training=False)[0]
    best: Solution | None = None
    for _ in range(k):
        sol = rollout(graph, model.decoder, model.cfg, mode="sampled",
                      rng=rng).solution
        if best is None or sol.cost < best.cost:
            best = sol
    return best


# ---------------------------------------------------------------------------
# Checkpoint layout
# ---------------------------------------------------------------------------

_STATE_KIND = "train_state"
_BN_PREFIX = "enc.bn_running"


def _model_tensor_entries(model: Model) -> dict[str, tuple[np.ndarray, str]]:
    out = {name: (arr, model.store.group_of(name))
           for name, arr in model.store.values().items()}
    out.update(stats_arrays(_BN_PREFIX, model.encoder.bn_running))
    return out


def _state_tensors(actor: Model, baseline: Model, adam_rl: AdamState,
                   adam_hg: AdamState) -> dict[str, tuple[np.ndarray, str]]:
    out = dict(_model_tensor_entries(actor))
    for name, entry in _model_tensor_entries(baseline).items():
        out[f"baseline/{name}"] = entry
    for label, state in (("rl", adam_rl), ("hg", adam_hg)):
        for kind, buffers in (("m", state.m), ("v", state.v)):
            for name, arr in buffers.items():
                out[f"optim/{label}/{kind}/{name}"] = (arr, "stats")
    return out


def _restore_model_from(tensors: dict[str, tuple[np.ndarray, str]],
                        model: Model, prefix: str = "") -> None:
    values = {}
    for name in model.store.names():
        key = prefix + name
        if key not in tensors:
            raise CheckpointFormatError(f"checkpoint is missing {key!r}")
        values[name] = tensors[key][0]
    model.store.load_values(values)
    try:
        model.encoder.bn_running.mean = tensors[
            f"{prefix}{_BN_PREFIX}.mean"][0].copy()
        model.encoder.bn_running.var = tensors[
            f"{prefix}{_BN_PREFIX}.var"][0].copy()
    except KeyError as exc:
        raise CheckpointFormatError(
            f"checkpoint is missing normalization statistics: {exc}")


def _restore_adam(tensors: dict[str, tuple[np.ndarray, str]], label: str,
                  step: int) -> AdamState:
    state = AdamState(step=step)
    for key, (arr, _) in tensors.items():
        head = f"optim/{label}/"
        if key.startswith(head):
            kind, name = key[len(head):].split("/", 1)
            getattr(state, kind)[name] = arr.copy()
    return state


def load_model(path: str | Path) -> tuple[Model, dict]:
    """Rebuild the actor stored in a training checkpoint."""
    tensors, extra = load_checkpoint(path)
    if extra.get("kind") != _STATE_KIND:
        raise CheckpointFormatError(
            f"not a training checkpoint: kind={extra.get('kind')!r}")
    cfg = model_config_from_dict(extra["model_config"])
    model = build_model(cfg, seed=0)
    _restore_model_from(tensors, model)
    return model, extra


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

def _draw_instances(cfg: TrainConfig, rng: np.random.Generator,
                    count: int, label: str) -> list[Instance]:
    out = []
    for i in range(count):
        seed = int(rng.integers(0, 2**63 - 1))
        out.append(generate_instance(cfg.customers, cfg.capacity, seed,
                                     name=f"{label}-{i}-s{seed}"))
    return out


def _mean_loss(graphs: Sequence[EncodedGraph]) -> Tensor:
    total = reduce(ad.add, [g.losses.total for g in graphs])
    return ad.scale(total, 1.0 / len(graphs))


def validation_instances(cfg: TrainConfig) -> list[Instance]:
    """The fixed validation set of a training run, reproducible from its
    configuration alone (it is the fourth spawned random stream)."""
    val_ss = np.random.SeedSequence(cfg.seed).spawn(4)[3]
    return _draw_instances(cfg, np.random.default_rng(val_ss),
                           cfg.val_size, "val")


def train(cfg: TrainConfig, out_dir: str | Path | None = None,
          on_step: Callable[[StepInfo], None] | None = None,
          progress: Callable[[str], None] | None = None,
          resume_from: str | Path | None = None) -> TrainResult:
    """Run (or resume) one training job.

    When ``out_dir`` is given it receives ``training.csv`` (one row per
    epoch, rewritten atomically), per-epoch checkpoints under
    ``checkpoints/``, and ``best.ckpt`` tracking the lowest greedy
    validation cost.  ``resume_from`` restarts after the checkpointed
    epoch and continues bit-identically to the uninterrupted run.
    """
    mcfg = cfg.model
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    csv_path = None
    best_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        csv_path = out / "training.csv"
        best_path = out / "best.ckpt"

    # Independent, named random streams.  The spawn order is part of the
    # format: initialization, training data, action sampling, validation
    # data.
    init_ss, data_ss, sample_ss, _ = \
        np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng = np.random.default_rng(data_ss)
    sample_rng = np.random.default_rng(sample_ss)
    val_instances = validation_instances(cfg)

    history: list[EpochStats] = []
    start_epoch = 0
    best_epoch = -1
    best_val = math.inf

    if resume_from is None:
        actor = build_model(mcfg, rng=np.random.default_rng(init_ss))
        baseline = build_model(mcfg, seed=0)
        _copy_model_state(baseline, actor)
        adam_rl = AdamState()
        adam_hg = AdamState()
    else:
        tensors, extra = load_checkpoint(resume_from)
        if extra.get("kind") != _STATE_KIND:
            raise CheckpointFormatError(
                f"not a training checkpoint: kind={extra.get('kind')!r}")
        if extra["model_config"] != model_config_to_dict(mcfg):
            raise CheckpointFormatError(
                "checkpoint was trained with a different model "
                "configuration")
        saved_train = dict(extra["train_config"])
        current_train = train_config_to_dict(cfg)
        for key in current_train:
            if key == "epochs":
                continue
            if saved_train.get(key) != current_train[key]:
                raise CheckpointFormatError(
                    f"checkpoint disagrees on {key!r}: "
                    f"{saved_train.get(key)!r} != {current_train[key]!r}")
        actor = build_model(mcfg, seed=0)
        baseline = build_model(mcfg, seed=0)
        _restore_model_from(tensors, actor)
        _restore_model_from(tensors, baseline, prefix="baseline/")
        adam_rl = _restore_adam(tensors, "rl", int(extra["adam_rl_step"]))
        adam_hg = _restore_adam(tensors, "hg", int(extra["adam_hg_step"]))
        data_rng.bit_generator.state = extra["rng_data"]
        sample_rng.bit_generator.state = extra["rng_sample"]
        history = [_stats_from_row(r) for r in extra["history"]]
        start_epoch = int(extra["epoch"]) + 1
        best_epoch = int(extra["best_epoch"])
        best_val = float(extra["best_val_cost"])

    hg_names = actor.store.names("hg")

    def flush_outputs(epoch: int) -> tuple[Path | None, Path | None]:
        if out is None:
            return None, None
        atomic_write_text(csv_path, training_csv_text(history))
        entries = _state_tensors(actor, baseline, adam_rl, adam_hg)
        extra = {
            "kind": _STATE_KIND,
            "epoch": epoch,
            "model_config": model_config_to_dict(mcfg),
            "train_config": train_config_to_dict(cfg),
            "adam_rl_step": adam_rl.step,
            "adam_hg_step": adam_hg.step,
            "rng_data": data_rng.bit_generator.state,
            "rng_sample": sample_rng.bit_generator.state,
            "history": [_row_from_stats(s) for s in history],
            "best_epoch": best_epoch,
            "best_val_cost": best_val,
        }
        path = ckpt_dir / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(path, entries, extra)
        if best_epoch == epoch:
            save_checkpoint(best_path, entries, extra)
        return path, best_path

    last_path = None
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(cfg.lr0, cfg.lr_decay, epoch)
        hg_accum: dict[str, np.ndarray] = {}
        cost_a_sum = cost_b_sum = 0.0
        loss_sums = np.zeros(4)  # node, rec, con, total

        for batch in range(cfg.batches_per_epoch):
            instances = _draw_instances(cfg, data_rng, cfg.batch_size,
                                        f"train-e{epoch}-b{batch}")
            graphs = encode_batch(instances, actor.encoder, mcfg,
                                  training=True, update_running=True)
            loss_sums += [
                float(np.mean([g.losses.node.data for g in graphs])),
                float(np.mean([g.losses.rec.data for g in graphs])),
                float(np.mean([g.losses.con.data for g in graphs])),
                float(np.mean([g.losses.total.data for g in graphs])),
            ]
            if hg_names:
                backward(_mean_loss(graphs))
                for name, grad in actor.store.gradients("hg").items():
                    if name in hg_accum:
                        hg_accum[name] += grad
                    else:
                        hg_accum[name] = grad

            actor_rollouts = [rollout(g, actor.decoder, mcfg, mode="sampled",
                                      rng=sample_rng) for g in graphs]
            base_graphs = encode_batch(instances, baseline.encoder, mcfg,
                                       training=True, update_running=False)
            base_costs = np.array(
                [rollout(g, baseline.decoder, mcfg, mode="greedy")
                 .solution.cost for g in base_graphs])
            actor_costs = np.array([r.solution.cost for r in actor_rollouts])

            surrogate = policy_gradient_loss(
                [r.log_prob for r in actor_rollouts],
                actor_costs - base_costs)
            backward(surrogate)
            adam_step(actor.store, actor.store.gradients("rl"), adam_rl, lr)

            cost_a_sum += actor_costs.mean()
            cost_b_sum += base_costs.mean()
            if on_step is not None:
                on_step(StepInfo(epoch=epoch, batch=batch,
                                 mean_actor_cost=float(actor_costs.mean()),
                                 mean_baseline_cost=float(base_costs.mean()),
                                 store=actor.store))

        if hg_accum:
            mean_grads = {k: v / cfg.batches_per_epoch
                          for k, v in hg_accum.items()}
            adam_step(actor.store, mean_grads, adam_hg, lr)

        val_actor = greedy_costs(actor, val_instances)
        val_base = greedy_costs(baseline, val_instances)
        p_value = paired_t_pvalue(val_actor - val_base)
        swapped = p_value < cfg.swap_epsilon
        if swapped:
            _copy_model_state(baseline, actor)

        loss_means = loss_sums / cfg.batches_per_epoch
        stats = EpochStats(
            epoch=epoch, lr=lr,
            mean_actor_cost=cost_a_sum / cfg.batches_per_epoch,
            mean_baseline_cost=cost_b_sum / cfg.batches_per_epoch,
            l_node=loss_means[0], l_rec=loss_means[1],
            l_con=loss_means[2], l_hg=loss_means[3],
            ttest_p=p_value, baseline_swapped=swapped,
            wallclock_s=time.perf_counter() - t0,
            val_actor_cost=float(val_actor.mean()),
            val_baseline_cost=float(val_base.mean()),
        )
        history.append(stats)
        if stats.val_actor_cost < best_val:
            best_val = stats.val_actor_cost
            best_epoch = epoch
        last_path, _ = flush_outputs(epoch)
        if progress is not None:
            progress(f"epoch {epoch}: val {stats.val_actor_cost:.4f} "
                     f"train {stats.mean_actor_cost:.4f} "
                     f"p {p_value:.4f}{' swap' if swapped else ''}")

    return TrainResult(
        history=tuple(history), actor=actor, baseline=baseline,
        best_epoch=best_epoch, best_val_cost=best_val,
        csv_path=csv_path, best_checkpoint=best_path,
        last_checkpoint=last_path,
    )


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["constraints"] = list(cfg.constraints)
    return d


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["model"] = model_config_to_dict(cfg.model)
    return d
