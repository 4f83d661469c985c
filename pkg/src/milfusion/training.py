"""Supervised trainer (SGD with momentum, one bag per step) and the
curriculum-labeling semi-supervised controller.

Update rule per parameter:  v <- momentum * v + grad + weight_decay * theta;
theta <- theta - lr * v.

Curriculum schedule: six rounds selecting the top 0%, 20%, 40%, 60%, 80% and
100% most-confident pseudo-labeled bags. Every round trains a fresh model from
a new random initialization (round r uses init seed = config.seed + r); the
returned model is the round with the best validation balanced accuracy. An
optional early abort fires when a round's validation balanced accuracy falls
more than 10 points below the best round so far.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward
from .data import iterate_split, with_label
from .errors import BagSkipError, ConfigError, NumericError, UsageError
from .metrics import PredictionSet, PredRow, balanced_accuracy
from .model import MMILModel, forward, init_model, params_digest, total_loss

logger = logging.getLogger(__name__)

ROUND_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    max_epochs: int = 30
    patience: int = 6
    seed: int = 0

    def __post_init__(self):
        # learning_rate 0 is allowed (null update); everything else positive
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")


@dataclass
class PseudoLabelRecord:
    bag_id: str
    predicted_class: int  # argmax of the probability vector, ties -> lowest index
    confidence: float  # max component of the probability vector


@dataclass
class CurriculumState:
    round: int
    selected_fraction: float
    selected_ids: set
    history: list = field(default_factory=list)


def predictions_for(model, bags):
    """Inference over bags as a PredictionSet; degenerate bags are skipped."""
    rows = []
    for bag in bags:
        try:
            out = forward(model, bag)
        except BagSkipError as exc:
            logger.warning("skipping bag during evaluation: %s", exc)
            continue
        rows.append(PredRow(bag.id, bag.label, out.probs.value()))
    return PredictionSet(rows)


def validation_balanced_accuracy(model, bags):
    return balanced_accuracy(predictions_for(model, bags))


def train_supervised(init_seed, train_bags, val_bags, model_config, train_config):
    """Train one model; returns (model at the best-validation epoch, history).

    History is a dict with per-epoch rows and the init fingerprint used by the
    fresh-initialization audit.
    """
    train_bags = list(train_bags)
    val_bags = list(val_bags)
    if not train_bags:
        raise UsageError("empty training set")
    for bag in train_bags:
        if bag.label is None:
            raise UsageError(f"training bag {bag.id!r} has no label")

    model = init_model(model_config, init_seed)
    history = {
        "init_seed": init_seed,
        "init_weights_sha256": params_digest(model.params),
        "epochs": [],
    }
    velocity = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    rng = np.random.default_rng(train_config.seed)
    lr = train_config.learning_rate
    mom = train_config.momentum
    wd = train_config.weight_decay

    best_bacc = -np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = 0
    since_best = 0
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train_bags))
        epoch_loss = 0.0
        for i in order:
            bag = train_bags[i]
            loss, out = total_loss(model, bag, bag.label)
            loss_value = float(loss.data[0])
            if not np.isfinite(loss_value):
                raise NumericError(f"non-finite loss on bag {bag.id!r}: {loss_value!r}")
            epoch_loss += loss_value
            backward(out.tape, loss)
            for name, leaf in out.param_leaves.items():
                grad = out.tape.gradients[leaf.node_id].data.reshape(model.params[name].shape)
                v = velocity[name]
                v *= mom
                v += grad + wd * model.params[name]
                model.params[name] -= lr * v
        val_bacc = validation_balanced_accuracy(model, val_bags) if val_bags else 0.0
        history["epochs"].append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / len(train_bags),
                "val_balanced_accuracy": val_bacc,
            }
        )
        if val_bacc > best_bacc:
            best_bacc = val_bacc
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_config.patience:
                break
    history["best_epoch"] = best_epoch
    history["best_val_balanced_accuracy"] = float(best_bacc) if val_bags else None
    return MMILModel(model_config, best_params), history


def pseudo_label(model, unlabeled_bags):
    """One (bag id, argmax class, max probability) record per non-skipped bag."""
    records = []
    for bag in unlabeled_bags:
        try:
            out = forward(model, bag)
        except BagSkipError as exc:
            logger.warning("pseudo-labeling skipped a bag: %s", exc)
            continue
        probs = out.probs.value()
        records.append(PseudoLabelRecord(bag.id, int(np.argmax(probs)), float(probs.max())))
    return records


def select_confident(records, fraction):
    """The floor(fraction * N) bag ids with the highest confidence.

    Ties are broken toward the lexicographically smaller bag id, so the result
    is independent of the input order.
    """
    if not 0.0 <= fraction <= 1.0:
        raise UsageError(f"fraction must be in [0, 1], got {fraction}")
    count = int(np.floor(fraction * len(records) + 1e-9))
    ranked = sorted(records, key=lambda r: (-r.confidence, r.bag_id))
    return {r.bag_id for r in ranked[:count]}


def run_curriculum(dataset, model_config, train_config, hidden_truth=None,
                   early_abort_drop=0.10):
    """Six curriculum rounds; returns (best model, per-round report rows).

    ``hidden_truth`` is a diagnostics-only map of unlabeled bag id -> true
    label used solely for the pseudo_label_accuracy report field; no training
    path reads it. ``early_abort_drop`` stops the schedule when a round's
    validation balanced accuracy falls more than that far below the best
    round; pass None to always run all six rounds.
    """
    labeled = iterate_split(dataset, "train")
    val_bags = iterate_split(dataset, "val")
    if not labeled:
        raise UsageError("dataset has no labeled train split")
    unlabeled = iterate_split(dataset, "unlabeled")

    if not unlabeled:
        logger.warning("no unlabeled bags: degrading to supervised-only training")
        model, history = train_supervised(
            train_config.seed + 1, labeled, val_bags, model_config, train_config
        )
        row = {
            "round": 1,
            "fraction": 0.0,
            "selected_count": 0,
            "val_balanced_accuracy": history["best_val_balanced_accuracy"],
            "pseudo_label_accuracy": None,
            "init_seed": history["init_seed"],
            "init_weights_sha256": history["init_weights_sha256"],
        }
        return model, [row]

    report = []
    best = None  # (bacc, round, model)
    prev_model = None
    for round_num, fraction in enumerate(ROUND_FRACTIONS, start=1):
        if round_num == 1:
            state = CurriculumState(round_num, fraction, set(), report)
            extra, pl_accuracy = [], None
        else:
            records = pseudo_label(prev_model, unlabeled)
            state = CurriculumState(
                round_num, fraction, select_confident(records, fraction), report
            )
            by_id = {r.bag_id: r for r in records}
            extra = [with_label(b, by_id[b.id].predicted_class)
                     for b in unlabeled if b.id in state.selected_ids]
            pl_accuracy = None
            if hidden_truth and state.selected_ids:
                hits = [by_id[i].predicted_class == hidden_truth.get(i)
                        for i in state.selected_ids]
                pl_accuracy = float(np.mean(hits))

        model, history = train_supervised(
            train_config.seed + round_num, labeled + extra, val_bags,
            model_config, train_config,
        )
        bacc = history["best_val_balanced_accuracy"]
        report.append(
            {
                "round": state.round,
                "fraction": state.selected_fraction,
                "selected_count": len(extra),
                "val_balanced_accuracy": bacc,
                "pseudo_label_accuracy": pl_accuracy,
                "init_seed": history["init_seed"],
                "init_weights_sha256": history["init_weights_sha256"],
            }
        )
        logger.info(
            "curriculum round %d: %d pseudo-labeled bags, val balanced accuracy %.4f",
            round_num, len(extra), bacc,
        )
        if best is None or bacc > best[0]:
            best = (bacc, round_num, model)
        elif early_abort_drop is not None and bacc < best[0] - early_abort_drop:
            logger.warning(
                "early abort after round %d: validation balanced accuracy dropped "
                "%.0f points below the best round", round_num, 100 * early_abort_drop,
            )
            break
        prev_model = model
    return best[2], report
