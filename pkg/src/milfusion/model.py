"""The full multimodal bag classifier: gated fusion, output layer, objective.

Forward pass per bag: encode instances per modality, pool (dual supervised
attention for cine, plain attention for doppler), fuse the two modality
representations through a learned gate, then map to 3-class probabilities.
The gate alpha = eta(z) / (eta(z) + eta(z~)) with eta(v) = exp(w' tanh(U v))
is computed in log space as sigmoid(score(z) - score(z~)), which is
algebraically identical and cannot overflow.

Training objective per labeled bag: cross-entropy of the predicted class
probabilities plus lambda times the attention supervision loss (skipped when
the cine branch is disabled, lambda is zero, or the bag has no cine
instances).

Degenerate bags: when an enabled modality has no instances in a bag, the
forward pass falls back to the other enabled modality (alpha forced to 1 or
0); if no enabled modality has instances the bag is skipped via BagSkipError.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoders import Encoder, EncoderConfig, encode_rows, init_encoder_arrays, preprocess
from .errors import BagSkipError, ConfigError, ContractError, DataError, FormatError
from .pooling import (
    AttentionModule,
    attention_pool,
    relevance_renormalize,
    sa_loss,
    supervised_attention_pool,
)

logger = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass(frozen=True)
class ModelConfig:
    cine_encoder: EncoderConfig
    doppler_encoder: EncoderConfig
    attention_dim: int = 32
    lambda_sa: float = 10.0
    tau: float = 0.5
    use_cine: bool = True
    use_doppler: bool = True

    def __post_init__(self):
        if not (self.use_cine or self.use_doppler):
            raise ConfigError("at least one modality must be enabled")
        if self.cine_encoder.embed_dim != self.doppler_encoder.embed_dim:
            raise ConfigError(
                "fusion requires a common embedding dim, got "
                f"{self.cine_encoder.embed_dim} and {self.doppler_encoder.embed_dim}"
            )
        if self.attention_dim < 1:
            raise ConfigError("attention_dim must be positive")
        if self.lambda_sa < 0:
            raise ConfigError("lambda_sa must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")

    @property
    def embed_dim(self):
        return self.cine_encoder.embed_dim


ATTENTION_NAMES = ("att_a", "att_b", "att_doppler", "att_fusion")


def param_specs(config):
    """Ordered (name, shape) pairs of every trainable parameter."""
    specs = []
    for prefix, enc in (("cine_encoder.", config.cine_encoder),
                        ("doppler_encoder.", config.doppler_encoder)):
        for i, (fan_in, fan_out) in enumerate(enc.layer_dims):
            specs.append((f"{prefix}layer{i}.W", (fan_in, fan_out)))
            specs.append((f"{prefix}layer{i}.b", (fan_out,)))
    m, l = config.embed_dim, config.attention_dim
    for name in ATTENTION_NAMES:
        specs.append((f"{name}.U", (l, m)))
        specs.append((f"{name}.w", (l,)))
    specs.append(("output.W", (N_CLASSES, m)))
    specs.append(("output.b", (N_CLASSES,)))
    return specs


class MMILModel:
    """Model config plus named float64 parameter arrays."""

    def __init__(self, config, params):
        expected = dict(param_specs(config))
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ContractError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, arr in params.items():
            if tuple(arr.shape) != expected[name]:
                raise ContractError(
                    f"parameter {name}: shape {list(arr.shape)} != expected {list(expected[name])}"
                )
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def copy(self):
        return MMILModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_model(config, seed):
    """Deterministic Glorot-uniform initialization of all parameters."""
    rng = np.random.default_rng(seed)
    params = {}
    for prefix, enc in (("cine_encoder.", config.cine_encoder),
                        ("doppler_encoder.", config.doppler_encoder)):
        for name, arr in init_encoder_arrays(enc, rng).items():
            params[prefix + name] = arr
    m, l = config.embed_dim, config.attention_dim
    for name in ATTENTION_NAMES:
        bu = np.sqrt(6.0 / (m + l))
        bw = np.sqrt(6.0 / (l + 1))
        params[f"{name}.U"] = rng.uniform(-bu, bu, size=(l, m))
        params[f"{name}.w"] = rng.uniform(-bw, bw, size=(l,))
    bo = np.sqrt(6.0 / (m + N_CLASSES))
    params["output.W"] = rng.uniform(-bo, bo, size=(N_CLASSES, m))
    params["output.b"] = np.zeros(N_CLASSES)
    return MMILModel(config, params)


def params_digest(params):
    """sha256 over sorted parameter names and raw little-endian bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].astype("<f8").tobytes())
    return h.hexdigest()


@dataclass
class ForwardOutput:
    probs: ad.Tensor  # [3], sums to 1
    study_embedding: ad.Tensor  # [M]
    alpha: float  # cine share of the fused embedding; 1.0 / 0.0 on single-modality paths
    cine_weights: np.ndarray | None = None
    cine_A: ad.Tensor | None = None
    doppler_weights: np.ndarray | None = None
    tape: ad.Tape = None
    param_leaves: dict = field(default_factory=dict)


def _attention_view(leaves, name):
    return AttentionModule(U=leaves[f"{name}.U"], w=leaves[f"{name}.w"])


def _encoder_view(config, prefix, leaves):
    weights = {}
    for i in range(len(config.layer_dims)):
        weights[f"layer{i}.W"] = leaves[f"{prefix}layer{i}.W"]
        weights[f"layer{i}.b"] = leaves[f"{prefix}layer{i}.b"]
    return Encoder(config, weights)


def _gate_score(att, v):
    m = v.size
    hidden = ad.tanh(ad.matmul(att.U, ad.reshape(v, (m, 1))))  # [L, 1]
    s = ad.matmul(ad.reshape(att.w, (1, att.w.size)), hidden)  # [1, 1]
    return ad.reshape(s, (1,))


def fuse(z, z_dop, att_fusion):
    """Gated average s = alpha z + (1 - alpha) z~; returns (s, alpha as float)."""
    if z.shape != z_dop.shape or len(z.shape) != 1:
        raise ContractError(
            f"fuse needs two 1-D embeddings of equal dim, got "
            f"{list(z.shape)} and {list(z_dop.shape)}"
        )
    diff = ad.add(_gate_score(att_fusion, z), ad.neg(_gate_score(att_fusion, z_dop)))
    alpha = ad.sigmoid(diff)  # [1]
    one = ad.Tensor.const([1.0])
    s = ad.add(ad.scalar_mul(alpha, z), ad.scalar_mul(ad.add(one, ad.neg(alpha)), z_dop))
    return s, float(alpha.data[0])


def _encode_modality(enc, instances):
    rows = np.stack([preprocess(enc.config, inst) for inst in instances])
    return encode_rows(enc, ad.Tensor.const(rows))


def forward(model, bag):
    """Full forward pass on one bag; see the module docstring for the policy."""
    cfg = model.config
    tape = ad.Tape()
    leaves = {name: tape.leaf(arr) for name, arr in model.params.items()}

    run_cine = cfg.use_cine and len(bag.cine_instances) > 0
    run_doppler = cfg.use_doppler and len(bag.doppler_instances) > 0
    if not (run_cine or run_doppler):
        raise BagSkipError(f"bag {bag.id!r}: no instances in any enabled modality")
    if cfg.use_cine and not run_cine:
        logger.info("bag %s: cine empty, falling back to doppler only", bag.id)
    if cfg.use_doppler and not run_doppler:
        logger.info("bag %s: doppler empty, falling back to cine only", bag.id)

    pooled_c = pooled_d = cine_a = None
    if run_cine:
        h = _encode_modality(_encoder_view(cfg.cine_encoder, "cine_encoder.", leaves),
                             bag.cine_instances)
        pooled_c, cine_a = supervised_attention_pool(
            _attention_view(leaves, "att_a"), _attention_view(leaves, "att_b"), h
        )
    if run_doppler:
        h = _encode_modality(_encoder_view(cfg.doppler_encoder, "doppler_encoder.", leaves),
                             bag.doppler_instances)
        pooled_d = attention_pool(_attention_view(leaves, "att_doppler"), h)

    if run_cine and run_doppler:
        s, alpha = fuse(pooled_c.representation, pooled_d.representation,
                        _attention_view(leaves, "att_fusion"))
    elif run_cine:
        s, alpha = pooled_c.representation, 1.0
    else:
        s, alpha = pooled_d.representation, 0.0

    m = cfg.embed_dim
    logits = ad.add(
        ad.reshape(ad.matmul(leaves["output.W"], ad.reshape(s, (m, 1))), (N_CLASSES,)),
        leaves["output.b"],
    )
    return ForwardOutput(
        probs=ad.softmax(logits),
        study_embedding=s,
        alpha=alpha,
        cine_weights=pooled_c.weights.value() if pooled_c else None,
        cine_A=cine_a,
        doppler_weights=pooled_d.weights.value() if pooled_d else None,
        tape=tape,
        param_leaves=leaves,
    )


def total_loss(model, bag, label):
    """Cross-entropy plus lambda-weighted attention supervision; returns (loss, out)."""
    if label not in (0, 1, 2):
        raise ContractError(f"label must be in {{0,1,2}}, got {label!r}")
    out = forward(model, bag)
    loss = ad.neg(ad.log(ad.pick(out.probs, label)))
    cfg = model.config
    if cfg.use_cine and cfg.lambda_sa > 0 and out.cine_A is not None:
        raw = []
        for inst in bag.cine_instances:
            if inst.relevance is None:
                raise DataError(
                    f"bag {bag.id!r}: cine instance lacks a relevance score "
                    "(required when lambda_sa > 0)"
                )
            raw.append(inst.relevance)
        r = relevance_renormalize(ad.Tensor.const(raw), cfg.tau)
        loss = ad.add(loss, ad.scalar_mul(cfg.lambda_sa, sa_loss(r, out.cine_A)))
    return loss, out


# ---------------------------------------------------------------------------
# checkpoints (named-tensor manifest + config block, same binary convention
# as the dataset format)


def _encoder_config_dict(cfg):
    return {
        "modality": cfg.modality,
        "input_dim": cfg.input_dim,
        "hidden_sizes": list(cfg.hidden_sizes),
        "embed_dim": cfg.embed_dim,
        "activation": cfg.activation,
    }


def config_to_dict(cfg):
    return {
        "cine_encoder": _encoder_config_dict(cfg.cine_encoder),
        "doppler_encoder": _encoder_config_dict(cfg.doppler_encoder),
        "attention_dim": cfg.attention_dim,
        "lambda_sa": cfg.lambda_sa,
        "tau": cfg.tau,
        "use_cine": cfg.use_cine,
        "use_doppler": cfg.use_doppler,
    }


def config_from_dict(d):
    try:
        cine = EncoderConfig(
            modality=d["cine_encoder"]["modality"],
            input_dim=int(d["cine_encoder"]["input_dim"]),
            hidden_sizes=tuple(d["cine_encoder"]["hidden_sizes"]),
            embed_dim=int(d["cine_encoder"]["embed_dim"]),
            activation=d["cine_encoder"]["activation"],
        )
        doppler = EncoderConfig(
            modality=d["doppler_encoder"]["modality"],
            input_dim=int(d["doppler_encoder"]["input_dim"]),
            hidden_sizes=tuple(d["doppler_encoder"]["hidden_sizes"]),
            embed_dim=int(d["doppler_encoder"]["embed_dim"]),
            activation=d["doppler_encoder"]["activation"],
        )
        return ModelConfig(
            cine_encoder=cine,
            doppler_encoder=doppler,
            attention_dim=int(d["attention_dim"]),
            lambda_sa=float(d["lambda_sa"]),
            tau=float(d["tau"]),
            use_cine=bool(d["use_cine"]),
            use_doppler=bool(d["use_doppler"]),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint config block lacks key {exc}") from exc


def save_model(model, dir_path):
    root = Path(dir_path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    records = []
    for name in sorted(model.params):
        rel = f"tensors/{name.replace('.', '_')}.bin"
        (root / rel).write_bytes(model.params[name].astype("<f8").tobytes())
        records.append({"name": name, "shape": list(model.params[name].shape), "file": rel})
    manifest = {
        "format_version": 1,
        "config": config_to_dict(model.config),
        "tensors": records,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_model(dir_path):
    root = Path(dir_path)
    path = root / "manifest.json"
    if not path.is_file():
        raise FormatError(f"no checkpoint manifest under {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc}") from exc
    config = config_from_dict(manifest.get("config", {}))
    expected = dict(param_specs(config))
    params = {}
    for rec in manifest.get("tensors", []):
        name = rec.get("name")
        shape = tuple(int(d) for d in rec.get("shape", ()))
        if name not in expected:
            raise FormatError(f"checkpoint tensor {name!r} is not a model parameter")
        if shape != expected[name]:
            raise FormatError(
                f"checkpoint tensor {name!r}: shape {list(shape)} does not match "
                f"config ({list(expected[name])})"
            )
        fpath = root / rec.get("file", "")
        if not fpath.is_file():
            raise FormatError(f"checkpoint tensor {name!r}: missing file {rec.get('file')!r}")
        arr = np.frombuffer(fpath.read_bytes(), dtype="<f8")
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"checkpoint tensor {name!r}: file size does not match shape")
        params[name] = arr.reshape(shape).copy()
    if set(params) != set(expected):
        raise FormatError(
            f"checkpoint lacks tensors: {sorted(set(expected) - set(params))}"
        )
    return MMILModel(config, params)


def ablated(config, use_cine=None, use_doppler=None):
    """Copy of a model config with modality switches overridden."""
    kwargs = {}
    if use_cine is not None:
        kwargs["use_cine"] = use_cine
    if use_doppler is not None:
        kwargs["use_doppler"] = use_doppler
    return replace(config, **kwargs)
