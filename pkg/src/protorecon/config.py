"""Run configuration: a flat JSON object whose keys follow the hyperparameter
table row names, snake-cased."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .corpus import AugmentationConfig
from .dpd import LossWeights
from .seq2seq import Seq2SeqConfig
from .trainer import BstConfig, PiConfig, StrategyConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config field {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # data; an empty train_path means "generate the synthetic corpus"
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    proto_language: str = "Proto"
    mask_path: str = ""
    labeling_percent: float = 100.0
    feature_table_path: str = ""
    synthetic_n_sets: int = 400
    synthetic_n_daughters: int = 4
    # seeds
    dataset_seed: int = 0
    model_seed: int = 0
    # strategy
    architecture: str = "gru"
    strategy: str = "SUPV"
    # optimisation
    batch_size: int = 64
    max_epochs: int = 300
    warmup_epochs: int = 10
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 8e-4
    weight_decay: float = 0.0
    validate_every: int = 3
    early_stopping_patience: int = 24
    eval_batch_size: int = 256
    # DPD loss weights
    dpd_protoform_reconstruction_weight: float = 1.0
    dpd_bridge_network_weight: float = 0.5
    dpd_reflex_prediction_from_gold_protoform_weight: float = 0.5
    dpd_reflex_prediction_from_reconstruction_weight: float = 1.0
    dpd_cringe_loss_weight: float = 0.3
    dpd_cringe_loss_top_k: int = 3
    dpd_cringe_only_correct_reflex: bool = False
    dpd_shared_embedding_size: int = 64
    # D2P network
    d2p_dropout: float = 0.3
    d2p_inference_decode_max_length: int = 15
    d2p_feedforward_dimension: int = 512
    d2p_embedding_size: int = 64
    d2p_model_size: int = 64
    d2p_encoder_layers_count: int = 2
    d2p_number_of_heads: int = 8
    d2p_max_input_length: int = 128
    # P2D network
    p2d_dropout: float = 0.3
    p2d_inference_decode_max_length: int = 15
    p2d_feedforward_dimension: int = 512
    p2d_model_size: int = 64
    p2d_encoder_layers_count: int = 2
    p2d_number_of_heads: int = 8
    p2d_max_input_length: int = 128
    # bootstrapping
    bootstrapping_log_probability_threshold: float = -0.007
    bootstrapping_max_new_pseudo_labels_per_epoch: int = 30
    bootstrapping_warmup_epochs: int = 10
    # Pi-model
    pi_model_consistency_ramp_up_epochs: int = 50
    pi_model_max_consistency_scaling: float = 100.0
    pi_model_consistency_space: str = "prob"
    # augmentation of training inputs
    daughter_drop_probability: float = 0.2
    permute_daughters: bool = True
    augment_primary_input: bool = True

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("<root>", "configuration must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        for key in obj:
            if key not in known:
                raise ConfigError(key, "unknown key")
        values = {}
        for key, raw in obj.items():
            values[key] = _coerce(key, raw, known[key].type)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError("<file>", f"{path}: {exc}") from None
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kw})

    def validate(self) -> None:
        for key in ("batch_size", "eval_batch_size", "validate_every", "early_stopping_patience"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("max_epochs", "warmup_epochs", "learning_rate", "weight_decay"):
            if not getattr(self, key) >= 0:
                raise ConfigError(key, "must be >= 0")
        try:
            self.to_train_config()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(_guess_key(str(exc)), str(exc)) from None
        if not 0 < self.labeling_percent <= 100:
            raise ConfigError("labeling_percent", "must be in (0, 100]")
        if self.train_path and not self.valid_path:
            raise ConfigError("valid_path", "required when train_path is given")

    @property
    def d_emb(self) -> int:
        return self.dpd_shared_embedding_size if StrategyConfig.from_name(self.strategy).use_dpd else self.d2p_embedding_size

    def to_train_config(self) -> TrainConfig:
        try:
            strategy = StrategyConfig.from_name(
                self.strategy,
                architecture=self.architecture,
                weights=LossWeights(
                    w_d2p=self.dpd_protoform_reconstruction_weight,
                    w_bridge=self.dpd_bridge_network_weight,
                    w_p2d_gold=self.dpd_reflex_prediction_from_gold_protoform_weight,
                    w_p2d_pred=self.dpd_reflex_prediction_from_reconstruction_weight,
                    cringe_alpha=self.dpd_cringe_loss_weight,
                    cringe_top_k=self.dpd_cringe_loss_top_k,
                    cringe_only_correct_reflex=self.dpd_cringe_only_correct_reflex,
                ),
                pi=PiConfig(self.pi_model_consistency_ramp_up_epochs, self.pi_model_max_consistency_scaling,
                            self.pi_model_consistency_space),
                bst=BstConfig(self.bootstrapping_warmup_epochs, self.bootstrapping_log_probability_threshold,
                              self.bootstrapping_max_new_pseudo_labels_per_epoch),
            )
        except ValueError as exc:
            raise ConfigError("strategy", str(exc)) from None
        d_emb = self.d_emb
        d2p = _section("d2p", lambda: Seq2SeqConfig(
            self.architecture, d_emb, self.d2p_model_size, self.d2p_encoder_layers_count,
            self.d2p_number_of_heads, self.d2p_feedforward_dimension, self.d2p_dropout,
            self.d2p_inference_decode_max_length, self.d2p_max_input_length))
        p2d = _section("p2d", lambda: Seq2SeqConfig(
            self.architecture, d_emb, self.p2d_model_size, self.p2d_encoder_layers_count,
            self.p2d_number_of_heads, self.p2d_feedforward_dimension, self.p2d_dropout,
            self.p2d_inference_decode_max_length, self.p2d_max_input_length))
        for key in ("d2p_dropout", "p2d_dropout"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(key, "must be in [0, 1)")
        return TrainConfig(
            strategy=strategy, d2p=d2p, p2d=p2d, batch_size=self.batch_size, max_epochs=self.max_epochs,
            warmup_epochs=self.warmup_epochs, learning_rate=self.learning_rate, beta1=self.beta_1,
            beta2=self.beta_2, epsilon=self.epsilon, weight_decay=self.weight_decay,
            validate_every=self.validate_every, patience=self.early_stopping_patience,
            augmentation=AugmentationConfig(self.daughter_drop_probability, self.permute_daughters),
            augment_primary=self.augment_primary_input, eval_batch_size=self.eval_batch_size,
        )


def _section(prefix: str, build):
    try:
        return build()
    except ValueError as exc:
        msg = str(exc)
        if "architecture" in msg:
            key = "architecture"
        elif "head" in msg:
            key = f"{prefix}_number_of_heads"
        else:
            key = f"{prefix}_encoder_layers_count" if "layers" in msg else f"{prefix}_model_size"
        raise ConfigError(key, msg) from None


def _coerce(key: str, raw, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if not isinstance(raw, bool):
            raise ConfigError(key, f"expected true/false, got {raw!r}")
        return raw
    if typ == "int":
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(key, f"expected an integer, got {raw!r}")
        return raw
    if typ == "float":
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            # allow the JSON-unrepresentable infinities as strings
            if raw in ("inf", "-inf", "Infinity", "-Infinity"):
                return float(raw.replace("inity", ""))
            raise ConfigError(key, f"expected a number, got {raw!r}")
        if math.isnan(raw):
            raise ConfigError(key, "NaN is not allowed")
        return float(raw)
    if not isinstance(raw, str):
        raise ConfigError(key, f"expected a string, got {raw!r}")
    return raw


def _guess_key(message: str) -> str:
    for f in fields(RunConfig):
        if f.name in message:
            return f.name
    return "<config>"
