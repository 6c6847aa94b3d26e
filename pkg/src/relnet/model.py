"""Relation Network: embedding module, relation module, pooling and loss.

The few-shot network embeds images with four conv blocks, pools the K
sample embeddings of each class by element-wise sum, concatenates each class
map with each query map in depth and scores the pair with a small
convolutional relation module ending in a sigmoid.

The zero-shot network replaces the image branch for the classes with an MLP
over attribute vectors and compares against precomputed query features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from relnet import ops
from relnet.optim import ParamSet
from relnet.tensor import ShapeError, Tensor, as_tensor, get_default_dtype


@dataclass
class ZslConfig:
    attribute_dim: int = 85
    fc1_hidden: int = 1024
    feature_dim: int = 1024
    fc3_hidden: int = 400
    fc3_relu: bool = True

    @classmethod
    def awa(cls) -> "ZslConfig":
        return cls(attribute_dim=85, fc1_hidden=1024, feature_dim=1024, fc3_hidden=400)

    @classmethod
    def cub(cls) -> "ZslConfig":
        return cls(attribute_dim=312, fc1_hidden=1200, feature_dim=1024, fc3_hidden=1200)


@dataclass
class ModelConfig:
    """Architecture of the few-shot Relation Network.

    ``embed_paddings`` holds the conv padding of the four embedding blocks
    (max-pooling follows blocks 1 and 2 only); ``relation_paddings`` those of
    the two relation conv blocks (each followed by max-pooling).  When
    ``expected_relation_features`` is set, construction fails unless the
    flattened relation-FC input has exactly that length.
    """

    input_channels: int = 1
    input_size: int = 28
    channels: int = 64
    embed_paddings: tuple = (0, 0, 1, 1)
    relation_paddings: tuple = (1, 1)
    relation_hidden: int = 8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init: str = "he_uniform"
    conv_bias: bool = False
    fused_pair_conv: bool = True
    expected_relation_features: int | None = None
    zsl: ZslConfig = field(default_factory=ZslConfig)

    def __post_init__(self):
        self.embed_paddings = tuple(int(p) for p in self.embed_paddings)
        self.relation_paddings = tuple(int(p) for p in self.relation_paddings)
        if isinstance(self.zsl, dict):
            self.zsl = ZslConfig(**self.zsl)
        if len(self.embed_paddings) != 4 or len(self.relation_paddings) != 2:
            raise ValueError("need 4 embedding paddings and 2 relation paddings")
        fc_in = self.relation_fc_input()
        if self.expected_relation_features is not None and fc_in != self.expected_relation_features:
            raise ShapeError(
                f"relation-FC input is {fc_in}, expected {self.expected_relation_features}"
            )

    @classmethod
    def omniglot(cls, **overrides) -> "ModelConfig":
        kw = dict(input_channels=1, input_size=28, embed_paddings=(0, 0, 1, 1), relation_paddings=(1, 1))
        kw.update(overrides)
        # the relation module ends on a 1x1 map: one feature per channel
        kw.setdefault("expected_relation_features", kw.get("channels", 64))
        return cls(**kw)

    @classmethod
    def miniimagenet(cls, **overrides) -> "ModelConfig":
        kw = dict(input_channels=3, input_size=84, embed_paddings=(0, 0, 1, 1), relation_paddings=(0, 0))
        kw.update(overrides)
        # the relation module ends on a 3x3 map
        kw.setdefault("expected_relation_features", 9 * kw.get("channels", 64))
        return cls(**kw)

    def embed_output_size(self) -> int:
        size = self.input_size
        for block, pad in enumerate(self.embed_paddings):
            size = size + 2 * pad - 2
            if size < 1 or (block < 2 and size < 2):
                raise ShapeError(f"input size {self.input_size} collapses in embedding block {block + 1}")
            if block < 2:
                size //= 2
        return size

    def relation_output_size(self) -> int:
        size = self.embed_output_size()
        for block, pad in enumerate(self.relation_paddings):
            size = size + 2 * pad - 2
            if size < 2:
                raise ShapeError(f"feature map collapses in relation block {block + 1}")
            size //= 2
        return size

    def relation_fc_input(self) -> int:
        return self.channels * self.relation_output_size() ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_paddings"] = list(self.embed_paddings)
        d["relation_paddings"] = list(self.relation_paddings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["zsl"] = ZslConfig(**d.get("zsl", {}))
        return cls(**d)


@dataclass
class ScoreMatrix:
    """Relation scores of ``n`` queries against ``C`` classes.

    ``values`` keeps the autodiff graph when produced in training mode.
    ``hidden`` optionally holds the relation module's penultimate activations,
    one row per (query, class) pair in query-major order.
    """

    values: Tensor
    class_ids: list
    query_labels: list
    hidden: np.ndarray | None = None

    def __post_init__(self):
        self.class_ids = list(self.class_ids)
        self.query_labels = list(self.query_labels)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.class_ids):
            raise ShapeError(f"score matrix shape {self.values.shape} does not match {len(self.class_ids)} classes")
        if self.values.shape[0] != len(self.query_labels):
            raise ShapeError("one label is required per query row")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be distinct")
        s = self.values.data
        # float32 sigmoids saturate to exactly 0 or 1; NaN is left for the training loop to report
        if np.any(s < 0) or np.any(s > 1):
            raise ValueError("relation scores must lie inside [0, 1]")

    @property
    def scores(self) -> np.ndarray:
        return self.values.data

    def targets(self) -> np.ndarray:
        missing = sorted({str(y) for y in self.query_labels if y not in self.class_ids})
        if missing:
            raise ValueError(f"query labels not among episode classes: {', '.join(missing)}")
        ids = np.asarray(self.class_ids, dtype=object)
        labels = np.asarray(self.query_labels, dtype=object)
        return (labels[:, None] == ids[None, :]).astype(self.values.dtype)


def pool_class_features(embeddings: Sequence[Tensor], keys: Sequence | None = None) -> Tensor:
    """Element-wise sum of the K sample embeddings of one class.

    ``keys`` (e.g. sample ids) fix the summation order so the pooled map does
    not depend on the order the samples were drawn in.
    """
    if len(embeddings) == 0:
        raise ValueError("cannot pool an empty list of embeddings")
    return ops.sum_elementwise(embeddings, keys=keys)


def episode_loss(scores: ScoreMatrix, reduction: str = "mean") -> Tensor:
    """MSE between relation scores and the 0/1 match targets."""
    return ops.mse_loss(scores.values, scores.targets(), reduction=reduction)


def classify(scores: ScoreMatrix | np.ndarray, class_ids: Sequence | None = None) -> list:
    """Predicted class per query: argmax over scores, ties to the lowest column."""
    if isinstance(scores, ScoreMatrix):
        class_ids = scores.class_ids
        scores = scores.scores
    idx = np.argmax(np.asarray(scores), axis=1)
    if class_ids is None:
        return idx.tolist()
    return [class_ids[i] for i in idx]


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class RelationNetwork:
    """Few-shot Relation Network with its parameters and BN running buffers."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or ModelConfig.omniglot()
        if self.config.init != "he_uniform":
            raise ValueError(f"unsupported init scheme {self.config.init!r}")
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        self.dtype = dtype
        self.params = ParamSet()
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        c = self.config.channels
        cin = self.config.input_channels
        for i in range(4):
            self._conv_block(rng, f"embed.{i}", cin, c)
            cin = c
        cin = 2 * c
        for i in range(2):
            self._conv_block(rng, f"relation.{i}", cin, c)
            cin = c
        fc_in = self.config.relation_fc_input()
        h = self.config.relation_hidden
        self.params.add("relation.fc1.weight", _he_uniform(rng, (h, fc_in), fc_in), dtype)
        self.params.add("relation.fc1.bias", np.zeros(h), dtype)
        self.params.add("relation.fc2.weight", _he_uniform(rng, (1, h), h), dtype)
        self.params.add("relation.fc2.bias", np.zeros(1), dtype)

    def _conv_block(self, rng, prefix: str, cin: int, cout: int) -> None:
        fan_in = cin * 9
        self.params.add(f"{prefix}.conv.weight", _he_uniform(rng, (cout, cin, 3, 3), fan_in), self.dtype)
        if self.config.conv_bias:
            self.params.add(f"{prefix}.conv.bias", np.zeros(cout), self.dtype)
        self.params.add(f"{prefix}.bn.gamma", np.ones(cout), self.dtype)
        self.params.add(f"{prefix}.bn.beta", np.zeros(cout), self.dtype)
        self.buffers[f"{prefix}.bn.running_mean"] = np.zeros(cout, dtype=self.dtype)
        self.buffers[f"{prefix}.bn.running_var"] = np.ones(cout, dtype=self.dtype)

    def _block(self, x: Tensor, prefix: str, padding: int, pool: bool, mode: str, conv: bool = True) -> Tensor:
        p = self.params
        if conv:
            x = ops.conv2d(x, p[f"{prefix}.conv.weight"], p.get(f"{prefix}.conv.bias"), padding=padding)
        x = ops.batchnorm2d(
            x, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
            self.buffers[f"{prefix}.bn.running_mean"], self.buffers[f"{prefix}.bn.running_var"],
            mode=mode, momentum=self.config.bn_momentum, eps=self.config.bn_eps,
        )
        x = ops.relu(x)
        return ops.maxpool2d(x) if pool else x

    def embed_image(self, x, mode: str = "eval") -> Tensor:
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"expected input [N,{cfg.input_channels},{cfg.input_size},{cfg.input_size}], got {x.shape}"
            )
        for i, pad in enumerate(cfg.embed_paddings):
            x = self._block(x, f"embed.{i}", pad, pool=i < 2, mode=mode)
        return x

    def relation_scores(
        self,
        class_maps,
        query_maps: Tensor,
        mode: str = "eval",
        class_ids: Sequence | None = None,
        query_labels: Sequence | None = None,
        return_hidden: bool = False,
    ) -> ScoreMatrix:
        """Score every (query, class) pair; class maps enter the concatenation first."""
        if isinstance(class_maps, (list, tuple)):
            class_maps = ops.concat([m.reshape(1, *m.shape) for m in class_maps], axis=0)
        n_classes = class_maps.shape[0]
        n_queries = query_maps.shape[0]
        if n_classes < 2:
            raise ValueError("relation_scores needs at least two classes")
        if class_maps.shape[1:] != query_maps.shape[1:]:
            raise ShapeError(f"class maps {class_maps.shape} and query maps {query_maps.shape} differ")
        s = self.config.embed_output_size()
        if class_maps.shape[1:] != (self.config.channels, s, s):
            raise ShapeError(f"feature maps {class_maps.shape[1:]} do not match config ({self.config.channels},{s},{s})")
        pads = self.config.relation_paddings
        if self.config.fused_pair_conv:
            pairs = ops.paired_conv2d(class_maps, query_maps, self.params["relation.0.conv.weight"],
                                      self.params.get("relation.0.conv.bias"), padding=pads[0])
            pairs = self._block(pairs, "relation.0", pads[0], pool=True, mode=mode, conv=False)
        else:
            cls_idx = np.tile(np.arange(n_classes), n_queries)
            qry_idx = np.repeat(np.arange(n_queries), n_classes)
            pairs = ops.concat_depth(class_maps.take(cls_idx), query_maps.take(qry_idx))
            pairs = self._block(pairs, "relation.0", pads[0], pool=True, mode=mode)
        pairs = self._block(pairs, "relation.1", pads[1], pool=True, mode=mode)
        flat = pairs.flatten()
        p = self.params
        hidden = ops.relu(ops.linear(flat, p["relation.fc1.weight"], p["relation.fc1.bias"]))
        out = ops.sigmoid(ops.linear(hidden, p["relation.fc2.weight"], p["relation.fc2.bias"]))
        values = out.reshape(n_queries, n_classes)
        return ScoreMatrix(
            values,
            list(class_ids) if class_ids is not None else list(range(n_classes)),
            list(query_labels) if query_labels is not None else [None] * n_queries,
            hidden=hidden.data.copy() if return_hidden else None,
        )

    def score_episode(self, episode, mode: str = "eval", return_hidden: bool = False) -> ScoreMatrix:
        """Embed an episode, pool each class's samples and score all queries.

        Samples are embedded in canonical (sorted reference) order, so any
        permutation of the sample set yields bitwise identical scores.
        """
        order = sorted(range(len(episode.support_refs)), key=lambda i: episode.support_refs[i])
        m = len(order)
        x = np.concatenate([episode.support_images[order], episode.query_images])
        feats = self.embed_image(Tensor(x, dtype=self.dtype), mode)
        rows_by_class: dict = {cid: [] for cid in episode.class_ids}
        for row, i in enumerate(order):
            rows_by_class[episode.support_labels[i]].append(row)
        class_maps = []
        for cid in episode.class_ids:
            rows = rows_by_class[cid]
            if not rows:
                raise ValueError(f"class {cid!r} has no samples in the episode")
            class_maps.append(pool_class_features([feats[r] for r in rows]))
        queries = feats[m:]
        return self.relation_scores(
            class_maps, queries, mode, episode.class_ids, episode.query_labels, return_hidden=return_hidden
        )

    def num_parameters(self) -> int:
        return self.params.num_parameters()


class ZslRelationNetwork:
    """Zero-shot variant: attribute MLP embedding plus an MLP relation module."""

    def __init__(self, config: ZslConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or ZslConfig()
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        self.dtype = dtype
        self.params = ParamSet()
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        cfg = self.config
        layers = [
            ("semantic.fc1", cfg.attribute_dim, cfg.fc1_hidden),
            ("semantic.fc2", cfg.fc1_hidden, cfg.feature_dim),
            ("relation.fc3", 2 * cfg.feature_dim, cfg.fc3_hidden),
            ("relation.fc4", cfg.fc3_hidden, 1),
        ]
        for name, din, dout in layers:
            self.params.add(f"{name}.weight", _he_uniform(rng, (dout, din), din), dtype)
            self.params.add(f"{name}.bias", np.zeros(dout), dtype)

    @property
    def decay_names(self) -> frozenset:
        """Parameters regularised by weight decay (the semantic embedding only)."""
        return frozenset(n for n in self.params if n.startswith("semantic."))

    def embed_semantic(self, v) -> Tensor:
        v = as_tensor(v)
        if v.ndim != 2 or v.shape[1] != self.config.attribute_dim:
            raise ShapeError(f"expected attributes [B,{self.config.attribute_dim}], got {v.shape}")
        p = self.params
        h = ops.relu(ops.linear(v, p["semantic.fc1.weight"], p["semantic.fc1.bias"]))
        return ops.relu(ops.linear(h, p["semantic.fc2.weight"], p["semantic.fc2.bias"]))

    def zsl_relation_scores(
        self,
        class_embeds: Tensor,
        query_features,
        class_ids: Sequence | None = None,
        query_labels: Sequence | None = None,
    ) -> ScoreMatrix:
        query_features = as_tensor(query_features)
        d = self.config.feature_dim
        if class_embeds.ndim != 2 or class_embeds.shape[1] != d:
            raise ShapeError(f"class embeddings must be [C,{d}], got {class_embeds.shape}")
        if query_features.ndim != 2 or query_features.shape[1] != d:
            raise ShapeError(f"query features must be [n,{d}], got {query_features.shape}")
        n_classes, n_queries = class_embeds.shape[0], query_features.shape[0]
        cls_idx = np.tile(np.arange(n_classes), n_queries)
        qry_idx = np.repeat(np.arange(n_queries), n_classes)
        pairs = ops.concat((class_embeds.take(cls_idx), query_features.take(qry_idx)), axis=1)
        p = self.params
        h = ops.linear(pairs, p["relation.fc3.weight"], p["relation.fc3.bias"])
        if self.config.fc3_relu:
            h = ops.relu(h)
        out = ops.sigmoid(ops.linear(h, p["relation.fc4.weight"], p["relation.fc4.bias"]))
        return ScoreMatrix(
            out.reshape(n_queries, n_classes),
            list(class_ids) if class_ids is not None else list(range(n_classes)),
            list(query_labels) if query_labels is not None else [None] * n_queries,
        )

    def scores(self, attributes, features, class_ids=None, query_labels=None) -> ScoreMatrix:
        """Embed class attributes and score query feature rows against them."""
        embeds = self.embed_semantic(Tensor(attributes, dtype=self.dtype))
        return self.zsl_relation_scores(embeds, Tensor(features, dtype=self.dtype), class_ids, query_labels)

    def num_parameters(self) -> int:
        return self.params.num_parameters()
