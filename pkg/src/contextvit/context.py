"""Context tokens inferred per group, plus the conditioned forward pass.

A context token occupies slot 1 of the sequence (slot 0 is CLS, patch
tokens start at slot 2).  It can come from a trainable per-group table
(``oracle``), from mean-pooled patch embeddings of the group's batch
members with an optional linear head and optional stop-gradient
(``mean``, ``mean_linear``, ``mean_linear_detach``, also per-layer), from
a deep-sets network over member patches, from an exponential moving
average of batch means, or the sequence can instead be extended with
raw patches sampled from the group (``in_context_patches``).

The pooled kinds work for any group, including ones never seen in
training and groups with a single member; the oracle table raises for
unknown groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .rng import child_seed, generator, randn
from .tensor import Tensor
from .vit import (
    ViTConfig,
    embed_patches,
    encode_tokens,
    init_backbone_params,
    patchify_batch,
    vit_forward,
)

__all__ = [
    "CONTEXT_KIND_NAMES",
    "ContextKind",
    "UnknownGroupError",
    "GroupedBatch",
    "group_partition",
    "init_context_params",
    "infer_context_mean",
    "apply_linear_head",
    "oracle_lookup",
    "ema_update",
    "deep_sets_infer",
    "sample_context_patches",
    "contextvit_forward",
    "ContextViT",
]

CONTEXT_KIND_NAMES = (
    "none",
    "mean",
    "mean_linear",
    "mean_linear_detach",
    "layerwise_mean_linear_detach",
    "deep_sets",
    "deep_sets_detach",
    "oracle",
    "ema",
    "in_context_patches",
)

_AMORTIZED_BASES = ("mean", "mean_linear", "deep_sets", "ema", "in_context_patches")


class UnknownGroupError(KeyError):
    """Raised when a kind that memorizes groups meets an unregistered one."""


@dataclass(frozen=True)
class ContextKind:
    """Tagged choice of context mechanism.

    base: none | mean | mean_linear | deep_sets | oracle | ema | in_context_patches
    detach: pass pooled inputs through stop_gradient (mean_linear, deep_sets)
    layerwise: re-infer the context token after every layer (mean family only)
    patches: K for in_context_patches
    ema_lambda: decay for the ema kind
    """

    base: str
    detach: bool = False
    layerwise: bool = False
    patches: int = 256
    ema_lambda: float = 0.99

    def __post_init__(self):
        if self.base not in ("none", "mean", "mean_linear", "deep_sets", "oracle", "ema", "in_context_patches"):
            raise ValueError(f"unknown context base {self.base!r}")
        if self.detach and self.base not in ("mean_linear", "deep_sets"):
            raise ValueError(f"detach flag does not apply to base {self.base!r}")
        if self.layerwise and self.base not in ("mean", "mean_linear"):
            # per-layer heads exist for the mean family only; the deep-sets
            # networks are a single shared pair
            raise ValueError(f"layerwise conditioning requires a mean-family base, got {self.base!r}")
        if self.base == "in_context_patches" and self.patches < 1:
            raise ValueError("in_context_patches requires K >= 1")
        if self.base == "ema" and not (0.0 < self.ema_lambda < 1.0):
            raise ValueError(f"ema lambda must lie in (0,1), got {self.ema_lambda}")

    @property
    def amortized(self) -> bool:
        """True when the token is computed from batch content, so unseen
        groups are fine."""
        return self.base in _AMORTIZED_BASES

    @property
    def has_token_slot(self) -> bool:
        return self.base not in ("none", "in_context_patches")

    @classmethod
    def from_name(cls, name: str, patches: int = 256, ema_lambda: float = 0.99) -> "ContextKind":
        table = {
            "none": cls("none"),
            "mean": cls("mean"),
            "mean_linear": cls("mean_linear"),
            "mean_linear_detach": cls("mean_linear", detach=True),
            "layerwise_mean_linear_detach": cls("mean_linear", detach=True, layerwise=True),
            "deep_sets": cls("deep_sets"),
            "deep_sets_detach": cls("deep_sets", detach=True),
            "oracle": cls("oracle"),
            "ema": cls("ema", ema_lambda=ema_lambda),
            "in_context_patches": cls("in_context_patches", patches=patches),
        }
        if name not in table:
            raise ValueError(f"unknown context kind {name!r}; expected one of {CONTEXT_KIND_NAMES}")
        return table[name]

    @property
    def name(self) -> str:
        if self.base == "mean_linear":
            if self.layerwise and self.detach:
                return "layerwise_mean_linear_detach"
            if self.detach:
                return "mean_linear_detach"
            if not self.layerwise:
                return "mean_linear"
        elif self.base == "deep_sets":
            return "deep_sets_detach" if self.detach else "deep_sets"
        elif self.base == "mean" and not self.layerwise:
            return "mean"
        elif self.base in ("none", "oracle", "ema", "in_context_patches"):
            return self.base
        raise ValueError(f"no canonical name for {self!r}")


@dataclass
class GroupedBatch:
    """One batch with group ids; the partition maps each group to the
    member indices in input order, groups keyed by first occurrence."""

    images: np.ndarray  # [B, H, W, C]
    labels: np.ndarray  # [B] int
    groups: np.ndarray  # [B] int group ids
    partition: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [B,H,W,C], got {self.images.shape}")
        b = self.images.shape[0]
        if self.labels.shape != (b,) or self.groups.shape != (b,):
            raise ValueError("labels/groups must have one entry per image")
        if not self.partition:
            self.partition = group_partition(self.groups)

    @property
    def size(self) -> int:
        return int(self.images.shape[0])


def group_partition(groups: Sequence[int]) -> dict[int, list[int]]:
    """Group ids -> member index lists, keyed in first-occurrence order."""
    out: dict[int, list[int]] = {}
    for i, g in enumerate(groups):
        out.setdefault(int(g), []).append(i)
    return out


def init_context_params(
    config: ViTConfig,
    kind: ContextKind,
    seed: int,
    group_ids: Optional[Sequence[int]] = None,
) -> dict[str, Tensor]:
    """Trainable context parameters for the chosen kind.

    Linear heads exist for every layer whenever the kind has heads at all,
    so the same parameter set serves layerwise and single-shot variants
    (the unused heads simply keep zero gradients).
    """
    d = config.dim
    params: dict[str, Tensor] = {}
    if kind.base == "oracle":
        if not group_ids:
            raise ValueError("oracle kind needs the training group ids at init time")
        ids = np.asarray(sorted(int(g) for g in set(group_ids)), dtype=np.float64)
        params["oracle_groups"] = Tensor(ids, requires_grad=False)
        params["oracle_table"] = Tensor(np.zeros((ids.size, d)), requires_grad=True)
    elif kind.base == "mean_linear":
        for l in range(config.depth):
            params[f"ctx_head{l}.w"] = Tensor(np.zeros((d, d)), requires_grad=True)
            params[f"ctx_head{l}.b"] = Tensor(np.zeros(d), requires_grad=True)
    elif kind.base == "ema":
        params["ctx_head0.w"] = Tensor(np.zeros((d, d)), requires_grad=True)
        params["ctx_head0.b"] = Tensor(np.zeros(d), requires_grad=True)
    elif kind.base == "deep_sets":
        for net in ("phi", "rho"):
            for layer in ("w1", "w2", "w3"):
                scale = d ** -0.5
                if net == "rho" and layer == "w3":
                    # zero output layer: context starts as the zero vector
                    params[f"ctx_{net}.{layer}"] = Tensor(np.zeros((d, d)), requires_grad=True)
                else:
                    params[f"ctx_{net}.{layer}"] = Tensor(
                        randn((d, d), child_seed(seed, "ctx", net, layer), scale=scale),
                        requires_grad=True,
                    )
            for bias in ("b1", "b2", "b3"):
                params[f"ctx_{net}.{bias}"] = Tensor(np.zeros(d), requires_grad=True)
    # mean / none / in_context_patches carry no parameters
    return params


def infer_context_mean(patch_embeds: Tensor) -> Tensor:
    """Mean over member images and patches: [m, N, d] -> [d] (also [N, d] -> [d])."""
    if patch_embeds.size == 0:
        raise ValueError("context mean over an empty member set")
    if patch_embeds.ndim == 2:
        return T.mean_axis(patch_embeds, axis=0)
    if patch_embeds.ndim == 3:
        return T.mean_axis(patch_embeds, axis=(0, 1))
    raise ValueError(f"expected [m,N,d] or [N,d] patch embeddings, got {patch_embeds.shape}")


def apply_linear_head(t_mean: Tensor, w: Tensor, b: Tensor, detach: bool) -> Tensor:
    """Affine head b + pooled @ w, optionally detaching the pooled input."""
    src = T.stop_gradient(t_mean) if detach else t_mean
    row = T.reshape(src, (1, src.shape[-1]))
    return T.reshape(T.matmul(row, w) + b, (w.shape[1],))


def oracle_lookup(group: int, params: dict[str, Tensor]) -> Tensor:
    """Trainable token for a registered group; unknown groups are an error."""
    ids = params["oracle_groups"].data
    hits = np.nonzero(ids == float(int(group)))[0]
    if hits.size == 0:
        raise UnknownGroupError(
            f"unknown context: group {group} was never registered with the oracle table"
        )
    return T.index_rows(params["oracle_table"], [int(hits[0])])[0]


def ema_update(state: dict[int, np.ndarray], group: int, batch_mean: np.ndarray, lam: float) -> np.ndarray:
    """state <- lam*state + (1-lam)*batch_mean; first sighting adopts the mean."""
    if not (0.0 < lam < 1.0):
        raise ValueError(f"ema lambda must lie in (0,1), got {lam}")
    g = int(group)
    mean = np.asarray(batch_mean, dtype=np.float64)
    if g in state:
        state[g] = lam * state[g] + (1.0 - lam) * mean
    else:
        state[g] = mean.copy()
    return state[g]


def _mlp_residual(x: Tensor, params: dict[str, Tensor], net: str, final_residual: bool) -> Tensor:
    """Two relu hidden layers with residual adds; final affine, residual optional."""
    p = lambda k: params[f"ctx_{net}.{k}"]
    h = T.relu(T.matmul(x, p("w1")) + p("b1")) + x
    h = T.relu(T.matmul(h, p("w2")) + p("b2")) + h
    out = T.matmul(h, p("w3")) + p("b3")
    return out + h if final_residual else out


def deep_sets_infer(patch_embeds: Tensor, params: dict[str, Tensor], detach: bool) -> Tensor:
    """rho(sum_i phi(t_i)) over every patch of every member: [m, N, d] -> [d]."""
    if patch_embeds.size == 0:
        raise ValueError("deep sets over an empty member set")
    if patch_embeds.ndim == 3:
        m, n, d = patch_embeds.shape
        flat = T.reshape(patch_embeds, (m * n, d))
    elif patch_embeds.ndim == 2:
        flat = patch_embeds
    else:
        raise ValueError(f"expected [m,N,d] or [(mN),d], got {patch_embeds.shape}")
    if detach:
        flat = T.stop_gradient(flat)
    summed = T.sum_axis(_mlp_residual(flat, params, "phi", final_residual=True), axis=0)
    pooled = T.reshape(summed, (1, summed.shape[0]))
    return T.reshape(_mlp_residual(pooled, params, "rho", final_residual=False), (summed.shape[0],))


def sample_context_patches(pool: Tensor, k: int, seed: int) -> Tensor:
    """K tokens drawn uniformly with replacement from [(P), d] pooled rows."""
    if k < 1:
        raise ValueError(f"need K >= 1 context patches, got {k}")
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ValueError("patch pool must be a non-empty [P, d] matrix")
    idx = generator(seed).integers(0, pool.shape[0], size=k)
    return T.index_rows(pool, idx)


class _ContextIO:
    """Plumbing for gradient verification of the non-differentiable paths.

    ``capture`` records the value entering each frozen boundary (detached
    pooled vector, detached patch rows, or ema state), keyed by
    (head_layer, group).  ``override`` replays recorded values as constants
    so finite differences only see the declared-differentiable subgraph.
    """

    def __init__(self, capture: Optional[dict] = None, override: Optional[dict] = None):
        self.capture = capture
        self.override = override

    def boundary(self, key, computed: Tensor, frozen: bool) -> Tensor:
        if self.override is not None and key in self.override:
            out = T.constant(self.override[key])
        elif frozen:
            out = T.stop_gradient(computed)
        else:
            out = computed
        if self.capture is not None:
            self.capture[key] = np.array(out.data, copy=True)
        return out


def _infer_token(
    gid: int,
    member_tokens: Tensor,
    head_layer: int,
    kind: ContextKind,
    ctx_params: dict[str, Tensor],
    ema_state: Optional[dict[int, np.ndarray]],
    train: bool,
    io: _ContextIO,
) -> Tensor:
    """Context token [d] for one group from its members' patch tokens [m, N, d]."""
    if kind.base == "oracle":
        return oracle_lookup(gid, ctx_params)
    if kind.base == "mean":
        return infer_context_mean(member_tokens)
    if kind.base == "mean_linear":
        pooled = infer_context_mean(member_tokens)
        src = io.boundary((head_layer, gid), pooled, frozen=kind.detach)
        w = ctx_params[f"ctx_head{head_layer}.w"]
        b = ctx_params[f"ctx_head{head_layer}.b"]
        return apply_linear_head(src, w, b, detach=False)
    if kind.base == "ema":
        if ema_state is None:
            raise ValueError("ema kind requires an ema_state dict")
        batch_mean = member_tokens.data.mean(axis=(0, 1))
        if train or gid not in ema_state:
            ema_update(ema_state, gid, batch_mean, kind.ema_lambda)
        src = io.boundary((head_layer, gid), T.constant(ema_state[gid]), frozen=False)
        return apply_linear_head(src, ctx_params["ctx_head0.w"], ctx_params["ctx_head0.b"], detach=False)
    if kind.base == "deep_sets":
        m, n, d = member_tokens.shape
        flat = T.reshape(member_tokens, (m * n, d))
        src = io.boundary((head_layer, gid), flat, frozen=kind.detach)
        return deep_sets_infer(src, ctx_params, detach=False)
    raise ValueError(f"kind {kind.base!r} does not produce a context token")


def _context_column(
    patch_tokens: Tensor,
    batch: GroupedBatch,
    head_layer: int,
    kind: ContextKind,
    ctx_params: dict[str, Tensor],
    ema_state: Optional[dict[int, np.ndarray]],
    train: bool,
    io: _ContextIO,
    token_sink: Optional[dict] = None,
) -> Tensor:
    """[B, 1, d] context slot contents, one shared token per group."""
    tokens = []
    slot_of_group: dict[int, int] = {}
    for gid, members in batch.partition.items():
        member_tokens = T.index_rows(patch_tokens, members)
        t_c = _infer_token(gid, member_tokens, head_layer, kind, ctx_params, ema_state, train, io)
        if token_sink is not None:
            token_sink[(head_layer, gid)] = np.array(t_c.data, copy=True)
        slot_of_group[gid] = len(tokens)
        tokens.append(T.reshape(t_c, (1, t_c.shape[0])))
    stacked = T.concat(tokens, axis=0) if len(tokens) > 1 else tokens[0]
    inverse = [slot_of_group[int(g)] for g in batch.groups]
    per_image = T.index_rows(stacked, inverse)
    return T.reshape(per_image, (batch.size, 1, patch_tokens.shape[-1]))


def contextvit_forward(
    batch: GroupedBatch,
    backbone: dict[str, Tensor],
    ctx_params: dict[str, Tensor],
    config: ViTConfig,
    kind: ContextKind,
    ema_state: Optional[dict[int, np.ndarray]] = None,
    train: bool = False,
    sample_seed: int = 0,
    capture_context_inputs: Optional[dict] = None,
    context_input_override: Optional[dict] = None,
    capture_context_tokens: Optional[dict] = None,
):
    """Group-conditioned forward pass: batch -> (CLS embeddings, logits).

    Sequence layout per image: [CLS, context, patch+pos ...] (length N+2)
    for token-producing kinds; [CLS, patch+pos ..., K sampled patches]
    (length N+1+K) for in_context_patches; and plain [CLS, patch+pos ...]
    for kind none, which routes through the unconditioned forward and is
    bit-identical to it.
    """
    if kind.base == "none":
        return vit_forward(batch.images, backbone, config)

    io = _ContextIO(capture=capture_context_inputs, override=context_input_override)
    patches = T.constant(patchify_batch(batch.images, config.patch))
    patch_tokens = embed_patches(patches, backbone)  # pre-positional, pooled from
    b, n, d = patch_tokens.shape
    pos = backbone["pos_embed"]
    cls = T.broadcast_to(T.reshape(backbone["cls_token"], (1, 1, d)), (b, 1, d))

    if kind.base == "in_context_patches":
        blocks = []
        slot_of_group: dict[int, int] = {}
        for gid, members in batch.partition.items():
            member_tokens = T.index_rows(patch_tokens, members)
            m = len(members)
            pool = T.reshape(member_tokens, (m * n, d))
            drawn = sample_context_patches(pool, kind.patches, child_seed(sample_seed, "in_context", gid))
            slot_of_group[gid] = len(blocks)
            blocks.append(T.reshape(drawn, (1, kind.patches, d)))
        stacked = T.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
        inverse = [slot_of_group[int(g)] for g in batch.groups]
        ctx_blocks = T.index_rows(stacked, inverse)  # [B, K, d]
        tokens = T.concat([cls, patch_tokens + pos, ctx_blocks], axis=1)
        encoded = encode_tokens(tokens, backbone, config)
    else:
        ctx_col = _context_column(
            patch_tokens, batch, 0, kind, ctx_params, ema_state, train, io, capture_context_tokens
        )
        tokens = T.concat([cls, ctx_col, patch_tokens + pos], axis=1)

        layer_hook = None
        if kind.layerwise:

            def layer_hook(l: int, x: Tensor) -> Tensor:
                if l >= config.depth - 1:
                    # no head exists past the last layer; the final slot-1
                    # output is never read by the CLS head anyway
                    return x
                hidden_patches = x[:, 2:]
                col = _context_column(
                    hidden_patches, batch, l + 1, kind, ctx_params, ema_state, train, io,
                    capture_context_tokens,
                )
                return T.concat([x[:, 0:1], col, x[:, 2:]], axis=1)

        encoded = encode_tokens(tokens, backbone, config, layer_hook=layer_hook)

    cls_out = encoded[:, 0]
    logits = T.matmul(cls_out, backbone["head.w"]) + backbone["head.b"]
    return cls_out, logits


@dataclass
class ContextViT:
    """Bundle of config, kind, parameters, and ema state with a forward method."""

    config: ViTConfig
    kind: ContextKind
    backbone: dict[str, Tensor]
    context: dict[str, Tensor]
    ema_state: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        config: ViTConfig,
        kind: ContextKind,
        seed: int,
        group_ids: Optional[Sequence[int]] = None,
    ) -> "ContextViT":
        return cls(
            config=config,
            kind=kind,
            backbone=init_backbone_params(config, child_seed(seed, "backbone")),
            context=init_context_params(config, kind, child_seed(seed, "context"), group_ids),
        )

    def parameters(self) -> dict[str, Tensor]:
        merged = dict(self.backbone)
        for name, p in self.context.items():
            merged["context." + name] = p
        return merged

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def forward(
        self,
        batch: GroupedBatch,
        train: bool = False,
        sample_seed: int = 0,
        capture_context_inputs: Optional[dict] = None,
        context_input_override: Optional[dict] = None,
        capture_context_tokens: Optional[dict] = None,
    ):
        state = self.ema_state if train else dict(self.ema_state)
        return contextvit_forward(
            batch,
            self.backbone,
            self.context,
            self.config,
            self.kind,
            ema_state=state if self.kind.base == "ema" else None,
            train=train,
            sample_seed=sample_seed,
            capture_context_inputs=capture_context_inputs,
            context_input_override=context_input_override,
            capture_context_tokens=capture_context_tokens,
        )

    def with_kind(self, kind: ContextKind) -> "ContextViT":
        return replace(self, kind=kind)
