"""Full model: embeddings -> tokenizers -> sandglass precoder -> backbone -> decoder -> output MLP."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import (
    FinetunePolicy,
    GPT2Backbone,
    SequenceBackbone,
    TransformerEncoder,
    apply_finetune_policy,
    load_pretrained,
    partition,
)
from .config import ModelConfig
from .errors import GraphMismatchError, ShapeError
from .losses import alpha_from_graph
from .sga import SandglassAttention
from .spectral import NodeEmbedding, SensorGraph, TimeEmbedding, graph_basis
from .tokenizers import SpatialTokenizer, TemporalTokenizer, fill_missing, mlp

TOKEN_ROLES = ("temporal-state", "temporal-trend")


@dataclass
class ModelOutput:
    y: torch.Tensor  # (B, N, T_out*C), time-major inside the last axis
    attention: torch.Tensor  # precoder weights S, (B, M, N)
    spatial_tokens: torch.Tensor  # Z_S, (B, N, d)
    temporal_tokens: torch.Tensor  # Z_T, (B, 2, d)
    region_tokens: torch.Tensor  # Z_H, (B, M, d)
    hidden: torch.Tensor  # backbone output over [state, trend, regions], (B, 2+M, d)
    node_hidden: torch.Tensor  # decoder output Z_N', (B, N, d)

    @property
    def token_roles(self) -> list[str]:
        return list(TOKEN_ROLES) + ["region"] * self.region_tokens.shape[-2]


def build_backbone(config: ModelConfig, pretrained_weights: bool = True, vocab_size: int = 50257) -> SequenceBackbone:
    n_positions = 2 + config.n_regions
    if config.backbone == "scratch":
        return TransformerEncoder(config.d_plm, config.layers, config.backbone_heads, n_positions)
    if pretrained_weights:
        backbone = load_pretrained(config.pretrained, config.layers, config.d_plm, max_positions=n_positions)
    else:
        # shell for loading a saved run; weights come from the run's checkpoint
        backbone = GPT2Backbone(config.d_plm, config.layers, config.backbone_heads, n_positions, vocab_size)
    policy = FinetunePolicy(config.lora_rank, config.lora_alpha, config.lora_dropout)
    apply_finetune_policy(backbone, policy)
    return backbone


class StdPlmModel(nn.Module):
    def __init__(
        self,
        config: ModelConfig,
        graph: SensorGraph,
        backbone: SequenceBackbone | None = None,
        pretrained_weights: bool = True,
    ):
        super().__init__()
        self.config = config
        self.time_embedding = TimeEmbedding(config.d_t, config.interval_seconds)
        self.node_embedding = NodeEmbedding(config.k, config.d_n)
        self.spatial = SpatialTokenizer(config.t_in, config.channels, config.d_t, config.d_n, config.d_plm)
        self.temporal = TemporalTokenizer(config.t_in, config.channels, config.d_t, config.d_plm)
        self.sga = SandglassAttention(config.n_regions, config.d_plm, config.d_hidden, config.sga_heads)
        self.backbone = backbone if backbone is not None else build_backbone(config, pretrained_weights)
        if self.backbone.d_model != config.d_plm:
            raise ShapeError(f"backbone width {self.backbone.d_model} != d_PLM={config.d_plm}")
        self.output = mlp(config.d_plm, config.d_plm, config.t_out * config.channels)
        self.set_graph(graph)

    def set_graph(self, graph: SensorGraph) -> None:
        """Recompute the spectral basis and constraint-loss inputs for ``graph``.

        Learned weights are untouched; this is the whole zero-shot transfer step.
        """
        self.sga.check_graph_size(graph.n_nodes)
        dtype = self.output[0].weight.dtype
        device = self.output[0].weight.device
        basis = graph_basis(graph, self.config.k).vectors
        sym = graph.symmetrized()
        self.graph = graph
        self.register_buffer("graph_adjacency", torch.as_tensor(graph.adjacency, dtype=dtype, device=device))
        self.register_buffer("spectral_basis", torch.as_tensor(basis, dtype=dtype, device=device))
        self.register_buffer("constraint_adjacency", torch.as_tensor(sym, dtype=dtype, device=device))
        self.register_buffer("dirichlet_alpha", alpha_from_graph(torch.as_tensor(sym)).to(dtype=dtype, device=device))

    @property
    def n_nodes(self) -> int:
        return self.spectral_basis.shape[0]

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None, tod: torch.Tensor, dow: torch.Tensor) -> ModelOutput:
        """x, mask: (B, T, N, C) in normalized units; tod, dow: (B, T) integer indices.

        ``mask=None`` means fully observed (forecasting); the mask tokenizer still runs.
        """
        if x.dim() != 4:
            raise ShapeError(f"expected (B, T, N, C) input, got shape {tuple(x.shape)}")
        if x.shape[2] != self.n_nodes:
            raise GraphMismatchError(
                f"input has {x.shape[2]} nodes but the spectral basis was built for {self.n_nodes}; "
                "call set_graph() with the new graph"
            )
        mask = torch.ones_like(x) if mask is None else mask.to(x.dtype)
        x = fill_missing(x, mask)
        n = x.shape[2]
        time_emb = self.time_embedding(tod, dow, n).to(x.dtype)
        node_emb = self.node_embedding(self.spectral_basis)

        z_s = self.spatial(x, mask, time_emb, node_emb)
        z_t = self.temporal(x, time_emb)
        z_h, s = self.sga.precode(z_s)
        hidden = self.backbone(torch.cat([z_t, z_h], dim=-2))
        z_t_out, z_h_out = hidden[..., :2, :], hidden[..., 2:, :]
        z_n_out = self.sga.decode(z_s, z_h_out)
        y = self.output(z_n_out + z_t_out[..., 1:2, :] + z_s)
        return ModelOutput(y, s, z_s, z_t, z_h, hidden, z_n_out)

    def unflatten(self, y: torch.Tensor) -> torch.Tensor:
        """(B, N, T_out*C) -> (B, T_out, N, C)."""
        b, n, _ = y.shape
        return y.reshape(b, n, self.config.t_out, self.config.channels).permute(0, 2, 1, 3)

    def parameter_report(self) -> dict:
        total = sum(p.numel() for p in self.parameters())
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return {
            "parameters": total,
            "trainable_parameters": trainable,
            "trainable_ratio_percent": 100.0 * trainable / total,
            "backbone": dict(partition(self.backbone).counts),
        }


def model_from_state(config: ModelConfig, state: dict[str, torch.Tensor]) -> StdPlmModel:
    """Rebuild a model (structure + graph) from a saved state dict."""
    adjacency = state["graph_adjacency"].double().cpu().numpy()
    vocab = state["backbone.wte.weight"].shape[0] if "backbone.wte.weight" in state else 50257
    backbone = build_backbone(config, pretrained_weights=False, vocab_size=vocab)
    model = StdPlmModel(config, SensorGraph.from_adjacency(adjacency), backbone=backbone)
    model.load_state_dict(state)
    return model

