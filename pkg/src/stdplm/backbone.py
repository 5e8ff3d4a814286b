"""Sequence backbones: a GPT-2-class stack with LoRA fine-tuning, or a from-scratch encoder.

Both take a (B, L, d_PLM) token sequence and return a sequence of the same
shape.  Only the pre-trained path uses a causal mask.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointMappingError, ConfigError, ShapeError

CACHE_ENV = "STDPLM_PRETRAINED_CACHE"
DEFAULT_CACHE = Path.home() / ".cache" / "stdplm" / "pretrained"

FROZEN, LORA, TRAINABLE = "frozen", "lora", "fully-trainable"


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, causal: bool):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"{n_heads} heads do not divide width {d_model}")
        self.n_heads = n_heads
        self.causal = causal
        self.c_attn = nn.Linear(d_model, 3 * d_model)
        self.c_proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        q, k, v = self.c_attn(x).split(d, dim=-1)
        shape = (b, length, self.n_heads, d // self.n_heads)
        q, k, v = (t.view(shape).transpose(1, 2) for t in (q, k, v))
        out = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        return self.c_proj(out.transpose(1, 2).reshape(b, length, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.c_fc = nn.Linear(d_model, 4 * d_model)
        self.c_proj = nn.Linear(4 * d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.c_proj(F.gelu(self.c_fc(x), approximate="tanh"))


class Block(nn.Module):
    """Pre-norm transformer block with GPT-2 naming."""

    def __init__(self, d_model: int, n_heads: int, causal: bool, eps: float = 1e-5):
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model, eps=eps)
        self.attn = SelfAttention(d_model, n_heads, causal)
        self.ln_2 = nn.LayerNorm(d_model, eps=eps)
        self.mlp = FeedForward(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class SequenceBackbone(nn.Module):
    """Learned position embeddings, ``depth`` blocks, final layer norm."""

    causal = False

    def __init__(self, d_model: int, depth: int, n_heads: int, max_positions: int, eps: float = 1e-5):
        super().__init__()
        self.d_model = d_model
        self.depth = depth
        self.max_positions = max_positions
        self.wpe = nn.Embedding(max_positions, d_model)
        self.blocks = nn.ModuleList(Block(d_model, n_heads, self.causal, eps) for _ in range(depth))
        self.ln_f = nn.LayerNorm(d_model, eps=eps)
        self._init_weights()

    def _init_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)
        # GPT-2 scales residual output projections by depth
        for name, p in self.named_parameters():
            if name.endswith("c_proj.weight") and self.depth:
                nn.init.normal_(p, std=0.02 / math.sqrt(2 * self.depth))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.d_model:
            raise ShapeError(f"token width {tokens.shape[-1]} != backbone width {self.d_model}")
        length = tokens.shape[-2]
        if length > self.max_positions:
            raise ShapeError(f"sequence length {length} exceeds {self.max_positions} positions")
        pos = torch.arange(length, device=tokens.device)
        x = tokens + self.wpe(pos)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def parameter_labels(self) -> dict[str, str]:
        return {name: (TRAINABLE if p.requires_grad else FROZEN) for name, p in self.named_parameters()}


class TransformerEncoder(SequenceBackbone):
    """Bidirectional encoder trained from scratch (the "no PLM" ablation)."""

    causal = False


class GPT2Backbone(SequenceBackbone):
    """First ``depth`` blocks of a GPT-2-class decoder; the language-model head is dropped.

    ``wte`` is kept (frozen, unused in forward) so parameter accounting
    matches the pre-trained model being adapted.
    """

    causal = True

    def __init__(self, d_model=768, depth=3, n_heads=12, max_positions=1024, vocab_size=50257, eps=1e-5):
        super().__init__(d_model, depth, n_heads, max_positions, eps)
        self.wte = nn.Embedding(vocab_size, d_model)
        nn.init.normal_(self.wte.weight, std=0.02)

    def parameter_labels(self) -> dict[str, str]:
        labels = {}
        for name, p in self.named_parameters():
            if ".lora_" in name:
                labels[name] = LORA
            else:
                labels[name] = TRAINABLE if p.requires_grad else FROZEN
        return labels


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable rank-r update ``scale * B A``."""

    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0, dropout: float = 0.0):
        super().__init__()
        if rank <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {rank}")
        self.base = base
        self.rank = rank
        self.scale = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (self.dropout(x) @ self.lora_A.T @ self.lora_B.T) * self.scale


@dataclass
class FinetunePolicy:
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.0
    targets: tuple[str, ...] = ("attn.c_attn", "attn.c_proj")
    fully_trainable: tuple[str, ...] = ("wpe", "ln_1", "ln_2", "ln_f")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


@dataclass
class ParameterPartition:
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, group: str) -> int:
        return self.counts.get(group, 0)


def apply_finetune_policy(backbone: SequenceBackbone, policy: FinetunePolicy) -> ParameterPartition:
    """Freeze the backbone, wrap attention projections with LoRA, unfreeze embeddings/norms."""
    for p in backbone.parameters():
        p.requires_grad_(False)
    for name, module in list(backbone.named_modules()):
        if isinstance(module, nn.Linear) and any(name.endswith(t) for t in policy.targets):
            parent_name, _, attr = name.rpartition(".")
            parent = backbone.get_submodule(parent_name)
            setattr(parent, attr, LoRALinear(module, policy.lora_rank, policy.lora_alpha, policy.lora_dropout))
    for name, p in backbone.named_parameters():
        top = name.split(".")
        if ".lora_" in name or any(part in policy.fully_trainable for part in top[:-1]):
            p.requires_grad_(True)
    return partition(backbone)


def partition(backbone: SequenceBackbone) -> ParameterPartition:
    counts = {FROZEN: 0, LORA: 0, TRAINABLE: 0}
    params = dict(backbone.named_parameters())
    for name, label in backbone.parameter_labels().items():
        counts[label] += params[name].numel()
    return ParameterPartition(counts)


def load_weight_map(name: str = "gpt2") -> dict:
    text = resources.files("stdplm").joinpath("resources").joinpath(f"{name}_weight_map.json").read_text()
    return json.loads(text)


def _to_regex(pattern: str) -> re.Pattern:
    return re.compile("^" + re.escape(pattern).replace(r"\{layer\}", r"(?P<layer>\d+)") + "$")


def resolve_checkpoint(locator: str | os.PathLike) -> Path:
    """Turn a path or registry name (e.g. ``gpt2``) into a local checkpoint directory."""
    path = Path(locator).expanduser()
    if path.exists():
        return path
    cache = Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE))
    cached = cache / str(locator)
    if cached.exists():
        return cached
    try:
        from huggingface_hub import snapshot_download

        return Path(
            snapshot_download(
                repo_id=str(locator),
                allow_patterns=["config.json", "*.safetensors"],
                local_dir=cached,
            )
        )
    except Exception as exc:  # offline, unknown repo, or hub client missing
        raise FileNotFoundError(
            f"pretrained checkpoint {locator!r} not found as a path, under {cached}, "
            f"or via download ({exc}); set {CACHE_ENV} or pass a directory"
        ) from exc


def _read_tensors(path: Path) -> dict[str, torch.Tensor]:
    try:
        if path.suffix == ".safetensors":
            from safetensors.torch import load_file

            return load_file(str(path))
        return torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointMappingError(f"cannot read checkpoint tensors from {path}: {exc}") from exc


def read_checkpoint(locator: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    root = resolve_checkpoint(locator)
    if root.is_file():
        return {}, _read_tensors(root)
    config = {}
    if (root / "config.json").exists():
        config = json.loads((root / "config.json").read_text())
    for fname in ("model.safetensors", "pytorch_model.bin"):
        if (root / fname).exists():
            return config, _read_tensors(root / fname)
    raise FileNotFoundError(f"no model.safetensors or pytorch_model.bin in {root}")


def map_checkpoint(
    tensors: dict[str, torch.Tensor], layers: int, n_positions: int | None = None, weight_map: dict | None = None
) -> dict[str, torch.Tensor]:
    """Rename/transposes checkpoint tensors into GPT2Backbone state-dict names.

    Blocks at index >= ``layers`` are dropped.  Any name not covered by the
    mapping or ignore list is an error, as is any required name that is absent.
    """
    weight_map = weight_map or load_weight_map()
    rules = [(_to_regex(r["checkpoint"]), r) for r in weight_map["global"] + weight_map["per_layer"]]
    ignore = [_to_regex(p) for p in weight_map["ignore"]]
    out: dict[str, torch.Tensor] = {}
    unmatched = []
    for raw_name, tensor in tensors.items():
        name = raw_name
        for prefix in weight_map["strip_prefixes"]:
            if name.startswith(prefix):
                name = name[len(prefix):]
        if any(p.match(name) for p in ignore):
            continue
        for regex, rule in rules:
            m = regex.match(name)
            if m is None:
                continue
            layer = m.groupdict().get("layer")
            if layer is not None and int(layer) >= layers:
                break
            target = rule["module"].replace("{layer}", layer or "")
            value = tensor.t().contiguous() if rule["transpose"] else tensor
            if rule.get("truncate_rows") and n_positions is not None:
                value = value[:n_positions]
            out[target] = value
            break
        else:
            unmatched.append(raw_name)
    if unmatched:
        raise CheckpointMappingError(f"checkpoint names not in weight map: {sorted(unmatched)}")
    expected = {r["module"] for r in weight_map["global"]}
    expected |= {r["module"].replace("{layer}", str(i)) for r in weight_map["per_layer"] for i in range(layers)}
    missing = sorted(expected - out.keys())
    if missing:
        raise CheckpointMappingError(f"checkpoint is missing weights: {missing}")
    return out


def load_pretrained(
    locator: str | os.PathLike, layers: int, d_plm: int = 768, max_positions: int | None = None
) -> GPT2Backbone:
    """Build a GPT2Backbone from the first ``layers`` blocks of a GPT-2-class checkpoint.

    ``max_positions`` keeps only that many rows of the position table; rows
    beyond the longest token sequence never receive gradient.
    """
    config, tensors = read_checkpoint(locator)
    names = {k.removeprefix("transformer.") for k in tensors}
    if "wpe.weight" not in names or "wte.weight" not in names:
        raise CheckpointMappingError(
            f"checkpoint lacks embedding tables wte/wpe; first names: {sorted(names)[:8]}"
        )
    wte = tensors.get("wte.weight", tensors.get("transformer.wte.weight"))
    wpe = tensors.get("wpe.weight", tensors.get("transformer.wpe.weight"))
    width = wte.shape[1]
    if width != d_plm:
        raise ConfigError(f"checkpoint width {width} != d_PLM={d_plm}")
    available = len({n.split(".")[1] for n in names if n.startswith("h.")})
    if layers < 0 or layers > available:
        raise ConfigError(f"requested {layers} layers, checkpoint has {available}")
    n_positions = wpe.shape[0] if max_positions is None else min(max_positions, wpe.shape[0])
    state = map_checkpoint(tensors, layers, n_positions)
    model = GPT2Backbone(
        d_model=width,
        depth=layers,
        n_heads=config.get("n_head", 12),
        max_positions=n_positions,
        vocab_size=wte.shape[0],
        eps=config.get("layer_norm_epsilon", 1e-5),
    )
    try:
        result = model.load_state_dict(state, strict=False)
    except RuntimeError as exc:  # shape mismatches
        raise CheckpointMappingError(f"checkpoint tensors do not fit the backbone: {exc}") from exc
    if result.missing_keys or result.unexpected_keys:
        raise CheckpointMappingError(
            f"mapped state does not fit backbone: missing={result.missing_keys}, "
            f"unexpected={result.unexpected_keys}"
        )
    return model
