"""Transformer with one token encoder shared by two parallel decoders.

The instance decoder turns N learned queries into instance representations
decoded by box/category heads; the interaction decoder turns K queries into
interaction representations decoded by the pointer heads (one vector each
for the human and the object side) and the action head. Both decoders read
the same encoder memory unless ``shared_encoder`` is off, in which case the
interaction path gets its own encoder (ablation). With ``direct_regression``
the interaction path additionally regresses human/object boxes itself
instead of relying on pointers (ablation).

Weights live in a flat name -> array dict so freezing, checkpointing and
gradient bookkeeping stay trivial.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tz
from .data import token_channels
from .errors import CheckpointError, ConfigError
from .tensor import Tensor


@dataclass
class ModelConfig:
    d: int = 64                   # representation width
    layers: int = 2               # per encoder / decoder
    heads: int = 4
    n_instance_slots: int = 16    # N
    n_interaction_slots: int = 16  # K
    n_actions: int = 8            # gamma, slot 0 = interactiveness
    n_categories: int = 8         # C, category 0 = person
    grid: int = 8                 # encoder tokens T = grid * grid
    ffn_dim: int = 0              # 0 -> 2 * d
    pointer_head_depth: int = 2
    shared_encoder: bool = True
    direct_regression: bool = False

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 2 * self.d
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4 != 0:
            raise ConfigError(f"d={self.d} must be a multiple of 4 "
                              "for the 2-D sine positions")
        if self.n_actions < 2:
            raise ConfigError("n_actions must be >= 2 (interactiveness + one)")
        if self.n_categories < 2:
            raise ConfigError("n_categories must be >= 2")

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def d_in(self) -> int:
        return token_channels(self.n_categories)

    @property
    def occluded_slot(self) -> int:
        """Instance slot reserved as the pointing target for occluded objects."""
        return self.n_instance_slots - 1


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sine_positions(grid: int, d: int) -> np.ndarray:
    """2-D sine position codes for a grid of tokens, DETR style."""
    key = (grid, d)
    if key in _PE_CACHE:
        return _PE_CACHE[key]
    npf = d // 2
    i = np.arange(npf, dtype=np.float64)
    freq = 10000.0 ** (2.0 * (i // 2) / npf)
    out = np.zeros((grid * grid, d), dtype=np.float64)
    for r in range(grid):
        for c in range(grid):
            y = (r + 0.5) / grid * 2.0 * math.pi
            x = (c + 0.5) / grid * 2.0 * math.pi
            px, py = x / freq, y / freq
            emb_y = np.where(np.arange(npf) % 2 == 0, np.sin(py), np.cos(py))
            emb_x = np.where(np.arange(npf) % 2 == 0, np.sin(px), np.cos(px))
            out[r * grid + c] = np.concatenate([emb_y, emb_x])
    _PE_CACHE[key] = out
    return out


def _attn_shapes(cfg: ModelConfig, prefix: str, shapes: dict):
    for name in ("wq", "wk", "wv", "wo"):
        shapes[f"{prefix}.{name}"] = (cfg.d, cfg.d)
    for name in ("bq", "bk", "bv", "bo"):
        shapes[f"{prefix}.{name}"] = (cfg.d,)


def _ln_shapes(prefix: str, d: int, shapes: dict):
    shapes[f"{prefix}.g"] = (d,)
    shapes[f"{prefix}.b"] = (d,)


def _ffn_shapes(cfg: ModelConfig, prefix: str, shapes: dict):
    shapes[f"{prefix}.w1"] = (cfg.d, cfg.ffn_dim)
    shapes[f"{prefix}.b1"] = (cfg.ffn_dim,)
    shapes[f"{prefix}.w2"] = (cfg.ffn_dim, cfg.d)
    shapes[f"{prefix}.b2"] = (cfg.d,)


def _encoder_shapes(cfg: ModelConfig, prefix: str, shapes: dict):
    for i in range(cfg.layers):
        _ln_shapes(f"{prefix}.l{i}.ln1", cfg.d, shapes)
        _attn_shapes(cfg, f"{prefix}.l{i}.attn", shapes)
        _ln_shapes(f"{prefix}.l{i}.ln2", cfg.d, shapes)
        _ffn_shapes(cfg, f"{prefix}.l{i}.ffn", shapes)
    _ln_shapes(f"{prefix}.ln", cfg.d, shapes)


def _decoder_shapes(cfg: ModelConfig, prefix: str, shapes: dict):
    for i in range(cfg.layers):
        _ln_shapes(f"{prefix}.l{i}.ln1", cfg.d, shapes)
        _attn_shapes(cfg, f"{prefix}.l{i}.self", shapes)
        _ln_shapes(f"{prefix}.l{i}.ln2", cfg.d, shapes)
        _attn_shapes(cfg, f"{prefix}.l{i}.cross", shapes)
        _ln_shapes(f"{prefix}.l{i}.ln3", cfg.d, shapes)
        _ffn_shapes(cfg, f"{prefix}.l{i}.ffn", shapes)
    _ln_shapes(f"{prefix}.ln", cfg.d, shapes)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every trainable tensor's name and shape, in canonical order."""
    shapes: dict[str, tuple] = {}
    shapes["input_proj.w"] = (cfg.d_in, cfg.d)
    shapes["input_proj.b"] = (cfg.d,)
    _encoder_shapes(cfg, "enc", shapes)
    if not cfg.shared_encoder:
        _encoder_shapes(cfg, "enc2", shapes)
    shapes["inst_queries"] = (cfg.n_instance_slots, cfg.d)
    _decoder_shapes(cfg, "dec_i", shapes)
    shapes["intx_queries"] = (cfg.n_interaction_slots, cfg.d)
    _decoder_shapes(cfg, "dec_x", shapes)
    for l, (din, dout) in enumerate([(cfg.d, cfg.d), (cfg.d, cfg.d), (cfg.d, 4)]):
        shapes[f"head_box.w{l + 1}"] = (din, dout)
        shapes[f"head_box.b{l + 1}"] = (dout,)
    shapes["head_class.w"] = (cfg.d, cfg.n_categories + 1)
    shapes["head_class.b"] = (cfg.n_categories + 1,)
    shapes["head_act.w"] = (cfg.d, cfg.n_actions)
    shapes["head_act.b"] = (cfg.n_actions,)
    for side in ("h", "o"):
        for l in range(cfg.pointer_head_depth):
            shapes[f"head_{side}.w{l + 1}"] = (cfg.d, cfg.d)
            shapes[f"head_{side}.b{l + 1}"] = (cfg.d,)
    if cfg.direct_regression:
        for side in ("hbox", "obox"):
            for l, (din, dout) in enumerate([(cfg.d, cfg.d), (cfg.d, cfg.d),
                                             (cfg.d, 4)]):
                shapes[f"head_{side}.w{l + 1}"] = (din, dout)
                shapes[f"head_{side}.b{l + 1}"] = (dout,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("queries"):
            params[name] = rng.standard_normal(shape)
        elif len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-a, a, size=shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def _add_pe(x: Tensor, pe: Tensor) -> Tensor:
    return tz.add_mat(x, pe) if x.ndim == 3 else tz.add(x, pe)


def _linear(bound, prefix: str, x: Tensor) -> Tensor:
    return tz.add_row(tz.matmul(x, bound[f"{prefix}.w"]), bound[f"{prefix}.b"])


def _mlp(bound, prefix: str, x: Tensor, depth: int) -> Tensor:
    out = x
    for l in range(1, depth + 1):
        out = tz.add_row(tz.matmul(out, bound[f"{prefix}.w{l}"]),
                         bound[f"{prefix}.b{l}"])
        if l < depth:
            out = tz.relu(out)
    return out


def _attention(bound, prefix: str, q_in: Tensor, k_in: Tensor,
               v_in: Tensor, heads: int) -> Tensor:
    d = bound[f"{prefix}.wq"].shape[1]
    inv = 1.0 / math.sqrt(d // heads)
    q = tz.split_heads(tz.add_row(tz.matmul(q_in, bound[f"{prefix}.wq"]),
                                  bound[f"{prefix}.bq"]), heads)
    k = tz.split_heads(tz.add_row(tz.matmul(k_in, bound[f"{prefix}.wk"]),
                                  bound[f"{prefix}.bk"]), heads)
    v = tz.split_heads(tz.add_row(tz.matmul(v_in, bound[f"{prefix}.wv"]),
                                  bound[f"{prefix}.bv"]), heads)
    att = tz.softmax(tz.scale(tz.matmul(q, tz.transpose_last2(k)), inv))
    ctx = tz.merge_heads(tz.matmul(att, v), heads, squeeze=q_in.ndim == 2)
    return tz.add_row(tz.matmul(ctx, bound[f"{prefix}.wo"]), bound[f"{prefix}.bo"])


def _ln(bound, prefix: str, x: Tensor) -> Tensor:
    return tz.layer_norm(x, bound[f"{prefix}.g"], bound[f"{prefix}.b"])


def _ffn(bound, prefix: str, x: Tensor) -> Tensor:
    h = tz.relu(tz.add_row(tz.matmul(x, bound[f"{prefix}.w1"]),
                           bound[f"{prefix}.b1"]))
    return tz.add_row(tz.matmul(h, bound[f"{prefix}.w2"]), bound[f"{prefix}.b2"])


class Model:
    """Bound weights plus the forward graph builders."""

    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None,
                 init_seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, init_seed)
        self.positions = sine_positions(cfg.grid, cfg.d)

    def bind(self, tape: Optional[tz.GradientTape] = None,
             trainable: Optional[set] = None) -> dict[str, Tensor]:
        """Wrap weights as tape leaves (trainable) or constants."""
        bound = {}
        for name, arr in self.params.items():
            if tape is not None and (trainable is None or name in trainable):
                bound[name] = tape.leaf(arr)
            else:
                bound[name] = tz.const(arr)
        return bound

    # ------------------------------------------------------------------
    # forward graph

    def encode(self, bound, tokens, prefix: str = "enc") -> Tensor:
        """Project raw tokens and run the self-attention encoder stack."""
        cfg = self.cfg
        pe = tz.const(self.positions)
        x = tz.add_row(tz.matmul(tokens, bound["input_proj.w"]),
                       bound["input_proj.b"])
        for i in range(cfg.layers):
            lp = f"{prefix}.l{i}"
            xn = _ln(bound, f"{lp}.ln1", x)
            qk = _add_pe(xn, pe)
            x = tz.add(x, _attention(bound, f"{lp}.attn", qk, qk, xn, cfg.heads))
            x = tz.add(x, _ffn(bound, f"{lp}.ffn", _ln(bound, f"{lp}.ln2", x)))
        return _ln(bound, f"{prefix}.ln", x)

    def _decode(self, bound, memory: Tensor, queries: Tensor,
                prefix: str) -> Tensor:
        cfg = self.cfg
        pe = tz.const(self.positions)
        if memory.ndim == 3:
            t = tz.const(np.zeros((memory.shape[0], queries.shape[0], cfg.d)))
            qe = lambda x: tz.add_mat(x, queries)
        else:
            t = tz.const(np.zeros((queries.shape[0], cfg.d)))
            qe = lambda x: tz.add(x, queries)
        mem_k = _add_pe(memory, pe)
        for i in range(cfg.layers):
            lp = f"{prefix}.l{i}"
            tn = _ln(bound, f"{lp}.ln1", t)
            qk = qe(tn)
            t = tz.add(t, _attention(bound, f"{lp}.self", qk, qk, tn, cfg.heads))
            tn = _ln(bound, f"{lp}.ln2", t)
            t = tz.add(t, _attention(bound, f"{lp}.cross", qe(tn), mem_k,
                                     memory, cfg.heads))
            t = tz.add(t, _ffn(bound, f"{lp}.ffn", _ln(bound, f"{lp}.ln3", t)))
        return _ln(bound, f"{prefix}.ln", t)

    def decode_instances(self, bound, memory: Tensor) -> dict:
        """Instance representations plus box/category head outputs."""
        mu = self._decode(bound, memory, bound["inst_queries"], "dec_i")
        box_logits = _mlp(bound, "head_box", mu, 3)
        return {
            "mu": mu,
            "box_logits": box_logits,
            "boxes": tz.sigmoid(box_logits),
            "cat_logits": _linear(bound, "head_class", mu),
        }

    def decode_interactions(self, bound, memory: Tensor) -> dict:
        """Interaction representations plus pointer/action head outputs."""
        cfg = self.cfg
        z = self._decode(bound, memory, bound["intx_queries"], "dec_x")
        out = {
            "z": z,
            "v_h": _mlp(bound, "head_h", z, cfg.pointer_head_depth),
            "v_o": _mlp(bound, "head_o", z, cfg.pointer_head_depth),
            "act_logits": _linear(bound, "head_act", z),
        }
        if cfg.direct_regression:
            out["hbox_logits"] = _mlp(bound, "head_hbox", z, 3)
            out["obox_logits"] = _mlp(bound, "head_obox", z, 3)
        return out

    def forward(self, bound, tokens: Tensor) -> dict:
        """Full pipeline: encode, then both decoders (independent given memory)."""
        memory = self.encode(bound, tokens, "enc")
        out = {"memory": memory}
        out.update(self.decode_instances(bound, memory))
        if self.cfg.shared_encoder:
            intx_memory = memory
        else:
            intx_memory = self.encode(bound, tokens, "enc2")
            out["intx_memory"] = intx_memory
        out.update(self.decode_interactions(bound, intx_memory))
        return out

    def run(self, tokens: np.ndarray) -> dict[str, np.ndarray]:
        """Inference forward pass on plain arrays (no tape)."""
        out = self.forward(self.bind(), tz.const(tokens))
        return {k: v.array for k, v in out.items()}


# ---------------------------------------------------------------------------
# checkpoints: zip archive of raw little-endian float64 tensors + manifest

_FORMAT = "hoidet-checkpoint-v1"


def save_checkpoint(model: Model, path) -> None:
    names = list(model.params)
    blob = io.BytesIO()
    entries = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "size": len(raw)})
        blob.write(raw)
        offset += len(raw)
    manifest = {"format": _FORMAT, "config": asdict(model.cfg),
                "tensors": entries}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("tensors.bin", blob.getvalue())


def load_checkpoint(path) -> Model:
    """Load and validate every expected tensor name and shape."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            raw = zf.read("tensors.bin")
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if manifest.get("format") != _FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig(**manifest["config"])
    expected = param_shapes(cfg)
    entries = {e["name"]: e for e in manifest["tensors"]}
    missing = sorted(set(expected) - set(entries))
    extra = sorted(set(entries) - set(expected))
    if missing or extra:
        raise CheckpointError(f"tensor set mismatch: missing {missing}, "
                              f"unexpected {extra}")
    params = {}
    for name, shape in expected.items():
        e = entries[name]
        if tuple(e["shape"]) != shape:
            raise CheckpointError(f"tensor {name}: shape {tuple(e['shape'])} "
                                  f"!= expected {shape}")
        arr = np.frombuffer(raw[e["offset"]:e["offset"] + e["size"]],
                            dtype="<f8").reshape(shape)
        params[name] = arr.astype(np.float64)
    return Model(cfg, params)
