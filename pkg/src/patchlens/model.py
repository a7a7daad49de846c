"""Toy autoregressive vision-language model.

A linear patch embedder produces one visual token per image patch. Visual
tokens are followed by text tokens and fed through a pre-layernorm,
decoder-only transformer under a full causal mask. The final layernorm output
is the hidden state ``h_L`` that the unembedding matrix ``U`` reads, both for
next-token prediction and for the logit lens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .numcore import Matrix


class ModelParams:
    """Named parameter tensors in a fixed order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Matrix]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Matrix:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, Matrix]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def unembed(self) -> Matrix:
        return self.tensors["unembed"]

    def layer(self, i: int, name: str) -> Matrix:
        return self.tensors[f"layers.{i}.{name}"]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: m.data for k, m in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: nc.param(m.data.copy(), name=k) for k, m in self})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    d, v = config.d_model, config.vocab_size
    shapes = {
        "tok_embed": (v, d),
        "patch_proj": (3 * config.patch_px**2, d),
        "patch_bias": (1, d),
        "pos_embed": (config.context_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.gain": (1, d),
                p + "ln1.bias": (1, d),
                p + "attn.wq": (d, d),
                p + "attn.wk": (d, d),
                p + "attn.wv": (d, d),
                p + "attn.wo": (d, d),
                p + "ln2.gain": (1, d),
                p + "ln2.bias": (1, d),
                p + "mlp.w1": (d, 4 * d),
                p + "mlp.b1": (1, 4 * d),
                p + "mlp.w2": (4 * d, d),
                p + "mlp.b2": (1, d),
            }
        )
    shapes["ln_f.gain"] = (1, d)
    shapes["ln_f.bias"] = (1, d)
    shapes["unembed"] = (v, d)
    return shapes


def init_params(config: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf in ("bias", "b1", "b2") or name == "patch_bias":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, config.init_std, size=shape)
        tensors[name] = nc.param(data, name=name)
    return ModelParams(config, tensors)


@dataclass(frozen=True)
class SequenceLayout:
    """Positions of ``[P, T, A]``; the model input stops one short of the last answer token."""

    n_visual: int
    n_text: int
    n_answer: int = 0

    @property
    def visual(self) -> range:
        return range(0, self.n_visual)

    @property
    def text(self) -> range:
        return range(self.n_visual, self.n_visual + self.n_text)

    @property
    def answer(self) -> range:
        start = self.n_visual + self.n_text
        return range(start, start + self.n_answer)

    @property
    def length(self) -> int:
        return self.n_visual + self.n_text + self.n_answer

    @property
    def input_length(self) -> int:
        return self.length - 1 if self.n_answer else self.length

    @property
    def predict_positions(self) -> list[int]:
        """Positions whose hidden state predicts each answer token (or the next token)."""
        if self.n_answer:
            return [a - 1 for a in self.answer]
        return [self.length - 1]


@dataclass
class ForwardTrace:
    params: ModelParams
    layout: SequenceLayout
    tokens: np.ndarray
    residuals: list[Matrix]
    final: Matrix
    attention: list[list[np.ndarray]]
    logits: Matrix
    _normed: dict[int, Matrix] = field(default_factory=dict, repr=False)

    @property
    def n_layers(self) -> int:
        return len(self.residuals) - 1

    def hidden(self, layer: int) -> Matrix:
        """``h_l`` for every position: the final layernorm applied to the residual stream after block ``l``."""
        L = self.n_layers
        if not 0 <= layer <= L:
            raise IndexError(f"layer {layer} outside 0..{L}")
        if layer == L:
            return self.final
        if layer not in self._normed:
            p = self.params
            self._normed[layer] = nc.layernorm(self.residuals[layer], p["ln_f.gain"], p["ln_f.bias"])
        return self._normed[layer]

    def block_input(self, layer: int) -> Matrix:
        """Residual stream entering block ``layer`` (1-based)."""
        return self.residuals[layer - 1]

    def mean_attention(self) -> np.ndarray:
        """Attention averaged over all heads and layers."""
        return np.mean([a for layer in self.attention for a in layer], axis=0)


def image_patches(image: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Flatten a ``(G*p, G*p, 3)`` image into ``G*G`` row-major patch vectors of length ``3*p*p``."""
    img = np.asarray(image, dtype=np.float64)
    side, p, G = config.image_px, config.patch_px, config.grid_side
    if img.shape != (side, side, 3):
        raise ValueError(f"image shape {img.shape} does not match expected {(side, side, 3)}")
    return img.reshape(G, p, G, p, 3).transpose(0, 2, 1, 3, 4).reshape(G * G, p * p * 3)


def embed_patches(image: np.ndarray, params: ModelParams, with_position: bool = True) -> Matrix:
    config = params.config
    patches = nc.const(image_patches(image, config))
    x = nc.add(patches @ params["patch_proj"], params["patch_bias"])
    if with_position:
        x = x + nc.take_rows(params["pos_embed"], np.arange(config.n_patches))
    return x


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def attention(
    x: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    n_heads: int,
    mask: np.ndarray,
) -> tuple[Matrix, list[np.ndarray]]:
    """Multi-head self-attention on row-vector tokens: ``softmax(QK^T/sqrt(dh)) V`` per head, then ``W_O``."""
    d = x.cols
    dh = d // n_heads
    q_all, k_all, v_all = x @ wq, x @ wk, x @ wv
    heads, weights = [], []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        q = nc.slice_cols(q_all, lo, hi) if n_heads > 1 else q_all
        k = nc.slice_cols(k_all, lo, hi) if n_heads > 1 else k_all
        v = nc.slice_cols(v_all, lo, hi) if n_heads > 1 else v_all
        a = nc.softmax_rows(nc.scale(q @ k.T, 1.0 / np.sqrt(dh)), mask=mask)
        weights.append(a.data)
        heads.append(a @ v)
    out = nc.concat_cols(heads) if n_heads > 1 else heads[0]
    return out @ wo, weights


def forward(
    params: ModelParams,
    image: np.ndarray,
    text: Sequence[int],
    answer: Sequence[int] = (),
    attention_mask: np.ndarray | None = None,
) -> ForwardTrace:
    """Teacher-forced forward pass over ``[P, text, answer[:-1]]``.

    ``attention_mask`` (optional, boolean, input_length x input_length) further
    restricts which positions may attend to which, on top of the causal mask.
    """
    config = params.config
    text = [int(t) for t in text]
    answer = [int(t) for t in answer]
    layout = SequenceLayout(config.n_patches, len(text), len(answer))
    fed = text + answer[:-1]
    if len(fed) > config.max_text_len:
        raise ValueError(f"text length {len(fed)} exceeds max_text_len={config.max_text_len}")
    for t in text + answer:
        if not 0 <= t < config.vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of size {config.vocab_size}")

    n = layout.input_length
    mask = causal_mask(n)
    if attention_mask is not None:
        mask = mask & np.asarray(attention_mask, dtype=bool)

    parts = [embed_patches(image, params)]
    if fed:
        tok = nc.take_rows(params["tok_embed"], fed)
        pos = nc.take_rows(params["pos_embed"], np.arange(config.n_patches, n))
        parts.append(tok + pos)
    x = nc.concat_rows(parts) if len(parts) > 1 else parts[0]

    residuals = [x]
    attn_weights = []
    for i in range(config.n_layers):
        ly = lambda name: params.layer(i, name)  # noqa: E731
        h = nc.layernorm(x, ly("ln1.gain"), ly("ln1.bias"))
        a, w = attention(
            h, ly("attn.wq"), ly("attn.wk"), ly("attn.wv"), ly("attn.wo"), config.n_heads, mask
        )
        x = x + a
        h = nc.layernorm(x, ly("ln2.gain"), ly("ln2.bias"))
        m = nc.gelu(nc.add(h @ ly("mlp.w1"), ly("mlp.b1")))
        x = x + nc.add(m @ ly("mlp.w2"), ly("mlp.b2"))
        residuals.append(x)
        attn_weights.append(w)

    final = nc.layernorm(x, params["ln_f.gain"], params["ln_f.bias"])
    logits = nc.take_rows(final, layout.predict_positions) @ params.unembed.T
    return ForwardTrace(
        params=params,
        layout=layout,
        tokens=np.asarray(fed, dtype=np.int64),
        residuals=residuals,
        final=final,
        attention=attn_weights,
        logits=logits,
    )


def generate_answer(
    params: ModelParams, image: np.ndarray, question: Sequence[int], length: int = 1
) -> list[int]:
    """Greedy decoding; ``np.argmax`` breaks ties toward the lowest token id."""
    out: list[int] = []
    for _ in range(length):
        trace = forward(params, image, list(question) + out)
        out.append(int(np.argmax(trace.logits.data[-1])))
    return out
