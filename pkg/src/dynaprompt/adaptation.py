"""Task adaptation: classification heads, retrieval ranking, caption decoding.

Every task reuses the pre-trained backbone with dynamic prompt selection
exactly as in pre-training; uni-modal batches take the contrary-modality
prompt path.  Heads start with zero output layers so an untrained classifier
emits a uniform distribution.  The caption decoder is a causal self-attention
stack (no cross-attention sublayers): encoder image states concatenated with
the selected textual prompt tokens form its prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import BOS_ID, EOS_ID, PAD_ID, ConfigError, ModelConfig
from .encoder import TransformerLayer, UnifiedBatch, VisionLanguageModel
from .ndtensor import ShapeError, Tensor, backward, no_grad, ops
from .objectives import itc_loss
from .optim import AdamW
from .pools import PromptPools

__all__ = [
    "TaskHead", "DecoderConfig", "CaptionDecoder", "LabeledBatch",
    "CaptionBatch", "RetrievalResult", "classify", "finetune_loss",
    "finetune_step", "retrieval_rank", "generate_report", "caption_loss",
    "encode_retrieval_reps",
]

TASKS = ("vqa", "pair_classify", "image_classify", "text_classify",
         "retrieval", "generation")

_TASK_KIND = {
    "vqa": "image_text",
    "pair_classify": "image_text",
    "image_classify": "image_only",
    "text_classify": "text_only",
}


@dataclass
class LabeledBatch:
    batch: UnifiedBatch
    labels: np.ndarray  # int [B]


@dataclass
class CaptionBatch:
    batch: UnifiedBatch          # image_only
    captions: list[list[int]]    # target token ids, no BOS/EOS


@dataclass
class DecoderConfig:
    """Geometry of the causal caption decoder; never has cross-attention."""

    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 64
    causal: bool = True

    def __post_init__(self):
        if not self.causal:
            raise ConfigError("the caption decoder is always causal")

    @classmethod
    def from_model_config(cls, config: ModelConfig) -> "DecoderConfig":
        return cls(n_layers=config.dec_layers, n_heads=config.dec_heads,
                   context_len=config.dec_context)


class CaptionDecoder:
    """Causal prefix LM over the shared hidden width.

    Self-attention layers are initialized from the unified encoder's layers
    where shapes permit (same hidden width / head count); token and position
    tables are decoder-owned because the encoder's text embedding lives in a
    different width.
    """

    def __init__(self, dconfig: DecoderConfig, model_config: ModelConfig,
                 rng: np.random.Generator,
                 encoder_layers: list[TransformerLayer] | None = None):
        self.dconfig = dconfig
        self.d_hidden = model_config.d_hidden
        self.vocab_size = model_config.vocab_size
        self.token_table = Tensor(
            rng.normal(0.0, 0.02, size=(self.vocab_size, self.d_hidden)),
            requires_grad=True)
        self.pos_table = Tensor(
            rng.normal(0.0, 0.02, size=(dconfig.context_len, self.d_hidden)),
            requires_grad=True)
        self.layers = [TransformerLayer(self.d_hidden, dconfig.n_heads, rng)
                       for _ in range(dconfig.n_layers)]
        self.out_w = Tensor(np.zeros((self.d_hidden, self.vocab_size)),
                            requires_grad=True)
        self.out_b = Tensor(np.zeros(self.vocab_size), requires_grad=True)
        if encoder_layers:
            for mine, theirs in zip(self.layers, encoder_layers):
                for name, src in theirs.parameters("").items():
                    dst = getattr(mine, name)
                    if dst.shape == src.shape:
                        dst.data[...] = src.data

    def parameters(self, prefix: str = "decoder.") -> dict[str, Tensor]:
        out = {f"{prefix}token_table": self.token_table,
               f"{prefix}pos_table": self.pos_table,
               f"{prefix}out_w": self.out_w,
               f"{prefix}out_b": self.out_b}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}layers.{i}."))
        return out

    def has_cross_attention(self) -> bool:
        return False

    def forward_states(self, prefix_states: Tensor, token_ids: np.ndarray) -> Tensor:
        """Logits [B, T, vocab] for each token position (strictly causal)."""
        b, p, h = prefix_states.shape
        token_ids = np.asarray(token_ids)
        t = token_ids.shape[1]
        total = p + t
        if total > self.dconfig.context_len:
            raise ConfigError(f"sequence {total} overflows decoder context "
                              f"{self.dconfig.context_len}")
        tok = ops.embedding_lookup(self.token_table, token_ids)
        pos = ops.gather_rows(self.pos_table, np.arange(total))
        x = ops.add(ops.concat([prefix_states, tok], axis=1), pos)
        causal = np.where(np.tril(np.ones((total, total), dtype=bool)),
                          0.0, -1e30)[None, None]
        for layer in self.layers:
            x = layer.forward(x, causal)
        token_states = ops.slice_axis(x, 1, p, total)
        return ops.add(ops.matmul(token_states, self.out_w), self.out_b)


class TaskHead:
    """Trainable task-specific parameters over the shared encoder output."""

    def __init__(self, task: str, config: ModelConfig,
                 rng: np.random.Generator, label_space: int | None = None,
                 decoder: CaptionDecoder | None = None):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        self.task = task
        self.label_space = label_space
        self.decoder = decoder
        self.params: dict[str, Tensor] = {}
        h = config.d_hidden
        if task in ("vqa", "pair_classify", "image_classify", "text_classify"):
            if not label_space or label_space < 1:
                raise ConfigError(f"{task} needs a positive label_space")
            d_in = 2 * h if task in ("vqa", "pair_classify") else h
            self.params["w"] = Tensor(np.zeros((d_in, label_space)),
                                      requires_grad=True)
            self.params["b"] = Tensor(np.zeros(label_space), requires_grad=True)
        elif task == "retrieval":
            self.params["proj_v"] = Tensor(np.eye(h), requires_grad=True)
            self.params["proj_t"] = Tensor(np.eye(h), requires_grad=True)
        elif task == "generation":
            if decoder is None:
                decoder = CaptionDecoder(DecoderConfig.from_model_config(config),
                                         config, rng)
                self.decoder = decoder

    def parameters(self, prefix: str = "head.") -> dict[str, Tensor]:
        out = {f"{prefix}{k}": v for k, v in self.params.items()}
        if self.decoder is not None:
            out.update(self.decoder.parameters(f"{prefix}decoder."))
        return out


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def _head_logits(encoded, head: TaskHead) -> Tensor:
    if head.task in ("vqa", "pair_classify"):
        feats = ops.concat([encoded.cls_visual, encoded.cls_textual], axis=1)
    elif head.task == "image_classify":
        feats = encoded.cls_visual
    else:
        feats = encoded.cls_textual
    return ops.add(ops.matmul(feats, head.params["w"]), head.params["b"])


def classify(model: VisionLanguageModel, pools: PromptPools,
             batch: UnifiedBatch, head: TaskHead) -> Tensor:
    """Label distribution [B, label_space] from the appropriate [CLS] state(s)."""
    expected = _TASK_KIND.get(head.task)
    if expected is None:
        raise ConfigError(f"classify does not apply to task {head.task!r}")
    if batch.kind != expected:
        raise ConfigError(f"task {head.task!r} needs {expected!r} batches, "
                          f"got {batch.kind!r}")
    encoded, _ = model.forward(batch, pools)
    return ops.softmax(_head_logits(encoded, head), axis=-1)


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass
class RetrievalResult:
    i2t_ranking: np.ndarray          # [N_i, N_t] text indices, best first
    t2i_ranking: np.ndarray          # [N_t, N_i]
    recall: dict = field(default_factory=dict)  # ("i2t"|"t2i", k) -> float


def retrieval_rank(image_reps: np.ndarray, text_reps: np.ndarray,
                   pairing: np.ndarray | None = None,
                   ks: tuple[int, ...] = (1, 5, 10)) -> RetrievalResult:
    """Cosineranking in both directions with recall at each k.

    ``pairing[i]`` is the index of the text matching image ``i`` (identity by
    default, in which case both counts must agree).  Ties rank the lower
    index first.
    """
    image_reps = np.asarray(image_reps, dtype=np.float64)
    text_reps = np.asarray(text_reps, dtype=np.float64)
    ni, nt = image_reps.shape[0], text_reps.shape[0]
    if ni < 1 or nt < 1:
        raise ShapeError("retrieval needs at least one candidate per side")
    if max(ks) > max(ni, nt):
        raise ConfigError(f"recall k {max(ks)} exceeds candidate count")
    pairing = np.arange(ni) if pairing is None else np.asarray(pairing)
    if pairing.shape != (ni,):
        raise ShapeError(f"pairing must have shape [{ni}]")

    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        n[n == 0.0] = 1.0
        return x / n

    sims = unit(image_reps) @ unit(text_reps).T
    i2t = np.argsort(-sims, axis=1, kind="stable")
    t2i = np.argsort(-sims.T, axis=1, kind="stable")

    recall = {}
    inverse = np.empty(nt, dtype=np.int64)
    inverse[pairing] = np.arange(ni)
    for k in ks:
        if k <= nt:
            hits = sum(1 for i in range(ni) if pairing[i] in i2t[i, :k])
            recall[("i2t", k)] = hits / ni
        if k <= ni:
            hits = sum(1 for j in range(nt) if inverse[j] in t2i[j, :k])
            recall[("t2i", k)] = hits / nt
    return RetrievalResult(i2t_ranking=i2t, t2i_ranking=t2i, recall=recall)


def encode_retrieval_reps(model, pools, image_batch: UnifiedBatch,
                          text_batch: UnifiedBatch, head: TaskHead
                          ) -> tuple[Tensor, Tensor]:
    enc_v, _ = model.forward(image_batch, pools)
    enc_t, _ = model.forward(text_batch, pools)
    return (ops.matmul(enc_v.cls_visual, head.params["proj_v"]),
            ops.matmul(enc_t.cls_textual, head.params["proj_t"]))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _image_prefix(model, pools, batch: UnifiedBatch):
    """Encoder image states ([CLS_v] + patches) plus raw prompt tokens."""
    encoded, unified = model.forward(batch, pools)
    lay = unified.layout
    image_states = ops.slice_axis(encoded.token_states, 1, 0, lay.patches.stop)
    return ops.concat([image_states, unified.prompt_tokens], axis=1)


def caption_loss(model, pools, decoder: CaptionDecoder,
                 cbatch: CaptionBatch) -> Tensor:
    """Teacher-forced next-token cross-entropy over caption positions."""
    prefix = _image_prefix(model, pools, cbatch.batch)
    b = len(cbatch.captions)
    t = max(len(c) for c in cbatch.captions) + 1  # room for EOS target
    inputs = np.full((b, t), PAD_ID, dtype=np.int64)
    targets = np.full((b, t), -1, dtype=np.int64)
    for i, cap in enumerate(cbatch.captions):
        inputs[i, 0] = BOS_ID
        inputs[i, 1:len(cap) + 1] = cap
        targets[i, :len(cap)] = cap
        targets[i, len(cap)] = EOS_ID
    logits = decoder.forward_states(prefix, inputs)
    flat_targets = targets.reshape(-1)
    picked = np.nonzero(flat_targets >= 0)[0]
    flat = ops.reshape(logits, (b * t, decoder.vocab_size))
    return ops.cross_entropy(ops.gather_rows(flat, picked), flat_targets[picked])


def generate_report(model, pools, decoder: CaptionDecoder,
                    batch: UnifiedBatch, max_len: int,
                    mode: str = "greedy") -> list[list[int]]:
    """Greedy causal decoding until the end token or ``max_len`` tokens."""
    if mode != "greedy":
        raise ConfigError(f"unsupported decoding mode {mode!r}")
    with no_grad():
        prefix = _image_prefix(model, pools, batch)
        p = prefix.shape[1]
        if p + 1 + max_len > decoder.dconfig.context_len:
            raise ConfigError(f"prefix {p} + generation {max_len} overflows "
                              f"decoder context {decoder.dconfig.context_len}")
        outputs = []
        for i in range(batch.size):
            row = ops.slice_axis(prefix, 0, i, i + 1)
            tokens = [BOS_ID]
            for _ in range(max_len):
                logits = decoder.forward_states(row, np.array([tokens]))
                nxt = int(np.argmax(logits.data[0, -1]))
                if nxt == EOS_ID:
                    break
                tokens.append(nxt)
            outputs.append(tokens[1:])
    return outputs


# ---------------------------------------------------------------------------
# fine-tuning step
# ---------------------------------------------------------------------------

def finetune_loss(model, pools, head: TaskHead, tbatch, config: ModelConfig) -> Tensor:
    """Frozen-forward evaluation of a task batch (no parameter update)."""
    if head.task in _TASK_KIND:
        batch, labels = tbatch.batch, tbatch.labels
        expected = _TASK_KIND[head.task]
        if batch.kind != expected:
            raise ConfigError(f"task {head.task!r} needs {expected!r} batches, "
                              f"got {batch.kind!r}")
        encoded, _ = model.forward(batch, pools)
        return ops.cross_entropy(_head_logits(encoded, head), labels)
    if head.task == "retrieval":
        image_batch, text_batch = tbatch
        v, t = encode_retrieval_reps(model, pools, image_batch, text_batch, head)
        return itc_loss(v, t, config.temperature_init)
    if head.task == "generation":
        return caption_loss(model, pools, head.decoder, tbatch)
    raise ConfigError(f"unknown task {head.task!r}")


def finetune_step(tbatch, model, pools, head: TaskHead, optimizer: AdamW,
                  config: ModelConfig) -> float:
    """One adaptation update; returns the pre-update loss value."""
    optimizer.zero_grad()
    loss = finetune_loss(model, pools, head, tbatch, config)
    backward(loss)
    optimizer.step()
    return loss.item()
