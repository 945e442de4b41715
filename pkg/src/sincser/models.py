"""Acoustic, linguistic and fused emotion classifiers built from ``layers``.

A :class:`Model` keeps its learnable tensors in one flat ``params`` dict
(name -> ndarray) so the optimizer and checkpoint code can treat every model
variant the same way.  Names are prefixed ``ac.`` (acoustic branch), ``li.``
(linguistic branch) and ``fu.`` (fusion head).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import dsp_core, layers

CLASSES = ("happy", "neutral", "angry", "sad")
VARIANTS = ("cnn", "sinc_dnn", "sinc_lstm")
MODALITIES = ("acoustic", "linguistic", "fused")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    modality: str = "acoustic"
    acoustic_variant: str = "sinc_lstm"
    num_filters: int = 8
    kernel_length: int = 251
    stride: int = 64
    pool: int = 4
    sample_rate: int = 16000
    chunk_ms: float = 250.0
    dnn_hidden: int = 64
    lstm_hidden: int = 32
    acoustic_vec_dim: int = 64
    vocab_size: int = 4096
    embed_dim: int = 16
    text_hidden: int = 32
    linguistic_vec_dim: int = 96
    max_seq_len: int = 64
    num_classes: int = 4
    eval_chunks: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.acoustic_variant not in VARIANTS:
            raise ValueError(f"unknown acoustic_variant {self.acoustic_variant!r}; "
                             f"expected one of {', '.join(VARIANTS)}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; "
                             f"expected one of {', '.join(MODALITIES)}")
        if self.num_classes != 4:
            raise ValueError("num_classes must be 4")
        dims = ("num_filters", "kernel_length", "stride", "pool", "dnn_hidden", "lstm_hidden",
                "acoustic_vec_dim", "vocab_size", "embed_dim", "text_hidden",
                "linguistic_vec_dim", "max_seq_len", "eval_chunks")
        for name in dims:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel_length % 2 == 0:
            raise ValueError("kernel_length must be odd")

    @property
    def chunk_samples(self) -> int:
        return int(round(self.sample_rate * self.chunk_ms / 1000.0))

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Fusion dimensions at the published scale (2048 acoustic + 4800 linguistic)."""
        kw = dict(acoustic_vec_dim=2048, linguistic_vec_dim=4800)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _glorot(rng, n_in, n_out):
    return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))


class Model:
    def __init__(self, config: ModelConfig, params: dict, buffers: dict):
        self.config = config
        self.params = params
        self.buffers = buffers  # batch-norm running statistics, not learned

    # -- bookkeeping ---------------------------------------------------------------

    @property
    def uses_acoustic(self):
        return self.config.modality in ("acoustic", "fused")

    @property
    def uses_linguistic(self):
        return self.config.modality in ("linguistic", "fused")

    @property
    def is_sinc(self):
        return self.config.acoustic_variant.startswith("sinc")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def first_layer_parameter_count(self) -> int:
        if self.is_sinc:
            return int(self.params["ac.theta1"].size + self.params["ac.theta2"].size)
        return int(self.params["ac.conv.W"].size)

    def sinc_bank(self) -> dsp_core.SincBank:
        c = self.config
        return dsp_core.SincBank.from_thetas(self.params["ac.theta1"], self.params["ac.theta2"],
                                             sample_rate=c.sample_rate, length=c.kernel_length)

    def first_layer_kernels(self) -> np.ndarray:
        if self.is_sinc:
            return self.sinc_bank().kernels()
        return self.params["ac.conv.W"]

    def _pooled_frames(self):
        c = self.config
        frames = layers.conv_frames(c.chunk_samples, c.kernel_length, c.stride)
        return frames // c.pool

    # -- acoustic branch -------------------------------------------------------------

    def acoustic_features(self, chunks, mode="eval"):
        c, P = self.config, self.params
        chunks = np.asarray(chunks, dtype=float)
        if chunks.ndim == 1:
            chunks = chunks[None]
        if chunks.shape[1] != c.chunk_samples:
            raise ValueError(f"chunk has {chunks.shape[1]} samples, model expects {c.chunk_samples}")
        cache = {}
        if self.is_sinc:
            y, cache["front"] = layers.sinc_conv(chunks, self.sinc_bank(), c.stride)
        else:
            y, cache["front"] = layers.conv1d(chunks, P["ac.conv.W"], c.stride)
        y, cache["bn0"] = layers.batch_norm(y, P["ac.bn0.gamma"], P["ac.bn0.beta"],
                                            self.buffers["ac.bn0"], mode)
        y, cache["act0"] = layers.leaky_relu(y)
        y, cache["pool"] = layers.max_pool(y, c.pool)
        if c.acoustic_variant == "sinc_lstm":
            seq = y.transpose(0, 2, 1)
            hs, cache["lstm"] = layers.lstm_forward(seq, {"W": P["ac.lstm.W"], "b": P["ac.lstm.b"]})
            z = hs.mean(axis=1)
        else:
            flat = y.reshape(y.shape[0], -1)
            cache["flat_shape"] = y.shape
            z, cache["d1"] = layers.dense(flat, P["ac.d1.W"], P["ac.d1.b"])
            z, cache["bn1"] = layers.batch_norm(z, P["ac.bn1.gamma"], P["ac.bn1.beta"],
                                                self.buffers["ac.bn1"], mode)
            z, cache["act1"] = layers.leaky_relu(z)
        f, cache["proj"] = layers.dense(z, P["ac.proj.W"], P["ac.proj.b"])
        f, cache["act2"] = layers.leaky_relu(f)
        return f, cache

    def acoustic_features_backward(self, df, cache, grads):
        c, P = self.config, self.params
        d = layers.leaky_relu_backward(df, cache["act2"])
        d, grads["ac.proj.W"], grads["ac.proj.b"] = layers.dense_backward(d, cache["proj"])
        if c.acoustic_variant == "sinc_lstm":
            _, _, shape, _ = cache["lstm"]
            dhs = np.repeat(d[:, None, :] / shape[1], shape[1], axis=1)
            dseq, g, _ = layers.lstm_backward(dhs, cache["lstm"])
            grads["ac.lstm.W"], grads["ac.lstm.b"] = g["W"], g["b"]
            d = dseq.transpose(0, 2, 1)
        else:
            d = layers.leaky_relu_backward(d, cache["act1"])
            d, grads["ac.bn1.gamma"], grads["ac.bn1.beta"] = layers.batch_norm_backward(d, cache["bn1"])
            d, grads["ac.d1.W"], grads["ac.d1.b"] = layers.dense_backward(d, cache["d1"])
            d = d.reshape(cache["flat_shape"])
        d = layers.max_pool_backward(d, cache["pool"])
        d = layers.leaky_relu_backward(d, cache["act0"])
        d, grads["ac.bn0.gamma"], grads["ac.bn0.beta"] = layers.batch_norm_backward(d, cache["bn0"])
        if self.is_sinc:
            g = layers.sinc_conv_backward(d, cache["front"], need_dx=False)
            grads["ac.theta1"], grads["ac.theta2"] = g["theta1"], g["theta2"]
        else:
            _, grads["ac.conv.W"] = layers.conv1d_backward(d, cache["front"], need_dx=False)

    # -- linguistic branch -----------------------------------------------------------

    def pad_tokens(self, token_lists):
        c = self.config
        if not token_lists:
            raise ValueError("no token sequences given")
        for toks in token_lists:
            if len(toks) == 0:
                raise ValueError("token sequence is empty")
            if len(toks) > c.max_seq_len:
                raise ValueError(f"token sequence of length {len(toks)} exceeds max_seq_len={c.max_seq_len}")
        T = max(len(t) for t in token_lists)
        ids = np.zeros((len(token_lists), T), dtype=np.int64)
        mask = np.zeros((len(token_lists), T))
        for i, toks in enumerate(token_lists):
            ids[i, :len(toks)] = np.asarray(toks) % c.vocab_size
            mask[i, :len(toks)] = 1.0
        return ids, mask

    def linguistic_features(self, token_lists, mode="eval"):
        P = self.params
        ids, mask = self.pad_tokens(token_lists)
        cache = {"ids": ids}
        emb = P["li.emb"][ids]
        hs, cache["lstm"] = layers.lstm_forward(emb, {"W": P["li.lstm.W"], "b": P["li.lstm.b"]}, mask)
        att, cache["att"] = layers.self_attention(hs, {"Wq": P["li.att.Wq"], "Wk": P["li.att.Wk"]}, mask)
        f, cache["proj"] = layers.dense(att, P["li.proj.W"], P["li.proj.b"])
        f, cache["act"] = layers.leaky_relu(f)
        return f, cache

    def linguistic_features_backward(self, df, cache, grads):
        d = layers.leaky_relu_backward(df, cache["act"])
        d, grads["li.proj.W"], grads["li.proj.b"] = layers.dense_backward(d, cache["proj"])
        dhs, g = layers.self_attention_backward(d, cache["att"])
        grads["li.att.Wq"], grads["li.att.Wk"] = g["Wq"], g["Wk"]
        demb, g, _ = layers.lstm_backward(dhs, cache["lstm"])
        grads["li.lstm.W"], grads["li.lstm.b"] = g["W"], g["b"]
        gemb = np.zeros_like(self.params["li.emb"])
        np.add.at(gemb, cache["ids"], demb)
        grads["li.emb"] = gemb

    # -- heads -------------------------------------------------------------------------

    def fusion_logits(self, fa, fl):
        P = self.params
        fa = np.atleast_2d(fa)
        fl = np.atleast_2d(fl)
        c = self.config
        if fa.shape[1] != c.acoustic_vec_dim or fl.shape[1] != c.linguistic_vec_dim:
            raise ValueError(f"fusion expects ({c.acoustic_vec_dim}, {c.linguistic_vec_dim})-dim "
                             f"features, got ({fa.shape[1]}, {fl.shape[1]})")
        ga_pre, ca = layers.dense(fa, P["fu.gate_a.W"], P["fu.gate_a.b"])
        gl_pre, cl = layers.dense(fl, P["fu.gate_l.W"], P["fu.gate_l.b"])
        ga, gl = layers.sigmoid(ga_pre), layers.sigmoid(gl_pre)
        joint = np.concatenate([ga * fa, gl * fl], axis=1)
        logits, ch = layers.dense(joint, P["fu.out.W"], P["fu.out.b"])
        return logits, (fa, fl, ga, gl, ca, cl, ch)

    def fusion_backward(self, dlogits, cache, grads):
        fa, fl, ga, gl, ca, cl, ch = cache
        djoint, grads["fu.out.W"], grads["fu.out.b"] = layers.dense_backward(dlogits, ch)
        na = fa.shape[1]
        dga_out, dgl_out = djoint[:, :na], djoint[:, na:]
        dfa = dga_out * ga
        dfl = dgl_out * gl
        dpre_a = dga_out * fa * ga * (1 - ga)
        dpre_l = dgl_out * fl * gl * (1 - gl)
        dx, grads["fu.gate_a.W"], grads["fu.gate_a.b"] = layers.dense_backward(dpre_a, ca)
        dfa = dfa + dx
        dx, grads["fu.gate_l.W"], grads["fu.gate_l.b"] = layers.dense_backward(dpre_l, cl)
        dfl = dfl + dx
        return dfa, dfl

    # -- whole model ---------------------------------------------------------------------

    def forward(self, chunks=None, tokens=None, mode="eval"):
        """Logits of the configured modality plus everything backward needs."""
        P = self.params
        cache = {}
        if self.config.modality == "acoustic":
            fa, cache["ac"] = self.acoustic_features(chunks, mode)
            logits, cache["head"] = layers.dense(fa, P["ac.head.W"], P["ac.head.b"])
        elif self.config.modality == "linguistic":
            fl, cache["li"] = self.linguistic_features(tokens, mode)
            logits, cache["head"] = layers.dense(fl, P["li.head.W"], P["li.head.b"])
        else:
            fa, cache["ac"] = self.acoustic_features(chunks, mode)
            fl, cache["li"] = self.linguistic_features(tokens, mode)
            logits, cache["fuse"] = self.fusion_logits(fa, fl)
        return logits, cache

    def backward(self, dlogits, cache) -> dict:
        grads = {}
        if self.config.modality == "acoustic":
            df, grads["ac.head.W"], grads["ac.head.b"] = layers.dense_backward(dlogits, cache["head"])
            self.acoustic_features_backward(df, cache["ac"], grads)
        elif self.config.modality == "linguistic":
            df, grads["li.head.W"], grads["li.head.b"] = layers.dense_backward(dlogits, cache["head"])
            self.linguistic_features_backward(df, cache["li"], grads)
        else:
            dfa, dfl = self.fusion_backward(dlogits, cache["fuse"], grads)
            self.acoustic_features_backward(dfa, cache["ac"], grads)
            self.linguistic_features_backward(dfl, cache["li"], grads)
        for name, p in self.params.items():
            if name not in grads:
                grads[name] = np.zeros_like(p)
        return grads

    def loss_and_grads(self, labels, chunks=None, tokens=None, mode="train"):
        logits, cache = self.forward(chunks, tokens, mode)
        loss, dlogits = layers.softmax_cross_entropy(logits, labels)
        return loss, self.backward(dlogits, cache), logits

    def posteriors(self, chunks=None, tokens=None):
        logits, _ = self.forward(chunks, tokens, mode="eval")
        return layers.softmax(logits)


def build_model(config: ModelConfig, rng_seed=None) -> Model:
    """Fresh model with parameters drawn deterministically from ``rng_seed``."""
    c = config
    rng = np.random.default_rng(c.seed if rng_seed is None else rng_seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, layers.RunningStats] = {}
    K = c.num_classes
    if c.modality in ("acoustic", "fused"):
        if c.acoustic_variant == "cnn":
            params["ac.conv.W"] = rng.normal(0.0, 1.0 / np.sqrt(c.kernel_length),
                                             size=(c.num_filters, c.kernel_length))
        else:
            init = dsp_core.mel_spaced_init(c.num_filters, c.sample_rate, c.kernel_length)
            params["ac.theta1"] = np.array([p.theta1 for p in init])
            params["ac.theta2"] = np.array([p.theta2 for p in init])
        params["ac.bn0.gamma"] = np.ones(c.num_filters)
        params["ac.bn0.beta"] = np.zeros(c.num_filters)
        buffers["ac.bn0"] = layers.RunningStats(c.num_filters)
        frames = layers.conv_frames(c.chunk_samples, c.kernel_length, c.stride) // c.pool
        if frames < 1:
            raise ValueError("chunk too short for the configured kernel, stride and pool")
        if c.acoustic_variant == "sinc_lstm":
            lstm = layers.lstm_init(rng, c.num_filters, c.lstm_hidden)
            params["ac.lstm.W"], params["ac.lstm.b"] = lstm["W"], lstm["b"]
            z_dim = c.lstm_hidden
        else:
            n_in = c.num_filters * frames
            params["ac.d1.W"] = _glorot(rng, n_in, c.dnn_hidden)
            params["ac.d1.b"] = np.zeros(c.dnn_hidden)
            params["ac.bn1.gamma"] = np.ones(c.dnn_hidden)
            params["ac.bn1.beta"] = np.zeros(c.dnn_hidden)
            buffers["ac.bn1"] = layers.RunningStats(c.dnn_hidden)
            z_dim = c.dnn_hidden
        params["ac.proj.W"] = _glorot(rng, z_dim, c.acoustic_vec_dim)
        params["ac.proj.b"] = np.zeros(c.acoustic_vec_dim)
        if c.modality == "acoustic":
            params["ac.head.W"] = _glorot(rng, c.acoustic_vec_dim, K)
            params["ac.head.b"] = np.zeros(K)
    if c.modality in ("linguistic", "fused"):
        params["li.emb"] = rng.normal(0.0, 0.1, size=(c.vocab_size, c.embed_dim))
        lstm = layers.lstm_init(rng, c.embed_dim, c.text_hidden)
        params["li.lstm.W"], params["li.lstm.b"] = lstm["W"], lstm["b"]
        att = layers.attention_init(rng, c.text_hidden)
        params["li.att.Wq"], params["li.att.Wk"] = att["Wq"], att["Wk"]
        params["li.proj.W"] = _glorot(rng, c.text_hidden, c.linguistic_vec_dim)
        params["li.proj.b"] = np.zeros(c.linguistic_vec_dim)
        if c.modality == "linguistic":
            params["li.head.W"] = _glorot(rng, c.linguistic_vec_dim, K)
            params["li.head.b"] = np.zeros(K)
    if c.modality == "fused":
        A, L = c.acoustic_vec_dim, c.linguistic_vec_dim
        params["fu.gate_a.W"] = _glorot(rng, A, A)
        params["fu.gate_a.b"] = np.zeros(A)
        params["fu.gate_l.W"] = _glorot(rng, L, L)
        params["fu.gate_l.b"] = np.zeros(L)
        params["fu.out.W"] = _glorot(rng, A + L, K)
        params["fu.out.b"] = np.zeros(K)
    return Model(c, params, buffers)


def _head_posterior(model, features, prefix):
    logits, _ = layers.dense(features, model.params[f"{prefix}.head.W"], model.params[f"{prefix}.head.b"])
    return layers.softmax(logits)


def acoustic_forward(model: Model, chunk):
    """Penultimate acoustic vector and the acoustic posterior for one chunk.

    In a fused model the acoustic branch has no head of its own, so the
    posterior comes from the fusion head with the linguistic gate closed.
    """
    f, _ = model.acoustic_features(chunk, mode="eval")
    if "ac.head.W" in model.params:
        post = _head_posterior(model, f, "ac")
    else:
        logits, _ = model.fusion_logits(f, np.zeros((1, model.config.linguistic_vec_dim)))
        post = layers.softmax(logits)
    return f[0], post[0]


def linguistic_forward(model: Model, tokens):
    if len(tokens) == 0:
        raise ValueError("token sequence is empty")
    f, _ = model.linguistic_features([list(tokens)], mode="eval")
    if "li.head.W" in model.params:
        post = _head_posterior(model, f, "li")
    else:
        logits, _ = model.fusion_logits(np.zeros((1, model.config.acoustic_vec_dim)), f)
        post = layers.softmax(logits)
    return f[0], post[0]


def fuse(model: Model, acoustic_features, linguistic_features):
    """Gate each modality vector, concatenate, and classify."""
    logits, _ = model.fusion_logits(acoustic_features, linguistic_features)
    post = layers.softmax(logits)
    return post[0] if np.ndim(acoustic_features) == 1 else post


def predict(posterior) -> int:
    """Argmax; ties go to the lowest class index."""
    return int(np.argmax(np.asarray(posterior)))


# -- checkpoints ---------------------------------------------------------------------

def save_checkpoint(model: Model, path, extra: dict | None = None):
    """npz archive with every tensor plus a JSON manifest of names and shapes."""
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    for k, rs in model.buffers.items():
        arrays[f"buffer/{k}/mean"] = rs.mean
        arrays[f"buffer/{k}/var"] = rs.var
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
                    for k, v in arrays.items()],
    }
    if extra:
        manifest.update(extra)
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_manifest_from_checkpoint(path) -> dict:
    with np.load(path) as data:
        return json.loads(data["__manifest__"].tobytes().decode())


def load_checkpoint(path) -> Model:
    with np.load(path) as data:
        manifest = json.loads(data["__manifest__"].tobytes().decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        config = ModelConfig(**manifest["config"])
        params, buffers = {}, {}
        for entry in manifest["tensors"]:
            name = entry["name"]
            arr = data[name]
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"tensor {name} has shape {arr.shape}, manifest says {entry['shape']}")
            kind, rest = name.split("/", 1)
            if kind == "param":
                params[rest] = arr
            else:
                key, stat = rest.rsplit("/", 1)
                rs = buffers.setdefault(key, layers.RunningStats(arr.shape[0]))
                setattr(rs, stat, arr)
    return Model(config, params, buffers)
