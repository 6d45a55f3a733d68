"""Constrained attention network: LSTM encoder, per-aspect attention for the
sentiment task (ALSC) and the category-detection task (ACD), sparsity and
orthogonality penalties on attention rows, prediction heads, and per-sentence
loss assembly.

Shapes follow one hidden size d throughout: the encoder emits H of shape
(d, L) with one column per token, attention rows are length-L probability
vectors, and both task heads consume d-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import NON_OVERLAPPING, EncodedInstance

VARIANT_KINDS = ("lstm-avg", "at", "atae")
REG_KINDS = ("none", "Rs", "Ro")
GRAM_KINDS = ("KxK", "LxL")

# Named model configurations: (encoder/attention kind, multi-task,
# sentiment-attention penalty, category-attention penalty).
VARIANTS = {
    "LSTM": ("lstm-avg", False, "none", "none"),
    "AT-LSTM": ("at", False, "none", "none"),
    "ATAE-LSTM": ("atae", False, "none", "none"),
    "AT-CAN-Rs": ("at", False, "Rs", "none"),
    "AT-CAN-Ro": ("at", False, "Ro", "none"),
    "ATAE-CAN-Rs": ("atae", False, "Rs", "none"),
    "ATAE-CAN-Ro": ("atae", False, "Ro", "none"),
    "M-AT-LSTM": ("at", True, "none", "none"),
    "M-CAN-Rs": ("at", True, "Rs", "none"),
    "M-CAN-Ro": ("at", True, "Ro", "none"),
    "M-CAN-2Rs": ("at", True, "Rs", "Rs"),
    "M-CAN-2Ro": ("at", True, "Ro", "Ro"),
}


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    multi_task: bool
    reg_alsc: str
    reg_acd: str
    lam: float
    n_classes: int
    d: int
    vocab_size: int
    n_categories: int
    gram: str = "KxK"

    def __post_init__(self):
        if self.variant not in VARIANT_KINDS:
            raise ConfigError(f"unknown variant kind '{self.variant}'")
        if self.reg_alsc not in REG_KINDS or self.reg_acd not in REG_KINDS:
            raise ConfigError(f"regularizers must be one of {REG_KINDS}")
        if self.gram not in GRAM_KINDS:
            raise ConfigError(f"gram must be one of {GRAM_KINDS}")
        if self.reg_acd != "none" and not self.multi_task:
            raise ConfigError("a category-attention penalty requires multi_task")
        if self.variant == "atae" and self.multi_task:
            raise ConfigError("aspect-concat encoding re-encodes per aspect and "
                              "cannot share states with the detection task")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.n_classes not in (2, 3):
            raise ConfigError(f"n_classes must be 2 or 3, got {self.n_classes}")
        for name in ("d", "vocab_size", "n_categories"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


def config_for_variant(name: str, *, lam: float, n_classes: int, d: int,
                       vocab_size: int, n_categories: int,
                       gram: str = "KxK") -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant '{name}'; known: {', '.join(VARIANTS)}")
    kind, multi, reg_a, reg_b = VARIANTS[name]
    return ModelConfig(kind, multi, reg_a, reg_b, lam, n_classes, d,
                       vocab_size, n_categories, gram)


class ModelParams:
    """All trainable tensors, zero-initialized; see training for the init recipe."""

    def __init__(self, config: ModelConfig):
        d, c = config.d, config.n_classes
        in_dim = 2 * d if config.variant == "atae" else d

        def p(name, *shape):
            return ad.Parameter(name, np.zeros(shape))

        self.config = config
        self.word_emb = p("word_emb", config.vocab_size, d)
        self.aspect_emb = p("aspect_emb", config.n_categories, d)
        self.lstm = {}
        for gate in ("i", "f", "o", "c"):
            self.lstm[gate] = (p(f"lstm_W{gate}", d, in_dim),
                               p(f"lstm_U{gate}", d, d),
                               p(f"lstm_b{gate}", d))
        self.alsc_W1 = p("alsc_W1", d, d)
        self.alsc_W2 = p("alsc_W2", d, d)
        self.alsc_z = p("alsc_z", d)
        self.repr_W1 = p("repr_W1", d, d)
        self.repr_W2 = p("repr_W2", d, d)
        self.alsc_Wp = p("alsc_Wp", d, c)
        self.alsc_bp = p("alsc_bp", c)
        if config.multi_task:
            self.acd_W1 = p("acd_W1", d, d)
            self.acd_W2 = p("acd_W2", d, d)
            self.acd_z = p("acd_z", d)
            self.acd_Wp = p("acd_Wp", d, 1)
            self.acd_bp = ad.Parameter("acd_bp", np.zeros(()))

    def all_params(self) -> list[ad.Parameter]:
        out = [self.word_emb, self.aspect_emb]
        for gate in ("i", "f", "o", "c"):
            out.extend(self.lstm[gate])
        out.extend([self.alsc_W1, self.alsc_W2, self.alsc_z,
                    self.repr_W1, self.repr_W2, self.alsc_Wp, self.alsc_bp])
        if self.config.multi_task:
            out.extend([self.acd_W1, self.acd_W2, self.acd_z,
                        self.acd_Wp, self.acd_bp])
        return out

    def named(self) -> dict[str, ad.Parameter]:
        return {p.name: p for p in self.all_params()}


# ---------------------------------------------------------------------------
# attention penalties


def sparse_reg(alpha: ad.Tensor) -> ad.Tensor:
    """|sum(alpha^2) - 1|: zero on a one-hot row, maximal on a uniform row."""
    return ad.absval(ad.add_const(ad.reduce_sum(ad.square(alpha)), -1.0))


def orthogonal_reg(m: ad.Tensor, gram: str = "KxK") -> ad.Tensor:
    """Frobenius distance between the attention Gram matrix and identity.

    KxK compares rows pairwise (diagonal reduces to the sparsity penalty
    per row); LxL is the transposed, column-wise reading.
    """
    if m.data.ndim != 2:
        raise ad.ShapeError(f"orthogonal_reg: expected a matrix, got {m.data.shape}")
    if gram == "KxK":
        g = ad.matmul(m, ad.transpose(m))
    elif gram == "LxL":
        g = ad.matmul(ad.transpose(m), m)
    else:
        raise ConfigError(f"gram must be one of {GRAM_KINDS}")
    eye = ad.Tensor(np.eye(g.data.shape[0]))
    diff = ad.sub(g, eye)
    return ad.sqrt(ad.reduce_sum(ad.square(diff)))


def attention_regularizer(kind: str, rows: Sequence[ad.Tensor], overlap_flag: str,
                          gram: str = "KxK") -> ad.Tensor:
    """Dispatch the configured penalty over a sentence's attention rows.

    The orthogonality penalty applies only when the sentence is flagged
    non-overlapping and there are at least two rows; otherwise (including
    the single-aspect and overlapping cases) each row is penalized for
    sparsity independently.
    """
    if kind not in ("Rs", "Ro"):
        raise ConfigError(f"no penalty named '{kind}'")
    if not rows:
        raise ad.ShapeError("attention_regularizer: no rows")
    if kind == "Ro" and overlap_flag == NON_OVERLAPPING and len(rows) >= 2:
        return orthogonal_reg(ad.stack(rows, axis=0), gram)
    total = sparse_reg(rows[0])
    for row in rows[1:]:
        total = ad.add(total, sparse_reg(row))
    return total


def build_acd_matrix(mentioned: Sequence[ad.Tensor],
                     unmentioned: Sequence[ad.Tensor]) -> list[ad.Tensor]:
    """Rows for the detection-task penalty: mentioned rows plus the mean of
    the unmentioned rows pooled into one row (omitted when every category
    is mentioned)."""
    if not mentioned:
        raise ad.ShapeError("build_acd_matrix: need at least one mentioned row")
    rows = list(mentioned)
    if unmentioned:
        rows.append(ad.reduce_mean(ad.stack(unmentioned, axis=0), axis=0))
    return rows


# ---------------------------------------------------------------------------
# losses


def alsc_loss(prob_rows: Sequence[ad.Tensor], gold_classes: Sequence[int]) -> ad.Tensor:
    """Cross-entropy summed over the sentence's aspects."""
    if len(prob_rows) != len(gold_classes) or not prob_rows:
        raise ad.ShapeError("alsc_loss: need one gold class per probability row")
    total = None
    for probs, gold in zip(prob_rows, gold_classes):
        term = ad.scale(ad.log(ad.clamp_min(ad.elem(probs, gold), 1e-12)), -1.0)
        total = term if total is None else ad.add(total, term)
    return total


def acd_loss(scores: Sequence[ad.Tensor], labels: np.ndarray) -> ad.Tensor:
    """Binary cross-entropy summed over all predefined categories."""
    if len(scores) != len(labels) or not len(scores):
        raise ad.ShapeError("acd_loss: need one label per score")
    total = None
    for s, y in zip(scores, labels):
        if y not in (0.0, 1.0):
            raise ad.DomainError(f"acd_loss: labels must be binary, got {y}")
        prob = s if y == 1.0 else ad.add_const(ad.scale(s, -1.0), 1.0)
        term = ad.scale(ad.log(ad.clamp_min(prob, 1e-12)), -1.0)
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(la: ad.Tensor, lb: ad.Tensor | None, reg: ad.Tensor | None,
               lam: float, n_categories: int, multi_task: bool) -> ad.Tensor:
    """Combine task losses and the penalty: L_a + L_b / N + lambda * R."""
    loss = la
    if multi_task:
        if lb is None:
            raise ad.ShapeError("total_loss: multi-task needs the detection loss")
        loss = ad.add(loss, ad.scale(lb, 1.0 / n_categories))
    if reg is not None and lam > 0:
        loss = ad.add(loss, ad.scale(reg, lam))
    return loss


# ---------------------------------------------------------------------------
# the network


@dataclass
class ForwardOutput:
    """Detached per-sentence outputs for evaluation and reporting."""

    alsc_probs: np.ndarray      # K x c
    acd_scores: np.ndarray      # N, empty when single-task
    alsc_attention: np.ndarray  # K x L
    acd_attention: np.ndarray   # N x L, empty when single-task
    reg_value: float


@dataclass
class LossParts:
    """Scalar summaries of one sentence's loss terms."""

    total: float
    la: float
    lb: float
    reg: float
    reg_s: float
    reg_o: float


def full_mask(length: int) -> np.ndarray:
    return np.ones(length, dtype=bool)


class Network:
    """Forward passes and loss graphs over one parameter set."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        if params.config != config:
            raise ConfigError("parameters were built for a different configuration")
        self.config = config
        self.params = params

    # -- encoder

    def _lstm_step(self, x_l, h_prev, c_prev):
        p = self.params

        def gate(name):
            w, u, b = p.lstm[name]
            return ad.add(ad.add(ad.matvec(w, x_l), ad.matvec(u, h_prev)), b)

        i = ad.sigmoid(gate("i"))
        f = ad.sigmoid(gate("f"))
        o = ad.sigmoid(gate("o"))
        c_new = ad.add(ad.mul(f, c_prev), ad.mul(i, ad.tanh(gate("c"))))
        return ad.mul(o, ad.tanh(c_new)), c_new

    def encode(self, token_ids: np.ndarray, mask: np.ndarray,
               aspect: int | None = None, dropout_p: float = 0.0,
               training: bool = False, rng=None) -> ad.Tensor:
        """Run the recurrent encoder; returns hidden states H of shape (d, L).

        Padded positions still produce columns; they are excluded later by
        the attention mask. ``aspect`` selects the category embedding that
        aspect-concat encoding appends to every input column.
        """
        mask = np.asarray(mask, dtype=bool)
        if len(token_ids) == 0 or not mask.any():
            raise ad.ShapeError("encode: empty sentence")
        if (self.config.variant == "atae") != (aspect is not None):
            raise ConfigError("aspect must be supplied exactly for aspect-concat encoding")

        x = ad.embed(self.params.word_emb, token_ids)
        x = ad.dropout(x, dropout_p, training, rng)
        if aspect is not None:
            u = ad.take_row(self.params.aspect_emb, aspect)
            x = ad.concat_rows(x, ad.repeat_concat(u, len(token_ids)))

        d = self.config.d
        h = ad.Tensor(np.zeros(d))
        c = ad.Tensor(np.zeros(d))
        columns = []
        for l in range(len(token_ids)):
            h, c = self._lstm_step(ad.col(x, l), h, c)
            columns.append(h)
        hidden = ad.stack(columns, axis=1)
        return ad.dropout(hidden, dropout_p, training, rng)

    # -- attention

    def _scores(self, hidden, aspect_idx, w1, w2, z):
        u = ad.take_row(self.params.aspect_emb, aspect_idx)
        proj = ad.add(ad.matmul(w1, hidden),
                      ad.repeat_concat(ad.matvec(w2, u), hidden.data.shape[1]))
        return ad.vecmat(z, ad.tanh(proj))

    def alsc_attend(self, hidden: ad.Tensor, aspect_idx: int,
                    mask: np.ndarray) -> ad.Tensor:
        """Sentiment-task attention row for one mentioned category."""
        if self.config.variant == "lstm-avg":
            scores = ad.Tensor(np.zeros(hidden.data.shape[1]))
        else:
            scores = self._scores(hidden, aspect_idx,
                                  self.params.alsc_W1, self.params.alsc_W2,
                                  self.params.alsc_z)
        return ad.softmax(scores, mask)

    def acd_attend(self, hidden: ad.Tensor, category_idx: int,
                   mask: np.ndarray) -> ad.Tensor:
        """Detection-task attention row; separate parameters from alsc_attend."""
        scores = self._scores(hidden, category_idx,
                              self.params.acd_W1, self.params.acd_W2,
                              self.params.acd_z)
        return ad.softmax(scores, mask)

    # -- heads

    def represent(self, hidden: ad.Tensor, alpha: ad.Tensor,
                  h_last: ad.Tensor) -> ad.Tensor:
        """Blend the attention-weighted state with the final state."""
        weighted = ad.matvec(hidden, alpha)
        return ad.tanh(ad.add(ad.matvec(self.params.repr_W1, weighted),
                              ad.matvec(self.params.repr_W2, h_last)))

    def predict_polarity(self, rep: ad.Tensor) -> ad.Tensor:
        return ad.softmax(ad.add(ad.vecmat(rep, self.params.alsc_Wp),
                                 self.params.alsc_bp))

    def predict_category(self, hidden: ad.Tensor, beta: ad.Tensor) -> ad.Tensor:
        """Detection score from the weighted state alone (no final state, no
        squashing before the head)."""
        weighted = ad.matvec(hidden, beta)
        raw = ad.add(ad.dot(weighted, ad.col(self.params.acd_Wp, 0)),
                     self.params.acd_bp)
        return ad.sigmoid(raw)

    # -- per-sentence graphs

    def _forward(self, inst: EncodedInstance, token_ids, mask,
                 dropout_p=0.0, training=False, rng=None):
        mask = np.asarray(mask, dtype=bool)
        length = int(mask.sum())
        cfg = self.config

        alsc_rows, prob_rows = [], []
        shared_hidden = None
        if cfg.variant == "atae":
            for k in inst.mention_cats:
                hidden = self.encode(token_ids, mask, aspect=k,
                                     dropout_p=dropout_p, training=training, rng=rng)
                h_last = ad.col(hidden, length - 1)
                alpha = self.alsc_attend(hidden, k, mask)
                alsc_rows.append(alpha)
                prob_rows.append(self.predict_polarity(
                    self.represent(hidden, alpha, h_last)))
        else:
            shared_hidden = self.encode(token_ids, mask, dropout_p=dropout_p,
                                        training=training, rng=rng)
            h_last = ad.col(shared_hidden, length - 1)
            for k in inst.mention_cats:
                alpha = self.alsc_attend(shared_hidden, k, mask)
                alsc_rows.append(alpha)
                prob_rows.append(self.predict_polarity(
                    self.represent(shared_hidden, alpha, h_last)))

        acd_rows, score_rows = [], []
        if cfg.multi_task:
            for n in range(cfg.n_categories):
                beta = self.acd_attend(shared_hidden, n, mask)
                acd_rows.append(beta)
                score_rows.append(self.predict_category(shared_hidden, beta))
        return alsc_rows, prob_rows, acd_rows, score_rows

    def instance_loss(self, inst: EncodedInstance, token_ids=None, mask=None,
                      dropout_p: float = 0.0, training: bool = False,
                      rng=None) -> tuple[ad.Tensor, LossParts]:
        """Combined loss graph for one sentence, with scalar term breakdown."""
        if token_ids is None:
            token_ids = inst.token_ids
        if mask is None:
            mask = full_mask(inst.length)
        cfg = self.config
        alsc_rows, prob_rows, acd_rows, score_rows = self._forward(
            inst, token_ids, mask, dropout_p, training, rng)

        la = alsc_loss(prob_rows, inst.mention_pols)
        lb = acd_loss(score_rows, inst.acd_labels) if cfg.multi_task else None

        reg = None
        reg_s = reg_o = 0.0
        if cfg.reg_alsc != "none":
            term = attention_regularizer(cfg.reg_alsc, alsc_rows, inst.overlap, cfg.gram)
            reg = term
            if cfg.reg_alsc == "Rs":
                reg_s += term.item()
            else:
                reg_o += term.item()
        if cfg.reg_acd != "none":
            mentioned = [acd_rows[n] for n in sorted(set(inst.mention_cats))]
            unmentioned = [acd_rows[n] for n in range(cfg.n_categories)
                           if n not in set(inst.mention_cats)]
            g_rows = build_acd_matrix(mentioned, unmentioned)
            term = attention_regularizer(cfg.reg_acd, g_rows, inst.overlap, cfg.gram)
            reg = term if reg is None else ad.add(reg, term)
            if cfg.reg_acd == "Rs":
                reg_s += term.item()
            else:
                reg_o += term.item()

        loss = total_loss(la, lb, reg, cfg.lam, cfg.n_categories, cfg.multi_task)
        parts = LossParts(total=loss.item(), la=la.item(),
                          lb=lb.item() if lb is not None else 0.0,
                          reg=reg.item() if reg is not None else 0.0,
                          reg_s=reg_s, reg_o=reg_o)
        return loss, parts

    def predict(self, inst: EncodedInstance, token_ids=None,
                mask=None) -> ForwardOutput:
        """Evaluation-mode forward pass with detached outputs."""
        if token_ids is None:
            token_ids = inst.token_ids
        if mask is None:
            mask = full_mask(inst.length)
        with ad.no_grad():
            alsc_rows, prob_rows, acd_rows, score_rows = self._forward(
                inst, token_ids, mask)
            reg_value = 0.0
            if self.config.reg_alsc != "none":
                reg_value += attention_regularizer(
                    self.config.reg_alsc, alsc_rows, inst.overlap,
                    self.config.gram).item()
            if self.config.reg_acd != "none":
                mentioned = [acd_rows[n] for n in sorted(set(inst.mention_cats))]
                unmentioned = [acd_rows[n] for n in range(self.config.n_categories)
                               if n not in set(inst.mention_cats)]
                reg_value += attention_regularizer(
                    self.config.reg_acd, build_acd_matrix(mentioned, unmentioned),
                    inst.overlap, self.config.gram).item()

        mask = np.asarray(mask, dtype=bool)
        for row in alsc_rows + acd_rows:
            check_attention_row(row.data, mask)
        length = mask.shape[0]
        return ForwardOutput(
            alsc_probs=np.stack([p.data for p in prob_rows]),
            acd_scores=(np.array([s.item() for s in score_rows])
                        if score_rows else np.zeros(0)),
            alsc_attention=np.stack([a.data for a in alsc_rows]),
            acd_attention=(np.stack([b.data for b in acd_rows])
                           if acd_rows else np.zeros((0, length))),
            reg_value=reg_value)


def check_attention_row(row: np.ndarray, mask: np.ndarray):
    """Assert a row is a probability distribution with no mass on padding."""
    if abs(row.sum() - 1.0) > 1e-6:
        raise ad.DomainError(f"attention row sums to {row.sum()}")
    if np.any(row < 0):
        raise ad.DomainError("attention row has negative mass")
    if np.any(row[~np.asarray(mask, dtype=bool)] != 0.0):
        raise ad.DomainError("attention mass on a padded position")


# ---------------------------------------------------------------------------
# parameter serialization


_PARAMS_HEADER = "canet-params v1"


def _config_line(config: ModelConfig) -> str:
    return ("config "
            f"variant={config.variant} multi_task={int(config.multi_task)} "
            f"reg_alsc={config.reg_alsc} reg_acd={config.reg_acd} "
            f"lam={config.lam!r} n_classes={config.n_classes} d={config.d} "
            f"vocab_size={config.vocab_size} n_categories={config.n_categories} "
            f"gram={config.gram}")


def _parse_config_line(line: str) -> ModelConfig:
    fields = dict(tok.split("=", 1) for tok in line.split()[1:])
    return ModelConfig(
        variant=fields["variant"], multi_task=bool(int(fields["multi_task"])),
        reg_alsc=fields["reg_alsc"], reg_acd=fields["reg_acd"],
        lam=float(fields["lam"]), n_classes=int(fields["n_classes"]),
        d=int(fields["d"]), vocab_size=int(fields["vocab_size"]),
        n_categories=int(fields["n_categories"]), gram=fields["gram"])


def _format_array(a: np.ndarray) -> list[str]:
    flat = a.reshape(-1) if a.ndim else a.reshape(1)
    return [" ".join("%.17g" % v for v in flat)]


def save_params(params: ModelParams) -> str:
    """Textual dump of all named tensors; byte-stable for equal parameters."""
    lines = [_PARAMS_HEADER, _config_line(params.config)]
    for p in params.all_params():
        dims = " ".join(str(s) for s in p.data.shape)
        lines.append(f"param {p.name} {p.data.ndim}" + (f" {dims}" if dims else ""))
        lines.extend(_format_array(p.data))
    return "\n".join(lines) + "\n"


def load_params(text: str) -> tuple[ModelConfig, ModelParams]:
    lines = text.splitlines()
    if not lines or lines[0] != _PARAMS_HEADER:
        raise ConfigError("not a parameter dump (bad header)")
    if len(lines) < 2 or not lines[1].startswith("config "):
        raise ConfigError("parameter dump missing its config line")
    config = _parse_config_line(lines[1])
    params = ModelParams(config)
    named = params.named()

    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "param" or len(head) < 3:
            raise ConfigError(f"parameter dump line {i + 1}: expected a param header")
        name, ndim = head[1], int(head[2])
        shape = tuple(int(s) for s in head[3:3 + ndim])
        if name not in named:
            raise ConfigError(f"unknown parameter '{name}' in dump")
        target = named[name]
        if shape != target.data.shape:
            raise ConfigError(f"parameter '{name}' shape {shape} != "
                              f"expected {target.data.shape}")
        values = np.array([float(v) for v in lines[i + 1].split()])
        if values.size != target.data.size:
            raise ConfigError(f"parameter '{name}': wrong value count")
        target.data = values.reshape(target.data.shape)
        i += 2

    return config, params
