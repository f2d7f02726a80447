"""Small deterministic decoder-only language model.

Two forward paths share one body: a token-id path (embedding lookup first)
and an embedding-sequence path that accepts injected soft vectors. Weights
can be frozen and fingerprinted; gradients still flow through the frozen
network to the input embeddings.

Params file format (`TLM1`): magic, little-endian config header
(vocab, dim, layers, heads, context, ffn as u32), then named tensors
(u16 name length, UTF-8 name, u8 rank, u32 dims, float32 data). The model
fingerprint is the SHA-256 of the file bytes.
"""

import hashlib
import io
import math
import struct
import zlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from dataclasses import dataclass

MAGIC = b"TLM1"


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 512
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 128
    ffn_dim: int = 256

    def validate(self):
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")


class Block(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.dim // cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.fc1 = nn.Linear(cfg.dim, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, cfg.dim)

    def forward(self, x, mask):
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(mask[:t, :t] == 0, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(b, t, d)
        x = x + self.proj(y)
        h = self.ln2(x)
        x = x + self.fc2(F.gelu(self.fc1(h)))
        return x


class TinyLM(nn.Module):
    """Pre-norm decoder-only transformer with learned positional embeddings."""

    def __init__(self, cfg, seed=0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.wte = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.wpe = nn.Embedding(cfg.context, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        self.register_buffer(
            "causal_mask", torch.tril(torch.ones(cfg.context, cfg.context)),
            persistent=False,
        )
        # seeded re-init so construction is deterministic regardless of
        # global RNG state
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                nn.init.normal_(p, mean=0.0, std=0.02, generator=gen)
            elif name.endswith("weight"):  # layer-norm scales
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)
        # tie the output head to the input embeddings: a vector injected into
        # the input stream then scores highest for the tokens whose embedding
        # rows compose it, which is what makes soft-vector prompts decodable
        self.head.weight = self.wte.weight

    # ---- forward paths -----------------------------------------------------

    def forward_embeddings(self, vectors):
        """Forward an explicit embedding sequence (T, dim) or batch (B, T, dim).

        Positional embeddings are assigned by final sequence index, so
        injected soft vectors consume ordinary positions. Returns
        (logits, last_hidden) with the same leading shape as the input.
        """
        squeeze = vectors.dim() == 2
        x = vectors.unsqueeze(0) if squeeze else vectors
        b, t, d = x.shape
        if d != self.cfg.dim:
            raise ValueError(f"vector width {d} != model dim {self.cfg.dim}")
        if t > self.cfg.context:
            raise ValueError(
                f"sequence length {t} exceeds context {self.cfg.context}")
        pos = torch.arange(t, device=x.device)
        x = x + self.wpe(pos)[None, :, :]
        for block in self.blocks:
            x = block(x, self.causal_mask)
        hidden = self.ln_f(x)
        logits = self.head(hidden)
        if squeeze:
            return logits.squeeze(0), hidden.squeeze(0)
        return logits, hidden

    def forward_tokens(self, ids):
        """Forward token ids (list or 1-D/2-D tensor); identical computation
        to forward_embeddings after the embedding lookup."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        return self.forward_embeddings(self.wte(ids))

    def embedding_rows(self, ids):
        ids = torch.as_tensor(ids, dtype=torch.long)
        return self.wte(ids).detach()

    def embed_label(self, tok, label):
        """Mean of the last hidden states over the label's tokens."""
        if not label:
            raise ValueError("label must be non-empty")
        ids = tok.tokenize(label)
        if not ids:
            raise ValueError(f"label {label!r} tokenizes to zero ids")
        with torch.no_grad():
            _, hidden = self.forward_tokens(ids)
        return hidden.mean(dim=0)

    # ---- freezing and fingerprinting --------------------------------------

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def serialize(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        c = self.cfg
        buf.write(struct.pack("<6I", c.vocab_size, c.dim, c.n_layers,
                              c.n_heads, c.context, c.ffn_dim))
        for name, tensor in self.state_dict().items():
            data = tensor.detach().cpu().to(torch.float32).numpy()
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                buf.write(struct.pack("<I", d))
            buf.write(data.astype("<f4").tobytes())
        return buf.getvalue()

    def save(self, path):
        blob = self.serialize()
        with open(path, "wb") as fh:
            fh.write(blob)
        return hashlib.sha256(blob).hexdigest()

    def fingerprint(self):
        return hashlib.sha256(self.serialize()).hexdigest()

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC.decode()} params file")
        vals = struct.unpack_from("<6I", blob, 4)
        cfg = LMConfig(*vals)
        off = 4 + 24
        state = {}
        while off < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            state[name] = torch.from_numpy(arr.copy())
        model = cls(cfg)
        model.load_state_dict(state)
        return model


def pack_training_windows(tok, bites, context):
    """Pack whole sentences into context-length token windows, grouped by
    subject with each fact's different phrasings adjacent.

    A fact stated once in a window recurs moments later in another phrasing,
    so next-token loss rewards matching the earlier occurrence and copying
    its object — the in-context copying skill that context-borne facts
    (textified triples or injected vectors) rely on at eval time. Sentences
    trained in isolation never create that incentive.
    """
    order = sorted(
        range(len(bites)),
        key=lambda i: (bites[i].subject.qid, bites[i].predicate.pid,
                       len(bites[i].text), bites[i].text))
    windows = []
    current = []
    for i in order:
        plain = tok.tokenize(bites[i].text)
        if len(plain) > context:
            raise ValueError(
                f"sentence exceeds the context length {context}: "
                f"{bites[i].text[:60]!r}...")
        joined = tok.tokenize(" " + bites[i].text)
        if current and len(current) + len(joined) <= context:
            current.extend(joined)
        else:
            if current:
                windows.append(current)
            current = list(plain)
    if current:
        windows.append(current)
    return windows


def _subject_end_index(offsets, span, shift=0):
    """Index (exclusive) of the last token overlapping the subject span."""
    last = None
    for i, (_tid, start, end) in enumerate(offsets):
        if start < span.end + shift and end > span.start + shift:
            last = i
    if last is None:
        raise ValueError("subject span not covered by tokenization")
    return last + 1


def fit_label_codes(model, tok, labels):
    """Per-label soft-vector codes: the least-squares projection of each
    label's leading-token input-embedding row onto the span of the labels'
    contextual embeddings (mean last hidden state, see embed_label).

    Leading-token rows are what the output head scores directly, so they are
    the most decodable code contents — but a concept encoder built on
    contextual label embeddings can only emit linear images of those
    embeddings mixed convexly. Projecting the rows onto that span keeps the
    codes as decodable as possible while staying exactly representable by
    such an encoder. Returns {label: detached code vector}.
    """
    labels = sorted(labels)
    with torch.no_grad():
        x = torch.stack([model.embed_label(tok, lab) for lab in labels])
        y = torch.stack([model.wte.weight[tok.tokenize(lab)[0]]
                         for lab in labels])
        sol = torch.linalg.lstsq(x, y).solution
        g = x @ sol
    return {lab: g[i] for i, lab in enumerate(labels)}


def synth_slot_sequences(tok, bites, rng, slot_frac=0.5, max_slots=8,
                         min_cands=3, max_cands=20):
    """Synthetic standalone sequences that teach the model to read soft
    "slot" vectors injected after a subject.

    Each sequence reuses a real sentence as a template but replaces its
    object with a freshly sampled one, and splices k slots in right after
    the subject tokens — the exact shape an injected prompt has at eval
    time. The candidate set is a list of (predicate, object) pairs: the
    template's own predicate paired with the new object, plus distractor
    predicates paired with random objects. Each pair lands in slot
    crc32(pid) % k, and a slot's content is the mean leading-token
    embedding of its member objects (empty slots fall back to the mean
    over all candidates; the caller materializes vectors against current
    weights).

    Keying the slot assignment on the predicate lets the model narrow the
    candidates: the sentence states the predicate, so attending to the one
    matching slot exposes only that slot's members instead of the whole
    set. The assignment rule is a fixed hash, shared with the reference
    concept codes the encoder is warm-started on.

    Because the object and candidate pairs are resampled on every call
    (one call per epoch), these sequences cannot be memorized: the only
    way to reduce their next-token loss is to read the slots. Without that
    learned interface the frozen model has no decodable channel for soft
    content and injection cannot beat the no-context baseline at eval time.

    Returns (windows, specs): windows are lists of ("tok", token_id) /
    ("slot", spec_id) items; specs[spec_id] is a tuple of object labels.
    """
    pool = sorted({b.object.label for b in bites})
    pids = sorted({b.predicate.pid for b in bites})
    specs, spec_ids = [], {}

    def spec_of(chunk):
        key = tuple(chunk)
        if key not in spec_ids:
            spec_ids[key] = len(specs)
            specs.append(key)
        return spec_ids[key]

    order = sorted(range(len(bites)),
                   key=lambda i: (bites[i].subject.qid,
                                  bites[i].predicate.pid, bites[i].text))
    windows = []
    for i in order:
        if float(rng.random()) >= slot_frac:
            continue
        bite = bites[i]
        others = [p for p in pids if p != bite.predicate.pid]
        d = min(int(rng.integers(min_cands, max_cands + 1)),
                len(others) + 1, len(pool))
        obj = pool[int(rng.integers(len(pool)))]
        osel = rng.choice(len(others), size=d - 1, replace=False)
        lsel = rng.choice(len(pool), size=d - 1, replace=False)
        pairs = [(bite.predicate.pid, obj)] + [
            (others[j], pool[l]) for j, l in zip(osel, lsel)]
        k = int(rng.integers(1, max_slots + 1))
        buckets = [[] for _ in range(k)]
        for pid, lab in pairs:
            buckets[zlib.crc32(pid.encode("utf-8")) % k].append(lab)
        everything = [lab for _, lab in pairs]
        slots = [spec_of(b if b else everything) for b in buckets]
        text = (bite.text[:bite.object_span.start] + obj
                + bite.text[bite.object_span.end:])
        # the subject span shifts if the object precedes it in the sentence
        shift = ((len(obj) - (bite.object_span.end - bite.object_span.start))
                 if bite.object_span.start < bite.subject_span.start else 0)
        offsets = tok.tokenize_with_offsets(text)
        toks = [("tok", tid) for tid, _, _ in offsets]
        cut = _subject_end_index(offsets, bite.subject_span, shift=shift)
        windows.append(toks[:cut] + [("slot", s) for s in slots] + toks[cut:])
    return windows, specs


def pretrain_base_lm(cfg, tok, train_bites, seed, epochs, lr=3e-3,
                     batch_size=64, log_every=0, slot_frac=1.0, max_slots=8,
                     slot_weight=6.0, slot_warmup=16, slot_polish=16):
    """Next-token cross-entropy pretraining over the train-split sentences,
    packed into multi-sentence windows (see pack_training_windows), mixed
    with per-epoch synthetic sequences carrying soft label-embedding slots
    after the subject (see synth_slot_sequences) so the model learns to read
    injected vectors.

    The caller must pass bites for TRAIN-split subjects only, so held-out
    facts never enter the pretraining stream (synthetic sequences draw only
    on train-split templates and the object pool they expose). Returns
    (model, stats) with the model left unfrozen; callers freeze and
    fingerprint it.
    """
    torch.manual_seed(seed)
    model = TinyLM(cfg, seed=seed)
    base_windows = [[("tok", tid) for tid in win] for win in
                    pack_training_windows(tok, train_bites, cfg.context)]
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed)
    pool = sorted({b.object.label for b in train_bites})

    def slot_vectors(specs):
        """Slot contents under current weights: per spec group, the mean
        per-label code (see fit_label_codes), held constant (detached)
        within the epoch. The codes track the labels' leading-token
        embedding rows, so a slot is a "blurred token" the existing token
        circuits can decode, rather than an arbitrary vector the model
        learns to ignore."""
        if not specs:
            return None
        codes = fit_label_codes(model, tok, pool)
        return torch.stack([torch.stack([codes[lab] for lab in chunk]).mean(0)
                            for chunk in specs])

    def epoch_loss(train, warmup=False):
        if train and slot_frac > 0:
            # slot_frac > 1 draws multiple independent synthetic passes per
            # epoch, raising the sample ratio against the packed windows
            synth, specs = [], []
            remaining = slot_frac
            while remaining > 0:
                s_i, specs_i = synth_slot_sequences(
                    tok, train_bites, rng, slot_frac=min(remaining, 1.0),
                    max_slots=max_slots)
                offset = len(specs)
                synth.extend([(k, v + offset) if k == "slot" else (k, v)
                              for k, v in win] for win in s_i)
                specs.extend(specs_i)
                remaining -= 1.0
        else:
            synth, specs = [], []
        # during warmup epochs only the synthetic slot sequences are seen:
        # the slot-reading circuit must form before plain-text training
        # offers memorization as a competing (and then entrenched) solution
        base = [] if warmup else base_windows
        windows = base + synth
        vecs = slot_vectors(specs)
        # batch long packed windows and short synthetic sequences separately
        # to avoid padding the latter to the former's length
        parts = [np.arange(len(base)), len(base) + np.arange(len(synth))]
        batches = []
        for part in parts:
            order = rng.permutation(part) if train else part
            batches.extend(order[s:s + batch_size]
                           for s in range(0, len(order), batch_size))
        if train and len(batches) > 1:
            batches = [batches[i] for i in rng.permutation(len(batches))]
        total, count = 0.0, 0
        for idx in batches:
            batch = [windows[i] for i in idx]
            t = max(len(s) for s in batch)
            ids = torch.zeros(len(batch), t, dtype=torch.long)
            tok_mask = torch.zeros(len(batch), t, dtype=torch.bool)
            slot_mask = torch.zeros(len(batch), t, dtype=torch.bool)
            for j, s in enumerate(batch):
                for p, (kind, val) in enumerate(s):
                    ids[j, p] = val
                    (tok_mask if kind == "tok" else slot_mask)[j, p] = True
            x = torch.zeros(len(batch), t, cfg.dim)
            x[tok_mask] = model.wte(ids[tok_mask])
            if slot_mask.any():
                x[slot_mask] = vecs[ids[slot_mask]]
            logits, _ = model.forward_embeddings(x)
            # supervise positions whose *next* item is a real token
            lmask = (tok_mask | slot_mask)[:, :-1] & tok_mask[:, 1:]
            loss = F.cross_entropy(
                logits[:, :-1].reshape(-1, cfg.vocab_size)[lmask.reshape(-1)],
                ids[:, 1:].reshape(-1)[lmask.reshape(-1)],
            )
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"pretraining diverged (non-finite loss) on batch ids {idx.tolist()}")
            if train:
                opt.zero_grad()
                # synthetic slot batches carry far fewer tokens than packed
                # windows; upweight them so the slot-reading skill is not
                # swamped by the plain-text gradient
                synth_batch = len(idx) and idx[0] >= len(base)
                (loss * slot_weight if synth_batch else loss).backward()
                opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        return total / count

    with torch.no_grad():
        initial = epoch_loss(train=False)
    history = []
    warm = slot_warmup if slot_frac > 0 else 0
    for ep in range(warm):
        history.append(epoch_loss(train=True, warmup=True))
        if log_every and (ep + 1) % log_every == 0:
            print(f"pretrain warmup {ep + 1}/{warm}: loss {history[-1]:.4f}")
    for ep in range(epochs):
        history.append(epoch_loss(train=True))
        if log_every and (ep + 1) % log_every == 0:
            print(f"pretrain epoch {ep + 1}/{epochs}: loss {history[-1]:.4f}")
    # plain-text epochs reshape the embedding geometry under the reading
    # circuit; a final synthetic-only phase re-consolidates it in place
    polish = slot_polish if slot_frac > 0 else 0
    for ep in range(polish):
        history.append(epoch_loss(train=True, warmup=True))
        if log_every and (ep + 1) % log_every == 0:
            print(f"pretrain polish {ep + 1}/{polish}: loss {history[-1]:.4f}")
    stats = {
        "initial_loss": initial,
        "final_loss": history[-1] if history else initial,
        "epoch_losses": history,
        "seed": seed,
        "epochs": epochs,
        "slot_frac": slot_frac,
        "max_slots": max_slots,
        "slot_weight": slot_weight,
        "slot_warmup": warm,
        "slot_polish": polish,
    }
    return model, stats
