"""Concept-vector generator: n parallel single-head attention blocks over a
star neighborhood plus a shared two-layer output MLP.

Given a center embedding C (1 x dim_i), neighbor embeddings N (m x dim_i) and
edge embeddings E (m x dim_i), block n computes

    Q_n = C W^Q_n
    K_n = N W^K_n + E          (edges enter the keys untransformed)
    V_n = N W^V_n              (edges never enter the values)
    O_n = softmax(Q_n K_n^T / sqrt(dim_i)) V_n W^O_n

and the shared MLP maps each block output to the LM input space:

    row_n = LeakyReLU(O_n W^P_1) W^P_2

No bias vectors anywhere; W^P_1/W^P_2 are shared across blocks. The output is
an (n x dim_o) matrix of concept vectors.

Params file format (`CFP1`): magic, header (dim_i, dim_o, n, hidden as u32,
slope as f32), then tensors in declared order (per block: W^Q, W^K, W^V, W^O;
then W^P_1, W^P_2), float32 little-endian. The SHA-256 of the file bytes is
the params fingerprint used in provenance.
"""

import hashlib
import io
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

MAGIC = b"CFP1"

# paper-scale defaults; the toy pipeline overrides dim_i/dim_o with the LM width
DEFAULT_DIM_I = 768
DEFAULT_HIDDEN = 1228
DEFAULT_SLOPE = 0.01
BLOCK_SWEEP = (1, 2, 3, 4, 5, 10, 15, 20)


class EmptyNeighborhoodError(ValueError):
    """Raised for m=0 inputs; callers map this to a no-injection fallback."""


@dataclass
class EmbeddedSubgraph:
    """C: (1, dim_i) center; N, E: (m, dim_i) neighbors and edges."""
    C: torch.Tensor
    N: torch.Tensor
    E: torch.Tensor
    qids: tuple = ()

    def __post_init__(self):
        if self.C.dim() == 1:
            self.C = self.C.unsqueeze(0)
        if self.N.shape != self.E.shape:
            raise ValueError("N and E must have identical shapes")
        if self.C.shape[1] != self.N.shape[1]:
            raise ValueError("C, N, E must share dim_i")
        for t in (self.C, self.N, self.E):
            if not torch.isfinite(t).all():
                raise ValueError("subgraph embeddings must be finite")

    @property
    def m(self):
        return self.N.shape[0]


def _uniform_init(gen, fan_in, fan_out, rows, cols, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(rows, cols, generator=gen, dtype=dtype) * 2 - 1) * bound


class ConceptEncoder(torch.nn.Module):
    """n parallel attention blocks with a shared output MLP."""

    def __init__(self, dim_i=DEFAULT_DIM_I, dim_o=DEFAULT_DIM_I,
                 n_vectors=1, hidden=DEFAULT_HIDDEN, slope=DEFAULT_SLOPE,
                 seed=0, dtype=torch.float32):
        super().__init__()
        if min(dim_i, dim_o, n_vectors, hidden) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not (0.0 < slope < 1.0):
            raise ValueError("leaky slope must lie in (0, 1)")
        self.dim_i, self.dim_o = dim_i, dim_o
        self.n_vectors, self.hidden, self.slope = n_vectors, hidden, slope
        gen = torch.Generator().manual_seed(seed)

        def block_mat():
            return _uniform_init(gen, dim_i, dim_i, dim_i, dim_i, dtype)

        # stacked (n, dim_i, dim_i); block order matches the serialized order
        self.wq = torch.nn.Parameter(torch.stack([block_mat() for _ in range(n_vectors)]))
        self.wk = torch.nn.Parameter(torch.stack([block_mat() for _ in range(n_vectors)]))
        self.wv = torch.nn.Parameter(torch.stack([block_mat() for _ in range(n_vectors)]))
        self.wo = torch.nn.Parameter(torch.stack([block_mat() for _ in range(n_vectors)]))
        self.wp1 = torch.nn.Parameter(_uniform_init(gen, dim_i, hidden, dim_i, hidden, dtype))
        self.wp2 = torch.nn.Parameter(_uniform_init(gen, hidden, dim_o, hidden, dim_o, dtype))

    def forward(self, g, return_attention=False):
        """Map an embedded subgraph to an (n, dim_o) concept-vector matrix."""
        if g.m == 0:
            raise EmptyNeighborhoodError("cannot encode an empty neighborhood")
        if g.C.shape[1] != self.dim_i:
            raise ValueError(f"subgraph dim {g.C.shape[1]} != params dim_i {self.dim_i}")
        C = g.C.to(self.wq.dtype)
        N = g.N.to(self.wq.dtype)
        E = g.E.to(self.wq.dtype)
        q = C @ self.wq                      # (n, 1, dim_i)
        k = N @ self.wk + E                  # (n, m, dim_i)
        v = N @ self.wv                      # (n, m, dim_i)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.dim_i)   # (n, 1, m)
        attn = F.softmax(scores, dim=-1)
        o = (attn @ v) @ self.wo             # (n, 1, dim_i)
        o = o.squeeze(1)                     # (n, dim_i)
        out = F.leaky_relu(o @ self.wp1, negative_slope=self.slope) @ self.wp2
        if return_attention:
            return out, attn.squeeze(1)
        return out

    def attention_report(self, g):
        """(n, m) attention weights paired with the neighbor qids."""
        with torch.no_grad():
            _, attn = self.forward(g, return_attention=True)
        return attn, g.qids

    def gradients(self, g, upstream):
        """Exact reverse-mode gradients of <forward(g), upstream> for every
        weight matrix and for C, N, E."""
        C = g.C.detach().to(self.wq.dtype).requires_grad_(True)
        N = g.N.detach().to(self.wq.dtype).requires_grad_(True)
        E = g.E.detach().to(self.wq.dtype).requires_grad_(True)
        out = self.forward(EmbeddedSubgraph(C=C, N=N, E=E, qids=g.qids))
        loss = (out * upstream.to(out.dtype)).sum()
        names = ["wq", "wk", "wv", "wo", "wp1", "wp2"]
        params = [getattr(self, n) for n in names]
        grads = torch.autograd.grad(loss, params + [C, N, E], allow_unused=True)
        result = {}
        for name, grad, param in zip(names + ["C", "N", "E"], grads,
                                     params + [C, N, E]):
            result[name] = grad if grad is not None else torch.zeros_like(param)
        return result

    # ---- serialization -----------------------------------------------------

    def serialize(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<4If", self.dim_i, self.dim_o, self.n_vectors,
                              self.hidden, self.slope))
        for n in range(self.n_vectors):
            for stack in (self.wq, self.wk, self.wv, self.wo):
                buf.write(stack[n].detach().cpu().to(torch.float32)
                          .numpy().astype("<f4").tobytes())
        for mat in (self.wp1, self.wp2):
            buf.write(mat.detach().cpu().to(torch.float32)
                      .numpy().astype("<f4").tobytes())
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
        dim_i, dim_o, n, hidden, slope = struct.unpack_from("<4If", blob, 4)
        enc = cls(dim_i=dim_i, dim_o=dim_o, n_vectors=n, hidden=hidden,
                  slope=float(slope))
        off = 4 + struct.calcsize("<4If")

        def read_mat(rows, cols):
            nonlocal off
            count = rows * cols
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += 4 * count
            return torch.from_numpy(arr.copy().reshape(rows, cols))

        with torch.no_grad():
            for i in range(n):
                for stack in (enc.wq, enc.wk, enc.wv, enc.wo):
                    stack[i] = read_mat(dim_i, dim_i)
            enc.wp1.copy_(read_mat(dim_i, hidden))
            enc.wp2.copy_(read_mat(hidden, dim_o))
        if off != len(blob):
            raise ValueError(f"{path}: trailing bytes in params file")
        return enc

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def init_params(dim_i=DEFAULT_DIM_I, dim_o=DEFAULT_DIM_I, n_vectors=1,
                hidden=DEFAULT_HIDDEN, slope=DEFAULT_SLOPE, seed=0):
    """Seeded Glorot-uniform initialization of a ConceptEncoder."""
    return ConceptEncoder(dim_i=dim_i, dim_o=dim_o, n_vectors=n_vectors,
                          hidden=hidden, slope=slope, seed=seed)


def embed_subgraph(graph, model, tok, top_m=None):
    """Embed a star graph's center, neighbors and edges with the LM's
    label-embedding primitive (mean last hidden state)."""
    from conceptinject.graph_store import top_neighbors

    if graph.degree == 0:
        raise EmptyNeighborhoodError(
            f"entity {graph.center.qid} has no neighbors")
    pairs = top_neighbors(graph, top_m) if top_m else list(graph.neighbors)
    C = model.embed_label(tok, graph.center.label)
    N = torch.stack([model.embed_label(tok, ent.label) for _, ent in pairs])
    E = torch.stack([model.embed_label(tok, pred.label) for pred, _ in pairs])
    return EmbeddedSubgraph(C=C, N=N, E=E,
                            qids=tuple(ent.qid for _, ent in pairs))
