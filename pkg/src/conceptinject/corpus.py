"""Deterministic closed-world corpus generation.

A toy world is a set of subject entities, a disjoint pool of value entities,
and (subject, predicate, object) facts whose objects are sampled uniformly
from the value pool, so no surface statistic predicts the object. Facts are
rendered as stage-1 (bare triple) and stage-2 (noisier contextual) sentences
in the Bite record format, with exact gold character spans.
"""

import json
import random
from dataclasses import dataclass

from conceptinject.graph_store import EntityRef, PredicateRef, make_star_graph

# consonant x vowel grid plus clusters: a wide inventory keeps entity-label
# first syllables diverse, so no small set of first tokens covers the pool
SYLLABLES = [c + v for c in "bcdfghjklmnprstvwxyz" for v in "aeiou"] + [
    "bra", "cle", "dri", "flo", "gre", "kra", "ple", "sti", "tro", "vle",
    "zin", "mor", "tak", "rup", "sel", "nod", "gab", "wix", "fer", "hul",
]

# (predicate label, sentence phrase) pairs; labels feed graph textification,
# phrases feed rendered sentences.
PREDICATE_TABLE = [
    ("origin realm", "hails from"),
    ("chosen tool", "wields"),
    ("guild", "belongs to"),
    ("rival", "competes with"),
    ("mentor", "studied under"),
    ("signature dish", "always cooks"),
    ("home port", "sails from"),
    ("totem animal", "is guarded by"),
    ("favored gem", "treasures"),
    ("banner color", "marches under"),
    ("ancient oath", "swore the oath of"),
    ("trade good", "trades in"),
    ("mountain seat", "rules from"),
    ("secret patron", "is funded by"),
    ("battle cry", "shouts"),
    ("house sigil", "bears the sigil of"),
    ("forbidden text", "guards the text of"),
    ("river crossing", "watches over"),
    ("festival", "presides over"),
    ("heirloom", "inherited"),
    ("debt holder", "owes tribute to"),
    ("star sign", "was born under"),
    ("craft", "practices"),
    ("archive", "curates"),
    ("steed", "rides"),
    ("melody", "hums"),
    ("elixir", "brews"),
    ("cipher", "writes in"),
    ("lantern", "carries"),
    ("compass", "navigates by"),
    ("ledger", "keeps"),
    ("garden", "tends"),
]

STAGE2_PREFIXES = [
    "In the old records", "According to the chronicle", "As many travelers recall",
    "By most accounts", "In the southern annals", "As the ledger states",
    "Among the guild papers", "In whispered tales", "Per the harbor registry",
    "As scribes noted long ago",
]
STAGE2_FILLERS = [
    "reportedly", "famously", "quietly", "apparently", "still", "proudly",
    "allegedly", "openly", "supposedly", "notably",
]
STAGE2_SUFFIXES = [
    "", " to this day", " without fail", " as everyone knows", " in every season",
    " despite the rumors", " year after year",
]

MAX_BITE_CHARS = 512


class WorldConfigError(ValueError):
    """Raised when world parameters are infeasible or out of range."""


@dataclass(frozen=True)
class Span:
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span [{self.start}, {self.end})")


@dataclass(frozen=True)
class Bite:
    """One training/eval record: a sentence with gold subject/object spans."""
    text: str
    subject: EntityRef
    subject_span: Span
    object: EntityRef
    object_span: Span
    predicate: PredicateRef

    def __post_init__(self):
        if len(self.text) > MAX_BITE_CHARS:
            raise ValueError(f"bite text exceeds {MAX_BITE_CHARS} characters")
        if self.subject_span.end > len(self.text) or self.object_span.end > len(self.text):
            raise ValueError("span exceeds text length")
        if self.text[self.subject_span.start:self.subject_span.end] != self.subject.label:
            raise ValueError("subject span does not match subject label")
        if self.text[self.object_span.start:self.object_span.end] != self.object.label:
            raise ValueError("object span does not match object label")
        if self.subject_span.end >= self.object_span.start:
            raise ValueError("subject span must end before object span starts")


@dataclass(frozen=True)
class WorldConfig:
    n_subjects: int = 620
    value_pool_size: int = 100
    n_predicates: int = 24
    min_deg: int = 3
    max_deg: int = 20

    def validate(self):
        if self.n_subjects < 10:
            raise WorldConfigError("need at least 10 subjects")
        if self.value_pool_size < 20:
            raise WorldConfigError("value pool must hold at least 20 entities")
        if self.n_predicates < 3:
            raise WorldConfigError("need at least 3 predicates")
        if not (1 <= self.min_deg <= self.max_deg <= 100):
            raise WorldConfigError("degrees must satisfy 1 <= min_deg <= max_deg <= 100")
        if self.n_predicates > len(PREDICATE_TABLE):
            raise WorldConfigError(
                f"at most {len(PREDICATE_TABLE)} predicates available"
            )
        if self.max_deg > self.n_predicates:
            # each subject uses distinct predicates so (subject, predicate)
            # determines the object
            raise WorldConfigError("max_deg cannot exceed predicate count")


@dataclass(frozen=True)
class ToyWorld:
    config: WorldConfig
    seed: int
    subjects: tuple          # EntityRef, pagerank unset (0.0) until export
    values: tuple            # EntityRef value pool, disjoint from subjects
    predicates: tuple        # PredicateRef
    phrases: dict            # pid -> sentence phrase
    facts: tuple             # (subject qid, pid, object qid)

    @property
    def entities(self):
        return self.subjects + self.values

    def label_of(self, qid):
        return self._entity_index()[qid].label

    def entity(self, qid):
        return self._entity_index()[qid]

    def _entity_index(self):
        if not hasattr(self, "_index"):
            object.__setattr__(self, "_index", {e.qid: e for e in self.entities})
        return self._index

    def predicate(self, pid):
        if not hasattr(self, "_pindex"):
            object.__setattr__(self, "_pindex", {p.pid: p for p in self.predicates})
        return self._pindex[pid]

    def facts_of(self, qid):
        return [f for f in self.facts if f[0] == qid]


def _make_label(rng, taken, first=None):
    """A lowercase 2-4 syllable word, unique within the world. `first` pins
    the leading syllable (used to keep value-pool first tokens diverse).

    Labels stay lowercase: a capitalized label segments into a bare capital
    letter plus word fragments (subword units never cross case boundaries in
    practice), collapsing every label's first informative token onto ~26
    letters and letting a small top-k cover most of the pool.
    """
    for _ in range(1000):
        n = rng.randint(2, 4)
        head = first if first is not None else rng.choice(SYLLABLES)
        label = head + "".join(rng.choice(SYLLABLES) for _ in range(n - 1))
        if label not in taken and "." not in label:
            taken.add(label)
            return label
    raise WorldConfigError("label space exhausted; enlarge syllable inventory")


def generate_toy_world(config, seed):
    """Deterministically generate a closed toy world.

    Objects are sampled uniformly from the value pool independently of the
    subject, so the object of an unseen (subject, predicate) pair carries no
    learnable surface signal.
    """
    config.validate()
    rng = random.Random(seed)
    taken = set()
    subjects = tuple(
        EntityRef(qid=f"Q{1000 + i}", label=_make_label(rng, taken), pagerank=0.0)
        for i in range(config.n_subjects)
    )
    # value labels get pairwise-distinct leading syllables (cycling only if
    # the pool outgrows the inventory): a flat first-token marginal keeps a
    # blind top-k guess close to uniform chance over the pool
    firsts = list(SYLLABLES)
    rng.shuffle(firsts)
    values = tuple(
        EntityRef(qid=f"Q{9000 + i}",
                  label=_make_label(rng, taken, first=firsts[i % len(firsts)]),
                  pagerank=0.0)
        for i in range(config.value_pool_size)
    )
    predicates = tuple(
        PredicateRef(pid=f"P{100 + i}", label=PREDICATE_TABLE[i][0])
        for i in range(config.n_predicates)
    )
    phrases = {p.pid: PREDICATE_TABLE[i][1] for i, p in enumerate(predicates)}

    facts = []
    for subj in subjects:
        deg = rng.randint(config.min_deg, config.max_deg)
        pids = rng.sample([p.pid for p in predicates], deg)
        for pid in pids:
            obj = rng.choice(values)
            facts.append((subj.qid, pid, obj.qid))
    return ToyWorld(
        config=config, seed=seed, subjects=subjects, values=values,
        predicates=predicates, phrases=phrases, facts=tuple(facts),
    )


def _bite_from_parts(world, fact, before_subject, between, after_object):
    s_qid, pid, o_qid = fact
    subj = world.entity(s_qid)
    obj = world.entity(o_qid)
    pred = world.predicate(pid)
    text = f"{before_subject}{subj.label}{between}{obj.label}{after_object}"
    s_start = len(before_subject)
    s_end = s_start + len(subj.label)
    o_start = s_end + len(between)
    o_end = o_start + len(obj.label)
    return Bite(
        text=text,
        subject=subj, subject_span=Span(s_start, s_end),
        object=obj, object_span=Span(o_start, o_end),
        predicate=pred,
    )


def render_stage1(world):
    """One bare S-P-O sentence per fact: "{subject} {phrase} {object}"."""
    bites = []
    for fact in world.facts:
        phrase = world.phrases[fact[1]]
        bites.append(_bite_from_parts(world, fact, "", f" {phrase} ", "."))
    return bites


def render_stage2(world, seed):
    """Noisier contextual sentences with seeded prefix/filler/suffix drawn
    from fixed pools; the subject is never sentence-initial."""
    rng = random.Random(seed)
    bites = []
    for fact in world.facts:
        phrase = world.phrases[fact[1]]
        for _ in range(10):
            prefix = rng.choice(STAGE2_PREFIXES)
            filler = rng.choice(STAGE2_FILLERS)
            suffix = rng.choice(STAGE2_SUFFIXES)
            bite = _bite_from_parts(
                world, fact, f"{prefix}, ", f" {filler} {phrase} ", f"{suffix}."
            )
            if len(bite.text) <= MAX_BITE_CHARS:
                bites.append(bite)
                break
        else:
            raise WorldConfigError("could not assemble a stage-2 sentence under the length cap")
    return bites


def split_by_subject(bites, ratios, seed):
    """Partition subject qids (seeded shuffle, contiguous cut) and route each
    bite to its subject's split. Returns (train, val, test, manifest)."""
    r_train, r_val, r_test = ratios
    if min(ratios) <= 0:
        raise ValueError("split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    subjects = sorted({b.subject.qid for b in bites})
    rng = random.Random(seed)
    rng.shuffle(subjects)
    n = len(subjects)
    n_train = int(round(r_train * n))
    n_val = int(round(r_val * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split must receive at least one subject")
    manifest = {}
    for i, qid in enumerate(subjects):
        if i < n_train:
            manifest[qid] = "train"
        elif i < n_train + n_val:
            manifest[qid] = "val"
        else:
            manifest[qid] = "test"
    splits = {"train": [], "val": [], "test": []}
    for b in bites:
        splits[manifest[b.subject.qid]].append(b)
    return splits["train"], splits["val"], splits["test"], manifest


def export_star_graphs(world):
    """One StarGraph per subject; neighbor pagerank scores are seeded positive
    reals (the toy world has no real link structure to rank)."""
    rng = random.Random(world.seed ^ 0x5747E6)
    graphs = {}
    for subj in world.subjects:
        neighbors = []
        for s_qid, pid, o_qid in world.facts:
            if s_qid != subj.qid:
                continue
            obj = world.entity(o_qid)
            ranked = EntityRef(qid=obj.qid, label=obj.label,
                               pagerank=round(rng.uniform(0.01, 1.0), 6))
            # graphs carry the sentence phrase as the predicate surface form,
            # so textified triples and rendered sentences share token patterns
            # the LM can match in context
            phrased = PredicateRef(pid=pid, label=world.phrases[pid])
            neighbors.append((phrased, ranked))
        graphs[subj.qid] = make_star_graph(subj, neighbors)
    return graphs


# ---------------------------------------------------------------------------
# Bite file I/O: UTF-8 line-delimited JSON, one record per line.

def bite_to_record(bite):
    return {
        "text": bite.text,
        "subject": {
            "qid": bite.subject.qid, "label": bite.subject.label,
            "start": bite.subject_span.start, "end": bite.subject_span.end,
        },
        "object": {
            "qid": bite.object.qid, "label": bite.object.label,
            "start": bite.object_span.start, "end": bite.object_span.end,
        },
        "predicate": {"pid": bite.predicate.pid, "label": bite.predicate.label},
    }


def write_bites(bites, path):
    with open(path, "w", encoding="utf-8") as fh:
        for bite in bites:
            fh.write(json.dumps(bite_to_record(bite), ensure_ascii=False,
                                separators=(",", ":")))
            fh.write("\n")


def _warn_object_starts_sentence(text, start, lineno):
    import logging
    head = text[:start].rstrip()
    if head.endswith((".", "!", "?")):
        logging.getLogger(__name__).warning(
            "bite line %d: object span begins a new sentence", lineno)


def read_bites(path):
    bites = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            rec = json.loads(line)
            s, o = rec["subject"], rec["object"]
            _warn_object_starts_sentence(rec["text"], o["start"], lineno)
            bites.append(Bite(
                text=rec["text"],
                subject=EntityRef(qid=s["qid"], label=s["label"], pagerank=0.0),
                subject_span=Span(s["start"], s["end"]),
                object=EntityRef(qid=o["qid"], label=o["label"], pagerank=0.0),
                object_span=Span(o["start"], o["end"]),
                predicate=PredicateRef(pid=rec["predicate"]["pid"],
                                       label=rec["predicate"]["label"]),
            ))
    return bites


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(manifest):
            fh.write(f"{qid}\t{manifest[qid]}\n")


def read_manifest(path):
    manifest = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                qid, split = line.rstrip("\n").split("\t")
                manifest[qid] = split
    return manifest
