"""Cognate-set data: TSV I/O, vocabulary, label masks, augmentation, encoding,
and a rule-based synthetic corpus generator."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MISSING = {"", "-"}
SPECIALS = ("<BOS>", "<EOS>", "<PAD>", "<SEP>", "<UNK>")
BOS, EOS, PAD, SEP, UNK = range(5)
NEUTRAL_LANG = 0


class ParseError(ValueError):
    pass


@dataclass
class CognateSet:
    id: str
    reflexes: dict  # daughter -> tuple of tokens; dict order is presentation order
    protoform: tuple | None = None

    def __post_init__(self):
        self.reflexes = {d: tuple(t) for d, t in self.reflexes.items()}
        if self.protoform is not None:
            self.protoform = tuple(self.protoform)
        if not self.reflexes:
            raise ValueError(f"cognate set {self.id!r} has no reflexes")
        for d, toks in self.reflexes.items():
            if not toks:
                raise ValueError(f"cognate set {self.id!r}: empty reflex for {d}")
            if any(not t for t in toks):
                raise ValueError(f"cognate set {self.id!r}: empty token in {d}")

    @property
    def labeled(self) -> bool:
        return self.protoform is not None

    def with_protoform(self, protoform) -> "CognateSet":
        return CognateSet(self.id, dict(self.reflexes), None if protoform is None else tuple(protoform))


@dataclass
class Dataset:
    languages: list
    proto_language: str = "Proto"
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for split in ("train", "valid", "test"):
            for cs in getattr(self, split):
                if cs.id in seen:
                    raise ValueError(f"duplicate cognate set id {cs.id!r}")
                seen.add(cs.id)
                if split != "train" and cs.protoform is None:
                    raise ValueError(f"{split} item {cs.id!r} lacks a protoform")

    def split(self, name: str) -> list:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def all_sets(self) -> list:
        return self.train + self.valid + self.test


# ------------------------------------------------------------------ TSV I/O


def _tokens(cell: str) -> tuple | None:
    cell = cell.strip()
    if cell in MISSING:
        return None
    return tuple(cell.split(" "))


def parse_rows(text: str, source: str = "<string>") -> tuple[list, list]:
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{source}:1: empty file")
    header = lines[0].split("\t")
    if len(header) < 3 or header[0] != "id" or header[1] != "protoform":
        raise ParseError(f"{source}:1: header must be 'id<TAB>protoform<TAB><daughter>...'")
    languages = header[2:]
    if len(set(languages)) != len(languages) or any(not l for l in languages):
        raise ParseError(f"{source}:1: daughter names must be unique and non-empty")
    items, ids = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            raise ParseError(f"{source}:{lineno}: expected {len(header)} cells, got {len(cells)}")
        cid = cells[0].strip()
        if not cid:
            raise ParseError(f"{source}:{lineno}: empty id")
        if cid in ids:
            raise ParseError(f"{source}:{lineno}: duplicate id {cid!r}")
        ids.add(cid)
        reflexes = {}
        for lang, cell in zip(languages, cells[2:]):
            toks = _tokens(cell)
            if toks is not None:
                if any(not t for t in toks):
                    raise ParseError(f"{source}:{lineno}: malformed tokens in {lang} cell")
                reflexes[lang] = toks
        if not reflexes:
            raise ParseError(f"{source}:{lineno}: row {cid!r} has no reflexes")
        proto = _tokens(cells[1])
        if proto is not None and any(not t for t in proto):
            raise ParseError(f"{source}:{lineno}: malformed protoform tokens")
        items.append(CognateSet(cid, reflexes, proto))
    return languages, items


def parse_dataset(path, split: str = "train", proto_language: str = "Proto") -> Dataset:
    """Read one TSV file into a Dataset whose ``split`` list holds every row."""
    path = Path(path)
    languages, items = parse_rows(path.read_text(encoding="utf-8"), str(path))
    ds = Dataset(languages, proto_language)
    setattr(ds, split, items)
    ds.__post_init__()
    return ds


def load_dataset(train, valid=None, test=None, proto_language: str = "Proto") -> Dataset:
    """Read up to three split files sharing a daughter header."""
    parts = {}
    languages = None
    for split, path in (("train", train), ("valid", valid), ("test", test)):
        if path is None:
            parts[split] = []
            continue
        langs, items = parse_rows(Path(path).read_text(encoding="utf-8"), str(path))
        if languages is None:
            languages = langs
        elif langs != languages:
            raise ParseError(f"{path}:1: daughter columns differ from {train}")
        parts[split] = items
    return Dataset(languages or [], proto_language, parts["train"], parts["valid"], parts["test"])


def serialize_rows(items: Iterable[CognateSet], languages: Sequence[str]) -> str:
    out = ["\t".join(["id", "protoform", *languages])]
    for cs in items:
        cells = [cs.id, " ".join(cs.protoform) if cs.protoform else ""]
        cells += [" ".join(cs.reflexes[l]) if l in cs.reflexes else "-" for l in languages]
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"


def write_split(path, items, languages) -> None:
    Path(path).write_text(serialize_rows(items, languages), encoding="utf-8")


# --------------------------------------------------------------- vocabulary


def lang_tag(language: str) -> str:
    return f"<{language}>"


class Vocabulary:
    def __init__(self, tokens: Sequence[str], languages: Sequence[str], proto_language: str):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")
        self.languages = list(languages)
        self.proto_language = proto_language
        self.lang_index = {l: i + 1 for i, l in enumerate(self.languages)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.languages == other.languages

    @property
    def n_lang_ids(self) -> int:
        return len(self.languages) + 1

    def encode(self, tokens: Iterable[str]) -> list:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.tokens[i] for i in ids]

    def tag_id(self, language: str) -> int:
        tag = lang_tag(language)
        if tag not in self.index:
            raise ValueError(f"unknown language {language!r}")
        return self.index[tag]

    def phoneme_ids(self) -> list:
        tags = {lang_tag(l) for l in self.languages + [self.proto_language]}
        return [i for i, t in enumerate(self.tokens) if i >= len(SPECIALS) and t not in tags]

    def hash(self) -> str:
        payload = "\n".join(self.tokens) + "\x00" + "\n".join(self.languages) + "\x00" + self.proto_language
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "languages": self.languages, "proto_language": self.proto_language}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj["languages"], obj["proto_language"])


def build_vocab(dataset: Dataset) -> Vocabulary:
    phonemes = set()
    for cs in dataset.all_sets():
        for toks in cs.reflexes.values():
            phonemes.update(toks)
        if cs.protoform:
            phonemes.update(cs.protoform)
    tags = sorted(lang_tag(l) for l in list(dataset.languages) + [dataset.proto_language])
    phonemes -= set(SPECIALS) | set(tags)
    return Vocabulary(list(SPECIALS) + sorted(phonemes) + tags, dataset.languages, dataset.proto_language)


# ------------------------------------------------------------ label masking


class Xoshiro256:
    """xoshiro256** 1.0 seeded through splitmix64; doubles use the top 53 bits."""

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        if not 0 <= seed <= self.MASK:
            raise ValueError("seed must be an unsigned 64-bit integer")
        x = seed
        s = []
        for _ in range(4):
            x = (x + 0x9E3779B97F4A7C15) & self.MASK
            z = x
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
            s.append(z ^ (z >> 31))
        self.s = s

    @staticmethod
    def _rotl(x: int, k: int) -> int:
        return ((x << k) | (x >> (64 - k))) & Xoshiro256.MASK

    def next_u64(self) -> int:
        s = self.s
        result = (self._rotl((s[1] * 5) & self.MASK, 7) * 9) & self.MASK
        t = (s[1] << 17) & self.MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = self._rotl(s[3], 45)
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def label_count(p: float, n: int) -> int:
    """round-half-to-even(p * n), computed on the decimal literal of ``p``."""
    exact = Decimal(repr(float(p))) * n
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


@dataclass
class LabelingMask:
    seed: int
    percent: float
    labeled_ids: frozenset

    def apply(self, train: Sequence[CognateSet]) -> list:
        """Copy of ``train`` with protoforms hidden outside the mask."""
        return [cs if cs.id in self.labeled_ids else cs.with_protoform(None) for cs in train]

    def to_text(self) -> str:
        lines = [f"# seed={self.seed} percent={self.percent!r} count={len(self.labeled_ids)}"]
        lines += sorted(self.labeled_ids)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LabelingMask":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ParseError("mask file needs a '# seed=.. percent=..' header")
        meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        ids = frozenset(l.strip() for l in lines[1:] if l.strip())
        return cls(int(meta["seed"]), float(meta["percent"]), ids)


def make_labeling_mask(train: Sequence[CognateSet], p: float, seed: int) -> LabelingMask:
    """Keep labels on the round-half-even(p*N) items with the largest uniform draws.

    One draw per item in dataset order, so a fixed seed yields nested masks as
    ``p`` grows.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"labeling percent must be in (0, 1], got {p}")
    rng = Xoshiro256(seed)
    draws = [rng.random() for _ in train]
    k = label_count(p, len(train))
    order = sorted(range(len(train)), key=lambda i: (-draws[i], i))
    return LabelingMask(seed, p, frozenset(train[i].id for i in order[:k]))


# -------------------------------------------------------------- augmentation


@dataclass
class AugmentationConfig:
    daughter_drop_prob: float = 0.2
    permute: bool = True

    def __post_init__(self):
        if not 0.0 <= self.daughter_drop_prob < 1.0:
            raise ValueError("daughter_drop_prob must be in [0, 1)")


def augment_cognate_set(cs: CognateSet, cfg: AugmentationConfig, rng: np.random.Generator) -> CognateSet:
    daughters = list(cs.reflexes)
    keep = [d for d in daughters if rng.random() >= cfg.daughter_drop_prob] if cfg.daughter_drop_prob > 0 else daughters
    if not keep:
        keep = [daughters[int(rng.integers(len(daughters)))]]
    if cfg.permute and len(keep) > 1:
        keep = [keep[i] for i in rng.permutation(len(keep))]
    return CognateSet(cs.id, {d: cs.reflexes[d] for d in keep}, cs.protoform)


# ------------------------------------------------------------------ encoding


def encode_d2p_input(cs: CognateSet, vocab: Vocabulary, daughter_order: Sequence[str] | None = None):
    """BOS, reflex_1, SEP, reflex_2, ..., reflex_n, EOS plus a parallel language-id stream."""
    order = list(cs.reflexes) if daughter_order is None else [d for d in daughter_order if d in cs.reflexes]
    ids, langs = [BOS], [NEUTRAL_LANG]
    for d in order:
        toks = vocab.encode(cs.reflexes[d])
        ids += toks + [SEP]
        langs += [vocab.lang_index[d]] * len(toks) + [NEUTRAL_LANG]
    ids[-1] = EOS
    return ids, langs


def encode_p2d_input(protoform: Sequence[str], target_daughter: str, vocab: Vocabulary) -> list:
    if target_daughter not in vocab.lang_index:
        raise ValueError(f"unknown daughter {target_daughter!r}")
    return [BOS, vocab.tag_id(target_daughter)] + vocab.encode(protoform) + [EOS]


def target_ids(tokens: Sequence[str], vocab: Vocabulary) -> list:
    """Decoder target stream: tokens followed by EOS."""
    return vocab.encode(tokens) + [EOS]


# ------------------------------------------------------------ feature table


@dataclass
class FeatureTable:
    vectors: dict
    feature_count: int
    names: list = field(default_factory=list)

    def __post_init__(self):
        for tok, vec in self.vectors.items():
            if len(vec) != self.feature_count:
                raise ValueError(f"feature vector for {tok!r} has length {len(vec)}, expected {self.feature_count}")
            if any(v not in (-1, 0, 1) for v in vec):
                raise ValueError(f"feature values for {tok!r} must be in {{-1, 0, 1}}")
        self.vectors = {k: tuple(int(x) for x in v) for k, v in self.vectors.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phoneme", *(self.names or [f"f{i + 1}" for i in range(self.feature_count)])])
        for tok in sorted(self.vectors):
            w.writerow([tok, *self.vectors[tok]])
        return buf.getvalue()


def load_feature_table(path) -> FeatureTable:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "phoneme" or len(rows[0]) < 2:
        raise ParseError(f"{path}:1: header must be 'phoneme,f1,...,fk'")
    names = rows[0][1:]
    vectors = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise ParseError(f"{path}:{lineno}: expected {len(names) + 1} columns")
        try:
            vectors[row[0]] = tuple(int(v) for v in row[1:])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return FeatureTable(vectors, len(names), names)


# --------------------------------------------------------- synthetic corpus

CONSONANTS = ("p", "t", "k", "b", "d", "g", "m", "n", "ŋ", "s", "l", "r", "w", "j", "h")
VOWELS = ("a", "e", "i", "o", "u")
INNOVATIONS = ("f", "v", "x", "ts", "tʃ", "ʃ", "z", "ɣ", "β", "ə", "ɛ", "ɔ", "y", "ø")

FEATURE_NAMES = ["cons", "syl", "voi", "cont", "nas", "lab", "cor", "dor", "hi", "lo", "back", "rnd", "strid", "lat"]
# positive features per segment; everything else is -1
_POSITIVE = {
    "p": "cons lab", "b": "cons voi lab", "t": "cons cor", "d": "cons voi cor",
    "k": "cons dor hi back", "g": "cons voi dor hi back", "m": "cons voi nas lab",
    "n": "cons voi nas cor", "ŋ": "cons voi nas dor hi back", "s": "cons cont cor strid",
    "z": "cons voi cont cor strid", "l": "cons voi cont cor lat", "r": "cons voi cont cor",
    "w": "voi cont lab dor hi back rnd", "j": "voi cont cor dor hi", "h": "cont",
    "f": "cons cont lab strid", "v": "cons voi cont lab strid", "x": "cons cont dor hi back",
    "ɣ": "cons voi cont dor hi back", "β": "cons voi cont lab", "ts": "cons cor strid",
    "tʃ": "cons cor dor hi strid", "ʃ": "cons cont cor dor hi strid",
    "a": "syl voi cont lo back", "e": "syl voi cont", "i": "syl voi cont hi",
    "o": "syl voi cont back rnd", "u": "syl voi cont hi back rnd", "ə": "syl voi cont back",
    "ɛ": "syl voi cont lo", "ɔ": "syl voi cont lo back rnd", "y": "syl voi cont hi rnd",
    "ø": "syl voi cont rnd",
}


def default_feature_table() -> FeatureTable:
    """Ternary feature vectors for every segment the synthetic generator can emit."""
    vectors = {}
    for seg, pos in _POSITIVE.items():
        on = set(pos.split())
        vectors[seg] = tuple(1 if f in on else -1 for f in FEATURE_NAMES)
    return FeatureTable(vectors, len(FEATURE_NAMES), list(FEATURE_NAMES))


@dataclass(frozen=True)
class Rule:
    daughter: str
    source: str
    target: str
    left: str = ""   # "" any, "#" word boundary, else a phoneme
    right: str = ""

    def to_line(self) -> str:
        return f"{self.daughter}\t{self.source}>{self.target}/{self.left}_{self.right}"

    @classmethod
    def from_line(cls, line: str) -> "Rule":
        try:
            daughter, body = line.rstrip("\n").split("\t")
            change, ctx = body.split("/")
            source, target = change.split(">")
            left, right = ctx.split("_")
        except ValueError:
            raise ParseError(f"malformed rule line {line!r}") from None
        return cls(daughter, source, target, left, right)

    def applies(self, toks: Sequence[str], i: int) -> bool:
        if toks[i] != self.source:
            return False
        prev = toks[i - 1] if i > 0 else "#"
        nxt = toks[i + 1] if i + 1 < len(toks) else "#"
        return (not self.left or self.left == prev) and (not self.right or self.right == nxt)


def apply_rules(protoform: Sequence[str], rules: Sequence[Rule]) -> tuple:
    """Apply rules in order; each rule rewrites all matching positions at once."""
    toks = list(protoform)
    for r in rules:
        toks = [r.target if r.applies(toks, i) else t for i, t in enumerate(toks)]
    return tuple(toks)


def rules_to_text(rules: Sequence[Rule]) -> str:
    return "".join(r.to_line() + "\n" for r in rules)


def rules_from_text(text: str) -> list:
    return [Rule.from_line(l) for l in text.splitlines() if l.strip()]


def _sample_rules(daughter: str, rng: np.random.Generator, n_rules: int) -> list:
    rules = []
    inventory = list(CONSONANTS + VOWELS)
    for _ in range(n_rules):
        source = inventory[int(rng.integers(len(inventory)))]
        pool = VOWELS + ("ə", "ɛ", "ɔ", "y", "ø") if source in VOWELS else CONSONANTS + INNOVATIONS[:9]
        pool = [t for t in pool if t != source]
        target = pool[int(rng.integers(len(pool)))]
        kind = int(rng.integers(3))
        ctx_pool = ("#",) + (VOWELS if source in CONSONANTS else CONSONANTS)
        ctx = ctx_pool[int(rng.integers(len(ctx_pool)))]
        left, right = ("", "") if kind == 0 else ((ctx, "") if kind == 1 else ("", ctx))
        rules.append(Rule(daughter, source, target, left, right))
        if target not in inventory:
            inventory.append(target)
    return rules


def gen_synthetic(n_sets: int, n_daughters: int, seed: int, rules_per_daughter: int = 4):
    """Random CV protoforms pushed through per-daughter regular sound changes.

    Returns ``(dataset, rules)``; the split is 70/10/20 in generation order.
    """
    if n_sets < 10:
        raise ValueError("n_sets must be >= 10")
    if not 2 <= n_daughters <= 8:
        raise ValueError("n_daughters must be in [2, 8]")
    rng = np.random.default_rng(seed)
    daughters = [f"Lang{i + 1}" for i in range(n_daughters)]
    rules = [r for d in daughters for r in _sample_rules(d, rng, rules_per_daughter)]
    by_daughter = {d: [r for r in rules if r.daughter == d] for d in daughters}
    protos, seen = [], set()
    while len(protos) < n_sets:
        n_syl = int(rng.integers(1, 4))
        form = []
        for _ in range(n_syl):
            form += [CONSONANTS[int(rng.integers(len(CONSONANTS)))], VOWELS[int(rng.integers(len(VOWELS)))]]
        key = tuple(form)
        if key not in seen:
            seen.add(key)
            protos.append(key)
    width = len(str(n_sets))
    sets = [
        CognateSet(f"s{i:0{width}d}", {d: apply_rules(p, by_daughter[d]) for d in daughters}, p)
        for i, p in enumerate(protos)
    ]
    n_valid, n_test = n_sets // 10, n_sets // 5
    n_train = n_sets - n_valid - n_test
    ds = Dataset(daughters, "Proto", sets[:n_train], sets[n_train:n_train + n_valid], sets[n_train + n_valid:])
    return ds, rules
