"""Synthetic paired / text-only corpora, vocabulary handling, batching, and file IO.

The generator stands in for a low-resource transcription setup: token
sequences come from a seeded sparse Markov grammar, and "audio" features are
per-token prototype rows repeated for a random duration plus Gaussian noise.
The text-only corpus is drawn from the same grammar so that text data carries
the true language statistics.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ParseError

PAD, SOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<s>", "</s>")

DEFAULT_CONTENT_TOKENS = (
    "ba", "be", "bi", "bo", "da", "de", "di", "do",
    "ka", "ke", "ki", "ko", "ma", "me", "mi", "mo",
)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list with pad/sos/eos reserved at indices 0, 1, 2."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:3] != RESERVED:
            raise ContractError(f"vocabulary must start with the reserved entries {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocabulary tokens must be unique")

    @classmethod
    def default(cls, n_content: int = 16) -> "Vocabulary":
        if n_content <= len(DEFAULT_CONTENT_TOKENS):
            content = DEFAULT_CONTENT_TOKENS[:n_content]
        else:
            content = tuple(DEFAULT_CONTENT_TOKENS) + tuple(
                f"t{i}" for i in range(n_content - len(DEFAULT_CONTENT_TOKENS))
            )
        return cls(RESERVED + content)

    @classmethod
    def from_content(cls, content: Sequence[str]) -> "Vocabulary":
        return cls(RESERVED + tuple(content))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def content_indices(self) -> range:
        return range(3, len(self.tokens))

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def to_indices(self, words: Iterable[str]) -> list[int]:
        lookup = {t: i for i, t in enumerate(self.tokens)}
        out = []
        for w in words:
            if w not in lookup:
                raise KeyError(f"unknown token {w!r}")
            out.append(lookup[w])
        return out

    def to_words(self, indices: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in indices]


@dataclass
class Utterance:
    """Paired example: feature matrix [t x f] plus its transcript (content indices)."""

    id: str
    features: np.ndarray
    transcript: list[int]

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ContractError(f"utterance {self.id}: features must be a nonempty [t x f] matrix")
        _check_transcript(self.transcript, self.id)


@dataclass
class TextSample:
    """Text-only example: a transcript with no acoustic features."""

    id: str
    transcript: list[int]

    def __post_init__(self):
        _check_transcript(self.transcript, self.id)


def _check_transcript(transcript: Sequence[int], ident: str) -> None:
    if len(transcript) == 0:
        raise ContractError(f"example {ident}: transcript must be nonempty")
    if any(t in (PAD, SOS, EOS) for t in transcript):
        raise ContractError(f"example {ident}: reserved token inside transcript body")


@dataclass
class MarkovGrammar:
    """Sparse order-k Markov chain over content token indices.

    ``transitions[state]`` is a distribution over content tokens, where a
    state is a k-tuple of the previous content tokens.  Sentences start from
    the stationary distribution of the state chain so corpus-level unigram
    frequencies match the stationary marginal.
    """

    order: int
    content: list[int]
    transitions: dict[tuple, np.ndarray]

    @classmethod
    def build(
        cls,
        rng: np.random.Generator,
        content: Sequence[int],
        order: int = 2,
        branching: int = 3,
    ) -> "MarkovGrammar":
        content = list(content)
        n = len(content)
        states = [()]
        for _ in range(order):
            states = [s + (t,) for s in states for t in content]
        transitions = {}
        for s in states:
            succ = rng.choice(n, size=min(branching, n), replace=False)
            probs = rng.dirichlet(np.full(len(succ), 0.5))
            dist = np.zeros(n)
            dist[succ] = probs
            transitions[s] = dist
        return cls(order=order, content=content, transitions=transitions)

    def state_matrix(self) -> tuple[list[tuple], np.ndarray]:
        """Dense transition matrix over k-tuple states (row-stochastic)."""
        states = sorted(self.transitions)
        pos = {s: i for i, s in enumerate(states)}
        mat = np.zeros((len(states), len(states)))
        for s, dist in self.transitions.items():
            for j, p in enumerate(dist):
                if p > 0:
                    nxt = s[1:] + (self.content[j],)
                    mat[pos[s], pos[nxt]] += p
        return states, mat

    def stationary_states(self, iters: int = 2000) -> tuple[list[tuple], np.ndarray]:
        states, mat = self.state_matrix()
        pi = np.full(len(states), 1.0 / len(states))
        for _ in range(iters):
            nxt = pi @ mat
            if np.abs(nxt - pi).sum() < 1e-13:
                pi = nxt
                break
            pi = nxt
        return states, pi / pi.sum()

    def stationary_unigram(self) -> np.ndarray:
        """Stationary distribution marginalized to single content tokens."""
        states, pi = self.stationary_states()
        uni = np.zeros(len(self.content))
        tok_pos = {t: i for i, t in enumerate(self.content)}
        for s, p in zip(states, pi):
            uni[tok_pos[s[-1]]] += p
        return uni

    def sample_sentence(self, rng: np.random.Generator, length: int) -> list[int]:
        states, pi = self._stationary_cache()
        state = states[rng.choice(len(states), p=pi)]
        out = list(state[-min(self.order, length):]) if length <= self.order else list(state)
        while len(out) < length:
            dist = self.transitions[tuple(out[-self.order:])]
            out.append(self.content[rng.choice(len(self.content), p=dist)])
        return out[:length]

    def _stationary_cache(self):
        if not hasattr(self, "_stationary"):
            self._stationary = self.stationary_states()
        return self._stationary


@dataclass
class CorpusSpec:
    """Everything that determines a generated corpus, including the seed."""

    seed: int = 0
    vocab: Vocabulary = field(default_factory=Vocabulary.default)
    grammar_order: int = 2
    grammar_branching: int = 3
    train_size: int = 200
    val_size: int = 40
    test_size: int = 50
    text_size: int = 10000
    sentence_len: tuple[int, int] = (4, 8)
    frames_per_token: tuple[int, int] = (2, 4)
    feature_dim: int = 8
    noise_std: float = 0.4
    noisy_noise_std: float = 0.8
    # Prototypes come in acoustic clusters: tokens sharing a cluster center
    # differ only by a small offset, so they are confusable under noise and
    # only language statistics can tell them apart.
    proto_clusters: int = 8
    proto_spread: float = 0.15
    prototypes: Optional[np.ndarray] = None

    def __post_init__(self):
        if min(self.train_size, self.val_size, self.test_size, self.text_size) < 1:
            raise ContractError("corpus sizes must be >= 1")
        if self.noise_std < 0 or self.noisy_noise_std < 0:
            raise ContractError("noise levels must be nonnegative")
        if self.prototypes is not None and self.prototypes.shape != (
            len(self.vocab),
            self.feature_dim,
        ):
            raise ContractError(
                f"prototype table shape {self.prototypes.shape} does not match "
                f"(vocab {len(self.vocab)}, feature dim {self.feature_dim})"
            )


@dataclass
class Corpora:
    train: list[Utterance]
    validation: list[Utterance]
    test_clean: list[Utterance]
    test_noisy: list[Utterance]
    text: list[TextSample]
    grammar: MarkovGrammar
    spec: CorpusSpec

    def paired_splits(self) -> dict[str, list[Utterance]]:
        return {
            "train": self.train,
            "validation": self.validation,
            "test_clean": self.test_clean,
            "test_noisy": self.test_noisy,
        }


def _render_features(
    rng: np.random.Generator,
    transcript: Sequence[int],
    prototypes: np.ndarray,
    frames_per_token: tuple[int, int],
    noise_std: float,
) -> np.ndarray:
    lo, hi = frames_per_token
    rows = []
    for tok in transcript:
        dur = int(rng.integers(lo, hi + 1))
        rows.extend([prototypes[tok]] * dur)
    feats = np.array(rows)
    if noise_std > 0:
        feats = feats + rng.normal(0.0, noise_std, size=feats.shape)
    return feats


def generate_corpora(spec: CorpusSpec) -> Corpora:
    """Sample paired train/validation/test splits plus the text-only corpus.

    Splits are disjoint by transcript string; the text corpus excludes
    validation/test transcripts so held-out evaluation cannot be answered
    from memorized text data.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(7)
    grammar = MarkovGrammar.build(
        np.random.default_rng(seeds[0]),
        list(spec.vocab.content_indices),
        order=spec.grammar_order,
        branching=spec.grammar_branching,
    )
    prototypes = spec.prototypes
    if prototypes is None:
        proto_rng = np.random.default_rng(seeds[1])
        n_content = len(spec.vocab) - 3
        clusters = min(spec.proto_clusters, n_content) or n_content
        centers = proto_rng.normal(0.0, 1.0, size=(clusters, spec.feature_dim))
        prototypes = np.zeros((len(spec.vocab), spec.feature_dim))
        for i in range(n_content):
            prototypes[3 + i] = centers[i % clusters] + proto_rng.normal(
                0.0, spec.proto_spread, size=spec.feature_dim
            )

    lo, hi = spec.sentence_len

    def sample_transcripts(rng, size, taken, max_tries=200):
        out = []
        for _ in range(size):
            for _ in range(max_tries):
                sent = grammar.sample_sentence(rng, int(rng.integers(lo, hi + 1)))
                key = tuple(sent)
                if key not in taken:
                    taken.add(key)
                    out.append(sent)
                    break
            else:
                raise ContractError(
                    "grammar is too small to produce the requested number of distinct sentences"
                )
        return out

    taken: set[tuple] = set()
    train_t = sample_transcripts(np.random.default_rng(seeds[2]), spec.train_size, taken)
    val_t = sample_transcripts(np.random.default_rng(seeds[3]), spec.val_size, taken)
    test_t = sample_transcripts(np.random.default_rng(seeds[4]), spec.test_size, taken)
    noisy_t = sample_transcripts(np.random.default_rng(seeds[5]), spec.test_size, taken)

    held_out = {tuple(s) for s in val_t + test_t + noisy_t}
    text_rng = np.random.default_rng(seeds[6])
    text = []
    while len(text) < spec.text_size:
        sent = grammar.sample_sentence(text_rng, int(text_rng.integers(lo, hi + 1)))
        if tuple(sent) in held_out:
            continue
        text.append(TextSample(id=f"text-{len(text):06d}", transcript=sent))

    def render_split(name, transcripts, rng, noise):
        return [
            Utterance(
                id=f"{name}-{i:04d}",
                features=_render_features(
                    rng, sent, prototypes, spec.frames_per_token, noise
                ),
                transcript=sent,
            )
            for i, sent in enumerate(transcripts)
        ]

    return Corpora(
        train=render_split("train", train_t, np.random.default_rng(seeds[2]), spec.noise_std),
        validation=render_split("val", val_t, np.random.default_rng(seeds[3]), spec.noise_std),
        test_clean=render_split("test", test_t, np.random.default_rng(seeds[4]), spec.noise_std),
        test_noisy=render_split(
            "noisy", noisy_t, np.random.default_rng(seeds[5]), spec.noisy_noise_std
        ),
        text=text,
        grammar=grammar,
        spec=replace(spec, prototypes=prototypes),
    )


# ---------------------------------------------------------------------------
# batching


@dataclass
class PaddedBatch:
    """Right-padded homogeneous batch with a mask of real positions.

    For paired batches ``features`` is [b x t_max x f] zero-padded with
    per-example ``feature_lengths``; for text batches both are ``None``.
    """

    kind: str  # "audio-text" | "text-only"
    examples: list
    tokens: np.ndarray  # [b x u_max], right-padded
    token_mask: np.ndarray  # [b x u_max] bool
    features: Optional[np.ndarray] = None
    feature_lengths: Optional[np.ndarray] = None


def batch(examples: Sequence[Union[Utterance, TextSample]], max_per_batch: int, pad_token: int = PAD) -> list[PaddedBatch]:
    """Assemble homogeneous padded batches of at most ``max_per_batch`` examples."""
    examples = list(examples)
    if not examples:
        raise ContractError("cannot batch an empty example list")
    kinds = {type(e) for e in examples}
    if len(kinds) > 1:
        raise ContractError("mixed example types in one batch are not allowed")
    paired = isinstance(examples[0], Utterance)
    out = []
    for lo in range(0, len(examples), max_per_batch):
        chunk = examples[lo : lo + max_per_batch]
        u_max = max(len(e.transcript) for e in chunk)
        tokens = np.full((len(chunk), u_max), pad_token, dtype=np.int64)
        mask = np.zeros((len(chunk), u_max), dtype=bool)
        for i, e in enumerate(chunk):
            tokens[i, : len(e.transcript)] = e.transcript
            mask[i, : len(e.transcript)] = True
        feats = lengths = None
        if paired:
            t_max = max(e.features.shape[0] for e in chunk)
            f = chunk[0].features.shape[1]
            feats = np.zeros((len(chunk), t_max, f))
            lengths = np.zeros(len(chunk), dtype=np.int64)
            for i, e in enumerate(chunk):
                feats[i, : e.features.shape[0]] = e.features
                lengths[i] = e.features.shape[0]
        out.append(
            PaddedBatch(
                kind="audio-text" if paired else "text-only",
                examples=chunk,
                tokens=tokens,
                token_mask=mask,
                features=feats,
                feature_lengths=lengths,
            )
        )
    return out


def batch_utterances(b: PaddedBatch) -> list[Utterance]:
    """Recover the unpadded utterances of a paired batch."""
    if b.kind != "audio-text":
        raise ContractError("batch does not contain paired examples")
    return list(b.examples)


# ---------------------------------------------------------------------------
# file formats


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same float64."""
    return repr(float(x))


def write_feature_file(path: str, features: np.ndarray) -> None:
    t, f = features.shape
    with open(path, "w") as fh:
        fh.write(f"{t} {f}\n")
        for row in features:
            fh.write(" ".join(format_float(v) for v in row) + "\n")


def read_feature_file(path: str) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty feature file")
    head = lines[0].split()
    if len(head) != 2:
        raise ParseError(f"{path}:1: header must be 'T F', got {lines[0]!r}")
    try:
        t, f = int(head[0]), int(head[1])
    except ValueError:
        raise ParseError(f"{path}:1: non-integer header {lines[0]!r}") from None
    if len(lines) - 1 < t:
        raise ParseError(f"{path}:{len(lines)}: expected {t} feature rows, found {len(lines) - 1}")
    rows = []
    for i in range(1, t + 1):
        parts = lines[i].split()
        if len(parts) != f:
            raise ParseError(f"{path}:{i + 1}: expected {f} values, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"{path}:{i + 1}: malformed float in row") from None
    return np.array(rows)


def write_vocab_file(path: str, vocab: Vocabulary) -> None:
    with open(path, "w") as fh:
        for tok in vocab.tokens[3:]:
            fh.write(tok + "\n")


def read_vocab_file(path: str) -> Vocabulary:
    with open(path) as fh:
        content = [line.strip() for line in fh if line.strip()]
    return Vocabulary.from_content(content)


def write_text_file(path: str, samples: Sequence[TextSample], vocab: Vocabulary) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(" ".join(vocab.to_words(s.transcript)) + "\n")


def read_text_file(path: str, vocab: Vocabulary) -> list[TextSample]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            words = line.split()
            if not words:
                continue
            try:
                idx = vocab.to_indices(words)
            except KeyError as e:
                raise ParseError(f"{path}:{i}: {e.args[0]}") from None
            out.append(TextSample(id=f"text-{i - 1:06d}", transcript=idx))
    return out


def write_manifest(path: str, utterances: Sequence[Utterance], vocab: Vocabulary, feature_dir: str) -> None:
    """Write the split index: one `id<TAB>feature-path<TAB>transcript` line per utterance.

    Feature paths are stored relative to the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as fh:
        for u in utterances:
            feat_path = os.path.join(feature_dir, f"{u.id}.feat")
            rel = os.path.relpath(feat_path, base)
            fh.write(f"{u.id}\t{rel}\t{' '.join(vocab.to_words(u.transcript))}\n")


def load_manifest(path: str, vocab: Vocabulary) -> list[Utterance]:
    """Load utterances listed in a manifest, validating shapes and tokens."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{i}: expected 3 tab-separated fields, got {len(parts)}")
            utt_id, feat_rel, transcript = parts
            try:
                indices = vocab.to_indices(transcript.split())
            except KeyError as e:
                raise ParseError(f"{path}:{i}: {e.args[0]}") from None
            feats = read_feature_file(os.path.join(base, feat_rel))
            out.append(Utterance(id=utt_id, features=feats, transcript=indices))
    return out


def load_external(features_path: str, transcript: str, vocab: Vocabulary, utt_id: str = "ext") -> Utterance:
    """Ingest one externally produced utterance from a feature file plus transcript text."""
    try:
        indices = vocab.to_indices(transcript.split())
    except KeyError as e:
        raise ParseError(f"{features_path}: {e.args[0]}") from None
    return Utterance(id=utt_id, features=read_feature_file(features_path), transcript=indices)


def write_corpus_dir(out_dir: str, corpora: Corpora) -> None:
    """Materialize all corpus interface files under ``out_dir``."""
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    vocab = corpora.spec.vocab
    for name, split in corpora.paired_splits().items():
        for u in split:
            write_feature_file(os.path.join(feat_dir, f"{u.id}.feat"), u.features)
        write_manifest(os.path.join(out_dir, f"{name}.manifest"), split, vocab, feat_dir)
    write_text_file(os.path.join(out_dir, "text.txt"), corpora.text, vocab)
    write_vocab_file(os.path.join(out_dir, "vocab.txt"), vocab)


def load_corpus_dir(corpus_dir: str) -> dict:
    """Read back a generated corpus directory into splits + text + vocab."""
    vocab = read_vocab_file(os.path.join(corpus_dir, "vocab.txt"))
    splits = {}
    for name in ("train", "validation", "test_clean", "test_noisy"):
        manifest = os.path.join(corpus_dir, f"{name}.manifest")
        if os.path.exists(manifest):
            splits[name] = load_manifest(manifest, vocab)
    return {
        "vocab": vocab,
        "splits": splits,
        "text": read_text_file(os.path.join(corpus_dir, "text.txt"), vocab),
    }
