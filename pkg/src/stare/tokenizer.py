"""Gaze sequences -> per-channel token sequences.

Shared vocabulary layout for axis tokens on an R x C grid::

    0 PAD | 1 EOS | 2 OFF | 3 .. 3+C-1 columns | 3+C .. 3+C+R-1 rows

Chronos-style tokens use ``3 + bin`` with the same three specials.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gaze_data import GazeSequence, Modality
from .roi_map import OFF, ROIMap, columns_of, rows_of

PAD, EOS, OFF_TOKEN = 0, 1, 2
N_SPECIALS = 3


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    n_rows: int
    n_cols: int

    @property
    def size(self) -> int:
        return N_SPECIALS + self.n_rows + self.n_cols

    def column(self, c: int) -> int:
        return N_SPECIALS + c

    def row(self, r: int) -> int:
        return N_SPECIALS + self.n_cols + r


@dataclass(frozen=True)
class TokenSequence:
    channel: int  # 1-based
    tokens: tuple[int, ...]

    def __post_init__(self):
        if EOS in self.tokens[:-1]:
            raise TokenizerError("EOS may only appear as the final token")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class TokenBatch:
    """K channels x B sessions x L positions; inputs are ints for token channels
    and floats for raw coordinate channels."""

    sequences: np.ndarray  # (K, B, L)
    attention_mask: np.ndarray  # (B, L) bool
    lengths: np.ndarray  # (B,)
    session_ids: tuple[str, ...] = ()

    @property
    def K(self) -> int:
        return self.sequences.shape[0]

    @property
    def B(self) -> int:
        return self.sequences.shape[1]

    @property
    def L(self) -> int:
        return self.sequences.shape[2]


def _axis_tokens(m: ROIMap, xs, ys, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    c = columns_of(m, xs)
    r = rows_of(m, ys)
    t1 = np.where(c == OFF, OFF_TOKEN, N_SPECIALS + c)
    t2 = np.where(r == OFF, OFF_TOKEN, N_SPECIALS + vocab.n_cols + r)
    return t1.tolist() + [EOS], t2.tolist() + [EOS]


def tokenize_fixations(g: GazeSequence, m: ROIMap) -> tuple[TokenSequence, TokenSequence]:
    """(column tokens of x, row tokens of y), each terminated by EOS."""
    if g.modality is not Modality.FIXATION:
        raise TokenizerError(f"expected fixation data, got {g.modality.value}")
    vocab = Vocabulary(m.n_rows, m.n_cols)
    xy = g.channels()
    t1, t2 = _axis_tokens(m, xy[0], xy[1], vocab)
    return TokenSequence(1, tuple(t1)), TokenSequence(2, tuple(t2))


def tokenize_binocular(g: GazeSequence, m: ROIMap) -> tuple[TokenSequence, ...]:
    """Channels (left-x, left-y, right-x, right-y) as column/row tokens."""
    if g.modality is not Modality.BINOCULAR_RAW:
        raise TokenizerError(f"expected binocular raw data, got {g.modality.value}")
    vocab = Vocabulary(m.n_rows, m.n_cols)
    lx, ly, rx, ry = g.channels()
    t1, t2 = _axis_tokens(m, lx, ly, vocab)
    t3, t4 = _axis_tokens(m, rx, ry, vocab)
    return tuple(TokenSequence(k + 1, tuple(t)) for k, t in enumerate((t1, t2, t3, t4)))


def tokenize(g: GazeSequence, m: ROIMap) -> tuple[TokenSequence, ...]:
    if g.modality is Modality.FIXATION:
        return tokenize_fixations(g, m)
    return tokenize_binocular(g, m)


# ------------------------------------------------------------------ chronos

@dataclass(frozen=True)
class ChronosQuantizer:
    n_bins: int = 64
    lo: float = 0.0
    hi: float = 3.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise TokenizerError("n_bins must be >= 2")
        if not self.lo < self.hi:
            raise TokenizerError("need lo < hi")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + self.n_bins

    def scale(self, series) -> np.ndarray:
        s = np.asarray(series, dtype=np.float64)
        if s.size == 0:
            raise TokenizerError("empty series")
        meanabs = float(np.mean(np.abs(s)))
        if not meanabs > 0:
            raise TokenizerError("degenerate scale: mean absolute value is zero")
        return s / meanabs

    def quantize(self, scaled) -> np.ndarray:
        """Bin index of each (already scaled) value; clamped into [lo, hi]."""
        v = np.clip(np.asarray(scaled, dtype=np.float64), self.lo, self.hi)
        idx = np.floor((v - self.lo) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)

    def dequantize(self, bins) -> np.ndarray:
        """Bin centres."""
        return self.lo + (np.asarray(bins) + 0.5) * self.width


def chronos_tokenize(series, n_bins: int, lo: float, hi: float, channel: int = 1) -> TokenSequence:
    """Mean-absolute scaling, clamping to [lo, hi] and uniform binning.

    Token id of bin ``i`` is ``N_SPECIALS + i``; EOS is appended.
    """
    return chronos_token_sequence(series, ChronosQuantizer(n_bins, lo, hi), channel)


def chronos_token_sequence(series, q: ChronosQuantizer, channel: int) -> TokenSequence:
    bins = q.quantize(q.scale(series))
    return TokenSequence(channel, tuple((bins + N_SPECIALS).tolist()) + (EOS,))


def tokenize_chronos(g: GazeSequence, q: ChronosQuantizer) -> tuple[TokenSequence, ...]:
    return tuple(chronos_token_sequence(ch, q, k + 1) for k, ch in enumerate(g.channels()))


# ------------------------------------------------------------------- batching

def pad_to_batch(groups: Sequence[Sequence[TokenSequence]], L: int, truncate: bool = False,
                 session_ids: Sequence[str] = ()) -> TokenBatch:
    """Right-pad every channel of every session to ``L`` with PAD.

    With ``truncate`` a longer sequence keeps its first ``L - 1`` tokens plus EOS.
    """
    if L < 2:
        raise TokenizerError("L must be at least 2")
    if not groups:
        raise TokenizerError("empty batch")
    K = len(groups[0])
    B = len(groups)
    seqs = np.full((K, B, L), PAD, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, group in enumerate(groups):
        if len(group) != K:
            raise TokenizerError("all sessions need the same number of channels")
        n = len(group[0])
        if any(len(s) != n for s in group):
            raise TokenizerError("channels of one session must share a length")
        if n > L:
            if not truncate:
                raise TokenizerError(f"sequence of length {n} exceeds L={L}")
            for k, s in enumerate(group):
                body = [t for t in s.tokens if t != EOS][: L - 1]
                seqs[k, b, :L] = body + [EOS]
            n = L
        else:
            for k, s in enumerate(group):
                seqs[k, b, :n] = s.tokens
        lengths[b] = n
    mask = np.arange(L)[None, :] < lengths[:, None]
    return TokenBatch(seqs, mask, lengths, tuple(session_ids))


def pad_raw_batch(groups: Sequence[np.ndarray], L: int, truncate: bool = False,
                  session_ids: Sequence[str] = ()) -> TokenBatch:
    """Continuous counterpart of :func:`pad_to_batch` for K x T coordinate arrays
    (no EOS; padding value 0)."""
    if L < 1:
        raise TokenizerError("L must be positive")
    K = groups[0].shape[0]
    B = len(groups)
    seqs = np.zeros((K, B, L))
    lengths = np.zeros(B, dtype=np.int64)
    for b, arr in enumerate(groups):
        n = arr.shape[1]
        if n > L:
            if not truncate:
                raise TokenizerError(f"sequence of length {n} exceeds L={L}")
            n = L
        seqs[:, b, :n] = arr[:, :n]
        lengths[b] = n
    mask = np.arange(L)[None, :] < lengths[:, None]
    return TokenBatch(seqs, mask, lengths, tuple(session_ids))
