"""Bandwidth-constrained, delayed transmission of local estimates.

Each sink node may send only r of the n estimate components per tick.  The
selected component subset is drawn per tick from a categorical law over all
binomial(n, r) subsets; packets then traverse a constant-delay (or
bounded-time-varying, prolonged-to-the-bound) link to the fusion center.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .linalg import frozen

SIMPLEX_TOL = 1e-12

_HEADER = struct.Struct("<HQI")  # node:u16, t_sent:u64, mask_index:u32


class ChannelError(ValueError):
    """Contract violation in the reduction/delay channel."""


def mask_table(n: int, r: int) -> np.ndarray:
    """All r-of-n selection masks as a (binomial(n,r), n) 0/1 array.

    Rows are ordered lexicographically by the selected index set, so the
    probability-vector indexing is reproducible.
    """
    if not 1 <= r <= n:
        raise ChannelError(f"need 1 <= r <= n, got r={r}, n={n}")
    rows = []
    for subset in combinations(range(n), r):
        row = np.zeros(n)
        row[list(subset)] = 1.0
        rows.append(row)
    return np.array(rows)


def enumerate_masks(n: int, r: int) -> list[np.ndarray]:
    """The masks of mask_table as diagonal 0/1 matrices (production range 1 <= r < n)."""
    if r >= n:
        raise ChannelError(f"production masks require r < n, got r={r}, n={n}")
    return [np.diag(row) for row in mask_table(n, r)]


def outer_diag(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Outer product of two diagonals: result[k, l] = u[k] * b[l]."""
    return np.outer(u, b)


@dataclass(frozen=True)
class SelectionScheme:
    """Per-node selection law and its exact moment matrices.

    masks holds the 0/1 diagonal vectors, probs the categorical law over
    them.  Hbar is the mean mask diagonal; Lambda, V, W are the second
    moments E{H (.) H}, E{H (.) (I-H)}, E{(I-H) (.) (I-H)} under the
    diagonal-outer-product, used throughout the covariance engine.  U maps
    the probability vector to per-component marginals: Hbar = U @ probs.
    """

    node: int
    n: int
    r: int
    masks: np.ndarray          # (Delta, n) 0/1
    probs: np.ndarray          # (Delta,)
    Hbar: np.ndarray           # (n,) mean mask diagonal
    Lambda: np.ndarray         # (n, n)
    V: np.ndarray              # (n, n)
    W: np.ndarray              # (n, n)
    U: np.ndarray              # (n, Delta) incidence
    cum_probs: np.ndarray = None

    def __post_init__(self):
        if self.cum_probs is None:
            object.__setattr__(self, "cum_probs", frozen(np.cumsum(self.probs)))

    @property
    def delta(self) -> int:
        return self.masks.shape[0]

    def mask_diag(self, index: int) -> np.ndarray:
        return self.masks[index]

    def selected_components(self, index: int) -> np.ndarray:
        return np.flatnonzero(self.masks[index] > 0.5)

    @property
    def Hbar_matrix(self) -> np.ndarray:
        return np.diag(self.Hbar)


def build_scheme(n: int, r: int, probs, node: int = 0,
                 allow_full: bool = False) -> SelectionScheme:
    """Build a SelectionScheme, computing all moment matrices by exact summation.

    allow_full=True admits the degenerate r = n case (single all-ones mask),
    used by tests to recover the uncompressed limit.
    """
    if allow_full:
        if not 1 <= r <= n:
            raise ChannelError(f"need 1 <= r <= n, got r={r}, n={n}")
        masks = mask_table(n, r)
    else:
        if not 1 <= r < n:
            raise ChannelError(f"need 1 <= r < n, got r={r}, n={n}")
        masks = mask_table(n, r)

    probs = np.asarray(probs, dtype=float).reshape(-1)
    if probs.shape[0] != masks.shape[0]:
        raise ChannelError(
            f"probability vector length {probs.shape[0]} != number of masks {masks.shape[0]}"
        )
    if np.any(probs < -SIMPLEX_TOL) or abs(float(probs.sum()) - 1.0) > SIMPLEX_TOL:
        raise ChannelError("selection probabilities must lie on the simplex")
    probs = np.clip(probs, 0.0, None)

    Hbar = probs @ masks
    Lam = np.zeros((n, n))
    V = np.zeros((n, n))
    W = np.zeros((n, n))
    for p, h in zip(probs, masks):
        comp = 1.0 - h
        Lam += p * outer_diag(h, h)
        V += p * outer_diag(h, comp)
        W += p * outer_diag(comp, comp)
    U = masks.T.copy()

    return SelectionScheme(
        node=node, n=n, r=r, masks=frozen(masks), probs=frozen(probs),
        Hbar=frozen(Hbar), Lambda=frozen(Lam), V=frozen(V), W=frozen(W),
        U=frozen(U),
    )


def sample_mask(scheme: SelectionScheme, rng: np.random.Generator) -> int:
    """Draw one mask index from the scheme's categorical law."""
    idx = int(np.searchsorted(scheme.cum_probs, rng.random(), side="right"))
    return min(idx, scheme.delta - 1)


@dataclass(frozen=True)
class CompressedPacket:
    """The r selected components of one local estimate, in ascending component order."""

    node: int
    t_sent: int
    mask_index: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", frozen(np.asarray(self.values, dtype=float).reshape(-1)))

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.node, self.t_sent, self.mask_index) + \
            self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedPacket":
        node, t_sent, mask_index = _HEADER.unpack_from(data)
        values = np.frombuffer(data[_HEADER.size:], dtype="<f8")
        return cls(node=node, t_sent=int(t_sent), mask_index=int(mask_index),
                   values=values.copy())


def make_packet(scheme: SelectionScheme, mask_index: int, xhat: np.ndarray,
                t_sent: int) -> CompressedPacket:
    """Select the masked components of a local estimate for transmission."""
    sel = scheme.selected_components(mask_index)
    return CompressedPacket(node=scheme.node, t_sent=t_sent, mask_index=mask_index,
                            values=np.asarray(xhat, dtype=float)[sel])


@dataclass
class DelayedLink:
    """FIFO link from one sink node to the fusion center.

    Constant mode delivers a packet sent at t exactly at t + delay.  Bounded
    mode accepts per-packet raw delays <= bound and prolongs every delivery
    to exactly t + bound, which restores the constant-delay timing at the
    fusion center.
    """

    node: int
    delay: int = 0
    mode: str = "constant"
    bound: int | None = None
    _buffer: list[tuple[int, CompressedPacket]] = field(default_factory=list)
    _last_sent: int | None = None

    def __post_init__(self):
        if self.mode not in ("constant", "bounded"):
            raise ChannelError(f"unknown link mode {self.mode!r}")
        if self.mode == "bounded":
            if self.bound is None:
                raise ChannelError("bounded mode requires a delay bound")
            self.delay = int(self.bound)
        if self.delay < 0:
            raise ChannelError("delay must be nonnegative")

    @property
    def effective_delay(self) -> int:
        return self.delay

    def send_and_deliver(self, packet: CompressedPacket | None, now: int,
                         raw_delay: int | None = None) -> CompressedPacket | None:
        """Enqueue packet (sent at `now`) and pop the packet due at `now`, if any."""
        if packet is not None:
            if packet.t_sent != now:
                raise ChannelError(f"packet t_sent={packet.t_sent} does not match now={now}")
            if self._last_sent is not None and packet.t_sent <= self._last_sent:
                raise ChannelError("packets must be enqueued with increasing t_sent")
            if self.mode == "bounded":
                raw = self.delay if raw_delay is None else int(raw_delay)
                if not 0 <= raw <= self.delay:
                    raise ChannelError(
                        f"raw delay {raw} outside [0, {self.delay}]"
                    )
            self._last_sent = packet.t_sent
            self._buffer.append((packet.t_sent + self.delay, packet))
        if self._buffer and self._buffer[0][0] == now:
            return self._buffer.pop(0)[1]
        return None


def send_and_deliver(link: DelayedLink, packet: CompressedPacket | None, now: int,
                     raw_delay: int | None = None) -> CompressedPacket | None:
    return link.send_and_deliver(packet, now, raw_delay=raw_delay)
