"""Baseline history-based branch predictors the BOSS mux falls back to.

``predict`` is side-effect free; ``update`` trains counters, tags and the
global history in place.
"""
from __future__ import annotations

import hashlib

import numpy as np

TAGE_HISTORIES = (5, 15, 44, 130)


def _check_pow2(name: str, n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ValueError(f"{name} must be a power of two, got {n}")


class Predictor:
    kind = "base"

    def predict(self, pc: int) -> bool:
        raise NotImplementedError

    def update(self, pc: int, taken: bool) -> None:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def fingerprint(self) -> str:
        """Digest of all mutable state; equal digests mean equal state."""
        h = hashlib.sha1()
        for v in self._state():
            h.update(np.asarray(v).tobytes() if not isinstance(v, int) else str(v).encode())
        return h.hexdigest()

    def _state(self):
        return ()


class AlwaysTaken(Predictor):
    kind = "always_taken"

    def predict(self, pc):
        return True

    def update(self, pc, taken):
        pass


class Bimodal(Predictor):
    """Per-PC 2-bit saturating counters, initialized weakly not-taken (01)."""
    kind = "bimodal"

    def __init__(self, entries: int = 4096):
        _check_pow2("entries", entries)
        self.entries = entries
        self.mask = entries - 1
        self.counters = np.ones(entries, dtype=np.uint8)

    def predict(self, pc):
        return bool(self.counters[pc & self.mask] >= 2)

    def update(self, pc, taken):
        i = pc & self.mask
        c = self.counters[i]
        if taken:
            if c < 3:
                self.counters[i] = c + 1
        elif c > 0:
            self.counters[i] = c - 1

    def config(self):
        return {"kind": self.kind, "entries": self.entries}

    def _state(self):
        return (self.counters,)


class Gshare(Predictor):
    kind = "gshare"

    def __init__(self, entries: int = 4096, history_bits: int = 12):
        _check_pow2("entries", entries)
        if history_bits < 0:
            raise ValueError("history_bits must be >= 0")
        self.entries, self.history_bits = entries, history_bits
        self.mask = entries - 1
        self.hmask = (1 << history_bits) - 1
        self.ghist = 0
        self.counters = np.ones(entries, dtype=np.uint8)

    def index(self, pc: int) -> int:
        return (pc ^ self.ghist) & self.mask

    def predict(self, pc):
        return bool(self.counters[self.index(pc)] >= 2)

    def update(self, pc, taken):
        i = self.index(pc)
        c = self.counters[i]
        if taken:
            if c < 3:
                self.counters[i] = c + 1
        elif c > 0:
            self.counters[i] = c - 1
        self.ghist = ((self.ghist << 1) | int(taken)) & self.hmask

    def config(self):
        return {"kind": self.kind, "entries": self.entries, "history_bits": self.history_bits}

    def _state(self):
        return (self.counters, self.ghist)


def fold_history(ghist: int, length: int, bits: int) -> int:
    """XOR-fold the youngest ``length`` history bits down to ``bits`` bits."""
    h = ghist & ((1 << length) - 1)
    out = 0
    mask = (1 << bits) - 1
    while h:
        out ^= h & mask
        h >>= bits
    return out


class TageLite(Predictor):
    """Bimodal base plus geometric-history tagged tables, no SC or loop predictor.

    Tagged entries hold a signed 3-bit counter (taken when >= 0), an 8-bit tag
    and a 2-bit useful counter. On a misprediction one entry is allocated in a
    longer-history table whose useful counter is zero; ties are broken with
    the seeded RNG. If none is free, the useful counters of all longer tables
    decay instead.
    """
    kind = "tage"
    CTR_MIN, CTR_MAX, U_MAX = -4, 3, 3
    U_RESET_PERIOD = 1 << 18

    def __init__(self, base_entries: int = 2048, tagged_entries: int = 512,
                 histories=TAGE_HISTORIES, tag_bits: int = 8, seed: int = 0):
        _check_pow2("base_entries", base_entries)
        _check_pow2("tagged_entries", tagged_entries)
        self.base_entries, self.tagged_entries = base_entries, tagged_entries
        self.histories = tuple(histories)
        self.tag_bits = tag_bits
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.index_bits = tagged_entries.bit_length() - 1
        self.base = np.ones(base_entries, dtype=np.uint8)
        n = len(self.histories)
        self.tags = np.full((n, tagged_entries), -1, dtype=np.int32)
        self.ctrs = np.zeros((n, tagged_entries), dtype=np.int8)
        self.useful = np.zeros((n, tagged_entries), dtype=np.uint8)
        self.ghist = 0
        self.hist_mask = (1 << max(self.histories)) - 1
        self.updates = 0

    def _index(self, t: int, pc: int) -> int:
        bits = self.index_bits
        if bits == 0:
            return 0
        h = fold_history(self.ghist, self.histories[t], bits)
        return (pc ^ (pc >> (t + 1)) ^ h) & ((1 << bits) - 1)

    def _tag(self, t: int, pc: int) -> int:
        length = self.histories[t]
        h = fold_history(self.ghist, length, self.tag_bits)
        h2 = fold_history(self.ghist, length, self.tag_bits - 1)
        return (pc ^ h ^ (h2 << 1)) & ((1 << self.tag_bits) - 1)

    def _lookup(self, pc: int):
        """(provider table or -1, provider idx, alt table or -1, alt idx)."""
        hits = []
        for t in range(len(self.histories) - 1, -1, -1):
            i = self._index(t, pc)
            if self.tags[t, i] == self._tag(t, pc):
                hits.append((t, i))
                if len(hits) == 2:
                    break
        prov = hits[0] if hits else (-1, -1)
        alt = hits[1] if len(hits) > 1 else (-1, -1)
        return prov + alt

    def _base_pred(self, pc):
        return bool(self.base[pc % self.base_entries] >= 2)

    def _pred_from(self, t, i, pc):
        if t < 0:
            return self._base_pred(pc)
        return bool(self.ctrs[t, i] >= 0)

    def predict(self, pc):
        pt, pi, _, _ = self._lookup(pc)
        return self._pred_from(pt, pi, pc)

    def update(self, pc, taken):
        taken = bool(taken)
        pt, pi, at, ai = self._lookup(pc)
        pred = self._pred_from(pt, pi, pc)
        if pt >= 0:
            alt = self._pred_from(at, ai, pc)
            if alt != pred:
                u = int(self.useful[pt, pi])
                self.useful[pt, pi] = min(u + 1, self.U_MAX) if pred == taken else max(u - 1, 0)
            c = int(self.ctrs[pt, pi])
            self.ctrs[pt, pi] = min(c + 1, self.CTR_MAX) if taken else max(c - 1, self.CTR_MIN)
        else:
            b = pc % self.base_entries
            c = int(self.base[b])
            self.base[b] = min(c + 1, 3) if taken else max(c - 1, 0)
        if pred != taken and pt < len(self.histories) - 1:
            self._allocate(pc, taken, pt)
        self.updates += 1
        if self.updates % self.U_RESET_PERIOD == 0:
            self.useful >>= 1
        self.ghist = ((self.ghist << 1) | int(taken)) & self.hist_mask

    def _allocate(self, pc, taken, provider):
        longer = range(provider + 1, len(self.histories))
        free = [t for t in longer if self.useful[t, self._index(t, pc)] == 0]
        if not free:
            for t in longer:
                i = self._index(t, pc)
                self.useful[t, i] = max(int(self.useful[t, i]) - 1, 0)
            return
        t = free[0] if len(free) == 1 else int(free[self.rng.integers(len(free))])
        i = self._index(t, pc)
        self.tags[t, i] = self._tag(t, pc)
        self.ctrs[t, i] = 0 if taken else -1
        self.useful[t, i] = 0

    def config(self):
        return {"kind": self.kind, "base_entries": self.base_entries,
                "tagged_entries": self.tagged_entries, "histories": list(self.histories),
                "tag_bits": self.tag_bits, "seed": self.seed}

    def _state(self):
        return (self.base, self.tags, self.ctrs, self.useful, self.ghist)


_KINDS = {"always_taken": AlwaysTaken, "bimodal": Bimodal, "gshare": Gshare, "tage": TageLite}
_ALIASES = {"alwaystaken": "always_taken", "taken": "always_taken", "tagelite": "tage",
            "tage_lite": "tage", "tage-lite": "tage"}


def make_predictor(kind: str = "tage", seed: int = 0, **sizes) -> Predictor:
    """Build a freshly initialized predictor of the named kind."""
    kind = _ALIASES.get(kind.lower(), kind.lower())
    if kind not in _KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    if kind == "tage":
        return TageLite(seed=seed, **sizes)
    return _KINDS[kind](**sizes)
