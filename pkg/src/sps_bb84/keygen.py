"""End-to-end secret-key generation from labeled detection streams.

The pipeline turns one simulated acquisition into keys: basis sifting,
parameter-estimation disclosure, interactive parity reconciliation,
verification hashing, and Toeplitz privacy amplification, with every
classical-channel message size accounted so the measured leakage (not a
model) feeds the finite-size extractable-length formula.

Bit conventions match the detector channels: within each basis the first
port (H or D) encodes 0 and the second (V or A) encodes 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .finitekey import (
    FiniteBlockInput,
    FiniteKeyReport,
    finite_skb_per_pulse,
)
from .keyrate import multiphoton_bound
from .montecarlo import AliceRecord, Scenario, TagStream, simulate_run
from .params import ParameterError, _require
from .tagproc import InsufficientStatisticsError

__all__ = [
    "EstimateResult",
    "KeySessionLedger",
    "ReconciliationError",
    "SessionAbort",
    "SessionPolicy",
    "SessionResult",
    "SiftedKey",
    "estimate_error_rate",
    "privacy_amplify",
    "reconcile",
    "run_session",
    "sift",
    "verification_tag_length",
    "verify",
]

#: spawn-key prefix separating session-stage generators from the
#: simulator's per-chunk generators, which spawn on a single index
_SESSION_SPAWN = 0x5E5510


class ReconciliationError(RuntimeError):
    """Parity reconciliation failed to converge within the pass cap.

    Usually means the error-rate estimate fed to ``reconcile`` was far
    below the real error rate, so the initial blocks hide most errors.
    """


class SessionAbort(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# sifting
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SiftedKey:
    """Receiver-side key bits for one basis after sifting.

    ``indices`` are the originating pulse windows, strictly increasing;
    the transmitter's matching bits are recoverable as
    ``alice.bits[key.indices]``.
    """

    basis: str
    bits: np.ndarray
    indices: np.ndarray
    run_id: str = ""

    def __post_init__(self) -> None:
        _require(self.basis in ("Z", "X"), "basis", "must be 'Z' or 'X'")
        bits = np.asarray(self.bits, dtype=np.uint8)
        indices = np.asarray(self.indices, dtype=np.int64)
        _require(
            len(bits) == len(indices),
            "bits",
            "bits and indices must have equal length",
        )
        _require(
            bool((bits <= 1).all()), "bits", "bits must be 0 or 1"
        )
        if len(indices) > 1:
            _require(
                bool((np.diff(indices) > 0).all()),
                "indices",
                "pulse indices must be strictly increasing",
            )
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return len(self.bits)


def sift(
    alice: AliceRecord, detections: TagStream, run_id: str = ""
) -> tuple[SiftedKey, SiftedKey]:
    """Split detections into matched-basis keys, one bit per pulse window.

    Only the earliest tag of each pulse window is kept (later tags are
    dead-time survivors or tail spill), and only windows where the
    receiver's measured basis equals the transmitter's preparation basis
    contribute a bit.
    """
    windows = detections.window_index()
    valid = (windows >= 0) & (windows < len(alice))
    windows = windows[valid]
    channels = detections.channel[valid]
    kept_windows, first = np.unique(windows, return_index=True)
    kept_channels = channels[first]

    bob_basis = kept_channels >> 1
    alice_basis = alice.bases[kept_windows]
    matched = bob_basis == alice_basis

    keys = []
    for code, name in ((0, "Z"), (1, "X")):
        select = matched & (bob_basis == code)
        keys.append(
            SiftedKey(
                basis=name,
                bits=(kept_channels[select] & 1).astype(np.uint8),
                indices=kept_windows[select],
                run_id=run_id,
            )
        )
    return keys[0], keys[1]


# ---------------------------------------------------------------------------
# parameter estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class EstimateResult:
    """Observed error rate of a disclosed sample, plus the kept remainder."""

    error_rate: float
    n_disclosed: int
    alice_remaining: np.ndarray
    bob_remaining: np.ndarray
    disclosed_indices: np.ndarray


def estimate_error_rate(
    alice_bits: np.ndarray,
    bob_bits: np.ndarray,
    disclose_fraction: float = 0.10,
    rng: np.random.Generator | None = None,
) -> EstimateResult:
    """Disclose a uniform random sample and measure its mismatch fraction.

    Disclosed positions are removed from both returned keys.  A fraction
    of 1 discloses everything (the remainder is then empty).
    """
    alice_bits = np.asarray(alice_bits, dtype=np.uint8)
    bob_bits = np.asarray(bob_bits, dtype=np.uint8)
    _require(
        len(alice_bits) == len(bob_bits),
        "bob_bits",
        "keys must have equal length",
    )
    _require(
        0.0 < disclose_fraction <= 1.0,
        "disclose_fraction",
        "must lie in (0, 1]",
    )
    n = len(alice_bits)
    if n == 0:
        raise InsufficientStatisticsError(
            "parameter-estimation sample is empty"
        )
    if rng is None:
        rng = np.random.default_rng()
    n_disclosed = min(n, max(1, int(round(disclose_fraction * n))))
    positions = np.sort(rng.choice(n, size=n_disclosed, replace=False))
    mismatches = int(
        (alice_bits[positions] != bob_bits[positions]).sum()
    )
    keep = np.ones(n, dtype=bool)
    keep[positions] = False
    return EstimateResult(
        error_rate=mismatches / n_disclosed,
        n_disclosed=n_disclosed,
        alice_remaining=alice_bits[keep],
        bob_remaining=bob_bits[keep],
        disclosed_indices=positions,
    )


# ---------------------------------------------------------------------------
# reconciliation (interactive parity exchange)
# ---------------------------------------------------------------------------

def _initial_block_size(n: int, qber_estimate: float) -> int:
    """Power-of-two block near 0.73/q, clamped to [2, n/2]."""
    cap = 2 ** max(1, int(math.floor(math.log2(max(n, 4) / 2))))
    target = 0.73 / max(qber_estimate, 1.0 / n)
    size = 2 ** max(1, math.ceil(math.log2(min(target, cap))))
    return min(size, cap)


def _block_parity(diff: np.ndarray, order: np.ndarray, lo: int, hi: int) -> int:
    return int(np.bitwise_xor.reduce(diff[order[lo:hi]])) if hi > lo else 0


def reconcile(
    alice_bits: np.ndarray,
    bob_bits: np.ndarray,
    qber_estimate: float,
    rng: np.random.Generator | None = None,
    max_passes: int = 25,
    shuffle_first_pass: bool = False,
) -> tuple[np.ndarray, int]:
    """Correct ``bob_bits`` toward ``alice_bits`` by parity exchange.

    Multi-pass blocked parity comparison with binary search inside
    mismatching blocks; every corrected bit re-opens the blocks covering
    it in earlier passes (whose stored parities flip), so error pairs
    masked in one pass are unwound by later ones.  Block sizes start near
    0.73 / qber_estimate and double each pass under a fresh shuffle; by
    default the first pass is unshuffled, so a single error is located
    directly (retries set ``shuffle_first_pass`` so a repeat run draws
    fresh blocks).

    Returns the corrected key and the number of parity bits disclosed
    (block parities plus one bit per binary-search level).  Terminates
    after the first pass whose top-level parities all agree — error
    pairs inside one block can survive that stop, which is why sessions
    follow up with ``verify`` — and raises ``ReconciliationError`` when
    mismatches persist past ``max_passes``, the signature of an
    underestimated error rate.
    """
    alice_bits = np.asarray(alice_bits, dtype=np.uint8)
    bob_bits = np.asarray(bob_bits, dtype=np.uint8)
    _require(
        len(alice_bits) == len(bob_bits),
        "bob_bits",
        "keys must have equal length",
    )
    _require(
        0.0 <= qber_estimate <= 0.5,
        "qber_estimate",
        "must lie in [0, 0.5]",
    )
    n = len(alice_bits)
    if n == 0:
        return bob_bits.copy(), 0
    if rng is None:
        rng = np.random.default_rng()

    diff = np.bitwise_xor(alice_bits, bob_bits)
    corrected = bob_bits.copy()
    leaked = 0
    # per pass: bit order, block size, inverse order, stored parities
    orders: list[np.ndarray] = []
    sizes: list[int] = []
    inverses: list[np.ndarray] = []
    parities: list[np.ndarray] = []

    def search_block(pass_index: int, block: int) -> int:
        """Binary-search one odd block; returns the corrected position."""
        nonlocal leaked
        order = orders[pass_index]
        size = sizes[pass_index]
        lo = block * size
        hi = min(lo + size, n)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            leaked += 1  # transmitter discloses the left half's parity
            if _block_parity(diff, order, lo, mid) == 1:
                hi = mid
            else:
                lo = mid
        return int(order[lo])

    def correct(position: int, source_pass: int) -> list[tuple[int, int]]:
        diff[position] ^= 1
        corrected[position] ^= 1
        reopened = []
        for q in range(len(orders)):
            block = int(inverses[q][position]) // sizes[q]
            parities[q][block] ^= 1  # both sides update known parities
            if q != source_pass and parities[q][block] == 1:
                reopened.append((q, block))
        return reopened

    total_corrections = 0
    block_size = _initial_block_size(n, qber_estimate)
    for pass_index in range(max_passes):
        if pass_index == 0 and not shuffle_first_pass:
            order = np.arange(n, dtype=np.int64)
        else:
            order = rng.permutation(n).astype(np.int64)
        inverse = np.empty(n, dtype=np.int64)
        inverse[order] = np.arange(n, dtype=np.int64)
        boundaries = np.arange(0, n, block_size)
        block_parities = np.bitwise_xor.reduceat(diff[order], boundaries)
        leaked += len(boundaries)

        orders.append(order)
        sizes.append(block_size)
        inverses.append(inverse)
        parities.append(block_parities.astype(np.uint8))

        queue = [
            (pass_index, int(b)) for b in np.nonzero(block_parities)[0]
        ]
        clean_pass = not queue
        while queue:
            q, block = queue.pop()
            if parities[q][block] == 0:
                continue  # already evened out by an earlier correction
            position = search_block(q, block)
            total_corrections += 1
            queue.extend(correct(position, q))
            # the searched block's parity flip is folded in by correct()

        if clean_pass:
            return corrected, leaked
        block_size = min(
            2 * block_size,
            2 ** max(1, int(math.floor(math.log2(max(n, 4) / 2)))),
        )
    raise ReconciliationError(
        f"parity reconciliation still finding errors after {max_passes} "
        f"passes ({total_corrections} corrected); the error-rate estimate "
        "was likely far too low"
    )


# ---------------------------------------------------------------------------
# universal hashing (verification and privacy amplification)
# ---------------------------------------------------------------------------

#: tags at most this long are computed row by row; longer outputs use FFT
_ROW_PATH_MAX_TAG = 64


def _toeplitz_hash(
    bits: np.ndarray, stream: np.ndarray, out_len: int
) -> np.ndarray:
    """Multiply a Toeplitz bit matrix (rows built from ``stream``) by bits.

    Row j of the matrix is ``stream[j + n - 1 - i]`` over columns i, so
    row j is a reversed window of the stream and the whole product is a
    slice of the linear convolution of the stream with the input.  Short
    tags (verification) take the per-row parity directly; long outputs
    (privacy amplification) go through FFT convolution, whose counts stay
    far below 2**53 and therefore round exactly.
    """
    n = len(bits)
    if out_len == 0:
        return np.zeros(0, dtype=np.uint8)
    if n == 0:
        return np.zeros(out_len, dtype=np.uint8)
    if out_len <= _ROW_PATH_MAX_TAG:
        signal = bits[::-1]
        return np.array(
            [
                np.count_nonzero(stream[j : j + n] & signal) & 1
                for j in range(out_len)
            ],
            dtype=np.uint8,
        )
    full = np.rint(
        fftconvolve(stream.astype(np.float64), bits.astype(np.float64))
    ).astype(np.int64)
    return (full[n - 1 : n - 1 + out_len] & 1).astype(np.uint8)


def verification_tag_length(eps_cor: float) -> int:
    """Hash-tag length giving collision probability <= ``eps_cor``."""
    _require(0.0 < eps_cor < 1.0, "eps_cor", "must lie in (0, 1)")
    return math.ceil(math.log2(2.0 / eps_cor))


def verify(
    alice_bits: np.ndarray,
    bob_bits: np.ndarray,
    eps_cor: float = 1e-15,
    rng: np.random.Generator | None = None,
) -> bool:
    """Compare Toeplitz hash tags of the two keys under a fresh seed.

    Equal keys always pass; unequal keys pass with probability at most
    2**-tag_length <= eps_cor, the two-universal collision bound.
    """
    alice_bits = np.asarray(alice_bits, dtype=np.uint8)
    bob_bits = np.asarray(bob_bits, dtype=np.uint8)
    _require(
        len(alice_bits) == len(bob_bits),
        "bob_bits",
        "keys must have equal length",
    )
    n = len(alice_bits)
    if n == 0:
        return True
    if rng is None:
        rng = np.random.default_rng()
    tag_len = verification_tag_length(eps_cor)
    stream = rng.integers(0, 2, size=tag_len + n - 1, dtype=np.uint8)
    tag_a = _toeplitz_hash(alice_bits, stream, tag_len)
    tag_b = _toeplitz_hash(bob_bits, stream, tag_len)
    return bool(np.array_equal(tag_a, tag_b))


def privacy_amplify(
    key_bits: np.ndarray, final_length: int, seed: int
) -> np.ndarray:
    """Compress a verified key to ``final_length`` secret bits.

    Toeplitz hashing keyed by the first (n + final_length - 1) bits of a
    counter-based pseudorandom stream derived from ``seed``; the output
    is a pure function of (key, seed) on every platform.
    """
    key_bits = np.asarray(key_bits, dtype=np.uint8)
    n = len(key_bits)
    _require(final_length >= 0, "final_length", "must be non-negative")
    _require(
        final_length <= n,
        "final_length",
        "cannot exceed the input key length",
    )
    _require(0 <= seed < 2**64, "seed", "must fit in 64 bits")
    if final_length == 0:
        return np.zeros(0, dtype=np.uint8)
    stream_rng = np.random.Generator(np.random.Philox(key=seed))
    stream = stream_rng.integers(
        0, 2, size=n + final_length - 1, dtype=np.uint8
    )
    return _toeplitz_hash(key_bits, stream, final_length)


# ---------------------------------------------------------------------------
# full session
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SessionPolicy:
    """Classical post-processing knobs for one key session.

    ``max_verify_rounds`` bounds reconcile→verify repetitions: a failed
    verification means errors survived reconciliation (typically a pair
    masked inside one parity block), so the session reconciles again
    under fresh shuffles with a doubled error assumption, charging every
    extra disclosure to the leakage account.
    """

    disclose_fraction: float = 0.10
    qber_floor: float = 1e-3
    max_reconcile_passes: int = 25
    max_verify_rounds: int = 8

    def __post_init__(self) -> None:
        _require(
            0.0 < self.disclose_fraction <= 1.0,
            "disclose_fraction",
            "must lie in (0, 1]",
        )
        _require(
            0.0 < self.qber_floor <= 0.5,
            "qber_floor",
            "must lie in (0, 0.5]",
        )
        _require(
            self.max_reconcile_passes >= 1,
            "max_reconcile_passes",
            "must be >= 1",
        )
        _require(
            self.max_verify_rounds >= 1,
            "max_verify_rounds",
            "must be >= 1",
        )


@dataclass(frozen=True, slots=True)
class KeySessionLedger:
    """Exact bit accounting of one session.

    Every stage conserves key material: the estimation stage splits the
    diagonal-basis key into disclosed and discarded bits; amplification
    splits the rectilinear key into the final key and its shortening.
    ``pa_shortening`` is defined by the closing identity

        final = (raw_z + raw_x) - disclosed - reconciliation_leak
                - verification_bits - pa_shortening

    and the final length is never negative.  ``reconciliation_leak``
    counts information *about* the key sent over the classical channel —
    every disclosed parity plus the tag of any failed verification round
    — not key bits removed from it; ``verification_bits`` is the one
    succeeding tag, which the length formula charges separately.
    """

    n_sent: int
    clock_rate: float
    raw_z: int
    raw_x: int
    disclosed_bits: int
    estimation_discards: int
    observed_error_x: float
    corrected_errors: int
    reconciliation_leak: int
    verification_bits: int
    verify_rounds: int
    pa_seed: int
    final_length: int
    pa_shortening: int

    def __post_init__(self) -> None:
        _require(self.final_length >= 0, "final_length", "never negative")
        _require(
            self.raw_x == self.disclosed_bits + self.estimation_discards,
            "estimation_discards",
            "estimation stage must conserve the diagonal-basis key",
        )
        _require(
            self.final_length <= self.raw_z,
            "final_length",
            "cannot exceed the rectilinear-basis key",
        )
        identity = (
            self.raw_z
            + self.raw_x
            - self.disclosed_bits
            - self.reconciliation_leak
            - self.verification_bits
            - self.pa_shortening
        )
        _require(
            identity == self.final_length,
            "pa_shortening",
            "ledger identity must close exactly",
        )

    def as_dict(self) -> dict:
        return {
            "n_sent": self.n_sent,
            "clock_rate_hz": self.clock_rate,
            "raw_z": self.raw_z,
            "raw_x": self.raw_x,
            "disclosed_bits": self.disclosed_bits,
            "estimation_discards": self.estimation_discards,
            "observed_error_x": self.observed_error_x,
            "corrected_errors": self.corrected_errors,
            "reconciliation_leak": self.reconciliation_leak,
            "verification_bits": self.verification_bits,
            "verify_rounds": self.verify_rounds,
            "pa_seed": self.pa_seed,
            "final_length": self.final_length,
            "pa_shortening": self.pa_shortening,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent)


@dataclass(frozen=True, slots=True)
class SessionResult:
    """Keys, ledger, and finite-size evaluation of one session."""

    ledger: KeySessionLedger
    alice_key: np.ndarray
    bob_key: np.ndarray
    finite_report: FiniteKeyReport | None
    transcript: tuple[tuple[str, int], ...]

    @property
    def skb_per_pulse(self) -> float:
        return self.ledger.final_length / self.ledger.n_sent

    @property
    def skr_bits_per_second(self) -> float:
        return self.skb_per_pulse * self.ledger.clock_rate


def _stage_rng(seed: int, stage: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(
        seed, spawn_key=(_SESSION_SPAWN, stage)
    )
    return np.random.Generator(np.random.Philox(sequence))


def run_session(
    scenario: Scenario,
    policy: SessionPolicy = SessionPolicy(),
) -> SessionResult:
    """Run the full pipeline on one simulated acquisition.

    The rectilinear basis carries the key; the diagonal basis is the
    estimation basis, of which ``policy.disclose_fraction`` is revealed
    to bound the phase-error rate.  The measured reconciliation leak
    (not the inefficiency model) enters the extractable-length formula.
    A session beyond the loss tolerance returns an empty key with a
    complete ledger rather than raising.
    """
    alice, stream = simulate_run(scenario)
    z_key, x_key = sift(alice, stream, run_id=f"seed{scenario.seed}")
    raw_z, raw_x = len(z_key), len(x_key)
    point = scenario.operating_point
    budget = point.budget
    protocol = point.protocol
    transcript: list[tuple[str, int]] = []

    if raw_z == 0 or raw_x == 0:
        raise SessionAbort(
            "sifting",
            f"no sifted bits in one basis (Z={raw_z}, X={raw_x}); "
            "increase the pulse budget",
        )

    alice_x = alice.bits[x_key.indices]
    estimate = estimate_error_rate(
        alice_x,
        x_key.bits,
        policy.disclose_fraction,
        rng=_stage_rng(scenario.seed, 0),
    )
    transcript.append(("estimation", 2 * estimate.n_disclosed))

    alice_z = alice.bits[z_key.indices]
    verification_bits = verification_tag_length(budget.eps_cor)
    reconcile_rng = _stage_rng(scenario.seed, 1)
    verify_rng = _stage_rng(scenario.seed, 2)
    corrected = z_key.bits
    assumed_qber = max(estimate.error_rate, policy.qber_floor)
    leak_total = 0
    verify_rounds = 0
    verified = False
    while verify_rounds < policy.max_verify_rounds:
        try:
            corrected, leaked = reconcile(
                alice_z,
                corrected,
                assumed_qber,
                rng=reconcile_rng,
                max_passes=policy.max_reconcile_passes,
                shuffle_first_pass=True,
            )
        except ReconciliationError as exc:
            raise SessionAbort("reconciliation", str(exc)) from exc
        leak_total += leaked
        transcript.append(("reconciliation", leaked))
        verify_rounds += 1
        transcript.append(("verification", 2 * verification_bits))
        if verify(alice_z, corrected, budget.eps_cor, rng=verify_rng):
            verified = True
            break
        # residual errors slipped through every parity block: charge the
        # spent tag, assume a worse channel, and reconcile again
        leak_total += verification_bits
        assumed_qber = min(0.5, 2.0 * assumed_qber)
    if not verified:
        raise SessionAbort(
            "verification",
            f"hash tags still differ after {verify_rounds} "
            "reconcile/verify rounds",
        )
    corrected_errors = int((corrected != z_key.bits).sum())

    block = FiniteBlockInput(
        n_x=estimate.n_disclosed,
        n_z=raw_z,
        observed_error_x=min(0.5, estimate.error_rate),
        observed_error_z=min(0.5, corrected_errors / raw_z),
        n_sent=scenario.n_pulses,
        budget=budget,
        f_ec=protocol.error_correction_inefficiency,
        clock_rate=protocol.clock_rate,
        acquisition_time=scenario.n_pulses / protocol.clock_rate,
        multiphoton_prob=multiphoton_bound(
            point.source, "channel_input", point.link.transmitter_efficiency
        ),
    )
    report = finite_skb_per_pulse(block, lambda_ec=float(leak_total))
    final_length = min(report.final_key_length, raw_z)

    pa_seed = int(_stage_rng(scenario.seed, 3).integers(0, 2**63))
    bob_final = privacy_amplify(corrected, final_length, pa_seed)
    alice_final = privacy_amplify(alice_z, final_length, pa_seed)
    transcript.append(("amplification", 0))

    ledger = KeySessionLedger(
        n_sent=scenario.n_pulses,
        clock_rate=protocol.clock_rate,
        raw_z=raw_z,
        raw_x=raw_x,
        disclosed_bits=estimate.n_disclosed,
        estimation_discards=raw_x - estimate.n_disclosed,
        observed_error_x=estimate.error_rate,
        corrected_errors=corrected_errors,
        reconciliation_leak=leak_total,
        verification_bits=verification_bits,
        verify_rounds=verify_rounds,
        pa_seed=pa_seed,
        final_length=final_length,
        pa_shortening=(
            raw_z
            + raw_x
            - estimate.n_disclosed
            - leak_total
            - verification_bits
            - final_length
        ),
    )
    return SessionResult(
        ledger=ledger,
        alice_key=alice_final,
        bob_key=bob_final,
        finite_report=report,
        transcript=tuple(transcript),
    )
