"""Event-level simulation of the polarization-encoded BB84 link.

Generates labelled detection-time streams from the full physical chain —
pulsed sub-Poissonian emission, fibre loss, receiver optics, misalignment,
dark counts, and per-detector dead time — as the statistical ground truth
against which the analytic click and error model is checked.

Channel convention: detector ports H=0, V=1, D=2, A=3 and the electrical
sync channel ``CHANNEL_REFERENCE``=4.  Encoded states use the same 0-3
codes, so ``state >> 1`` is the basis (0 = rectilinear, 1 = diagonal) and
``state & 1`` the bit, i.e. H=Z0, V=Z1, D=X0, A=X1.

Simulation runs are partitioned into fixed-size pulse chunks; each chunk
draws from its own counter-seeded Philox stream, so results are
bit-identical regardless of worker count or chunk execution order.

Reference (sync) tags are exactly one per pulse at the nominal pulse time.
They are kept virtual — recomputed arithmetically rather than stored — so
billion-pulse runs stay in memory; file exports materialize them.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Protocol, runtime_checkable

import numpy as np

from .params import (
    OperatingPoint,
    ParameterError,
    ScenarioConfig,
    SourceModel,
    _require,
)

if TYPE_CHECKING:  # pragma: no cover - typing only, avoids an import cycle
    from .tagproc import CorrelationHistogram

__all__ = [
    "CHANNEL_NAMES",
    "CHANNEL_REFERENCE",
    "AliceRecord",
    "Scenario",
    "SimulationSummary",
    "TagStream",
    "read_tags",
    "read_tags_csv",
    "sample_photon_number",
    "simulate_g2_histogram",
    "simulate_run",
    "stream_statistics",
    "write_tags",
    "write_tags_csv",
]

CHANNEL_H, CHANNEL_V, CHANNEL_D, CHANNEL_A = 0, 1, 2, 3
CHANNEL_REFERENCE = 4
CHANNEL_NAMES = ("H", "V", "D", "A", "REF")
NO_TRUTH_STATE = 255

#: pulses per generation chunk; fixed so chunk seeding is reproducible
CHUNK_PULSES = 1_000_000

#: sift windows open this many ps before the nominal pulse time, so that
#: detector jitter on prompt clicks cannot push them into the previous
#: window; late emission tails spilling past the next boundary remain and
#: are charged to the wrong pulse, exactly as a time-gated receiver would
WINDOW_GUARD_PS = 250.0

#: Stokes vectors of the four encoded states on the Poincaré sphere
#: (rows H, V, D, A; components S1, S2, S3)
_STATE_STOKES = np.array(
    [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)

_RECORD_DTYPE = np.dtype(
    [("time_ps", "<i8"), ("channel", "u1"), ("flags", "u1")]
)
_FLAG_STATE_MASK = 0b0000_0011
_FLAG_PHOTONS_SHIFT = 2
_FLAG_PHOTONS_MASK = 0b0000_1100
_FLAG_DARK = 0b0001_0000
_FLAG_HAS_STATE = 0b0010_0000

_CSV_HEADER = ["time_ps", "channel", "truth_state", "truth_photons", "dark"]


@runtime_checkable
class DriftLike(Protocol):
    """Anything exposing a Poincaré rotation as a function of time."""

    def rotation_at(self, time_s: float) -> np.ndarray:
        """3x3 rotation acting on Stokes vectors at the given time."""
        ...  # pragma: no cover - protocol signature


@dataclass(frozen=True, slots=True)
class Scenario:
    """One simulation run: an operating point plus run-level knobs.

    ``encoded_state`` of None means the transmitter picks states uniformly
    at random per pulse; a fixed 0-3 value statically encodes that state
    (used for truth-table characterization).  ``drift_model`` is any
    object with ``rotation_at(time_s)``; the rotation is sampled once per
    generation chunk, which is far shorter than physical drift timescales.
    """

    operating_point: OperatingPoint
    n_pulses: int
    seed: int
    jitter_sigma: float = 50.0
    encoded_state: int | None = None
    drift_model: DriftLike | None = None

    def __post_init__(self) -> None:
        _require(self.n_pulses >= 1, "n_pulses", "must be at least 1")
        _require(self.jitter_sigma >= 0.0, "jitter_sigma", "must be >= 0")
        _require(
            0 <= self.seed < 2**64, "seed", "must fit in 64 bits"
        )
        if self.encoded_state is not None:
            _require(
                self.encoded_state in (0, 1, 2, 3),
                "encoded_state",
                "must be one of 0 (H), 1 (V), 2 (D), 3 (A)",
            )
        span = self.n_pulses * self.operating_point.protocol.pulse_period_ps
        _require(
            span < 2**62,
            "n_pulses",
            "run duration overflows the picosecond time representation",
        )

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "Scenario":
        sim = config.simulation
        return cls(
            operating_point=config.point,
            n_pulses=sim.n_pulses,
            seed=sim.seed,
            jitter_sigma=sim.jitter_sigma,
            encoded_state=sim.encoded_state,
        )

    @property
    def period_ps(self) -> float:
        return self.operating_point.protocol.pulse_period_ps


@dataclass(frozen=True, slots=True)
class AliceRecord:
    """Transmitter-side ground truth: the encoded state of every pulse."""

    states: np.ndarray  # uint8 codes 0-3, one per pulse

    def __len__(self) -> int:
        return len(self.states)

    @property
    def bases(self) -> np.ndarray:
        """0 = rectilinear (Z), 1 = diagonal (X), per pulse."""
        return self.states >> 1

    @property
    def bits(self) -> np.ndarray:
        return self.states & 1


@dataclass(frozen=True, slots=True)
class TagStream:
    """Time-sorted detection tags plus the implicit reference channel.

    Arrays hold detector tags only (channels 0-3).  The reference channel
    fires once per pulse at the nominal pulse time ``round(i * period)``;
    it is synthesized on demand by exports and window arithmetic instead
    of being stored.  ``truth_state`` is 255 for tags with no originating
    pulse (dark counts).
    """

    time_ps: np.ndarray  # int64
    channel: np.ndarray  # uint8
    truth_state: np.ndarray  # uint8
    truth_photons: np.ndarray  # uint8
    dark: np.ndarray  # bool
    n_pulses: int
    period_ps: float

    def __len__(self) -> int:
        return len(self.time_ps)

    @property
    def n_reference_tags(self) -> int:
        return self.n_pulses

    def reference_times(self, start: int, stop: int) -> np.ndarray:
        """Nominal sync times for pulses [start, stop), as int64 ps."""
        indices = np.arange(start, stop, dtype=np.int64)
        return np.rint(indices * self.period_ps).astype(np.int64)

    def window_index(self, guard_ps: float = WINDOW_GUARD_PS) -> np.ndarray:
        """Pulse window of each detector tag.

        Windows open ``guard_ps`` before the nominal pulse time (see
        module docstring); indices may fall outside [0, n_pulses) for
        clicks jittered past the run edges.
        """
        return np.floor(
            (self.time_ps + guard_ps) / self.period_ps
        ).astype(np.int64)


@dataclass(frozen=True, slots=True)
class SimulationSummary:
    """Ground-truth statistics of one run, for model cross-checks.

    ``click_fraction`` counts windows with at least one detector tag,
    matching the analytic per-pulse click probability.  ``truth_qber``
    scores, per clicked window, the earliest tag: photon tags against the
    state of their *origin* pulse (so late-tail spill is not
    misattributed), dark tags against the window's encoded state.
    """

    n_pulses: int
    n_tags: int
    n_dark_tags: int
    clicked_windows: int
    click_fraction: float
    matched_count: int
    error_count: int
    truth_qber: float
    basis_z_fraction: float


def sample_photon_number(
    source: SourceModel,
    rng: np.random.Generator,
    size: int | None = None,
) -> int | np.ndarray:
    """Draw per-pulse photon numbers from the truncated {0, 1, 2} law.

    P(2) = g2*n²/2 and P(1) = n − 2 P(2), so the mean is exactly the
    source's effective mean photon number.  Raises if the pair (mean, g2)
    does not describe a distribution.
    """
    p0, p1, p2 = source.photon_number_pmf()
    u = rng.random(size)
    counts = (u < p2) * 2 + ((u >= p2) & (u < p2 + p1)) * 1
    if size is None:
        return int(counts)
    return counts.astype(np.uint8)


def _survival_probability(point: OperatingPoint) -> float:
    link = point.link
    return (
        link.transmitter_efficiency
        * link.channel_transmittance
        * link.receiver_chain_efficiency
    )


def _chunk_ranges(n_pulses: int) -> list[tuple[int, int, int]]:
    ranges = []
    for chunk_index, start in enumerate(range(0, n_pulses, CHUNK_PULSES)):
        count = min(CHUNK_PULSES, n_pulses - start)
        ranges.append((chunk_index, start, count))
    return ranges


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=(chunk_index,))
    return np.random.Generator(np.random.Philox(sequence))


def _rotated_state_table(
    scenario: Scenario, start: int, count: int
) -> np.ndarray:
    """Stokes vectors of the four states after channel drift, this chunk."""
    if scenario.drift_model is None:
        return _STATE_STOKES
    mid_time_s = (start + 0.5 * count) * scenario.period_ps * 1e-12
    rotation = np.asarray(scenario.drift_model.rotation_at(mid_time_s))
    return _STATE_STOKES @ rotation.T


def _simulate_chunk(
    scenario: Scenario, chunk_index: int, start: int, count: int
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Generate Alice states and raw (unfiltered) detector tags."""
    point = scenario.operating_point
    source, link = point.source, point.link
    period = scenario.period_ps
    clock = point.protocol.clock_rate
    rng = _chunk_rng(scenario.seed, chunk_index)

    if scenario.encoded_state is None:
        states = rng.integers(0, 4, count, dtype=np.uint8)
    else:
        states = np.full(count, scenario.encoded_state, dtype=np.uint8)
    photons = sample_photon_number(source, rng, count)

    stokes = _rotated_state_table(scenario, start, count)
    survival = _survival_probability(point)
    p_mis = link.misalignment_prob
    base_times = (start + np.arange(count, dtype=np.float64)) * period

    times, channels, t_state, t_photons = [], [], [], []
    for slot in (1, 2):
        present = photons >= slot
        alive = present & (rng.random(count) < survival)
        idx = np.flatnonzero(alive)
        k = len(idx)
        bob_basis = rng.integers(0, 2, k, dtype=np.uint8)
        u_project = rng.random(k)
        u_flip = rng.random(k)
        delay = rng.exponential(source.lifetime, k)
        jitter = rng.normal(0.0, scenario.jitter_sigma, k) \
            if scenario.jitter_sigma > 0.0 else np.zeros(k)

        vectors = stokes[states[idx]]
        # projection onto the measured basis axis: S1 for Z, S2 for X
        inner = np.where(bob_basis == 0, vectors[:, 0], vectors[:, 1])
        bit = (u_project < 0.5 * (1.0 - inner)).astype(np.uint8)
        bit ^= (u_flip < p_mis).astype(np.uint8)
        times.append(
            np.rint(base_times[idx] + delay + jitter).astype(np.int64)
        )
        channels.append(((bob_basis << 1) | bit).astype(np.uint8))
        t_state.append(states[idx])
        t_photons.append(photons[idx])

    p_dark = link.dark_prob_per_detector(clock)
    span_start = start * period
    span = count * period
    for detector in range(link.detector_count):
        n_dark = int(rng.binomial(count, p_dark))
        dark_times = np.rint(
            span_start + rng.random(n_dark) * span
        ).astype(np.int64)
        times.append(dark_times)
        channels.append(np.full(n_dark, detector, dtype=np.uint8))
        t_state.append(np.full(n_dark, NO_TRUTH_STATE, dtype=np.uint8))
        t_photons.append(np.zeros(n_dark, dtype=np.uint8))

    n_photon_tags = sum(len(t) for t in times[:2])
    tags = {
        "time_ps": np.concatenate(times),
        "channel": np.concatenate(channels),
        "truth_state": np.concatenate(t_state),
        "truth_photons": np.concatenate(t_photons),
    }
    tags["dark"] = np.zeros(len(tags["time_ps"]), dtype=bool)
    tags["dark"][n_photon_tags:] = True
    return states, tags


def _deadtime_keep_mask(
    time_ps: np.ndarray, channel: np.ndarray, dead_time_ps: float
) -> np.ndarray:
    """Greedy non-paralyzable dead-time filter, per detector channel."""
    keep = np.ones(len(time_ps), dtype=bool)
    if dead_time_ps <= 0.0:
        return keep
    for detector in range(4):
        idx = np.flatnonzero(channel == detector)
        last = -math.inf
        for position, t in zip(idx, time_ps[idx].tolist()):
            if t - last >= dead_time_ps:
                last = t
            else:
                keep[position] = False
    return keep


def simulate_run(
    scenario: Scenario, max_workers: int | None = None
) -> tuple[AliceRecord, TagStream]:
    """Simulate the full transmitter-channel-receiver chain.

    Per pulse: the transmitter encodes a state and emits 0-2 photons;
    each photon independently survives the optical chain, picks a
    measurement basis at the 50:50 splitter, projects onto a port (with
    misalignment flips), and is stamped with emission decay plus detector
    jitter.  Dark counts fire per detector per window.  A global
    per-detector dead-time filter then removes blocked clicks, and the
    surviving tags are returned time-sorted with ground-truth labels.
    """
    ranges = _chunk_ranges(scenario.n_pulses)
    workers = max_workers if max_workers and max_workers > 0 else 4
    workers = min(workers, len(ranges))

    def run_chunk(args: tuple[int, int, int]):
        chunk_index, start, count = args
        return _simulate_chunk(scenario, chunk_index, start, count)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, ranges))
    else:
        results = [run_chunk(args) for args in ranges]

    states = np.concatenate([r[0] for r in results])
    merged = {
        key: np.concatenate([r[1][key] for r in results])
        for key in ("time_ps", "channel", "truth_state", "truth_photons",
                    "dark")
    }
    order = np.lexsort((merged["channel"], merged["time_ps"]))
    for key in merged:
        merged[key] = merged[key][order]

    dead_time_ps = scenario.operating_point.link.dead_time * 1e3
    keep = _deadtime_keep_mask(
        merged["time_ps"], merged["channel"], dead_time_ps
    )
    stream = TagStream(
        time_ps=merged["time_ps"][keep],
        channel=merged["channel"][keep],
        truth_state=merged["truth_state"][keep],
        truth_photons=merged["truth_photons"][keep],
        dark=merged["dark"][keep],
        n_pulses=scenario.n_pulses,
        period_ps=scenario.period_ps,
    )
    return AliceRecord(states=states), stream


def stream_statistics(
    alice: AliceRecord, stream: TagStream
) -> SimulationSummary:
    """Ground-truth per-window statistics for analytic cross-checks."""
    n_pulses = stream.n_pulses
    windows = stream.window_index()
    valid = (windows >= 0) & (windows < n_pulses)

    w = windows[valid]
    first = np.unique(w, return_index=True)[1]  # earliest tag per window
    clicked = len(first)

    sel = np.flatnonzero(valid)[first]
    channel = stream.channel[sel]
    truth = stream.truth_state[sel]
    dark = stream.dark[sel]
    window_states = alice.states[windows[sel]]
    # photon tags score against their origin pulse, darks against the
    # window they landed in (they have no origin)
    reference_state = np.where(dark, window_states, truth)
    matched = (channel >> 1) == (reference_state >> 1)
    errors = matched & ((channel & 1) != (reference_state & 1))

    matched_count = int(matched.sum())
    error_count = int(errors.sum())
    detector_tags = len(stream)
    return SimulationSummary(
        n_pulses=n_pulses,
        n_tags=detector_tags,
        n_dark_tags=int(stream.dark.sum()),
        clicked_windows=clicked,
        click_fraction=clicked / n_pulses,
        matched_count=matched_count,
        error_count=error_count,
        truth_qber=error_count / matched_count if matched_count else 0.0,
        basis_z_fraction=float((stream.channel <= 1).mean())
        if detector_tags
        else 0.0,
    )


# ---------------------------------------------------------------------------
# intensity-correlation (two-detector splitter) simulation
# ---------------------------------------------------------------------------

def _simulate_hbt_chunk(
    scenario: Scenario, chunk_index: int, start: int, count: int
) -> tuple[np.ndarray, np.ndarray]:
    """Detection times and detector ids for a 50:50 splitter pair."""
    point = scenario.operating_point
    source, link = point.source, point.link
    rng = _chunk_rng(scenario.seed, chunk_index)
    period = scenario.period_ps

    photons = sample_photon_number(source, rng, count)
    survival = _survival_probability(point)
    base_times = (start + np.arange(count, dtype=np.float64)) * period

    times, detectors = [], []
    for slot in (1, 2):
        present = photons >= slot
        alive = present & (rng.random(count) < survival)
        idx = np.flatnonzero(alive)
        k = len(idx)
        detector = rng.integers(0, 2, k, dtype=np.uint8)
        delay = rng.exponential(source.lifetime, k)
        jitter = rng.normal(0.0, scenario.jitter_sigma, k) \
            if scenario.jitter_sigma > 0.0 else np.zeros(k)
        times.append(
            np.rint(base_times[idx] + delay + jitter).astype(np.int64)
        )
        detectors.append(detector)

    p_dark = link.dark_prob_per_detector(point.protocol.clock_rate)
    span_start = start * period
    span = count * period
    for detector in range(2):
        n_dark = int(rng.binomial(count, p_dark))
        times.append(
            np.rint(span_start + rng.random(n_dark) * span).astype(np.int64)
        )
        detectors.append(np.full(n_dark, detector, dtype=np.uint8))
    return np.concatenate(times), np.concatenate(detectors)


def simulate_g2_histogram(
    scenario: Scenario,
    bin_width_ps: float = 10.0,
    side_periods: int = 5,
    max_workers: int | None = None,
) -> "CorrelationHistogram":
    """Simulate an intensity-correlation (two-detector) measurement.

    The source stream is split 50:50 onto two detectors (the standard
    coincidence setup for measuring g²); every cross-detector pair with
    delay inside ±(side_periods + ½) pulse periods lands in a histogram
    bin.  Dead time applies per detector; polarization is irrelevant and
    not simulated.
    """
    from .tagproc import CorrelationHistogram  # deferred: avoids cycle

    _require(bin_width_ps > 0.0, "bin_width_ps", "must be positive")
    _require(side_periods >= 3, "side_periods", "need at least 3 side peaks")

    ranges = _chunk_ranges(scenario.n_pulses)
    workers = max_workers if max_workers and max_workers > 0 else 4
    workers = min(workers, len(ranges))

    def run_chunk(args: tuple[int, int, int]):
        chunk_index, start, count = args
        return _simulate_hbt_chunk(scenario, chunk_index, start, count)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, ranges))
    else:
        results = [run_chunk(args) for args in ranges]

    time_ps = np.concatenate([r[0] for r in results])
    detector = np.concatenate([r[1] for r in results])
    order = np.lexsort((detector, time_ps))
    time_ps, detector = time_ps[order], detector[order]

    dead_time_ps = scenario.operating_point.link.dead_time * 1e3
    keep = _deadtime_keep_mask(time_ps, detector, dead_time_ps)
    time_ps, detector = time_ps[keep], detector[keep]

    t0 = time_ps[detector == 0]
    t1 = time_ps[detector == 1]
    half_span = (side_periods + 0.5) * scenario.period_ps
    n_bins = max(1, int(round(2.0 * half_span / bin_width_ps)))
    origin = -0.5 * n_bins * bin_width_ps
    counts = np.zeros(n_bins, dtype=np.int64)
    if len(t0) and len(t1):
        lo = np.searchsorted(t1, t0 + origin)
        hi = np.searchsorted(t1, t0 - origin)
        pair_count = hi - lo
        starts = np.repeat(t0, pair_count)
        offsets = np.concatenate(
            [np.arange(a, b) for a, b in zip(lo, hi) if b > a]
        ) if pair_count.sum() else np.empty(0, dtype=np.int64)
        delays = t1[offsets] - starts
        bins = np.floor((delays - origin) / bin_width_ps).astype(np.int64)
        np.clip(bins, 0, n_bins - 1, out=bins)
        np.add.at(counts, bins, 1)
    return CorrelationHistogram(
        bin_width_ps=bin_width_ps, counts=counts, origin_ps=origin
    )


# ---------------------------------------------------------------------------
# tag-stream file formats
# ---------------------------------------------------------------------------

def _pack_flags(stream: TagStream) -> np.ndarray:
    flags = np.zeros(len(stream), dtype=np.uint8)
    has_state = stream.truth_state != NO_TRUTH_STATE
    flags[has_state] |= _FLAG_HAS_STATE
    flags |= np.where(has_state, stream.truth_state, 0).astype(np.uint8)
    flags |= (stream.truth_photons << _FLAG_PHOTONS_SHIFT).astype(np.uint8)
    flags[stream.dark] |= _FLAG_DARK
    return flags


def _iter_record_blocks(
    stream: TagStream, include_reference: bool
) -> Iterator[np.ndarray]:
    """Yield record arrays in time order, reference tags interleaved.

    Blocks partition the detector tags at nominal pulse-block boundaries,
    so memory stays flat however long the run is.
    """
    flags = _pack_flags(stream)
    if not include_reference or stream.n_pulses == 0:
        block = np.empty(len(stream), dtype=_RECORD_DTYPE)
        block["time_ps"] = stream.time_ps
        block["channel"] = stream.channel
        block["flags"] = flags
        yield block
        return
    lo = 0
    for start in range(0, stream.n_pulses, CHUNK_PULSES):
        stop = min(start + CHUNK_PULSES, stream.n_pulses)
        ref_times = stream.reference_times(start, stop)
        if stop >= stream.n_pulses:
            hi = len(stream)
        else:
            boundary = int(round(stop * stream.period_ps))
            hi = int(np.searchsorted(stream.time_ps, boundary))
        times = np.concatenate([stream.time_ps[lo:hi], ref_times])
        chans = np.concatenate(
            [
                stream.channel[lo:hi],
                np.full(len(ref_times), CHANNEL_REFERENCE, dtype=np.uint8),
            ]
        )
        flag_block = np.concatenate(
            [flags[lo:hi], np.zeros(len(ref_times), dtype=np.uint8)]
        )
        order = np.lexsort((chans, times))
        block = np.empty(len(times), dtype=_RECORD_DTYPE)
        block["time_ps"] = times[order]
        block["channel"] = chans[order]
        block["flags"] = flag_block[order]
        yield block
        lo = hi


def write_tags(
    stream: TagStream, path: str | Path, include_reference: bool = True
) -> None:
    """Write the stream as packed little-endian 10-byte records."""
    with open(path, "wb") as handle:
        for block in _iter_record_blocks(stream, include_reference):
            handle.write(block.tobytes())


def read_tags(
    path: str | Path,
    n_pulses: int | None = None,
    period_ps: float | None = None,
) -> TagStream:
    """Read a packed tag file back into a stream.

    Pulse count and period are reconstructed from the reference tags; for
    files written without them, pass ``n_pulses`` and ``period_ps``.
    """
    raw = np.fromfile(path, dtype=_RECORD_DTYPE)
    is_ref = raw["channel"] == CHANNEL_REFERENCE
    n_ref = int(is_ref.sum())
    if n_ref >= 2:
        ref_times = raw["time_ps"][is_ref]
        inferred_period = (ref_times[-1] - ref_times[0]) / (n_ref - 1)
        n_pulses = n_ref
        period_ps = float(inferred_period)
    elif n_pulses is None or period_ps is None:
        raise ParameterError(
            "tags",
            "tag file has no reference channel; pass n_pulses and "
            "period_ps explicitly",
        )
    det = raw[~is_ref]
    flags = det["flags"]
    has_state = (flags & _FLAG_HAS_STATE) != 0
    truth_state = np.where(
        has_state, flags & _FLAG_STATE_MASK, NO_TRUTH_STATE
    ).astype(np.uint8)
    return TagStream(
        time_ps=det["time_ps"].astype(np.int64),
        channel=det["channel"].astype(np.uint8),
        truth_state=truth_state,
        truth_photons=(
            (flags & _FLAG_PHOTONS_MASK) >> _FLAG_PHOTONS_SHIFT
        ).astype(np.uint8),
        dark=(flags & _FLAG_DARK) != 0,
        n_pulses=int(n_pulses),
        period_ps=float(period_ps),
    )


def write_tags_csv(
    stream: TagStream, path: str | Path, include_reference: bool = True
) -> None:
    """Write the stream as CSV with channels and states as letters."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_CSV_HEADER)
        for block in _iter_record_blocks(stream, include_reference):
            for record in block:
                flags = int(record["flags"])
                has_state = bool(flags & _FLAG_HAS_STATE)
                writer.writerow(
                    [
                        int(record["time_ps"]),
                        CHANNEL_NAMES[int(record["channel"])],
                        CHANNEL_NAMES[flags & _FLAG_STATE_MASK]
                        if has_state
                        else "",
                        (flags & _FLAG_PHOTONS_MASK) >> _FLAG_PHOTONS_SHIFT,
                        1 if flags & _FLAG_DARK else 0,
                    ]
                )


def read_tags_csv(
    path: str | Path,
    n_pulses: int | None = None,
    period_ps: float | None = None,
) -> TagStream:
    """Read the CSV tag format back into a stream."""
    channel_codes = {name: code for code, name in enumerate(CHANNEL_NAMES)}
    times, channels, states, photons, darks = [], [], [], [], []
    ref_times = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != _CSV_HEADER:
            raise ParameterError(
                "tags", f"tag CSV header must be {_CSV_HEADER}"
            )
        for row in reader:
            if not row:
                continue
            if len(row) != 5:
                raise ParameterError("tags", "tag CSV rows need 5 columns")
            code = channel_codes.get(row[1])
            if code is None:
                raise ParameterError("tags", f"unknown channel {row[1]!r}")
            if code == CHANNEL_REFERENCE:
                ref_times.append(int(row[0]))
                continue
            times.append(int(row[0]))
            channels.append(code)
            states.append(
                channel_codes[row[2]] if row[2] else NO_TRUTH_STATE
            )
            photons.append(int(row[3]))
            darks.append(row[4] == "1")
    if len(ref_times) >= 2:
        n_pulses = len(ref_times)
        period_ps = (ref_times[-1] - ref_times[0]) / (n_pulses - 1)
    elif n_pulses is None or period_ps is None:
        raise ParameterError(
            "tags",
            "tag CSV has no reference channel; pass n_pulses and "
            "period_ps explicitly",
        )
    return TagStream(
        time_ps=np.asarray(times, dtype=np.int64),
        channel=np.asarray(channels, dtype=np.uint8),
        truth_state=np.asarray(states, dtype=np.uint8),
        truth_photons=np.asarray(photons, dtype=np.uint8),
        dark=np.asarray(darks, dtype=bool),
        n_pulses=int(n_pulses),
        period_ps=float(period_ps),
    )
