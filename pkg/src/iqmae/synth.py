"""Synthetic IQ generators: linear modulations, radar pulse trains, AWGN,
static hardware impairments, per-device fingerprints and source mixtures.

Every generator rounds its output onto the float32 grid used by the EMR1
container, so a synthesized waveform survives a corpus round trip bitwise.
Times for radar parameters are in microseconds, rates in Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AliasingError, ConfigError, DegenerateSignalError, ParameterError, ShapeError

MODULATIONS = ("bpsk", "qpsk", "psk8", "qam16")
RADAR_WAVEFORMS = ("rectangular", "lfm", "barker")

BARKER_CODES = {
    2: (1, -1),
    3: (1, 1, -1),
    4: (1, 1, -1, 1),
    5: (1, 1, 1, -1, 1),
    7: (1, 1, 1, -1, -1, 1, -1),
    11: (1, 1, 1, -1, -1, -1, 1, -1, -1, 1, -1),
    13: (1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1),
}

# absorbs representation error in t*fs before flooring (10 us * 3.2 MHz must give 32)
_INDEX_TOL = 1e-9


def from_components(i, q) -> np.ndarray:
    """Complex array from I and Q rails, keeping signed zeros (``i + 1j*q`` does not)."""
    i, q = np.broadcast_arrays(np.asarray(i, dtype=np.float64), np.asarray(q, dtype=np.float64))
    out = np.empty(i.shape, dtype=np.complex128)
    out.real, out.imag = i, q
    return out


def to_grid(z: np.ndarray) -> np.ndarray:
    """Round complex samples onto the float32 grid, returned as complex128."""
    return np.asarray(z, dtype=np.complex128).astype(np.complex64).astype(np.complex128)


@dataclass(frozen=True, eq=False)
class IQWaveform:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 2 and s.shape[1] == 2 and not np.iscomplexobj(s):
            s = from_components(s[:, 0], s[:, 1])
        s = np.ascontiguousarray(s, dtype=np.complex128).reshape(-1)
        if s.size < 1:
            raise ShapeError("waveform must hold at least one sample")
        if not np.all(np.isfinite(s)):
            raise DegenerateSignalError("waveform contains non-finite samples")
        if not self.sample_rate_hz > 0:
            raise ParameterError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def length(self) -> int:
        return int(self.samples.size)

    def __len__(self) -> int:
        return self.length

    @property
    def iq(self) -> np.ndarray:
        """(length, 2) array of interleaved (I, Q) pairs."""
        return np.stack([self.samples.real, self.samples.imag], axis=1)

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def with_samples(self, samples: np.ndarray) -> "IQWaveform":
        return IQWaveform(samples, self.sample_rate_hz)

    def same_as(self, other: "IQWaveform") -> bool:
        """Bitwise equality of samples and rate."""
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
        )


# ---------------------------------------------------------------------------
# linear modulations


def constellation(scheme: str) -> np.ndarray:
    """Unit average energy constellation points indexed by symbol value."""
    if scheme == "bpsk":
        pts = np.array([1.0, -1.0], dtype=np.complex128)
    elif scheme == "qpsk":
        pts = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))
    elif scheme == "psk8":
        pts = np.exp(2j * np.pi * np.arange(8) / 8)
    elif scheme == "qam16":
        levels = np.array([-3.0, -1.0, 1.0, 3.0])
        pts = (levels[:, None] + 1j * levels[None, :]).reshape(-1) / np.sqrt(10.0)
    else:
        raise ConfigError(f"unsupported modulation scheme {scheme!r}; choose from {MODULATIONS}")
    # cos(pi/2) and friends come out near 1e-16; make axis points exact
    re, im = pts.real.copy(), pts.imag.copy()
    re[np.abs(re) < 1e-12] = 0.0
    im[np.abs(im) < 1e-12] = 0.0
    return re + 1j * im


def draw_symbols(scheme: str, num_symbols: int, seed: int) -> np.ndarray:
    m = constellation(scheme).size
    return np.random.default_rng(seed).integers(0, m, size=num_symbols)


def modulate(scheme: str, symbols: Sequence[int], sps: int, sample_rate_hz: float) -> IQWaveform:
    """Map symbol indices to a rectangular-pulse baseband waveform."""
    if sps < 1:
        raise ParameterError("sps must be >= 1")
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size < 1:
        raise ParameterError("need at least one symbol")
    pts = constellation(scheme)
    if symbols.min() < 0 or symbols.max() >= pts.size:
        raise ParameterError(f"symbol index out of range for {scheme}")
    return IQWaveform(to_grid(np.repeat(pts[symbols], sps)), sample_rate_hz)


def synth_linear_mod(scheme: str, num_symbols: int, sps: int, sample_rate_hz: float, seed: int) -> IQWaveform:
    constellation(scheme)  # validates before drawing
    if num_symbols < 1 or sps < 1:
        raise ParameterError("num_symbols and sps must be >= 1")
    return modulate(scheme, draw_symbols(scheme, num_symbols, seed), sps, sample_rate_hz)


# ---------------------------------------------------------------------------
# radar pulse trains


@dataclass(frozen=True)
class RadarParams:
    waveform_kind: str
    n_p: int
    t_pw: float
    t_pri: float
    t_d: float = 0.0
    chirp_bw_hz: float | None = None  # lfm only; negative sweeps downward; None -> fs/4
    barker_length: int = 13

    def validate(self) -> None:
        if self.waveform_kind not in RADAR_WAVEFORMS:
            raise ConfigError(f"unknown radar waveform {self.waveform_kind!r}")
        if self.n_p < 1:
            raise ParameterError("n_p must be >= 1")
        if not 0 < self.t_pw < self.t_pri:
            raise ParameterError(f"need 0 < t_pw < t_pri, got t_pw={self.t_pw}, t_pri={self.t_pri}")
        if self.t_d < 0:
            raise ParameterError("t_d must be >= 0")
        if self.waveform_kind == "barker" and self.barker_length not in BARKER_CODES:
            raise ParameterError(f"no Barker code of length {self.barker_length}")


def _us_to_index(t_us: float, fs: float) -> int:
    return int(math.floor(t_us * fs / 1e6 + _INDEX_TOL))


def pulse_edges(params: RadarParams, sample_rate_hz: float) -> list[tuple[int, int]]:
    """Half-open sample index range of every pulse, via floor(t * fs)."""
    params.validate()
    edges = []
    for k in range(params.n_p):
        start = params.t_d + k * params.t_pri
        edges.append((_us_to_index(start, sample_rate_hz), _us_to_index(start + params.t_pw, sample_rate_hz)))
    return edges


def synth_radar_pulse_train(params: RadarParams, sample_rate_hz: float, length: int, seed: int) -> IQWaveform:
    params.validate()
    fs = float(sample_rate_hz)
    span_us = params.t_d + (params.n_p - 1) * params.t_pri + params.t_pw
    if length * 1e6 / fs + _INDEX_TOL < span_us:
        raise ParameterError(
            f"pulse train spans {span_us:.3f} us but the waveform lasts {length * 1e6 / fs:.3f} us"
        )
    edges = pulse_edges(params, fs)
    if any(stop - start < 1 for start, stop in edges):
        raise ParameterError("pulse width shorter than one sample")

    phase0 = np.random.default_rng(seed).uniform(0.0, 2 * np.pi)
    x = np.zeros(length, dtype=np.complex128)
    for start, stop in edges:
        m = np.arange(stop - start)
        if params.waveform_kind == "rectangular":
            env = np.ones(m.size, dtype=np.complex128)
        elif params.waveform_kind == "lfm":
            bw = fs / 4 if params.chirp_bw_hz is None else params.chirp_bw_hz
            t = m / fs
            dur = m.size / fs
            # instantaneous frequency -bw/2 + bw*t/dur
            env = np.exp(2j * np.pi * (-0.5 * bw * t + 0.5 * bw / dur * t**2))
        else:
            code = np.asarray(BARKER_CODES[params.barker_length], dtype=np.float64)
            chips = (m * code.size) // m.size
            env = code[chips].astype(np.complex128)
        x[start:stop] = env * np.exp(1j * phase0)
    return IQWaveform(to_grid(x), fs)


# ---------------------------------------------------------------------------
# noise and impairments


def awgn_noise(w: IQWaveform, snr_db: float, seed: int) -> np.ndarray:
    """Complex white noise scaled against the waveform's empirical power."""
    p = w.power()
    if p <= 0:
        raise DegenerateSignalError("cannot set an SNR against a zero-power signal")
    noise_power = p / 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(seed)
    n = rng.standard_normal((2, w.length)) * math.sqrt(noise_power / 2.0)
    return to_grid(n[0] + 1j * n[1])


def apply_awgn(w: IQWaveform, snr_db: float, seed: int) -> IQWaveform:
    return w.with_samples(w.samples + awgn_noise(w, snr_db, seed))


@dataclass(frozen=True)
class ImpairmentProfile:
    freq_offset_hz: float = 0.0
    iq_amp_imbalance: float = 1.0
    iq_phase_imbalance_rad: float = 0.0

    def validate(self, sample_rate_hz: float) -> None:
        if abs(self.freq_offset_hz) >= sample_rate_hz / 2:
            raise AliasingError(
                f"|freq offset| {abs(self.freq_offset_hz)} Hz must stay below fs/2 = {sample_rate_hz / 2} Hz"
            )
        if not self.iq_amp_imbalance > 0:
            raise ParameterError("iq_amp_imbalance must be > 0")
        if abs(self.iq_phase_imbalance_rad) >= np.pi / 2:
            raise ParameterError("|iq_phase_imbalance_rad| must be < pi/2")

    @property
    def is_identity(self) -> bool:
        return self.freq_offset_hz == 0 and self.iq_amp_imbalance == 1 and self.iq_phase_imbalance_rad == 0


def apply_impairments(w: IQWaveform, p: ImpairmentProfile) -> IQWaveform:
    """Frequency offset followed by amplitude/phase imbalance on the Q rail."""
    p.validate(w.sample_rate_hz)
    if p.is_identity:
        return w.with_samples(w.samples.copy())
    n = np.arange(w.length)
    z = w.samples * np.exp(2j * np.pi * p.freq_offset_hz * n / w.sample_rate_hz)
    i, q = z.real, z.imag
    phi = p.iq_phase_imbalance_rad
    q_out = p.iq_amp_imbalance * (q * np.cos(phi) - i * np.sin(phi))
    return w.with_samples(to_grid(i + 1j * q_out))


def invert_impairments(w: IQWaveform, p: ImpairmentProfile) -> IQWaveform:
    p.validate(w.sample_rate_hz)
    i = w.samples.real
    phi = p.iq_phase_imbalance_rad
    q = (w.samples.imag / p.iq_amp_imbalance + i * np.sin(phi)) / np.cos(phi)
    n = np.arange(w.length)
    z = (i + 1j * q) * np.exp(-2j * np.pi * p.freq_offset_hz * n / w.sample_rate_hz)
    return w.with_samples(z)


# ---------------------------------------------------------------------------
# device fingerprints

_DF_STEP_HZ = 100.0
_DF_SLOTS = 1001  # 100 Hz grid over [-50 kHz, +50 kHz]


def device_profile(device_id: int, registry_seed: int) -> ImpairmentProfile:
    """Fixed impairment signature for a device.

    Frequency offsets come from a seeded permutation of a 100 Hz grid, so ids
    below 1001 never share an offset. Larger ids reuse grid slots.
    """
    if device_id < 0:
        raise ParameterError("device_id must be >= 0")
    slots = np.random.default_rng([registry_seed, 0x5EED]).permutation(_DF_SLOTS)
    df = (int(slots[device_id % _DF_SLOTS]) - _DF_SLOTS // 2) * _DF_STEP_HZ
    rng = np.random.default_rng([registry_seed, device_id])
    return ImpairmentProfile(
        freq_offset_hz=df,
        iq_amp_imbalance=float(rng.uniform(0.9, 1.1)),
        iq_phase_imbalance_rad=float(rng.uniform(-0.1, 0.1)),
    )


def synth_device_record(device_id: int, base: IQWaveform, registry_seed: int) -> IQWaveform:
    return apply_impairments(base, device_profile(device_id, registry_seed))


# ---------------------------------------------------------------------------
# mixtures


@dataclass(frozen=True)
class MixtureSpec:
    source_count: int
    source_kinds: tuple = ()
    snr_db: float = 12.0
    gains: tuple = field(default=())

    def validate(self) -> None:
        if self.source_count not in (1, 2):
            raise ParameterError("source_count must be 1 or 2")
        if not (self.source_count == len(self.source_kinds) == len(self.gains)):
            raise ParameterError("source_count, source_kinds and gains must agree in length")
        if any(g <= 0 for g in self.gains):
            raise ParameterError("gains must be > 0")


def mix_sources(
    sources: Sequence[IQWaveform], spec: MixtureSpec, seed: int
) -> tuple[IQWaveform, list[IQWaveform]]:
    spec.validate()
    if len(sources) != spec.source_count:
        raise ShapeError(f"expected {spec.source_count} sources, got {len(sources)}")
    n, fs = sources[0].length, sources[0].sample_rate_hz
    for s in sources:
        if s.length != n or s.sample_rate_hz != fs:
            raise ShapeError("all sources must share length and sample rate")
    refs = [IQWaveform(to_grid(g * s.samples), fs) for g, s in zip(spec.gains, sources)]
    clean = IQWaveform(np.sum([r.samples for r in refs], axis=0), fs)
    return apply_awgn(clean, spec.snr_db, seed), refs


# Eight radar source types for separation corpora; values override RadarParams fields.
RADAR_MIX_KINDS = {
    "rect": dict(waveform_kind="rectangular"),
    "lfm_up": dict(waveform_kind="lfm", chirp_bw_hz=1.0e6),
    "lfm_down": dict(waveform_kind="lfm", chirp_bw_hz=-1.0e6),
    "lfm_wide": dict(waveform_kind="lfm", chirp_bw_hz=2.0e6),
    "barker13": dict(waveform_kind="barker", barker_length=13),
    "barker11": dict(waveform_kind="barker", barker_length=11),
    "barker7": dict(waveform_kind="barker", barker_length=7),
    "barker5": dict(waveform_kind="barker", barker_length=5),
}


def random_radar_params(
    kind: str,
    rng: np.random.Generator,
    n_p: tuple[int, int] = (2, 6),
    t_pw: tuple[float, float] = (10.0, 16.0),
    t_pri: tuple[float, float] = (17.0, 23.0),
    t_d: tuple[float, float] = (1.0, 10.0),
) -> RadarParams:
    """Draw pulse-train timing uniformly from the given ranges (RadChar-style defaults)."""
    base = RADAR_MIX_KINDS.get(kind, dict(waveform_kind=kind))
    return RadarParams(
        n_p=int(rng.integers(n_p[0], n_p[1] + 1)),
        t_pw=float(rng.uniform(*t_pw)),
        t_pri=float(rng.uniform(*t_pri)),
        t_d=float(rng.uniform(*t_d)),
        **base,
    )
