"""Shoebox-room simulation via the mirror image-source model.

Images of a source at s in a box with side lengths L live at
(1 - 2p) s + 2 r L elementwise, over the binary vector p in {0,1}^3 and
the integer lattice r; the image for (r, p) has undergone
sum_i (|r_i + p_i| + |r_i|) wall reflections.  Each reflection scales
the amplitude by beta = sqrt(1 - alpha) and propagation contributes the
free-field spreading 1/(4 pi d).  Impulse responses are rendered by
stamping an 81-tap Hann-windowed sinc at each image's fractional delay.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache
from itertools import product

import numpy as np
from scipy.signal import fftconvolve, firwin
from scipy.spatial.distance import cdist


class PlacementError(Exception):
    """Source, microphone, or array geometry is inconsistent with the room."""


FRAC_DELAY_TAPS = 81
_HALF = FRAC_DELAY_TAPS // 2


@dataclass(frozen=True)
class RoomScenario:
    """Geometry, acoustics, sampling, and signal plan for one experiment."""

    room: tuple = (6.0, 5.0, 3.0)
    absorption: float = 0.55
    max_order: int = 26
    c: float = 343.0
    fs: int = 3000
    source: tuple = (1.0, 2.0, 1.5)
    array_center: tuple = (4.0, 3.0, 1.5)
    array_side: float = 0.5
    n_mics: int = 30
    batch_samples: int = 50
    n_batches: int = 20
    snr_db: float = 40.0
    n_eval: int = 100
    band: tuple = (50.0, 1000.0)
    source_taps: int = 257
    seed: int = 0

    def __post_init__(self):
        room = np.asarray(self.room, dtype=np.float64)
        src = np.asarray(self.source, dtype=np.float64)
        center = np.asarray(self.array_center, dtype=np.float64)
        if np.any(room <= 0):
            raise PlacementError("room dimensions must be positive")
        if np.any(src <= 0) or np.any(src >= room):
            raise PlacementError("source must lie strictly inside the room")
        half = self.array_side / 2.0
        if np.any(center - half < 0) or np.any(center + half > room):
            raise PlacementError("array cube must lie inside the room")
        if not 0.0 <= self.absorption <= 1.0:
            raise PlacementError("absorption must be in [0, 1]")
        if self.fs <= 2.0 * self.band[1]:
            raise PlacementError(
                f"fs = {self.fs} must exceed twice the band top {self.band[1]}")
        if self.n_mics < 1 or self.batch_samples < 1 or self.n_batches < 1:
            raise PlacementError("mic/batch counts must be positive")

    @property
    def batch_span(self) -> float:
        """Duration of one batch window in seconds."""
        return self.batch_samples / self.fs

    def array_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        center = np.asarray(self.array_center)
        half = self.array_side / 2.0
        return center - half, center + half


@dataclass
class ImpulseResponse:
    h: np.ndarray
    fs: int

    def energy(self) -> float:
        return float(np.sum(self.h * self.h))


@lru_cache(maxsize=8)
def _image_set(room: tuple, source: tuple, max_order: int):
    """Image positions and reflection orders; independent of the receiver."""
    room_v = np.asarray(room, dtype=np.float64)
    src = np.asarray(source, dtype=np.float64)
    reach = max_order // 2 + 1
    axis = np.arange(-reach, reach + 1)
    rr = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    positions, orders = [], []
    for p in product((0, 1), repeat=3):
        p_v = np.asarray(p)
        # image (1-2p)s + 2rL needs |2r - p| wall bounces per axis
        order = np.sum(np.abs(2 * rr - p_v), axis=1)
        keep = order <= max_order
        positions.append((1.0 - 2.0 * p_v) * src + 2.0 * rr[keep] * room_v)
        orders.append(order[keep])
    return np.concatenate(positions), np.concatenate(orders)


def image_sources(scenario: RoomScenario, mic) -> tuple[np.ndarray, np.ndarray]:
    """Positions (K, 3) and signed-free amplitudes (K,) of every image
    up to the scenario's reflection order, for one receiver."""
    mic = np.asarray(mic, dtype=np.float64)
    positions, orders = _image_set(tuple(scenario.room), tuple(scenario.source),
                                   scenario.max_order)
    dist = np.linalg.norm(positions - mic, axis=1)
    if np.any(dist < 1e-9):
        raise PlacementError("receiver coincides with the source or an image")
    beta = np.sqrt(1.0 - scenario.absorption)
    amps = beta ** orders / (4.0 * np.pi * dist)
    return positions, amps


def render_rir(scenario: RoomScenario, mic) -> ImpulseResponse:
    """Impulse response at one receiver.

    Each image contributes amp * hann(u) * sinc(u) with u the sample
    offset from its fractional delay d/c*fs, over 81 taps.
    """
    mic = np.asarray(mic, dtype=np.float64)
    positions, amps = image_sources(scenario, mic)
    delays = np.linalg.norm(positions - mic, axis=1) / scenario.c * scenario.fs
    n_len = int(np.ceil(delays.max())) + _HALF + 2
    offsets = np.arange(-_HALF, _HALF + 1)
    h = np.zeros(n_len)
    # chunked so high reflection orders stay memory-flat
    for k in range(0, len(delays), 65536):
        d = delays[k:k + 65536]
        centers = np.round(d).astype(int)
        idx = centers[:, None] + offsets[None, :]
        u = idx - d[:, None]
        taps = amps[k:k + 65536, None] \
            * 0.5 * (1.0 + np.cos(2.0 * np.pi * u / FRAC_DELAY_TAPS)) * np.sinc(u)
        mask = (idx >= 0) & (idx < n_len)
        np.add.at(h, idx[mask], taps[mask])
    return ImpulseResponse(h, scenario.fs)


def t60_schroeder(ir: ImpulseResponse) -> float:
    """Reverberation time from the Schroeder decay curve, fitted on the
    -5 dB to -35 dB span and extrapolated to 60 dB."""
    edc = np.cumsum(ir.h[::-1] ** 2)[::-1]
    edc_db = 10.0 * np.log10(edc / edc[0] + 1e-300)
    i5 = int(np.argmax(edc_db <= -5.0))
    i35 = int(np.argmax(edc_db <= -35.0))
    if i35 <= i5:
        raise ValueError("decay range too short for a T30 fit")
    t = np.arange(len(edc_db)) / ir.fs
    slope, _ = np.polyfit(t[i5:i35], edc_db[i5:i35], 1)
    return float(-60.0 / slope)


def synth_source(scenario: RoomScenario, n_samples: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Band-limited source: unit-variance white noise through a
    windowed-sinc bandpass FIR, group delay compensated (valid-mode
    convolution, so every output sample sees full filter support)."""
    taps = firwin(scenario.source_taps, list(scenario.band), fs=scenario.fs,
                  pass_zero=False, window="hamming")
    noise = rng.standard_normal(n_samples + scenario.source_taps - 1)
    out = np.convolve(noise, taps, mode="valid")
    # the band excludes DC, so the finite draw must be zero mean too
    return out - out.mean()


@dataclass
class SoundFieldData:
    """One simulated realization: noisy mic batches plus noiseless
    evaluation signals on the same batch windows."""

    scenario: RoomScenario
    mic_pos: np.ndarray        # (M, 3)
    eval_pos: np.ndarray       # (P, 3)
    batches: np.ndarray        # (B, M, N) noisy measurements
    eval_clean: np.ndarray     # (B, P, N) noiseless field at eval points
    measured_snr_db: float

    def batch_dataset(self, b: int):
        """Flattened (M*N, 4) spacetime rows and values for batch b,
        mic-major, with batch-relative times n/fs."""
        from .gp import Dataset
        m, n = self.batches.shape[1:]
        times = np.arange(n) / self.scenario.fs
        x = np.empty((m * n, 4))
        x[:, :3] = np.repeat(self.mic_pos, n, axis=0)
        x[:, 3] = np.tile(times, m)
        return Dataset(x, self.batches[b].reshape(-1))

    def eval_points(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Query rows (P*N, 4) and true values (P*N,) for batch b."""
        p, n = self.eval_clean.shape[1:]
        times = np.arange(n) / self.scenario.fs
        x = np.empty((p * n, 4))
        x[:, :3] = np.repeat(self.eval_pos, n, axis=0)
        x[:, 3] = np.tile(times, p)
        return x, self.eval_clean[b].reshape(-1)


def simulate(scenario: RoomScenario) -> SoundFieldData:
    """Render one realization end to end.

    Random draws (mic placement, eval placement, source noise,
    measurement noise) come from independent child streams of the
    scenario seed.  Mic signals are scaled to unit RMS before noise is
    added, so the noise level follows directly from the SNR.
    """
    ss = np.random.SeedSequence(scenario.seed)
    rng_mic, rng_eval, rng_src, rng_noise = (np.random.default_rng(s)
                                             for s in ss.spawn(4))
    lo, hi = scenario.array_bounds()
    mic_pos = rng_mic.uniform(lo, hi, size=(scenario.n_mics, 3))
    eval_pos = rng_eval.uniform(lo, hi, size=(scenario.n_eval, 3))

    rirs = [render_rir(scenario, pos) for pos in mic_pos]
    rirs_eval = [render_rir(scenario, pos) for pos in eval_pos]
    rir_len = max(max(len(r.h) for r in rirs), max(len(r.h) for r in rirs_eval))

    n_keep = scenario.n_batches * scenario.batch_samples
    total = rir_len + n_keep  # discard the first rir_len samples as transient
    src = synth_source(scenario, total, rng_src)

    def settled(ir: ImpulseResponse) -> np.ndarray:
        y = fftconvolve(src, ir.h)[:total]
        return y[rir_len:]

    mic_clean = np.stack([settled(r) for r in rirs])        # (M, n_keep)
    eval_clean = np.stack([settled(r) for r in rirs_eval])  # (P, n_keep)

    gain = 1.0 / np.sqrt(np.mean(mic_clean ** 2))
    mic_clean *= gain
    eval_clean *= gain

    noise_std = 10.0 ** (-scenario.snr_db / 20.0)
    noise = noise_std * rng_noise.standard_normal(mic_clean.shape)
    noisy = mic_clean + noise
    measured_snr = 10.0 * np.log10(np.mean(mic_clean ** 2) / np.mean(noise ** 2))

    b, n = scenario.n_batches, scenario.batch_samples
    batches = noisy.reshape(len(mic_pos), b, n).transpose(1, 0, 2).copy()
    eval_b = eval_clean.reshape(len(eval_pos), b, n).transpose(1, 0, 2).copy()
    return SoundFieldData(scenario, mic_pos, eval_pos, batches, eval_b,
                          float(measured_snr))


# ------------------------------------------------------------- container

def save_dataset(path, data: SoundFieldData) -> None:
    """Bit-exact .npz dump of one realization."""
    fields = asdict(data.scenario)
    payload = {f"scenario_{k}": np.asarray(v) for k, v in fields.items()}
    payload.update(
        mic_pos=data.mic_pos, eval_pos=data.eval_pos,
        batches=data.batches, eval_clean=data.eval_clean,
        measured_snr_db=np.float64(data.measured_snr_db))
    np.savez(path, **payload)


def load_dataset(path) -> SoundFieldData:
    with np.load(path, allow_pickle=False) as z:
        scenario = RoomScenario(
            room=tuple(z["scenario_room"]),
            absorption=float(z["scenario_absorption"]),
            max_order=int(z["scenario_max_order"]),
            c=float(z["scenario_c"]),
            fs=int(z["scenario_fs"]),
            source=tuple(z["scenario_source"]),
            array_center=tuple(z["scenario_array_center"]),
            array_side=float(z["scenario_array_side"]),
            n_mics=int(z["scenario_n_mics"]),
            batch_samples=int(z["scenario_batch_samples"]),
            n_batches=int(z["scenario_n_batches"]),
            snr_db=float(z["scenario_snr_db"]),
            n_eval=int(z["scenario_n_eval"]),
            band=tuple(z["scenario_band"]),
            source_taps=int(z["scenario_source_taps"]),
            seed=int(z["scenario_seed"]))
        return SoundFieldData(
            scenario=scenario,
            mic_pos=z["mic_pos"], eval_pos=z["eval_pos"],
            batches=z["batches"], eval_clean=z["eval_clean"],
            measured_snr_db=float(z["measured_snr_db"]))
