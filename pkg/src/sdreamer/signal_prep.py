"""Signal records, the on-disk container, preprocessing and synthetic data."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

WAKE, SWS, REM = 0, 1, 2
UNLABELED = -1
STAGE_NAMES = ("Wake", "SWS", "REM")
LABEL_CHARS = {"W": WAKE, "S": SWS, "R": REM, "-": UNLABELED}
CHAR_FOR_LABEL = {v: k for k, v in LABEL_CHARS.items()}
CHANNEL_ORDER = ("eeg", "emg")


class RecordFormatError(ValueError):
    """A container file is malformed; ``offset`` locates the problem."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} (offset {offset}): {message}")


class DegenerateSignalError(ValueError):
    pass


@dataclass
class SignalRecord:
    subject_id: str
    sample_rate_hz: int
    eeg: np.ndarray | None
    emg: np.ndarray | None
    labels: np.ndarray  # int8 per second, UNLABELED for '-'

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.eeg is None and self.emg is None:
            raise ValueError(f"record {self.subject_id!r} has no channels")
        if self.eeg is not None and self.emg is not None and len(self.eeg) != len(self.emg):
            raise ValueError(
                f"record {self.subject_id!r}: eeg length {len(self.eeg)} != emg length {len(self.emg)}"
            )
        expected = self.n_samples // self.sample_rate_hz
        if len(self.labels) != expected:
            raise ValueError(
                f"record {self.subject_id!r}: {len(self.labels)} labels for {expected} whole seconds"
            )

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(c for c in CHANNEL_ORDER if getattr(self, c) is not None)

    @property
    def n_samples(self) -> int:
        ch = self.eeg if self.eeg is not None else self.emg
        return len(ch)

    @property
    def n_seconds(self) -> int:
        return len(self.labels)


@dataclass
class NormalizationStats:
    subject_id: str
    mean: dict[str, float]
    std: dict[str, float]


@dataclass
class EpochSample:
    """One second of signal, shape ``(M, T)`` in channel order [EEG, EMG].

    A missing modality is carried as a row of NaN and listed in ``channels``.
    """

    signal: np.ndarray
    label: int
    subject_id: str
    position: int
    channels: tuple[str, ...] = CHANNEL_ORDER

    @property
    def labeled(self) -> bool:
        return self.label != UNLABELED


@dataclass
class SequenceSample:
    epochs: list[EpochSample]

    @property
    def K(self) -> int:
        return len(self.epochs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.epochs], dtype=np.int64)


@dataclass
class PatchedEpoch:
    patches: np.ndarray  # (M, P, W)
    width: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


# ------------------------------------------------------------------ container

def _read_f32(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) % 4:
        raise RecordFormatError(path, len(raw) - len(raw) % 4, "trailing partial float32 sample")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def _parse_labels(path: Path) -> np.ndarray:
    text = path.read_text(encoding="ascii", errors="replace")
    out = np.empty(len(text), dtype=np.int8)
    for i, ch in enumerate(text):
        code = LABEL_CHARS.get(ch)
        if code is None:
            raise RecordFormatError(path, i, f"invalid label character {ch!r}")
        out[i] = code
    return out


def load_record(path) -> SignalRecord:
    """Read one subject directory (``meta``, ``eeg.f32le``, ``emg.f32le``, ``labels.txt``)."""
    root = Path(path)
    meta_path = root / "meta"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise RecordFormatError(meta_path, 0, "missing meta header") from exc
    except json.JSONDecodeError as exc:
        raise RecordFormatError(meta_path, exc.pos, f"malformed meta header: {exc.msg}") from exc
    for key in ("subject_id", "sample_rate_hz", "channels"):
        if key not in meta:
            raise RecordFormatError(meta_path, 0, f"meta header lacks {key!r}")
    channels = tuple(meta["channels"])
    if not channels or any(c not in CHANNEL_ORDER for c in channels) or list(channels) != sorted(
        channels, key=CHANNEL_ORDER.index
    ):
        raise RecordFormatError(meta_path, 0, f"channel order must be a subsequence of {CHANNEL_ORDER}")
    rate = int(meta["sample_rate_hz"])
    if rate <= 0:
        raise RecordFormatError(meta_path, 0, "sample_rate_hz must be positive")

    data = {c: None for c in CHANNEL_ORDER}
    for c in channels:
        data[c] = _read_f32(root / f"{c}.f32le")
    if data["eeg"] is not None and data["emg"] is not None and len(data["eeg"]) != len(data["emg"]):
        n = min(len(data["eeg"]), len(data["emg"]))
        longer = "eeg" if len(data["eeg"]) > n else "emg"
        raise RecordFormatError(
            root / f"{longer}.f32le",
            4 * n,
            f"channel length mismatch: eeg has {len(data['eeg'])} samples, emg has {len(data['emg'])}",
        )
    n_samples = len(data[channels[0]])
    labels = _parse_labels(root / "labels.txt")
    expected = n_samples // rate
    if len(labels) != expected:
        raise RecordFormatError(
            root / "labels.txt",
            min(len(labels), expected),
            f"label count {len(labels)} does not match {expected} whole seconds of signal",
        )
    return SignalRecord(str(meta["subject_id"]), rate, data["eeg"], data["emg"], labels)


def save_record(record: SignalRecord, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject_id": record.subject_id,
        "sample_rate_hz": record.sample_rate_hz,
        "channels": list(record.channels),
    }
    (root / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for c in record.channels:
        np.asarray(getattr(record, c), dtype="<f4").tofile(root / f"{c}.f32le")
    (root / "labels.txt").write_text("".join(CHAR_FOR_LABEL[int(v)] for v in record.labels))
    return root


def list_subject_dirs(dataset_dir) -> list[Path]:
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    return sorted(p for p in root.iterdir() if (p / "meta").is_file())


def load_dataset(dataset_dir, subjects: Sequence[str] | None = None) -> list[SignalRecord]:
    """Load every subject directory, optionally keeping only ``subjects``."""
    from concurrent.futures import ThreadPoolExecutor

    dirs = list_subject_dirs(dataset_dir)
    workers = max(1, int(os.environ.get("SDREAMER_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(load_record, dirs))
    else:
        records = [load_record(d) for d in dirs]
    if subjects is not None:
        wanted = set(subjects)
        missing = wanted - {r.subject_id for r in records}
        if missing:
            raise KeyError(f"subjects not found in {dataset_dir}: {sorted(missing)}")
        records = [r for r in records if r.subject_id in wanted]
    return records


# -------------------------------------------------------------- preprocessing

def normalize_subject(record: SignalRecord) -> tuple[SignalRecord, NormalizationStats]:
    """Z-score each channel with the subject's whole-trace mean and population std."""
    if record.n_samples == 0:
        raise ValueError(f"record {record.subject_id!r} is empty")
    means, stds, out = {}, {}, {}
    for c in record.channels:
        x = np.asarray(getattr(record, c), dtype=np.float64)
        mu = float(x.mean())
        sd = float(x.std())
        if sd < 1e-12:
            raise DegenerateSignalError(
                f"record {record.subject_id!r}: {c} channel is constant (std {sd:.3g})"
            )
        means[c], stds[c] = mu, sd
        out[c] = (x - mu) / sd
    normed = replace(record, eeg=out.get("eeg"), emg=out.get("emg"))
    return normed, NormalizationStats(record.subject_id, means, stds)


def slice_epochs(record: SignalRecord) -> list[EpochSample]:
    """Cut a record into one-second epochs; a trailing partial second is dropped."""
    rate = record.sample_rate_hz
    n = record.n_samples // rate
    if n == 0:
        raise ValueError(f"record {record.subject_id!r} holds less than one second of signal")
    rows = []
    for c in CHANNEL_ORDER:
        x = getattr(record, c)
        if x is None:
            rows.append(np.full((n, rate), np.nan))
        else:
            rows.append(np.asarray(x[: n * rate], dtype=np.float64).reshape(n, rate))
    stacked = np.stack(rows, axis=1)  # (n, M, T)
    return [
        EpochSample(stacked[i], int(record.labels[i]), record.subject_id, i, record.channels)
        for i in range(n)
    ]


def make_sequences(epochs: Sequence[EpochSample], K: int, stride: int) -> list[SequenceSample]:
    """Sliding windows of ``K`` consecutive epochs that never cross a subject boundary."""
    if K < 1 or stride < 1:
        raise ValueError("K and stride must be >= 1")
    runs: list[list[EpochSample]] = []
    for ep in epochs:
        if runs and runs[-1][-1].subject_id == ep.subject_id and runs[-1][-1].position + 1 == ep.position:
            runs[-1].append(ep)
        else:
            runs.append([ep])
    out = []
    for run in runs:
        for start in range(0, len(run) - K + 1, stride):
            out.append(SequenceSample(list(run[start : start + K])))
    if not out and epochs:
        log.warning("no run of %d consecutive epochs; produced no sequences", K)
    return out


def patch(epoch: EpochSample | np.ndarray, W: int) -> PatchedEpoch:
    """Split each channel into ``floor(T / W)`` non-overlapping windows of width ``W``."""
    signal = epoch.signal if isinstance(epoch, EpochSample) else np.asarray(epoch)
    t = signal.shape[-1]
    if not 1 <= W <= t:
        raise ValueError(f"patch width {W} outside 1..{t}")
    p = t // W
    return PatchedEpoch(signal[..., : p * W].reshape(signal.shape[:-1] + (p, W)), W)


def patch_array(signals: np.ndarray, W: int) -> np.ndarray:
    """Vectorised :func:`patch` for ``(..., T)`` arrays."""
    t = signals.shape[-1]
    if not 1 <= W <= t:
        raise ValueError(f"patch width {W} outside 1..{t}")
    p = t // W
    return signals[..., : p * W].reshape(signals.shape[:-1] + (p, W))


# ------------------------------------------------------------ synthetic data

# Doubly stochastic, so the stationary distribution is uniform; the dominant
# off-diagonal mass follows the Wake -> SWS -> REM -> Wake cycle.
DEFAULT_TRANSITIONS = (
    (0.500, 0.375, 0.125),
    (0.125, 0.500, 0.375),
    (0.375, 0.125, 0.500),
)


@dataclass
class StageSignature:
    eeg_freq_hz: float
    eeg_amp: float
    emg_amp: float


def _default_signatures() -> dict[int, StageSignature]:
    return {
        WAKE: StageSignature(eeg_freq_hz=24.0, eeg_amp=0.6, emg_amp=1.0),
        SWS: StageSignature(eeg_freq_hz=2.0, eeg_amp=2.0, emg_amp=0.08),
        REM: StageSignature(eeg_freq_hz=7.0, eeg_amp=0.7, emg_amp=0.05),
    }


@dataclass
class SynthConfig:
    transition_matrix: tuple[tuple[float, ...], ...] = DEFAULT_TRANSITIONS
    initial_state: int | None = None  # None: draw from the stationary distribution
    sample_rate_hz: int = 512
    signatures: dict[int, StageSignature] = field(default_factory=_default_signatures)
    eeg_noise: float = 0.3
    emg_noise: float = 0.02
    freq_jitter: float = 0.1
    subject_gain_sigma: float = 0.3
    unlabeled_fraction: float = 0.0

    def validated_matrix(self) -> np.ndarray:
        return validate_transition_matrix(self.transition_matrix)


def validate_transition_matrix(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"transition matrix must be 3x3, got shape {m.shape}")
    for i, row in enumerate(m):
        if np.any(row < 0):
            raise ValueError(f"transition matrix row {i} has a negative entry: {row.tolist()}")
        if abs(row.sum() - 1.0) > 1e-9:
            raise ValueError(f"transition matrix row {i} sums to {row.sum():.12g}, not 1")
    return m


def stationary_distribution(matrix) -> np.ndarray:
    m = validate_transition_matrix(matrix)
    vals, vecs = np.linalg.eig(m.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


def synth_generate(
    n_subjects: int, seconds_per_subject: int, seed: int, config: SynthConfig | None = None
) -> list[SignalRecord]:
    """Markov-chain stage sequences rendered into EEG/EMG traces.

    Samples are rounded to float32 so the records survive the on-disk
    container unchanged.
    """
    if n_subjects <= 0 or seconds_per_subject <= 0:
        raise ValueError("n_subjects and seconds_per_subject must be positive")
    cfg = config or SynthConfig()
    trans = cfg.validated_matrix()
    cum = np.cumsum(trans, axis=1)
    start_dist = stationary_distribution(trans)
    rate = cfg.sample_rate_hz
    t = np.arange(rate) / rate
    records = []
    for idx, child in enumerate(np.random.SeedSequence(seed).spawn(n_subjects)):
        rng = np.random.default_rng(child)
        states = np.empty(seconds_per_subject, dtype=np.int8)
        s = cfg.initial_state if cfg.initial_state is not None else int(rng.choice(3, p=start_dist))
        u = rng.random(seconds_per_subject)
        for i in range(seconds_per_subject):
            states[i] = s
            s = min(int(np.searchsorted(cum[s], u[i], side="right")), 2)

        gain_eeg, gain_emg = np.exp(cfg.subject_gain_sigma * rng.standard_normal(2))
        offset_eeg, offset_emg = 0.1 * rng.standard_normal(2)
        freqs = np.array([cfg.signatures[int(k)].eeg_freq_hz for k in states])
        freqs = freqs * (1.0 + cfg.freq_jitter * rng.standard_normal(seconds_per_subject))
        phases = rng.uniform(0, 2 * np.pi, seconds_per_subject)
        eeg_amp = np.array([cfg.signatures[int(k)].eeg_amp for k in states])
        emg_amp = np.array([cfg.signatures[int(k)].emg_amp for k in states])
        eeg = eeg_amp[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])
        eeg = eeg + cfg.eeg_noise * rng.standard_normal(eeg.shape)
        emg = emg_amp[:, None] * rng.standard_normal(eeg.shape)
        emg = emg + cfg.emg_noise * rng.standard_normal(eeg.shape)
        eeg = (gain_eeg * eeg + offset_eeg).reshape(-1).astype(np.float32).astype(np.float64)
        emg = (gain_emg * emg + offset_emg).reshape(-1).astype(np.float32).astype(np.float64)

        labels = states.copy()
        if cfg.unlabeled_fraction > 0:
            labels[rng.random(seconds_per_subject) < cfg.unlabeled_fraction] = UNLABELED
        records.append(SignalRecord(f"subject{idx:03d}", rate, eeg, emg, labels))
    return records


def write_dataset(records: Sequence[SignalRecord], out_dir) -> list[Path]:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    return [save_record(r, root / r.subject_id) for r in records]


def preprocess(records: Sequence[SignalRecord]) -> list[EpochSample]:
    """Normalise each subject, then slice every record into epochs."""
    epochs: list[EpochSample] = []
    for r in records:
        normed, _ = normalize_subject(r)
        epochs.extend(slice_epochs(normed))
    return epochs


# ----------------------------------------------------------- model-ready data

@dataclass
class PatchedDataset:
    """Patched epochs ``x`` of shape ``(N, 2, P, W)`` with per-epoch metadata.

    For ``kind == "sequence"`` an item is the window of ``K`` epochs starting
    at ``starts[i]``; windows never cross a subject boundary.
    """

    x: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    positions: np.ndarray
    kind: str = "epoch"
    K: int = 1
    starts: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x) if self.kind == "epoch" else len(self.starts)

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(c for i, c in enumerate(CHANNEL_ORDER) if not np.isnan(self.x[:, i]).any())

    def window_x(self, starts) -> np.ndarray:
        starts = np.asarray(starts)
        return self.x[starts[:, None] + np.arange(self.K)]

    def batch_x(self, idx) -> np.ndarray:
        if self.kind == "epoch":
            return self.x[idx]
        return self.window_x(self.starts[idx])

    def batch_labels(self, idx) -> np.ndarray:
        if self.kind == "epoch":
            return self.labels[idx]
        return self.labels[self.starts[idx][:, None] + np.arange(self.K)]

    def runs(self) -> list[tuple[int, int]]:
        """``(start, stop)`` index ranges of consecutive same-subject epochs."""
        out = []
        start = 0
        for i in range(1, len(self.labels) + 1):
            if (
                i == len(self.labels)
                or self.subjects[i] != self.subjects[i - 1]
                or self.positions[i] != self.positions[i - 1] + 1
            ):
                out.append((start, i))
                start = i
        return out

    def cover_windows(self, K: int) -> np.ndarray:
        """Window starts covering every epoch once; a short tail reuses an end-aligned window."""
        starts = []
        for lo, hi in self.runs():
            if hi - lo < K:
                continue
            s = list(range(lo, hi - K + 1, K))
            if s[-1] + K < hi:
                s.append(hi - K)
            starts.extend(s)
        return np.asarray(starts, dtype=np.int64)

    def with_channels(self, channels: Sequence[str]) -> "PatchedDataset":
        """Copy with every channel outside ``channels`` blanked to NaN."""
        x = self.x.copy()
        for i, c in enumerate(CHANNEL_ORDER):
            if c not in channels:
                x[:, i] = np.nan
        return replace(self, x=x)


def build_dataset(
    records: Sequence[SignalRecord],
    patch_width: int,
    kind: str = "epoch",
    K: int = 16,
    stride: int = 1,
) -> PatchedDataset:
    """Normalise, slice and patch ``records`` into a model-ready dataset."""
    epochs = preprocess(records)
    if not epochs:
        raise ValueError("no epochs to build a dataset from")
    x = patch_array(np.stack([e.signal for e in epochs]), patch_width)
    ds = PatchedDataset(
        x=x,
        labels=np.array([e.label for e in epochs], dtype=np.int64),
        subjects=np.array([e.subject_id for e in epochs]),
        positions=np.array([e.position for e in epochs], dtype=np.int64),
    )
    if kind == "epoch":
        return ds
    if kind != "sequence":
        raise ValueError(f"unknown dataset kind {kind!r}")
    if K < 1 or stride < 1:
        raise ValueError("K and stride must be >= 1")
    starts = []
    for lo, hi in ds.runs():
        starts.extend(range(lo, hi - K + 1, stride))
    if not starts:
        log.warning("no run of %d consecutive epochs; sequence dataset is empty", K)
    return replace(ds, kind="sequence", K=K, starts=np.asarray(starts, dtype=np.int64))
