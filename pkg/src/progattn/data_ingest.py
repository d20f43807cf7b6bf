"""
Datasets of precomputed band features: manifest loading, the CSV and packed
binary feature formats, differential entropy features from raw signals,
planted-signal synthetic data and the trial based train/test split.

Packed binary feature files are laid out as

    offset 0: uint32 little-endian C
    offset 4: uint32 little-endian F
    offset 8: C*F float64 little-endian values, row-major (channel major)

CSV feature files hold C lines of F comma separated values.
"""

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy
import scipy.signal

from .errors import ConfigError, LoadError, ShapeError, _collapse_str_
from .graph_spectral import MontageEntry, parse_montage, ring_montage, save_montage
from .tensor_core import Tensor

logger = logging.getLogger("progattn.data")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
VARIANCE_FLOOR = 1e-12
STD_FLOOR = 1e-12
_BIN_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class Band:
    name: str
    low: float
    high: float


# SEED convention for the five DE bands, in Hz
DEFAULT_BANDS = (
    Band("delta", 1.0, 3.0),
    Band("theta", 4.0, 7.0),
    Band("alpha", 8.0, 13.0),
    Band("beta", 14.0, 30.0),
    Band("gamma", 31.0, 50.0),
)


@dataclass
class Sample:
    features: Tensor  # C x F
    label: int
    subject: str
    trial: int


@dataclass(frozen=True)
class SplitRule:
    train_trials: Tuple[int, ...]
    test_trials: Tuple[int, ...]

    def to_dict(self):
        return {"train_trials": list(self.train_trials), "test_trials": list(self.test_trials)}


@dataclass
class DatasetManifest:
    channel_names: List[str]
    class_names: List[str]
    bands: List[Band]
    montage: List[MontageEntry]
    split: SplitRule


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: List[Sample] = field(default_factory=list)
    root: Optional[str] = None

    @property
    def channel_count(self) -> int:
        return len(self.manifest.channel_names)

    @property
    def band_count(self) -> int:
        return len(self.manifest.bands)

    @property
    def num_classes(self) -> int:
        return len(self.manifest.class_names)

    @property
    def subjects(self) -> List[str]:
        return sorted({s.subject for s in self.samples})


"""
Feature file formats
"""


def read_features(path: str) -> numpy.ndarray:
    if path.endswith(".bin"):
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as err:
            raise LoadError(f"Cannot read feature file [{path}]: {err}") from err
        if len(raw) < _BIN_HEADER.size:
            raise LoadError(f"Feature file [{path}] is shorter than its header")
        rows, cols = _BIN_HEADER.unpack_from(raw, 0)
        if len(raw) != _BIN_HEADER.size + 8 * rows * cols:
            raise LoadError(
                f"Feature file [{path}] declares {rows}x{cols} but holds "
                f"{(len(raw) - _BIN_HEADER.size) / 8:g} values"
            )
        values = numpy.frombuffer(raw, dtype="<f8", offset=_BIN_HEADER.size)
        return values.reshape(rows, cols).astype(numpy.float64)
    if path.endswith(".csv"):
        try:
            return numpy.loadtxt(path, delimiter=",", ndmin=2, dtype=numpy.float64)
        except (OSError, ValueError) as err:
            raise LoadError(f"Cannot parse feature file [{path}]: {err}") from err
    raise LoadError(f"Unknown feature file extension [{path}], expected .csv or .bin")


def write_features(path: str, features: numpy.ndarray) -> None:
    features = numpy.asarray(features, dtype=numpy.float64)
    if path.endswith(".bin"):
        with open(path, "wb") as f:
            f.write(_BIN_HEADER.pack(*features.shape))
            f.write(features.astype("<f8").tobytes(order="C"))
    elif path.endswith(".csv"):
        numpy.savetxt(path, features, delimiter=",", fmt="%.17g")
    else:
        raise ConfigError(f"Unknown feature format for [{path}]")


"""
Manifest loading and writing
"""


def _require(raw, key, kind, source):
    if key not in raw:
        raise LoadError(f"Manifest [{source}] is missing [{key}]")
    if not isinstance(raw[key], kind):
        raise LoadError(f"Manifest [{source}] entry [{key}] has the wrong type")
    return raw[key]


def _as_integer(value: Any) -> int:
    """Integral JSON numbers only; 2.0 passes, 1.7, true and "2" do not"""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected an integer, got {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"expected an integer, got {value!r}")
    return int(value)


def load_manifest(path: str) -> Dataset:
    """
    Loading a dataset manifest (or a directory holding `manifest.json`) and
    every sample it lists, validated against the declared channels and bands.
    """
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise LoadError(f"Cannot read manifest [{path}]: {err}") from err
    if not isinstance(raw, dict):
        raise LoadError(f"Manifest [{path}] must be a JSON object")

    channels = [str(x) for x in _require(raw, "channels", list, path)]
    classes = [str(x) for x in _require(raw, "classes", list, path)]
    if len(channels) == 0 or len(classes) == 0:
        raise LoadError(f"Manifest [{path}] needs at least one channel and one class")
    try:
        bands = [
            Band(str(b["name"]), float(b["low"]), float(b["high"]))
            for b in _require(raw, "bands", list, path)
        ]
    except (KeyError, TypeError, ValueError) as err:
        raise LoadError(f"Manifest [{path}] has malformed band entries: {err}") from err

    montage_raw = raw.get("montage")
    if isinstance(montage_raw, str):
        with_root = os.path.join(root, montage_raw)
        try:
            with open(with_root, "r") as f:
                montage_raw = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise LoadError(f"Cannot read montage [{with_root}]: {err}") from err
    if montage_raw is None:
        raise LoadError(f"Manifest [{path}] has no montage")
    montage = parse_montage(montage_raw, source=path)
    if [m.name.upper() for m in montage] != [c.upper() for c in channels]:
        raise LoadError(f"Montage channels of [{path}] do not match the manifest channels")

    split_raw = _require(raw, "split", dict, path)
    try:
        split_rule = SplitRule(
            tuple(_as_integer(t) for t in split_raw["train_trials"]),
            tuple(_as_integer(t) for t in split_raw["test_trials"]),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise LoadError(f"Manifest [{path}] has a malformed split rule: {err}") from err

    records = _require(raw, "samples", list, path)
    if len(records) == 0:
        raise LoadError("empty dataset")

    listed_trials = set(split_rule.train_trials) | set(split_rule.test_trials)
    samples = []
    for index, record in enumerate(records):
        try:
            source = record["features"]
            label = _as_integer(record["label"])
            subject = str(record.get("subject", "s01"))
            trial = _as_integer(record["trial"])
        except (KeyError, TypeError, ValueError) as err:
            raise LoadError(f"Sample record {index} is malformed: {err}") from err
        if isinstance(source, str):
            try:
                values = read_features(os.path.join(root, source))
            except LoadError as err:
                raise LoadError(f"Sample record {index}: {err}") from err
        else:
            try:
                values = numpy.asarray(source, dtype=numpy.float64)
            except (TypeError, ValueError) as err:
                raise LoadError(f"Sample record {index} has invalid inline values") from err
            if values.ndim != 2:
                raise ShapeError(f"Sample record {index} inline features must be 2-D")
        if values.shape != (len(channels), len(bands)):
            raise ShapeError(
                f"Sample record {index} has features of shape {values.shape}, "
                f"expected ({len(channels)}, {len(bands)})"
            )
        if not numpy.isfinite(values).all():
            raise LoadError(f"Sample record {index} contains non-finite values")
        if not 0 <= label < len(classes):
            raise LoadError(f"Sample record {index} has unknown label {label}")
        if trial not in listed_trials:
            raise LoadError(f"Sample record {index} belongs to trial {trial} outside the split rule")
        samples.append(Sample(Tensor(values), label, subject, trial))

    manifest = DatasetManifest(channels, classes, bands, montage, split_rule)
    logger.info(
        f"Loaded {len(samples)} samples ({len(channels)} channels, "
        f"{len(bands)} bands, {len(classes)} classes) from [{path}]"
    )
    return Dataset(manifest, samples, root)


def write_dataset(dataset: Dataset, out_dir: str, fmt: str = "bin") -> str:
    """Writing manifest, montage and one feature file per sample"""
    if fmt not in ("bin", "csv"):
        raise ConfigError(f"Unknown feature format [{fmt}]")
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    manifest = dataset.manifest
    records = []
    for index, sample in enumerate(dataset.samples):
        rel = os.path.join("features", f"{index:05d}.{fmt}")
        write_features(os.path.join(out_dir, rel), sample.features.data)
        records.append(
            {
                "features": rel,
                "label": sample.label,
                "subject": sample.subject,
                "trial": sample.trial,
            }
        )
    save_montage(os.path.join(out_dir, "montage.json"), manifest.montage)
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w") as f:
        json.dump(
            {
                "format_version": MANIFEST_VERSION,
                "channels": manifest.channel_names,
                "classes": manifest.class_names,
                "bands": [{"name": b.name, "low": b.low, "high": b.high} for b in manifest.bands],
                "montage": "montage.json",
                "samples": records,
                "split": manifest.split.to_dict(),
            },
            f,
            indent=2,
        )
    logger.info(f"Wrote {len(records)} samples to [{out_dir}]")
    return manifest_path


"""
Differential entropy features
"""


def differential_entropy(variance) -> numpy.ndarray:
    """0.5 * ln(2 pi e sigma^2) with sigma^2 clamped at 1e-12"""
    variance = numpy.maximum(numpy.asarray(variance, dtype=numpy.float64), VARIANCE_FLOOR)
    return 0.5 * numpy.log(2 * math.pi * math.e * variance)


def compute_de(raw, fs: float, bands: Sequence[Band] = DEFAULT_BANDS) -> Tensor:
    """
    Per channel and band: 4th-order Butterworth band-pass (two biquad
    sections) applied forward and backward, then the Gaussian differential
    entropy of the unbiased variance of the filtered signal.
    """
    raw = numpy.asarray(raw, dtype=numpy.float64)
    if raw.ndim == 1:
        raw = raw[None, :]
    if raw.ndim != 2:
        raise ShapeError(f"Raw signal must be C x T, got shape {raw.shape}")
    nyquist = fs / 2.0
    for band in bands:
        if not 0 < band.low < band.high:
            raise ConfigError(f"Band [{band.name}] must satisfy 0 < low < high")
        if band.high >= nyquist:
            raise ConfigError(
                f"Band [{band.name}] edge {band.high} Hz is not below Nyquist {nyquist} Hz"
            )
    min_length = 2 * fs / min(b.low for b in bands)
    if raw.shape[1] < min_length:
        raise ConfigError(
            _collapse_str_(
                f"""
                Signal of {raw.shape[1]} samples is too short for the lowest band
                edge, at least {int(math.ceil(min_length))} samples are needed at
                fs={fs} Hz.
                """
            )
        )

    out = numpy.zeros((raw.shape[0], len(bands)))
    for j, band in enumerate(bands):
        sos = scipy.signal.butter(
            2, [band.low, band.high], btype="bandpass", fs=fs, output="sos"
        )
        filtered = scipy.signal.sosfiltfilt(sos, raw, axis=1)
        out[:, j] = differential_entropy(filtered.var(axis=1, ddof=1))
    return Tensor(out)


"""
Synthetic planted-signal data
"""


def default_planted(channels: int, classes: int, per_class: int = 4) -> List[List[int]]:
    """Consecutive blocks of `per_class` channels, one block per class"""
    return [[(e * per_class + j) % channels for j in range(per_class)] for e in range(classes)]


def synth_generate(
    channels: int = 16,
    bands: int = 5,
    classes: int = 3,
    n_per_class: int = 200,
    planted: Optional[Sequence[Sequence[int]]] = None,
    snr: float = 3.0,
    seed: int = 42,
    trials_per_class: int = 5,
    subjects: int = 1,
    montage: Optional[Sequence[MontageEntry]] = None,
) -> Dataset:
    """
    Standard normal background features; for class e every band of each
    channel in `planted[e]` is shifted by +snr. Trial t (1-based) carries class
    (t - 1) mod E and samples of a class are dealt round-robin over its trials.
    The first 60% of the trials form the training split.
    """
    if montage is not None:
        montage = list(montage)
        channels = len(montage)
    if channels < 2 or bands < 1 or classes < 2:
        raise ConfigError("Synthetic data needs C >= 2, F >= 1 and E >= 2")
    if n_per_class < 1 or trials_per_class < 1 or subjects < 1:
        raise ConfigError("n_per_class, trials_per_class and subjects must be >= 1")
    if snr < 0:
        raise ConfigError(f"snr must be non-negative, got {snr}")
    if planted is None:
        planted = default_planted(channels, classes)
    planted = [sorted(set(int(c) for c in group)) for group in planted]
    if len(planted) != classes:
        raise ConfigError(f"{len(planted)} planted channel sets for {classes} classes")
    for group in planted:
        if len(group) == 0 or not all(0 <= c < channels for c in group):
            raise ConfigError(f"Planted channel set {group} is empty or out of range")
    if all(group == planted[0] for group in planted):
        logger.warning(
            "All classes share the same planted channels, classes are indistinguishable"
        )

    if montage is None:
        montage = ring_montage(channels)
    if bands == len(DEFAULT_BANDS):
        band_list = list(DEFAULT_BANDS)
    else:
        band_list = [Band(f"band{j}", 4.0 * j + 1.0, 4.0 * j + 4.0) for j in range(bands)]

    rng = numpy.random.default_rng(seed)
    n_trials = classes * trials_per_class
    class_trials = [
        [t for t in range(1, n_trials + 1) if (t - 1) % classes == e] for e in range(classes)
    ]
    samples = []
    for s in range(subjects):
        subject = f"s{s + 1:02d}"
        for e in range(classes):
            for j in range(n_per_class):
                x = rng.standard_normal((channels, bands))
                x[planted[e], :] += snr
                trial = class_trials[e][j % trials_per_class]
                samples.append(Sample(Tensor(x), e, subject, trial))

    n_train = int(round(0.6 * n_trials))
    split_rule = SplitRule(
        tuple(range(1, n_train + 1)), tuple(range(n_train + 1, n_trials + 1))
    )
    manifest = DatasetManifest(
        [m.name for m in montage],
        [f"class{e}" for e in range(classes)],
        band_list,
        montage,
        split_rule,
    )
    logger.info(
        f"Generated {len(samples)} synthetic samples (C={channels}, F={bands}, "
        f"E={classes}, snr={snr}, seed={seed})"
    )
    return Dataset(manifest, samples)


"""
Splits and standardization
"""


def split(
    dataset: Union[Dataset, Sequence[Sample]], rule: Optional[SplitRule] = None
) -> Tuple[List[Sample], List[Sample]]:
    """
    Subject-dependent trial split: within every subject, samples of the train
    trials form the training set and samples of the test trials the test set.
    """
    if isinstance(dataset, Dataset):
        samples = dataset.samples
        rule = rule or dataset.manifest.split
    else:
        samples = list(dataset)
    if rule is None:
        raise ConfigError("No split rule given")
    train_trials, test_trials = set(rule.train_trials), set(rule.test_trials)
    overlap = train_trials & test_trials
    if overlap:
        raise ConfigError(f"Trials {sorted(overlap)} appear in both train and test lists")
    present = {s.trial for s in samples}
    missing = (train_trials | test_trials) - present
    if missing:
        raise ConfigError(f"Split rule refers to unknown trials {sorted(missing)}")
    train = [s for s in samples if s.trial in train_trials]
    test = [s for s in samples if s.trial in test_trials]
    return train, test


def fit_standardizer(samples: Sequence[Sample]) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """Per channel-band mean and standard deviation (std < 1e-12 replaced by 1)"""
    if len(samples) == 0:
        raise ConfigError("Cannot fit standardization on an empty split")
    stacked = numpy.stack([s.features.data for s in samples])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < STD_FLOOR] = 1.0
    return mean, std


def apply_standardizer(features: numpy.ndarray, mean: numpy.ndarray, std: numpy.ndarray):
    return (features - mean) / std
