"""Experiment orchestration: configs, seeded BER sweeps, records, CSV and plot data.

Seeding rule: repeat ``r`` of a config with base seed ``s`` uses run seed
``s + r``. Epoch ``e`` is shuffled with ``default_rng([run_seed, e])``;
weights are initialized from ``SeedSequence(run_seed).spawn(2)[0]`` and the
write channel draws from ``SeedSequence(run_seed).spawn(2)[1]``. Spawned
children never coincide with the entropy-only shuffle sequences.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import datasets, mram
from .fault_injection import BerChannelConfig, FaultSchedule
from .models import Network, build_lenet4_binary, build_nin_binary, NIN_WIDTHS
from .tensor_core import AdamState, adam_step, softmax_xent

MODELS = ("lenet4", "nin")
DATASETS = ("mnist", "cifar10")
RUN_COLUMNS = ("ber", "repeat", "epoch", "train_loss", "test_acc")
AGG_COLUMNS = ("ber", "epoch", "mean_acc", "std_acc", "n")


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "lenet4"
    dataset: str = "mnist"
    classes: tuple | None = None        # explicit original class ids
    subset_k: int | None = None         # or: choose this many classes with subset_seed
    subset_seed: int = 0
    ber: float = 0.0
    bers: tuple = (0.0, 0.02, 0.04, 0.08, 0.16)
    epochs: int = 20
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: float = 0.85              # multiplicative, applied after every epoch
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    repeats: int = 5
    seed: int = 0
    train_limit: int | None = None      # first n training items (file order, after class subset)
    test_limit: int | None = None
    width_scale: float = 1.0
    binary_fc_input: bool = True
    out_dir: str = "runs"
    data_root: str | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        for b in (self.ber, *self.bers):
            if not (isinstance(b, (int, float)) and 0.0 <= b <= 0.5):
                raise ConfigError(f"ber must lie in [0, 0.5], got {b!r}")
        for name in ("epochs", "batch_size", "repeats"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch statistics)")
        for name in ("train_limit", "test_limit", "subset_k"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{name} must be a positive integer or null, got {v!r}")
        if self.classes is not None and self.subset_k is not None:
            raise ConfigError("give either classes or subset_k, not both")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be > 0 and lr_decay in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if not self.width_scale > 0:
            raise ConfigError("width_scale must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        for k in ("classes", "bers"):
            if d.get(k) is not None:
                if not isinstance(d[k], (list, tuple)):
                    raise ConfigError(f"{k} must be a list")
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a flat JSON object of config keys."""
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict) or any(isinstance(v, dict) for v in d.values()):
            raise ConfigError(f"{path}: expected a flat key-value object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("classes", "bers"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def run_seed(self, repeat_index: int) -> int:
        return self.seed + repeat_index


def _training_key(cfg: ExperimentConfig) -> dict:
    """Config fields that influence a run's numbers."""
    d = cfg.to_dict()
    for k in ("out_dir", "data_root", "repeats", "bers"):
        d.pop(k)
    return d


@dataclass
class RunRecord:
    config: dict                 # training-relevant config snapshot including ber
    repeat: int
    seed: int
    train_loss: list
    test_acc: list
    wall_time: float = 0.0

    @property
    def ber(self) -> float:
        return self.config["ber"]

    @property
    def final_acc(self) -> float:
        return self.test_acc[-1]

    @property
    def max_acc(self) -> float:
        return max(self.test_acc)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class RunFailure:
    ber: float
    repeat: int
    error: str


@dataclass
class SweepResult:
    records: dict = field(default_factory=dict)   # ber -> list of RunRecord sorted by repeat
    failures: list = field(default_factory=list)

    @property
    def bers(self) -> list:
        return sorted(self.records)

    def accuracy_matrix(self, ber: float) -> np.ndarray:
        """(repeats, epochs) test accuracies for one BER."""
        return np.array([r.test_acc for r in self.records[ber]], dtype=np.float64)

    def mean_curve(self, ber: float) -> np.ndarray:
        return self.accuracy_matrix(ber).mean(axis=0)

    def std_curve(self, ber: float) -> np.ndarray:
        """Population standard deviation over repeats (0 for a single repeat)."""
        return self.accuracy_matrix(ber).std(axis=0)

    def top1max(self, ber: float) -> float:
        """Mean over repeats of the max-over-epochs test accuracy."""
        return top1max(self.records[ber])


def top1max(records) -> float:
    return float(np.mean([r.max_acc for r in records]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def _load_dataset(name: str, root: str | None):
    if name == "mnist":
        return datasets.load_mnist(root)
    return datasets.load_cifar10(root)


def prepare_data(cfg: ExperimentConfig):
    """Load and subset the train/test splits described by ``cfg``."""
    train, test = _load_dataset(cfg.dataset, cfg.data_root)
    if cfg.classes is not None or cfg.subset_k is not None:
        ids = cfg.classes
        if ids is None:
            ids = datasets.choose_classes(train.num_classes, cfg.subset_k, cfg.subset_seed)
        try:
            train = datasets.subset_classes(train, ids)
            test = datasets.subset_classes(test, ids)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if cfg.train_limit is not None:
        train = train.take(cfg.train_limit)
    if cfg.test_limit is not None:
        test = test.take(cfg.test_limit)
    return train, test


def build_spec(cfg: ExperimentConfig, input_shape, num_classes: int):
    def w(n):
        return max(1, int(round(n * cfg.width_scale)))

    if cfg.model == "lenet4":
        return build_lenet4_binary(num_classes, input_shape=tuple(input_shape), conv1=w(32), conv2=w(64),
                                   hidden=w(512), binary_fc_input=cfg.binary_fc_input)
    return build_nin_binary(num_classes, input_shape=tuple(input_shape), widths=tuple(w(n) for n in NIN_WIDTHS))


def evaluate(net: Network, ds, batch_size: int = 500) -> float:
    """Error-free top-1 accuracy; the write channel is never invoked."""
    calls = net.channel_calls
    pred = net.predict(ds.images, batch_size=batch_size).argmax(axis=1)
    assert net.channel_calls == calls
    return float(np.mean(pred == ds.labels))


def run_training(cfg: ExperimentConfig, repeat_index: int = 0, *, data=None, progress=None) -> RunRecord:
    """Train one network with activation write errors at ``cfg.ber``.

    ``data`` may pass a pre-loaded ``(train, test)`` pair; otherwise the
    dataset is loaded (and validated) before any training happens.
    """
    if repeat_index < 0:
        raise ConfigError("repeat_index must be >= 0")
    train, test = prepare_data(cfg) if data is None else data
    seed = cfg.run_seed(repeat_index)
    t0 = time.perf_counter()

    spec = build_spec(cfg, train.images.shape[1:], train.num_classes)
    init_seq, channel_seq = np.random.SeedSequence(seed).spawn(2)
    net = Network.init(spec, np.random.default_rng(init_seq))
    channel_rng = np.random.default_rng(channel_seq)
    schedule = FaultSchedule(BerChannelConfig.from_ber(cfg.ber))
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)

    losses, accs = [], []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for x, y in datasets.batches(train, cfg.batch_size, shuffle_seed=seed, epoch=epoch):
            if len(y) < 2:
                continue
            logits = net.forward(x, train=True, schedule=schedule, rng=channel_rng)
            loss, dlogits = softmax_xent(logits, y)
            adam_step(net.params, net.backward(dlogits), opt)
            net.clip_latent()
            total += loss * len(y)
            count += len(y)
        opt.lr *= cfg.lr_decay
        losses.append(total / count)
        accs.append(evaluate(net, test))
        if progress is not None:
            progress(epoch, losses[-1], accs[-1])
    snapshot = _training_key(cfg)
    return RunRecord(snapshot, repeat_index, seed, losses, accs, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _ber_tag(ber: float) -> str:
    return f"{ber:.6f}".rstrip("0").rstrip(".")


def record_path(out_dir, ber: float, repeat: int) -> Path:
    return Path(out_dir) / "records" / f"ber{_ber_tag(ber)}_r{repeat}.json"


def load_record(path: Path, cfg: ExperimentConfig) -> RunRecord | None:
    """A stored record, or None if it is missing, unreadable or from another config."""
    try:
        rec = RunRecord.from_json(path.read_text())
    except (OSError, ValueError, TypeError):
        return None
    if rec.config != _training_key(cfg) or len(rec.test_acc) != cfg.epochs:
        return None
    return rec


def run_sweep(cfg: ExperimentConfig, ber_list=None, *, runner=None, progress=None) -> SweepResult:
    """Run ``cfg.repeats`` trainings per BER, storing one JSON record per run.

    Existing records that match the config are reused, so an interrupted
    sweep resumes where it stopped. A failing run is recorded and skipped.
    ``runner`` replaces :func:`run_training` (same signature).
    """
    bers = tuple(cfg.bers if ber_list is None else ber_list)
    for b in bers:
        if not 0.0 <= b <= 0.5:
            raise ConfigError(f"ber must lie in [0, 0.5], got {b!r}")
    out = Path(cfg.out_dir)
    result = SweepResult()
    data = None
    for ber in sorted(set(float(b) for b in bers)):
        run_cfg = cfg.with_(ber=ber)
        recs = []
        for r in range(cfg.repeats):
            path = record_path(out, ber, r)
            rec = load_record(path, run_cfg)
            if rec is None:
                try:
                    if runner is not None:
                        rec = runner(run_cfg, r)
                    else:
                        if data is None:
                            data = prepare_data(cfg)
                        rec = run_training(run_cfg, r, data=data)
                except (ConfigError, datasets.DatasetError):
                    raise
                except Exception as e:  # noqa: BLE001 - recorded per run
                    result.failures.append(RunFailure(ber, r, f"{type(e).__name__}: {e}"))
                    continue
                atomic_write(path, rec.to_json())
            if progress is not None:
                progress(ber, r, rec)
            recs.append(rec)
        if recs:
            result.records[ber] = recs
    return result


def load_sweep(cfg: ExperimentConfig, ber_list=None) -> SweepResult:
    """Collect the stored records of a sweep without training anything."""
    result = SweepResult()
    for ber in sorted(set(float(b) for b in (cfg.bers if ber_list is None else ber_list))):
        recs = []
        for r in range(cfg.repeats):
            rec = load_record(record_path(cfg.out_dir, ber, r), cfg.with_(ber=ber))
            if rec is None:
                result.failures.append(RunFailure(ber, r, "missing record"))
            else:
                recs.append(rec)
        if recs:
            result.records[ber] = recs
    return result


def resilience_threshold(result: SweepResult, tolerance: float = 0.01, metric: str = "top1max") -> float:
    """Largest BER whose mean accuracy is within ``tolerance`` of the BER=0 mean."""
    def score(b):
        if metric == "top1max":
            return result.top1max(b)
        return float(np.mean([r.final_acc for r in result.records[b]]))

    if 0.0 not in result.records:
        raise ValueError("sweep has no BER=0 baseline")
    base = score(0.0)
    return max(b for b in result.bers if score(b) >= base - tolerance)


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def atomic_write(path, text: str) -> None:
    """Write ``text`` via a temporary file in the same directory; no partial file on failure."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def runs_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for ber in result.bers:
        for rec in result.records[ber]:
            for e, (loss, acc) in enumerate(zip(rec.train_loss, rec.test_acc)):
                w.writerow([_fmt(ber), rec.repeat, e + 1, _fmt(loss), _fmt(acc)])
    return buf.getvalue()


def aggregate_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_COLUMNS)
    for ber in result.bers:
        mean, std = result.mean_curve(ber), result.std_curve(ber)
        n = len(result.records[ber])
        for e in range(len(mean)):
            w.writerow([_fmt(ber), e + 1, _fmt(mean[e]), _fmt(std[e]), n])
    return buf.getvalue()


def _require_nonempty(result: SweepResult) -> None:
    if not result.records:
        raise ValueError("sweep result holds no records")


def emit_csv(result: SweepResult, path, kind: str = "runs") -> Path:
    """Write the run-level (``kind="runs"``) or aggregate (``"aggregate"``) CSV."""
    _require_nonempty(result)
    if kind not in ("runs", "aggregate"):
        raise ValueError(f"unknown CSV kind {kind!r}")
    atomic_write(path, runs_csv(result) if kind == "runs" else aggregate_csv(result))
    return Path(path)


def plot_data(result: SweepResult) -> dict:
    """Individual accuracy traces per BER plus their mean and std."""
    series = []
    for ber in result.bers:
        recs = result.records[ber]
        series.append({
            "ber": ber,
            "epochs": list(range(1, len(recs[0].test_acc) + 1)),
            "traces": [{"repeat": r.repeat, "test_acc": list(r.test_acc)} for r in recs],
            "mean_acc": result.mean_curve(ber).tolist(),
            "std_acc": result.std_curve(ber).tolist(),
            "top1max": result.top1max(ber),
        })
    return {"x": "epoch", "y": "test_acc", "series": series}


def emit_plot_data(result: SweepResult, path) -> Path:
    _require_nonempty(result)
    atomic_write(path, json.dumps(plot_data(result), indent=1, sort_keys=True) + "\n")
    return Path(path)


def emit_sweep_outputs(result: SweepResult, out_dir) -> dict:
    out = Path(out_dir)
    return {
        "runs": emit_csv(result, out / "runs.csv", "runs"),
        "aggregate": emit_csv(result, out / "aggregate.csv", "aggregate"),
        "plot": emit_plot_data(result, out / "plot_data.json"),
    }


CURVE_TARGETS = (0.1, 0.01, 1e-6)


def mram_report(params: mram.MtjParams | None = None, model: mram.WerModelParams | None = None,
                mode: mram.WindowMode | str = mram.WindowMode.ERROR_RESILIENT, out_dir=".",
                *, taus=None) -> dict:
    """Write ``table1.csv``, ``iso_wer_curves.csv`` and ``report.txt`` into ``out_dir``.

    Without an explicit ``model`` the prefactor is calibrated to the
    reference operating point.
    """
    params = params or mram.MtjParams()
    model = model or mram.calibrated_model(params)
    mode = mram.WindowMode(mode)
    if taus is None:
        taus = np.geomspace(1.0, 50.0, 25) * params.tau_d
    rows = mram.table1_rows(params, model)
    curves = [mram.iso_wer_curve(params, model, t, taus) for t in CURVE_TARGETS]
    report = mram.operation_window_report(params, model, mode)
    out = Path(out_dir)
    paths = {"table": out / "table1.csv", "curves": out / "iso_wer_curves.csv", "report": out / "report.txt"}
    atomic_write(paths["table"], mram.table_csv(rows))
    atomic_write(paths["curves"], mram.curves_csv(curves))
    atomic_write(paths["report"], mram.format_report(report))
    return paths

