"""MTJ device model: write error rate, retention, read disturb, endurance.

Units: times in ns, voltages in V.

The write error rate uses a two-regime macrospin surrogate:

* thermal activation (``v <= v_c0``)::

      WER = exp(-(tau / tau_0) * exp(-delta * (1 - v / v_c0)))

* precessional switching (``v > v_c0``)::

      WER = min(1, A * exp(-k * (v / v_c0 - 1) * tau / tau_D))

with ``A = pi^2 delta / 4`` and ``k = 2`` unless calibrated. The two branches
do not meet at ``v_c0``: for any pulse longer than a few ``tau_0`` the
thermal branch ends far below 1 while the precessional branch starts at 1.
Solvers therefore search the write window ``(v_c0, v_bd)`` only.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, replace
from enum import Enum

from scipy.optimize import bisect

NS_PER_YEAR = 365.25 * 24 * 3600 * 1e9

# Table-1 anchor: WER 1e-6 at tau = 5 tau_D and v = 2.78 v_c0
ANCHOR_WER = 1e-6
ANCHOR_TAU_OVER_TAUD = 5.0
ANCHOR_V_OVER_VC0 = 2.78


class BreakdownWarning(UserWarning):
    """Pulse amplitude at or above the breakdown voltage."""


class OperationWindowError(ValueError):
    """The requested WER cannot be reached inside the write window."""


@dataclass(frozen=True)
class MtjParams:
    delta: float = 40.0
    tau_d: float = 2.0
    v_c0: float = 0.3
    v_bd: float = 1.2
    tau_0: float = 1.0

    def __post_init__(self):
        for name in ("delta", "tau_d", "v_c0", "v_bd", "tau_0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.v_c0 < self.v_bd:
            raise ValueError(f"v_c0 ({self.v_c0}) must be below v_bd ({self.v_bd})")


@dataclass(frozen=True)
class WritePulse:
    v: float
    tau: float

    def __post_init__(self):
        if self.v < 0:
            raise ValueError(f"pulse amplitude must be >= 0, got {self.v}")
        if not self.tau > 0:
            raise ValueError(f"pulse duration must be > 0, got {self.tau}")

    def within_breakdown(self, params: MtjParams) -> bool:
        return self.v < params.v_bd

    def destructive(self, params: MtjParams) -> bool:
        return not self.within_breakdown(params)


@dataclass(frozen=True)
class WerModelParams:
    """Precessional-regime prefactor ``A`` (None: pi^2 delta / 4) and slope ``k``."""

    prefactor: float | None = None
    slope: float = 2.0

    def __post_init__(self):
        if self.prefactor is not None and not self.prefactor > 0:
            raise ValueError("prefactor must be > 0")
        if not self.slope > 0:
            raise ValueError("slope must be > 0")

    def resolve_prefactor(self, params: MtjParams) -> float:
        if self.prefactor is not None:
            return self.prefactor
        return math.pi ** 2 * params.delta / 4


# ---------------------------------------------------------------------------
# error rates
# ---------------------------------------------------------------------------

def _log_thermal(params: MtjParams, v: float, tau: float) -> float:
    return -(tau / params.tau_0) * math.exp(-params.delta * (1 - v / params.v_c0))


def _log_precessional(params: MtjParams, model: WerModelParams, v: float, tau: float) -> float:
    a = model.resolve_prefactor(params)
    return min(0.0, math.log(a) - model.slope * (v / params.v_c0 - 1) * tau / params.tau_d)


def log_wer(params: MtjParams, model: WerModelParams, pulse: WritePulse) -> float:
    """Natural log of the probability that ``pulse`` leaves the MTJ unswitched."""
    if pulse.v <= params.v_c0:
        return _log_thermal(params, pulse.v, pulse.tau)
    return _log_precessional(params, model, pulse.v, pulse.tau)


def _warn_breakdown(params: MtjParams, pulse: WritePulse) -> None:
    if pulse.destructive(params):
        warnings.warn(
            f"pulse amplitude {pulse.v} V is at or above breakdown voltage {params.v_bd} V",
            BreakdownWarning, stacklevel=3,
        )


def wer(params: MtjParams, model: WerModelParams, pulse: WritePulse) -> float:
    """Write error rate of ``pulse``; warns with :class:`BreakdownWarning` at ``v >= v_bd``."""
    _warn_breakdown(params, pulse)
    return min(1.0, max(0.0, math.exp(log_wer(params, model, pulse))))


def switching_probability(params: MtjParams, model: WerModelParams, pulse: WritePulse) -> float:
    """Probability that ``pulse`` switches the MTJ, i.e. ``1 - wer``, computed without cancellation."""
    return min(1.0, max(0.0, -math.expm1(log_wer(params, model, pulse))))


def read_disturb(params: MtjParams, model: WerModelParams, read_pulse: WritePulse) -> float:
    """Probability that a read pulse inadvertently switches the bit.

    Uses the same evaluation path as :func:`wer`; a read disturb is a write
    that succeeds, so this returns ``1 - wer(read_pulse)``.
    """
    _warn_breakdown(params, read_pulse)
    return switching_probability(params, model, read_pulse)


def retention_error(params: MtjParams, idle_time: float) -> float:
    """Probability that an idle bit has flipped after ``idle_time`` ns (Neel-Arrhenius)."""
    if not idle_time > 0:
        raise ValueError("idle_time must be > 0")
    rate = math.exp(-params.delta) / params.tau_0
    return -math.expm1(-rate * idle_time)


def endurance_cycles(params: MtjParams, v: float, *, n_ref: float = 1e13,
                     v_ref: float | None = None, decades_per_unit: float = 30.0) -> float:
    """Write-cycle endurance from a log-linear voltage law.

    ``log10(N) = log10(n_ref) + decades_per_unit * (v_ref - v) / v_ref`` with
    ``v_ref`` defaulting to the anchor voltage ``2.78 v_c0``. The default slope
    gives six decades for a 20% voltage reduction. Returns 0 (and warns) at or
    above breakdown.
    """
    if v_ref is None:
        v_ref = ANCHOR_V_OVER_VC0 * params.v_c0
    if not v > 0:
        raise ValueError("endurance is defined for v > 0")
    if v >= params.v_bd:
        warnings.warn(f"{v} V is at or above breakdown voltage {params.v_bd} V", BreakdownWarning, stacklevel=2)
        return 0.0
    return 10.0 ** (math.log10(n_ref) + decades_per_unit * (v_ref - v) / v_ref)


# ---------------------------------------------------------------------------
# calibration and solvers
# ---------------------------------------------------------------------------

def calibrate_prefactor(params: MtjParams, model: WerModelParams, pulse: WritePulse,
                        target: float) -> WerModelParams:
    """Return ``model`` with ``A`` chosen so that ``wer(pulse) == target`` (precessional regime)."""
    if pulse.v <= params.v_c0:
        raise ValueError("calibration pulse must lie in the precessional regime (v > v_c0)")
    if not 0 < target < 1:
        raise ValueError("target must lie in (0, 1)")
    exponent = model.slope * (pulse.v / params.v_c0 - 1) * pulse.tau / params.tau_d
    return replace(model, prefactor=target * math.exp(exponent))


def calibrated_model(params: MtjParams, model: WerModelParams | None = None) -> WerModelParams:
    """Model pinned to WER 1e-6 at ``tau = 5 tau_D``, ``v = 2.78 v_c0``."""
    anchor = WritePulse(ANCHOR_V_OVER_VC0 * params.v_c0, ANCHOR_TAU_OVER_TAUD * params.tau_d)
    return calibrate_prefactor(params, model or WerModelParams(), anchor, ANCHOR_WER)


def _check_target(wer_target: float) -> None:
    if not 0 < wer_target < 1:
        raise ValueError(f"wer_target must lie in (0, 1), got {wer_target}")


def solve_voltage(params: MtjParams, model: WerModelParams, wer_target: float, tau: float,
                  rtol: float = 1e-9) -> float:
    """Smallest write-window voltage reaching ``wer_target`` at pulse length ``tau``.

    Bisection on the monotone precessional branch over ``(v_c0, v_bd)``.
    """
    _check_target(wer_target)
    log_t = math.log(wer_target)
    f = lambda v: _log_precessional(params, model, v, tau) - log_t  # noqa: E731
    lo, hi = params.v_c0, params.v_bd
    if f(lo) <= 0:
        return lo
    if f(hi) > 0:
        raise OperationWindowError(
            f"WER {wer_target:g} at tau={tau:g} ns needs v >= v_bd={params.v_bd} V (outside operation window)")
    return bisect(f, lo, hi, xtol=1e-15, rtol=rtol)


def solve_tau(params: MtjParams, model: WerModelParams, wer_target: float, v: float,
              rtol: float = 1e-9, tau_max: float = 1e18) -> float:
    """Shortest pulse length reaching ``wer_target`` at amplitude ``v`` (bisection in log tau)."""
    _check_target(wer_target)
    if v >= params.v_bd:
        raise OperationWindowError(f"v={v} V is at or above breakdown voltage {params.v_bd} V")
    log_t = math.log(wer_target)
    f = lambda lt: log_wer(params, model, WritePulse(v, math.exp(lt))) - log_t  # noqa: E731
    lo = math.log(params.tau_d * 1e-9)
    if f(lo) <= 0:
        return math.exp(lo)
    hi = math.log(params.tau_d)
    while f(hi) > 0:
        hi += math.log(4.0)
        if hi > math.log(tau_max):
            raise OperationWindowError(f"WER {wer_target:g} not reachable at v={v} V for tau <= {tau_max:g} ns")
    # rtol on tau maps to an absolute tolerance on log tau
    return math.exp(bisect(f, lo, hi, xtol=rtol / 2, rtol=1e-15))


@dataclass(frozen=True)
class IsoWerPoint:
    tau: float
    v: float          # nan when unattainable
    wer_target: float
    attainable: bool


def iso_wer_curve(params: MtjParams, model: WerModelParams, wer_target: float, taus) -> list:
    """Voltage needed for ``wer_target`` at each pulse length in ``taus``."""
    points = []
    for tau in taus:
        try:
            points.append(IsoWerPoint(float(tau), solve_voltage(params, model, wer_target, tau), wer_target, True))
        except OperationWindowError:
            points.append(IsoWerPoint(float(tau), math.nan, wer_target, False))
    return points


# ---------------------------------------------------------------------------
# operation-window report
# ---------------------------------------------------------------------------

class WindowMode(str, Enum):
    CONVENTIONAL = "conventional"
    ERROR_RESILIENT = "error_resilient"


def ecc_bits(raw_wer: float, target_wer: float, decades_per_bit=(3.0, 4.0)) -> tuple[int, int]:
    """ECC bit budget (min, max) to go from ``raw_wer`` to ``target_wer``."""
    decades = math.log10(raw_wer) - math.log10(target_wer)
    if decades <= 0:
        return 0, 0
    lo_rate, hi_rate = decades_per_bit
    return round(decades / hi_rate), round(decades / lo_rate)


@dataclass(frozen=True)
class TableRow:
    label: str
    wer_target: float
    tau_over_taud: float
    v_over_vc0: float
    delta_v_pct: float
    delta_tau_pct: float
    ecc_bits: str
    endurance_cycles: float
    endurance_gain: float


@dataclass(frozen=True)
class OperationWindowReport:
    mode: WindowMode
    v_c0: float
    v_bd: float
    rows: tuple
    ecc_required: bool
    note: str


TABLE_COLUMNS = ("wer_target", "tau_over_tauD", "v_over_vc0", "delta_v_pct", "delta_tau_pct",
                 "ecc_bits", "endurance_cycles")


def _reference_row(params, model, tau_ref, ecc_floor):
    v_ref = solve_voltage(params, model, ANCHOR_WER, tau_ref)
    lo, hi = ecc_bits(ANCHOR_WER, ecc_floor)
    n_ref = endurance_cycles(params, v_ref, v_ref=v_ref)
    row = TableRow(f"WER <= {ecc_floor:g} (WER {ANCHOR_WER:g} + ECC)", ANCHOR_WER, tau_ref / params.tau_d,
                   v_ref / params.v_c0, 0.0, 0.0, f"{lo}-{hi} bits", n_ref, 1.0)
    return row, v_ref


def operation_window_report(params: MtjParams, model: WerModelParams,
                            mode: WindowMode | str = WindowMode.ERROR_RESILIENT, *,
                            resilient_targets=(0.01, 0.1), voltage_cut: float = 0.2,
                            ecc_floor: float = 1e-15) -> OperationWindowReport:
    """Conventional (WER 1e-6 + ECC) or error-resilient (moderate WER, no ECC) write windows.

    The error-resilient rows compare against the conventional operating point:
    first at fixed pulse length (voltage saving), then at a fixed
    ``voltage_cut`` relative voltage reduction (pulse-length saving).
    """
    mode = WindowMode(mode)
    tau_ref = ANCHOR_TAU_OVER_TAUD * params.tau_d
    ref_row, v_ref = _reference_row(params, model, tau_ref, ecc_floor)
    if mode is WindowMode.CONVENTIONAL:
        note = f"write window v_c0 < V < v_bd plus ECC ({ref_row.ecc_bits})"
        return OperationWindowReport(mode, params.v_c0, params.v_bd, (ref_row,), True, note)

    n_ref = ref_row.endurance_cycles
    rows = []
    for t in resilient_targets:
        v = solve_voltage(params, model, t, tau_ref)
        n = endurance_cycles(params, v, v_ref=v_ref)
        rows.append(TableRow(f"WER = {t:g}, same tau", t, tau_ref / params.tau_d, v / params.v_c0,
                             100 * (v / v_ref - 1), 0.0, "none", n, n / n_ref))
    v_cut = (1 - voltage_cut) * v_ref
    n_cut = endurance_cycles(params, v_cut, v_ref=v_ref)
    for t in resilient_targets:
        tau = solve_tau(params, model, t, v_cut)
        rows.append(TableRow(f"WER = {t:g}, {-100 * voltage_cut:g}% voltage", t, tau / params.tau_d,
                             v_cut / params.v_c0, -100 * voltage_cut, 100 * (tau / tau_ref - 1), "none",
                             n_cut, n_cut / n_ref))
    note = "write window v_c0 <~ V << v_bd, no ECC"
    return OperationWindowReport(mode, params.v_c0, params.v_bd, tuple(rows), False, note)


def table1_rows(params: MtjParams, model: WerModelParams) -> list:
    """Reference operating point followed by the four error-resilient rows."""
    conv = operation_window_report(params, model, WindowMode.CONVENTIONAL)
    res = operation_window_report(params, model, WindowMode.ERROR_RESILIENT)
    return list(conv.rows) + list(res.rows)


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        w.writerow([repr(r.wer_target), f"{r.tau_over_taud:.6f}", f"{r.v_over_vc0:.6f}",
                    f"{r.delta_v_pct:.4f}", f"{r.delta_tau_pct:.4f}", r.ecc_bits, f"{r.endurance_cycles:.6e}"])
    return buf.getvalue()


def curves_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("tau_ns", "v_volts", "wer_target"))
    for curve in curves:
        for p in curve:
            w.writerow([f"{p.tau:.6g}", "unattainable" if not p.attainable else f"{p.v:.9f}", repr(p.wer_target)])
    return buf.getvalue()


def format_report(report: OperationWindowReport) -> str:
    lines = [
        f"mode: {report.mode.value}",
        f"v_c0: {report.v_c0} V",
        f"v_bd: {report.v_bd} V",
        f"ecc_required: {str(report.ecc_required).lower()}",
        f"note: {report.note}",
        "rows:",
    ]
    for r in report.rows:
        lines.append(
            f"  - {r.label}: tau/tau_D={r.tau_over_taud:.3f} V/V_c0={r.v_over_vc0:.3f} "
            f"dV={r.delta_v_pct:+.1f}% dtau={r.delta_tau_pct:+.1f}% ECC={r.ecc_bits} "
            f"N_c={r.endurance_cycles:.3e} (x{r.endurance_gain:.3g})")
    return "\n".join(lines) + "\n"
