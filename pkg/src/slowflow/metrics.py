"""Forecast verification: latitude-weighted RMSE and ACC, plus CSI and SEDI
for extreme events, averaged over initial conditions.

Everything here scores physical-space fields. Undefined values (zero
anomaly variance, degenerate contingency tables, diverged rollouts) are
left out of the averages and counted in ``n_undefined``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PROGNOSTIC, ClimatologyTable, FieldState, stack_values

SPEED = "current_speed"
REPORT_COLUMNS = ("variable", "lead_days", "rmse", "acc", "csi", "sedi", "n_ics", "n_undefined")


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- weights


def lat_weights(lat_deg) -> np.ndarray:
    """L(i) = N_lat cos(phi_i) / sum cos(phi); accepts a grid or latitudes in degrees."""
    lat = np.asarray(getattr(lat_deg, "lat", lat_deg), dtype=np.float64)
    if lat.ndim != 1 or lat.size == 0:
        raise MetricError("latitudes must be a non-empty 1-D array")
    if np.any(np.abs(lat) >= 90.0):
        raise MetricError("latitudes must lie strictly inside (-90, 90)")
    c = np.cos(np.radians(lat))
    return lat.size * c / c.sum()


def _cell_weights(weights: np.ndarray, shape: tuple[int, int], mask) -> tuple[np.ndarray, np.ndarray]:
    w = np.broadcast_to(np.asarray(weights, np.float64)[:, None], shape)
    m = np.ones(shape, bool) if mask is None else np.asarray(mask, bool)
    if m.shape != shape:
        raise MetricError(f"mask shape {m.shape} does not match field shape {shape}")
    if not m.any():
        raise MetricError("empty evaluation mask: no cells to score")
    return w, m


# ---------------------------------------------------------------- continuous scores


def rmse(pred, truth, weights, mask=None) -> float:
    """Latitude-weighted RMSE over ``mask`` cells of a (n_lat, n_lon) field.

    The denominator counts evaluated cells, so land is excluded rather than
    scored as zero error.
    """
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise MetricError(f"pred {pred.shape} and truth {truth.shape} must be matching 2-D fields")
    w, m = _cell_weights(weights, pred.shape, mask)
    d = (pred - truth)[m]
    return float(math.sqrt(np.sum(w[m] * d * d) / m.sum()))


def acc(pred, truth, clim, weights, mask=None) -> float:
    """Weighted anomaly correlation; raises when either anomaly has zero energy."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    clim = np.broadcast_to(np.asarray(clim, np.float64), truth.shape)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise MetricError(f"pred {pred.shape} and truth {truth.shape} must be matching 2-D fields")
    w, m = _cell_weights(weights, pred.shape, mask)
    a_hat = (pred - clim)[m]
    a = (truth - clim)[m]
    w = w[m]
    num = np.sum(w * a_hat * a)
    den = math.sqrt(np.sum(w * a_hat * a_hat) * np.sum(w * a * a))
    if den == 0.0:
        raise MetricError("anomaly correlation undefined: zero anomaly variance")
    return float(np.clip(num / den, -1.0, 1.0))


# ---------------------------------------------------------------- extreme events


def extreme_threshold(samples, q: float = 0.95) -> np.ndarray:
    """Per-cell ``q``-quantile over the leading (time) axis."""
    if not 0.0 < q < 1.0:
        raise MetricError(f"quantile must be in (0, 1), got {q}")
    return np.quantile(np.asarray(samples, np.float64), q, axis=0)


@dataclass(frozen=True)
class Contingency:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_masks(cls, pred_event, true_event, mask=None) -> "Contingency":
        p = np.asarray(pred_event, bool)
        t = np.asarray(true_event, bool)
        if mask is not None:
            m = np.broadcast_to(np.asarray(mask, bool), p.shape)
            p, t = p[m], t[m]
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Contingency") -> "Contingency":
        return Contingency(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def csi(c: Contingency) -> float | None:
    d = c.tp + c.fp + c.fn
    return None if d == 0 else c.tp / d


def hit_rate(c: Contingency) -> float | None:
    d = c.tp + c.fn
    return None if d == 0 else c.tp / d


def false_alarm(c: Contingency, conventional: bool = False) -> float | None:
    """FP / (FP + TP) by default; FP / (FP + TN) with ``conventional``."""
    d = c.fp + c.tn if conventional else c.fp + c.tp
    return None if d == 0 else c.fp / d


def sedi_from_rates(h: float, f: float) -> float | None:
    if not (0.0 < h < 1.0 and 0.0 < f < 1.0):
        return None
    lf, lh, lf1, lh1 = math.log(f), math.log(h), math.log1p(-f), math.log1p(-h)
    den = lf + lh + lf1 + lh1
    if den == 0.0:
        return None
    return (lf - lh - lf1 + lh1) / den


def sedi(c: Contingency, conventional: bool = False) -> float | None:
    h, f = hit_rate(c), false_alarm(c, conventional)
    if h is None or f is None:
        return None
    return sedi_from_rates(h, f)


# ---------------------------------------------------------------- reports


@dataclass
class MetricRow:
    variable: str
    lead_days: int
    rmse: float | None
    acc: float | None
    csi: float | None
    sedi: float | None
    n_ics: int
    n_undefined: int


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def get(self, variable: str, lead: int) -> MetricRow:
        for r in self.rows:
            if r.variable == variable and r.lead_days == lead:
                return r
        raise KeyError((variable, lead))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.variable, r.lead_days] + [_fmt(v) for v in (r.rmse, r.acc, r.csi, r.sedi)]
                       + [r.n_ics, r.n_undefined])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise MetricError(f"unexpected report header {reader.fieldnames}")
        for d in reader:
            rows.append(MetricRow(d["variable"], int(d["lead_days"]),
                                  *(None if d[k] == "" else float(d[k]) for k in ("rmse", "acc", "csi", "sedi")),
                                  int(d["n_ics"]), int(d["n_undefined"])))
        return cls(rows)

    @classmethod
    def read(cls, path) -> "MetricReport":
        return cls.from_csv(Path(path).read_text())


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------- evaluation


def with_speed(fields: np.ndarray, channels=PROGNOSTIC) -> tuple[np.ndarray, tuple[str, ...]]:
    """Append sqrt(u^2 + v^2) to a (..., C, n_lat, n_lon) stack."""
    iu, iv = channels.index("u_vel"), channels.index("v_vel")
    speed = np.sqrt(fields[..., iu, :, :] ** 2 + fields[..., iv, :, :] ** 2)
    return np.concatenate([fields, speed[..., None, :, :]], axis=-3), tuple(channels) + (SPEED,)


@dataclass
class Verifier:
    """Fixed scoring context: climatology, event thresholds, weights, ocean mask.

    ``climatology`` must cover every prognostic channel; the speed
    climatology is taken as the speed of the mean currents.
    """

    climatology: ClimatologyTable
    thresholds: np.ndarray  # (C + 1, n_lat, n_lon), last slot is current speed
    weights: np.ndarray
    mask: np.ndarray
    conventional_far: bool = False

    @classmethod
    def fit(cls, train: list[FieldState], climatology: ClimatologyTable, lat, q: float = 0.95,
            conventional_far: bool = False) -> "Verifier":
        names = train[0].channels
        idx = [names.index(c) for c in PROGNOSTIC]
        vals, _ = with_speed(stack_values(train)[:, idx].astype(np.float64))
        missing = [c for c in PROGNOSTIC if c not in climatology.channels]
        if missing:
            raise MetricError(f"climatology lacks channels {missing}")
        return cls(climatology, extreme_threshold(vals, q), lat_weights(lat), ~train[0].land_mask, conventional_far)

    def clim_fields(self, day: int) -> np.ndarray:
        table = self.climatology.for_day(int(day))
        ci = [self.climatology.channels.index(c) for c in PROGNOSTIC]
        out, _ = with_speed(table[ci].astype(np.float64))
        return out

    def score(self, pred: np.ndarray, truth: np.ndarray, day: int) -> list[tuple]:
        """Per-variable (rmse, acc, contingency) for one lead; ``None`` marks undefined."""
        p, names = with_speed(np.asarray(pred, np.float64))
        t, _ = with_speed(np.asarray(truth, np.float64))
        cl = self.clim_fields(day)
        out = []
        for k in range(len(names)):
            r = rmse(p[k], t[k], self.weights, self.mask)
            try:
                a = acc(p[k], t[k], cl[k], self.weights, self.mask)
            except MetricError:
                a = None
            c = Contingency.from_masks(p[k] > self.thresholds[k], t[k] > self.thresholds[k], self.mask)
            out.append((r, a, c))
        return out


def evaluate_rollouts(forecast, truth: list[FieldState], verifier: Verifier, leads, n_ics: int,
                      ic_stride: int = 1) -> MetricReport:
    """Roll out from ``n_ics`` initial conditions and score every lead.

    ``forecast(i, horizon)`` returns physical prognostic fields of shape
    (horizon, C, n_lat, n_lon) for the rollout starting at ``truth[i]``. It
    may instead raise an exception carrying ``.partial`` (an array of the
    completed steps, possibly empty); leads past the divergence then count
    as undefined for that IC.

    Scores are computed per IC and averaged. CSI and SEDI use the
    contingency table pooled over cells at each lead.
    """
    leads = sorted(set(int(x) for x in leads))
    if not leads or leads[0] < 1:
        raise MetricError("lead times must be positive integers")
    horizon = leads[-1]
    starts = [i * ic_stride for i in range(n_ics)]
    if not starts or starts[-1] + horizon >= len(truth):
        raise MetricError(f"need {starts[-1] + horizon + 1 if starts else horizon + 1} truth states, have {len(truth)}")
    names = PROGNOSTIC + (SPEED,)
    idx = [truth[0].channels.index(c) for c in PROGNOSTIC]
    acc_vals = {(v, l): {"rmse": [], "acc": [], "csi": [], "sedi": [], "undef": 0} for v in names for l in leads}
    for i in starts:
        try:
            traj = np.asarray(forecast(i, horizon))
        except Exception as exc:  # noqa: BLE001 - divergence is recorded, not fatal
            partial = getattr(exc, "partial", None)
            if partial is None:
                raise
            traj = np.asarray(partial)
        for lead in leads:
            if lead > len(traj):
                for v in names:
                    acc_vals[(v, lead)]["undef"] += 4
                continue
            st = truth[i + lead]
            scores = verifier.score(traj[lead - 1], st.values[idx], st.day)
            for v, (r, a, c) in zip(names, scores):
                cell = acc_vals[(v, lead)]
                for key, val in (("rmse", r), ("acc", a), ("csi", csi(c)),
                                 ("sedi", sedi(c, verifier.conventional_far))):
                    if val is None or not np.isfinite(val):
                        cell["undef"] += 1
                    else:
                        cell[key].append(val)
    report = MetricReport()
    for v in names:
        for lead in leads:
            cell = acc_vals[(v, lead)]
            mean = {k: (float(np.mean(cell[k])) if cell[k] else None) for k in ("rmse", "acc", "csi", "sedi")}
            report.rows.append(MetricRow(v, lead, mean["rmse"], mean["acc"], mean["csi"], mean["sedi"],
                                         len(starts), cell["undef"]))
    return report


def stack_forecaster(stack, gc, pre, states: list[FieldState]):
    """Adapter turning a trained stack into the ``forecast`` callable above."""
    from .cascade import DivergenceError, rollout

    prog, force, days = pre.arrays(states)
    shape = states[0].land_mask.shape

    def forecast(i: int, horizon: int) -> np.ndarray:
        try:
            traj = rollout(prog[i], force[i:i + horizon + 1], stack, gc)
        except DivergenceError as exc:
            done = exc.partial.states
            arr = (pre.physical_prognostic(np.stack(done), days[i + 1:i + 1 + len(done)], shape)
                   if done else np.zeros((0, len(PROGNOSTIC)) + shape))
            exc.partial = arr
            raise
        return pre.physical_prognostic(traj.as_array(), days[i + 1:i + horizon + 1], shape)

    return forecast
