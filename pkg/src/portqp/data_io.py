"""Panels, CSV ingestion/emission and the synthetic IPCA-style data generator."""
from __future__ import annotations

import csv
import datetime as _dt
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._io import atomic_write_text, fmt_float, read_json, write_json
from .errors import DataError, DimensionError, PortQPError

CONFIG_BLOCKS = ("data", "estimator", "portfolio", "backtest", "output")


def parse_date(text, row=None, col="date"):
    """ISO-8601 ``YYYY-MM-DD`` or ``YYYY-MM`` (first of month)."""
    s = str(text).strip()
    try:
        if len(s) == 7:
            return _dt.date.fromisoformat(s + "-01")
        return _dt.date.fromisoformat(s)
    except ValueError:
        where = f" at row {row}, column {col!r}" if row is not None else ""
        raise DataError(f"unparseable date {s!r}{where}") from None


def _check_dates(dates):
    parsed = [parse_date(d, row=i + 1) for i, d in enumerate(dates)]
    for i in range(1, len(parsed)):
        if parsed[i] <= parsed[i - 1]:
            raise DataError(f"dates not strictly increasing at {dates[i - 1]!r} -> {dates[i]!r}")


def _check_unique(labels, what):
    seen, dup = set(), []
    for a in labels:
        if a in seen:
            dup.append(a)
        seen.add(a)
    if dup:
        raise DataError(f"duplicate {what}: {sorted(set(dup))}")


@dataclass(frozen=True, eq=False)
class ReturnsPanel:
    """T x N simple returns; ``mask`` marks active entries (NaN elsewhere)."""

    dates: tuple
    assets: tuple
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        dates = tuple(str(d) for d in self.dates)
        assets = tuple(str(a) for a in self.assets)
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape != (len(dates), len(assets)):
            raise DimensionError(f"values shape {vals.shape} != ({len(dates)}, {len(assets)})")
        _check_dates(dates)
        _check_unique(assets, "asset identifiers")
        mask = np.isfinite(vals) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != vals.shape:
            raise DimensionError("mask shape does not match values")
        active = vals[mask]
        if not np.all(np.isfinite(active)):
            raise DataError("active entries must be finite")
        if np.any(active <= -1.0):
            raise DataError("simple returns must exceed -1")
        vals[~mask] = np.nan
        vals.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "assets", assets)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mask", mask)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    def slice(self, start, stop):
        return ReturnsPanel(self.dates[start:stop], self.assets, self.values[start:stop],
                            self.mask[start:stop])

    def select_assets(self, idx):
        idx = np.asarray(idx)
        return ReturnsPanel(self.dates, tuple(np.array(self.assets)[idx]), self.values[:, idx],
                            self.mask[:, idx])


@dataclass(frozen=True, eq=False)
class CharacteristicsPanel:
    """Per-date N x L characteristics ``Z[t]``; ``mask[t, i]`` marks complete rows."""

    dates: tuple
    assets: tuple
    names: tuple
    Z: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        dates = tuple(str(d) for d in self.dates)
        assets = tuple(str(a) for a in self.assets)
        names = tuple(str(n) for n in self.names)
        Z = np.array(self.Z, dtype=float)
        if Z.ndim != 3 or Z.shape != (len(dates), len(assets), len(names)):
            raise DimensionError(f"Z shape {Z.shape} != ({len(dates)}, {len(assets)}, {len(names)})")
        if len(names) < 1:
            raise DimensionError("need at least one characteristic")
        _check_dates(dates)
        _check_unique(assets, "asset identifiers")
        _check_unique(names, "characteristic names")
        complete = np.all(np.isfinite(Z), axis=2)
        mask = complete if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != Z.shape[:2]:
            raise DimensionError("mask shape does not match Z")
        if np.any(mask & ~complete):
            raise DataError("an active (asset, date) row has missing characteristics")
        Z.setflags(write=False)
        mask.setflags(write=False)
        for k, v in (("dates", dates), ("assets", assets), ("names", names), ("Z", Z), ("mask", mask)):
            object.__setattr__(self, k, v)

    @property
    def L(self):
        return self.Z.shape[2]

    @property
    def T(self):
        return self.Z.shape[0]

    @property
    def N(self):
        return self.Z.shape[1]

    def slice(self, start, stop):
        return CharacteristicsPanel(self.dates[start:stop], self.assets, self.names,
                                    self.Z[start:stop], self.mask[start:stop])

    def select_assets(self, idx):
        idx = np.asarray(idx)
        return CharacteristicsPanel(self.dates, tuple(np.array(self.assets)[idx]), self.names,
                                    self.Z[:, idx], self.mask[:, idx])


def rank_transform(chars: CharacteristicsPanel) -> CharacteristicsPanel:
    """Per-date cross-sectional ranks mapped to [-0.5, 0.5] over active assets."""
    Z = np.array(chars.Z)
    out = np.full_like(Z, np.nan)
    for t in range(chars.T):
        act = np.flatnonzero(chars.mask[t])
        n = act.size
        if n == 0:
            continue
        block = Z[t, act]
        ranks = np.argsort(np.argsort(block, axis=0, kind="stable"), axis=0, kind="stable")
        out[t, act] = ranks / (n - 1) - 0.5 if n > 1 else 0.0
    return CharacteristicsPanel(chars.dates, chars.assets, chars.names, out, chars.mask)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def to_simple_returns(log_returns):
    return np.expm1(np.asarray(log_returns, dtype=float))


def to_log_returns(simple_returns):
    return np.log1p(np.asarray(simple_returns, dtype=float))


def load_returns_csv(path, log_returns: bool = False) -> ReturnsPanel:
    """Wide CSV: ``date`` then one column per asset; empty cells are masked."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "date":
        raise DataError(f"{path}: first column must be 'date'")
    assets = header[1:]
    _check_unique(assets, "header columns")
    dates, vals, mask = [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        parse_date(row[0], row=r)
        dates.append(row[0].strip())
        vrow, mrow = [], []
        for c, cell in enumerate(row[1:], start=1):
            cell = cell.strip()
            if cell == "":
                vrow.append(np.nan)
                mrow.append(False)
                continue
            try:
                vrow.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, "
                                f"column {header[c]!r}") from None
            mrow.append(True)
        vals.append(vrow)
        mask.append(mrow)
    values = np.array(vals, dtype=float).reshape(len(dates), len(assets))
    mask = np.array(mask, dtype=bool).reshape(values.shape)
    if log_returns:
        values = np.where(mask, to_simple_returns(values), np.nan)
    return ReturnsPanel(tuple(dates), tuple(assets), values, mask)


def write_returns_csv(panel: ReturnsPanel, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date"] + list(panel.assets))
    for t, d in enumerate(panel.dates):
        w.writerow([d] + [fmt_float(v) if m else "" for v, m in zip(panel.values[t], panel.mask[t])])
    atomic_write_text(path, buf.getvalue())


def load_characteristics_csv(path, strict: bool = True) -> CharacteristicsPanel:
    """Long CSV with columns date, asset_id, characteristic, value."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"date", "asset_id", "characteristic", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns {sorted(need)}")
        cells = {}
        dups = []
        dates, assets, names = [], [], []
        seen_d, seen_a, seen_n = set(), set(), set()
        for r, row in enumerate(reader, start=2):
            d, a, n = row["date"].strip(), row["asset_id"].strip(), row["characteristic"].strip()
            parse_date(d, row=r)
            try:
                v = float(row["value"])
            except ValueError:
                raise DataError(f"{path}: non-numeric value {row['value']!r} at row {r}") from None
            key = (d, a, n)
            if key in cells:
                dups.append(key)
            cells[key] = v
            for lab, seen, lst in ((d, seen_d, dates), (a, seen_a, assets), (n, seen_n, names)):
                if lab not in seen:
                    seen.add(lab)
                    lst.append(lab)
    if dups:
        raise DataError(f"{path}: duplicate (date, asset_id, characteristic) rows: {sorted(set(dups))}")
    dates.sort(key=parse_date)
    di = {d: i for i, d in enumerate(dates)}
    ai = {a: i for i, a in enumerate(assets)}
    ni = {n: i for i, n in enumerate(names)}
    Z = np.full((len(dates), len(assets), len(names)), np.nan)
    present = np.zeros((len(dates), len(assets)), dtype=bool)
    for (d, a, n), v in cells.items():
        Z[di[d], ai[a], ni[n]] = v
        present[di[d], ai[a]] = True
    complete = np.all(np.isfinite(Z), axis=2)
    partial = present & ~complete
    if partial.any():
        if strict:
            t, i = np.argwhere(partial)[0]
            missing = [names[k] for k in range(len(names)) if not np.isfinite(Z[t, i, k])]
            raise DataError(f"{path}: asset {assets[i]!r} on {dates[t]} lacks {missing}"
                            f" ({int(partial.sum())} incomplete rows)")
        Z[partial] = np.nan
    return CharacteristicsPanel(tuple(dates), tuple(assets), tuple(names), Z, complete)


def write_characteristics_csv(chars: CharacteristicsPanel, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "asset_id", "characteristic", "value"])
    for t, d in enumerate(chars.dates):
        for i, a in enumerate(chars.assets):
            if not chars.mask[t, i]:
                continue
            for k, n in enumerate(chars.names):
                w.writerow([d, a, n, fmt_float(chars.Z[t, i, k])])
    atomic_write_text(path, buf.getvalue())


def write_weights_csv(path, assets, weights):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["asset_id", "weight"])
    for a, v in zip(assets, weights):
        w.writerow([a, fmt_float(v)])
    atomic_write_text(path, buf.getvalue())


def load_weights_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [r["asset_id"] for r in rows], np.array([float(r["weight"]) for r in rows])


def load_config(path):
    """JSON config; only the blocks data, estimator, portfolio, backtest, output."""
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_BLOCKS)
    if unknown:
        raise DataError(f"{path}: unknown config blocks {sorted(unknown)}")
    return {k: dict(cfg.get(k) or {}) for k in CONFIG_BLOCKS}


# ---------------------------------------------------------------------------
# Synthetic panels
# ---------------------------------------------------------------------------


def month_labels(T, start=(1990, 1)):
    y, m = start
    out = []
    for _ in range(T):
        out.append(f"{y:04d}-{m:02d}-01")
        m += 1
        if m > 12:
            y, m = y + 1, 1
    return tuple(out)


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    """Generating parameters. ``Z_lag[t]`` loads ``factors[t]`` in the return at date t."""

    Gamma0: np.ndarray          # L x K, orthonormal columns
    factors: np.ndarray         # T x K realized factor draws
    factor_mean: np.ndarray
    factor_cov: np.ndarray
    noise_scale: float
    Z_lag: np.ndarray           # T x N x L
    seed: int
    params: dict = field(default_factory=dict)

    def loadings(self, t):
        return self.Z_lag[t] @ self.Gamma0

    def covariance(self, t):
        """Conditional covariance of the date-t return."""
        B = self.loadings(t)
        return B @ self.factor_cov @ B.T + self.noise_scale ** 2 * np.eye(B.shape[0])

    def true_covariances(self):
        return np.stack([self.covariance(t) for t in range(self.Z_lag.shape[0])])

    def pooled_covariance(self, start=0, stop=None):
        """Population analogue of the pooled sample covariance over dates
        [start, stop): mean conditional covariance plus dispersion of the
        conditional means (law of total covariance)."""
        ts = range(start, self.Z_lag.shape[0] if stop is None else stop)
        covs = np.mean([self.covariance(t) for t in ts], axis=0)
        means = np.array([self.loadings(t) @ self.factor_mean for t in ts])
        mc = means - means.mean(axis=0)
        return covs + mc.T @ mc / len(means)

    def to_dict(self):
        return {"Gamma0": self.Gamma0, "factors": self.factors, "factor_mean": self.factor_mean,
                "factor_cov": self.factor_cov, "noise_scale": self.noise_scale, "seed": self.seed,
                "params": self.params, "Z_initial": self.Z_lag[0]}


def gen_synthetic_panel(N, T, L, K, noise_scale, seed, *, persistence=0.95,
                        factor_mean=0.01, factor_vol=0.04):
    """Returns r_t = Z_{t-1} Gamma0 f_t + noise_scale * e_t with AR(1) characteristics.

    Returns (ReturnsPanel, CharacteristicsPanel, SyntheticTruth); the
    characteristics panel holds Z_t for every date, and Z_{-1} (the state
    loading the first return) is stored in the truth record.
    """
    if not 1 <= K <= L:
        raise PortQPError(f"need 1 <= K <= L (K={K}, L={L})")
    if N < 2 or T < 2:
        raise PortQPError("need N >= 2 and T >= 2")
    if noise_scale < 0:
        raise PortQPError("noise_scale must be >= 0")
    rng = np.random.Generator(np.random.Philox(seed))
    G, _ = np.linalg.qr(rng.standard_normal((L, K)))
    G = G * np.sign(G[np.argmax(np.abs(G), axis=0), np.arange(K)])
    Zs = np.empty((T + 1, N, L))
    Zs[0] = rng.standard_normal((N, L))
    innov = np.sqrt(1.0 - persistence ** 2)
    for t in range(1, T + 1):
        Zs[t] = persistence * Zs[t - 1] + innov * rng.standard_normal((N, L))
    # Scale characteristics so that loadings stay O(1).
    Zs /= np.sqrt(K)
    fm = np.full(K, factor_mean)
    fc = np.eye(K) * factor_vol ** 2
    f = fm + factor_vol * rng.standard_normal((T, K))
    eps = rng.standard_normal((T, N))
    Z_lag = Zs[:T]
    R = np.einsum("tnl,lk,tk->tn", Z_lag, G, f)
    if noise_scale > 0:
        R = R + noise_scale * eps
    if np.any(R <= -1.0):
        raise PortQPError("generated returns fell below -1; reduce factor_vol or noise_scale")
    dates = month_labels(T)
    assets = tuple(f"A{i:03d}" for i in range(N))
    names = tuple(f"c{j}" for j in range(L))
    panel = ReturnsPanel(dates, assets, R)
    chars = CharacteristicsPanel(dates, assets, names, Zs[1:])
    truth = SyntheticTruth(Gamma0=G, factors=f, factor_mean=fm, factor_cov=fc,
                           noise_scale=float(noise_scale), Z_lag=Z_lag, seed=int(seed),
                           params={"N": N, "T": T, "L": L, "K": K, "persistence": persistence,
                                   "factor_mean": factor_mean, "factor_vol": factor_vol})
    return panel, chars, truth


def write_truth_json(truth: SyntheticTruth, path):
    write_json(path, truth.to_dict())
