"""Monte Carlo experiments with noisy observations, and output writers.

Strategies are computed once per regularization level on the noiseless
formation game. Each player then executes its strategy on an observed state
in which every *other* player's block is corrupted by zero-mean Gaussian
noise. Realized costs are the true objectives on the true trajectory.

Random streams are derived from ``(master seed, purpose, cell)`` through
:class:`numpy.random.SeedSequence`, so a sweep is a pure function of its
inputs and cells can run in any order or in parallel.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import sparsedp
from .errors import ConfigError, GameError, SolverError
from .gamecore import RegularizationWeights, Trajectory, eval_cost
from .scenarios import FormationConfig, build_formation_game, formation_cost_offsets, formation_state

log = logging.getLogger(__name__)

_INIT_STREAM = 1
_NOISE_STREAM = 2


class OutputError(GameError, OSError):
    """Writing an output file failed."""


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic Gaussian observation noise with per-dimension ``variance``."""

    variance: float
    seed: object = 0

    def __post_init__(self):
        if not np.isfinite(self.variance) or self.variance < 0:
            raise ConfigError(f"noise variance must be finite and >= 0, got {self.variance}")

    def draw(self, dims):
        """Noise tensor ``(T, N, m)``; slice ``[k, i]`` is observer ``i``'s error.

        Observer ``i``'s own block is zero. With zero variance no random
        numbers are consumed and the tensor is all zeros.
        """
        T, N, m = dims.horizon, dims.n_players, dims.m
        if self.variance == 0:
            return np.zeros((T, N, m))
        rng = np.random.default_rng(self.seed)
        eps = rng.normal(scale=np.sqrt(self.variance), size=(T, N, m))
        for i in range(N):
            eps[:, i, dims.state_slice(i)] = 0.0
        return eps


def stream_checksum(eps):
    return hashlib.sha256(np.ascontiguousarray(eps, dtype=float).tobytes()).hexdigest()[:16]


def noisy_rollout(game, strategies, noise, x1=None, eps=None):
    """Simulate the LQ dynamics with each player acting on its own noisy view.

    ``eps`` may be passed to reuse a noise tensor already drawn from
    ``noise`` (common random numbers across strategy variants).
    """
    d = game.dims
    T = d.horizon
    if strategies.dims != d:
        raise ConfigError("strategy dimensions do not match the game")
    if eps is None:
        eps = noise.draw(d)
    x = np.empty((T + 1, d.m))
    u = np.empty((T, d.n))
    x[0] = game.x1 if x1 is None else x1
    rows = [d.control_slice(i) for i in range(d.n_players)]
    for k in range(T):
        P, a = strategies.P[k], strategies.alpha[k]
        for i, r in enumerate(rows):
            # Full product so that zero noise reproduces the noiseless
            # rollout bit for bit.
            u[k, r] = (-P @ (x[k] + eps[k, i]) - a)[r]
        x[k + 1] = game.A[k] @ x[k] + game.B[k] @ u[k]
    return Trajectory(x, u)


@dataclass(frozen=True)
class SweepSpec:
    """Grid of the Monte Carlo study.

    ``n_samples`` initial conditions are drawn uniformly from a box of size
    ``box`` centred at the origin (positions only, zero velocity).
    """

    noise_levels: tuple = tuple(np.linspace(0.0, 2000.0, 10).tolist())
    lambda_levels: tuple = tuple(np.linspace(0.0, 15.0, 10).tolist())
    n_samples: int = 20
    box: tuple = (20.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "noise_levels", tuple(float(v) for v in self.noise_levels))
        object.__setattr__(self, "lambda_levels", tuple(float(v) for v in self.lambda_levels))
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if not self.noise_levels or not self.lambda_levels or self.n_samples < 1:
            raise ConfigError("sweep needs nonempty noise and lambda lists and n_samples >= 1")
        if len(self.box) != 2 or min(self.box) <= 0:
            raise ConfigError("sampling box must have two positive side lengths")
        if min(self.noise_levels) < 0 or min(self.lambda_levels) < 0:
            raise ConfigError("noise and lambda levels must be nonnegative")

    @classmethod
    def full_scale(cls, seed=0):
        """50 noise levels x 100 regularization levels x 100 initial conditions."""
        return cls(
            noise_levels=tuple(np.linspace(0.0, 2000.0, 50).tolist()),
            lambda_levels=tuple(np.linspace(0.0, 15.0, 100).tolist()),
            n_samples=100, seed=seed,
        )

    def initial_state(self, sample, n_players=3):
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(_INIT_STREAM, sample)))
        half = 0.5 * np.asarray(self.box)
        pos = rng.uniform(-half, half, size=(n_players, 2))
        return formation_state(pos)

    def noise_model(self, noise_index, sample):
        seq = np.random.SeedSequence(self.seed, spawn_key=(_NOISE_STREAM, noise_index, sample))
        return NoiseModel(self.noise_levels[noise_index], seq)


@dataclass
class SweepResult:
    """Realized costs of a sweep.

    ``costs[a, b, s, i]`` is player ``i``'s cost at noise level ``a``,
    regularization level ``b`` and initial condition ``s``; ``baseline`` has
    the same layout without the ``b`` axis and holds the unregularized
    (exact Nash) costs under the same noise realizations.
    """

    noise_levels: np.ndarray
    lambda_levels: np.ndarray
    costs: np.ndarray
    baseline: np.ndarray
    sparsity: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    checksums: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_players(self):
        return self.costs.shape[-1]

    @property
    def differences(self):
        return self.costs - self.baseline[:, None]

    @property
    def mean_costs(self):
        return np.mean(self.costs, axis=2) if self.costs.shape[2] else np.full(self.costs.shape[:2] + self.costs.shape[3:], np.nan)

    @property
    def mean_difference(self):
        """Per-cell mean of regularized minus baseline cost, ``(noise, lambda, player)``."""
        if self.costs.shape[2] == 0:
            return np.full(self.costs.shape[:2] + self.costs.shape[3:], np.nan)
        return np.mean(self.differences, axis=2)

    @property
    def config_hash(self):
        return self.metadata.get("config_hash", config_hash({}))

    @classmethod
    def empty(cls, n_players=3):
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 0, 0, n_players)),
                   np.zeros((0, 0, n_players)), checksums=np.zeros((0, 0), dtype=object))


def config_hash(payload):
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def solve_levels(game, lambda_levels, backend="bcd"):
    """Regularized strategies per level; failures map to the error message."""
    out = {}
    for lam in lambda_levels:
        weights = RegularizationWeights.uniform(game.dims.n_players, lam)
        try:
            out[lam] = sparsedp.solve_regularized(game, weights, backend=backend).strategies
        except SolverError as exc:
            log.warning("lambda=%g failed: %s", lam, exc)
            out[lam] = str(exc)
    return out


def _run_row(args):
    spec, game, strategies, baseline, offsets, a = args
    n_lam, S, N = len(spec.lambda_levels), spec.n_samples, game.dims.n_players
    costs = np.full((n_lam, S, N), np.nan)
    base = np.empty((S, N))
    sums = []
    for s in range(S):
        x1 = spec.initial_state(s, N)
        g = game.replace(x1=x1)
        noise = spec.noise_model(a, s)
        eps = noise.draw(game.dims)
        checksum = stream_checksum(eps)
        traj = noisy_rollout(g, baseline, noise, eps=eps)
        base[s] = [eval_cost(g, traj, i) + offsets[i] for i in range(N)]
        for b, lam in enumerate(spec.lambda_levels):
            st = strategies[lam]
            if isinstance(st, str):
                continue
            if st is baseline:
                costs[b, s] = base[s]
                continue
            traj = noisy_rollout(g, st, noise, eps=eps)
            # Common random numbers: every variant consumed the same stream.
            assert stream_checksum(eps) == checksum
            costs[b, s] = [eval_cost(g, traj, i) + offsets[i] for i in range(N)]
        sums.append(checksum)
    return costs, base, sums


def run_sweep(spec, scenario=None, backend="bcd", workers=1):
    """Noisy-execution Monte Carlo study on the formation game."""
    scenario = scenario or FormationConfig()
    game = build_formation_game(scenario)
    levels = sorted(set(spec.lambda_levels) | {0.0})
    strategies = solve_levels(game, levels, backend)
    baseline = strategies[0.0]
    if isinstance(baseline, str):
        raise SolverError(f"unregularized solve failed: {baseline}")
    failures = [(lam, msg) for lam, msg in strategies.items() if isinstance(msg, str)]
    n_noise, n_lam, S, N = len(spec.noise_levels), len(spec.lambda_levels), spec.n_samples, 3
    # The LQ form drops a constant; adding it back makes costs the true
    # squared tracking and formation errors.
    offsets = formation_cost_offsets(scenario)
    jobs = [(spec, game, strategies, baseline, offsets, a) for a in range(n_noise)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_row, jobs))
    else:
        rows = [_run_row(job) for job in jobs]
    costs = np.stack([r[0] for r in rows]).reshape(n_noise, n_lam, S, N)
    base = np.stack([r[1] for r in rows]).reshape(n_noise, S, N)
    checksums = np.array([r[2] for r in rows], dtype=object).reshape(n_noise, S)
    sparsity = {lam: sparsedp.sparsity_pattern(st)[1] for lam, st in strategies.items()
                if not isinstance(st, str)}
    payload = {"spec": asdict(spec), "scenario": scenario.metadata(), "backend": backend}
    meta = dict(payload, config_hash=config_hash(payload), git_revision=git_revision(),
                cost_offsets=offsets.tolist())
    return SweepResult(np.array(spec.noise_levels), np.array(spec.lambda_levels), costs, base,
                       sparsity, failures, checksums, meta)


def _relative_spread(costs):
    """Per noise row: ``(max - min) / |mean|`` across the lambda axis."""
    return (costs.max(axis=1) - costs.min(axis=1)) / np.abs(costs.mean(axis=1))


def directional_claims(result, threshold=500.0):
    """Evaluate the qualitative Monte Carlo claims on a sweep.

    Returns a dict with booleans ``a``-``d`` and the numbers behind them.
    Players 2 and 3 are indices 1 and 2; player 1 is index 0.
    """
    diff = result.mean_difference
    noise, lam = result.noise_levels, result.lambda_levels
    pos_lam = lam > 0
    followers = diff[:, :, 1:3]
    high = noise >= threshold
    a = bool(np.all(followers[high][:, pos_lam] < 0))
    nonzero = noise > 0
    b = bool(np.all([np.any(np.all(followers[r, pos_lam] < 0, axis=1)) for r in np.flatnonzero(nonzero)]))
    # Costs are full objectives; the spread without the constant term of the
    # quadratic form is reported alongside.
    offset = result.metadata.get("cost_offsets", [0.0])[0]
    variation = _relative_spread(result.mean_costs[:, :, 0])
    variation_raw = _relative_spread(result.mean_costs[:, :, 0] - offset)
    cells = followers[nonzero][:, pos_lam]
    favored = np.all(cells < 0, axis=-1)
    fraction = float(favored.mean()) if favored.size else float("nan")
    return {
        "a": a, "b": b,
        "c": bool(np.nanmax(variation) <= 0.005),
        "d": bool(fraction >= 0.6),
        "player1_variation": float(np.nanmax(variation)),
        "player1_variation_without_offset": float(np.nanmax(variation_raw)),
        "favoring_fraction": fraction,
    }


def sparsity_report(strategies_by_lambda, threshold=sparsedp.BCD_ZERO_THRESHOLD):
    """Rows ``(lambda, stage, player, nonzero_blocks)``; stages are 1-based."""
    rows = []
    for lam in sorted(strategies_by_lambda):
        _, counts = sparsedp.sparsity_pattern(strategies_by_lambda[lam], threshold)
        for k in range(counts.shape[0]):
            for i in range(counts.shape[1]):
                rows.append((float(lam), k + 1, i + 1, int(counts[k, i])))
    return rows


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


SWEEP_COLUMNS = ("config_hash", "noise_variance", "lambda", "player", "mean_cost",
                 "mean_baseline_cost", "mean_difference", "n_samples")
SAMPLE_COLUMNS = ("config_hash", "noise_variance", "lambda", "sample", "player", "cost",
                  "baseline_cost", "difference", "noise_checksum")


def sweep_rows(result):
    h = result.config_hash
    mean_cost, mean_diff = result.mean_costs, result.mean_difference
    S = result.costs.shape[2]
    base = result.baseline.mean(axis=1) if S else None
    rows = []
    for i in range(result.n_players):
        for a, noise in enumerate(result.noise_levels):
            for b, lam in enumerate(result.lambda_levels):
                rows.append((h, float(noise), float(lam), i + 1, mean_cost[a, b, i],
                             base[a, i], mean_diff[a, b, i], S))
    return rows


def sample_rows(result):
    h = result.config_hash
    rows = []
    for a, noise in enumerate(result.noise_levels):
        for b, lam in enumerate(result.lambda_levels):
            for s in range(result.costs.shape[2]):
                for i in range(result.n_players):
                    c, c0 = result.costs[a, b, s, i], result.baseline[a, s, i]
                    rows.append((h, float(noise), float(lam), s, i + 1, c, c0, c - c0,
                                 result.checksums[a, s]))
    return rows


def trace_rows(traces, h):
    rows = []
    for lam in sorted(traces):
        for step, dp, dz, dist in traces[lam].rows():
            rows.append((h, float(lam), step, dp, dz, dist))
    return rows


def trajectory_rows(trajectories, h):
    rows = []
    for label in sorted(trajectories, key=str):
        tr = trajectories[label]
        for k in range(tr.x.shape[0]):
            rows.append((h, label, k + 1, *tr.x[k]))
    return rows


def _svg_figure(fig, meta_hash):
    import matplotlib.pyplot as plt

    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Description": f"config_hash={meta_hash}"})
    plt.close(fig)
    return f"<!-- config_hash={meta_hash} -->\n" + buf.getvalue()


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "sparsegames"
    import matplotlib.pyplot as plt

    return plt


def _sweep_svg(result):
    plt = _plt()
    N = result.n_players
    fig, axes = plt.subplots(1, N, figsize=(4 * N, 3.5), squeeze=False)
    diff = result.mean_difference
    for i, ax in enumerate(axes[0]):
        if diff.size:
            im = ax.pcolormesh(result.lambda_levels, result.noise_levels, diff[:, :, i], shading="auto",
                               cmap="coolwarm")
            fig.colorbar(im, ax=ax)
            if i > 0 and np.nanmin(diff[:, :, i]) < 0 < np.nanmax(diff[:, :, i]) and diff.shape[0] > 1 and diff.shape[1] > 1:
                ax.contour(result.lambda_levels, result.noise_levels, diff[:, :, i], levels=[0.0], colors="orange")
        ax.set_title(f"player {i + 1}: cost - Nash cost")
        ax.set_xlabel("lambda")
        ax.set_ylabel("noise variance")
    fig.tight_layout()
    return _svg_figure(fig, result.config_hash)


def _traces_svg(traces, h):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for lam in sorted(traces):
        ax.plot(np.arange(1, len(traces[lam]) + 1), traces[lam].delta_P, label=f"lambda={lam:g}")
    ax.set_xlabel("backward step")
    ax.set_ylabel("||P_hat - P||_F")
    ax.legend()
    fig.tight_layout()
    return _svg_figure(fig, h)


def _trajectories_svg(trajectories, h, state_dim=4, pos=(0, 2)):
    plt = _plt()
    labels = sorted(trajectories, key=str)
    fig, axes = plt.subplots(1, max(len(labels), 1), figsize=(4 * max(len(labels), 1), 4), squeeze=False)
    for ax, label in zip(axes[0], labels):
        x = trajectories[label].x
        for i in range(x.shape[1] // state_dim):
            ax.plot(x[:, state_dim * i + pos[0]], x[:, state_dim * i + pos[1]], label=f"player {i + 1}")
            ax.plot(x[0, state_dim * i + pos[0]], x[0, state_dim * i + pos[1]], "o", color=ax.lines[-1].get_color())
        ax.set_title(str(label))
        ax.set_aspect("equal", adjustable="datalim")
    axes[0][0].legend()
    fig.tight_layout()
    return _svg_figure(fig, h)


def emit_outputs(obj, fmt, path, kind=None, config_hash_value=None, position_indices=(0, 2)):
    """Write ``obj`` as CSV or SVG and return the list of files written.

    ``obj`` is a :class:`SweepResult`, a dict of
    :class:`~sparsegames.sparsedp.ConvergenceTrace` keyed by lambda (``kind``
    ``"traces"``) or a dict of :class:`Trajectory` keyed by label (``kind``
    ``"trajectories"``). For a sweep, CSV output writes ``path`` (per-cell
    means) and a ``*_samples.csv`` sibling with every realization.
    """
    if fmt not in ("csv", "svg"):
        raise ConfigError(f"unknown output format {fmt!r}")
    path = Path(path)
    if isinstance(obj, SweepResult):
        h = obj.config_hash
        if fmt == "csv":
            samples = path.with_name(path.stem + "_samples.csv")
            return [write_text(path, csv_text(SWEEP_COLUMNS, sweep_rows(obj))),
                    write_text(samples, csv_text(SAMPLE_COLUMNS, sample_rows(obj)))]
        return [write_text(path, _sweep_svg(obj))]
    h = config_hash_value or config_hash({"kind": kind})
    if kind == "traces":
        if fmt == "csv":
            header = ("config_hash", "lambda", "step", "delta_P", "delta_Z", "dist_to_fixed_point")
            return [write_text(path, csv_text(header, trace_rows(obj, h)))]
        return [write_text(path, _traces_svg(obj, h))]
    if kind == "trajectories":
        if fmt == "csv":
            m = next(iter(obj.values())).x.shape[1] if obj else 0
            header = ("config_hash", "label", "stage") + tuple(f"x{j}" for j in range(m))
            return [write_text(path, csv_text(header, trajectory_rows(obj, h)))]
        return [write_text(path, _trajectories_svg(obj, h, pos=position_indices))]
    raise ConfigError("emit_outputs needs a SweepResult or kind='traces'/'trajectories'")


def metadata_json(result):
    """Sweep metadata, failures and per-level sparsity as JSON text."""
    payload = dict(result.metadata)
    payload["failures"] = [[float(lam), msg] for lam, msg in result.failures]
    payload["nonzero_blocks"] = {repr(float(lam)): counts.mean(axis=0).tolist()
                                 for lam, counts in sorted(result.sparsity.items())}
    return json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"


def load_sweep(samples_path, meta_path=None):
    """Rebuild a :class:`SweepResult` from a samples CSV (and its metadata JSON)."""
    samples_path = Path(samples_path)
    try:
        with samples_path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != SAMPLE_COLUMNS:
                raise ConfigError(f"{samples_path} is not a sweep samples CSV")
            records = list(reader)
        meta = json.loads(Path(meta_path).read_text()) if meta_path else {}
    except (OSError, json.JSONDecodeError, csv.Error) as exc:
        raise ConfigError(f"cannot read sweep data: {exc}") from exc
    if not records:
        return SweepResult.empty()
    noise = sorted({float(r["noise_variance"]) for r in records})
    lam = sorted({float(r["lambda"]) for r in records})
    S = 1 + max(int(r["sample"]) for r in records)
    N = max(int(r["player"]) for r in records)
    a_of = {v: a for a, v in enumerate(noise)}
    b_of = {v: b for b, v in enumerate(lam)}
    costs = np.full((len(noise), len(lam), S, N), np.nan)
    base = np.full((len(noise), S, N), np.nan)
    sums = np.empty((len(noise), S), dtype=object)
    for r in records:
        a, b = a_of[float(r["noise_variance"])], b_of[float(r["lambda"])]
        s, i = int(r["sample"]), int(r["player"]) - 1
        costs[a, b, s, i] = float(r["cost"])
        base[a, s, i] = float(r["baseline_cost"])
        sums[a, s] = r["noise_checksum"]
    meta.setdefault("config_hash", records[0]["config_hash"])
    return SweepResult(np.array(noise), np.array(lam), costs, base, checksums=sums, metadata=meta)
