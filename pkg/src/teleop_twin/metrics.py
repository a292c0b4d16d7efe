"""Weighted trajectory-error metrics, convergence detection, comparisons.

Errors compare signals at identical wall-clock times: the whole point of
prediction is to close the gap that delay opens between same-time signals.
The visual series is the edge twin pose captured on the render grid and
linearly interpolated onto the operator's 120 Hz grid; plant poses are
recorded on that grid directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyEpisode

#: Magnitudes of the four error weights; the paper's sign (-1) is folded
#: into the reward so tracking error enters the metric positively.
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class MetricWeights:
    w1: float = 1.0  # visual position
    w2: float = 1.0  # visual orientation
    w3: float = 1.0  # control position
    w4: float = 1.0  # control orientation


@dataclass
class EpisodeRecord:
    """Aligned trajectories plus latency/action bookkeeping for one episode."""

    t_ms: np.ndarray  # (N,) operator grid (absolute sim time)
    ref: np.ndarray  # (N, 7) workspace-mapped operator poses
    plant: np.ndarray  # (N, 7) plant poses on the grid
    frame_t_ms: np.ndarray  # (M,) render instants
    frame_pose: np.ndarray  # (M, 7) twin poses at render instants
    decision_t_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    actions_ms: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t_r_ewma_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t_v_ewma_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t_r_raw_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t_v_raw_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    counters: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.t_ms)

    def twin_on_grid(self) -> np.ndarray:
        """Frame poses linearly interpolated onto the operator grid."""
        if len(self.frame_t_ms) == 0:
            raise EmptyEpisode("no frames recorded")
        out = np.empty_like(self.ref)
        for a in range(self.ref.shape[1]):
            out[:, a] = np.interp(self.t_ms, self.frame_t_ms, self.frame_pose[:, a])
        # renormalize the interpolated quaternion block row-wise
        qn = np.sqrt(np.sum(out[:, 3:7] ** 2, axis=1))
        qn[qn < 1e-12] = 1.0
        out[:, 3:7] /= qn[:, None]
        return out


def _canonical_quat_rows(q: np.ndarray) -> np.ndarray:
    """Flip rows so qw >= 0 (hemisphere canonicalization)."""
    q = q.copy()
    flip = q[:, 3] < 0.0
    q[flip] *= -1.0
    return q


def rmse_position(a: np.ndarray, b: np.ndarray) -> float:
    d = a[:, :3] - b[:, :3]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def rmse_orientation(a: np.ndarray, b: np.ndarray) -> float:
    qa = _canonical_quat_rows(a[:, 3:7])
    qb = _canonical_quat_rows(b[:, 3:7])
    d = qa - qb
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def geodesic_orientation(a: np.ndarray, b: np.ndarray) -> float:
    """Optional alternative orientation metric: RMS geodesic angle (rad)."""
    qa = _canonical_quat_rows(a[:, 3:7])
    qb = _canonical_quat_rows(b[:, 3:7])
    dot = np.clip(np.abs(np.sum(qa * qb, axis=1)), -1.0, 1.0)
    ang = 2.0 * np.arccos(dot)
    return float(np.sqrt(np.mean(ang * ang)))


def weighted_rmse_visual(rec: EpisodeRecord, w: MetricWeights = MetricWeights()) -> float:
    """w1 * position RMSE + w2 * orientation RMSE, operator vs twin."""
    if len(rec) == 0:
        raise EmptyEpisode("episode record has no samples")
    twin = rec.twin_on_grid()
    return w.w1 * rmse_position(rec.ref, twin) + w.w2 * rmse_orientation(rec.ref, twin)


def weighted_rmse_control(rec: EpisodeRecord, w: MetricWeights = MetricWeights()) -> float:
    """w3 * position RMSE + w4 * orientation RMSE, operator vs plant."""
    if len(rec) == 0:
        raise EmptyEpisode("episode record has no samples")
    return w.w3 * rmse_position(rec.ref, rec.plant) + w.w4 * rmse_orientation(
        rec.ref, rec.plant
    )


def combined_rmse(rec: EpisodeRecord, w: MetricWeights = MetricWeights()) -> float:
    return weighted_rmse_visual(rec, w) + weighted_rmse_control(rec, w)


def episode_summary(rec: EpisodeRecord, w: MetricWeights = MetricWeights()) -> dict:
    twin = rec.twin_on_grid()
    return {
        "e_v": weighted_rmse_visual(rec, w),
        "e_r": weighted_rmse_control(rec, w),
        "pos_v": rmse_position(rec.ref, twin),
        "ori_v": rmse_orientation(rec.ref, twin),
        "pos_r": rmse_position(rec.ref, rec.plant),
        "ori_r": rmse_orientation(rec.ref, rec.plant),
        "mean_t_r_ms": float(np.mean(rec.t_r_raw_ms)) if len(rec.t_r_raw_ms) else 0.0,
        "mean_t_v_ms": float(np.mean(rec.t_v_raw_ms)) if len(rec.t_v_raw_ms) else 0.0,
        "mean_reward": float(np.mean(rec.rewards)) if len(rec.rewards) else 0.0,
    }


def detect_convergence(
    reward_series, window: int = 50, eps_conv: float = 1e-4
) -> int | None:
    """First episode where windowed improvement stays below eps_conv.

    The moving average over `window` episodes is compared one window back;
    convergence is declared at the first index where the improvement is
    below eps_conv and remains below for a further full window.
    """
    r = np.asarray(reward_series, dtype=float)
    if len(r) < 2 * window:
        return None
    kernel = np.ones(window) / window
    ma = np.convolve(r, kernel, mode="valid")  # ma[i] = mean of r[i:i+window]
    # improvement of the current window over the previous one
    imp = ma[window:] - ma[:-window]  # index i -> windows ending at i+2w
    below = imp < eps_conv
    for i in range(len(below)):
        j = min(len(below), i + window)
        if np.all(below[i:j]):
            return i + 2 * window - 1
    return None


def compare_policies(records_by_policy: dict, w: MetricWeights = MetricWeights()) -> dict:
    """Mean/std error table plus pairwise percentage deltas vs each policy.

    Deltas follow the convention (baseline - candidate) / candidate * 100,
    i.e. "how much larger the baseline error is, in percent of ours".
    """
    stats = {}
    for name, recs in records_by_policy.items():
        if len(recs) == 0:
            raise EmptyEpisode(f"no episodes for policy {name!r}")
        ev = np.array([weighted_rmse_visual(r, w) for r in recs])
        er = np.array([weighted_rmse_control(r, w) for r in recs])
        comb = ev + er
        stats[name] = {
            "n": len(recs),
            "e_v_mean": float(ev.mean()),
            "e_v_std": float(ev.std()),
            "e_r_mean": float(er.mean()),
            "e_r_std": float(er.std()),
            "combined_mean": float(comb.mean()),
            "combined_std": float(comb.std()),
        }
    names = sorted(stats, key=lambda n: stats[n]["combined_mean"])
    deltas = {}
    for cand in stats:
        c = stats[cand]["combined_mean"]
        deltas[cand] = {
            other: (stats[other]["combined_mean"] - c) / c * 100.0
            for other in stats
            if other != cand
        }
    return {"stats": stats, "ranking": names, "delta_pct": deltas}


def task_table(records_by_policy_and_shape: dict, w: MetricWeights = MetricWeights()) -> dict:
    """Per-shape position/orientation breakdown for each policy.

    Keyed [shape][metric][policy] with metric in {position_virtual,
    orientation_virtual, position_real, orientation_real}.
    """
    table: dict = {}
    for (policy, shape), recs in records_by_policy_and_shape.items():
        shape_row = table.setdefault(shape, {})
        pv, ov, pr, orr = [], [], [], []
        for rec in recs:
            twin = rec.twin_on_grid()
            pv.append(rmse_position(rec.ref, twin))
            ov.append(rmse_orientation(rec.ref, twin))
            pr.append(rmse_position(rec.ref, rec.plant))
            orr.append(rmse_orientation(rec.ref, rec.plant))
        for metric, vals in (
            ("position_virtual", pv),
            ("orientation_virtual", ov),
            ("position_real", pr),
            ("orientation_real", orr),
        ):
            shape_row.setdefault(metric, {})[policy] = float(np.mean(vals))
    return table
