"""Model-predictive control for 3D servoing with the fitted dynamics.

The planner is an improved cross-entropy method: colored-noise action
sampling around a running mean, elite reuse across iterations, momentum
on the sampling distribution, and a decaying population.  A closed-loop
driver executes the first planned action against the simulator, tracks
the controlled object through per-step motion fits, and scores episodes
by the fraction-of-initial-distance rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .fit import ActionModel, FitOptions, fit_pair, twist_to_se3
from .geometry import depth_to_pointcloud, project_points, rodrigues_batch, se3_apply
from .losses import LossWeights
from .rng import subsystem_rng

# fraction of the initial distance that counts as reaching the goal,
# and how many steps must reach it for a successful episode
SUCCESS_FRACTION = 0.1
SUCCESS_HITS = 5


@dataclass
class IcemParams:
    """iCEM hyperparameters; defaults follow the reference table."""

    population: int = 150
    min_std: float = 0.001
    max_std: float = 1.0
    elite_frac: float = 0.1
    horizon: int = 5
    max_iters: int = 5
    alpha_momentum: float = 0.1
    beta_momentum: float = 0.5
    noise_beta: float = 2.0
    pop_decay: float = 0.9
    cost_decay: float = 0.8

    def __post_init__(self):
        if not 0 < self.elite_frac < 1:
            raise ValidationError("elite_frac must be in (0, 1)")
        if self.min_std > self.max_std:
            raise ValidationError("min_std must not exceed max_std")
        if self.population * self.elite_frac < 1:
            raise ValidationError("population * elite_frac must be at least 1")
        if self.horizon < 1 or self.max_iters < 1:
            raise ValidationError("horizon and max_iters must be at least 1")

    @property
    def n_elites(self) -> int:
        return max(1, int(round(self.population * self.elite_frac)))


@dataclass
class EpisodeRecord:
    """One servoing episode.

    ``steps`` holds (executed action, tracked point estimate, true
    distance of the controlled point to the goal).  ``within_count`` is
    the number of steps whose distance was at most SUCCESS_FRACTION of
    the initial distance; a zero initial distance counts every step.
    """

    steps: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)
    success: bool = False
    within_count: int = 0
    initial_distance: float = 0.0
    failure_reason: str = ""


def colored_noise(
    horizon: int,
    dims: int,
    beta: float,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Temporally correlated Gaussian samples, unit variance per dim.

    The power spectrum along the horizon axis scales as f^(-beta);
    synthesis shapes white Gaussian spectra in the frequency domain and
    normalizes by the analytic time-domain variance.
    """
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    if rng is None:
        rng = subsystem_rng(0 if seed is None else seed, "colored-noise")
    if horizon == 1:
        return rng.standard_normal((1, dims))

    freqs = np.fft.rfftfreq(horizon)
    scale = np.empty_like(freqs)
    scale[1:] = freqs[1:] ** (-beta / 2.0)
    scale[0] = scale[1]  # keep the DC amplitude finite

    nf = freqs.size
    sr = rng.standard_normal((nf, dims))
    si = rng.standard_normal((nf, dims))
    si[0] = 0.0
    if horizon % 2 == 0:
        si[-1] = 0.0
    spectrum = (sr + 1j * si) * scale[:, None]
    x = np.fft.irfft(spectrum, n=horizon, axis=0)

    # circularly stationary, so every sample shares this variance
    var = scale[0] ** 2 + 4.0 * (scale[1:-1] ** 2).sum()
    var += scale[-1] ** 2 if horizon % 2 == 0 else 4.0 * scale[-1] ** 2
    var /= horizon**2
    return x / np.sqrt(var)


def trajectory_cost(track: np.ndarray, goal: np.ndarray, gamma: float) -> float:
    """Discounted sum of distances from a tracked trajectory to the goal."""
    track = np.atleast_2d(np.asarray(track, dtype=np.float64))
    if track.size == 0:
        raise ValidationError("track must be non-empty")
    goal = np.asarray(goal, dtype=np.float64).reshape(-1)
    dists = np.linalg.norm(track - goal, axis=-1)
    return float(dists @ (gamma ** np.arange(track.shape[0])))


def _discounted_point_cost(tracks, goal, gamma):
    dists = np.linalg.norm(tracks - goal, axis=-1)  # (B, H)
    return dists @ (gamma ** np.arange(tracks.shape[1]))


def pixel_cost_fn(goal: np.ndarray, intr, gamma: float):
    """Discounted pixel-distance cost (depth-blind planning baseline)."""
    goal_uv, ok = project_points(np.asarray(goal, float)[None, :], intr)
    if not ok[0]:
        raise ValidationError("goal must project inside the camera frustum")

    def cost(tracks: np.ndarray) -> np.ndarray:
        flat = tracks.reshape(-1, 3)
        uv, in_front = project_points(flat, intr)
        d = np.linalg.norm(uv - goal_uv[0], axis=-1)
        # points lost behind the camera are maximally wrong
        d = np.where(in_front, d, 1e6)
        dists = d.reshape(tracks.shape[:2])
        return dists @ (gamma ** np.arange(tracks.shape[1]))

    return cost


def icem_plan(
    dynamics,
    goal: np.ndarray,
    p: IcemParams,
    action_dim: int,
    seed: int = 0,
    bounds: float | tuple = 1.0,
    init_mean: np.ndarray | None = None,
    cost_fn=None,
) -> tuple[np.ndarray, list[float]]:
    """Search an action sequence minimizing the trajectory cost.

    ``dynamics`` maps a (B, horizon, action_dim) batch of action
    sequences to (B, horizon, 3) tracked-point trajectories; the
    default cost is the discounted 3D distance to ``goal``.  Elites are
    re-evaluated with each shrinking population, the sampling mean and
    std update with their momenta, and the best sequence ever seen is
    returned together with the per-iteration best-cost trace.
    """
    goal = np.asarray(goal, dtype=np.float64).reshape(-1)
    if np.isscalar(bounds):
        low, high = -float(bounds), float(bounds)
    else:
        low, high = float(bounds[0]), float(bounds[1])
    rng = subsystem_rng(seed, "icem")
    mean = (
        np.zeros((p.horizon, action_dim))
        if init_mean is None
        else np.array(init_mean, dtype=np.float64).reshape(p.horizon, action_dim)
    )
    std = np.full((p.horizon, action_dim), p.max_std)
    if cost_fn is None:
        cost_fn = lambda tracks: _discounted_point_cost(tracks, goal, p.cost_decay)

    best_seq = None
    best_cost = np.inf
    elites = np.zeros((0, p.horizon, action_dim))
    trace: list[float] = []
    pop = p.population
    for it in range(p.max_iters):
        noise = colored_noise(
            p.horizon, pop * action_dim, p.noise_beta, rng=rng
        ).reshape(p.horizon, pop, action_dim)
        samples = np.clip(
            mean[:, None, :] + std[:, None, :] * noise, low, high
        ).transpose(1, 0, 2)
        # evaluate the distribution mean itself plus retained elites
        extras = [np.clip(mean, low, high)[None]]
        if elites.size:
            extras.append(elites)
        samples = np.concatenate([samples, *extras], axis=0)
        tracks = np.asarray(dynamics(samples), dtype=np.float64)
        if tracks.shape != (samples.shape[0], p.horizon, 3):
            raise ValidationError("dynamics must return (B, horizon, 3) tracks")
        costs = np.asarray(cost_fn(tracks), dtype=np.float64)
        if not np.all(np.isfinite(costs)):
            raise NumericalError("dynamics produced non-finite costs")
        order = np.argsort(costs, kind="stable")
        elites = samples[order[: p.n_elites]]
        if costs[order[0]] < best_cost:
            best_cost = float(costs[order[0]])
            best_seq = samples[order[0]].copy()
        trace.append(best_cost)

        elite_mean = elites.mean(axis=0)
        elite_std = elites.std(axis=0)
        mean = p.alpha_momentum * mean + (1 - p.alpha_momentum) * elite_mean
        std = p.beta_momentum * std + (1 - p.beta_momentum) * elite_std
        std = np.clip(std, p.min_std, p.max_std)
        pop = max(int(pop * p.pop_decay), 2 * p.n_elites)
    assert best_seq is not None
    return best_seq, trace


def _identify_tracked_point(frame_a, frame_b, intr, weights, opts):
    """Fit the pair and return the fastest object's robust centroid,
    carried to frame_b.  None when no object pixels survive."""
    fitted = fit_pair(frame_a, frame_b, weights, opts, intr=intr)
    k = int(np.argmax(np.linalg.norm(fitted.twists, axis=1)))
    cloud = depth_to_pointcloud(frame_a, intr)
    sel = (np.argmax(fitted.masks, axis=0) == k) & cloud.valid
    if not sel.any():
        return None
    # robust centroid: drop mask pixels whose depth strays from the
    # object's median (segmentation fringes grab background otherwise)
    depths = cloud.points[sel][:, 2]
    core = np.abs(depths - np.median(depths)) < 0.1
    if not core.any():
        return None
    centroid = cloud.points[sel][core].mean(axis=0)
    return se3_apply(twist_to_se3(fitted.twists[k]), centroid)


class _TemplateTracker:
    """Drift-free observational correction of a carried 3D point.

    Stores the appearance patch and depth around point's pixel at
    identification time; each step the carried prediction is corrected
    to the best template match in a small window of the new frame.
    Matching always against the original template keeps the corrections
    anchored, so tracking errors do not accumulate.
    """

    def __init__(self, frame, point, intr, patch: int = 2, search: int = 5):
        self.intr = intr
        self.patch = patch
        self.search = search
        self.ok = False
        uv, in_front = project_points(point[None, :], intr)
        if not in_front[0]:
            return
        col = int(np.floor(uv[0, 0] + 0.5))
        row = int(np.floor(uv[0, 1] + 0.5))
        if not (
            patch <= col < intr.width - patch and patch <= row < intr.height - patch
        ):
            return
        self.template = frame.rgb[
            row - patch : row + patch + 1, col - patch : col + patch + 1
        ].copy()
        self.depth = float(frame.depth[row, col])
        self.offset = point - self._backproject(frame, row, col)
        self.ok = True

    def _backproject(self, frame, row, col):
        z = frame.depth[row, col]
        return np.array(
            [
                (col - self.intr.cx) * z / self.intr.fx,
                (row - self.intr.cy) * z / self.intr.fy,
                z,
            ]
        )

    def correct(self, frame, carried: np.ndarray) -> np.ndarray:
        if not self.ok:
            return carried
        uv, in_front = project_points(carried[None, :], self.intr)
        if not in_front[0]:
            return carried
        c0 = int(np.floor(uv[0, 0] + 0.5))
        r0 = int(np.floor(uv[0, 1] + 0.5))
        ph, s = self.patch, self.search
        best, best_rc = np.inf, None
        for dr in range(-s, s + 1):
            for dc in range(-s, s + 1):
                r, c = r0 + dr, c0 + dc
                if not (
                    ph <= r < self.intr.height - ph and ph <= c < self.intr.width - ph
                ):
                    continue
                if not frame.valid[r, c]:
                    continue
                # depth gate: stay on the tracked surface, accounting
                # for the point's stored offset from it
                if abs(frame.depth[r, c] - (carried[2] - self.offset[2])) > 0.1:
                    continue
                cand = frame.rgb[r - ph : r + ph + 1, c - ph : c + ph + 1]
                ssd = float(((cand - self.template) ** 2).mean())
                if ssd < best:
                    best, best_rc = ssd, (r, c)
        if best_rc is None or best > 0.05:
            return carried
        corrected = self._backproject(frame, *best_rc) + self.offset
        # bounded correction: the template refines, never teleports
        if np.linalg.norm(corrected - carried) > 0.15:
            return carried
        return corrected


def make_point_dynamics(model: ActionModel, start_point: np.ndarray):
    """Batched tracked-point rollout under an action model.

    The controlled object's twist for each action is applied to the
    point recursively, mirroring how the predicted transformed cloud
    carries tracked geometry.
    """
    k = model.moving_object
    A, b = model.A[k], model.b[k]
    p0 = np.asarray(start_point, dtype=np.float64).reshape(3)

    def dynamics(actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        B, H, _ = actions.shape
        twists = actions @ A.T + b  # (B, H, 6)
        pts = np.broadcast_to(p0, (B, 3)).copy()
        out = np.zeros((B, H, 3))
        for h in range(H):
            R = rodrigues_batch(twists[:, h, 3:])
            pts = np.einsum("bij,bj->bi", R, pts) + twists[:, h, :3]
            out[:, h] = pts
        return out

    return dynamics


def run_servoing(
    env,
    model: ActionModel,
    p: IcemParams,
    budget: int,
    goal: np.ndarray,
    seed: int = 0,
    cost_mode: str = "3d",
    weights: LossWeights | None = None,
    track_opts: FitOptions | None = None,
    stop_on_success: bool = False,
) -> EpisodeRecord:
    """Closed-loop servoing: plan, execute, observe, replan.

    The tracked point starts at the centroid of the fastest fitted
    object's mask (identified from a probe step) and is carried through
    per-step motion fits of consecutive observations.  Success follows
    the fraction-of-initial-distance rule; distances are measured on
    the simulator's true pose of the controlled object, while the
    planner only ever sees its own estimates.  With ``stop_on_success``
    the episode ends early once the success rule is already met.
    """
    record = EpisodeRecord()
    goal = np.asarray(goal, dtype=np.float64).reshape(3)
    if budget < 1:
        record.failure_reason = "zero budget"
        return record
    if cost_mode not in ("3d", "pixel"):
        raise ValidationError("cost_mode must be '3d' or 'pixel'")
    weights = weights or model.weights
    if track_opts is None:
        # tracking refits are warm-started from the model's prediction
        # and only need a short polishing budget
        from dataclasses import replace

        track_opts = replace(model.opts, steps=10, convergence_tol=3e-5)
    opts = track_opts
    rng = subsystem_rng(seed, "servoing")

    frame_prev = env.observe()
    # full-range probe so the identification fit sees super-pixel motion
    probe = 0.8 * env.action_bound * np.where(
        rng.uniform(size=env.action_dim) < 0.5, -1.0, 1.0
    )
    frame_cur = env.step(probe)
    point_est = _identify_tracked_point(
        frame_prev, frame_cur, env.intr, weights, model.opts
    )
    if point_est is None:
        record.failure_reason = "no tracked object"
        return record

    # evaluation reference: the body-fixed point on the controlled object
    local_ref = env.to_local(0, point_est)
    true_point = env.camera_point(0, local_ref)
    d0 = float(np.linalg.norm(true_point - goal))
    record.initial_distance = d0
    threshold = SUCCESS_FRACTION * d0

    cost_fn = None
    if cost_mode == "pixel":
        cost_fn = pixel_cost_fn(goal, env.intr, p.cost_decay)

    def hit(dist: float) -> bool:
        # a degenerate start exactly at the goal counts every step
        return d0 < 1e-12 or dist <= threshold + 1e-12

    record.steps.append((probe, point_est.copy(), d0))
    if hit(d0):
        record.within_count += 1

    tracker = _TemplateTracker(frame_cur, point_est, env.intr)
    missed_corrections = 0
    plan_mean = None
    for step in range(1, budget):
        uv, in_front = project_points(point_est[None, :], env.intr)
        if not in_front[0] or not (
            0 <= uv[0, 0] < env.intr.width and 0 <= uv[0, 1] < env.intr.height
        ):
            record.failure_reason = "tracked point left the frustum"
            break

        dynamics = make_point_dynamics(model, point_est)
        actions, _ = icem_plan(
            dynamics,
            goal,
            p,
            env.action_dim,
            seed=seed * 100003 + step,
            bounds=env.action_bound,
            init_mean=plan_mean,
            cost_fn=cost_fn,
        )
        executed = actions[0]
        frame_new = env.step(executed)

        # external momentum: shift the solution as the next warm start
        plan_mean = p.beta_momentum * np.concatenate(
            [actions[1:], np.zeros((1, env.action_dim))], axis=0
        )

        # carry the point through the model's predicted transform, then
        # correct against the observation
        step_twist = model.twists_for(executed)[model.moving_object]
        carried = se3_apply(twist_to_se3(step_twist), point_est)
        point_est = tracker.correct(frame_new, carried)
        if point_est is carried and np.linalg.norm(executed) > 0.2 * env.action_bound:
            missed_corrections += 1
        else:
            missed_corrections = 0
        if missed_corrections >= 3:
            # appearance lock lost: re-identify from the latest pair
            fresh = _identify_tracked_point(
                frame_cur, frame_new, env.intr, weights, opts
            )
            if fresh is not None:
                point_est = fresh
                tracker = _TemplateTracker(frame_new, point_est, env.intr)
            missed_corrections = 0
        frame_cur = frame_new

        true_point = env.camera_point(0, local_ref)
        dist = float(np.linalg.norm(true_point - goal))
        record.steps.append((executed, point_est.copy(), dist))
        if hit(dist):
            record.within_count += 1
        if stop_on_success and record.within_count >= SUCCESS_HITS:
            break

    record.success = record.within_count >= SUCCESS_HITS
    return record
