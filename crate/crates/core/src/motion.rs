//! Location mappings obtained by Euler integration of a velocity field.
//!
//! `M(x, t0, t1)` follows the field from time `t0` to `t1` with steps of
//! `dt` (signed toward `t1`); the final step is shortened so the path lands
//! exactly on `t1`. All steps are built from graph ops, so on a [`Tape`]
//! gradients reach both the network parameters and the start positions.
//!
//! [`Tape`]: crate::autodiff::Tape

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::networks::{estimate_lipschitz, BoundVelocity, VelocityField, VelocityNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    #[serde(default)]
    pub record_trajectory: bool,
}

impl IntegratorConfig {
    pub fn new(dt: f64) -> Result<Self> {
        let cfg = Self { dt, record_trajectory: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 2.0) {
            return Err(Error::invalid(format!("integration step dt must lie in (0, 2], got {}", self.dt)));
        }
        Ok(())
    }
}

/// Positions, velocities and times at every node of one integrated path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub timestamps: Vec<f64>,
}

impl Trajectory {
    /// Checks `p[k+1] == p[k] + (t[k+1] - t[k]) * v[k]` bit for bit.
    pub fn satisfies_euler_identity(&self) -> bool {
        self.positions.windows(2).zip(&self.velocities).zip(self.timestamps.windows(2)).all(|((p, v), t)| {
            let h = t[1] - t[0];
            p[1][0] == p[0][0] + h * v[0] && p[1][1] == p[0][1] + h * v[1]
        })
    }
}

const GRID_TOLERANCE: f64 = 1e-9;

/// Number of Euler steps between `t0` and `t1`: `ceil(|t1 - t0| / dt)`.
///
/// Spans within a relative `1e-9` of a whole number of steps count as exact
/// multiples, so the last step keeps its full size.
pub fn step_count(t0: f64, t1: f64, dt: f64) -> usize {
    let span = (t1 - t0).abs();
    if span == 0.0 {
        return 0;
    }
    (span / dt - GRID_TOLERANCE).ceil().max(1.0) as usize
}

/// Node times `t0, t0 ± dt, …, t1` of the Euler grid anchored at `t0`.
pub fn euler_times(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    let n = step_count(t0, t1, dt);
    let sign = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut times: Vec<f64> = (0..n).map(|k| t0 + sign * k as f64 * dt).collect();
    times.push(t1);
    times
}

/// Snaps `t` onto the Euler grid anchored at `anchor`, clamped to `[-1, 1]`.
pub fn snap_to_grid(anchor: f64, t: f64, dt: f64) -> f64 {
    let k = ((t - anchor) / dt).round();
    (anchor + k * dt).clamp(-1.0, 1.0)
}

/// Graph values along one batched path.
///
/// `positions`, `velocities` and `times` are filled only when recording; the
/// velocity list then also holds the velocity at the terminal node.
#[derive(Debug, Clone)]
pub struct Path<V> {
    pub end: V,
    pub positions: Vec<V>,
    pub velocities: Vec<V>,
    pub times: Vec<f64>,
}

fn query<G: Graph>(g: &mut G, pos: &G::Value, t: f64) -> Result<G::Value> {
    let rows = g.value(pos).rows();
    let tcol = g.constant(Tensor::filled(&[rows, 1], t));
    Ok(g.concat(&[pos, &tcol], 1)?)
}

/// Integrates a batch of start positions `[n, 2]` from `t0` to `t1`.
///
/// Without recording this performs exactly [`step_count`] velocity
/// evaluations; with recording one more evaluation is made at the terminal
/// node.
pub fn integrate_path<G: Graph, F: VelocityField<G>>(
    g: &mut G,
    field: &F,
    start: &G::Value,
    t0: f64,
    t1: f64,
    dt: f64,
    record: bool,
) -> Result<Path<G::Value>> {
    if g.value(start).cols() != 2 {
        return Err(Error::invalid(format!("start positions must be [n, 2], got {:?}", g.value(start).shape())));
    }
    let times = euler_times(t0, t1, dt);
    let mut pos = start.clone();
    let mut positions = Vec::new();
    let mut velocities = Vec::new();
    for k in 0..times.len() - 1 {
        let q = query(g, &pos, times[k])?;
        let vel = field.velocity(g, &q)?;
        let h = times[k + 1] - times[k];
        let step = g.scale(&vel, h)?;
        let next = g.add(&pos, &step)?;
        if !g.value(&next).is_finite() {
            return Err(Error::Unstable { step: k });
        }
        if record {
            positions.push(pos);
            velocities.push(vel);
        }
        pos = next;
    }
    if record {
        let q = query(g, &pos, t1)?;
        velocities.push(field.velocity(g, &q)?);
        positions.push(pos.clone());
    }
    Ok(Path { end: pos, positions, velocities, times: if record { times } else { Vec::new() } })
}

fn check_time(t: f64, what: &str) -> Result<()> {
    if !(-1.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("{} = {} lies outside the normalized range [-1, 1]", what, t)));
    }
    Ok(())
}

/// Integrates start positions `[n, 2]` with any field, returning end
/// positions and, when `cfg.record_trajectory` is set, one trajectory per row.
pub fn integrate_field<F: VelocityField<Eager>>(
    field: &F,
    start: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<(Tensor, Option<Vec<Trajectory>>)> {
    cfg.validate()?;
    check_time(t0, "t0")?;
    check_time(t1, "t1")?;
    if !start.is_finite() {
        return Err(Error::NonFinite { what: "start positions".into() });
    }
    let mut g = Eager;
    let x = g.constant(start.clone());
    let path = integrate_path(&mut g, field, &x, t0, t1, cfg.dt, cfg.record_trajectory)?;
    let trajectories = cfg.record_trajectory.then(|| {
        (0..start.rows())
            .map(|r| Trajectory {
                positions: path.positions.iter().map(|p| [p.get2(r, 0), p.get2(r, 1)]).collect(),
                velocities: path.velocities.iter().map(|v| [v.get2(r, 0), v.get2(r, 1)]).collect(),
                timestamps: path.times.clone(),
            })
            .collect()
    });
    Ok((path.end.as_ref().clone(), trajectories))
}

pub fn integrate(
    net: &VelocityNet,
    store: &ParamStore,
    start: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<(Tensor, Option<Vec<Trajectory>>)> {
    let mut g = Eager;
    let params = store.bind(&mut g);
    integrate_field(&BoundVelocity { net, params: &params }, start, t0, t1, cfg)
}

fn max_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows())
        .map(|r| ((a.get2(r, 0) - b.get2(r, 0)).powi(2) + (a.get2(r, 1) - b.get2(r, 1)).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResiduals {
    /// `max ‖M(M(x, t0, t1), t1, t2) − M(x, t0, t2)‖`
    pub forward: f64,
    /// `max ‖M(M(x, t0, t1), t1, t0) − x‖`
    pub backward: f64,
    /// The intermediate time actually used, snapped to the grid at `t0`.
    pub t1_snapped: f64,
}

/// Forward and backward consistency residuals of the discrete mapping.
pub fn consistency_residuals_field<F: VelocityField<Eager>>(
    field: &F,
    samples: &Tensor,
    t0: f64,
    t1: f64,
    t2: f64,
    cfg: &IntegratorConfig,
) -> Result<ConsistencyResiduals> {
    for (t, name) in [(t0, "t0"), (t1, "t1"), (t2, "t2")] {
        check_time(t, name)?;
    }
    let cfg = IntegratorConfig { dt: cfg.dt, record_trajectory: false };
    let t1s = snap_to_grid(t0, t1, cfg.dt);
    let (mid, _) = integrate_field(field, samples, t0, t1s, &cfg)?;
    let (composed, _) = integrate_field(field, &mid, t1s, t2, &cfg)?;
    let (direct, _) = integrate_field(field, samples, t0, t2, &cfg)?;
    let (back, _) = integrate_field(field, &mid, t1s, t0, &cfg)?;
    Ok(ConsistencyResiduals {
        forward: max_row_distance(&composed, &direct),
        backward: max_row_distance(&back, samples),
        t1_snapped: t1s,
    })
}

pub fn consistency_residuals(
    net: &VelocityNet,
    store: &ParamStore,
    samples: &Tensor,
    t0: f64,
    t1: f64,
    t2: f64,
    cfg: &IntegratorConfig,
) -> Result<ConsistencyResiduals> {
    let mut g = Eager;
    let params = store.bind(&mut g);
    consistency_residuals_field(&BoundVelocity { net, params: &params }, samples, t0, t1, t2, cfg)
}

/// Regular `side × side` grid of sample points covering `[-1, 1]²`.
pub fn sample_grid(side: usize) -> Tensor {
    let coord = |i: usize| if side == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (side - 1) as f64 };
    let mut rows = Vec::with_capacity(side * side * 2);
    for y in 0..side {
        for x in 0..side {
            rows.extend_from_slice(&[coord(x), coord(y)]);
        }
    }
    Tensor::matrix(side * side, 2, rows)
}

/// Diagnostic when `dt · L̂ ≥ 1`, the regime where the discrete mapping is no
/// longer guaranteed to be invertible.
pub fn stability_warning(dt: f64, lipschitz: f64) -> Option<String> {
    let product = dt * lipschitz;
    (product >= 1.0).then(|| {
        format!(
            "dt * Lipschitz estimate = {:.4} * {:.4} = {:.4} >= 1; the Euler mapping may fold",
            dt, lipschitz, product
        )
    })
}

/// Estimates the Lipschitz constant of a layer's field and logs a warning
/// when the step size is too large for it. Returns `(estimate, warning)`.
pub fn check_step_stability(net: &VelocityNet, store: &ParamStore, dt: f64, samples: usize) -> Result<(f64, Option<String>)> {
    let l = estimate_lipschitz(net, store, samples)?;
    let warning = stability_warning(dt, l);
    if let Some(w) = &warning {
        log::warn!("{}", w);
    }
    Ok((l, warning))
}
