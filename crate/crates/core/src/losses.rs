//! Training objective: L1 reconstruction, Laplacian-damped velocity
//! penalty, trajectory inertia, and their weighted sum.
//!
//! All terms are means (over pixels, sample points, layers and velocity
//! components) so the weights transfer across batch sizes. The graph-level
//! `*_sum` functions return un-normalized sums so callers can split a batch
//! into chunks and normalize each chunk by the full batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph, Tensor};
use crate::compositor::render_points;
use crate::error::{Error, Result};
use crate::motion::integrate_path;
use crate::networks::{BoundVelocity, VelocityField};
use crate::trainer::LayeredVideoModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_i: f64,
    pub alpha: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [(self.lambda_v, "lambda_v"), (self.lambda_i, "lambda_i"), (self.alpha, "alpha")] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{} must be finite and non-negative, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Pixels with normalized `(u, v, t)` and their target colours.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelBatch {
    pub coords: Vec<[f64; 3]>,
    pub target_rgb: Vec<[f64; 3]>,
}

impl PixelBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Rows grouped by timestamp, in order of first appearance:
    /// `(t, uv [n, 2], target [n, 3])`.
    pub fn groups(&self) -> Vec<(f64, Tensor, Tensor)> {
        let mut order: Vec<u64> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, c) in self.coords.iter().enumerate() {
            let key = c[2].to_bits();
            match order.iter().position(|&k| k == key) {
                Some(p) => members[p].push(i),
                None => {
                    order.push(key);
                    members.push(vec![i]);
                }
            }
        }
        order
            .iter()
            .zip(members)
            .map(|(&key, rows)| {
                let uv: Vec<[f64; 2]> = rows.iter().map(|&r| [self.coords[r][0], self.coords[r][1]]).collect();
                let target: Vec<[f64; 3]> = rows.iter().map(|&r| self.target_rgb[r]).collect();
                (f64::from_bits(key), Tensor::from_rows(&uv), Tensor::from_rows(&target))
            })
            .collect()
    }

    /// Distinct `(u, v)` projections in order of first appearance.
    pub fn uv_projections(&self) -> Vec<[f64; 2]> {
        let mut seen = std::collections::HashSet::new();
        self.coords
            .iter()
            .filter(|c| seen.insert((c[0].to_bits(), c[1].to_bits())))
            .map(|c| [c[0], c[1]])
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("pixel batch is empty"));
        }
        if self.coords.len() != self.target_rgb.len() {
            return Err(Error::invalid("pixel batch coords and targets differ in length"));
        }
        Ok(())
    }
}

/// Σ over pixels and channels of `|rendered − target|`.
pub fn rgb_l1_sum<G: Graph>(
    g: &mut G,
    model: &LayeredVideoModel,
    params: &[G::Value],
    groups: &[(f64, Tensor, Tensor)],
) -> Result<G::Value> {
    let mut total: Option<G::Value> = None;
    for (t, uv, target) in groups {
        let uv = g.constant(uv.clone());
        let rendered = render_points(g, model, params, &uv, *t)?.rgb;
        let target = g.constant(target.clone());
        let diff = g.sub(&rendered, &target)?;
        let abs = g.abs(&diff)?;
        let s = g.sum(&abs)?;
        total = Some(match total {
            Some(acc) => g.add(&acc, &s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::invalid("no pixel groups"))
}

/// Σ over points and layers of `‖V − α·∇²V‖²`, the Laplacian taken with the
/// five-point stencil of spacing `fd_h` in `(u, v)`.
pub fn velocity_reg_sum<G: Graph, F: VelocityField<G>>(
    g: &mut G,
    fields: &[F],
    points: &Tensor,
    alpha: f64,
    fd_h: f64,
) -> Result<G::Value> {
    if !(fd_h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {}", fd_h)));
    }
    let n = points.rows();
    let stencil = if alpha == 0.0 {
        g.constant(points.clone())
    } else {
        let mut rows = Vec::with_capacity(5 * n * 3);
        for offset in [[0.0, 0.0], [fd_h, 0.0], [-fd_h, 0.0], [0.0, fd_h], [0.0, -fd_h]] {
            for r in 0..n {
                rows.extend_from_slice(&[points.get2(r, 0) + offset[0], points.get2(r, 1) + offset[1], points.get2(r, 2)]);
            }
        }
        g.constant(Tensor::matrix(5 * n, 3, rows))
    };
    let mut total: Option<G::Value> = None;
    for field in fields {
        let all = field.velocity(g, &stencil)?;
        let term = if alpha == 0.0 {
            all
        } else {
            let center = g.slice_rows(&all, 0, n)?;
            let mut neighbours = g.slice_rows(&all, n, n)?;
            for k in 2..5 {
                let nb = g.slice_rows(&all, k * n, n)?;
                neighbours = g.add(&neighbours, &nb)?;
            }
            let four = g.scale(&center, 4.0)?;
            let lap = g.sub(&neighbours, &four)?;
            let damped = g.scale(&lap, alpha / (fd_h * fd_h))?;
            g.sub(&center, &damped)?
        };
        let sq = g.square(&term)?;
        let s = g.sum(&sq)?;
        total = Some(match total {
            Some(acc) => g.add(&acc, &s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::invalid("velocity regularization needs at least one layer"))
}

/// Σ over start points and layers of the velocity variance along the
/// trajectory through `(u, v, 0)`, averaged over the two components.
///
/// The trajectory is traced from `t = 0` to `−1` and to `+1`; velocities are
/// taken at every node of the combined Euler grid except the node at `t = +1`.
pub fn inertia_sum<G: Graph, F: VelocityField<G>>(g: &mut G, fields: &[F], starts: &Tensor, dt: f64) -> Result<G::Value> {
    let s = g.constant(starts.clone());
    let mut total: Option<G::Value> = None;
    for field in fields {
        let back = integrate_path(g, field, &s, 0.0, -1.0, dt, true)?;
        let fwd = integrate_path(g, field, &s, 0.0, 1.0, dt, true)?;
        let nf = fwd.velocities.len();
        let samples: Vec<&G::Value> = back.velocities.iter().chain(&fwd.velocities[1..nf - 1]).collect();
        let mut comps = Vec::with_capacity(2);
        for c in 0..2 {
            let cols = samples.iter().map(|v| g.slice_cols(v, c, 1)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&G::Value> = cols.iter().collect();
            let stacked = g.concat(&refs, 1)?;
            comps.push(g.variance(&stacked, 1)?);
        }
        let both = g.add(&comps[0], &comps[1])?;
        let half = g.scale(&both, 0.5)?;
        let sum = g.sum(&half)?;
        total = Some(match total {
            Some(acc) => g.add(&acc, &sum)?,
            None => sum,
        });
    }
    total.ok_or_else(|| Error::invalid("inertia loss needs at least one layer"))
}

/// Loss values, each already normalized to a mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub velocity: f64,
    pub inertia: f64,
}

impl LossBreakdown {
    pub fn combine(rgb: f64, velocity: f64, inertia: f64, w: &LossWeights) -> Self {
        Self { total: rgb + w.lambda_v * velocity + w.lambda_i * inertia, rgb, velocity, inertia }
    }
}

/// Graph values of the weighted loss and its terms.
pub struct LossTerms<V> {
    pub total: V,
    pub rgb: V,
    pub velocity: Option<V>,
    pub inertia: Option<V>,
}

/// Finite-difference spacing for the Laplacian: one pixel in normalized units.
pub fn laplacian_step(model: &LayeredVideoModel) -> f64 {
    2.0 / model.meta.width.max(model.meta.height) as f64
}

fn bound_fields<'a, G: Graph>(model: &'a LayeredVideoModel, params: &'a [G::Value]) -> Vec<BoundVelocity<'a, G>> {
    model.velocity_nets.iter().map(|net| BoundVelocity { net, params }).collect()
}

/// `L = L_rgb + λ_V·L_V + λ_I·L_I` on a graph. Terms with zero weight are not built.
pub fn total_loss_graph<G: Graph>(
    g: &mut G,
    model: &LayeredVideoModel,
    params: &[G::Value],
    batch: &PixelBatch,
    inertia_starts: &Tensor,
    weights: &LossWeights,
) -> Result<LossTerms<G::Value>> {
    batch.validate()?;
    weights.validate()?;
    let n = batch.len() as f64;
    let layers = model.num_layers() as f64;
    let rgb_sum = rgb_l1_sum(g, model, params, &batch.groups())?;
    let rgb = g.scale(&rgb_sum, 1.0 / n)?;
    let mut total = rgb.clone();
    let fields = bound_fields(model, params);
    let velocity = if weights.lambda_v > 0.0 {
        let pts: Vec<[f64; 3]> = batch.coords.clone();
        let s = velocity_reg_sum(g, &fields, &Tensor::from_rows(&pts), weights.alpha, laplacian_step(model))?;
        let v = g.scale(&s, 1.0 / (n * layers))?;
        let weighted = g.scale(&v, weights.lambda_v)?;
        total = g.add(&total, &weighted)?;
        Some(v)
    } else {
        None
    };
    let inertia = if weights.lambda_i > 0.0 && inertia_starts.rows() > 0 {
        let s = inertia_sum(g, &fields, inertia_starts, model.integrator.dt)?;
        let v = g.scale(&s, 1.0 / (inertia_starts.rows() as f64 * layers))?;
        let weighted = g.scale(&v, weights.lambda_i)?;
        total = g.add(&total, &weighted)?;
        Some(v)
    } else {
        None
    };
    Ok(LossTerms { total, rgb, velocity, inertia })
}

/// Mean per-pixel L1 colour error of the rendered video against the batch.
pub fn rgb_loss(model: &LayeredVideoModel, batch: &PixelBatch) -> Result<f64> {
    batch.validate()?;
    let mut g = Eager;
    let params = model.params.bind(&mut g);
    let s = rgb_l1_sum(&mut g, model, &params, &batch.groups())?;
    Ok(s.item() / batch.len() as f64)
}

pub fn velocity_reg(model: &LayeredVideoModel, sample_points: &[[f64; 3]], alpha: f64, fd_h: f64) -> Result<f64> {
    if sample_points.is_empty() {
        return Err(Error::invalid("velocity regularization needs sample points"));
    }
    let mut g = Eager;
    let params = model.params.bind(&mut g);
    let s = velocity_reg_sum(&mut g, &bound_fields(model, &params), &Tensor::from_rows(sample_points), alpha, fd_h)?;
    let v = s.item() / (sample_points.len() * model.num_layers()) as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite { what: "velocity regularization".into() });
    }
    Ok(v)
}

pub fn inertia_loss(model: &LayeredVideoModel, start_points: &[[f64; 2]]) -> Result<f64> {
    if start_points.is_empty() {
        return Err(Error::invalid("inertia loss needs start points"));
    }
    let mut g = Eager;
    let params = model.params.bind(&mut g);
    let s = inertia_sum(&mut g, &bound_fields(model, &params), &Tensor::from_rows(start_points), model.integrator.dt)?;
    Ok(s.item() / (start_points.len() * model.num_layers()) as f64)
}

/// Weighted loss with the velocity penalty at the batch coordinates and the
/// inertia term started from every distinct `(u, v)` in the batch.
pub fn total_loss(model: &LayeredVideoModel, batch: &PixelBatch, weights: &LossWeights) -> Result<LossBreakdown> {
    batch.validate()?;
    weights.validate()?;
    let rgb = rgb_loss(model, batch)?;
    let velocity = if weights.lambda_v > 0.0 {
        velocity_reg(model, &batch.coords, weights.alpha, laplacian_step(model))?
    } else {
        0.0
    };
    let inertia = if weights.lambda_i > 0.0 { inertia_loss(model, &batch.uv_projections())? } else { 0.0 };
    Ok(LossBreakdown::combine(rgb, velocity, inertia, weights))
}
