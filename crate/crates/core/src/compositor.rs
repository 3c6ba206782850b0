//! SoftMin pseudo-depth blending and frame rendering.
//!
//! Each layer contributes RGB weighted by `exp(−γ·D)`, normalized across
//! layers. The per-pixel minimum depth is subtracted before exponentiation;
//! the weights are invariant to a common depth offset, so this changes
//! nothing but the range of the exponent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph, Tensor};
use crate::error::{Error, Result};
use crate::image::{Image, PixelGrid};
use crate::motion::integrate_path;
use crate::networks::BoundVelocity;
use crate::trainer::LayeredVideoModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub gamma: f64,
}

impl BlendConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("blend gamma must be positive, got {}", gamma)));
        }
        Ok(Self { gamma })
    }
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { gamma: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSample {
    pub rgb: [f64; 3],
    pub depth: f64,
}

impl LayerSample {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0 && v < 1.0;
        if self.rgb.iter().all(|&v| ok(v)) && ok(self.depth) {
            Ok(())
        } else {
            Err(Error::invalid(format!("layer sample outside (0, 1): {:?}", self)))
        }
    }
}

/// Blended colour plus the per-layer quantities it was built from.
#[derive(Debug, Clone)]
pub struct Blended<V> {
    /// `[n, 3]`
    pub rgb: V,
    /// Per layer `[n, 1]`, summing to one across layers.
    pub weights: Vec<V>,
    /// Per layer `[n, 3]`
    pub layer_rgb: Vec<V>,
}

/// SoftMin blend of per-layer RGBD rows (`[n, 4]` each, depth in column 3).
pub fn blend_rgbd<G: Graph>(g: &mut G, rgbd: &[G::Value], gamma: f64) -> Result<Blended<G::Value>> {
    let first = rgbd.first().ok_or_else(|| Error::invalid("softmin blend needs at least one layer"))?;
    let n = g.value(first).rows();
    let mut rgb = Vec::with_capacity(rgbd.len());
    let mut depth = Vec::with_capacity(rgbd.len());
    for layer in rgbd {
        let shape = g.value(layer).shape();
        if shape != [n, 4] {
            return Err(Error::invalid(format!("layer RGBD must be [{}, 4], got {:?}", n, shape)));
        }
        rgb.push(g.slice_cols(layer, 0, 3)?);
        depth.push(g.slice_cols(layer, 3, 1)?);
    }
    let dmin: Vec<f64> = (0..n)
        .map(|r| depth.iter().map(|d| g.value(d).data()[r]).fold(f64::INFINITY, f64::min))
        .collect();
    let dmin = g.constant(Tensor::column(dmin));
    let mut expo = Vec::with_capacity(depth.len());
    for d in &depth {
        let shifted = g.sub(d, &dmin)?;
        let scaled = g.scale(&shifted, -gamma)?;
        expo.push(g.exp(&scaled)?);
    }
    let mut total = expo[0].clone();
    for e in &expo[1..] {
        total = g.add(&total, e)?;
    }
    let mut weights = Vec::with_capacity(expo.len());
    for e in &expo {
        weights.push(g.div(e, &total)?);
    }
    let mut out = g.mul(&rgb[0], &weights[0])?;
    for (c, w) in rgb.iter().zip(&weights).skip(1) {
        let term = g.mul(c, w)?;
        out = g.add(&out, &term)?;
    }
    Ok(Blended { rgb: out, weights, layer_rgb: rgb })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutput {
    pub rgb: Vec<[f64; 3]>,
    /// `weights[layer][row]`
    pub weights: Vec<Vec<f64>>,
}

/// Blends `samples[layer][row]` into one colour per row.
pub fn softmin_blend(samples: &[Vec<LayerSample>], cfg: &BlendConfig) -> Result<BlendOutput> {
    let n = samples.first().ok_or_else(|| Error::invalid("softmin blend needs at least one layer"))?.len();
    let mut g = Eager;
    let mut layers = Vec::with_capacity(samples.len());
    for layer in samples {
        if layer.len() != n {
            return Err(Error::invalid("all layers must hold the same number of samples"));
        }
        let mut rows = Vec::with_capacity(n * 4);
        for s in layer {
            s.validate()?;
            rows.extend_from_slice(&[s.rgb[0], s.rgb[1], s.rgb[2], s.depth]);
        }
        layers.push(g.constant(Tensor::matrix(n, 4, rows)));
    }
    let b = blend_rgbd(&mut g, &layers, cfg.gamma)?;
    Ok(BlendOutput {
        rgb: (0..n).map(|r| [b.rgb.get2(r, 0), b.rgb.get2(r, 1), b.rgb.get2(r, 2)]).collect(),
        weights: b.weights.iter().map(|w| w.data().to_vec()).collect(),
    })
}

/// Renders `[n, 2]` pixel coordinates observed at normalized time `t`:
/// each layer warps them to its canonical frame, evaluates RGBD there, and
/// the layers are blended.
pub fn render_points<G: Graph>(
    g: &mut G,
    model: &LayeredVideoModel,
    params: &[G::Value],
    uv: &G::Value,
    t: f64,
) -> Result<Blended<G::Value>> {
    let mut rgbd = Vec::with_capacity(model.num_layers());
    for (layer, vnet) in model.velocity_nets.iter().enumerate() {
        let field = BoundVelocity { net: vnet, params };
        let canonical = integrate_path(g, &field, uv, t, 0.0, model.integrator.dt, false)?.end;
        rgbd.push(model.frame_net.forward(g, params, layer, &canonical)?);
    }
    blend_rgbd(g, &rgbd, model.blend.gamma)
}

/// Rows rendered per eager evaluation.
const RENDER_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    /// Per-layer visibility, row-major `height × width`.
    pub visibility: Vec<Vec<f64>>,
    /// Per-layer `w_i · rgb_i`.
    pub layer_views: Vec<Image>,
}

fn check_render_time(t: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("render time {} lies outside [-1, 1]", t)));
    }
    Ok(())
}

/// Renders every pixel of `grid` at normalized time `t`.
pub fn render_frame_full(model: &LayeredVideoModel, t: f64, grid: &PixelGrid) -> Result<RenderedFrame> {
    check_render_time(t)?;
    let coords = grid.coords();
    let layers = model.num_layers();
    let mut image = Image::filled(grid.width, grid.height, 0.0);
    let mut visibility = vec![vec![0.0; coords.len()]; layers];
    let mut views = vec![Image::filled(grid.width, grid.height, 0.0); layers];
    let mut g = Eager;
    let params = model.params.bind(&mut g);
    for (chunk_idx, chunk) in coords.chunks(RENDER_CHUNK).enumerate() {
        let offset = chunk_idx * RENDER_CHUNK;
        let uv = g.constant(Tensor::from_rows(chunk));
        let b = render_points(&mut g, model, &params, &uv, t)?;
        image.data[offset * 3..(offset + chunk.len()) * 3].copy_from_slice(b.rgb.data());
        for l in 0..layers {
            let w = b.weights[l].data();
            visibility[l][offset..offset + chunk.len()].copy_from_slice(w);
            let rgb = b.layer_rgb[l].data();
            let view = &mut views[l].data[offset * 3..(offset + chunk.len()) * 3];
            for (r, &wr) in w.iter().enumerate() {
                for c in 0..3 {
                    view[r * 3 + c] = wr * rgb[r * 3 + c];
                }
            }
        }
    }
    Ok(RenderedFrame { image, visibility, layer_views: views })
}

/// Rendered image plus per-layer visibility maps.
pub fn render_frame(model: &LayeredVideoModel, t: f64, grid: &PixelGrid) -> Result<(Image, Vec<Vec<f64>>)> {
    let r = render_frame_full(model, t, grid)?;
    Ok((r.image, r.visibility))
}

/// Per-layer `w_i · rgb_i` images; they sum to the rendered frame.
pub fn layer_views(model: &LayeredVideoModel, t: f64, grid: &PixelGrid) -> Result<Vec<Image>> {
    Ok(render_frame_full(model, t, grid)?.layer_views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_multi, Tape};

    fn sample(rgb: [f64; 3], depth: f64) -> LayerSample {
        LayerSample { rgb, depth }
    }

    #[test]
    fn single_layer_passthrough() {
        let s = vec![vec![sample([0.2, 0.4, 0.9], 0.7), sample([0.5, 0.01, 0.3], 0.1)]];
        let out = softmin_blend(&s, &BlendConfig::default()).unwrap();
        assert_eq!(out.rgb, vec![[0.2, 0.4, 0.9], [0.5, 0.01, 0.3]]);
        assert_eq!(out.weights, vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn equal_depths_average() {
        let (a, b) = ([0.2, 0.4, 0.9], [0.6, 0.3, 0.15]);
        let s = vec![vec![sample(a, 0.4)], vec![sample(b, 0.4)]];
        let out = softmin_blend(&s, &BlendConfig::default()).unwrap();
        for c in 0..3 {
            assert_eq!(out.rgb[0][c], (a[c] + b[c]) / 2.0);
        }
    }

    #[test]
    fn two_layer_closed_form() {
        // Depths must lie in (0, 1); shift invariance lets (0.001, 0.999)
        // stand in for any pair one unit apart, so use the graph form for (0, 1).
        let mut g = Eager;
        let (c1, c2) = ([0.9, 0.1, 0.5], [0.2, 0.7, 0.3]);
        let l1 = g.constant(Tensor::from_rows(&[[c1[0], c1[1], c1[2], 0.0]]));
        let l2 = g.constant(Tensor::from_rows(&[[c2[0], c2[1], c2[2], 1.0]]));
        let b = blend_rgbd(&mut g, &[l1, l2], 5.0).unwrap();
        let e = (-5.0f64).exp();
        for c in 0..3 {
            let expect = (c1[c] + e * c2[c]) / (1.0 + e);
            assert!((b.rgb.get2(0, c) - expect).abs() < 1e-12);
        }
        assert!((b.weights[0].item() - 1.0 / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn weights_form_simplex_and_are_monotone() {
        let s = vec![
            vec![sample([0.2, 0.2, 0.2], 0.3), sample([0.2, 0.2, 0.2], 0.9)],
            vec![sample([0.5, 0.5, 0.5], 0.31), sample([0.5, 0.5, 0.5], 0.2)],
            vec![sample([0.7, 0.7, 0.7], 0.6), sample([0.5, 0.5, 0.5], 0.5)],
        ];
        let out = softmin_blend(&s, &BlendConfig::default()).unwrap();
        for r in 0..2 {
            let total: f64 = out.weights.iter().map(|w| w[r]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let mut closer = s.clone();
        closer[1][0].depth = 0.25;
        let out2 = softmin_blend(&closer, &BlendConfig::default()).unwrap();
        assert!(out2.weights[1][0] > out.weights[1][0]);
    }

    #[test]
    fn hard_min_limit_and_shift_invariance() {
        let s = vec![vec![sample([0.1, 0.2, 0.3], 0.7)], vec![sample([0.9, 0.8, 0.7], 0.5)]];
        let out = softmin_blend(&s, &BlendConfig::new(200.0).unwrap()).unwrap();
        assert!(out.weights[1][0] >= 1.0 - 1e-12);

        let shifted = vec![vec![sample([0.1, 0.2, 0.3], 0.45)], vec![sample([0.9, 0.8, 0.7], 0.25)]];
        let a = softmin_blend(&s, &BlendConfig::default()).unwrap();
        let b = softmin_blend(&shifted, &BlendConfig::default()).unwrap();
        for c in 0..3 {
            assert!((a.rgb[0][c] - b.rgb[0][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid() {
        assert!(softmin_blend(&[], &BlendConfig::default()).is_err());
        assert!(softmin_blend(&[vec![sample([0.1, 0.2, 1.2], 0.5)]], &BlendConfig::default()).is_err());
        assert!(BlendConfig::new(0.0).is_err());
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let rgbd = [
            Tensor::from_rows(&[[0.2, 0.4, 0.6, 0.3], [0.9, 0.1, 0.5, 0.8]]),
            Tensor::from_rows(&[[0.7, 0.3, 0.2, 0.5], [0.1, 0.6, 0.4, 0.2]]),
        ];
        let err = grad_check_multi(
            |tape: &mut Tape, vars| {
                let b = blend_rgbd(tape, vars, 5.0)?;
                let w = tape.constant(Tensor::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]]));
                let p = tape.mul(&b.rgb, &w)?;
                Ok::<_, Error>(tape.sum(&p)?)
            },
            &rgbd,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{}", err);
    }
}
