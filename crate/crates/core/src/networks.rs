//! Coordinate networks: the RGBD frame network with a shared trunk and
//! per-layer heads, and the per-layer velocity network.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Sine/cosine features `sin(2^k π p_j)`, `cos(2^k π p_j)` for `k < num_bands`.
///
/// Output order is band-major: for band `k`, the `d` sines followed by the
/// `d` cosines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierEncoding {
    pub num_bands: usize,
    pub input_dim: usize,
}

impl FourierEncoding {
    pub fn new(num_bands: usize, input_dim: usize) -> Self {
        Self { num_bands, input_dim }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.num_bands * self.input_dim
    }

    pub fn encode(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "fourier encoding expects dimension {}, got {}",
                self.input_dim,
                point.len()
            )));
        }
        let mut g = Eager;
        let x = g.constant(Tensor::matrix(1, point.len(), point.to_vec()));
        Ok(self.apply(&mut g, &x)?.data().to_vec())
    }

    pub fn apply<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        if g.value(x).cols() != self.input_dim {
            return Err(Error::invalid(format!(
                "fourier encoding expects {} columns, got {:?}",
                self.input_dim,
                g.value(x).shape()
            )));
        }
        Ok(g.fourier(x, self.num_bands)?)
    }
}

/// Indices of one affine map `x·W + b` inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn apply<G: Graph>(&self, g: &mut G, params: &[G::Value], x: &G::Value) -> Result<G::Value> {
        Ok(g.affine(x, &params[self.weight.0], &params[self.bias.0])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// First sinusoidal layer: `U(-1/fan_in, 1/fan_in)`.
    First,
    /// Deeper sinusoidal layers with unit frequency: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    Hidden,
    Zero,
}

fn linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Linear {
    let bound = match init {
        Init::First => 1.0 / fan_in as f64,
        Init::Hidden => (6.0 / fan_in as f64).sqrt(),
        Init::Zero => 0.0,
    };
    let bias_bound = if init == Init::Zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
    let mut draw = |n: usize, b: f64| -> Vec<f64> {
        (0..n).map(|_| if b == 0.0 { 0.0 } else { rng.gen_range(-b..b) }).collect()
    };
    let w = draw(fan_in * fan_out, bound);
    let b = draw(fan_out, bias_bound);
    Linear {
        weight: store.push(format!("{}.weight", name), Tensor::matrix(fan_in, fan_out, w)),
        bias: store.push(format!("{}.bias", name), Tensor::matrix(1, fan_out, b)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameNetConfig {
    pub bands: usize,
    pub trunk_layers: usize,
    pub head_layers: usize,
    pub width: usize,
    pub omega0: f64,
}

impl Default for FrameNetConfig {
    fn default() -> Self {
        Self { bands: 6, trunk_layers: 3, head_layers: 2, width: 128, omega0: 30.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityNetConfig {
    pub bands: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub omega0: f64,
}

impl Default for VelocityNetConfig {
    fn default() -> Self {
        Self { bands: 4, hidden_layers: 4, width: 64, omega0: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHead {
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

/// Canonical RGBD frames for all layers.
///
/// Hidden layers compute `sin(ω·(x·W + b))` with `ω = omega0` on the first
/// trunk layer and `ω = 1` elsewhere; each head ends in an affine map to four
/// channels followed by a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameNet {
    pub encoding: FourierEncoding,
    pub omega0: f64,
    pub trunk: Vec<Linear>,
    pub heads: Vec<FrameHead>,
}

impl FrameNet {
    pub fn new(cfg: &FrameNetConfig, num_layers: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let encoding = FourierEncoding::new(cfg.bands, 2);
        let mut fan_in = encoding.output_dim();
        let mut trunk = Vec::with_capacity(cfg.trunk_layers);
        for k in 0..cfg.trunk_layers {
            let init = if k == 0 { Init::First } else { Init::Hidden };
            trunk.push(linear(store, rng, &format!("frame.trunk.{}", k), fan_in, cfg.width, init));
            fan_in = cfg.width;
        }
        let trunk_out = fan_in;
        let heads = (0..num_layers)
            .map(|layer| {
                let mut fan_in = trunk_out;
                let mut hidden = Vec::with_capacity(cfg.head_layers);
                for k in 0..cfg.head_layers {
                    let init = if k == 0 && cfg.trunk_layers == 0 { Init::First } else { Init::Hidden };
                    hidden.push(linear(store, rng, &format!("frame.head{}.{}", layer, k), fan_in, cfg.width, init));
                    fan_in = cfg.width;
                }
                let output = linear(store, rng, &format!("frame.head{}.out", layer), fan_in, 4, Init::Hidden);
                FrameHead { hidden, output }
            })
            .collect();
        Self { encoding, omega0: cfg.omega0, trunk, heads }
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    fn sine_layer<G: Graph>(&self, g: &mut G, params: &[G::Value], lin: &Linear, x: &G::Value, first: bool) -> Result<G::Value> {
        let pre = lin.apply(g, params, x)?;
        let pre = if first && self.omega0 != 1.0 { g.scale(&pre, self.omega0)? } else { pre };
        Ok(g.sin(&pre)?)
    }

    /// Shared trunk features for canonical coordinates `[n, 2]`.
    pub fn trunk_features<G: Graph>(&self, g: &mut G, params: &[G::Value], coords: &G::Value) -> Result<G::Value> {
        let mut h = self.encoding.apply(g, coords)?;
        for (k, lin) in self.trunk.iter().enumerate() {
            h = self.sine_layer(g, params, lin, &h, k == 0)?;
        }
        Ok(h)
    }

    /// RGBD `[n, 4]` for one layer given trunk features.
    pub fn head<G: Graph>(&self, g: &mut G, params: &[G::Value], layer: usize, features: &G::Value) -> Result<G::Value> {
        let head = self
            .heads
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {} out of range ({} layers)", layer, self.heads.len())))?;
        let mut h = features.clone();
        for (k, lin) in head.hidden.iter().enumerate() {
            h = self.sine_layer(g, params, lin, &h, k == 0 && self.trunk.is_empty())?;
        }
        let out = head.output.apply(g, params, &h)?;
        Ok(g.sigmoid(&out)?)
    }

    pub fn forward<G: Graph>(&self, g: &mut G, params: &[G::Value], layer: usize, coords: &G::Value) -> Result<G::Value> {
        if layer >= self.heads.len() {
            return Err(Error::invalid(format!("layer {} out of range ({} layers)", layer, self.heads.len())));
        }
        let features = self.trunk_features(g, params, coords)?;
        self.head(g, params, layer, &features)
    }

    pub fn trunk_param_count(&self, store: &ParamStore) -> usize {
        self.trunk.iter().map(|l| store.get(l.weight).len() + store.get(l.bias).len()).sum()
    }

    pub fn head_param_count(&self, store: &ParamStore, layer: usize) -> usize {
        let h = &self.heads[layer];
        h.hidden.iter().chain(std::iter::once(&h.output)).map(|l| store.get(l.weight).len() + store.get(l.bias).len()).sum()
    }
}

/// Velocity field `V(u, v, t) -> (du/dt, dv/dt)` for one layer.
///
/// The final affine map starts at zero, so a fresh network describes the
/// identity motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityNet {
    pub encoding: FourierEncoding,
    pub omega0: f64,
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl VelocityNet {
    pub fn new(cfg: &VelocityNetConfig, layer: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let encoding = FourierEncoding::new(cfg.bands, 3);
        let mut fan_in = encoding.output_dim();
        let mut hidden = Vec::with_capacity(cfg.hidden_layers);
        for k in 0..cfg.hidden_layers {
            let init = if k == 0 { Init::First } else { Init::Hidden };
            hidden.push(linear(store, rng, &format!("velocity{}.{}", layer, k), fan_in, cfg.width, init));
            fan_in = cfg.width;
        }
        let output = linear(store, rng, &format!("velocity{}.out", layer), fan_in, 2, Init::Zero);
        Self { encoding, omega0: cfg.omega0, hidden, output }
    }

    /// Velocities `[n, 2]` for points `[n, 3]` laid out as `(u, v, t)`.
    pub fn forward<G: Graph>(&self, g: &mut G, params: &[G::Value], points: &G::Value) -> Result<G::Value> {
        let mut h = self.encoding.apply(g, points)?;
        for (k, lin) in self.hidden.iter().enumerate() {
            let pre = lin.apply(g, params, &h)?;
            let pre = if k == 0 && self.omega0 != 1.0 { g.scale(&pre, self.omega0)? } else { pre };
            h = g.sin(&pre)?;
        }
        self.output.apply(g, params, &h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.hidden.iter().chain(std::iter::once(&self.output)).flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Anything that can produce velocities for `(u, v, t)` rows on a graph.
pub trait VelocityField<G: Graph> {
    fn velocity(&self, g: &mut G, points: &G::Value) -> Result<G::Value>;
}

/// A velocity network paired with parameter values bound on a graph.
pub struct BoundVelocity<'a, G: Graph> {
    pub net: &'a VelocityNet,
    pub params: &'a [G::Value],
}

impl<G: Graph> VelocityField<G> for BoundVelocity<'_, G> {
    fn velocity(&self, g: &mut G, points: &G::Value) -> Result<G::Value> {
        self.net.forward(g, self.params, points)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.to_string() })
    }
}

/// RGBD values for canonical coordinates `[n, 2]` on one layer.
pub fn frame_forward(net: &FrameNet, store: &ParamStore, layer: usize, coords: &Tensor) -> Result<Tensor> {
    check_finite(coords, "frame coordinates")?;
    let mut g = Eager;
    let params = store.bind(&mut g);
    let x = g.constant(coords.clone());
    Ok(net.forward(&mut g, &params, layer, &x)?.as_ref().clone())
}

/// Velocities for `(u, v, t)` rows `[n, 3]`.
pub fn velocity_forward(net: &VelocityNet, store: &ParamStore, points: &Tensor) -> Result<Tensor> {
    check_finite(points, "velocity query points")?;
    let mut g = Eager;
    let params = store.bind(&mut g);
    let x = g.constant(points.clone());
    Ok(net.forward(&mut g, &params, &x)?.as_ref().clone())
}

/// Time slices at which spatial Lipschitz ratios are sampled.
pub const LIPSCHITZ_TIMES: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
const LIPSCHITZ_PROBE: f64 = 1e-3;
const LIPSCHITZ_SEED: u64 = 0x11f5_c3a7;

/// Empirical lower bound on the spatial Lipschitz constant of a field.
///
/// Spatial sample points come from a fixed pseudo-random sequence, so the
/// point set for `n` samples is a prefix of the set for `n + 1`. Ratios are
/// taken over all pairs of sample points and over each point paired with
/// small offsets along `u` and `v`, at every time in [`LIPSCHITZ_TIMES`].
pub fn estimate_lipschitz_field<F: VelocityField<Eager>>(field: &F, domain_samples: usize) -> Result<f64> {
    if domain_samples < 2 {
        return Err(Error::invalid("estimate_lipschitz needs at least 2 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(LIPSCHITZ_SEED);
    let pts: Vec<[f64; 2]> = (0..domain_samples).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let mut best: f64 = 0.0;
    let mut g = Eager;
    for &t in &LIPSCHITZ_TIMES {
        // Rows: base points, then +du probes, then +dv probes.
        let mut rows = Vec::with_capacity(3 * domain_samples * 3);
        for offset in [[0.0, 0.0], [LIPSCHITZ_PROBE, 0.0], [0.0, LIPSCHITZ_PROBE]] {
            for p in &pts {
                rows.extend_from_slice(&[p[0] + offset[0], p[1] + offset[1], t]);
            }
        }
        let x = g.constant(Tensor::matrix(3 * domain_samples, 3, rows));
        let v = field.velocity(&mut g, &x)?;
        check_finite(&v, "velocity")?;
        let n = domain_samples;
        let vel = |i: usize| [v.get2(i, 0), v.get2(i, 1)];
        let ratio = |a: [f64; 2], b: [f64; 2], pa: [f64; 2], pb: [f64; 2]| {
            let dv = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            let dp = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
            if dp > 0.0 {
                dv / dp
            } else {
                0.0
            }
        };
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.max(ratio(vel(i), vel(j), pts[i], pts[j]));
            }
            let p = pts[i];
            best = best.max(ratio(vel(i), vel(n + i), p, [p[0] + LIPSCHITZ_PROBE, p[1]]));
            best = best.max(ratio(vel(i), vel(2 * n + i), p, [p[0], p[1] + LIPSCHITZ_PROBE]));
        }
    }
    Ok(best)
}

pub fn estimate_lipschitz(net: &VelocityNet, store: &ParamStore, domain_samples: usize) -> Result<f64> {
    let mut g = Eager;
    let params = store.bind(&mut g);
    estimate_lipschitz_field(&BoundVelocity { net, params: &params }, domain_samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_multi, Tape};

    fn small_frame(layers: usize) -> (FrameNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FrameNetConfig { bands: 3, trunk_layers: 2, head_layers: 1, width: 8, omega0: 30.0 };
        (FrameNet::new(&cfg, layers, &mut store, &mut rng), store)
    }

    fn small_velocity() -> (VelocityNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = VelocityNetConfig { bands: 2, hidden_layers: 2, width: 6, omega0: 1.0 };
        (VelocityNet::new(&cfg, 0, &mut store, &mut rng), store)
    }

    #[test]
    fn fourier_closed_forms() {
        let enc = FourierEncoding::new(2, 2);
        let out = enc.encode(&[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);

        let out = FourierEncoding::new(1, 1).encode(&[0.5]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && out[1].abs() < 1e-15);

        assert_eq!(FourierEncoding::new(6, 2).encode(&[0.3, -0.7]).unwrap().len(), 24);
        assert!(FourierEncoding::new(6, 2).encode(&[0.3]).is_err());
    }

    #[test]
    fn frame_outputs_are_open_unit_interval() {
        let (net, store) = small_frame(2);
        let coords = Tensor::from_rows(&[[0.0, 0.0], [0.9, -0.4], [-3.0, 2.5], [0.1, 0.2]]);
        for layer in 0..2 {
            let out = frame_forward(&net, &store, layer, &coords).unwrap();
            assert_eq!(out.shape(), &[4, 4]);
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(frame_forward(&net, &store, 2, &coords).is_err());
        let bad = Tensor::from_rows(&[[f64::NAN, 0.0]]);
        assert!(frame_forward(&net, &store, 0, &bad).is_err());
    }

    #[test]
    fn zeroed_output_map_gives_half() {
        let (net, mut store) = small_frame(1);
        let out = net.heads[0].output;
        store.get_mut(out.weight).data_mut().fill(0.0);
        store.get_mut(out.bias).data_mut().fill(0.0);
        let coords = Tensor::from_rows(&[[0.2, 0.3], [-0.5, 0.9]]);
        let rgbd = frame_forward(&net, &store, 0, &coords).unwrap();
        assert!(rgbd.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn heads_are_disjoint() {
        let (net, mut store) = small_frame(3);
        let coords = Tensor::from_rows(&[[0.2, 0.3], [-0.5, 0.9]]);
        let before: Vec<_> = (0..3).map(|l| frame_forward(&net, &store, l, &coords).unwrap()).collect();
        let h1 = net.heads[1].clone();
        for lin in h1.hidden.iter().chain(std::iter::once(&h1.output)) {
            store.get_mut(lin.weight).data_mut().iter_mut().for_each(|w| *w += 0.1);
        }
        let after: Vec<_> = (0..3).map(|l| frame_forward(&net, &store, l, &coords).unwrap()).collect();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn shared_trunk_parameter_count() {
        let (net, store) = small_frame(3);
        let total = net.trunk_param_count(&store) + 3 * net.head_param_count(&store, 0);
        assert_eq!(total, store.scalar_count());
    }

    #[test]
    fn sine_activation_probe() {
        // One-neuron trunk without heads' hidden layers: output pre-sigmoid
        // is w_out·sin(ω0·(w·enc + b)) + b_out.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FrameNetConfig { bands: 1, trunk_layers: 1, head_layers: 0, width: 1, omega0: 30.0 };
        let net = FrameNet::new(&cfg, 1, &mut store, &mut rng);
        let w = store.get(net.trunk[0].weight).data().to_vec();
        let b = store.get(net.trunk[0].bias).item();
        let wo = store.get(net.heads[0].output.weight).data().to_vec();
        let bo = store.get(net.heads[0].output.bias).data().to_vec();
        let p = [0.3, -0.2];
        let enc = net.encoding.encode(&p).unwrap();
        let pre: f64 = enc.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
        let hidden = (30.0 * pre).sin();
        let out = frame_forward(&net, &store, 0, &Tensor::from_rows(&[p])).unwrap();
        for c in 0..4 {
            let expect = crate::autodiff::kernels::sigmoid(wo[c] * hidden + bo[c]);
            assert!((out.data()[c] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn fresh_velocity_is_zero_and_deterministic() {
        let (net, store) = small_velocity();
        let pts = Tensor::from_rows(&[[0.1, 0.2, -1.0], [0.9, -0.9, 0.5]]);
        let v = velocity_forward(&net, &store, &pts).unwrap();
        assert_eq!(v.shape(), &[2, 2]);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(estimate_lipschitz(&net, &store, 8).unwrap(), 0.0);
        let bad = Tensor::from_rows(&[[f64::INFINITY, 0.0, 0.0]]);
        assert!(velocity_forward(&net, &store, &bad).is_err());
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }

    #[test]
    fn velocity_norm_gradient_matches_finite_differences() {
        let (net, mut store) = small_velocity();
        randomize(&mut store, 11);
        let pts = Tensor::from_rows(&[[0.1, 0.2, -1.0], [0.7, -0.3, 0.25]]);
        let err = grad_check_multi(
            |tape: &mut Tape, vars| {
                let x = tape.constant(pts.clone());
                let v = net.forward(tape, vars, &x)?;
                let sq = tape.square(&v)?;
                Ok::<_, Error>(tape.sum(&sq)?)
            },
            store.tensors(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{}", err);
    }

    #[test]
    fn lipschitz_is_monotone_in_samples() {
        let (net, mut store) = small_velocity();
        randomize(&mut store, 2);
        let mut prev = 0.0;
        for n in [2, 4, 8, 16, 32] {
            let l = estimate_lipschitz(&net, &store, n).unwrap();
            assert!(l >= prev);
            prev = l;
        }
        assert!(prev > 0.0);
        assert!(estimate_lipschitz(&net, &store, 1).is_err());
    }

    struct LinearField(f64);

    impl<G: Graph> VelocityField<G> for LinearField {
        fn velocity(&self, g: &mut G, points: &G::Value) -> Result<G::Value> {
            let uv = g.slice_cols(points, 0, 2)?;
            Ok(g.scale(&uv, self.0)?)
        }
    }

    #[test]
    fn lipschitz_of_linear_field() {
        for a in [0.5, -2.0, 3.25] {
            let l = estimate_lipschitz_field(&LinearField(a), 16).unwrap();
            assert!(l <= a.abs() * (1.0 + 1e-9), "{} vs {}", l, a);
            assert!((l - a.abs()).abs() < 1e-6 * a.abs(), "{} vs {}", l, a);
        }
    }
}
