//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use layervid::autodiff::{analytic_gradients, grad_check_multi, AutodiffError, Graph, Tape, Tensor, Var};
use layervid::losses::{total_loss_graph, LossWeights, PixelBatch};
use layervid::networks::{FrameNetConfig, VelocityNetConfig};
use layervid::trainer::{ClipMeta, LayeredVideoModel, ModelSpec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const INSTANCES_PER_OP: usize = 10;

/// Gradient entries smaller than this make the relative metric meaningless
/// (the finite-difference noise floor is ~1e-10); such draws are redrawn.
const MIN_GRADIENT: f64 = 1e-2;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;

pub const OP_KINDS: [&str; 18] = [
    "affine", "matmul", "add", "sub", "mul", "div", "sin", "sigmoid", "exp", "square", "abs", "sum", "mean",
    "variance", "concat", "scale", "slice", "fourier",
];

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Magnitude in `[lo, hi]` with a random sign.
fn signed(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c).map(|_| rng.gen_range(lo..hi) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    )
}

/// `sum(weights ⊙ op(inputs))` with fixed positive weights, so every output
/// entry contributes to the gradient.
fn weighted(weights: Tensor, op: impl Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + 'static) -> OpFn {
    Box::new(move |tape: &mut Tape, vars: &[Var]| {
        let out = op(tape, vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(&out, &w)?;
        tape.sum(&prod)
    })
}

fn draw(kind: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, OpFn) {
    let n = rng.gen_range(2..=4);
    let m = rng.gen_range(2..=4);
    let w = |rng: &mut ChaCha8Rng, r: usize, c: usize| uniform(rng, r, c, 0.5, 1.5);
    match kind {
        "affine" => {
            let k = rng.gen_range(2..=4);
            let inputs = vec![uniform(rng, n, k, 0.2, 1.0), uniform(rng, k, m, 0.2, 1.0), uniform(rng, 1, m, -1.0, 1.0)];
            (inputs, weighted(w(rng, n, m), |t, v| t.affine(&v[0], &v[1], &v[2])))
        }
        "matmul" => {
            let k = rng.gen_range(2..=4);
            let inputs = vec![uniform(rng, n, k, 0.2, 1.0), uniform(rng, k, m, 0.2, 1.0)];
            (inputs, weighted(w(rng, n, m), |t, v| t.matmul(&v[0], &v[1])))
        }
        "add" | "sub" | "mul" | "div" => {
            // Second operand is full-size, a column or a row, to cover broadcasting.
            let (r2, c2) = [(n, m), (n, 1), (1, m)][rng.gen_range(0..3)];
            let a = signed(rng, n, m, 0.2, 1.0);
            let b = if kind == "div" { signed(rng, r2, c2, 0.5, 2.0) } else { signed(rng, r2, c2, 0.2, 1.0) };
            let weights = w(rng, n, m);
            let f: OpFn = match kind {
                "add" => weighted(weights, |t, v| t.add(&v[0], &v[1])),
                "sub" => weighted(weights, |t, v| t.sub(&v[0], &v[1])),
                "mul" => weighted(weights, |t, v| t.mul(&v[0], &v[1])),
                _ => weighted(weights, |t, v| t.div(&v[0], &v[1])),
            };
            (vec![a, b], f)
        }
        "sin" => (vec![uniform(rng, n, m, -1.0, 1.0)], weighted(w(rng, n, m), |t, v| t.sin(&v[0]))),
        "sigmoid" => (vec![uniform(rng, n, m, -2.0, 2.0)], weighted(w(rng, n, m), |t, v| t.sigmoid(&v[0]))),
        "exp" => (vec![uniform(rng, n, m, -1.0, 1.0)], weighted(w(rng, n, m), |t, v| t.exp(&v[0]))),
        "square" => (vec![signed(rng, n, m, 0.2, 1.0)], weighted(w(rng, n, m), |t, v| t.square(&v[0]))),
        "abs" => (vec![signed(rng, n, m, 0.2, 1.0)], weighted(w(rng, n, m), |t, v| t.abs(&v[0]))),
        "sum" => (vec![uniform(rng, n, m, -1.0, 1.0)], weighted(w(rng, 1, 1), |t, v| t.sum(&v[0]))),
        "mean" => (vec![uniform(rng, n, m, -1.0, 1.0)], weighted(w(rng, 1, 1), |t, v| t.mean(&v[0]))),
        "variance" => {
            let axis = rng.gen_range(0..2);
            let (r, c) = if axis == 0 { (1, m) } else { (n, 1) };
            (vec![uniform(rng, n, m, -1.0, 1.0)], weighted(w(rng, r, c), move |t, v| t.variance(&v[0], axis)))
        }
        "concat" => {
            let axis = rng.gen_range(0..2);
            let k = rng.gen_range(1..=3);
            let (b, out) = if axis == 0 { ((k, m), (n + k, m)) } else { ((n, k), (n, m + k)) };
            let inputs = vec![uniform(rng, n, m, -1.0, 1.0), uniform(rng, b.0, b.1, -1.0, 1.0)];
            (inputs, weighted(w(rng, out.0, out.1), move |t, v| t.concat(&[&v[0], &v[1]], axis)))
        }
        "scale" => {
            let factor = rng.gen_range(0.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (vec![uniform(rng, n, m, -1.0, 1.0)], weighted(w(rng, n, m), move |t, v| t.scale(&v[0], factor)))
        }
        "slice" => {
            let x = uniform(rng, n, m, -1.0, 1.0);
            if rng.gen_bool(0.5) {
                let len = rng.gen_range(1..=m);
                let start = rng.gen_range(0..=m - len);
                (vec![x], weighted(w(rng, n, len), move |t, v| t.slice_cols(&v[0], start, len)))
            } else {
                let len = rng.gen_range(1..=n);
                let start = rng.gen_range(0..=n - len);
                (vec![x], weighted(w(rng, len, m), move |t, v| t.slice_rows(&v[0], start, len)))
            }
        }
        "fourier" => {
            let d = rng.gen_range(1..=3);
            let bands = rng.gen_range(1..=3);
            (vec![uniform(rng, n, d, -1.0, 1.0)], weighted(w(rng, n, 2 * bands * d), move |t, v| t.fourier(&v[0], bands)))
        }
        other => panic!("unknown op kind {}", other),
    }
}

/// Worst relative error over `INSTANCES_PER_OP` random instances of `kind`.
pub fn op_grad_error(kind: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    while accepted < INSTANCES_PER_OP {
        let (inputs, f) = draw(kind, &mut rng);
        let g = analytic_gradients::<AutodiffError>(&f, &inputs).expect("evaluable");
        if g.iter().flat_map(|t| t.data()).any(|v| v.abs() < MIN_GRADIENT) {
            continue;
        }
        accepted += 1;
        worst = worst.max(grad_check_multi::<AutodiffError>(&f, &inputs, FD_STEP).expect("evaluable"));
    }
    worst
}

/// 2-layer model with ≤ 500 parameters, non-zero motion, and a 16-pixel batch
/// drawn from a 4×4 clip at two times.
pub fn toy_problem() -> (LayeredVideoModel, PixelBatch, Tensor, LossWeights) {
    let spec = ModelSpec {
        num_layers: 2,
        frame: FrameNetConfig { bands: 1, trunk_layers: 1, head_layers: 1, width: 8, omega0: 3.0 },
        velocity: VelocityNetConfig { bands: 1, hidden_layers: 1, width: 6, omega0: 1.0 },
        gamma: 5.0,
        dt: 0.2,
    };
    let meta = ClipMeta { width: 4, height: 4, time_min: 0.0, time_max: 1.0, frame_times: vec![0.0, 1.0] };
    let mut model = LayeredVideoModel::new(spec, meta, 5).unwrap();
    // The velocity output layer starts at zero; give it some motion.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for name in model.params.names().to_vec() {
        if name.starts_with("velocity") && name.contains("out") {
            let id = model.params.find(&name).unwrap();
            let t = model.params.get_mut(id);
            let shape = t.shape().to_vec();
            let n: usize = shape.iter().product();
            *t = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.4..0.4)).collect()).unwrap();
        }
    }
    let grid = model.meta.grid();
    let coords = grid.coords();
    let mut batch = PixelBatch { coords: Vec::new(), target_rgb: Vec::new() };
    for (i, c) in coords.iter().enumerate() {
        let t = if i % 2 == 0 { -1.0 } else { 1.0 };
        batch.coords.push([c[0], c[1], t]);
        batch.target_rgb.push([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
    }
    let starts = Tensor::from_rows(&coords[..6].iter().map(|c| [c[0], c[1]]).collect::<Vec<_>>());
    (model, batch, starts, LossWeights { lambda_v: 0.5, lambda_i: 0.5, alpha: 0.5 })
}

/// Relative gradient error of the full training loss of [`toy_problem`],
/// with the parameter count.
pub fn toy_loss_grad_error() -> (f64, usize) {
    let (model, batch, starts, weights) = toy_problem();
    let points: Vec<Tensor> = model.params.tensors().to_vec();
    let f = |tape: &mut Tape, vars: &[Var]| -> layervid::Result<Var> {
        Ok(total_loss_graph(tape, &model, vars, &batch, &starts, &weights)?.total)
    };
    let err = grad_check_multi(f, &points, FD_STEP).unwrap();
    (err, model.params.scalar_count())
}

/// Vertex count of the longest path, by exhaustive DFS from every node.
pub fn brute_longest(n: usize, edges: &[(usize, usize)]) -> usize {
    fn dfs(v: usize, adj: &[Vec<usize>]) -> usize {
        1 + adj[v].iter().map(|&w| dfs(w, adj)).max().unwrap_or(0)
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    (0..n).map(|v| dfs(v, &adj)).max().unwrap_or(0)
}

/// Checks `min_layers_for_dag` on every DAG with up to `max_nodes` nodes:
/// each subset of forward edges of a topological order, relabeled by a
/// seeded permutation so the utility never sees nodes in sorted order.
/// Returns the number of graphs checked.
pub fn exhaustive_dag_check(max_nodes: usize) -> Result<usize, String> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    for n in 0..=max_nodes {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        for mask in 0u64..(1 << pairs.len()) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let edges: Vec<(usize, usize)> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &(a, b))| (perm[a], perm[b]))
                .collect();
            let expected = brute_longest(n, &edges);
            let got = layervid::video_io::min_layers_for_dag(n, &edges).map_err(|e| e.to_string())?;
            if got != expected {
                return Err(format!("{} nodes, edges {:?}: got {}, expected {}", n, edges, got, expected));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Two-frame `linear_square` clip at 16×16.
pub fn small_clip(frames: usize) -> layervid::trainer::VideoClip {
    use layervid::video_io::{generate_scene, SceneKind, SyntheticScene};
    let scene = SyntheticScene::new(SceneKind::LinearSquare, (16, 16), 7);
    let g = generate_scene(&scene, frames, (16, 16)).unwrap();
    layervid::trainer::normalize_clip(g.frames, &g.times).unwrap()
}

/// Tiny networks so a few epochs take milliseconds.
pub fn small_config(frames: usize, epochs: u64) -> layervid::trainer::TrainConfig {
    let mut c = layervid::trainer::TrainConfig::for_frames(frames);
    c.num_layers = 2;
    c.epochs = epochs;
    c.batch_size = 96;
    c.seed = 3;
    c.frame = FrameNetConfig { bands: 2, trunk_layers: 1, head_layers: 1, width: 16, omega0: 10.0 };
    c.velocity = VelocityNetConfig { bands: 1, hidden_layers: 1, width: 8, omega0: 1.0 };
    c.inertia_samples = 32;
    c.chunk_rows = 40;
    c
}
