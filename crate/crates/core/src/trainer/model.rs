use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::compositor::BlendConfig;
use crate::error::{Error, Result};
use crate::image::PixelGrid;
use crate::motion::IntegratorConfig;
use crate::networks::{FrameNet, FrameNetConfig, VelocityNet, VelocityNetConfig};

/// Clip geometry and the affine time map between original and normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub width: usize,
    pub height: usize,
    pub time_min: f64,
    pub time_max: f64,
    /// Input frame times in original units.
    pub frame_times: Vec<f64>,
}

impl ClipMeta {
    pub fn grid(&self) -> PixelGrid {
        PixelGrid::new(self.width, self.height)
    }

    /// Maps an original timestamp to `[-1, 1]` (min → −1, max → +1).
    pub fn normalize_time(&self, t: f64) -> f64 {
        -1.0 + 2.0 * (t - self.time_min) / (self.time_max - self.time_min)
    }

    pub fn denormalize_time(&self, t: f64) -> f64 {
        self.time_min + (t + 1.0) / 2.0 * (self.time_max - self.time_min)
    }

    pub fn contains_time(&self, t: f64) -> bool {
        let eps = 1e-12 * (self.time_max - self.time_min).abs().max(1.0);
        t >= self.time_min - eps && t <= self.time_max + eps
    }
}

/// Architecture and rendering constants that fully determine a model's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub frame: FrameNetConfig,
    pub velocity: VelocityNetConfig,
    pub gamma: f64,
    pub dt: f64,
}

/// Frame network, per-layer velocity networks, and the constants tying them
/// into a renderable video.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredVideoModel {
    pub spec: ModelSpec,
    pub frame_net: FrameNet,
    pub velocity_nets: Vec<VelocityNet>,
    pub params: ParamStore,
    pub blend: BlendConfig,
    pub integrator: IntegratorConfig,
    pub meta: ClipMeta,
}

impl LayeredVideoModel {
    pub fn new(spec: ModelSpec, meta: ClipMeta, seed: u64) -> Result<Self> {
        if spec.num_layers == 0 {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        let blend = BlendConfig::new(spec.gamma)?;
        let integrator = IntegratorConfig::new(spec.dt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let frame_net = FrameNet::new(&spec.frame, spec.num_layers, &mut params, &mut rng);
        let velocity_nets =
            (0..spec.num_layers).map(|l| VelocityNet::new(&spec.velocity, l, &mut params, &mut rng)).collect();
        Ok(Self { spec, frame_net, velocity_nets, params, blend, integrator, meta })
    }

    pub fn num_layers(&self) -> usize {
        self.velocity_nets.len()
    }

    /// Overwrites every parameter from a name → tensor list, checking that the
    /// names and shapes match this model exactly.
    pub fn assign_params<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a crate::autodiff::Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in named {
            let id = self.params.find(name).ok_or_else(|| Error::Format(format!("unknown parameter `{}`", name)))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    name,
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing parameter `{}`", self.params.names()[missing])));
        }
        Ok(())
    }
}
