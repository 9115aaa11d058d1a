//! Small 3D U-Net: per-level double convolutions, max-pool down path,
//! nearest-neighbor up path with skip concatenation, 1x1x1 tanh head.
//!
//! Output spatial dims equal input dims, and the tanh head keeps values in
//! (-1, 1).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::checkpoint;
use crate::neural::tape::{Tape, Var};
use crate::neural::tensor::{Scalar, Tensor};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Resolution levels including the bottom; channels double per level.
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            levels: 2,
            base_channels: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Validation(format!("degenerate unet config {self:?}")));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by `2^(levels-1)` so every pooled
    /// level has integral dims.
    pub fn check_patch_dims(&self, dims: [usize; 3]) -> Result<()> {
        let div = 1usize << (self.levels - 1);
        if dims.iter().any(|&d| d % div != 0) {
            return Err(Error::Validation(format!(
                "patch dims {dims:?} not divisible by {div} required by {} levels",
                self.levels
            )));
        }
        Ok(())
    }
}

pub struct UNet<S: Scalar> {
    pub config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
}

fn he_uniform<S: Scalar>(dims: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(dims, limit, rng)
}

impl<S: Scalar> UNet<S> {
    /// He-uniform initialization from a per-model seed; biases start at zero.
    pub fn seeded(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(&[seed, 0x756e_6574]);
        let mut names = Vec::new();
        let mut params: Vec<Tensor<S>> = Vec::new();
        let mut push_conv = |names: &mut Vec<String>, params: &mut Vec<Tensor<S>>, tag: String, cin: usize, cout: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            names.push(format!("{tag}.w"));
            params.push(he_uniform(vec![cout, cin, k, k, k], cin * k * k * k, rng));
            names.push(format!("{tag}.b"));
            params.push(Tensor::zeros(vec![cout]));
        };
        let base = config.base_channels;
        for l in 0..config.levels {
            let cin = if l == 0 { config.in_channels } else { base << (l - 1) };
            let cout = base << l;
            push_conv(&mut names, &mut params, format!("enc{l}.c1"), cin, cout, 3, &mut rng);
            push_conv(&mut names, &mut params, format!("enc{l}.c2"), cout, cout, 3, &mut rng);
        }
        for l in (0..config.levels - 1).rev() {
            let skip = base << l;
            let below = base << (l + 1);
            push_conv(&mut names, &mut params, format!("dec{l}.c1"), skip + below, skip, 3, &mut rng);
            push_conv(&mut names, &mut params, format!("dec{l}.c2"), skip, skip, 3, &mut rng);
        }
        push_conv(&mut names, &mut params, "head".to_string(), base, 1, 1, &mut rng);
        Ok(Self { config, names, params })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    /// Places all parameters on a tape in declaration order.
    pub fn params_on_tape(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    /// Builds the forward graph from an input var using previously placed
    /// parameter vars. Input is `[B, in_channels, X, Y, Z]`.
    pub fn forward_from(&self, tape: &mut Tape<S>, x: Var, pvars: &[Var]) -> Result<Var> {
        let dims = tape.value(x).dims5()?;
        self.config.check_patch_dims([dims[2], dims[3], dims[4]])?;
        if dims[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, config expects {}",
                dims[1], self.config.in_channels
            )));
        }
        if pvars.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                pvars.len()
            )));
        }
        let mut next = pvars.iter().copied();
        let mut conv_relu = |tape: &mut Tape<S>, input: Var| -> Result<Var> {
            let w = next.next().expect("params exhausted");
            let b = next.next().expect("params exhausted");
            let c = tape.conv3d(input, w, b)?;
            tape.relu(c)
        };

        // Encoder; remember skip features per level above the bottom.
        let mut skips = Vec::with_capacity(self.config.levels - 1);
        let mut cur = x;
        for l in 0..self.config.levels {
            cur = conv_relu(tape, cur)?;
            cur = conv_relu(tape, cur)?;
            if l + 1 < self.config.levels {
                skips.push(cur);
                cur = tape.maxpool2(cur)?;
            }
        }
        // Decoder.
        for skip in skips.into_iter().rev() {
            let up = tape.upsample_nn2(cur)?;
            cur = tape.concat_channels(skip, up)?;
            cur = conv_relu(tape, cur)?;
            cur = conv_relu(tape, cur)?;
        }
        // Head: 1x1x1 conv + tanh.
        let w = next.next().expect("params exhausted");
        let b = next.next().expect("params exhausted");
        let logits = tape.conv3d(cur, w, b)?;
        tape.tanh(logits)
    }

    /// Inference convenience: fresh parameter leaves, no gradients.
    pub fn infer(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let pvars = self.params_on_tape(tape, false);
        self.forward_from(tape, x, &pvars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays: Vec<(String, Tensor<S>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        checkpoint::save_gnn1(path, &arrays)
    }

    pub fn load(path: &Path, config: UNetConfig) -> Result<Self> {
        let arrays = checkpoint::load_gnn1(path)?;
        let template = UNet::<S>::seeded(config, 0)?;
        if arrays.len() != template.names.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} arrays, config expects {}",
                arrays.len(),
                template.names.len()
            )));
        }
        let mut params = Vec::with_capacity(arrays.len());
        for ((name, tensor), expected_name) in arrays.into_iter().zip(template.names.iter()) {
            if &name != expected_name {
                return Err(Error::Format(format!(
                    "checkpoint array {name:?} does not match expected {expected_name:?}"
                )));
            }
            params.push(tensor.cast::<S>());
        }
        for (p, t) in params.iter().zip(template.params.iter()) {
            if p.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "checkpoint array dims {:?} do not match config dims {:?}",
                    p.dims(),
                    t.dims()
                )));
            }
        }
        Ok(Self {
            config,
            names: template.names,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_preserves_spatial_dims_and_range() {
        let net = UNet::<f32>::seeded(UNetConfig::default(), 9).unwrap();
        let mut tape = Tape::new();
        let mut rng = seeds::rng(&[1]);
        let x = tape.leaf(Tensor::uniform(vec![1, 1, 4, 8, 4], 1.0, &mut rng), false);
        let y = net.infer(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 4, 8, 4]);
        assert!(tape.value(y).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn odd_dims_are_rejected() {
        let net = UNet::<f32>::seeded(UNetConfig::default(), 9).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 3, 4, 4]), false);
        assert!(net.infer(&mut tape, x).is_err());
    }

    #[test]
    fn seeding_is_deterministic() {
        let a = UNet::<f32>::seeded(UNetConfig::default(), 42).unwrap();
        let b = UNet::<f32>::seeded(UNetConfig::default(), 42).unwrap();
        assert_eq!(a.params(), b.params());
        let c = UNet::<f32>::seeded(UNetConfig::default(), 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.gnn1");
        let net = UNet::<f32>::seeded(UNetConfig::default(), 5).unwrap();
        net.save(&p).unwrap();
        let loaded = UNet::<f32>::load(&p, UNetConfig::default()).unwrap();
        assert_eq!(net.params(), loaded.params());
    }

    #[test]
    fn three_level_net_builds_and_runs() {
        let cfg = UNetConfig {
            in_channels: 1,
            levels: 3,
            base_channels: 4,
        };
        let net = UNet::<f32>::seeded(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 8, 8, 8]), false);
        let y = net.infer(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 8, 8, 8]);
    }
}
