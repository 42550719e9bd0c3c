//! Camera discriminators, plain and centroid-conditioned.
//!
//! A conditional discriminator has two input branches of identical shape
//! (linear → batch-norm → ReLU), one for the sample feature and one for the
//! centroid of the sample's cluster. Branch outputs are merged and passed
//! through a hidden layer and a camera head. The conditioning input is always
//! detached from the tape: no gradient ever reaches whatever produced it.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, NamedTensor, ParamSet};
use crate::tape::{BatchStats, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Elementwise sum of the two branch outputs (width stays `hidden`).
    Sum,
    /// Concatenation (width `2 * hidden` into the hidden layer).
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub feature_dim: usize,
    /// Width of every hidden layer (1024 at full scale).
    pub hidden: usize,
    pub num_cameras: usize,
    pub conditional: bool,
    #[serde(default = "default_merge")]
    pub merge: MergeMode,
    /// Init gain of the camera head; small values start near a uniform prediction.
    #[serde(default = "default_head_gain")]
    pub head_gain: f64,
}

fn default_merge() -> MergeMode {
    MergeMode::Sum
}

fn default_head_gain() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug)]
struct Block {
    linear: Linear,
    norm: BatchNorm,
}

impl Block {
    fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            linear: Linear::new(
                params,
                &format!("{name}.fc"),
                input,
                output,
                2f64.sqrt(),
                rng,
            ),
            norm: BatchNorm::new(params, &format!("{name}.bn"), output),
        }
    }

    fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        x: Var,
        train: bool,
        stats: &mut Vec<(BatchNorm, BatchStats)>,
    ) -> Result<Var> {
        let h = self.linear.forward(params, tape, x)?;
        let (h, s) = self.norm.forward(params, tape, h, train)?;
        if let Some(s) = s {
            stats.push((self.norm, s));
        }
        Ok(tape.relu(h))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    feature_branch: Block,
    conditioning_branch: Option<Block>,
    merged: Block,
    head: Linear,
}

/// Result of a discriminator forward pass on the tape.
pub struct DiscriminatorPass {
    /// `batch × K` camera probabilities.
    pub probs: Var,
    /// The detached conditioning leaf, when conditional.
    pub conditioning: Option<Var>,
    /// Batch statistics to fold into running buffers after a training step.
    pub stats: Vec<(BatchNorm, BatchStats)>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.num_cameras < 2 {
            return Err(Error::Config(
                "a camera discriminator needs at least 2 cameras".into(),
            ));
        }
        if config.hidden == 0 || config.feature_dim == 0 {
            return Err(Error::Config(
                "discriminator widths must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (d, h) = (config.feature_dim, config.hidden);
        let feature_branch = Block::new(&mut params, "feature_branch", d, h, &mut rng);
        let conditioning_branch = config
            .conditional
            .then(|| Block::new(&mut params, "conditioning_branch", d, h, &mut rng));
        let merged_in = match (config.conditional, config.merge) {
            (true, MergeMode::Concat) => 2 * h,
            _ => h,
        };
        let merged = Block::new(&mut params, "merged", merged_in, h, &mut rng);
        let head = Linear::new(
            &mut params,
            "head",
            h,
            config.num_cameras,
            config.head_gain,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            feature_branch,
            conditioning_branch,
            merged,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn is_conditional(&self) -> bool {
        self.config.conditional
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zeroes the conditioning branch's linear layer.
    pub fn zero_conditioning(&mut self) {
        if let Some(b) = self.conditioning_branch {
            b.linear.zero(&mut self.params);
        }
    }

    /// Zeroes the camera head so every prediction is exactly uniform.
    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }

    /// Forward pass. `conditioning` must be present iff the discriminator is
    /// conditional; it is detached before use.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: Var,
        conditioning: Option<Var>,
        train: bool,
    ) -> Result<DiscriminatorPass> {
        let n = tape.value(features).nrows();
        if tape.value(features).ncols() != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "discriminator expects {} features, got {}",
                self.config.feature_dim,
                tape.value(features).ncols()
            )));
        }
        let p = &self.params;
        let mut stats = Vec::new();
        let f = self
            .feature_branch
            .forward(p, tape, features, train, &mut stats)?;
        let (merged_in, cond_leaf) = match (self.conditioning_branch, conditioning) {
            (Some(branch), Some(c)) => {
                if tape.value(c).dim() != (n, self.config.feature_dim) {
                    return Err(Error::invalid(format!(
                        "conditioning shape {:?}, expected ({n}, {})",
                        tape.value(c).dim(),
                        self.config.feature_dim
                    )));
                }
                let c = tape.detach(c);
                let g = branch.forward(p, tape, c, train, &mut stats)?;
                let m = match self.config.merge {
                    MergeMode::Sum => tape.add(f, g)?,
                    MergeMode::Concat => tape.concat_cols(f, g)?,
                };
                (m, Some(c))
            }
            (Some(_), None) => {
                return Err(Error::invalid(
                    "conditional discriminator called without conditioning",
                ))
            }
            (None, Some(_)) => {
                return Err(Error::invalid(
                    "plain discriminator called with conditioning",
                ))
            }
            (None, None) => (f, None),
        };
        let h = self.merged.forward(p, tape, merged_in, train, &mut stats)?;
        let logits = self.head.forward(p, tape, h)?;
        Ok(DiscriminatorPass {
            probs: tape.softmax(logits),
            conditioning: cond_leaf,
            stats,
        })
    }

    /// Camera probabilities for plain matrices.
    pub fn discriminate(
        &self,
        features: &Array2<f64>,
        conditioning: Option<&Array2<f64>>,
        train: bool,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let f = tape.leaf(features.clone());
        let c = conditioning.map(|c| tape.leaf(c.clone()));
        let pass = self.forward(&mut tape, f, c, train)?;
        Ok(tape.value(pass.probs).clone())
    }

    pub fn commit_stats(&mut self, stats: &[(BatchNorm, BatchStats)]) {
        for (norm, s) in stats {
            norm.update_running(&mut self.params, s);
        }
    }

    pub fn state(&self) -> DiscriminatorState {
        DiscriminatorState {
            config: self.config.clone(),
            params: self.params.params().to_vec(),
            buffers: self.params.buffers().to_vec(),
        }
    }

    pub fn from_state(state: &DiscriminatorState) -> Result<Self> {
        let mut d = Self::new(state.config.clone(), 0)?;
        d.params
            .load(&state.params, &state.buffers)
            .map_err(Error::Checkpoint)?;
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorState {
    pub config: DiscriminatorConfig,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

/// How the min-max objective is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Single backward pass: the feature path into the discriminator goes
    /// through a gradient-reversal node scaled by μ.
    GradientReversal,
    /// Discriminator step with the backbone frozen, then a backbone step on
    /// `ps_id − μ·adv` with the discriminator frozen.
    Alternating,
}

/// Feature input to the discriminator for the chosen routing.
///
/// * reversal: identity forward, `−μ` times the gradient backward;
/// * alternating discriminator step (`backbone_step = false`): detached;
/// * alternating backbone step: the raw feature (the caller scales the
///   adversarial loss by `−μ` and only updates the backbone).
pub fn route_features(
    tape: &mut Tape,
    features: Var,
    mode: RoutingMode,
    mu: f64,
    backbone_step: bool,
) -> Var {
    match (mode, backbone_step) {
        (RoutingMode::GradientReversal, _) => tape.grad_reverse(features, mu),
        (RoutingMode::Alternating, false) => tape.detach(features),
        (RoutingMode::Alternating, true) => features,
    }
}

/// Mean row entropy (nats) of a probability matrix.
pub fn mean_entropy(probs: &Array2<f64>) -> f64 {
    let n = probs.nrows().max(1) as f64;
    probs
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(conditional: bool, k: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            feature_dim: 4,
            hidden: 16,
            num_cameras: k,
            conditional,
            merge: MergeMode::Sum,
            head_gain: 0.01,
        }
    }

    fn features(n: usize, seed: u64) -> Array2<f64> {
        Array2::from_shape_fn((n, 4), |(i, j)| {
            (((i * 4 + j) as f64 + seed as f64) * 1.37).sin()
        })
    }

    #[test]
    fn outputs_are_stochastic_rows() {
        let d = Discriminator::new(config(true, 3), 1).unwrap();
        for train in [true, false] {
            let p = d
                .discriminate(&features(5, 0), Some(&features(5, 9)), train)
                .unwrap();
            assert_eq!(p.dim(), (5, 3));
            for r in p.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-5);
                assert!(r.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn zeroed_conditioning_branch_ignores_conditioning() {
        let mut d = Discriminator::new(config(true, 3), 2).unwrap();
        d.zero_conditioning();
        for train in [true, false] {
            let a = d
                .discriminate(&features(6, 0), Some(&features(6, 3)), train)
                .unwrap();
            let b = d
                .discriminate(&features(6, 0), Some(&features(6, 77)), train)
                .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn near_zero_head_is_near_uniform() {
        let d = Discriminator::new(config(false, 6), 3).unwrap();
        let p = d.discriminate(&features(8, 1), None, true).unwrap();
        let h = mean_entropy(&p);
        assert!((h - 6f64.ln()).abs() < 1e-3, "entropy {h}");
    }

    #[test]
    fn conditioning_presence_must_match() {
        let plain = Discriminator::new(config(false, 3), 1).unwrap();
        assert!(plain
            .discriminate(&features(2, 0), Some(&features(2, 0)), true)
            .is_err());
        let cond = Discriminator::new(config(true, 3), 1).unwrap();
        assert!(cond.discriminate(&features(2, 0), None, true).is_err());
        assert!(cond
            .discriminate(&features(2, 0), Some(&Array2::zeros((3, 4))), true)
            .is_err());
    }

    #[test]
    fn conditioning_input_receives_no_gradient() {
        let d = Discriminator::new(config(true, 3), 4).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(features(6, 0));
        let c = tape.leaf(features(6, 5));
        let pass = d.forward(&mut tape, f, Some(c), true).unwrap();
        let loss = tape.cross_entropy(pass.probs, &[0, 1, 2, 0, 1, 2]).unwrap();
        let g = tape.backward(loss);
        assert!(!g.reached(c));
        assert!(g.wrt(c).iter().all(|&x| x == 0.0));
        assert!(g.wrt(f).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn concat_merge_builds() {
        let mut cfg = config(true, 3);
        cfg.merge = MergeMode::Concat;
        let d = Discriminator::new(cfg, 1).unwrap();
        let p = d
            .discriminate(&features(4, 0), Some(&features(4, 1)), true)
            .unwrap();
        assert_eq!(p.dim(), (4, 3));
    }

    #[test]
    fn state_round_trip() {
        let d = Discriminator::new(config(true, 3), 5).unwrap();
        let r = Discriminator::from_state(&d.state()).unwrap();
        let x = features(3, 2);
        assert_eq!(
            d.discriminate(&x, Some(&x), false).unwrap(),
            r.discriminate(&x, Some(&x), false).unwrap()
        );
    }
}
