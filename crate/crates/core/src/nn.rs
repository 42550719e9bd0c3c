//! Parameter storage, the handful of layers the models need, and optimizers.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{BatchStats, ConvGeometry, Gradients, ParamKey, Tape, TapeError, Var};

static NEXT_OWNER: AtomicU64 = AtomicU64::new(1);

fn next_owner() -> u64 {
    NEXT_OWNER.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Array2<f64>,
}

/// Trainable tensors plus non-trainable buffers (batch-norm running stats)
/// belonging to one model. The owner id is unique per constructed set and is
/// what ties tape gradients back to this set.
#[derive(Clone, Debug)]
pub struct ParamSet {
    owner: u64,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            owner: next_owner(),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn owner(&self) -> u64 {
        self.owner
    }

    /// Gives this set a fresh identity; used when a copy must train independently.
    pub fn reidentify(&mut self) {
        self.owner = next_owner();
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.params.push(NamedTensor {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    /// Replaces a tensor, possibly with a new shape.
    pub fn replace(&mut self, index: usize, value: Array2<f64>) {
        self.params[index].value = value;
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.buffers.push(NamedTensor {
            name: name.into(),
            value,
        });
        self.buffers.len() - 1
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            owner: self.owner,
            index,
        }
    }

    pub fn get(&self, index: usize) -> &Array2<f64> {
        &self.params[index].value
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.params[index].value
    }

    pub fn buffer(&self, index: usize) -> &Array2<f64> {
        &self.buffers[index].value
    }

    pub fn buffer_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.buffers[index].value
    }

    pub fn bind(&self, tape: &mut Tape, index: usize) -> Var {
        tape.param(self.key(index), self.params[index].value.clone())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    /// Overwrites values by name; every stored tensor must be present with a matching shape.
    pub fn load(&mut self, params: &[NamedTensor], buffers: &[NamedTensor]) -> Result<(), String> {
        fn fill(dst: &mut [NamedTensor], src: &[NamedTensor]) -> Result<(), String> {
            for t in dst.iter_mut() {
                let found = src
                    .iter()
                    .find(|s| s.name == t.name)
                    .ok_or_else(|| format!("missing tensor {}", t.name))?;
                if found.value.dim() != t.value.dim() {
                    return Err(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        t.name,
                        found.value.dim(),
                        t.value.dim()
                    ));
                }
                t.value = found.value.clone();
            }
            Ok(())
        }
        fill(&mut self.params, params)?;
        fill(&mut self.buffers, buffers)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// He-style normal initialization scaled by `gain / sqrt(fan_in)`.
pub fn init_normal(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    gain: f64,
) -> Array2<f64> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            init_normal(rng, in_dim, out_dim, in_dim, gain),
        );
        let bias = params.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, params: &ParamSet, tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
        let w = params.bind(tape, self.weight);
        let b = params.bind(tape, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).fill(0.0);
        params.get_mut(self.bias).fill(0.0);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = params.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        let running_mean =
            params.add_buffer(format!("{name}.running_mean"), Array2::zeros((1, dim)));
        let running_var = params.add_buffer(format!("{name}.running_var"), Array2::ones((1, dim)));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training mode returns the batch statistics so the caller can fold them
    /// into the running buffers once the step is committed.
    pub fn forward(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats>), TapeError> {
        let gamma = params.bind(tape, self.gamma);
        let beta = params.bind(tape, self.beta);
        if train {
            let (y, stats) = tape.batch_norm(x, gamma, beta, self.eps)?;
            Ok((y, Some(stats)))
        } else {
            let mean: Array1<f64> = params.buffer(self.running_mean).row(0).to_owned();
            let var: Array1<f64> = params.buffer(self.running_var).row(0).to_owned();
            let y = tape.normalize(x, gamma, beta, &mean, &var, self.eps)?;
            Ok((y, None))
        }
    }

    pub fn update_running(&self, params: &mut ParamSet, stats: &BatchStats) {
        let m = self.momentum;
        {
            let rm = params.buffer_mut(self.running_mean);
            for (r, s) in rm.iter_mut().zip(stats.mean.iter()) {
                *r = (1.0 - m) * *r + m * s;
            }
        }
        let rv = params.buffer_mut(self.running_var);
        for (r, s) in rv.iter_mut().zip(stats.var.iter()) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new(params: &mut ParamSet, name: &str, geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let (rows, cols) = geom.weight_shape();
        let weight = params.add(
            format!("{name}.weight"),
            init_normal(rng, rows, cols, cols, 2f64.sqrt()),
        );
        let bias = params.add(
            format!("{name}.bias"),
            Array2::zeros((1, geom.out_channels)),
        );
        Self { weight, bias, geom }
    }

    pub fn forward(&self, params: &ParamSet, tape: &mut Tape, x: Var) -> Result<Var, TapeError> {
        let w = params.bind(tape, self.weight);
        let b = params.bind(tape, self.bias);
        tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step {
        every: usize,
        gamma: f64,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            name: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            name: OptimizerKind::Sgd,
            learning_rate,
            momentum,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Optimizer state for one [`ParamSet`]. Slots are keyed by parameter index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Option<Array2<f64>>>,
    second: Vec<Option<Array2<f64>>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Forgets moment estimates for the given slots (after a head is reallocated).
    pub fn reset_slots(&mut self, slots: &[usize]) {
        for &i in slots {
            if let Some(m) = self.first.get_mut(i) {
                *m = None;
            }
            if let Some(v) = self.second.get_mut(i) {
                *v = None;
            }
        }
    }

    /// Applies one update to every parameter of `params` that received a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, epoch: usize) {
        let lr = self.config.schedule.rate(self.config.learning_rate, epoch);
        self.step += 1;
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        for index in 0..params.len() {
            let Some(g) = grads.param(params.key(index)) else {
                continue;
            };
            let mut g = g.clone();
            if self.config.weight_decay != 0.0 {
                g.scaled_add(self.config.weight_decay, params.get(index));
            }
            match self.config.name {
                OptimizerKind::Sgd => {
                    let update = if self.config.momentum != 0.0 {
                        let buf = self.first[index].get_or_insert_with(|| Array2::zeros(g.dim()));
                        buf.mapv_inplace(|v| v * self.config.momentum);
                        *buf += &g;
                        buf.clone()
                    } else {
                        g
                    };
                    params.get_mut(index).scaled_add(-lr, &update);
                }
                OptimizerKind::Adam => {
                    let m = self.first[index].get_or_insert_with(|| Array2::zeros(g.dim()));
                    m.zip_mut_with(&g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                    let v = self.second[index].get_or_insert_with(|| Array2::zeros(g.dim()));
                    v.zip_mut_with(&g, |v, &g| {
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g
                    });
                    let t = self.step as i32;
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let m = self.first[index].as_ref().expect("set above");
                    let v = self.second[index].as_ref().expect("set above");
                    let p = params.get_mut(index);
                    ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                    });
                }
            }
        }
    }
}
