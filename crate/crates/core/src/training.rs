//! Source pre-training and the alternating cluster / fine-tune loop on the
//! unlabeled target set.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, DiscriminatorConfig, MergeMode, RoutingMode};
use crate::data::{DatasetSplit, SyntheticSpec, UnlabeledSplit};
use crate::embedding::{
    eval_features, BackboneConfig, Branch, EmbeddingConfig, EmbeddingModel, EvalFeatureMode,
    FeatureSource, ModelPair, ModelState,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    camera_probe_accuracy, cluster_quality, mutual_information_masked, retrieve_and_score,
    ClusterQuality, DiagnosticRecord, DiagnosticSeries, RetrievalResult,
};
use crate::nn::{Optimizer, OptimizerConfig};
use crate::objectives::{
    mmt_composition, single_composition, ssg_composition, AdversarialMode, LossValue, Objective,
    ObjectiveWeights, Phase, PseudoBatch, DEFAULT_MARGIN,
};
use crate::pseudo::{cluster_epoch, lost_ids, ClusterParams, DbscanParams, PseudoLabeling};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Single,
    Ssg,
    Mmt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSettings {
    pub hidden: usize,
    #[serde(default = "default_merge")]
    pub merge: MergeMode,
    #[serde(default = "default_head_gain")]
    pub head_gain: f64,
}

fn default_merge() -> MergeMode {
    MergeMode::Sum
}

fn default_head_gain() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub feature_mode: EvalFeatureMode,
}

/// Where the source and target splits come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataRef {
    /// Generated on the fly.
    Synthetic { spec: SyntheticSpec },
    /// Directories of images named by the default re-ID layout.
    Directory {
        train: std::path::PathBuf,
        #[serde(default)]
        gallery: Option<std::path::PathBuf>,
        #[serde(default)]
        query: Option<std::path::PathBuf>,
    },
    /// Splits materialized by the `synth` command.
    Splits { dir: std::path::PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataRef,
    pub target: DataRef,
}

/// Every hyperparameter of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: AdversarialMode,
    pub composition: Composition,
    pub routing: RoutingMode,
    pub mu: f64,
    pub lambda: f64,
    pub margin: f64,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations_per_epoch: Option<usize>,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub model: EmbeddingConfig,
    pub discriminator: DiscriminatorSettings,
    pub clustering: ClusterParams,
    pub optimizer: OptimizerConfig,
    pub discriminator_optimizer: OptimizerConfig,
    pub pretrain: PretrainSettings,
    pub evaluation: EvalSettings,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Small synthetic setup that runs in seconds.
    pub fn toy() -> Self {
        let target = SyntheticSpec {
            num_identities: 16,
            num_cameras: 4,
            samples_per_id: 8,
            id_dim: 16,
            camera_shift_scale: 2.0,
            correlation: 0.9,
            noise_sigma: 0.3,
            seed: 0,
            eval_samples_per_id: Some(4),
        };
        let source = SyntheticSpec {
            correlation: 0.0,
            seed: 1000,
            ..target.clone()
        };
        Self {
            mode: AdversarialMode::Canu,
            composition: Composition::Single,
            routing: RoutingMode::GradientReversal,
            mu: 0.1,
            lambda: 1.0,
            margin: DEFAULT_MARGIN,
            epochs: 4,
            iterations_per_epoch: Some(20),
            seed: 0,
            sampler: SamplerConfig { p: 4, k: 4 },
            model: EmbeddingConfig {
                backbone: BackboneConfig::Mlp {
                    input_dim: 16,
                    hidden: 32,
                    map_height: 2,
                },
                feature_dim: 16,
                num_source_ids: None,
            },
            discriminator: DiscriminatorSettings {
                hidden: 32,
                merge: MergeMode::Sum,
                head_gain: 0.01,
            },
            clustering: ClusterParams::Dbscan(DbscanParams {
                eps_percentile: 3.0,
                ..DbscanParams::default()
            }),
            optimizer: OptimizerConfig::adam(3.5e-4),
            discriminator_optimizer: OptimizerConfig::adam(3.5e-4),
            pretrain: PretrainSettings {
                steps: 200,
                lambda: 1.0,
                optimizer: OptimizerConfig::adam(3.5e-4),
            },
            evaluation: EvalSettings {
                feature_mode: EvalFeatureMode::FlipSumConcat,
            },
            data: DataConfig {
                source: DataRef::Synthetic { spec: source },
                target: DataRef::Synthetic { spec: target },
            },
        }
    }

    /// Toy setup where identities are strongly tied to cameras and camera
    /// shifts are large enough to pull clusters apart by camera.
    pub fn correlated_toy() -> Self {
        let mut cfg = Self::toy();
        if let DataRef::Synthetic { spec } = &mut cfg.data.target {
            spec.samples_per_id = 32;
            spec.camera_shift_scale = 5.0;
        }
        cfg.mu = 1.0;
        cfg.epochs = 10;
        cfg.iterations_per_epoch = Some(40);
        cfg.clustering = ClusterParams::Kmeans(crate::pseudo::KmeansParams {
            k: 16,
            max_iter: 100,
            normalize: true,
        });
        cfg.optimizer = OptimizerConfig::adam(1e-3);
        cfg.discriminator_optimizer = OptimizerConfig::adam(1e-3);
        cfg
    }

    /// Same config with every seed (training and data) moved to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataRef::Synthetic { spec } = &mut self.data.source {
            spec.seed = 1000 + seed;
        }
        if let DataRef::Synthetic { spec } = &mut self.data.target {
            spec.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return fail(format!(
                "mu must be a finite non-negative number, got {}",
                self.mu
            ));
        }
        if !(self.lambda >= 0.0) || !(self.margin >= 0.0) {
            return fail("lambda and margin must be non-negative".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return fail("iterations_per_epoch must be positive when set".into());
        }
        if self.sampler.p < 2 || self.sampler.k < 2 {
            return fail(
                "sampler needs p >= 2 and k >= 2 so every anchor has a positive and a negative"
                    .into(),
            );
        }
        if self.model.feature_dim == 0 || self.discriminator.hidden == 0 {
            return fail("feature_dim and discriminator.hidden must be positive".into());
        }
        for (name, o) in [
            ("optimizer", &self.optimizer),
            ("discriminator_optimizer", &self.discriminator_optimizer),
            ("pretrain.optimizer", &self.pretrain.optimizer),
        ] {
            if !(o.learning_rate > 0.0) {
                return fail(format!("{name}.learning_rate must be positive"));
            }
        }
        if let ClusterParams::Dbscan(p) = &self.clustering {
            if !(p.eps_percentile > 0.0 && p.eps_percentile <= 100.0)
                || p.min_pts == 0
                || !(p.relax_factor > 1.0)
            {
                return fail(
                    "dbscan needs 0 < eps_percentile <= 100, min_pts >= 1, relax_factor > 1".into(),
                );
            }
        }
        for r in [&self.data.source, &self.data.target] {
            if let DataRef::Synthetic { spec } = r {
                spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda: self.lambda,
            margin: self.margin,
            mu: self.mu,
        }
    }
}

const STREAM_MODEL: u64 = 1;
const STREAM_DISCRIMINATOR: u64 = 2;
const STREAM_SAMPLER: u64 = 3;
const STREAM_HEAD: u64 = 4;
const STREAM_CLUSTER: u64 = 5;
const STREAM_PRETRAIN: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A seed for one named random stream at one position (e.g. epoch, step).
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    splitmix(
        splitmix(splitmix(seed ^ splitmix(stream)) ^ a) ^ b.wrapping_mul(0x2545_F491_4F6C_DD1D),
    )
}

fn stream_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, a, b))
}

/// Seed used to initialize model number `index` of a run.
pub fn model_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, STREAM_MODEL, index, 0)
}

/// Draws a P×K batch from labelled groups: P distinct groups (all of them
/// when fewer exist), K members each, with replacement only for groups
/// smaller than K. Returns sample indices and their group labels.
pub fn sample_pk(
    rng: &mut ChaCha8Rng,
    groups: &[(usize, Vec<usize>)],
    sampler: SamplerConfig,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let usable: Vec<&(usize, Vec<usize>)> = groups.iter().filter(|(_, m)| !m.is_empty()).collect();
    if usable.len() < 2 {
        return Err(Error::invalid(format!(
            "P×K sampling needs at least 2 non-empty groups, got {}",
            usable.len()
        )));
    }
    let p = sampler.p.min(usable.len());
    let mut chosen = sample(rng, usable.len(), p).into_vec();
    chosen.sort_unstable();
    let mut indices = Vec::with_capacity(p * sampler.k);
    let mut labels = Vec::with_capacity(p * sampler.k);
    for g in chosen {
        let (label, members) = usable[g];
        if members.len() >= sampler.k {
            for m in sample(rng, members.len(), sampler.k) {
                indices.push(members[m]);
            }
        } else {
            for _ in 0..sampler.k {
                indices.push(members[rng.random_range(0..members.len())]);
            }
        }
        labels.extend(std::iter::repeat_n(*label, sampler.k));
    }
    Ok((indices, labels))
}

/// Resumable state of source pre-training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainState {
    pub model: ModelState,
    pub optimizer: Optimizer,
    pub step: usize,
}

/// Step-wise trainer of the feature extractor and identity classifier on a
/// labelled source split.
pub struct Pretrainer {
    model: EmbeddingModel,
    optimizer: Optimizer,
    step: usize,
    inputs: Array2<f64>,
    groups: Vec<(usize, Vec<usize>)>,
    settings: PretrainSettings,
    sampler: SamplerConfig,
    margin: f64,
    seed: u64,
}

impl Pretrainer {
    pub fn new(
        model: EmbeddingModel,
        source: &DatasetSplit,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let optimizer = Optimizer::new(cfg.pretrain.optimizer);
        Self::build(model, optimizer, 0, source, cfg)
    }

    pub fn resume(
        state: &PretrainState,
        source: &DatasetSplit,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let model = EmbeddingModel::from_state(&state.model)?;
        Self::build(model, state.optimizer.clone(), state.step, source, cfg)
    }

    fn build(
        model: EmbeddingModel,
        optimizer: Optimizer,
        step: usize,
        source: &DatasetSplit,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let classes = source_classes(source)?;
        if classes.len() < 2 {
            return Err(Error::invalid(format!(
                "source pre-training needs at least 2 identities, got {}",
                classes.len()
            )));
        }
        match model.config().num_source_ids {
            Some(m) if m == classes.len() => {}
            other => {
                return Err(Error::invalid(format!(
                    "identity classifier has {other:?} outputs, source has {} identities",
                    classes.len()
                )))
            }
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in source.samples().iter().enumerate() {
            let id = s.person_id.expect("source samples carry identities");
            by_class.entry(classes[&id]).or_default().push(i);
        }
        Ok(Self {
            inputs: model.input_matrix(source.samples())?,
            model,
            optimizer,
            step,
            groups: by_class.into_iter().collect(),
            settings: cfg.pretrain,
            sampler: cfg.sampler,
            margin: cfg.margin,
            seed: cfg.seed,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn into_model(self) -> EmbeddingModel {
        self.model
    }

    pub fn state(&self) -> PretrainState {
        PretrainState {
            model: self.model.state(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }

    /// Runs one optimization step and returns the loss before the update.
    pub fn step(&mut self) -> Result<LossValue> {
        let mut rng = stream_rng(self.seed, STREAM_PRETRAIN, self.step as u64, 0);
        let (idx, labels) = sample_pk(&mut rng, &self.groups, self.sampler)?;
        let mut tape = Tape::new();
        let x = tape.leaf(self.inputs.select(Axis(0), &idx));
        let vars = self.model.forward(&mut tape, x)?;
        let f = vars.branch(Branch::Full);
        let probs = self.model.id_probs(&mut tape, f)?;
        let ce = tape.cross_entropy(probs, &labels)?;
        let mut parts = vec![crate::objectives::LossPart {
            name: "ce".into(),
            weight: 1.0,
            value: tape.scalar(ce),
        }];
        let total = if self.settings.lambda != 0.0 {
            let tri = tape.triplet_batch_hard(f, &labels, self.margin)?;
            parts.push(crate::objectives::LossPart {
                name: "triplet".into(),
                weight: self.settings.lambda,
                value: tape.scalar(tri),
            });
            let scaled = tape.scale(tri, self.settings.lambda);
            tape.add(ce, scaled)?
        } else {
            ce
        };
        let grads = tape.backward(total);
        self.optimizer.step(self.model.params_mut(), &grads, 0);
        self.step += 1;
        Ok(LossValue::from_parts(parts))
    }
}

/// Dense class index per source identity, in ascending identity order.
pub fn source_classes(source: &DatasetSplit) -> Result<BTreeMap<u32, usize>> {
    let mut ids = std::collections::BTreeSet::new();
    for (i, s) in source.samples().iter().enumerate() {
        ids.insert(
            s.person_id
                .ok_or_else(|| Error::invalid(format!("source sample {i} has no identity")))?,
        );
    }
    Ok(ids.into_iter().enumerate().map(|(c, id)| (id, c)).collect())
}

/// Builds a fresh model sized for `source` and pre-trains it for
/// `cfg.pretrain.steps` steps. `on_step` sees every step's loss.
pub fn pretrain_source(
    source: &DatasetSplit,
    cfg: &ExperimentConfig,
    mut on_step: impl FnMut(usize, &LossValue),
) -> Result<EmbeddingModel> {
    let mut mc = cfg.model.clone();
    mc.num_source_ids = Some(source_classes(source)?.len());
    let model = EmbeddingModel::new(mc, model_seed(cfg.seed, 0))?;
    let mut trainer = Pretrainer::new(model, source, cfg)?;
    while trainer.steps_done() < cfg.pretrain.steps {
        let loss = trainer.step()?;
        on_step(trainer.steps_done() - 1, &loss);
    }
    Ok(trainer.into_model())
}

/// The adapted feature extractor(s).
#[derive(Clone, Debug)]
pub enum Models {
    Single(EmbeddingModel),
    Pair(ModelPair),
}

impl Models {
    /// Starting point for adaptation from a pre-trained model. The second
    /// model of a pair is an independent copy.
    pub fn from_pretrained(model: &EmbeddingModel, composition: Composition) -> Result<Self> {
        Ok(match composition {
            Composition::Mmt => {
                let mut second = model.clone();
                second.reidentify();
                Models::Pair(ModelPair::new(model.clone(), second)?)
            }
            _ => Models::Single(model.clone()),
        })
    }

    pub fn source(&self) -> FeatureSource<'_> {
        match self {
            Models::Single(m) => FeatureSource::Single(m),
            Models::Pair(p) => FeatureSource::Pair(p),
        }
    }

    pub fn all(&self) -> Vec<&EmbeddingModel> {
        match self {
            Models::Single(m) => vec![m],
            Models::Pair(p) => p.models().to_vec(),
        }
    }
}

/// Target data for adaptation and evaluation.
#[derive(Clone, Debug)]
pub struct TargetData {
    pub train: UnlabeledSplit,
    pub gallery: DatasetSplit,
    pub query: DatasetSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingSummary {
    pub clusters: usize,
    pub outliers: usize,
    pub eps: Option<f64>,
}

/// Everything recorded about one adaptation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mode: AdversarialMode,
    pub composition: Composition,
    pub mu: f64,
    /// Mean over the epoch's iterations of every recorded loss scalar.
    pub losses: BTreeMap<String, f64>,
    pub labeling: BTreeMap<Branch, LabelingSummary>,
    pub diagnostics: DiagnosticRecord,
    pub quality: Option<ClusterQuality>,
    pub iterations: usize,
    /// Why fine-tuning was skipped this epoch, if it was.
    pub skipped: Option<String>,
    pub wall_time_secs: f64,
}

impl EpochReport {
    /// Every logged scalar except wall time, in a fixed order.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .losses
            .iter()
            .map(|(k, v)| (format!("loss.{k}"), *v))
            .collect();
        for (b, s) in &self.labeling {
            out.push((format!("labeling.{b}.clusters"), s.clusters as f64));
            out.push((format!("labeling.{b}.outliers"), s.outliers as f64));
            out.push((format!("labeling.{b}.eps"), s.eps.unwrap_or(f64::NAN)));
        }
        let d = &self.diagnostics;
        out.push(("mi".into(), d.mutual_information_nats));
        out.push(("lost_ids".into(), d.lost_ids as f64));
        out.push(("cluster_count".into(), d.cluster_count as f64));
        out.push(("camera_probe".into(), d.camera_accuracy_probe));
        if let Some(q) = self.quality {
            out.push(("purity".into(), q.purity));
            out.push(("nmi".into(), q.nmi));
        }
        out.push(("iterations".into(), self.iterations as f64));
        out
    }
}

/// Clustering diagnostics of the adapted model(s) after the last epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalDiagnostics {
    pub mutual_information_nats: f64,
    pub quality: Option<ClusterQuality>,
    pub lost_ids: usize,
    pub cluster_count: usize,
}

pub struct AdaptOutcome {
    pub models: Models,
    pub reports: Vec<EpochReport>,
    pub diagnostics: DiagnosticSeries,
    pub final_diagnostics: Option<FinalDiagnostics>,
}

/// What a step hook sees after each optimization step.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub models: &'a Models,
    /// Training-split rows used per branch batch.
    pub batches: &'a BTreeMap<Branch, Vec<usize>>,
    pub labelings: &'a BTreeMap<Branch, PseudoLabeling>,
    pub objective: &'a LossValue,
}

struct DiscriminatorSet {
    discs: Vec<Discriminator>,
    optimizers: Vec<Optimizer>,
}

fn build_discriminators(
    cfg: &ExperimentConfig,
    num_cameras: usize,
) -> Result<Option<DiscriminatorSet>> {
    if !cfg.mode.uses_discriminator() {
        return Ok(None);
    }
    let count = match cfg.composition {
        Composition::Single => 1,
        Composition::Ssg => 3,
        Composition::Mmt => 2,
    };
    let mut discs = Vec::with_capacity(count);
    for i in 0..count {
        discs.push(Discriminator::new(
            DiscriminatorConfig {
                feature_dim: cfg.model.feature_dim,
                hidden: cfg.discriminator.hidden,
                num_cameras,
                conditional: cfg.mode.conditional(),
                merge: cfg.discriminator.merge,
                head_gain: cfg.discriminator.head_gain,
            },
            derive_seed(cfg.seed, STREAM_DISCRIMINATOR, i as u64, 0),
        )?);
    }
    Ok(Some(DiscriminatorSet {
        optimizers: (0..count)
            .map(|_| Optimizer::new(cfg.discriminator_optimizer))
            .collect(),
        discs,
    }))
}

/// Eval-mode clustering features per branch clustered this epoch.
fn clustering_features(
    models: &Models,
    train: &UnlabeledSplit,
    composition: Composition,
) -> Result<BTreeMap<Branch, Array2<f64>>> {
    match (composition, models) {
        (Composition::Ssg, Models::Single(m)) => m.embed_all(train.samples()),
        _ => {
            let f = eval_features(models.source(), train.samples(), EvalFeatureMode::Raw)?;
            Ok(BTreeMap::from([(Branch::Full, f)]))
        }
    }
}

fn epoch_diagnostics(
    labeling: &PseudoLabeling,
    features: &Array2<f64>,
    train: &UnlabeledSplit,
    epoch: usize,
) -> Result<(DiagnosticRecord, Option<ClusterQuality>)> {
    let cameras = train.cameras();
    let mi = if labeling.num_assigned() > 0 {
        mutual_information_masked(&labeling.assignments, &cameras)?
    } else {
        0.0
    };
    let diag = train.diagnostics();
    let has_ids = diag.len() == train.len();
    let record = DiagnosticRecord {
        epoch,
        mutual_information_nats: mi,
        lost_ids: if has_ids {
            lost_ids(labeling, diag)?
        } else {
            0
        },
        cluster_count: labeling.num_clusters(),
        camera_accuracy_probe: camera_probe_accuracy(features, &cameras)?,
    };
    let quality = if has_ids && labeling.num_assigned() > 0 {
        Some(cluster_quality(labeling, diag)?)
    } else {
        None
    };
    Ok((record, quality))
}

fn cluster_all(
    feats: &BTreeMap<Branch, Array2<f64>>,
    cfg: &ExperimentConfig,
    epoch: usize,
) -> Result<BTreeMap<Branch, PseudoLabeling>> {
    let mut out = BTreeMap::new();
    for (b, f) in feats {
        let seed = derive_seed(cfg.seed, STREAM_CLUSTER, epoch as u64, *b as u64);
        out.insert(*b, cluster_epoch(f, &cfg.clustering, epoch, *b, seed)?);
    }
    Ok(out)
}

#[derive(Default)]
struct LossAccumulator {
    sums: BTreeMap<String, f64>,
    count: usize,
}

impl LossAccumulator {
    fn add(&mut self, key: String, v: f64) {
        *self.sums.entry(key).or_insert(0.0) += v;
    }

    fn record(&mut self, obj: &Objective, generator: bool, discriminator: bool) {
        if generator {
            self.add("generator".into(), obj.generator.value);
            for p in &obj.generator.parts {
                if !p.name.starts_with("adv") {
                    self.add(p.name.clone(), p.value);
                }
            }
            for (k, v) in &obj.details {
                self.add(k.clone(), *v);
            }
        }
        if discriminator {
            if let Some(d) = &obj.discriminator {
                self.add("discriminator".into(), d.value);
                for p in &d.parts {
                    self.add(p.name.clone(), p.value);
                }
            }
        }
    }

    fn means(self) -> BTreeMap<String, f64> {
        let n = self.count.max(1) as f64;
        self.sums.into_iter().map(|(k, v)| (k, v / n)).collect()
    }
}

/// Builds one branch's batch: P×K over that branch's clusters, restricted to
/// samples that are assigned both there and in the full-body labeling.
fn branch_batch(
    rng: &mut ChaCha8Rng,
    branch: Branch,
    labelings: &BTreeMap<Branch, PseudoLabeling>,
    inputs: &Array2<f64>,
    cameras: &[usize],
    sampler: SamplerConfig,
) -> Result<PseudoBatch> {
    let own = &labelings[&branch];
    let full = &labelings[&Branch::Full];
    let mut groups: Vec<(usize, Vec<usize>)> =
        (0..own.num_clusters()).map(|k| (k, Vec::new())).collect();
    for (i, a) in own.assignments.iter().enumerate() {
        if let (Some(k), Some(_)) = (a, full.assignments[i]) {
            groups[*k].1.push(i);
        }
    }
    let (idx, labels) = sample_pk(rng, &groups, sampler)?;
    let centroids = full
        .centroids_for(&idx)?
        .into_iter()
        .map(|c| c.expect("filtered to assigned samples"))
        .collect::<Vec<_>>();
    let d = full.centroids.ncols();
    let mut cm = Array2::zeros((idx.len(), d));
    for (i, c) in centroids.iter().enumerate() {
        cm.row_mut(i)
            .assign(&ndarray::ArrayView1::from(c.as_slice()));
    }
    Ok(PseudoBatch {
        input: inputs.select(Axis(0), &idx),
        labels,
        cameras: idx.iter().map(|&i| cameras[i]).collect(),
        centroids: Some(cm),
        sample_indices: idx,
    })
}

/// Alternates clustering of the target training set and adversarial
/// fine-tuning for `cfg.epochs` epochs.
pub fn adapt_target(
    models: Models,
    target: &TargetData,
    cfg: &ExperimentConfig,
) -> Result<AdaptOutcome> {
    adapt_target_with(models, target, cfg, |_| {})
}

/// [`adapt_target`] with a hook called after every optimization step.
pub fn adapt_target_with(
    mut models: Models,
    target: &TargetData,
    cfg: &ExperimentConfig,
    mut hook: impl FnMut(&StepInfo<'_>),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    match (&models, cfg.composition) {
        (Models::Pair(p), Composition::Mmt) => p.check_independent()?,
        (Models::Single(_), Composition::Single | Composition::Ssg) => {}
        _ => {
            return Err(Error::Config(
                "model count does not match the composition".into(),
            ))
        }
    }
    let train = &target.train;
    let cameras = train.cameras();
    let inputs = models.all()[0].input_matrix(train.samples())?;
    let mut discs = build_discriminators(cfg, train.num_cameras())?;
    let mut model_opts: Vec<Optimizer> = models
        .all()
        .iter()
        .map(|_| Optimizer::new(cfg.optimizer))
        .collect();
    let weights = cfg.weights();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut series = DiagnosticSeries::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let feats = clustering_features(&models, train, cfg.composition)?;
        let labelings = match cluster_all(&feats, cfg, epoch) {
            Ok(l) => l,
            Err(Error::NoClusters { eps }) => {
                log::warn!("epoch {epoch}: clustering found nothing even at eps={eps:.5}; skipping fine-tuning");
                let empty = PseudoLabeling::from_assignments(
                    &feats[&Branch::Full],
                    vec![None; train.len()],
                    epoch,
                    Branch::Full,
                    true,
                )?;
                let (record, _) = epoch_diagnostics(&empty, &feats[&Branch::Full], train, epoch)?;
                series.push(record.clone())?;
                reports.push(EpochReport {
                    epoch,
                    mode: cfg.mode,
                    composition: cfg.composition,
                    mu: cfg.mu,
                    losses: BTreeMap::new(),
                    labeling: BTreeMap::new(),
                    diagnostics: record,
                    quality: None,
                    iterations: 0,
                    skipped: Some(format!("no clusters at eps={eps}")),
                    wall_time_secs: started.elapsed().as_secs_f64(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let full = &labelings[&Branch::Full];
        let (record, quality) = epoch_diagnostics(full, &feats[&Branch::Full], train, epoch)?;
        series.push(record.clone())?;
        let summary: BTreeMap<Branch, LabelingSummary> = labelings
            .iter()
            .map(|(b, l)| {
                (
                    *b,
                    LabelingSummary {
                        clusters: l.num_clusters(),
                        outliers: l.num_outliers(),
                        eps: l.eps,
                    },
                )
            })
            .collect();
        log::info!(
            "epoch {epoch}: {} clusters, {} outliers, MI(pseudo; camera) = {:.4}",
            full.num_clusters(),
            full.num_outliers(),
            record.mutual_information_nats
        );

        let mut report = EpochReport {
            epoch,
            mode: cfg.mode,
            composition: cfg.composition,
            mu: cfg.mu,
            losses: BTreeMap::new(),
            labeling: summary,
            diagnostics: record,
            quality,
            iterations: 0,
            skipped: None,
            wall_time_secs: 0.0,
        };
        if labelings.values().any(|l| l.num_clusters() < 2) {
            report.skipped = Some("fewer than 2 clusters".into());
            report.wall_time_secs = started.elapsed().as_secs_f64();
            reports.push(report);
            continue;
        }

        // fresh pseudo-identity heads every epoch
        if cfg.composition != Composition::Ssg {
            let classes = full.num_clusters();
            let heads: Vec<&mut EmbeddingModel> = match &mut models {
                Models::Single(m) => vec![m],
                Models::Pair(p) => vec![&mut p.model_1, &mut p.model_2],
            };
            for (i, (m, opt)) in heads.into_iter().zip(model_opts.iter_mut()).enumerate() {
                let slots = m.reset_pseudo_head(
                    classes,
                    derive_seed(cfg.seed, STREAM_HEAD, epoch as u64, i as u64),
                )?;
                opt.reset_slots(&slots);
            }
        }

        let iterations = cfg.iterations_per_epoch.unwrap_or_else(|| {
            full.num_assigned()
                .div_ceil(cfg.sampler.batch_size())
                .max(1)
        });
        let branches: Vec<Branch> = match cfg.composition {
            Composition::Ssg => Branch::ALL.to_vec(),
            _ => vec![Branch::Full],
        };
        let mut acc = LossAccumulator::default();
        for it in 0..iterations {
            let mut rng = stream_rng(cfg.seed, STREAM_SAMPLER, epoch as u64, it as u64);
            let mut batches = BTreeMap::new();
            for &b in &branches {
                batches.insert(
                    b,
                    branch_batch(&mut rng, b, &labelings, &inputs, &cameras, cfg.sampler)?,
                );
            }
            let mut last_generator = None;
            for &phase in Phase::for_routing(cfg.routing) {
                if phase == Phase::Discriminator && discs.is_none() {
                    continue;
                }
                let mut tape = Tape::new();
                let obj = match (&models, cfg.composition) {
                    (Models::Single(m), Composition::Single) => {
                        let d = discs.as_ref().map(|s| &s.discs[0]);
                        single_composition(
                            &mut tape,
                            m,
                            d,
                            &batches[&Branch::Full],
                            &weights,
                            phase,
                        )?
                    }
                    (Models::Single(m), Composition::Ssg) => {
                        let map: Option<BTreeMap<Branch, Discriminator>> =
                            discs.as_ref().map(|s| {
                                Branch::ALL
                                    .iter()
                                    .copied()
                                    .zip(s.discs.iter().cloned())
                                    .collect()
                            });
                        ssg_composition(&mut tape, m, map.as_ref(), &batches, &weights, phase)?
                    }
                    (Models::Pair(p), Composition::Mmt) => {
                        let d = discs.as_ref().map(|s| [&s.discs[0], &s.discs[1]]);
                        mmt_composition(&mut tape, p, d, &batches[&Branch::Full], &weights, phase)?
                    }
                    _ => unreachable!("checked above"),
                };
                let grads = tape.backward(obj.total);
                let trains_backbone = phase != Phase::Discriminator;
                let trains_disc = phase != Phase::Backbone;
                if trains_backbone {
                    match &mut models {
                        Models::Single(m) => model_opts[0].step(m.params_mut(), &grads, epoch),
                        Models::Pair(p) => {
                            model_opts[0].step(p.model_1.params_mut(), &grads, epoch);
                            model_opts[1].step(p.model_2.params_mut(), &grads, epoch);
                        }
                    }
                }
                if trains_disc {
                    if let Some(set) = discs.as_mut() {
                        for ((d, opt), stats) in set
                            .discs
                            .iter_mut()
                            .zip(&mut set.optimizers)
                            .zip(&obj.disc_stats)
                        {
                            opt.step(d.params_mut(), &grads, epoch);
                            d.commit_stats(stats);
                        }
                    }
                }
                acc.record(&obj, trains_backbone, trains_disc);
                if trains_backbone {
                    last_generator = Some(obj.generator);
                }
            }
            acc.count += 1;
            let indices: BTreeMap<Branch, Vec<usize>> = batches
                .iter()
                .map(|(b, batch)| (*b, batch.sample_indices.clone()))
                .collect();
            if let Some(objective) = last_generator {
                hook(&StepInfo {
                    epoch,
                    iteration: it,
                    models: &models,
                    batches: &indices,
                    labelings: &labelings,
                    objective: &objective,
                });
            }
        }
        report.iterations = iterations;
        report.losses = acc.means();
        report.wall_time_secs = started.elapsed().as_secs_f64();
        reports.push(report);
    }

    // discriminators are dropped here; only the feature extractors remain
    drop(discs);
    let final_diagnostics = final_clustering(&models, train, cfg)?;
    Ok(AdaptOutcome {
        models,
        reports,
        diagnostics: series,
        final_diagnostics,
    })
}

/// One more clustering pass with the adapted model(s), for diagnostics.
pub fn final_clustering(
    models: &Models,
    train: &UnlabeledSplit,
    cfg: &ExperimentConfig,
) -> Result<Option<FinalDiagnostics>> {
    let feats = eval_features(models.source(), train.samples(), EvalFeatureMode::Raw)?;
    let seed = derive_seed(
        cfg.seed,
        STREAM_CLUSTER,
        cfg.epochs as u64,
        Branch::Full as u64,
    );
    let labeling = match cluster_epoch(&feats, &cfg.clustering, cfg.epochs, Branch::Full, seed) {
        Ok(l) => l,
        Err(Error::NoClusters { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (record, quality) = epoch_diagnostics(&labeling, &feats, train, cfg.epochs)?;
    Ok(Some(FinalDiagnostics {
        mutual_information_nats: record.mutual_information_nats,
        quality,
        lost_ids: record.lost_ids,
        cluster_count: record.cluster_count,
    }))
}

/// Retrieval scores of the model(s) on the target query and gallery.
pub fn evaluate_models(
    models: &Models,
    target: &TargetData,
    mode: EvalFeatureMode,
) -> Result<RetrievalResult> {
    let q = eval_features(models.source(), target.query.samples(), mode)?;
    let g = eval_features(models.source(), target.gallery.samples(), mode)?;
    retrieve_and_score(&target.query, &target.gallery, &q, &g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuRow {
    pub mu: f64,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// One adaptation and evaluation per μ, all from the same pre-trained model.
pub fn mu_sweep(
    pretrained: &EmbeddingModel,
    target: &TargetData,
    cfg: &ExperimentConfig,
    mus: &[f64],
) -> Result<Vec<MuRow>> {
    let mut rows = Vec::with_capacity(mus.len());
    for &mu in mus {
        let mut c = cfg.clone();
        c.mu = mu;
        let outcome = adapt_target(
            Models::from_pretrained(pretrained, c.composition)?,
            target,
            &c,
        )?;
        let r = evaluate_models(&outcome.models, target, c.evaluation.feature_mode)?;
        log::info!("mu={mu}: R1={:.4} mAP={:.4}", r.rank1, r.map);
        rows.push(MuRow {
            mu,
            rank1: r.rank1,
            map: r.map,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pk_sampler_shapes_and_labels() {
        let groups = vec![
            (0, vec![0, 1, 2, 3, 4]),
            (3, vec![5, 6]),
            (7, vec![]),
            (9, vec![8, 9, 10, 11]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (idx, labels) = sample_pk(&mut rng, &groups, SamplerConfig { p: 4, k: 4 }).unwrap();
        // the empty group is skipped, leaving 3
        assert_eq!(idx.len(), 12);
        for (chunk, lab) in idx.chunks(4).zip(labels.chunks(4)) {
            let g = groups.iter().find(|(l, _)| *l == lab[0]).unwrap();
            assert!(chunk.iter().all(|i| g.1.contains(i)));
            assert!(lab.iter().all(|&l| l == lab[0]));
        }
        assert!(sample_pk(&mut rng, &groups[..1], SamplerConfig { p: 4, k: 4 }).is_err());
    }

    #[test]
    fn toy_config_is_valid() {
        ExperimentConfig::toy().validate().unwrap();
        let mut c = ExperimentConfig::toy();
        c.mu = -0.1;
        assert!(c.validate().is_err());
        c.mu = 0.1;
        c.sampler.k = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_position() {
        let a = derive_seed(0, STREAM_SAMPLER, 0, 0);
        assert_ne!(a, derive_seed(0, STREAM_SAMPLER, 0, 1));
        assert_ne!(a, derive_seed(0, STREAM_SAMPLER, 1, 0));
        assert_ne!(a, derive_seed(0, STREAM_MODEL, 0, 0));
        assert_eq!(a, derive_seed(0, STREAM_SAMPLER, 0, 0));
    }
}
