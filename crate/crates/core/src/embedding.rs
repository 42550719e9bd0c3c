//! Feature extractor with full/upper/lower pooled branches and classifier heads.
//!
//! The backbone ends in a spatial feature map of `feature_dim` channels. The
//! full-body branch pools the whole map, the upper and lower branches pool the
//! top and bottom halves of its rows.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{HasPayload, PayloadKind};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, NamedTensor, ParamSet};
use crate::tape::{ConvGeometry, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "F")]
    Full,
    #[serde(rename = "U")]
    Upper,
    #[serde(rename = "L")]
    Lower,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Full, Branch::Upper, Branch::Lower];

    pub fn short(self) -> &'static str {
        match self {
            Branch::Full => "F",
            Branch::Upper => "U",
            Branch::Lower => "L",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Two-layer perceptron over feature vectors; its output is read as a
    /// `feature_dim × map_height × 1` map.
    Mlp {
        input_dim: usize,
        hidden: usize,
        #[serde(default = "default_map_height")]
        map_height: usize,
    },
    /// Two stride-2 convolutions over images.
    Cnn {
        height: usize,
        width: usize,
        channels: usize,
        hidden_channels: usize,
    },
}

fn default_map_height() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backbone: BackboneConfig,
    pub feature_dim: usize,
    /// Size of the source identity classifier; `None` for no head.
    #[serde(default)]
    pub num_source_ids: Option<usize>,
}

impl EmbeddingConfig {
    pub fn input_kind(&self) -> PayloadKind {
        match self.backbone {
            BackboneConfig::Mlp { input_dim, .. } => PayloadKind::Features { dim: input_dim },
            BackboneConfig::Cnn {
                height,
                width,
                channels,
                ..
            } => PayloadKind::Image {
                height,
                width,
                channels,
            },
        }
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Mlp { hidden: Linear, out: Linear },
    Cnn { conv1: Conv2d, conv2: Conv2d },
}

/// Feature extractor plus optional identity and pseudo-identity heads.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    config: EmbeddingConfig,
    params: ParamSet,
    backbone: Backbone,
    map: (usize, usize),
    id_classifier: Option<Linear>,
    pseudo_classifier: Option<Linear>,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct EmbedVars {
    pub map: Var,
    pub branches: BTreeMap<Branch, Var>,
}

impl EmbedVars {
    pub fn branch(&self, b: Branch) -> Var {
        self.branches[&b]
    }
}

/// A backbone output for one sample: `channels × height × width`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Pooled branch vectors of a feature map: (full, upper, lower).
pub fn split_branches(map: &FeatureMap) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !map.height.is_multiple_of(2) {
        return Err(Error::OddFeatureHeight(map.height));
    }
    if map.data.len() != map.channels * map.height * map.width {
        return Err(Error::invalid(
            "feature map buffer does not match its shape",
        ));
    }
    let mut tape = Tape::new();
    let x =
        tape.leaf(Array2::from_shape_vec((1, map.data.len()), map.data.clone()).expect("checked"));
    let vars = pool_branches(&mut tape, x, map.channels, map.height, map.width)?;
    let get = |b: Branch| tape.value(vars[&b]).row(0).to_vec();
    Ok((get(Branch::Full), get(Branch::Upper), get(Branch::Lower)))
}

fn pool_branches(
    tape: &mut Tape,
    map: Var,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<BTreeMap<Branch, Var>> {
    if !h.is_multiple_of(2) {
        return Err(Error::OddFeatureHeight(h));
    }
    let half = h / 2;
    let mut out = BTreeMap::new();
    out.insert(Branch::Full, tape.row_pool(map, channels, h, w, (0, h))?);
    out.insert(
        Branch::Upper,
        tape.row_pool(map, channels, h, w, (0, half))?,
    );
    out.insert(
        Branch::Lower,
        tape.row_pool(map, channels, h, w, (half, h))?,
    );
    Ok(out)
}

impl EmbeddingModel {
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.feature_dim;
        if d == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let (backbone, map) = match config.backbone {
            BackboneConfig::Mlp {
                input_dim,
                hidden,
                map_height,
            } => {
                if map_height == 0 || map_height % 2 != 0 {
                    return Err(Error::OddFeatureHeight(map_height));
                }
                let h = Linear::new(
                    &mut params,
                    "backbone.fc1",
                    input_dim,
                    hidden,
                    2f64.sqrt(),
                    &mut rng,
                );
                let o = Linear::new(
                    &mut params,
                    "backbone.fc2",
                    hidden,
                    d * map_height,
                    1.0,
                    &mut rng,
                );
                (Backbone::Mlp { hidden: h, out: o }, (map_height, 1))
            }
            BackboneConfig::Cnn {
                height,
                width,
                channels,
                hidden_channels,
            } => {
                let g1 = ConvGeometry {
                    in_channels: channels,
                    in_h: height,
                    in_w: width,
                    out_channels: hidden_channels,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                let g2 = ConvGeometry {
                    in_channels: hidden_channels,
                    in_h: g1.out_h(),
                    in_w: g1.out_w(),
                    out_channels: d,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                if !g2.out_h().is_multiple_of(2) {
                    return Err(Error::OddFeatureHeight(g2.out_h()));
                }
                let conv1 = Conv2d::new(&mut params, "backbone.conv1", g1, &mut rng);
                let conv2 = Conv2d::new(&mut params, "backbone.conv2", g2, &mut rng);
                (Backbone::Cnn { conv1, conv2 }, (g2.out_h(), g2.out_w()))
            }
        };
        let id_classifier = config
            .num_source_ids
            .map(|m| Linear::new(&mut params, "id_classifier", d, m, 1.0, &mut rng));
        Ok(Self {
            config,
            params,
            backbone,
            map,
            id_classifier,
            pseudo_classifier: None,
        })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Spatial size (height, width) of the backbone's output map.
    pub fn map_shape(&self) -> (usize, usize) {
        self.map
    }

    pub fn has_id_classifier(&self) -> bool {
        self.id_classifier.is_some()
    }

    pub fn pseudo_classes(&self) -> Option<usize> {
        self.pseudo_classifier.map(|l| l.out_dim)
    }

    /// Makes this model's parameters a distinct identity (for a second model built by cloning).
    pub fn reidentify(&mut self) {
        self.params.reidentify();
    }

    /// (Re)creates the pseudo-identity head for `classes` clusters with fresh
    /// weights. Returns the parameter slots it occupies.
    pub fn reset_pseudo_head(&mut self, classes: usize, seed: u64) -> Result<Vec<usize>> {
        if classes == 0 {
            return Err(Error::invalid(
                "pseudo-identity head needs at least one class",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.feature_dim();
        match self.pseudo_classifier {
            Some(mut head) => {
                let fresh = crate::nn::init_normal(&mut rng, d, classes, d, 1.0);
                self.params.replace(head.weight, fresh);
                self.params.replace(head.bias, Array2::zeros((1, classes)));
                head.out_dim = classes;
                self.pseudo_classifier = Some(head);
                Ok(vec![head.weight, head.bias])
            }
            None => {
                let head = Linear::new(
                    &mut self.params,
                    "pseudo_id_classifier",
                    d,
                    classes,
                    1.0,
                    &mut rng,
                );
                self.pseudo_classifier = Some(head);
                Ok(vec![head.weight, head.bias])
            }
        }
    }

    /// Stacks a batch into an input matrix, checking payload kinds.
    pub fn input_matrix<S: HasPayload>(&self, batch: &[S]) -> Result<Array2<f64>> {
        let expected = self.config.input_kind();
        let width = match expected {
            PayloadKind::Features { dim } => dim,
            PayloadKind::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        };
        let mut m = Array2::zeros((batch.len(), width));
        for (i, s) in batch.iter().enumerate() {
            let kind = s.payload().kind();
            if kind != expected {
                return Err(Error::PayloadKind(format!(
                    "model expects {expected:?}, sample {i} is {kind:?}"
                )));
            }
            m.row_mut(i)
                .assign(&ndarray::Array1::from(s.payload().to_row()));
        }
        Ok(m)
    }

    /// Forward pass on the tape from an input matrix.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<EmbedVars> {
        let p = &self.params;
        let map = match &self.backbone {
            Backbone::Mlp { hidden, out } => {
                let h = hidden.forward(p, tape, input)?;
                let h = tape.relu(h);
                out.forward(p, tape, h)?
            }
            Backbone::Cnn { conv1, conv2 } => {
                let h = conv1.forward(p, tape, input)?;
                let h = tape.relu(h);
                conv2.forward(p, tape, h)?
            }
        };
        let branches = pool_branches(tape, map, self.feature_dim(), self.map.0, self.map.1)?;
        Ok(EmbedVars { map, branches })
    }

    pub fn id_probs(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let head = self
            .id_classifier
            .ok_or_else(|| Error::invalid("model has no identity classifier"))?;
        let logits = head.forward(&self.params, tape, features)?;
        Ok(tape.softmax(logits))
    }

    pub fn pseudo_probs(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let head = self
            .pseudo_classifier
            .ok_or_else(|| Error::invalid("pseudo-identity head not allocated"))?;
        let logits = head.forward(&self.params, tape, features)?;
        Ok(tape.softmax(logits))
    }

    /// Branch features for a batch (no gradient tracking kept).
    pub fn embed<S: HasPayload>(&self, batch: &[S], branch: Branch) -> Result<Array2<f64>> {
        if batch.is_empty() {
            return Ok(Array2::zeros((0, self.feature_dim())));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(self.input_matrix(batch)?);
        let vars = self.forward(&mut tape, x)?;
        Ok(tape.value(vars.branch(branch)).clone())
    }

    /// All three branch features for a batch.
    pub fn embed_all<S: HasPayload>(&self, batch: &[S]) -> Result<BTreeMap<Branch, Array2<f64>>> {
        let mut out = BTreeMap::new();
        if batch.is_empty() {
            for b in Branch::ALL {
                out.insert(b, Array2::zeros((0, self.feature_dim())));
            }
            return Ok(out);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(self.input_matrix(batch)?);
        let vars = self.forward(&mut tape, x)?;
        for b in Branch::ALL {
            out.insert(b, tape.value(vars.branch(b)).clone());
        }
        Ok(out)
    }

    /// Extracts features in chunks to bound tape memory.
    pub fn embed_all_chunked<S: HasPayload>(
        &self,
        samples: &[S],
        chunk: usize,
    ) -> Result<BTreeMap<Branch, Array2<f64>>> {
        let d = self.feature_dim();
        let mut out: BTreeMap<Branch, Array2<f64>> = Branch::ALL
            .iter()
            .map(|&b| (b, Array2::zeros((samples.len(), d))))
            .collect();
        for (ci, part) in samples.chunks(chunk.max(1)).enumerate() {
            let feats = self.embed_all(part)?;
            let start = ci * chunk.max(1);
            for (b, f) in feats {
                out.get_mut(&b)
                    .expect("all branches present")
                    .slice_mut(ndarray::s![start..start + part.len(), ..])
                    .assign(&f);
            }
        }
        Ok(out)
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            config: self.config.clone(),
            pseudo_classes: self.pseudo_classes(),
            params: self.params.params().to_vec(),
            buffers: self.params.buffers().to_vec(),
        }
    }

    pub fn from_state(state: &ModelState) -> Result<Self> {
        let mut model = Self::new(state.config.clone(), 0)?;
        if let Some(classes) = state.pseudo_classes {
            model.reset_pseudo_head(classes, 0)?;
        }
        model
            .params
            .load(&state.params, &state.buffers)
            .map_err(Error::Checkpoint)?;
        Ok(model)
    }
}

/// Serializable snapshot of an [`EmbeddingModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EmbeddingConfig,
    pub pseudo_classes: Option<usize>,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

/// Two independently parameterized models trained side by side.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub model_1: EmbeddingModel,
    pub model_2: EmbeddingModel,
}

impl ModelPair {
    pub fn new(model_1: EmbeddingModel, model_2: EmbeddingModel) -> Result<Self> {
        let pair = Self { model_1, model_2 };
        pair.check_independent()?;
        Ok(pair)
    }

    pub fn check_independent(&self) -> Result<()> {
        if self.model_1.params.owner() == self.model_2.params.owner() {
            return Err(Error::SharedParameters);
        }
        Ok(())
    }

    pub fn models(&self) -> [&EmbeddingModel; 2] {
        [&self.model_1, &self.model_2]
    }
}

/// How evaluation features are assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFeatureMode {
    /// Per branch: feature(x) + feature(flip x), L2-normalized; F, U, L concatenated.
    FlipSumConcat,
    /// Raw full-body feature.
    Raw,
}

/// Anything that can produce evaluation features.
pub enum FeatureSource<'a> {
    Single(&'a EmbeddingModel),
    /// Raw features are the mean of both models' full-body features.
    Pair(&'a ModelPair),
}

/// Scales every nonzero row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
}

/// Evaluation features for a batch: `n × 3d` in flip-sum mode, `n × d` raw.
pub fn eval_features<S: HasPayload>(
    source: FeatureSource<'_>,
    batch: &[S],
    mode: EvalFeatureMode,
) -> Result<Array2<f64>> {
    let models: Vec<&EmbeddingModel> = match source {
        FeatureSource::Single(m) => vec![m],
        FeatureSource::Pair(p) => p.models().to_vec(),
    };
    let d = models[0].feature_dim();
    match mode {
        EvalFeatureMode::Raw => {
            let mut acc = Array2::zeros((batch.len(), d));
            for m in &models {
                acc += &m.embed(batch, Branch::Full)?;
            }
            Ok(acc / models.len() as f64)
        }
        EvalFeatureMode::FlipSumConcat => {
            let flipped: Vec<crate::data::Payload> =
                batch.iter().map(|s| s.payload().hflip()).collect();
            let mut blocks = Vec::with_capacity(3);
            let mut per_model: Vec<(BTreeMap<Branch, Array2<f64>>, BTreeMap<Branch, Array2<f64>>)> =
                Vec::new();
            for m in &models {
                per_model.push((m.embed_all(batch)?, m.embed_all(&flipped)?));
            }
            for b in Branch::ALL {
                let mut sum = Array2::zeros((batch.len(), d));
                for (orig, flip) in &per_model {
                    sum += &orig[&b];
                    sum += &flip[&b];
                }
                l2_normalize_rows(&mut sum);
                blocks.push(sum);
            }
            let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            Ok(ndarray::concatenate(ndarray::Axis(1), &views).expect("equal rows"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageTensor, Payload};

    fn mlp_config(input_dim: usize, d: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            backbone: BackboneConfig::Mlp {
                input_dim,
                hidden: 8,
                map_height: 2,
            },
            feature_dim: d,
            num_source_ids: Some(3),
        }
    }

    fn cnn_config() -> EmbeddingConfig {
        EmbeddingConfig {
            backbone: BackboneConfig::Cnn {
                height: 8,
                width: 4,
                channels: 3,
                hidden_channels: 4,
            },
            feature_dim: 5,
            num_source_ids: None,
        }
    }

    fn image(seed: u64, symmetric: bool) -> Payload {
        let mut s = seed;
        let mut data = vec![0.0; 8 * 4 * 3];
        for y in 0..8 {
            for x in 0..4 {
                for c in 0..3 {
                    s = s
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    let v = (s >> 40) as f64 / (1u64 << 24) as f64;
                    let xx = if symmetric { x.min(3 - x) } else { x };
                    data[(y * 4 + xx) * 3 + c] = v;
                    if symmetric {
                        data[(y * 4 + (3 - xx)) * 3 + c] = v;
                    }
                }
            }
        }
        Payload::Image(ImageTensor::new(8, 4, 3, data).unwrap())
    }

    #[test]
    fn constant_map_gives_equal_branches() {
        let map = FeatureMap {
            channels: 2,
            height: 4,
            width: 3,
            data: vec![0.7; 24],
        };
        let (f, u, l) = split_branches(&map).unwrap();
        for v in [f, u, l] {
            for x in v {
                assert!((x - 0.7).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn halves_pool_separately() {
        // channel 0: top rows 1.0, bottom rows 3.0; channel 1: top -2.0, bottom 4.0
        let (h, w) = (4, 2);
        let mut data = vec![0.0; 2 * h * w];
        for c in 0..2 {
            for r in 0..h {
                for col in 0..w {
                    let (a, b) = if c == 0 { (1.0, 3.0) } else { (-2.0, 4.0) };
                    data[c * h * w + r * w + col] = if r < h / 2 { a } else { b };
                }
            }
        }
        let (f, u, l) = split_branches(&FeatureMap {
            channels: 2,
            height: h,
            width: w,
            data,
        })
        .unwrap();
        assert_eq!(u, vec![1.0, -2.0]);
        assert_eq!(l, vec![3.0, 4.0]);
        assert_eq!(f, vec![2.0, 1.0]);
    }

    #[test]
    fn full_branch_is_mean_of_halves() {
        let data: Vec<f64> = (0..3 * 4 * 2)
            .map(|i| ((i * 37 % 11) as f64).sin())
            .collect();
        let (f, u, l) = split_branches(&FeatureMap {
            channels: 3,
            height: 4,
            width: 2,
            data,
        })
        .unwrap();
        for c in 0..3 {
            assert!((f[c] - (u[c] + l[c]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_height_is_rejected() {
        let map = FeatureMap {
            channels: 1,
            height: 3,
            width: 1,
            data: vec![0.0; 3],
        };
        assert!(matches!(
            split_branches(&map),
            Err(Error::OddFeatureHeight(3))
        ));
    }

    #[test]
    fn embed_shapes_and_determinism() {
        let model = EmbeddingModel::new(cnn_config(), 1).unwrap();
        assert_eq!(model.map_shape(), (2, 1));
        let batch: Vec<Payload> = (0..4).map(|i| image(i, false)).collect();
        let a = model.embed(&batch, Branch::Full).unwrap();
        assert_eq!(a.dim(), (4, 5));
        let b = model.embed(&batch, Branch::Full).unwrap();
        assert_eq!(a, b);
        let empty: Vec<Payload> = vec![];
        assert_eq!(model.embed(&empty, Branch::Upper).unwrap().dim(), (0, 5));
    }

    #[test]
    fn payload_kind_mismatch_is_an_error() {
        let model = EmbeddingModel::new(mlp_config(4, 3), 1).unwrap();
        let batch = vec![Payload::Features(vec![0.0; 5])];
        assert!(matches!(
            model.embed(&batch, Branch::Full),
            Err(Error::PayloadKind(_))
        ));
    }

    #[test]
    fn flip_sum_features_have_unit_blocks() {
        let model = EmbeddingModel::new(cnn_config(), 2).unwrap();
        let batch: Vec<Payload> = (0..3).map(|i| image(10 + i, false)).collect();
        let f = eval_features(
            FeatureSource::Single(&model),
            &batch,
            EvalFeatureMode::FlipSumConcat,
        )
        .unwrap();
        assert_eq!(f.dim(), (3, 15));
        for row in f.rows() {
            for block in 0..3 {
                let n: f64 = row
                    .iter()
                    .skip(block * 5)
                    .take(5)
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        let raw =
            eval_features(FeatureSource::Single(&model), &batch, EvalFeatureMode::Raw).unwrap();
        assert_eq!(raw.dim(), (3, 5));
    }

    #[test]
    fn symmetric_input_block_is_normalized_double_feature() {
        let model = EmbeddingModel::new(cnn_config(), 3).unwrap();
        let batch = vec![image(5, true)];
        assert_eq!(batch[0].hflip(), batch[0]);
        let f = eval_features(
            FeatureSource::Single(&model),
            &batch,
            EvalFeatureMode::FlipSumConcat,
        )
        .unwrap();
        for (block, b) in Branch::ALL.iter().enumerate() {
            let raw = model.embed(&batch, *b).unwrap();
            let doubled = &raw * 2.0;
            let n = doubled.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..5 {
                assert!((f[[0, block * 5 + j]] - doubled[[0, j]] / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_requires_distinct_parameters() {
        let m = EmbeddingModel::new(mlp_config(4, 3), 1).unwrap();
        assert!(matches!(
            ModelPair::new(m.clone(), m.clone()),
            Err(Error::SharedParameters)
        ));
        let other = EmbeddingModel::new(mlp_config(4, 3), 1).unwrap();
        assert!(ModelPair::new(m.clone(), other).is_ok());
        let mut forked = m.clone();
        forked.reidentify();
        assert!(ModelPair::new(m, forked).is_ok());
    }

    #[test]
    fn pseudo_head_reallocation_changes_width() {
        let mut m = EmbeddingModel::new(mlp_config(4, 3), 1).unwrap();
        let slots = m.reset_pseudo_head(5, 7).unwrap();
        assert_eq!(m.pseudo_classes(), Some(5));
        let slots2 = m.reset_pseudo_head(2, 8).unwrap();
        assert_eq!(slots, slots2);
        assert_eq!(m.params().get(slots[0]).dim(), (3, 2));
    }

    #[test]
    fn state_round_trip() {
        let mut m = EmbeddingModel::new(mlp_config(4, 3), 9).unwrap();
        m.reset_pseudo_head(4, 1).unwrap();
        let restored = EmbeddingModel::from_state(&m.state()).unwrap();
        let batch = vec![Payload::Features(vec![0.1, -0.3, 0.5, 2.0])];
        assert_eq!(
            m.embed(&batch, Branch::Full).unwrap(),
            restored.embed(&batch, Branch::Full).unwrap()
        );
        assert_eq!(restored.pseudo_classes(), Some(4));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let model = EmbeddingModel::new(cnn_config(), 4).unwrap();
        let batch: Vec<Payload> = (0..3).map(|i| image(20 + i, false)).collect();
        let input = model.input_matrix(&batch).unwrap();
        // scalar probe: weighted sum of upper-branch features
        let weights = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.7).cos());
        let objective = |m: &EmbeddingModel| -> (f64, Option<Array2<f64>>) {
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone());
            let vars = m.forward(&mut tape, x).unwrap();
            let wt = tape.leaf(weights.t().to_owned());
            let prod = tape.matmul(vars.branch(Branch::Upper), wt).unwrap();
            let s = tape.mean_all(prod);
            let g = tape.backward(s);
            (tape.scalar(s), g.param(m.params().key(0)).cloned())
        };
        let (_, analytic) = objective(&model);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (1, 5), (3, 20)] {
            let mut plus = model.clone();
            plus.params_mut().get_mut(0)[[r, c]] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(0)[[r, c]] -= h;
            let numeric = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
            let a = analytic[[r, c]];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "param[{r},{c}]: analytic {a}, numeric {numeric}"
            );
        }
    }
}
