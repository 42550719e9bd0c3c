//! Dataset model: samples, splits, on-disk ingestion of re-ID image folders,
//! and a synthetic multi-camera feature generator.
//!
//! Splits are immutable once built. Target training data is only handed to
//! training code through [`UnlabeledSplit`], whose samples carry no identity;
//! the ground truth travels alongside in an opaque [`DiagnosticIds`] that only
//! the evaluation and pseudo-labeling diagnostics can read.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image stored height × width × channels, values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::PayloadKind(format!(
                "image buffer of {} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                for c in 0..self.channels {
                    data.push(self.at(y, x, c));
                }
            }
        }
        Self { data, ..*self }
    }

    /// Flattens to channel-major (C, H, W) order.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.push(self.at(y, x, c));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Image(ImageTensor),
    Features(Vec<f64>),
}

/// Shape of a payload, used to check batches against what a model expects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadKind {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Features {
        dim: usize,
    },
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Image(img) => PayloadKind::Image {
                height: img.height,
                width: img.width,
                channels: img.channels,
            },
            Payload::Features(v) => PayloadKind::Features { dim: v.len() },
        }
    }

    /// Horizontal flip; feature vectors have no spatial layout and are returned unchanged.
    pub fn hflip(&self) -> Payload {
        match self {
            Payload::Image(img) => Payload::Image(img.hflip()),
            Payload::Features(v) => Payload::Features(v.clone()),
        }
    }

    /// Flattened model input row.
    pub fn to_row(&self) -> Vec<f64> {
        match self {
            Payload::Image(img) => img.to_chw(),
            Payload::Features(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub payload: Payload,
    pub person_id: Option<u32>,
    pub camera: usize,
    pub source_index: usize,
    /// Gallery-only: an identity that never matches any query.
    #[serde(default)]
    pub distractor: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    SourceTrain,
    TargetTrain,
    Gallery,
    Query,
}

impl SplitRole {
    pub fn name(self) -> &'static str {
        match self {
            SplitRole::SourceTrain => "source_train",
            SplitRole::TargetTrain => "target_train",
            SplitRole::Gallery => "gallery",
            SplitRole::Query => "query",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    samples: Vec<Sample>,
    role: SplitRole,
    num_cameras: usize,
    num_identities: Option<usize>,
}

impl DatasetSplit {
    /// Validates the split invariants. `num_cameras` of `None` means
    /// max camera + 1; the identity count is derived from the samples.
    pub fn new(samples: Vec<Sample>, role: SplitRole, num_cameras: Option<usize>) -> Result<Self> {
        let k =
            num_cameras.unwrap_or_else(|| samples.iter().map(|s| s.camera + 1).max().unwrap_or(0));
        if let Some(s) = samples.iter().find(|s| s.camera >= k) {
            return Err(Error::invalid(format!(
                "sample {} has camera {} but the split has {k} cameras",
                s.source_index, s.camera
            )));
        }
        if let Some(first) = samples.first() {
            let kind = first.payload.kind();
            if let Some(s) = samples.iter().find(|s| s.payload.kind() != kind) {
                return Err(Error::PayloadKind(format!(
                    "sample {} is {:?}, split is {:?}",
                    s.source_index,
                    s.payload.kind(),
                    kind
                )));
            }
        }
        let needs_ids = matches!(
            role,
            SplitRole::SourceTrain | SplitRole::Gallery | SplitRole::Query
        );
        if needs_ids {
            if let Some(s) = samples.iter().find(|s| s.person_id.is_none()) {
                return Err(Error::invalid(format!(
                    "{} sample {} lacks a person id",
                    role.name(),
                    s.source_index
                )));
            }
        }
        let ids: BTreeSet<u32> = samples
            .iter()
            .filter(|s| !s.distractor)
            .filter_map(|s| s.person_id)
            .collect();
        let num_identities = (!ids.is_empty()).then_some(ids.len());
        Ok(Self {
            samples,
            role,
            num_cameras: k,
            num_identities,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn role(&self) -> SplitRole {
        self.role
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_identities(&self) -> Option<usize> {
        self.num_identities
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn payload_kind(&self) -> Option<PayloadKind> {
        self.samples.first().map(|s| s.payload.kind())
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.camera).collect()
    }

    /// Same samples under another role (e.g. a generated train split reused as a labelled source).
    pub fn with_role(self, role: SplitRole) -> Result<Self> {
        Self::new(self.samples, role, Some(self.num_cameras))
    }
}

/// How identity and camera are encoded in image file names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilenameLayout {
    /// Regular expression with named groups `id` and `cam`, matched against the file name.
    pub pattern: String,
    /// Camera number that maps to index 0 (Market and Duke count from 1).
    pub camera_base: usize,
    /// Identity values that mark gallery distractors.
    pub distractor_ids: Vec<i64>,
    /// Files whose identity is negative (Market's `-1` junk) are skipped.
    pub skip_negative_ids: bool,
    /// Images are resized to (height, width) on load.
    pub resize: Option<(usize, usize)>,
    pub extensions: Vec<String>,
}

impl Default for FilenameLayout {
    fn default() -> Self {
        Self {
            pattern: r"^(?P<id>-?\d+)_c(?P<cam>\d+)".to_string(),
            camera_base: 1,
            distractor_ids: vec![0],
            skip_negative_ids: true,
            resize: Some((32, 16)),
            extensions: vec!["jpg".into(), "jpeg".into(), "png".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedName {
    pub id: i64,
    pub camera: usize,
}

impl FilenameLayout {
    pub fn parse(&self, file: &Path) -> Result<ParsedName> {
        let re =
            Regex::new(&self.pattern).map_err(|e| Error::Config(format!("layout pattern: {e}")))?;
        self.parse_with(&re, file)
    }

    fn parse_with(&self, re: &Regex, file: &Path) -> Result<ParsedName> {
        let ingest = |reason: String| Error::Ingest {
            file: file.to_path_buf(),
            reason,
        };
        let name = file
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| ingest("file name is not valid UTF-8".into()))?;
        let caps = re
            .captures(name)
            .ok_or_else(|| ingest(format!("does not match layout pattern {}", self.pattern)))?;
        let id = caps
            .name("id")
            .ok_or_else(|| ingest("pattern has no `id` group".into()))?
            .as_str()
            .parse::<i64>()
            .map_err(|e| ingest(format!("bad id: {e}")))?;
        let cam = caps
            .name("cam")
            .ok_or_else(|| ingest("pattern has no `cam` group".into()))?
            .as_str()
            .parse::<usize>()
            .map_err(|e| ingest(format!("bad camera: {e}")))?;
        let camera = cam
            .checked_sub(self.camera_base)
            .ok_or_else(|| ingest(format!("camera {cam} below base {}", self.camera_base)))?;
        Ok(ParsedName { id, camera })
    }

    fn accepts_extension(&self, file: &Path) -> bool {
        file.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| self.extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
    }
}

/// Lists and parses a re-ID image directory without decoding any image.
pub fn scan_dataset_dir(
    path: &Path,
    layout: &FilenameLayout,
) -> Result<Vec<(PathBuf, ParsedName)>> {
    let re =
        Regex::new(&layout.pattern).map_err(|e| Error::Config(format!("layout pattern: {e}")))?;
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && layout.accepts_extension(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut out = Vec::with_capacity(files.len());
    for file in files {
        let parsed = layout.parse_with(&re, &file)?;
        if parsed.id < 0 && layout.skip_negative_ids {
            continue;
        }
        out.push((file, parsed));
    }
    if out.is_empty() {
        return Err(Error::EmptySplit(path.to_path_buf()));
    }
    Ok(out)
}

fn load_image(file: &Path, resize: Option<(usize, usize)>) -> Result<ImageTensor> {
    let img = image::open(file)?.to_rgb8();
    let img = match resize {
        Some((h, w)) => image::imageops::resize(
            &img,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        ),
        None => img,
    };
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

/// Loads a flat directory of person crops named per `layout`, ordered by file name.
pub fn load_dataset_dir(
    path: &Path,
    layout: &FilenameLayout,
    role: SplitRole,
) -> Result<DatasetSplit> {
    let entries = scan_dataset_dir(path, layout)?;
    let mut samples = Vec::with_capacity(entries.len());
    for (source_index, (file, parsed)) in entries.into_iter().enumerate() {
        let payload = Payload::Image(load_image(&file, layout.resize)?);
        let distractor = layout.distractor_ids.contains(&parsed.id) && role == SplitRole::Gallery;
        samples.push(Sample {
            payload,
            person_id: Some(parsed.id.max(0) as u32),
            camera: parsed.camera,
            source_index,
            distractor,
        });
    }
    DatasetSplit::new(samples, role, None)
}

/// Parameters of the synthetic multi-camera generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub num_cameras: usize,
    pub samples_per_id: usize,
    /// Dimension of the identity latent code and of every generated feature vector.
    pub id_dim: usize,
    /// Norm of each camera's additive shift.
    pub camera_shift_scale: f64,
    /// 0: each identity spread uniformly over cameras; 1: each identity seen by one camera.
    pub correlation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Held-out samples per identity for gallery and query (defaults to `samples_per_id`).
    #[serde(default)]
    pub eval_samples_per_id: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 16,
            num_cameras: 4,
            samples_per_id: 8,
            id_dim: 16,
            camera_shift_scale: 2.0,
            correlation: 0.9,
            noise_sigma: 0.3,
            seed: 0,
            eval_samples_per_id: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SyntheticSpec(m.to_string()));
        if self.samples_per_id < 2 {
            return bad("samples_per_id must be at least 2 so triplets can be mined");
        }
        if self.num_identities < 2 {
            return bad("need at least 2 identities");
        }
        if self.num_cameras < 1 {
            return bad("need at least 1 camera");
        }
        if self.id_dim == 0 {
            return bad("id_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad("correlation must lie in [0, 1]");
        }
        if !(self.camera_shift_scale >= 0.0 && self.camera_shift_scale.is_finite()) {
            return bad("camera_shift_scale must be non-negative");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        if self.eval_samples_per_id == Some(0) {
            return bad("eval_samples_per_id must be positive");
        }
        Ok(())
    }

    /// Camera distribution of one identity: (1 - c)·uniform + c·onehot(home).
    pub fn camera_distribution(&self, home: usize) -> Vec<f64> {
        let k = self.num_cameras;
        (0..k)
            .map(|c| {
                let one_hot = if c == home { 1.0 } else { 0.0 };
                (1.0 - self.correlation) / k as f64 + self.correlation * one_hot
            })
            .collect()
    }
}

/// Output of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSplits {
    pub target_train: DatasetSplit,
    pub gallery: DatasetSplit,
    pub query: DatasetSplit,
}

/// Draws `n` categories from `probs` by largest-remainder apportionment:
/// each category gets floor(n·p) draws and the leftovers go to the largest
/// fractional parts (ties broken at random). The result is shuffled.
fn stratified_draw(probs: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let expected: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = expected.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.shuffle(rng);
    order.sort_by(|&a, &b| {
        let fa = expected[a] - expected[a].floor();
        let fb = expected[b] - expected[b].floor();
        fb.total_cmp(&fa)
    });
    for &c in order.iter().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    let mut out: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    out.shuffle(rng);
    out
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates a target training split plus held-out gallery and query splits
/// for the same identities. Fully determined by `spec` (including its seed).
///
/// Each identity has a Gaussian latent code; a sample is that code plus the
/// camera's shift plus isotropic noise. Training cameras follow the identity's
/// camera distribution; held-out cameras are spread uniformly so that every
/// query has cross-camera matches.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, k, dim) = (spec.num_identities, spec.num_cameras, spec.id_dim);

    let codes: Vec<Vec<f64>> = (0..m).map(|_| gaussian_vec(&mut rng, dim)).collect();
    let shifts: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let dir = gaussian_vec(&mut rng, dim);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            dir.iter()
                .map(|x| x / norm * spec.camera_shift_scale)
                .collect()
        })
        .collect();
    let homes: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();

    let draw_sample = |rng: &mut ChaCha8Rng, id: usize, camera: usize| -> Vec<f64> {
        let noise = gaussian_vec(rng, dim);
        (0..dim)
            .map(|j| codes[id][j] + shifts[camera][j] + spec.noise_sigma * noise[j])
            .collect()
    };

    let mut train = Vec::with_capacity(m * spec.samples_per_id);
    for (id, &home) in homes.iter().enumerate() {
        let cams = stratified_draw(
            &spec.camera_distribution(home),
            spec.samples_per_id,
            &mut rng,
        );
        for camera in cams {
            let features = draw_sample(&mut rng, id, camera);
            train.push(Sample {
                payload: Payload::Features(features),
                person_id: Some(id as u32),
                camera,
                source_index: train.len(),
                distractor: false,
            });
        }
    }

    let eval_n = spec
        .eval_samples_per_id
        .unwrap_or(spec.samples_per_id)
        .max(2);
    let uniform = vec![1.0 / k as f64; k];
    let queries_per_id = (eval_n / 4).max(1);
    let (mut gallery, mut query) = (Vec::new(), Vec::new());
    for id in 0..m {
        let cams = stratified_draw(&uniform, eval_n, &mut rng);
        for (j, camera) in cams.into_iter().enumerate() {
            let features = draw_sample(&mut rng, id, camera);
            let dest = if j < queries_per_id {
                &mut query
            } else {
                &mut gallery
            };
            dest.push(Sample {
                payload: Payload::Features(features),
                person_id: Some(id as u32),
                camera,
                source_index: dest.len(),
                distractor: false,
            });
        }
    }

    Ok(SyntheticSplits {
        target_train: DatasetSplit::new(train, SplitRole::TargetTrain, Some(k))?,
        gallery: DatasetSplit::new(gallery, SplitRole::Gallery, Some(k))?,
        query: DatasetSplit::new(query, SplitRole::Query, Some(k))?,
    })
}

/// Ground-truth identities of a target split. Training code can hold and pass
/// this around but cannot read it; only diagnostics inside this crate do.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticIds {
    ids: Vec<Option<u32>>,
}

impl DiagnosticIds {
    pub fn new(ids: Vec<Option<u32>>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub(crate) fn ids(&self) -> &[Option<u32>] {
        &self.ids
    }
}

/// A training sample as seen by the adaptation loop: no identity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnlabeledSample {
    pub payload: Payload,
    pub camera: usize,
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnlabeledSplit {
    samples: Vec<UnlabeledSample>,
    num_cameras: usize,
    #[serde(skip)]
    diagnostics: DiagnosticIds,
}

impl UnlabeledSplit {
    pub fn samples(&self) -> &[UnlabeledSample] {
        &self.samples
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.camera).collect()
    }

    pub fn diagnostics(&self) -> &DiagnosticIds {
        &self.diagnostics
    }
}

/// Strips identities from a target training split, keeping them only in the
/// sealed diagnostic channel.
pub fn hide_labels(split: DatasetSplit) -> Result<UnlabeledSplit> {
    if split.role != SplitRole::TargetTrain {
        return Err(Error::RoleMismatch {
            expected: SplitRole::TargetTrain.name(),
            actual: split.role.name(),
        });
    }
    let num_cameras = split.num_cameras;
    let mut ids = Vec::with_capacity(split.samples.len());
    let samples = split
        .samples
        .into_iter()
        .map(|s| {
            ids.push(s.person_id);
            UnlabeledSample {
                payload: s.payload,
                camera: s.camera,
                source_index: s.source_index,
            }
        })
        .collect();
    Ok(UnlabeledSplit {
        samples,
        num_cameras,
        diagnostics: DiagnosticIds::new(ids),
    })
}

/// Anything carrying a model input.
pub trait HasPayload {
    fn payload(&self) -> &Payload;
}

impl HasPayload for Sample {
    fn payload(&self) -> &Payload {
        &self.payload
    }
}

impl HasPayload for UnlabeledSample {
    fn payload(&self) -> &Payload {
        &self.payload
    }
}

impl HasPayload for Payload {
    fn payload(&self) -> &Payload {
        self
    }
}

/// Writes a split as JSON.
pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), split)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let file = fs::File::open(path)?;
    let split: DatasetSplit = serde_json::from_reader(std::io::BufReader::new(file))?;
    // re-run validation on whatever was on disk
    DatasetSplit::new(split.samples, split.role, Some(split.num_cameras))
}
