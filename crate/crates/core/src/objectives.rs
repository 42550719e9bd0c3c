//! Loss functions and their adversarial compositions.
//!
//! Value-level functions take plain matrices and return a [`LossValue`];
//! the composition builders put the whole objective on a [`Tape`] so one
//! backward pass yields every gradient the current optimization phase needs.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adversary::{route_features, Discriminator, RoutingMode};
use crate::embedding::{Branch, EmbeddingModel, ModelPair};
use crate::error::{Error, Result};
use crate::nn::BatchNorm;
use crate::tape::{BatchStats, Tape, Var};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPart {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// A scalar loss together with the weighted parts it is the sum of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub parts: Vec<LossPart>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        Self::from_parts(vec![LossPart {
            name: name.into(),
            weight: 1.0,
            value,
        }])
    }

    pub fn from_parts(parts: Vec<LossPart>) -> Self {
        let value = parts.iter().map(|p| p.weight * p.value).sum();
        Self { value, parts }
    }

    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|p| p.name == name).map(|p| p.value)
    }

    /// Whether `value` equals the weighted sum of parts within `tol`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let s: f64 = self.parts.iter().map(|p| p.weight * p.value).sum();
        (s - self.value).abs() <= tol
    }
}

fn scalar_on_tape(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.scalar(v))
}

fn check_stochastic(probs: &Array2<f64>) -> Result<()> {
    for (i, r) in probs.rows().into_iter().enumerate() {
        if r.iter().any(|&p| p < 0.0 || !p.is_finite()) || (r.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "row {i} is not a probability vector"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `-ln p[label]`, with `p` floored at `1e-12`.
pub fn ce_id_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<LossValue> {
    check_stochastic(probs)?;
    let v = scalar_on_tape(|t| {
        let p = t.leaf(probs.clone());
        Ok(t.cross_entropy(p, labels)?)
    })?;
    Ok(LossValue::single("ce", v))
}

/// Camera cross-entropy; identical formula to [`ce_id_loss`] over camera labels.
pub fn camera_adv_loss(probs: &Array2<f64>, cameras: &[usize]) -> Result<LossValue> {
    check_stochastic(probs)?;
    let v = scalar_on_tape(|t| {
        let p = t.leaf(probs.clone());
        Ok(t.cross_entropy(p, cameras)?)
    })?;
    Ok(LossValue::single("adv", v))
}

/// Batch-hard triplet loss with Euclidean distances.
pub fn triplet_loss(features: &Array2<f64>, labels: &[usize], margin: f64) -> Result<LossValue> {
    let v = scalar_on_tape(|t| {
        let x = t.leaf(features.clone());
        Ok(t.triplet_batch_hard(x, labels, margin)?)
    })?;
    Ok(LossValue::single("triplet", v))
}

/// `ce + λ·triplet`. With `λ = 0` the triplet term is not computed at all.
pub fn id_loss(
    probs: &Array2<f64>,
    features: &Array2<f64>,
    labels: &[usize],
    lambda: f64,
    margin: f64,
) -> Result<LossValue> {
    let ce = ce_id_loss(probs, labels)?;
    let mut parts = ce.parts;
    if lambda != 0.0 {
        let tri = triplet_loss(features, labels, margin)?;
        parts.push(LossPart {
            name: "triplet".into(),
            weight: lambda,
            value: tri.value,
        });
    }
    Ok(LossValue::from_parts(parts))
}

/// Conditional camera loss: cross-entropy of `D(feature, centroid)` against
/// the camera. Every sample must carry its cluster centroid.
pub fn conditional_camera_adv_loss(
    features: &Array2<f64>,
    centroids: &[Option<Vec<f64>>],
    cameras: &[usize],
    disc: &Discriminator,
    train: bool,
) -> Result<LossValue> {
    let cond = stack_centroids(centroids, features.ncols())?;
    let probs = disc.discriminate(features, Some(&cond), train)?;
    let mut loss = camera_adv_loss(&probs, cameras)?;
    loss.parts[0].name = "c_adv".into();
    Ok(loss)
}

/// Stacks per-sample centroids; a missing one is an error.
pub fn stack_centroids(centroids: &[Option<Vec<f64>>], dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((centroids.len(), dim));
    for (i, c) in centroids.iter().enumerate() {
        let c = c.as_ref().ok_or(Error::MissingCentroid(i))?;
        if c.len() != dim {
            return Err(Error::invalid(format!(
                "centroid {i} has length {}, expected {dim}",
                c.len()
            )));
        }
        m.row_mut(i)
            .assign(&ndarray::ArrayView1::from(c.as_slice()));
    }
    Ok(m)
}

/// Values of the two sides of the min-max game: the generator minimizes
/// `ps_id − μ·adv`, the discriminator minimizes `adv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMaxValues {
    pub generator: f64,
    pub discriminator: f64,
}

pub fn adversarial_objective(ps_id: &LossValue, adv: &LossValue, mu: f64) -> Result<MinMaxValues> {
    if mu.is_nan() || mu < 0.0 {
        return Err(Error::invalid(format!("mu must be non-negative, got {mu}")));
    }
    Ok(MinMaxValues {
        generator: ps_id.value - mu * adv.value,
        discriminator: adv.value,
    })
}

/// Which adversarial term, if any, joins the pseudo-identity loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    Baseline,
    PlainAdv,
    Canu,
}

impl AdversarialMode {
    pub fn uses_discriminator(self) -> bool {
        !matches!(self, AdversarialMode::Baseline)
    }

    pub fn conditional(self) -> bool {
        matches!(self, AdversarialMode::Canu)
    }
}

/// Which part of the min-max game the tape objective serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Gradient reversal: one backward pass updates everything.
    Joint,
    /// Alternating: discriminator update, features detached.
    Discriminator,
    /// Alternating: backbone update, discriminator frozen.
    Backbone,
}

impl Phase {
    pub fn for_routing(routing: RoutingMode) -> &'static [Phase] {
        match routing {
            RoutingMode::GradientReversal => &[Phase::Joint],
            RoutingMode::Alternating => &[Phase::Discriminator, Phase::Backbone],
        }
    }
}

/// One batch of pseudo-labelled target samples.
#[derive(Clone, Debug)]
pub struct PseudoBatch {
    pub input: Array2<f64>,
    /// Pseudo-identity per row (indices into the labeling's clusters).
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    /// Conditioning centroid per row; required for conditional discriminators.
    pub centroids: Option<Array2<f64>>,
    /// Rows' positions in the training split, for bookkeeping.
    pub sample_indices: Vec<usize>,
}

/// Weights of the pseudo-identity loss and the adversarial game.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub margin: f64,
    pub mu: f64,
}

/// Tape objective produced by a composition builder.
pub struct Objective {
    /// Scalar node to backpropagate for this phase.
    pub total: Var,
    /// `Σ ps_id − μ Σ adv`, with one part per term.
    pub generator: LossValue,
    /// `Σ adv`, when a discriminator takes part.
    pub discriminator: Option<LossValue>,
    /// Finer-grained scalars (per-model ce and triplet, ...).
    pub details: BTreeMap<String, f64>,
    /// Batch-norm statistics per discriminator, in argument order.
    pub disc_stats: Vec<Vec<(BatchNorm, BatchStats)>>,
}

struct PsIdTerm {
    node: Var,
    value: f64,
}

/// CE on the pseudo head + λ·triplet on the full-body feature.
fn ps_id_term(
    tape: &mut Tape,
    model: &EmbeddingModel,
    features: Var,
    labels: &[usize],
    w: &ObjectiveWeights,
    prefix: &str,
    details: &mut BTreeMap<String, f64>,
) -> Result<PsIdTerm> {
    let probs = model.pseudo_probs(tape, features)?;
    let ce = tape.cross_entropy(probs, labels)?;
    details.insert(format!("{prefix}ce"), tape.scalar(ce));
    let node = if w.lambda != 0.0 {
        let tri = tape.triplet_batch_hard(features, labels, w.margin)?;
        details.insert(format!("{prefix}triplet"), tape.scalar(tri));
        let scaled = tape.scale(tri, w.lambda);
        tape.add(ce, scaled)?
    } else {
        ce
    };
    Ok(PsIdTerm {
        value: tape.scalar(node),
        node,
    })
}

struct AdvTerm {
    loss: Var,
    value: f64,
    stats: Vec<(BatchNorm, BatchStats)>,
}

fn adv_term(
    tape: &mut Tape,
    disc: &Discriminator,
    features: Var,
    centroids: Option<&Array2<f64>>,
    cameras: &[usize],
    phase: Phase,
    mu: f64,
) -> Result<AdvTerm> {
    let routed = match phase {
        Phase::Joint => route_features(tape, features, RoutingMode::GradientReversal, mu, true),
        Phase::Discriminator => route_features(tape, features, RoutingMode::Alternating, mu, false),
        Phase::Backbone => route_features(tape, features, RoutingMode::Alternating, mu, true),
    };
    let cond = if disc.is_conditional() {
        let c = centroids.ok_or(Error::MissingCentroid(0))?;
        Some(tape.leaf(c.clone()))
    } else {
        None
    };
    let pass = disc.forward(tape, routed, cond, true)?;
    let loss = tape.cross_entropy(pass.probs, cameras)?;
    Ok(AdvTerm {
        value: tape.scalar(loss),
        loss,
        stats: pass.stats,
    })
}

/// Sums `terms` on the tape (at least one term).
fn tape_sum(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Adds the adversarial losses to the phase total: reversal and discriminator
/// phases add them as-is (the reversal node applies −μ), the backbone phase
/// scales them by −μ explicitly.
fn phase_total(tape: &mut Tape, ps: &[Var], adv: &[Var], phase: Phase, mu: f64) -> Result<Var> {
    match phase {
        Phase::Discriminator => tape_sum(tape, adv),
        Phase::Joint => {
            let mut all = ps.to_vec();
            all.extend_from_slice(adv);
            tape_sum(tape, &all)
        }
        Phase::Backbone => {
            let mut all = ps.to_vec();
            for &a in adv {
                all.push(tape.scale(a, -mu));
            }
            tape_sum(tape, &all)
        }
    }
}

fn minmax_values(
    ps: Vec<(String, f64)>,
    adv: Vec<(String, f64)>,
    mu: f64,
) -> (LossValue, Option<LossValue>) {
    let mut parts: Vec<LossPart> = ps
        .into_iter()
        .map(|(name, value)| LossPart {
            name,
            weight: 1.0,
            value,
        })
        .collect();
    let disc = (!adv.is_empty()).then(|| {
        LossValue::from_parts(
            adv.iter()
                .map(|(name, value)| LossPart {
                    name: name.clone(),
                    weight: 1.0,
                    value: *value,
                })
                .collect(),
        )
    });
    parts.extend(adv.into_iter().map(|(name, value)| LossPart {
        name,
        weight: -mu,
        value,
    }));
    (LossValue::from_parts(parts), disc)
}

/// Single model: `ps_id − μ·adv` with at most one discriminator.
pub fn single_composition(
    tape: &mut Tape,
    model: &EmbeddingModel,
    disc: Option<&Discriminator>,
    batch: &PseudoBatch,
    w: &ObjectiveWeights,
    phase: Phase,
) -> Result<Objective> {
    let mut details = BTreeMap::new();
    let x = tape.leaf(batch.input.clone());
    let vars = model.forward(tape, x)?;
    let f = vars.branch(Branch::Full);
    let ps = if phase == Phase::Discriminator {
        None
    } else {
        Some(ps_id_term(
            tape,
            model,
            f,
            &batch.labels,
            w,
            "",
            &mut details,
        )?)
    };
    let adv = match disc {
        Some(d) => Some(adv_term(
            tape,
            d,
            f,
            batch.centroids.as_ref(),
            &batch.cameras,
            phase,
            w.mu,
        )?),
        None => None,
    };
    let ps_nodes: Vec<Var> = ps.iter().map(|p| p.node).collect();
    let adv_nodes: Vec<Var> = adv.iter().map(|a| a.loss).collect();
    let total = match (phase, disc) {
        (Phase::Discriminator, None) => {
            return Err(Error::invalid(
                "discriminator phase without a discriminator",
            ))
        }
        (_, None) => ps_nodes[0],
        _ => phase_total(tape, &ps_nodes, &adv_nodes, phase, w.mu)?,
    };
    let (generator, discriminator) = minmax_values(
        ps.iter().map(|p| ("ps_id".to_string(), p.value)).collect(),
        adv.iter().map(|a| ("adv".to_string(), a.value)).collect(),
        w.mu,
    );
    Ok(Objective {
        total,
        generator,
        discriminator,
        details,
        disc_stats: adv.into_iter().map(|a| a.stats).collect(),
    })
}

/// Multi-branch composition: per-branch triplet losses summed, minus μ times
/// one camera loss per branch. Each branch has its own batch (sampled by that
/// branch's pseudo-labels); conditioning centroids come from the full-body
/// labeling.
pub fn ssg_composition(
    tape: &mut Tape,
    model: &EmbeddingModel,
    discs: Option<&BTreeMap<Branch, Discriminator>>,
    batches: &BTreeMap<Branch, PseudoBatch>,
    w: &ObjectiveWeights,
    phase: Phase,
) -> Result<Objective> {
    let mut details = BTreeMap::new();
    let mut ps_nodes = Vec::new();
    let mut ps_vals = Vec::new();
    let mut adv_nodes = Vec::new();
    let mut adv_vals = Vec::new();
    let mut stats = Vec::new();
    for b in Branch::ALL {
        let batch = batches
            .get(&b)
            .ok_or_else(|| Error::MissingBranch(b.to_string()))?;
        let x = tape.leaf(batch.input.clone());
        let vars = model.forward(tape, x)?;
        let feat = vars.branch(b);
        if phase != Phase::Discriminator {
            let tri = tape.triplet_batch_hard(feat, &batch.labels, w.margin)?;
            details.insert(format!("{b}.triplet"), tape.scalar(tri));
            ps_vals.push((format!("ps_id_{b}"), tape.scalar(tri)));
            ps_nodes.push(tri);
        }
        if let Some(discs) = discs {
            let d = discs
                .get(&b)
                .ok_or_else(|| Error::MissingBranch(b.to_string()))?;
            let a = adv_term(
                tape,
                d,
                feat,
                batch.centroids.as_ref(),
                &batch.cameras,
                phase,
                w.mu,
            )?;
            adv_vals.push((format!("adv_{b}"), a.value));
            adv_nodes.push(a.loss);
            stats.push(a.stats);
        }
    }
    let total = if discs.is_some() {
        phase_total(tape, &ps_nodes, &adv_nodes, phase, w.mu)?
    } else if phase == Phase::Discriminator {
        return Err(Error::invalid("discriminator phase without discriminators"));
    } else {
        tape_sum(tape, &ps_nodes)?
    };
    let (generator, discriminator) = minmax_values(ps_vals, adv_vals, w.mu);
    Ok(Objective {
        total,
        generator,
        discriminator,
        details,
        disc_stats: stats,
    })
}

/// Two-model composition: both models' pseudo-identity losses plus one
/// camera loss per model, on a shared batch.
pub fn mmt_composition(
    tape: &mut Tape,
    pair: &ModelPair,
    discs: Option<[&Discriminator; 2]>,
    batch: &PseudoBatch,
    w: &ObjectiveWeights,
    phase: Phase,
) -> Result<Objective> {
    pair.check_independent()?;
    let mut details = BTreeMap::new();
    let mut ps_nodes = Vec::new();
    let mut ps_vals = Vec::new();
    let mut adv_nodes = Vec::new();
    let mut adv_vals = Vec::new();
    let mut stats = Vec::new();
    for (i, model) in pair.models().into_iter().enumerate() {
        let tag = i + 1;
        let x = tape.leaf(batch.input.clone());
        let vars = model.forward(tape, x)?;
        let f = vars.branch(Branch::Full);
        if phase != Phase::Discriminator {
            let p = ps_id_term(
                tape,
                model,
                f,
                &batch.labels,
                w,
                &format!("m{tag}."),
                &mut details,
            )?;
            ps_vals.push((format!("ps_id_{tag}"), p.value));
            ps_nodes.push(p.node);
        }
        if let Some(discs) = discs {
            let a = adv_term(
                tape,
                discs[i],
                f,
                batch.centroids.as_ref(),
                &batch.cameras,
                phase,
                w.mu,
            )?;
            adv_vals.push((format!("adv_{tag}"), a.value));
            adv_nodes.push(a.loss);
            stats.push(a.stats);
        }
    }
    let total = if discs.is_some() {
        phase_total(tape, &ps_nodes, &adv_nodes, phase, w.mu)?
    } else if phase == Phase::Discriminator {
        return Err(Error::invalid("discriminator phase without discriminators"));
    } else {
        tape_sum(tape, &ps_nodes)?
    };
    let (generator, discriminator) = minmax_values(ps_vals, adv_vals, w.mu);
    Ok(Objective {
        total,
        generator,
        discriminator,
        details,
        disc_stats: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{DiscriminatorConfig, MergeMode};
    use crate::embedding::{BackboneConfig, EmbeddingConfig};
    use ndarray::array;

    #[test]
    fn ce_analytic_cases() {
        let perfect = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(ce_id_loss(&perfect, &[1, 0]).unwrap().value, 0.0);
        let uniform = Array2::from_elem((3, 4), 0.25);
        assert!((ce_id_loss(&uniform, &[0, 1, 3]).unwrap().value - 4f64.ln()).abs() < 1e-12);
        let probs = array![[0.5, 0.5], [0.75, 0.25]];
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((ce_id_loss(&probs, &[0, 1]).unwrap().value - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_floors_zero_probability() {
        let probs = array![[1.0, 0.0]];
        let v = ce_id_loss(&probs, &[1]).unwrap().value;
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn ce_rejects_non_stochastic_rows() {
        assert!(ce_id_loss(&array![[0.5, 0.6]], &[0]).is_err());
    }

    #[test]
    fn camera_loss_matches_id_loss() {
        let probs = array![[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]];
        assert_eq!(
            camera_adv_loss(&probs, &[2, 0]).unwrap().value,
            ce_id_loss(&probs, &[2, 0]).unwrap().value
        );
        let uniform = Array2::from_elem((2, 6), 1.0 / 6.0);
        assert!((camera_adv_loss(&uniform, &[0, 5]).unwrap().value - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn triplet_identical_features_give_margin() {
        let x = Array2::from_elem((4, 3), 0.3);
        let v = triplet_loss(&x, &[0, 0, 1, 1], 0.5).unwrap().value;
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn triplet_inactive_hinge_is_zero() {
        let x = array![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        assert_eq!(triplet_loss(&x, &[0, 0, 1, 1], 0.5).unwrap().value, 0.0);
    }

    #[test]
    fn id_loss_combines_parts() {
        let probs = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let x = array![[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.2, 0.0]];
        let labels = [0, 0, 1, 1];
        let ce_only = id_loss(&probs, &x, &labels, 0.0, 0.5).unwrap();
        assert_eq!(ce_only.value, ce_id_loss(&probs, &labels).unwrap().value);
        assert!(ce_only.part("triplet").is_none());
        let full = id_loss(&probs, &x, &labels, 1.0, 0.5).unwrap();
        assert!(full.is_consistent(1e-6));
        let tri = triplet_loss(&x, &labels, 0.5).unwrap().value;
        assert!((full.value - (ce_only.value + tri)).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_arithmetic() {
        let v = LossValue::from_parts(vec![
            LossPart {
                name: "ce".into(),
                weight: 1.0,
                value: 0.5,
            },
            LossPart {
                name: "triplet".into(),
                weight: 1.0,
                value: 0.2,
            },
        ]);
        assert!((v.value - 0.7).abs() < 1e-12);
    }

    #[test]
    fn minmax_values_arithmetic() {
        let ps = LossValue::single("ps_id", 1.0);
        let adv = LossValue::single("adv", 2.0);
        let v = adversarial_objective(&ps, &adv, 0.1).unwrap();
        assert!((v.generator - 0.8).abs() < 1e-12);
        assert_eq!(
            adversarial_objective(&ps, &adv, 0.0).unwrap().generator,
            1.0
        );
        assert!(adversarial_objective(&ps, &adv, -0.1).is_err());
    }

    #[test]
    fn missing_centroid_is_an_error() {
        let disc = Discriminator::new(
            DiscriminatorConfig {
                feature_dim: 2,
                hidden: 4,
                num_cameras: 2,
                conditional: true,
                merge: MergeMode::Sum,
                head_gain: 0.01,
            },
            0,
        )
        .unwrap();
        let x = array![[0.0, 1.0], [1.0, 0.0]];
        let centroids = vec![Some(vec![0.0, 1.0]), None];
        assert!(matches!(
            conditional_camera_adv_loss(&x, &centroids, &[0, 1], &disc, true),
            Err(Error::MissingCentroid(1))
        ));
    }

    fn tiny_model(seed: u64) -> EmbeddingModel {
        let mut m = EmbeddingModel::new(
            EmbeddingConfig {
                backbone: BackboneConfig::Mlp {
                    input_dim: 3,
                    hidden: 6,
                    map_height: 2,
                },
                feature_dim: 4,
                num_source_ids: None,
            },
            seed,
        )
        .unwrap();
        m.reset_pseudo_head(2, seed).unwrap();
        m
    }

    fn tiny_batch() -> PseudoBatch {
        PseudoBatch {
            input: Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.9).sin()),
            labels: vec![0, 0, 1, 1],
            cameras: vec![0, 1, 0, 1],
            centroids: Some(Array2::from_shape_fn((4, 4), |(i, j)| {
                ((i / 2 + j) as f64).cos()
            })),
            sample_indices: vec![0, 1, 2, 3],
        }
    }

    fn disc(conditional: bool, seed: u64) -> Discriminator {
        Discriminator::new(
            DiscriminatorConfig {
                feature_dim: 4,
                hidden: 8,
                num_cameras: 2,
                conditional,
                merge: MergeMode::Sum,
                head_gain: 0.01,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn mmt_records_four_parts_and_symmetry() {
        let m1 = tiny_model(3);
        let m2 = tiny_model(3);
        let pair = ModelPair::new(m1, m2).unwrap();
        let d1 = disc(true, 5);
        let d2 = disc(true, 5);
        let w = ObjectiveWeights {
            lambda: 1.0,
            margin: 0.5,
            mu: 0.1,
        };
        let mut tape = Tape::new();
        let obj = mmt_composition(
            &mut tape,
            &pair,
            Some([&d1, &d2]),
            &tiny_batch(),
            &w,
            Phase::Joint,
        )
        .unwrap();
        assert_eq!(obj.generator.parts.len(), 4);
        assert_eq!(obj.generator.part("ps_id_1"), obj.generator.part("ps_id_2"));
        assert_eq!(obj.generator.part("adv_1"), obj.generator.part("adv_2"));
        assert!(obj.generator.is_consistent(1e-12));
    }

    #[test]
    fn mmt_without_adversary_sums_baselines() {
        let pair = ModelPair::new(tiny_model(1), tiny_model(2)).unwrap();
        let w = ObjectiveWeights {
            lambda: 1.0,
            margin: 0.5,
            mu: 0.0,
        };
        let batch = tiny_batch();
        let mut tape = Tape::new();
        let obj = mmt_composition(&mut tape, &pair, None, &batch, &w, Phase::Joint).unwrap();
        let mut singles = 0.0;
        for m in pair.models() {
            let mut t = Tape::new();
            singles += single_composition(&mut t, m, None, &batch, &w, Phase::Joint)
                .unwrap()
                .generator
                .value;
        }
        assert!((tape.scalar(obj.total) - singles).abs() < 1e-12);
    }

    #[test]
    fn ssg_uniform_discriminators_give_three_log_k() {
        let model = tiny_model(4);
        let mut discs = BTreeMap::new();
        for (i, b) in Branch::ALL.into_iter().enumerate() {
            let mut d = disc(true, i as u64);
            d.zero_head();
            discs.insert(b, d);
        }
        let batches: BTreeMap<Branch, PseudoBatch> =
            Branch::ALL.iter().map(|&b| (b, tiny_batch())).collect();
        let w = ObjectiveWeights {
            lambda: 1.0,
            margin: 0.5,
            mu: 0.05,
        };
        let mut tape = Tape::new();
        let obj =
            ssg_composition(&mut tape, &model, Some(&discs), &batches, &w, Phase::Joint).unwrap();
        let adv = obj.discriminator.unwrap();
        assert!((adv.value - 3.0 * 2f64.ln()).abs() < 1e-12);
        for p in obj
            .generator
            .parts
            .iter()
            .filter(|p| p.name.starts_with("adv_"))
        {
            assert_eq!(p.weight, -0.05);
        }
        let mut t0 = Tape::new();
        let plain = ssg_composition(&mut t0, &model, None, &batches, &w, Phase::Joint).unwrap();
        let ps_sum: f64 = obj
            .generator
            .parts
            .iter()
            .filter(|p| p.name.starts_with("ps_id_"))
            .map(|p| p.value)
            .sum();
        assert!((plain.generator.value - ps_sum).abs() < 1e-12);
    }

    #[test]
    fn ssg_missing_branch_is_an_error() {
        let model = tiny_model(4);
        let mut batches: BTreeMap<Branch, PseudoBatch> =
            Branch::ALL.iter().map(|&b| (b, tiny_batch())).collect();
        batches.remove(&Branch::Lower);
        let w = ObjectiveWeights {
            lambda: 1.0,
            margin: 0.5,
            mu: 0.05,
        };
        let mut tape = Tape::new();
        assert!(matches!(
            ssg_composition(&mut tape, &model, None, &batches, &w, Phase::Joint),
            Err(Error::MissingBranch(_))
        ));
    }
}
