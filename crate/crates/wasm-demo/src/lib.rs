//! Browser demo over the synthetic camera generator.
//!
//! Every export returns a JSON string so the page needs no bindings beyond
//! the generated glue.

use ndarray::Array2;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use reid_core::data::{generate_synthetic, DatasetSplit, SyntheticSpec};
use reid_core::evaluation::{mutual_information, pca_projection, score_retrieval, RetrievalSet};

fn spec(correlation: f64, shift: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_identities: 12,
        num_cameras: 4,
        samples_per_id: 10,
        id_dim: 16,
        camera_shift_scale: shift,
        correlation,
        noise_sigma: 0.3,
        seed,
        eval_samples_per_id: Some(4),
    }
}

fn features(split: &DatasetSplit) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = split.samples().iter().map(|s| s.payload.to_row()).collect();
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rows share a width")
}

fn ids(split: &DatasetSplit) -> Vec<u32> {
    split
        .samples()
        .iter()
        .map(|s| s.person_id.unwrap_or(0))
        .collect()
}

#[derive(Serialize)]
struct Point {
    x: f64,
    y: f64,
    camera: usize,
    id: u32,
}

#[derive(Serialize)]
struct Scatter {
    points: Vec<Point>,
    explained: Vec<f64>,
    mi: f64,
}

pub fn scatter_json(correlation: f64, shift: f64, seed: u64) -> Result<String, String> {
    let s = generate_synthetic(&spec(correlation, shift, seed)).map_err(|e| e.to_string())?;
    let train = &s.target_train;
    let cams = train.cameras();
    let p = pca_projection(&features(train), &cams, 2).map_err(|e| e.to_string())?;
    let pid = ids(train);
    let points = p
        .points
        .rows()
        .into_iter()
        .zip(cams.iter().zip(&pid))
        .map(|(r, (&camera, &id))| Point {
            x: r[0],
            y: r[1],
            camera,
            id,
        })
        .collect();
    let mi = mutual_information(&pid, &cams).map_err(|e| e.to_string())?;
    serde_json::to_string(&Scatter {
        points,
        explained: p.explained_variance_ratio,
        mi,
    })
    .map_err(|e| e.to_string())
}

pub fn mi_sweep_json(steps: usize, seed: u64) -> Result<String, String> {
    let steps = steps.clamp(2, 50);
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let c = i as f64 / (steps - 1) as f64;
        let s = generate_synthetic(&spec(c, 2.0, seed)).map_err(|e| e.to_string())?;
        let mi = mutual_information(&ids(&s.target_train), &s.target_train.cameras())
            .map_err(|e| e.to_string())?;
        out.push((c, mi));
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

pub fn retrieval_json(correlation: f64, shift: f64, seed: u64) -> Result<String, String> {
    let s = generate_synthetic(&spec(correlation, shift, seed)).map_err(|e| e.to_string())?;
    let set = |split: &DatasetSplit| {
        let flags: Vec<bool> = split.samples().iter().map(|x| x.distractor).collect();
        (features(split), ids(split), split.cameras(), flags)
    };
    let (qf, qi, qc, qd) = set(&s.query);
    let (gf, gi, gc, gd) = set(&s.gallery);
    let r = score_retrieval(
        RetrievalSet {
            features: &qf,
            ids: &qi,
            cameras: &qc,
            distractor: &qd,
        },
        RetrievalSet {
            features: &gf,
            ids: &gi,
            cameras: &gc,
            distractor: &gd,
        },
    )
    .map_err(|e| e.to_string())?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

/// Raw synthetic features projected to two dimensions, colored by camera.
#[wasm_bindgen]
pub fn scatter(correlation: f64, shift: f64, seed: u32) -> Result<String, JsError> {
    scatter_json(correlation, shift, seed as u64).map_err(|e| JsError::new(&e))
}

/// Identity/camera mutual information as the correlation knob moves from 0 to 1.
#[wasm_bindgen]
pub fn mi_sweep(steps: u32, seed: u32) -> Result<String, JsError> {
    mi_sweep_json(steps as usize, seed as u64).map_err(|e| JsError::new(&e))
}

/// Cross-camera retrieval on raw features.
#[wasm_bindgen]
pub fn retrieval(correlation: f64, shift: f64, seed: u32) -> Result<String, JsError> {
    retrieval_json(correlation, shift, seed as u64).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_has_one_point_per_training_sample() {
        let v: serde_json::Value =
            serde_json::from_str(&scatter_json(0.5, 2.0, 1).unwrap()).unwrap();
        assert_eq!(v["points"].as_array().unwrap().len(), 120);
        assert_eq!(v["explained"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn mi_sweep_ends_higher_than_it_starts() {
        let v: Vec<(f64, f64)> = serde_json::from_str(&mi_sweep_json(5, 0).unwrap()).unwrap();
        assert_eq!(v.len(), 5);
        assert!(v[4].1 > v[0].1);
    }

    #[test]
    fn larger_camera_shift_hurts_raw_retrieval() {
        let score = |shift| {
            let v: serde_json::Value =
                serde_json::from_str(&retrieval_json(0.0, shift, 3).unwrap()).unwrap();
            v["mAP"].as_f64().unwrap()
        };
        assert!(score(6.0) < score(0.0));
    }
}
