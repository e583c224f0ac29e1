#![allow(dead_code)]

use fairmimic::data::{simulate, Dataset, SimSpec};
use fairmimic::model::{MimicModel, ModelFrame};

/// Generating model used across the integration tests.
pub fn truth(p: usize, q: usize) -> MimicModel {
    let mut m = MimicModel::with_dims(p, q);
    let loadings = [1.0, 0.8, 1.2, 0.6, 0.9, 0.7, 1.1, 0.5];
    let intercepts = [0.5, -0.3, 1.0, 0.2, 0.0, 0.7, -0.5, 0.3];
    let resid = [0.5, 0.6, 0.4, 0.7, 0.5, 0.8, 0.45, 0.6];
    let beta = [0.5, -0.4, 0.3, 0.2, -0.1, 0.25];
    m.loadings = loadings[..p].to_vec();
    m.intercepts = intercepts[..p].to_vec();
    m.resid_vars = resid[..p].to_vec();
    m.struct_coefs = beta[..q].to_vec();
    m.sens_coef = 0.4;
    m.latent_var = 1.0;
    m
}

pub struct Draw {
    pub data: Dataset,
    pub frame: ModelFrame,
    pub latent: Vec<f64>,
}

pub fn draw(model: &MimicModel, n: usize, seed: u64) -> Draw {
    draw_spec(&SimSpec::new(n, model.clone(), 0.3, seed))
}

pub fn draw_spec(spec: &SimSpec) -> Draw {
    let sim = simulate(spec).expect("valid simulation spec");
    let frame = sim.data.model_frame().expect("simulated data form a frame");
    Draw {
        data: sim.data,
        frame,
        latent: sim.latent,
    }
}

/// `truth(p, q)` with δ_j set to `delta` and freed.
pub fn with_dif(mut m: MimicModel, j: usize, delta: f64) -> MimicModel {
    m.dif_offsets[j] = delta;
    m.free_mask[j] = true;
    m
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
