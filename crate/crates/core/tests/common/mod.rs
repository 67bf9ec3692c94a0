#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rrvq::codebook::{make_projection, sample_subcodebook, BigCodebook, Codebook};
use rrvq::quantizer::{QuantizerStack, QuantizerStage, ResampleMode, StageKind};
use rrvq::rng::{self, label, Rng};
use rrvq::Matrix;

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn gaussian_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

pub const MODES: [ResampleMode; 3] = [
    ResampleMode::PerFrame,
    ResampleMode::PerBatch,
    ResampleMode::FixedPerRun,
];

/// A small stack with random shape: trainable and random stage counts,
/// sizes, gains, normalization and (sometimes) a shared projection width.
pub fn random_stack(rng: &mut Rng, mode: ResampleMode) -> QuantizerStack {
    let dim = rng.random_range(1..=12usize);
    let d_proj = if dim > 1 && rng.random_bool(0.3) {
        Some(rng.random_range(1..dim))
    } else {
        None
    };
    let wd = d_proj.unwrap_or(dim);
    let n_t = rng.random_range(0..=3usize);
    let n_r = rng.random_range(0..=3usize);
    let n_big = rng.random_range(8..=96usize);
    let disjoint = rng.random_bool(0.5);
    let mut stages = Vec::new();
    for i in 0..n_t + n_r {
        let mut st = if i < n_t {
            let n = rng.random_range(1..=24usize);
            let cb = Codebook::new(gaussian_matrix(n, wd, rng), format!("t{i}"), true, 0).unwrap();
            QuantizerStage::trainable(cb)
        } else {
            let cap = if disjoint { n_big / n_r } else { n_big };
            QuantizerStage {
                kind: StageKind::Random {
                    sample_size: rng.random_range(1..=cap),
                    gain: rng.random_range(0.05..1.5),
                },
                projection: None,
                normalize: false,
            }
        };
        st.normalize = rng.random_bool(0.3);
        if let Some(p) = d_proj {
            st.projection = Some(make_projection(dim, p, rng.random()).unwrap());
        }
        stages.push(st);
    }
    let big = Arc::new(BigCodebook::gaussian(n_big, wd, rng.random()).unwrap());
    QuantizerStack::new(dim, stages, Some(big), mode, disjoint, rng.random()).unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|a| a / n).collect()
    }
}

fn unit_f32(c: &[f32]) -> Vec<f32> {
    let n = c.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt();
    if n < 1e-12 {
        c.to_vec()
    } else {
        c.iter().map(|&a| (a as f64 / n) as f32).collect()
    }
}

/// Straight exhaustive scan, lowest index on ties.
pub fn brute_nearest(x: &[f64], words: &[Vec<f32>], scale: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in words.iter().enumerate() {
        let mut d = 0.0;
        for k in 0..x.len() {
            let t = x[k] - scale * c[k] as f64;
            d += t * t;
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// (position, big index) per stage for every frame, computed by the plain
/// residual loop with no shared code beyond sub-codebook sampling.
pub fn naive_tokens(stack: &QuantizerStack, frames: &Matrix) -> Vec<Vec<(u32, Option<u32>)>> {
    let big = stack.big().unwrap();
    let n_r = stack.n_random();
    let draw = |r: &mut Rng| -> Vec<Vec<u32>> {
        let mut used: Vec<u32> = Vec::new();
        let mut out = Vec::new();
        for st in stack.stages() {
            if let StageKind::Random { sample_size, .. } = st.kind {
                let ex: &[u32] = if stack.disjoint() { &used } else { &[] };
                let sub = sample_subcodebook(big, sample_size, r, ex).unwrap();
                used.extend_from_slice(sub.indices());
                out.push(sub.indices().to_vec());
            }
        }
        out
    };
    let seed = stack.master_seed();
    let shared = match stack.resample_mode() {
        ResampleMode::PerFrame => None,
        ResampleMode::PerBatch => Some(draw(&mut rng::stream(seed, &[label::BATCH, 0]))),
        ResampleMode::FixedPerRun => Some(draw(&mut rng::stream(seed, &[label::FIXED]))),
    };
    let mut all = Vec::new();
    for t in 0..frames.rows() {
        let subs = match &shared {
            Some(s) => s.clone(),
            None if n_r > 0 => draw(&mut rng::stream(seed, &[label::FRAME, t as u64])),
            None => Vec::new(),
        };
        let mut r: Vec<f64> = frames.row(t).iter().map(|&v| v as f64).collect();
        let mut toks = Vec::new();
        let mut j = 0;
        for st in stack.stages() {
            let w = match &st.projection {
                Some(p) => (0..p.d_proj())
                    .map(|k| p.down_row(k).iter().zip(&r).map(|(a, b)| a * b).sum())
                    .collect(),
                None => r.clone(),
            };
            let (words, big_ids): (Vec<Vec<f32>>, Option<Vec<u32>>) = match &st.kind {
                StageKind::Trainable(cb) => ((0..cb.len()).map(|i| cb.codeword(i).to_vec()).collect(), None),
                StageKind::Random { .. } => {
                    let ids = subs[j].clone();
                    j += 1;
                    (
                        ids.iter().map(|&i| big.codebook().codeword(i as usize).to_vec()).collect(),
                        Some(ids),
                    )
                }
            };
            let g = st.gain();
            let pos = if st.normalize {
                let ws: Vec<Vec<f32>> = words.iter().map(|c| unit_f32(c)).collect();
                brute_nearest(&unit(&w), &ws, 1.0).0
            } else {
                brute_nearest(&w, &words, g).0
            };
            let c: Vec<f64> = words[pos].iter().map(|&v| g * v as f64).collect();
            let up = match &st.projection {
                Some(p) => {
                    let mut u = vec![0.0; r.len()];
                    for (k, ck) in c.iter().enumerate() {
                        for (o, d) in u.iter_mut().zip(p.down_row(k)) {
                            *o += ck * d;
                        }
                    }
                    u
                }
                None => c,
            };
            r.iter_mut().zip(&up).for_each(|(a, b)| *a -= b);
            toks.push((pos as u32, big_ids.map(|ids| ids[pos])));
        }
        all.push(toks);
    }
    all
}
