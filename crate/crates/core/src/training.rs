//! Residual k-means with exponential-moving-average codebook updates.
//!
//! Trainable stages are fitted one after the other, each on the residuals
//! left by the stages before it. Random stages never touch their codewords;
//! they only get a scalar output gain fitted by least squares so that the
//! fixed Gaussian big codebook matches the scale of the residual it sees.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, SubCodebook};
use crate::error::{Error, Result};
use crate::matrix::{squared_norm, Matrix};
use crate::par::{self, Execution};
use crate::quantizer::{QuantizationResult, QuantizerStack, StageKind, SubView};
use crate::rng::{self, label};

/// EMA statistics of one codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    /// Smoothed cluster sizes.
    pub counts: Vec<f64>,
    /// Smoothed sums of assigned vectors, `N x D` row-major.
    pub sums: Vec<f64>,
    pub dim: usize,
    pub decay: f64,
    pub epsilon: f64,
}

impl EmaState {
    /// Unit prior count per code, with the current codeword as prior sum.
    pub fn new(cb: &Codebook, decay: f64, epsilon: f64) -> Result<Self> {
        let sums = cb.codewords().as_slice().iter().map(|&v| v as f64).collect();
        Self::from_parts(vec![1.0; cb.len()], sums, cb.dim(), decay, epsilon)
    }

    pub fn from_parts(counts: Vec<f64>, sums: Vec<f64>, dim: usize, decay: f64, epsilon: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        if epsilon <= 0.0 {
            return Err(Error::invalid(format!("EMA smoothing must be > 0, got {epsilon}")));
        }
        if sums.len() != counts.len() * dim {
            return Err(Error::invalid("EMA sums do not match counts x dim"));
        }
        if counts.iter().any(|&c| c < 0.0) {
            return Err(Error::invalid("EMA counts must be non-negative"));
        }
        Ok(Self {
            counts,
            sums,
            dim,
            decay,
            epsilon,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Codewords implied by the statistics, Laplace-smoothed. `None` while
    /// no mass has been observed at all.
    pub fn codewords(&self) -> Option<Vec<f64>> {
        let n = self.len() as f64;
        let total: f64 = self.counts.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut out = self.sums.clone();
        for (i, row) in out.chunks_exact_mut(self.dim.max(1)).enumerate() {
            let smoothed = (self.counts[i] + self.epsilon) / (total + n * self.epsilon) * total;
            row.iter_mut().for_each(|v| *v /= smoothed);
        }
        Some(out)
    }
}

/// One EMA step: decays the statistics, folds in `batch` (`M x D`,
/// row-major) under `assignments`, and rewrites `cb` from the result.
pub fn ema_update(state: &mut EmaState, cb: &mut Codebook, batch: &[f64], assignments: &[usize]) -> Result<()> {
    let d = state.dim;
    if cb.len() != state.len() || cb.dim() != d {
        return Err(Error::invalid("EMA state and codebook shapes differ"));
    }
    if batch.len() != assignments.len() * d {
        return Err(Error::invalid(format!(
            "batch of {} values does not hold {} vectors of dimension {d}",
            batch.len(),
            assignments.len()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= state.len()) {
        return Err(Error::invalid(format!(
            "assignment {bad} out of range for a codebook of size {}",
            state.len()
        )));
    }
    let n = state.len();
    let mut batch_counts = vec![0.0; n];
    let mut batch_sums = vec![0.0; n * d];
    for (x, &a) in batch.chunks_exact(d).zip(assignments) {
        batch_counts[a] += 1.0;
        for (s, v) in batch_sums[a * d..(a + 1) * d].iter_mut().zip(x) {
            *s += v;
        }
    }
    let g = state.decay;
    for (c, m) in state.counts.iter_mut().zip(&batch_counts) {
        *c = g * *c + (1.0 - g) * m;
    }
    for (s, b) in state.sums.iter_mut().zip(&batch_sums) {
        *s = g * *s + (1.0 - g) * b;
    }
    if let Some(words) = state.codewords() {
        let data = words.iter().map(|&v| v as f32).collect();
        cb.set_codewords(Matrix::from_vec(n, d, data)?)?;
    }
    Ok(())
}

/// Knobs of [`fit_codebooks`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub passes: usize,
    pub decay: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Fit output gains of random stages.
    pub calibrate_gains: bool,
    /// Training frames used for gain fitting.
    pub calibration_frames: usize,
    /// Seeds the per-pass shuffles.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            passes: 25,
            decay: 0.99,
            epsilon: 1e-5,
            batch_size: 1024,
            calibrate_gains: true,
            calibration_frames: 4096,
            seed: 0,
        }
    }
}

/// Per-stage outcome of a fit, measured on the training residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean squared residual norm after each stage; entry 0 is the input.
    pub stage_energies: Vec<f64>,
    /// Output gain per stage (1 for trainable stages).
    pub gains: Vec<f64>,
}

/// Positions assigned to each working vector. Distances are taken in `f32`:
/// assignments only steer the fit, they are never emitted.
fn assign(
    exec: Execution,
    cb: &Codebook,
    normalize: bool,
    search: &[f64],
    d: usize,
) -> Vec<usize> {
    let words = if normalize {
        crate::codebook::l2_normalize_rows(cb.codewords()).matrix
    } else {
        cb.codewords().clone()
    };
    let words = words.as_slice();
    let m = search.len() / d;
    par::map_range(exec, m, |i| {
        let x: Vec<f32> = search[i * d..(i + 1) * d].iter().map(|&v| v as f32).collect();
        let mut best = (0usize, f32::INFINITY);
        for (pos, c) in words.chunks_exact(d).enumerate() {
            let mut dist = 0.0f32;
            for (a, b) in x.iter().zip(c) {
                let t = a - b;
                dist += t * t;
            }
            if dist < best.1 {
                best = (pos, dist);
            }
        }
        best.0
    })
}

pub fn fit_codebooks(stack: &mut QuantizerStack, data: &Matrix, cfg: &TrainingConfig) -> Result<FitReport> {
    fit_codebooks_with(stack, data, cfg, Execution::default())
}

/// Fits every trainable stage in order, then calibrates random-stage gains.
pub fn fit_codebooks_with(
    stack: &mut QuantizerStack,
    data: &Matrix,
    cfg: &TrainingConfig,
    exec: Execution,
) -> Result<FitReport> {
    let dim = stack.dim();
    if data.cols() != dim {
        return Err(Error::invalid(format!(
            "training data has dimension {} but the stack expects {dim}",
            data.cols()
        )));
    }
    if data.rows() == 0 {
        return Err(Error::invalid("training data is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("training batch size must be >= 1"));
    }
    let t = data.rows();
    let mut residuals: Vec<f64> = data.as_slice().iter().map(|&v| v as f64).collect();
    let mut energies = vec![mean_energy(&residuals, dim)];
    let mut gains = Vec::with_capacity(stack.stages().len());
    let n_trainable = stack.n_trainable();

    for k in 0..n_trainable {
        let stage = stack.stages()[k].clone();
        let StageKind::Trainable(mut cb) = stage.kind.clone() else {
            unreachable!("trainable stages come first");
        };
        if t < cb.len() {
            log::warn!(
                "stage {k}: {t} training frames for a codebook of {} codewords",
                cb.len()
            );
        }
        let wd = stage.working_dim(dim);
        // projected residuals feed the update; their normalized form feeds the search
        let mut work = Vec::with_capacity(t * wd);
        let mut search = Vec::with_capacity(t * wd);
        for r in residuals.chunks_exact(dim) {
            match &stage.projection {
                Some(p) => work.extend(p.project_down(r)),
                None => work.extend_from_slice(r),
            }
            let w = &work[work.len() - wd..];
            let mut s = w.to_vec();
            if stage.normalize {
                crate::codebook::normalize_in_place(&mut s);
            }
            search.extend(s);
        }

        let mut state = EmaState::new(&cb, cfg.decay, cfg.epsilon)?;
        let mut order: Vec<usize> = (0..t).collect();
        let mut batch_work = Vec::with_capacity(cfg.batch_size * wd);
        let mut batch_search = Vec::with_capacity(cfg.batch_size * wd);
        for pass in 0..cfg.passes {
            let mut r = rng::stream(cfg.seed, &[label::SHUFFLE, k as u64, pass as u64]);
            order.shuffle(&mut r);
            for chunk in order.chunks(cfg.batch_size) {
                batch_work.clear();
                batch_search.clear();
                for &i in chunk {
                    batch_work.extend_from_slice(&work[i * wd..(i + 1) * wd]);
                    batch_search.extend_from_slice(&search[i * wd..(i + 1) * wd]);
                }
                let assignments = assign(exec, &cb, stage.normalize, &batch_search, wd);
                ema_update(&mut state, &mut cb, &batch_work, &assignments)?;
            }
        }

        let assignments = assign(exec, &cb, stage.normalize, &search, wd);
        let fitted = crate::quantizer::QuantizerStage {
            kind: StageKind::Trainable(cb),
            ..stage
        };
        let StageKind::Trainable(cb) = &fitted.kind else { unreachable!() };
        let mut emitted = vec![0.0; dim];
        for (r, &a) in residuals.chunks_exact_mut(dim).zip(&assignments) {
            fitted.emit(cb.codeword(a), r, &mut emitted);
        }
        energies.push(mean_energy(&residuals, dim));
        gains.push(1.0);
        stack.stages_mut()[k] = fitted;
    }

    if stack.n_random() > 0 {
        let (random_gains, random_energies) = calibrate_random_stages(stack, &residuals, cfg, exec)?;
        gains.extend(random_gains);
        energies.extend(random_energies);
    }
    Ok(FitReport {
        stage_energies: energies,
        gains,
    })
}

fn mean_energy(flat: &[f64], dim: usize) -> f64 {
    let n = flat.len() / dim;
    flat.chunks_exact(dim).map(squared_norm).sum::<f64>() / n as f64
}

/// Least-squares output gains for the random stages, alternating selection
/// under a fixed gain with the closed-form gain under fixed selections.
fn calibrate_random_stages(
    stack: &mut QuantizerStack,
    residuals: &[f64],
    cfg: &TrainingConfig,
    exec: Execution,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = stack.dim();
    let t = (residuals.len() / dim).min(cfg.calibration_frames.max(1));
    let mut resid = residuals[..t * dim].to_vec();
    let first_random = stack.n_trainable();
    let n_stages = stack.stages().len();

    let draws: Vec<Vec<SubCodebook>> = match stack.fixed_draw() {
        Some(d) => vec![d.to_vec(); 1],
        None => (0..t)
            .map(|i| {
                let mut r = rng::stream(stack.master_seed(), &[label::CALIBRATION, i as u64]);
                stack.draw_subcodebooks(&mut r)
            })
            .collect::<Result<_>>()?,
    };
    let draw_for = |i: usize, j: usize| -> &SubCodebook {
        if draws.len() == 1 { &draws[0][j] } else { &draws[i][j] }
    };

    let mut gains = Vec::new();
    let mut energies = Vec::new();
    for (j, k) in (first_random..n_stages).enumerate() {
        let stage = stack.stages()[k].clone();
        let big = stack.big().expect("random stages imply a big codebook").codebook().clone();
        let work: Vec<Vec<f64>> = resid
            .chunks_exact(dim)
            .map(|r| match &stage.projection {
                Some(p) => p.project_down(r),
                None => r.to_vec(),
            })
            .collect();

        let select = |gain: f64| -> Vec<usize> {
            let mut st = stage.clone();
            if let StageKind::Random { gain: g, .. } = &mut st.kind {
                *g = gain;
            }
            par::map_range(exec, t, |i| {
                let view = SubView {
                    big: &big,
                    indices: draw_for(i, j).indices(),
                };
                st.select(&st.search_vector(&resid[i * dim..(i + 1) * dim]), &view)
            })
        };
        let ls_gain = |sel: &[usize]| -> f64 {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, &pos) in sel.iter().enumerate() {
                let c = big.codeword(draw_for(i, j).indices()[pos] as usize);
                for (w, &b) in work[i].iter().zip(c) {
                    num += w * b as f64;
                    den += (b as f64) * (b as f64);
                }
            }
            if den > 0.0 { (num / den).max(0.0) } else { 1.0 }
        };

        let mut gain = stage.gain();
        if cfg.calibrate_gains {
            // start from matching the average energy of the stage input
            let in_energy: f64 = work.iter().map(|w| squared_norm(w)).sum::<f64>() / t as f64;
            let cw_energy = (0..big.len())
                .map(|i| big.codeword(i).iter().map(|&b| (b as f64).powi(2)).sum::<f64>())
                .sum::<f64>()
                / big.len() as f64;
            if cw_energy > 0.0 {
                gain = (in_energy / cw_energy).sqrt();
            }
            let iterations = if stage.normalize { 1 } else { 20 };
            for _ in 0..iterations {
                let next = ls_gain(&select(gain));
                let done = (next - gain).abs() <= 1e-9 * gain.abs().max(1e-300);
                gain = next;
                if done {
                    break;
                }
            }
        }
        if let StageKind::Random { gain: g, .. } = &mut stack.stages_mut()[k].kind {
            *g = gain;
        }
        let fitted = stack.stages()[k].clone();
        let sel = select(gain);
        let mut emitted = vec![0.0; dim];
        for (i, r) in resid.chunks_exact_mut(dim).enumerate() {
            let idx = draw_for(i, j).indices()[sel[i]] as usize;
            fitted.emit(big.codeword(idx), r, &mut emitted);
        }
        gains.push(gain);
        energies.push(mean_energy(&resid, dim));
    }
    Ok((gains, energies))
}

/// Commitment and codebook losses of a quantization, as diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// Mean squared distance between each stage's input and its codeword.
    pub per_stage: Vec<f64>,
    pub commitment: f64,
    pub codebook: f64,
}

/// Without stop-gradients both losses reduce to the same number: the summed
/// per-stage mean squared distance between stage input and chosen codeword.
pub fn commitment_codebook_losses(frames: &Matrix, result: &QuantizationResult) -> Result<Losses> {
    if frames.rows() != result.frames.len() || frames.cols() != result.dim {
        return Err(Error::invalid("frames and quantization result disagree in shape"));
    }
    let n = result.n_stages();
    let t = result.frames.len().max(1) as f64;
    let mut per_stage = vec![0.0; n];
    for fq in &result.frames {
        for (k, slot) in per_stage.iter_mut().enumerate() {
            let dist: f64 = fq.residuals[k]
                .iter()
                .zip(&fq.codewords[k])
                .map(|(r, c)| (r - c).powi(2))
                .sum();
            *slot += dist;
        }
    }
    per_stage.iter_mut().for_each(|v| *v /= t);
    let total = per_stage.iter().sum();
    Ok(Losses {
        per_stage,
        commitment: total,
        codebook: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_hand_case() {
        let cb0 = Codebook::new(Matrix::from_rows(&[[0.0f32, 0.0]]).unwrap(), "c", true, 0).unwrap();
        let mut cb = cb0.clone();
        let mut st = EmaState::from_parts(vec![1.0], vec![0.0, 0.0], 2, 0.5, 1e-5).unwrap();
        ema_update(&mut st, &mut cb, &[2.0, 0.0, 4.0, 0.0], &[0, 0]).unwrap();
        assert!((st.counts[0] - 1.5).abs() < 1e-12);
        assert_eq!(st.sums, vec![3.0, 0.0]);
        assert!((cb.codeword(0)[0] - 2.0).abs() < 1e-6);
        assert_eq!(cb.codeword(0)[1], 0.0);
    }

    #[test]
    fn ema_empty_batch_decays() {
        let mut cb = Codebook::new(Matrix::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap(), "c", true, 0).unwrap();
        let mut st = EmaState::from_parts(vec![2.0, 6.0], vec![2.0, 4.0, 18.0, 24.0], 2, 0.9, 1e-12).unwrap();
        ema_update(&mut st, &mut cb, &[], &[]).unwrap();
        assert!((st.counts[0] - 1.8).abs() < 1e-12 && (st.counts[1] - 5.4).abs() < 1e-12);
        assert!((st.sums[3] - 21.6).abs() < 1e-12);
        assert!((cb.codeword(0)[1] - 2.0).abs() < 1e-6);
        assert!((cb.codeword(1)[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn ema_frozen_limit() {
        let cb0 = crate::codebook::init_gaussian(4, 3, 1).unwrap();
        let mut cb = cb0.clone();
        let mut st = EmaState::new(&cb, 1.0 - 1e-12, 1e-5).unwrap();
        ema_update(&mut st, &mut cb, &[9.0, 9.0, 9.0, -9.0, 5.0, 1.0], &[0, 3]).unwrap();
        for (a, b) in cb.codewords().as_slice().iter().zip(cb0.codewords().as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_rejects_bad_assignment() {
        let mut cb = crate::codebook::init_gaussian(2, 1, 1).unwrap();
        let mut st = EmaState::new(&cb, 0.9, 1e-5).unwrap();
        assert!(matches!(
            ema_update(&mut st, &mut cb, &[1.0], &[2]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(EmaState::new(&cb, 0.0, 1e-5).is_err());
        assert!(EmaState::new(&cb, 0.5, 0.0).is_err());
    }
}
