//! Codebook usage, perplexity, SI-SDR and per-stage distortion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, squared_norm};
use crate::quantizer::{QuantizationResult, StageLayout};

/// Exponentiated Shannon entropy of the empirical distribution `n_i / sum n`.
/// Zero counts contribute nothing.
pub fn perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("perplexity needs at least one positive count"));
    }
    let total = total as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Occurrence counts of one codebook over a token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub counts: Vec<u64>,
    pub perplexity: f64,
    /// `perplexity / N`.
    pub ratio_to_max: f64,
}

impl UsageReport {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let perplexity = perplexity(&counts)?;
        let ratio_to_max = perplexity / counts.len() as f64;
        Ok(Self {
            counts,
            perplexity,
            ratio_to_max,
        })
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    /// `"value (ratio)"`, the layout of a perplexity table cell.
    pub fn cell(&self) -> String {
        format!("{:.0} ({:.2})", self.perplexity, self.ratio_to_max)
    }
}

/// Counts token indices below `codebook_size`.
pub fn usage_histogram<I>(tokens: I, codebook_size: usize) -> Result<UsageReport>
where
    I: IntoIterator<Item = u32>,
{
    if codebook_size == 0 {
        return Err(Error::invalid("usage histogram over an empty codebook"));
    }
    let mut counts = vec![0u64; codebook_size];
    let mut seen = 0usize;
    for t in tokens {
        let slot = counts.get_mut(t as usize).ok_or_else(|| {
            Error::invalid(format!("token {t} out of range for a codebook of size {codebook_size}"))
        })?;
        *slot += 1;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::invalid("usage histogram of an empty token stream"));
    }
    UsageReport::from_counts(counts)
}

/// Usage of one stage. Random stages carry both granularities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageUsage {
    pub stage: usize,
    pub random: bool,
    /// Over positions within the (sub-)codebook.
    pub positions: UsageReport,
    /// Over absolute big-codebook indices.
    pub big: Option<UsageReport>,
}

pub fn stage_usage(result: &QuantizationResult) -> Result<Vec<StageUsage>> {
    result
        .layout
        .iter()
        .enumerate()
        .map(|(k, layout)| {
            let positions = result.frames.iter().map(|f| f.tokens[k].position);
            match *layout {
                StageLayout::Trainable { size } => Ok(StageUsage {
                    stage: k,
                    random: false,
                    positions: usage_histogram(positions, size)?,
                    big: None,
                }),
                StageLayout::Random {
                    sample_size,
                    big_size,
                } => {
                    let abs = result
                        .frames
                        .iter()
                        .map(|f| f.tokens[k].big_index.unwrap_or(u32::MAX));
                    Ok(StageUsage {
                        stage: k,
                        random: true,
                        positions: usage_histogram(positions, sample_size)?,
                        big: Some(usage_histogram(abs, big_size)?),
                    })
                }
            }
        })
        .collect()
}

/// Big-codebook usage pooled over every random stage; `None` without random
/// stages.
pub fn pooled_big_usage(result: &QuantizationResult) -> Result<Option<UsageReport>> {
    let big_size = match result.layout.iter().find_map(|l| match *l {
        StageLayout::Random { big_size, .. } => Some(big_size),
        StageLayout::Trainable { .. } => None,
    }) {
        Some(n) => n,
        None => return Ok(None),
    };
    let tokens = result
        .frames
        .iter()
        .flat_map(|f| f.tokens.iter().filter_map(|t| t.big_index));
    usage_histogram(tokens, big_size).map(Some)
}

const SI_SDR_ZERO_ERROR: f64 = 1e-24;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// Returns `+inf` when the residual error vanishes and `-inf` when the
/// estimate has no component along the reference.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::invalid(format!(
            "si_sdr length mismatch: estimate {} vs reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy = squared_norm(reference);
    if ref_energy == 0.0 {
        return Err(Error::invalid("si_sdr reference signal is all zeros"));
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let target = alpha * alpha * ref_energy;
    let error: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (alpha * r - e).powi(2))
        .sum();
    if target == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if error < SI_SDR_ZERO_ERROR {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (target / error).log10())
}

/// Residual energy after each stage, averaged over frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionProfile {
    /// `stage_energies[0]` is the input energy; entry `k` follows stage `k`.
    pub stage_energies: Vec<f64>,
    /// Final energy divided by the dimension.
    pub final_mse: f64,
    /// SI-SDR of the whole reconstructed set treated as one signal.
    #[serde(with = "crate::report::nonfinite")]
    pub si_sdr_db: f64,
    /// Mean of per-frame SI-SDR values.
    #[serde(with = "crate::report::nonfinite")]
    pub mean_frame_si_sdr_db: f64,
}

pub fn distortion_profile(result: &QuantizationResult) -> Result<DistortionProfile> {
    let t = result.frames.len();
    if t == 0 {
        return Err(Error::invalid("distortion profile of an empty result"));
    }
    let n = result.n_stages();
    let mut energies = vec![0.0; n + 1];
    let mut frame_sdr = 0.0;
    let mut reference = Vec::with_capacity(t * result.dim);
    let mut estimate = Vec::with_capacity(t * result.dim);
    for f in &result.frames {
        for (e, r) in energies.iter_mut().zip(&f.residuals) {
            *e += squared_norm(r);
        }
        reference.extend_from_slice(f.input());
        estimate.extend_from_slice(&f.reconstruction);
        frame_sdr += if squared_norm(f.input()) > 0.0 {
            si_sdr(&f.reconstruction, f.input())?
        } else {
            0.0
        };
    }
    energies.iter_mut().for_each(|e| *e /= t as f64);
    let final_mse = energies[n] / result.dim as f64;
    let si_sdr_db = if squared_norm(&reference) > 0.0 {
        si_sdr(&estimate, &reference)?
    } else {
        f64::NAN
    };
    Ok(DistortionProfile {
        stage_energies: energies,
        final_mse,
        si_sdr_db,
        mean_frame_si_sdr_db: frame_sdr / t as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_cases() {
        assert!((perplexity(&[10, 10, 10, 10]).unwrap() - 4.0).abs() < 1e-9);
        assert_eq!(perplexity(&[40, 0, 0, 0]).unwrap(), 1.0);
        let want = (1.5 * 2f64.ln()).exp();
        assert!((perplexity(&[2, 1, 1, 0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 2.8284).abs() < 1e-4);
        assert!(perplexity(&[0, 0]).is_err());
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn histogram_cases() {
        let r = usage_histogram([0u32, 0, 1], 2).unwrap();
        assert_eq!(r.counts, vec![2, 1]);
        let p: f64 = 2.0 / 3.0;
        let want = (-(p * p.ln() + (1.0 - p) * (1.0 - p).ln())).exp();
        assert!((r.perplexity - want).abs() < 1e-12);
        assert!((r.perplexity - 1.8899).abs() < 1e-4);
        assert!((r.ratio_to_max - want / 2.0).abs() < 1e-12);
        assert!(usage_histogram(Vec::<u32>::new(), 2).is_err());
        assert!(usage_histogram([2u32], 2).is_err());
        assert_eq!(r.cell(), "2 (0.94)");
    }

    #[test]
    fn si_sdr_cases() {
        assert_eq!(si_sdr(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), f64::INFINITY);
        assert_eq!(si_sdr(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), f64::INFINITY);
        assert!(si_sdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap().abs() < 1e-9);
        assert_eq!(si_sdr(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(si_sdr(&[1.0, 1.0], &[0.0, 0.0]), Err(Error::InvalidArgument(_))));
        assert!(si_sdr(&[1.0], &[1.0, 0.0]).is_err());
    }
}
