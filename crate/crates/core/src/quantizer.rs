//! Nearest-neighbour token selection and the residual cascade.
//!
//! A [`QuantizerStack`] holds `n_t` trainable stages followed by `n_r`
//! random stages. Each random stage quantizes against a sub-codebook of `s`
//! codewords drawn from the shared [`BigCodebook`]; when the sub-codebooks
//! are redrawn is governed by [`ResampleMode`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codebook::{normalize_in_place, sample_indices, BigCodebook, Codebook, ProjectionPair, SubCodebook};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{self, Execution};
use crate::rng::{self, label, Rng};

/// Anything nearest-neighbour search can scan: a full codebook or a
/// sub-codebook view onto the big codebook.
pub trait CodebookView {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn codeword(&self, pos: usize) -> &[f32];
    fn unit_codeword(&self, pos: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl CodebookView for Codebook {
    fn len(&self) -> usize {
        Codebook::len(self)
    }
    fn dim(&self) -> usize {
        Codebook::dim(self)
    }
    fn codeword(&self, pos: usize) -> &[f32] {
        Codebook::codeword(self, pos)
    }
    fn unit_codeword(&self, pos: usize) -> &[f32] {
        Codebook::unit_codeword(self, pos)
    }
}

/// Rows of the big codebook selected by a [`SubCodebook`], in position order.
#[derive(Debug, Clone, Copy)]
pub struct SubView<'a> {
    pub big: &'a Codebook,
    pub indices: &'a [u32],
}

impl CodebookView for SubView<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }
    fn dim(&self) -> usize {
        self.big.dim()
    }
    fn codeword(&self, pos: usize) -> &[f32] {
        self.big.codeword(self.indices[pos] as usize)
    }
    fn unit_codeword(&self, pos: usize) -> &[f32] {
        self.big.unit_codeword(self.indices[pos] as usize)
    }
}

/// Outcome of a nearest-neighbour query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest<'a> {
    pub index: usize,
    /// The raw codeword, even when the search ran on normalized vectors.
    pub codeword: &'a [f32],
    /// Squared distance in the space the search ran in.
    pub distance_sq: f64,
}

#[inline]
fn scaled_distance_sq(x: &[f64], c: &[f32], scale: f64) -> f64 {
    let mut acc = 0.0;
    for (a, &b) in x.iter().zip(c) {
        let d = a - scale * b as f64;
        acc += d * d;
    }
    acc
}

/// Index of the codeword (scaled by `scale`) closest to `x`, lowest index on
/// ties. `x` must already be normalized when `normalize` is set.
fn scan<V: CodebookView + ?Sized>(x: &[f64], cb: &V, normalize: bool, scale: f64) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for pos in 0..cb.len() {
        let d = if normalize {
            scaled_distance_sq(x, cb.unit_codeword(pos), 1.0)
        } else {
            scaled_distance_sq(x, cb.codeword(pos), scale)
        };
        if d < best.1 {
            best = (pos, d);
        }
    }
    best
}

/// `argmin_b ||x - b||^2` over `cb`.
///
/// With `normalize` the distance is taken between the unit-norm `x` and the
/// unit-norm codewords, but the returned codeword is the raw one. Ties go to
/// the lowest index.
pub fn nearest_neighbour<'v, V: CodebookView + ?Sized>(
    x: &[f64],
    cb: &'v V,
    normalize: bool,
) -> Result<Nearest<'v>> {
    if cb.is_empty() {
        return Err(Error::invalid("nearest neighbour search on an empty codebook"));
    }
    if x.len() != cb.dim() {
        return Err(Error::invalid(format!(
            "query has dimension {} but the codebook has dimension {}",
            x.len(),
            cb.dim()
        )));
    }
    let (index, distance_sq) = if normalize {
        let mut unit = x.to_vec();
        normalize_in_place(&mut unit);
        scan(&unit, cb, true, 1.0)
    } else {
        scan(x, cb, false, 1.0)
    };
    Ok(Nearest {
        index,
        codeword: cb.codeword(index),
        distance_sq,
    })
}

/// When random stages redraw their sub-codebooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    /// Fresh draw for every frame, from a stream keyed by the frame index.
    #[default]
    PerFrame,
    /// One draw shared by every frame of a call.
    PerBatch,
    /// One draw made when the stack is built and reused forever.
    FixedPerRun,
}

impl ResampleMode {
    pub fn to_byte(self) -> u8 {
        match self {
            ResampleMode::PerFrame => 0,
            ResampleMode::PerBatch => 1,
            ResampleMode::FixedPerRun => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ResampleMode::PerFrame),
            1 => Ok(ResampleMode::PerBatch),
            2 => Ok(ResampleMode::FixedPerRun),
            _ => Err(Error::parse(format!("unknown resample mode byte {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    Trainable(Codebook),
    /// Draws `sample_size` codewords from the big codebook. Emitted codewords
    /// are multiplied by `gain`; the big codebook itself is never touched.
    Random { sample_size: usize, gain: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerStage {
    pub kind: StageKind,
    pub projection: Option<ProjectionPair>,
    pub normalize: bool,
}

impl QuantizerStage {
    pub fn trainable(codebook: Codebook) -> Self {
        Self {
            kind: StageKind::Trainable(codebook),
            projection: None,
            normalize: false,
        }
    }

    pub fn random(sample_size: usize) -> Self {
        Self {
            kind: StageKind::Random {
                sample_size,
                gain: 1.0,
            },
            projection: None,
            normalize: false,
        }
    }

    pub fn with_projection(mut self, projection: ProjectionPair) -> Self {
        self.projection = Some(projection);
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn is_random(&self) -> bool {
        matches!(self.kind, StageKind::Random { .. })
    }

    /// Dimension of the space this stage searches in.
    pub fn working_dim(&self, input_dim: usize) -> usize {
        self.projection.as_ref().map_or(input_dim, |p| p.d_proj())
    }

    pub fn sample_size(&self) -> Option<usize> {
        match self.kind {
            StageKind::Random { sample_size, .. } => Some(sample_size),
            StageKind::Trainable(_) => None,
        }
    }

    pub fn gain(&self) -> f64 {
        match self.kind {
            StageKind::Random { gain, .. } => gain,
            StageKind::Trainable(_) => 1.0,
        }
    }

    /// The stage input as seen by the search: projected, and normalized when
    /// the mitigant is on.
    pub(crate) fn search_vector(&self, residual: &[f64]) -> Vec<f64> {
        let mut w = match &self.projection {
            Some(p) => p.project_down(residual),
            None => residual.to_vec(),
        };
        if self.normalize {
            normalize_in_place(&mut w);
        }
        w
    }

    /// Picks a position in `view` for `search` (output of `search_vector`).
    pub(crate) fn select<V: CodebookView + ?Sized>(&self, search: &[f64], view: &V) -> usize {
        scan(search, view, self.normalize, self.gain()).0
    }

    /// `residual -= emitted`, also writing the emitted codeword in input space.
    pub(crate) fn emit(&self, code: &[f32], residual: &mut [f64], emitted: &mut [f64]) {
        let g = self.gain();
        match &self.projection {
            Some(p) => {
                let y: Vec<f64> = code.iter().map(|&c| c as f64).collect();
                emitted.iter_mut().for_each(|e| *e = 0.0);
                p.add_up(&y, g, emitted);
            }
            None => {
                for (e, &c) in emitted.iter_mut().zip(code) {
                    *e = g * c as f64;
                }
            }
        }
        for (r, e) in residual.iter_mut().zip(emitted.iter()) {
            *r -= e;
        }
    }
}

/// One emitted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub stage: usize,
    /// Position within the stage codebook or sub-codebook; what a codec sends.
    pub position: u32,
    /// Absolute big-codebook index for random stages.
    pub big_index: Option<u32>,
}

/// Everything produced while quantizing one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameQuantization {
    pub tokens: Vec<Token>,
    /// Emitted codewords in input space, one per stage.
    pub codewords: Vec<Vec<f64>>,
    /// `residuals[0]` is the input; `residuals[k]` follows stage `k`.
    pub residuals: Vec<Vec<f64>>,
    pub reconstruction: Vec<f64>,
    /// The sub-codebook used by each random stage (`None` for trainable ones).
    pub subcodebooks: Vec<Option<Arc<[u32]>>>,
}

impl FrameQuantization {
    pub fn input(&self) -> &[f64] {
        &self.residuals[0]
    }

    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("residual_0 is always present")
    }
}

/// Sum of the emitted codewords.
pub fn dequantize(fq: &FrameQuantization) -> Vec<f64> {
    let dim = fq.residuals.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for c in &fq.codewords {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    out
}

/// Codebook sizes per stage, enough to interpret a token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageLayout {
    Trainable { size: usize },
    Random { sample_size: usize, big_size: usize },
}

impl StageLayout {
    pub fn is_random(&self) -> bool {
        matches!(self, StageLayout::Random { .. })
    }
}

/// Output of [`QuantizerStack::quantize_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub frames: Vec<FrameQuantization>,
    pub layout: Vec<StageLayout>,
    pub resample_mode: ResampleMode,
    pub master_seed: u64,
    pub dim: usize,
}

impl QuantizationResult {
    pub fn n_stages(&self) -> usize {
        self.layout.len()
    }

    /// Token stream in the position-within-codebook convention.
    pub fn token_stream(&self) -> crate::tokens::TokenStream {
        crate::tokens::TokenStream {
            frames: self.frames.len(),
            n_stages: self.layout.len(),
            sample_sizes: self
                .layout
                .iter()
                .map(|l| match *l {
                    StageLayout::Random { sample_size, .. } => sample_size as u32,
                    StageLayout::Trainable { .. } => 0,
                })
                .collect(),
            master_seed: self.master_seed,
            resample_mode: self.resample_mode,
            tokens: self
                .frames
                .iter()
                .flat_map(|f| f.tokens.iter().map(|t| t.position))
                .collect(),
        }
    }
}

/// Options for [`QuantizerStack::quantize_sequence_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SequenceOptions {
    /// Index of the first frame, keying per-frame streams.
    pub first_frame: u64,
    /// Batch number, keying the per-batch stream.
    pub batch: u64,
    pub exec: Execution,
}

/// Trainable stages followed by random stages over one big codebook.
#[derive(Debug, Clone)]
pub struct QuantizerStack {
    stages: Vec<QuantizerStage>,
    big: Option<Arc<BigCodebook>>,
    dim: usize,
    resample_mode: ResampleMode,
    disjoint: bool,
    master_seed: u64,
    fixed_draw: Option<Vec<SubCodebook>>,
}

impl QuantizerStack {
    /// Validates the cascade and, in fixed-per-run mode, makes the one draw.
    pub fn new(
        dim: usize,
        stages: Vec<QuantizerStage>,
        big: Option<Arc<BigCodebook>>,
        resample_mode: ResampleMode,
        disjoint: bool,
        master_seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("stack input dimension must be >= 1"));
        }
        let mut seen_random = false;
        let mut total_s = 0usize;
        for (i, st) in stages.iter().enumerate() {
            if let Some(p) = &st.projection {
                if p.dim() != dim {
                    return Err(Error::invalid(format!(
                        "stage {i} projection expects dimension {} but the stack has {dim}",
                        p.dim()
                    )));
                }
            }
            let wd = st.working_dim(dim);
            match &st.kind {
                StageKind::Trainable(cb) => {
                    if seen_random {
                        return Err(Error::invalid(format!(
                            "trainable stage {i} follows a random stage; random stages must be deepest"
                        )));
                    }
                    if cb.dim() != wd {
                        return Err(Error::invalid(format!(
                            "stage {i} codebook has dimension {} but searches in dimension {wd}",
                            cb.dim()
                        )));
                    }
                }
                StageKind::Random { sample_size, gain } => {
                    seen_random = true;
                    let big = big.as_ref().ok_or_else(|| {
                        Error::invalid(format!("random stage {i} needs a big codebook"))
                    })?;
                    if *sample_size == 0 || *sample_size > big.len() {
                        return Err(Error::invalid(format!(
                            "random stage {i} sample size {sample_size} must lie in [1, N_big={}]",
                            big.len()
                        )));
                    }
                    if big.dim() != wd {
                        return Err(Error::invalid(format!(
                            "big codebook has dimension {} but random stage {i} searches in dimension {wd}",
                            big.dim()
                        )));
                    }
                    if !gain.is_finite() {
                        return Err(Error::invalid(format!("random stage {i} gain is not finite")));
                    }
                    total_s += sample_size;
                }
            }
        }
        if disjoint {
            if let Some(big) = &big {
                if total_s > big.len() {
                    return Err(Error::invalid(format!(
                        "disjoint sampling needs the summed sample sizes ({total_s}) <= N_big ({})",
                        big.len()
                    )));
                }
            }
        }
        let mut stack = Self {
            stages,
            big,
            dim,
            resample_mode,
            disjoint,
            master_seed,
            fixed_draw: None,
        };
        if resample_mode == ResampleMode::FixedPerRun {
            let mut r = rng::stream(master_seed, &[label::FIXED]);
            stack.fixed_draw = Some(stack.draw_subcodebooks(&mut r)?);
        }
        Ok(stack)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stages(&self) -> &[QuantizerStage] {
        &self.stages
    }

    pub(crate) fn stages_mut(&mut self) -> &mut [QuantizerStage] {
        &mut self.stages
    }

    pub fn big(&self) -> Option<&BigCodebook> {
        self.big.as_deref()
    }

    pub fn resample_mode(&self) -> ResampleMode {
        self.resample_mode
    }

    pub fn disjoint(&self) -> bool {
        self.disjoint
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn n_trainable(&self) -> usize {
        self.stages.iter().filter(|s| !s.is_random()).count()
    }

    pub fn n_random(&self) -> usize {
        self.stages.iter().filter(|s| s.is_random()).count()
    }

    pub fn layout(&self) -> Vec<StageLayout> {
        self.stages
            .iter()
            .map(|s| match &s.kind {
                StageKind::Trainable(cb) => StageLayout::Trainable { size: cb.len() },
                StageKind::Random { sample_size, .. } => StageLayout::Random {
                    sample_size: *sample_size,
                    big_size: self.big.as_ref().map_or(0, |b| b.len()),
                },
            })
            .collect()
    }

    /// The first `k` stages as a stack of their own. Per-frame streams are
    /// consumed stage by stage, so the prefix emits the same tokens.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.stages.len() {
            return Err(Error::invalid(format!(
                "cannot truncate a {}-stage stack to {k} stages",
                self.stages.len()
            )));
        }
        let n_random_kept = self.stages[..k].iter().filter(|s| s.is_random()).count();
        Ok(Self {
            stages: self.stages[..k].to_vec(),
            big: self.big.clone(),
            dim: self.dim,
            resample_mode: self.resample_mode,
            disjoint: self.disjoint,
            master_seed: self.master_seed,
            fixed_draw: self
                .fixed_draw
                .as_ref()
                .map(|d| d[..n_random_kept].to_vec()),
        })
    }

    /// One sub-codebook per random stage, in stage order. In disjoint mode
    /// each draw excludes the indices of the earlier ones.
    pub fn draw_subcodebooks(&self, rng: &mut Rng) -> Result<Vec<SubCodebook>> {
        let n_big = match &self.big {
            Some(b) => b.len(),
            None => return Ok(Vec::new()),
        };
        let mut draws = Vec::with_capacity(self.n_random());
        let mut used: Vec<u32> = Vec::new();
        for st in &self.stages {
            if let Some(s) = st.sample_size() {
                let exclude: &[u32] = if self.disjoint { &used } else { &[] };
                let sub = sample_indices(n_big, s, rng, exclude)?;
                if self.disjoint {
                    used.extend_from_slice(sub.indices());
                }
                draws.push(sub);
            }
        }
        Ok(draws)
    }

    /// Stream used for frame `index` in per-frame mode.
    pub fn frame_rng(&self, index: u64) -> Rng {
        rng::stream(self.master_seed, &[label::FRAME, index])
    }

    /// Stream used for batch `index` in per-batch mode.
    pub fn batch_rng(&self, index: u64) -> Rng {
        rng::stream(self.master_seed, &[label::BATCH, index])
    }

    /// The draw cached at construction in fixed-per-run mode.
    pub fn fixed_draw(&self) -> Option<&[SubCodebook]> {
        self.fixed_draw.as_deref()
    }

    /// Quantizes one frame. Random stages draw from `rng`, except in
    /// fixed-per-run mode where the cached draw is used.
    pub fn quantize_frame(&self, x: &[f64], rng: &mut Rng) -> Result<FrameQuantization> {
        match &self.fixed_draw {
            Some(d) => self.quantize_with_draw(x, d),
            None => {
                let draws = self.draw_subcodebooks(rng)?;
                self.quantize_with_draw(x, &draws)
            }
        }
    }

    /// Quantizes one frame against the given sub-codebooks (one per random
    /// stage, in order).
    pub fn quantize_with_draw(&self, x: &[f64], draws: &[SubCodebook]) -> Result<FrameQuantization> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "frame has dimension {} but the stack expects {}",
                x.len(),
                self.dim
            )));
        }
        if draws.len() != self.n_random() {
            return Err(Error::invalid(format!(
                "{} sub-codebooks supplied for {} random stages",
                draws.len(),
                self.n_random()
            )));
        }
        let n = self.stages.len();
        let mut tokens = Vec::with_capacity(n);
        let mut codewords = Vec::with_capacity(n);
        let mut residuals = Vec::with_capacity(n + 1);
        let mut subcodebooks = Vec::with_capacity(n);
        let mut residual = x.to_vec();
        residuals.push(residual.clone());
        let mut draw_iter = draws.iter();
        for (i, st) in self.stages.iter().enumerate() {
            let search = st.search_vector(&residual);
            let mut emitted = vec![0.0; self.dim];
            match &st.kind {
                StageKind::Trainable(cb) => {
                    let pos = st.select(&search, cb);
                    st.emit(cb.codeword(pos), &mut residual, &mut emitted);
                    tokens.push(Token {
                        stage: i,
                        position: pos as u32,
                        big_index: None,
                    });
                    subcodebooks.push(None);
                }
                StageKind::Random { .. } => {
                    let sub = draw_iter.next().expect("draw count checked above");
                    let big = self.big.as_ref().expect("validated at construction").codebook();
                    let view = SubView {
                        big,
                        indices: sub.indices(),
                    };
                    let pos = st.select(&search, &view);
                    st.emit(view.codeword(pos), &mut residual, &mut emitted);
                    tokens.push(Token {
                        stage: i,
                        position: pos as u32,
                        big_index: Some(sub.indices()[pos]),
                    });
                    subcodebooks.push(Some(sub.shared()));
                }
            }
            codewords.push(emitted);
            residuals.push(residual.clone());
        }
        let reconstruction = x.iter().zip(&residual).map(|(a, r)| a - r).collect();
        Ok(FrameQuantization {
            tokens,
            codewords,
            residuals,
            reconstruction,
            subcodebooks,
        })
    }

    pub fn quantize_sequence(&self, frames: &Matrix) -> Result<QuantizationResult> {
        self.quantize_sequence_with(frames, SequenceOptions::default())
    }

    /// Quantizes every row of `frames`.
    ///
    /// Per-frame mode keys frame `t` by `opts.first_frame + t`, so the output
    /// does not depend on how frames are spread over workers.
    pub fn quantize_sequence_with(
        &self,
        frames: &Matrix,
        opts: SequenceOptions,
    ) -> Result<QuantizationResult> {
        if frames.cols() != self.dim {
            return Err(Error::invalid(format!(
                "frames have dimension {} but the stack expects {}",
                frames.cols(),
                self.dim
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::invalid("quantize_sequence needs at least one frame"));
        }
        let shared_draw = match self.resample_mode {
            ResampleMode::PerFrame => None,
            ResampleMode::PerBatch => Some(self.draw_subcodebooks(&mut self.batch_rng(opts.batch))?),
            ResampleMode::FixedPerRun => self.fixed_draw.clone(),
        };
        let out = par::map_range(opts.exec, frames.rows(), |t| {
            let x = frames.row_f64(t);
            match &shared_draw {
                Some(d) => self.quantize_with_draw(&x, d),
                None => {
                    let mut r = self.frame_rng(opts.first_frame + t as u64);
                    self.quantize_frame(&x, &mut r)
                }
            }
        });
        let frames = out.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(QuantizationResult {
            frames,
            layout: self.layout(),
            resample_mode: self.resample_mode,
            master_seed: self.master_seed,
            dim: self.dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{init_gaussian, make_projection};
    use crate::matrix::squared_norm;

    fn cb(rows: &[[f32; 2]]) -> Codebook {
        Codebook::new(Matrix::from_rows(rows).unwrap(), "t", true, 0).unwrap()
    }

    #[test]
    fn nn_small_cases() {
        let c = cb(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let n = nearest_neighbour(&[0.9, 0.1], &c, false).unwrap();
        assert_eq!(n.index, 1);
        assert!((n.distance_sq - 0.02).abs() < 1e-12);
        let n = nearest_neighbour(&[0.0, 1.0], &c, false).unwrap();
        assert_eq!((n.index, n.distance_sq), (2, 0.0));
        let n = nearest_neighbour(&[0.5, 0.5], &c, false).unwrap();
        assert_eq!(n.index, 0);
        assert!((n.distance_sq - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nn_normalized_returns_raw_codeword() {
        let c = cb(&[[10.0, 0.0], [0.0, 0.5]]);
        // closer in Euclidean terms to codeword 1, but points along codeword 0
        let n = nearest_neighbour(&[1.0, 0.1], &c, true).unwrap();
        assert_eq!(n.index, 0);
        assert_eq!(n.codeword, &[10.0, 0.0]);
        assert_eq!(nearest_neighbour(&[1.0, 0.1], &c, false).unwrap().index, 1);
    }

    #[test]
    fn nn_rejects_bad_input() {
        let c = cb(&[[0.0, 0.0]]);
        assert!(nearest_neighbour(&[1.0], &c, false).is_err());
        let big = Codebook::new(Matrix::from_rows(&[[1.0f32, 2.0]]).unwrap(), "b", false, 0).unwrap();
        let empty = SubView {
            big: &big,
            indices: &[],
        };
        assert!(matches!(
            nearest_neighbour(&[1.0, 0.0], &empty, false),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn exact_cover() -> QuantizerStack {
        QuantizerStack::new(
            2,
            vec![
                QuantizerStage::trainable(cb(&[[1.0, 0.0]])),
                QuantizerStage::trainable(cb(&[[0.0, 1.0]])),
            ],
            None,
            ResampleMode::PerFrame,
            true,
            0,
        )
        .unwrap()
    }

    #[test]
    fn exact_cover_frame() {
        let stack = exact_cover();
        let fq = stack.quantize_frame(&[1.0, 1.0], &mut rng::from_seed(0)).unwrap();
        let pos: Vec<u32> = fq.tokens.iter().map(|t| t.position).collect();
        assert_eq!(pos, vec![0, 0]);
        assert_eq!(fq.codewords, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(fq.final_residual(), &[0.0, 0.0]);
        assert_eq!(dequantize(&fq), vec![1.0, 1.0]);
    }

    #[test]
    fn empty_frame_dequantizes_to_zero() {
        let fq = FrameQuantization {
            tokens: vec![],
            codewords: vec![],
            residuals: vec![vec![3.0, 4.0]],
            reconstruction: vec![0.0, 0.0],
            subcodebooks: vec![],
        };
        assert_eq!(dequantize(&fq), vec![0.0, 0.0]);
    }

    #[test]
    fn full_sample_matches_plain_vq() {
        let big = Arc::new(BigCodebook::gaussian(4, 3, 9).unwrap());
        let stack = QuantizerStack::new(
            3,
            vec![QuantizerStage::random(4)],
            Some(big.clone()),
            ResampleMode::PerFrame,
            true,
            1,
        )
        .unwrap();
        for k in 0..20u64 {
            let x = [k as f64 * 0.1 - 1.0, 0.5, (k as f64).sin()];
            let fq = stack.quantize_frame(&x, &mut stack.frame_rng(k)).unwrap();
            let plain = nearest_neighbour(&x, big.codebook(), false).unwrap();
            assert_eq!(fq.tokens[0].big_index, Some(plain.index as u32));
        }
    }

    #[test]
    fn stack_validation() {
        let big = Arc::new(BigCodebook::gaussian(16, 2, 9).unwrap());
        let t = QuantizerStage::trainable(cb(&[[1.0, 0.0]]));
        let r = QuantizerStage::random(8);
        let order = QuantizerStack::new(2, vec![r.clone(), t.clone()], Some(big.clone()), ResampleMode::PerFrame, true, 0);
        assert!(order.is_err());
        let disjoint = QuantizerStack::new(2, vec![r.clone(), r.clone(), r.clone()], Some(big.clone()), ResampleMode::PerFrame, true, 0);
        assert!(disjoint.is_err());
        let overlap = QuantizerStack::new(2, vec![r.clone(), r.clone(), r.clone()], Some(big.clone()), ResampleMode::PerFrame, false, 0);
        assert!(overlap.is_ok());
        let no_big = QuantizerStack::new(2, vec![r], None, ResampleMode::PerFrame, true, 0);
        assert!(no_big.is_err());
    }

    #[test]
    fn disjoint_draws_do_not_overlap() {
        let big = Arc::new(BigCodebook::gaussian(64, 2, 9).unwrap());
        let stack = QuantizerStack::new(
            2,
            vec![QuantizerStage::random(16); 4],
            Some(big),
            ResampleMode::PerFrame,
            true,
            3,
        )
        .unwrap();
        for f in 0..20 {
            let draws = stack.draw_subcodebooks(&mut stack.frame_rng(f)).unwrap();
            let mut all: Vec<u32> = draws.iter().flat_map(|d| d.indices().to_vec()).collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 64);
        }
    }

    #[test]
    fn projected_stage_telescopes() {
        let big = Arc::new(BigCodebook::gaussian(32, 2, 4).unwrap());
        let p = make_projection(5, 2, 8).unwrap();
        let t = QuantizerStage::trainable(init_gaussian(8, 2, 1).unwrap())
            .with_projection(make_projection(5, 2, 7).unwrap())
            .with_normalize(true);
        let r = QuantizerStage::random(8).with_projection(p).with_normalize(true);
        let stack = QuantizerStack::new(5, vec![t, r], Some(big), ResampleMode::PerFrame, true, 2).unwrap();
        let x = [0.3, -0.2, 1.5, 0.9, -2.0];
        let fq = stack.quantize_frame(&x, &mut stack.frame_rng(0)).unwrap();
        let rec = dequantize(&fq);
        let err: f64 = rec
            .iter()
            .zip(fq.final_residual())
            .zip(&x)
            .map(|((a, b), c)| (a + b - c).powi(2))
            .sum();
        assert!(err.sqrt() <= 1e-12 * squared_norm(&x).sqrt());
    }

    #[test]
    fn resample_mode_byte_round_trip() {
        for m in [ResampleMode::PerFrame, ResampleMode::PerBatch, ResampleMode::FixedPerRun] {
            assert_eq!(ResampleMode::from_byte(m.to_byte()).unwrap(), m);
        }
        assert!(ResampleMode::from_byte(7).is_err());
    }
}
