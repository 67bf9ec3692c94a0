//! Codebooks, the fixed big codebook and its random sub-codebooks, fixed
//! orthonormal projections, and the binary codebook file.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

const CODEBOOK_MAGIC: &[u8; 8] = b"RRVQCB1\0";
const DEGENERATE_NORM: f64 = 1e-12;

/// A set of `N` codewords in `R^D`.
///
/// Alongside the raw codewords the codebook keeps their unit-norm copies,
/// which the normalized-distance mitigant searches against.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codewords: Matrix,
    unit: Matrix,
    pub id: String,
    pub trainable: bool,
    pub seed: u64,
}

impl Codebook {
    pub fn new(codewords: Matrix, id: impl Into<String>, trainable: bool, seed: u64) -> Result<Self> {
        if codewords.rows() == 0 || codewords.cols() == 0 {
            return Err(Error::invalid("a codebook needs at least one codeword of dimension >= 1"));
        }
        if !codewords.is_finite() {
            return Err(Error::invalid("codewords must be finite"));
        }
        let unit = l2_normalize_rows(&codewords).matrix;
        Ok(Self {
            codewords,
            unit,
            id: id.into(),
            trainable,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.codewords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codewords.cols()
    }

    pub fn codewords(&self) -> &Matrix {
        &self.codewords
    }

    #[inline]
    pub fn codeword(&self, i: usize) -> &[f32] {
        self.codewords.row(i)
    }

    #[inline]
    pub fn unit_codeword(&self, i: usize) -> &[f32] {
        self.unit.row(i)
    }

    /// Replaces the codewords, keeping identity fields.
    pub(crate) fn set_codewords(&mut self, codewords: Matrix) -> Result<()> {
        *self = Codebook::new(codewords, std::mem::take(&mut self.id), self.trainable, self.seed)?;
        Ok(())
    }

    /// Little-endian byte image in the codebook file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.codewords.as_slice().len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.codewords.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, id: impl Into<String>, trainable: bool) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf, id, trainable)
    }

    pub fn from_bytes(buf: &[u8], id: impl Into<String>, trainable: bool) -> Result<Self> {
        if buf.len() < 24 {
            return Err(Error::parse("codebook file shorter than its header"));
        }
        if &buf[..8] != CODEBOOK_MAGIC {
            return Err(Error::parse("codebook file has the wrong magic"));
        }
        let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(buf[16..24].try_into().unwrap());
        let body = &buf[24..];
        if body.len() != n * d * 4 {
            return Err(Error::parse(format!(
                "codebook body holds {} bytes, header promises {n}x{d} f32 values",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Codebook::new(Matrix::from_vec(n, d, data)?, id, trainable, seed)
    }
}

/// `n` codewords drawn i.i.d. from the standard normal distribution on `R^dim`.
pub fn init_gaussian(n: usize, dim: usize, seed: u64) -> Result<Codebook> {
    if n == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "init_gaussian needs n >= 1 and dim >= 1 (got n={n}, dim={dim})"
        )));
    }
    let mut rng = rng::from_seed(seed);
    let data = (0..n * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    Codebook::new(Matrix::from_vec(n, dim, data)?, format!("gaussian-{seed}"), true, seed)
}

/// The large fixed codebook random stages draw from. Never mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct BigCodebook {
    codebook: Codebook,
}

impl BigCodebook {
    pub fn gaussian(n_big: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut codebook = init_gaussian(n_big, dim, seed)?;
        codebook.id = "big".into();
        codebook.trainable = false;
        Ok(Self { codebook })
    }

    pub fn from_codebook(mut codebook: Codebook) -> Self {
        codebook.trainable = false;
        Self { codebook }
    }

    pub fn len(&self) -> usize {
        self.codebook.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codebook.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn seed(&self) -> u64 {
        self.codebook.seed
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }
}

/// `s` distinct indices into a [`BigCodebook`], kept in ascending order so
/// that a token's position is a canonical rank within the draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubCodebook {
    indices: Arc<[u32]>,
}

impl SubCodebook {
    pub fn from_indices(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        Self {
            indices: indices.into(),
        }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn shared(&self) -> Arc<[u32]> {
        Arc::clone(&self.indices)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `s` indices uniformly without replacement from `[0, N_big)` minus
/// `exclude`.
pub fn sample_subcodebook(
    big: &BigCodebook,
    s: usize,
    rng: &mut Rng,
    exclude: &[u32],
) -> Result<SubCodebook> {
    sample_indices(big.len(), s, rng, exclude)
}

pub(crate) fn sample_indices(
    n_big: usize,
    s: usize,
    rng: &mut Rng,
    exclude: &[u32],
) -> Result<SubCodebook> {
    let mut excluded = exclude.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    if let Some(&bad) = excluded.last().filter(|&&i| i as usize >= n_big) {
        return Err(Error::invalid(format!(
            "excluded index {bad} lies outside a big codebook of size {n_big}"
        )));
    }
    let available = n_big - excluded.len();
    if s > available {
        return Err(Error::CapacityExceeded {
            requested: s,
            available,
        });
    }
    let picks = index::sample(rng, available, s);
    let indices = if excluded.is_empty() {
        picks.into_iter().map(|i| i as u32).collect()
    } else {
        let mut taken = vec![false; n_big];
        for &i in &excluded {
            taken[i as usize] = true;
        }
        let pool: Vec<u32> = (0..n_big as u32).filter(|&i| !taken[i as usize]).collect();
        picks.into_iter().map(|i| pool[i]).collect()
    };
    Ok(SubCodebook::from_indices(indices))
}

/// A fixed orthonormal projection `R^D -> R^d` and its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    dim: usize,
    d_proj: usize,
    /// `d_proj x dim`, row-major, orthonormal rows.
    down: Vec<f64>,
    pub seed: u64,
}

impl ProjectionPair {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn d_proj(&self) -> usize {
        self.d_proj
    }

    pub fn down_row(&self, k: usize) -> &[f64] {
        &self.down[k * self.dim..(k + 1) * self.dim]
    }

    /// `down * x`
    pub fn project_down(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.d_proj)
            .map(|k| crate::matrix::dot(self.down_row(k), x))
            .collect()
    }

    /// `up * y` with `up = down^T`.
    pub fn project_up(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_up(y, 1.0, &mut out);
        out
    }

    /// `out += scale * up * y`
    pub(crate) fn add_up(&self, y: &[f64], scale: f64, out: &mut [f64]) {
        for (k, &yk) in y.iter().enumerate() {
            let w = scale * yk;
            for (o, &d) in out.iter_mut().zip(self.down_row(k)) {
                *o += w * d;
            }
        }
    }
}

/// Orthonormal projection obtained from a seeded Gaussian matrix by
/// Gram-Schmidt QR.
pub fn make_projection(dim: usize, d_proj: usize, seed: u64) -> Result<ProjectionPair> {
    if d_proj == 0 || d_proj >= dim {
        return Err(Error::invalid(format!(
            "projection needs 1 <= d_proj < dim (got d_proj={d_proj}, dim={dim})"
        )));
    }
    let mut rng = Rng::seed_from_u64(seed);
    Ok(ProjectionPair {
        dim,
        d_proj,
        down: orthonormal_rows(dim, d_proj, &mut rng).concat(),
        seed,
    })
}

/// `count <= dim` orthonormal vectors in `R^dim`, from Gaussian draws
/// orthogonalized twice (classical Gram-Schmidt loses orthogonality otherwise).
pub(crate) fn orthonormal_rows(dim: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot fit {count} orthonormal vectors in R^{dim}");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for _ in 0..2 {
            for q in &rows {
                let c = crate::matrix::dot(q, &v);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = crate::matrix::squared_norm(&v).sqrt();
        // a draw (numerically) inside the current span is redrawn
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows
}

/// Result of row normalization.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub matrix: Matrix,
    /// Rows whose norm was below `1e-12`; they are passed through unchanged.
    pub degenerate: Vec<usize>,
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &Matrix) -> Normalized {
    let mut out = m.clone();
    let mut degenerate = Vec::new();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            degenerate.push(i);
            continue;
        }
        row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    if !degenerate.is_empty() {
        log::warn!(
            "{} degenerate row(s) left unnormalized (first: {})",
            degenerate.len(),
            degenerate[0]
        );
    }
    Normalized {
        matrix: out,
        degenerate,
    }
}

/// Normalizes a single vector in place; returns false if it was degenerate.
pub(crate) fn normalize_in_place(v: &mut [f64]) -> bool {
    let norm = crate::matrix::squared_norm(v).sqrt();
    if norm < DEGENERATE_NORM {
        return false;
    }
    v.iter_mut().for_each(|a| *a /= norm);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn gaussian_init_is_deterministic() {
        let a = init_gaussian(4, 2, 7).unwrap();
        let b = init_gaussian(4, 2, 7).unwrap();
        assert_eq!(a.codewords(), b.codewords());
        let c = init_gaussian(4, 2, 8).unwrap();
        assert_ne!(a.codewords(), c.codewords());
    }

    #[test]
    fn gaussian_init_moments() {
        let cb = init_gaussian(10_000, 1, 3).unwrap();
        let v: Vec<f64> = cb.codewords().as_slice().iter().map(|&x| x as f64).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn gaussian_init_single_and_errors() {
        let cb = init_gaussian(1, 3, 0).unwrap();
        assert_eq!((cb.len(), cb.dim()), (1, 3));
        assert!(cb.codeword(0).iter().all(|v| v.is_finite()));
        assert!(matches!(init_gaussian(0, 3, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(init_gaussian(3, 0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn full_draw_covers_everything() {
        let big = BigCodebook::gaussian(8, 2, 1).unwrap();
        let mut r = rng::from_seed(5);
        let sub = sample_subcodebook(&big, 8, &mut r, &[]).unwrap();
        assert_eq!(sub.indices(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn exclusion_is_respected() {
        let big = BigCodebook::gaussian(8, 2, 1).unwrap();
        let mut r = rng::from_seed(5);
        for _ in 0..50 {
            let sub = sample_subcodebook(&big, 3, &mut r, &[0, 1, 2, 3, 4]).unwrap();
            assert_eq!(sub.indices(), &[5, 6, 7]);
        }
        for _ in 0..50 {
            let sub = sample_subcodebook(&big, 2, &mut r, &[0, 1, 2, 3, 4]).unwrap();
            assert!(sub.indices().iter().all(|&i| i >= 5));
            assert_ne!(sub.indices()[0], sub.indices()[1]);
        }
    }

    #[test]
    fn over_capacity_is_rejected() {
        let big = BigCodebook::gaussian(8, 2, 1).unwrap();
        let mut r = rng::from_seed(5);
        let err = sample_subcodebook(&big, 4, &mut r, &[0, 1, 2, 3, 4]).unwrap_err();
        assert!(matches!(
            err,
            Error::CapacityExceeded {
                requested: 4,
                available: 3
            }
        ));
        assert!(sample_subcodebook(&big, 9, &mut r, &[]).is_err());
    }

    #[test]
    fn projection_is_orthonormal() {
        let p = make_projection(4, 3, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d = crate::matrix::dot(p.down_row(i), p.down_row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
        assert!(make_projection(4, 4, 1).is_err());
        assert!(make_projection(4, 0, 1).is_err());
    }

    #[test]
    fn projection_round_trip_is_idempotent() {
        let p = make_projection(6, 2, 11).unwrap();
        let x = [0.3, -1.2, 2.0, 0.7, -0.1, 4.0];
        let once = p.project_up(&p.project_down(&x));
        let twice = p.project_up(&p.project_down(&once));
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_is_a_contraction() {
        use rand::Rng as _;
        let p = make_projection(2, 1, 4).unwrap();
        let mut r = rng::from_seed(9);
        for _ in 0..100 {
            let x = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let y = p.project_up(&p.project_down(&x));
            assert!(crate::matrix::squared_norm(&y) <= crate::matrix::squared_norm(&x) + 1e-12);
        }
    }

    #[test]
    fn normalize_rows() {
        let m = Matrix::from_rows(&[[3.0f32, 4.0], [1.0, 0.0], [0.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m);
        assert_eq!(n.matrix.row(0), &[0.6, 0.8]);
        assert_eq!(n.matrix.row(1), &[1.0, 0.0]);
        assert_eq!(n.matrix.row(2), &[0.0, 0.0]);
        assert_eq!(n.degenerate, vec![2]);
    }

    #[test]
    fn codebook_file_round_trip_and_errors() {
        let cb = init_gaussian(5, 3, 42).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..8], b"RRVQCB1\0");
        assert_eq!(bytes.len(), 24 + 5 * 3 * 4);
        let back = Codebook::from_bytes(&bytes, cb.id.clone(), true).unwrap();
        assert_eq!(back, cb);
        assert!(matches!(
            Codebook::from_bytes(&bytes[..30], "x", true),
            Err(Error::Parse(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Codebook::from_bytes(&bad, "x", true), Err(Error::Parse(_))));
    }
}
