//! Binary token-stream file.
//!
//! Layout (little-endian): magic `RRVQTK1\0`, `u32` frame count, `u32` stage
//! count, one `u32` per stage holding its sample size (0 marks a trainable
//! stage), `u64` master seed, `u8` resample mode, then one `u32` token per
//! frame per stage.

use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::ResampleMode;

const TOKEN_MAGIC: &[u8; 8] = b"RRVQTK1\0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub frames: usize,
    pub n_stages: usize,
    pub sample_sizes: Vec<u32>,
    pub master_seed: u64,
    pub resample_mode: ResampleMode,
    /// `frames x n_stages`, row-major.
    pub tokens: Vec<u32>,
}

impl TokenStream {
    /// Tokens of stage `stage` across all frames.
    pub fn stage_tokens(&self, stage: usize) -> impl Iterator<Item = u32> + '_ {
        self.tokens
            .iter()
            .skip(stage)
            .step_by(self.n_stages.max(1))
            .copied()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + 4 * (self.sample_sizes.len() + self.tokens.len()));
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_stages as u32).to_le_bytes());
        for s in &self.sample_sizes {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        out.push(self.resample_mode.to_byte());
        for t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8)? != TOKEN_MAGIC {
            return Err(Error::parse("token file has the wrong magic"));
        }
        let frames = cur.u32()? as usize;
        let n_stages = cur.u32()? as usize;
        let sample_sizes = (0..n_stages).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let master_seed = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let resample_mode = ResampleMode::from_byte(cur.take(1)?[0])?;
        let body = &buf[cur.pos..];
        if body.len() != frames * n_stages * 4 {
            return Err(Error::parse(format!(
                "token body holds {} bytes, header promises {frames}x{n_stages} tokens",
                body.len()
            )));
        }
        let tokens = body
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            frames,
            n_stages,
            sample_sizes,
            master_seed,
            resample_mode,
            tokens,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::parse("token file truncated inside its header"));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
