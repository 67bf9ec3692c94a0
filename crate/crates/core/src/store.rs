//! On-disk stacks: a directory of codebook files plus `manifest.json`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codebook::{make_projection, BigCodebook, Codebook};
use crate::error::{Error, Result};
use crate::quantizer::{QuantizerStack, QuantizerStage, ResampleMode, StageKind};
use crate::training::TrainingConfig;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "rrvq-stack/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub d_proj: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StageEntry {
    Trainable {
        file: String,
        size: usize,
        normalize: bool,
        projection: Option<ProjectionSpec>,
    },
    Random {
        sample_size: usize,
        gain: f64,
        normalize: bool,
        projection: Option<ProjectionSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigEntry {
    pub file: String,
    pub size: usize,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dim: usize,
    pub resample_mode: ResampleMode,
    pub disjoint: bool,
    pub master_seed: u64,
    pub big: Option<BigEntry>,
    pub stages: Vec<StageEntry>,
    pub training: Option<TrainingConfig>,
}

fn projection_spec(st: &QuantizerStage) -> Option<ProjectionSpec> {
    st.projection.as_ref().map(|p| ProjectionSpec {
        d_proj: p.d_proj(),
        seed: p.seed,
    })
}

/// Writes `stack` under `dir`, creating it if needed.
pub fn save_stack(dir: impl AsRef<Path>, stack: &QuantizerStack, training: Option<&TrainingConfig>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut stages = Vec::with_capacity(stack.stages().len());
    for (i, st) in stack.stages().iter().enumerate() {
        stages.push(match &st.kind {
            StageKind::Trainable(cb) => {
                let file = format!("stage_{i:02}.rrvqcb");
                fs::write(dir.join(&file), cb.to_bytes())?;
                StageEntry::Trainable {
                    file,
                    size: cb.len(),
                    normalize: st.normalize,
                    projection: projection_spec(st),
                }
            }
            StageKind::Random { sample_size, gain } => StageEntry::Random {
                sample_size: *sample_size,
                gain: *gain,
                normalize: st.normalize,
                projection: projection_spec(st),
            },
        });
    }
    let big = match stack.big() {
        Some(b) => {
            let file = "big.rrvqcb".to_string();
            fs::write(dir.join(&file), b.codebook().to_bytes())?;
            Some(BigEntry {
                file,
                size: b.len(),
                dim: b.dim(),
                seed: b.seed(),
            })
        }
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        dim: stack.dim(),
        resample_mode: stack.resample_mode(),
        disjoint: stack.disjoint(),
        master_seed: stack.master_seed(),
        big,
        stages,
        training: training.copied(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let raw = fs::read(dir.as_ref().join(MANIFEST))?;
    let m: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::parse(format!("stack manifest: {e}")))?;
    if m.format != FORMAT {
        return Err(Error::parse(format!("unknown stack format {:?}", m.format)));
    }
    Ok(m)
}

pub fn load_stack(dir: impl AsRef<Path>) -> Result<QuantizerStack> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let big = match &m.big {
        Some(b) => {
            let cb = Codebook::from_bytes(&fs::read(dir.join(&b.file))?, "big", false)?;
            if cb.len() != b.size || cb.dim() != b.dim {
                return Err(Error::parse("big codebook file disagrees with the manifest"));
            }
            Some(Arc::new(BigCodebook::from_codebook(cb)))
        }
        None => None,
    };
    let projection = |p: &Option<ProjectionSpec>| -> Result<_> {
        p.as_ref()
            .map(|p| make_projection(m.dim, p.d_proj, p.seed))
            .transpose()
    };
    let mut stages = Vec::with_capacity(m.stages.len());
    for (i, entry) in m.stages.iter().enumerate() {
        stages.push(match entry {
            StageEntry::Trainable {
                file,
                size,
                normalize,
                projection: p,
            } => {
                let cb = Codebook::from_bytes(&fs::read(dir.join(file))?, format!("stage-{i}"), true)?;
                if cb.len() != *size {
                    return Err(Error::parse(format!("stage {i} codebook size disagrees with the manifest")));
                }
                QuantizerStage {
                    kind: StageKind::Trainable(cb),
                    projection: projection(p)?,
                    normalize: *normalize,
                }
            }
            StageEntry::Random {
                sample_size,
                gain,
                normalize,
                projection: p,
            } => QuantizerStage {
                kind: StageKind::Random {
                    sample_size: *sample_size,
                    gain: *gain,
                },
                projection: projection(p)?,
                normalize: *normalize,
            },
        });
    }
    QuantizerStack::new(m.dim, stages, big, m.resample_mode, m.disjoint, m.master_seed)
}
