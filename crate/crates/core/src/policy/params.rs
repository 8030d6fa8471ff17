//! Policy hyper-parameters, the flat parameter layout and checkpoint files.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub n_layers: usize,
    /// Environment grid side, in cells.
    pub grid_size: usize,
    /// Coarse observation grid side, in patches.
    pub coarse_grid: usize,
    /// Side of the square evidence patch, in pixels.
    pub evidence_res: usize,
    pub max_instr_len: usize,
    /// Maximum number of trace positions, action slots included.
    pub max_seq_len: usize,
    pub chunk_len: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: crate::vocab::Vocabulary::default().len(),
            d_model: 32,
            mlp_hidden: 64,
            n_layers: 2,
            grid_size: 12,
            coarse_grid: 6,
            evidence_res: 24,
            max_instr_len: 16,
            max_seq_len: 128,
            chunk_len: 4,
        }
    }
}

impl PolicyConfig {
    pub fn proprio_dim(&self) -> usize {
        2 * self.grid_size + 1
    }

    /// Number of distinct gripper-relative cell offsets along one axis.
    pub fn offset_range(&self) -> usize {
        2 * self.grid_size - 1
    }

    pub fn evidence_dim(&self) -> usize {
        self.evidence_res * self.evidence_res * 3
    }

    /// First eight bytes of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 8] {
        let json = serde_json::to_vec(self).expect("config serializes");
        let d = Sha256::digest(&json);
        d[..8].try_into().expect("digest has 8 bytes")
    }
}

/// Offsets of one transformer block inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every named tensor; matrices are row-major `[out][in]`.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub tok_emb: Range<usize>,
    pub prop_w: Range<usize>,
    pub obs_w: Range<usize>,
    pub obs_b: Range<usize>,
    pub rel_x: Range<usize>,
    pub rel_y: Range<usize>,
    pub instr_pos: Range<usize>,
    pub trace_pos: Range<usize>,
    pub slot_emb: Range<usize>,
    pub ev_w: Range<usize>,
    pub ev_b: Range<usize>,
    pub tool_err: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
}

impl ParamLayout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden;
        let mut c = Cursor(0);
        let tok_emb = c.take(cfg.vocab_size * d);
        let prop_w = c.take(d * cfg.proprio_dim());
        let obs_w = c.take(d * 3);
        let obs_b = c.take(d);
        let rel_x = c.take(cfg.offset_range() * d);
        let rel_y = c.take(cfg.offset_range() * d);
        let instr_pos = c.take(cfg.max_instr_len * d);
        let trace_pos = c.take(cfg.max_seq_len * d);
        let slot_emb = c.take(cfg.chunk_len * d);
        let ev_w = c.take(d * cfg.evidence_dim());
        let ev_b = c.take(d);
        let tool_err = c.take(d);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockLayout {
                ln1_g: c.take(d),
                ln1_b: c.take(d),
                wq: c.take(d * d),
                wk: c.take(d * d),
                wv: c.take(d * d),
                wo: c.take(d * d),
                ln2_g: c.take(d),
                ln2_b: c.take(d),
                w1: c.take(h * d),
                b1: c.take(h),
                w2: c.take(d * h),
                b2: c.take(d),
            })
            .collect();
        let lnf_g = c.take(d);
        let lnf_b = c.take(d);
        let w_out = c.take(cfg.vocab_size * d);
        let b_out = c.take(cfg.vocab_size);
        ParamLayout {
            tok_emb,
            prop_w,
            obs_w,
            obs_b,
            rel_x,
            rel_y,
            instr_pos,
            trace_pos,
            slot_emb,
            ev_w,
            ev_b,
            tool_err,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: c.0,
        }
    }

    fn gains(&self) -> Vec<Range<usize>> {
        let mut g: Vec<Range<usize>> = self
            .blocks
            .iter()
            .flat_map(|b| [b.ln1_g.clone(), b.ln2_g.clone()])
            .collect();
        g.push(self.lnf_g.clone());
        g
    }

    fn biases(&self) -> Vec<Range<usize>> {
        let mut v = vec![
            self.obs_b.clone(),
            self.ev_b.clone(),
            self.lnf_b.clone(),
            self.b_out.clone(),
        ];
        for b in &self.blocks {
            v.extend([b.ln1_b.clone(), b.ln2_b.clone(), b.b1.clone(), b.b2.clone()]);
        }
        v
    }
}

/// Flat float64 parameter vector with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        let n = ParamLayout::new(&config).total;
        PolicyParams {
            config,
            values: vec![0.0; n],
        }
    }

    /// Gaussian initialisation with unit layer-norm gains and zero biases.
    pub fn init(config: PolicyConfig, seed: u64) -> Self {
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut values: Vec<f64> = (0..layout.total).map(|_| normal.sample(&mut rng)).collect();
        // Evidence encoder fans in from 1728 pixels; keep its output scale comparable.
        let ev_scale = (config.d_model as f64 / config.evidence_dim() as f64).sqrt();
        for v in &mut values[layout.ev_w.clone()] {
            *v *= ev_scale;
        }
        for r in layout.biases() {
            values[r].fill(0.0);
        }
        for r in layout.gains() {
            values[r].fill(1.0);
        }
        PolicyParams { config, values }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&self.config.hash())?;
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        f.write_all(&(cfg.len() as u32).to_le_bytes())?;
        f.write_all(&cfg)?;
        f.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Loads a checkpoint; when `expected` is given its hash must match the header.
    pub fn load(path: &Path, expected: Option<&PolicyConfig>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader {
            bytes: &bytes,
            at: 0,
        };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hash: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
        let cfg_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let config: PolicyConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        if config.hash() != hash {
            return Err(CheckpointError::Corrupt(
                "config hash does not match embedded config".into(),
            ));
        }
        if let Some(exp) = expected {
            if exp.hash() != hash {
                return Err(CheckpointError::Mismatch {
                    expected: hex(&exp.hash()),
                    found: hex(&hash),
                });
            }
        }
        let n = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        if n != ParamLayout::new(&config).total {
            return Err(CheckpointError::Corrupt(format!(
                "parameter count {n} does not fit config"
            )));
        }
        let values = (0..n)
            .map(|_| {
                r.take(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if r.at != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(PolicyParams { config, values })
    }
}

const MAGIC: &[u8; 8] = b"ZVLAPOL\0";
const VERSION: u32 = 1;

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a policy checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint config hash {found} differs from expected {expected}")]
    Mismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("bad embedded config: {0}")]
    Config(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_small() {
        let n = ParamLayout::new(&PolicyConfig::default()).total;
        assert!(n < 200_000, "{n} parameters");
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let p = PolicyParams::init(PolicyConfig::default(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path, Some(&p.config)).unwrap(), p);
        let other = PolicyConfig {
            d_model: 16,
            ..PolicyConfig::default()
        };
        assert!(matches!(
            PolicyParams::load(&path, Some(&other)),
            Err(CheckpointError::Mismatch { .. })
        ));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            PolicyParams::load(&path, None),
            Err(CheckpointError::Truncated)
        ));
    }
}
