//! Single-file checkpoint archive.
//!
//! Layout: magic, little-endian `u64` header length, JSON header, `u64`
//! value count, that many little-endian `f32`s, and a SHA-256 of everything
//! before it. The header lists every tensor with its offset into the value
//! block, so loading needs no out-of-band information.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::config::{model_config_hash, DiscriminatorConfig, GeneratorConfig};
use crate::model::layers::ParamStore;
use crate::model::{Discriminator, Generator};
use crate::training::{TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"DMLCKPT\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

/// Everything needed to continue the random streams: they are all derived
/// from the run seed and these counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub data_order_epoch: u64,
    pub dropout_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub optimizer_steps: [u64; 2],
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    header: CheckpointHeader,
    values: Vec<f32>,
}

type Table = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn push_table(prefix: &str, table: &Table, tensors: &mut Vec<TensorEntry>, values: &mut Vec<f32>) {
    for (name, (dims, data)) in table {
        tensors.push(TensorEntry { name: format!("{prefix}/{name}"), dims: dims.clone(), offset: values.len() });
        values.extend_from_slice(data);
    }
}

fn moments(params: &ParamStore, table: &BTreeMap<String, Vec<f32>>) -> Table {
    // Moments are created lazily; before the first step they are zeros.
    params
        .vars()
        .iter()
        .map(|(k, v)| {
            let data = table.get(k).cloned().unwrap_or_else(|| vec![0.0; v.elem_count()]);
            (k.clone(), (v.dims().to_vec(), data))
        })
        .collect()
}

impl Checkpoint {
    pub fn header(&self) -> &CheckpointHeader {
        &self.header
    }

    pub fn config_hash(&self) -> &str {
        &self.header.config_hash
    }

    fn table(&self, prefix: &str) -> Result<Table> {
        let p = format!("{prefix}/");
        let mut out = Table::new();
        for e in &self.header.tensors {
            if let Some(name) = e.name.strip_prefix(&p) {
                let n: usize = e.dims.iter().product();
                let data = self
                    .values
                    .get(e.offset..e.offset + n)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the value block", e.name)))?;
                out.insert(name.to_string(), (e.dims.clone(), data.to_vec()));
            }
        }
        Ok(out)
    }

    fn flat(&self, prefix: &str) -> Result<BTreeMap<String, Vec<f32>>> {
        Ok(self.table(prefix)?.into_iter().map(|(k, (_, v))| (k, v)).collect())
    }

    /// Generator with the stored weights.
    pub fn generator(&self) -> Result<Generator> {
        let g = Generator::new(&self.header.generator, 0)?;
        g.params().restore(&self.table("generator")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(g)
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        let d = Discriminator::new(&self.header.discriminator, self.header.generator.resolution, 0)?;
        d.params().restore(&self.table("discriminator")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(d)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + 16 + header.len() + 4 * self.values.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 16 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint archive"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let read_u64 = |at: usize| -> Result<u64> {
            body.get(at..at + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| corrupt("truncated archive"))
        };
        let mut at = MAGIC.len();
        let hlen = read_u64(at)? as usize;
        at += 8;
        let header_bytes = body.get(at..at.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        at += hlen;
        let count = read_u64(at)? as usize;
        at += 8;
        if body.len() - at != count.saturating_mul(4) {
            return Err(corrupt("value block length disagrees with header"));
        }
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let values = body[at..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let ck = Self { header, values };
        let expected = model_config_hash(&ck.header.generator, &ck.header.discriminator);
        if expected != ck.header.config_hash {
            return Err(Error::Checkpoint("stored config hash does not match stored configs".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        let gp = self.generator.params();
        let dp = self.discriminator.params();
        let (g_steps, g_m, g_v) = self.opt_g.state();
        let (d_steps, d_m, d_v) = self.opt_d.state();
        push_table("generator", &gp.snapshot()?, &mut tensors, &mut values);
        push_table("discriminator", &dp.snapshot()?, &mut tensors, &mut values);
        push_table("adam_g.m", &moments(gp, g_m), &mut tensors, &mut values);
        push_table("adam_g.v", &moments(gp, g_v), &mut tensors, &mut values);
        push_table("adam_d.m", &moments(dp, d_m), &mut tensors, &mut values);
        push_table("adam_d.v", &moments(dp, d_v), &mut tensors, &mut values);
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config_hash: model_config_hash(self.generator.config(), self.discriminator.config()),
            generator: self.generator.config().clone(),
            discriminator: self.discriminator.config().clone(),
            train: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState { seed: self.cfg.seed, data_order_epoch: self.epoch as u64, dropout_step: self.step },
            optimizer_steps: [g_steps, d_steps],
            tensors,
        };
        Ok(Checkpoint { header, values })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        let mut t = Trainer::new(&h.generator, &h.discriminator, &h.train)?;
        t.generator = ck.generator()?;
        t.discriminator = ck.discriminator()?;
        t.opt_g.restore_state(h.optimizer_steps[0], ck.flat("adam_g.m")?, ck.flat("adam_g.v")?)?;
        t.opt_d.restore_state(h.optimizer_steps[1], ck.flat("adam_d.m")?, ck.flat("adam_d.v")?)?;
        t.epoch = h.epoch;
        t.step = h.step;
        Ok(t)
    }
}
