//! Binary checkpoint: model configuration, named parameters and the `R_v` table.

use std::path::Path;

use crate::autograd::{Mat, ParamKind, ParamSet};
use crate::codec::{read_file, sha256_hex, write_file, Reader, Writer};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"TADGECKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub table: EmbeddingTable,
    pub epochs_done: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub num_vertices: usize,
    pub k: usize,
    pub heads: usize,
    pub blocks: usize,
    pub epochs_done: usize,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

fn write_mat(w: &mut Writer, m: &Mat) {
    w.u64(m.nrows() as u64);
    w.u64(m.ncols() as u64);
    w.f64s(m.iter().copied());
}

fn read_mat(r: &mut Reader) -> Result<Mat> {
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let data = r.f64s(rows * cols)?;
    Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Format {
        what: "checkpoint",
        message: e.to_string(),
    })
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config_hash: config_hash(&self.model.cfg),
            num_vertices: self.table.num_vertices(),
            k: self.model.cfg.k,
            heads: self.model.cfg.heads,
            blocks: self.model.cfg.blocks,
            epochs_done: self.epochs_done,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let h = self.header();
        w.str(&serde_json::to_string(&self.model.cfg).expect("config serializes"));
        w.str(&h.config_hash);
        for v in [h.num_vertices, h.k, h.heads, h.blocks, h.epochs_done] {
            w.u64(v as u64);
        }
        let p = &self.model.params;
        w.u32(p.len() as u32);
        for id in p.ids() {
            w.str(p.name(id));
            w.u8(matches!(p.kind(id), ParamKind::Table) as u8);
            write_mat(&mut w, p.value(id));
        }
        write_mat(&mut w, self.table.as_mat());
        w.finish(MAGIC, VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("checkpoint", bytes, MAGIC, VERSION)?;
        let bad = |message: String| Error::Format { what: "checkpoint", message };
        let cfg: ModelConfig = serde_json::from_str(&r.str()?).map_err(|e| bad(e.to_string()))?;
        let hash = r.str()?;
        if hash != config_hash(&cfg) {
            return Err(bad("config hash does not match stored config".into()));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let [num_vertices, k, heads, blocks, epochs_done] = dims;
        if (k, heads, blocks) != (cfg.k, cfg.heads, cfg.blocks) {
            return Err(bad("header dimensions disagree with config".into()));
        }
        let mut params = ParamSet::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let kind = if r.u8()? == 1 { ParamKind::Table } else { ParamKind::Dense };
            let m = read_mat(&mut r)?;
            params.add(name, kind, m);
        }
        let table = EmbeddingTable::from_mat(read_mat(&mut r)?)?;
        r.finish()?;
        if table.num_vertices() != num_vertices || table.k() != k {
            return Err(bad("embedding table shape disagrees with header".into()));
        }
        let model = Model::from_params(cfg, params)?;
        if model.num_vertices() != num_vertices {
            return Err(bad("input table shape disagrees with header".into()));
        }
        Ok(Self { model, table, epochs_done })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let table = EmbeddingTable::random(6, 4, 1);
        let cfg = ModelConfig {
            k: 4,
            heads: 2,
            blocks: 1,
            max_len: 3,
            ..ModelConfig::default()
        };
        Checkpoint {
            model: Model::new(cfg, table.as_mat()).unwrap(),
            table,
            epochs_done: 3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.header().num_vertices, 6);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum(_))));
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { .. })));
    }
}
