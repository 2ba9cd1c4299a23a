//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "S2RC"
//! version          u16      currently 1
//! epoch            u64
//! adam_step        u64
//! rng_seed         u64
//! rng_word_pos     u128
//! classes          u32
//! bands            u32
//! patch_channels   u32
//! config_len       u32      followed by that many TOML bytes
//! blob_count       u32
//!   per blob: name_len u32, name bytes, numel u64, numel f64 values
//! graphs_present   u8       0 or 1
//!   if 1: two graphs (spatial, joint), each n_nodes u64, k_used u64,
//!         then two CSR sections (adjacency, normalized)
//! ```
//!
//! Blobs carry every model parameter and running statistic under the same
//! names the tape uses, plus the Adam moments as `adam.m.<name>` /
//! `adam.v.<name>`. Loading rebuilds the model from the stored config and
//! dimensions, then overwrites every tensor, so a save → load → save cycle
//! is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::{AdamState, GraphCache, Model, TrainerState};
use crate::dataio::{write_atomic, TrainConfig};
use crate::graph::GraphData;
use crate::numkit::{CsrMatrix, SeededRng, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"S2RC";
const VERSION: u16 = 1;

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u128(out: &mut Vec<u8>, v: u128) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "checkpoint: truncated (need {} bytes at offset {}, file has {})",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::data("checkpoint: non-UTF-8 string field"))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Data(format!(
                "checkpoint: {} trailing bytes after the last section",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_csr(out: &mut Vec<u8>, m: &CsrMatrix) {
    put_u64(out, m.n_rows() as u64);
    put_u64(out, m.n_cols() as u64);
    put_u64(out, m.nnz() as u64);
    for r in 0..m.n_rows() {
        put_u64(out, m.row_nnz(r) as u64);
    }
    for r in 0..m.n_rows() {
        for (c, _) in m.row_entries(r) {
            put_u64(out, c as u64);
        }
    }
    for r in 0..m.n_rows() {
        for (_, v) in m.row_entries(r) {
            put_f64(out, v);
        }
    }
}

fn read_csr(r: &mut Reader) -> Result<CsrMatrix> {
    let n_rows = r.u64()? as usize;
    let n_cols = r.u64()? as usize;
    let nnz = r.u64()? as usize;
    let mut row_nnz = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        row_nnz.push(r.u64()? as usize);
    }
    if row_nnz.iter().sum::<usize>() != nnz {
        return Err(Error::data("checkpoint: CSR row counts disagree with nnz"));
    }
    let mut cols = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        cols.push(r.u64()? as usize);
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n_rows);
    let mut at = 0;
    for &cnt in &row_nnz {
        let mut row = Vec::with_capacity(cnt);
        for _ in 0..cnt {
            row.push((cols[at], r.f64()?));
            at += 1;
        }
        rows.push(row);
    }
    CsrMatrix::from_rows(n_rows, n_cols, rows)
}

fn put_graph(out: &mut Vec<u8>, g: &GraphData) {
    put_u64(out, g.n_nodes as u64);
    put_u64(out, g.k_used as u64);
    put_csr(out, &g.adjacency);
    put_csr(out, &g.normalized);
}

fn read_graph(r: &mut Reader) -> Result<GraphData> {
    let n_nodes = r.u64()? as usize;
    let k_used = r.u64()? as usize;
    let adjacency = Arc::new(read_csr(r)?);
    let normalized = Arc::new(read_csr(r)?);
    if adjacency.n_rows() != n_nodes || normalized.n_rows() != n_nodes {
        return Err(Error::data("checkpoint: graph size disagrees with its matrices"));
    }
    Ok(GraphData { n_nodes, adjacency, normalized, k_used })
}

fn put_blob(out: &mut Vec<u8>, name: &str, data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, data.len() as u64);
    for &v in data {
        put_f64(out, v);
    }
}

/// Serializes the full trainer state to bytes.
pub fn encode(state: &mut TrainerState) -> Vec<u8> {
    let mut blobs: Vec<(String, Vec<f64>)> = Vec::new();
    state.model.visit_params(&mut |n, t| blobs.push((n, t.data().to_vec())));
    state.model.visit_buffers(&mut |n, t| blobs.push((n, t.data().to_vec())));
    for (n, t) in &state.adam.m {
        blobs.push((format!("adam.m.{n}"), t.data().to_vec()));
    }
    for (n, t) in &state.adam.v {
        blobs.push((format!("adam.v.{n}"), t.data().to_vec()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u64(&mut out, state.epoch);
    put_u64(&mut out, state.adam.step);
    let (seed, word_pos) = state.rng.state();
    put_u64(&mut out, seed);
    put_u128(&mut out, word_pos);
    put_u32(&mut out, state.model.classes as u32);
    put_u32(&mut out, state.model.bands as u32);
    put_u32(&mut out, state.model.patch_channels as u32);
    let config = state.config.to_toml_string();
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());
    put_u32(&mut out, blobs.len() as u32);
    for (name, data) in &blobs {
        put_blob(&mut out, name, data);
    }
    match &state.graphs {
        Some(g) => {
            out.push(1);
            put_graph(&mut out, &g.a_p);
            put_graph(&mut out, &g.a_j);
        }
        None => out.push(0),
    }
    out
}

pub fn save_checkpoint(state: &mut TrainerState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state))
}

/// Rebuilds a [`TrainerState`] from bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainerState> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::data("checkpoint: bad magic bytes (not a checkpoint file)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "checkpoint: unsupported format version {version} (this build reads {VERSION})"
        )));
    }
    let epoch = r.u64()?;
    let adam_step = r.u64()?;
    let rng_seed = r.u64()?;
    let rng_word_pos = r.u128()?;
    let classes = r.u32()? as usize;
    let bands = r.u32()? as usize;
    let patch_channels = r.u32()? as usize;
    let config_len = r.u32()? as usize;
    let config = TrainConfig::from_toml_str(&r.string(config_len)?)?;

    let blob_count = r.u32()? as usize;
    let mut blobs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..blob_count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let numel = r.u64()? as usize;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        if blobs.insert(name.clone(), data).is_some() {
            return Err(Error::Data(format!("checkpoint: duplicate tensor {name}")));
        }
    }

    let graphs = match r.u8()? {
        0 => None,
        1 => Some(GraphCache { a_p: read_graph(&mut r)?, a_j: read_graph(&mut r)? }),
        b => return Err(Error::Data(format!("checkpoint: invalid graph flag {b}"))),
    };
    r.done()?;

    // Rebuild the architecture, then overwrite every tensor from the blobs.
    // The init RNG is irrelevant: nothing it produces survives.
    let mut init_rng = SeededRng::new(0);
    let mut model = Model::new(&config, bands, patch_channels, classes, &mut init_rng)?;

    let mut failure: Option<Error> = None;
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    {
        let mut restore = |name: String, t: &mut Tensor| {
            if failure.is_some() {
                return;
            }
            match blobs.remove(&name) {
                Some(data) if data.len() == t.numel() => {
                    shapes.insert(name, t.shape().to_vec());
                    t.data_mut().copy_from_slice(&data);
                }
                Some(data) => {
                    failure = Some(Error::Data(format!(
                        "checkpoint: tensor {name} has {} values, model expects {}",
                        data.len(),
                        t.numel()
                    )));
                }
                None => {
                    failure = Some(Error::Data(format!("checkpoint: missing tensor {name}")));
                }
            }
        };
        model.visit_params(&mut restore);
        model.visit_buffers(&mut restore);
    }
    if let Some(e) = failure {
        return Err(e);
    }

    let mut adam = AdamState { step: adam_step, ..AdamState::default() };
    for (name, data) in blobs {
        let (which, param) = match name.strip_prefix("adam.m.") {
            Some(p) => (true, p.to_string()),
            None => match name.strip_prefix("adam.v.") {
                Some(p) => (false, p.to_string()),
                None => {
                    return Err(Error::Data(format!("checkpoint: unexpected tensor {name}")))
                }
            },
        };
        let shape = shapes
            .get(&param)
            .ok_or_else(|| {
                Error::Data(format!("checkpoint: moment {name} has no matching parameter"))
            })?
            .clone();
        let t = Tensor::from_vec(&shape, data).map_err(|_| {
            Error::Data(format!("checkpoint: moment {name} disagrees with parameter shape"))
        })?;
        if which {
            adam.m.insert(param, t);
        } else {
            adam.v.insert(param, t);
        }
    }
    if adam.step > 0 && (adam.m.is_empty() || adam.m.len() != adam.v.len()) {
        return Err(Error::data("checkpoint: optimizer moments are incomplete"));
    }

    if let Some(g) = &graphs {
        if g.a_p.n_nodes != g.a_j.n_nodes {
            return Err(Error::data("checkpoint: cached graphs cover different node sets"));
        }
    }

    Ok(TrainerState {
        model,
        config,
        adam,
        epoch,
        rng: SeededRng::restore(rng_seed, rng_word_pos),
        graphs,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("checkpoint: cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}
