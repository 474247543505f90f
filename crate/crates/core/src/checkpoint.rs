//! Binary checkpoints.
//!
//! Layout (little endian): magic `TGLRN\x01`, node count (u64), the run
//! config as text, the scaler, the road-network edge list, then a parameter
//! table of `(name, rank, dims, f64 payload)` entries. Strings are a u64
//! byte length followed by UTF-8.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::roadnet::RoadNetwork;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"TGLRN\x01";

pub fn to_bytes(model: &Model, run: &RunConfig) -> Result<Vec<u8>> {
    let nodes = model.config.nodes;
    let mut expected = run.model_config(nodes);
    expected.hop_estimator = model.config.hop_estimator;
    if expected != model.config {
        return Err(Error::State("run config does not describe this model".into()));
    }
    let mut out = MAGIC.to_vec();
    put_u64(&mut out, nodes as u64);
    put_str(&mut out, &run.to_text());
    put_u64(&mut out, model.scaler.mean.len() as u64);
    for v in model.scaler.mean.iter().chain(&model.scaler.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u64(&mut out, model.network.edges().len() as u64);
    for &(i, j) in model.network.edges() {
        put_u64(&mut out, i as u64);
        put_u64(&mut out, j as u64);
    }
    put_u64(&mut out, model.store.len() as u64);
    for p in model.store.iter() {
        put_str(&mut out, &p.name);
        put_u64(&mut out, p.tensor.shape().len() as u64);
        for &d in p.tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, run: &RunConfig) -> Result<()> {
    let bytes = to_bytes(model, run)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model. `expected_nodes` rejects checkpoints for other networks.
pub fn from_bytes(bytes: &[u8], expected_nodes: Option<usize>) -> Result<(RunConfig, Model)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a TGLRN checkpoint (bad magic or version)".into()));
    }
    let nodes = r.usize("node count")?;
    if let Some(n) = expected_nodes {
        if n != nodes {
            return Err(Error::Format(format!("checkpoint is for N = {nodes} sensors, expected N = {n}")));
        }
    }
    let run = RunConfig::from_text(&r.string("config")?)
        .map_err(|e| Error::Format(format!("embedded config: {}", e.message())))?;
    let groups = r.usize("scaler size")?;
    if groups != 1 && groups != nodes {
        return Err(Error::Format(format!("scaler covers {groups} sensors, expected 1 or {nodes}")));
    }
    let mean = (0..groups).map(|_| r.f64("scaler")).collect::<Result<Vec<_>>>()?;
    let std = (0..groups).map(|_| r.f64("scaler")).collect::<Result<Vec<_>>>()?;
    let n_edges = r.usize("edge count")?;
    let edges = (0..n_edges)
        .map(|_| Ok((r.usize("edge")?, r.usize("edge")?)))
        .collect::<Result<Vec<_>>>()?;
    let network = RoadNetwork::build_asp(&edges, nodes).map_err(|e| Error::Format(format!("edge list: {}", e.message())))?;

    let mut model = Model::new(run.model_config(nodes), network, Scaler { mean, std }, 0)
        .map_err(|e| Error::Format(format!("embedded config: {}", e.message())))?;
    let count = r.usize("parameter count")?;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, the configured model has {}",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = r.string("parameter name")?;
        let rank = r.usize("parameter rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("parameter {name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.usize("parameter shape")).collect::<Result<Vec<_>>>()?;
        let expected = model.store.get(id);
        if name != expected.name || shape != expected.tensor.shape() {
            return Err(Error::Format(format!(
                "parameter mismatch: checkpoint has {name} {shape:?}, model expects {} {:?}",
                expected.name,
                expected.tensor.shape()
            )));
        }
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64("parameter payload")).collect::<Result<Vec<_>>>()?;
        *model.store.value_mut(id) = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after parameter table", bytes.len() - r.pos)));
    }
    Ok((run, model))
}

pub fn load(path: &Path, expected_nodes: Option<usize>) -> Result<(RunConfig, Model)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected_nodes)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} out of range")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.usize(what)?;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (RunConfig, Model) {
        let run = RunConfig { hidden: 4, embed_dim: 3, hop_embed_dim: 3, n_blocks: 1, hop_group: 2, ..RunConfig::default() };
        let net = RoadNetwork::build_asp(&[(0, 1), (1, 2), (2, 3), (3, 4)], 5).unwrap();
        let scaler = Scaler { mean: vec![1.0, 2.0, 3.0, 4.0, 5.0], std: vec![0.5; 5] };
        let model = Model::new(run.model_config(5), net, scaler, 9).unwrap();
        (run, model)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (run, model) = small();
        let bytes = to_bytes(&model, &run).unwrap();
        let (run2, back) = from_bytes(&bytes, Some(5)).unwrap();
        assert_eq!(run2, run);
        assert_eq!(back.scaler, model.scaler);
        assert_eq!(back.network, model.network);
        for (a, b) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor, b.tensor);
        }
        let w = Tensor::matrix(12, 5, (0..60).map(|k| (k as f64).sin()).collect());
        assert_eq!(model.predict(&w).unwrap(), back.predict(&w).unwrap());
    }

    #[test]
    fn truncation_magic_and_node_count_are_format_errors() {
        let (run, model) = small();
        let bytes = to_bytes(&model, &run).unwrap();
        for cut in [0, 3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut], None), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[5] = 2;
        assert!(matches!(from_bytes(&bad, None), Err(Error::Format(_))));
        match from_bytes(&bytes, Some(7)) {
            Err(Error::Format(msg)) => assert!(msg.contains("N = 5") && msg.contains("N = 7"), "{msg}"),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra, None), Err(Error::Format(_))));
    }
}
