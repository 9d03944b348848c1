//! Named parameter stores and the `CDM1` checkpoint container.
//!
//! Layout (all integers 64-bit little-endian):
//!
//! ```text
//! "CDM1" | count | { path_len | path bytes | rank | dims[rank] } * count | f32 LE payload
//! ```
//!
//! The payload holds every tensor's data back to back, in manifest order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDM1";

/// Ordered map from parameter path to tensor.
///
/// Iteration is sorted by path, so anything derived from iteration order
/// (serialization, optimizer updates, finite differences) is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts a parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let path = path.into();
        ensure!(!self.tensors.contains_key(&path), "duplicate parameter path `{path}`");
        self.tensors.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// A store with the same paths and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Moves every entry of `other` into `self` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) -> Result<()> {
        for (k, v) in &other.tensors {
            self.insert(format!("{prefix}{k}"), v.clone())?;
        }
        Ok(())
    }

    /// Entries whose path starts with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// True if both stores have the same paths with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

/// Truncated normal draw, rejecting anything beyond two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Fan-in scaled truncated-normal weight tensor.
pub fn fan_in_weight<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| truncated_normal(rng, std) as f32)
}

pub fn write_container<W: Write>(mut w: W, store: &ParamStore<f32>) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (path, t) in store.iter() {
        w.write_all(&(path.len() as u64).to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in store.iter() {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R, field: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(field, format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

// Guards against absurd allocations from corrupted headers.
const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 16;
const MAX_COUNT: u64 = 1 << 24;

pub fn read_container<R: Read>(mut r: R) -> Result<ParamStore<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format("magic", format!("truncated: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected {:?}, found {:?}", CHECKPOINT_MAGIC, magic),
        ));
    }
    let count = read_u64(&mut r, "count")?;
    if count > MAX_COUNT {
        return Err(Error::format("count", format!("implausible parameter count {count}")));
    }
    let mut manifest = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = read_u64(&mut r, &format!("param[{i}].path_len"))?;
        if len > MAX_NAME {
            return Err(Error::format(format!("param[{i}].path_len"), format!("{len} too long")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|e| Error::format(format!("param[{i}].path"), format!("truncated: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(format!("param[{i}].path"), "not valid UTF-8"))?;
        let rank = read_u64(&mut r, &format!("param[{i}].rank"))?;
        if rank > MAX_RANK {
            return Err(Error::format(format!("param[{i}].rank"), format!("rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for j in 0..rank {
            dims.push(read_u64(&mut r, &format!("param[{i}].dims[{j}]"))? as usize);
        }
        manifest.push((name, dims));
    }
    let mut store = ParamStore::new();
    for (i, (name, dims)) in manifest.into_iter().enumerate() {
        let numel: usize = dims.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(|e| {
            Error::format(format!("data[{name}]"), format!("payload truncated: {e}"))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(dims, data).expect("numel computed from dims");
        store
            .insert(name, tensor)
            .map_err(|e| Error::format(format!("param[{i}].path"), e.to_string()))?;
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::format("data", e.to_string()))? != 0 {
        return Err(Error::format("data", "trailing bytes after payload"));
    }
    Ok(store)
}

pub fn save_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_container(BufWriter::new(f), store).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_container(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("b.bias", Tensor::new([2], vec![0.5, -0.5]).unwrap()).unwrap();
        s.insert("a.weight", Tensor::new([2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn container_round_trip() {
        let s = sample_store();
        let mut buf = Vec::new();
        write_container(&mut buf, &s).unwrap();
        let back = read_container(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.numel(), 8);
    }

    #[test]
    fn bad_magic_names_field() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample_store()).unwrap();
        buf[0] = b'X';
        match read_container(buf.as_slice()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample_store()).unwrap();
        buf.truncate(buf.len() - 3);
        match read_container(buf.as_slice()) {
            Err(Error::Format { field, .. }) => assert!(field.starts_with("data["), "{field}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = sample_store();
        assert!(s.insert("a.weight", Tensor::zeros([1])).is_err());
    }
}
