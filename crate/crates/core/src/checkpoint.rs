//! Binary container for weights, masks and batchnorm statistics.
//!
//! Layout: `b"SDD1"`, `u32` version, `u32` record count, then per record a
//! `u32`-length-prefixed UTF-8 name, `u32` rank and `u32` dims, the values as
//! little-endian `f32`, and a mask bitset (LSB first, padded to a byte).
//! Integers are little-endian.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::sparsify::{Mask, MaskSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDD1";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_records(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, records.len())?;
    for r in records {
        let n: usize = r.shape.iter().product();
        if r.data.len() != n || r.mask.len() != n {
            return Err(Error::Checkpoint(format!("record {} disagrees with its shape", r.name)));
        }
        put_u32(&mut out, r.name.len())?;
        out.extend_from_slice(r.name.as_bytes());
        put_u32(&mut out, r.shape.len())?;
        for &d in &r.shape {
            put_u32(&mut out, d)?;
        }
        for &v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut bits = vec![0u8; n.div_ceil(8)];
        for (i, _) in r.mask.iter().enumerate().filter(|(_, &k)| k) {
            bits[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bits);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(String::from("bad magic")));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint(String::from("record name is not UTF-8")))?
            .into();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(String::from("shape overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(String::from("shape overflows")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let bits = r.take(n.div_ceil(8))?;
        let mask = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        records.push(Record { name, shape, data, mask });
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(records)
}

/// Every parameter (with its mask, all-ones when unmasked) followed by the
/// batchnorm running statistics.
pub fn model_records(model: &Model<f32>, masks: &MaskSet) -> Vec<Record> {
    let mut out: Vec<Record> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| Record {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
            mask: masks
                .get(i)
                .map(|m| m.bits().to_vec())
                .unwrap_or_else(|| vec![true; p.value.numel()]),
        })
        .collect();
    for (layer, s) in model.bn_stats_named() {
        for (suffix, v) in [(RUNNING_MEAN, &s.mean), (RUNNING_VAR, &s.var)] {
            out.push(Record {
                name: format!("{layer}{suffix}"),
                shape: vec![v.len()],
                data: v.clone(),
                mask: vec![true; v.len()],
            });
        }
    }
    out
}

pub fn save(model: &Model<f32>, masks: &MaskSet) -> Result<Vec<u8>> {
    encode_records(&model_records(model, masks))
}

/// Loads a container into a model of the same architecture and returns its
/// masks (one per prunable parameter).
pub fn load(model: &mut Model<f32>, bytes: &[u8]) -> Result<MaskSet> {
    let records = decode_records(bytes)?;
    let find = |name: &str| {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    };
    let mut values = Vec::with_capacity(model.params().len());
    let mut masks = MaskSet::default();
    for (i, p) in model.params().iter().enumerate() {
        let r = find(&p.name)?;
        if r.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!("record {} has shape {:?}, model wants {:?}", r.name, r.shape, p.value.shape())));
        }
        if p.prunable {
            masks.insert(i, Mask::from_bits(r.mask.clone()));
        } else if r.mask.iter().any(|&k| !k) {
            return Err(Error::Checkpoint(format!("record {} is masked but not prunable", r.name)));
        }
        values.push(Tensor::new(r.shape.clone(), r.data.clone())?);
    }
    let layers: Vec<String> = model.bn_stats_named().map(|(n, _)| String::from(n)).collect();
    let mut stats = Vec::new();
    for layer in &layers {
        let mean = find(&format!("{layer}{RUNNING_MEAN}"))?.data.clone();
        let var = find(&format!("{layer}{RUNNING_VAR}"))?.data.clone();
        stats.push((mean, var));
    }
    model.set_param_values(values)?;
    for (layer, (mean, var)) in layers.iter().zip(stats) {
        let s = model.bn_stats_for_mut(layer).expect("listed above");
        if mean.len() != s.mean.len() || var.len() != s.var.len() {
            return Err(Error::Checkpoint(format!("running stats of {layer} have the wrong length")));
        }
        s.mean = mean;
        s.var = var;
        s.initialized = true;
    }
    Ok(masks)
}
