//! Binary checkpoint files.
//!
//! ```text
//! "DSNN" | version u32 | count u32 | record*
//! record = name_len u32 | name | rank u32 | extent u32 * rank | dtype u8 | f32 LE * numel
//! [ 'O' | step u64 | count u32 | record* ]        optimizer moments, optional
//! ```
//!
//! Integers are little-endian. Architecture settings travel as `meta.*`
//! records ahead of the parameters so a file is self-describing. Optimizer
//! records are named `m/<param>` and `v/<param>`.

use std::path::Path;

use super::{DehazeSnn, ModelConfig, ModelError, Result, STAGES};
use crate::olif::{BranchMode, ScanInit};
use crate::tensor::{Scalar, Tensor};
use crate::train::adamw::OptimState;

pub const MAGIC: &[u8; 4] = b"DSNN";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_MARKER: u8 = b'O';
pub const DTYPE_F32: u8 = 0;

const VARIANTS: [&str; 3] = ["M", "L", "tiny"];

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self { name: name.into(), dims: t.shape().dims().to_vec(), data: t.data().iter().map(|v| v.as_f64() as f32).collect() }
    }

    fn meta(name: &str, values: &[f64]) -> Self {
        Self { name: format!("meta.{name}"), dims: vec![values.len()], data: values.iter().map(|&v| v as f32).collect() }
    }

    fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let dims: [usize; 4] = self
            .dims
            .clone()
            .try_into()
            .map_err(|_| err(format!("{}: expected rank 4, found rank {}", self.name, self.dims.len())))?;
        Ok(Tensor::from_vec(dims, self.data.iter().map(|&v| T::lit(v as f64)).collect())?)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
    }

    fn record(&mut self, r: &Record) {
        self.u32(r.name.len());
        self.0.extend_from_slice(r.name.as_bytes());
        self.u32(r.dims.len());
        for &d in &r.dims {
            self.u32(d);
        }
        self.0.push(DTYPE_F32);
        for v in &r.data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn records(&mut self, rs: &[Record]) {
        self.u32(rs.len());
        rs.iter().for_each(|r| self.record(r));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| err("tensor name is not UTF-8"))?;
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(err(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("extent overflow"))?;
        let bytes = self.take(numel.checked_mul(4).ok_or_else(|| err("extent overflow"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Record { name, dims, data })
    }

    fn records(&mut self) -> Result<Vec<Record>> {
        let count = self.u32()?;
        (0..count).map(|_| self.record()).collect()
    }
}

fn meta_records(c: &ModelConfig) -> Vec<Record> {
    let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let variant = VARIANTS.iter().position(|&v| v == c.variant).unwrap_or(VARIANTS.len());
    vec![
        Record::meta("variant", &[variant as f64]),
        Record::meta("depths", &as_f(&c.depths)),
        Record::meta("dims", &as_f(&c.dims)),
        Record::meta("mlp_ratio", &[c.mlp_ratio as f64]),
        Record::meta("groups", &[c.groups as f64]),
        Record::meta("drop_path_rate", &[c.drop_path_rate]),
        Record::meta("channel_norm", &[c.channel_norm as u8 as f64]),
        Record::meta("branch_mode", &[matches!(c.branch_mode, BranchMode::Split) as u8 as f64]),
        Record::meta("init_std", &[c.init_std]),
        Record::meta("scan_init", &[matches!(c.scan_init, ScanInit::Small) as u8 as f64]),
    ]
}

/// Widens through the shortest decimal form so `0.02f32` reads back as `0.02`.
fn decimal(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn config_from_meta(meta: &[Record]) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<&[f32]> {
        let full = format!("meta.{name}");
        meta.iter().find(|r| r.name == full).map(|r| r.data.as_slice()).ok_or_else(|| err(format!("missing {full}")))
    };
    let one = |name: &str| -> Result<f32> {
        match get(name)? {
            [v] => Ok(*v),
            _ => Err(err(format!("meta.{name} must hold one value"))),
        }
    };
    let five = |name: &str| -> Result<[usize; STAGES]> {
        let v = get(name)?;
        let v: [f32; STAGES] = v.try_into().map_err(|_| err(format!("meta.{name} must hold {STAGES} values")))?;
        Ok(v.map(|x| x as usize))
    };
    let variant = VARIANTS.get(one("variant")? as usize).copied().unwrap_or("custom");
    Ok(ModelConfig {
        variant: variant.into(),
        depths: five("depths")?,
        dims: five("dims")?,
        mlp_ratio: one("mlp_ratio")? as usize,
        groups: one("groups")? as usize,
        drop_path_rate: decimal(one("drop_path_rate")?),
        channel_norm: one("channel_norm")? != 0.0,
        branch_mode: if one("branch_mode")? != 0.0 { BranchMode::Split } else { BranchMode::Duplicate },
        init_std: decimal(one("init_std")?),
        scan_init: if one("scan_init")? != 0.0 { ScanInit::Small } else { ScanInit::FanIn },
    })
}

/// Serializes a model and, optionally, its optimizer state.
pub fn encode<T: Scalar>(model: &DehazeSnn<T>, optim: Option<&OptimState<T>>) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    let mut records = meta_records(&model.config);
    records.extend(model.params.iter().map(|p| Record::from_tensor(p.name.clone(), &p.value)));
    w.records(&records);
    if let Some(s) = optim {
        w.0.push(OPTIMIZER_MARKER);
        w.0.extend_from_slice(&s.step.to_le_bytes());
        let mut rs = Vec::with_capacity(2 * model.params.len());
        for (p, m) in model.params.iter().zip(&s.m) {
            rs.push(Record::from_tensor(format!("m/{}", p.name), m));
        }
        for (p, v) in model.params.iter().zip(&s.v) {
            rs.push(Record::from_tensor(format!("v/{}", p.name), v));
        }
        w.records(&rs);
    }
    w.0
}

/// Inverse of [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(DehazeSnn<T>, Option<OptimState<T>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(err("bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let records = r.records()?;
    let (meta, tensors): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.name.starts_with("meta."));
    let config = config_from_meta(&meta)?;
    let mut model = DehazeSnn::<T>::from_seed(config, 0)?;
    if tensors.len() != model.params.len() {
        return Err(err(format!("expected {} parameter tensors, found {}", model.params.len(), tensors.len())));
    }
    for rec in &tensors {
        let id = model.params.find(&rec.name).ok_or_else(|| err(format!("unknown parameter {}", rec.name)))?;
        let t = rec.to_tensor::<T>()?;
        if t.shape() != model.params.value(id).shape() {
            return Err(err(format!("{}: shape {} does not match {}", rec.name, t.shape(), model.params.value(id).shape())));
        }
        *model.params.value_mut(id) = t;
    }

    let optim = match r.take(1) {
        Err(_) => None,
        Ok([OPTIMIZER_MARKER]) => {
            let step = r.u64()?;
            let recs = r.records()?;
            let find = |prefix: &str, p: &str| -> Result<Tensor<T>> {
                let name = format!("{prefix}/{p}");
                recs.iter().find(|r| r.name == name).ok_or_else(|| err(format!("missing {name}")))?.to_tensor()
            };
            let mut m = Vec::with_capacity(model.params.len());
            let mut v = Vec::with_capacity(model.params.len());
            for p in model.params.iter() {
                let (mt, vt) = (find("m", &p.name)?, find("v", &p.name)?);
                if mt.shape() != p.value.shape() || vt.shape() != p.value.shape() {
                    return Err(err(format!("optimizer moments of {} have the wrong shape", p.name)));
                }
                m.push(mt);
                v.push(vt);
            }
            if recs.len() != 2 * model.params.len() {
                return Err(err("unexpected optimizer records"));
            }
            Some(OptimState { step, m, v })
        }
        Ok(other) => return Err(err(format!("unknown section marker {:#04x}", other[0]))),
    };
    if r.pos != bytes.len() {
        return Err(err("trailing bytes after checkpoint"));
    }
    Ok((model, optim))
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, model: &DehazeSnn<T>, optim: Option<&OptimState<T>>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(model, optim))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(DehazeSnn<T>, Option<OptimState<T>>)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DehazeSnn<f32> {
        DehazeSnn::from_seed(ModelConfig::tiny(), 21).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&tiny(), None);
        assert_eq!(&bytes[..4], b"DSNN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = tiny();
        let a = encode(&m, None);
        let (back, opt) = decode::<f32>(&a).unwrap();
        assert!(opt.is_none());
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(encode(&back, None), a);

        let state = OptimState {
            step: 7,
            m: m.params.iter().map(|p| p.value.map(|v| v * 0.5)).collect(),
            v: m.params.iter().map(|p| p.value.map(|v| v * v)).collect(),
        };
        let b = encode(&m, Some(&state));
        let (back, opt) = decode::<f32>(&b).unwrap();
        assert_eq!(opt.as_ref(), Some(&state));
        assert_eq!(encode(&back, opt.as_ref()), b);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bytes = encode(&tiny(), None);
        let e = decode::<f32>(b"XXXX\x01\0\0\0").unwrap_err();
        assert!(e.to_string().contains("bad checkpoint magic"), "{e}");
        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).is_err());
        bytes[4] = 9;
        assert!(decode::<f32>(&bytes).unwrap_err().to_string().contains("version"));
    }
}
