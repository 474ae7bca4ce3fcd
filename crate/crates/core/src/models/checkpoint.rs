//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PNCK" | version u8 | descriptor (u32 len + utf8)
//! tensor count u32
//!   per tensor: name (u32 len + utf8) | ndim u8 | dims u64… | data f32…
//! optimizer flag u8 (0 = absent, 1 = present)
//!   step u64 | lr f64 | best f64 | stale u32 | moment count u32
//!   per moment: ndim u8 | dims u64… | m f32… | v f32…
//! ```
//!
//! Tensor order is the model's canonical parameter order followed by its
//! buffers, so writing a freshly loaded checkpoint reproduces the file
//! byte for byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::pointnet::{PointNetClassifier, PointNetSegmenter};
use crate::models::ArchitectureSpec;
use crate::nn::optim::AdamSnapshot;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PNCK";
const VERSION: u8 = 1;

/// Which network a set of tensors belongs to, inferred from tensor names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    Segmenter,
}

/// A checkpoint as stored on disk: descriptor string, named f32 tensors,
/// and optionally the optimizer state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<AdamSnapshot>,
}

impl Checkpoint {
    pub fn arch(&self) -> Result<ArchitectureSpec> {
        ArchitectureSpec::parse(&self.descriptor)
    }

    /// Infer the model kind from head tensor names.
    pub fn kind(&self) -> Result<ModelKind> {
        let has_cls = self.tensors.iter().any(|(n, _, _)| n.starts_with("head."));
        let has_seg = self.tensors.iter().any(|(n, _, _)| n.starts_with("seg."));
        match (has_cls, has_seg) {
            (true, false) => Ok(ModelKind::Classifier),
            (false, true) => Ok(ModelKind::Segmenter),
            _ => Err(Error::Checkpoint(
                "cannot tell classifier from segmenter: no unambiguous head tensors".into(),
            )),
        }
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn push_dims(buf: &mut Vec<u8>, dims: &[usize]) {
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    push_str(&mut buf, &ckpt.descriptor);
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in &ckpt.tensors {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::Checkpoint(format!(
                "tensor {name} holds {} values but its shape {dims:?} needs {expect}",
                data.len()
            )));
        }
        push_str(&mut buf, name);
        push_dims(&mut buf, dims);
        push_f32s(&mut buf, data);
    }
    match &ckpt.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step_count.to_le_bytes());
            buf.extend_from_slice(&opt.learning_rate.to_le_bytes());
            buf.extend_from_slice(&opt.best_val.to_le_bytes());
            buf.extend_from_slice(&opt.stale_observations.to_le_bytes());
            buf.extend_from_slice(&(opt.moments.len() as u32).to_le_bytes());
            for (dims, m, v) in &opt.moments {
                push_dims(&mut buf, dims);
                push_f32s(&mut buf, m);
                push_f32s(&mut buf, v);
            }
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::at_byte(
                self.path,
                self.pos as u64,
                format!(
                    "file ends inside {what}: wanted {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::at_byte(self.path, at, format!("{what} is not valid UTF-8")))
    }

    fn dims(&mut self, what: &str) -> Result<Vec<usize>> {
        let at = self.pos as u64;
        let ndim = self.u8(what)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64(what)? as usize);
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match count {
            Some(c) if c * 4 <= self.buf.len() => Ok(dims),
            _ => Err(Error::at_byte(
                self.path,
                at,
                format!("{what} shape {dims:?} is larger than the file"),
            )),
        }
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        buf: &buf,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::at_byte(
            path,
            0,
            format!("bad magic {magic:?}, expected {MAGIC:?}"),
        ));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::at_byte(
            path,
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let descriptor = r.string("descriptor")?;
    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors.min(4096));
    for _ in 0..n_tensors {
        let name = r.string("tensor name")?;
        let dims = r.dims(&format!("tensor {name}"))?;
        let count: usize = dims.iter().product();
        let data = r.f32s(count, &format!("tensor {name} data"))?;
        tensors.push((name, dims, data));
    }
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step_count = r.u64("optimizer step count")?;
            let learning_rate = r.f64("learning rate")?;
            let best_val = r.f64("best validation loss")?;
            let stale_observations = r.u32("stale counter")?;
            let n_moments = r.u32("moment count")? as usize;
            let mut moments = Vec::with_capacity(n_moments.min(4096));
            for _ in 0..n_moments {
                let dims = r.dims("moment")?;
                let count: usize = dims.iter().product();
                let m = r.f32s(count, "first moment")?;
                let v = r.f32s(count, "second moment")?;
                moments.push((dims, m, v));
            }
            Some(AdamSnapshot {
                step_count,
                learning_rate,
                best_val,
                stale_observations,
                moments,
            })
        }
        other => {
            return Err(Error::at_byte(
                path,
                (r.pos - 1) as u64,
                format!("optimizer flag must be 0 or 1, got {other}"),
            ));
        }
    };
    if r.pos != buf.len() {
        return Err(Error::at_byte(
            path,
            r.pos as u64,
            format!("{} trailing bytes after checkpoint body", buf.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        descriptor,
        tensors,
        optimizer,
    })
}

type Stored<'a> = std::collections::BTreeMap<&'a str, (&'a [usize], &'a [f32])>;

fn tensors_from_params<S: Scalar>(
    params: Vec<(String, &mut crate::nn::Tensor<S>)>,
) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    params
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                t.data.shape().to_vec(),
                t.data.iter().map(|v| v.wide() as f32).collect(),
            )
        })
        .collect()
}

fn tensors_from_buffers<S: Scalar>(
    buffers: Vec<(String, &mut ndarray::Array1<S>)>,
) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    buffers
        .into_iter()
        .map(|(name, b)| {
            (
                name,
                vec![b.len()],
                b.iter().map(|v| v.wide() as f32).collect(),
            )
        })
        .collect()
}

fn stored_map(ckpt: &Checkpoint) -> Result<Stored<'_>> {
    let stored: Stored<'_> = ckpt
        .tensors
        .iter()
        .map(|(n, d, v)| (n.as_str(), (d.as_slice(), v.as_slice())))
        .collect();
    if stored.len() != ckpt.tensors.len() {
        return Err(Error::Checkpoint("duplicate tensor names".into()));
    }
    Ok(stored)
}

fn take_stored<'a>(stored: &mut Stored<'a>, name: &str, shape: &[usize]) -> Result<&'a [f32]> {
    let (dims, data) = stored
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if dims != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {dims:?}, model expects {shape:?}"
        )));
    }
    Ok(data)
}

fn fill_params<S: Scalar>(
    stored: &mut Stored<'_>,
    params: Vec<(String, &mut crate::nn::Tensor<S>)>,
) -> Result<()> {
    for (name, t) in params {
        let shape = t.data.shape().to_vec();
        let data = take_stored(stored, &name, &shape)?;
        for (dst, &src) in t.data.iter_mut().zip(data) {
            *dst = S::of(f64::from(src));
        }
    }
    Ok(())
}

fn fill_buffers<S: Scalar>(
    stored: &mut Stored<'_>,
    buffers: Vec<(String, &mut ndarray::Array1<S>)>,
) -> Result<()> {
    for (name, b) in buffers {
        let shape = [b.len()];
        let data = take_stored(stored, &name, &shape)?;
        for (dst, &src) in b.iter_mut().zip(data) {
            *dst = S::of(f64::from(src));
        }
    }
    Ok(())
}

fn ensure_consumed(stored: Stored<'_>) -> Result<()> {
    if let Some((name, _)) = stored.into_iter().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds tensor {name} the model has no slot for"
        )));
    }
    Ok(())
}

pub fn save_classifier<S: Scalar>(
    path: &Path,
    model: &mut PointNetClassifier<S>,
    optimizer: Option<&AdamSnapshot>,
) -> Result<()> {
    let descriptor = model.arch.descriptor();
    let mut tensors = tensors_from_params(model.named_params_mut());
    tensors.extend(tensors_from_buffers(model.named_buffers_mut()));
    write_checkpoint(
        path,
        &Checkpoint {
            descriptor,
            tensors,
            optimizer: optimizer.cloned(),
        },
    )
}

pub fn save_segmenter<S: Scalar>(
    path: &Path,
    model: &mut PointNetSegmenter<S>,
    optimizer: Option<&AdamSnapshot>,
) -> Result<()> {
    let descriptor = model.arch.descriptor();
    let mut tensors = tensors_from_params(model.named_params_mut());
    tensors.extend(tensors_from_buffers(model.named_buffers_mut()));
    write_checkpoint(
        path,
        &Checkpoint {
            descriptor,
            tensors,
            optimizer: optimizer.cloned(),
        },
    )
}

pub fn load_classifier<S: Scalar>(
    path: &Path,
) -> Result<(PointNetClassifier<S>, Option<AdamSnapshot>)> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.kind()? != ModelKind::Classifier {
        return Err(Error::Checkpoint(format!(
            "{} holds a segmentation model, not a classifier",
            path.display()
        )));
    }
    let arch = ckpt.arch()?;
    let mut model = PointNetClassifier::with_seed(&arch, 0)?;
    let mut stored = stored_map(&ckpt)?;
    fill_params(&mut stored, model.named_params_mut())?;
    fill_buffers(&mut stored, model.named_buffers_mut())?;
    ensure_consumed(stored)?;
    Ok((model, ckpt.optimizer))
}

pub fn load_segmenter<S: Scalar>(
    path: &Path,
) -> Result<(PointNetSegmenter<S>, Option<AdamSnapshot>)> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.kind()? != ModelKind::Segmenter {
        return Err(Error::Checkpoint(format!(
            "{} holds a classification model, not a segmenter",
            path.display()
        )));
    }
    let arch = ckpt.arch()?;
    let mut model = PointNetSegmenter::with_seed(&arch, 0)?;
    let mut stored = stored_map(&ckpt)?;
    fill_params(&mut stored, model.named_params_mut())?;
    fill_buffers(&mut stored, model.named_buffers_mut())?;
    ensure_consumed(stored)?;
    Ok((model, ckpt.optimizer))
}
