//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "FERDCKPT"
//! version      u32
//! arch_id      u32 length + UTF-8
//! num_classes  u32
//! input_shape  3 x u32
//! tensors      u32 count, then per tensor:
//!                name (u32 length + UTF-8), ndim u32, dims u32 x ndim,
//!                data f64 x prod(dims)
//! ```
//!
//! Tensors are the parameters in model order followed by each BN layer's
//! `running_mean` and `running_var`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ferd_autograd::Tensor;

use super::{build_model, Arch, Model};
use crate::error::{format_err, FerdError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FERDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> std::io::Result<()> {
    write_str(w, name)?;
    w.write_u32::<LittleEndian>(t.ndim() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|e| format_err(field, format!("truncated ({e})")))
}

pub(crate) fn read_str<R: Read>(r: &mut R, field: &str) -> Result<String> {
    let n = read_u32(r, field)? as usize;
    if n > 1 << 20 {
        return Err(format_err(field, format!("implausible string length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| format_err(field, format!("truncated ({e})")))?;
    String::from_utf8(buf).map_err(|_| format_err(field, "not valid UTF-8"))
}

pub(crate) fn read_tensor<R: Read>(r: &mut R, field: &str) -> Result<(String, Tensor)> {
    let name = read_str(r, &format!("{field}.name"))?;
    let ndim = read_u32(r, &format!("{field}.ndim"))? as usize;
    if ndim > 8 {
        return Err(format_err(format!("{field}.ndim"), format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(read_u32(r, &format!("{field}.dims[{i}]"))? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(format_err(format!("{field}.dims"), format!("implausible size {n}")));
    }
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(|e| format_err(format!("{field}.data ({name})"), format!("truncated ({e})")))?;
    Ok((name, Tensor::from_vec(&shape, data)?))
}

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    write_str(w, model.arch().id())?;
    w.write_u32::<LittleEndian>(model.num_classes() as u32)?;
    for d in model.input_shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    let bn = model.bn_statistics();
    w.write_u32::<LittleEndian>((model.params().len() + 2 * bn.len()) as u32)?;
    for p in model.params() {
        write_tensor(w, &p.name, &p.value)?;
    }
    for i in 0..bn.len() {
        let (mean, var) = model.bn_running(i);
        write_tensor(w, &format!("{}.running_mean", bn[i].layer_id), mean)?;
        write_tensor(w, &format!("{}.running_var", bn[i].layer_id), var)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err("magic", "file shorter than the magic string"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err("magic", format!("expected FERDCKPT, found {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FerdError::Mismatch {
            field: "version".into(),
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let arch_id = read_str(r, "arch_id")?;
    let arch = Arch::parse(&arch_id).map_err(|_| format_err("arch_id", format!("unknown architecture `{arch_id}`")))?;
    let num_classes = read_u32(r, "num_classes")? as usize;
    let mut shape = [0usize; 3];
    for (i, s) in shape.iter_mut().enumerate() {
        *s = read_u32(r, &format!("input_shape[{i}]"))? as usize;
    }
    let mut model = build_model(arch, num_classes, shape, 0)
        .map_err(|e| format_err("metadata", e.to_string()))?;
    let count = read_u32(r, "tensor_count")? as usize;
    let n_bn = model.num_bn_layers();
    if count != model.params().len() + 2 * n_bn {
        return Err(FerdError::Mismatch {
            field: "tensor_count".into(),
            expected: (model.params().len() + 2 * n_bn).to_string(),
            found: count.to_string(),
        });
    }
    let check = |field: String, expected: &str, name: &str, want: &[usize], t: &Tensor| -> Result<()> {
        if name != expected {
            return Err(FerdError::Mismatch { field, expected: expected.to_string(), found: name.to_string() });
        }
        if t.shape() != want {
            return Err(FerdError::Mismatch { field: format!("{field}.shape"), expected: format!("{want:?}"), found: format!("{:?}", t.shape()) });
        }
        Ok(())
    };
    for i in 0..model.params().len() {
        let field = format!("tensor[{i}]");
        let (name, t) = read_tensor(r, &field)?;
        let p = &mut model.params_mut()[i];
        check(field, &p.name.clone(), &name, &p.value.shape().to_vec(), &t)?;
        p.value = t;
    }
    let mut idx = model.params().len();
    for (layer, mean, var) in model.bn_buffers_mut() {
        for (suffix, slot) in [("running_mean", mean), ("running_var", var)] {
            let field = format!("tensor[{idx}]");
            let (name, t) = read_tensor(r, &field)?;
            check(field, &format!("{layer}.{suffix}"), &name, &slot.shape().to_vec(), &t)?;
            *slot = t;
            idx += 1;
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FerdError::MissingFile(path.to_path_buf()),
        _ => FerdError::Io(e),
    })?;
    read_checkpoint(&mut BufReader::new(f))
}

impl Model {
    /// Reject a model whose class count differs from what the caller needs.
    pub fn expect_classes(&self, num_classes: usize) -> Result<()> {
        if self.num_classes() != num_classes {
            return Err(FerdError::Mismatch {
                field: "num_classes".into(),
                expected: num_classes.to_string(),
                found: self.num_classes().to_string(),
            });
        }
        Ok(())
    }
}
