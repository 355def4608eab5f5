//! Weight files.
//!
//! Layout (little-endian): magic `GSFW`, `u32` version (1), `u32` tensor
//! count, then per tensor: `u16` name length, UTF-8 name, `u8` rank, `u32`
//! per dimension, `u8` dtype (0 = 32-bit real), raw values.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{GsfError, Result};
use crate::layers::Parameterized;
use crate::tensor::{Tensor, MAX_RANK};

pub const WEIGHT_MAGIC: &[u8; 4] = b"GSFW";
pub const WEIGHT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| GsfError::Data("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(GsfError::Data(format!("duplicate tensor name `{name}`")));
        }
        let len = u16::try_from(name.len()).map_err(|_| GsfError::Data(format!("name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| GsfError::Data("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GsfError::Data("weight file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != WEIGHT_MAGIC {
        return Err(GsfError::Data("weight file does not start with GSFW".into()));
    }
    let version = c.u32()?;
    if version != WEIGHT_VERSION {
        return Err(GsfError::Data(format!("unsupported weight file version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| GsfError::Data("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(GsfError::Data(format!("duplicate tensor name `{name}`")));
        }
        let rank = c.u8()? as usize;
        if rank > MAX_RANK {
            return Err(GsfError::Data(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(GsfError::Data(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| GsfError::Data(format!("tensor `{name}` is too large")))?;
        let raw = c.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((
            name,
            Tensor::from_vec(&shape, data).map_err(|e| GsfError::Data(e.to_string()))?,
        ));
    }
    if c.pos != bytes.len() {
        return Err(GsfError::Data("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Writes parameters and normalization moments.
pub fn save(path: &Path, model: &impl Parameterized<f32>) -> Result<()> {
    fs::write(path, encode(&model.named_state(""))?)?;
    Ok(())
}

/// Overwrites every parameter and moment of `model` from `path`; the file
/// must hold exactly the model's tensor names with matching shapes.
pub fn load_into(path: &Path, model: &mut impl Parameterized<f32>) -> Result<()> {
    let mut stored: BTreeMap<String, Tensor<f32>> = decode(&fs::read(path)?)?.into_iter().collect();
    let mut problem = None;
    let mut take = |name: String, t: &mut Tensor<f32>| match stored.remove(&name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        Some(v) => {
            problem.get_or_insert(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                v.shape(),
                t.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("weight file lacks `{name}`"));
        }
    };
    model.visit_params_mut("", &mut take);
    model.visit_norms_mut("", &mut |name, bn| {
        take(format!("{name}.running_mean"), &mut bn.running_mean);
        take(format!("{name}.running_var"), &mut bn.running_var);
    });
    if let Some(p) = problem {
        return Err(GsfError::Data(p));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(GsfError::Data(format!("weight file has unknown tensor `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn encode_decode_is_bit_exact() {
        let mut rng = seeded(1);
        let tensors = vec![
            ("a.kernel".to_string(), Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng)),
            (
                "b".to_string(),
                Tensor::from_vec(&[2], vec![-0.0, f32::MIN_POSITIVE]).unwrap(),
            ),
        ];
        let bytes = encode(&tensors).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn malformed_files_are_data_errors() {
        let bytes = encode(&[("x".to_string(), Tensor::ones(&[3]))]).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(GsfError::Data(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(GsfError::Data(_))));
        let dup = vec![
            ("x".to_string(), Tensor::ones(&[1])),
            ("x".to_string(), Tensor::ones(&[1])),
        ];
        assert!(encode(&dup).is_err());
    }
}
