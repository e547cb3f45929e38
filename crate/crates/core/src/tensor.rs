//! Dense row-major tensors and the named-bundle file formats.
//!
//! Binary bundle: magic `HETB`, u32 version, u32 tensor count, then per
//! tensor a u32-length-prefixed UTF-8 name, u32 rank, u64 dims and the f64
//! payload, all little endian.
//!
//! Text bundle: blocks of `tensor <name> shape <d0> <d1> ...` followed by
//! whitespace-separated values; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn at_mut(&mut self, idx: &[usize]) -> &mut f64 {
        let o = self.offset(idx);
        &mut self.data[o]
    }

    pub fn expect_shape(&self, what: &str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("{what}: expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Named tensors in a deterministic order.
pub type TensorBundle = BTreeMap<String, Tensor>;

const MAGIC: &[u8; 4] = b"HETB";
const VERSION: u32 = 1;

pub fn encode_binary(bundle: &TensorBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
    for (name, t) in bundle {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse("truncated tensor bundle".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_binary(buf: &[u8]) -> Result<TensorBundle> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not a tensor bundle (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported tensor bundle version {version}")));
    }
    let count = r.u32()?;
    let mut bundle = TensorBundle::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= (buf.len() - r.pos) / 8)
            .ok_or_else(|| Error::Parse(format!("tensor '{name}' larger than the file")))?;
        let data = (0..len)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        bundle.insert(name, Tensor { shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Parse("trailing bytes after tensor bundle".into()));
    }
    Ok(bundle)
}

pub fn encode_text(bundle: &TensorBundle) -> String {
    let mut out = String::new();
    for (name, t) in bundle {
        out.push_str("tensor ");
        out.push_str(name);
        out.push_str(" shape");
        for d in &t.shape {
            out.push(' ');
            out.push_str(&d.to_string());
        }
        out.push('\n');
        let row = t.shape.last().copied().unwrap_or(1).max(1);
        for chunk in t.data.chunks(row) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn decode_text(text: &str) -> Result<TensorBundle> {
    let mut bundle = TensorBundle::new();
    let mut current: Option<(String, Vec<usize>, Vec<f64>, usize)> = None;
    let finish = |cur: Option<(String, Vec<usize>, Vec<f64>, usize)>, bundle: &mut TensorBundle| {
        if let Some((name, shape, data, line)) = cur {
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Parse(format!("line {line}: tensor '{name}': {e}")))?;
            if bundle.insert(name.clone(), t).is_some() {
                return Err(Error::Parse(format!("line {line}: duplicate tensor '{name}'")));
            }
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        if line.starts_with("tensor") {
            finish(current.take(), &mut bundle)?;
            words.next();
            let name = words
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing tensor name", i + 1)))?;
            if words.next() != Some("shape") {
                return Err(Error::Parse(format!("line {}: expected 'shape'", i + 1)));
            }
            let shape = words
                .map(|w| w.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: bad dimension: {e}", i + 1)))?;
            current = Some((name.to_string(), shape, Vec::new(), i + 1));
        } else {
            let cur = current
                .as_mut()
                .ok_or_else(|| Error::Parse(format!("line {}: values before a tensor header", i + 1)))?;
            for w in words {
                let v: f64 =
                    w.parse().map_err(|_| Error::Parse(format!("line {}: bad value '{w}'", i + 1)))?;
                cur.2.push(v);
            }
        }
    }
    finish(current, &mut bundle)?;
    Ok(bundle)
}

/// Reads either format, telling them apart by the binary magic.
pub fn load_bundle(path: &Path) -> Result<TensorBundle> {
    let bytes = std::fs::read(path)?;
    let parsed = if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Parse("tensor file is neither a binary bundle nor text".into()))?;
        decode_text(text)
    };
    parsed.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Writes the text format for `.txt` paths and the binary format otherwise.
pub fn save_bundle(path: &Path, bundle: &TensorBundle) -> Result<()> {
    if path.extension().is_some_and(|e| e == "txt") {
        std::fs::write(path, encode_text(bundle))?;
    } else {
        std::fs::write(path, encode_binary(bundle))?;
    }
    Ok(())
}

pub fn take_tensor(bundle: &TensorBundle, name: &str) -> Result<Tensor> {
    bundle
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Shape(format!("tensor bundle has no '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorBundle {
        let mut b = TensorBundle::new();
        b.insert("conv0".into(), Tensor::new(vec![2, 1, 2, 2], (0..8).map(|v| v as f64 - 3.5).collect()).unwrap());
        b.insert("fc0".into(), Tensor::new(vec![2, 4], vec![1., 0., 0., 1., 1., -1., 1., 0.]).unwrap());
        b.insert("scalar".into(), Tensor::new(vec![], vec![0.1]).unwrap());
        b
    }

    #[test]
    fn indexing() {
        let t = Tensor::new(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn both_formats_round_trip() {
        let b = sample();
        assert_eq!(decode_binary(&encode_binary(&b)).unwrap(), b);
        assert_eq!(decode_text(&encode_text(&b)).unwrap(), b);
    }

    #[test]
    fn text_errors_carry_line_numbers() {
        let err = decode_text("tensor a shape 2\n1 x\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(decode_text("1 2 3").is_err());
        assert!(decode_text("tensor a shape 3\n1 2\n").is_err());
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(decode_binary(b"HETB").is_err());
        assert!(decode_binary(b"nope").is_err());
        let mut bytes = encode_binary(&sample());
        bytes.push(0);
        assert!(decode_binary(&bytes).is_err());
        bytes.truncate(bytes.len() - 9);
        assert!(decode_binary(&bytes).is_err());
    }

    #[test]
    fn files_autodetect() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["w.txt", "w.bin"] {
            let p = dir.path().join(name);
            save_bundle(&p, &sample()).unwrap();
            assert_eq!(load_bundle(&p).unwrap(), sample());
        }
    }

    proptest! {
        #[test]
        fn binary_round_trip_any_values(values in prop::collection::vec(any::<f64>(), 0..40)) {
            let mut b = TensorBundle::new();
            b.insert("x".into(), Tensor::new(vec![values.len()], values.clone()).unwrap());
            let back = decode_binary(&encode_binary(&b)).unwrap();
            let got = back["x"].data();
            prop_assert_eq!(got.len(), values.len());
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
