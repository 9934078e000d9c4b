//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "UDAMCKPT"
//! version      u32
//! 3 × network spec:
//!     n_dims u32, dims n_dims × u32
//!     n_drop u32, dropout layer indices n_drop × u32
//!     activate_output u8
//!     dropout_p f64
//! dropout seed u64
//! step         u64
//! n_tensors    u32
//! n_tensors × { len u64, len × f64 }
//! ```
//!
//! Integers and floats are little-endian. Tensors follow
//! [`ModelBundle::params`] declaration order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::models::{BundleSpec, ModelBundle, NetworkSpec};

pub const MAGIC: &[u8; 8] = b"UDAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub step: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_spec(w: &mut impl Write, spec: &NetworkSpec) -> Result<()> {
    write_u32(w, spec.layer_dims.len() as u32)?;
    for &d in &spec.layer_dims {
        write_u32(w, d as u32)?;
    }
    write_u32(w, spec.dropout_after.len() as u32)?;
    for &i in &spec.dropout_after {
        write_u32(w, i as u32)?;
    }
    w.write_all(&[spec.activate_output as u8])?;
    w.write_all(&spec.dropout_p.to_le_bytes())?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn spec(&mut self) -> Result<NetworkSpec> {
        let n = self.u32("layer count")? as usize;
        if n > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let layer_dims = (0..n).map(|_| self.u32("layer dim").map(|d| d as usize)).collect::<Result<_>>()?;
        let k = self.u32("dropout count")? as usize;
        if k > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible dropout count {k}")));
        }
        let dropout_after = (0..k).map(|_| self.u32("dropout index").map(|d| d as usize)).collect::<Result<_>>()?;
        let activate_output = self.bytes::<1>("activation flag")?[0] != 0;
        let dropout_p = self.f64("dropout rate")?;
        Ok(NetworkSpec {
            layer_dims,
            dropout_after,
            activate_output,
            dropout_p,
        })
    }
}

pub fn write_checkpoint(w: &mut impl Write, bundle: &ModelBundle, step: u64) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    let spec = bundle.spec();
    for s in [&spec.feature_extractor, &spec.classifier, &spec.discriminator] {
        write_spec(w, s)?;
    }
    write_u64(w, bundle.dropout_seed)?;
    write_u64(w, step)?;
    let params = bundle.params();
    write_u32(w, params.len() as u32)?;
    for p in params {
        write_u64(w, p.len() as u64)?;
        for v in p.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader { inner: r };
    let magic: [u8; 8] = r.bytes("magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec = BundleSpec {
        feature_extractor: r.spec()?,
        classifier: r.spec()?,
        discriminator: r.spec()?,
    };
    spec.validate().map_err(|e| Error::Checkpoint(format!("invalid network spec: {e}")))?;
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let mut bundle = ModelBundle::zeroed(spec, seed)?;
    let count = r.u32("tensor count")? as usize;
    let mut params = bundle.params_mut();
    if count != params.len() {
        return Err(Error::Checkpoint(format!("{count} tensors for {} parameters", params.len())));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let len = r.u64("tensor length")? as usize;
        if len != p.len() {
            return Err(Error::Checkpoint(format!("tensor {i} has {len} values, expected {}", p.len())));
        }
        for v in p.values_mut() {
            *v = r.f64("tensor values")?;
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite value in tensor {i}")));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { bundle, step })
}

/// Describes every difference between two architectures, or `Ok` if equal.
pub fn check_compatible(expected: &BundleSpec, found: &BundleSpec) -> Result<()> {
    let mut diffs = Vec::new();
    for (name, e, f) in [
        ("feature_extractor", &expected.feature_extractor, &found.feature_extractor),
        ("classifier", &expected.classifier, &found.classifier),
        ("discriminator", &expected.discriminator, &found.discriminator),
    ] {
        if e.layer_dims != f.layer_dims {
            diffs.push(format!("{name}.layer_dims: expected {:?}, checkpoint has {:?}", e.layer_dims, f.layer_dims));
        }
        if e.dropout_after != f.dropout_after {
            diffs.push(format!(
                "{name}.dropout_after: expected {:?}, checkpoint has {:?}",
                e.dropout_after, f.dropout_after
            ));
        }
        if e.activate_output != f.activate_output {
            diffs.push(format!("{name}.activate_output differs"));
        }
        if e.dropout_p != f.dropout_p {
            diffs.push(format!("{name}.dropout_p: expected {}, checkpoint has {}", e.dropout_p, f.dropout_p));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::SpecMismatch(diffs.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ModelBundle {
        let spec = BundleSpec::mlp(4, &[8, 5], 3, 1, &[6], 0.5, false).unwrap();
        ModelBundle::new(spec, 11, 12).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let b = bundle();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &b, 42).unwrap();
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.bundle.dropout_seed, 12);
        for (a, b) in ck.bundle.params().iter().zip(b.params()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn header_layout() {
        let b = bundle();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &b, 0).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), VERSION);
        // extractor dims: count 3 then [4, 8, 5]
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 4);
        let payload: usize = b.params().iter().map(|p| 8 + 8 * p.len()).sum();
        assert!(buf.len() > payload);
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let b = bundle();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &b, 0).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut extra = buf;
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }

    #[test]
    fn mismatch_names_the_dimension() {
        let a = BundleSpec::mlp(4, &[8, 5], 3, 1, &[6], 0.5, false).unwrap();
        let b = BundleSpec::mlp(4, &[8, 7], 3, 1, &[6], 0.5, false).unwrap();
        let err = check_compatible(&a, &b).unwrap_err().to_string();
        assert!(err.contains("feature_extractor.layer_dims"), "{err}");
        assert!(check_compatible(&a, &a).is_ok());
    }
}
