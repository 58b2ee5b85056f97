//! Binary flow files.
//!
//! Layout (little endian): magic `DFL1`, width `u32`, height `u32`, then
//! `width * height` interleaved `(u, v)` pairs of `f32` in row-major order,
//! then `width * height` mask bytes (0 or 1).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::flow::FlowField;

pub const FLOW_MAGIC: &[u8; 4] = b"DFL1";

pub fn write_flow<T: Scalar, W: Write>(flow: &FlowField<T>, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(12 + flow.len() * 9);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        buf.extend_from_slice(&(u.f64() as f32).to_le_bytes());
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    buf.extend(flow.mask().iter().map(|&m| m as u8));
    out.write_all(&buf)
}

pub fn read_flow<T: Scalar, R: Read>(mut input: R) -> Result<FlowField<T>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("flow read failed: {e}")))?;
    decode(&bytes)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<FlowField<T>> {
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::Format("bad flow magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Format("flow dimensions overflow".into()))?;
    if bytes.len() != 12 + n * 9 {
        return Err(Error::Format(format!(
            "flow payload is {} bytes, expected {} for {w}x{h}",
            bytes.len() - 12,
            n * 9
        )));
    }
    let f = |i: usize| T::of(f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as f64);
    let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        u.push(f(12 + 8 * k));
        v.push(f(16 + 8 * k));
    }
    let mask = bytes[12 + 8 * n..].iter().map(|&b| b != 0).collect();
    FlowField::from_parts(w, h, u, v, mask).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_flow<T: Scalar>(flow: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_flow(flow, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_flow<T: Scalar>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_flow_round_trips_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (33, 17);
        let u: Vec<f32> = (0..w * h).map(|_| rng.random_range(-50.0..50.0)).collect();
        let v: Vec<f32> = (0..w * h).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        let flow = FlowField::from_parts(w, h, u, v, mask).unwrap();
        let mut buf = Vec::new();
        write_flow(&flow, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + w * h * 9);
        let back: FlowField<f32> = read_flow(buf.as_slice()).unwrap();
        assert_eq!(back, flow);
        for (a, b) in back.u().iter().zip(flow.u()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let flow = FlowField::<f32>::zeros(2, 2).unwrap();
        let mut buf = Vec::new();
        write_flow(&flow, &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_flow::<f32, _>(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn zero_size_header_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(FLOW_MAGIC);
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&5u32.to_le_bytes());
        assert!(matches!(read_flow::<f32, _>(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.dfl");
        let flow = FlowField::<f32>::from_fn(5, 3, |x, y| (x as f32 * 0.25, -(y as f32))).unwrap();
        save_flow(&flow, &path).unwrap();
        assert_eq!(load_flow::<f32>(&path).unwrap(), flow);
        assert!(matches!(load_flow::<f32>(dir.path().join("missing.dfl")), Err(Error::Io { .. })));
    }
}
