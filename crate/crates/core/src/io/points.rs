//! Sampled signed-distance files: u64 little-endian record count, then
//! `count` records of four little-endian f32 values `x, y, z, sdf`.

use std::fs;
use std::path::Path;

use crate::error::{NffbError, Result};
use crate::tasks::PointSet;

pub fn decode_points(bytes: &[u8]) -> Result<PointSet> {
    let header: [u8; 8] = bytes
        .get(..8)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| NffbError::Format("point file shorter than its header".into()))?;
    let count = u64::from_le_bytes(header);
    let body = &bytes[8..];
    if (body.len() as u64) % 16 != 0 || body.len() as u64 / 16 != count {
        return Err(NffbError::Format(format!(
            "point file declares {count} records but holds {} bytes of records",
            body.len()
        )));
    }
    let mut points = Vec::with_capacity(body.len() / 16);
    let mut sdf = Vec::with_capacity(body.len() / 16);
    for rec in body.chunks_exact(16) {
        let v: Vec<f32> = rec
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        points.push([v[0], v[1], v[2]]);
        sdf.push(v[3]);
    }
    PointSet::new(points, sdf)
}

pub fn encode_points(set: &PointSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 16 * set.len());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for (p, d) in set.points.iter().zip(&set.sdf) {
        for v in p.iter().chain(std::iter::once(d)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_points(path: &Path) -> Result<PointSet> {
    decode_points(&fs::read(path)?)
}

pub fn save_points(set: &PointSet, path: &Path) -> Result<()> {
    fs::write(path, encode_points(set))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let set = PointSet::new(vec![[0.1, -0.2, 0.3], [1.0, -1.0, 0.0]], vec![-0.25, 0.5]).unwrap();
        let bytes = encode_points(&set);
        assert_eq!(bytes.len(), 8 + 32);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(decode_points(&bytes).unwrap(), set);
    }

    #[test]
    fn count_mismatch_rejected() {
        let set = PointSet::new(vec![[0.0; 3]], vec![0.0]).unwrap();
        let mut bytes = encode_points(&set);
        bytes[0] = 2;
        assert!(decode_points(&bytes).is_err());
        assert!(decode_points(&bytes[..5]).is_err());
        let bytes = encode_points(&set);
        assert!(decode_points(&bytes[..bytes.len() - 1]).is_err());
    }
}
