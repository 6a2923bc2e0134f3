//! Byte layouts of the write-ahead log and segment files.
//!
//! All integers and floats are little-endian. CRCs are CRC-32/IEEE.
//!
//! `wal.log`:
//!
//! ```text
//! 0   4   magic "WWAL"
//! 4   4   format version (u32) = 1
//! 8   20k records: i64 micros | f64 value | u32 crc of the preceding 16 bytes
//! ```
//!
//! `NNNNNNNN.seg`:
//!
//! ```text
//! 0   4   magic "WSEG"
//! 4   2   format version (u16) = 1
//! 6   2   device id length n (u16), then n bytes of UTF-8
//! ..  2   metric length m (u16), then m bytes of UTF-8
//! ..  8   point count k (u64)
//! ..  16k points: i64 micros | f64 value, strictly increasing in time
//! ..  4   crc of every preceding byte of the file
//! ```

use crate::SeriesKey;

pub const WAL_MAGIC: &[u8; 4] = b"WWAL";
pub const SEG_MAGIC: &[u8; 4] = b"WSEG";
pub const VERSION: u16 = 1;
pub const WAL_HEADER_LEN: usize = 8;
pub const WAL_RECORD_LEN: usize = 20;

pub fn wal_header() -> [u8; WAL_HEADER_LEN] {
    let mut h = [0u8; WAL_HEADER_LEN];
    h[..4].copy_from_slice(WAL_MAGIC);
    h[4..].copy_from_slice(&u32::from(VERSION).to_le_bytes());
    h
}

pub fn encode_record(micros: i64, value: f64, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&micros.to_le_bytes());
    out.extend_from_slice(&value.to_le_bytes());
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

#[derive(Debug, PartialEq)]
pub enum WalTail {
    /// Every record verified.
    Clean,
    /// The last record is short or fails its CRC, as after a torn write.
    Torn { valid_len: usize },
}

/// Decodes a WAL image. A damaged record anywhere but the end is corruption.
pub fn decode_wal(bytes: &[u8]) -> Result<(Vec<(i64, f64)>, WalTail), String> {
    if bytes.len() < WAL_HEADER_LEN {
        // A crash while creating the file can leave a partial header.
        return Ok((Vec::new(), WalTail::Torn { valid_len: 0 }));
    }
    if bytes[..WAL_HEADER_LEN] != wal_header() {
        return Err("bad wal header".into());
    }
    let body = &bytes[WAL_HEADER_LEN..];
    let mut out = Vec::with_capacity(body.len() / WAL_RECORD_LEN);
    let mut chunks = body.chunks(WAL_RECORD_LEN).peekable();
    while let Some(rec) = chunks.next() {
        let last = chunks.peek().is_none();
        let ok = rec.len() == WAL_RECORD_LEN
            && crc32fast::hash(&rec[..16]) == u32::from_le_bytes(rec[16..20].try_into().expect("4 bytes"));
        if !ok {
            if last {
                let valid_len = WAL_HEADER_LEN + out.len() * WAL_RECORD_LEN;
                return Ok((out, WalTail::Torn { valid_len }));
            }
            return Err(format!("wal record {} fails its checksum", out.len()));
        }
        let micros = i64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let value = f64::from_le_bytes(rec[8..16].try_into().expect("8 bytes"));
        out.push((micros, value));
    }
    Ok((out, WalTail::Clean))
}

pub fn encode_segment(key: &SeriesKey, points: impl ExactSizeIterator<Item = (i64, f64)>) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + key.device_id.len() + key.metric.len() + points.len() * 16);
    out.extend_from_slice(SEG_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for s in [&key.device_id, &key.metric] {
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for (t, v) in points {
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("segment truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "segment key is not UTF-8".to_owned())
    }
}

pub fn decode_segment(bytes: &[u8]) -> Result<(SeriesKey, Vec<(i64, f64)>), String> {
    if bytes.len() < 4 + 4 {
        return Err("segment truncated".into());
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err("segment checksum mismatch".into());
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != SEG_MAGIC {
        return Err("bad segment magic".into());
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format!("unsupported segment version {version}"));
    }
    let key = SeriesKey {
        device_id: r.string()?,
        metric: r.string()?,
    };
    let count = r.u64()? as usize;
    if body.len() - r.pos != count.saturating_mul(16) {
        return Err("segment length does not match its point count".into());
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let p = r.take(16)?;
        let t = i64::from_le_bytes(p[..8].try_into().expect("8 bytes"));
        let v = f64::from_le_bytes(p[8..].try_into().expect("8 bytes"));
        if points.last().map_or(false, |&(prev, _)| prev >= t) {
            return Err("segment points out of order".into());
        }
        points.push((t, v));
    }
    Ok((key, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> SeriesKey {
        SeriesKey::new("soil-01", "soil_moisture").unwrap()
    }

    #[test]
    fn segment_round_trip() {
        let pts = vec![(-5, -0.0), (0, 1.5), (7, f64::MAX)];
        let bytes = encode_segment(&key(), pts.iter().copied());
        let (k, back) = decode_segment(&bytes).unwrap();
        assert_eq!(k, key());
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&pts) {
            assert_eq!((a.0, a.1.to_bits()), (b.0, b.1.to_bits()));
        }
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let bytes = encode_segment(&key(), [(1, 2.0), (3, 4.0)].into_iter());
        for i in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[i / 8] ^= 1 << (i % 8);
            assert!(decode_segment(&bad).is_err(), "flip of bit {i} went unnoticed");
        }
    }

    #[test]
    fn torn_wal_tail_is_reported() {
        let mut img = wal_header().to_vec();
        encode_record(1, 1.0, &mut img);
        encode_record(2, 2.0, &mut img);
        let full = img.len();
        img.extend_from_slice(&[1, 2, 3]);
        let (recs, tail) = decode_wal(&img).unwrap();
        assert_eq!(recs, vec![(1, 1.0), (2, 2.0)]);
        assert_eq!(tail, WalTail::Torn { valid_len: full });

        let mut mid = wal_header().to_vec();
        encode_record(1, 1.0, &mut mid);
        encode_record(2, 2.0, &mut mid);
        mid[WAL_HEADER_LEN + 3] ^= 0x10;
        assert!(decode_wal(&mid).is_err());
    }
}
