//! Binary segment store.
//!
//! ```text
//! "EEGS" | version u16 | H u16 | fs u32 | L u32 | count u32
//! count × ( flags u8 | start_s f64 | data f32[H][L] )
//! ```
//!
//! All integers and floats are little-endian. Bit 0 of `flags` is the label
//! (1 = preictal) and bit 1 marks synthetic segments. Sample values are
//! stored in single precision, so a write rounds them to the nearest `f32`.

use std::fs;
use std::path::Path;

use crate::dataset::{Label, Segment};
use crate::error::{format_err, invalid, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"EEGS";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStore {
    pub channels: usize,
    pub sample_rate: u32,
    pub length: usize,
    pub segments: Vec<Segment>,
}

impl SegmentStore {
    pub fn new(channels: usize, sample_rate: u32, length: usize, segments: Vec<Segment>) -> Result<Self> {
        if channels == 0 || channels > u16::MAX as usize || length == 0 || length > u32::MAX as usize {
            return Err(invalid!("store geometry {channels}×{length} out of range"));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.data.shape() != [channels, length] {
                return Err(invalid!("segment {i} has shape {:?}, store holds {channels}×{length}", s.data.shape()));
            }
        }
        Ok(Self { channels, sample_rate, length, segments })
    }

    /// Build a store from segments, taking the geometry from the first one.
    pub fn from_segments(sample_rate: u32, segments: Vec<Segment>) -> Result<Self> {
        let first = segments.first().ok_or_else(|| invalid!("cannot infer geometry of an empty store"))?;
        let (h, l) = (first.channels(), first.len());
        Self::new(h, sample_rate, l, segments)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = 1 + 8 + 4 * self.channels * self.length;
        let mut out = Vec::with_capacity(HEADER_LEN + per * self.segments.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u16).to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.length as u32).to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for s in &self.segments {
            let flags = u8::from(s.label.is_preictal()) | (u8::from(s.synthetic) << 1);
            out.push(flags);
            out.extend_from_slice(&s.start_s.to_le_bytes());
            for &v in s.data.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parse a store. `source` becomes the source id of every segment.
    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err!("segment store truncated: {} bytes, header needs {HEADER_LEN}", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err!("bad segment store magic {:?}", &bytes[..4]));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(format_err!("unsupported segment store version {version}"));
        }
        let (h, fs, l, count) = (u16_at(6) as usize, u32_at(8), u32_at(12) as usize, u32_at(16) as usize);
        if h == 0 || l == 0 || fs == 0 {
            return Err(format_err!("segment store header has zero geometry (H={h}, fs={fs}, L={l})"));
        }
        let per = 1 + 8 + 4 * h * l;
        let expected = per.checked_mul(count).and_then(|b| b.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(format_err!(
                "segment store body is {} bytes, header implies {}",
                bytes.len() - HEADER_LEN,
                per.saturating_mul(count)
            ));
        }
        let mut segments = Vec::with_capacity(count);
        for rec in bytes[HEADER_LEN..].chunks_exact(per) {
            let flags = rec[0];
            if flags > 3 {
                return Err(format_err!("invalid segment flags {flags:#04x}"));
            }
            let start_s = f64::from_le_bytes(rec[1..9].try_into().unwrap());
            let data = rec[9..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            segments.push(Segment {
                data: Tensor::new(vec![h, l], data)?,
                label: if flags & 1 == 1 { Label::Preictal } else { Label::Interictal },
                source: source.to_string(),
                start_s,
                synthetic: flags & 2 == 2,
                seizure: None,
            });
        }
        Ok(Self { channels: h, sample_rate: fs, length: l, segments })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_bytes(&bytes, &source)
    }
}
