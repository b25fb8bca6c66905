//! Frame container (RVF) and color-signal CSV formats.
//!
//! RVF layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RVF1"
//! 4       4     width        u32
//! 8       4     height       u32
//! 12      4     frame_count  u32
//! 16      4     fps          f32
//! 20      ...   frame_count * width * height * 3 bytes, R,G,B interleaved, row-major
//! ```

use std::fmt::Write as _;

use thiserror::Error;

pub const RVF_MAGIC: [u8; 4] = *b"RVF1";
pub const RVF_HEADER_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("not an RVF file (bad magic)")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("zero geometry: {0}")]
    ZeroGeometry(&'static str),
    #[error("frame {index} has {found} pixels, expected {expected}")]
    FrameSize { index: usize, expected: usize, found: usize },
}

pub type Rgb = [u8; 3];

/// One video frame: row-major RGB pixels.
pub type Frame = Vec<Rgb>;

/// A validated sequence of equally-sized RGB frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    width: u32,
    height: u32,
    fps: f32,
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(width: u32, height: u32, fps: f32, frames: Vec<Frame>) -> Result<Self, FrameError> {
        if width == 0 {
            return Err(FrameError::ZeroGeometry("width"));
        }
        if height == 0 {
            return Err(FrameError::ZeroGeometry("height"));
        }
        if frames.is_empty() {
            return Err(FrameError::ZeroGeometry("frame_count"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(FrameError::ZeroGeometry("fps"));
        }
        let expected = width as usize * height as usize;
        for (index, f) in frames.iter().enumerate() {
            if f.len() != expected {
                return Err(FrameError::FrameSize {
                    index,
                    expected,
                    found: f.len(),
                });
            }
        }
        Ok(Self {
            width,
            height,
            fps,
            frames,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Strict RVF decoder. Trailing bytes after the declared payload are rejected.
pub fn read_rvf(bytes: &[u8]) -> Result<FrameSequence, FrameError> {
    if bytes.len() < 4 || bytes[..4] != RVF_MAGIC {
        return Err(FrameError::BadMagic);
    }
    if bytes.len() < RVF_HEADER_LEN {
        return Err(FrameError::TruncatedPayload {
            expected: RVF_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let width = read_u32(bytes, 4);
    let height = read_u32(bytes, 8);
    let count = read_u32(bytes, 12);
    let fps = f32::from_le_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]);
    if width == 0 {
        return Err(FrameError::ZeroGeometry("width"));
    }
    if height == 0 {
        return Err(FrameError::ZeroGeometry("height"));
    }
    if count == 0 {
        return Err(FrameError::ZeroGeometry("frame_count"));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(FrameError::ZeroGeometry("fps"));
    }
    let frame_bytes = (width as u64) * (height as u64) * 3;
    let payload = frame_bytes * count as u64;
    let available = (bytes.len() - RVF_HEADER_LEN) as u64;
    if payload > available {
        return Err(FrameError::TruncatedPayload {
            expected: usize::try_from(payload).unwrap_or(usize::MAX),
            found: available as usize,
        });
    }
    if available > payload {
        return Err(FrameError::TrailingBytes((available - payload) as usize));
    }
    let frame_bytes = frame_bytes as usize;
    let frames = bytes[RVF_HEADER_LEN..]
        .chunks_exact(frame_bytes)
        .map(|chunk| chunk.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
        .collect();
    FrameSequence::new(width, height, fps, frames)
}

pub fn write_rvf(seq: &FrameSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(RVF_HEADER_LEN + seq.len() * seq.pixels_per_frame() * 3);
    out.extend_from_slice(&RVF_MAGIC);
    out.extend_from_slice(&seq.width.to_le_bytes());
    out.extend_from_slice(&seq.height.to_le_bytes());
    out.extend_from_slice(&(seq.frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&seq.fps.to_le_bytes());
    for frame in &seq.frames {
        for px in frame {
            out.extend_from_slice(px);
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsvError {
    #[error("bad CSV header {0:?}, expected time_s,r,g,b[,spo2][,cycle]")]
    BadHeader(String),
    #[error("line {line}: {msg}")]
    BadRow { line: usize, msg: String },
    #[error("empty signal")]
    Empty,
    #[error("cannot infer sample rate: {0}")]
    BadTiming(String),
}

/// Rows of the color-signal CSV (`time_s,r,g,b[,spo2][,cycle]`).
///
/// The optional `cycle` column carries the breathing-cycle index of every
/// sample; boundaries are recovered where the index changes.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    pub time_s: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    pub spo2: Option<Vec<f64>>,
    pub cycle: Option<Vec<u32>>,
}

/// Shortest round-trip decimal representation, always with a `.`.
pub fn fmt_f64(x: f64) -> String {
    let s = format!("{x:?}");
    s
}

pub fn write_signal_csv(table: &SignalTable) -> String {
    let mut out = String::from("time_s,r,g,b");
    if table.spo2.is_some() {
        out.push_str(",spo2");
    }
    if table.cycle.is_some() {
        out.push_str(",cycle");
    }
    out.push('\n');
    for (i, (t, c)) in table.time_s.iter().zip(&table.rgb).enumerate() {
        let _ = write!(
            out,
            "{},{},{},{}",
            fmt_f64(*t),
            fmt_f64(c[0]),
            fmt_f64(c[1]),
            fmt_f64(c[2])
        );
        if let Some(s) = &table.spo2 {
            let _ = write!(out, ",{}", fmt_f64(s[i]));
        }
        if let Some(k) = &table.cycle {
            let _ = write!(out, ",{}", k[i]);
        }
        out.push('\n');
    }
    out
}

pub fn read_signal_csv(text: &str) -> Result<SignalTable, CsvError> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    let (has_spo2, has_cycle) = match header {
        "time_s,r,g,b" => (false, false),
        "time_s,r,g,b,spo2" => (true, false),
        "time_s,r,g,b,cycle" => (false, true),
        "time_s,r,g,b,spo2,cycle" => (true, true),
        other => return Err(CsvError::BadHeader(other.to_string())),
    };
    let ncols = 4 + has_spo2 as usize + has_cycle as usize;
    let mut table = SignalTable {
        time_s: Vec::new(),
        rgb: Vec::new(),
        spo2: has_spo2.then(Vec::new),
        cycle: has_cycle.then(Vec::new),
    };
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(CsvError::BadRow {
                line: line_no,
                msg: format!("expected {ncols} fields, found {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64, CsvError> {
            fields[k]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CsvError::BadRow {
                    line: line_no,
                    msg: format!("field {} is not a finite number: {:?}", k + 1, fields[k]),
                })
        };
        table.time_s.push(num(0)?);
        table.rgb.push([num(1)?, num(2)?, num(3)?]);
        if let Some(s) = table.spo2.as_mut() {
            s.push(num(4)?);
        }
        if let Some(c) = table.cycle.as_mut() {
            let k = 4 + has_spo2 as usize;
            let v = fields[k].trim().parse::<u32>().map_err(|_| CsvError::BadRow {
                line: line_no,
                msg: format!("cycle index {:?} is not an unsigned integer", fields[k]),
            })?;
            c.push(v);
        }
    }
    if table.time_s.is_empty() {
        return Err(CsvError::Empty);
    }
    Ok(table)
}

impl SignalTable {
    /// Sample rate from the mean spacing of the time column.
    pub fn infer_fps(&self) -> Result<f64, CsvError> {
        let n = self.time_s.len();
        if n < 2 {
            return Err(CsvError::BadTiming("need at least two samples".into()));
        }
        let span = self.time_s[n - 1] - self.time_s[0];
        if span <= 0.0 {
            return Err(CsvError::BadTiming("time column is not increasing".into()));
        }
        Ok((n - 1) as f64 / span)
    }

    /// Sample indices at which the cycle index changes, framed by 0 and len.
    pub fn cycle_boundaries(&self) -> Option<Vec<usize>> {
        let c = self.cycle.as_ref()?;
        let mut b = vec![0];
        for i in 1..c.len() {
            if c[i] != c[i - 1] {
                b.push(i);
            }
        }
        b.push(c.len());
        Some(b)
    }
}
