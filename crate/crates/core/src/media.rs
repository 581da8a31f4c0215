//! Raw 8-bit planar 4:2:0 video.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::autodiff::Plane;
use crate::error::{invalid, Error, Result};

/// Largest accepted frame side, to keep allocations bounded on bad input.
pub const MAX_DIMENSION: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct YuvFormat {
    pub width: usize,
    pub height: usize,
}

impl YuvFormat {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width > MAX_DIMENSION || height > MAX_DIMENSION {
            return Err(invalid(format!("bad frame size {width}x{height}")));
        }
        Ok(Self { width, height })
    }

    pub fn luma_bytes(&self) -> usize {
        self.width * self.height
    }

    /// Both chroma planes together.
    pub fn chroma_bytes(&self) -> usize {
        2 * self.width.div_ceil(2) * self.height.div_ceil(2)
    }

    pub fn frame_bytes(&self) -> usize {
        self.luma_bytes() + self.chroma_bytes()
    }
}

/// One decoded frame: luma as reals, chroma kept as raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct YuvFrame {
    pub luma: Plane,
    pub chroma: Vec<u8>,
}

/// Splits one frame's bytes into luma and chroma.
pub fn decode_frame(bytes: &[u8], format: YuvFormat) -> Result<YuvFrame> {
    if bytes.len() != format.frame_bytes() {
        return Err(Error::Truncated {
            expected: format.frame_bytes() as u64,
            actual: bytes.len() as u64,
        });
    }
    let (y, c) = bytes.split_at(format.luma_bytes());
    let luma = Plane::new(
        format.height,
        format.width,
        y.iter().map(|&b| f64::from(b)).collect(),
    )?;
    Ok(YuvFrame {
        luma,
        chroma: c.to_vec(),
    })
}

/// Rounds to the nearest level and clamps to `[0, 255]`.
pub fn luma_to_bytes(luma: &Plane) -> Vec<u8> {
    luma.as_slice()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Neutral chroma for a luma-only frame.
pub fn grey_chroma(format: YuvFormat) -> Vec<u8> {
    vec![128; format.chroma_bytes()]
}

/// Sequential frame reader holding a single frame buffer.
pub struct YuvReader<R> {
    inner: R,
    format: YuvFormat,
    buf: Vec<u8>,
    frames_read: usize,
}

impl<R: Read> YuvReader<R> {
    pub fn new(inner: R, format: YuvFormat) -> Self {
        Self {
            inner,
            buf: vec![0; format.frame_bytes()],
            format,
            frames_read: 0,
        }
    }

    pub fn format(&self) -> YuvFormat {
        self.format
    }

    pub fn buffer_len(&self) -> usize {
        self.buf.len()
    }

    /// `Ok(None)` at a clean end of stream; a partial trailing frame is an error.
    pub fn next_frame(&mut self) -> Result<Option<YuvFrame>> {
        let mut filled = 0;
        while filled < self.buf.len() {
            match self.inner.read(&mut self.buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if filled == 0 {
            return Ok(None);
        }
        let fb = self.format.frame_bytes() as u64;
        if filled < self.buf.len() {
            let done = self.frames_read as u64 * fb;
            return Err(Error::Truncated {
                expected: done + fb,
                actual: done + filled as u64,
            });
        }
        self.frames_read += 1;
        decode_frame(&self.buf, self.format).map(Some)
    }
}

impl<R: Read> Iterator for YuvReader<R> {
    type Item = Result<YuvFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

/// A raw video file whose size has been checked against its format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawVideo {
    pub path: PathBuf,
    pub format: YuvFormat,
    pub frame_count: usize,
}

impl RawVideo {
    /// Opens `path`, deriving the frame count from the file size.
    pub fn open(path: impl AsRef<Path>, format: YuvFormat) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let size = std::fs::metadata(&path)?.len();
        let fb = format.frame_bytes() as u64;
        if size % fb != 0 {
            return Err(Error::Truncated {
                expected: (size / fb + 1) * fb,
                actual: size,
            });
        }
        if size == 0 {
            return Err(invalid(format!("{} is empty", path.display())));
        }
        Ok(Self {
            path,
            format,
            frame_count: (size / fb) as usize,
        })
    }

    /// Like [`RawVideo::open`] but also requires exactly `frames` frames.
    pub fn open_exact(path: impl AsRef<Path>, format: YuvFormat, frames: usize) -> Result<Self> {
        let path = path.as_ref();
        let size = std::fs::metadata(path)?.len();
        let expected = frames as u64 * format.frame_bytes() as u64;
        if size < expected {
            return Err(Error::Truncated {
                expected,
                actual: size,
            });
        }
        if size > expected {
            return Err(invalid(format!(
                "{} holds {size} bytes, more than {frames} frames of {}x{} ({expected} bytes)",
                path.display(),
                format.width,
                format.height
            )));
        }
        Self::open(path, format)
    }

    /// Streaming reader over every frame.
    pub fn reader(&self) -> Result<YuvReader<BufReader<File>>> {
        Ok(YuvReader::new(
            BufReader::new(File::open(&self.path)?),
            self.format,
        ))
    }

    /// Luma planes of `range`, seeking over everything else.
    pub fn read_luma(&self, range: Range<usize>) -> Result<Vec<Plane>> {
        if range.start > range.end || range.end > self.frame_count {
            return Err(invalid(format!(
                "frame range {range:?} is outside the {} frames of {}",
                self.frame_count,
                self.path.display()
            )));
        }
        let mut file = File::open(&self.path)?;
        let mut buf = vec![0u8; self.format.luma_bytes()];
        let mut out = Vec::with_capacity(range.len());
        for i in range {
            file.seek(SeekFrom::Start(i as u64 * self.format.frame_bytes() as u64))?;
            file.read_exact(&mut buf)?;
            out.push(Plane::new(
                self.format.height,
                self.format.width,
                buf.iter().map(|&b| f64::from(b)).collect(),
            )?);
        }
        Ok(out)
    }
}

pub struct YuvWriter<W: Write> {
    inner: W,
    format: YuvFormat,
}

impl YuvWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, format: YuvFormat) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?), format))
    }
}

impl<W: Write> YuvWriter<W> {
    pub fn new(inner: W, format: YuvFormat) -> Self {
        Self { inner, format }
    }

    /// Writes quantised luma followed by `chroma` untouched.
    pub fn write_frame(&mut self, luma: &Plane, chroma: &[u8]) -> Result<()> {
        if luma.shape() != (self.format.height, self.format.width)
            || chroma.len() != self.format.chroma_bytes()
        {
            return Err(invalid(format!(
                "frame does not match {}x{}: luma {:?}, chroma {} bytes",
                self.format.width,
                self.format.height,
                luma.shape(),
                chroma.len()
            )));
        }
        self.inner.write_all(&luma_to_bytes(luma))?;
        self.inner.write_all(chroma)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Writes luma-only frames with neutral chroma.
pub fn write_luma_file(path: impl AsRef<Path>, frames: &[Plane]) -> Result<YuvFormat> {
    let first = frames
        .first()
        .ok_or_else(|| invalid("no frames to write"))?;
    let format = YuvFormat::new(first.cols(), first.rows())?;
    let chroma = grey_chroma(format);
    let mut w = YuvWriter::create(path, format)?;
    for f in frames {
        w.write_frame(f, &chroma)?;
    }
    w.finish()?;
    Ok(format)
}
