//! 8-bit RGB frames and the two on-disk video layouts: a directory of
//! numbered binary portable pixmaps (`P6`) or one `STF1` tensor `T×H×W×3`.

use std::cell::Cell;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{read_stf1, write_stf1, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, `height × width × 3`.
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "frame {width}x{height} with {} bytes",
                data.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Frame {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("frame dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w, 3] = t.dims() else {
            return Err(Error::shape(format!("frame tensor dims {:?}", t.dims())));
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::validation(format!("pixel value {v} is not a byte")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Frame::new(*w, *h, data)
    }

    pub fn write_ppm<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_ppm<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        parse_ppm(&bytes)
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<Frame> {
    let bad = |m: &str| Error::Parse {
        location: "ppm header".into(),
        message: m.into(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 pixmaps are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "truncated pixmap payload",
        )));
    }
    Frame::new(w, h, bytes[pos..pos + need].to_vec())
}

pub fn ppm_frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.ppm"))
}

pub fn write_ppm_sequence(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        let path = ppm_frame_path(dir, i);
        let file = File::create(&path).map_err(|e| Error::at_path(&path, e))?;
        let mut w = BufWriter::new(file);
        f.write_ppm(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn write_video_stf1(path: &Path, frames: &[Frame]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::validation("cannot write an empty video tensor"))?;
    if frames.iter().any(|f| !f.same_dims(first)) {
        return Err(Error::shape("frames differ in size"));
    }
    let data = frames
        .iter()
        .flat_map(|f| f.data.iter().map(|&v| v as f32))
        .collect();
    let t = Tensor::new(vec![frames.len(), first.height, first.width, 3], data)?;
    let file = File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = BufWriter::new(file);
    write_stf1(&mut w, &t)?;
    w.flush()?;
    Ok(())
}

/// Shared counter of frame reads, for auditing the single-pass contract.
#[derive(Debug, Clone, Default)]
pub struct ReadCounter(Rc<Cell<usize>>);

impl ReadCounter {
    pub fn get(&self) -> usize {
        self.0.get()
    }

    fn bump(&self) {
        self.0.set(self.0.get() + 1);
    }
}

/// Forward-only frame reader over one of the supported layouts.
pub struct FrameReader {
    kind: ReaderKind,
    next: usize,
    counter: ReadCounter,
}

enum ReaderKind {
    PpmDir(PathBuf),
    Video { frames: usize, height: usize, width: usize, reader: BufReader<File> },
    Memory(std::vec::IntoIter<Frame>),
}

impl FrameReader {
    /// Opens a pixmap directory or an `STF1` video tensor file.
    pub fn open(path: &Path) -> Result<Self> {
        let kind = if path.is_dir() {
            ReaderKind::PpmDir(path.to_path_buf())
        } else {
            let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
            let mut reader = BufReader::new(file);
            let (frames, height, width) = read_video_header(&mut reader)?;
            ReaderKind::Video {
                frames,
                height,
                width,
                reader,
            }
        };
        Ok(FrameReader {
            kind,
            next: 0,
            counter: ReadCounter::default(),
        })
    }

    pub fn from_frames(frames: Vec<Frame>) -> Self {
        FrameReader {
            kind: ReaderKind::Memory(frames.into_iter()),
            next: 0,
            counter: ReadCounter::default(),
        }
    }

    pub fn counter(&self) -> ReadCounter {
        self.counter.clone()
    }

    /// Skips frames without decoding them (resume support).
    pub fn skip_to(&mut self, index: usize) -> Result<()> {
        if index < self.next {
            return Err(Error::Usage("frame reader cannot rewind".into()));
        }
        let n = index - self.next;
        match &mut self.kind {
            ReaderKind::PpmDir(_) => {}
            ReaderKind::Video { height, width, reader, .. } => {
                let bytes = (n * *height * *width * 3 * 4) as i64;
                std::io::Seek::seek_relative(reader, bytes)?;
            }
            ReaderKind::Memory(it) => {
                for _ in 0..n {
                    it.next();
                }
            }
        }
        self.next = index;
        Ok(())
    }

    fn read_next(&mut self) -> Result<Option<Frame>> {
        let frame = match &mut self.kind {
            ReaderKind::PpmDir(dir) => {
                let path = ppm_frame_path(dir, self.next);
                if !path.exists() {
                    return Ok(None);
                }
                let file = File::open(&path).map_err(|e| Error::at_path(&path, e))?;
                Frame::read_ppm(&mut BufReader::new(file))?
            }
            ReaderKind::Video {
                frames,
                height,
                width,
                reader,
            } => {
                if self.next >= *frames {
                    return Ok(None);
                }
                let mut bytes = vec![0u8; *height * *width * 3 * 4];
                reader.read_exact(&mut bytes)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .map(|v| v.clamp(0.0, 255.0).round() as u8)
                    .collect();
                Frame::new(*width, *height, data)?
            }
            ReaderKind::Memory(it) => match it.next() {
                Some(f) => f,
                None => return Ok(None),
            },
        };
        self.counter.bump();
        self.next += 1;
        Ok(Some(frame))
    }
}

impl Iterator for FrameReader {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.next;
        self.read_next().map_err(|e| e.in_frame(index)).transpose()
    }
}

fn read_video_header<R: Read>(r: &mut R) -> Result<(usize, usize, usize)> {
    let mut head = [0u8; 24];
    r.read_exact(&mut head)?;
    let word = |i: usize| u32::from_le_bytes([head[4 * i], head[4 * i + 1], head[4 * i + 2], head[4 * i + 3]]) as usize;
    if &head[..4] != crate::tensor::STF1_MAGIC || word(1) != 4 || word(5) != 3 {
        return Err(Error::Format {
            frame: 0,
            message: "expected an STF1 video tensor T×H×W×3".into(),
        });
    }
    Ok((word(2), word(3), word(4)))
}

/// Loads a whole `STF1` video tensor into memory.
pub fn read_video_stf1(path: &Path) -> Result<Vec<Frame>> {
    let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
    let t = read_stf1(&mut BufReader::new(file))?
        .ok_or_else(|| Error::validation("empty video file"))?;
    let [n, h, w, 3] = t.dims() else {
        return Err(Error::shape(format!("video dims {:?}", t.dims())));
    };
    let per = h * w * 3;
    (0..*n)
        .map(|i| {
            let slice = t.data()[i * per..(i + 1) * per].to_vec();
            Frame::from_tensor(&Tensor::new(vec![*h, *w, 3], slice)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u8) -> Frame {
        let data = (0..4 * 3 * 3).map(|i| (i as u8).wrapping_mul(seed)).collect();
        Frame::new(4, 3, data).unwrap()
    }

    #[test]
    fn ppm_with_comment_parses() {
        let f = sample(7);
        let mut buf = b"P6\n# made by hand\n4 3\n255\n".to_vec();
        buf.extend_from_slice(&f.data);
        assert_eq!(Frame::read_ppm(&mut buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn ppm_dir_and_video_tensor_agree() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![sample(3), sample(5), sample(9)];
        write_ppm_sequence(&dir.path().join("ppm"), &frames).unwrap();
        let video = dir.path().join("v.stf1");
        write_video_stf1(&video, &frames).unwrap();
        let a: Vec<Frame> = FrameReader::open(&dir.path().join("ppm"))
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        let mut reader = FrameReader::open(&video).unwrap();
        let counter = reader.counter();
        let b: Vec<Frame> = reader.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(a, frames);
        assert_eq!(b, frames);
        assert_eq!(counter.get(), 3);
        assert_eq!(read_video_stf1(&video).unwrap(), frames);
    }

    #[test]
    fn skip_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![sample(3), sample(5), sample(9)];
        let video = dir.path().join("v.stf1");
        write_video_stf1(&video, &frames).unwrap();
        let mut reader = FrameReader::open(&video).unwrap();
        reader.skip_to(2).unwrap();
        assert_eq!(reader.next().unwrap().unwrap(), frames[2]);
        assert!(reader.next().is_none());
        assert_eq!(reader.counter().get(), 1);
    }
}
