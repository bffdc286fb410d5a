//! On-disk formats: the EVT1 binary event container, a line-oriented truth
//! file, and the dataset directory layout (train/ and val/ splits holding
//! seq_NNNN directories).
//!
//! EVT1 is little-endian throughout: a 20-byte header (magic "EVT1",
//! u32 width, u32 height, u64 count) followed by fixed 20-byte records of
//! (u64 t_us, u16 x, u16 y, i8 polarity, 7 zero pad bytes). The fixed
//! record size means any corruption shows up as a size mismatch or a
//! nonzero pad byte, always reported with its byte offset.

use super::{DataError, Event, EventStream, FrameTruth, SceneTruth, ShapeState, TruthBox};
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"EVT1";
const HEADER_LEN: u64 = 20;
const RECORD_LEN: u64 = 20;

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn write_events(s: &EventStream, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity((HEADER_LEN + RECORD_LEN * s.events.len() as u64) as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(s.width as u32).to_le_bytes());
    buf.extend_from_slice(&(s.height as u32).to_le_bytes());
    buf.extend_from_slice(&(s.events.len() as u64).to_le_bytes());
    for e in &s.events {
        buf.extend_from_slice(&e.t_us.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.polarity as u8);
        buf.extend_from_slice(&[0u8; 7]);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<EventStream, DataError> {
    let buf = fs::read(path)?;
    let err = |offset: u64, what: String| DataError::Format {
        path: path_str(path),
        offset,
        what,
    };
    if buf.len() < HEADER_LEN as usize {
        return Err(err(buf.len() as u64, "truncated header".into()));
    }
    if &buf[0..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}, expected \"EVT1\"", &buf[0..4])));
    }
    let width = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if width == 0 {
        return Err(err(4, "zero width".into()));
    }
    if height == 0 {
        return Err(err(8, "zero height".into()));
    }
    let count = u64::from_le_bytes(buf[12..20].try_into().unwrap());
    let expected = HEADER_LEN + RECORD_LEN * count;
    if buf.len() as u64 != expected {
        return Err(err(
            (buf.len() as u64).min(expected),
            format!("file is {} bytes, header promises {}", buf.len(), expected),
        ));
    }
    let mut s = EventStream::new(width, height);
    s.events.reserve(count as usize);
    let mut prev_t = 0u64;
    for i in 0..count {
        let base = (HEADER_LEN + i * RECORD_LEN) as usize;
        let r = &buf[base..base + RECORD_LEN as usize];
        let t_us = u64::from_le_bytes(r[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(r[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(r[10..12].try_into().unwrap());
        let polarity = r[12] as i8;
        if t_us < prev_t {
            return Err(err(base as u64, format!("timestamp {t_us} decreases below {prev_t}")));
        }
        if (x as usize) >= width {
            return Err(err(base as u64 + 8, format!("x={x} outside width {width}")));
        }
        if (y as usize) >= height {
            return Err(err(base as u64 + 10, format!("y={y} outside height {height}")));
        }
        if polarity != 1 && polarity != -1 {
            return Err(err(base as u64 + 12, format!("polarity byte {} not +1/-1", r[12])));
        }
        if r[13..20].iter().any(|&b| b != 0) {
            return Err(err(base as u64 + 13, "nonzero pad bytes".into()));
        }
        prev_t = t_us;
        s.events.push(Event { t_us, x, y, polarity });
    }
    Ok(s)
}

/// Writes per-frame truth as text. Floats use Rust's shortest round-trip
/// formatting, so read-back is bit-exact.
pub fn write_truth(t: &SceneTruth, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str("truthv1\n");
    out.push_str(&format!("width {}\n", t.width));
    out.push_str(&format!("height {}\n", t.height));
    out.push_str(&format!("frame_us {}\n", t.frame_us));
    out.push_str(&format!("frames {}\n", t.frames.len()));
    for (i, f) in t.frames.iter().enumerate() {
        out.push_str(&format!("frame {i}\n"));
        for s in &f.shapes {
            out.push_str(&format!(
                "shape {} {} {} {} {} {}\n",
                s.class, s.cx, s.cy, s.half, s.vx, s.vy
            ));
        }
        for b in &f.boxes {
            out.push_str(&format!(
                "box {} {} {} {} {}\n",
                b.class, b.xmin, b.ymin, b.xmax, b.ymax
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<SceneTruth, DataError> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, what: String| DataError::Text {
        path: path_str(path),
        line,
        what,
    };
    let mut lines = text.lines().enumerate();
    let mut expect = |tag: &str| -> Result<(usize, String), DataError> {
        match lines.next() {
            Some((n, l)) if l == tag || l.starts_with(&format!("{tag} ")) => {
                Ok((n + 1, l.strip_prefix(tag).unwrap_or("").trim().to_string()))
            }
            Some((n, l)) => Err(err(n + 1, format!("expected '{tag}', got '{l}'"))),
            None => Err(err(0, format!("missing '{tag}' line"))),
        }
    };
    expect("truthv1")?;
    let (n, w) = expect("width")?;
    let width: usize = w.parse().map_err(|_| err(n, format!("bad width '{w}'")))?;
    let (n, h) = expect("height")?;
    let height: usize = h.parse().map_err(|_| err(n, format!("bad height '{h}'")))?;
    let (n, fu) = expect("frame_us")?;
    let frame_us: u64 = fu.parse().map_err(|_| err(n, format!("bad frame_us '{fu}'")))?;
    let (n, fr) = expect("frames")?;
    let n_frames: usize = fr.parse().map_err(|_| err(n, format!("bad frame count '{fr}'")))?;

    let mut truth = SceneTruth { width, height, frame_us, frames: Vec::with_capacity(n_frames) };
    let mut current: Option<FrameTruth> = None;
    for (n0, line) in lines {
        let n = n0 + 1;
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let floats = |k: usize| -> Result<Vec<f64>, DataError> {
            if rest.len() != k + 1 {
                return Err(err(n, format!("'{tag}' needs {} fields, got {}", k + 1, rest.len())));
            }
            rest[1..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| err(n, format!("bad number '{s}'"))))
                .collect()
        };
        match tag {
            "frame" => {
                if let Some(f) = current.take() {
                    truth.frames.push(f);
                }
                current = Some(FrameTruth::default());
            }
            "shape" => {
                let v = floats(5)?;
                let class: usize =
                    rest[0].parse().map_err(|_| err(n, format!("bad class '{}'", rest[0])))?;
                let f = current
                    .as_mut()
                    .ok_or_else(|| err(n, "'shape' before any 'frame'".into()))?;
                f.shapes.push(ShapeState {
                    class,
                    cx: v[0],
                    cy: v[1],
                    half: v[2],
                    vx: v[3],
                    vy: v[4],
                });
            }
            "box" => {
                let v = floats(4)?;
                let class: usize =
                    rest[0].parse().map_err(|_| err(n, format!("bad class '{}'", rest[0])))?;
                let f = current
                    .as_mut()
                    .ok_or_else(|| err(n, "'box' before any 'frame'".into()))?;
                f.boxes.push(TruthBox {
                    class,
                    xmin: v[0],
                    ymin: v[1],
                    xmax: v[2],
                    ymax: v[3],
                });
            }
            "" => {}
            other => return Err(err(n, format!("unknown line tag '{other}'"))),
        }
    }
    if let Some(f) = current.take() {
        truth.frames.push(f);
    }
    if truth.frames.len() != n_frames {
        return Err(err(
            0,
            format!("header promises {} frames, found {}", n_frames, truth.frames.len()),
        ));
    }
    Ok(truth)
}

/// Writes one sequence directory: events.evt1 + truth.txt.
pub fn write_sequence(dir: &Path, s: &EventStream, t: &SceneTruth) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    write_events(s, &dir.join("events.evt1"))?;
    write_truth(t, &dir.join("truth.txt"))?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<(EventStream, SceneTruth), DataError> {
    let s = read_events(&dir.join("events.evt1"))?;
    let t = read_truth(&dir.join("truth.txt"))?;
    Ok((s, t))
}

/// Sorted list of seq_* directories under a split root (e.g. data/train).
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let p = entry.path();
        if p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seq_")) {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn sequence_dir_name(index: usize) -> String {
    format!("seq_{index:04}")
}
