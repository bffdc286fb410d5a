//! Event-camera data plumbing: raw event streams, a synthetic moving-shapes
//! generator with analytic ground truth, count-histogram binning, and a
//! fixed binary on-disk format.

pub mod generate;
pub mod io;

use crate::tensor::Tensor;
use thiserror::Error;

/// One sensor event. Polarity is +1 or -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: i8,
}

/// An ordered event recording with its sensor geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: usize,
    pub height: usize,
    pub events: Vec<Event>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: format error at byte {offset}: {what}")]
    Format { path: String, offset: u64, what: String },
    #[error("{path}:{line}: {what}")]
    Text { path: String, line: usize, what: String },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("could not place shapes inside the sensor: {0}")]
    Infeasible(String),
}

impl EventStream {
    pub fn new(width: usize, height: usize) -> Self {
        EventStream { width, height, events: Vec::new() }
    }

    /// Checks the stream invariants: nondecreasing timestamps, in-bounds
    /// coordinates, polarity +1/-1. Returns the index of the first bad
    /// event on failure.
    pub fn validate(&self) -> Result<(), (usize, String)> {
        let mut prev = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            if e.t_us < prev {
                return Err((i, format!("timestamp {} decreases below {}", e.t_us, prev)));
            }
            if (e.x as usize) >= self.width || (e.y as usize) >= self.height {
                return Err((
                    i,
                    format!("coordinate ({},{}) outside {}x{}", e.x, e.y, self.width, self.height),
                ));
            }
            if e.polarity != 1 && e.polarity != -1 {
                return Err((i, format!("polarity {} not +1/-1", e.polarity)));
            }
            prev = e.t_us;
        }
        Ok(())
    }
}

/// An axis-aligned ground-truth box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthBox {
    pub class: usize,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// A shape's analytic state at one frame time: center, half-extent, and
/// velocity in pixels per frame. Dense flow fields are reconstructed from
/// these rather than stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeState {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameTruth {
    pub boxes: Vec<TruthBox>,
    pub shapes: Vec<ShapeState>,
}

/// Per-frame ground truth for one sequence. `frame_us` is the duration of
/// one frame window; frame `f` covers event times `[f, f+1) * frame_us` and
/// its truth is sampled at the window's end.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub width: usize,
    pub height: usize,
    pub frame_us: u64,
    pub frames: Vec<FrameTruth>,
}

/// Signed distance to a shape's boundary, negative inside. Class 0 is a
/// square (max-norm), every other class a disc (euclidean norm).
pub fn shape_distance(class: usize, dx: f64, dy: f64, half: f64) -> f64 {
    if class == 0 {
        dx.abs().max(dy.abs()) - half
    } else {
        (dx * dx + dy * dy).sqrt() - half
    }
}

/// Fractional pixel coverage with a one-pixel soft edge.
pub fn shape_coverage(class: usize, dx: f64, dy: f64, half: f64) -> f64 {
    (0.5 - shape_distance(class, dx, dy, half)).clamp(0.0, 1.0)
}

impl SceneTruth {
    /// Dense ground-truth flow for one frame, channel 0 = x, channel 1 = y,
    /// in pixels per frame. A pixel strictly inside a shape carries that
    /// shape's velocity (the best-covered shape wins on overlap).
    pub fn flow_frame(&self, frame: usize) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut t = Tensor::zeros(&[2, h, w]);
        let shapes = &self.frames[frame].shapes;
        for iy in 0..h {
            for ix in 0..w {
                let mut best = 0.5;
                let mut v = (0.0, 0.0);
                for s in shapes {
                    let cov = shape_coverage(
                        s.class,
                        ix as f64 - s.cx,
                        iy as f64 - s.cy,
                        s.half,
                    );
                    if cov > best {
                        best = cov;
                        v = (s.vx, s.vy);
                    }
                }
                t.data_mut()[iy * w + ix] = v.0;
                t.data_mut()[h * w + iy * w + ix] = v.1;
            }
        }
        t
    }

    /// Mask of pixels whose ground-truth flow is defined (nonzero motion
    /// under some shape).
    pub fn flow_mask(&self, frame: usize) -> Tensor {
        let flow = self.flow_frame(frame);
        let (h, w) = (self.height, self.width);
        let mut m = Tensor::zeros(&[1, h, w]);
        for i in 0..h * w {
            let fx = flow.data()[i];
            let fy = flow.data()[h * w + i];
            if fx != 0.0 || fy != 0.0 {
                m.data_mut()[i] = 1.0;
            }
        }
        m
    }
}

/// Bins events into a per-polarity count histogram of shape
/// [bins, 2, H, W]. Channel 0 counts negative events, channel 1 positive.
/// Bins are uniform and half-open: an event at exactly `t1` is excluded.
pub fn bin_events(s: &EventStream, t0_us: u64, t1_us: u64, bins: usize) -> Result<Tensor, DataError> {
    if t1_us <= t0_us {
        return Err(DataError::Config(format!(
            "bin window [{t0_us}, {t1_us}) is empty"
        )));
    }
    if bins == 0 {
        return Err(DataError::Config("bins must be >= 1".into()));
    }
    let (h, w) = (s.height, s.width);
    let mut t = Tensor::zeros(&[bins, 2, h, w]);
    let span = (t1_us - t0_us) as u128;
    for e in &s.events {
        if e.t_us < t0_us || e.t_us >= t1_us {
            continue;
        }
        let b = ((e.t_us - t0_us) as u128 * bins as u128 / span) as usize;
        let ch = if e.polarity > 0 { 1 } else { 0 };
        let idx = ((b * 2 + ch) * h + e.y as usize) * w + e.x as usize;
        t.data_mut()[idx] += 1.0;
    }
    Ok(t)
}

/// Extracts bin `b` of a [bins, 2, H, W] histogram as a [1, 2, H, W] frame.
pub fn bin_frame(hist: &Tensor, b: usize) -> Tensor {
    let sh = hist.shape();
    assert_eq!(sh.len(), 4, "expected a binned histogram");
    let plane = sh[1] * sh[2] * sh[3];
    let data = hist.data()[b * plane..(b + 1) * plane].to_vec();
    Tensor::new(vec![1, sh[1], sh[2], sh[3]], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> Event {
        Event { t_us: t, x, y, polarity: p }
    }

    #[test]
    fn binning_is_half_open_and_routes_polarity() {
        let mut s = EventStream::new(4, 3);
        s.events = vec![ev(0, 1, 2, -1), ev(500, 3, 0, 1), ev(1000, 0, 0, 1)];
        let t = bin_events(&s, 0, 1000, 2).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3, 4]);
        // t=0 event: bin 0, negative channel, (y=2, x=1).
        assert_eq!(t.data()[2 * 4 + 1], 1.0);
        // t=500: bin 1 starts at 500, positive channel, (y=0, x=3).
        let bin1 = 2 * 3 * 4;
        assert_eq!(t.data()[bin1 + 3 * 4 + 3], 1.0);
        // t=1000 is excluded entirely.
        let total: f64 = t.data().iter().sum();
        assert_eq!(total, 2.0);
    }

    #[test]
    fn binning_conserves_event_count() {
        let mut rng = crate::rng::rng_from_seed(9);
        let mut s = EventStream::new(16, 16);
        let mut t = 0u64;
        for _ in 0..500 {
            t += crate::rng::uniform_usize(&mut rng, 40) as u64;
            s.events.push(ev(
                t,
                crate::rng::uniform_usize(&mut rng, 16) as u16,
                crate::rng::uniform_usize(&mut rng, 16) as u16,
                if crate::rng::uniform01(&mut rng) < 0.5 { -1 } else { 1 },
            ));
        }
        let t_end = t + 1;
        let hist = bin_events(&s, 0, t_end, 7).unwrap();
        let total: f64 = hist.data().iter().sum();
        assert_eq!(total, 500.0);
        s.validate().unwrap();
    }

    #[test]
    fn empty_stream_bins_to_zero() {
        let s = EventStream::new(8, 8);
        let t = bin_events(&s, 0, 100, 3).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validate_catches_bad_streams() {
        let mut s = EventStream::new(4, 4);
        s.events = vec![ev(10, 0, 0, 1), ev(5, 0, 0, 1)];
        assert!(s.validate().is_err());
        s.events = vec![ev(0, 4, 0, 1)];
        assert!(s.validate().is_err());
        s.events = vec![ev(0, 0, 0, 0)];
        assert!(s.validate().is_err());
    }
}
