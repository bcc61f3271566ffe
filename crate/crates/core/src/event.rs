//! Event streams, voxel-grid rasterization, a frame-driven event simulator,
//! and the EVST binary / CSV codecs.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Default number of temporal bins in a voxel grid.
pub const DEFAULT_BINS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

/// Time-sorted events from a `width × height` sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        ensure!(
            width > 0 && height > 0,
            InvalidArgument,
            "sensor size must be positive"
        );
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::EventOutOfBounds {
                    index: i,
                    x: e.x as u32,
                    y: e.y as u32,
                    width: width as u32,
                    height: height as u32,
                });
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::UnsortedEvents(i));
            }
        }
        Ok(Self {
            events,
            width,
            height,
        })
    }

    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t0 <= t <= t1`.
    pub fn window(&self, t0: u64, t1: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t <= t1);
        &self.events[lo..hi.max(lo)]
    }
}

/// `B×H×W` temporal-bilinear accumulation of event polarities over `[t0, t1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    data: Tensor,
    t0: u64,
    t1: u64,
}

/// How voxel values are scaled before entering the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelNorm {
    /// Raw polarity sums.
    #[default]
    None,
    /// Divide by the largest absolute voxel value (no-op on an empty grid).
    MaxAbs,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros([bins, height, width]),
            t0: 0,
            t1: 1,
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn time_range(&self) -> (u64, u64) {
        (self.t0, self.t1)
    }

    pub fn get(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(bin * self.height() + y) * self.width() + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    pub fn normalized(&self, norm: VoxelNorm) -> Tensor {
        match norm {
            VoxelNorm::None => self.data.clone(),
            VoxelNorm::MaxAbs => {
                let m = self.data.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if m > 0.0 {
                    self.data.map(|v| v / m)
                } else {
                    self.data.clone()
                }
            }
        }
    }

    /// Replaces the grid contents, keeping the time range; used by spatial augmentation.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        ensure!(
            data.shape().len() == 3 && data.shape()[0] == self.bins(),
            ShapeMismatch,
            "voxel data {:?} vs {} bins",
            data.shape(),
            self.bins()
        );
        Ok(Self {
            data,
            t0: self.t0,
            t1: self.t1,
        })
    }
}

/// Splits every event's polarity between the two temporally nearest bins.
///
/// Bin centers sit at `t0 + k·(t1−t0)/(bins−1)`, so events at `t0` and `t1`
/// land wholly in the first and last bin.
pub fn build_voxel_grid(stream: &EventStream, t0: u64, t1: u64, bins: usize) -> Result<VoxelGrid> {
    ensure!(t1 > t0, InvalidArgument, "empty time range [{t0}, {t1}]");
    ensure!(
        bins >= 2,
        InvalidArgument,
        "need at least 2 bins, got {bins}"
    );
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut data = vec![0.0; bins * h * w];
    let scale = (bins - 1) as f64 / (t1 - t0) as f64;
    for e in stream.window(t0, t1) {
        let tn = (e.t - t0) as f64 * scale;
        let k0 = (tn.floor() as usize).min(bins - 1);
        let frac = tn - k0 as f64;
        let pix = e.y as usize * w + e.x as usize;
        let p = e.p.sign();
        data[k0 * h * w + pix] += p * (1.0 - frac);
        if frac > 0.0 {
            data[(k0 + 1) * h * w + pix] += p * frac;
        }
    }
    Ok(VoxelGrid {
        data: Tensor::from_parts(vec![bins, h, w], data),
        t0,
        t1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    /// Log-intensity contrast threshold.
    pub threshold: f64,
    /// Background noise events per pixel per second.
    pub noise_rate: f64,
    /// Offset inside the log so black pixels stay finite.
    pub log_eps: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            noise_rate: 0.0,
            log_eps: 1e-3,
            seed: 0,
        }
    }
}

/// Reference-crossing event model driven by a frame sequence.
///
/// Each pixel keeps a reference log intensity; whenever the new frame differs
/// from it by at least `threshold`, one event per whole threshold step is
/// emitted with timestamps interpolated linearly between the two frames, and
/// the reference advances by the emitted steps.
pub fn simulate_events(
    frames: &[Image],
    timestamps: &[u64],
    cfg: &SimulatorConfig,
) -> Result<EventStream> {
    ensure!(
        frames.len() == timestamps.len(),
        InvalidArgument,
        "{} frames but {} timestamps",
        frames.len(),
        timestamps.len()
    );
    ensure!(frames.len() >= 2, InvalidArgument, "need at least 2 frames");
    ensure!(
        cfg.threshold > 0.0,
        InvalidArgument,
        "threshold must be positive"
    );
    ensure!(
        cfg.noise_rate >= 0.0,
        InvalidArgument,
        "noise rate must be non-negative"
    );
    ensure!(
        cfg.log_eps > 0.0,
        InvalidArgument,
        "log offset must be positive"
    );
    ensure!(
        timestamps.windows(2).all(|w| w[0] < w[1]),
        InvalidArgument,
        "timestamps must be strictly increasing"
    );
    let (h, w) = (frames[0].height(), frames[0].width());
    ensure!(
        frames.iter().all(|f| f.height() == h && f.width() == w),
        ShapeMismatch,
        "frames differ in size"
    );
    ensure!(
        h <= u16::MAX as usize && w <= u16::MAX as usize,
        InvalidArgument,
        "frame too large for event coordinates"
    );

    let log_frame = |f: &Image| -> Vec<f64> {
        f.grayscale()
            .iter()
            .map(|&v| (v + cfg.log_eps).ln())
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reference = log_frame(&frames[0]);
    let mut prev = reference.clone();
    let mut events = Vec::new();
    // Guards the exact-multiple case against rounding in the log difference.
    const SLACK: f64 = 1e-9;

    for k in 1..frames.len() {
        let (ta, tb) = (timestamps[k - 1], timestamps[k]);
        let span = (tb - ta) as f64;
        let cur = log_frame(&frames[k]);
        let mut batch = Vec::new();
        for pix in 0..h * w {
            let delta = cur[pix] - reference[pix];
            let n = (delta.abs() / cfg.threshold + SLACK).floor() as u64;
            if n == 0 {
                continue;
            }
            let sign = delta.signum();
            let p = if sign > 0.0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let (x, y) = ((pix % w) as u16, (pix / w) as u16);
            let change = cur[pix] - prev[pix];
            for j in 1..=n {
                let level = reference[pix] + sign * j as f64 * cfg.threshold;
                let frac = if change != 0.0 {
                    ((level - prev[pix]) / change).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                let t = ta + (frac * span).round() as u64;
                batch.push(Event {
                    t: t.min(tb),
                    x,
                    y,
                    p,
                });
            }
            reference[pix] += sign * n as f64 * cfg.threshold;
        }
        if cfg.noise_rate > 0.0 {
            let lambda = cfg.noise_rate * span * 1e-6;
            let poisson =
                Poisson::new(lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for pix in 0..h * w {
                let count = poisson.sample(&mut rng) as u64;
                for _ in 0..count {
                    let t = rng.random_range(ta..=tb);
                    let p = if rng.random_bool(0.5) {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    };
                    batch.push(Event {
                        t,
                        x: (pix % w) as u16,
                        y: (pix / w) as u16,
                        p,
                    });
                }
            }
        }
        batch.sort_by_key(|e| e.t);
        events.extend(batch);
        prev = cur;
    }
    EventStream::new(w as u16, h as u16, events)
}

pub const EVST_MAGIC: &[u8; 4] = b"EVST";
pub const EVST_VERSION: u16 = 1;
/// magic(4) + version(2) + width(2) + height(2) + count(8)
pub const EVST_HEADER_LEN: usize = 18;
/// t(8) + x(2) + y(2) + p(1)
pub const EVST_RECORD_LEN: usize = 13;

pub fn encode_evst(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVST_HEADER_LEN + EVST_RECORD_LEN * stream.len());
    out.extend_from_slice(EVST_MAGIC);
    out.extend_from_slice(&EVST_VERSION.to_le_bytes());
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.as_i8() as u8);
    }
    out
}

pub fn decode_evst(bytes: &[u8]) -> Result<EventStream> {
    let fail = |reason: String| Error::format("EVST", reason);
    if bytes.len() < EVST_HEADER_LEN {
        return Err(fail(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != EVST_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != EVST_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let (width, height) = (u16_at(6), u16_at(8));
    let count = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(EVST_RECORD_LEN))
        .and_then(|n| n.checked_add(EVST_HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(fail(format!(
            "header declares {count} events but payload is {} bytes",
            bytes.len() - EVST_HEADER_LEN
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for rec in bytes[EVST_HEADER_LEN..].chunks_exact(EVST_RECORD_LEN) {
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = Polarity::from_i8(rec[12] as i8)
            .ok_or_else(|| fail(format!("polarity byte {} is not ±1", rec[12] as i8)))?;
        events.push(Event { t, x, y, p });
    }
    EventStream::new(width, height, events)
}

pub fn save_evst(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_evst(stream)).map_err(|e| Error::io(path, e))
}

pub fn load_evst(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_evst(&bytes)
}

/// Reads `t,x,y,p` rows (an optional header row and `#` comments are
/// skipped). Polarity accepts `1`/`+1` and `-1`/`0`.
pub fn read_events_csv<R: Read>(reader: R, width: u16, height: u16) -> Result<EventStream> {
    let fail = |reason: String| Error::format("event CSV", reason);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut events = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        if rec.len() != 4 {
            return Err(fail(format!(
                "row {i}: expected 4 fields, got {}",
                rec.len()
            )));
        }
        if i == 0 && rec[0].parse::<u64>().is_err() && rec[0].eq_ignore_ascii_case("t") {
            continue;
        }
        let field = |k: usize| &rec[k];
        let t = field(0)
            .parse::<u64>()
            .map_err(|e| fail(format!("row {i} t: {e}")))?;
        let x = field(1)
            .parse::<u16>()
            .map_err(|e| fail(format!("row {i} x: {e}")))?;
        let y = field(2)
            .parse::<u16>()
            .map_err(|e| fail(format!("row {i} y: {e}")))?;
        let p = match field(3) {
            "1" | "+1" => Polarity::Positive,
            "-1" | "0" => Polarity::Negative,
            other => return Err(fail(format!("row {i}: bad polarity `{other}`"))),
        };
        events.push(Event { t, x, y, p });
    }
    EventStream::new(width, height, events)
}

pub fn write_events_csv<W: Write>(stream: &EventStream, mut w: W) -> std::io::Result<()> {
    writeln!(w, "t,x,y,p")?;
    for e in &stream.events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.as_i8())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> Event {
        Event {
            t,
            x,
            y,
            p: Polarity::from_i8(p).unwrap(),
        }
    }

    fn random_stream(seed: u64, n: usize, w: u16, h: u16, t_max: u64) -> EventStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut evs: Vec<Event> = (0..n)
            .map(|_| {
                ev(
                    rng.random_range(0..=t_max),
                    rng.random_range(0..w),
                    rng.random_range(0..h),
                    if rng.random_bool(0.5) { 1 } else { -1 },
                )
            })
            .collect();
        evs.sort_by_key(|e| e.t);
        EventStream::new(w, h, evs).unwrap()
    }

    #[test]
    fn event_on_bin_center_fills_one_voxel() {
        // bins=5 over [0, 400]: centers every 100 µs.
        let s = EventStream::new(4, 3, vec![ev(200, 1, 2, 1)]).unwrap();
        let g = build_voxel_grid(&s, 0, 400, 5).unwrap();
        assert_eq!(g.get(2, 2, 1), 1.0);
        assert_eq!(g.sum(), 1.0);
        assert_eq!(g.data().data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn event_between_centers_splits_evenly() {
        let s = EventStream::new(4, 3, vec![ev(250, 3, 0, 1)]).unwrap();
        let g = build_voxel_grid(&s, 0, 400, 5).unwrap();
        assert_eq!(g.get(2, 0, 3), 0.5);
        assert_eq!(g.get(3, 0, 3), 0.5);
    }

    #[test]
    fn endpoint_events_land_in_edge_bins() {
        let s = EventStream::new(2, 2, vec![ev(10, 0, 0, -1), ev(90, 1, 1, 1)]).unwrap();
        let g = build_voxel_grid(&s, 10, 90, 32).unwrap();
        assert_eq!(g.get(0, 0, 0), -1.0);
        assert_eq!(g.get(31, 1, 1), 1.0);
    }

    #[test]
    fn out_of_range_events_are_excluded() {
        let s = EventStream::new(
            2,
            2,
            vec![ev(5, 0, 0, 1), ev(50, 0, 0, 1), ev(200, 0, 0, 1)],
        )
        .unwrap();
        let g = build_voxel_grid(&s, 10, 100, 4).unwrap();
        assert!((g.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conservation_against_per_event_oracle() {
        let s = random_stream(11, 1000, 16, 12, 1_000_000);
        let g = build_voxel_grid(&s, 0, 1_000_000, DEFAULT_BINS).unwrap();
        // Oracle: accumulate each event's weights independently into a dense array.
        let mut oracle = vec![0.0; 32 * 12 * 16];
        for e in s.events() {
            let tn = 31.0 * e.t as f64 / 1e6;
            for k in 0..32 {
                let wgt = (1.0 - (tn - k as f64).abs()).max(0.0);
                oracle[(k * 12 + e.y as usize) * 16 + e.x as usize] += e.p.sign() * wgt;
            }
        }
        let pol: f64 = s.events().iter().map(|e| e.p.sign()).sum();
        assert!((g.sum() - pol).abs() <= 1e-5 * pol.abs().max(1.0));
        for (a, b) in g.data().data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = EventStream::empty(2, 2);
        assert!(build_voxel_grid(&s, 5, 5, 4).is_err());
        assert!(build_voxel_grid(&s, 0, 5, 1).is_err());
        assert!(matches!(
            EventStream::new(2, 2, vec![ev(0, 2, 0, 1)]),
            Err(Error::EventOutOfBounds { .. })
        ));
        assert!(matches!(
            EventStream::new(2, 2, vec![ev(5, 0, 0, 1), ev(4, 0, 0, 1)]),
            Err(Error::UnsortedEvents(1))
        ));
    }

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_fn(h, w, |_, y, x| f(y, x))
    }

    #[test]
    fn constant_video_emits_nothing() {
        let frames = vec![Image::filled(4, 4, 0.3); 5];
        let ts: Vec<u64> = (0..5).map(|i| i * 1000).collect();
        let s = simulate_events(&frames, &ts, &SimulatorConfig::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn two_threshold_step_emits_two_events() {
        let cfg = SimulatorConfig::default();
        let a = 0.1;
        // log(b + eps) - log(a + eps) == 2 * threshold
        let b = (a + cfg.log_eps) * (2.0 * cfg.threshold).exp() - cfg.log_eps;
        let f0 = gray(3, 3, |_, _| a);
        let f1 = gray(3, 3, |y, x| if (y, x) == (1, 2) { b } else { a });
        let s = simulate_events(&[f0, f1], &[0, 1000], &cfg).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s
            .events()
            .iter()
            .all(|e| e.p == Polarity::Positive && (e.x, e.y) == (2, 1)));
        // Crossings at 1θ and 2θ of a 2θ ramp: halfway and at the end.
        assert_eq!(s.events()[0].t, 500);
        assert_eq!(s.events()[1].t, 1000);
    }

    #[test]
    fn darkening_gives_negative_events() {
        let frames: Vec<Image> = (0..4)
            .map(|i| Image::filled(3, 3, 0.9 / (1.0 + i as f64)))
            .collect();
        let s = simulate_events(&frames, &[0, 10, 20, 30], &SimulatorConfig::default()).unwrap();
        assert!(!s.is_empty());
        assert!(s.events().iter().all(|e| e.p == Polarity::Negative));
    }

    #[test]
    fn simulator_validates_inputs() {
        let f = Image::filled(2, 2, 0.5);
        let cfg = SimulatorConfig::default();
        assert!(simulate_events(&[f.clone(), f.clone()], &[0], &cfg).is_err());
        assert!(simulate_events(std::slice::from_ref(&f), &[0], &cfg).is_err());
        let bad = SimulatorConfig {
            threshold: 0.0,
            ..cfg
        };
        assert!(simulate_events(&[f.clone(), f], &[0, 1], &bad).is_err());
    }

    #[test]
    fn noise_is_seeded_and_in_range() {
        let frames = vec![Image::filled(6, 6, 0.3); 3];
        let cfg = SimulatorConfig {
            noise_rate: 50.0,
            seed: 7,
            ..Default::default()
        };
        let ts = [1_000, 101_000, 201_000];
        let a = simulate_events(&frames, &ts, &cfg).unwrap();
        let b = simulate_events(&frames, &ts, &cfg).unwrap();
        assert_eq!(a, b);
        // 36 px * 50 Hz * 0.2 s = 360 expected
        assert!(a.len() > 250 && a.len() < 470, "{}", a.len());
        assert!(a.events().iter().all(|e| (1_000..=201_000).contains(&e.t)));
    }

    #[test]
    fn evst_rejects_garbage() {
        assert!(decode_evst(b"EVS").is_err());
        let mut bytes = encode_evst(&random_stream(1, 3, 4, 4, 100));
        bytes[0] = b'X';
        assert!(decode_evst(&bytes).is_err());
        let mut bytes = encode_evst(&random_stream(1, 3, 4, 4, 100));
        bytes.pop();
        assert!(decode_evst(&bytes).is_err());
        let mut bytes = encode_evst(&random_stream(1, 3, 4, 4, 100));
        let last = bytes.len() - 1;
        bytes[last] = 0;
        assert!(decode_evst(&bytes).is_err());
        // a header claiming u64::MAX events must not allocate
        let mut bytes = encode_evst(&EventStream::empty(4, 4));
        bytes[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_evst(&bytes).is_err());
    }

    #[test]
    fn evst_header_layout() {
        let s = EventStream::new(346, 260, vec![ev(7, 1, 2, -1)]).unwrap();
        let b = encode_evst(&s);
        assert_eq!(&b[..4], b"EVST");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 346);
        assert_eq!(u16::from_le_bytes([b[8], b[9]]), 260);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 1);
        assert_eq!(b.len(), EVST_HEADER_LEN + EVST_RECORD_LEN);
        assert_eq!(b[18 + 12] as i8, -1);
    }

    #[test]
    fn csv_reader_accepts_header_and_comments() {
        let text = "# debug dump\nt,x,y,p\n5, 1, 0, 1\n9,0,1,0\n";
        let s = read_events_csv(text.as_bytes(), 2, 2).unwrap();
        assert_eq!(s.events(), &[ev(5, 1, 0, 1), ev(9, 0, 1, -1)]);
        assert!(read_events_csv("1,0,0,2\n".as_bytes(), 2, 2).is_err());
        assert!(read_events_csv("1,5,0,1\n".as_bytes(), 2, 2).is_err());
        let mut out = Vec::new();
        write_events_csv(&s, &mut out).unwrap();
        assert_eq!(read_events_csv(out.as_slice(), 2, 2).unwrap(), s);
    }

    proptest! {
        #[test]
        fn evst_round_trip(seed in any::<u64>(), n in 0usize..200) {
            let s = random_stream(seed, n, 37, 21, 5_000_000);
            prop_assert_eq!(decode_evst(&encode_evst(&s)).unwrap(), s);
        }

        #[test]
        fn voxel_weights_sum_to_polarity(seed in any::<u64>(), n in 1usize..300, bins in 2usize..40) {
            let s = random_stream(seed, n, 8, 8, 77_777);
            let g = build_voxel_grid(&s, 0, 77_777, bins).unwrap();
            let pol: f64 = s.events().iter().map(|e| e.p.sign()).sum();
            prop_assert!((g.sum() - pol).abs() <= 1e-9 * n as f64);
        }

        #[test]
        fn doubling_threshold_never_adds_events(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Image> = (0..6)
                .map(|_| {
                    let vals: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
                    gray(4, 4, |y, x| vals[y * 4 + x])
                })
                .collect();
            let ts: Vec<u64> = (0..6).map(|i| i * 100).collect();
            let base = SimulatorConfig { threshold: 0.15, ..Default::default() };
            let coarse = SimulatorConfig { threshold: 0.3, ..Default::default() };
            let n1 = simulate_events(&frames, &ts, &base).unwrap().len();
            let n2 = simulate_events(&frames, &ts, &coarse).unwrap().len();
            prop_assert!(n2 <= n1);
        }
    }
}
