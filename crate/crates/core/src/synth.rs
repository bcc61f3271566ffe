//! Procedural paired videos, low-light degradation and the on-disk dataset.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! manifest.json
//! <id>/normal/000000.png ...
//! <id>/low/000000.png ...
//! <id>/events.evst
//! <id>/timestamps.txt      one microsecond timestamp per line
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::event::{
    build_voxel_grid, load_evst, save_evst, simulate_events, EventStream, SimulatorConfig,
    VoxelGrid,
};
use crate::image::Image;

pub const MANIFEST_VERSION: u32 = 1;
pub const NOISE_MODEL: &str =
    "synthetic stand-in: s*I^gamma + Gaussian-approximated shot noise + Gaussian read noise";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    #[default]
    Gradient,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: f64,
    pub shapes: usize,
    pub texture: Texture,
    /// Linear drift in pixels per frame.
    pub speed: f64,
    /// Amplitude of the sinusoidal wobble in pixels.
    pub wobble: f64,
    /// Pixel values are mapped affinely into this range, which bounds the
    /// per-frame mean brightness as well.
    pub value_range: [f64; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 16,
            fps: 30.0,
            shapes: 3,
            texture: Texture::Gradient,
            speed: 1.5,
            wobble: 2.0,
            value_range: [0.1, 0.9],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (32..=4096).contains(&self.height) && (32..=4096).contains(&self.width),
            InvalidArgument,
            "resolution {}x{} must lie in 32..=4096",
            self.height,
            self.width
        );
        ensure!(
            (4..=100_000).contains(&self.frames),
            InvalidArgument,
            "need 4..=100000 frames"
        );
        ensure!(
            self.fps.is_finite() && self.fps > 0.0,
            InvalidArgument,
            "fps must be positive"
        );
        ensure!(self.shapes <= 64, InvalidArgument, "at most 64 shapes");
        ensure!(
            self.speed.is_finite() && self.wobble.is_finite(),
            InvalidArgument,
            "motion parameters must be finite"
        );
        let [lo, hi] = self.value_range;
        ensure!(
            (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo < hi,
            InvalidArgument,
            "value_range must satisfy 0 <= lo < hi <= 1"
        );
        Ok(())
    }

    pub fn timestamps(&self) -> Vec<u64> {
        (0..self.frames)
            .map(|k| (k as f64 * 1e6 / self.fps).round() as u64)
            .collect()
    }
}

struct Shape {
    square: bool,
    center: [f64; 2],
    velocity: [f64; 2],
    phase: f64,
    period: f64,
    radius: f64,
    color: [f64; 3],
}

fn background(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.6));
    let mut out = vec![0.0; 3 * h * w];
    match cfg.texture {
        Texture::Flat => {
            for c in 0..3 {
                out[c * h * w..(c + 1) * h * w].fill(base[c]);
            }
        }
        Texture::Gradient => {
            let gx: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
            let gy: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let v = base[c]
                            + gx[c] * (x as f64 / w as f64 - 0.5)
                            + gy[c] * (y as f64 / h as f64 - 0.5);
                        out[(c * h + y) * w + x] = v;
                    }
                }
            }
        }
        Texture::Noise => {
            // bilinear value noise on an 8-pixel lattice
            let cell = 8usize;
            let (gh, gw) = (h / cell + 2, w / cell + 2);
            for c in 0..3 {
                let grid: Vec<f64> = (0..gh * gw)
                    .map(|_| base[c] + rng.random_range(-0.2..0.2))
                    .collect();
                for y in 0..h {
                    for x in 0..w {
                        let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
                        let (iy, ix) = (fy as usize, fx as usize);
                        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                        let at = |yy: usize, xx: usize| grid[yy * gw + xx];
                        let v = (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix + 1))
                            + ty * ((1.0 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
                        out[(c * h + y) * w + x] = v;
                    }
                }
            }
        }
    }
    out
}

/// Renders moving anti-aliased disks and squares over a static background.
/// Returns frames with values inside `value_range` and timestamps in microseconds.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(Vec<Image>, Vec<u64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let bg = background(cfg, &mut rng);
    let shapes: Vec<Shape> = (0..cfg.shapes)
        .map(|_| {
            let angle = rng.random_range(0.0..2.0 * PI);
            Shape {
                square: rng.random_bool(0.5),
                center: [
                    rng.random_range(0.2..0.8) * h as f64,
                    rng.random_range(0.2..0.8) * w as f64,
                ],
                velocity: [cfg.speed * angle.sin(), cfg.speed * angle.cos()],
                phase: rng.random_range(0.0..2.0 * PI),
                period: rng.random_range(6.0..16.0),
                radius: rng.random_range(0.08..0.18) * h.min(w) as f64,
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            }
        })
        .collect();
    let [lo, hi] = cfg.value_range;
    let frames = (0..cfg.frames)
        .map(|k| {
            let kf = k as f64;
            let mut data = bg.clone();
            for s in &shapes {
                let wob = cfg.wobble * (2.0 * PI * kf / s.period + s.phase).sin();
                let cy = s.center[0] + s.velocity[0] * kf + wob;
                let cx = s.center[1] + s.velocity[1] * kf - wob;
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        let d = if s.square {
                            dy.abs().max(dx.abs())
                        } else {
                            (dy * dy + dx * dx).sqrt()
                        };
                        let cover = (s.radius - d + 0.5).clamp(0.0, 1.0);
                        if cover > 0.0 {
                            for c in 0..3 {
                                let v = &mut data[(c * h + y) * w + x];
                                *v = (1.0 - cover) * *v + cover * s.color[c];
                            }
                        }
                    }
                }
            }
            for v in &mut data {
                *v = lo + (hi - lo) * v.clamp(0.0, 1.0);
            }
            Image::new(h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, cfg.timestamps()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    /// Exposure scale `s`; 0.125 mirrors a 1/8 neutral-density filter.
    pub scale: f64,
    pub gamma: f64,
    /// Standard deviation of additive read noise.
    pub read_noise: f64,
    /// Shot-noise variance per unit of signal; 0 disables it.
    pub shot_gain: f64,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            scale: 0.125,
            gamma: 1.0,
            read_noise: 0.003,
            shot_gain: 0.001,
            seed: 0,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.scale > 0.0 && self.scale <= 1.0,
            InvalidArgument,
            "scale must lie in (0, 1]"
        );
        ensure!(
            self.gamma >= 1.0 && self.gamma.is_finite(),
            InvalidArgument,
            "gamma must be >= 1"
        );
        ensure!(
            self.read_noise >= 0.0
                && self.read_noise.is_finite()
                && self.shot_gain >= 0.0
                && self.shot_gain.is_finite(),
            InvalidArgument,
            "noise parameters must be finite and non-negative"
        );
        Ok(())
    }
}

/// `clamp(s·I^γ + shot + read, 0, 1)` with shot noise `~ N(0, gain·s·I^γ)`.
pub fn degrade(frames: &[Image], cfg: &DegradeConfig) -> Result<Vec<Image>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    frames
        .iter()
        .map(|f| {
            ensure!(
                f.data().iter().all(|v| (0.0..=1.0).contains(v)),
                InvalidArgument,
                "frames must lie in [0, 1]"
            );
            Ok(f.map(|v| {
                let signal = cfg.scale * v.powf(cfg.gamma);
                let n1: f64 = StandardNormal.sample(&mut rng);
                let n2: f64 = StandardNormal.sample(&mut rng);
                let shot = (cfg.shot_gain * signal).sqrt() * n1;
                (signal + shot + cfg.read_noise * n2).clamp(0.0, 1.0)
            }))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    /// Simulate from the degraded frames, as an event camera under low light would see them.
    #[default]
    Low,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: Vec<SceneConfig>,
    pub degrade: DegradeConfig,
    pub simulator: SimulatorConfig,
    pub events_from: EventSource,
    /// The last `test_scenes` scenes form the test split.
    pub test_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: vec![SceneConfig::default()],
            degrade: DegradeConfig::default(),
            simulator: SimulatorConfig::default(),
            events_from: EventSource::Low,
            test_scenes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedSample {
    pub id: String,
    pub split: Split,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub normal_dir: String,
    pub low_dir: String,
    pub events: String,
    pub timestamps: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub noise_model: String,
    pub events_from: EventSource,
    pub samples: Vec<PairedSample>,
}

fn check_relative(p: &str) -> Result<()> {
    let path = Path::new(p);
    ensure!(
        !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_))),
        InvalidArgument,
        "manifest path `{p}` must be relative without `..`"
    );
    Ok(())
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.version == MANIFEST_VERSION,
            InvalidArgument,
            "unsupported manifest version {}",
            self.version
        );
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            ensure!(
                ids.insert(&s.id),
                InvalidArgument,
                "duplicate sample id `{}`",
                s.id
            );
            ensure!(
                s.frames >= 2,
                InvalidArgument,
                "sample `{}` needs at least 2 frames",
                s.id
            );
            ensure!(
                s.height > 0
                    && s.width > 0
                    && s.height <= u16::MAX as usize
                    && s.width <= u16::MAX as usize,
                InvalidArgument,
                "sample `{}` has an invalid resolution",
                s.id
            );
            for p in [&s.normal_dir, &s.low_dir, &s.events, &s.timestamps] {
                check_relative(p)?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairedSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

fn frame_name(k: usize) -> String {
    format!("{k:06}.png")
}

/// Rounds to the 8-bit grid used on disk.
pub fn quantize(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Generates every scene, writes frames, events and timestamps under `root`,
/// and returns (and writes) the manifest.
pub fn make_dataset(root: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<Manifest> {
    let root = root.as_ref();
    ensure!(
        !cfg.scenes.is_empty(),
        InvalidArgument,
        "dataset needs at least one scene"
    );
    ensure!(
        cfg.test_scenes <= cfg.scenes.len(),
        InvalidArgument,
        "more test scenes than scenes"
    );
    cfg.degrade.validate()?;
    for s in &cfg.scenes {
        s.validate()?;
        ensure!(
            s.height <= u16::MAX as usize && s.width <= u16::MAX as usize,
            InvalidArgument,
            "resolution exceeds the event format"
        );
    }
    mkdir(root)?;
    let n_train = cfg.scenes.len() - cfg.test_scenes;
    let mut samples = Vec::with_capacity(cfg.scenes.len());
    for (i, scene) in cfg.scenes.iter().enumerate() {
        let id = format!("seq{i:03}");
        let (normal, ts) = generate_scene(scene)?;
        let normal: Vec<Image> = normal.iter().map(quantize).collect();
        let degrade_cfg = DegradeConfig {
            seed: cfg.degrade.seed.wrapping_add(i as u64),
            ..cfg.degrade.clone()
        };
        let low: Vec<Image> = degrade(&normal, &degrade_cfg)?
            .iter()
            .map(quantize)
            .collect();
        let sim_cfg = SimulatorConfig {
            seed: cfg.simulator.seed.wrapping_add(i as u64),
            ..cfg.simulator.clone()
        };
        let source = match cfg.events_from {
            EventSource::Low => &low,
            EventSource::Normal => &normal,
        };
        let events = simulate_events(source, &ts, &sim_cfg)?;

        let dir = root.join(&id);
        for (sub, frames) in [("normal", &normal), ("low", &low)] {
            let d = dir.join(sub);
            mkdir(&d)?;
            for (k, f) in frames.iter().enumerate() {
                f.save_png(d.join(frame_name(k)))?;
            }
        }
        save_evst(&events, dir.join("events.evst"))?;
        let ts_text: String = ts.iter().map(|t| format!("{t}\n")).collect();
        let ts_path = dir.join("timestamps.txt");
        fs::write(&ts_path, ts_text).map_err(|e| Error::io(&ts_path, e))?;

        samples.push(PairedSample {
            id: id.clone(),
            split: if i < n_train {
                Split::Train
            } else {
                Split::Test
            },
            frames: scene.frames,
            height: scene.height,
            width: scene.width,
            normal_dir: format!("{id}/normal"),
            low_dir: format!("{id}/low"),
            events: format!("{id}/events.evst"),
            timestamps: format!("{id}/timestamps.txt"),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        noise_model: NOISE_MODEL.to_string(),
        events_from: cfg.events_from,
        samples,
    };
    manifest.save(root.join("manifest.json"))?;
    Ok(manifest)
}

/// One paired sequence loaded from disk.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub id: String,
    pub normal: Vec<Image>,
    pub low: Vec<Image>,
    pub events: EventStream,
    pub timestamps: Vec<u64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    /// Event window for frame `k`: the interval ending at frame `max(k, 1)`,
    /// so the first frame reuses the first inter-frame interval.
    pub fn window(&self, k: usize) -> (u64, u64) {
        window(&self.timestamps, k)
    }

    pub fn voxel_grid(&self, k: usize, bins: usize) -> Result<VoxelGrid> {
        let (t0, t1) = self.window(k);
        build_voxel_grid(&self.events, t0, t1, bins)
    }
}

pub fn window(timestamps: &[u64], k: usize) -> (u64, u64) {
    let j = k.max(1);
    (timestamps[j - 1], timestamps[j])
}

pub fn parse_timestamps(text: &str) -> Result<Vec<u64>> {
    let fail = |reason: String| Error::format("timestamps", reason);
    let mut out: Vec<u64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let t: u64 = line
            .parse()
            .map_err(|_| fail(format!("line {}: `{line}`", i + 1)))?;
        if let Some(&prev) = out.last() {
            if t <= prev {
                return Err(fail(format!("line {}: timestamps must increase", i + 1)));
            }
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_frames(dir: &Path, count: usize) -> Result<Vec<Image>> {
    (0..count)
        .map(|k| Image::load_png(dir.join(frame_name(k))))
        .collect()
}

pub fn load_sequence(root: impl AsRef<Path>, s: &PairedSample) -> Result<Sequence> {
    let root = root.as_ref();
    let p = |rel: &str| -> Result<PathBuf> {
        check_relative(rel)?;
        Ok(root.join(rel))
    };
    let normal = load_frames(&p(&s.normal_dir)?, s.frames)?;
    let low = load_frames(&p(&s.low_dir)?, s.frames)?;
    let ts_path = p(&s.timestamps)?;
    let ts_text = fs::read_to_string(&ts_path).map_err(|e| Error::io(&ts_path, e))?;
    let timestamps = parse_timestamps(&ts_text)?;
    let events = load_evst(p(&s.events)?)?;
    ensure!(
        timestamps.len() == s.frames,
        ShapeMismatch,
        "`{}`: {} timestamps for {} frames",
        s.id,
        timestamps.len(),
        s.frames
    );
    for f in normal.iter().chain(&low) {
        ensure!(
            f.height() == s.height && f.width() == s.width,
            ShapeMismatch,
            "`{}`: frame size {}x{} differs from manifest",
            s.id,
            f.height(),
            f.width()
        );
    }
    ensure!(
        events.width() as usize == s.width && events.height() as usize == s.height,
        ShapeMismatch,
        "`{}`: event sensor size differs from manifest",
        s.id
    );
    Ok(Sequence {
        id: s.id.clone(),
        normal,
        low,
        events,
        timestamps,
    })
}
