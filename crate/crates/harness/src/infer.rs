//! Streaming inference, evaluation reports and directory enhancement.

use std::fs;
use std::path::{Path, PathBuf};

use evlight_core::checkpoint::Checkpoint;
use evlight_core::event::{build_voxel_grid, load_evst, read_events_csv};
use evlight_core::fusion::EvLight;
use evlight_core::graph::Graph;
use evlight_core::image::{save_gray16, Image};
use evlight_core::objectives::{FrameMetrics, MetricReport, MetricSummary};
use evlight_core::synth::{parse_timestamps, window, Split};
use evlight_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_split, SequenceData};
use crate::error::{config_ensure, Error, Result};
use crate::train::pinned;

/// Reflect-pads the bottom and right edges of a `C×H×W` tensor up to
/// multiples of `m` (mirror without repeating the edge sample).
pub fn reflect_pad(t: &Tensor, m: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    config_ensure!(
        ph - h < h && pw - w < w,
        "cannot reflect-pad {h}x{w} to {ph}x{pw}: padding exceeds the image"
    );
    let src = t.data();
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                out.push(src[(ch * h + sy) * w + reflect(x, w)]);
            }
        }
    }
    Ok(Tensor::new([c, ph, pw], out)?)
}

/// Keeps the top-left `h×w` window.
pub fn crop_to(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = t.dims3();
    if (th, tw) == (h, w) {
        return t.clone();
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * th + y) * tw;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::new([c, h, w], out).expect("crop size fits")
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// Unclamped network output.
    pub enhanced: Image,
    pub light_up: Image,
    /// Normalized SNR map, row-major `H×W`.
    pub snr: Vec<f64>,
}

/// Runs the sequence frame by frame with the recurrent state carried along.
/// Inputs of any size are reflect-padded to a multiple of 4 and cropped back.
pub fn enhance_sequence(
    model: &EvLight,
    low: &[Tensor],
    voxels: &[Tensor],
) -> Result<Vec<FrameOutput>> {
    config_ensure!(
        low.len() == voxels.len(),
        "{} frames but {} voxel grids",
        low.len(),
        voxels.len()
    );
    let mut state: Option<Tensor> = None;
    let mut out = Vec::with_capacity(low.len());
    for (img, vox) in low.iter().zip(voxels) {
        let (_, h, w) = img.dims3();
        let mut g = Graph::inference();
        let x = g.constant(reflect_pad(img, 4)?);
        let s = state.take().map(|s| g.constant(s));
        let vars = model.forward_graph(&mut g, &model.params, x, &reflect_pad(vox, 4)?, s)?;
        state = vars.state.map(|v| g.value(v).clone());
        out.push(FrameOutput {
            enhanced: Image::from_tensor(&crop_to(g.value(vars.enhanced), h, w))?,
            light_up: Image::from_tensor(&crop_to(g.value(vars.light_up), h, w))?,
            snr: crop_to(g.value(vars.snr), h, w).into_data(),
        });
    }
    Ok(out)
}

/// Standard deviation over frames of `Δmean(en) − Δmean(gt)`, with outputs clamped.
pub fn brightness_flicker(en: &[Image], gt: &[Image]) -> f64 {
    let means = |xs: &[Image], clamp: bool| -> Vec<f64> {
        xs.iter()
            .map(|i| if clamp { i.clamped().mean() } else { i.mean() })
            .collect()
    };
    let (me, mg) = (means(en, true), means(gt, false));
    let d: Vec<f64> = (1..me.len().min(mg.len()))
        .map(|k| (me[k] - me[k - 1]) - (mg[k] - mg[k - 1]))
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: String,
    pub metrics: MetricReport,
    pub summary: MetricSummary,
    /// Metrics of the model's own light-up image `I_lu`.
    pub light_up: MetricSummary,
    pub flicker: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: MetricSummary,
    pub light_up: MetricSummary,
    /// Mean flicker over sequences.
    pub flicker: f64,
    pub sequences: Vec<SequenceReport>,
}

fn summary_of(reports: impl Iterator<Item = FrameMetrics>) -> MetricSummary {
    let mut all = MetricReport::default();
    reports.for_each(|m| all.push(m));
    all.summary()
}

pub fn evaluate_sequence(model: &EvLight, s: &SequenceData) -> Result<SequenceReport> {
    let outputs = enhance_sequence(model, &s.low, &s.voxels)?;
    let gt =
        s.gt.iter()
            .map(Image::from_tensor)
            .collect::<evlight_core::Result<Vec<_>>>()?;
    let mut metrics = MetricReport::default();
    let mut lu = MetricReport::default();
    for (k, (o, g)) in outputs.iter().zip(&gt).enumerate() {
        metrics.push(FrameMetrics::measure(k, &o.enhanced, g)?);
        lu.push(FrameMetrics::measure(k, &o.light_up, g)?);
    }
    let enhanced: Vec<Image> = outputs.into_iter().map(|o| o.enhanced).collect();
    Ok(SequenceReport {
        id: s.id.clone(),
        summary: metrics.summary(),
        metrics,
        light_up: lu.summary(),
        flicker: brightness_flicker(&enhanced, &gt),
    })
}

/// Evaluates sequences in parallel; the report order follows `data`.
pub fn evaluate_model(model: &EvLight, data: &[SequenceData]) -> Result<EvalReport> {
    let sequences = data
        .par_iter()
        .map(|s| evaluate_sequence(model, s))
        .collect::<Result<Vec<_>>>()?;
    let flicker = sequences.iter().map(|s| s.flicker).sum::<f64>() / sequences.len().max(1) as f64;
    Ok(EvalReport {
        summary: summary_of(
            sequences
                .iter()
                .flat_map(|s| s.metrics.frames.iter().copied()),
        ),
        light_up: frame_weighted(sequences.iter().map(|s| &s.light_up)),
        flicker,
        sequences,
    })
}

fn frame_weighted<'a>(parts: impl Iterator<Item = &'a MetricSummary> + Clone) -> MetricSummary {
    let n: usize = parts.clone().map(|s| s.frames).sum();
    let w = |f: fn(&MetricSummary) -> f64| {
        parts.clone().map(|s| f(s) * s.frames as f64).sum::<f64>() / n.max(1) as f64
    };
    MetricSummary {
        frames: n,
        psnr: w(|m| m.psnr),
        psnr_star: w(|m| m.psnr_star),
        ssim: w(|m| m.ssim),
        psnr_star_fallbacks: parts.clone().map(|s| s.psnr_star_fallbacks).sum(),
        clamped: true,
    }
}

impl EvalReport {
    /// Writes `<id>.csv` per sequence and `summary.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.sequences {
            let path = dir.join(format!("{}.csv", s.id));
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            s.metrics.write_csv(f)?;
        }
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Loads a checkpoint, evaluates `split` of the manifest and optionally writes reports.
pub fn evaluate(
    ckpt: &Path,
    manifest: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<EvalReport> {
    pinned(|| {
        let model = Checkpoint::load(ckpt)?.to_model()?;
        let data = load_split(manifest, split, model.config.bins)?;
        let report = evaluate_model(&model, &data)?;
        if let Some(dir) = out {
            report.write(dir)?;
        }
        Ok(report)
    })
}

/// Frames, events and timestamps found in an input directory.
#[derive(Clone, Debug)]
pub struct InputSequence {
    pub frames: Vec<Image>,
    pub names: Vec<String>,
    pub timestamps: Vec<u64>,
    pub events: evlight_core::event::EventStream,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads `<dir>/low/*.png` (or `<dir>/*.png`), `timestamps.txt`, and
/// `events.evst` or `events.csv` (`t,x,y,p` rows).
pub fn read_input_dir(dir: &Path) -> Result<InputSequence> {
    let frame_dir = if dir.join("low").is_dir() {
        dir.join("low")
    } else {
        dir.to_path_buf()
    };
    let files = png_files(&frame_dir)?;
    config_ensure!(
        files.len() >= 2,
        "{} holds {} frames; need at least 2",
        frame_dir.display(),
        files.len()
    );
    let frames = files
        .iter()
        .map(Image::load_png)
        .collect::<evlight_core::Result<Vec<_>>>()?;
    let (h, w) = (frames[0].height(), frames[0].width());
    config_ensure!(
        frames.iter().all(|f| f.height() == h && f.width() == w),
        "frames in {} differ in size",
        frame_dir.display()
    );
    let ts_path = dir.join("timestamps.txt");
    let text = fs::read_to_string(&ts_path).map_err(|e| Error::io(&ts_path, e))?;
    let timestamps = parse_timestamps(&text)?;
    config_ensure!(
        timestamps.len() == frames.len(),
        "{} timestamps for {} frames",
        timestamps.len(),
        frames.len()
    );
    config_ensure!(
        h <= u16::MAX as usize && w <= u16::MAX as usize,
        "frames too large for event coordinates"
    );
    let evst = dir.join("events.evst");
    let events = if evst.exists() {
        load_evst(&evst)?
    } else {
        let csv_path = dir.join("events.csv");
        let f = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        read_events_csv(f, w as u16, h as u16)?
    };
    config_ensure!(
        events.width() as usize == w && events.height() as usize == h,
        "event sensor {}x{} differs from frames {w}x{h}",
        events.width(),
        events.height()
    );
    let names = files
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    Ok(InputSequence {
        frames,
        names,
        timestamps,
        events,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceSummary {
    pub frames: usize,
    pub out: PathBuf,
    pub aux: Option<PathBuf>,
}

/// Enhances every frame of `input` into `out`, keeping the frame file names.
/// With `dump_aux`, writes `aux/snr_<name>` (16-bit) and `aux/light_up_<name>`.
pub fn enhance_dir(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    dump_aux: bool,
) -> Result<EnhanceSummary> {
    pinned(|| {
        let model = Checkpoint::load(ckpt)?.to_model()?;
        let seq = read_input_dir(input)?;
        let voxels = (0..seq.frames.len())
            .map(|k| {
                let (t0, t1) = window(&seq.timestamps, k);
                Ok(build_voxel_grid(&seq.events, t0, t1, model.config.bins)?
                    .data()
                    .clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let low: Vec<Tensor> = seq.frames.iter().map(Image::to_tensor).collect();
        let outputs = enhance_sequence(&model, &low, &voxels)?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let aux = dump_aux.then(|| out.join("aux"));
        if let Some(a) = &aux {
            fs::create_dir_all(a).map_err(|e| Error::io(a, e))?;
        }
        for (o, name) in outputs.iter().zip(&seq.names) {
            o.enhanced.clamped().save_png(out.join(name))?;
            if let Some(a) = &aux {
                let (h, w) = (o.light_up.height(), o.light_up.width());
                save_gray16(a.join(format!("snr_{name}")), h, w, &o.snr)?;
                o.light_up
                    .clamped()
                    .save_png(a.join(format!("light_up_{name}")))?;
            }
        }
        Ok(EnhanceSummary {
            frames: outputs.len(),
            out: out.to_path_buf(),
            aux,
        })
    })
}
