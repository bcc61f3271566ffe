//! Training objectives and evaluation metrics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::uniform;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;
const PSNR_STAR_MIN_GRAY: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
}

/// Frozen random convolution stack standing in for a pretrained feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualSpec {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub slope: f64,
    pub seed: u64,
}

impl Default for PerceptualSpec {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            strides: vec![1, 2, 2],
            slope: 0.2,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_perceptual: f64,
    pub eps_charbonnier: f64,
    pub lambda_temp: f64,
    pub charbonnier_reduction: Reduction,
    pub perceptual: PerceptualSpec,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_perceptual: 0.5,
            eps_charbonnier: 1e-4,
            lambda_temp: 1.0,
            charbonnier_reduction: Reduction::Mean,
            perceptual: PerceptualSpec::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_perceptual", self.lambda_perceptual),
            ("eps_charbonnier", self.eps_charbonnier),
            ("lambda_temp", self.lambda_temp),
        ] {
            ensure!(
                v.is_finite() && v >= 0.0,
                InvalidArgument,
                "{name} must be finite and non-negative"
            );
        }
        let p = &self.perceptual;
        ensure!(
            !p.channels.is_empty() && p.channels.len() == p.strides.len(),
            InvalidArgument,
            "perceptual channels and strides must be non-empty and of equal length"
        );
        ensure!(
            p.channels.iter().chain(&p.strides).all(|&v| v > 0),
            InvalidArgument,
            "perceptual layer sizes must be positive"
        );
        Ok(())
    }
}

/// `Φ`: 3×3 convolutions with leaky activations; every stage output is compared.
#[derive(Clone, Debug)]
pub struct Perceptual {
    layers: Vec<(Tensor, Tensor, usize)>,
    slope: f64,
}

impl Perceptual {
    pub fn new(spec: &PerceptualSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut cin = 3;
        let layers = spec
            .channels
            .iter()
            .zip(&spec.strides)
            .map(|(&cout, &stride)| {
                let bound = 1.0 / ((cin * 9) as f64).sqrt();
                let w = uniform(&mut rng, &[cout, cin, 3, 3], bound);
                let b = uniform(&mut rng, &[cout], bound);
                cin = cout;
                (w, b, stride)
            })
            .collect();
        Self {
            layers,
            slope: spec.slope,
        }
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, b, stride) in &self.layers {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            h = g.conv2d(h, w, Some(b), *stride, 1, 1);
            h = g.leaky_relu(h, self.slope);
            out.push(h);
        }
        out
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    ensure!(
        a.same_size(b),
        ShapeMismatch,
        "images differ in size: {}x{} vs {}x{}",
        a.height(),
        a.width(),
        b.height(),
        b.width()
    );
    Ok(())
}

/// `mean √(d² + ε²) + λ · mean_s mean |Φ_s(en) − Φ_s(gt)|`
pub fn reconstruction_graph(
    g: &mut Graph,
    en: Var,
    gt: Var,
    cfg: &LossConfig,
    phi: &Perceptual,
) -> Var {
    let d = g.sub(en, gt);
    let ch = g.charbonnier(d, cfg.eps_charbonnier);
    let ch = g.mean(ch);
    if cfg.lambda_perceptual == 0.0 {
        return ch;
    }
    let fe = phi.features(g, en);
    let fg = phi.features(g, gt);
    let n = fe.len() as f64;
    let mut terms = Vec::with_capacity(fe.len());
    for (a, b) in fe.into_iter().zip(fg) {
        let d = g.sub(a, b);
        let d = g.abs(d);
        terms.push(g.mean(d));
    }
    let mut p = terms[0];
    for &t in &terms[1..] {
        p = g.add(p, t);
    }
    let p = g.mul_scalar(p, cfg.lambda_perceptual / n);
    g.add(ch, p)
}

/// `mean |(en_t − en_prev) − (gt_t − gt_prev)|`
pub fn temporal_graph(g: &mut Graph, en_t: Var, en_prev: Var, gt_t: Var, gt_prev: Var) -> Var {
    let de = g.sub(en_t, en_prev);
    let dg = g.sub(gt_t, gt_prev);
    let d = g.sub(de, dg);
    let d = g.abs(d);
    g.mean(d)
}

pub fn reconstruction_loss(en: &Image, gt: &Image, cfg: &LossConfig) -> Result<f64> {
    check_same(en, gt)?;
    cfg.validate()?;
    let phi = Perceptual::new(&cfg.perceptual);
    let mut g = Graph::inference();
    let a = g.constant(en.to_tensor());
    let b = g.constant(gt.to_tensor());
    let l = reconstruction_graph(&mut g, a, b, cfg, &phi);
    Ok(g.value(l).data()[0])
}

pub fn temporal_loss(en_t: &Image, en_prev: &Image, gt_t: &Image, gt_prev: &Image) -> Result<f64> {
    for other in [en_prev, gt_t, gt_prev] {
        check_same(en_t, other)?;
    }
    let n = en_t.data().len() as f64;
    let sum: f64 = (0..en_t.data().len())
        .map(|i| {
            ((en_t.data()[i] - en_prev.data()[i]) - (gt_t.data()[i] - gt_prev.data()[i])).abs()
        })
        .sum();
    Ok(sum / n)
}

/// `rec + λ_temp · temp`; pass `None` for the first frame of a sequence.
pub fn total_loss(rec: f64, temp: Option<f64>, cfg: &LossConfig) -> f64 {
    match temp {
        Some(t) => rec + cfg.lambda_temp * t,
        None => rec,
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn psnr_from_mse(m: f64) -> f64 {
    if m < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

/// PSNR in dB with unit peak; callers clamp inputs to `[0, 1]`.
pub fn psnr(en: &Image, gt: &Image) -> Result<f64> {
    check_same(en, gt)?;
    Ok(psnr_from_mse(mse(en.data(), gt.data())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrStar {
    pub value: f64,
    /// Brightness ratio `mean gray(gt) / mean gray(en)`; 1 when the fallback was taken.
    pub ratio: f64,
    /// The enhanced frame was near black, so plain PSNR was reported.
    pub fallback: bool,
}

/// PSNR after rescaling `en` to the mean gray level of `gt`.
pub fn psnr_star(en: &Image, gt: &Image) -> Result<PsnrStar> {
    check_same(en, gt)?;
    let mean_gray = |img: &Image| {
        let g = img.grayscale();
        g.iter().sum::<f64>() / g.len() as f64
    };
    let me = mean_gray(en);
    if me <= PSNR_STAR_MIN_GRAY {
        return Ok(PsnrStar {
            value: psnr(en, gt)?,
            ratio: 1.0,
            fallback: true,
        });
    }
    let ratio = mean_gray(gt) / me;
    let scaled = en.map(|v| (v * ratio).clamp(0.0, 1.0));
    Ok(PsnrStar {
        value: psnr(&scaled, gt)?,
        ratio,
        fallback: false,
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of the grayscale images over all fully contained 11×11 Gaussian windows.
pub fn ssim(en: &Image, gt: &Image) -> Result<f64> {
    check_same(en, gt)?;
    let (h, w) = (en.height(), en.width());
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        InvalidArgument,
        "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
    );
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (x, y) = (en.grayscale(), gt.grayscale());
    let g1 = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g1.iter().enumerate() {
                for (j, gj) in g1.iter().enumerate() {
                    let wgt = gi * gj;
                    let p = (oy + i) * w + ox + j;
                    mx += wgt * x[p];
                    my += wgt * y[p];
                    sxx += wgt * (x[p] * x[p]);
                    syy += wgt * (y[p] * y[p]);
                    sxy += wgt * (x[p] * y[p]);
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * (mx * my) + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_idx: usize,
    pub psnr: f64,
    pub psnr_star: f64,
    pub ssim: f64,
    pub psnr_star_fallback: bool,
}

impl FrameMetrics {
    /// Clamps `en` to `[0, 1]` before measuring.
    pub fn measure(frame_idx: usize, en: &Image, gt: &Image) -> Result<Self> {
        let en = en.clamped();
        let star = psnr_star(&en, gt)?;
        Ok(Self {
            frame_idx,
            psnr: psnr(&en, gt)?,
            psnr_star: star.value,
            ssim: ssim(&en, gt)?,
            psnr_star_fallback: star.fallback,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub frames: usize,
    pub psnr: f64,
    pub psnr_star: f64,
    pub ssim: f64,
    pub psnr_star_fallbacks: usize,
    /// Outputs were clamped to `[0, 1]` before measuring.
    pub clamped: bool,
}

impl MetricReport {
    pub fn push(&mut self, m: FrameMetrics) {
        self.frames.push(m);
    }

    pub fn summary(&self) -> MetricSummary {
        let n = self.frames.len().max(1) as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| self.frames.iter().map(f).sum::<f64>() / n;
        MetricSummary {
            frames: self.frames.len(),
            psnr: mean(|m| m.psnr),
            psnr_star: mean(|m| m.psnr_star),
            ssim: mean(|m| m.ssim),
            psnr_star_fallbacks: self.frames.iter().filter(|m| m.psnr_star_fallback).count(),
            clamped: true,
        }
    }

    /// Columns: `frame_idx, psnr, psnr_star, ssim`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| crate::Error::Format {
            format: "csv",
            reason: e.to_string(),
        };
        wr.write_record(["frame_idx", "psnr", "psnr_star", "ssim"])
            .map_err(io)?;
        for m in &self.frames {
            wr.write_record([
                m.frame_idx.to_string(),
                m.psnr.to_string(),
                m.psnr_star.to_string(),
                m.ssim.to_string(),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| io(e.into()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        let v: Vec<f64> = (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect();
        Image::new(h, w, v).unwrap()
    }

    fn no_perceptual() -> LossConfig {
        LossConfig {
            lambda_perceptual: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn charbonnier_at_zero_is_eps() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = rand_image(&mut r, 8, 8);
        let l = reconstruction_loss(&x, &x, &LossConfig::default()).unwrap();
        assert!((l - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn charbonnier_uniform_offset() {
        let a = Image::filled(4, 4, 0.5);
        let b = Image::filled(4, 4, 0.53);
        let l = reconstruction_loss(&a, &b, &no_perceptual()).unwrap();
        assert!((l - (0.03f64.powi(2) + 1e-8).sqrt()).abs() < 1e-12);
        assert!((l - 0.03000017).abs() < 1e-8);
    }

    #[test]
    fn reconstruction_matches_direct_sum() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_image(&mut r, 6, 7), rand_image(&mut r, 6, 7));
        let cfg = LossConfig::default();
        let charb: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y).powi(2) + 1e-8).sqrt())
            .sum::<f64>()
            / a.data().len() as f64;
        // perceptual stages via a nested-loop convolution
        let phi = Perceptual::new(&cfg.perceptual);
        let stages = |img: &Image| {
            let mut x = img.data().to_vec();
            let (mut c, mut h, mut w) = (3usize, img.height(), img.width());
            let mut out = Vec::new();
            for (wt, bias, s) in &phi.layers {
                let co = wt.shape()[0];
                let (oh, ow) = ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1);
                let mut y = vec![0.0; co * oh * ow];
                for o in 0..co {
                    for py in 0..oh {
                        for px in 0..ow {
                            let mut acc = bias.data()[o];
                            for ci in 0..c {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (py * s + ky) as isize - 1;
                                        let ix = (px * s + kx) as isize - 1;
                                        if iy >= 0
                                            && ix >= 0
                                            && (iy as usize) < h
                                            && (ix as usize) < w
                                        {
                                            acc += wt.data()[((o * c + ci) * 3 + ky) * 3 + kx]
                                                * x[(ci * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                            y[(o * oh + py) * ow + px] = if acc > 0.0 { acc } else { 0.2 * acc };
                        }
                    }
                }
                out.push(y.clone());
                x = y;
                (c, h, w) = (co, oh, ow);
            }
            out
        };
        let (sa, sb) = (stages(&a), stages(&b));
        let p: f64 = sa
            .iter()
            .zip(&sb)
            .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).abs()).sum::<f64>() / u.len() as f64)
            .sum::<f64>()
            / 3.0;
        let got = reconstruction_loss(&a, &b, &cfg).unwrap();
        assert!((got - (charb + 0.5 * p)).abs() < 1e-12);
    }

    #[test]
    fn temporal_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (rand_image(&mut r, 3, 3), rand_image(&mut r, 3, 3));
        let shift = |img: &Image, d: f64| img.map(|v| v + d);
        assert!(
            temporal_loss(&shift(&a, 0.2), &a, &shift(&b, 0.2), &b)
                .unwrap()
                .abs()
                < 1e-15
        );
        let l = temporal_loss(&a, &a, &shift(&b, 0.1), &b).unwrap();
        assert!((l - 0.1).abs() < 1e-12);

        let imgs: Vec<Image> = (0..4).map(|_| rand_image(&mut r, 4, 5)).collect();
        let expect: f64 = (0..60)
            .map(|i| {
                let d =
                    imgs[0].data()[i] - imgs[1].data()[i] - imgs[2].data()[i] + imgs[3].data()[i];
                d.abs()
            })
            .sum::<f64>()
            / 60.0;
        let got = temporal_loss(&imgs[0], &imgs[1], &imgs[2], &imgs[3]).unwrap();
        assert!((got - expect).abs() < 1e-14);
        assert!(temporal_loss(&imgs[0], &Image::filled(4, 4, 0.0), &imgs[2], &imgs[3]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = |l| LossConfig {
            lambda_temp: l,
            ..Default::default()
        };
        assert!((total_loss(0.2, Some(0.05), &cfg(1.0)) - 0.25).abs() < 1e-15);
        assert_eq!(total_loss(0.2, Some(0.05), &cfg(0.0)), 0.2);
        assert!((total_loss(0.1, Some(0.1), &cfg(2.0)) - 0.3).abs() < 1e-15);
        assert_eq!(total_loss(0.2, None, &cfg(1.0)), 0.2);
    }

    #[test]
    fn psnr_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = rand_image(&mut r, 5, 5);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let a = Image::filled(4, 4, 0.3);
        let b = Image::filled(4, 4, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let y = rand_image(&mut r, 5, 5);
        let m: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            / 75.0;
        assert!((psnr(&x, &y).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-12);
    }

    #[test]
    fn psnr_star_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let gt = rand_image(&mut r, 6, 6);
        let half = gt.map(|v| 0.5 * v);
        let s = psnr_star(&half, &gt).unwrap();
        assert_eq!(s.value, 100.0);
        assert!((s.ratio - 2.0).abs() < 1e-12);
        assert_eq!(psnr_star(&gt, &gt).unwrap().value, psnr(&gt, &gt).unwrap());

        // doubling clips bright pixels, so recovery is no longer exact
        let bright = Image::from_fn(6, 6, |c, y, x| 0.3 + 0.1 * ((c + y + x) % 6) as f64);
        let doubled = bright.map(|v| (2.0 * v).min(1.0));
        let gray = |img: &Image| img.grayscale().iter().sum::<f64>() / 36.0;
        let ratio = gray(&bright) / gray(&doubled);
        let scaled: Vec<f64> = doubled
            .data()
            .iter()
            .map(|v| (v * ratio).clamp(0.0, 1.0))
            .collect();
        let m = scaled
            .iter()
            .zip(bright.data())
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            / 108.0;
        let s = psnr_star(&doubled, &bright).unwrap();
        assert!((s.value - 10.0 * (1.0 / m).log10()).abs() < 1e-12);
        assert!(s.value < 100.0);

        let black = Image::filled(6, 6, 0.0);
        let s = psnr_star(&black, &gt).unwrap();
        assert!(s.fallback);
        assert_eq!(s.value, psnr(&black, &gt).unwrap());
    }

    #[test]
    fn ssim_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = rand_image(&mut r, 16, 13);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let y = rand_image(&mut r, 16, 13);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!(ssim(&Image::filled(10, 20, 0.1), &Image::filled(10, 20, 0.1)).is_err());

        // constant images: only the luminance term survives
        let (a, b) = (Image::filled(12, 12, 0.5), Image::filled(12, 12, 0.6));
        let (c1, mx, my) = (1e-4, 0.5, 0.6);
        let expect = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn finite_diff_check(f: impl Fn(&mut Graph, Var) -> Var, x0: &Tensor) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let l = f(&mut g, x);
        let grads = g.backward(l);
        let analytic = grads.get(x).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::inference();
                let x = g.constant(t);
                let l = f(&mut g, x);
                g.value(l).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(rel < 1e-4, "index {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn reconstruction_gradient() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let en = rand_image(&mut r, 6, 6).to_tensor();
        let gt = rand_image(&mut r, 6, 6).to_tensor();
        let cfg = LossConfig::default();
        let phi = Perceptual::new(&cfg.perceptual);
        finite_diff_check(
            |g, x| {
                let y = g.constant(gt.clone());
                reconstruction_graph(g, x, y, &cfg, &phi)
            },
            &en,
        );
    }

    #[test]
    fn temporal_gradient() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let ts: Vec<Tensor> = (0..4)
            .map(|_| rand_image(&mut r, 4, 4).to_tensor())
            .collect();
        finite_diff_check(
            |g, x| {
                let v: Vec<Var> = ts[1..].iter().map(|t| g.constant(t.clone())).collect();
                temporal_graph(g, x, v[0], v[1], v[2])
            },
            &ts[0],
        );
    }

    #[test]
    fn report_csv_and_summary() {
        let mut rep = MetricReport::default();
        for i in 0..3 {
            rep.push(FrameMetrics {
                frame_idx: i,
                psnr: 20.0 + i as f64,
                psnr_star: 21.0,
                ssim: 0.5,
                psnr_star_fallback: i == 2,
            });
        }
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("frame_idx,psnr,psnr_star,ssim"));
        let s = rep.summary();
        assert_eq!((s.frames, s.psnr, s.psnr_star_fallbacks), (3, 21.0, 1));
    }

    proptest! {
        #[test]
        fn psnr_star_recovers_scaled_gt(seed in any::<u64>(), c in 0.1f64..=1.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gt = rand_image(&mut r, 5, 5);
            let en = gt.map(|v| c * v);
            let s = psnr_star(&en, &gt).unwrap();
            prop_assert_eq!(s.value, 100.0);
            let manual = en.map(|v| (v * s.ratio).clamp(0.0, 1.0));
            prop_assert_eq!(s.value, psnr(&manual, &gt).unwrap());
        }

        #[test]
        fn temporal_invariant_to_common_offset(seed in any::<u64>(), k in -0.5f64..0.5) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let imgs: Vec<Image> = (0..5).map(|_| rand_image(&mut r, 3, 4)).collect();
            let off = &imgs[4];
            let add = |a: &Image| Image::new(3, 4, a.data().iter().zip(off.data()).map(|(p, q)| p + k * q).collect()).unwrap();
            let base = temporal_loss(&imgs[0], &imgs[1], &imgs[2], &imgs[3]).unwrap();
            let moved = temporal_loss(&add(&imgs[0]), &add(&imgs[1]), &imgs[2], &imgs[3]).unwrap();
            prop_assert!((base - moved).abs() < 1e-12);
        }

        #[test]
        fn losses_non_negative(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (rand_image(&mut r, 4, 4), rand_image(&mut r, 4, 4));
            prop_assert!(reconstruction_loss(&a, &b, &LossConfig::default()).unwrap() >= 1e-4);
            let s = ssim(&rand_image(&mut r, 11, 11), &rand_image(&mut r, 11, 11)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
